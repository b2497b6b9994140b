import json
import tempfile
from io import StringIO
from pathlib import Path
from unittest import mock

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase, tag

from clean.services import svd_decompose, svd_residual_rms
from cube.io import read_cube, read_mask, write_cube
from cube.models import FrequencyAxis, Mask, SpectralCube
from imbench.exceptions import ConfigError
from imbench.tables import read_table
from restore.services import SpectralPolyRestorer, mean_fill_restore, restore_dataset_variants
from .config import load_config
from .models import RunManifest, file_checksum
from .services import VARIANT_FIELDS, residual_masks

TINY_CONFIG = """\
# tiny run for tests
run.seed = 7

sky.n_pix = 16
sky.n_channels = 32
sky.channel_width_khz = 92.5

foreground.components = synchrotron,point_sources

rfi.broadband_rate = 5
rfi.broadband_width_min = 2
rfi.broadband_width_max = 6
rfi.broadband_duration_min = 5
rfi.broadband_duration_max = 20
rfi.narrowband_channel_prob = 0.1
rfi.outlier_rate = 0.01

clean.svd_modes = 0, 1, 2, 4, 8
clean.svd_spectrum_modes = 4
clean.ica_components = 2

preprocess.downsample_factor = 2

evaluate.patch_size = 16
evaluate.max_patches = 40
evaluate.ell_bins = 4
"""


class PipelineTestCase(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.addCleanup(self.tmp.cleanup)

    def write_config(self, text=TINY_CONFIG, name='run.cfg'):
        path = self.root / name
        path.write_text(text, encoding='utf-8')
        return path

    def run_command(self, name, config, out, **options):
        stdout = StringIO()
        call_command(name, config=str(config), out=str(out), profile='desk', stdout=stdout, **options)
        return stdout.getvalue()


class LoadConfigTests(PipelineTestCase):
    def test_profile_defaults_fill_missing_keys(self):
        config = load_config(self.write_config(), profile='desk')
        self.assertEqual(config['sky']['n_pix'], 16)
        self.assertEqual(config['sky']['dec_min'], 25.0)
        self.assertEqual(config['evaluate']['max_fraction'], 0.40)
        self.assertEqual(config['clean']['svd_modes'], [0, 1, 2, 4, 8])

    def test_seed_override_changes_hash(self):
        path = self.write_config()
        first = load_config(path, profile='desk')
        second = load_config(path, profile='desk', seed=8)
        self.assertEqual(second.seed, 8)
        self.assertNotEqual(first.config_hash, second.config_hash)

    def test_output_dir_is_not_hashed(self):
        path = self.write_config()
        first = load_config(path, profile='desk', output_dir=self.root / 'a')
        second = load_config(path, profile='desk', output_dir=self.root / 'b')
        self.assertEqual(first.config_hash, second.config_hash)

    def test_unknown_key_is_fatal(self):
        path = self.write_config(TINY_CONFIG + 'sky.n_pixels = 16\n')
        with self.assertRaisesMessage(ConfigError, 'sky.n_pixels: Unknown key.'):
            load_config(path, profile='desk')

    def test_unknown_section_is_fatal(self):
        path = self.write_config(TINY_CONFIG + 'beam.fwhm = 1\n')
        with self.assertRaisesMessage(ConfigError, 'beam.fwhm'):
            load_config(path, profile='desk')

    def test_malformed_line(self):
        path = self.write_config(TINY_CONFIG + 'just words\n')
        with self.assertRaisesMessage(ConfigError, 'line'):
            load_config(path, profile='desk')

    def test_inverted_dec_range(self):
        path = self.write_config(TINY_CONFIG + 'sky.dec_min = 60\n')
        with self.assertRaisesMessage(ConfigError, 'sky.dec_min'):
            load_config(path, profile='desk')

    def test_odd_pixel_count(self):
        path = self.write_config(TINY_CONFIG.replace('sky.n_pix = 16', 'sky.n_pix = 15'))
        with self.assertRaisesMessage(ConfigError, 'sky.n_pix: Must be even.'):
            load_config(path, profile='desk')

    def test_band_above_line_frequency(self):
        path = self.write_config(TINY_CONFIG + 'sky.center_frequency_mhz = 1420.4\n')
        with self.assertRaisesMessage(ConfigError, 'sky.center_frequency_mhz'):
            load_config(path, profile='desk')

    def test_rate_bounds(self):
        path = self.write_config(TINY_CONFIG + 'rfi.outlier_rate = 1.5\n')
        with self.assertRaisesMessage(ConfigError, 'rfi.outlier_rate'):
            load_config(path, profile='desk')

    def test_non_flat_cosmology(self):
        path = self.write_config(TINY_CONFIG + 'cosmology.omega_m = 0.5\n')
        with self.assertRaisesMessage(ConfigError, 'flat'):
            load_config(path, profile='desk')

    def test_unknown_foreground_component(self):
        path = self.write_config(TINY_CONFIG.replace('point_sources', 'dust'))
        with self.assertRaisesMessage(ConfigError, 'foreground.components'):
            load_config(path, profile='desk')

    def test_foreground_override(self):
        path = self.write_config(TINY_CONFIG + 'foreground.synchrotron.amplitude = 350\n')
        models = load_config(path, profile='desk').foreground_models
        self.assertEqual(models[0].name, 'synchrotron')
        self.assertEqual(models[0].amplitude, 350.0)
        self.assertEqual(models[0].beta, 2.4)
        self.assertEqual(models[1].amplitude, 57.0)

    def test_override_of_unlisted_component(self):
        path = self.write_config(TINY_CONFIG + 'foreground.galactic_free_free.xi = 10\n')
        with self.assertRaisesMessage(ConfigError, 'foreground.galactic_free_free'):
            load_config(path, profile='desk')

    def test_svd_modes_limited_by_patch_size(self):
        path = self.write_config(TINY_CONFIG.replace('0, 1, 2, 4, 8', '0, 1, 32'))
        with self.assertRaisesMessage(ConfigError, 'clean.svd_modes'):
            load_config(path, profile='desk')

    def test_external_restorer_needs_path(self):
        path = self.write_config(TINY_CONFIG + 'restore.method = external\n')
        with self.assertRaisesMessage(ConfigError, 'restore.external_path'):
            load_config(path, profile='desk')

    def test_robust_restoration_options(self):
        extra = 'flagging.outlier_passes = 2\nrestore.clip_sigma = 4\nrestore.clip_passes = 3\n'
        config = load_config(self.write_config(TINY_CONFIG + extra), profile='desk')
        self.assertEqual(config['flagging']['outlier_passes'], 2)
        restorer = config.build_restorer()
        self.assertEqual((restorer.clip_sigma, restorer.clip_passes), (4.0, 3))

    def test_zero_clip_sigma_fits_every_cell(self):
        config = load_config(self.write_config(TINY_CONFIG + 'restore.clip_sigma = 0\n'), profile='desk')
        self.assertIsNone(config.build_restorer().clip_sigma)

    def test_outlier_passes_bounds(self):
        path = self.write_config(TINY_CONFIG + 'flagging.outlier_passes = 0\n')
        with self.assertRaisesMessage(ConfigError, 'flagging.outlier_passes'):
            load_config(path, profile='desk')

    def test_missing_file(self):
        with self.assertRaisesMessage(ConfigError, 'does not exist'):
            load_config(self.root / 'absent.cfg', profile='desk')


class ValidateConfigCommandTests(PipelineTestCase):
    def test_valid_config(self):
        output = self.run_command('validate_config', self.write_config(), self.root / 'out')
        self.assertIn('Configuration is valid', output)
        self.assertIn('"n_pix": 16', output)

    def test_config_error_exit_code(self):
        path = self.write_config(TINY_CONFIG + 'sky.dec_min = 60\n')
        with self.assertRaises(CommandError) as raised:
            self.run_command('validate_config', path, self.root / 'out')
        self.assertEqual(raised.exception.returncode, 2)
        self.assertIn('sky.dec_min', str(raised.exception))


class RunManifestTests(PipelineTestCase):
    def test_save_and_verify(self):
        artifact = self.root / 'data.bin'
        artifact.write_bytes(b'abc')
        manifest = RunManifest('hash')
        manifest.record_artifact(self.root, artifact)
        manifest.save(self.root)
        self.assertEqual(manifest.verify(self.root), [])
        artifact.write_bytes(b'abd')
        self.assertEqual(manifest.verify(self.root), ['data.bin: checksum mismatch'])
        artifact.unlink()
        self.assertEqual(manifest.verify(self.root), ['data.bin: missing'])

    def test_reopen_keeps_matching_manifest(self):
        manifest = RunManifest('hash')
        manifest.artifacts['x'] = '0'
        manifest.save(self.root)
        self.assertEqual(RunManifest.open(self.root, 'hash').artifacts, {'x': '0'})
        self.assertEqual(RunManifest.open(self.root, 'other').artifacts, {})

    def test_timings_kept_out_of_manifest(self):
        manifest = RunManifest('hash')
        manifest.end_stage('simulate', 1.23456)
        manifest.save(self.root)
        payload = json.loads((self.root / 'manifest.json').read_text())
        self.assertNotIn('timings', payload)
        self.assertEqual(json.loads((self.root / 'timings.json').read_text()), {'simulate': 1.235})


class ResidualMaskTests(SimpleTestCase):
    def test_variant_masks(self):
        channels = Mask(np.array([[True, False, False], [True, False, False]]))
        outliers = Mask(np.array([[False, True, False], [False, False, False]]))
        masks = residual_masks(channels, outliers)
        self.assertEqual(masks['a'], channels.union(outliers))
        self.assertEqual(masks['b'], channels)
        self.assertEqual(masks['c'], outliers)
        self.assertEqual(masks['d'].count, 0)


class VariantModeScanTests(SimpleTestCase):
    """SVD residuals of the four datasets as stored, interference left in unrestored cells"""

    def setUp(self):
        rng = np.random.default_rng(11)
        n_rows, n_channels = 200, 40
        nu = np.linspace(0.98, 1.02, n_channels)
        truth = (
            rng.uniform(5, 10, (n_rows, 1)) * nu ** -2.7
            + rng.uniform(0.5, 1, (n_rows, 1)) * nu ** -2.1
            + 1e-3 * rng.standard_normal((n_rows, n_channels))
        )
        data = truth.copy()
        columns = [3, 8, 12, 17, 21, 26, 29, 33, 36, 38]
        data[:, columns] += 1e3 * rng.uniform(0.5, 1.5, (n_rows, len(columns)))
        channels = np.zeros(data.shape, bool)
        channels[:, columns] = True

        open_columns = np.setdiff1d(np.arange(n_channels), columns)
        rows = rng.choice(n_rows, 30, replace=False)
        cells = (rows, rng.choice(open_columns, 30))
        data[cells] += rng.uniform(1e2, 1e3, 30)
        outliers = np.zeros(data.shape, bool)
        outliers[cells] = True

        cube = SpectralCube(data, FrequencyAxis(1.0, 1.0, n_channels))
        variants = restore_dataset_variants(cube, Mask(channels), Mask(outliers), SpectralPolyRestorer(2))
        ks = range(1, 9)
        self.scan = {
            variant: svd_residual_rms(svd_decompose(getattr(variants, field).data), ks)
            for variant, field in VARIANT_FIELDS.items()
        }

    def test_residuals_ordered_by_restoration_coverage(self):
        scan = self.scan
        self.assertTrue(np.all(scan['a'] >= scan['b']))
        self.assertTrue(np.all(scan['b'] >= scan['d']))
        self.assertTrue(np.all(scan['a'] >= scan['c']))
        self.assertTrue(np.all(scan['c'] >= scan['d']))

    def test_partial_restorations_are_distinguishable(self):
        self.assertTrue(np.all(self.scan['b'] > 10 * self.scan['d']))
        self.assertTrue(np.all(self.scan['c'] > 10 * self.scan['d']))


class StageCommandTests(PipelineTestCase):
    def test_run_all(self):
        out = self.root / 'nested' / 'run'
        self.run_command('run_all', self.write_config(), out)

        manifest = json.loads((out / 'manifest.json').read_text())
        self.assertEqual(manifest['failures'], [])
        self.assertEqual(
            manifest['stages'],
            {'simulate': 'ok', 'contaminate': 'ok', 'restore': 'ok', 'clean_eval': 'ok'},
        )
        for name, checksum in manifest['artifacts'].items():
            self.assertEqual(file_checksum(out / name), checksum, name)
        for name in ('truth.total', 'truth.hi', 'truth.fg', 'contaminated.imc', 'mask.detected.imm',
                     'variant_d.imc', 'reports/summary.csv', 'reports/svd_modes.mock.csv',
                     'reports/rms_fraction.mock.polyfit.a.csv', 'residuals/ica.d.imc'):
            self.assertIn(name, manifest['artifacts'])
        self.assertTrue((out / 'timings.json').exists())

        # unrestored variant is the contaminated cube
        self.assertEqual(file_checksum(out / 'variant_a.imc'), file_checksum(out / 'contaminated.imc'))

        config_hash = manifest['config_hash']
        summary_path = out / 'reports' / 'summary.csv'
        self.assertEqual(summary_path.read_text().splitlines()[0], f'# config_hash={config_hash}')
        summary = read_table(summary_path)
        self.assertEqual(
            list(summary.columns), ['method', 'variant', 'rms', 'cm_cu', 'ssim', 'psnr', 'delta_log_cl']
        )
        self.assertEqual(len(summary), 12)

        scan = read_table(out / 'reports' / 'svd_modes.mock.csv')
        for _, rows in scan.groupby('variant'):
            medians = rows.sort_values('k')['median'].to_numpy()
            self.assertTrue(np.all(np.diff(medians) <= 1e-12))

        fractions = read_table(out / 'reports' / 'rms_fraction.mock.svd.b.csv')
        self.assertEqual(list(fractions.columns), ['bin_lo', 'bin_hi', 'count', 'p25', 'median', 'p75'])

    def test_rerun_manifests_identical(self):
        config = self.write_config()
        self.run_command('run_all', config, self.root / 'first')
        self.run_command('run_all', config, self.root / 'second')
        first = (self.root / 'first' / 'manifest.json').read_bytes()
        second = (self.root / 'second' / 'manifest.json').read_bytes()
        self.assertEqual(first, second)

        self.run_command('run_all', config, self.root / 'first')
        self.assertEqual((self.root / 'first' / 'manifest.json').read_bytes(), first)

    def test_stages_run_standalone(self):
        config = self.write_config()
        out = self.root / 'run'
        self.run_command('simulate', config, out)
        self.run_command('contaminate', config, out)
        self.run_command('restore', config, out)
        self.run_command('clean_eval', config, out)
        manifest = RunManifest.open(out, load_config(config, profile='desk').config_hash)
        self.assertTrue(manifest.ok)
        self.assertEqual(manifest.verify(out), [])

    def test_missing_inputs(self):
        with self.assertRaises(CommandError) as raised:
            self.run_command('restore', self.write_config(), self.root / 'empty')
        self.assertEqual(raised.exception.returncode, 3)
        self.assertIn('missing input contaminated.imc', str(raised.exception))

        manifest = json.loads((self.root / 'empty' / 'manifest.json').read_text())
        self.assertEqual(manifest['stages'], {'restore': 'failed'})
        self.assertEqual(manifest['failures'][0]['stage'], 'restore')

    def test_partial_clean_eval_failures_recorded_once(self):
        config = self.write_config()
        out = self.root / 'run'
        for stage in ('simulate', 'contaminate', 'restore'):
            self.run_command(stage, config, out)

        with mock.patch('pipeline.services.spectrum_comparison', side_effect=ValueError('empty spectrum')):
            with self.assertRaises(CommandError) as raised:
                self.run_command('clean_eval', config, out)
        self.assertEqual(raised.exception.returncode, 3)
        self.assertIn('12 method/variant combinations failed', str(raised.exception))

        manifest = json.loads((out / 'manifest.json').read_text())
        self.assertEqual(manifest['stages']['clean_eval'], 'failed')
        self.assertCountEqual(
            manifest['failures'],
            [
                {'stage': 'clean_eval', 'error': f'{method}.{variant}: empty spectrum'}
                for method in ('polyfit', 'svd', 'ica') for variant in 'abcd'
            ],
        )

    def test_seed_flag_changes_sky(self):
        config = self.write_config()
        self.run_command('simulate', config, self.root / 'a')
        self.run_command('simulate', config, self.root / 'b', seed=8)
        self.assertNotEqual(
            file_checksum(self.root / 'a' / 'truth.total'),
            file_checksum(self.root / 'b' / 'truth.total'),
        )

    def test_contaminate_is_deterministic(self):
        config = self.write_config()
        out = self.root / 'run'
        self.run_command('simulate', config, out)
        self.run_command('contaminate', config, out)
        first = read_mask(out / 'mask.detected.imm')
        truth = read_mask(out / 'mask.truth.imm')
        self.run_command('contaminate', config, out)
        self.assertEqual(read_mask(out / 'mask.detected.imm'), first)
        self.assertEqual(read_mask(out / 'mask.truth.imm'), truth)
        report = json.loads((out / 'flag_report.json').read_text())
        self.assertEqual(report['detected_cells'], first.count)
        self.assertGreater(first.count, 0)

    def test_zero_rate_rfi_flags_little(self):
        text = TINY_CONFIG.replace('rfi.broadband_rate = 5', 'rfi.broadband_rate = 0')
        text = text.replace('rfi.narrowband_channel_prob = 0.1', 'rfi.narrowband_channel_prob = 0')
        text = text.replace('rfi.outlier_rate = 0.01', 'rfi.outlier_rate = 0')
        config = self.write_config(text)
        out = self.root / 'run'
        self.run_command('simulate', config, out)
        self.run_command('contaminate', config, out)
        self.assertEqual(read_mask(out / 'mask.truth.imm').count, 0)
        self.assertEqual(
            file_checksum(out / 'contaminated.imc'), file_checksum(out / 'truth.total')
        )
        # a 3 sigma two-sided tail holds 0.27% of Gaussian cells
        self.assertLess(read_mask(out / 'mask.detected.imm').masked_fraction, 0.02)

    def test_restorers_give_different_full_variants(self):
        out_poly, out_mean = self.root / 'poly', self.root / 'mean'
        poly = self.write_config(TINY_CONFIG + 'restore.method = spectral_poly\n', 'poly.cfg')
        mean = self.write_config(TINY_CONFIG + 'restore.method = mean_fill\n', 'mean.cfg')
        for config, out in ((poly, out_poly), (mean, out_mean)):
            self.run_command('simulate', config, out)
            self.run_command('contaminate', config, out)
            self.run_command('restore', config, out)
        self.assertNotEqual(file_checksum(out_poly / 'variant_d.imc'), file_checksum(out_mean / 'variant_d.imc'))
        self.assertEqual(file_checksum(out_poly / 'variant_a.imc'), file_checksum(out_mean / 'variant_a.imc'))


class ExternalRestorationTests(PipelineTestCase):
    def prepare(self):
        base = self.write_config(name='base.cfg')
        out = self.root / 'run'
        self.run_command('simulate', base, out)
        self.run_command('contaminate', base, out)
        return out

    def external_config(self, restored_path):
        return self.write_config(
            TINY_CONFIG + f'restore.method = external\nrestore.external_path = {restored_path}\n',
            'external.cfg',
        )

    def test_contract_holds(self):
        out = self.prepare()
        contaminated = read_cube(out / 'contaminated.imc')
        detected = read_mask(out / 'mask.detected.imm')
        restored = contaminated.with_data(mean_fill_restore(contaminated.data, detected))
        write_cube(restored, self.root / 'restored.imc')

        self.run_command('restore', self.external_config(self.root / 'restored.imc'), out)
        np.testing.assert_array_equal(read_cube(out / 'variant_d.imc').data, restored.data)

    def test_contract_violation_exit_code(self):
        out = self.prepare()
        contaminated = read_cube(out / 'contaminated.imc')
        write_cube(contaminated.with_data(contaminated.data * 1.01), self.root / 'restored.imc')

        with self.assertRaises(CommandError) as raised:
            self.run_command('restore', self.external_config(self.root / 'restored.imc'), out)
        self.assertEqual(raised.exception.returncode, 4)
        rejections = read_table(out / 'restoration_rejections.csv')
        self.assertEqual(list(rejections.columns), ['cell', 'expected', 'found', 'deviation'])
        self.assertGreater(len(rejections), 0)


@tag('slow')
class DeskProfileTrendTests(PipelineTestCase):
    """Trends of the full desk-scale run"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.run_tmp = tempfile.TemporaryDirectory()
        cls.out = Path(cls.run_tmp.name) / 'desk'
        config = Path(__file__).resolve().parent.parent / 'configs' / 'desk.cfg'
        call_command('run_all', config=str(config), out=str(cls.out), profile='desk', stdout=StringIO())

    @classmethod
    def tearDownClass(cls):
        cls.run_tmp.cleanup()
        super().tearDownClass()

    def report(self, name):
        return read_table(self.out / 'reports' / name)

    def test_restoration_lowers_polyfit_rms(self):
        baseline = self.report('rms_fraction.mock.polyfit.a.csv')
        restored = self.report('rms_fraction.mock.polyfit.d.csv')
        populated = (baseline['count'] >= 10) & (restored['count'] >= 10)
        self.assertTrue(populated.any())
        self.assertTrue(np.all(restored['median'][populated] <= baseline['median'][populated]))

        gaps = (baseline['median'] - restored['median']) / baseline['median']
        low = populated & (baseline['bin_hi'] <= 0.1 + 1e-9)
        high = populated & (baseline['bin_lo'] >= 0.3 - 1e-9)
        self.assertTrue(low.any(), "no populated bin at or below 10% masked")
        self.assertTrue(high.any(), "no populated bin at or above 30% masked")
        self.assertGreater(gaps[high].mean(), gaps[low].mean())

    def test_svd_rms_ordered_by_restoration_coverage(self):
        scan = self.report('svd_modes.mock.csv')
        scan = scan[(scan['k'] >= 1) & (scan['k'] <= 20)]
        medians = scan.pivot(index='k', columns='variant', values='median')
        self.assertTrue((scan['count'] >= 20).all())
        self.assertTrue(np.all(medians['a'] >= medians['b']))
        self.assertTrue(np.all(medians['b'] >= medians['d']))
        self.assertTrue(np.all(medians['a'] >= medians['c']))
        self.assertTrue(np.all(medians['c'] >= medians['d']))

    def test_full_restoration_brings_spectra_closer(self):
        summary = self.report('summary.csv').set_index(['method', 'variant'])
        for method in ('svd', 'ica'):
            self.assertLess(
                summary.loc[(method, 'd'), 'delta_log_cl'],
                summary.loc[(method, 'a'), 'delta_log_cl'],
            )

    def test_manifest_complete(self):
        manifest = json.loads((self.out / 'manifest.json').read_text())
        self.assertEqual(manifest['failures'], [])
        self.assertEqual(RunManifest.open(self.out, manifest['config_hash']).verify(self.out), [])
