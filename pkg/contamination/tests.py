import tempfile

import numpy as np
from django.test import SimpleTestCase

from cube.models import FrequencyAxis, Mask, SpectralCube
from .models import FlagReport, RfiModel
from .services import (
    apply_rfi_template,
    combine_flags,
    extract_patches,
    flag_channels,
    flag_cube,
    flag_outliers,
    inject_rfi,
    patch_draw_count,
    read_patches,
    write_patches,
)

QUIET = dict(broadband_rate=0.0, narrowband_channel_prob=0.0, outlier_rate=0.0)


def gaussian_cube(n_rows, n_channels, seed=0):
    data = np.random.default_rng(seed).standard_normal((n_rows, n_channels))
    return SpectralCube(data, FrequencyAxis(800e6, 92.5e3, n_channels))


class RfiModelTests(SimpleTestCase):
    def test_probabilities_checked(self):
        with self.assertRaises(ValueError):
            RfiModel(outlier_rate=1.5)
        with self.assertRaises(ValueError):
            RfiModel(narrowband_channel_prob=-0.1)

    def test_amplitude_range_ordered(self):
        with self.assertRaises(ValueError):
            RfiModel(amplitude_scale=(100.0, 10.0))


class InjectRfiTests(SimpleTestCase):
    def test_zero_rates_leave_cube_untouched(self):
        cube = gaussian_cube(64, 32)
        contaminated, truth = inject_rfi(cube, RfiModel(**QUIET))
        self.assertEqual(contaminated, cube)
        self.assertEqual(truth.count, 0)

    def test_saturated_narrowband(self):
        cube = gaussian_cube(32, 16)
        model = RfiModel(broadband_rate=0.0, narrowband_channel_prob=1.0, outlier_rate=0.0)
        _, truth = inject_rfi(cube, model)
        self.assertTrue(truth.flags.all())

    def test_outlier_count_matches_rate(self):
        cube = gaussian_cube(256, 256)
        model = RfiModel(broadband_rate=0.0, narrowband_channel_prob=0.0, outlier_rate=0.01, seed=4)
        _, truth = inject_rfi(cube, model)
        self.assertLess(abs(truth.count - 655.36), 4 * np.sqrt(655.36))

    def test_truth_mask_marks_exactly_modified_cells(self):
        cube = gaussian_cube(2000, 64, seed=1)
        contaminated, truth = inject_rfi(cube, RfiModel(broadband_rate=2.0, seed=9))
        self.assertGreater(truth.count, 0)
        np.testing.assert_array_equal(truth.flags, contaminated.data != cube.data)

    def test_deterministic_per_seed(self):
        cube = gaussian_cube(500, 48)
        model = RfiModel(broadband_rate=2.0, seed=3)
        first, first_mask = inject_rfi(cube, model)
        second, second_mask = inject_rfi(cube, model)
        self.assertEqual(first, second)
        self.assertEqual(first_mask, second_mask)

    def test_zero_cube_uses_unit_scale(self):
        cube = SpectralCube(np.zeros((16, 8)), FrequencyAxis(1.0, 1.0, 8))
        with self.assertLogs('contamination.services', level='WARNING'):
            contaminated, truth = inject_rfi(cube, RfiModel(broadband_rate=0.0, narrowband_channel_prob=0.0, outlier_rate=0.5, seed=2))
        self.assertGreater(truth.count, 0)
        self.assertGreater(contaminated.data[truth.flags].min(), 9.999)

    def test_amplitudes_within_scale_range(self):
        cube = gaussian_cube(400, 64, seed=3)
        rms = np.sqrt(np.mean(cube.data ** 2))
        models = (
            RfiModel(broadband_rate=0.0, narrowband_channel_prob=0.5, outlier_rate=0.0, seed=5),
            RfiModel(broadband_rate=0.0, narrowband_channel_prob=0.0, outlier_rate=0.01, seed=5),
        )
        for model in models:
            contaminated, truth = inject_rfi(cube, model)
            added = (contaminated.data - cube.data)[truth.flags]
            self.assertGreater(added.size, 0)
            self.assertGreaterEqual(added.min(), 10.0 * rms * (1 - 1e-9))
            self.assertLessEqual(added.max(), 1000.0 * rms * (1 + 1e-9))

    def test_burst_blocks_share_one_amplitude(self):
        cube = gaussian_cube(1000, 32, seed=4)
        model = RfiModel(
            broadband_rate=10.0, broadband_width=(4, 8), broadband_duration=(20, 40),
            narrowband_channel_prob=0.0, outlier_rate=0.0, seed=8,
        )
        contaminated, truth = inject_rfi(cube, model)
        added = np.round((contaminated.data - cube.data)[truth.flags], 6)
        self.assertGreater(added.size, 100)
        # one level per burst, plus the sums where bursts overlap
        self.assertLess(np.unique(added).size, added.size / 10)


class RfiTemplateTests(SimpleTestCase):
    def test_template_window_added_at_flags(self):
        cube = gaussian_cube(20, 10)
        template_data = np.full((40, 30), 50.0)
        template_flags = np.zeros((40, 30), bool)
        template_flags[:, ::3] = True
        template = SpectralCube(template_data, FrequencyAxis(1.0, 1.0, 30))
        contaminated, truth = apply_rfi_template(cube, template, Mask(template_flags), seed=1)
        np.testing.assert_array_equal(truth.flags, contaminated.data != cube.data)
        np.testing.assert_allclose(contaminated.data[truth.flags], cube.data[truth.flags] + 50.0)
        self.assertGreater(truth.count, 0)

    def test_template_smaller_than_cube(self):
        cube = gaussian_cube(20, 10)
        template = SpectralCube(np.ones((10, 10)), FrequencyAxis(1.0, 1.0, 10))
        with self.assertRaises(ValueError):
            apply_rfi_template(cube, template, Mask.empty((10, 10)), seed=0)


class ChannelFlaggingTests(SimpleTestCase):
    def channel_cube(self, means, n_rows=10):
        data = np.tile(np.asarray(means, dtype=float), (n_rows, 1))
        return SpectralCube(data, FrequencyAxis(1.0, 1.0, len(means)))

    def test_constant_cube(self):
        report = flag_channels(self.channel_cube(np.full(50, 3.0)))
        self.assertEqual(report.flagged_channels, [])
        self.assertEqual(report.mask.count, 0)

    def test_gross_outlier(self):
        means = np.concatenate([np.linspace(-1e-3, 1e-3, 100), [1000.0]])
        report = flag_channels(self.channel_cube(means))
        self.assertEqual(report.flagged_channels, [100])
        self.assertTrue(report.mask.flags[:, 100].all())
        self.assertEqual(report.mask.count, 10)

    def test_iteration_uncovers_shadowed_channel(self):
        # 1000 inflates sigma so that 30 survives the first pass
        means = np.concatenate([np.linspace(-1.0, 1.0, 100), [1000.0, 30.0]])
        cube = self.channel_cube(means)
        self.assertEqual(flag_channels(cube, max_iterations=1).flagged_channels, [100])
        report = flag_channels(cube)
        self.assertEqual(report.flagged_channels, [100, 101])
        self.assertEqual(report.iterations, 3)

    def test_include_all_statistics(self):
        means = np.concatenate([np.linspace(-1.0, 1.0, 100), [1000.0, 30.0]])
        report = flag_channels(self.channel_cube(means), exclude_flagged=False)
        self.assertEqual(report.flagged_channels, [100])

    def test_needs_two_channels(self):
        with self.assertRaises(ValueError):
            flag_channels(self.channel_cube([1.0]))

    def test_recovers_injected_channels(self):
        found = total = 0
        for trial in range(20):
            cube = gaussian_cube(256, 216, seed=trial)
            model = RfiModel(
                broadband_rate=0.0,
                narrowband_channel_prob=0.05,
                outlier_rate=0.0,
                amplitude_scale=(100.0, 1000.0),
                seed=trial,
            )
            contaminated, truth = inject_rfi(cube, model)
            contaminated_channels = set(np.flatnonzero(truth.flags.all(axis=0)))
            flagged = set(flag_channels(contaminated).flagged_channels)
            found += len(contaminated_channels & flagged)
            total += len(contaminated_channels)
        self.assertGreater(total, 0)
        self.assertGreaterEqual(found / total, 0.95)


class OutlierFlaggingTests(SimpleTestCase):
    def test_spike_flagged(self):
        data = np.random.default_rng(5).standard_normal((1, 500))
        data[0, 123] = 50.0
        report = flag_outliers(SpectralCube(data, FrequencyAxis(1.0, 1.0, 500)))
        self.assertTrue(report.mask.flags[0, 123])

    def test_constant_row(self):
        cube = SpectralCube(np.full((3, 20), 2.5), FrequencyAxis(1.0, 1.0, 20))
        self.assertEqual(flag_outliers(cube).outlier_count, 0)

    def test_false_flag_rate_on_gaussian_data(self):
        cube = gaussian_cube(256, 1080, seed=12)
        report = flag_outliers(cube)
        rate = report.mask.masked_fraction
        self.assertGreaterEqual(rate, 0.001)
        self.assertLessEqual(rate, 0.006)

    def test_prior_cells_excluded(self):
        data = np.random.default_rng(6).standard_normal((2, 200))
        data[0, 10] = 1e4
        data[1, :] = 7.0
        prior = np.zeros((2, 200), bool)
        prior[0, 10] = True
        prior[1, :] = True
        cube = SpectralCube(data, FrequencyAxis(1.0, 1.0, 200))
        with self.assertLogs('contamination.services', level='INFO') as logs:
            report = flag_outliers(cube, Mask(prior))
        self.assertFalse(report.mask.flags[prior].any())
        self.assertTrue(any('fully masked rows' in line for line in logs.output))

    def test_prior_shape_mismatch(self):
        with self.assertRaises(ValueError):
            flag_outliers(gaussian_cube(4, 4), Mask.empty((4, 5)))

    def test_extra_passes_expose_shadowed_outlier(self):
        data = np.random.default_rng(8).standard_normal((1, 200))
        data[0, 20] = 1e4
        data[0, 150] = 60.0
        cube = SpectralCube(data, FrequencyAxis(1.0, 1.0, 200))
        single = flag_outliers(cube)
        self.assertTrue(single.mask.flags[0, 20])
        self.assertFalse(single.mask.flags[0, 150])
        self.assertEqual(single.iterations, 1)

        repeated = flag_outliers(cube, passes=3)
        self.assertTrue(repeated.mask.flags[0, 20])
        self.assertTrue(repeated.mask.flags[0, 150])
        self.assertGreaterEqual(repeated.iterations, 2)

    def test_passes_must_be_positive(self):
        with self.assertRaises(ValueError):
            flag_outliers(gaussian_cube(4, 4), passes=0)


class CombineFlagsTests(SimpleTestCase):
    def setUp(self):
        channels = np.zeros((4, 6), bool)
        channels[:, 2] = True
        outliers = np.zeros((4, 6), bool)
        outliers[0, 2] = outliers[1, 4] = outliers[3, 0] = True
        self.channels = FlagReport(mask=Mask(channels), flagged_channels=[2])
        self.outliers = FlagReport(mask=Mask(outliers), outlier_count=3)

    def test_empty(self):
        empty = FlagReport(mask=Mask.empty((3, 3)))
        self.assertEqual(combine_flags(empty, empty).count, 0)

    def test_inclusion_exclusion(self):
        combined = combine_flags(self.channels, self.outliers)
        self.assertEqual(combined.count, 4 + 3 - 1)

    def test_disjoint(self):
        outliers = Mask(self.outliers.mask.flags & ~self.channels.mask.flags)
        self.assertEqual(combine_flags(self.channels, outliers).count, 4 + 2)

    def test_commutative_and_idempotent(self):
        combined = combine_flags(self.channels, self.outliers)
        self.assertEqual(combined, combine_flags(self.outliers, self.channels))
        self.assertEqual(combine_flags(combined, combined), combined)

    def test_shape_mismatch(self):
        with self.assertRaises(ValueError):
            combine_flags(self.channels, Mask.empty((4, 5)))

    def test_flag_cube(self):
        data = np.random.default_rng(8).standard_normal((400, 40))
        data += np.linspace(-1.0, 1.0, 40) - data.mean(axis=0)
        data[:, 7] += 500.0
        data[3, 20] += 20.0
        flags = flag_cube(SpectralCube(data, FrequencyAxis(1.0, 1.0, 40)))
        self.assertEqual(flags.channels.flagged_channels, [7])
        self.assertTrue(flags.mask.flags[:, 7].all())
        self.assertTrue(flags.mask.flags[3, 20])


class PatchExtractionTests(SimpleTestCase):
    def test_draw_count(self):
        self.assertEqual(patch_draw_count(1000, 1080, 256), 49)

    def test_unmasked_cube_keeps_every_draw(self):
        cube = gaussian_cube(200, 100)
        samples = extract_patches(cube, Mask.empty(cube.shape), patch_size=32, seed=1)
        self.assertEqual(len(samples), patch_draw_count(200, 100, 32))
        for sample in samples:
            row, channel = sample.origin
            self.assertTrue(0 <= row <= 200 - 32 and 0 <= channel <= 100 - 32)
            np.testing.assert_array_equal(sample.data, cube.data[row:row + 32, channel:channel + 32])

    def test_fully_masked_cube(self):
        cube = gaussian_cube(64, 64)
        self.assertEqual(extract_patches(cube, Mask(np.ones((64, 64), bool)), patch_size=16), [])

    def test_threshold_discards_without_redraw(self):
        cube = gaussian_cube(128, 64)
        flags = np.zeros(cube.shape, bool)
        flags[:64] = True
        samples = extract_patches(cube, Mask(flags), patch_size=32, max_fraction=0.4, seed=2)
        self.assertLess(len(samples), patch_draw_count(128, 64, 32))
        self.assertTrue(all(sample.masked_fraction <= 0.4 for sample in samples))

    def test_reproducible_origins(self):
        cube = gaussian_cube(100, 100)
        first = [s.origin for s in extract_patches(cube, None, patch_size=20, seed=5)]
        second = [s.origin for s in extract_patches(cube, None, patch_size=20, seed=5)]
        self.assertEqual(first, second)

    def test_limit(self):
        cube = gaussian_cube(100, 100)
        self.assertEqual(len(extract_patches(cube, None, patch_size=20, seed=5, limit=3)), 3)

    def test_cube_smaller_than_patch(self):
        with self.assertRaises(ValueError):
            extract_patches(gaussian_cube(10, 300), None, patch_size=16)

    def test_patch_directory(self):
        cube = gaussian_cube(64, 48)
        flags = np.zeros(cube.shape, bool)
        flags[:, 5] = True
        samples = extract_patches(cube, Mask(flags), patch_size=16, seed=3)
        with tempfile.TemporaryDirectory() as directory:
            index = write_patches(samples, directory, axis=cube.axis, config_hash='abc')
            self.assertTrue(index.read_text().startswith('# config_hash=abc\n'))
            loaded = read_patches(directory)
        self.assertEqual(len(loaded), len(samples))
        for original, restored in zip(samples, loaded):
            self.assertEqual(restored.origin, original.origin)
            self.assertEqual(restored.masked_fraction, original.masked_fraction)
            np.testing.assert_array_equal(restored.data, original.data)
            np.testing.assert_array_equal(restored.mask, original.mask)
