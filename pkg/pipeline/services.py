"""
Pipeline stages: simulate, contaminate, restore and clean_eval.

Each stage reads the files of the stages before it from the output
directory, so every stage can be run on its own. Artifacts are recorded in
``manifest.json`` with their checksums.
"""

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from django.conf import settings
from scipy import linalg

from clean.services import remove_ica_components, remove_polyfit, remove_svd_modes, svd_decompose, svd_residual_rms
from contamination.services import (
    apply_rfi_template,
    extract_patches,
    flag_cube,
    inject_rfi,
    load_rfi_template,
    write_patches,
)
from cube.io import read_cube, read_mask, write_cube, write_mask
from cube.models import Mask
from cube.services import downsample_channels, fill_empty_channels
from evaluate import reports
from evaluate.services import (
    bin_by_masked_fraction,
    cm_cu,
    default_multipole_bins,
    normalized_offsets,
    psnr,
    rms,
    spectrum_comparison,
    ssim,
)
from imbench.exceptions import ImbenchError, RestorerContractError, StageError
from restore.services import mean_fill_restore, restore_dataset_variants
from skysim.services import compose_sky
from .models import RunManifest

logger = logging.getLogger(__name__)

STAGES = ('simulate', 'contaminate', 'restore', 'clean_eval')

TRUTH_FILES = {'total': 'truth.total', 'hi': 'truth.hi', 'fg': 'truth.fg'}
CONTAMINATED_FILE = 'contaminated.imc'
MASK_FILES = {
    'truth': 'mask.truth.imm',
    'channels': 'mask.channels.imm',
    'outliers': 'mask.outliers.imm',
    'detected': 'mask.detected.imm',
}
FLAG_REPORT_FILE = 'flag_report.json'
REJECTION_REPORT_FILE = 'restoration_rejections.csv'
PATCH_DIR = 'patches'
RESIDUAL_DIR = 'residuals'
REPORT_DIR = 'reports'

# a: unrestored, b: outliers restored, c: channels restored, d: both
VARIANTS = ('a', 'b', 'c', 'd')
VARIANT_FIELDS = {'a': 'original', 'b': 'outliers', 'c': 'channels', 'd': 'full'}

# svd and ica patch metrics, the mode scan included, run on each variant as
# stored with interference left in its unrestored cells; polyfit and Cm/Cu
# run on the mean-filled baseline
MEAN_FILLED_PATCH_METHODS = ('polyfit',)

# RMS-by-fraction CSVs are labelled by the data they were measured on
PATCH_SOURCE = 'mock'

STAGE_ERRORS = (ImbenchError, ValueError, OSError, linalg.LinAlgError)


def variant_file(variant):
    return f'variant_{variant}.imc'


def residual_masks(channels, outliers):
    """Cells still flagged in each variant after its restoration"""
    union = channels.union(outliers)
    return {
        'a': union,
        'b': union.difference(outliers),
        'c': union.difference(channels),
        'd': Mask.empty(union.shape),
    }


class PipelineService:
    """Runs the stages of one configuration into one output directory"""

    def __init__(self, config, output_dir=None, threads=None):
        self.config = config
        self.output_dir = Path(output_dir or config.output_dir)
        self.threads = threads or settings.IMBENCH_THREADS
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest.open(self.output_dir, config.config_hash)

    def path(self, name):
        return self.output_dir / name

    def _record(self, path):
        self.manifest.record_artifact(self.output_dir, path)
        return path

    def _require(self, stage, producer, *names):
        missing = [name for name in names if not self.path(name).exists()]
        if missing:
            raise StageError(stage, f"missing input {', '.join(missing)}; run {producer} first")

    @contextmanager
    def stage(self, name):
        """Time a stage, record its outcome and turn failures into StageError"""
        self.manifest.begin_stage(name)
        start = time.perf_counter()
        ok = False
        try:
            yield
            ok = not any(failure['stage'] == name for failure in self.manifest.failures)
        except (RestorerContractError, StageError) as e:
            # stages that recorded their own failures raise a summary
            if not any(failure['stage'] == name for failure in self.manifest.failures):
                self.manifest.record_failure(name, str(e))
            raise
        except STAGE_ERRORS as e:
            self.manifest.record_failure(name, str(e))
            raise StageError(name, str(e)) from e
        finally:
            self.manifest.end_stage(name, time.perf_counter() - start, ok)
            self.manifest.save(self.output_dir)
            logger.info(f"Stage {name} {'finished' if ok else 'failed'}")

    def simulate(self):
        """Truth cubes: total sky, HI and foregrounds"""
        config = self.config
        with self.stage('simulate'):
            sky = compose_sky(
                config.sky_spec,
                config.cosmology,
                config.hi_spec,
                config.foreground_models,
                config.seed,
                allow_empty=config['foreground']['allow_empty'],
                workers=self.threads,
            )
            for label, cube in (('total', sky.total), ('hi', sky.hi), ('fg', sky.foreground)):
                path = self.path(TRUTH_FILES[label])
                write_cube(cube, path)
                self._record(path)
            logger.info(f"Simulated {sky.total.shape[0]} lines of sight x {sky.total.shape[1]} channels")
        return sky

    def contaminate(self):
        """Inject RFI, flag it and write truth and detected masks"""
        config = self.config
        with self.stage('contaminate'):
            self._require('contaminate', 'simulate', TRUTH_FILES['total'])
            truth = read_cube(self.path(TRUTH_FILES['total']))
            rfi = config['rfi']
            if rfi['template_cube']:
                template, template_mask = load_rfi_template(rfi['template_cube'], rfi['template_mask'])
                contaminated, truth_mask = apply_rfi_template(truth, template, template_mask, config.seed)
            else:
                contaminated, truth_mask = inject_rfi(truth, config.rfi_model)

            flags = flag_cube(contaminated, **config['flagging'])
            write_cube(contaminated, self.path(CONTAMINATED_FILE))
            self._record(self.path(CONTAMINATED_FILE))
            for label, mask in (
                ('truth', truth_mask),
                ('channels', flags.channels.mask),
                ('outliers', flags.outliers.mask),
                ('detected', flags.mask),
            ):
                path = self.path(MASK_FILES[label])
                write_mask(mask, path, axis=contaminated.axis, sky_grid=contaminated.sky_grid)
                self._record(path)

            report = self._flag_report(flags, truth_mask)
            path = self.path(FLAG_REPORT_FILE)
            path.write_text(json.dumps(report, indent=2, sort_keys=True) + '\n', encoding='utf-8')
            self._record(path)

            if config['contaminate']['export_patches']:
                self._export_patches(contaminated, flags.mask)
        return flags

    @staticmethod
    def _flag_report(flags, truth_mask):
        truth_channels = np.flatnonzero(truth_mask.flags.all(axis=0))
        detected = set(flags.channels.flagged_channels)
        recall = (
            len(detected.intersection(truth_channels.tolist())) / truth_channels.size
            if truth_channels.size else None
        )
        hits = int((flags.mask.flags & truth_mask.flags).sum())
        return {
            'flagged_channels': flags.channels.flagged_channels,
            'channel_iterations': flags.channels.iterations,
            'outlier_cells': flags.outliers.outlier_count,
            'detected_cells': flags.mask.count,
            'truth_cells': truth_mask.count,
            'detected_fraction': flags.mask.masked_fraction,
            'truth_fraction': truth_mask.masked_fraction,
            'channel_recall': recall,
            'cell_recall': hits / truth_mask.count if truth_mask.count else None,
            'false_positive_cells': int((flags.mask.flags & ~truth_mask.flags).sum()),
        }

    def _export_patches(self, contaminated, mask):
        evaluate = self.config['evaluate']
        samples = extract_patches(
            contaminated, mask,
            patch_size=evaluate['patch_size'],
            max_fraction=evaluate['max_fraction'],
            seed=self.config.seed,
            limit=evaluate['max_patches'],
        )
        directory = self.path(PATCH_DIR)
        index = write_patches(samples, directory, axis=contaminated.axis, config_hash=self.config.config_hash)
        for path in sorted(directory.iterdir()):
            self._record(path)
        return index

    def restore(self):
        """The four variant datasets a-d"""
        with self.stage('restore'):
            self._require(
                'restore', 'contaminate',
                CONTAMINATED_FILE, MASK_FILES['channels'], MASK_FILES['outliers'], MASK_FILES['detected'],
            )
            contaminated = read_cube(self.path(CONTAMINATED_FILE))
            channels = read_mask(self.path(MASK_FILES['channels']))
            outliers = read_mask(self.path(MASK_FILES['outliers']))
            extra = {}
            if self.config['restore']['method'] == 'external':
                extra = {
                    'reference_mask': read_mask(self.path(MASK_FILES['detected'])),
                    'report_path': self.path(REJECTION_REPORT_FILE),
                }
            restorer = self.config.build_restorer(**extra)
            variants = restore_dataset_variants(contaminated, channels, outliers, restorer)
            for variant in VARIANTS:
                path = self.path(variant_file(variant))
                write_cube(getattr(variants, VARIANT_FIELDS[variant]), path)
                self._record(path)
        return variants

    def clean_and_evaluate(self):
        """Foreground removal on every variant and the report CSVs"""
        config = self.config
        with self.stage('clean_eval'):
            self._require(
                'clean_eval', 'restore',
                *[variant_file(variant) for variant in VARIANTS],
                MASK_FILES['channels'], MASK_FILES['outliers'], TRUTH_FILES['hi'], TRUTH_FILES['fg'],
            )
            channels = read_mask(self.path(MASK_FILES['channels']))
            outliers = read_mask(self.path(MASK_FILES['outliers']))
            remaining = residual_masks(channels, outliers)
            union = remaining['a']
            truth_hi = read_cube(self.path(TRUTH_FILES['hi']))
            truth_fg = read_cube(self.path(TRUTH_FILES['fg']))

            factor = config['preprocess']['downsample_factor']
            fiducial, _ = downsample_channels(truth_hi, None, factor)
            spectrum_bins = default_multipole_bins(
                config['sky']['n_pix'], fiducial.sky_grid.pixel_size, config['evaluate']['ell_bins']
            )

            summary, fraction_stats, mode_scans, cm_cu_stats = [], {}, {}, {}
            fiducial_written = False
            for variant in VARIANTS:
                cube = read_cube(self.path(variant_file(variant)))
                prepared = cube.with_data(mean_fill_restore(cube.data, remaining[variant]))
                restoration = self._restoration_metrics(prepared, truth_fg, union)

                patch_results = self._patch_pathway(cube, prepared, union, truth_fg, variant)
                fraction_stats.update(patch_results['fractions'])
                mode_scans[variant] = patch_results['mode_scan']
                cm_cu_stats[variant] = patch_results['cm_cu']

                reduced = self._prepare_for_spectra(cube, remaining[variant], factor)
                for method in config['clean']['methods']:
                    label = f'{method}.{variant}'
                    try:
                        residual = self._remove(method, reduced).residual
                        comparison = spectrum_comparison(
                            residual, fiducial, None, spectrum_bins, workers=self.threads
                        )
                    except STAGE_ERRORS as e:
                        logger.error(f"{label} failed: {e}")
                        self.manifest.record_failure('clean_eval', f"{label}: {e}")
                        continue
                    self._write_residual(residual, label)
                    self._write_report(
                        reports.write_spectrum, comparison.residual, f'spectrum.{label}.csv'
                    )
                    if not fiducial_written:
                        self._write_report(reports.write_spectrum, comparison.fiducial, 'spectrum.fiducial.csv')
                        fiducial_written = True
                    summary.append({
                        'method': method,
                        'variant': variant,
                        'rms': rms(residual, about_mean=config['evaluate']['rms_about_mean']),
                        **restoration,
                        'delta_log_cl': comparison.delta_log_cl,
                    })

            self._write_fraction_reports(fraction_stats, mode_scans, cm_cu_stats)
            self._write_report(reports.write_summary, summary, 'summary.csv')

            failures = [failure for failure in self.manifest.failures if failure['stage'] == 'clean_eval']
            if failures:
                raise StageError('clean_eval', f"{len(failures)} method/variant combinations failed")
        return summary

    def _restoration_metrics(self, prepared, truth_fg, union):
        """Cm/Cu, SSIM and PSNR of a prepared variant against the foreground truth"""
        window = self.config['evaluate']['ssim_window'] or None
        dynamic_range = float(np.ptp(truth_fg.data))
        try:
            ratio = cm_cu(prepared, truth_fg, union)
        except ValueError as e:
            logger.warning(f"Cm/Cu undefined: {e}")
            ratio = math.nan
        if dynamic_range > 0:
            similarity = ssim(prepared, truth_fg, dynamic_range, window=window)
            peak = psnr(prepared, truth_fg, dynamic_range)
        else:
            logger.warning("Foreground truth is constant; SSIM and PSNR are undefined")
            similarity = peak = math.nan
        return {'cm_cu': ratio, 'ssim': similarity, 'psnr': peak}

    def _prepare_for_spectra(self, cube, mask, factor):
        """Downsample, fill empty channels, then mean-fill what is still flagged"""
        reduced, reduced_mask = downsample_channels(cube, mask, factor)
        filled = fill_empty_channels(reduced, reduced_mask)
        leftover = reduced_mask.flags & ~reduced_mask.flags.all(axis=0)
        if leftover.any():
            filled = filled.with_data(mean_fill_restore(filled.data, leftover))
        return filled

    def _remove(self, method, data):
        clean = self.config['clean']
        if method == 'polyfit':
            return remove_polyfit(data, clean['poly_order'])
        if method == 'svd':
            return remove_svd_modes(data, clean['svd_spectrum_modes'], center=clean['svd_center'])
        if method == 'ica':
            return remove_ica_components(
                data,
                n_components=clean['ica_components'],
                seed=self.config.seed,
                restore_means=clean['ica_restore_means'],
                tol=clean['ica_tol'],
                max_iter=clean['ica_max_iter'],
                contrast=clean['ica_contrast'],
            )
        raise ValueError(f"unknown removal method {method!r}")

    def _patch_metrics(self, sample, observed, truth_window):
        """Residual RMS per method, the SVD mode scan and Cm/Cu of one patch.

        ``sample`` holds the mean-filled window and ``observed`` the same
        window as the variant stores it.
        """
        clean = self.config['clean']
        about_mean = self.config['evaluate']['rms_about_mean']
        metrics = {}
        for method in clean['methods']:
            data = sample.data if method in MEAN_FILLED_PATCH_METHODS else observed
            if method == 'svd':
                work = data - data.mean(axis=0) if clean['svd_center'] else data
                decomposition = svd_decompose(work)
                k = clean['svd_spectrum_modes']
                residual = remove_svd_modes(work, k, decomposition=decomposition).residual
                metrics['svd'] = rms(residual, about_mean)
                if about_mean:
                    metrics['mode_scan'] = [
                        rms(remove_svd_modes(work, k, decomposition=decomposition).residual, True)
                        for k in clean['svd_modes']
                    ]
                else:
                    metrics['mode_scan'] = svd_residual_rms(decomposition, clean['svd_modes']).tolist()
            else:
                metrics[method] = rms(self._remove(method, data).residual, about_mean)
        try:
            metrics['cm_cu'] = cm_cu(sample.data, truth_window, sample.mask)
        except ValueError:
            metrics['cm_cu'] = None
        return metrics

    def _patch_pathway(self, observed, prepared, union, truth_fg, variant):
        """Patch-level RMS, mode scan and Cm/Cu of one variant, binned by masked fraction.

        Windows are drawn once against the union mask, so every variant is
        measured on the same cells.
        """
        evaluate = self.config['evaluate']
        edges = evaluate['fraction_edges']
        samples = extract_patches(
            prepared, union,
            patch_size=evaluate['patch_size'],
            max_fraction=evaluate['max_fraction'],
            seed=self.config.seed,
            limit=evaluate['max_patches'],
        )
        size = evaluate['patch_size']

        def measure(sample):
            row, channel = sample.origin
            cells = (slice(row, row + size), slice(channel, channel + size))
            try:
                return self._patch_metrics(sample, observed.data[cells], truth_fg.data[cells])
            except STAGE_ERRORS as e:
                logger.debug(f"Patch at {sample.origin} skipped: {e}")
                return None

        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            measured = list(pool.map(measure, samples))
        kept = [(sample, metrics) for sample, metrics in zip(samples, measured) if metrics is not None]
        if len(kept) < len(samples):
            logger.warning(f"Variant {variant}: {len(samples) - len(kept)} of {len(samples)} patches failed")

        fractions = {}
        for method in self.config['clean']['methods']:
            fractions[(method, variant)] = bin_by_masked_fraction(
                [(sample.masked_fraction, metrics[method]) for sample, metrics in kept], edges
            )
        mode_scan = []
        if 'svd' in self.config['clean']['methods']:
            for position, k in enumerate(self.config['clean']['svd_modes']):
                values = [metrics['mode_scan'][position] for _, metrics in kept]
                if values:
                    p25, median, p75 = np.percentile(values, [25, 50, 75])
                else:
                    p25 = median = p75 = math.nan
                mode_scan.append({
                    'variant': variant, 'k': k, 'count': len(values),
                    'p25': float(p25), 'median': float(median), 'p75': float(p75),
                })
        ratios = bin_by_masked_fraction(
            [(sample.masked_fraction, metrics['cm_cu']) for sample, metrics in kept if metrics['cm_cu'] is not None],
            edges,
        )
        return {'fractions': fractions, 'mode_scan': mode_scan, 'cm_cu': ratios}

    def _write_fraction_reports(self, fraction_stats, mode_scans, cm_cu_stats):
        for (method, variant), stats in fraction_stats.items():
            self._write_report(reports.write_fraction_bins, stats, f'rms_fraction.{PATCH_SOURCE}.{method}.{variant}.csv')
        for variant, stats in cm_cu_stats.items():
            self._write_report(reports.write_fraction_bins, stats, f'cm_cu_fraction.{PATCH_SOURCE}.{variant}.csv')
        if any(mode_scans.values()):
            rows = [row for variant in VARIANTS for row in mode_scans.get(variant, [])]
            self._write_report(reports.write_mode_scan, rows, f'svd_modes.{PATCH_SOURCE}.csv')

        offsets = []
        for (method, variant), stats in fraction_stats.items():
            if variant == 'a' or (method, 'a') not in fraction_stats:
                continue
            values = normalized_offsets(fraction_stats[(method, 'a')], stats)
            for i, offset in enumerate(values):
                offsets.append({
                    'method': method, 'variant': variant,
                    'bin_lo': float(stats.edges[i]), 'bin_hi': float(stats.edges[i + 1]),
                    'offset': float(offset),
                })
        self._write_report(reports.write_offsets, offsets, f'offsets.{PATCH_SOURCE}.csv')

    def _write_report(self, writer, payload, name):
        path = writer(payload, self.path(REPORT_DIR) / name, self.config.config_hash)
        return self._record(path)

    def _write_residual(self, residual, label):
        path = self.path(RESIDUAL_DIR) / f'{label}.imc'
        path.parent.mkdir(parents=True, exist_ok=True)
        write_cube(residual, path)
        return self._record(path)

    def run_all(self):
        """Every stage in order; the first failing stage aborts the run"""
        self.simulate()
        self.contaminate()
        self.restore()
        return self.clean_and_evaluate()
