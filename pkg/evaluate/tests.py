import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from cube.models import FrequencyAxis, SkyGrid, SpectralCube
from imbench.tables import read_table
from restore.models import RestorationRecord
from .reports import write_fraction_bins, write_spectrum, write_summary
from .services import (
    angular_power_spectrum,
    bin_by_masked_fraction,
    cm_cu,
    default_multipole_bins,
    mode_power,
    normalized_offsets,
    psnr,
    record_cm_cu,
    rms,
    spectrum_comparison,
    ssim,
)

PIXEL = np.radians(30.0) / 64


class RmsTests(SimpleTestCase):
    def test_values(self):
        self.assertEqual(rms(np.zeros(5)), 0.0)
        self.assertEqual(rms(np.array([3.0, -3.0])), 3.0)
        self.assertEqual(rms(np.full((2, 2), -4.0)), 4.0)

    def test_about_mean(self):
        self.assertEqual(rms(np.array([1.0, 3.0]), about_mean=True), 1.0)

    def test_empty(self):
        with self.assertRaises(ValueError):
            rms(np.array([]))


class FractionBinTests(SimpleTestCase):
    def test_single_sample_bins(self):
        stats = bin_by_masked_fraction([(0.02, 5.0), (0.12, 7.0)])
        self.assertEqual(stats.counts.tolist(), [1, 0, 1, 0, 0, 0, 0, 0])
        self.assertEqual((stats.p25[0], stats.median[0], stats.p75[0]), (5.0, 5.0, 5.0))
        self.assertTrue(np.isnan(stats.median[1]))

    def test_percentiles(self):
        stats = bin_by_masked_fraction([(0.32, v) for v in (5.0, 1.0, 4.0, 2.0, 3.0)])
        i = 6
        self.assertEqual((stats.p25[i], stats.median[i], stats.p75[i]), (2.0, 3.0, 4.0))

    def test_edge_values(self):
        edges = np.array([0.0, 0.1, 0.2])
        stats = bin_by_masked_fraction([(0.1, 1.0), (0.2, 2.0), (0.0, 3.0)], edges)
        self.assertEqual(stats.counts.tolist(), [1, 2])

    def test_percentile_order(self):
        rng = np.random.default_rng(0)
        stats = bin_by_masked_fraction(zip(rng.uniform(0, 0.4, 500), rng.standard_normal(500)))
        present = stats.counts > 0
        self.assertTrue(np.all(stats.p25[present] <= stats.median[present]))
        self.assertTrue(np.all(stats.median[present] <= stats.p75[present]))
        self.assertEqual(stats.counts.sum(), 500)

    def test_normalized_offsets(self):
        edges = np.array([0.0, 0.2, 0.4])
        reference = bin_by_masked_fraction([(0.1, 2.0), (0.3, 4.0)], edges)
        other = bin_by_masked_fraction([(0.1, 1.0), (0.3, 3.0)], edges)
        np.testing.assert_allclose(normalized_offsets(reference, other), [-0.5, -0.25])


class CmCuTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(1)
        self.truth = rng.standard_normal((64, 64))
        self.mask = rng.random((64, 64)) < 0.3

    def test_identity(self):
        self.assertEqual(cm_cu(self.truth, self.truth, self.mask), 1.0)

    def test_positive_affine(self):
        self.assertAlmostEqual(cm_cu(2 * self.truth + 5, self.truth, self.mask), 1.0, places=12)

    def test_independent_masked_prediction(self):
        predicted = self.truth.copy()
        predicted[self.mask] = np.random.default_rng(2).standard_normal(int(self.mask.sum()))
        self.assertGreaterEqual(self.mask.sum(), 1000)
        self.assertLess(abs(cm_cu(predicted, self.truth, self.mask)), 0.2)

    def test_degenerate_variance(self):
        with self.assertRaisesRegex(ValueError, 'degenerate'):
            cm_cu(np.ones((4, 4)), self.truth[:4, :4], self.mask[:4, :4] | np.eye(4, dtype=bool))

    def test_vanishing_unmasked_correlation(self):
        truth = np.array([1.0, -1.0, 1.0, -1.0, 5.0, 6.0])
        predicted = np.array([1.0, 1.0, -1.0, -1.0, 5.0, 6.0])
        flags = np.array([False, False, False, False, True, True])
        with self.assertRaisesRegex(ValueError, 'unmasked correlation vanishes'):
            cm_cu(predicted, truth, flags)

    def test_needs_two_cells_each(self):
        flags = np.zeros((64, 64), bool)
        flags[0, 0] = True
        with self.assertRaises(ValueError):
            cm_cu(self.truth, self.truth, flags)

    def test_record(self):
        record = RestorationRecord('mean_fill', 0.3, self.truth, self.truth, self.mask)
        self.assertEqual(record_cm_cu(record), 1.0)


class SsimPsnrTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(3)
        self.x = rng.standard_normal((32, 32))
        self.y = self.x + 0.3 * rng.standard_normal((32, 32))

    def test_identity(self):
        self.assertEqual(ssim(self.x, self.x, 4.0), 1.0)
        self.assertEqual(ssim(self.x, self.x, 4.0, window=7), 1.0)

    def test_constants(self):
        a, b, L = 2.0, 3.0, 10.0
        c1 = (0.01 * L) ** 2
        expected = (2 * a * b + c1) / (a * a + b * b + c1)
        self.assertAlmostEqual(ssim(np.full((4, 4), a), np.full((4, 4), b), L), expected, places=14)

    def test_symmetric_and_bounded(self):
        value = ssim(self.x, self.y, 6.0)
        self.assertEqual(value, ssim(self.y, self.x, 6.0))
        self.assertTrue(-1.0 <= value < 1.0)
        self.assertEqual(ssim(self.x, self.y, 6.0, window=5), ssim(self.y, self.x, 6.0, window=5))

    def test_permutation_invariant(self):
        order = np.random.default_rng(4).permutation(self.x.size)
        permuted_x = self.x.ravel()[order].reshape(self.x.shape)
        permuted_y = self.y.ravel()[order].reshape(self.y.shape)
        self.assertAlmostEqual(ssim(permuted_x, permuted_y, 6.0), ssim(self.x, self.y, 6.0), places=12)

    def test_non_positive_range(self):
        with self.assertRaises(ValueError):
            ssim(self.x, self.y, 0.0)

    def test_psnr_values(self):
        self.assertEqual(psnr(np.zeros(4), np.full(4, 2.0), 2.0), 0.0)
        self.assertAlmostEqual(psnr(np.zeros(100), np.full(100, 0.1), 1.0), 20.0)
        self.assertEqual(psnr(self.x, self.x, 1.0), math.inf)

    def test_psnr_decreases_with_error(self):
        values = [psnr(self.x, self.x + e, 5.0) for e in (0.01, 0.1, 1.0)]
        self.assertTrue(values[0] > values[1] > values[2])


class AngularSpectrumTests(SimpleTestCase):
    def test_constant_map(self):
        estimate = angular_power_spectrum(np.full((64, 64), 3.0), PIXEL, default_multipole_bins(64, PIXEL))
        np.testing.assert_allclose(estimate.cl_values, 0.0, atol=1e-20)
        self.assertTrue(np.all(estimate.mode_counts >= 1))
        self.assertTrue(np.all(np.diff(estimate.bin_centers) > 0))

    def test_non_square(self):
        with self.assertRaises(ValueError):
            angular_power_spectrum(np.zeros((8, 6)), PIXEL, [1.0, 10.0])

    def test_white_noise(self):
        edges = default_multipole_bins(64, PIXEL, n_bins=8)
        sigma = 2.0
        estimates = [
            angular_power_spectrum(np.random.default_rng(seed).normal(0, sigma, (64, 64)), PIXEL, edges)
            for seed in range(20)
        ]
        cl = np.mean([estimate.cl_values for estimate in estimates], axis=0)
        rich = estimates[0].mode_counts >= 100
        self.assertTrue(rich.any())
        self.assertAlmostEqual(cl[rich].mean() / (sigma ** 2 * PIXEL ** 2), 1.0, delta=0.05)

    def test_parseval(self):
        sky_map = np.random.default_rng(5).standard_normal((32, 32))
        sky_map -= sky_map.mean()
        _, power = mode_power(sky_map, PIXEL)
        area = (32 * PIXEL) ** 2
        self.assertAlmostEqual(power.sum() / area / np.mean(sky_map ** 2), 1.0, delta=1e-8)

    def test_sign_and_offset_invariance(self):
        sky_map = np.random.default_rng(6).standard_normal((32, 32))
        edges = default_multipole_bins(32, PIXEL)
        base = angular_power_spectrum(sky_map, PIXEL, edges).cl_values
        np.testing.assert_allclose(angular_power_spectrum(-sky_map, PIXEL, edges).cl_values, base, rtol=1e-12)
        np.testing.assert_allclose(angular_power_spectrum(sky_map + 7.0, PIXEL, edges).cl_values, base, rtol=1e-9)


class SpectrumComparisonTests(SimpleTestCase):
    def setUp(self):
        data = np.random.default_rng(7).standard_normal((32 * 32, 3))
        grid = SkyGrid(32, 32, PIXEL)
        self.fiducial = SpectralCube(data, FrequencyAxis(800e6, 1e6, 3), grid)
        self.edges = default_multipole_bins(32, PIXEL, n_bins=6)

    def test_identical(self):
        comparison = spectrum_comparison(self.fiducial, self.fiducial, None, self.edges)
        self.assertEqual(comparison.delta_log_cl, 0.0)

    def test_scaled_power(self):
        scaled = self.fiducial.with_data(np.sqrt(10.0) * self.fiducial.data)
        comparison = spectrum_comparison(scaled, self.fiducial, PIXEL, self.edges)
        self.assertAlmostEqual(comparison.delta_log_cl, 1.0, places=10)

    def test_pixel_size_defaults_to_sky_grid(self):
        scaled = self.fiducial.with_data(2.0 * self.fiducial.data)
        explicit = spectrum_comparison(scaled, self.fiducial, PIXEL, self.edges, workers=1)
        implicit = spectrum_comparison(scaled, self.fiducial, None, self.edges)
        np.testing.assert_array_equal(explicit.residual.cl_values, implicit.residual.cl_values)
        self.assertEqual(explicit.delta_log_cl, implicit.delta_log_cl)

    def test_zero_power_bins_excluded(self):
        flat = self.fiducial.with_data(np.zeros(self.fiducial.shape))
        comparison = spectrum_comparison(flat, self.fiducial, None, self.edges)
        self.assertTrue(math.isnan(comparison.delta_log_cl))
        self.assertEqual(comparison.excluded_bins, len(comparison.residual.cl_values))

    def test_needs_sky_grid(self):
        bare = SpectralCube(self.fiducial.data, self.fiducial.axis)
        with self.assertRaises(ValueError):
            spectrum_comparison(bare, bare, None, self.edges)


class ReportTests(SimpleTestCase):
    def test_columns_and_hash_line(self):
        stats = bin_by_masked_fraction([(0.05, 1.0), (0.06, 2.0)])
        estimate = angular_power_spectrum(np.random.default_rng(8).standard_normal((16, 16)), PIXEL,
                                          default_multipole_bins(16, PIXEL, n_bins=4))
        row = {'method': 'svd', 'variant': 'd', 'rms': 1.0, 'cm_cu': 1.0, 'ssim': 1.0,
               'psnr': math.inf, 'delta_log_cl': 0.0}
        with tempfile.TemporaryDirectory() as directory:
            directory = Path(directory)
            paths = [
                write_fraction_bins(stats, directory / 'bins.csv', 'h1'),
                write_spectrum(estimate, directory / 'cl.csv', 'h1'),
                write_summary([row], directory / 'summary.csv', 'h1'),
            ]
            for path in paths:
                self.assertEqual(path.read_text().splitlines()[0], '# config_hash=h1')
            self.assertEqual(list(read_table(paths[0]).columns), ['bin_lo', 'bin_hi', 'count', 'p25', 'median', 'p75'])
            self.assertEqual(list(read_table(paths[1]).columns), ['l_center', 'mode_count', 'cl_value'])
            summary = read_table(paths[2])
            self.assertEqual(list(summary.columns), ['method', 'variant', 'rms', 'cm_cu', 'ssim', 'psnr', 'delta_log_cl'])
            self.assertEqual(summary['psnr'].iloc[0], 'exact')
