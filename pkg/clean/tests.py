import numpy as np
from django.test import SimpleTestCase
from scipy.optimize import linear_sum_assignment

from cube.models import FrequencyAxis, SpectralCube
from .services import (
    fastica,
    kurtosis,
    remove_ica_components,
    remove_polyfit,
    remove_svd_modes,
    svd_decompose,
    svd_residual_rms,
    whiten,
)


def rms(values):
    return np.sqrt(np.mean(np.square(values)))


def quadratic_cube(n_rows=20, n_channels=100, seed=0):
    rng = np.random.default_rng(seed)
    nu = np.linspace(800.0, 820.0, n_channels)
    a, b, c = rng.uniform(-50, 50, (3, n_rows, 1))
    data = a + b * (nu - 810.0) + c * (nu - 810.0) ** 2
    return SpectralCube(data, FrequencyAxis(800e6, 0.2e6, n_channels))


def unit_sources(rng, kinds, n_samples):
    rows = []
    for kind in kinds:
        if kind == 'uniform':
            rows.append(rng.uniform(-np.sqrt(3), np.sqrt(3), n_samples))
        else:
            rows.append(rng.laplace(0.0, 1.0 / np.sqrt(2), n_samples))
    return np.array(rows)


def matched_correlations(estimated, truth):
    """|Pearson r| of each true source with its best-matching estimate"""
    k = truth.shape[0]
    r = np.abs(np.corrcoef(estimated, truth)[:k, k:])
    rows, cols = linear_sum_assignment(-r)
    return r[rows, cols]


class PolyfitTests(SimpleTestCase):
    def test_quadratic_rows_vanish(self):
        cube = quadratic_cube()
        result = remove_polyfit(cube, order=2)
        self.assertLess(rms(result.residual.data), 1e-10 * rms(cube.data))
        self.assertEqual(result.residual.shape, cube.shape)
        self.assertEqual(result.method, 'polyfit')

    def test_order_zero_subtracts_row_means(self):
        data = np.random.default_rng(1).standard_normal((5, 9))
        residual = remove_polyfit(data, order=0).residual
        np.testing.assert_allclose(residual, data - data.mean(axis=1, keepdims=True), atol=1e-12)

    def test_white_noise_variance_kept(self):
        cube = quadratic_cube(n_rows=200, n_channels=1000, seed=2)
        for seed in range(3):
            noise = np.random.default_rng(100 + seed).standard_normal(cube.shape)
            residual = remove_polyfit(cube.data + noise, order=2).residual
            ratio = np.mean(residual ** 2) / np.mean(noise ** 2)
            self.assertGreaterEqual(ratio, 0.98)
            self.assertLessEqual(ratio, 1.01)

    def test_idempotent(self):
        data = np.random.default_rng(3).standard_normal((10, 40)) * 5
        once = remove_polyfit(data).residual
        twice = remove_polyfit(once).residual
        np.testing.assert_allclose(twice, once, atol=1e-10)

    def test_order_must_be_below_channel_count(self):
        with self.assertRaises(ValueError):
            remove_polyfit(np.ones((2, 3)), order=3)


class SvdTests(SimpleTestCase):
    def test_diagonal(self):
        decomposition = svd_decompose(np.diag([3.0, 1.0]))
        np.testing.assert_allclose(decomposition.singular_values, [3.0, 1.0])

    def test_rank_one(self):
        rng = np.random.default_rng(0)
        s = svd_decompose(np.outer(rng.standard_normal(20), rng.standard_normal(15))).singular_values
        self.assertEqual(int((s > 1e-10 * s[0]).sum()), 1)

    def test_reconstruction_and_orthonormality(self):
        data = np.random.default_rng(4).standard_normal((50, 30))
        decomposition = svd_decompose(data)
        u, v = decomposition.left_vectors, decomposition.right_vectors
        np.testing.assert_allclose(u.T @ u, np.eye(30), atol=1e-10)
        np.testing.assert_allclose(v.T @ v, np.eye(30), atol=1e-10)
        error = np.linalg.norm(decomposition.reconstruct() - data) / np.linalg.norm(data)
        self.assertLess(error, 1e-8)
        self.assertTrue(np.all(np.diff(decomposition.singular_values) <= 0))

    def test_sign_convention(self):
        data = np.random.default_rng(5).standard_normal((12, 7))
        u = svd_decompose(data).left_vectors
        largest = u[np.abs(u).argmax(axis=0), np.arange(u.shape[1])]
        self.assertTrue(np.all(largest > 0))
        np.testing.assert_allclose(svd_decompose(-data).left_vectors, u, atol=1e-12)

    def test_non_finite_rejected(self):
        with self.assertRaises(ValueError):
            svd_decompose(np.array([[1.0, np.inf]]))


class SvdModeRemovalTests(SimpleTestCase):
    def test_diagonal_first_mode(self):
        residual = remove_svd_modes(np.diag([3.0, 1.0]), 1).residual
        np.testing.assert_allclose(residual, np.diag([0.0, 1.0]), atol=1e-12)

    def test_zero_modes_is_identity(self):
        cube = quadratic_cube()
        result = remove_svd_modes(cube, 0)
        self.assertEqual(result.residual, cube)
        self.assertEqual(result.removed_component_count, 0)

    def test_all_modes_leave_nothing(self):
        data = np.random.default_rng(6).standard_normal((20, 8))
        residual = remove_svd_modes(data, 8).residual
        self.assertLessEqual(np.linalg.norm(residual), 1e-8 * np.linalg.norm(data))

    def test_eckart_young(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            data = rng.standard_normal((50, 30))
            s = np.linalg.svd(data, compute_uv=False)
            for k in (0, 1, 5, 29):
                energy = np.sum(remove_svd_modes(data, k).residual ** 2)
                self.assertAlmostEqual(energy / np.sum(s[k:] ** 2), 1.0, delta=1e-8)

    def test_residual_spectrum_and_monotone_rms(self):
        data = np.random.default_rng(8).standard_normal((40, 25)) + 3.0
        s = np.linalg.svd(data, compute_uv=False)
        previous = np.inf
        for k in range(26):
            residual = remove_svd_modes(data, k).residual
            current = rms(residual)
            self.assertLessEqual(current, previous)
            previous = current
            if k < 25:
                top = np.linalg.svd(residual, compute_uv=False)[0]
                self.assertLessEqual(top, s[k] + 1e-8 * s[0])

    def test_tail_rms_matches_direct(self):
        data = np.random.default_rng(9).standard_normal((30, 20))
        decomposition = svd_decompose(data)
        direct = [rms(remove_svd_modes(data, k, decomposition=decomposition).residual) for k in range(5)]
        np.testing.assert_allclose(svd_residual_rms(decomposition, range(5)), direct, rtol=1e-10)

    def test_centering(self):
        data = np.random.default_rng(10).standard_normal((30, 6)) + np.arange(6.0)
        residual = remove_svd_modes(data, 0, center=True).residual
        np.testing.assert_allclose(residual.mean(axis=0), 0.0, atol=1e-12)

    def test_k_out_of_range(self):
        with self.assertRaises(ValueError):
            remove_svd_modes(np.ones((3, 2)), 3)
        with self.assertRaises(ValueError):
            remove_svd_modes(np.ones((3, 2)), -1)


class KurtosisTests(SimpleTestCase):
    def test_gaussian(self):
        samples = np.random.default_rng(11).standard_normal(1_000_000)
        self.assertLess(abs(kurtosis(samples)), 0.05)

    def test_uniform(self):
        samples = np.random.default_rng(12).uniform(-1.0, 1.0, 1_000_000)
        self.assertAlmostEqual(kurtosis(samples), -2.0 / 15.0, delta=0.01)

    def test_two_point(self):
        self.assertEqual(kurtosis(np.array([1.0, -1.0] * 50)), -2.0)

    def test_too_few_samples(self):
        with self.assertRaises(ValueError):
            kurtosis([1.0, 2.0, 3.0])


class WhitenTests(SimpleTestCase):
    def assert_identity_covariance(self, whitened):
        covariance = whitened @ whitened.T / whitened.shape[1]
        np.testing.assert_allclose(covariance, np.eye(whitened.shape[0]), atol=1e-8)

    def test_white_data(self):
        data = np.random.default_rng(13).standard_normal((4, 5000))
        self.assert_identity_covariance(whiten(data).whitened)

    def test_random_full_rank(self):
        rng = np.random.default_rng(14)
        data = rng.standard_normal((6, 6)) @ rng.standard_normal((6, 300)) + 5.0
        white = whiten(data)
        self.assertEqual(white.whitened.shape, (6, 300))
        self.assert_identity_covariance(white.whitened)
        centred = data - white.means[:, None]
        np.testing.assert_allclose(white.matrix @ centred, white.whitened, atol=1e-8)

    def test_constant_measurement_dropped(self):
        data = np.random.default_rng(15).standard_normal((4, 200))
        data[2] = 7.0
        with self.assertLogs('clean.services', level='INFO'):
            white = whiten(data)
        self.assertEqual(white.whitened.shape[0], 3)

    def test_all_zero(self):
        with self.assertRaises(ValueError):
            whiten(np.zeros((3, 10)))


class FastIcaTests(SimpleTestCase):
    def test_two_uniform_sources(self):
        rng = np.random.default_rng(16)
        sources = unit_sources(rng, ['uniform', 'uniform'], 2000)
        mixtures = np.array([[1.0, 0.5], [0.5, 1.0]]) @ sources
        result = fastica(mixtures, n_components=2, seed=1)
        self.assertTrue(np.all(matched_correlations(result.sources, sources) > 0.95))

    def test_independent_input_gives_signed_permutation(self):
        rng = np.random.default_rng(17)
        sources = unit_sources(rng, ['uniform', 'laplace', 'uniform'], 10000)
        mixing = fastica(sources, n_components=3, seed=2).mixing
        for matrix in (mixing, mixing.T):
            dominance = np.abs(matrix) / np.linalg.norm(matrix, axis=1, keepdims=True)
            self.assertTrue(np.all((dominance > 0.99).sum(axis=1) == 1))

    def test_gaussian_sources_are_flagged(self):
        data = np.random.default_rng(18).standard_normal((3, 2000))
        result = fastica(data, n_components=3, seed=3)
        self.assertTrue(not result.converged or result.gaussian_like().any())

    def test_reconstruction_spans_whitened_subspace(self):
        rng = np.random.default_rng(19)
        data = rng.standard_normal((8, 3)) @ unit_sources(rng, ['uniform', 'laplace', 'uniform'], 1500)
        data += rng.standard_normal((8, 1)) * 10
        result = fastica(data, n_components=3, seed=4)
        centred = data - result.means[:, None]
        np.testing.assert_allclose(result.reconstruction(), centred, atol=1e-6 * np.abs(centred).max())
        np.testing.assert_allclose(result.sources @ result.sources.T / 1500, np.eye(3), atol=1e-6)
        np.testing.assert_allclose(result.unmixing @ centred, result.sources, atol=1e-8)

    def test_recovery_rate(self):
        successes = 0
        for trial in range(50):
            rng = np.random.default_rng(1000 + trial)
            sources = unit_sources(rng, ['uniform', 'laplace', 'uniform', 'laplace'], 1000)
            mixtures = rng.standard_normal((4, 4)) @ sources
            result = fastica(mixtures, n_components=4, seed=trial)
            if matched_correlations(result.sources, sources).mean() > 0.95:
                successes += 1
        self.assertGreaterEqual(successes, 45)

    def test_deterministic(self):
        data = np.random.default_rng(20).laplace(size=(5, 400))
        first = fastica(data, n_components=3, seed=9)
        second = fastica(data, n_components=3, seed=9)
        np.testing.assert_array_equal(first.mixing, second.mixing)
        self.assertEqual(first.n_iterations, second.n_iterations)

    def test_logcosh_contrast(self):
        rng = np.random.default_rng(21)
        sources = unit_sources(rng, ['laplace', 'uniform'], 3000)
        mixtures = np.array([[2.0, 1.0], [1.0, 1.5]]) @ sources
        result = fastica(mixtures, n_components=2, seed=5, contrast='logcosh')
        self.assertTrue(np.all(matched_correlations(result.sources, sources) > 0.95))

    def test_too_many_components(self):
        with self.assertRaises(ValueError):
            fastica(np.random.default_rng(0).standard_normal((3, 100)), n_components=4)
        with self.assertRaises(ValueError):
            fastica(np.random.default_rng(0).standard_normal((3, 100)), contrast='tanh')


class IcaRemovalTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(22)
        sources = unit_sources(rng, ['uniform', 'laplace', 'uniform', 'laplace'], 600)
        self.data = rng.standard_normal((20, 4)) @ sources + rng.uniform(-5, 5, (20, 1))

    def test_exact_mixture_removed(self):
        residual = remove_ica_components(self.data, n_components=4, seed=1).residual
        self.assertLess(rms(residual), 1e-3 * rms(self.data))

    def test_zero_components(self):
        cube = quadratic_cube()
        result = remove_ica_components(cube, n_components=0)
        self.assertEqual(result.residual, cube)

    def test_residual_mean_free_and_orthogonal(self):
        noisy = self.data + np.random.default_rng(23).standard_normal(self.data.shape)
        residual = remove_ica_components(noisy, n_components=4, seed=2).residual
        np.testing.assert_allclose(residual.mean(axis=1), 0.0, atol=1e-8)
        sources = fastica(noisy, n_components=4, seed=2).sources
        covariance = residual @ sources.T / noisy.shape[1]
        self.assertLess(np.abs(covariance).max(), 1e-6 * rms(noisy))

    def test_restore_means(self):
        plain = remove_ica_components(self.data, n_components=2, seed=3).residual
        with_means = remove_ica_components(self.data, n_components=2, seed=3, restore_means=True).residual
        np.testing.assert_allclose(with_means - plain, np.broadcast_to(self.data.mean(axis=1)[:, None], plain.shape))
