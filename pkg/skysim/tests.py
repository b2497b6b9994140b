import numpy as np
from django.test import SimpleTestCase, tag

from cube.models import FrequencyAxis
from evaluate.services import angular_power_spectrum
from imbench.exceptions import CovarianceError
from .models import (
    FOREGROUND_PRESETS,
    PHYSICAL_CONSTANTS,
    CosmologyParams,
    ForegroundModel,
    HiFieldSpec,
    SkyPatchSpec,
)
from .services import (
    brightness_temperature,
    cholesky_factor,
    compose_sky,
    foreground_cl,
    frequency_covariance,
    generate_correlated_field,
    generate_hi_cube,
    hi_mass_per_cell,
    mean_brightness_temperature,
    multipole_grid,
    redshift_of_frequency,
)

SYNCHROTRON = FOREGROUND_PRESETS['synchrotron']


def small_patch(n_pix=32, n_channels=4, dec_span=30.0):
    axis = FrequencyAxis(800e6, 1e6, n_channels)
    return SkyPatchSpec((20.0, 20.0 + dec_span), (25.0, 25.0 + dec_span), n_pix, axis)


class LineModelTests(SimpleTestCase):
    def setUp(self):
        self.cosmo = CosmologyParams()

    def test_redshift(self):
        self.assertEqual(redshift_of_frequency(PHYSICAL_CONSTANTS.nu_21), 0.0)
        self.assertAlmostEqual(redshift_of_frequency(PHYSICAL_CONSTANTS.nu_21 / 2), 1.0)
        self.assertAlmostEqual(redshift_of_frequency(810e6), 0.7536, places=4)

    def test_redshift_out_of_range(self):
        with self.assertRaises(ValueError):
            redshift_of_frequency(0.0)
        with self.assertRaises(ValueError):
            redshift_of_frequency(1500e6)

    def test_brightness_temperature(self):
        self.assertAlmostEqual(brightness_temperature(self.cosmo, 0.7536, 0.0), 0.1246, places=4)
        self.assertEqual(brightness_temperature(self.cosmo, 0.7536, -1.0), 0.0)
        self.assertAlmostEqual(
            brightness_temperature(self.cosmo, 0.7536, 1.0),
            2 * brightness_temperature(self.cosmo, 0.7536, 0.0),
        )

    def test_brightness_temperature_rejects_negative_density(self):
        with self.assertRaises(ValueError):
            brightness_temperature(self.cosmo, 0.5, -1.5)
        self.assertLess(brightness_temperature(self.cosmo, 0.5, -1.5, strict=False), 0.0)

    def test_brightness_temperature_increases_with_hi_and_baryons(self):
        base = brightness_temperature(self.cosmo, 0.75, 0.0)
        for x_hi in (0.02, 0.5, 1.0):
            richer = CosmologyParams(x_hi=x_hi)
            self.assertGreater(brightness_temperature(richer, 0.75, 0.0), base)
        for omega_b in (0.05, 0.1, 0.3):
            self.assertGreater(brightness_temperature(CosmologyParams(omega_b=omega_b), 0.75, 0.0), base)

    def test_hi_mass(self):
        self.assertAlmostEqual(hi_mass_per_cell(self.cosmo, 0.75, 1.0, 0.0) / 2.0295e8, 1.0, places=4)
        self.assertEqual(hi_mass_per_cell(self.cosmo, 0.75, 1.0, -1.0), 0.0)
        self.assertAlmostEqual(
            hi_mass_per_cell(self.cosmo, 0.75, 2.0, 0.3),
            2 * hi_mass_per_cell(self.cosmo, 0.75, 1.0, 0.3),
        )

    def test_cosmology_must_be_flat(self):
        with self.assertRaises(ValueError):
            CosmologyParams(omega_m=0.5, omega_lambda=0.685)


class ForegroundSpectrumTests(SimpleTestCase):
    def test_pivot_returns_amplitude(self):
        for model in FOREGROUND_PRESETS.values():
            value = foreground_cl(model, 1000.0, 130e6, 130e6)
            self.assertAlmostEqual(value / model.amplitude, 1.0, delta=1e-12)

    def test_known_values(self):
        self.assertAlmostEqual(foreground_cl(SYNCHROTRON, 2000.0, 130e6, 130e6), 700 * 0.5 ** 2.4)
        self.assertAlmostEqual(foreground_cl(SYNCHROTRON, 2000.0, 130e6, 130e6), 132.6, places=1)
        self.assertAlmostEqual(foreground_cl(SYNCHROTRON, 1000.0, 810e6, 810e6), 0.0249, places=4)

    def test_symmetry_and_l_scaling(self):
        for model in FOREGROUND_PRESETS.values():
            self.assertEqual(
                foreground_cl(model, 500.0, 801e6, 815e6),
                foreground_cl(model, 500.0, 815e6, 801e6),
            )
            ratio = foreground_cl(model, 800.0, 805e6, 806e6) / foreground_cl(model, 400.0, 805e6, 806e6)
            self.assertAlmostEqual(ratio / 2.0 ** -model.beta, 1.0, delta=1e-12)

    def test_rejects_non_positive_multipole(self):
        with self.assertRaises(ValueError):
            foreground_cl(SYNCHROTRON, 0.0, 130e6, 130e6)

    def test_single_channel_covariance(self):
        axis = FrequencyAxis(809.5e6, 1e6, 1)
        covariance = frequency_covariance(SYNCHROTRON, axis)
        self.assertEqual(covariance.shape, (1, 1))
        self.assertAlmostEqual(covariance[0, 0] / (700 * (130e6 / 810e6) ** 5.6), 1.0, delta=1e-12)

    def test_infinite_coherence_is_rank_one(self):
        model = ForegroundModel('flat', 1.0, 2.0, 2.5, 1e12)
        axis = FrequencyAxis(800e6, 1e6, 20)
        profile = (130e6 / axis.frequencies) ** model.alpha
        np.testing.assert_allclose(frequency_covariance(model, axis), np.outer(profile, profile), rtol=1e-10)

    def test_presets_factorize_over_default_band(self):
        axis = FrequencyAxis.from_band(810e6, 18.5e3, 1080)
        for model in FOREGROUND_PRESETS.values():
            covariance = frequency_covariance(model, axis)
            np.testing.assert_array_equal(covariance, covariance.T)
            factor = cholesky_factor(covariance)
            self.assertTrue(np.isfinite(factor).all())

    def test_indefinite_matrix_rejected(self):
        with self.assertRaisesRegex(CovarianceError, 'not PSD'):
            cholesky_factor(np.array([[1.0, 2.0], [2.0, 1.0]]))


class FieldGenerationTests(SimpleTestCase):
    def test_zero_amplitude(self):
        spec = small_patch()
        cube = generate_correlated_field(spec, ForegroundModel('none', 0.0, 2.0, 2.0, 1.0), seed=1)
        self.assertFalse(cube.data.any())

    def test_deterministic_per_seed(self):
        spec = small_patch()
        first = generate_correlated_field(spec, SYNCHROTRON, seed=7)
        self.assertEqual(first, generate_correlated_field(spec, SYNCHROTRON, seed=7))
        self.assertNotEqual(first, generate_correlated_field(spec, SYNCHROTRON, seed=8))

    def test_worker_count_does_not_change_output(self):
        spec = small_patch()
        serial = generate_correlated_field(spec, SYNCHROTRON, seed=3, workers=1)
        parallel = generate_correlated_field(spec, SYNCHROTRON, seed=3, workers=4)
        self.assertEqual(serial, parallel)

    def test_uniform_hi_without_fluctuations(self):
        spec = small_patch()
        cosmo = CosmologyParams()
        cube = generate_hi_cube(spec, cosmo, HiFieldSpec(cl_amplitude=0.0), seed=0)
        expected = mean_brightness_temperature(cosmo, redshift_of_frequency(spec.axis.frequencies))
        np.testing.assert_allclose(cube.data, np.broadcast_to(expected, cube.shape), rtol=1e-12)

    def test_hi_channel_means_equal_mean_temperature(self):
        spec = small_patch(n_pix=64)
        cosmo = CosmologyParams()
        cube = generate_hi_cube(spec, cosmo, HiFieldSpec(), seed=11)
        expected = mean_brightness_temperature(cosmo, redshift_of_frequency(spec.axis.frequencies))
        np.testing.assert_allclose(cube.data.mean(axis=0), expected, rtol=1e-9)
        self.assertGreater(cube.data.std(axis=0).min(), 0.0)

    @tag('slow')
    def test_binned_spectrum_matches_model(self):
        # 5 degree patch at 64^2: modes sit at l = 72 |k|
        spec = small_patch(n_pix=64, n_channels=8, dec_span=5.0)
        edges = np.array([200.0, 390.0, 580.0, 770.0, 960.0, 1150.0])
        ell = multipole_grid(spec.n_pix, spec.pixel_size)
        g00 = frequency_covariance(SYNCHROTRON, spec.axis)[0, 0]

        expected = []
        for low, high in zip(edges[:-1], edges[1:]):
            modes = ell[(ell >= low) & (ell < high)]
            expected.append(np.mean((SYNCHROTRON.l_ref / modes) ** SYNCHROTRON.beta) * g00)
        expected = np.array(expected)

        estimates = np.array([
            angular_power_spectrum(
                generate_correlated_field(spec, SYNCHROTRON, seed=seed).channel_map(0),
                spec.pixel_size,
                edges,
            ).cl_values
            for seed in range(50)
        ])
        standard_error = estimates.std(axis=0, ddof=1) / np.sqrt(len(estimates))
        deviation = np.abs(estimates.mean(axis=0) - expected)
        self.assertTrue(np.all(deviation < 3 * standard_error), msg=f"{deviation / standard_error}")


class ComposeSkyTests(SimpleTestCase):
    def setUp(self):
        self.spec = small_patch()
        self.cosmo = CosmologyParams()
        self.hi_spec = HiFieldSpec()

    def test_exact_additivity(self):
        sky = compose_sky(self.spec, self.cosmo, self.hi_spec, list(FOREGROUND_PRESETS.values()), seed=5)
        residual = sky.total.data - sky.hi.data - sky.foreground.data
        self.assertFalse(residual.any())

    def test_empty_foreground_list(self):
        with self.assertRaises(ValueError):
            compose_sky(self.spec, self.cosmo, self.hi_spec, [], seed=5)
        sky = compose_sky(self.spec, self.cosmo, self.hi_spec, [], seed=5, allow_empty=True)
        np.testing.assert_array_equal(sky.total.data, sky.hi.data)

    def test_duplicate_component_names_rejected(self):
        with self.assertRaises(ValueError):
            compose_sky(self.spec, self.cosmo, self.hi_spec, [SYNCHROTRON, SYNCHROTRON], seed=5)

    def test_foregrounds_dominate_hi(self):
        spec = SkyPatchSpec((20.0, 50.0), (25.0, 55.0), 32, FrequencyAxis.from_band(810e6, 92.5e3, 16))
        sky = compose_sky(spec, self.cosmo, self.hi_spec, list(FOREGROUND_PRESETS.values()), seed=2)
        hi_rms = np.sqrt(np.mean(sky.hi.data ** 2))
        fg_rms = np.sqrt(np.mean(sky.foreground.data ** 2))
        self.assertGreater(fg_rms, 10 * hi_rms)

    def test_frequency_form_is_logged(self):
        with self.assertLogs('skysim.services', level='WARNING') as logs:
            compose_sky(self.spec, self.cosmo, self.hi_spec, [SYNCHROTRON], seed=5)
        self.assertTrue(any('dimensionally' in line for line in logs.output))
