import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from cube.io import write_cube
from cube.models import FrequencyAxis, Mask, SpectralCube
from imbench.exceptions import RestorerContractError
from imbench.tables import read_table
from .models import RestorationRecord
from .services import (
    ExternalRestorer,
    FunctionRestorer,
    LowRankRestorer,
    MeanFillRestorer,
    SpectralPolyRestorer,
    build_restorer,
    ingest_external_restoration,
    low_rank_restore,
    mean_fill_restore,
    poly_fallback_rows,
    restore_dataset_variants,
    spectral_poly_restore,
)


def quadratic_rows(n_rows=30, n_channels=50, seed=0):
    rng = np.random.default_rng(seed)
    x = np.arange(n_channels, dtype=float)
    a, b, c = rng.uniform(-5, 5, (3, n_rows, 1))
    return a + b * x / 10 + c * (x / 10) ** 2


def random_mask(shape, fraction, seed=0):
    return np.random.default_rng(seed).random(shape) < fraction


class MeanFillTests(SimpleTestCase):
    def test_empty_mask_is_identity(self):
        data = np.random.default_rng(0).standard_normal((4, 5))
        np.testing.assert_array_equal(mean_fill_restore(data, np.zeros((4, 5), bool)), data)

    def test_row_mean(self):
        restored = mean_fill_restore(np.array([[1.0, 100.0, 3.0]]), np.array([[False, True, False]]))
        np.testing.assert_array_equal(restored, [[1.0, 2.0, 3.0]])

    def test_fully_masked_row_takes_global_mean(self):
        data = np.array([[1.0, 3.0], [7.0, 9.0], [5.0, 5.0]])
        flags = np.array([[False, False], [True, True], [False, False]])
        np.testing.assert_array_equal(mean_fill_restore(data, flags)[1], [3.5, 3.5])

    def test_fully_masked_input(self):
        with self.assertLogs('restore.services', level='WARNING'):
            restored = mean_fill_restore(np.ones((2, 3)), np.ones((2, 3), bool))
        np.testing.assert_array_equal(restored, np.zeros((2, 3)))


class SpectralPolyTests(SimpleTestCase):
    def test_recovers_quadratic_rows(self):
        data = quadratic_rows()
        flags = random_mask(data.shape, 0.3, seed=1)
        flags[:, :3] = False
        restored = spectral_poly_restore(data, flags, order=2)
        error = np.abs(restored[flags] - data[flags]).max()
        self.assertLess(error, 1e-8 * np.abs(data).max())

    def test_empty_mask_is_identity(self):
        data = quadratic_rows()
        np.testing.assert_array_equal(spectral_poly_restore(data, np.zeros(data.shape, bool)), data)

    def test_sparse_row_falls_back_to_mean(self):
        data = np.array([[1.0, 2.0, 4.0, 8.0, 16.0]])
        flags = np.array([[False, True, True, True, False]])
        self.assertTrue(poly_fallback_rows(flags, 2)[0])
        with self.assertLogs('restore.services', level='WARNING'):
            restored = spectral_poly_restore(data, flags, order=2)
        np.testing.assert_array_equal(restored, [[1.0, 8.5, 8.5, 8.5, 16.0]])

    def test_beats_mean_fill_on_quadratics(self):
        data = quadratic_rows(seed=4)
        flags = random_mask(data.shape, 0.25, seed=4)
        poly_error = np.abs(spectral_poly_restore(data, flags) - data)[flags].mean()
        mean_error = np.abs(mean_fill_restore(data, flags) - data)[flags].mean()
        self.assertLess(poly_error, mean_error)

    def test_clipped_fit_ignores_unflagged_spike(self):
        truth = quadratic_rows(seed=5)
        flags = random_mask(truth.shape, 0.2, seed=5)
        flags[0, :3] = False
        flags[0, 45:] = True
        column = 10 + int(np.flatnonzero(~flags[0, 10:])[0])
        data = truth.copy()
        data[0, column] += 1e4

        plain = spectral_poly_restore(data, flags, order=2)
        clipped = spectral_poly_restore(data, flags, order=2, clip_sigma=5.0)
        self.assertGreater(np.abs(plain - truth)[flags].max(), 1.0)
        self.assertLess(np.abs(clipped - truth)[flags].max(), 1e-6 * np.abs(truth).max())
        np.testing.assert_array_equal(clipped[~flags], data[~flags])

    def test_clipping_leaves_clean_rows_exact(self):
        data = quadratic_rows(seed=6)
        flags = random_mask(data.shape, 0.3, seed=6)
        flags[:, :3] = False
        restored = spectral_poly_restore(data, flags, order=2, clip_sigma=3.0, clip_passes=3)
        self.assertLess(np.abs(restored - data)[flags].max(), 1e-6 * np.abs(data).max())

    def test_clip_options_validated(self):
        data = quadratic_rows()
        flags = random_mask(data.shape, 0.2)
        with self.assertRaises(ValueError):
            spectral_poly_restore(data, flags, clip_sigma=0.0)
        with self.assertRaises(ValueError):
            spectral_poly_restore(data, flags, clip_sigma=3.0, clip_passes=0)
        restorer = SpectralPolyRestorer(order=2, clip_sigma=4.0)
        np.testing.assert_array_equal(
            restorer.apply(data, Mask(flags)),
            spectral_poly_restore(data, flags, order=2, clip_sigma=4.0),
        )


class LowRankTests(SimpleTestCase):
    def test_rank_one_recovery(self):
        rng = np.random.default_rng(2)
        data = np.outer(rng.uniform(1, 2, 60), rng.uniform(1, 2, 40))
        flags = random_mask(data.shape, 0.2, seed=2)
        restored = low_rank_restore(data, flags, rank=1)
        relative = np.abs(restored[flags] - data[flags]) / np.abs(data[flags])
        self.assertLess(relative.max(), 1e-4)

    def test_empty_mask_is_identity(self):
        data = np.random.default_rng(0).standard_normal((10, 8))
        np.testing.assert_array_equal(low_rank_restore(data, np.zeros(data.shape, bool)), data)

    def test_full_rank_reaches_fixed_point(self):
        data = np.random.default_rng(1).standard_normal((12, 6))
        flags = random_mask(data.shape, 0.2, seed=1)
        restored = low_rank_restore(data, flags, rank=6, max_iter=5)
        np.testing.assert_allclose(restored, mean_fill_restore(data, flags), atol=1e-10)

    def test_rank_out_of_range(self):
        with self.assertRaises(ValueError):
            low_rank_restore(np.ones((3, 4)), np.zeros((3, 4), bool), rank=5)


class RestorerContractTests(SimpleTestCase):
    restorers = [MeanFillRestorer(), SpectralPolyRestorer(order=2), LowRankRestorer(rank=3)]

    def test_observed_cells_bit_identical_and_deterministic(self):
        for seed in range(5):
            data = np.random.default_rng(seed).standard_normal((40, 30)) * 10
            mask = Mask(random_mask(data.shape, 0.3, seed=seed))
            for restorer in self.restorers:
                first = restorer.apply(data, mask)
                second = restorer.apply(data, mask)
                np.testing.assert_array_equal(first[~mask.flags], data[~mask.flags])
                self.assertEqual(first.tobytes(), second.tobytes())
                self.assertTrue(np.isfinite(first).all())

    def test_violation_is_rejected(self):
        shifty = FunctionRestorer(lambda data, mask: data + 1.0, name='shifty')
        with self.assertRaises(RestorerContractError) as context:
            shifty.apply(np.zeros((3, 3)), Mask.empty((3, 3)))
        self.assertEqual(context.exception.max_deviation, 1.0)

    def test_non_finite_output_rejected(self):
        broken = FunctionRestorer(lambda data, mask: np.where(mask.flags, np.nan, data))
        with self.assertRaises(RestorerContractError):
            broken.apply(np.ones((2, 2)), Mask(np.eye(2, dtype=bool)))

    def test_build_restorer(self):
        self.assertIsInstance(build_restorer('spectral_poly', order=3), SpectralPolyRestorer)
        with self.assertRaises(ValueError):
            build_restorer('lama')


class ExternalRestorationTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = Path(self.tmp.name)
        self.data = np.random.default_rng(3).uniform(1, 2, (6, 5))
        self.flags = np.zeros((6, 5), bool)
        self.flags[:, 2] = True

    def write(self, values, name='restored.imc'):
        path = self.dir / name
        write_cube(SpectralCube(values, FrequencyAxis(1.0, 1.0, values.shape[1])), path)
        return path

    def test_identical_accepted(self):
        restored = ingest_external_restoration(self.data, self.flags, self.write(self.data))
        np.testing.assert_array_equal(restored, self.data)

    def test_masked_changes_accepted(self):
        values = self.data.copy()
        values[:, 2] = 1e6
        restored = ingest_external_restoration(self.data, self.flags, self.write(values))
        np.testing.assert_array_equal(restored[:, 2], 1e6)

    def test_altered_observed_cell_rejected(self):
        values = self.data.copy()
        values[1, 0] *= 1.1
        report = self.dir / 'rejections.csv'
        with self.assertRaises(RestorerContractError) as context:
            ingest_external_restoration(self.data, self.flags, self.write(values), report_path=report)
        self.assertAlmostEqual(context.exception.max_deviation, 0.1)
        frame = read_table(report)
        self.assertEqual(list(frame.columns), ['cell', 'expected', 'found', 'deviation'])
        self.assertEqual(frame['cell'].tolist(), ['(1, 0)'])

    def test_shape_mismatch(self):
        with self.assertRaises(RestorerContractError):
            ingest_external_restoration(self.data, self.flags, self.write(np.ones((6, 4))))

    def test_restorer_narrows_to_requested_mask(self):
        values = self.data.copy()
        values[:, 2] = 0.0
        restorer = ExternalRestorer.from_file(self.write(values), reference_mask=Mask(self.flags))
        narrow = np.zeros((6, 5), bool)
        narrow[0, 2] = True
        restored = restorer.apply(self.data, Mask(narrow))
        self.assertEqual(restored[0, 2], 0.0)
        np.testing.assert_array_equal(restored[1:], self.data[1:])

    def test_missing_file(self):
        with self.assertRaises(FileNotFoundError):
            ExternalRestorer.from_file(self.dir / 'absent.imc')


class DatasetVariantTests(SimpleTestCase):
    def setUp(self):
        data = np.random.default_rng(7).standard_normal((20, 12))
        self.cube = SpectralCube(data, FrequencyAxis(1.0, 1.0, 12))
        channels = np.zeros(data.shape, bool)
        channels[:, 4] = True
        outliers = np.zeros(data.shape, bool)
        outliers[3, 9] = outliers[11, 0] = True
        self.channels = Mask(channels)
        self.outliers = Mask(outliers)

    def test_empty_masks(self):
        empty = Mask.empty(self.cube.shape)
        variants = restore_dataset_variants(self.cube, empty, empty, MeanFillRestorer())
        for variant in variants:
            self.assertEqual(variant, self.cube)

    def test_original_is_untouched(self):
        variants = restore_dataset_variants(self.cube, self.channels, self.outliers, MeanFillRestorer())
        self.assertEqual(variants.original.data.tobytes(), self.cube.data.tobytes())

    def test_full_variant_covers_union(self):
        variants = restore_dataset_variants(self.cube, self.channels, self.outliers, mean_fill_restore)
        changed = {name: getattr(variants, name).data != self.cube.data for name in variants._fields}
        np.testing.assert_array_equal(changed['outliers'], self.outliers.flags)
        np.testing.assert_array_equal(changed['channels'], self.channels.flags)
        np.testing.assert_array_equal(changed['full'], changed['outliers'] | changed['channels'])


class DatasetVariantQualityTests(SimpleTestCase):
    """Quadratic sky rows with one interference channel and two outliers"""

    def setUp(self):
        self.truth = quadratic_rows(seed=6)
        data = self.truth.copy()
        data[:, 7] += 1e5
        data[4, 30] += 1e4
        data[12, 41] += 3e3
        channels = np.zeros(data.shape, bool)
        channels[:, 7] = True
        outliers = np.zeros(data.shape, bool)
        outliers[4, 30] = outliers[12, 41] = True
        self.channels, self.outliers = Mask(channels), Mask(outliers)
        self.union = self.channels.union(self.outliers)
        cube = SpectralCube(data, FrequencyAxis(1.0, 1.0, data.shape[1]))
        self.variants = restore_dataset_variants(cube, self.channels, self.outliers, SpectralPolyRestorer(2))
        self.tolerance = 1e-6 * np.abs(self.truth).max()

    def error(self, name):
        return np.abs(getattr(self.variants, name).data - self.truth)

    def test_partial_variants_restore_their_cells_exactly(self):
        self.assertLess(self.error('outliers')[self.outliers.flags].max(), self.tolerance)
        self.assertLess(self.error('channels')[self.channels.flags].max(), self.tolerance)
        self.assertLess(self.error('full')[self.union.flags].max(), self.tolerance)

    def test_partial_variants_agree_with_full_restoration(self):
        full = self.variants.full.data
        np.testing.assert_array_equal(self.variants.outliers.data[self.outliers.flags], full[self.outliers.flags])
        np.testing.assert_array_equal(self.variants.channels.data[self.channels.flags], full[self.channels.flags])

    def test_cell_errors_ordered_by_coverage(self):
        flags = self.union.flags
        unrestored = self.error('original')[flags]
        for partial in ('outliers', 'channels'):
            error = self.error(partial)[flags]
            self.assertTrue(np.all(error <= unrestored + self.tolerance), partial)
            self.assertTrue(np.all(self.error('full')[flags] <= error + self.tolerance), partial)
        self.assertGreater(self.error('original')[flags].sum(), self.error('outliers')[flags].sum())
        self.assertGreater(self.error('outliers')[flags].sum(), self.error('full')[flags].sum())
        self.assertGreater(self.error('original')[flags].sum(), self.error('channels')[flags].sum())
        self.assertGreater(self.error('channels')[flags].sum(), self.error('full')[flags].sum())

    def test_mean_fill_variants_keep_ordering(self):
        cube = self.variants.original
        variants = restore_dataset_variants(cube, self.channels, self.outliers, MeanFillRestorer())
        flags = self.union.flags
        totals = {name: np.abs(getattr(variants, name).data - self.truth)[flags].sum() for name in variants._fields}
        self.assertGreater(totals['original'], totals['outliers'])
        self.assertGreater(totals['original'], totals['channels'])
        self.assertGreater(totals['outliers'], totals['full'])
        self.assertGreater(totals['channels'], totals['full'])


class RestorationRecordTests(SimpleTestCase):
    def test_shapes_must_agree(self):
        with self.assertRaises(ValueError):
            RestorationRecord('mean_fill', 0.1, np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2), bool))
