import struct
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from imbench.exceptions import CubeFormatError
from .io import read_cube, read_mask, write_cube, write_mask
from .models import FrequencyAxis, Mask, PatchSample, SkyGrid, SpectralCube
from .services import downsample_channels, fill_empty_channels


def make_cube(data, start=800e6, width=18.5e3):
    data = np.asarray(data, dtype=float)
    return SpectralCube(data, FrequencyAxis(start, width, data.shape[1]))


class FrequencyAxisTests(SimpleTestCase):
    def test_channel_centres(self):
        axis = FrequencyAxis(800e6, 1e6, 3)
        np.testing.assert_array_equal(axis.frequencies, [800.5e6, 801.5e6, 802.5e6])
        self.assertEqual(axis.stop_frequency, 803e6)

    def test_default_band(self):
        axis = FrequencyAxis.from_band(810e6, 18.5e3, 1080)
        self.assertAlmostEqual(axis.start_frequency, 800.01e6, places=3)
        self.assertAlmostEqual(axis.stop_frequency, 819.99e6, places=3)
        self.assertTrue(np.all(np.diff(axis.frequencies) > 0))

    def test_rejects_bad_values(self):
        with self.assertRaises(ValueError):
            FrequencyAxis(800e6, 0.0, 10)
        with self.assertRaises(ValueError):
            FrequencyAxis(800e6, 1.0, 0)

    def test_downsampled_axis(self):
        axis = FrequencyAxis(800e6, 18.5e3, 1080).downsampled(20)
        self.assertEqual(axis.n_channels, 54)
        self.assertAlmostEqual(axis.channel_width, 370e3)


class SpectralCubeTests(SimpleTestCase):
    def test_column_count_must_match_axis(self):
        with self.assertRaises(ValueError):
            SpectralCube(np.zeros((2, 3)), FrequencyAxis(1.0, 1.0, 4))

    def test_non_finite_rejected(self):
        with self.assertRaisesRegex(ValueError, 'non-finite'):
            make_cube([[1.0, np.nan]])

    def test_sky_grid_must_cover_rows(self):
        with self.assertRaises(ValueError):
            SpectralCube(np.zeros((5, 2)), FrequencyAxis(1.0, 1.0, 2), SkyGrid(2, 2, 0.01))

    def test_data_is_read_only(self):
        cube = make_cube([[1.0, 2.0]])
        with self.assertRaises(ValueError):
            cube.data[0, 0] = 5.0

    def test_channel_map(self):
        data = np.arange(8.0).reshape(4, 2)
        cube = SpectralCube(data, FrequencyAxis(1.0, 1.0, 2), SkyGrid(2, 2, 0.01))
        np.testing.assert_array_equal(cube.channel_map(1), [[1.0, 3.0], [5.0, 7.0]])


class MaskTests(SimpleTestCase):
    def test_masked_fraction(self):
        mask = Mask([[True, False], [False, False]])
        self.assertEqual(mask.count, 1)
        self.assertEqual(mask.masked_fraction, 0.25)

    def test_union_requires_congruent_shapes(self):
        with self.assertRaisesRegex(ValueError, 'shape mismatch'):
            Mask.empty((2, 2)).union(Mask.empty((2, 3)))

    def test_patch_must_be_square(self):
        with self.assertRaises(ValueError):
            PatchSample(np.zeros((2, 3)), np.zeros((2, 3), bool), 0.0, (0, 0))


class CubeFileTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.dir = Path(self.tmp.name)

    def test_single_cell_file(self):
        cube = make_cube([[0.0]])
        path = self.dir / 'one.imc'
        write_cube(cube, path)
        raw = path.read_bytes()
        self.assertEqual(raw[:4], b'IMC1')
        self.assertEqual(len(raw), 64 + 8)
        self.assertEqual(read_cube(path), cube)

    def test_round_trip_is_bit_exact(self):
        rng = np.random.default_rng(3)
        cube = SpectralCube(
            rng.standard_normal((16, 5)) * 1e3,
            FrequencyAxis(800.01e6, 18.5e3, 5),
            SkyGrid(4, 4, 1e-3),
        )
        path = self.dir / 'cube.imc'
        write_cube(cube, path)
        restored = read_cube(path)
        self.assertEqual(restored, cube)
        self.assertEqual(restored.sky_grid, cube.sky_grid)

    def test_bad_magic(self):
        path = self.dir / 'cube.imc'
        write_cube(make_cube([[1.0, 2.0]]), path)
        raw = path.read_bytes()
        path.write_bytes(b'XXXX' + raw[4:])
        with self.assertRaisesRegex(CubeFormatError, 'bad magic'):
            read_cube(path)

    def test_truncated_payload(self):
        path = self.dir / 'cube.imc'
        write_cube(make_cube(np.ones((100, 1))), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with self.assertRaisesRegex(CubeFormatError, 'truncated'):
            read_cube(path)

    def test_version_mismatch(self):
        path = self.dir / 'cube.imc'
        write_cube(make_cube([[1.0]]), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:4] + struct.pack('<I', 2) + raw[8:])
        with self.assertRaisesRegex(CubeFormatError, 'version mismatch'):
            read_cube(path)

    def test_mask_round_trip(self):
        mask = Mask(np.array([[True, False, True], [False, False, True]]))
        path = self.dir / 'mask.imm'
        write_mask(mask, path)
        self.assertEqual(path.read_bytes()[:4], b'IMM1')
        self.assertEqual(read_mask(path), mask)

    def test_mask_file_is_not_a_cube(self):
        path = self.dir / 'mask.imm'
        write_mask(Mask.empty((2, 2)), path)
        with self.assertRaisesRegex(CubeFormatError, 'bad magic'):
            read_cube(path)


class DownsampleTests(SimpleTestCase):
    def test_full_size_band(self):
        cube = make_cube(np.zeros((2, 1080)))
        downsampled, mask = downsample_channels(cube, None, 20)
        self.assertEqual(downsampled.n_channels, 54)
        self.assertFalse(mask.flags.any())

    def test_constant_cube(self):
        cube = make_cube(np.full((3, 6), 5.0))
        downsampled, _ = downsample_channels(cube, None, 2)
        np.testing.assert_array_equal(downsampled.data, np.full((3, 3), 5.0))
        self.assertEqual(downsampled.axis.channel_width, 2 * cube.axis.channel_width)

    def test_masked_mean(self):
        cube = make_cube([[1.0, 3.0]])
        downsampled, mask = downsample_channels(cube, Mask([[True, False]]), 2)
        self.assertEqual(downsampled.data[0, 0], 3.0)
        self.assertFalse(mask.flags[0, 0])

    def test_fully_masked_group_stays_flagged(self):
        cube = make_cube([[1.0, 3.0, 4.0, 6.0]])
        downsampled, mask = downsample_channels(cube, Mask([[True, True, False, False]]), 2)
        np.testing.assert_array_equal(mask.flags, [[True, False]])
        np.testing.assert_array_equal(downsampled.data, [[0.0, 5.0]])

    def test_factor_one_is_identity(self):
        cube = make_cube(np.random.default_rng(0).standard_normal((4, 7)))
        downsampled, mask = downsample_channels(cube, Mask.empty(cube.shape), 1)
        self.assertEqual(downsampled, cube)
        self.assertEqual(mask.count, 0)

    def test_remainder_dropped(self):
        cube = make_cube(np.ones((2, 7)))
        with self.assertLogs('cube.services', level='WARNING'):
            downsampled, _ = downsample_channels(cube, None, 3)
        self.assertEqual(downsampled.n_channels, 2)

    def test_invalid_factor(self):
        with self.assertRaises(ValueError):
            downsample_channels(make_cube([[1.0]]), None, 0)


class FillEmptyChannelsTests(SimpleTestCase):
    def test_no_empty_channel_is_noop(self):
        cube = make_cube([[1.0, 2.0], [3.0, 4.0]])
        self.assertEqual(fill_empty_channels(cube, Mask([[True, False], [False, False]])), cube)

    def test_row_means_fill_empty_column(self):
        cube = make_cube([[1.0, 99.0], [3.0, -99.0]])
        filled = fill_empty_channels(cube, Mask([[False, True], [False, True]]))
        np.testing.assert_array_equal(filled.data, [[1.0, 1.0], [3.0, 3.0]])

    def test_partially_masked_channel_untouched(self):
        cube = make_cube([[1.0, 5.0, 7.0], [3.0, 6.0, 8.0]])
        mask = Mask([[False, True, True], [False, False, True]])
        filled = fill_empty_channels(cube, mask)
        np.testing.assert_array_equal(filled.data[:, :2], cube.data[:, :2])
        np.testing.assert_array_equal(filled.data[:, 2], [1.0, 4.5])

    def test_fully_masked_cube(self):
        cube = make_cube([[1.0, 2.0], [3.0, 4.0]])
        with self.assertLogs('cube.services', level='WARNING'):
            filled = fill_empty_channels(cube, Mask(np.ones((2, 2), bool)))
        np.testing.assert_array_equal(filled.data, np.zeros((2, 2)))
