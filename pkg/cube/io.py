"""
Binary cube and mask files.

Layout (little-endian)::

    magic       4 bytes   b"IMC1" (cube) or b"IMM1" (mask)
    version     u32
    n_rows      u64
    n_channels  u64
    n_x, n_y    u64, u64  sky grid, zeros if absent
    pixel_size  f64       radians, zero if absent
    start       f64       Hz
    width       f64       Hz
    payload     row-major f64 (cube) or u8 0/1 (mask)
"""

import logging
import os
import struct
from pathlib import Path

import numpy as np

from imbench.exceptions import CubeFormatError
from .models import FrequencyAxis, Mask, SkyGrid, SpectralCube

logger = logging.getLogger(__name__)

CUBE_MAGIC = b'IMC1'
MASK_MAGIC = b'IMM1'
FORMAT_VERSION = 1

_HEADER = struct.Struct('<4sIQQQQddd')


def _pack_header(magic, n_rows, axis, sky_grid):
    if sky_grid is None:
        n_x, n_y, pixel_size = 0, 0, 0.0
    else:
        n_x, n_y, pixel_size = sky_grid.n_x, sky_grid.n_y, sky_grid.pixel_size
    if axis is None:
        start, width, n_channels = 0.0, 0.0, 0
    else:
        start, width, n_channels = axis.start_frequency, axis.channel_width, axis.n_channels
    return _HEADER.pack(magic, FORMAT_VERSION, n_rows, n_channels, n_x, n_y, pixel_size, start, width)


def _write(path, header, payload):
    path = Path(path)
    tmp_path = path.with_name(path.name + '.tmp')
    with open(tmp_path, 'wb') as handle:
        handle.write(header)
        handle.write(payload)
    os.replace(tmp_path, path)


def _read(path, magic, itemsize):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise CubeFormatError(f"{path}: truncated header")
    found_magic, version, n_rows, n_channels, n_x, n_y, pixel_size, start, width = \
        _HEADER.unpack_from(raw)
    if found_magic != magic:
        raise CubeFormatError(f"{path}: bad magic {found_magic!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise CubeFormatError(f"{path}: version mismatch ({version} != {FORMAT_VERSION})")
    expected = n_rows * n_channels * itemsize
    payload = raw[_HEADER.size:]
    if len(payload) < expected:
        raise CubeFormatError(f"{path}: truncated payload ({len(payload)} of {expected} bytes)")
    if len(payload) > expected:
        raise CubeFormatError(f"{path}: size mismatch ({len(payload)} bytes, expected {expected})")
    sky_grid = SkyGrid(n_x, n_y, pixel_size) if n_x and n_y else None
    header = {
        'n_rows': n_rows,
        'n_channels': n_channels,
        'sky_grid': sky_grid,
        'start': start,
        'width': width,
    }
    return header, payload


def write_cube(cube, path):
    """Write ``cube`` as an IMC1 file"""
    if not np.isfinite(cube.data).all():
        raise CubeFormatError(f"{path}: cube contains non-finite values")
    header = _pack_header(CUBE_MAGIC, cube.n_rows, cube.axis, cube.sky_grid)
    _write(path, header, np.ascontiguousarray(cube.data, dtype='<f8').tobytes())


def read_cube(path):
    """Read an IMC1 file written by :func:`write_cube`"""
    header, payload = _read(path, CUBE_MAGIC, 8)
    data = np.frombuffer(payload, dtype='<f8').reshape(header['n_rows'], header['n_channels'])
    axis = FrequencyAxis(header['start'], header['width'], header['n_channels'])
    try:
        return SpectralCube(data.astype(np.float64), axis, header['sky_grid'])
    except ValueError as e:
        raise CubeFormatError(f"{path}: {e}") from e


def write_mask(mask, path, axis=None, sky_grid=None):
    """Write ``mask`` as an IMM1 file; axis and grid are optional header metadata"""
    n_rows, n_channels = mask.shape
    if axis is not None and axis.n_channels != n_channels:
        raise ValueError(f"axis has {axis.n_channels} channels but mask has {n_channels}")
    header = _pack_header(MASK_MAGIC, n_rows, axis, sky_grid)
    # n_channels must describe the payload even without an axis
    header = header[:16] + struct.pack('<Q', n_channels) + header[24:]
    _write(path, header, np.ascontiguousarray(mask.flags, dtype=np.uint8).tobytes())


def read_mask(path):
    """Read an IMM1 file written by :func:`write_mask`"""
    header, payload = _read(path, MASK_MAGIC, 1)
    values = np.frombuffer(payload, dtype=np.uint8)
    if values.size and values.max() > 1:
        raise CubeFormatError(f"{path}: mask payload must be 0/1")
    return Mask(values.reshape(header['n_rows'], header['n_channels']).astype(bool))
