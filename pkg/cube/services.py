import logging

import numpy as np

from .models import Mask, SpectralCube

logger = logging.getLogger(__name__)


def _flags_for(cube, mask):
    if mask is None:
        return np.zeros(cube.shape, dtype=bool)
    if mask.shape != cube.shape:
        raise ValueError(f"mask shape {mask.shape} does not match cube {cube.shape}")
    return mask.flags


def downsample_channels(cube, mask, factor):
    """Average every ``factor`` channels over unmasked cells.

    Output cells whose whole group is masked stay flagged and hold 0.
    Trailing channels that do not fill a group are dropped.
    """
    if int(factor) != factor or factor < 1:
        raise ValueError(f"downsample factor must be a positive integer, got {factor}")
    factor = int(factor)
    flags = _flags_for(cube, mask)
    n_out = cube.n_channels // factor
    if n_out == 0:
        raise ValueError(f"factor {factor} exceeds the {cube.n_channels} available channels")
    remainder = cube.n_channels - n_out * factor
    if remainder:
        logger.warning(f"Dropping {remainder} trailing channels not divisible by factor {factor}")

    used = n_out * factor
    values = cube.data[:, :used].reshape(cube.n_rows, n_out, factor)
    weights = ~flags[:, :used].reshape(cube.n_rows, n_out, factor)
    counts = weights.sum(axis=2)
    sums = np.where(weights, values, 0.0).sum(axis=2)
    means = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)

    downsampled = SpectralCube(means, cube.axis.downsampled(factor), cube.sky_grid)
    return downsampled, Mask(counts == 0)


def fill_empty_channels(cube, mask):
    """Fill fully masked channels with the mean of unmasked values in each row"""
    flags = _flags_for(cube, mask)
    empty_channels = flags.all(axis=0)
    if not empty_channels.any():
        return cube

    counts = (~flags).sum(axis=1)
    sums = np.where(flags, 0.0, cube.data).sum(axis=1)
    row_means = np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)
    degenerate = int((counts == 0).sum())
    if degenerate:
        logger.warning(f"{degenerate} rows have no unmasked values; their empty channels are set to 0")

    data = cube.data.copy()
    data[:, empty_channels] = row_means[:, None]
    logger.info(f"Filled {int(empty_channels.sum())} empty channels with row means")
    return cube.with_data(data)
