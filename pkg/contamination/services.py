import logging
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd

from cube.io import read_cube, read_mask, write_cube, write_mask
from cube.models import FrequencyAxis, Mask, PatchSample, SpectralCube
from imbench.rng import counter_rng, stream_id
from imbench.tables import read_table, write_table
from .models import FlagReport

logger = logging.getLogger(__name__)

RFI_STREAM = 'rfi'
PATCH_STREAM = 'patches'
SIGMA_CLIP = 3.0


def inject_rfi(cube, model):
    """Add synthetic interference to ``cube``; returns the contaminated cube and truth mask"""
    rng = counter_rng(model.seed, stream_id(RFI_STREAM))
    n_rows, n_channels = cube.shape
    rms = float(np.sqrt(np.mean(cube.data ** 2)))
    if rms == 0:
        logger.warning("Clean cube has zero RMS; RFI amplitudes are scaled to 1 mK")
        rms = 1.0
    log_low, log_high = np.log(model.amplitude_scale[0]), np.log(model.amplitude_scale[1])
    low, high = rms * model.amplitude_scale[0], rms * model.amplitude_scale[1]

    def amplitudes(size):
        return rms * np.exp(rng.uniform(log_low, log_high, size))

    interference = np.zeros(cube.shape)
    hit = np.zeros(cube.shape, dtype=bool)

    # Persistent narrow-band channels
    channels = np.flatnonzero(rng.random(n_channels) < model.narrowband_channel_prob)
    if channels.size:
        levels = amplitudes(channels.size)
        # per-cell variation about the channel level, clipped to the amplitude range
        varied = levels * rng.uniform(0.5, 1.5, (n_rows, channels.size))
        interference[:, channels] += np.clip(varied, low, high)
        hit[:, channels] = True

    # Broad-band bursts: one amplitude over a block of cycles and channels
    n_bursts = int(rng.poisson(model.broadband_rate * n_rows / 1000.0))
    for _ in range(n_bursts):
        duration = int(rng.integers(model.broadband_duration[0], model.broadband_duration[1] + 1))
        width = int(rng.integers(model.broadband_width[0], model.broadband_width[1] + 1))
        row = int(rng.integers(0, n_rows))
        channel = int(rng.integers(0, n_channels))
        rows = slice(row, min(row + duration, n_rows))
        chans = slice(channel, min(channel + width, n_channels))
        interference[rows, chans] += amplitudes(1)[0]
        hit[rows, chans] = True

    # Scattered outliers
    n_outliers = int(rng.binomial(cube.data.size, model.outlier_rate))
    if n_outliers:
        cells = rng.choice(cube.data.size, size=n_outliers, replace=False)
        interference.flat[cells] += amplitudes(n_outliers)
        hit.flat[cells] = True

    contaminated = cube.data + interference
    truth = hit & (contaminated != cube.data)
    logger.info(
        f"Injected {len(channels)} RFI channels, {n_bursts} bursts, {n_outliers} outliers "
        f"({truth.mean():.2%} of cells)"
    )
    return cube.with_data(contaminated), Mask(truth)


def apply_rfi_template(cube, template, template_mask, seed):
    """Add a randomly placed window of an external RFI template at its flagged cells"""
    n_rows, n_channels = cube.shape
    if template.shape != template_mask.shape:
        raise ValueError(f"template shape {template.shape} does not match mask {template_mask.shape}")
    if template.n_rows < n_rows or template.n_channels < n_channels:
        raise ValueError(f"template {template.shape} is smaller than cube {cube.shape}")
    rng = counter_rng(seed, stream_id(RFI_STREAM))
    row = int(rng.integers(0, template.n_rows - n_rows + 1))
    channel = int(rng.integers(0, template.n_channels - n_channels + 1))
    window = (slice(row, row + n_rows), slice(channel, channel + n_channels))
    flags = template_mask.flags[window]
    contaminated = cube.data + np.where(flags, template.data[window], 0.0)
    truth = flags & (contaminated != cube.data)
    logger.info(f"Applied RFI template window at ({row}, {channel}), {truth.mean():.2%} of cells")
    return cube.with_data(contaminated), Mask(truth)


def load_rfi_template(cube_path, mask_path):
    """Read an RFI template pair (IMC1 interference values, IMM1 flags)"""
    return read_cube(cube_path), read_mask(mask_path)


def flag_channels(cube, max_iterations=10, exclude_flagged=True):
    """Flag channels whose mean lies beyond 3 sigma of the channel means.

    Iterates until no new channel is flagged or ``max_iterations`` passes.
    With ``exclude_flagged`` the statistics of later passes use surviving
    channels only.
    """
    if cube.n_channels < 2:
        raise ValueError("channel flagging needs at least 2 channels")
    means = cube.data.mean(axis=0)
    flagged = np.zeros(cube.n_channels, dtype=bool)
    iterations = 0
    while iterations < max_iterations and not flagged.all():
        iterations += 1
        reference = means[~flagged] if exclude_flagged else means
        center, sigma = reference.mean(), reference.std()
        if sigma == 0:
            break
        new = ~flagged & (np.abs(means - center) > SIGMA_CLIP * sigma)
        if not new.any():
            break
        flagged |= new

    flags = np.zeros(cube.shape, dtype=bool)
    flags[:, flagged] = True
    channels = np.flatnonzero(flagged).tolist()
    logger.info(f"Flagged {len(channels)} channels in {iterations} passes")
    return FlagReport(mask=Mask(flags), flagged_channels=channels, iterations=iterations)


def flag_outliers(cube, prior_mask=None, exclude_flagged=True, passes=1):
    """Flag cells beyond 3 sigma of their row (cycle).

    One pass by default. Later passes recompute each row's statistics
    without the cells already flagged, exposing weaker outliers that a
    stronger one in the same row shadowed.
    """
    if passes < 1:
        raise ValueError(f"passes must be at least 1, got {passes}")
    prior = np.zeros(cube.shape, dtype=bool) if prior_mask is None else prior_mask.flags
    if prior.shape != cube.shape:
        raise ValueError(f"prior mask shape {prior.shape} does not match cube {cube.shape}")
    data = cube.data
    base = ~prior if exclude_flagged else np.ones(cube.shape, dtype=bool)

    outside = np.zeros(cube.shape, dtype=bool)
    iterations = 0
    while iterations < passes:
        iterations += 1
        valid = base & ~outside
        counts = valid.sum(axis=1)
        usable = counts > 0
        safe_counts = np.where(usable, counts, 1)
        means = np.where(valid, data, 0.0).sum(axis=1) / safe_counts
        deviations = data - means[:, None]
        sigma = np.sqrt(np.where(valid, deviations ** 2, 0.0).sum(axis=1) / safe_counts)

        new = np.abs(deviations) > SIGMA_CLIP * sigma[:, None]
        new &= (usable & (sigma > 0))[:, None]
        new &= ~prior & ~outside
        if not new.any():
            break
        outside |= new

    skipped = int((~base.any(axis=1)).sum())
    if skipped:
        logger.info(f"Skipped {skipped} fully masked rows during outlier flagging")
    count = int(outside.sum())
    logger.info(f"Flagged {count} outlier cells in {iterations} passes")
    return FlagReport(mask=Mask(outside), outlier_count=count, iterations=iterations)


def _mask_of(report):
    return report.mask if isinstance(report, FlagReport) else report


def combine_flags(channel_report, outlier_report):
    """Union of channel and outlier flags"""
    return _mask_of(channel_report).union(_mask_of(outlier_report))


class CubeFlags(NamedTuple):
    channels: FlagReport
    outliers: FlagReport
    mask: Mask


def flag_cube(cube, max_iterations=10, exclude_flagged=True, outlier_passes=1):
    """Channel flagging, then outlier flagging outside flagged channels"""
    channels = flag_channels(cube, max_iterations=max_iterations, exclude_flagged=exclude_flagged)
    outliers = flag_outliers(cube, channels.mask, exclude_flagged=exclude_flagged, passes=outlier_passes)
    return CubeFlags(channels, outliers, combine_flags(channels, outliers))


def patch_draw_count(n_rows, n_channels, patch_size):
    """floor(3 n1 n2 / S^2) windows per data file"""
    return (3 * n_rows * n_channels) // (patch_size * patch_size)


def extract_patches(cube, mask, patch_size=256, max_fraction=0.40, seed=0, limit=None):
    """Random square windows with masked fraction at most ``max_fraction``.

    Over-threshold windows are discarded, not redrawn. ``limit`` stops
    after that many retained samples.
    """
    n_rows, n_channels = cube.shape
    if n_rows < patch_size or n_channels < patch_size:
        raise ValueError(f"cube {cube.shape} is smaller than patch size {patch_size}")
    flags = np.zeros(cube.shape, dtype=bool) if mask is None else mask.flags
    attempts = patch_draw_count(n_rows, n_channels, patch_size)
    stream = stream_id(PATCH_STREAM)

    samples = []
    for draw in range(attempts):
        rng = counter_rng(seed, stream, draw)
        row = int(rng.integers(0, n_rows - patch_size + 1))
        channel = int(rng.integers(0, n_channels - patch_size + 1))
        window = (slice(row, row + patch_size), slice(channel, channel + patch_size))
        window_mask = flags[window]
        fraction = float(window_mask.mean())
        if fraction > max_fraction:
            continue
        samples.append(PatchSample(cube.data[window], window_mask, fraction, (row, channel)))
        if limit is not None and len(samples) >= limit:
            break

    logger.info(f"Kept {len(samples)} of {attempts} patch draws")
    return samples


def write_patches(samples, directory, axis=None, config_hash=None):
    """Persist patches as cube/mask pairs plus ``index.csv``"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = []
    for index, sample in enumerate(samples):
        if axis is None:
            patch_axis = FrequencyAxis(1.0, 1.0, sample.size)
        else:
            patch_axis = axis.window(sample.origin[1], sample.size)
        stem = f'patch_{index:05d}'
        write_cube(SpectralCube(sample.data, patch_axis), directory / f'{stem}.imc')
        write_mask(Mask(sample.mask), directory / f'{stem}.imm', axis=patch_axis)
        rows.append({
            'id': index,
            'origin_row': sample.origin[0],
            'origin_channel': sample.origin[1],
            'masked_fraction': sample.masked_fraction,
        })
    frame = pd.DataFrame(rows, columns=['id', 'origin_row', 'origin_channel', 'masked_fraction'])
    return write_table(frame, directory / 'index.csv', config_hash)


def read_patches(directory):
    directory = Path(directory)
    index = read_table(directory / 'index.csv')
    samples = []
    for record in index.itertuples(index=False):
        stem = f'patch_{int(record.id):05d}'
        data = read_cube(directory / f'{stem}.imc').data
        flags = read_mask(directory / f'{stem}.imm').flags
        samples.append(PatchSample(
            data, flags, float(record.masked_fraction),
            (int(record.origin_row), int(record.origin_channel)),
        ))
    return samples
