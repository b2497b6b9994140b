"""
Restoration of masked cells.

Every restorer maps (data, mask) to a matrix that is bit-identical to the
input at unmasked cells and finite everywhere. ``Restorer.apply`` enforces
that contract; the trained inpainting network plugs in through
:class:`ExternalRestorer`.
"""

import abc
import logging
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd
from scipy import linalg

from cube.io import read_cube
from cube.models import Mask, SpectralCube
from imbench.exceptions import RestorerContractError
from imbench.tables import write_table

logger = logging.getLogger(__name__)


def _values(data):
    if isinstance(data, SpectralCube):
        return data.data
    return np.asarray(data, dtype=np.float64)


def _flags(mask, shape):
    flags = mask.flags if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)
    if flags.shape != tuple(shape):
        raise ValueError(f"mask shape {flags.shape} does not match data {tuple(shape)}")
    return flags


def mean_fill_restore(data, mask):
    """Replace masked cells by the mean of the unmasked cells in their row"""
    data = _values(data)
    flags = _flags(mask, data.shape)
    if not flags.any():
        return data.copy()
    if flags.all():
        logger.warning("Every cell is masked; mean fill returns zeros")
        return np.zeros_like(data)

    counts = (~flags).sum(axis=1)
    sums = np.where(flags, 0.0, data).sum(axis=1)
    global_mean = data[~flags].mean()
    row_means = np.divide(sums, counts, out=np.full(data.shape[0], global_mean), where=counts > 0)

    restored = data.copy()
    restored[flags] = np.broadcast_to(row_means[:, None], data.shape)[flags]
    return restored


def poly_fallback_rows(mask, order):
    """Rows with masked cells but fewer than ``order + 1`` observed cells"""
    flags = mask.flags if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)
    return flags.any(axis=1) & ((~flags).sum(axis=1) < order + 1)


def _clipped_poly_fit(vander, values, observed, order, clip_sigma, max_passes):
    """Per-row weighted fits that drop observed cells beyond ``clip_sigma`` robust sigmas.

    Returns the fitted curves, one row per row of ``values``.
    """
    used = observed.copy()
    floor = 1e-10 * np.abs(values).max(axis=1)
    for iteration in range(1, max_passes + 1):
        weights = used.astype(np.float64)
        gram = np.einsum('rc,ci,cj->rij', weights, vander, vander)
        moments = np.einsum('rc,ci->ri', weights * values, vander)
        fitted = np.linalg.solve(gram, moments[..., None])[..., 0] @ vander.T

        deviation = np.abs(values - fitted)
        sigma = 1.4826 * np.nanmedian(np.where(used, deviation, np.nan), axis=1)
        threshold = np.maximum(clip_sigma * sigma, floor)
        keep = observed & (deviation <= threshold[:, None])
        # rows left with too few cells keep their previous selection
        starved = keep.sum(axis=1) < order + 1
        keep[starved] = used[starved]
        if np.array_equal(keep, used):
            break
        used = keep
    logger.debug(f"Clipped fit: {iteration} passes, {int((observed & ~used).sum())} observed cells ignored")
    return fitted


def spectral_poly_restore(data, mask, order=2, clip_sigma=None, clip_passes=5):
    """Fill masked cells from a per-row polynomial in normalized channel index.

    Rows sharing a mask pattern are solved together. Rows with too few
    observed cells fall back to the row mean. With ``clip_sigma`` each row
    is refit up to ``clip_passes`` times without the observed cells lying
    beyond that many robust (MAD) sigmas of the previous fit, so unflagged
    interference does not drag the curve; those cells keep their values.
    """
    if order < 0:
        raise ValueError(f"order must be non-negative, got {order}")
    if clip_sigma is not None and clip_sigma <= 0:
        raise ValueError(f"clip_sigma must be positive, got {clip_sigma}")
    if clip_passes < 1:
        raise ValueError(f"clip_passes must be at least 1, got {clip_passes}")
    data = _values(data)
    flags = _flags(mask, data.shape)
    restored = data.copy()
    if not flags.any():
        return restored

    n_channels = data.shape[1]
    x = np.linspace(-1.0, 1.0, n_channels) if n_channels > 1 else np.zeros(1)
    vander = np.polynomial.polynomial.polyvander(x, order)

    fallback = poly_fallback_rows(flags, order)
    fittable = flags.any(axis=1) & ~fallback
    rows = np.flatnonzero(fittable)
    if rows.size and clip_sigma is not None:
        fitted = _clipped_poly_fit(vander, data[rows], ~flags[rows], order, clip_sigma, clip_passes)
        block = flags[rows]
        restored[rows] = np.where(block, fitted, data[rows])
    elif rows.size:
        patterns, inverse = np.unique(flags[rows], axis=0, return_inverse=True)
        inverse = inverse.ravel()
        for index, pattern in enumerate(patterns):
            members = rows[inverse == index]
            observed = ~pattern
            coefficients, *_ = linalg.lstsq(vander[observed], data[np.ix_(members, observed)].T)
            restored[np.ix_(members, pattern)] = (vander[pattern] @ coefficients).T

    if fallback.any():
        logger.warning(f"{int(fallback.sum())} rows have fewer than {order + 1} observed cells; using mean fill")
        restored[fallback] = mean_fill_restore(data, flags)[fallback]
    return restored


def low_rank_restore(data, mask, rank=4, tol=1e-6, max_iter=100):
    """Iterative truncated-SVD completion of the masked cells"""
    data = _values(data)
    flags = _flags(mask, data.shape)
    if not 1 <= rank <= min(data.shape):
        raise ValueError(f"rank must lie in [1, {min(data.shape)}], got {rank}")
    if not flags.any():
        return data.copy()
    if not np.isfinite(data[~flags]).all():
        raise ValueError("observed cells contain non-finite values")

    restored = mean_fill_restore(data, flags)
    threshold = tol * np.sqrt(np.mean(data[~flags] ** 2))
    for iteration in range(1, max_iter + 1):
        u, s, vt = linalg.svd(restored, full_matrices=False)
        approximation = (u[:, :rank] * s[:rank]) @ vt[:rank]
        change = np.sqrt(np.mean((approximation[flags] - restored[flags]) ** 2))
        restored[flags] = approximation[flags]
        if change <= threshold:
            logger.debug(f"Low-rank completion converged after {iteration} iterations")
            break
    else:
        logger.warning(f"Low-rank completion did not converge in {max_iter} iterations")
    return restored


def ingest_external_restoration(original, mask, restored_path, rtol=1e-6, report_path=None):
    """Load an externally restored cube and check that observed cells are intact.

    Observed cells must match ``original`` within ``rtol`` relative; any
    violation is written to ``report_path`` (when given) and rejected.
    The returned matrix carries the original values at observed cells.
    """
    data = _values(original)
    flags = _flags(mask, data.shape)
    restored = read_cube(restored_path).data
    if restored.shape != data.shape:
        raise RestorerContractError(
            f"shape mismatch: restored {restored.shape} vs original {data.shape}"
        )

    deviation = np.abs(restored - data)
    violations = ~flags & (deviation > rtol * np.abs(data))
    if violations.any():
        relative = np.divide(
            deviation, np.abs(data), out=np.full(data.shape, np.inf), where=data != 0
        )
        max_deviation = float(relative[violations].max())
        if report_path is not None:
            rows, channels = np.nonzero(violations)
            frame = pd.DataFrame({
                'cell': [f'({r}, {c})' for r, c in zip(rows, channels)],
                'expected': data[violations],
                'found': restored[violations],
                'deviation': deviation[violations],
            })
            write_table(frame, report_path)
        raise RestorerContractError(
            f"{restored_path}: {int(violations.sum())} observed cells altered "
            f"(max relative deviation {max_deviation:.3e})",
            max_deviation,
        )

    logger.info(f"Accepted external restoration {restored_path}")
    return np.where(flags, restored, data)


def check_restoration(data, flags, restored, name):
    """Raise RestorerContractError unless ``restored`` honours the restorer contract"""
    if restored.shape != data.shape:
        raise RestorerContractError(f"{name}: output shape {restored.shape} != input {data.shape}")
    if not np.isfinite(restored).all():
        raise RestorerContractError(f"{name}: output contains non-finite values")
    observed = ~flags
    if not np.array_equal(restored[observed], data[observed]):
        max_deviation = float(np.abs(restored[observed] - data[observed]).max())
        raise RestorerContractError(
            f"{name}: observed cells altered (max deviation {max_deviation:.3e})", max_deviation
        )


class Restorer(abc.ABC):
    """Fills masked cells; unmasked cells must come back bit-identical"""
    name = None

    @abc.abstractmethod
    def restore(self, data, mask):
        """Return a matrix with masked cells of ``data`` replaced"""

    def apply(self, data, mask):
        data = _values(data)
        flags = _flags(mask, data.shape)
        restored = np.asarray(self.restore(data, Mask(flags)), dtype=np.float64)
        check_restoration(data, flags, restored, self.name)
        logger.debug(f"{self.name} restored {int(flags.sum())} cells")
        return restored

    def __repr__(self):
        return f'{type(self).__name__}({self.name})'


class MeanFillRestorer(Restorer):
    name = 'mean_fill'

    def restore(self, data, mask):
        return mean_fill_restore(data, mask)


class SpectralPolyRestorer(Restorer):
    name = 'spectral_poly'

    def __init__(self, order=2, clip_sigma=None, clip_passes=5):
        self.order = order
        self.clip_sigma = clip_sigma
        self.clip_passes = clip_passes

    def restore(self, data, mask):
        return spectral_poly_restore(data, mask, self.order, self.clip_sigma, self.clip_passes)


class LowRankRestorer(Restorer):
    name = 'low_rank'

    def __init__(self, rank=4, tol=1e-6, max_iter=100):
        self.rank = rank
        self.tol = tol
        self.max_iter = max_iter

    def restore(self, data, mask):
        return low_rank_restore(data, mask, self.rank, self.tol, self.max_iter)


class ExternalRestorer(Restorer):
    """Restoration produced elsewhere (e.g. a trained inpainting network).

    The file restores ``reference_mask``; narrower masks take the restored
    values at their own cells only.
    """
    name = 'external'

    def __init__(self, path, reference_mask=None, rtol=1e-6, report_path=None):
        self.path = Path(path)
        self.reference_mask = reference_mask
        self.rtol = rtol
        self.report_path = report_path

    @classmethod
    def from_file(cls, path, **kwargs):
        if not Path(path).exists():
            raise FileNotFoundError(f"external restoration {path} does not exist")
        return cls(path, **kwargs)

    def restore(self, data, mask):
        reference = self.reference_mask if self.reference_mask is not None else mask
        ingested = ingest_external_restoration(data, reference, self.path, self.rtol, self.report_path)
        return np.where(_flags(mask, data.shape), ingested, data)


RESTORERS = {
    MeanFillRestorer.name: MeanFillRestorer,
    SpectralPolyRestorer.name: SpectralPolyRestorer,
    LowRankRestorer.name: LowRankRestorer,
    ExternalRestorer.name: ExternalRestorer,
}


def build_restorer(name, **params):
    """Instantiate a registered restorer by name"""
    try:
        restorer_class = RESTORERS[name]
    except KeyError:
        raise ValueError(f"unknown restorer {name!r}; choose from {sorted(RESTORERS)}") from None
    return restorer_class(**params)


class FunctionRestorer(Restorer):
    """Adapter for a plain ``restore(data, mask)`` callable"""

    def __init__(self, function, name=None):
        self.function = function
        self.name = name or getattr(function, '__name__', 'function')

    def restore(self, data, mask):
        return self.function(data, mask)


class DatasetVariants(NamedTuple):
    original: SpectralCube
    outliers: SpectralCube
    channels: SpectralCube
    full: SpectralCube


def restore_dataset_variants(cube, channel_mask, outlier_mask, restorer):
    """The four comparison datasets: unrestored, outliers only, channels only, both.

    The restorer runs once over the union, so no flagged cell informs the
    fit; the partial variants take the restored values at their own cells
    and keep the contaminated values elsewhere.
    """
    if not isinstance(restorer, Restorer):
        restorer = FunctionRestorer(restorer)
    union = channel_mask.union(outlier_mask)
    if union.shape != cube.shape:
        raise ValueError(f"mask shape {union.shape} does not match cube {cube.shape}")

    logger.info(f"Restoring {union.count} flagged cells with {restorer.name}")
    restored = restorer.apply(cube.data, union)
    variants = {}
    for label, mask in (('outliers', outlier_mask), ('channels', channel_mask), ('full', union)):
        variants[label] = cube.with_data(np.where(mask.flags, restored, cube.data))
        logger.debug(f"Variant {label} takes {mask.count} restored cells")
    return DatasetVariants(original=cube, **variants)
