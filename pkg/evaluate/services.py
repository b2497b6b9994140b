"""
Evaluation metrics: RMS by masked fraction, the Cm/Cu restoration ratio,
SSIM and PSNR, and the flat-sky angular power spectrum.

Flat-sky convention: a(l) = pixel_size^2 DFT(map), C_l = |a(l)|^2 / area,
l = 2 pi |u| with u in cycles per radian. The zero mode is never binned.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from django.conf import settings
from scipy.ndimage import uniform_filter

from cube.models import Mask, SpectralCube
from skysim.services import multipole_grid
from .models import ClEstimate, FractionBinStats, SpectrumComparison

logger = logging.getLogger(__name__)

DEFAULT_FRACTION_EDGES = np.round(np.linspace(0.0, 0.4, 9), 10)


def _values(data):
    if isinstance(data, SpectralCube):
        return data.data
    return np.asarray(data, dtype=np.float64)


def rms(residual, about_mean=False):
    """Root mean square about zero, or about the sample mean (standard deviation)"""
    values = _values(residual)
    if values.size == 0:
        raise ValueError("rms of an empty array")
    if about_mean:
        values = values - values.mean()
    return float(np.sqrt(np.mean(values ** 2)))


def bin_index(values, edges):
    """Bin of each value under [a, b) bins with the last bin closed; -1 outside"""
    edges = np.asarray(edges, dtype=np.float64)
    if edges.ndim != 1 or len(edges) < 2 or np.any(np.diff(edges) <= 0):
        raise ValueError("bin edges must be strictly increasing")
    values = np.asarray(values, dtype=np.float64)
    index = np.searchsorted(edges, values, side='right') - 1
    index[values == edges[-1]] = len(edges) - 2
    index[(values < edges[0]) | (values > edges[-1])] = -1
    return index


def bin_by_masked_fraction(samples, edges=None):
    """Median and quartiles of (masked_fraction, value) samples per fraction bin"""
    edges = DEFAULT_FRACTION_EDGES if edges is None else np.asarray(edges, dtype=np.float64)
    n_bins = len(edges) - 1
    samples = list(samples)
    fractions = np.array([fraction for fraction, _ in samples], dtype=np.float64)
    values = np.array([value for _, value in samples], dtype=np.float64)
    index = bin_index(fractions, edges)

    counts = np.zeros(n_bins, dtype=int)
    p25, median, p75 = (np.full(n_bins, np.nan) for _ in range(3))
    for i in range(n_bins):
        members = values[index == i]
        counts[i] = members.size
        if members.size:
            p25[i], median[i], p75[i] = np.percentile(members, [25, 50, 75])
    return FractionBinStats(edges=edges, counts=counts, p25=p25, median=median, p75=p75)


def normalized_offsets(reference, other):
    """(median_other - median_reference) / median_reference per bin; NaN where undefined"""
    if not np.array_equal(reference.edges, other.edges):
        raise ValueError("statistics use different bin edges")
    with np.errstate(divide='ignore', invalid='ignore'):
        offsets = (other.median - reference.median) / reference.median
    offsets[~np.isfinite(offsets)] = np.nan
    return offsets


def _pearson(x, y):
    dx = x - x.mean()
    dy = y - y.mean()
    vx = float(dx @ dx)
    vy = float(dy @ dy)
    if vx == 0 or vy == 0:
        raise ValueError("degenerate variance")
    return float(dx @ dy) / math.sqrt(vx * vy)


def cm_cu(predicted, truth_foreground, mask):
    """Pearson correlation with the truth over masked cells divided by that over unmasked cells"""
    predicted = _values(predicted)
    truth = _values(truth_foreground)
    flags = mask.flags if isinstance(mask, Mask) else np.asarray(mask, dtype=bool)
    if not predicted.shape == truth.shape == flags.shape:
        raise ValueError(f"shape mismatch: {predicted.shape}, {truth.shape}, {flags.shape}")
    n_masked = int(flags.sum())
    if n_masked < 2 or flags.size - n_masked < 2:
        raise ValueError("cm_cu needs at least 2 masked and 2 unmasked cells")

    c_m = _pearson(predicted[flags], truth[flags])
    c_u = _pearson(predicted[~flags], truth[~flags])
    if abs(c_u) < 1e-12:
        raise ValueError("unmasked correlation vanishes")
    return c_m / c_u


def record_cm_cu(record):
    """Cm/Cu of a RestorationRecord"""
    return cm_cu(record.predicted, record.truth_foreground, record.mask)


def ssim(x, y, dynamic_range, k1=0.01, k2=0.03, window=None):
    """Structural similarity, one global window unless ``window`` gives a side length"""
    x = _values(x)
    y = _values(y)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    if not dynamic_range > 0:
        raise ValueError(f"dynamic range must be positive, got {dynamic_range}")
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2

    if window is None:
        mu_x, mu_y = x.mean(), y.mean()
        dx, dy = x - mu_x, y - mu_y
        var_x, var_y, cov = np.mean(dx * dx), np.mean(dy * dy), np.mean(dx * dy)
        numerator = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        return float(numerator / denominator)

    mu_x = uniform_filter(x, size=window)
    mu_y = uniform_filter(y, size=window)
    var_x = uniform_filter(x * x, size=window) - mu_x * mu_x
    var_y = uniform_filter(y * y, size=window) - mu_y * mu_y
    cov = uniform_filter(x * y, size=window) - mu_x * mu_y
    numerator = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    denominator = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
    return float(np.mean(numerator / denominator))


def psnr(x, y, max_value):
    """Peak signal-to-noise ratio in dB; identical inputs give +inf"""
    if not max_value > 0:
        raise ValueError(f"max_value must be positive, got {max_value}")
    mse = float(np.mean((_values(x) - _values(y)) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(max_value ** 2 / mse)


def format_psnr(value):
    return 'exact' if math.isinf(value) else f'{value:.6f}'


def mode_power(sky_map, pixel_size):
    """Multipole and |a(l)|^2 / area of every Fourier mode of a square map"""
    sky_map = np.asarray(sky_map, dtype=np.float64)
    if sky_map.ndim != 2 or sky_map.shape[0] != sky_map.shape[1]:
        raise ValueError(f"map must be square, got shape {sky_map.shape}")
    if not pixel_size > 0:
        raise ValueError(f"pixel_size must be positive, got {pixel_size}")
    n = sky_map.shape[0]
    area = (n * pixel_size) ** 2
    modes = pixel_size ** 2 * np.fft.fft2(sky_map)
    return multipole_grid(n, pixel_size), np.abs(modes) ** 2 / area


def default_multipole_bins(n_pix, pixel_size, n_bins=12):
    """Log-spaced edges from the fundamental multipole to the Nyquist multipole"""
    ell = multipole_grid(n_pix, pixel_size)
    fundamental, nyquist = ell[0, 1], ell[n_pix // 2, 0]
    return np.geomspace(fundamental, nyquist, n_bins + 1)


def angular_power_spectrum(sky_map, pixel_size, bin_edges):
    """Annulus-averaged C_l of a square map; bins without modes are omitted"""
    ell, power = mode_power(sky_map, pixel_size)
    edges = np.asarray(bin_edges, dtype=np.float64)
    ell, power = ell.ravel(), power.ravel()
    nonzero = ell > 0
    index = bin_index(ell[nonzero], edges)
    inside = index >= 0
    n_bins = len(edges) - 1

    counts = np.bincount(index[inside], minlength=n_bins)
    power_sums = np.bincount(index[inside], weights=power[nonzero][inside], minlength=n_bins)
    ell_sums = np.bincount(index[inside], weights=ell[nonzero][inside], minlength=n_bins)
    keep = counts > 0
    n = sky_map.shape[0]
    return ClEstimate(
        bin_centers=ell_sums[keep] / counts[keep],
        cl_values=power_sums[keep] / counts[keep],
        mode_counts=counts[keep],
        bin_lo=edges[:-1][keep],
        bin_hi=edges[1:][keep],
        pixel_size=float(pixel_size),
        map_area=float((n * pixel_size) ** 2),
    )


def _channel_averaged_spectrum(cube, pixel_size, bin_edges, workers):
    if cube.sky_grid is None:
        raise ValueError("spectrum comparison needs cubes with a sky grid")

    def channel_spectrum(channel):
        return angular_power_spectrum(cube.channel_map(channel), pixel_size, bin_edges)

    with ThreadPoolExecutor(max_workers=workers or settings.IMBENCH_THREADS) as pool:
        spectra = list(pool.map(channel_spectrum, range(cube.n_channels)))
    first = spectra[0]
    cl = np.mean(np.stack([spectrum.cl_values for spectrum in spectra]), axis=0)
    return ClEstimate(
        bin_centers=first.bin_centers,
        cl_values=cl,
        mode_counts=first.mode_counts,
        bin_lo=first.bin_lo,
        bin_hi=first.bin_hi,
        pixel_size=first.pixel_size,
        map_area=first.map_area,
    )


def spectrum_comparison(residual_cube, fiducial_cube, pixel_size, bin_edges, *, workers=None):
    """Channel-averaged spectra of a residual and the HI truth, and their mean |log10| gap.

    ``pixel_size`` may be None to take it from the residual's sky grid.
    """
    if residual_cube.shape != fiducial_cube.shape:
        raise ValueError(f"shape mismatch: {residual_cube.shape} vs {fiducial_cube.shape}")
    if pixel_size is None:
        if residual_cube.sky_grid is None:
            raise ValueError("spectrum comparison needs cubes with a sky grid")
        pixel_size = residual_cube.sky_grid.pixel_size

    residual = _channel_averaged_spectrum(residual_cube, pixel_size, bin_edges, workers)
    fiducial = _channel_averaged_spectrum(fiducial_cube, pixel_size, bin_edges, workers)
    usable = (residual.cl_values > 0) & (fiducial.cl_values > 0)
    excluded = int((~usable).sum())
    if excluded:
        logger.info(f"Excluded {excluded} multipole bins with non-positive power")
    if not usable.any():
        logger.warning("No multipole bin has positive power in both spectra")
        delta = math.nan
    else:
        delta = float(np.mean(np.abs(
            np.log10(residual.cl_values[usable]) - np.log10(fiducial.cl_values[usable])
        )))
    return SpectrumComparison(residual=residual, fiducial=fiducial, delta_log_cl=delta, excluded_bins=excluded)
