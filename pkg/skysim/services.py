"""
Flat-sky mock observations: HI brightness temperature plus foregrounds.

Foreground spectra follow

    C_l(nu1, nu2) = A (l_ref / l)^beta (nu_ref^2 / (nu1 nu2))^alpha
                    exp(-ln^2(nu1 / nu2) / (2 xi^2))

which separates into an l-dependent scalar and a frequency matrix, so each
component needs a single Cholesky factor regardless of the number of modes.
"""

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import NamedTuple

import numpy as np
from django.conf import settings
from django.core.cache import cache
from scipy import linalg

from cube.models import SpectralCube
from imbench.exceptions import CovarianceError
from imbench.rng import counter_rng, stream_id
from .models import PHYSICAL_CONSTANTS

logger = logging.getLogger(__name__)

FREQUENCY_FORM_NOTE = (
    "Foreground frequency term uses (nu_ref^2 / (nu1 nu2))^alpha; "
    "the single-power form (nu_ref / (nu1 nu2))^alpha is dimensionally inconsistent"
)

HI_STREAM = 'hi'


def redshift_of_frequency(nu):
    """Redshift of the 21-cm line observed at ``nu`` (Hz)"""
    nu = np.asarray(nu, dtype=np.float64)
    if np.any(nu <= 0) or np.any(nu > PHYSICAL_CONSTANTS.nu_21):
        raise ValueError(f"frequency must lie in (0, {PHYSICAL_CONSTANTS.nu_21}] Hz")
    z = PHYSICAL_CONSTANTS.nu_21 / nu - 1.0
    return float(z) if z.ndim == 0 else z


def mean_brightness_temperature(cosmo, z):
    """Brightness temperature of the mean HI density (mK)"""
    z = np.asarray(z, dtype=np.float64)
    if np.any(z < 0):
        raise ValueError("redshift must be non-negative")
    one_plus_z = 1.0 + z
    hubble = np.sqrt(cosmo.omega_m * one_plus_z ** 3 + cosmo.omega_lambda)
    return 190.55 * cosmo.omega_b * cosmo.h * one_plus_z ** 2 * cosmo.x_hi / hubble


def brightness_temperature(cosmo, z, delta_hi, strict=True):
    """Brightness temperature (mK) of cells with HI overdensity ``delta_hi``.

    With ``strict`` the overdensity must satisfy delta >= -1; Gaussian fields
    pass ``strict=False`` and keep delta < -1 cells as drawn.
    """
    delta_hi = np.asarray(delta_hi, dtype=np.float64)
    if strict and np.any(delta_hi < -1):
        raise ValueError("overdensity must be >= -1")
    temperature = mean_brightness_temperature(cosmo, z) * (1.0 + delta_hi)
    return float(temperature) if np.ndim(temperature) == 0 else temperature


def hi_mass_per_cell(cosmo, z, cell_volume, delta_hi):
    """HI mass in solar masses of a cell of volume ``cell_volume``.

    The volume unit (Mpc^3 or (Mpc/h)^3) is whatever the caller uses; the
    neutral fraction is taken as constant in redshift.
    """
    if not cell_volume > 0:
        raise ValueError(f"cell_volume must be positive, got {cell_volume}")
    delta_hi = np.asarray(delta_hi, dtype=np.float64)
    if np.any(delta_hi < -1):
        raise ValueError("overdensity must be >= -1")
    mass = (
        PHYSICAL_CONSTANTS.solar_mass_coefficient * cell_volume
        * cosmo.omega_b * cosmo.x_hi / cosmo.h * (1.0 + delta_hi)
    )
    return float(mass) if np.ndim(mass) == 0 else mass


def _frequency_kernel(model, nu1, nu2):
    log_ratio = np.log(nu1 / nu2)
    spectral = (model.nu_ref ** 2 / (nu1 * nu2)) ** model.alpha
    return model.amplitude * spectral * np.exp(-log_ratio ** 2 / (2.0 * model.xi ** 2))


def foreground_cl(model, l, nu1, nu2):
    """Angular power (mK^2) of ``model`` at multipole ``l`` between two frequencies"""
    l = np.asarray(l, dtype=np.float64)
    if np.any(l <= 0):
        raise ValueError("multipole must be positive")
    if nu1 <= 0 or nu2 <= 0:
        raise ValueError("frequencies must be positive")
    cl = (model.l_ref / l) ** model.beta * _frequency_kernel(model, nu1, nu2)
    return float(cl) if cl.ndim == 0 else cl


def frequency_covariance(model, axis):
    """Frequency part G(nu_i, nu_j) of the separable foreground spectrum"""
    nu = axis.frequencies
    covariance = _frequency_kernel(model, nu[:, None], nu[None, :])
    # exact symmetry
    return 0.5 * (covariance + covariance.T)


def coherence_matrix(coherence, axis):
    """Unit-amplitude log-frequency coherence exp(-ln^2(nu_i/nu_j) / (2 c^2))"""
    nu = axis.frequencies
    log_ratio = np.log(nu[:, None] / nu[None, :])
    matrix = np.exp(-log_ratio ** 2 / (2.0 * coherence ** 2))
    return 0.5 * (matrix + matrix.T)


def cholesky_factor(covariance):
    """Lower Cholesky factor, adding the smallest diagonal jitter that works.

    Jitter grows by decades up to 1e-10 * trace / n.
    """
    n = covariance.shape[0]
    trace = float(np.trace(covariance))
    if trace == 0.0 and not covariance.any():
        return np.zeros_like(covariance)
    ceiling = 1e-10 * trace / n
    for jitter in [0.0] + [ceiling * 10.0 ** -p for p in range(6, -1, -1)]:
        try:
            factor = linalg.cholesky(covariance + jitter * np.eye(n), lower=True)
        except linalg.LinAlgError:
            continue
        if jitter:
            logger.debug(f"Cholesky succeeded with jitter {jitter:.3e}")
        return factor
    raise CovarianceError("covariance not PSD")


def _cached_factor(key_parts, build):
    """Cholesky factor of ``build()``, cached under a digest of ``key_parts``"""
    digest = hashlib.sha256(repr(key_parts).encode('utf-8')).hexdigest()
    cache_key = f'covariance_factor_{digest}'
    factor = cache.get(cache_key)
    if factor is None:
        factor = cholesky_factor(build())
        cache.set(cache_key, factor, settings.CACHE_TIMEOUT['COVARIANCE_FACTOR'])
    return factor


def multipole_grid(n_pix, pixel_size):
    """Flat-sky multipole l = 2 pi |u| of each FFT mode, u in cycles per radian"""
    u = np.fft.fftfreq(n_pix, d=pixel_size)
    return 2.0 * np.pi * np.sqrt(u[:, None] ** 2 + u[None, :] ** 2)


def _hermitian_part(modes):
    """(a(k) + conj(a(-k))) / sqrt(2) over the first two axes"""
    mirrored = np.roll(modes[::-1, ::-1], 1, axis=(0, 1))
    return (modes + np.conj(mirrored)) / np.sqrt(2.0)


def _gaussian_field(spec, angular_power, factor, seed, stream, workers=None):
    """Real Gaussian cube with spectrum angular_power(l) * (factor factor^T)(nu_i, nu_j)"""
    n = spec.n_pix
    n_channels = factor.shape[0]
    ell = multipole_grid(n, spec.pixel_size)
    power = np.zeros_like(ell)
    nonzero = ell > 0
    power[nonzero] = angular_power(ell[nonzero])
    # pixel-area normalization sqrt(area) / pixel_size^2 = n / pixel_size
    scale = np.sqrt(power / 2.0) * (n / spec.pixel_size)

    modes = np.empty((n, n, n_channels), dtype=np.complex128)

    def fill_row(row):
        rng = counter_rng(seed, stream, row)
        draws = rng.standard_normal((n, n_channels)) + 1j * rng.standard_normal((n, n_channels))
        modes[row] = (draws @ factor.T) * scale[row, :, None]

    with ThreadPoolExecutor(max_workers=workers or settings.IMBENCH_THREADS) as pool:
        list(pool.map(fill_row, range(n)))

    modes = _hermitian_part(modes)
    modes[0, 0] = 0.0
    field = np.fft.ifft2(modes, axes=(0, 1)).real
    return field.reshape(n * n, n_channels)


def generate_correlated_field(spec, model, seed, workers=None):
    """Gaussian foreground cube whose cross-frequency spectrum is ``model``"""
    if model.amplitude == 0:
        return SpectralCube(np.zeros((spec.n_pix ** 2, spec.axis.n_channels)), spec.axis, spec.sky_grid)
    factor = _cached_factor(
        ('foreground', model, spec.axis),
        lambda: frequency_covariance(model, spec.axis),
    )
    field = _gaussian_field(
        spec,
        lambda ell: (model.l_ref / ell) ** model.beta,
        factor,
        seed,
        stream_id(model.name),
        workers,
    )
    return SpectralCube(field, spec.axis, spec.sky_grid)


def generate_hi_cube(spec, cosmo, hi_spec, seed, workers=None):
    """HI brightness temperature cube from a Gaussian overdensity field"""
    z = redshift_of_frequency(spec.axis.frequencies)
    if hi_spec.cl_amplitude == 0:
        delta = np.zeros((spec.n_pix ** 2, spec.axis.n_channels))
    else:
        factor = _cached_factor(
            ('hi', hi_spec.frequency_coherence, spec.axis),
            lambda: coherence_matrix(hi_spec.frequency_coherence, spec.axis),
        )
        delta = _gaussian_field(
            spec,
            lambda ell: hi_spec.cl_amplitude * (hi_spec.l_ref / ell) ** hi_spec.cl_slope,
            factor,
            seed,
            stream_id(HI_STREAM),
            workers,
        )
        if hi_spec.lognormal:
            variance = delta.var(axis=0)
            delta = np.exp(delta - variance / 2.0) - 1.0
    temperature = brightness_temperature(cosmo, z[None, :], delta, strict=False)
    return SpectralCube(temperature, spec.axis, spec.sky_grid)


class SkyComposition(NamedTuple):
    total: SpectralCube
    hi: SpectralCube
    foreground: SpectralCube


def compose_sky(spec, cosmo, hi_spec, foreground_models, seed, allow_empty=False, workers=None):
    """HI plus the sum of ``foreground_models``; each component draws its own stream"""
    if not foreground_models and not allow_empty:
        raise ValueError("at least one foreground model is required")
    names = [model.name for model in foreground_models]
    if len(set(names)) != len(names):
        raise ValueError(f"foreground component names must be unique, got {names}")

    if foreground_models:
        logger.warning(FREQUENCY_FORM_NOTE)

    hi = generate_hi_cube(spec, cosmo, hi_spec, seed, workers)
    foreground = np.zeros(hi.shape)
    for model in foreground_models:
        logger.info(f"Generating foreground component {model.name}")
        foreground += generate_correlated_field(spec, model, seed, workers).data

    total = hi.data + foreground
    # total - hi - foreground must vanish exactly
    foreground = total - hi.data
    return SkyComposition(
        total=SpectralCube(total, spec.axis, spec.sky_grid),
        hi=hi,
        foreground=SpectralCube(foreground, spec.axis, spec.sky_grid),
    )
