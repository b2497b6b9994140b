"""
Foreground removal: polynomial subtraction along frequency, SVD mode
removal and FastICA component subtraction.

Inputs are (lines of sight x channels) matrices or SpectralCubes; residuals
come back in the same form.
"""

import logging
from typing import NamedTuple

import numpy as np
from scipy import linalg

from cube.models import SpectralCube
from imbench.rng import counter_rng, stream_id
from .models import CleanResult, IcaResult, SvdDecomposition

logger = logging.getLogger(__name__)

ICA_STREAM = 'ica'
CONTRASTS = ('cube', 'logcosh')


def _matrix(cube):
    if isinstance(cube, SpectralCube):
        return cube.data
    data = np.asarray(cube, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {data.shape}")
    return data


def _like(cube, values):
    if isinstance(cube, SpectralCube):
        return cube.with_data(values)
    return values


def _normalized_vander(n_channels, order):
    x = np.linspace(-1.0, 1.0, n_channels) if n_channels > 1 else np.zeros(1)
    return np.polynomial.polynomial.polyvander(x, order)


def remove_polyfit(cube, order=2):
    """Subtract a least-squares polynomial in normalized channel index from every row"""
    data = _matrix(cube)
    n_channels = data.shape[1]
    if not 0 <= order < n_channels:
        raise ValueError(f"order must lie in [0, {n_channels}), got {order}")
    basis, _ = linalg.qr(_normalized_vander(n_channels, order), mode='economic')
    residual = data - (data @ basis) @ basis.T
    return CleanResult(_like(cube, residual), order + 1, 'polyfit', {'order': order})


def svd_decompose(cube):
    """Thin SVD with a deterministic sign per mode"""
    data = _matrix(cube)
    if not np.isfinite(data).all():
        raise ValueError("SVD input contains non-finite values")
    try:
        u, s, vt = linalg.svd(data, full_matrices=False, lapack_driver='gesdd')
    except linalg.LinAlgError:
        logger.warning("gesdd did not converge; retrying with gesvd")
        u, s, vt = linalg.svd(data, full_matrices=False, lapack_driver='gesvd')

    pivots = np.abs(u).argmax(axis=0)
    signs = np.sign(u[pivots, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return SvdDecomposition(u * signs, s, (vt * signs[:, None]).T)


def remove_svd_modes(cube, k, center=False, decomposition=None):
    """Zero the ``k`` largest singular values and rebuild the matrix.

    With ``center`` the channel means are subtracted first and not restored.
    """
    data = _matrix(cube)
    p = min(data.shape)
    if not 0 <= k <= p:
        raise ValueError(f"k must lie in [0, {p}], got {k}")
    work = data - data.mean(axis=0) if center else data
    if k == 0:
        return CleanResult(_like(cube, work.copy()), 0, 'svd', {'center': center})

    if decomposition is None:
        decomposition = svd_decompose(work)
    residual = decomposition.reconstruct(skip=k)
    details = {
        'center': center,
        'singular_values': decomposition.singular_values[:k].tolist(),
    }
    return CleanResult(_like(cube, residual), k, 'svd', details)


def svd_residual_rms(decomposition, ks):
    """RMS left after removing each k in ``ks`` modes, from the tail energy"""
    m, n = decomposition.shape
    return np.array([np.sqrt(decomposition.tail_energy(k) / (m * n)) for k in ks])


def kurtosis(samples):
    """E[y^4] - 3 E[y^2]^2 with plain moment estimators"""
    samples = np.asarray(samples, dtype=np.float64).ravel()
    if samples.size < 4:
        raise ValueError(f"kurtosis needs at least 4 samples, got {samples.size}")
    second = np.mean(samples ** 2)
    return float(np.mean(samples ** 4) - 3.0 * second ** 2)


class Whitening(NamedTuple):
    whitened: np.ndarray  # retained dimension x samples, identity covariance
    matrix: np.ndarray  # Lambda^-1/2 E^T
    means: np.ndarray
    dewhitening: np.ndarray  # E Lambda^1/2


def whiten(data, rcond=1e-12):
    """Centre each measurement (row) along the channels and whiten.

    Directions with covariance eigenvalue below ``rcond`` times the largest
    are dropped.
    """
    data = _matrix(data)
    n_samples = data.shape[1]
    if n_samples < 2:
        raise ValueError("whitening needs at least 2 channels")
    means = data.mean(axis=1)
    centered = data - means[:, None]
    if not centered.any():
        raise ValueError("cannot whiten all-zero data")

    u, s, vt = linalg.svd(centered, full_matrices=False)
    eigenvalues = s ** 2 / n_samples
    keep = eigenvalues > rcond * eigenvalues[0]
    dropped = int((~keep).sum())
    if dropped:
        logger.info(f"Whitening dropped {dropped} degenerate directions")

    scale = np.sqrt(eigenvalues[keep])
    basis = u[:, keep]
    return Whitening(
        whitened=np.sqrt(n_samples) * vt[keep],
        matrix=(basis / scale).T,
        means=means,
        dewhitening=basis * scale,
    )


def _symmetric_decorrelation(w):
    """W <- (W W^T)^-1/2 W"""
    s, u = linalg.eigh(w @ w.T)
    s = np.clip(s, np.finfo(np.float64).tiny, None)
    return (u * (1.0 / np.sqrt(s))) @ u.T @ w


def fastica(data, n_components=4, tol=1e-4, max_iter=200, seed=0, contrast='cube'):
    """Symmetric fixed-point FastICA.

    Rows of ``data`` are mixtures, columns are samples. The cubic contrast
    g(u) = u^3 maximizes |kurtosis|; ``contrast='logcosh'`` uses g = tanh.
    """
    if contrast not in CONTRASTS:
        raise ValueError(f"unknown contrast {contrast!r}; choose from {CONTRASTS}")
    white = whiten(data)
    dimension = white.whitened.shape[0]
    if not 1 <= n_components <= dimension:
        raise ValueError(f"n_components must lie in [1, {dimension}], got {n_components}")

    z = white.whitened[:n_components]
    n_samples = z.shape[1]
    rng = counter_rng(seed, stream_id(ICA_STREAM))
    w = _symmetric_decorrelation(rng.standard_normal((n_components, n_components)))

    if max_iter < 1:
        raise ValueError(f"max_iter must be positive, got {max_iter}")
    converged = False
    limit = np.inf
    for iteration in range(1, max_iter + 1):
        y = w @ z
        if contrast == 'cube':
            w_new = (y ** 3) @ z.T / n_samples - 3.0 * w
        else:
            g = np.tanh(y)
            w_new = g @ z.T / n_samples - (1.0 - g ** 2).mean(axis=1)[:, None] * w
        w_new = _symmetric_decorrelation(w_new)
        limit = np.max(np.abs(np.abs(np.einsum('ij,ij->i', w_new, w)) - 1.0))
        w = w_new
        if limit < tol:
            converged = True
            break
    if not converged:
        logger.warning(f"FastICA did not converge in {max_iter} iterations (last change {limit:.2e})")

    sources = w @ z
    mixing = white.dewhitening[:, :n_components] @ w.T
    kurtoses = np.array([kurtosis(source) for source in sources])

    # order by non-Gaussianity, largest mixing entry positive
    order = np.argsort(-np.abs(kurtoses), kind='stable')
    sources, mixing, w, kurtoses = sources[order], mixing[:, order], w[order], kurtoses[order]
    pivots = np.abs(mixing).argmax(axis=0)
    signs = np.sign(mixing[pivots, np.arange(n_components)])
    signs[signs == 0] = 1.0
    mixing = mixing * signs
    sources = sources * signs[:, None]
    w = w * signs[:, None]

    result = IcaResult(
        mixing=mixing,
        sources=sources,
        unmixing=w @ white.matrix[:n_components],
        whitening=white.matrix,
        means=white.means,
        n_iterations=iteration,
        converged=converged,
        kurtoses=kurtoses,
    )
    gaussian = int(result.gaussian_like().sum())
    if gaussian:
        logger.warning(f"{gaussian} of {n_components} ICA sources are indistinguishable from Gaussian")
    return result


def remove_ica_components(cube, n_components=4, seed=0, restore_means=False,
                          tol=1e-4, max_iter=200, contrast='cube'):
    """Subtract the FastICA reconstruction A S from the centred data"""
    data = _matrix(cube)
    if n_components == 0:
        return CleanResult(cube, 0, 'ica', {})
    result = fastica(data, n_components, tol=tol, max_iter=max_iter, seed=seed, contrast=contrast)
    residual = (data - result.means[:, None]) - result.reconstruction()
    if restore_means:
        residual = residual + result.means[:, None]
    details = {
        'kurtoses': result.kurtoses.tolist(),
        'n_iterations': result.n_iterations,
        'converged': result.converged,
    }
    return CleanResult(_like(cube, residual), n_components, 'ica', details)
