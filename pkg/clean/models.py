from dataclasses import dataclass, field

import numpy as np

from cube.models import SpectralCube


@dataclass(frozen=True, eq=False)
class SvdDecomposition:
    """Thin SVD M = U diag(s) V^T with the largest entry of each left vector positive"""
    left_vectors: np.ndarray  # m x p
    singular_values: np.ndarray  # p, non-increasing
    right_vectors: np.ndarray  # n x p

    @property
    def shape(self):
        return self.left_vectors.shape[0], self.right_vectors.shape[0]

    def reconstruct(self, skip=0):
        """Sum of the modes from index ``skip`` on"""
        u = self.left_vectors[:, skip:]
        return (u * self.singular_values[skip:]) @ self.right_vectors[:, skip:].T

    def tail_energy(self, k):
        """Squared Frobenius norm left after removing the first ``k`` modes"""
        return float(np.sum(self.singular_values[k:] ** 2))


@dataclass(frozen=True, eq=False)
class IcaResult:
    mixing: np.ndarray  # measurements x n_components
    sources: np.ndarray  # n_components x samples, unit variance
    unmixing: np.ndarray  # n_components x measurements, applied to centred data
    whitening: np.ndarray  # retained dimension x measurements
    means: np.ndarray  # per measurement, removed before whitening
    n_iterations: int
    converged: bool
    kurtoses: np.ndarray

    @property
    def n_components(self):
        return self.sources.shape[0]

    def reconstruction(self):
        """A S, the centred data projected on the separated subspace"""
        return self.mixing @ self.sources

    def gaussian_like(self, n_sigma=3.0):
        """Sources whose kurtosis is within ``n_sigma`` standard errors of a Gaussian's"""
        standard_error = np.sqrt(24.0 / self.sources.shape[1])
        return np.abs(self.kurtoses) < n_sigma * standard_error


@dataclass(frozen=True, eq=False)
class CleanResult:
    residual: SpectralCube
    removed_component_count: int
    method: str
    details: dict = field(default_factory=dict)
