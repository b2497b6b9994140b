from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class FractionBinStats:
    """Percentiles of a metric per masked-fraction bin; empty bins hold NaN"""
    edges: np.ndarray
    counts: np.ndarray
    p25: np.ndarray
    median: np.ndarray
    p75: np.ndarray

    @property
    def n_bins(self):
        return len(self.edges) - 1

    def rows(self):
        for i in range(self.n_bins):
            yield {
                'bin_lo': float(self.edges[i]),
                'bin_hi': float(self.edges[i + 1]),
                'count': int(self.counts[i]),
                'p25': float(self.p25[i]),
                'median': float(self.median[i]),
                'p75': float(self.p75[i]),
            }


@dataclass(frozen=True, eq=False)
class ClEstimate:
    """Binned flat-sky angular power spectrum; only bins holding modes are kept"""
    bin_centers: np.ndarray  # mean multipole of the modes in each bin
    cl_values: np.ndarray  # mK^2
    mode_counts: np.ndarray
    bin_lo: np.ndarray
    bin_hi: np.ndarray
    pixel_size: float  # radians
    map_area: float  # steradians


@dataclass(frozen=True, eq=False)
class SpectrumComparison:
    residual: ClEstimate
    fiducial: ClEstimate
    delta_log_cl: float  # mean |log10 residual - log10 fiducial| over usable bins
    excluded_bins: int
