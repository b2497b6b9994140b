import math
from dataclasses import dataclass

from cube.models import FrequencyAxis, SkyGrid


@dataclass(frozen=True)
class PhysicalConstants:
    """Fixed constants of the HI line model"""
    nu_21: float = 1420.405751768e6  # Hz, rest-frame line frequency
    solar_mass_coefficient: float = 2.775e11  # HI mass prefactor, M_sun


PHYSICAL_CONSTANTS = PhysicalConstants()


@dataclass(frozen=True)
class CosmologyParams:
    """Flat LCDM parameters entering the brightness temperature.

    The defaults are conventional placeholders, not fitted values.
    """
    omega_b: float = 0.049
    omega_m: float = 0.315
    omega_lambda: float = 0.685
    h: float = 0.67
    x_hi: float = 0.01

    def __post_init__(self):
        for name in ('omega_b', 'omega_m', 'omega_lambda', 'h', 'x_hi'):
            value = getattr(self, name)
            if not 0 < value < 1.5:
                raise ValueError(f"{name} must lie in (0, 1.5), got {value}")
        if abs(self.omega_m + self.omega_lambda - 1.0) > 0.01:
            raise ValueError(
                f"omega_m + omega_lambda must be 1 within 0.01 (flat), "
                f"got {self.omega_m + self.omega_lambda}"
            )


@dataclass(frozen=True)
class ForegroundModel:
    """Cross-frequency angular power spectrum parameters of one foreground"""
    name: str
    amplitude: float  # mK^2 at the pivots
    beta: float
    alpha: float
    xi: float
    l_ref: float = 1000.0
    nu_ref: float = 130e6  # Hz

    def __post_init__(self):
        if self.amplitude < 0:
            raise ValueError(f"{self.name}: amplitude must be non-negative, got {self.amplitude}")
        if not self.xi > 0:
            raise ValueError(f"{self.name}: xi must be positive, got {self.xi}")
        if not (self.l_ref > 0 and self.nu_ref > 0):
            raise ValueError(f"{self.name}: pivots must be positive")


FOREGROUND_PRESETS = {
    'synchrotron': ForegroundModel('synchrotron', 700.0, 2.4, 2.80, 4.0),
    'point_sources': ForegroundModel('point_sources', 57.0, 1.1, 2.07, 1.0),
    'galactic_free_free': ForegroundModel('galactic_free_free', 0.088, 3.0, 2.15, 35.0),
    'extragalactic_free_free': ForegroundModel('extragalactic_free_free', 0.014, 1.0, 2.10, 35.0),
}


@dataclass(frozen=True)
class HiFieldSpec:
    """Power-law angular spectrum of the HI overdensity with log-frequency coherence.

    ``cl_amplitude`` is the dimensionless overdensity spectrum at ``l_ref``.
    """
    cl_amplitude: float = 1.5e-6
    cl_slope: float = 1.0
    frequency_coherence: float = 2e-4
    l_ref: float = 1000.0
    lognormal: bool = False

    def __post_init__(self):
        if self.cl_amplitude < 0:
            raise ValueError(f"cl_amplitude must be non-negative, got {self.cl_amplitude}")
        if not self.frequency_coherence > 0:
            raise ValueError(f"frequency_coherence must be positive, got {self.frequency_coherence}")


@dataclass(frozen=True)
class SkyPatchSpec:
    """Square flat-sky patch observed over a frequency axis"""
    ra_range: tuple  # degrees
    dec_range: tuple  # degrees
    n_pix: int
    axis: FrequencyAxis

    def __post_init__(self):
        if not self.ra_range[0] < self.ra_range[1]:
            raise ValueError(f"empty ra range {self.ra_range}")
        if not self.dec_range[0] < self.dec_range[1]:
            raise ValueError(f"empty dec range {self.dec_range}")
        if self.n_pix < 8 or self.n_pix % 2:
            raise ValueError(f"n_pix must be even and at least 8, got {self.n_pix}")

    @property
    def pixel_size(self):
        """Pixel side in radians; the patch side is the declination span"""
        return math.radians(self.dec_range[1] - self.dec_range[0]) / self.n_pix

    @property
    def sky_grid(self):
        return SkyGrid(self.n_pix, self.n_pix, self.pixel_size)
