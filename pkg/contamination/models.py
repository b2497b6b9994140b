from dataclasses import dataclass, field

from cube.models import Mask


@dataclass(frozen=True)
class RfiModel:
    """Synthetic interference: broadband bursts, persistent channels and outliers"""
    broadband_rate: float = 0.2  # bursts per 1000 cycles
    broadband_width: tuple = (4, 24)  # channels
    broadband_duration: tuple = (50, 400)  # cycles
    narrowband_channel_prob: float = 0.02
    outlier_rate: float = 0.002
    amplitude_scale: tuple = (10.0, 1000.0)  # multiples of clean-data RMS
    seed: int = 0

    def __post_init__(self):
        if self.broadband_rate < 0:
            raise ValueError(f"broadband_rate must be non-negative, got {self.broadband_rate}")
        for name in ('narrowband_channel_prob', 'outlier_rate'):
            value = getattr(self, name)
            if not 0 <= value <= 1:
                raise ValueError(f"{name} must be a probability, got {value}")
        for name in ('broadband_width', 'broadband_duration', 'amplitude_scale'):
            low, high = getattr(self, name)
            if not 0 < low <= high:
                raise ValueError(f"{name} must be a positive ordered range, got {(low, high)}")


@dataclass(frozen=True)
class FlagReport:
    """Outcome of one flagging pass"""
    mask: Mask
    flagged_channels: list = field(default_factory=list)
    outlier_count: int = 0
    iterations: int = 0
