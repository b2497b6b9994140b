from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class FrequencyAxis:
    """Regularly spaced channel axis; frequencies in Hz at channel centres"""
    start_frequency: float
    channel_width: float
    n_channels: int

    def __post_init__(self):
        if not self.channel_width > 0:
            raise ValueError(f"channel_width must be positive, got {self.channel_width}")
        if int(self.n_channels) != self.n_channels or self.n_channels < 1:
            raise ValueError(f"n_channels must be a positive integer, got {self.n_channels}")
        object.__setattr__(self, 'n_channels', int(self.n_channels))
        object.__setattr__(self, 'start_frequency', float(self.start_frequency))
        object.__setattr__(self, 'channel_width', float(self.channel_width))

    @classmethod
    def from_band(cls, center_frequency, channel_width, n_channels):
        """Axis of ``n_channels`` channels centred on ``center_frequency``"""
        start = center_frequency - 0.5 * n_channels * channel_width
        return cls(start, channel_width, n_channels)

    @property
    def frequencies(self):
        return self.start_frequency + (np.arange(self.n_channels) + 0.5) * self.channel_width

    @property
    def stop_frequency(self):
        return self.start_frequency + self.n_channels * self.channel_width

    def downsampled(self, factor):
        """Axis after averaging groups of ``factor`` channels; the remainder is dropped"""
        return FrequencyAxis(self.start_frequency, self.channel_width * factor, self.n_channels // factor)

    def window(self, first_channel, n_channels):
        return FrequencyAxis(
            self.start_frequency + first_channel * self.channel_width,
            self.channel_width,
            n_channels,
        )


@dataclass(frozen=True)
class SkyGrid:
    """Flat-sky pixel grid; rows of a cube run row-major over (n_x, n_y)"""
    n_x: int
    n_y: int
    pixel_size: float  # radians

    def __post_init__(self):
        if self.n_x < 1 or self.n_y < 1:
            raise ValueError(f"sky grid must be non-empty, got {self.n_x}x{self.n_y}")
        if not self.pixel_size > 0:
            raise ValueError(f"pixel_size must be positive, got {self.pixel_size}")

    @property
    def n_pixels(self):
        return self.n_x * self.n_y

    @property
    def area(self):
        """Solid angle in steradians"""
        return self.n_pixels * self.pixel_size ** 2


def _frozen_array(values, dtype):
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class SpectralCube:
    """Brightness temperature in mK, lines of sight x frequency channels"""
    data: np.ndarray
    axis: FrequencyAxis
    sky_grid: SkyGrid = None

    def __post_init__(self):
        data = _frozen_array(self.data, np.float64)
        if data.ndim != 2:
            raise ValueError(f"cube data must be 2-D, got shape {data.shape}")
        if data.shape[1] != self.axis.n_channels:
            raise ValueError(
                f"cube has {data.shape[1]} columns but axis has {self.axis.n_channels} channels"
            )
        if not np.isfinite(data).all():
            raise ValueError("cube data contains non-finite values")
        if self.sky_grid is not None and self.sky_grid.n_pixels != data.shape[0]:
            raise ValueError(
                f"sky grid has {self.sky_grid.n_pixels} pixels but cube has {data.shape[0]} rows"
            )
        object.__setattr__(self, 'data', data)

    def __eq__(self, other):
        if not isinstance(other, SpectralCube):
            return NotImplemented
        return (
            self.axis == other.axis
            and self.sky_grid == other.sky_grid
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def n_rows(self):
        return self.data.shape[0]

    @property
    def n_channels(self):
        return self.data.shape[1]

    def with_data(self, data):
        """Same axis and grid, new values"""
        return SpectralCube(data, self.axis, self.sky_grid)

    def channel_map(self, channel):
        """One channel as an (n_x, n_y) sky map"""
        if self.sky_grid is None:
            raise ValueError("cube has no sky grid")
        return self.data[:, channel].reshape(self.sky_grid.n_x, self.sky_grid.n_y)


@dataclass(frozen=True, eq=False)
class Mask:
    """Boolean flags congruent with a cube; True marks contaminated cells"""
    flags: np.ndarray

    def __post_init__(self):
        flags = _frozen_array(self.flags, bool)
        if flags.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {flags.shape}")
        object.__setattr__(self, 'flags', flags)

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return self.flags.shape == other.flags.shape and bool(np.array_equal(self.flags, other.flags))

    __hash__ = None

    def __or__(self, other):
        return self.union(other)

    @classmethod
    def empty(cls, shape):
        return cls(np.zeros(shape, dtype=bool))

    @property
    def shape(self):
        return self.flags.shape

    @property
    def count(self):
        return int(self.flags.sum())

    @property
    def masked_fraction(self):
        if self.flags.size == 0:
            return 0.0
        return self.count / self.flags.size

    def union(self, other):
        if self.shape != other.shape:
            raise ValueError(f"shape mismatch: {self.shape} vs {other.shape}")
        return Mask(self.flags | other.flags)

    def difference(self, other):
        """Cells flagged here and not in ``other``"""
        if self.shape != other.shape:
            raise ValueError(f"shape mismatch: {self.shape} vs {other.shape}")
        return Mask(self.flags & ~other.flags)


@dataclass(frozen=True, eq=False)
class PatchSample:
    """Square window of a cube and its mask"""
    data: np.ndarray
    mask: np.ndarray
    masked_fraction: float
    origin: tuple  # (row, channel) in the source cube

    def __post_init__(self):
        data = _frozen_array(self.data, np.float64)
        mask = _frozen_array(self.mask, bool)
        if data.ndim != 2 or data.shape[0] != data.shape[1]:
            raise ValueError(f"patch must be square, got shape {data.shape}")
        if mask.shape != data.shape:
            raise ValueError(f"patch mask shape {mask.shape} does not match data {data.shape}")
        object.__setattr__(self, 'data', data)
        object.__setattr__(self, 'mask', mask)
        object.__setattr__(self, 'origin', (int(self.origin[0]), int(self.origin[1])))

    @property
    def size(self):
        return self.data.shape[0]
