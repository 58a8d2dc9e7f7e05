"""Grid data model, AVSF persistence, normalization and synthetic data.

A state is a channel-major grid ``values[C, n_lat, n_lon]`` whose channel
index is ``variable_index * n_levels + level_index``.
"""
from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    CorruptionError,
    DegenerateGridError,
    FormatError,
    LayoutError,
    PersistenceError,
    ValidationError,
)

BACKGROUND_VARIABLES = ("z", "t", "q", "u", "v")
CLOUD_SPECIES = ("ciwc", "clwc", "crwc", "cswc")
DEFAULT_VARIABLES = BACKGROUND_VARIABLES + CLOUD_SPECIES
FULL_LEVELS = (1000, 925, 850, 700, 600, 500, 400, 300, 250, 200, 150, 100, 50)
DESK_LEVELS = (850, 500)

# 2018-01-01T00:00:00Z
DEFAULT_START = 1514764800

AVSF_MAGIC = b"AVSF"
AVSF_VERSION = 1
_HEADER = struct.Struct("<4s7I")


def _f32_tuple(values) -> tuple[float, ...]:
    return tuple(float(v) for v in np.asarray(values, dtype=np.float32))


@dataclass(frozen=True)
class GridSpec:
    """Grid geometry and channel layout.

    Latitudes, longitudes and levels are stored rounded to float32 so a
    spec survives an AVSF roundtrip unchanged.
    """

    latitudes: tuple[float, ...]
    longitudes: tuple[float, ...]
    levels: tuple[float, ...]
    variables: tuple[str, ...]
    step_hours: int = 6

    def __post_init__(self):
        object.__setattr__(self, "latitudes", _f32_tuple(self.latitudes))
        object.__setattr__(self, "longitudes", _f32_tuple(self.longitudes))
        object.__setattr__(self, "levels", _f32_tuple(self.levels))
        object.__setattr__(self, "variables", tuple(str(v) for v in self.variables))
        if not self.latitudes or not self.longitudes:
            raise ValidationError("grid needs at least one latitude and one longitude")
        if not self.levels or not self.variables:
            raise ValidationError("grid needs at least one level and one variable")
        lat = np.asarray(self.latitudes)
        if np.any(np.abs(lat) > 90):
            raise ValidationError("latitudes must lie in [-90, 90]")
        if lat.size > 1:
            d = np.diff(lat)
            if not (np.all(d < 0) or np.all(d > 0)):
                raise ValidationError("latitudes must be strictly monotone")
        if len(set(self.variables)) != len(self.variables):
            raise ValidationError("duplicate variable names")
        if len(set(self.levels)) != len(self.levels):
            raise ValidationError("duplicate pressure levels")
        if self.step_hours <= 0:
            raise ValidationError("step_hours must be positive")

    @classmethod
    def regular(
        cls,
        n_lat: int,
        n_lon: int,
        levels: Sequence[float] = DESK_LEVELS,
        variables: Sequence[str] = DEFAULT_VARIABLES,
        step_hours: int = 6,
        poles: bool = True,
    ) -> "GridSpec":
        """Regular lat-lon grid ordered north to south.

        ``poles=True`` puts the first and last rows on the poles (the 1 degree
        181-row layout); ``poles=False`` uses cell-centred rows.
        """
        if poles:
            lat = np.linspace(90.0, -90.0, n_lat) if n_lat > 1 else np.zeros(1)
        else:
            lat = 90.0 - (np.arange(n_lat) + 0.5) * 180.0 / n_lat
        lon = np.arange(n_lon) * 360.0 / n_lon
        return cls(lat, lon, levels, variables, step_hours)

    @classmethod
    def desk(cls) -> "GridSpec":
        return cls.regular(32, 64, DESK_LEVELS, DEFAULT_VARIABLES, 6, poles=False)

    @classmethod
    def full(cls) -> "GridSpec":
        return cls.regular(181, 360, FULL_LEVELS, DEFAULT_VARIABLES, 6, poles=True)

    @property
    def n_lat(self) -> int:
        return len(self.latitudes)

    @property
    def n_lon(self) -> int:
        return len(self.longitudes)

    @property
    def n_lev(self) -> int:
        return len(self.levels)

    @property
    def n_var(self) -> int:
        return len(self.variables)

    @property
    def n_channels(self) -> int:
        return self.n_var * self.n_lev

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.n_channels, self.n_lat, self.n_lon)

    def channel(self, variable: str, level: float) -> int:
        try:
            vi = self.variables.index(variable)
        except ValueError:
            raise LayoutError(f"variable {variable!r} not in grid") from None
        lev = float(np.float32(level))
        try:
            li = self.levels.index(lev)
        except ValueError:
            raise LayoutError(f"level {level} not in grid") from None
        return vi * self.n_lev + li

    def channels_of(self, variable: str) -> list[int]:
        """Channel indices of one variable, in level order."""
        if variable not in self.variables:
            raise LayoutError(f"variable {variable!r} not in grid")
        vi = self.variables.index(variable)
        return [vi * self.n_lev + k for k in range(self.n_lev)]

    def channel_names(self) -> list[str]:
        return [f"{v}{int(round(p))}" for v in self.variables for p in self.levels]

    def cloud_channels(self) -> list[int]:
        """Channels of the four cloud species, species-major then level."""
        return [c for s in CLOUD_SPECIES for c in self.channels_of(s)]

    def background_channels(self) -> list[int]:
        return [c for v in BACKGROUND_VARIABLES for c in self.channels_of(v)]

    def to_dict(self) -> dict:
        return {
            "latitudes": list(self.latitudes),
            "longitudes": list(self.longitudes),
            "levels": list(self.levels),
            "variables": list(self.variables),
            "step_hours": self.step_hours,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        return cls(d["latitudes"], d["longitudes"], d["levels"], d["variables"], d["step_hours"])


@dataclass(frozen=True, eq=False)
class StateTensor:
    """One atmospheric state on ``spec``.

    Physical states (``normalized=False``) must carry non-negative cloud
    species.
    """

    spec: GridSpec
    values: np.ndarray
    time: int = 0
    normalized: bool = False

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape != self.spec.shape:
            raise ValidationError(f"state shape {v.shape} != grid shape {self.spec.shape}")
        if not np.all(np.isfinite(v)):
            raise ValidationError("state contains non-finite values")
        if not self.normalized:
            cloud = [c for s in CLOUD_SPECIES if s in self.spec.variables for c in self.spec.channels_of(s)]
            if cloud and np.any(v[cloud] < 0):
                raise ValidationError("cloud species must be non-negative in physical units")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "time", int(self.time))

    def field(self, variable: str) -> np.ndarray:
        """Values of one variable, shape [n_lev, n_lat, n_lon]."""
        return self.values[self.spec.channels_of(variable)]


class Dataset:
    """Time-ordered sequence of states stored as one ``[T, C, H, W]`` array."""

    def __init__(self, spec: GridSpec, values: np.ndarray, times: Sequence[int], validate: bool = True):
        self.spec = spec
        self.values = np.asarray(values)
        self.times = np.asarray(times, dtype=np.int64).reshape(-1)
        if self.values.size == 0 and self.times.size == 0:
            self.values = self.values.reshape((0,) + spec.shape)
        if validate:
            self._validate()

    def _validate(self):
        spec = self.spec
        if self.values.ndim != 4 or self.values.shape[1:] != spec.shape:
            raise ValidationError(f"dataset shape {self.values.shape} incompatible with grid {spec.shape}")
        if self.values.shape[0] != self.times.size:
            raise ValidationError("number of times does not match number of states")
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("dataset contains non-finite values")
        if self.times.size > 1 and np.any(np.diff(self.times) != spec.step_hours * 3600):
            raise ValidationError(f"consecutive states must be {spec.step_hours} h apart")
        cloud = [c for s in CLOUD_SPECIES if s in spec.variables for c in spec.channels_of(s)]
        if cloud and self.values.size and np.any(self.values[:, cloud] < 0):
            raise ValidationError("cloud species must be non-negative in physical units")

    @classmethod
    def from_states(cls, states: Sequence[StateTensor]) -> "Dataset":
        if not states:
            raise ValidationError("from_states needs at least one state; use Dataset(spec, ...) for empty")
        spec = states[0].spec
        if any(s.spec != spec for s in states):
            raise LayoutError("states use different grids")
        return cls(spec, np.stack([s.values for s in states]), [s.time for s in states])

    def __len__(self) -> int:
        return int(self.times.size)

    def __getitem__(self, i: int) -> StateTensor:
        return StateTensor(self.spec, self.values[i], int(self.times[i]))

    def __iter__(self) -> Iterator[StateTensor]:
        for i in range(len(self)):
            yield self[i]

    @property
    def states(self) -> list[StateTensor]:
        return list(self)

    def slice(self, start: int, stop: int) -> "Dataset":
        return Dataset(self.spec, self.values[start:stop], self.times[start:stop], validate=False)

    def equals(self, other: "Dataset") -> bool:
        """Bit-exact equality of grid, times and payload."""
        return (
            self.spec == other.spec
            and np.array_equal(self.times, other.times)
            and self.values.shape == other.values.shape
            and self.values.astype(np.float32).tobytes() == other.values.astype(np.float32).tobytes()
        )


# --------------------------------------------------------------------------
# latitude weighting


def latitude_weights(spec_or_lats) -> np.ndarray:
    """Area weights ``H * cos(lat_i) / sum(cos(lat))``; they sum to ``H``."""
    lats = spec_or_lats.latitudes if isinstance(spec_or_lats, GridSpec) else spec_or_lats
    lat = np.asarray(lats, dtype=np.float64).reshape(-1)
    if lat.size < 1:
        raise ValidationError("need at least one latitude")
    if np.any(np.abs(lat) > 90):
        raise ValidationError("latitudes must lie in [-90, 90]")
    c = np.cos(np.deg2rad(lat))
    # cos(+-90 deg) is ~6e-17 in floating point, not 0
    c[np.abs(lat) == 90.0] = 0.0
    total = c.sum()
    if total <= 0:
        raise DegenerateGridError("all latitude rows lie on the poles")
    return lat.size * c / total


# --------------------------------------------------------------------------
# AVSF persistence


def avsf_write(dataset: Dataset, path) -> None:
    """Write ``dataset`` in the AVSF little-endian container."""
    path = Path(path)
    spec = dataset.spec
    parts = [
        _HEADER.pack(
            AVSF_MAGIC, AVSF_VERSION, spec.n_lat, spec.n_lon, spec.n_lev, spec.n_var,
            len(dataset), spec.step_hours,
        ),
        np.asarray(spec.levels, dtype="<f4").tobytes(),
        np.asarray(spec.latitudes, dtype="<f4").tobytes(),
    ]
    for name in spec.variables:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    parts.append(dataset.times.astype("<i8").tobytes())
    parts.append(np.ascontiguousarray(dataset.values, dtype="<f4").tobytes())
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            for p in parts:
                fh.write(p)
    except OSError as exc:
        raise PersistenceError(f"cannot write AVSF file {path}: {exc}") from exc


def avsf_size(spec: GridSpec, n_time: int) -> int:
    """Exact byte size of an AVSF file holding ``n_time`` states."""
    names = sum(2 + len(v.encode("utf-8")) for v in spec.variables)
    return (
        _HEADER.size + 4 * spec.n_lev + 4 * spec.n_lat + names + 8 * n_time
        + 4 * n_time * spec.n_channels * spec.n_lat * spec.n_lon
    )


def avsf_read(path) -> Dataset:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise PersistenceError(f"cannot read AVSF file {path}: {exc}") from exc
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: too short for an AVSF header")
    magic, version, n_lat, n_lon, n_lev, n_var, n_time, step = _HEADER.unpack_from(buf, 0)
    if magic != AVSF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != AVSF_VERSION:
        raise FormatError(f"{path}: unsupported AVSF version {version}")
    off = _HEADER.size

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise CorruptionError(f"{path}: truncated at byte {off} (need {n} more)")
        chunk = buf[off:off + n]
        off += n
        return chunk

    levels = np.frombuffer(take(4 * n_lev), dtype="<f4")
    lats = np.frombuffer(take(4 * n_lat), dtype="<f4")
    names = []
    for _ in range(n_var):
        (length,) = struct.unpack("<H", take(2))
        try:
            names.append(take(length).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: variable name is not UTF-8") from exc
    times = np.frombuffer(take(8 * n_time), dtype="<i8")
    payload_len = 4 * n_time * n_var * n_lev * n_lat * n_lon
    payload = np.frombuffer(take(payload_len), dtype="<f4")
    if off != len(buf):
        raise CorruptionError(f"{path}: {len(buf) - off} trailing bytes after payload")
    if not np.all(np.isfinite(payload)):
        raise ValidationError(f"{path}: payload contains non-finite values")
    lon = np.arange(n_lon) * 360.0 / n_lon
    spec = GridSpec(lats, lon, levels, names, step)
    values = payload.reshape(n_time, n_var * n_lev, n_lat, n_lon).astype(np.float32)
    return Dataset(spec, values, times.copy())


# --------------------------------------------------------------------------
# normalization


@dataclass(frozen=True, eq=False)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    coerced: tuple[int, ...] = field(default=())

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if mean.shape != std.shape:
            raise ValidationError("mean and std must have the same length")
        bad = tuple(int(i) for i in np.flatnonzero(~(std > 0)))
        if bad:
            warnings.warn(f"constant channels {list(bad)}: std coerced to 1", RuntimeWarning, stacklevel=3)
            std = std.copy()
            std[list(bad)] = 1.0
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        object.__setattr__(self, "coerced", tuple(sorted(set(self.coerced) | set(bad))))

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "NormStats":
        """Per-channel mean/std over every time and grid point."""
        if len(dataset) == 0:
            raise ValidationError("cannot compute statistics of an empty dataset")
        v = dataset.values.astype(np.float64)
        return cls(v.mean(axis=(0, 2, 3)), v.std(axis=(0, 2, 3)))


def normalize(state: StateTensor, stats: NormStats) -> StateTensor:
    if stats.mean.size != state.spec.n_channels:
        raise LayoutError("statistics do not match the channel count")
    v = (state.values.astype(np.float64) - stats.mean[:, None, None]) / stats.std[:, None, None]
    return StateTensor(state.spec, v, state.time, normalized=True)


def denormalize(state: StateTensor, stats: NormStats) -> StateTensor:
    if stats.mean.size != state.spec.n_channels:
        raise LayoutError("statistics do not match the channel count")
    v = state.values.astype(np.float64) * stats.std[:, None, None] + stats.mean[:, None, None]
    return StateTensor(state.spec, v, state.time, normalized=False)


# --------------------------------------------------------------------------
# synthetic data

_EPS = 0.622
_ICE_RH = 0.85
_ICE_SHARE = 0.14


def _es_hpa(tc):
    return 6.1094 * np.exp(17.625 * tc / (tc + 243.04))


def _wave_pattern(rng, lat, lon, n_modes, speed_range, width_range=(20.0, 40.0)):
    """Eastward-travelling zonal waves with latitudinal envelopes.

    Returns a function ``step -> [n_lat, n_lon]`` with unit spatial spread.
    """
    m = rng.integers(1, 5, size=n_modes)
    amp = rng.uniform(0.5, 1.0, size=n_modes)
    amp /= amp.sum()
    phase = rng.uniform(0, 2 * np.pi, size=n_modes)
    speed = rng.uniform(*speed_range, size=n_modes)  # degrees longitude per step
    centre = rng.uniform(-60, 60, size=n_modes)
    width = rng.uniform(*width_range, size=n_modes)
    merid = rng.integers(1, 4, size=n_modes)
    lam = np.deg2rad(lon)[None, :]
    phi = lat[:, None]

    def raw(step: float) -> np.ndarray:
        out = np.zeros((lat.size, lon.size))
        for k in range(n_modes):
            env = np.exp(-(((phi - centre[k]) / width[k]) ** 2)) * np.cos(merid[k] * np.deg2rad(phi) + phase[k]) ** 2
            arg = m[k] * (lam - np.deg2rad(speed[k] * step)) + phase[k]
            out += amp[k] * env * np.cos(arg)
        return out

    # pure advection keeps the spread constant in time, so step 0 fixes the scale
    scale = 1.0 / max(float(raw(0.0).std()), 1e-12)
    return lambda step: scale * raw(step)


def synth_generate(spec: GridSpec, seed: int, n_steps: int, start: int = DEFAULT_START) -> Dataset:
    """Deterministic synthetic stand-in for reanalysis data.

    Background fields are smooth travelling waves; the cloud species are
    sparse thresholded functions of temperature and relative humidity, so
    cloud placement at any time is a function of the background state.
    """
    if n_steps < 2:
        raise ValidationError("n_steps must be >= 2")
    unknown = set(spec.variables) - set(DEFAULT_VARIABLES)
    if unknown:
        raise LayoutError(f"synthetic generator cannot produce {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    lat = np.asarray(spec.latitudes, dtype=np.float64)
    lon = np.asarray(spec.longitudes, dtype=np.float64)
    dyn = _wave_pattern(rng, lat, lon, 4, (1.5, 3.5))
    moist = _wave_pattern(rng, lat, lon, 5, (2.0, 4.5), (35.0, 70.0))
    s2 = np.sin(np.deg2rad(lat))[:, None] ** 2
    dlam = np.deg2rad(360.0 / spec.n_lon)
    coslat = np.maximum(np.cos(np.deg2rad(lat)), 0.05)[:, None]

    heights = [float(np.clip(np.log(1000.0 / p) / np.log(20.0), 0.0, 1.0)) for p in spec.levels]

    def thermo(n):
        """Temperature [K] and humidity anomaly per level at step ``n``."""
        p_dyn, p_moist = dyn(n), moist(n)
        temp = np.stack([293.0 - 120.0 * min(h, 0.5) - (35.0 - 30.0 * min(h, 0.5)) * s2 + 4.0 * p_dyn for h in heights])
        anom = np.stack([0.22 * p_moist + 0.08 * p_dyn - 0.05 * h for h in heights])
        return p_dyn, temp, anom

    # humidity offset calibrated so a fixed share of sub-freezing air is
    # above the ice-cloud threshold at step 0
    _, temp0, anom0 = thermo(0)
    cold = temp0 - 273.15 < 2.0
    rh_offset = 0.62
    if cold.any():
        rh_offset = float(np.clip(_ICE_RH - np.quantile(anom0[cold], 1.0 - _ICE_SHARE), 0.45, 0.8))

    out = np.zeros((n_steps, spec.n_channels, spec.n_lat, spec.n_lon), dtype=np.float32)
    for n in range(n_steps):
        p_dyn, temp_all, anom = thermo(n)
        # zonal / meridional derivatives of the dynamic pattern drive the winds
        dpx = (np.roll(p_dyn, -1, axis=1) - np.roll(p_dyn, 1, axis=1)) / (2 * dlam) / coslat
        dpy = np.gradient(p_dyn, np.deg2rad(lat), axis=0) if spec.n_lat > 1 else np.zeros_like(p_dyn)
        fields: dict[str, np.ndarray] = {v: np.zeros((spec.n_lev,) + p_dyn.shape) for v in spec.variables}
        for k, p in enumerate(spec.levels):
            height = heights[k]
            temp = temp_all[k]
            z = 9.81 * (7400.0 * np.log(1000.0 / p) * (1.0 + 0.05 * np.cos(2 * np.deg2rad(lat)))[:, None]) + 100.0 * p_dyn
            u = 8.0 + 18.0 * height + 12.0 * np.cos(2 * np.deg2rad(lat))[:, None] - 1.0 * dpy
            v = 1.0 * dpx
            rh = np.clip(rh_offset + anom[k], 0.03, 1.15)
            tc = temp - 273.15
            q = rh * _EPS * _es_hpa(tc) / p
            f_t = tc * (tc + 14.0) / -49.0
            ice = np.maximum(rh - _ICE_RH, 0.0) * np.clip((2.0 - tc) / 12.0, 0.0, 1.0) * (1.0 + np.maximum(f_t * 2.0 * (rh - 0.5), 0.0))
            liquid = np.maximum(rh - 0.9, 0.0) * np.clip((tc + 22.0) / 15.0, 0.0, 1.0)
            rain = np.maximum(rh - 0.97, 0.0) * np.clip(tc / 8.0, 0.0, 1.0)
            snow = np.maximum(rh - 0.95, 0.0) * np.clip(-tc / 15.0, 0.0, 1.0)
            values = {
                "z": z, "t": temp, "q": q, "u": u, "v": v,
                "ciwc": 2.0e-4 * ice, "clwc": 4.0e-4 * liquid,
                "crwc": 8.0e-4 * rain, "cswc": 6.0e-4 * snow,
            }
            for name in spec.variables:
                fields[name][k] = values[name]
        for vi, name in enumerate(spec.variables):
            out[n, vi * spec.n_lev:(vi + 1) * spec.n_lev] = fields[name]
    times = start + np.arange(n_steps, dtype=np.int64) * spec.step_hours * 3600
    return Dataset(spec, out, times)


def train_test_split(dataset: Dataset, train_fraction: float) -> tuple[Dataset, Dataset]:
    """Chronological split; the training part gets ``floor(T * fraction)`` states."""
    if not 0 < train_fraction < 1:
        raise ValidationError("train_fraction must lie in (0, 1)")
    n = int(math.floor(len(dataset) * train_fraction))
    return dataset.slice(0, n), dataset.slice(n, len(dataset))
