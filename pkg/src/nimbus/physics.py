"""Icing-condition prior and cloud masks.

Every formula here accepts numpy arrays or torch tensors and returns the
same kind, so the model can build its mask input on the fly without
leaving the autodiff graph.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DomainError, LayoutError, ValidationError
from .gridio import CLOUD_SPECIES, GridSpec, StateTensor

EPSILON = 0.622
MAGNUS_A = 6.1094
MAGNUS_B = 17.625
MAGNUS_C = 243.04
KELVIN = 273.15
CLOUD_THRESHOLD = 1e-8


def _exp(x):
    return torch.exp(x) if isinstance(x, torch.Tensor) else np.exp(x)


def _min(x) -> float:
    return float(x.detach().min()) if isinstance(x, torch.Tensor) else float(np.min(x))


def saturation_vapor_pressure(t_c):
    """Saturation vapour pressure in hPa for a Celsius temperature."""
    if _min(t_c + MAGNUS_C) <= 0:
        raise DomainError(f"temperature must exceed {-MAGNUS_C} degC")
    return MAGNUS_A * _exp(MAGNUS_B * t_c / (t_c + MAGNUS_C))


def temperature_factor(t_c):
    """Parabola in Celsius temperature: 0 at 0 and -14 degC, 1 at -7 degC."""
    return t_c * (t_c + 14.0) / -49.0


def humidity_factor(q, t_k, p_hpa):
    """Humidity factor from specific humidity, temperature [K] and pressure [hPa]."""
    if _min(p_hpa) <= 0:
        raise DomainError("pressure must be positive")
    e_s = saturation_vapor_pressure(t_k - KELVIN)
    return 2.0 * (p_hpa * q / (EPSILON * e_s) - 0.5)


def ic_values(t_k, q, levels):
    """IC index on ``[..., n_lev, H, W]`` temperature/humidity stacks.

    No clamping: negative factors pass through unchanged.
    """
    if isinstance(t_k, torch.Tensor):
        p = torch.as_tensor(np.asarray(levels, dtype=np.float64), dtype=t_k.dtype).reshape(-1, 1, 1)
    else:
        p = np.asarray(levels, dtype=np.float64).reshape(-1, 1, 1)
    if t_k.shape[-3] != p.shape[0]:
        raise LayoutError(f"{t_k.shape[-3]} temperature levels but {p.shape[0]} pressure levels")
    return humidity_factor(q, t_k, p) * temperature_factor(t_k - KELVIN)


@dataclass(frozen=True, eq=False)
class ICField:
    spec: GridSpec
    values: np.ndarray  # [n_lev, n_lat, n_lon]


@dataclass(frozen=True, eq=False)
class CloudMask:
    spec: GridSpec
    bits: np.ndarray  # uint8 [4 * n_lev, n_lat, n_lon], species-major then level

    @property
    def density(self) -> float:
        return float(self.bits.mean())


def _require(spec: GridSpec, names) -> None:
    missing = [n for n in names if n not in spec.variables]
    if missing:
        raise LayoutError(f"state lacks required variables {missing}")


def ic_index(state: StateTensor) -> ICField:
    if state.normalized:
        raise ValidationError("ic_index needs a state in physical units")
    _require(state.spec, ("t", "q"))
    t = state.field("t").astype(np.float64)
    q = state.field("q").astype(np.float64)
    return ICField(state.spec, ic_values(t, q, state.spec.levels))


def cloud_mask_values(cloud, threshold: float = CLOUD_THRESHOLD):
    """Presence bits (same kind/dtype as ``cloud``) for ``cloud > threshold``."""
    if isinstance(cloud, torch.Tensor):
        return (cloud > threshold).to(cloud.dtype)
    return (np.asarray(cloud) > threshold).astype(np.uint8)


def diagnostic_cloud_mask(state: StateTensor, threshold: float = CLOUD_THRESHOLD) -> CloudMask:
    if state.normalized:
        raise ValidationError("cloud masks are defined in physical units")
    _require(state.spec, CLOUD_SPECIES)
    cloud = state.values[state.spec.cloud_channels()]
    return CloudMask(state.spec, cloud_mask_values(cloud, threshold))


def hybrid_from_values(values, spec: GridSpec, threshold: float = CLOUD_THRESHOLD, with_ic: bool = True,
                       bits=None):
    """Hybrid mask input from physical values ``[..., C, H, W]``.

    Channels: 4 * n_lev cloud bits (species-major, then level) followed by
    n_lev raw IC values when ``with_ic``. ``bits`` replaces the thresholded
    cloud bits when given.
    """
    _require(spec, CLOUD_SPECIES + ("t", "q"))
    if bits is None:
        bits = cloud_mask_values(values[..., spec.cloud_channels(), :, :], threshold)
    if not with_ic:
        return bits
    ic = ic_values(values[..., spec.channels_of("t"), :, :], values[..., spec.channels_of("q"), :, :], spec.levels)
    if isinstance(values, torch.Tensor):
        return torch.cat([bits, ic], dim=-3)
    return np.concatenate([bits.astype(np.float64), ic], axis=-3)


def hybrid_mask_input(state: StateTensor, threshold: float = CLOUD_THRESHOLD) -> np.ndarray:
    if state.normalized:
        raise ValidationError("hybrid mask input needs a state in physical units")
    return hybrid_from_values(state.values.astype(np.float64), state.spec, threshold)
