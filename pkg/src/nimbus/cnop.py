"""Conditional nonlinear optimal perturbations.

The moist total energy norm measures initial perturbations and forecast
differences; :func:`spg_maximize` is a projected-gradient ascent with
Barzilai-Borwein steps and a non-monotone Armijo line search;
:func:`solve_cnop` applies it to a trained forecaster, differentiating the
objective through the full autoregressive rollout.
"""
from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import autodiff as ad
from .errors import CnopError, ContractError, ValidationError
from .gridio import GridSpec, NormStats, latitude_weights
from .model import rollout

CP = 1004.0  # J K^-1 kg^-1
LATENT_HEAT = 2.5e6  # J kg^-1
R_DRY = 287.0  # J K^-1 kg^-1
T_REF = 270.0  # K
P_REF = 1000.0  # hPa
NORM_VARIABLES = ("u", "v", "t", "q")
ENERGY_COEFF = {"u": 1.0, "v": 1.0, "t": CP / T_REF, "q": LATENT_HEAT ** 2 / (CP * T_REF)}
TRACE_FIELDS = ("iter", "J", "lambda", "alpha", "d_norm")


@dataclass(frozen=True)
class Region:
    """Latitude/longitude box in degrees; ``lon[0] > lon[1]`` wraps through 0."""

    lat: tuple[float, float] = (21.0, 30.0)
    lon: tuple[float, float] = (105.0, 121.0)

    def mask(self, spec: GridSpec) -> np.ndarray:
        lat = np.asarray(spec.latitudes, dtype=np.float64)[:, None]
        lon = np.mod(np.asarray(spec.longitudes, dtype=np.float64), 360.0)[None, :]
        lo, hi = np.mod(self.lon[0], 360.0), np.mod(self.lon[1], 360.0)
        in_lon = (lon >= lo) & (lon <= hi) if lo <= hi else (lon >= lo) | (lon <= hi)
        in_lat = (lat >= min(self.lat)) & (lat <= max(self.lat))
        return in_lat & in_lon

    @classmethod
    def whole(cls) -> "Region":
        return cls((-90.0, 90.0), (0.0, 360.0))


@dataclass
class CnopConfig:
    xi: float = 0.6
    k_max: int = 50
    memory: int = 10
    alpha_min: float = 1e-3
    alpha_max: float = 50.0
    lead_steps: int = 12
    region: Region = field(default_factory=Region)
    seed: int = 0
    perturb: str = "current"  # or "both": also perturb X_{t-1}
    smooth: bool = True
    tol: float = 1e-6
    armijo_c: float = 1e-4
    max_backtracks: int = 30

    def __post_init__(self):
        if isinstance(self.region, dict):
            self.region = Region(tuple(self.region["lat"]), tuple(self.region["lon"]))
        if self.xi <= 0:
            raise ValidationError("xi must be positive")
        if not self.alpha_min < self.alpha_max:
            raise ValidationError("alpha_min must be below alpha_max")
        if self.memory < 1 or self.k_max < 0 or self.lead_steps < 1:
            raise ValidationError("memory and lead_steps must be >= 1, k_max >= 0")
        if self.perturb not in ("current", "both"):
            raise ValidationError("perturb must be 'current' or 'both'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["region"] = {"lat": list(self.region.lat), "lon": list(self.region.lon)}
        return d


@dataclass(frozen=True, eq=False)
class Perturbation:
    """Increment in full state layout; non-zero only on u, v, t, q channels."""

    spec: GridSpec
    values: np.ndarray
    surface_pressure: np.ndarray | None = None  # hPa, [n_lat, n_lon]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != self.spec.shape:
            raise ValidationError(f"perturbation shape {v.shape} != grid {self.spec.shape}")
        other = [c for c in range(self.spec.n_channels) if c not in support_channels(self.spec)]
        if other and np.any(v[other] != 0):
            raise ValidationError("perturbation touches channels outside u, v, t, q")
        object.__setattr__(self, "values", v)


def support_channels(spec: GridSpec) -> list[int]:
    return [c for name in NORM_VARIABLES for c in spec.channels_of(name)]


# --------------------------------------------------------------------------
# moist energy norm


def energy_density(u=None, v=None, t=None, q=None, ps=None):
    """Pointwise integrand of the moist total energy norm (without the 1/2 split).

    Missing components count as zero; ``ps`` is a surface-pressure
    perturbation in hPa.
    """
    terms = []
    for x, k in ((u, 1.0), (v, 1.0), (t, ENERGY_COEFF["t"]), (q, ENERGY_COEFF["q"])):
        if x is not None:
            terms.append(k * x * x)
    if not terms:
        raise ContractError("energy_density needs at least one 3-D component")
    e = terms[0]
    for term in terms[1:]:
        e = e + term
    e = 0.5 * e
    if ps is not None:
        e = e + 0.5 * R_DRY * T_REF * (ps / P_REF) ** 2
    return e


def _region_weights(spec: GridSpec, region: Region | None):
    w = latitude_weights(spec)[:, None] * (np.ones((1, spec.n_lon)) if region is None else region.mask(spec))
    total = w.sum()
    if total <= 0:
        raise ContractError("target region contains no grid points with positive weight")
    return w / total


def moist_energy_norm(delta, spec: GridSpec, region: Region | None = None, ps=None):
    """Latitude-weighted, region-masked horizontal mean x level mean of the energy density.

    ``delta`` is ``[C, H, W]`` in physical units (numpy or torch);
    ``ps`` an optional surface-pressure perturbation ``[H, W]`` in hPa.
    """
    if isinstance(delta, Perturbation):
        ps = delta.surface_pressure if ps is None else ps
        delta = delta.values
    w = _region_weights(spec, region)
    parts = {name: delta[..., spec.channels_of(name), :, :] for name in NORM_VARIABLES}
    e = energy_density(parts["u"], parts["v"], parts["t"], parts["q"])
    if isinstance(e, torch.Tensor):
        wt = torch.as_tensor(w, dtype=e.dtype)
        val = (e * wt).sum(dim=(-2, -1)).mean(dim=-1)
    else:
        val = (e * w).sum(axis=(-2, -1)).mean(axis=-1)
    if ps is not None:
        val = val + (0.5 * R_DRY * T_REF * (ps / P_REF) ** 2 * (torch.as_tensor(w) if isinstance(ps, torch.Tensor) else w)).sum()
    return val


def project_ball(delta, xi: float, norm: Callable, degree: float = 2.0):
    """Radial projection onto ``{norm <= xi}`` for a norm homogeneous of ``degree``.

    The moist energy norm is a quadratic form (degree 2); a Euclidean
    length is degree 1.
    """
    if xi <= 0:
        raise ValidationError("xi must be positive")
    n = float(norm(delta))
    if n <= xi:
        return delta
    factor = (xi / n) ** (1.0 / degree)
    out = delta * factor
    # roundoff can leave the norm an ulp above xi; shrink until it is not, so a
    # second projection is an exact no-op
    while float(norm(out)) > xi:
        factor = np.nextafter(factor, 0.0)
        out = delta * factor
    return out


# --------------------------------------------------------------------------
# solver pieces


def bb_step(s, y, alpha_min: float, alpha_max: float) -> float:
    """Barzilai-Borwein step ``s's / s'y`` clipped to the bounds; alpha_max if s'y <= 0."""
    s = np.asarray(s, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    sty = float(s @ y)
    sts = float(s @ s)
    if not math.isfinite(sty) or not math.isfinite(sts) or sty <= 0:
        return alpha_max
    return float(min(max(sts / sty, alpha_min), alpha_max))


def smooth_gradient(g):
    """3x3 binomial smoothing over the last two axes with replicated edges."""
    g = np.asarray(g, dtype=np.float64)
    k = np.array([1.0, 2.0, 1.0]) / 4.0
    pad = [(0, 0)] * (g.ndim - 2) + [(1, 1), (1, 1)]
    p = np.pad(g, pad, mode="edge")
    h, w = g.shape[-2:]
    rows = k[0] * p[..., 0:h, :] + k[1] * p[..., 1:h + 1, :] + k[2] * p[..., 2:h + 2, :]
    return k[0] * rows[..., 0:w] + k[1] * rows[..., 1:w + 1] + k[2] * rows[..., 2:w + 2]


@dataclass
class TraceRow:
    iter: int
    J: float
    lam: float
    alpha: float
    d_norm: float
    best_J: float


@dataclass
class SpgResult:
    x: np.ndarray
    J: float
    trace: list[TraceRow]
    converged: bool


def spg_maximize(
    value_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0: np.ndarray,
    project: Callable[[np.ndarray], np.ndarray],
    k_max: int = 50,
    memory: int = 10,
    alpha_min: float = 1e-3,
    alpha_max: float = 50.0,
    tol: float = 1e-6,
    c: float = 1e-4,
    max_backtracks: int = 30,
    smooth: Callable[[np.ndarray], np.ndarray] | None = None,
) -> SpgResult:
    """Spectral projected-gradient ascent on a convex feasible set.

    Accepts a step ``lam`` once ``J(x + lam d) >= min(last memory values) +
    c lam <g, d>``; the reference is the smallest stored value, so
    occasional decreases are allowed. The best iterate seen is returned.
    """
    smooth = smooth or (lambda g: g)
    x = project(np.array(x0, dtype=np.float64))
    try:
        J, g = value_and_grad(x)
    except Exception as exc:
        raise CnopError(f"objective failed at the initial point: {exc}") from exc
    g = smooth(g)
    best_x, best_J = x.copy(), J
    hist = deque([J], maxlen=memory)
    gn, xn = float(np.linalg.norm(g)), float(np.linalg.norm(x))
    alpha = min(max(xn / gn if gn > 0 and xn > 0 else 1.0, alpha_min), alpha_max)
    trace: list[TraceRow] = []
    converged = False
    for k in range(k_max):
        d = project(x + alpha * g) - x
        d_norm = float(np.linalg.norm(d))
        ref = min(hist)
        slope = float(np.sum(g * d))
        lam = 1.0
        try:
            for _ in range(max_backtracks + 1):
                J_new, g_new = value_and_grad(x + lam * d)
                if J_new >= ref + c * lam * slope:
                    break
                lam *= 0.5
            else:
                lam *= 2.0
        except Exception as exc:
            raise CnopError(f"objective failed at iteration {k}: {exc}", trace) from exc
        x_new = x + lam * d
        g_new = smooth(g_new)
        alpha = bb_step(x_new - x, g_new - g, alpha_min, alpha_max)
        hist.append(J_new)
        if J_new > best_J:
            best_J, best_x = J_new, x_new.copy()
        trace.append(TraceRow(k, float(J_new), lam, alpha, d_norm, float(best_J)))
        x, g = x_new, g_new
        if d_norm < tol:
            converged = True
            break
    return SpgResult(best_x, float(best_J), trace, converged)


def write_trace(trace: list[TraceRow], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for r in trace:
            w.writerow([r.iter, repr(r.J), repr(r.lam), repr(r.alpha), repr(r.d_norm)])


# --------------------------------------------------------------------------
# CNOP on a forecaster


class CnopProblem:
    """Objective, gradient and coordinate scaling for one initial pair.

    Solver coordinates ``z`` live on the u/v/t/q channels at rows with
    positive area weight, scaled so the domain moist energy of the
    perturbation equals ``|z|^2``.
    """

    def __init__(self, model, x_prev, x_cur, config: CnopConfig, stats: NormStats | None = None):
        self.model = model
        self.config = config
        self.spec: GridSpec = model.config.grid
        self.stats = stats or model.stats()
        self.mean = torch.as_tensor(self.stats.mean[:, None, None], dtype=ad.DTYPE)
        self.std = torch.as_tensor(self.stats.std[:, None, None], dtype=ad.DTYPE)
        self.x_prev = torch.as_tensor(np.asarray(x_prev, dtype=np.float64))
        self.x_cur = torch.as_tensor(np.asarray(x_cur, dtype=np.float64))
        self.region_mask = config.region.mask(self.spec)
        _region_weights(self.spec, config.region)  # fail early on an empty region

        spec = self.spec
        w = latitude_weights(spec)
        coeff = np.zeros(spec.shape)
        for name in NORM_VARIABLES:
            coeff[spec.channels_of(name)] = ENERGY_COEFF[name]
        scale2 = 0.5 * coeff * w[None, :, None] / (spec.n_lev * spec.n_lat * spec.n_lon)
        self.support = scale2 > 0
        self.scale = np.sqrt(scale2[self.support])
        with torch.no_grad():
            self.control = self._forecast(torch.zeros(spec.shape, dtype=ad.DTYPE))

    @property
    def size(self) -> int:
        return int(self.support.sum())

    def to_delta(self, z: np.ndarray) -> np.ndarray:
        delta = np.zeros(self.spec.shape)
        delta[self.support] = z / self.scale
        return delta

    def to_z(self, delta: np.ndarray) -> np.ndarray:
        return np.asarray(delta)[self.support] * self.scale

    def _forecast(self, delta: torch.Tensor) -> torch.Tensor:
        d_norm = delta / self.std
        a = (self.x_prev - self.mean) / self.std
        b = (self.x_cur - self.mean) / self.std + d_norm
        if self.config.perturb == "both":
            a = a + d_norm
        seq = rollout(self.model, a, b, self.config.lead_steps, detach_features=False)
        return seq[-1] * self.std + self.mean

    def objective(self, delta) -> torch.Tensor:
        """Regional moist energy of the forecast change at the lead time."""
        delta = delta if isinstance(delta, torch.Tensor) else torch.as_tensor(np.asarray(delta, dtype=np.float64))
        diff = self._forecast(delta) - self.control
        return moist_energy_norm(diff, self.spec, self.config.region)

    def value_and_grad_delta(self, delta: np.ndarray) -> tuple[float, np.ndarray]:
        d = torch.as_tensor(np.asarray(delta, dtype=np.float64)).requires_grad_(True)
        J = self.objective(d)
        g = ad.backward(J, [d])[0]
        return float(J.detach()), g

    def value_and_grad(self, z: np.ndarray) -> tuple[float, np.ndarray]:
        J, g = self.value_and_grad_delta(self.to_delta(z))
        if self.config.smooth:
            g = smooth_gradient(g)
        return J, g[self.support] / self.scale

    def energy(self, z: np.ndarray) -> float:
        return float(z @ z)

    def project(self, z: np.ndarray) -> np.ndarray:
        return project_ball(z, self.config.xi, self.energy, degree=2.0)


@dataclass
class CnopResult:
    delta: Perturbation
    J: float
    trace: list[TraceRow]
    converged: bool


def cnop_objective(model, x_pair, delta, config: CnopConfig, stats: NormStats | None = None):
    return CnopProblem(model, x_pair[0], x_pair[1], config, stats).objective(delta)


def solve_cnop(model, x_pair, config: CnopConfig, stats: NormStats | None = None) -> CnopResult:
    """Norm-bounded initial perturbation maximising the regional forecast change."""
    prob = CnopProblem(model, x_pair[0], x_pair[1], config, stats)
    rng = np.random.default_rng(config.seed)
    z0 = rng.standard_normal(prob.size) * math.sqrt(config.xi / prob.size)
    res = spg_maximize(
        prob.value_and_grad, z0, prob.project, config.k_max, config.memory, config.alpha_min,
        config.alpha_max, config.tol, config.armijo_c, config.max_backtracks,
    )
    return CnopResult(Perturbation(prob.spec, prob.to_delta(res.x)), res.J, res.trace, res.converged)


def importance_map(delta: Perturbation) -> np.ndarray:
    """Per-level moist energy density of a perturbation, ``[n_lev, H, W]``."""
    spec = delta.spec
    parts = {n: delta.values[spec.channels_of(n)] for n in NORM_VARIABLES}
    return energy_density(parts["u"], parts["v"], parts["t"], parts["q"])
