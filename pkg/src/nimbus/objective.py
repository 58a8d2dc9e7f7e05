"""Training losses and mask labels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from . import autodiff as ad
from .errors import ShapeError
from .gridio import StateTensor
from .physics import CLOUD_THRESHOLD, CloudMask, diagnostic_cloud_mask

CHARBONNIER_EPS = 1e-3
FOCAL_GAMMA = 1.5
FOCAL_ALPHA = 0.25
GUIDE_WEIGHT = 1.0


def _f(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def _tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def charbonnier_loss(pred, target, lat_weights, eps: float = CHARBONNIER_EPS) -> torch.Tensor:
    """Latitude-weighted Charbonnier penalty averaged over every channel and point.

    ``lat_weights`` has one entry per grid row (the second-to-last axis).
    """
    pred, target, w = _tensor(pred), _tensor(target), _tensor(lat_weights)
    if pred.shape != target.shape:
        raise ShapeError(f"charbonnier_loss: pred {tuple(pred.shape)} != target {tuple(target.shape)}")
    if w.shape != (pred.shape[-2],):
        raise ShapeError(f"charbonnier_loss: {w.numel()} latitude weights for {pred.shape[-2]} rows")
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = pred - target
    return ad.mean(ad.sqrt(d * d + eps * eps) * w[:, None])


def focal_loss(logits, labels, gamma: float = FOCAL_GAMMA, alpha_t: float = FOCAL_ALPHA) -> torch.Tensor:
    """Mean of ``-alpha_t (1 - p_t)^gamma log p_t`` over all points.

    Both ``log p_t`` and ``1 - p_t`` come from log-sigmoids of the signed
    logit, so saturated predictions stay finite.
    """
    logits, labels = _tensor(logits), _tensor(labels).to(ad.DTYPE)
    if logits.shape != labels.shape:
        raise ShapeError(f"focal_loss: logits {tuple(logits.shape)} != labels {tuple(labels.shape)}")
    signed = logits * (2.0 * labels - 1.0)
    log_pt = ad.log_sigmoid(signed)
    if gamma == 0:
        return ad.mean(-alpha_t * log_pt)
    one_minus_pt = torch.exp(ad.log_sigmoid(-signed))
    return ad.mean(-alpha_t * ad.power(one_minus_pt, gamma) * log_pt)


def mask_labels(state: StateTensor, threshold: float = CLOUD_THRESHOLD) -> CloudMask:
    """Supervision target for the guide head: the diagnostic mask of X_{t+1}."""
    return diagnostic_cloud_mask(state, threshold)


@dataclass
class LossBreakdown:
    forecast_loss: object
    guide_loss: object
    total: object
    lam: float = GUIDE_WEIGHT
    gamma: float = FOCAL_GAMMA
    alpha_t: float = FOCAL_ALPHA

    def as_floats(self) -> "LossBreakdown":
        return LossBreakdown(_f(self.forecast_loss), _f(self.guide_loss), _f(self.total),
                             self.lam, self.gamma, self.alpha_t)


def combine(forecast_loss, guide_loss, lam: float = GUIDE_WEIGHT, gamma: float = FOCAL_GAMMA,
            alpha_t: float = FOCAL_ALPHA) -> LossBreakdown:
    return LossBreakdown(forecast_loss, guide_loss, forecast_loss + lam * guide_loss, lam, gamma, alpha_t)


def total_loss(
    forecast_pair,
    mask_pair,
    lat_weights,
    lam: float = GUIDE_WEIGHT,
    eps: float = CHARBONNIER_EPS,
    gamma: float = FOCAL_GAMMA,
    alpha_t: float = FOCAL_ALPHA,
) -> LossBreakdown:
    """Forecast loss plus ``lam`` times the guide loss.

    ``mask_pair`` is ``(logits, labels)``, or ``None`` for variants without a
    guide head (guide loss is then exactly zero).
    """
    fl = charbonnier_loss(*forecast_pair, lat_weights, eps)
    if mask_pair is None:
        gl = torch.zeros((), dtype=ad.DTYPE)
    else:
        gl = focal_loss(*mask_pair, gamma, alpha_t)
    return combine(fl, gl, lam, gamma, alpha_t)
