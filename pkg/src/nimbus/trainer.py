"""Single-step training loop with AdamW and cosine annealing."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import autodiff as ad
from .errors import TrainingDivergenceError, ValidationError
from .gridio import Dataset, NormStats, latitude_weights, train_test_split
from .model import Forecaster, ModelConfig, save_checkpoint
from .objective import CHARBONNIER_EPS, FOCAL_ALPHA, FOCAL_GAMMA, GUIDE_WEIGHT, total_loss
from .physics import CLOUD_THRESHOLD, cloud_mask_values

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("iteration", "lr", "forecast_loss", "guide_loss", "total")


@dataclass
class TrainConfig:
    iterations: int = 500
    batch: int = 4
    lr0: float = 2.5e-4
    lr_min: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.1
    eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 100
    train_fraction: float = 0.8
    charbonnier_eps: float = CHARBONNIER_EPS
    focal_gamma: float = FOCAL_GAMMA
    focal_alpha: float = FOCAL_ALPHA
    guide_weight: float = GUIDE_WEIGHT
    mask_threshold: float = CLOUD_THRESHOLD

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValidationError("betas must lie in [0, 1)")
        if self.lr_min > self.lr0:
            raise ValidationError("lr_min must not exceed lr0")
        if self.iterations < 0 or self.batch < 1:
            raise ValidationError("iterations must be >= 0 and batch >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimState:
    first: dict
    second: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict) -> "OptimState":
        return cls({k: torch.zeros_like(p) for k, p in params.items()},
                   {k: torch.zeros_like(p) for k, p in params.items()})


def cosine_lr(step: int, total: int, lr0: float, lr_min: float = 0.0) -> float:
    if total <= 0:
        return lr0
    if not 0 <= step <= total:
        raise ValidationError(f"step {step} outside [0, {total}]")
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total))


@torch.no_grad()
def adamw_step(params: dict, grads: dict, state: OptimState, lr: float, beta1: float = 0.9,
               beta2: float = 0.95, weight_decay: float = 0.0, eps: float = 1e-8) -> None:
    """In-place bias-corrected Adam update with decoupled weight decay."""
    for name, g in grads.items():
        g = torch.as_tensor(g, dtype=params[name].dtype)
        if not torch.isfinite(g).all():
            raise TrainingDivergenceError(f"non-finite gradient for {name}", parameter=name)
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = torch.as_tensor(grads[name], dtype=p.dtype) if name in grads else torch.zeros_like(p)
        m = state.first[name]
        v = state.second[name]
        m.mul_(beta1).add_(g, alpha=1.0 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
        if weight_decay:
            p.mul_(1.0 - lr * weight_decay)
        p.sub_(lr * (m / bc1) / ((v / bc2).sqrt() + eps))


def smoothed(values, window: int = 25) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


class _Batches:
    """Normalized tensors and mask labels for consecutive-triple sampling."""

    def __init__(self, dataset: Dataset, stats: NormStats, threshold: float):
        spec = dataset.spec
        v = dataset.values.astype(np.float64)
        self.x = torch.as_tensor((v - stats.mean[None, :, None, None]) / stats.std[None, :, None, None])
        self.labels = torch.as_tensor(cloud_mask_values(v[:, spec.cloud_channels()], threshold).astype(np.float64))
        self.n = len(dataset)

    def sample(self, seed: int, iteration: int, batch: int):
        rng = np.random.default_rng([seed, iteration])
        s = torch.as_tensor(rng.integers(0, self.n - 2, size=batch))
        return self.x[s], self.x[s + 1], self.x[s + 2], self.labels[s + 2]


def train(
    dataset: Dataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir=None,
    stats: NormStats | None = None,
) -> tuple[Forecaster, list[dict]]:
    """Train on the chronological training split of ``dataset``.

    Returns the trained model and a per-iteration history of loss
    components and learning rate.
    """
    tc = train_config
    train_ds, _ = train_test_split(dataset, tc.train_fraction)
    if len(train_ds) < 3:
        raise ValidationError("training split needs at least 3 states")
    if model_config.grid != dataset.spec:
        raise ValidationError("model grid does not match the dataset grid")
    stats = stats or NormStats.from_dataset(train_ds)
    model = Forecaster(model_config, stats, seed=tc.seed)
    params = dict(model.named_parameters())
    opt = OptimState.zeros_like(params)
    batches = _Batches(train_ds, stats, tc.mask_threshold)
    weights = torch.as_tensor(latitude_weights(dataset.spec))
    out_dir = Path(out_dir) if out_dir is not None else None
    history: list[dict] = []

    for it in range(tc.iterations):
        lr = cosine_lr(it, tc.iterations, tc.lr0, tc.lr_min)
        x_prev, x_cur, target, labels = batches.sample(tc.seed, it, tc.batch)
        out = model(x_prev, x_cur)
        mask_pair = (out.mask_logits, labels) if out.mask_logits is not None else None
        lb = total_loss((out.forecast, target), mask_pair, weights, tc.guide_weight,
                        tc.charbonnier_eps, tc.focal_gamma, tc.focal_alpha)
        if not torch.isfinite(lb.total):
            raise TrainingDivergenceError(f"non-finite loss at iteration {it}", iteration=it)
        grads = ad.backward(lb.total, params)
        try:
            adamw_step(params, grads, opt, lr, tc.beta1, tc.beta2, tc.weight_decay, tc.eps)
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(f"{exc} at iteration {it}", iteration=it, parameter=exc.parameter) from exc
        row = lb.as_floats()
        history.append({"iteration": it, "lr": lr, "forecast_loss": row.forecast_loss,
                        "guide_loss": row.guide_loss, "total": row.total})
        if it % 50 == 0:
            log.info("iter %d lr %.3e loss %.5f (forecast %.5f guide %.5f)", it, lr, row.total,
                     row.forecast_loss, row.guide_loss)
        if out_dir is not None and tc.checkpoint_every and (it + 1) % tc.checkpoint_every == 0:
            save_checkpoint(model, out_dir / "checkpoints" / f"ckpt_{it + 1:06d}.avsc")
    return model, history


def write_history(history: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["iteration"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"iteration": int(r["iteration"]), **{k: float(r[k]) for k in HISTORY_FIELDS[1:]}} for r in rows]
