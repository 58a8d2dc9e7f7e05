"""Latitude-weighted verification: RMSE, ACC, NRMSE and climatology."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ContractError, ShapeError, UndefinedACCError, ValidationError
from .gridio import CLOUD_SPECIES, Dataset, GridSpec, NormStats, latitude_weights

REPORT_FIELDS = ("channel", "lead_hours", "rmse", "acc", "nrmse_pct")


def climatology(dataset: Dataset) -> np.ndarray:
    """Time mean at every (channel, lat, lon)."""
    if len(dataset) == 0:
        raise ContractError("climatology of an empty dataset")
    return dataset.values.astype(np.float64).mean(axis=0)


def _check(op, *arrays):
    ref = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != ref:
            raise ShapeError(f"{op}: shapes {ref} and {a.shape} differ")


def rmse_latweighted(pred, truth, lat_weights) -> np.ndarray:
    """Per-channel RMSE for ``[..., C, H, W]`` fields."""
    pred, truth = np.asarray(pred, dtype=np.float64), np.asarray(truth, dtype=np.float64)
    _check("rmse_latweighted", pred, truth)
    w = np.asarray(lat_weights, dtype=np.float64)
    if w.shape != (pred.shape[-2],):
        raise ShapeError("rmse_latweighted: one weight per latitude row required")
    return np.sqrt(np.mean(w[:, None] * (pred - truth) ** 2, axis=(-2, -1)))


def acc_latweighted(pred, truth, clim, lat_weights) -> np.ndarray:
    """Per-channel weighted anomaly correlation against ``clim``.

    Raises :class:`UndefinedACCError` when a channel has zero anomaly
    variance in either field.
    """
    pred, truth, clim = (np.asarray(a, dtype=np.float64) for a in (pred, truth, clim))
    _check("acc_latweighted", pred, truth, clim)
    w = np.asarray(lat_weights, dtype=np.float64)[:, None]
    pa, ta = pred - clim, truth - clim
    num = np.sum(w * pa * ta, axis=(-2, -1))
    vp = np.sum(w * pa * pa, axis=(-2, -1))
    vt = np.sum(w * ta * ta, axis=(-2, -1))
    if np.any(vp == 0) or np.any(vt == 0):
        raise UndefinedACCError("zero anomaly variance: ACC undefined")
    return num / np.sqrt(vp * vt)


def nrmse(model_rmse, baseline_rmse):
    """Relative RMSE change in percent; negative means the model is better."""
    b = np.asarray(baseline_rmse, dtype=np.float64)
    if np.any(b == 0):
        raise ZeroDivisionError("baseline RMSE is zero")
    out = (np.asarray(model_rmse, dtype=np.float64) - b) / b * 100.0
    return float(out) if out.ndim == 0 else out


@dataclass
class MetricReport:
    channels: list[str]
    lead_hours: list[int]
    rmse: np.ndarray  # [lead, channel]
    acc: np.ndarray  # [lead, channel]; NaN where undefined
    nrmse: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def with_baseline(self, baseline: "MetricReport") -> "MetricReport":
        if baseline.channels != self.channels or baseline.lead_hours[: len(self.lead_hours)] != self.lead_hours:
            raise ValidationError("baseline report covers different channels or leads")
        n = len(self.lead_hours)
        return MetricReport(self.channels, self.lead_hours, self.rmse, self.acc,
                            nrmse(self.rmse, baseline.rmse[:n]), dict(self.metadata))

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_FIELDS)
            for li, lead in enumerate(self.lead_hours):
                for ci, ch in enumerate(self.channels):
                    acc = self.acc[li, ci]
                    n = "" if self.nrmse is None else repr(float(self.nrmse[li, ci]))
                    w.writerow([ch, lead, repr(float(self.rmse[li, ci])), "" if np.isnan(acc) else repr(float(acc)), n])

    @classmethod
    def read_csv(cls, path) -> "MetricReport":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        channels = list(dict.fromkeys(r["channel"] for r in rows))
        leads = sorted({int(r["lead_hours"]) for r in rows})
        shape = (len(leads), len(channels))
        rmse, acc, nr = np.full(shape, np.nan), np.full(shape, np.nan), np.full(shape, np.nan)
        has_n = any(r["nrmse_pct"] for r in rows)
        for r in rows:
            i, j = leads.index(int(r["lead_hours"])), channels.index(r["channel"])
            rmse[i, j] = float(r["rmse"])
            acc[i, j] = float(r["acc"]) if r["acc"] else math.nan
            if r["nrmse_pct"]:
                nr[i, j] = float(r["nrmse_pct"])
        return cls(channels, leads, rmse, acc, nr if has_n else None)

    def channel_index(self, name: str) -> int:
        return self.channels.index(name)


def physical_forecasts(model, stats: NormStats, x_prev: np.ndarray, x_cur: np.ndarray, n_steps: int) -> np.ndarray:
    """Rollout from physical states; returns ``[n_steps, C, H, W]`` in physical units.

    Cloud species are clipped at zero after denormalization.
    """
    from .model import rollout

    spec: GridSpec = model.config.grid
    mean, std = stats.mean[:, None, None], stats.std[:, None, None]
    a = torch.as_tensor((np.asarray(x_prev, dtype=np.float64) - mean) / std)
    b = torch.as_tensor((np.asarray(x_cur, dtype=np.float64) - mean) / std)
    with torch.no_grad():
        seq = rollout(model, a, b, n_steps)
    out = np.stack([s.numpy() * std + mean for s in seq])
    cloud = [c for s in CLOUD_SPECIES for c in spec.channels_of(s)]
    out[:, cloud] = np.maximum(out[:, cloud], 0.0)
    return out


def evaluate_model(model, test: Dataset, clim: np.ndarray, n_leads: int, stats: NormStats | None = None,
                   init_indices=None) -> MetricReport:
    """Per-lead metrics averaged over initialisation times.

    An init index ``i`` uses states ``i-1, i`` as input and ``i+1 .. i+n_leads``
    as truth.
    """
    stats = stats or model.stats()
    spec = test.spec
    if init_indices is None:
        init_indices = list(range(1, len(test) - n_leads))
    init_indices = list(init_indices)
    if not init_indices:
        raise ValidationError(f"test split of {len(test)} states is too short for {n_leads} leads")
    w = latitude_weights(spec)
    rm = np.zeros((len(init_indices), n_leads, spec.n_channels))
    ac = np.full((len(init_indices), n_leads, spec.n_channels), np.nan)
    for k, i in enumerate(init_indices):
        fc = physical_forecasts(model, stats, test.values[i - 1], test.values[i], n_leads)
        truth = test.values[i + 1:i + 1 + n_leads].astype(np.float64)
        rm[k] = rmse_latweighted(fc, truth, w)
        for li in range(n_leads):
            for c in range(spec.n_channels):
                try:
                    ac[k, li, c] = acc_latweighted(fc[li, c][None], truth[li, c][None], clim[c][None], w)[0]
                except UndefinedACCError:
                    pass
    with np.errstate(all="ignore"):
        acc_mean = np.where(np.all(np.isnan(ac), axis=0), np.nan, np.nanmean(np.where(np.isnan(ac), 0, ac), axis=0)
                            * ac.shape[0] / np.maximum(np.sum(~np.isnan(ac), axis=0), 1))
    leads = [spec.step_hours * (li + 1) for li in range(n_leads)]
    meta = {"init_times": [int(test.times[i]) for i in init_indices]}
    return MetricReport(spec.channel_names(), leads, rm.mean(axis=0), acc_mean, None, meta)
