"""Figure and map output: matplotlib PNGs and binary PGM images."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no timestamps or version strings, so reruns are byte-identical
_PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def write_pgm(field, path) -> Path:
    """Min-max scaled 8-bit P5 image plus ``<name>.txt`` holding ``min max``.

    A constant field maps to mid-grey.
    """
    a = np.asarray(field, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError("write_pgm expects a 2-D field")
    if not np.all(np.isfinite(a)):
        raise ValueError("write_pgm: field has non-finite values")
    lo, hi = float(a.min()), float(a.max())
    if hi > lo:
        img = np.rint((a - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        img = np.full(a.shape, 128, dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
    path.with_suffix(".txt").write_text(f"{lo!r} {hi!r}\n")
    return path


def read_pgm(path) -> tuple[np.ndarray, tuple[float, float]]:
    """Pixels and the ``(min, max)`` range from the sidecar."""
    path = Path(path)
    raw = path.read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5" or len(parts) < 4:
        raise ValueError(f"{path} is not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    img = np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)
    lo, hi = (float(x) for x in path.with_suffix(".txt").read_text().split())
    return img, (lo, hi)


def plot_loss(history: list[dict], path, window: int = 25) -> Path:
    from .trainer import smoothed

    it = [r["iteration"] for r in history]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in ("total", "forecast_loss", "guide_loss"):
        vals = [r[key] for r in history]
        ax.plot(it, smoothed(vals, window), label=key)
    ax.set_xlabel("iteration")
    ax.set_ylabel(f"loss ({window}-step mean)")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_metric_curves(report, metric: str, path, channels=None) -> Path:
    """One line per channel of ``report.rmse`` or ``report.acc`` against lead time."""
    data = getattr(report, metric)
    channels = channels or report.channels
    fig, ax = plt.subplots(figsize=(7, 4))
    for name in channels:
        ax.plot(report.lead_hours, data[:, report.channel_index(name)], label=name)
    ax.set_xlabel("lead (h)")
    ax.set_ylabel(metric.upper())
    ax.legend(fontsize=7, ncol=3)
    fig.tight_layout()
    return _save(fig, path)


def plot_ablation(variants: list[str], channels: list[str], scores: np.ndarray, path,
                  ylabel: str = "5-step RMSE") -> Path:
    """Grouped bars, ``scores[variant, channel]``."""
    scores = np.asarray(scores, dtype=np.float64)
    x = np.arange(len(channels))
    width = 0.8 / max(len(variants), 1)
    fig, ax = plt.subplots(figsize=(max(6, len(channels) * 0.8), 4))
    for i, v in enumerate(variants):
        ax.bar(x + i * width, scores[i], width, label=v)
    ax.set_xticks(x + width * (len(variants) - 1) / 2)
    ax.set_xticklabels(channels, rotation=45, fontsize=8)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plot_map(field, lats, lons, path, title: str = "", box=None) -> Path:
    """Filled lat-lon map; ``box = ((lat0, lat1), (lon0, lon1))`` is outlined."""
    fig, ax = plt.subplots(figsize=(7, 3.8))
    mesh = ax.pcolormesh(np.asarray(lons), np.asarray(lats), np.asarray(field), shading="nearest")
    fig.colorbar(mesh, ax=ax)
    if box is not None:
        (la0, la1), (lo0, lo1) = box
        ax.plot([lo0, lo1, lo1, lo0, lo0], [la0, la0, la1, la1, la0], color="red", lw=1)
    ax.set_xlabel("longitude")
    ax.set_ylabel("latitude")
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_trace(trace, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot([r.iter for r in trace], [r.J for r in trace], marker=".", label="J")
    ax.plot([r.iter for r in trace], [r.best_J for r in trace], label="best J")
    ax.set_xlabel("iteration")
    ax.set_ylabel("objective")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)
