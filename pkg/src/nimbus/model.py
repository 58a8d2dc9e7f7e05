"""Hierarchical cloud forecaster.

Backbone: patch encoder over the stacked input pair, a cascade of windowed
attention blocks, and decoders back to grid resolution. The outputs of all
blocks are concatenated and *detached* before they feed the guide head, so
the auxiliary mask loss never reaches backbone parameters. The guide head
predicts next-step cloud masks from that feature stack plus the hybrid
mask/IC input; its sigmoid output is re-encoded and added to the cloud
path ahead of a dedicated fusion block and the cloud decoder.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import autodiff as ad
from .errors import FormatError, LayoutError, PersistenceError, RolloutDivergenceError, ValidationError, CorruptionError
from .gridio import BACKGROUND_VARIABLES, CLOUD_SPECIES, GridSpec, NormStats
from .physics import CLOUD_THRESHOLD, hybrid_from_values

VARIANTS = ("full", "no_ic", "no_mp_ic", "baseline")
GROUPS = ("backbone", "cloud_path", "guide_head")


@dataclass
class ModelConfig:
    grid: GridSpec
    embed_dim: int = 64
    n_blocks: int = 4
    window: int = 4
    patch: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    variant: str = "full"
    mask_threshold: float = CLOUD_THRESHOLD

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.embed_dim % self.heads:
            raise ValidationError("embed_dim must be divisible by heads")
        for name in ("embed_dim", "n_blocks", "window", "patch", "heads"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        missing = [v for v in BACKGROUND_VARIABLES + CLOUD_SPECIES if v not in self.grid.variables]
        if missing:
            raise LayoutError(f"grid lacks variables {missing}")

    @property
    def latent_hw(self) -> tuple[int, int]:
        return (-(-self.grid.n_lat // self.patch), -(-self.grid.n_lon // self.patch))

    @property
    def has_guide(self) -> bool:
        return self.variant in ("full", "no_ic")

    @property
    def hybrid_channels(self) -> int:
        n = self.grid.n_lev
        return 5 * n if self.variant == "full" else 4 * n

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["grid"] = GridSpec.from_dict(d["grid"])
        return cls(**d)


@dataclass
class ForwardOutput:
    forecast: torch.Tensor
    mask_logits: torch.Tensor | None = None
    features: torch.Tensor | None = field(default=None, repr=False)


# --------------------------------------------------------------------------
# initialisation helpers (explicit generator so construction is seed-pure)


def _trunc_normal(gen, shape, std=0.02):
    w = torch.randn(shape, generator=gen, dtype=ad.DTYPE) * std
    return nn.Parameter(torch.clamp(w, -2 * std, 2 * std))


def _fan_in_normal(gen, shape, fan_in):
    return nn.Parameter(torch.randn(shape, generator=gen, dtype=ad.DTYPE) / np.sqrt(fan_in))


def _zeros(*shape):
    return nn.Parameter(torch.zeros(shape, dtype=ad.DTYPE))


def _ones(*shape):
    return nn.Parameter(torch.ones(shape, dtype=ad.DTYPE))


class PatchEmbed(nn.Module):
    """Strided ``patch x patch`` convolution followed by layer norm."""

    def __init__(self, in_ch: int, dim: int, patch: int, gen):
        super().__init__()
        self.patch = patch
        self.weight = _fan_in_normal(gen, (dim, in_ch, patch, patch), in_ch * patch * patch)
        self.bias = _zeros(dim)
        self.norm_weight = _ones(dim)
        self.norm_bias = _zeros(dim)

    def forward(self, x):
        h, w = x.shape[-2:]
        ph, pw = (-h) % self.patch, (-w) % self.patch
        if ph or pw:
            x = ad.transpose(ad.pad2d(ad.transpose(x, [0, 2, 3, 1]), ph, pw), [0, 3, 1, 2])
        y = ad.conv2d(x, self.weight, self.bias, stride=self.patch)
        return ad.layer_norm(ad.transpose(y, [0, 2, 3, 1]), self.norm_weight, self.norm_bias)


class Decoder(nn.Module):
    """Token MLP then a transposed convolution mirroring :class:`PatchEmbed`."""

    def __init__(self, dim: int, out_ch: int, patch: int, gen):
        super().__init__()
        self.patch = patch
        self.norm_weight = _ones(dim)
        self.norm_bias = _zeros(dim)
        self.fc_weight = _trunc_normal(gen, (dim, dim))
        self.fc_bias = _zeros(dim)
        self.weight = _fan_in_normal(gen, (dim, out_ch, patch, patch), dim)
        self.bias = _zeros(out_ch)

    def forward(self, x, out_hw):
        y = ad.gelu(ad.linear(ad.layer_norm(x, self.norm_weight, self.norm_bias), self.fc_weight, self.fc_bias))
        y = ad.conv_transpose2d(ad.transpose(y, [0, 3, 1, 2]), self.weight, self.bias, stride=self.patch)
        return y[..., : out_hw[0], : out_hw[1]]


class WindowBlock(nn.Module):
    """Pre-norm windowed multi-head self-attention block with MLP.

    ``shift`` > 0 cyclically shifts the grid before partitioning and masks
    attention across the wrap seam. A learned relative-position bias per
    head is added to the attention logits.
    """

    def __init__(self, dim: int, heads: int, window: int, shift: int, mlp_ratio: float, gen):
        super().__init__()
        self.dim, self.heads, self.window, self.shift = dim, heads, window, shift
        hidden = int(dim * mlp_ratio)
        self.norm1_weight, self.norm1_bias = _ones(dim), _zeros(dim)
        self.qkv_weight, self.qkv_bias = _trunc_normal(gen, (3 * dim, dim)), _zeros(3 * dim)
        self.proj_weight, self.proj_bias = _trunc_normal(gen, (dim, dim)), _zeros(dim)
        self.rel_bias = _trunc_normal(gen, ((2 * window - 1) ** 2, heads))
        self.norm2_weight, self.norm2_bias = _ones(dim), _zeros(dim)
        self.fc1_weight, self.fc1_bias = _trunc_normal(gen, (hidden, dim)), _zeros(hidden)
        self.fc2_weight, self.fc2_bias = _trunc_normal(gen, (dim, hidden)), _zeros(dim)
        coords = torch.stack(torch.meshgrid(torch.arange(window), torch.arange(window), indexing="ij")).flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (window - 1)
        self.register_buffer("rel_index", rel[..., 0] * (2 * window - 1) + rel[..., 1], persistent=False)
        self._masks: dict = {}

    def _mask(self, h, w, shift):
        key = (h, w, shift)
        if key not in self._masks:
            self._masks[key] = ad.shifted_window_mask(h, w, self.window, shift)
        return self._masks[key]

    def position_bias(self):
        n = self.window * self.window
        return ad.transpose(self.rel_bias[self.rel_index.reshape(-1)].reshape(n, n, self.heads), [2, 0, 1])

    def attend(self, x):
        """Attention branch on a padded ``[B, H, W, C]`` grid (no residual)."""
        b, h, w, c = x.shape
        shift = self.shift if min(h, w) > self.window else 0
        win = ad.window_partition(x, self.window, shift)
        n = win.shape[1]
        qkv = ad.linear(win, self.qkv_weight, self.qkv_bias)
        qkv = ad.transpose(ad.reshape(qkv, (-1, n, 3, self.heads, c // self.heads)), [2, 0, 3, 1, 4])
        out = ad.attention(qkv[0], qkv[1], qkv[2], self.position_bias(), self._mask(h, w, shift))
        out = ad.reshape(ad.transpose(out, [0, 2, 1, 3]), (-1, n, c))
        out = ad.linear(out, self.proj_weight, self.proj_bias)
        return ad.window_reverse(out, self.window, h, w, shift)

    def forward(self, x):
        b, h, w, c = x.shape
        ph, pw = (-h) % self.window, (-w) % self.window
        xp = ad.pad2d(x, ph, pw)
        y = self.attend(ad.layer_norm(xp, self.norm1_weight, self.norm1_bias))
        xp = ad.add(xp, y)
        z = ad.layer_norm(xp, self.norm2_weight, self.norm2_bias)
        z = ad.linear(ad.gelu(ad.linear(z, self.fc1_weight, self.fc1_bias)), self.fc2_weight, self.fc2_bias)
        xp = ad.add(xp, z)
        return xp[:, :h, :w, :]


class MaskPredictor(nn.Module):
    """Token MLP, one attention block, transposed-conv decoder to mask logits."""

    def __init__(self, in_dim: int, dim: int, out_ch: int, cfg: ModelConfig, gen):
        super().__init__()
        self.fc1_weight, self.fc1_bias = _trunc_normal(gen, (dim, in_dim)), _zeros(dim)
        self.fc2_weight, self.fc2_bias = _trunc_normal(gen, (dim, dim)), _zeros(dim)
        self.block = WindowBlock(dim, cfg.heads, cfg.window, 0, cfg.mlp_ratio, gen)
        self.decoder = Decoder(dim, out_ch, cfg.patch, gen)

    def forward(self, feats, out_hw):
        y = ad.linear(ad.gelu(ad.linear(feats, self.fc1_weight, self.fc1_bias)), self.fc2_weight, self.fc2_bias)
        return self.decoder(self.block(y), out_hw)


class Forecaster(nn.Module):
    """Maps normalized ``(X_{t-1}, X_t)`` to normalized ``X_{t+1}`` and mask logits."""

    def __init__(self, config: ModelConfig, stats: NormStats | None = None, seed: int = 0):
        super().__init__()
        self.config = config
        cfg, grid = config, config.grid
        gen = torch.Generator().manual_seed(int(seed))
        d, p, nl = cfg.embed_dim, cfg.patch, grid.n_lev
        c = grid.n_channels

        self.backbone = nn.ModuleDict()
        self.cloud_path = nn.ModuleDict()
        self.guide_head = nn.ModuleDict()

        self.backbone["encoder"] = PatchEmbed(2 * c, d, p, gen)
        self.backbone["blocks"] = nn.ModuleList(
            WindowBlock(d, cfg.heads, cfg.window, 0 if i % 2 == 0 else cfg.window // 2, cfg.mlp_ratio, gen)
            for i in range(cfg.n_blocks)
        )
        if cfg.variant == "baseline":
            self.backbone["decoder"] = Decoder(d, c, p, gen)
        else:
            self.backbone["decoder"] = Decoder(d, 5 * nl, p, gen)
            self.cloud_path["decoder"] = Decoder(d, 4 * nl, p, gen)
        if cfg.has_guide:
            self.guide_head["encoder"] = PatchEmbed(cfg.hybrid_channels, d, p, gen)
            self.guide_head["predictor"] = MaskPredictor((cfg.n_blocks + 1) * d, d, 4 * nl, cfg, gen)
            self.cloud_path["guide_conv"] = PatchEmbed(4 * nl, d, p, gen)
            self.cloud_path["fusion"] = WindowBlock(d, cfg.heads, cfg.window, 0, cfg.mlp_ratio, gen)
            # guide branch starts as an exact no-op on the cloud features;
            # zeroed after drawing so the generator stream is variant-independent
            with torch.no_grad():
                self.cloud_path["guide_conv"].norm_weight.zero_()
                self.cloud_path["fusion"].proj_weight.zero_()
                self.cloud_path["fusion"].fc2_weight.zero_()

        if stats is None:
            stats = NormStats(np.zeros(c), np.ones(c))
        self.register_buffer("norm_mean", torch.as_tensor(stats.mean, dtype=ad.DTYPE).clone())
        self.register_buffer("norm_std", torch.as_tensor(stats.std, dtype=ad.DTYPE).clone())
        order = grid.background_channels() + grid.cloud_channels()
        self.register_buffer("_unscatter", torch.as_tensor(np.argsort(order)), persistent=False)

    # ------------------------------------------------------------------
    def parameter_groups(self) -> dict[str, dict[str, nn.Parameter]]:
        return {g: dict(getattr(self, g).named_parameters()) for g in GROUPS}

    def stats(self) -> NormStats:
        return NormStats(self.norm_mean.numpy().copy(), self.norm_std.numpy().copy())

    def physical(self, x):
        return x * self.norm_std[:, None, None] + self.norm_mean[:, None, None]

    def mask_predict(self, features, hybrid):
        """Mask logits from detached backbone features and the hybrid mask input.

        ``features`` is ``[B, h, w, n_blocks * D]``; ``hybrid`` is ``[B, K, H, W]``.
        """
        if not self.config.has_guide:
            raise ValidationError(f"variant {self.config.variant!r} has no mask predictor")
        m = self.guide_head["encoder"](hybrid)
        return self.guide_head["predictor"](ad.concat([features, m], dim=-1), hybrid.shape[-2:])

    def forward(self, x_prev, x_cur, detach_features: bool = True, cloud_bits=None) -> ForwardOutput:
        """``detach_features=False`` keeps the guide-head path differentiable w.r.t. the inputs.

        ``cloud_bits`` (``[4*n_lev, H, W]`` presence bits) stands in for the
        thresholded cloud mask of ``x_cur`` in the hybrid input.
        """
        squeeze = x_cur.dim() == 3
        if squeeze:
            x_prev, x_cur = x_prev[None], x_cur[None]
            cloud_bits = None if cloud_bits is None else cloud_bits[None]
        grid = self.config.grid
        if x_prev.shape != x_cur.shape or tuple(x_cur.shape[1:]) != grid.shape:
            raise LayoutError(f"inputs {tuple(x_prev.shape)} / {tuple(x_cur.shape)} do not match grid {grid.shape}")
        hw = (grid.n_lat, grid.n_lon)
        h = self.backbone["encoder"](ad.concat([x_prev, x_cur], dim=1))
        feats = []
        for blk in self.backbone["blocks"]:
            h = blk(h)
            feats.append(h)
        f_backbone = ad.concat(feats, dim=-1)
        if detach_features:
            f_backbone = ad.detach(f_backbone)

        mask_logits = None
        if self.config.variant == "baseline":
            forecast = self.backbone["decoder"](h, hw)
        else:
            cloud_feat = h
            if self.config.has_guide:
                hybrid = hybrid_from_values(
                    self.physical(x_cur), grid, self.config.mask_threshold,
                    with_ic=self.config.variant == "full", bits=cloud_bits,
                )
                mask_logits = self.mask_predict(f_backbone, hybrid)
                guide = self.cloud_path["guide_conv"](ad.sigmoid(mask_logits))
                cloud_feat = self.cloud_path["fusion"](ad.add(cloud_feat, guide))
            bg = self.backbone["decoder"](h, hw)
            cloud = self.cloud_path["decoder"](cloud_feat, hw)
            forecast = torch.index_select(ad.concat([bg, cloud], dim=1), 1, self._unscatter)
        if squeeze:
            forecast = forecast[0]
            mask_logits = None if mask_logits is None else mask_logits[0]
        return ForwardOutput(forecast, mask_logits, f_backbone)


def forward(model: Forecaster, x_prev, x_cur, detach_features: bool = True, cloud_bits=None) -> ForwardOutput:
    return model(x_prev, x_cur, detach_features, cloud_bits)


def rollout(model: Forecaster, x_prev, x_cur, n_steps: int, detach_features: bool = True) -> list[torch.Tensor]:
    """Autoregressive forecasts ``[X^_{t+1}, ..., X^_{t+n}]`` in normalized units.

    From step 2 on, guided variants take the cloud bits of the forecast
    state from the previous step's mask prediction (``logit > 0``) rather
    than thresholding regressed cloud values, whose small positive noise
    would light up most of the grid.

    Sensitivity analysis should pass ``detach_features=False`` so gradients
    also flow through the guide head.
    """
    if n_steps < 1:
        raise ValidationError("n_steps must be >= 1")
    out = []
    a, b, bits = x_prev, x_cur, None
    for k in range(1, n_steps + 1):
        step = model(a, b, detach_features, bits)
        nxt = step.forecast
        if not torch.isfinite(nxt).all():
            raise RolloutDivergenceError(k)
        out.append(nxt)
        a, b = b, nxt
        if step.mask_logits is not None:
            bits = (step.mask_logits.detach() > 0).to(nxt.dtype)
    return out


# --------------------------------------------------------------------------
# checkpoints: "AVSC" container of named little-endian f64 arrays + JSON sidecar

CKPT_MAGIC = b"AVSC"
CKPT_VERSION = 1


def write_arrays(arrays: dict[str, np.ndarray], path) -> None:
    path = Path(path)
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(b"".join(parts))
    except OSError as exc:
        raise PersistenceError(f"cannot write checkpoint {path}: {exc}") from exc


def read_arrays(path) -> dict[str, np.ndarray]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise PersistenceError(f"cannot read checkpoint {path}: {exc}") from exc
    if buf[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {buf[:4]!r}")
    off = 4
    try:
        version, count = struct.unpack_from("<II", buf, off)
        off += 8
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = 8 * int(np.prod(shape))
            if off + size > len(buf):
                raise CorruptionError(f"{path}: truncated array {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f8", count=size // 8, offset=off).reshape(shape).copy()
            off += size
    except struct.error as exc:
        raise CorruptionError(f"{path}: truncated checkpoint") from exc
    if off != len(buf):
        raise CorruptionError(f"{path}: trailing bytes")
    return out


def save_checkpoint(model: Forecaster, path) -> None:
    """Write ``path`` (arrays) and ``path.json`` (model config)."""
    path = Path(path)
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    write_arrays(arrays, path)
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(model.config.to_dict(), indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> Forecaster:
    path = Path(path)
    sidecar = path.with_name(path.name + ".json")
    try:
        cfg = ModelConfig.from_dict(json.loads(sidecar.read_text()))
    except OSError as exc:
        raise PersistenceError(f"missing checkpoint sidecar {sidecar}") from exc
    arrays = read_arrays(path)
    model = Forecaster(cfg)
    state = {k: torch.as_tensor(v, dtype=ad.DTYPE) for k, v in arrays.items()}
    model.load_state_dict(state, strict=True)
    return model
