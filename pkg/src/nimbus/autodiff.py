"""Reverse-mode differentiation substrate.

Values are float64 ``torch.Tensor`` objects; torch records the operation
graph. This module fixes the primitive vocabulary the model is built from,
checks shapes with errors that name the primitive, and provides
``backward`` (gradient map) and ``grad_check`` (central differences).
Attention and window handling are composed from the primitives, so their
adjoints come for free.
"""
from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, NumericError, ShapeError

DTYPE = torch.float64
MASK_NEG = -1e9


def value(data, requires_grad: bool = False) -> torch.Tensor:
    """Wrap ``data`` as a float64 differentiable value."""
    t = torch.as_tensor(np.asarray(data, dtype=np.float64) if not isinstance(data, torch.Tensor) else data)
    t = t.to(DTYPE).clone()
    return t.requires_grad_(requires_grad)


def detach(x: torch.Tensor) -> torch.Tensor:
    return x.detach()


def _shape_error(op: str, msg: str) -> ShapeError:
    return ShapeError(f"{op}: {msg}")


def _broadcastable(op: str, a: torch.Tensor, b: torch.Tensor) -> None:
    try:
        torch.broadcast_shapes(a.shape, b.shape)
    except RuntimeError:
        raise _shape_error(op, f"cannot broadcast {tuple(a.shape)} with {tuple(b.shape)}") from None


def add(a, b):
    _broadcastable("add", torch.as_tensor(a), torch.as_tensor(b))
    return a + b


def mul(a, b):
    _broadcastable("mul", torch.as_tensor(a), torch.as_tensor(b))
    return a * b


def matmul(a, b):
    if a.shape[-1] != b.shape[-2]:
        raise _shape_error("matmul", f"inner dimensions {a.shape[-1]} and {b.shape[-2]} differ")
    return a @ b


def concat(xs: Sequence[torch.Tensor], dim: int = 1):
    ref = list(xs[0].shape)
    for x in xs[1:]:
        other = list(x.shape)
        if len(other) != len(ref) or any(i != dim % len(ref) and s != r for i, (s, r) in enumerate(zip(other, ref))):
            raise _shape_error("concat", f"{tuple(x.shape)} does not match {tuple(ref)} outside dim {dim}")
    return torch.cat(list(xs), dim=dim)


def reshape(x, shape):
    n = int(np.prod([s for s in shape if s != -1])) if shape else 1
    if -1 not in shape and n != x.numel():
        raise _shape_error("reshape", f"cannot reshape {tuple(x.shape)} into {tuple(shape)}")
    return x.reshape(shape)


def transpose(x, perm):
    if sorted(perm) != list(range(x.dim())):
        raise _shape_error("transpose", f"permutation {perm} invalid for rank {x.dim()}")
    return x.permute(*perm)


def sum(x, dim=None):  # noqa: A001 - primitive name
    return x.sum() if dim is None else x.sum(dim=dim)


def mean(x, dim=None):
    return x.mean() if dim is None else x.mean(dim=dim)


def sqrt(x):
    return torch.sqrt(x)


def log(x):
    return torch.log(x)


def power(x, p: float):
    return torch.pow(x, p)


def sigmoid(x):
    return torch.sigmoid(x)


def log_sigmoid(x):
    return F.logsigmoid(x)


def gelu(x):
    return F.gelu(x)


def softmax(x, dim: int = -1):
    return torch.softmax(x, dim=dim)


def linear(x, weight, bias=None):
    if x.shape[-1] != weight.shape[1]:
        raise _shape_error("linear", f"input features {x.shape[-1]} != weight in-features {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise _shape_error("linear", f"bias shape {tuple(bias.shape)} != ({weight.shape[0]},)")
    return F.linear(x, weight, bias)


def layer_norm(x, weight=None, bias=None, eps: float = 1e-5):
    c = x.shape[-1]
    for name, p in (("weight", weight), ("bias", bias)):
        if p is not None and p.shape != (c,):
            raise _shape_error("layer_norm", f"{name} shape {tuple(p.shape)} != ({c},)")
    return F.layer_norm(x, (c,), weight, bias, eps)


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0):
    if x.dim() != 4 or weight.dim() != 4:
        raise _shape_error("conv2d", "expects [B, C, H, W] input and [O, C, kh, kw] kernel")
    if x.shape[1] != weight.shape[1]:
        raise _shape_error("conv2d", f"input channels {x.shape[1]} != kernel channels {weight.shape[1]}")
    if x.shape[2] + 2 * padding < weight.shape[2] or x.shape[3] + 2 * padding < weight.shape[3]:
        raise _shape_error("conv2d", f"kernel {tuple(weight.shape[2:])} larger than input {tuple(x.shape[2:])}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def conv_transpose2d(x, weight, bias=None, stride: int = 1):
    if x.dim() != 4 or weight.dim() != 4:
        raise _shape_error("conv_transpose2d", "expects [B, C, H, W] input and [C, O, kh, kw] kernel")
    if x.shape[1] != weight.shape[0]:
        raise _shape_error("conv_transpose2d", f"input channels {x.shape[1]} != kernel channels {weight.shape[0]}")
    return F.conv_transpose2d(x, weight, bias, stride=stride)


def pad2d(x, pad_h: int, pad_w: int):
    """Zero-pad the bottom/right of the two spatial axes of ``[B, H, W, C]``."""
    if pad_h == 0 and pad_w == 0:
        return x
    return F.pad(x, (0, 0, 0, pad_w, 0, pad_h))


def window_partition(x, window: int, shift: int = 0):
    """``[B, H, W, C]`` -> ``[B * nW, window * window, C]`` with optional cyclic shift."""
    if x.dim() != 4:
        raise _shape_error("window_partition", f"expects [B, H, W, C], got {tuple(x.shape)}")
    b, h, w, c = x.shape
    if h % window or w % window:
        raise _shape_error("window_partition", f"window {window} does not divide {h}x{w}")
    if shift:
        x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
    x = x.reshape(b, h // window, window, w // window, window, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, window * window, c)


def window_reverse(windows, window: int, h: int, w: int, shift: int = 0):
    """Inverse of :func:`window_partition`."""
    if h % window or w % window:
        raise _shape_error("window_reverse", f"window {window} does not divide {h}x{w}")
    c = windows.shape[-1]
    n_win = (h // window) * (w // window)
    if windows.shape[0] % n_win or windows.shape[1] != window * window:
        raise _shape_error("window_reverse", f"{tuple(windows.shape)} is not a window stack for {h}x{w}")
    b = windows.shape[0] // n_win
    x = windows.reshape(b, h // window, w // window, window, window, c)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c)
    if shift:
        x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
    return x


def shifted_window_mask(h: int, w: int, window: int, shift: int) -> torch.Tensor | None:
    """Additive mask ``[nW, N, N]`` that stops attention across the wrap seam."""
    if shift == 0:
        return None
    region = torch.zeros(1, h, w, 1, dtype=DTYPE)
    count = 0
    bands = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    for hs in bands:
        for ws in bands:
            region[:, hs, ws, :] = count
            count += 1
    ids = window_partition(region, window).squeeze(-1)
    diff = ids[:, None, :] - ids[:, :, None]
    return torch.where(diff != 0, torch.tensor(MASK_NEG, dtype=DTYPE), torch.tensor(0.0, dtype=DTYPE))


def attention(q, k, v, bias=None, mask=None):
    """Scaled dot-product attention over ``[..., heads, N, d]``.

    ``bias`` broadcasts against the ``[..., heads, N, N]`` logits; ``mask``
    is ``[nW, N, N]`` and is tiled over the leading window-batch axis.
    """
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise _shape_error("attention", f"q {tuple(q.shape)}, k {tuple(k.shape)}, v {tuple(v.shape)} disagree")
    scale = q.shape[-1] ** -0.5
    logits = matmul(q * scale, transpose(k, list(range(k.dim() - 2)) + [k.dim() - 1, k.dim() - 2]))
    if bias is not None:
        logits = add(logits, bias)
    if mask is not None:
        n_win = mask.shape[0]
        bw = logits.shape[0]
        if bw % n_win:
            raise _shape_error("attention", f"batch of {bw} windows is not a multiple of {n_win}")
        logits = logits.reshape(bw // n_win, n_win, *logits.shape[1:]) + mask[None, :, None]
        logits = logits.reshape(bw, *logits.shape[2:])
    return matmul(softmax(logits, dim=-1), v)


PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "mul": mul,
    "matmul": matmul,
    "concat": concat,
    "reshape": reshape,
    "transpose": transpose,
    "sum": sum,
    "mean": mean,
    "sqrt": sqrt,
    "log": log,
    "power": power,
    "sigmoid": sigmoid,
    "log_sigmoid": log_sigmoid,
    "gelu": gelu,
    "softmax": softmax,
    "linear": linear,
    "layer_norm": layer_norm,
    "conv2d": conv2d,
    "conv_transpose2d": conv_transpose2d,
    "pad2d": pad2d,
    "window_partition": window_partition,
    "window_reverse": window_reverse,
    "attention": attention,
}


def primitive_forward(op: str, inputs: Sequence, **attrs):
    try:
        fn = PRIMITIVES[op]
    except KeyError:
        raise ContractError(f"unknown primitive {op!r}") from None
    return fn(*inputs, **attrs)


def backward(root: torch.Tensor, wrt: Mapping[str, torch.Tensor] | Sequence[torch.Tensor]) -> dict:
    """Gradients of a scalar ``root`` with respect to ``wrt``.

    Returns ``{key: ndarray}``; inputs the root does not depend on (including
    through a detach) get exact zeros.
    """
    if root.numel() != 1:
        raise ContractError(f"backward needs a scalar root, got shape {tuple(root.shape)}")
    items = list(wrt.items()) if isinstance(wrt, Mapping) else list(enumerate(wrt))
    tracked = [(k, t) for k, t in items if t.requires_grad]
    grads = {k: np.zeros(tuple(t.shape)) for k, t in items}
    if tracked and root.requires_grad:
        out = torch.autograd.grad(root.reshape(()), [t for _, t in tracked], allow_unused=True, retain_graph=True)
        for (k, _), g in zip(tracked, out):
            if g is not None:
                grads[k] = g.detach().cpu().numpy().astype(np.float64)
    return grads


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    x,
    h: float = 1e-5,
    coords: Sequence[int] | None = None,
) -> float:
    """Max relative error between ``backward`` and central differences.

    The error per coordinate is ``|g_ad - g_fd| / max(1, |g_fd|)``. ``coords``
    restricts the finite-difference sweep to a subset of flat indices.
    """
    if h <= 0:
        raise ContractError("step h must be positive")
    x0 = value(x).detach()
    xv = x0.clone().requires_grad_(True)
    y = f(xv)
    if not torch.isfinite(y).all():
        raise NumericError("non-finite objective at the base point")
    g_ad = backward(y, [xv])[0].reshape(-1)
    flat = x0.reshape(-1)
    idx = range(flat.numel()) if coords is None else coords
    worst = 0.0
    with torch.no_grad():
        for i in idx:
            xp = flat.clone()
            xp[i] += h
            xm = flat.clone()
            xm[i] -= h
            fp = f(xp.reshape(x0.shape))
            fm = f(xm.reshape(x0.shape))
            if not (torch.isfinite(fp).all() and torch.isfinite(fm).all()):
                raise NumericError(f"non-finite objective while perturbing coordinate {i}")
            g_fd = float(fp - fm) / (2.0 * h)
            err = abs(g_ad[i] - g_fd) / max(1.0, abs(g_fd))
            worst = max(worst, err)
    return worst
