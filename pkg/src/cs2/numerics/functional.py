"""Differentiable layers and losses.

Image tensors are either unbatched ``(C, H, W)`` or batched ``(N, C, H, W)``;
every op returns the same rank it was given.
"""

from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DataError, ShapeError
from .tensor import Tensor, as_tensor

DEFAULT_EPS = 1e-5


def _batched(x: Tensor, op: str) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"{op}: expected (C,H,W) or (N,C,H,W), got shape {x.shape}")


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return y.reshape(y.shape[1:]) if squeeze else y


def conv2d(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    x = as_tensor(x)
    kernel = as_tensor(kernel)
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if padding < 0:
        raise ShapeError(f"conv2d: padding must be >= 0, got {padding}")
    xb, squeeze = _batched(x, "conv2d")
    if kernel.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be (C_out,C_in,kH,kW), got {kernel.shape}")
    n, c_in, h, w = xb.shape
    c_out, k_in, kh, kw = kernel.shape
    if k_in != c_in:
        raise ShapeError(f"conv2d: input has C_in={c_in} channels but kernel expects C_in={k_in}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} exceeds padded input {hp}x{wp} (H={h}, W={w}, padding={padding})"
        )
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != (C_out,)=({c_out},)")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xp = np.pad(xb.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xb.data
    windows = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # cols: (C_in*kH*kW, N*Ho*Wo)
    cols = windows.transpose(1, 4, 5, 0, 2, 3).reshape(c_in * kh * kw, n * ho * wo)
    wmat = kernel.data.reshape(c_out, -1)
    out = (wmat @ cols).reshape(c_out, n, ho, wo)
    if bias is not None:
        out += bias.data[:, None, None, None]
    out = out.transpose(1, 0, 2, 3)

    x_req = xb.requires_grad

    def backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(c_out, -1)
        gk = (gmat @ cols.T).reshape(kernel.shape)
        gx = None
        if x_req:
            gcols = (wmat.T @ gmat).reshape(c_in, kh, kw, n, ho, wo)
            gxp = np.zeros((n, c_in, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gcols[
                        :, i, j
                    ].transpose(1, 0, 2, 3)
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        if bias is None:
            return gx, gk
        return gx, gk, gmat.sum(axis=1)

    parents = (xb, kernel) if bias is None else (xb, kernel, as_tensor(bias))
    return _unbatch(Tensor._from_op(np.ascontiguousarray(out), parents, backward), squeeze)


def pad_edge(x: Tensor, padding: int) -> Tensor:
    """Replicate-pad the two spatial axes by ``padding`` pixels."""
    xb, squeeze = _batched(as_tensor(x), "pad_edge")
    if padding == 0:
        return x
    n, c, h, w = xb.shape
    rows = np.clip(np.arange(-padding, h + padding), 0, h - 1)
    cols = np.clip(np.arange(-padding, w + padding), 0, w - 1)
    out = xb.data[:, :, rows][:, :, :, cols]

    def backward(g):
        gr = np.zeros((n, c, h, g.shape[3]))
        np.add.at(gr, (slice(None), slice(None), rows), g)
        gx = np.zeros((n, c, h, w))
        np.add.at(gx, (slice(None), slice(None), slice(None), cols), gr)
        return (gx,)

    return _unbatch(Tensor._from_op(out, (xb,), backward), squeeze)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    xb, squeeze = _batched(as_tensor(x), "upsample_nearest")
    n, c, h, w = xb.shape
    out = np.repeat(np.repeat(xb.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _unbatch(Tensor._from_op(out, (xb,), backward), squeeze)


def _channel_stats(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = a.mean(axis=(2, 3), keepdims=True)
    var = ((a - mean) ** 2).mean(axis=(2, 3), keepdims=True)
    return mean, var


def instance_norm(x: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """Per-channel standardization with population variance: (x - mean) / sqrt(var + eps)."""
    xb, squeeze = _batched(as_tensor(x), "instance_norm")
    if xb.shape[2] * xb.shape[3] < 1:
        raise ShapeError("instance_norm: empty spatial extent")
    mean, var = _channel_stats(xb.data)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xb.data - mean) * inv

    def backward(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gxm = (g * xhat).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return _unbatch(Tensor._from_op(xhat, (xb,), backward), squeeze)


def adain(content: Tensor, style: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """Adaptive instance normalization.

    ``out = std_s * (c - mean_c) / sqrt(max(var_c, eps)) + mean_s`` per
    channel. ``eps`` is a floor on the content variance rather than an
    additive term, so ``adain(x, x)`` returns ``x`` and a constant style
    channel yields a constant output.
    """
    cb, squeeze = _batched(as_tensor(content), "adain")
    sb, _ = _batched(as_tensor(style), "adain")
    if cb.shape[:2] != sb.shape[:2]:
        raise ShapeError(
            f"adain: content (N,C)={cb.shape[:2]} does not match style (N,C)={sb.shape[:2]}"
        )
    c, s = cb.data, sb.data
    mu_c, var_c = _channel_stats(c)
    mu_s, var_s = _channel_stats(s)
    floored = var_c < eps
    sigma_c = np.sqrt(np.where(floored, eps, var_c))
    sigma_s = np.sqrt(var_s)
    xhat = (c - mu_c) / sigma_c
    out = sigma_s * xhat + mu_s
    m_s = s.shape[2] * s.shape[3]

    def backward(g):
        gxhat = g * sigma_s
        gm = gxhat.mean(axis=(2, 3), keepdims=True)
        gxm = (gxhat * xhat).mean(axis=(2, 3), keepdims=True)
        # with a floored sigma, the normalizer is constant in c
        gc = (gxhat - gm - np.where(floored, 0.0, xhat * gxm)) / sigma_c
        g_sigma_s = (g * xhat).sum(axis=(2, 3), keepdims=True)
        g_mu_s = g.sum(axis=(2, 3), keepdims=True)
        safe = np.where(sigma_s > 0, sigma_s, 1.0)
        dsig = np.where(sigma_s > 0, (s - mu_s) / (m_s * safe), 0.0)
        gs = g_mu_s / m_s + g_sigma_s * dsig
        return gc, gs

    return _unbatch(Tensor._from_op(out, (cb, sb), backward), squeeze)


def channel_stats(x: Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Per-channel (mean, population std) of a (C,H,W) or (N,C,H,W) array; no grad."""
    data = as_tensor(x).data
    a = data[None] if data.ndim == 3 else data
    mean, var = _channel_stats(a)
    mean, std = mean[..., 0, 0], np.sqrt(var[..., 0, 0])
    return (mean[0], std[0]) if data.ndim == 3 else (mean, std)


def log_softmax(x: Tensor, axis: int) -> Tensor:
    a = x.data
    shifted = a - a.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return Tensor._from_op(out, (x,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def cross_entropy(logits: Tensor, targets: np.ndarray, class_axis: Optional[int] = None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under softmax(logits).

    The class axis defaults to 0 for (M,H,W) logits and 1 otherwise, which
    covers (N,M,H,W) maps and (P,M) rows.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    if class_axis is None:
        class_axis = 0 if logits.ndim == 3 else 1
    n_classes = logits.shape[class_axis]
    expected = logits.shape[:class_axis] + logits.shape[class_axis + 1 :]
    if targets.shape != expected:
        raise ShapeError(f"cross_entropy: targets shape {targets.shape} != logits shape minus class axis {expected}")
    bad = (targets < 0) | (targets >= n_classes)
    if bad.any():
        where = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(
            f"cross_entropy: label {int(targets[where])} at position {where} outside [0, {n_classes})"
        )
    logp = log_softmax(logits, axis=class_axis)
    idx = np.expand_dims(targets.astype(np.intp), class_axis)
    picked = np.take_along_axis(logp.data, idx, axis=class_axis)
    count = targets.size
    shape = logp.shape

    def backward(g):
        grad = np.zeros(shape)
        np.put_along_axis(grad, idx, -float(g) / count, axis=class_axis)
        return (grad,)

    return Tensor._from_op(np.array(-picked.sum() / count), (logp,), backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    count = diff.size

    def backward(g):
        ga = (2.0 * float(g) / count) * diff
        return ga, -ga

    return Tensor._from_op(np.array(np.mean(diff * diff)), (a, b), backward)


def gram(x: Tensor) -> Tensor:
    """Channel Gram matrices normalized by spatial size: (N,C,C) or (C,C)."""
    xb, squeeze = _batched(as_tensor(x), "gram")
    n, c, h, w = xb.shape
    f = xb.data.reshape(n, c, h * w)
    out = np.einsum("nip,njp->nij", f, f) / (h * w)

    def backward(g):
        sym = g + g.transpose(0, 2, 1)
        return ((np.einsum("nij,njp->nip", sym, f) / (h * w)).reshape(n, c, h, w),)

    result = Tensor._from_op(out, (xb,), backward)
    return result.reshape(out.shape[1:]) if squeeze else result


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = x @ weight
    return out + bias if bias is not None else out
