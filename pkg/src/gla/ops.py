"""Differentiable operators over :class:`~gla.tensor.Tensor`.

Feature maps use the (N, C, H, W) layout throughout. Elementwise ops demand
identical shapes; the only broadcasting op is
:func:`broadcast_partition_weights`.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from gla import kernels
from gla.tensor import ShapeError, Tensor, record

_AXES = ("N", "C", "H", "W")


def _same_shape(op: str, *ts: Tensor):
    ref = ts[0].shape
    for t in ts[1:]:
        if t.shape != ref:
            if len(t.shape) != len(ref):
                raise ShapeError(f"{op}: rank mismatch {ref} vs {t.shape}")
            axis = next(i for i, (a, b) in enumerate(zip(ref, t.shape)) if a != b)
            name = _AXES[axis] if len(ref) == 4 else str(axis)
            raise ShapeError(f"{op}: extent mismatch on axis {name}: {ref} vs {t.shape}")


def _need4(op: str, t: Tensor):
    if t.ndim != 4:
        raise ShapeError(f"{op}: expected (N, C, H, W) input, got shape {t.shape}")


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    (out,) = record("add", (a, b), [a.data + b.data], lambda g: (g[0], g[0]))
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    (out,) = record("sub", (a, b), [a.data - b.data], lambda g: (g[0], -g[0]))
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    (out,) = record("mul", (a, b), [ad * bd], lambda g: (g[0] * bd, g[0] * ad))
    return out


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    (out,) = record("scale", (a,), [a.data * c], lambda g: (g[0] * c,))
    return out


def add_n(ts: Sequence[Tensor]) -> Tensor:
    """Sum of several same-shape tensors, accumulated left to right."""
    _same_shape("add_n", *ts)
    acc = ts[0].data.copy()
    for t in ts[1:]:
        acc += t.data
    return record("add_n", tuple(ts), [acc], lambda g: tuple(g[0] for _ in ts))[0]


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    (out,) = record("relu", (x,), [np.where(mask, x.data, x.dtype.type(0))], lambda g: (g[0] * mask,))
    return out


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    (out,) = record(
        "sum", (x,), [np.asarray(x.data.sum(), dtype=x.dtype)], lambda g: (np.broadcast_to(g[0], shape).copy(),)
    )
    return out


def concat_channels(ts: Sequence[Tensor]) -> Tensor:
    for t in ts:
        _need4("concat_channels", t)
    ref = ts[0].shape
    for t in ts[1:]:
        for ax in (0, 2, 3):
            if t.shape[ax] != ref[ax]:
                raise ShapeError(f"concat_channels: extent mismatch on axis {_AXES[ax]}: {ref} vs {t.shape}")
    splits = np.cumsum([t.shape[1] for t in ts])[:-1]
    (out,) = record(
        "concat_channels",
        tuple(ts),
        [np.concatenate([t.data for t in ts], axis=1)],
        lambda g: tuple(np.split(g[0], splits, axis=1)),
    )
    return out


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------


# Convolution forward passes accumulate in double precision and round once,
# so single-precision outputs are the correctly rounded sums.
_ACC = np.float64


def _finish(out: np.ndarray, b: Optional[Tensor], dtype) -> np.ndarray:
    if b is not None:
        out += b.data[None, :, None, None]
    return np.ascontiguousarray(out, dtype=dtype)


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with zero padding; weight layout (Cout, Cin, kh, kw)."""
    _need4("conv2d", x)
    if w.ndim != 4:
        raise ShapeError(f"conv2d: weight must be (Cout, Cin, kh, kw), got {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: extent mismatch on axis C: input has {cin} channels, weight expects {wcin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise ValueError("conv2d: stride must be >= 1 and pad >= 0")
    hp, wp = h + 2 * pad, wd + 2 * pad
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
    if (hp - kh) % stride or (wp - kw) % stride:
        raise ShapeError(f"conv2d: output extent not integral for H={h}, W={wd}, k={kh}x{kw}, stride={stride}, pad={pad}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    xd, wdat = x.data, w.data
    inputs = (x, w) if b is None else (x, w, b)

    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        w2 = wdat.reshape(cout, cin)
        xf = xd.reshape(n, cin, h * wd)
        out = np.matmul(w2.astype(_ACC), xf.astype(_ACC)).reshape(n, cout, h, wd)
        out = _finish(out, b, xd.dtype)

        def bw1(g):
            gf = g[0].reshape(n, cout, h * wd)
            gx = np.matmul(w2.T, gf).reshape(x.shape) if x.requires_grad else None
            gw = np.matmul(gf, xf.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
            res = [gx, gw]
            if b is not None:
                res.append(g[0].sum(axis=(0, 2, 3)))
            return res

        return record("conv2d", inputs, [out], bw1)[0]

    if stride == 1:
        return _conv2d_flat(x, w, b, pad, ho, wo)

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.einsum("nchwij,ocij->nohw", win.astype(_ACC), wdat.astype(_ACC), optimize=True)
    out = _finish(out, b, xd.dtype)
    w2 = wdat.reshape(cout, cin * kh * kw)

    def bw(g):
        go = g[0]
        gw = np.einsum("nohw,nchwij->ocij", go, win, optimize=True) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(w2.T, go.reshape(n, cout, ho * wo)).reshape(n, cin, kh, kw, ho, wo)
            gxp = np.zeros((n, cin, hp, wp), dtype=xd.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gcols[
                        :, :, i, j
                    ]
            gx = np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + wd]) if pad else gxp
        res = [gx, gw]
        if b is not None:
            res.append(go.sum(axis=(0, 2, 3)))
        return res

    return record("conv2d", inputs, [out], bw)[0]


def _conv2d_flat(x: Tensor, w: Tensor, b: Optional[Tensor], pad: int, ho: int, wo: int) -> Tensor:
    """Stride-1 convolution on row-flattened padded input.

    With the padded image flattened to ``hp * wp`` values, kernel tap (i, j)
    reads the contiguous slice starting at ``i * wp + j``. Outputs are
    computed on a ``ho x wp`` grid and the ``wp - wo`` wrap-around columns
    are dropped, so one matmul per sample covers all taps.
    """
    xd, wdat = x.data, w.data
    n, cin, h, wd = xd.shape
    cout, _, kh, kw = wdat.shape
    hp, wp = h + 2 * pad, wd + 2 * pad
    q = ho * wp
    flat_len = hp * wp + kw - 1
    offsets = [i * wp + j for i in range(kh) for j in range(kw)]
    xf = np.zeros((n, cin, flat_len), dtype=_ACC)
    xf[:, :, : hp * wp].reshape(n, cin, hp, wp)[:, :, pad : pad + h, pad : pad + wd] = xd
    cols = np.empty((n, cin, kh * kw, q), dtype=_ACC)
    for k, off in enumerate(offsets):
        cols[:, :, k] = xf[:, :, off : off + q]
    cols = cols.reshape(n, cin * kh * kw, q)
    w2 = wdat.reshape(cout, cin * kh * kw)
    out = np.matmul(w2.astype(_ACC), cols).reshape(n, cout, ho, wp)[..., :wo]
    out = _finish(out, b, xd.dtype)
    inputs = (x, w) if b is None else (x, w, b)

    def bw(g):
        go = g[0]
        if wp == wo:
            gq = go.reshape(n, cout, q)
        else:
            gq = np.zeros((n, cout, ho, wp), dtype=go.dtype)
            gq[..., :wo] = go
            gq = gq.reshape(n, cout, q)
        gw = None
        if w.requires_grad:
            gw = np.matmul(gq.astype(_ACC), cols.transpose(0, 2, 1)).sum(axis=0).reshape(wdat.shape).astype(wdat.dtype)
        gx = None
        if x.requires_grad:
            gc = np.matmul(w2.T, gq).reshape(n, cin, kh * kw, q)
            gxf = np.zeros((n, cin, flat_len), dtype=go.dtype)
            for k, off in enumerate(offsets):
                gxf[:, :, off : off + q] += gc[:, :, k]
            gx = np.ascontiguousarray(gxf[:, :, : hp * wp].reshape(n, cin, hp, wp)[:, :, pad : pad + h, pad : pad + wd])
        res = [gx, gw]
        if b is not None:
            res.append(go.sum(axis=(0, 2, 3)))
        return res

    return record("conv2d", inputs, [out], bw)[0]


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Optional[np.ndarray],
    running_var: Optional[np.ndarray],
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over (N, H, W).

    In training mode the running statistics (when given) are updated in place:
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    _need4("batchnorm2d", x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: extent mismatch on axis C: input has {c}, gamma {gamma.shape}, beta {beta.shape}")
    if eps <= 0:
        raise ValueError("batchnorm2d: eps must be positive")
    xd = np.ascontiguousarray(x.data)
    if training:
        out, xhat, mean, var, invstd = kernels.bn_forward(xd, gamma.data, beta.data, float(eps))
        if running_mean is not None:
            running_mean *= momentum
            running_mean += (1 - momentum) * mean
            running_var *= momentum
            running_var += (1 - momentum) * var

        def bw(g):
            gx, ggamma, gbeta = kernels.bn_backward(np.ascontiguousarray(g[0]), xhat, gamma.data, invstd)
            return gx, ggamma.astype(gamma.dtype), gbeta.astype(beta.dtype)

    else:
        if running_mean is None or running_var is None:
            raise ValueError("batchnorm2d: eval mode requires running statistics")
        invstd = (1.0 / np.sqrt(running_var.astype(np.float64) + eps)).astype(xd.dtype)
        scale = gamma.data * invstd
        shift = beta.data - running_mean.astype(xd.dtype) * scale
        out = xd * scale[None, :, None, None] + shift[None, :, None, None]

        def bw(g):
            go = g[0]
            xhat = (xd - running_mean.astype(xd.dtype)[None, :, None, None]) * invstd[None, :, None, None]
            return go * scale[None, :, None, None], (go * xhat).sum(axis=(0, 2, 3)), go.sum(axis=(0, 2, 3))

    return record("batchnorm2d", (x, gamma, beta), [out], bw)[0]


# --------------------------------------------------------------------------
# pooling and partitions
# --------------------------------------------------------------------------


def avg_pool3x3(x: Tensor) -> Tensor:
    """3x3 average pool, stride 1, zero pad 1, divisor always 9."""
    _need4("avg_pool3x3", x)
    ninth = x.dtype.type(1.0 / 9.0)
    out = kernels.box3_sum(np.ascontiguousarray(x.data)) * ninth
    return record("avg_pool3x3", (x,), [out], lambda g: (kernels.box3_sum(np.ascontiguousarray(g[0])) * ninth,))[0]


def partition_avg_pool(x: Tensor, rows: int, cols: int) -> Tensor:
    """Mean over each cell of an adaptive ``rows x cols`` grid."""
    _need4("partition_avg_pool", x)
    h, w = x.shape[2], x.shape[3]
    if not (1 <= rows <= h) or not (1 <= cols <= w):
        raise ShapeError(f"partition_avg_pool: grid {rows}x{cols} does not fit feature extent {h}x{w}")
    rb = kernels.partition_bounds(h, rows)
    cb = kernels.partition_bounds(w, cols)
    counts = np.outer(np.diff(rb), np.diff(cb)).astype(x.dtype)
    out = kernels.partition_sum(np.ascontiguousarray(x.data), rb, cb) / counts

    def bw(g):
        return (kernels.partition_expand(np.ascontiguousarray(g[0] / counts), rb, cb),)

    return record("partition_avg_pool", (x,), [out], bw)[0]


def broadcast_partition_weights(v: Tensor, h: int, w: int) -> Tensor:
    """Piecewise-constant upsampling of a partition grid to ``h x w`` pixels."""
    _need4("broadcast_partition_weights", v)
    rows, cols = v.shape[2], v.shape[3]
    if not (1 <= rows <= h) or not (1 <= cols <= w):
        raise ShapeError(f"broadcast_partition_weights: grid {rows}x{cols} does not fit extent {h}x{w}")
    rb = kernels.partition_bounds(h, rows)
    cb = kernels.partition_bounds(w, cols)
    out = kernels.partition_expand(np.ascontiguousarray(v.data), rb, cb)
    return record(
        "broadcast_partition_weights",
        (v,),
        [out],
        lambda g: (kernels.partition_sum(np.ascontiguousarray(g[0]), rb, cb),),
    )[0]


# --------------------------------------------------------------------------
# softmax across modalities
# --------------------------------------------------------------------------


def modality_softmax(logits: Sequence[Tensor]) -> list[Tensor]:
    """Softmax across a list of same-shape tensors at every coordinate.

    Gradient uses ``w_m * sum_k w_k (g_m - g_k)``, which equals the usual
    ``w_m (g_m - sum_k w_k g_k)`` when the weights sum to one and is exactly
    zero whenever the upstream gradients agree across modalities.
    """
    if len(logits) < 1:
        raise ShapeError("modality_softmax: empty stack")
    _same_shape("modality_softmax", *logits)
    mx = logits[0].data.copy()
    for t in logits[1:]:
        np.maximum(mx, t.data, out=mx)
    exps = [np.exp(t.data - mx) for t in logits]
    denom = exps[0].copy()
    for e in exps[1:]:
        denom += e
    weights = [e / denom for e in exps]

    def bw(g):
        res = []
        for m, wm in enumerate(weights):
            acc = np.zeros_like(wm)
            for k, wk in enumerate(weights):
                if k != m:
                    acc += wk * (g[m] - g[k])
            res.append(wm * acc)
        return res

    return record("modality_softmax", tuple(logits), weights, bw)
