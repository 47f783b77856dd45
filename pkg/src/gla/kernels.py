"""Loop-structured numeric kernels with two interchangeable backends.

Every kernel exists twice: a numba ``@njit`` version (``nb_*``) and a
pure-numpy version (``np_*``). The public name is bound at import time:
numba is used unless ``GLA_DISABLE_NUMBA=1`` is set or numba is missing.
Both backends are deterministic; they are not guaranteed bit-identical to
each other (summation order differs), only to themselves.

Dense convolution is not here: it is a BLAS contraction in both backends
(see :mod:`gla.ops`).
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        return wrap


USE_NUMBA = HAVE_NUMBA and os.environ.get("GLA_DISABLE_NUMBA", "0") not in ("1", "true", "yes")
BACKEND = "numba" if USE_NUMBA else "numpy"


def partition_bounds(n: int, parts: int) -> np.ndarray:
    """Adaptive boundaries ``floor(i * n / parts)`` for ``i = 0..parts``."""
    if parts < 1 or parts > n:
        raise ValueError(f"cannot split extent {n} into {parts} partitions")
    return (np.arange(parts + 1, dtype=np.int64) * n) // parts


# --------------------------------------------------------------------------
# partition sum / expand
# --------------------------------------------------------------------------


@njit(cache=True)
def nb_partition_sum(x, rb, cb):
    n, c, h, w = x.shape
    rows = rb.shape[0] - 1
    cols = cb.shape[0] - 1
    out = np.zeros((n, c, rows, cols), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(rows):
                for j in range(cols):
                    acc = 0.0
                    for y in range(rb[i], rb[i + 1]):
                        for xx in range(cb[j], cb[j + 1]):
                            acc += x[b, ch, y, xx]
                    out[b, ch, i, j] = acc
    return out


def np_partition_sum(x, rb, cb):
    s = np.add.reduceat(x, rb[:-1], axis=2)
    return np.add.reduceat(s, cb[:-1], axis=3)


@njit(cache=True)
def nb_partition_expand(v, rb, cb):
    n, c, rows, cols = v.shape
    h = rb[rows]
    w = cb[cols]
    out = np.empty((n, c, h, w), dtype=v.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(rows):
                for j in range(cols):
                    val = v[b, ch, i, j]
                    for y in range(rb[i], rb[i + 1]):
                        for xx in range(cb[j], cb[j + 1]):
                            out[b, ch, y, xx] = val
    return out


def np_partition_expand(v, rb, cb):
    out = np.repeat(v, np.diff(rb), axis=2)
    return np.repeat(out, np.diff(cb), axis=3)


# --------------------------------------------------------------------------
# 3x3 zero-padded window sum (stride 1); self-adjoint, used for avg pooling
# --------------------------------------------------------------------------


@njit(cache=True)
def nb_box3_sum(x):
    # separable: vertical 3-tap, then horizontal 3-tap (same order as numpy)
    n, c, h, w = x.shape
    out = np.empty_like(x)
    rows = np.empty(w, dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for y in range(h):
                for xx in range(w):
                    v = x[b, ch, y, xx]
                    if y > 0:
                        v = x[b, ch, y - 1, xx] + v
                    if y + 1 < h:
                        v = v + x[b, ch, y + 1, xx]
                    rows[xx] = v
                for xx in range(w):
                    v = rows[xx]
                    if xx > 0:
                        v = rows[xx - 1] + v
                    if xx + 1 < w:
                        v = v + rows[xx + 1]
                    out[b, ch, y, xx] = v
    return out


def np_box3_sum(x):
    p = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    h, w = x.shape[2], x.shape[3]
    rows = p[:, :, 0:h, :] + p[:, :, 1 : h + 1, :] + p[:, :, 2 : h + 2, :]
    return rows[:, :, :, 0:w] + rows[:, :, :, 1 : w + 1] + rows[:, :, :, 2 : w + 2]


# --------------------------------------------------------------------------
# box geometry
# --------------------------------------------------------------------------


@njit(cache=True)
def nb_iou_matrix(a, b):
    na = a.shape[0]
    nbx = b.shape[0]
    out = np.zeros((na, nbx), dtype=np.float64)
    for i in range(na):
        aw = a[i, 2] - a[i, 0]
        ah = a[i, 3] - a[i, 1]
        area_a = aw * ah
        for j in range(nbx):
            iw = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
            if iw <= 0.0:
                continue
            ih = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
            if ih <= 0.0:
                continue
            inter = iw * ih
            area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
            out[i, j] = inter / (area_a + area_b - inter)
    return out


def np_iou_matrix(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=inter > 0)
    return out


@njit(cache=True)
def nb_nms_sorted(boxes, thr):
    """Greedy NMS over boxes already sorted by descending score."""
    n = boxes.shape[0]
    suppressed = np.zeros(n, dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    nk = 0
    for i in range(n):
        if suppressed[i]:
            continue
        keep[nk] = i
        nk += 1
        area_i = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
        for j in range(i + 1, n):
            if suppressed[j]:
                continue
            iw = min(boxes[i, 2], boxes[j, 2]) - max(boxes[i, 0], boxes[j, 0])
            if iw <= 0.0:
                continue
            ih = min(boxes[i, 3], boxes[j, 3]) - max(boxes[i, 1], boxes[j, 1])
            if ih <= 0.0:
                continue
            inter = iw * ih
            area_j = (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1])
            if inter / (area_i + area_j - inter) > thr:
                suppressed[j] = True
    return keep[:nk]


def np_nms_sorted(boxes, thr):
    boxes = np.asarray(boxes, dtype=np.float64)
    x1, y1, x2, y2 = boxes.T
    areas = (x2 - x1) * (y2 - y1)
    order = np.arange(boxes.shape[0])
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        iw = np.clip(np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]), 0.0, None)
        ih = np.clip(np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]), 0.0, None)
        inter = iw * ih
        ovr = inter / (areas[i] + areas[rest] - inter)
        order = rest[ovr <= thr]
    return np.asarray(keep, dtype=np.int64)


# --------------------------------------------------------------------------
# sigmoid focal loss: fused value + gradient
# --------------------------------------------------------------------------


@njit(cache=True)
def nb_focal(logits, targets, weights, alpha, gamma):
    flat = logits.ravel()
    t = targets.ravel()
    wt = weights.ravel()
    grad = np.zeros(flat.shape[0], dtype=logits.dtype)
    total = 0.0
    for i in range(flat.shape[0]):
        if wt[i] == 0:
            continue
        if t[i] > 0.5:
            z = np.float64(flat[i])
            a_t = alpha
            sgn = 1.0
        else:
            z = -np.float64(flat[i])
            a_t = 1.0 - alpha
            sgn = -1.0
        # log sigmoid(z), sigmoid(z), sigmoid(-z) in stable form
        if z >= 0.0:
            e = np.exp(-z)
            log_p = -np.log1p(e)
            p = 1.0 / (1.0 + e)
            q = e / (1.0 + e)
        else:
            e = np.exp(z)
            log_p = z - np.log1p(e)
            p = e / (1.0 + e)
            q = 1.0 / (1.0 + e)
        qg = q * q if gamma == 2.0 else q**gamma
        total += wt[i] * (-a_t * qg * log_p)
        grad[i] = wt[i] * sgn * a_t * qg * (gamma * p * log_p - q)
    return total, grad.reshape(logits.shape)


def np_focal(logits, targets, weights, alpha, gamma):
    x = logits.astype(np.float64)
    sgn = np.where(targets > 0.5, 1.0, -1.0)
    z = sgn * x
    a_t = np.where(targets > 0.5, alpha, 1.0 - alpha)
    log_p = -np.logaddexp(0.0, -z)
    log_q = -np.logaddexp(0.0, z)
    p = np.exp(log_p)
    q = np.exp(log_q)
    qg = q**gamma
    total = float(np.sum(weights * (-a_t * qg * log_p)))
    grad = weights * sgn * a_t * qg * (gamma * p * log_p - q)
    return total, grad.astype(logits.dtype)


# --------------------------------------------------------------------------
# batch normalization (training mode): fused statistics + affine
# --------------------------------------------------------------------------


@njit(cache=True)
def nb_bn_forward(x, gamma, beta, eps):
    n, c, h, w = x.shape
    m = n * h * w
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    mean = np.zeros(c)
    var = np.zeros(c)
    invstd = np.zeros(c)
    for ch in range(c):
        acc = 0.0
        for b in range(n):
            for y in range(h):
                for xx in range(w):
                    acc += x[b, ch, y, xx]
        mu = acc / m
        acc = 0.0
        for b in range(n):
            for y in range(h):
                for xx in range(w):
                    d = x[b, ch, y, xx] - mu
                    acc += d * d
        v = acc / m
        s = 1.0 / np.sqrt(v + eps)
        mean[ch] = mu
        var[ch] = v
        invstd[ch] = s
        g = gamma[ch]
        bb = beta[ch]
        for b in range(n):
            for y in range(h):
                for xx in range(w):
                    t = (x[b, ch, y, xx] - mu) * s
                    xhat[b, ch, y, xx] = t
                    out[b, ch, y, xx] = t * g + bb
    return out, xhat, mean, var, invstd


def np_bn_forward(x, gamma, beta, eps):
    xd = x.astype(np.float64)
    mean = xd.mean(axis=(0, 2, 3))
    xc = xd - mean[None, :, None, None]
    var = (xc * xc).mean(axis=(0, 2, 3))
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * invstd[None, :, None, None]
    out = xhat * gamma.astype(np.float64)[None, :, None, None] + beta.astype(np.float64)[None, :, None, None]
    return out.astype(x.dtype), xhat.astype(x.dtype), mean, var, invstd


@njit(cache=True)
def nb_bn_backward(go, xhat, gamma, invstd):
    n, c, h, w = go.shape
    m = n * h * w
    gx = np.empty_like(go)
    ggamma = np.zeros(c)
    gbeta = np.zeros(c)
    for ch in range(c):
        s_g = 0.0
        s_gx = 0.0
        for b in range(n):
            for y in range(h):
                for xx in range(w):
                    g = go[b, ch, y, xx]
                    s_g += g
                    s_gx += g * xhat[b, ch, y, xx]
        gbeta[ch] = s_g
        ggamma[ch] = s_gx
        k = gamma[ch] * invstd[ch] / m
        for b in range(n):
            for y in range(h):
                for xx in range(w):
                    gx[b, ch, y, xx] = k * (m * go[b, ch, y, xx] - s_g - xhat[b, ch, y, xx] * s_gx)
    return gx, ggamma, gbeta


def np_bn_backward(go, xhat, gamma, invstd):
    m = go.shape[0] * go.shape[2] * go.shape[3]
    g64 = go.astype(np.float64)
    xh = xhat.astype(np.float64)
    gbeta = g64.sum(axis=(0, 2, 3))
    ggamma = (g64 * xh).sum(axis=(0, 2, 3))
    k = (gamma.astype(np.float64) * invstd / m)[None, :, None, None]
    gx = k * (m * g64 - gbeta[None, :, None, None] - xh * ggamma[None, :, None, None])
    return gx.astype(go.dtype), ggamma, gbeta


# --------------------------------------------------------------------------
# detection-head targets in (N, A*K, H, W) layout
# --------------------------------------------------------------------------


@njit(cache=True)
def nb_head_targets(labels, deltas, hf, wf, a, k, ignore):
    n = labels.shape[0]
    cls_t = np.zeros((n, a * k, hf, wf), dtype=np.float32)
    cls_w = np.zeros((n, a * k, hf, wf), dtype=np.float32)
    box_t = np.zeros((n, a * 4, hf, wf), dtype=np.float32)
    box_w = np.zeros((n, a * 4, hf, wf), dtype=np.float32)
    for b in range(n):
        for y in range(hf):
            for x in range(wf):
                for ai in range(a):
                    idx = (y * wf + x) * a + ai
                    lab = labels[b, idx]
                    if lab != ignore:
                        for kk in range(k):
                            cls_w[b, ai * k + kk, y, x] = 1.0
                    if lab >= 0:
                        cls_t[b, ai * k + lab, y, x] = 1.0
                        for j in range(4):
                            box_t[b, ai * 4 + j, y, x] = deltas[b, idx, j]
                            box_w[b, ai * 4 + j, y, x] = 1.0
    return cls_t, cls_w, box_t, box_w


def np_head_targets(labels, deltas, hf, wf, a, k, ignore):
    n = labels.shape[0]

    def layout(v):
        kk = v.shape[2]
        return np.ascontiguousarray(v.reshape(n, hf, wf, a, kk).transpose(0, 3, 4, 1, 2).reshape(n, a * kk, hf, wf))

    onehot = (labels[..., None] == np.arange(k)).astype(np.float32)
    valid = np.repeat((labels != ignore)[..., None], k, axis=2).astype(np.float32)
    pos = (labels >= 0)[..., None]
    box_w = np.repeat(pos, 4, axis=2).astype(np.float32)
    box_t = np.where(pos, deltas, 0.0).astype(np.float32)
    return layout(onehot), layout(valid), layout(box_t), layout(box_w)


# --------------------------------------------------------------------------
# weighted Huber (smooth L1): fused value + gradient
# --------------------------------------------------------------------------


@njit(cache=True)
def nb_huber(pred, target, weights, delta):
    p = pred.ravel()
    t = target.ravel()
    wt = weights.ravel()
    grad = np.zeros(p.shape[0], dtype=pred.dtype)
    total = 0.0
    for i in range(p.shape[0]):
        w = np.float64(wt[i])
        if w == 0:
            continue
        d = np.float64(p[i]) - np.float64(t[i])
        ad = abs(d)
        if ad <= delta:
            total += w * 0.5 * d * d
            grad[i] = w * d
        else:
            total += w * delta * (ad - 0.5 * delta)
            grad[i] = w * delta * (1.0 if d > 0 else -1.0)
    return total, grad.reshape(pred.shape)


def np_huber(pred, target, weights, delta):
    d = pred.astype(np.float64) - target.astype(np.float64)
    ad = np.abs(d)
    quad = ad <= delta
    per = np.where(quad, 0.5 * d * d, delta * (ad - 0.5 * delta))
    w = weights.astype(np.float64)
    total = float((per * w).sum())
    grad = np.where(quad, d, delta * np.sign(d)) * w
    return total, grad.astype(pred.dtype)


if USE_NUMBA:
    partition_sum = nb_partition_sum
    partition_expand = nb_partition_expand
    box3_sum = nb_box3_sum
    iou_matrix = nb_iou_matrix
    nms_sorted = nb_nms_sorted
    focal = nb_focal
    bn_forward = nb_bn_forward
    bn_backward = nb_bn_backward
    head_targets = nb_head_targets
    huber = nb_huber
else:
    partition_sum = np_partition_sum
    partition_expand = np_partition_expand
    box3_sum = np_box3_sum
    iou_matrix = np_iou_matrix
    nms_sorted = np_nms_sorted
    focal = np_focal
    bn_forward = np_bn_forward
    bn_backward = np_bn_backward
    head_targets = np_head_targets
    huber = np_huber
