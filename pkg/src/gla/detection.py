"""Dense single-stage anchor head, its losses, decoding and NMS."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from gla import kernels, ops
from gla.model import Conv2d, Module
from gla.tensor import Tensor, record

CLASS_NAMES = ("PassengerCar", "Pedestrian", "LargeVehicle", "RidableVehicle")
MAX_LOG_SCALE = math.log(1000.0)
NEGATIVE = -1
IGNORE = -2


class Difficulty(IntEnum):
    EASY = 0
    MODERATE = 1
    HARD = 2

    @property
    def label(self) -> str:
        return self.name.capitalize()

    @classmethod
    def parse(cls, token) -> "Difficulty":
        if isinstance(token, (int, np.integer)) or str(token).isdigit():
            return cls(int(token))
        return cls[str(token).upper()]


@dataclass
class BoxSet:
    """Boxes in corner form with class ids and either scores or difficulties."""

    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    scores: Optional[np.ndarray] = None
    difficulty: Optional[np.ndarray] = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        n = len(self.boxes)
        if len(self.classes) != n:
            raise ValueError(f"BoxSet: {n} boxes but {len(self.classes)} class ids")
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
            if len(self.scores) != n:
                raise ValueError("BoxSet: score count mismatch")
        if self.difficulty is not None:
            self.difficulty = np.asarray(self.difficulty, dtype=np.int64).reshape(-1)
            if len(self.difficulty) != n:
                raise ValueError("BoxSet: difficulty count mismatch")

    def __len__(self):
        return len(self.boxes)

    def subset(self, idx) -> "BoxSet":
        return BoxSet(
            self.boxes[idx],
            self.classes[idx],
            None if self.scores is None else self.scores[idx],
            None if self.difficulty is None else self.difficulty[idx],
        )


# --------------------------------------------------------------------------
# anchors and geometry
# --------------------------------------------------------------------------


@dataclass
class AnchorGrid:
    anchors: np.ndarray
    height: int
    width: int
    stride: float
    scales: tuple
    ratios: tuple

    @property
    def per_cell(self) -> int:
        return len(self.scales) * len(self.ratios)

    def __len__(self):
        return len(self.anchors)


def generate_anchors(hf: int, wf: int, stride: float, scales: Sequence[float], ratios: Sequence[float]) -> AnchorGrid:
    """Anchors ordered row-major over cells, then scales, then ratios."""
    if not len(scales) or not len(ratios):
        raise ValueError("generate_anchors: scales and ratios must be non-empty")
    if stride < 1:
        raise ValueError("generate_anchors: stride must be >= 1")
    sizes = np.array([(s * math.sqrt(r), s / math.sqrt(r)) for s in scales for r in ratios])  # (A, 2) w, h
    cy, cx = np.meshgrid((np.arange(hf) + 0.5) * stride, (np.arange(wf) + 0.5) * stride, indexing="ij")
    ctr = np.stack([cx.ravel(), cy.ravel()], axis=1)  # (cells, 2)
    half = sizes / 2.0
    lo = ctr[:, None, :] - half[None, :, :]
    hi = ctr[:, None, :] + half[None, :, :]
    anchors = np.concatenate([lo, hi], axis=2).reshape(-1, 4)
    return AnchorGrid(anchors, hf, wf, float(stride), tuple(scales), tuple(ratios))


def iou(a, b) -> float:
    return float(iou_matrix(np.asarray(a, dtype=np.float64)[None, :4], np.asarray(b, dtype=np.float64)[None, :4])[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.ascontiguousarray(b, dtype=np.float64).reshape(-1, 4)
    return kernels.iou_matrix(a, b)


def _center_size(boxes: np.ndarray):
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return boxes[:, 0] + 0.5 * w, boxes[:, 1] + 0.5 * h, w, h


def encode_boxes(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    ax, ay, aw, ah = _center_size(np.asarray(anchors, dtype=np.float64))
    gx, gy, gw, gh = _center_size(np.asarray(gts, dtype=np.float64))
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    ax, ay, aw, ah = _center_size(np.asarray(anchors, dtype=np.float64))
    d = np.asarray(deltas, dtype=np.float64)
    cx = ax + d[:, 0] * aw
    cy = ay + d[:, 1] * ah
    w = aw * np.exp(np.minimum(d[:, 2], MAX_LOG_SCALE))
    h = ah * np.exp(np.minimum(d[:, 3], MAX_LOG_SCALE))
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


# --------------------------------------------------------------------------
# training targets
# --------------------------------------------------------------------------


@dataclass
class TargetAssignment:
    labels: np.ndarray  # class id >= 0 positive, -1 negative, -2 ignore
    deltas: np.ndarray  # (A, 4); zero rows except for positives
    matched: np.ndarray  # gt index per anchor or -1

    @property
    def positive(self) -> np.ndarray:
        return self.labels >= 0


def assign_targets(
    anchors: np.ndarray, gt: BoxSet, pos_thr: float = 0.5, neg_thr: float = 0.4
) -> TargetAssignment:
    a = np.asarray(anchors, dtype=np.float64)
    n = len(a)
    labels = np.full(n, NEGATIVE, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    deltas = np.zeros((n, 4))
    if len(gt) == 0:
        return TargetAssignment(labels, deltas, matched)
    ious = iou_matrix(a, gt.boxes)
    best_gt = ious.argmax(axis=1)
    best = ious[np.arange(n), best_gt]
    labels[(best >= neg_thr) & (best < pos_thr)] = IGNORE
    pos = best >= pos_thr
    matched[pos] = best_gt[pos]
    # each gt claims its single best anchor (first on ties)
    for g in range(len(gt)):
        k = int(ious[:, g].argmax())
        if ious[k, g] > 0:
            matched[k] = g
            pos[k] = True
    labels[pos] = gt.classes[matched[pos]]
    deltas[pos] = encode_boxes(a[pos], gt.boxes[matched[pos]])
    return TargetAssignment(labels, deltas, matched)


def to_head_layout(per_anchor: np.ndarray, hf: int, wf: int, a: int) -> np.ndarray:
    """(N, H*W*A, K) anchor-major values -> (N, A*K, H, W) head channels."""
    n, _, k = per_anchor.shape
    return np.ascontiguousarray(per_anchor.reshape(n, hf, wf, a, k).transpose(0, 3, 4, 1, 2).reshape(n, a * k, hf, wf))


def from_head_layout(head: np.ndarray, a: int) -> np.ndarray:
    """(N, A*K, H, W) head channels -> (N, H*W*A, K)."""
    n, ak, hf, wf = head.shape
    k = ak // a
    return head.reshape(n, a, k, hf, wf).transpose(0, 3, 4, 1, 2).reshape(n, hf * wf * a, k)


@dataclass
class HeadTargets:
    cls_targets: np.ndarray  # (N, A*K, H, W) in {0, 1}
    cls_weights: np.ndarray  # (N, A*K, H, W): 0 on ignored anchors
    box_targets: np.ndarray  # (N, A*4, H, W)
    box_weights: np.ndarray  # (N, A*4, H, W): 1 on positives
    num_pos: int


def build_head_targets(assignments: Sequence[TargetAssignment], grid: AnchorGrid, num_classes: int) -> HeadTargets:
    """Stack per-image assignments into float32 head-layout targets."""
    labels = np.ascontiguousarray(np.stack([t.labels for t in assignments]), dtype=np.int64)
    deltas = np.ascontiguousarray(np.stack([t.deltas for t in assignments]), dtype=np.float64)
    cls_t, cls_w, box_t, box_w = kernels.head_targets(
        labels, deltas, grid.height, grid.width, grid.per_cell, num_classes, IGNORE
    )
    return HeadTargets(cls_t, cls_w, box_t, box_w, int((labels >= 0).sum()))


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def _float_array(a) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    return np.ascontiguousarray(a)


def sigmoid_focal_loss(
    logits: Tensor,
    targets: np.ndarray,
    weights: Optional[np.ndarray] = None,
    alpha: float = 0.25,
    gamma: float = 2.0,
    normalizer: Optional[float] = None,
) -> Tensor:
    """Sum of per-entry focal terms divided by max(1, number of positives)."""
    t = _float_array(targets)
    if t.shape != logits.shape:
        raise ValueError(f"focal loss: targets {t.shape} vs logits {logits.shape}")
    wts = np.ones_like(t) if weights is None else _float_array(weights)
    if normalizer is None:
        normalizer = max(1.0, float((t * wts).sum(dtype=np.float64)))
    total, grad = kernels.focal(np.ascontiguousarray(logits.data), t, wts, float(alpha), float(gamma))
    inv = 1.0 / normalizer
    value = np.asarray(total * inv, dtype=logits.dtype)
    grad = (grad * inv).astype(logits.dtype)
    return record("sigmoid_focal_loss", (logits,), [value], lambda g: (grad * g[0],))[0]


def huber_loss(
    pred: Tensor,
    target: np.ndarray,
    weights: Optional[np.ndarray] = None,
    delta: float = 1.0,
    normalizer: Optional[float] = None,
) -> Tensor:
    """Weighted smooth-L1: 0.5 d^2 inside ``delta``, linear outside."""
    if delta <= 0:
        raise ValueError("huber_loss: delta must be positive")
    tgt = np.asarray(target, dtype=pred.dtype)
    if tgt.shape != pred.shape:
        raise ValueError(f"huber loss: target {tgt.shape} vs prediction {pred.shape}")
    wts = np.ones_like(tgt) if weights is None else np.asarray(weights, dtype=pred.dtype)
    if normalizer is None:
        # four deltas per positive anchor
        normalizer = max(1.0, float(wts.sum()) / 4.0) if weights is not None else 1.0
    total, grad = kernels.huber(np.ascontiguousarray(pred.data), np.ascontiguousarray(tgt), np.ascontiguousarray(wts), float(delta))
    inv = 1.0 / normalizer
    value = np.asarray(total * inv, dtype=pred.dtype)
    grad = grad * pred.dtype.type(inv)
    return record("huber_loss", (pred,), [value], lambda g: (grad * g[0],))[0]


# --------------------------------------------------------------------------
# NMS
# --------------------------------------------------------------------------


def nms(boxes, scores, iou_thr: float = 0.7, classes=None) -> np.ndarray:
    """Greedy per-class suppression; returns kept original indices.

    A box is dropped when its IoU with an already kept box exceeds
    ``iou_thr``. Order is descending score, ties by lower index.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) != len(scores):
        raise ValueError(f"nms: {len(boxes)} boxes but {len(scores)} scores")
    if classes is None:
        classes = np.zeros(len(boxes), dtype=np.int64)
    classes = np.asarray(classes).reshape(-1)
    if len(classes) != len(boxes):
        raise ValueError("nms: class id count mismatch")
    order = np.argsort(-scores, kind="stable")
    kept = []
    for c in np.unique(classes):
        idx = order[classes[order] == c]
        keep = kernels.nms_sorted(np.ascontiguousarray(boxes[idx]), float(iou_thr))
        kept.append(idx[keep])
    if not kept:
        return np.zeros(0, dtype=np.int64)
    kept = np.concatenate(kept)
    return kept[np.lexsort((kept, -scores[kept]))]


# --------------------------------------------------------------------------
# head
# --------------------------------------------------------------------------


class DetectionHead(Module):
    def __init__(self, channels: int, anchors_per_cell: int, num_classes: int, rng, dtype=np.float32, prior=0.01):
        self.num_anchors = anchors_per_cell
        self.num_classes = num_classes
        self.trunk = Conv2d(channels, channels, 3, rng, dtype)
        self.cls = Conv2d(channels, anchors_per_cell * num_classes, 1, rng, dtype, std=0.01)
        self.cls.bias.data[:] = -math.log((1 - prior) / prior)
        self.reg = Conv2d(channels, anchors_per_cell * 4, 1, rng, dtype, std=0.01)

    def __call__(self, f: Tensor):
        t = ops.relu(self.trunk(f))
        return self.cls(t), self.reg(t)


def detection_loss(cls_logits: Tensor, box_deltas: Tensor, targets: HeadTargets, alpha=0.25, gamma=2.0, delta=1.0):
    norm = max(1.0, float(targets.num_pos))
    lc = sigmoid_focal_loss(cls_logits, targets.cls_targets, targets.cls_weights, alpha, gamma, normalizer=norm)
    lb = huber_loss(box_deltas, targets.box_targets, targets.box_weights, delta, normalizer=norm)
    return ops.add(lc, lb), lc, lb


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def detect(
    cls_logits: np.ndarray,
    box_deltas: np.ndarray,
    grid: AnchorGrid,
    image_size: tuple,
    score_thr: float = 0.05,
    nms_thr: float = 0.7,
    topk: int = 100,
) -> BoxSet:
    """Decode one image's head outputs, (A*K, H, W) and (A*4, H, W)."""
    a = grid.per_cell
    scores = _sigmoid(from_head_layout(np.asarray(cls_logits, dtype=np.float64)[None], a)[0])  # (A_total, K)
    deltas = from_head_layout(np.asarray(box_deltas, dtype=np.float64)[None], a)[0]
    anc_idx, cls_idx = np.nonzero(scores > score_thr)
    if len(anc_idx) == 0:
        return BoxSet(scores=np.zeros(0))
    sc = scores[anc_idx, cls_idx]
    boxes = decode_boxes(grid.anchors[anc_idx], deltas[anc_idx])
    h, w = image_size
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0.0, w)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0.0, h)
    ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    boxes, sc, cls_idx = boxes[ok], sc[ok], cls_idx[ok]
    keep = nms(boxes, sc, nms_thr, cls_idx)[:topk]
    return BoxSet(boxes[keep], cls_idx[keep], sc[keep])


# --------------------------------------------------------------------------
# text formats
# --------------------------------------------------------------------------


def format_detection_line(frame_id: int, cls: int, score: float, box) -> str:
    return f"{frame_id} {cls} {score:.6f} {box[0]:.6f} {box[1]:.6f} {box[2]:.6f} {box[3]:.6f}"


def write_detections(path, frames: Iterable[tuple]) -> None:
    """``frames`` yields ``(frame_id, BoxSet)``; one line per box."""
    lines = []
    for fid, bs in frames:
        for i in range(len(bs)):
            lines.append(format_detection_line(fid, int(bs.classes[i]), float(bs.scores[i]), bs.boxes[i]))
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_detections(path) -> dict:
    rows: dict = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 7:
            raise ValueError(f"{path}:{ln}: expected 7 fields, got {len(parts)}")
        rows.setdefault(int(parts[0]), []).append((int(parts[1]), float(parts[2]), [float(v) for v in parts[3:]]))
    out = {}
    for fid, items in rows.items():
        out[fid] = BoxSet([b for _, _, b in items], [c for c, _, _ in items], [s for _, s, _ in items])
    return out


def format_gt_line(cls: int, difficulty: int, box) -> str:
    return f"{cls} {Difficulty(difficulty).label} {box[0]:.6f} {box[1]:.6f} {box[2]:.6f} {box[3]:.6f}"


def write_ground_truth(path, gt: BoxSet) -> None:
    lines = [format_gt_line(int(gt.classes[i]), int(gt.difficulty[i]), gt.boxes[i]) for i in range(len(gt))]
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_ground_truth(path) -> BoxSet:
    boxes, classes, diff = [], [], []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 6:
            raise ValueError(f"{path}:{ln}: expected 6 fields, got {len(parts)}")
        box = [float(v) for v in parts[2:]]
        if box[2] <= box[0] or box[3] <= box[1]:
            raise ValueError(f"{path}:{ln}: degenerate ground-truth box {box}")
        classes.append(int(parts[0]))
        diff.append(int(Difficulty.parse(parts[1])))
        boxes.append(box)
    return BoxSet(boxes, classes, difficulty=diff)
