"""VOC-style AP at a fixed IoU with KITTI-style difficulty levels."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from gla.detection import BoxSet, Difficulty, iou_matrix

TP, FP, IGNORED = 1, 0, -1
LEVELS = ("Easy", "Moderate", "Hard", "Overall")
LEVEL_ABBREV = {"Easy": "E", "Moderate": "M", "Hard": "H", "Overall": "O"}
MISSING = "—"


@dataclass
class EvalSpec:
    iou_threshold: float = 0.5
    levels: tuple = LEVELS
    classes: Optional[tuple] = None  # None: every class that has ground truth
    group_by_weather: bool = True

    def __post_init__(self):
        if not (0 < self.iou_threshold < 1):
            raise ValueError("iou_threshold must lie in (0, 1)")
        bad = [lv for lv in self.levels if lv not in LEVELS]
        if bad:
            raise ValueError(f"unknown difficulty levels {bad}")


@dataclass
class PrCurve:
    recall: np.ndarray
    precision: np.ndarray
    num_gt: int


def _care_mask(gts: BoxSet, level: str) -> np.ndarray:
    if level == "Overall" or gts.difficulty is None:
        return np.ones(len(gts), dtype=bool)
    return gts.difficulty <= int(Difficulty[level.upper()])


def match_detections(dets: BoxSet, gts: BoxSet, iou_thr: float = 0.5, level: str = "Overall"):
    """Greedy matching in descending score order (ties: lower index first).

    Returns ``(flags, num_gt)``: one of TP / FP / IGNORED per detection in
    input order, and the number of ground-truth boxes counted at ``level``.
    Ground truth harder than ``level`` can absorb a detection (IGNORED) but
    is not counted.
    """
    care = _care_mask(gts, level)
    flags = np.full(len(dets), FP, dtype=np.int64)
    if len(dets) == 0:
        return flags, int(care.sum())
    scores = dets.scores if dets.scores is not None else np.zeros(len(dets))
    order = np.argsort(-scores, kind="stable")
    ious = iou_matrix(dets.boxes, gts.boxes) if len(gts) else np.zeros((len(dets), 0))
    same = dets.classes[:, None] == gts.classes[None, :]
    ok = same & (ious >= iou_thr)
    taken = np.zeros(len(gts), dtype=bool)
    for i in order:
        cand = ok[i] & ~taken
        if not cand.any():
            continue
        g = int(np.argmax(np.where(cand, ious[i], -1.0)))
        taken[g] = True
        flags[i] = TP if care[g] else IGNORED
    return flags, int(care.sum())


def pr_curve(scores: np.ndarray, flags: np.ndarray, num_gt: int) -> PrCurve:
    """Rank by descending score (stable), dropping IGNORED detections."""
    scores = np.asarray(scores, dtype=np.float64)
    flags = np.asarray(flags)
    keep = flags != IGNORED
    scores, flags = scores[keep], flags[keep]
    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(flags[order] == TP)
    fp = np.cumsum(flags[order] == FP)
    recall = tp / num_gt if num_gt > 0 else np.zeros(len(tp))
    precision = tp / np.maximum(tp + fp, 1)
    return PrCurve(recall.astype(np.float64), precision.astype(np.float64), int(num_gt))


def voc_ap(curve: PrCurve) -> float:
    """All-point interpolated average precision."""
    if curve.num_gt == 0:
        if len(curve.recall):
            warnings.warn("AP requested with detections but no ground truth; returning 0", RuntimeWarning, stacklevel=2)
        return 0.0
    mrec = np.concatenate([[0.0], curve.recall, [1.0]])
    mpre = np.concatenate([[0.0], curve.precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class EvalResult:
    """``cells[(weather, daytime, level)] = {"ap": {cls: ap}, "map": value}``.

    ``weather``/``daytime`` are ``"All"`` for pooled rows.
    """

    cells: dict = field(default_factory=dict)

    def map(self, weather="All", daytime="All", level="Overall") -> float:
        cell = self.cells.get((weather, daytime, level))
        return float("nan") if cell is None else cell["map"]


def _eval_frames(frame_ids, dets, gts, spec: EvalSpec, level: str):
    classes = spec.classes
    if classes is None:
        present = set()
        for f in frame_ids:
            present.update(gts[f].classes.tolist())
        classes = tuple(sorted(present))
    aps = {}
    for c in classes:
        all_scores, all_flags, n_gt = [], [], 0
        for f in frame_ids:
            g = gts[f]
            gsel = g.subset(g.classes == c)
            d = dets.get(f)
            dsel = d.subset(d.classes == c) if d is not None and len(d) else BoxSet(scores=np.zeros(0))
            flags, n = match_detections(dsel, gsel, spec.iou_threshold, level)
            n_gt += n
            all_scores.append(dsel.scores if dsel.scores is not None else np.zeros(len(dsel)))
            all_flags.append(flags)
        if n_gt == 0:
            continue
        curve = pr_curve(np.concatenate(all_scores), np.concatenate(all_flags), n_gt)
        aps[int(c)] = voc_ap(curve)
    value = float(np.mean(list(aps.values()))) if aps else float("nan")
    return {"ap": aps, "map": value}


def evaluate(
    dets: Mapping[int, BoxSet], gts: Mapping[int, BoxSet], meta: Mapping[int, tuple], spec: EvalSpec = EvalSpec()
) -> EvalResult:
    """Per-class AP and mAP for each (weather, daytime, level) group.

    ``meta`` maps frame id to ``(weather, daytime)``; frames in ``gts`` define
    the evaluated set. Pooled ``("All", "All", level)`` cells are included.
    """
    unknown = sorted(set(dets) - set(gts))
    if unknown:
        raise ValueError(f"detections reference unknown frame ids: {unknown}")
    frames = sorted(gts)
    groups: dict = {("All", "All"): frames}
    if spec.group_by_weather:
        for f in frames:
            w, d = meta[f]
            groups.setdefault((w, d), []).append(f)
    res = EvalResult()
    for (w, d), ids in groups.items():
        for level in spec.levels:
            res.cells[(w, d, level)] = _eval_frames(ids, dets, gts, spec, level)
    return res


# --------------------------------------------------------------------------
# tables
# --------------------------------------------------------------------------


def _fmt(v) -> str:
    return MISSING if v is None or not np.isfinite(v) else f"{100.0 * v:.2f}"


def results_table(
    runs: Mapping[str, Optional[EvalResult]],
    weathers: Sequence[str],
    daytimes: Sequence[str],
    levels: Sequence[str] = LEVELS,
    notes: Optional[Mapping[str, str]] = None,
    note_header: str = "note",
):
    """Render runs as an aligned pipe table and a long-format CSV.

    Rows are (run, daytime); columns are weather x level, values are mAP in
    percent. Within each (daytime, column) the best value is wrapped in
    ``**`` and the second best gets a trailing ``*``. ``None`` runs are
    marked failed and every cell shows a dash.
    """
    notes = notes or {}
    names = list(runs)
    cols = [(w, lv) for w in weathers for lv in levels]
    values = {}
    for name in names:
        r = runs[name]
        for d in daytimes:
            for w, lv in cols:
                v = None if r is None else r.cells.get((w, d, lv), {}).get("map")
                values[(name, d, w, lv)] = v if v is not None and np.isfinite(v) else None

    marks = {}
    for d in daytimes:
        for w, lv in cols:
            vals = sorted({round(values[(n, d, w, lv)], 10) for n in names if values[(n, d, w, lv)] is not None}, reverse=True)
            if len(vals) < 2 and sum(values[(n, d, w, lv)] is not None for n in names) < 2:
                continue
            for n in names:
                v = values[(n, d, w, lv)]
                if v is None:
                    continue
                if round(v, 10) == vals[0]:
                    marks[(n, d, w, lv)] = "best"
                elif len(vals) > 1 and round(v, 10) == vals[1]:
                    marks[(n, d, w, lv)] = "second"

    header = ["Model", "Day/Night"] + [f"{w} {LEVEL_ABBREV[lv]}" for w, lv in cols]
    has_notes = bool(notes)
    if has_notes:
        header.append(note_header)
    rows = []
    for n in names:
        label = n if runs[n] is not None else f"{n} (failed)"
        for d in daytimes:
            cells = []
            for w, lv in cols:
                s = _fmt(values[(n, d, w, lv)])
                mk = marks.get((n, d, w, lv))
                if mk == "best":
                    s = f"**{s}**"
                elif mk == "second":
                    s = f"{s}*"
                cells.append(s)
            row = [label, d] + cells
            if has_notes:
                row.append(notes.get(n, ""))
            rows.append(row)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]

    def line(r):
        return "| " + " | ".join(c.ljust(wd) for c, wd in zip(r, widths)) + " |"

    text = [line(header), "|" + "|".join("-" * (wd + 2) for wd in widths) + "|"] + [line(r) for r in rows]
    text.append("")
    text.append("mAP (%) at IoU 0.5; **x** best, x* second best per Day/Night column.")
    txt = "\n".join(text) + "\n"

    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(["model", "daytime", "weather", "level", "map", "mark", "status"] + ([note_header] if has_notes else []))
    for n in names:
        for d in daytimes:
            for w, lv in cols:
                v = values[(n, d, w, lv)]
                row = [
                    n,
                    d,
                    w,
                    lv,
                    "" if v is None else f"{v:.6f}",
                    marks.get((n, d, w, lv), ""),
                    "ok" if runs[n] is not None else "failed",
                ]
                if has_notes:
                    row.append(notes.get(n, ""))
                wr.writerow(row)
    return txt, buf.getvalue()


def write_results(out_dir, runs, weathers, daytimes, levels=LEVELS, notes=None, note_header="note"):
    txt, csv_text = results_table(runs, weathers, daytimes, levels, notes, note_header)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "results.txt").write_text(txt)
    (out / "results.csv").write_text(csv_text)
    return txt
