"""Training, evaluation, ablation suites and attention export."""

from __future__ import annotations

import hashlib
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from gla.config import ExperimentConfig, parse_config_text, serialize_config
from gla.detection import (
    CLASS_NAMES,
    BoxSet,
    DetectionHead,
    assign_targets,
    build_head_targets,
    detect,
    detection_loss,
    write_detections,
)
from gla.heatmap import export_attention_heatmap
from gla.metrics import LEVELS, EvalResult, evaluate, write_results
from gla.model import GlaFusion, Module, bundle_inputs
from gla.optim import Adam
from gla.serialize import load_checkpoint, save_checkpoint, save_tensor
from gla.tensor import backward, no_grad
from gla.weather import DAYTIMES, WEATHERS, Dataset, make_dataset


class TrainingError(RuntimeError):
    pass


class Detector(Module):
    """Fusion network followed by the anchor head."""

    def __init__(self, cfg: ExperimentConfig):
        rng = np.random.default_rng([cfg.seed, 0x61A])
        self.fusion = GlaFusion(cfg.model_spec(), rng)
        grid = cfg.anchor_grid()
        self.head = DetectionHead(cfg.channels, grid.per_cell, len(CLASS_NAMES), rng)

    def __call__(self, inputs: dict):
        f2, rec = self.fusion(inputs)
        cls, reg = self.head(f2)
        return cls, reg, rec


def generate(cfg: ExperimentConfig, out_dir):
    return make_dataset(out_dir, cfg.frames_per_cell, cfg.data_seed, cfg.sim_config(), cfg.test_fraction)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_detector(ckpt_dir, model: Detector, cfg: ExperimentConfig, dataset_hash: str = "", step: int = 0):
    out = Path(ckpt_dir)
    save_checkpoint(out, model.state_entries())
    (out / "config.txt").write_text(serialize_config(cfg))
    (out / "meta.txt").write_text(f"dataset_hash = {dataset_hash}\nsteps_done = {step}\n")


def load_detector(ckpt_dir):
    ck = Path(ckpt_dir)
    if not (ck / "config.txt").exists():
        raise FileNotFoundError(f"{ck} is not a checkpoint directory (no config.txt)")
    cfg = parse_config_text((ck / "config.txt").read_text())
    model = Detector(cfg)
    model.load_state(load_checkpoint(ck))
    return model, cfg


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


@dataclass
class FrameTargets:
    labels: np.ndarray
    deltas: np.ndarray
    matched: np.ndarray


def frame_targets(ds: Dataset, indices: Sequence[int], cfg: ExperimentConfig, grid) -> dict:
    out = {}
    for i in indices:
        gt = ds.ground_truth(i)
        out[i] = assign_targets(grid.anchors, gt, cfg.pos_iou, cfg.neg_iou)
    return out


def batch_schedule(n: int, batch_size: int, steps: int, seed: int) -> list:
    """Position lists per step: one seeded permutation per epoch, last partial batch dropped."""
    per_epoch = max(1, n // batch_size)
    out = []
    epoch = 0
    while len(out) < steps:
        perm = np.random.default_rng([seed, 0xBA7C, epoch]).permutation(n)
        for b in range(per_epoch):
            chunk = perm[b * batch_size : (b + 1) * batch_size]
            if len(chunk) < min(batch_size, n):
                break
            out.append(chunk.tolist())
            if len(out) == steps:
                break
        epoch += 1
    return out


def _fmt(v: float) -> str:
    return f"{v:.9g}"


def train(
    cfg: ExperimentConfig,
    data_dir,
    out_dir,
    log_every: int = 1,
    progress=None,
) -> Path:
    """Train the configured variant and write the checkpoint into ``out_dir``.

    Besides the tensors the directory holds ``config.txt``, ``meta.txt``,
    the deterministic ``train_log.csv`` and the wall-clock ``timing.csv``.
    """
    ds = Dataset(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ids = ds.indices("train")
    if not train_ids:
        raise TrainingError("dataset has no training frames")
    grid = cfg.anchor_grid()
    model = Detector(cfg)
    opt = Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
    targets = frame_targets(ds, train_ids, cfg, grid)
    schedule = batch_schedule(len(train_ids), cfg.batch_size, cfg.steps, cfg.seed)
    dhash = ds.content_hash()

    log = ["step,total,cls,box,num_pos"]
    timing = ["step,seconds"]
    t0 = time.perf_counter()
    model.train()
    for step, pos in enumerate(schedule):
        ids = [train_ids[p] for p in pos]
        bundle = ds.bundle(ids)
        tgt = build_head_targets([targets[i] for i in ids], grid, len(CLASS_NAMES))
        opt.zero_grad()
        cls, reg, _ = model(bundle_inputs(bundle, cfg.modalities))
        total, lc, lb = detection_loss(cls, reg, tgt, cfg.focal_alpha, cfg.focal_gamma, cfg.huber_delta)
        vals = (total.item(), lc.item(), lb.item())
        if not all(np.isfinite(vals)):
            dump = _dump_batch(out, step, ids, bundle, vals)
            raise TrainingError(f"non-finite loss at step {step} (batch frames {ids}); diagnostics in {dump}")
        backward(total)
        opt.step()
        if step % log_every == 0 or step == len(schedule) - 1:
            log.append(f"{step},{_fmt(vals[0])},{_fmt(vals[1])},{_fmt(vals[2])},{tgt.num_pos}")
            timing.append(f"{step},{time.perf_counter() - t0:.3f}")
        if progress is not None:
            progress(step, vals)
    save_detector(out, model, cfg, dhash, len(schedule))
    (out / "train_log.csv").write_text("\n".join(log) + "\n")
    (out / "timing.csv").write_text("\n".join(timing) + "\n")
    return out


def _dump_batch(out: Path, step: int, ids, bundle, vals) -> Path:
    d = out / f"nan_dump_step{step:06d}"
    d.mkdir(parents=True, exist_ok=True)
    lines = [f"step = {step}", f"batch_frames = {' '.join(map(str, ids))}", f"loss_total_cls_box = {vals}"]
    for m in ("camera", "gated", "lidar"):
        arr = bundle.get(m)
        save_tensor(d / f"{m}.glat", arr)
        lines.append(f"{m}: min {arr.min():.6g} max {arr.max():.6g} finite {bool(np.isfinite(arr).all())}")
    (d / "diagnostics.txt").write_text("\n".join(lines) + "\n")
    return d


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def predict(model: Detector, cfg: ExperimentConfig, ds: Dataset, indices: Sequence[int], chunk: int = 8) -> dict:
    grid = cfg.anchor_grid()
    size = (cfg.image_height, cfg.image_width)
    out = {}
    model.eval()
    with no_grad():
        for s in range(0, len(indices), chunk):
            ids = list(indices[s : s + chunk])
            cls, reg, _ = model(bundle_inputs(ds.bundle(ids), cfg.modalities))
            for k, i in enumerate(ids):
                out[i] = detect(
                    cls.data[k], reg.data[k], grid, size, cfg.score_threshold, cfg.nms_threshold, cfg.max_detections
                )
    return out


def evaluate_detections(dets: dict, ds: Dataset, indices: Sequence[int], cfg: ExperimentConfig) -> EvalResult:
    gts = {i: ds.ground_truth(i) for i in indices}
    meta = {i: (ds.info[i].weather, ds.info[i].daytime) for i in indices}
    return evaluate(dets, gts, meta, cfg.eval_spec())


def evaluate_model(model: Detector, cfg: ExperimentConfig, ds: Dataset, split: str = "test"):
    ids = ds.indices(split)
    dets = predict(model, cfg, ds, ids)
    return dets, evaluate_detections(dets, ds, ids, cfg)


def run_label(cfg: ExperimentConfig) -> str:
    return ARM_LABELS.get(cfg.variant, cfg.variant) if cfg.variant not in ("single", "pair") else "-".join(
        m.capitalize() for m in cfg.modalities
    )


ARM_LABELS = {"gla": "GLA", "concat": "Concat", "local_only": "Local Attention only", "global_only": "Global Attention only"}


def cmd_eval(ckpt_dir, data_dir, out_dir, label: Optional[str] = None, split: str = "test") -> EvalResult:
    model, cfg = load_detector(ckpt_dir)
    ds = Dataset(data_dir)
    dets, res = evaluate_model(model, cfg, ds, split)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_detections(out / "detections.txt", sorted(dets.items()))
    write_results(out, {label or run_label(cfg): res}, WEATHERS, DAYTIMES)
    return res


# --------------------------------------------------------------------------
# ablation suites
# --------------------------------------------------------------------------

SUITES = ("baselines", "partitions", "attention-mode")


def suite_arms(suite: str, base: ExperimentConfig) -> list:
    """``(label, config)`` per arm; every arm keeps the base seed and step count."""
    if suite == "baselines":
        arms = [(m.capitalize(), dict(variant="single", modalities=(m,))) for m in ("camera", "gated", "lidar")]
        arms += [
            ("Camera-Gated", dict(variant="pair", modalities=("camera", "gated"))),
            ("Camera-Lidar", dict(variant="pair", modalities=("camera", "lidar"))),
            ("Camera-Gated-Lidar (Concat)", dict(variant="concat", modalities=("camera", "gated", "lidar"))),
            ("GLA", dict(variant="gla", modalities=("camera", "gated", "lidar"))),
        ]
    elif suite == "partitions":
        arms = [
            (f"{r * c} partitions", dict(variant="gla", modalities=("camera", "gated", "lidar"), partition_rows=r, partition_cols=c))
            for r, c in ((3, 6), (4, 8), (5, 10), (6, 12))
        ]
    elif suite == "attention-mode":
        three = ("camera", "gated", "lidar")
        arms = [
            ("Global Attention only", dict(variant="global_only", modalities=three)),
            ("Local Attention only", dict(variant="local_only", modalities=three)),
            ("GLA", dict(variant="gla", modalities=three)),
        ]
    else:
        raise ValueError(f"unknown suite {suite!r}; choose from {list(SUITES)}")
    return [(label, base.replace(**kw)) for label, kw in arms]


def _arm_dir(label: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in label).strip("_").lower()


def _run_arm(args):
    label, cfg_text, data_dir, out_dir = args
    try:
        cfg = parse_config_text(cfg_text)
        ck = train(cfg, data_dir, Path(out_dir) / "ckpt")
        model, cfg = load_detector(ck)
        ds = Dataset(data_dir)
        dets, res = evaluate_model(model, cfg, ds)
        write_detections(Path(out_dir) / "detections.txt", sorted(dets.items()))
        return label, res, None
    except Exception as exc:  # one arm failing must not sink the suite
        return label, None, f"{type(exc).__name__}: {exc}"


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("GLA_THREADS", "1")))
    except ValueError:
        return 1


def cmd_ablate(suite: str, base: ExperimentConfig, data_dir, out_dir, arms: Optional[list] = None):
    """Train and evaluate every arm, then write the combined table.

    Returns ``(text, {label: EvalResult or None}, {label: error})``.
    """
    ds = Dataset(data_dir)
    dhash = ds.content_hash()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arms = arms if arms is not None else suite_arms(suite, base)
    jobs = [(label, serialize_config(cfg), str(data_dir), str(out / _arm_dir(label))) for label, cfg in arms]
    workers = min(max_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_arm, jobs))
    else:
        results = [_run_arm(j) for j in jobs]
    runs = {label: res for label, res, _ in results}
    errors = {label: err for label, _, err in results if err}
    if errors:
        (out / "errors.txt").write_text("".join(f"{k}: {v}\n" for k, v in errors.items()))
    notes = {label: dhash[:12] for label in runs}
    txt = write_results(out, runs, WEATHERS, DAYTIMES, LEVELS, notes=notes, note_header="dataset")
    return txt, runs, errors


# --------------------------------------------------------------------------
# attention export
# --------------------------------------------------------------------------


def attention_weights(model: Detector, cfg: ExperimentConfig, ds: Dataset, index: int):
    """(local, global) dicts of per-modality weights for one frame, in eval mode."""
    model.eval()
    with no_grad():
        _, _, rec = model(bundle_inputs(ds.bundle([index]), cfg.modalities))
    local = {m: w.data[0] for m, w in rec.local_weights.items()}
    glob = {m: w.data[0] for m, w in rec.global_weights.items()}
    return local, glob


def cmd_export_attn(ckpt_dir, data_dir, frames: Sequence[int], out_dir) -> list:
    model, cfg = load_detector(ckpt_dir)
    ds = Dataset(data_dir)
    unknown = [f for f in frames if f not in ds.info]
    if unknown:
        raise ValueError(f"frames not in dataset: {unknown}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    size = (cfg.image_height, cfg.image_width)
    written = []
    for idx in frames:
        local, glob = attention_weights(model, cfg, ds, idx)
        if not local and not glob:
            raise ValueError(f"variant {cfg.variant} has no attention weights to export")
        for stage, weights in (("local", local), ("global", glob)):
            for m, w in weights.items():
                stem = f"attn_{stage}_{m}_{idx:05d}"
                written.append(export_attention_heatmap(w, out / f"{stem}.ppm", out_size=size))
                save_tensor(out / f"{stem}.glat", w)
    return written


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
