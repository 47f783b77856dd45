"""Flat ``key = value`` experiment configuration with a closed schema."""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

from gla.detection import CLASS_NAMES, generate_anchors
from gla.metrics import EvalSpec
from gla.model import MODALITIES, FusionMode, ModelSpec, Variant
from gla.weather import SimConfig


class ConfigError(ValueError):
    def __init__(self, msg: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


def _floats(s: str) -> tuple:
    return tuple(float(v) for v in s.replace(",", " ").split())


def _names(s: str) -> tuple:
    return tuple(v for v in s.replace(",", " ").split())


def _fmt_seq(t) -> str:
    return ", ".join(repr(v) if isinstance(v, float) else str(v) for v in t)


@dataclass
class ExperimentConfig:
    seed: int = 1
    # dataset
    data_seed: int = 7
    frames_per_cell: int = 100
    image_height: int = 60
    image_width: int = 120
    test_fraction: float = 0.2
    # model
    in_channels: int = 3
    channels: int = 16
    partition_rows: int = 5
    partition_cols: int = 10
    fusion_mode: str = "modality_weighted"
    variant: str = "gla"
    modalities: tuple = MODALITIES
    # training
    lr: float = 0.00002
    batch_size: int = 2
    steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # head
    anchor_scales: tuple = (8.0, 16.0, 32.0)
    anchor_ratios: tuple = (0.5, 1.0, 2.0)
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    huber_delta: float = 1.0
    score_threshold: float = 0.05
    nms_threshold: float = 0.7
    max_detections: int = 100
    # eval
    eval_iou: float = 0.5
    eval_classes: tuple = ()  # empty: every class with ground truth

    def validate(self) -> "ExperimentConfig":
        _validate(self, {})
        return self

    # derived specs
    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            in_channels=self.in_channels,
            channels=self.channels,
            partition_rows=self.partition_rows,
            partition_cols=self.partition_cols,
            fusion_mode=self.fusion_mode,
            variant=self.variant,
            modalities=self.modalities,
        )

    def sim_config(self) -> SimConfig:
        return SimConfig(height=self.image_height, width=self.image_width)

    def anchor_grid(self):
        return generate_anchors(self.image_height, self.image_width, 1.0, self.anchor_scales, self.anchor_ratios)

    def eval_spec(self) -> EvalSpec:
        classes = tuple(CLASS_NAMES.index(c) for c in self.eval_classes) if self.eval_classes else None
        return EvalSpec(iou_threshold=self.eval_iou, classes=classes)

    def replace(self, **kw) -> "ExperimentConfig":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(kw)
        return ExperimentConfig(**vals).validate()


_DEFAULTS = ExperimentConfig()
SCHEMA = {f.name: type(getattr(_DEFAULTS, f.name)) for f in fields(ExperimentConfig)}


def _coerce(key: str, raw: str, line: Optional[int]):
    kind = SCHEMA[key]
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return _floats(raw) if key.startswith("anchor_") else _names(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: expected {kind.__name__}, got {raw!r}", line) from None


def _validate(cfg: ExperimentConfig, lines: dict) -> None:
    def fail(key, msg, *related):
        # cross-field invariants point at whichever involved key was written
        line = next((lines[k] for k in (key, *related) if k in lines), None)
        raise ConfigError(f"{key}: {msg}", line)

    if cfg.lr <= 0:
        fail("lr", f"must satisfy lr > 0, got {cfg.lr}")
    if cfg.batch_size < 1:
        fail("batch_size", f"must satisfy batch_size >= 1, got {cfg.batch_size}")
    if cfg.steps < 0:
        fail("steps", "must be >= 0")
    for k in ("beta1", "beta2"):
        if not 0 <= getattr(cfg, k) < 1:
            fail(k, "must lie in [0, 1)")
    if cfg.adam_eps <= 0:
        fail("adam_eps", "must be > 0")
    if cfg.frames_per_cell < 1:
        fail("frames_per_cell", "must be >= 1")
    if not 0 <= cfg.test_fraction < 1:
        fail("test_fraction", "must lie in [0, 1)")
    if cfg.image_height < 8 or cfg.image_width < 8:
        fail("image_height" if cfg.image_height < 8 else "image_width", "must be >= 8")
    if cfg.channels < 4 or cfg.channels % 4:
        fail("channels", f"must be a positive multiple of 4, got {cfg.channels}")
    if cfg.in_channels < 1:
        fail("in_channels", "must be >= 1")
    if not 1 <= cfg.partition_rows <= cfg.image_height:
        fail("partition_rows", f"grid must fit the feature extent: need 1 <= rows <= {cfg.image_height}")
    if not 1 <= cfg.partition_cols <= cfg.image_width:
        fail("partition_cols", f"grid must fit the feature extent: need 1 <= cols <= {cfg.image_width}")
    if cfg.fusion_mode not in {m.value for m in FusionMode}:
        fail("fusion_mode", f"unknown mode {cfg.fusion_mode!r}; choose from {[m.value for m in FusionMode]}")
    if cfg.variant not in {v.value for v in Variant}:
        fail("variant", f"unknown variant {cfg.variant!r}; choose from {[v.value for v in Variant]}")
    bad = [m for m in cfg.modalities if m not in MODALITIES]
    if bad or len(set(cfg.modalities)) != len(cfg.modalities):
        fail("modalities", f"must be distinct names from {list(MODALITIES)}, got {list(cfg.modalities)}")
    need = {"single": 1, "pair": 2}.get(cfg.variant, 3)
    if len(cfg.modalities) != need:
        fail("modalities", f"variant {cfg.variant} needs exactly {need} modalities, got {list(cfg.modalities)}", "variant")
    if not cfg.anchor_scales or any(s <= 0 for s in cfg.anchor_scales):
        fail("anchor_scales", "must be a non-empty list of positive sizes")
    if not cfg.anchor_ratios or any(r <= 0 for r in cfg.anchor_ratios):
        fail("anchor_ratios", "must be a non-empty list of positive ratios")
    if not 0 < cfg.neg_iou <= cfg.pos_iou < 1:
        fail("pos_iou", "need 0 < neg_iou <= pos_iou < 1", "neg_iou")
    if cfg.focal_gamma < 0 or not 0 < cfg.focal_alpha < 1:
        fail("focal_alpha" if cfg.focal_gamma >= 0 else "focal_gamma", "need 0 < alpha < 1 and gamma >= 0")
    if cfg.huber_delta <= 0:
        fail("huber_delta", "must be > 0")
    if not 0 <= cfg.score_threshold < 1:
        fail("score_threshold", "must lie in [0, 1)")
    if not 0 < cfg.nms_threshold <= 1:
        fail("nms_threshold", "must lie in (0, 1]")
    if cfg.max_detections < 1:
        fail("max_detections", "must be >= 1")
    if not 0 < cfg.eval_iou < 1:
        fail("eval_iou", "must lie in (0, 1)")
    bad = [c for c in cfg.eval_classes if c not in CLASS_NAMES]
    if bad:
        fail("eval_classes", f"unknown classes {bad}; choose from {list(CLASS_NAMES)}")


def parse_config_text(text: str) -> ExperimentConfig:
    values, lines = {}, {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", no)
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}", no)
        if key in values:
            raise ConfigError(f"duplicate key {key!r} (first set on line {lines[key]})", no)
        values[key] = _coerce(key, val, no)
        lines[key] = no
    cfg = ExperimentConfig(**values)
    _validate(cfg, lines)
    return cfg


def parse_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text())


def serialize_config(cfg: ExperimentConfig) -> str:
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            s = _fmt_seq(v)
        elif isinstance(v, float):
            s = repr(v)
        else:
            s = str(v)
        out.append(f"{f.name} = {s}")
    return "\n".join(out) + "\n"
