"""Global-Local Attention fusion network and its ablation variants.

Stage 1 runs one inception block per modality. The local attention network
turns each modality feature into per-pixel logits, softmaxes them across
modalities and takes the weighted sum (first-stage fusion, ``F1``). The
global attention network does the same on an R x S grid of partition means;
its weights are broadcast back to pixels and used for the second-stage
fusion that produces ``F2``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from gla import ops
from gla.tensor import ShapeError, Tensor

MODALITIES = ("camera", "gated", "lidar")


class FusionMode(str, Enum):
    LITERAL = "literal"
    MODALITY_WEIGHTED = "modality_weighted"


class Variant(str, Enum):
    GLA = "gla"
    CONCAT = "concat"
    LOCAL_ONLY = "local_only"
    GLOBAL_ONLY = "global_only"
    SINGLE = "single"
    PAIR = "pair"


# --------------------------------------------------------------------------
# parameter containers
# --------------------------------------------------------------------------


class Module:
    """Attribute-walking parameter container (insertion order is the order)."""

    training = True

    def _children(self):
        for k, v in vars(self).items():
            if isinstance(v, (Module, Tensor, np.ndarray)):
                yield k, v
            elif isinstance(v, dict):
                for kk, vv in v.items():
                    yield f"{k}.{kk}", vv
            elif isinstance(v, list):
                for i, vv in enumerate(v):
                    yield f"{k}.{i}", vv

    def named_parameters(self, prefix: str = ""):
        for k, v in self._children():
            if isinstance(v, Tensor) and v.requires_grad:
                yield prefix + k, v
            elif isinstance(v, Module):
                yield from v.named_parameters(prefix + k + ".")

    def named_buffers(self, prefix: str = ""):
        for k, v in self._children():
            if isinstance(v, np.ndarray):
                yield prefix + k, v
            elif isinstance(v, Module):
                yield from v.named_buffers(prefix + k + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def train(self, mode: bool = True):
        self.training = mode
        for _, v in self._children():
            if isinstance(v, Module):
                v.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def state_entries(self):
        """``(name, array, role)`` triples for checkpointing."""
        out = [(n, p.data, "param") for n, p in self.named_parameters()]
        out += [(n, b, "buffer") for n, b in self.named_buffers()]
        return out

    def load_state(self, state: dict):
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks entries: {sorted(missing)[:5]}")
        for name, (arr, _role) in state.items():
            if name in own:
                dst = own[name].data
            elif name in bufs:
                dst = bufs[name]
            else:
                raise KeyError(f"unexpected checkpoint entry {name}")
            if dst.shape != arr.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {dst.shape}")
            dst[...] = arr


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, dtype=np.float32, pad=None, std=None):
        fan_in = cin * k * k
        std = np.sqrt(2.0 / fan_in) if std is None else std
        self.weight = Tensor(rng.normal(0.0, std, (cout, cin, k, k)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)
        self.pad = k // 2 if pad is None else pad

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=1, pad=self.pad)


class BatchNorm2d(Module):
    def __init__(self, c, dtype=np.float32, momentum=0.9, eps=1e-5):
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x):
        return ops.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


class ConvBNReLU(Module):
    def __init__(self, cin, cout, k, rng, dtype=np.float32, bn_momentum=0.9, bn_eps=1e-5):
        self.conv = Conv2d(cin, cout, k, rng, dtype)
        self.bn = BatchNorm2d(cout, dtype, bn_momentum, bn_eps)

    def __call__(self, x):
        return ops.relu(self.bn(self.conv(x)))


class InceptionBlock(Module):
    """Four parallel branches of ``cout // 4`` channels each, concatenated.

    1x1 | 1x1 -> 3x3 | 1x1 -> 3x3 -> 3x3 | 3x3 avg-pool -> 1x1
    """

    def __init__(self, cin, cout, rng, dtype=np.float32, **bn):
        if cout % 4:
            raise ShapeError(f"inception block needs an output width divisible by 4, got {cout}")
        q = cout // 4
        self.b1 = [ConvBNReLU(cin, q, 1, rng, dtype, **bn)]
        self.b2 = [ConvBNReLU(cin, q, 1, rng, dtype, **bn), ConvBNReLU(q, q, 3, rng, dtype, **bn)]
        self.b3 = [
            ConvBNReLU(cin, q, 1, rng, dtype, **bn),
            ConvBNReLU(q, q, 3, rng, dtype, **bn),
            ConvBNReLU(q, q, 3, rng, dtype, **bn),
        ]
        self.b4 = [ConvBNReLU(cin, q, 1, rng, dtype, **bn)]

    def __call__(self, x):
        outs = []
        for branch, head in ((self.b1, x), (self.b2, x), (self.b3, x), (self.b4, ops.avg_pool3x3(x))):
            y = head
            for layer in branch:
                y = layer(y)
            outs.append(y)
        return ops.concat_channels(outs)


def inception_block(x: Tensor, block: InceptionBlock) -> Tensor:
    return block(x)


class AttentionSubnet(Module):
    """Conv3(BN2(Conv2(ReLU(BN1(Conv1(f)))))) with C -> C convolutions."""

    def __init__(self, c, rng, dtype=np.float32, bn_momentum=0.9, bn_eps=1e-5):
        self.conv1 = Conv2d(c, c, 3, rng, dtype)
        self.bn1 = BatchNorm2d(c, dtype, bn_momentum, bn_eps)
        self.conv2 = Conv2d(c, c, 3, rng, dtype)
        self.bn2 = BatchNorm2d(c, dtype, bn_momentum, bn_eps)
        self.conv3 = Conv2d(c, c, 1, rng, dtype)

    def __call__(self, f):
        return self.conv3(self.bn2(self.conv2(ops.relu(self.bn1(self.conv1(f))))))


# --------------------------------------------------------------------------
# attention and fusion steps
# --------------------------------------------------------------------------


def _uniform_weights(feats: Sequence[Tensor], shape) -> list[Tensor]:
    val = 1.0 / len(feats)
    return [Tensor(np.full(shape, val, dtype=feats[0].dtype)) for _ in feats]


def local_attention_weights(feats: Sequence[Tensor], subnets: Optional[Sequence[AttentionSubnet]]) -> list[Tensor]:
    if subnets is None:
        return _uniform_weights(feats, feats[0].shape)
    return ops.modality_softmax([net(f) for net, f in zip(subnets, feats)])


def fuse_local(feats: Sequence[Tensor], weights: Sequence[Tensor]) -> Tensor:
    if len(feats) != len(weights):
        raise ShapeError(f"fuse_local: {len(feats)} features but {len(weights)} weight maps")
    return ops.add_n([ops.mul(f, w) for f, w in zip(feats, weights)])


def global_attention_weights(
    feats: Sequence[Tensor], subnets: Optional[Sequence[AttentionSubnet]], rows: int, cols: int
) -> list[Tensor]:
    pooled = [ops.partition_avg_pool(f, rows, cols) for f in feats]
    if subnets is None:
        return _uniform_weights(feats, pooled[0].shape)
    return ops.modality_softmax([net(p) for net, p in zip(subnets, pooled)])


def fuse_global(
    f1_prime: Tensor,
    stage2_feats: Optional[Sequence[Tensor]],
    global_weights: Sequence[Tensor],
    mode: FusionMode,
) -> Tensor:
    """Second-stage fusion with partition weights broadcast to pixels.

    ``literal``: sum_m F1' * GA_m, which equals F1' since the weights sum to 1.
    ``modality_weighted``: F1' + sum_m IB2_m(F_m) * GA_m.
    """
    h, w = f1_prime.shape[2], f1_prime.shape[3]
    up = [ops.broadcast_partition_weights(g, h, w) for g in global_weights]
    mode = FusionMode(mode)
    if mode is FusionMode.LITERAL:
        return ops.add_n([ops.mul(f1_prime, u) for u in up])
    if stage2_feats is None or len(stage2_feats) != len(up):
        raise ShapeError("fuse_global: modality_weighted mode needs one stage-2 feature per modality")
    return ops.add_n([f1_prime] + [ops.mul(f, u) for f, u in zip(stage2_feats, up)])


# --------------------------------------------------------------------------
# bundle / record types
# --------------------------------------------------------------------------


@dataclass
class ModalityBundle:
    camera: np.ndarray
    gated: np.ndarray
    lidar: np.ndarray
    weather: list = field(default_factory=list)
    daytime: list = field(default_factory=list)

    def __post_init__(self):
        shape = np.shape(self.camera)
        if np.shape(self.gated) != shape or np.shape(self.lidar) != shape:
            raise ShapeError(
                f"modalities disagree in shape: camera {shape}, gated {np.shape(self.gated)}, lidar {np.shape(self.lidar)}"
            )
        if len(shape) != 4:
            raise ShapeError(f"modality tensors must be (N, C, H, W), got {shape}")
        n = shape[0]
        if self.weather and len(self.weather) != n or self.daytime and len(self.daytime) != n:
            raise ShapeError(f"metadata length must equal batch size {n}")

    def get(self, modality: str) -> np.ndarray:
        return getattr(self, modality)

    @property
    def batch_size(self) -> int:
        return np.shape(self.camera)[0]


@dataclass
class AttentionRecord:
    local_weights: dict
    global_weights: dict
    f1: Optional[Tensor] = None
    f1_prime: Optional[Tensor] = None
    f2: Optional[Tensor] = None


# --------------------------------------------------------------------------
# the network
# --------------------------------------------------------------------------


@dataclass
class ModelSpec:
    in_channels: int = 3
    channels: int = 16
    partition_rows: int = 5
    partition_cols: int = 10
    fusion_mode: FusionMode = FusionMode.MODALITY_WEIGHTED
    variant: Variant = Variant.GLA
    modalities: tuple = MODALITIES
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.fusion_mode = FusionMode(self.fusion_mode)
        self.variant = Variant(self.variant)
        self.modalities = tuple(self.modalities)
        bad = [m for m in self.modalities if m not in MODALITIES]
        if bad:
            raise ValueError(f"unknown modalities {bad}")
        need = {Variant.SINGLE: 1, Variant.PAIR: 2}.get(self.variant, 3)
        if len(self.modalities) != need:
            raise ValueError(f"variant {self.variant.value} needs exactly {need} modalities, got {list(self.modalities)}")
        if self.channels % 4:
            raise ValueError(f"channels must be divisible by 4, got {self.channels}")
        if self.partition_rows < 1 or self.partition_cols < 1:
            raise ValueError("partition grid must be at least 1x1")

    @property
    def uses_local(self) -> bool:
        return self.variant in (Variant.GLA, Variant.LOCAL_ONLY, Variant.SINGLE, Variant.PAIR)

    @property
    def uses_global(self) -> bool:
        return self.variant in (Variant.GLA, Variant.GLOBAL_ONLY, Variant.SINGLE, Variant.PAIR)


class GlaFusion(Module):
    def __init__(self, spec: ModelSpec, rng: np.random.Generator, dtype=np.float32):
        self.spec = spec
        c, cin = spec.channels, spec.in_channels
        bn = dict(bn_momentum=spec.bn_momentum, bn_eps=spec.bn_eps)
        mods = spec.modalities
        self.ib1 = {m: InceptionBlock(cin, c, rng, dtype, **bn) for m in mods}
        # one modality means softmax weights are identically 1: no subnet needed
        attend = len(mods) > 1
        self.local = {m: AttentionSubnet(c, rng, dtype, **bn) for m in mods} if spec.uses_local and attend else {}
        self.glob = {m: AttentionSubnet(c, rng, dtype, **bn) for m in mods} if spec.uses_global and attend else {}
        if spec.variant is Variant.CONCAT:
            self.squeeze = Conv2d(len(mods) * c, c, 1, rng, dtype)
        self.ib_s2 = InceptionBlock(c, c, rng, dtype, **bn)
        if spec.uses_global and spec.fusion_mode is FusionMode.MODALITY_WEIGHTED:
            self.ib2 = {m: InceptionBlock(c, c, rng, dtype, **bn) for m in mods}
        else:
            self.ib2 = {}

    def __call__(self, inputs: dict) -> tuple[Tensor, AttentionRecord]:
        spec = self.spec
        mods = spec.modalities
        for m in mods:
            x = inputs[m]
            if x.shape[1] != spec.in_channels:
                raise ShapeError(f"{m}: expected {spec.in_channels} input channels, got {x.shape[1]}")
        feats = [self.ib1[m](inputs[m]) for m in mods]
        rec = AttentionRecord(local_weights={}, global_weights={})

        if spec.variant is Variant.CONCAT:
            f1 = self.squeeze(ops.concat_channels(feats))
            f1p = self.ib_s2(f1)
            rec.f1, rec.f1_prime, rec.f2 = f1, f1p, f1p
            return f1p, rec

        if spec.uses_local:
            subnets = [self.local[m] for m in mods] if self.local else None
            la = local_attention_weights(feats, subnets)
            rec.local_weights = dict(zip(mods, la))
            f1 = fuse_local(feats, la)
        else:
            f1 = ops.scale(ops.add_n(feats), 1.0 / len(feats))
        f1p = self.ib_s2(f1)
        rec.f1, rec.f1_prime = f1, f1p

        if not spec.uses_global:
            rec.f2 = f1p
            return f1p, rec

        h, w = f1p.shape[2], f1p.shape[3]
        if not (spec.partition_rows <= h and spec.partition_cols <= w):
            raise ShapeError(
                f"partition grid {spec.partition_rows}x{spec.partition_cols} does not fit feature extent {h}x{w}"
            )
        subnets = [self.glob[m] for m in mods] if self.glob else None
        ga = global_attention_weights(feats, subnets, spec.partition_rows, spec.partition_cols)
        rec.global_weights = dict(zip(mods, ga))
        stage2 = [self.ib2[m](f) for m, f in zip(mods, feats)] if self.ib2 else None
        f2 = fuse_global(f1p, stage2, ga, spec.fusion_mode)
        rec.f2 = f2
        return f2, rec


def bundle_inputs(bundle: ModalityBundle, modalities: Sequence[str], dtype=np.float32) -> dict:
    return {m: Tensor(np.asarray(bundle.get(m), dtype=dtype)) for m in modalities}


def gla_forward(bundle: ModalityBundle, model: GlaFusion, training: bool = True):
    model.train(training)
    return model(bundle_inputs(bundle, model.spec.modalities, model.ib_s2.b1[0].conv.weight.dtype))
