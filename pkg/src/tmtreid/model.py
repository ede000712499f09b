"""Full trigeminal pipeline, its losses, the optimiser and checkpoint IO."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .crossview import CrossViewBlockParams, crossview_stack
from .data import FormatError
from .numerics import (
    ConfigError,
    ContractError,
    NumericError,
    ParamTape,
    Tensor,
    as_tensor,
    backward,
    concat,
    l2_normalize,
    linear,
    log_softmax,
    matmul,
    parameter,
    relu,
    softplus,
    take,
    tsum,
)
from .pooling import VIEW_NAMES, FeatureCube, PoolingParams, ViewFeatureSet, make_view_features
from .selfview import HeadConfig, PositionalEncoding, SelfViewBlockParams, selfview_stack

VARIANTS = ("full", "selfview", "baseline")
HEADS = VIEW_NAMES + ("concat",)


@dataclass
class ModelConfig:
    channels: int = 64
    num_heads: int = 2
    frames: int = 8
    depth_self: int = 2
    depth_cross: int = 2
    variant: str = "full"
    use_pe: bool = True
    literal_eq5: bool = False
    literal_eq8: bool = False
    literal_eq12: bool = False
    share_kv_across_targets: bool = False
    hi_res: bool = False
    ingest: bool = False
    feature_height: int | None = None
    feature_width: int | None = None
    stem_channels: tuple[int, int] = (16, 32)
    in_channels: int = 3
    num_identities: int = 1
    oim_temperature: float = 1.0 / 30.0
    oim_momentum: float = 0.5
    frame_oim: bool = False
    branch_oim: bool = True

    def validate(self) -> list[str]:
        errors = []
        for name in ("channels", "num_heads", "frames", "depth_self", "depth_cross", "in_channels", "num_identities"):
            if getattr(self, name) < 1:
                errors.append(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.channels >= 1 and self.num_heads >= 1 and self.channels % self.num_heads:
            errors.append(f"model.channels={self.channels} is not divisible by num_heads={self.num_heads}")
        if self.variant not in VARIANTS:
            errors.append(f"model.variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 < self.oim_momentum < 1.0:
            errors.append(f"model.oim_momentum must lie in (0, 1), got {self.oim_momentum}")
        if self.oim_temperature <= 0:
            errors.append(f"model.oim_temperature must be > 0, got {self.oim_temperature}")
        if len(self.stem_channels) != 2 or min(self.stem_channels) < 1:
            errors.append(f"model.stem_channels must be two positive widths, got {self.stem_channels}")
        for name in ("feature_height", "feature_width"):
            value = getattr(self, name)
            if value is not None and value < 1:
                errors.append(f"model.{name} must be >= 1, got {value}")
        return errors

    @property
    def geometry(self) -> tuple[int, int]:
        """Feature-map ``(H, W)``: 8x4 by default, 16x8 with ``hi_res``."""
        default = (16, 8) if self.hi_res else (8, 4)
        return (self.feature_height or default[0], self.feature_width or default[1])

    @property
    def image_size(self) -> tuple[int, int]:
        h, w = self.geometry
        return 4 * h, 4 * w

    @property
    def heads(self) -> HeadConfig:
        return HeadConfig(self.num_heads, self.channels)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["stem_channels"] = list(self.stem_channels)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        if "stem_channels" in raw:
            raw["stem_channels"] = tuple(raw["stem_channels"])
        return cls(**raw)


# ---------------------------------------------------------------- stub extractor


def _he_uniform(fan_in: int, shape, rng: np.random.Generator) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return parameter(rng.uniform(-bound, bound, size=shape))


@dataclass
class StubExtractorParams:
    """Two shared 2x2/stride-2 convolutions, then one 1x1 convolution per branch."""

    stem_weights: list[Tensor]
    stem_biases: list[Tensor]
    branch_weights: dict[str, Tensor]
    branch_biases: dict[str, Tensor]

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "StubExtractorParams":
        widths = (cfg.in_channels,) + tuple(cfg.stem_channels)
        stem_w, stem_b = [], []
        for cin, cout in zip(widths[:-1], widths[1:]):
            stem_w.append(_he_uniform(4 * cin, (4 * cin, cout), rng))
            stem_b.append(parameter(np.zeros(cout)))
        last = widths[-1]
        return cls(
            stem_weights=stem_w,
            stem_biases=stem_b,
            branch_weights={v: _he_uniform(last, (last, cfg.channels), rng) for v in VIEW_NAMES},
            branch_biases={v: parameter(np.zeros(cfg.channels)) for v in VIEW_NAMES},
        )

    def named_parameters(self, prefix: str):
        for i, (w, b) in enumerate(zip(self.stem_weights, self.stem_biases)):
            yield f"{prefix}.stem{i}.weight", w
            yield f"{prefix}.stem{i}.bias", b
        for v in VIEW_NAMES:
            yield f"{prefix}.branch[{v}].weight", self.branch_weights[v]
            yield f"{prefix}.branch[{v}].bias", self.branch_biases[v]


def patch_conv(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """2x2 convolution with stride 2 on ``(..., H, W, Cin)``, followed by ReLU."""
    *lead, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ContractError(f"patch convolution needs even spatial extents, got {h}x{w}")
    n = len(lead)
    blocks = x.reshape(*lead, h // 2, 2, w // 2, 2, c)
    axes = tuple(range(n)) + (n, n + 2, n + 1, n + 3, n + 4)
    patches = blocks.transpose(*axes).reshape(*lead, h // 2, w // 2, 4 * c)
    return relu(linear(patches, weight, bias))


def extract_cubes(frames, params: StubExtractorParams) -> tuple[FeatureCube, FeatureCube, FeatureCube]:
    """``(..., T, H_img, W_img, 3)`` images to three ``(..., T, HW, C)`` branch cubes."""
    x = as_tensor(frames)
    for w, b in zip(params.stem_weights, params.stem_biases):
        x = patch_conv(x, w, b)
    *lead, h, w, c = x.shape
    cubes = []
    for v in VIEW_NAMES:
        y = relu(linear(x, params.branch_weights[v], params.branch_biases[v]))
        cubes.append(FeatureCube(y.reshape(*lead, h * w, y.shape[-1]), h, w))
    return tuple(cubes)


# ---------------------------------------------------------------- OIM


@dataclass
class OimState:
    """Unit-norm per-identity prototypes updated by momentum, never by gradient."""

    lookup: np.ndarray
    momentum: float = 0.5
    temperature: float = 1.0 / 30.0

    @classmethod
    def init(cls, num_identities: int, dim: int, rng: np.random.Generator, momentum=0.5, temperature=1.0 / 30.0):
        table = rng.normal(size=(num_identities, dim))
        table /= np.linalg.norm(table, axis=1, keepdims=True)
        return cls(table, momentum, temperature)


def oim_loss(feature, label, state: OimState) -> tuple[Tensor, OimState]:
    """Cross-entropy of normalised features against the prototype table.

    ``feature`` is ``(C,)`` or ``(B, C)`` with matching integer ``label``(s).
    The loss (batch mean) depends on the table as a constant; the returned
    state has each labelled row pulled towards its feature and renormalised,
    applied in batch order.
    """
    feature = as_tensor(feature)
    labels = np.atleast_1d(np.asarray(label, dtype=np.int64))
    single = feature.ndim == 1
    feats = feature.reshape(1, feature.shape[0]) if single else feature
    n_ids = state.lookup.shape[0]
    if labels.shape != (feats.shape[0],):
        raise ContractError(f"{len(labels)} labels for {feats.shape[0]} features")
    if np.any(labels < 0) or np.any(labels >= n_ids):
        raise ContractError(f"label out of range [0, {n_ids}): {labels.tolist()}")
    if not np.all(np.isfinite(feats.data)):
        raise ContractError("OIM feature is not finite")
    unit = l2_normalize(feats)
    logits = matmul(unit, Tensor(state.lookup.T)) * (1.0 / state.temperature)
    logp = log_softmax(logits, axis=-1)
    loss = -tsum(take(logp, (np.arange(len(labels)), labels))) * (1.0 / len(labels))
    table = state.lookup.copy()
    gamma = state.momentum
    for row, y in zip(unit.data, labels):
        mixed = gamma * table[y] + (1.0 - gamma) * row
        norm = np.linalg.norm(mixed)
        table[y] = mixed / norm if norm > 1e-12 else row
    return loss, replace(state, lookup=table)


# ---------------------------------------------------------------- verification


def verification_loss(desc_a, desc_b, same, w: Tensor, b: Tensor) -> Tensor:
    """Binary cross-entropy of ``sigmoid(w * cos(a, b) + b)`` against ``same``.

    Accepts :class:`Descriptor` objects or raw ``(..., D)`` tensors; batched
    pairs are averaged.
    """
    a = desc_a.concatenated if isinstance(desc_a, Descriptor) else as_tensor(desc_a)
    bb = desc_b.concatenated if isinstance(desc_b, Descriptor) else as_tensor(desc_b)
    if a.shape != bb.shape:
        raise ContractError(f"descriptor shapes differ: {a.shape} vs {bb.shape}")
    if np.any(np.linalg.norm(a.data, axis=-1) == 0) or np.any(np.linalg.norm(bb.data, axis=-1) == 0):
        raise ContractError("verification loss is undefined for zero-norm descriptors")
    cos = tsum(l2_normalize(a) * l2_normalize(bb), axis=-1)
    z = cos * w + b
    sign = np.where(np.asarray(same, dtype=bool), -1.0, 1.0)
    if cos.ndim == 0:
        sign = float(sign)
    losses = softplus(z * sign)
    return losses.mean()


# ---------------------------------------------------------------- model


@dataclass
class Descriptor:
    spatial: Tensor
    temporal: Tensor
    spatiotemporal: Tensor
    concatenated: Tensor

    @classmethod
    def from_views(cls, vectors: dict[str, Tensor]) -> "Descriptor":
        parts = [vectors[v] for v in VIEW_NAMES]
        return cls(*parts, concat(parts, axis=-1))

    def select(self, view: str) -> np.ndarray:
        if view == "all":
            return self.concatenated.data
        return getattr(self, view).data


@dataclass
class ForwardResult:
    views: ViewFeatureSet
    descriptor: Descriptor
    branch_vectors: dict[str, Tensor] | None = None
    pre_cross_temporal: Tensor | None = None


@dataclass
class TmtModel:
    config: ModelConfig
    extractor: StubExtractorParams | None
    pool_spatial: PoolingParams | None
    pool_temporal: PoolingParams | None
    selfview: dict[str, list[SelfViewBlockParams]]
    pe: dict[str, PositionalEncoding]
    crossview: list[CrossViewBlockParams]
    oim: dict[str, OimState]
    verif_w: Tensor
    verif_b: Tensor
    token_counts: dict[str, int] = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "TmtModel":
        errors = cfg.validate()
        if errors:
            raise ConfigError("; ".join(errors))
        rng = np.random.default_rng(seed)
        heads = cfg.heads
        h, w = cfg.geometry
        counts = {"spatial": h * w, "temporal": cfg.frames, "spatiotemporal": cfg.frames * h * w}
        extractor = None if cfg.ingest else StubExtractorParams.init(cfg, rng)
        attentive = cfg.variant != "baseline"
        pool_s = PoolingParams.init(cfg.channels, rng) if attentive else None
        pool_t = PoolingParams.init(cfg.channels, rng) if attentive else None
        selfview, pe = {}, {}
        if attentive:
            for v in VIEW_NAMES:
                selfview[v] = [SelfViewBlockParams.init(heads, rng) for _ in range(cfg.depth_self)]
                pe[v] = PositionalEncoding.init(counts[v], cfg.channels)
        crossview = []
        if cfg.variant == "full":
            crossview = [
                CrossViewBlockParams.init(heads, rng, cfg.share_kv_across_targets)
                for _ in range(cfg.depth_cross)
            ]
        oim = {}
        for head in cls.oim_heads(cfg):
            dim = 3 * cfg.channels if head == "concat" else cfg.channels
            oim[head] = OimState.init(cfg.num_identities, dim, rng, cfg.oim_momentum, cfg.oim_temperature)
        return cls(cfg, extractor, pool_s, pool_t, selfview, pe, crossview, oim,
                   parameter(np.ones(1)), parameter(np.zeros(1)), counts)

    @staticmethod
    def oim_heads(cfg: ModelConfig) -> list[str]:
        heads = list(HEADS)
        if cfg.branch_oim and not cfg.ingest and cfg.variant != "baseline":
            heads += [f"branch_{v}" for v in VIEW_NAMES]
        if cfg.frame_oim and cfg.variant != "baseline":
            heads.append("frame")
        return heads

    def named_parameters(self):
        if self.extractor is not None:
            yield from self.extractor.named_parameters("extractor")
        if self.pool_spatial is not None:
            yield from self.pool_spatial.named_parameters("pool_spatial")
            yield from self.pool_temporal.named_parameters("pool_temporal")
        for v, blocks in self.selfview.items():
            yield from self.pe[v].named_parameters(f"selfview[{v}].pe")
            for i, block in enumerate(blocks):
                yield from block.named_parameters(f"selfview[{v}].{i}")
        for i, block in enumerate(self.crossview):
            yield from block.named_parameters(f"crossview.{i}")
        yield "verification.w", self.verif_w
        yield "verification.b", self.verif_b

    def tape(self) -> ParamTape:
        return ParamTape(self.named_parameters())


def _flatten_tokens(cube: FeatureCube) -> Tensor:
    v = cube.values
    return v.reshape(*v.shape[:-3], v.shape[-3] * v.shape[-2], v.shape[-1])


def _as_cube(c, geometry: tuple[int, int]) -> FeatureCube:
    if isinstance(c, FeatureCube):
        return c
    t = as_tensor(c)
    if t.ndim >= 4 and t.shape[-3:-1] == geometry:
        return FeatureCube(t.reshape(*t.shape[:-3], geometry[0] * geometry[1], t.shape[-1]), *geometry)
    return FeatureCube(t, *geometry)


def trigeminal_forward(model: TmtModel, frames=None, cubes=None) -> ForwardResult:
    """Images (stub path) or three branch cubes (ingest path) to views and descriptor.

    Cubes may be :class:`FeatureCube` objects, ``(..., T, HW, C)`` or
    ``(..., T, H, W, C)`` arrays.  Leading batch axes are carried through.
    """
    cfg = model.config
    if (frames is None) == (cubes is None):
        raise ContractError("pass exactly one of frames (stub path) or cubes (ingest path)")
    if frames is not None:
        if model.extractor is None:
            raise ContractError("model was built for ingested cubes and has no extractor")
        cube_s, cube_t, cube_st = extract_cubes(frames, model.extractor)
    else:
        if len(cubes) != 3:
            raise ContractError(f"expected three branch cubes, got {len(cubes)}")
        cube_s, cube_t, cube_st = (_as_cube(c, cfg.geometry) for c in cubes)
    branch = {v: c.values.mean(axis=(-3, -2)) for v, c in zip(VIEW_NAMES, (cube_s, cube_t, cube_st))}

    pre_cross_temporal = None
    if cfg.variant == "baseline":
        views = ViewFeatureSet(*(_flatten_tokens(c) for c in (cube_s, cube_t, cube_st)))
    else:
        views = make_view_features(cube_s, cube_t, cube_st, model.pool_spatial, model.pool_temporal,
                                   literal_eq5=cfg.literal_eq5)
        refined = {
            v: selfview_stack(getattr(views, v), model.selfview[v], model.pe[v], cfg.heads,
                              use_pe=cfg.use_pe, literal_eq8=cfg.literal_eq8)
            for v in VIEW_NAMES
        }
        views = ViewFeatureSet(**refined)
        pre_cross_temporal = views.temporal
        if cfg.variant == "full":
            views = crossview_stack(views, model.crossview, cfg.heads, literal_eq12=cfg.literal_eq12)
    vectors = {v: getattr(views, v).mean(axis=-2) for v in VIEW_NAMES}
    return ForwardResult(views, Descriptor.from_views(vectors), branch, pre_cross_temporal)


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    frames: int = 8
    epochs: int = 50
    lr: float = 1e-3
    lr_decay_factor: float = 10.0
    lr_decay_period_epochs: int = 15
    weight_decay: float = 5e-4
    momentum: float = 0.9
    batch_size: int = 16
    instances_per_identity: int = 4
    seed: int = 0
    grad_clip_norm: float | None = None

    def validate(self) -> list[str]:
        errors = []
        for name in ("frames", "batch_size", "instances_per_identity", "lr_decay_period_epochs"):
            if getattr(self, name) < 1:
                errors.append(f"train.{name} must be >= 1, got {getattr(self, name)}")
        if self.epochs < 0:
            errors.append(f"train.epochs must be >= 0, got {self.epochs}")
        if self.lr < 0:
            errors.append(f"train.lr must be >= 0, got {self.lr}")
        if self.lr_decay_factor <= 1:
            errors.append(f"train.lr_decay_factor must be > 1, got {self.lr_decay_factor}")
        if self.weight_decay < 0:
            errors.append(f"train.weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 <= self.momentum < 1:
            errors.append(f"train.momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size % self.instances_per_identity:
            errors.append(
                f"train.batch_size={self.batch_size} is not a multiple of "
                f"instances_per_identity={self.instances_per_identity}"
            )
        if self.seed < 0:
            errors.append(f"train.seed must be >= 0, got {self.seed}")
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0:
            errors.append(f"train.grad_clip_norm must be positive or null, got {self.grad_clip_norm}")
        return errors


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    """Step schedule: divide by ``lr_decay_factor`` every ``lr_decay_period_epochs``."""
    return cfg.lr / cfg.lr_decay_factor ** (epoch // cfg.lr_decay_period_epochs)


class NesterovSGD:
    """SGD with Nesterov momentum and L2 weight decay folded into the gradient.

    With ``clip_norm`` the loss gradients are first rescaled so that their
    global L2 norm is at most ``clip_norm`` (weight decay is not clipped).
    """

    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                 clip_norm: float | None = None):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.buffers: dict[str, np.ndarray] = {}

    def grad_scale(self, tape: ParamTape) -> float:
        if self.clip_norm is None:
            return 1.0
        norm = math.sqrt(sum(float(np.sum(g * g)) for g in tape.gradients))
        return min(1.0, self.clip_norm / norm) if norm > 0 else 1.0

    def step(self, tape: ParamTape) -> None:
        scale = self.grad_scale(tape)
        for name, param, grad in zip(tape.names, tape.parameters, tape.gradients):
            d = grad * scale + self.weight_decay * param.data
            buf = self.buffers.get(name)
            buf = d.copy() if buf is None else self.momentum * buf + d
            self.buffers[name] = buf
            param.data -= self.lr * (d + self.momentum * buf)


@dataclass
class Batch:
    labels: np.ndarray
    pairs: np.ndarray
    same: np.ndarray
    frames: np.ndarray | None = None
    cubes: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None


def sample_pairs(labels, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """All positive pairs in the batch plus as many randomly chosen negatives."""
    labels = np.asarray(labels)
    n = len(labels)
    i, j = np.triu_indices(n, k=1)
    pos = labels[i] == labels[j]
    positives = np.stack([i[pos], j[pos]], axis=1)
    negatives = np.stack([i[~pos], j[~pos]], axis=1)
    k = min(len(positives), len(negatives)) if len(positives) else min(len(negatives), n)
    if k < len(negatives):
        negatives = negatives[np.sort(rng.choice(len(negatives), size=k, replace=False))]
    pairs = np.concatenate([positives, negatives]).reshape(-1, 2)
    same = np.concatenate([np.ones(len(positives), bool), np.zeros(len(negatives), bool)])
    return pairs, same


def head_features(result: ForwardResult) -> dict[str, Tensor]:
    """Every tensor an OIM head can supervise, keyed by head name."""
    desc = result.descriptor
    feats = {
        "spatial": desc.spatial,
        "temporal": desc.temporal,
        "spatiotemporal": desc.spatiotemporal,
        "concat": desc.concatenated,
    }
    for v in VIEW_NAMES:
        feats[f"branch_{v}"] = result.branch_vectors[v]
    if result.pre_cross_temporal is not None:
        feats["frame"] = result.pre_cross_temporal
    return feats


def warm_start_prototypes(model: TmtModel, results: list[ForwardResult], labels) -> None:
    """Set each OIM row to the normalised mean feature of its identity.

    ``results`` are forward passes over labelled clips (in ``labels`` order,
    concatenated along the batch axis).  Identities without clips keep their
    current row.
    """
    labels = np.asarray(labels)
    for head, state in model.oim.items():
        chunks = [head_features(r)[head].data for r in results]
        feats = np.concatenate(chunks, axis=0)
        if head == "frame":
            feats = feats.mean(axis=1)
        feats = feats / np.linalg.norm(feats, axis=1, keepdims=True)
        table = state.lookup.copy()
        for pid in np.unique(labels):
            mean_row = feats[labels == pid].mean(axis=0)
            norm = np.linalg.norm(mean_row)
            if norm > 1e-12:
                table[pid] = mean_row / norm
        model.oim[head] = replace(state, lookup=table)


def parameter_norms(model: TmtModel) -> dict[str, float]:
    return {n: float(np.linalg.norm(p.data)) for n, p in model.named_parameters()}


def compute_losses(model: TmtModel, batch: Batch):
    """Forward pass plus every loss term.

    Returns ``(total, components, new_oim_states)``; the OIM tables are not
    modified here.
    """
    result = trigeminal_forward(model, frames=batch.frames, cubes=batch.cubes)
    labels = np.asarray(batch.labels)
    feats = head_features(result)
    broken = [head for head, f in feats.items() if not np.all(np.isfinite(f.data))]
    if broken:
        raise NumericError(f"non-finite forward features for heads {broken}; "
                           f"parameter norms={parameter_norms(model)}")
    components: dict[str, Tensor] = {}
    states: dict[str, OimState] = {}
    for head, state in model.oim.items():
        if head == "frame":
            tokens = feats["frame"]
            b, t, c = tokens.shape
            loss, states[head] = oim_loss(tokens.reshape(b * t, c), np.repeat(labels, t), state)
        else:
            loss, states[head] = oim_loss(feats[head], labels, state)
        components[f"oim_{head}"] = loss
    if len(batch.pairs):
        desc = result.descriptor
        a = take(desc.concatenated, batch.pairs[:, 0])
        b = take(desc.concatenated, batch.pairs[:, 1])
        components["verification"] = verification_loss(a, b, batch.same, model.verif_w, model.verif_b)
    total = None
    for value in components.values():
        total = value if total is None else total + value
    return total, components, states


def train_step(batch: Batch, model: TmtModel, optimizer: NesterovSGD) -> tuple[float, TmtModel]:
    """One SGD update of every parameter plus the OIM table refresh."""
    tape = model.tape()
    total, components, states = compute_losses(model, batch)
    if not np.isfinite(total.item()):
        snapshot = {k: v.item() for k, v in components.items()}
        raise NumericError(f"non-finite training loss; components={snapshot}; "
                           f"parameter norms={parameter_norms(model)}")
    backward(total, tape)
    optimizer.step(tape)
    model.oim.update(states)
    return total.item(), model


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_MAGIC = b"TMTK"
CHECKPOINT_VERSION = 1
_CKPT_PREFIX = struct.Struct("<4sHI")


def checkpoint_tensors(model: TmtModel) -> list[tuple[str, np.ndarray]]:
    out = [(name, t.data) for name, t in model.named_parameters()]
    out += [(f"oim[{head}].lookup", s.lookup) for head, s in model.oim.items()]
    return out


def save_checkpoint(path: str | Path, model: TmtModel, config_echo: dict | None = None) -> Path:
    """Header (JSON: version, config echo, manifest) then float32 LE payloads."""
    tensors = checkpoint_tensors(model)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model": model.config.to_dict(),
        "config": config_echo or {},
        "tensors": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_CKPT_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, a in tensors:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return path


def load_checkpoint(path: str | Path) -> tuple[TmtModel, dict]:
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_PREFIX.size:
        raise FormatError("truncated checkpoint prefix", len(raw))
    magic, version, hlen = _CKPT_PREFIX.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}", 0)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    start = _CKPT_PREFIX.size
    if len(raw) < start + hlen:
        raise FormatError("truncated checkpoint header", len(raw))
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    model = TmtModel.init(ModelConfig.from_dict(header["model"]))
    expected = checkpoint_tensors(model)
    manifest = header["tensors"]
    if [m["name"] for m in manifest] != [n for n, _ in expected]:
        raise FormatError("tensor manifest does not match the model layout", start)
    offset = start + hlen
    for entry, (name, target) in zip(manifest, expected):
        shape = tuple(entry["shape"])
        if shape != target.shape:
            raise FormatError(f"tensor {name} has shape {shape}, model expects {target.shape}", offset)
        nbytes = 4 * target.size
        if len(raw) < offset + nbytes:
            raise FormatError(f"truncated payload for tensor {name}", len(raw))
        target[...] = np.frombuffer(raw, dtype="<f4", count=target.size, offset=offset).reshape(shape)
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{len(raw) - offset} trailing bytes", offset)
    return model, header
