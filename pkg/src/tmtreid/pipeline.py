"""Run configuration, data splits, the training loop and descriptor extraction."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SynthSpec, Tracklet, load_cube_dir, rrs_sample, synth_generate, synth_generate_cubes
from .evalkit import RankingReport, evaluate
from .model import (
    Batch,
    ModelConfig,
    NesterovSGD,
    TmtModel,
    TrainConfig,
    lr_at_epoch,
    sample_pairs,
    train_step,
    trigeminal_forward,
    warm_start_prototypes,
)
from .numerics import ConfigError, ContractError, no_grad

DATA_SOURCES = ("synthetic", "synthetic_cubes", "cubes")
SPLIT_MODES = ("identities", "tracklets")
EVAL_VIEWS = ("all", "spatial", "temporal", "spatiotemporal")


@dataclass
class DataConfig:
    source: str = "synthetic"
    split: str = "tracklets"
    train_dir: str | None = None
    query_dir: str | None = None
    gallery_dir: str | None = None

    def validate(self) -> list[str]:
        errors = []
        if self.source not in DATA_SOURCES:
            errors.append(f"data.source must be one of {DATA_SOURCES}, got {self.source!r}")
        if self.split not in SPLIT_MODES:
            errors.append(f"data.split must be one of {SPLIT_MODES}, got {self.split!r}")
        if self.source == "cubes":
            for name in ("train_dir", "query_dir", "gallery_dir"):
                if not getattr(self, name):
                    errors.append(f"data.{name} is required when data.source is 'cubes'")
        return errors


@dataclass
class EvalConfig:
    metric: str = "euclidean"
    max_rank: int = 20
    single_gallery: bool = False
    view: str = "all"
    batch_size: int = 32

    def validate(self) -> list[str]:
        errors = []
        if self.metric not in ("euclidean", "cosine"):
            errors.append(f"eval.metric must be 'euclidean' or 'cosine', got {self.metric!r}")
        if self.max_rank < 1:
            errors.append(f"eval.max_rank must be >= 1, got {self.max_rank}")
        if self.view not in EVAL_VIEWS:
            errors.append(f"eval.view must be one of {EVAL_VIEWS}, got {self.view!r}")
        if self.batch_size < 1:
            errors.append(f"eval.batch_size must be >= 1, got {self.batch_size}")
        return errors


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)
    data: DataConfig = field(default_factory=DataConfig)
    max_steps: int | None = None

    def validate(self) -> list[str]:
        errors = self.model.validate() + self.train.validate() + self.synth.validate()
        errors += self.eval.validate() + self.data.validate()
        if self.max_steps is not None and self.max_steps < 0:
            errors.append(f"max_steps must be >= 0, got {self.max_steps}")
        if self.data.source == "synthetic" and self.model.ingest:
            errors.append("model.ingest cannot be set with synthetic image data")
        if self.data.source == "synthetic" and self.synth.num_identities < 2:
            errors.append("synthetic data needs >= 2 identities to form train and test splits")
        return errors

    def check(self) -> "RunConfig":
        errors = self.validate()
        if errors:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
        return self

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": dataclasses.asdict(self.train),
            "synth": self.synth.to_dict(),
            "eval": dataclasses.asdict(self.eval),
            "data": dataclasses.asdict(self.data),
            "max_steps": self.max_steps,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        """Parse a nested dict; every unknown or ill-typed field is reported together."""
        errors = []
        sections = {"model": ModelConfig, "train": TrainConfig, "synth": SynthSpec,
                    "eval": EvalConfig, "data": DataConfig}
        unknown = set(raw) - set(sections) - {"max_steps"}
        errors += [f"unknown config section {k!r}" for k in sorted(unknown)]
        built = {}
        for key, klass in sections.items():
            section = raw.get(key, {}) or {}
            if not isinstance(section, dict):
                errors.append(f"config section {key!r} must be a mapping")
                continue
            fields = {f.name for f in dataclasses.fields(klass)}
            bad = set(section) - fields
            errors += [f"unknown field {key}.{k}" for k in sorted(bad)]
            kwargs = {k: v for k, v in section.items() if k in fields}
            try:
                built[key] = klass.from_dict(kwargs) if klass is ModelConfig else klass(**kwargs)
            except (TypeError, ValueError) as exc:
                errors.append(f"section {key}: {exc}")
        if errors:
            raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
        cfg = cls(**built, max_steps=raw.get("max_steps"))
        try:
            cfg.validate()
        except TypeError as exc:
            raise ConfigError(f"invalid configuration: ill-typed value ({exc})") from exc
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def benchmark_config(seed: int = 7) -> RunConfig:
    """Desk-scale synthetic benchmark used by the acceptance suite and ``tmt bench``."""
    return RunConfig(
        model=ModelConfig(channels=32, num_heads=2, frames=4, depth_self=1, depth_cross=1,
                          stem_channels=(16, 32)),
        train=TrainConfig(frames=4, epochs=100, lr=1e-3, lr_decay_factor=10.0, lr_decay_period_epochs=100,
                          weight_decay=5e-4, momentum=0.9, batch_size=16, instances_per_identity=4,
                          seed=seed, grad_clip_norm=20.0),
        synth=SynthSpec(num_identities=16, tracklets_per_id=4, frames_per_tracklet=16, seed=seed),
    )


# ---------------------------------------------------------------- data splits


@dataclass
class Split:
    train: list[Tracklet]
    query: list[Tracklet]
    gallery: list[Tracklet]
    train_labels: np.ndarray


def split_by_identity(tracklets: list[Tracklet]) -> tuple[list[Tracklet], list[Tracklet], list[Tracklet]]:
    """First half of the identities trains; for the rest, the first tracklet
    per (identity, camera) is a query and the remainder forms the gallery."""
    ids = sorted({t.identity for t in tracklets})
    train_ids = set(ids[: math.ceil(len(ids) / 2)])
    train = [t for t in tracklets if t.identity in train_ids]
    query, gallery, seen = [], [], set()
    for t in tracklets:
        if t.identity in train_ids:
            continue
        key = (t.identity, t.camera)
        (gallery if key in seen else query).append(t)
        seen.add(key)
    return train, query, gallery


def split_by_tracklet(tracklets: list[Tracklet]) -> tuple[list[Tracklet], list[Tracklet], list[Tracklet]]:
    """Closed-set split: every identity trains on the first half of its
    tracklets; of the rest, the first is a query and the others form the gallery."""
    by_id: dict[int, list[Tracklet]] = {}
    for t in tracklets:
        by_id.setdefault(t.identity, []).append(t)
    train, query, gallery = [], [], []
    for pid in sorted(by_id):
        group = by_id[pid]
        cut = math.ceil(len(group) / 2)
        train.extend(group[:cut])
        query.extend(group[cut:cut + 1])
        gallery.extend(group[cut + 1:])
    return train, query, gallery


SPLITTERS = {"identities": split_by_identity, "tracklets": split_by_tracklet}


def _relabel(train: list[Tracklet]) -> np.ndarray:
    mapping = {pid: k for k, pid in enumerate(sorted({t.identity for t in train}))}
    return np.array([mapping[t.identity] for t in train], dtype=np.int64)


def prepare_split(cfg: RunConfig) -> Split:
    mcfg = cfg.model
    if cfg.data.source == "synthetic":
        h, w = mcfg.image_size
        spec = dataclasses.replace(cfg.synth, height=h, width=w)
        train, query, gallery = SPLITTERS[cfg.data.split](synth_generate(spec))
    elif cfg.data.source == "synthetic_cubes":
        h, w = mcfg.geometry
        train, query, gallery = SPLITTERS[cfg.data.split](synth_generate_cubes(cfg.synth, h, w, mcfg.channels))
    else:
        train = load_cube_dir(cfg.data.train_dir)
        query = load_cube_dir(cfg.data.query_dir)
        gallery = load_cube_dir(cfg.data.gallery_dir)
    if not train or not query or not gallery:
        raise ContractError(
            f"empty split: {len(train)} train, {len(query)} query, {len(gallery)} gallery tracklets"
        )
    return Split(train, query, gallery, _relabel(train))


def resolve_model_config(cfg: RunConfig, split: Split) -> ModelConfig:
    ingest = cfg.data.source != "synthetic"
    mcfg = dataclasses.replace(
        cfg.model,
        frames=cfg.train.frames,
        ingest=ingest or cfg.model.ingest,
        num_identities=int(split.train_labels.max()) + 1,
    )
    if ingest:
        t, h, w, c = split.train[0].cubes[0].shape
        if c != mcfg.channels:
            raise ContractError(f"cube channels {c} do not match model.channels={mcfg.channels}")
        mcfg = dataclasses.replace(mcfg, feature_height=h, feature_width=w)
    return mcfg


# ---------------------------------------------------------------- batches


def make_batch(split: Split, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    """P identities x K tracklets, one train-mode RRS clip each, plus verification pairs."""
    labels = split.train_labels
    ids = np.unique(labels)
    k = cfg.instances_per_identity
    p = cfg.batch_size // k
    chosen = rng.choice(ids, size=p, replace=p > len(ids))
    members, batch_labels = [], []
    for pid in chosen:
        pool = np.flatnonzero(labels == pid)
        picks = rng.choice(pool, size=k, replace=k > len(pool))
        members.extend(int(i) for i in picks)
        batch_labels.extend([int(pid)] * k)
    clips = [rrs_sample(split.train[i], cfg.frames, "train", rng) for i in members]
    batch_labels = np.array(batch_labels, dtype=np.int64)
    pairs, same = sample_pairs(batch_labels, rng)
    if split.train[0].is_cube:
        cubes = tuple(np.stack([c[v] for c in clips]) for v in range(3))
        return Batch(batch_labels, pairs, same, cubes=cubes)
    return Batch(batch_labels, pairs, same, frames=np.stack(clips))


def extract_descriptors(model: TmtModel, tracklets: list[Tracklet], view: str = "all",
                        batch_size: int = 32) -> np.ndarray:
    """Test-mode RRS clips through the model; returns one descriptor row per tracklet."""
    rows = [r.descriptor.select(view) for r in forward_tracklets(model, tracklets, batch_size)]
    return np.concatenate(rows, axis=0)


def forward_tracklets(model: TmtModel, tracklets: list[Tracklet], batch_size: int = 32):
    """Yield no-grad forward results over test-mode RRS clips, in order."""
    frames = model.config.frames
    with no_grad():
        for start in range(0, len(tracklets), batch_size):
            chunk = tracklets[start:start + batch_size]
            clips = [rrs_sample(t, frames, "test") for t in chunk]
            if chunk[0].is_cube:
                cubes = tuple(np.stack([c[v] for c in clips]) for v in range(3))
                yield trigeminal_forward(model, cubes=cubes)
            else:
                yield trigeminal_forward(model, frames=np.stack(clips))


def evaluate_model(model: TmtModel, query: list[Tracklet], gallery: list[Tracklet],
                   ecfg: EvalConfig, view: str | None = None) -> RankingReport:
    view = view or ecfg.view
    qf = extract_descriptors(model, query, view, ecfg.batch_size)
    gf = extract_descriptors(model, gallery, view, ecfg.batch_size)
    report = evaluate(
        qf, gf,
        [t.identity for t in query], [t.identity for t in gallery],
        [t.camera for t in query], [t.camera for t in gallery],
        metric=ecfg.metric, max_rank=ecfg.max_rank, single_gallery=ecfg.single_gallery,
    )
    report.config["view"] = view
    return report


# ---------------------------------------------------------------- training loop


@dataclass
class FitResult:
    model: TmtModel
    config: RunConfig
    metrics: list[dict]
    step_losses: list[float]
    report: RankingReport | None
    seconds: float


METRIC_FIELDS = ("epoch", "steps", "lr", "loss", "rank1", "map")


def fit(cfg: RunConfig, split: Split | None = None, eval_every_epoch: bool = True,
        log=None) -> FitResult:
    """Train from scratch under ``cfg`` and evaluate on the held-out split."""
    cfg.check()
    started = time.perf_counter()
    split = split or prepare_split(cfg)
    mcfg = resolve_model_config(cfg, split)
    tcfg = cfg.train
    model = TmtModel.init(mcfg, seed=tcfg.seed)
    warm_start_prototypes(model, list(forward_tracklets(model, split.train, cfg.eval.batch_size)),
                          split.train_labels)
    rng = np.random.default_rng(tcfg.seed + 1)
    optimizer = NesterovSGD(tcfg.lr, tcfg.momentum, tcfg.weight_decay, tcfg.grad_clip_norm)
    steps_per_epoch = math.ceil(len(split.train) / tcfg.batch_size)
    metrics, losses = [], []
    steps = 0
    report = None
    for epoch in range(tcfg.epochs):
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
        optimizer.lr = lr_at_epoch(tcfg, epoch)
        epoch_losses = []
        for _ in range(steps_per_epoch):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            loss, model = train_step(make_batch(split, tcfg, rng), model, optimizer)
            epoch_losses.append(loss)
            steps += 1
        losses.extend(epoch_losses)
        row = {"epoch": epoch, "steps": steps, "lr": optimizer.lr,
               "loss": float(np.mean(epoch_losses)) if epoch_losses else float("nan")}
        last = epoch == tcfg.epochs - 1 or (cfg.max_steps is not None and steps >= cfg.max_steps)
        if eval_every_epoch or last:
            report = evaluate_model(model, split.query, split.gallery, cfg.eval)
            row.update(rank1=report.rank1, map=report.map)
        else:
            row.update(rank1=float("nan"), map=float("nan"))
        metrics.append(row)
        if log is not None:
            log(row)
    if report is None:
        report = evaluate_model(model, split.query, split.gallery, cfg.eval)
    return FitResult(model, cfg, metrics, losses, report, time.perf_counter() - started)


def write_metrics_csv(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_FIELDS)
        for row in rows:
            writer.writerow([row["epoch"], row["steps"]] + [repr(float(row[k])) for k in METRIC_FIELDS[2:]])
