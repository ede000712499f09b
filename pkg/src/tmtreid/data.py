"""Tracklets, Restricted Random Sampling, the synthetic generator and the cube file format."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import ConfigError, ContractError

CUBE_MAGIC = b"TMTC"
CUBE_VERSION = 1
_CUBE_HEADER = struct.Struct("<4sH5I")
VIEW_COUNT = 3


class FormatError(ValueError):
    """A cube or checkpoint file is malformed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Tracklet:
    """One person seen by one camera.

    Exactly one of ``frames`` (``T_total x H x W x 3`` images in ``[0, 1]``)
    or ``cubes`` (three ``T_total x H x W x C`` branch feature volumes) is set.
    """

    identity: int
    camera: int
    frames: np.ndarray | None = None
    cubes: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    def __post_init__(self):
        if self.identity < 0 or self.camera < 0:
            raise ContractError(f"identity/camera must be nonnegative: {self.identity}, {self.camera}")
        if (self.frames is None) == (self.cubes is None):
            raise ContractError("a tracklet carries either image frames or feature cubes, not both")

    @property
    def length(self) -> int:
        return len(self.frames) if self.frames is not None else len(self.cubes[0])

    @property
    def is_cube(self) -> bool:
        return self.cubes is not None


@dataclass
class SynthSpec:
    num_identities: int = 16
    tracklets_per_id: int = 4
    frames_per_tracklet: int = 16
    height: int = 32
    width: int = 16
    noise_std: float = 0.05
    brightness_std: float = 0.05
    num_cameras: int = 2
    bands: int = 4
    texture: float = 0.2
    palette_share: int = 3
    seed: int = 7

    def validate(self) -> list[str]:
        errors = []
        for name in ("num_identities", "tracklets_per_id", "frames_per_tracklet", "height", "width", "num_cameras"):
            if getattr(self, name) < 1:
                errors.append(f"synth.{name} must be positive, got {getattr(self, name)}")
        if self.palette_share < 1:
            errors.append(f"synth.palette_share must be positive, got {self.palette_share}")
        if self.bands < 1:
            errors.append(f"synth.bands must be positive, got {self.bands}")
        for name in ("noise_std", "brightness_std", "texture"):
            if getattr(self, name) < 0:
                errors.append(f"synth.{name} must be >= 0, got {getattr(self, name)}")
        return errors

    @classmethod
    def from_file(cls, path: str | Path) -> "SynthSpec":
        raw = json.loads(Path(path).read_text())
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synthetic spec fields: {sorted(unknown)}")
        spec = cls(**raw)
        errors = spec.validate()
        if errors:
            raise ConfigError("; ".join(errors))
        return spec

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- sampling


def rrs_indices(total: int, length: int, mode: str, rng: np.random.Generator | None = None) -> list[int]:
    """Frame indices chosen by Restricted Random Sampling.

    The (cyclically padded, if shorter than ``length``) index list is split
    into ``length`` equal chunks, the last one taking the remainder.  Train
    mode draws one uniform index per chunk, test mode takes each chunk's
    first index.
    """
    if total < 1:
        raise ContractError("cannot sample from an empty tracklet")
    if length < 1:
        raise ContractError(f"clip length must be >= 1, got {length}")
    if mode not in ("train", "test"):
        raise ContractError(f"unknown sampling mode {mode!r}")
    if mode == "train" and rng is None:
        raise ContractError("train-mode sampling needs an rng")
    pool = list(range(total)) if total >= length else [i % total for i in range(length)]
    size = len(pool) // length
    picks = []
    for k in range(length):
        start = k * size
        stop = len(pool) if k == length - 1 else start + size
        offset = 0 if mode == "test" else int(rng.integers(stop - start))
        picks.append(pool[start + offset])
    return picks


def rrs_sample(tracklet: Tracklet, length: int, mode: str, rng: np.random.Generator | None = None):
    """``length``-frame clip: an image array, or a tuple of three cube arrays."""
    idx = rrs_indices(tracklet.length, length, mode, rng)
    if tracklet.frames is not None:
        return tracklet.frames[idx]
    return tuple(c[idx] for c in tracklet.cubes)


# ---------------------------------------------------------------- synthetic data


def appearance_template(spec: SynthSpec, rng: np.random.Generator, palette: np.ndarray | None = None) -> np.ndarray:
    """Pedestrian-like image: horizontal bands of colour plus fine texture.

    ``palette`` gives one RGB row per band (top to bottom); drawn at random
    when omitted.
    """
    bands = max(1, min(spec.bands, spec.height))
    colours = rng.uniform(0.0, 1.0, size=(bands, 3)) if palette is None else palette
    rows = np.minimum(np.arange(spec.height) * bands // spec.height, bands - 1)
    base = np.broadcast_to(colours[rows][:, None, :], (spec.height, spec.width, 3))
    texture = rng.uniform(-spec.texture, spec.texture, size=(spec.height, spec.width, 3))
    return np.clip(base + texture, 0.0, 1.0)


def _family_palettes(spec: SynthSpec, rng: np.random.Generator) -> list[np.ndarray]:
    """Band colours per identity; groups of ``palette_share`` identities reuse
    one palette in distinct band orders, so their colour histograms coincide."""
    bands = max(1, min(spec.bands, spec.height))
    palettes = []
    while len(palettes) < spec.num_identities:
        colours = rng.uniform(0.0, 1.0, size=(bands, 3))
        orders: list[tuple[int, ...]] = []
        limit = min(spec.palette_share, math.factorial(bands))
        while len(orders) < limit:
            order = tuple(int(i) for i in rng.permutation(bands))
            if order not in orders:
                orders.append(order)
        palettes.extend(colours[list(o)] for o in orders)
    return palettes[: spec.num_identities]


def synth_generate(spec: SynthSpec) -> list[Tracklet]:
    """Noisy copies of one random appearance template per identity.

    Templates come from :func:`appearance_template`, with identities grouped
    into families that share band colours (see ``palette_share``).  Tracklet
    ``k`` of an identity is filmed by camera ``k % num_cameras``; each
    tracklet gets a constant brightness offset and every frame its own
    Gaussian pixel noise.  Values are clipped to ``[0, 1]``.
    """
    errors = spec.validate()
    if errors:
        raise ConfigError("; ".join(errors))
    rng = np.random.default_rng(spec.seed)
    shape = (spec.height, spec.width, 3)
    tracklets = []
    palettes = _family_palettes(spec, rng)
    for pid in range(spec.num_identities):
        template = appearance_template(spec, rng, palettes[pid])
        for k in range(spec.tracklets_per_id):
            shift = rng.normal(0.0, spec.brightness_std) if spec.brightness_std > 0 else 0.0
            noise = rng.normal(0.0, 1.0, size=(spec.frames_per_tracklet,) + shape) * spec.noise_std
            frames = np.clip(template + shift + noise, 0.0, 1.0)
            tracklets.append(Tracklet(pid, k % spec.num_cameras, frames=frames))
    return tracklets


def synth_generate_cubes(spec: SynthSpec, height: int, width: int, channels: int) -> list[Tracklet]:
    """Feature-space analogue of :func:`synth_generate` for the ingest path.

    Each identity gets one Gaussian template per branch; frames add noise.
    ``spec.height``/``spec.width`` are ignored in favour of the feature geometry.
    """
    errors = spec.validate()
    if errors:
        raise ConfigError("; ".join(errors))
    rng = np.random.default_rng(spec.seed)
    shape = (height, width, channels)
    tracklets = []
    for pid in range(spec.num_identities):
        templates = [rng.normal(size=shape) for _ in range(VIEW_COUNT)]
        for k in range(spec.tracklets_per_id):
            cubes = []
            for template in templates:
                noise = rng.normal(size=(spec.frames_per_tracklet,) + shape) * spec.noise_std
                cubes.append(template + noise)
            tracklets.append(Tracklet(pid, k % spec.num_cameras, cubes=tuple(cubes)))
    return tracklets


# ---------------------------------------------------------------- cube files


@dataclass
class CubeMetadata:
    identity: int
    camera: int
    notes: dict = field(default_factory=dict)


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_cube(path: str | Path, cubes, identity: int, camera: int, notes: dict | None = None) -> Path:
    """Write three ``T x H x W x C`` branch cubes plus a JSON sidecar."""
    arrays = [np.asarray(c, dtype=np.float64) for c in cubes]
    if len(arrays) != VIEW_COUNT:
        raise ContractError(f"expected {VIEW_COUNT} branch cubes, got {len(arrays)}")
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1 or arrays[0].ndim != 4:
        raise ContractError(f"branch cubes must share one (T, H, W, C) shape, got {sorted(shapes)}")
    t, h, w, c = arrays[0].shape
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_CUBE_HEADER.pack(CUBE_MAGIC, CUBE_VERSION, t, h, w, c, VIEW_COUNT))
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    meta = {"identity": int(identity), "camera": int(camera), "notes": notes or {}}
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def read_cube_header(blob: bytes) -> tuple[int, int, int, int]:
    if len(blob) < _CUBE_HEADER.size:
        raise FormatError(f"truncated header: {len(blob)} of {_CUBE_HEADER.size} bytes", len(blob))
    magic, version, t, h, w, c, views = _CUBE_HEADER.unpack_from(blob)
    if magic != CUBE_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != CUBE_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if min(t, h, w, c) < 1:
        raise FormatError(f"non-positive extent in {(t, h, w, c)}", 6)
    if views != VIEW_COUNT:
        raise FormatError(f"view count {views}, expected {VIEW_COUNT}", 22)
    return t, h, w, c


def read_cube(path: str | Path) -> tuple[tuple[np.ndarray, np.ndarray, np.ndarray], CubeMetadata]:
    """Inverse of :func:`write_cube`; values come back as float64."""
    path = Path(path)
    blob = path.read_bytes()
    t, h, w, c = read_cube_header(blob)
    per_view = t * h * w * c
    expected = _CUBE_HEADER.size + VIEW_COUNT * per_view * 4
    if len(blob) < expected:
        raise FormatError(f"truncated payload: {len(blob)} of {expected} bytes", len(blob))
    if len(blob) > expected:
        raise FormatError(f"{len(blob) - expected} trailing bytes", expected)
    payload = np.frombuffer(blob, dtype="<f4", offset=_CUBE_HEADER.size)
    cubes = tuple(
        payload[k * per_view:(k + 1) * per_view].astype(np.float64).reshape(t, h, w, c)
        for k in range(VIEW_COUNT)
    )
    side = sidecar_path(path)
    if side.exists():
        raw = json.loads(side.read_text())
        meta = CubeMetadata(int(raw["identity"]), int(raw["camera"]), raw.get("notes", {}))
    else:
        meta = CubeMetadata(0, 0, {})
    return cubes, meta


def load_cube_dir(directory: str | Path) -> list[Tracklet]:
    """Every ``*.tmtc`` file in ``directory`` (sorted by name) as a cube tracklet."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"not a directory: {directory}")
    tracklets = []
    for path in sorted(directory.glob("*.tmtc")):
        cubes, meta = read_cube(path)
        tracklets.append(Tracklet(meta.identity, meta.camera, cubes=cubes))
    return tracklets


def save_cube_dir(directory: str | Path, tracklets: list[Tracklet], notes: dict | None = None) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for n, tr in enumerate(tracklets):
        if tr.cubes is None:
            raise ContractError("only cube tracklets can be written as cube files")
        name = f"{n:05d}_id{tr.identity:04d}_cam{tr.camera}.tmtc"
        paths.append(write_cube(directory / name, tr.cubes, tr.identity, tr.camera, notes))
    return paths
