"""Finite-difference audit of every differentiable block at small fixed shapes.

Each case builds a scalar ``sum(out * R)`` with a fixed random ``R`` so that
every output coordinate contributes, and registers the block inputs as
parameters alongside the weights.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .crossview import CrossViewBlockParams, crossview_block
from .model import OimState, oim_loss, verification_loss
from .numerics import ContractError, ParamTape, Tensor, backward, finite_diff_check, parameter, tsum
from .pooling import FeatureCube, PoolingParams, ViewFeatureSet, spatial_sa_pool, temporal_sa_pool
from .selfview import HeadConfig, PositionalEncoding, SelfViewBlockParams, selfview_block

TOLERANCE = 1e-4
FRAMES, LOCATIONS, CHANNELS, HEADS = 3, 4, 8, 2
BLOCKS = ("pooling_temporal", "pooling_spatial", "selfview", "crossview", "verification", "oim_frozen")


@dataclass
class GradcheckResult:
    block: str
    max_rel_error: float
    coordinates: int
    seconds: float
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tolerance)


def _probe(out: Tensor, rng: np.random.Generator) -> Tensor:
    return tsum(out * Tensor(rng.normal(size=out.shape)))


def _cube(rng) -> FeatureCube:
    return FeatureCube(parameter(rng.normal(size=(FRAMES, LOCATIONS, CHANNELS))), 2, LOCATIONS // 2)


def _pooling_case(pool):
    def build(rng):
        cube = _cube(rng)
        params = PoolingParams.init(CHANNELS, rng)
        tape = ParamTape([("cube", cube.values), ("projection", params.projection_weight)])
        r = rng.normal(size=pool(cube, params)[0].shape)
        return (lambda _: tsum(pool(cube, params)[0] * Tensor(r))), tape
    return build


def _selfview_case(rng):
    cfg = HeadConfig(HEADS, CHANNELS)
    length = FRAMES * LOCATIONS
    tokens = parameter(rng.normal(size=(length, CHANNELS)))
    params = SelfViewBlockParams.init(cfg, rng)
    pe = PositionalEncoding(parameter(0.1 * rng.normal(size=(length, CHANNELS))))
    tape = ParamTape([("tokens", tokens)])
    for name, value in params.named_parameters("block"):
        tape.add(name, value)
    tape.add("pe", pe.table)
    r = Tensor(rng.normal(size=(length, CHANNELS)))
    return (lambda _: tsum(selfview_block(tokens, params, pe, cfg) * r)), tape


def _crossview_case(rng):
    cfg = HeadConfig(HEADS, CHANNELS)
    views = ViewFeatureSet(
        parameter(rng.normal(size=(LOCATIONS, CHANNELS))),
        parameter(rng.normal(size=(FRAMES, CHANNELS))),
        parameter(rng.normal(size=(FRAMES * LOCATIONS, CHANNELS))),
    )
    params = CrossViewBlockParams.init(cfg, rng)
    tape = ParamTape([("view.spatial", views.spatial), ("view.temporal", views.temporal),
                      ("view.spatiotemporal", views.spatiotemporal)])
    for name, value in params.named_parameters("block"):
        tape.add(name, value)
    probes = {v: Tensor(rng.normal(size=getattr(views, v).shape)) for v in ("spatial", "temporal", "spatiotemporal")}

    def f(_):
        out = crossview_block(views, params, cfg)
        total = None
        for v, r in probes.items():
            term = tsum(getattr(out, v) * r)
            total = term if total is None else total + term
        return total
    return f, tape


def _verification_case(rng):
    dim = 3 * CHANNELS
    a = parameter(rng.normal(size=(FRAMES, dim)))
    b = parameter(rng.normal(size=(FRAMES, dim)))
    w = parameter(np.array(1.3))
    bias = parameter(np.array(-0.2))
    same = np.arange(FRAMES) % 2 == 0
    tape = ParamTape([("a", a), ("b", b), ("w", w), ("bias", bias)])
    return (lambda _: verification_loss(a, b, same, w, bias)), tape


def _oim_case(rng):
    feats = parameter(rng.normal(size=(FRAMES, CHANNELS)))
    state = OimState.init(5, CHANNELS, rng)
    labels = np.array([0, 3, 3])
    tape = ParamTape([("features", feats)])
    # the table is returned, never written back, so every evaluation sees it frozen
    return (lambda _: oim_loss(feats, labels, state)[0]), tape


CASES: dict[str, Callable] = {
    "pooling_temporal": _pooling_case(temporal_sa_pool),
    "pooling_spatial": _pooling_case(spatial_sa_pool),
    "selfview": _selfview_case,
    "crossview": _crossview_case,
    "verification": _verification_case,
    "oim_frozen": _oim_case,
}


def run_gradcheck(blocks=None, h: float = 1e-5, corrupt: str | None = None,
                  seed: int = 0) -> list[GradcheckResult]:
    """Check each requested block; ``corrupt`` names one block whose analytic
    gradient is deliberately perturbed (negative control)."""
    blocks = list(blocks or BLOCKS)
    unknown = [b for b in blocks + ([corrupt] if corrupt else []) if b not in CASES]
    if unknown:
        raise ContractError(f"unknown gradcheck block(s) {unknown}; choose from {list(BLOCKS)}")
    results = []
    for i, block in enumerate(blocks):
        started = time.perf_counter()
        rng = np.random.default_rng(seed + 1000 * i)
        f, tape = CASES[block](rng)
        analytic = None
        if block == corrupt:
            tape.zero()
            backward(f(tape), tape)
            analytic = [1.5 * g + 0.1 for g in tape.gradients]
        err = finite_diff_check(f, tape, h=h, analytic=analytic)
        results.append(GradcheckResult(block, err, tape.num_values(), time.perf_counter() - started))
    return results


def format_table(results: list[GradcheckResult]) -> str:
    lines = [f"{'block':<18} {'max_rel_error':>14} {'coords':>7}  status"]
    for r in results:
        lines.append(f"{r.block:<18} {r.max_rel_error:>14.3e} {r.coordinates:>7}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
