"""Cross-view transformer: every view attends to the other two and fuses additively."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import ConfigError, DimensionError, Tensor, layer_norm, linear, parameter, relu
from .pooling import VIEW_NAMES, ViewFeatureSet
from .selfview import HeadConfig, attend, init_head_stack, init_square, merge_heads, project_heads


def other_views(target: str) -> tuple[str, str]:
    return tuple(v for v in VIEW_NAMES if v != target)


def pair_key(target: str, source: str) -> str:
    return f"{target}<-{source}"


@dataclass
class CrossViewBlockParams:
    """Projection stacks for one cross-view block.

    ``queries`` is keyed by ``"target<-source"``.  ``keys``/``values`` are keyed
    the same way, or by source view alone when ``share_kv_across_targets``.
    FFN and norm parameters are keyed by view.
    """

    queries: dict[str, Tensor]
    keys: dict[str, Tensor]
    values: dict[str, Tensor]
    ffn_w3: dict[str, Tensor]
    ffn_w4: dict[str, Tensor]
    norm1_gain: dict[str, Tensor]
    norm1_bias: dict[str, Tensor]
    norm2_gain: dict[str, Tensor]
    norm2_bias: dict[str, Tensor]
    share_kv_across_targets: bool = field(default=False)

    @classmethod
    def init(cls, cfg: HeadConfig, rng: np.random.Generator, share_kv_across_targets: bool = False):
        c = cfg.channels
        pairs = [pair_key(t, s) for t in VIEW_NAMES for s in other_views(t)]
        kv_keys = list(VIEW_NAMES) if share_kv_across_targets else pairs
        return cls(
            queries={k: init_head_stack(cfg, rng) for k in pairs},
            keys={k: init_head_stack(cfg, rng) for k in kv_keys},
            values={k: init_head_stack(cfg, rng) for k in kv_keys},
            ffn_w3={v: init_square(c, rng) for v in VIEW_NAMES},
            ffn_w4={v: init_square(c, rng) for v in VIEW_NAMES},
            norm1_gain={v: parameter(np.ones(c)) for v in VIEW_NAMES},
            norm1_bias={v: parameter(np.zeros(c)) for v in VIEW_NAMES},
            norm2_gain={v: parameter(np.ones(c)) for v in VIEW_NAMES},
            norm2_bias={v: parameter(np.zeros(c)) for v in VIEW_NAMES},
            share_kv_across_targets=share_kv_across_targets,
        )

    def kv_key(self, target: str, source: str) -> str:
        return source if self.share_kv_across_targets else pair_key(target, source)

    def projections(self, target: str, source: str) -> tuple[Tensor, Tensor, Tensor]:
        kv = self.kv_key(target, source)
        return self.queries[pair_key(target, source)], self.keys[kv], self.values[kv]

    def named_parameters(self, prefix: str):
        for group in ("queries", "keys", "values", "ffn_w3", "ffn_w4",
                      "norm1_gain", "norm1_bias", "norm2_gain", "norm2_bias"):
            for key, value in getattr(self, group).items():
                yield f"{prefix}.{group}[{key}]", value


def cross_attention(
    target_tokens: Tensor,
    source_tokens: Tensor,
    q_w: Tensor,
    k_w: Tensor,
    v_w: Tensor,
    cfg: HeadConfig,
) -> Tensor:
    """Target tokens query the source view; output has the target's token count."""
    if target_tokens.shape[-1] != cfg.channels or source_tokens.shape[-1] != cfg.channels:
        raise DimensionError(
            f"cross attention channel mismatch: target {target_tokens.shape}, "
            f"source {source_tokens.shape}, expected {cfg.channels}"
        )
    expected = (cfg.num_heads, cfg.channels, cfg.head_dim)
    for stack in (q_w, k_w, v_w):
        if stack.shape != expected:
            raise ConfigError(f"head projection stack {stack.shape} does not match {expected}")
    q = project_heads(target_tokens, q_w)
    k = project_heads(source_tokens, k_w)
    v = project_heads(source_tokens, v_w)
    return merge_heads(attend(q, k, v, cfg.head_dim))


def update_view(
    views: ViewFeatureSet,
    target: str,
    params: CrossViewBlockParams,
    cfg: HeadConfig,
    literal_eq12: bool = False,
) -> Tensor:
    """New tokens for ``target``, reading only the given snapshot."""
    x = getattr(views, target)
    fused = x
    for source in other_views(target):
        fused = fused + cross_attention(x, getattr(views, source), *params.projections(target, source), cfg)
    x = layer_norm(fused, params.norm1_gain[target], params.norm1_bias[target])
    ffn = linear(relu(linear(x, params.ffn_w3[target])), params.ffn_w4[target])
    if literal_eq12:
        return ffn
    return layer_norm(x + ffn, params.norm2_gain[target], params.norm2_bias[target])


def crossview_block(
    views: ViewFeatureSet,
    params: CrossViewBlockParams,
    cfg: HeadConfig,
    literal_eq12: bool = False,
) -> ViewFeatureSet:
    updated = {v: update_view(views, v, params, cfg, literal_eq12) for v in VIEW_NAMES}
    return ViewFeatureSet(**updated)


def crossview_stack(
    views: ViewFeatureSet,
    params_list: list[CrossViewBlockParams],
    cfg: HeadConfig,
    literal_eq12: bool = False,
) -> ViewFeatureSet:
    if not params_list:
        raise ConfigError("cross-view stack needs at least one block")
    for params in params_list:
        views = crossview_block(views, params, cfg, literal_eq12)
    return views
