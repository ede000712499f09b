"""Per-view transformer blocks: positional encoding, multi-head self-attention, FFN."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    ConfigError,
    DimensionError,
    Tensor,
    layer_norm,
    linear,
    matmul,
    parameter,
    relu,
    softmax,
    swap_last,
)


@dataclass(frozen=True)
class HeadConfig:
    num_heads: int
    channels: int

    def __post_init__(self):
        if self.num_heads < 1 or self.channels < 1:
            raise ConfigError(f"heads and channels must be positive: {self}")
        if self.channels % self.num_heads:
            raise ConfigError(f"{self.channels} channels do not split into {self.num_heads} heads")

    @property
    def head_dim(self) -> int:
        return self.channels // self.num_heads


def init_head_stack(cfg: HeadConfig, rng: np.random.Generator) -> Tensor:
    """``N_h x C x d`` projection stack, uniform in ``±1/sqrt(C)``."""
    bound = 1.0 / math.sqrt(cfg.channels)
    return parameter(rng.uniform(-bound, bound, size=(cfg.num_heads, cfg.channels, cfg.head_dim)))


def init_square(channels: int, rng: np.random.Generator) -> Tensor:
    bound = 1.0 / math.sqrt(channels)
    return parameter(rng.uniform(-bound, bound, size=(channels, channels)))


@dataclass
class SelfViewBlockParams:
    q_weight: Tensor
    k_weight: Tensor
    v_weight: Tensor
    ffn_w1: Tensor
    ffn_w2: Tensor
    norm1_gain: Tensor
    norm1_bias: Tensor
    norm2_gain: Tensor
    norm2_bias: Tensor

    @classmethod
    def init(cls, cfg: HeadConfig, rng: np.random.Generator) -> "SelfViewBlockParams":
        c = cfg.channels
        return cls(
            q_weight=init_head_stack(cfg, rng),
            k_weight=init_head_stack(cfg, rng),
            v_weight=init_head_stack(cfg, rng),
            ffn_w1=init_square(c, rng),
            ffn_w2=init_square(c, rng),
            norm1_gain=parameter(np.ones(c)),
            norm1_bias=parameter(np.zeros(c)),
            norm2_gain=parameter(np.ones(c)),
            norm2_bias=parameter(np.zeros(c)),
        )

    def named_parameters(self, prefix: str):
        for name, value in vars(self).items():
            yield f"{prefix}.{name}", value


@dataclass
class PositionalEncoding:
    """Trainable ``L x C`` table, zero at initialisation."""

    table: Tensor

    @classmethod
    def init(cls, length: int, channels: int) -> "PositionalEncoding":
        return cls(parameter(np.zeros((length, channels))))

    def named_parameters(self, prefix: str):
        yield f"{prefix}.table", self.table


def _check_heads(cfg: HeadConfig, *stacks: Tensor) -> None:
    expected = (cfg.num_heads, cfg.channels, cfg.head_dim)
    for stack in stacks:
        if stack.shape != expected:
            raise ConfigError(f"head projection stack {stack.shape} does not match {expected}")


def attend(queries: Tensor, keys: Tensor, values: Tensor, head_dim: int) -> Tensor:
    """``softmax(Q K^T / sqrt(d)) V`` over the last two axes."""
    logits = matmul(queries, swap_last(keys)) * (1.0 / math.sqrt(head_dim))
    return matmul(softmax(logits, axis=-1), values)


def merge_heads(heads: Tensor) -> Tensor:
    """``(..., N_h, L, d) -> (..., L, N_h * d)``, heads side by side."""
    nd = heads.ndim
    axes = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
    moved = heads.transpose(*axes)
    return moved.reshape(*moved.shape[:-2], moved.shape[-2] * moved.shape[-1])


def project_heads(tokens: Tensor, stack: Tensor) -> Tensor:
    """``(..., L, C) x (N_h, C, d) -> (..., N_h, L, d)``."""
    expanded = tokens.reshape(*tokens.shape[:-2], 1, *tokens.shape[-2:])
    return matmul(expanded, stack)


def multi_head_self_attention(tokens: Tensor, params: SelfViewBlockParams, cfg: HeadConfig) -> Tensor:
    if tokens.shape[-1] != cfg.channels:
        raise DimensionError(f"tokens {tokens.shape} do not have {cfg.channels} channels")
    _check_heads(cfg, params.q_weight, params.k_weight, params.v_weight)
    q = project_heads(tokens, params.q_weight)
    k = project_heads(tokens, params.k_weight)
    v = project_heads(tokens, params.v_weight)
    return merge_heads(attend(q, k, v, cfg.head_dim))


def selfview_block(
    tokens: Tensor,
    params: SelfViewBlockParams,
    pe: PositionalEncoding | None,
    cfg: HeadConfig,
    use_pe: bool = True,
    literal_eq8: bool = False,
) -> Tensor:
    """One post-norm block.

    With ``literal_eq8`` the FFN output replaces the stream (no residual, no
    second norm); otherwise ``layer_norm(x + W2 relu(W1 x))``.
    """
    x = tokens
    if use_pe and pe is not None:
        if pe.table.shape != tokens.shape[-2:]:
            raise DimensionError(
                f"positional table {pe.table.shape} does not match tokens {tokens.shape[-2:]}"
            )
        x = x + pe.table
    x = layer_norm(x + multi_head_self_attention(x, params, cfg), params.norm1_gain, params.norm1_bias)
    ffn = linear(relu(linear(x, params.ffn_w1)), params.ffn_w2)
    if literal_eq8:
        return ffn
    return layer_norm(x + ffn, params.norm2_gain, params.norm2_bias)


def selfview_stack(
    tokens: Tensor,
    params_list: list[SelfViewBlockParams],
    pe: PositionalEncoding | None,
    cfg: HeadConfig,
    use_pe: bool = True,
    literal_eq8: bool = False,
) -> Tensor:
    """Apply blocks in order; the positional table is added once, before the first."""
    if not params_list:
        raise ConfigError("self-view stack needs at least one block")
    x = tokens
    for depth, params in enumerate(params_list):
        x = selfview_block(x, params, pe, cfg, use_pe=use_pe and depth == 0, literal_eq8=literal_eq8)
    return x
