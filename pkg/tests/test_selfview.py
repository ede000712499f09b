import math

import numpy as np
import pytest

import oracles
from tmtreid.numerics import ConfigError, DimensionError, ParamTape, Tensor, finite_diff_check, layer_norm, parameter, tsum
from tmtreid.selfview import (
    HeadConfig,
    PositionalEncoding,
    SelfViewBlockParams,
    multi_head_self_attention,
    selfview_block,
    selfview_stack,
)


def oracle_params(p: SelfViewBlockParams) -> dict:
    return {name: value.data.tolist() for name, value in vars(p).items()}


def randomize_norms(p: SelfViewBlockParams, rng) -> SelfViewBlockParams:
    for name in ("norm1_gain", "norm2_gain"):
        getattr(p, name).data[...] = rng.uniform(0.5, 1.5, p.norm1_gain.shape)
    for name in ("norm1_bias", "norm2_bias"):
        getattr(p, name).data[...] = rng.normal(size=p.norm1_gain.shape) * 0.1
    return p


def test_head_config_validation():
    assert HeadConfig(2, 8).head_dim == 4
    with pytest.raises(ConfigError):
        HeadConfig(3, 8)
    with pytest.raises(ConfigError):
        HeadConfig(0, 8)


def test_single_token_attends_to_itself():
    rng = np.random.default_rng(0)
    cfg = HeadConfig(2, 8)
    p = SelfViewBlockParams.init(cfg, rng)
    x = rng.normal(size=(1, 8))
    out = multi_head_self_attention(Tensor(x), p, cfg).data
    expected = np.concatenate([x @ p.v_weight.data[h] for h in range(2)], axis=1)
    np.testing.assert_allclose(out, expected, atol=1e-14)


def test_two_token_hand_computation():
    cfg = HeadConfig(1, 2)
    p = SelfViewBlockParams.init(cfg, np.random.default_rng(0))
    p.q_weight.data[0] = np.eye(2)
    p.k_weight.data[0] = np.eye(2)
    p.v_weight.data[0] = [[1.0, 0.0], [0.0, 2.0]]
    x = np.array([[1.0, 0.0], [0.0, 1.0]])
    out = multi_head_self_attention(Tensor(x), p, cfg).data
    e = math.exp(1 / math.sqrt(2))
    a, b = e / (e + 1), 1 / (e + 1)
    np.testing.assert_allclose(out, [[a, 2 * b], [b, 2 * a]], atol=1e-15)


def test_heads_decompose():
    rng = np.random.default_rng(1)
    cfg = HeadConfig(2, 8)
    p = SelfViewBlockParams.init(cfg, rng)
    x = Tensor(rng.normal(size=(5, 8)))
    both = multi_head_self_attention(x, p, cfg).data
    for h in range(2):
        # one head of width 4 using the h-th projection slice
        q, k, v = (getattr(p, n).data[h] for n in ("q_weight", "k_weight", "v_weight"))
        ref = oracles.attention_head(x.data.tolist(), x.data.tolist(), q.tolist(), k.tolist(), v.tolist())
        assert oracles.max_abs_diff(both[:, 4 * h:4 * h + 4].tolist(), ref) < 1e-12


@pytest.mark.parametrize("seed", range(20))
def test_mhsa_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    cfg = HeadConfig(2, 8)
    p = SelfViewBlockParams.init(cfg, rng)
    x = rng.normal(size=(4, 8))
    ref = oracles.multi_head(x.tolist(), x.tolist(), *(getattr(p, n).data.tolist() for n in ("q_weight", "k_weight", "v_weight")))
    assert oracles.max_abs_diff(multi_head_self_attention(Tensor(x), p, cfg).data.tolist(), ref) < 1e-12


@pytest.mark.parametrize("literal", [False, True])
@pytest.mark.parametrize("seed", range(20))
def test_block_matches_loop_oracle(seed, literal):
    rng = np.random.default_rng(100 + seed)
    cfg = HeadConfig(2, 8)
    p = randomize_norms(SelfViewBlockParams.init(cfg, rng), rng)
    pe = PositionalEncoding(Tensor(rng.normal(size=(4, 8)) * 0.3))
    x = rng.normal(size=(4, 8))
    out = selfview_block(Tensor(x), p, pe, cfg, literal_eq8=literal).data
    ref = oracles.selfview_block(x.tolist(), oracle_params(p), pe.table.data.tolist(), literal_eq8=literal)
    assert oracles.max_abs_diff(out.tolist(), ref) < 1e-12


def test_zero_weights_reduce_to_double_layer_norm():
    cfg = HeadConfig(2, 8)
    p = SelfViewBlockParams.init(cfg, np.random.default_rng(0))
    for name in ("q_weight", "k_weight", "v_weight", "ffn_w1", "ffn_w2"):
        getattr(p, name).data[...] = 0.0
    x = Tensor(np.random.default_rng(1).normal(size=(5, 8)) * 3 + 1)
    ones, zeros = Tensor(np.ones(8)), Tensor(np.zeros(8))
    out = selfview_block(x, p, None, cfg, use_pe=False)
    np.testing.assert_allclose(out.data, layer_norm(layer_norm(x, ones, zeros), ones, zeros).data, atol=1e-14)
    assert out.shape == (5, 8)


def test_permutation_equivariance_without_pe_and_broken_with_pe():
    rng = np.random.default_rng(2)
    cfg = HeadConfig(2, 8)
    blocks = [SelfViewBlockParams.init(cfg, rng) for _ in range(2)]
    pe = PositionalEncoding(Tensor(rng.normal(size=(6, 8))))
    x = rng.normal(size=(6, 8))
    perm = rng.permutation(6)
    out = selfview_stack(Tensor(x), blocks, pe, cfg, use_pe=False).data
    moved = selfview_stack(Tensor(x[perm]), blocks, pe, cfg, use_pe=False).data
    np.testing.assert_allclose(moved, out[perm], atol=1e-12)
    out = selfview_stack(Tensor(x), blocks, pe, cfg, use_pe=True).data
    moved = selfview_stack(Tensor(x[perm]), blocks, pe, cfg, use_pe=True).data
    assert np.max(np.abs(moved - out[perm])) > 1e-3


def test_stack_composition_and_pe_added_once():
    rng = np.random.default_rng(3)
    cfg = HeadConfig(2, 8)
    blocks = [SelfViewBlockParams.init(cfg, rng) for _ in range(3)]
    pe = PositionalEncoding(Tensor(rng.normal(size=(4, 8))))
    x = Tensor(rng.normal(size=(4, 8)))
    np.testing.assert_array_equal(
        selfview_stack(x, blocks[:1], pe, cfg).data, selfview_block(x, blocks[0], pe, cfg).data
    )
    manual = selfview_block(x, blocks[0], pe, cfg)
    for b in blocks[1:]:
        manual = selfview_block(manual, b, pe, cfg, use_pe=False)
    np.testing.assert_array_equal(selfview_stack(x, blocks, pe, cfg).data, manual.data)
    with pytest.raises(ConfigError):
        selfview_stack(x, [], pe, cfg)


def test_pe_length_mismatch():
    cfg = HeadConfig(2, 8)
    p = SelfViewBlockParams.init(cfg, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        selfview_block(Tensor(np.ones((4, 8))), p, PositionalEncoding.init(5, 8), cfg)


def test_pe_initialised_to_zero():
    assert np.all(PositionalEncoding.init(6, 8).table.data == 0)


def test_stack_gradients():
    rng = np.random.default_rng(4)
    cfg = HeadConfig(2, 8)
    blocks = [SelfViewBlockParams.init(cfg, rng) for _ in range(2)]
    pe = PositionalEncoding(parameter(rng.normal(size=(3, 8)) * 0.1))
    x = parameter(rng.normal(size=(3, 8)))
    tape = ParamTape([("x", x), ("pe", pe.table)])
    for i, b in enumerate(blocks):
        for name, value in b.named_parameters(f"b{i}"):
            tape.add(name, value)
    r = Tensor(rng.normal(size=(3, 8)))
    assert finite_diff_check(lambda _: tsum(selfview_stack(x, blocks, pe, cfg) * r), tape) < 1e-4
