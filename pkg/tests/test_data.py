import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmtreid.data import (
    FormatError,
    SynthSpec,
    Tracklet,
    load_cube_dir,
    read_cube,
    rrs_indices,
    rrs_sample,
    save_cube_dir,
    synth_generate,
    synth_generate_cubes,
    write_cube,
)
from tmtreid.numerics import ConfigError, ContractError


# ---------------------------------------------------------------- RRS


def test_rrs_examples():
    assert rrs_indices(8, 8, "test") == list(range(8))
    assert rrs_indices(16, 8, "test") == [0, 2, 4, 6, 8, 10, 12, 14]
    assert rrs_indices(3, 8, "test") == [0, 1, 2, 0, 1, 2, 0, 1]
    # 10 frames in 4 chunks: sizes 2, 2, 2 and a last chunk of 4
    assert rrs_indices(10, 4, "test") == [0, 2, 4, 6]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 12), st.integers(0, 2**31))
def test_rrs_train_draws_one_frame_per_chunk(total, length, seed):
    idx = rrs_indices(total, length, "train", np.random.default_rng(seed))
    assert len(idx) == length
    if total >= length:
        size = total // length
        for k, i in enumerate(idx):
            stop = total if k == length - 1 else (k + 1) * size
            assert k * size <= i < stop
        assert all(a < b for a, b in zip(idx, idx[1:]))
    else:
        assert all(0 <= i < total for i in idx)
    assert rrs_indices(total, length, "test") == rrs_indices(total, length, "test")


def test_rrs_contract_errors():
    with pytest.raises(ContractError):
        rrs_indices(0, 4, "test")
    with pytest.raises(ContractError):
        rrs_indices(4, 0, "test")
    with pytest.raises(ContractError):
        rrs_indices(4, 2, "train")
    with pytest.raises(ContractError):
        rrs_indices(4, 2, "shuffle")


def test_rrs_sample_on_frames_and_cubes():
    frames = np.arange(16, dtype=float)[:, None, None, None] * np.ones((16, 2, 2, 3))
    clip = rrs_sample(Tracklet(0, 0, frames=frames), 4, "test")
    assert clip[:, 0, 0, 0].tolist() == [0, 4, 8, 12]
    cubes = tuple(frames + v for v in range(3))
    clip = rrs_sample(Tracklet(0, 0, cubes=cubes), 4, "test")
    assert [c[:, 0, 0, 0].tolist() for c in clip] == [[0, 4, 8, 12], [1, 5, 9, 13], [2, 6, 10, 14]]


def test_tracklet_contract():
    with pytest.raises(ContractError):
        Tracklet(-1, 0, frames=np.zeros((1, 2, 2, 3)))
    with pytest.raises(ContractError):
        Tracklet(0, 0)


# ---------------------------------------------------------------- synthetic data


def small_spec(**kw) -> SynthSpec:
    base = dict(num_identities=4, tracklets_per_id=3, frames_per_tracklet=5, height=16, width=8)
    base.update(kw)
    return SynthSpec(**base)


def test_synth_is_deterministic():
    a, b = synth_generate(small_spec()), synth_generate(small_spec())
    assert all(x.frames.tobytes() == y.frames.tobytes() for x, y in zip(a, b))
    c = synth_generate(small_spec(seed=8))
    assert a[0].frames.tobytes() != c[0].frames.tobytes()


def test_synth_structure():
    out = synth_generate(small_spec())
    assert len(out) == 12
    assert [t.identity for t in out] == [0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]
    assert [t.camera for t in out[:3]] == [0, 1, 0]
    for t in out:
        assert t.frames.shape == (5, 16, 8, 3)
        assert t.frames.min() >= 0 and t.frames.max() <= 1


def test_zero_noise_frames_are_identical():
    out = synth_generate(small_spec(noise_std=0.0))
    for t in out:
        assert np.all(t.frames == t.frames[0])
    # the per-tracklet brightness offset is the only other perturbation
    flat = synth_generate(small_spec(noise_std=0.0, brightness_std=0.0))
    for pid in range(4):
        group = [t.frames for t in flat if t.identity == pid]
        assert all(np.array_equal(g, group[0]) for g in group)


def test_templates_are_separated_over_100_seeds():
    worst = 1.0
    for seed in range(100):
        spec = SynthSpec(noise_std=0.0, brightness_std=0.0, tracklets_per_id=1, frames_per_tracklet=1, seed=seed)
        templates = np.stack([t.frames[0] for t in synth_generate(spec)])
        diff = np.abs(templates[:, None] - templates[None, :]) > 0.1
        frac = diff.mean(axis=(2, 3, 4))
        worst = min(worst, frac[np.triu_indices(len(templates), k=1)].min())
    assert worst >= 0.1


def test_spec_validation_and_file(tmp_path):
    with pytest.raises(ConfigError):
        synth_generate(small_spec(num_identities=0))
    path = tmp_path / "spec.json"
    path.write_text(json.dumps({"num_identities": 5, "seed": 3}))
    spec = SynthSpec.from_file(path)
    assert spec.num_identities == 5 and spec.seed == 3 and spec.frames_per_tracklet == 16
    path.write_text(json.dumps({"identities": 5}))
    with pytest.raises(ConfigError):
        SynthSpec.from_file(path)


def test_synth_cubes_shapes():
    out = synth_generate_cubes(small_spec(), 2, 3, 8)
    assert len(out) == 12 and out[0].is_cube
    assert all(c.shape == (5, 2, 3, 8) for c in out[0].cubes)


# ---------------------------------------------------------------- cube files


def test_cube_round_trip_100_shapes(tmp_path):
    rng = np.random.default_rng(0)
    for n in range(100):
        shape = tuple(int(v) for v in rng.integers(1, 6, size=4))
        cubes = tuple(rng.normal(size=shape) * 10 ** rng.uniform(-3, 3) for _ in range(3))
        path = write_cube(tmp_path / f"c{n}.tmtc", cubes, identity=n, camera=n % 3, notes={"n": n})
        back, meta = read_cube(path)
        assert (meta.identity, meta.camera, meta.notes) == (n, n % 3, {"n": n})
        for a, b in zip(cubes, back):
            assert b.shape == shape and b.dtype == np.float64
            np.testing.assert_array_equal(b, a.astype(np.float32).astype(np.float64))


def test_minimal_cube(tmp_path):
    path = write_cube(tmp_path / "m.tmtc", [np.full((1, 1, 1, 1), v) for v in (1.0, 2.0, 3.0)], 0, 0)
    assert path.stat().st_size == 26 + 3 * 4
    cubes, _ = read_cube(path)
    assert [c.item() for c in cubes] == [1.0, 2.0, 3.0]


def test_cube_layout_is_row_major_little_endian(tmp_path):
    arr = np.arange(2 * 1 * 2 * 3, dtype=float).reshape(2, 1, 2, 3)
    path = write_cube(tmp_path / "l.tmtc", [arr, arr + 100, arr + 200], 1, 1)
    blob = path.read_bytes()
    assert blob[:4] == b"TMTC"
    assert int.from_bytes(blob[4:6], "little") == 1
    assert [int.from_bytes(blob[6 + 4 * i:10 + 4 * i], "little") for i in range(5)] == [2, 1, 2, 3, 3]
    payload = np.frombuffer(blob[26:], dtype="<f4")
    np.testing.assert_array_equal(payload, np.concatenate([arr.ravel(), arr.ravel() + 100, arr.ravel() + 200]))


def test_cube_truncation_and_bad_magic(tmp_path):
    rng = np.random.default_rng(1)
    path = write_cube(tmp_path / "t.tmtc", [rng.normal(size=(2, 2, 2, 4)) for _ in range(3)], 0, 0)
    blob = path.read_bytes()
    bad = tmp_path / "bad.tmtc"
    for cut in (0, 3, 10, 25, 26, len(blob) - 1):
        bad.write_bytes(blob[:cut])
        with pytest.raises(FormatError) as err:
            read_cube(bad)
        assert err.value.offset == cut
        assert "truncated" in str(err.value)
    bad.write_bytes(b"TMTX" + blob[4:])
    with pytest.raises(FormatError, match="magic") as err:
        read_cube(bad)
    assert err.value.offset == 0
    bad.write_bytes(blob[:4] + (2).to_bytes(2, "little") + blob[6:])
    with pytest.raises(FormatError, match="version"):
        read_cube(bad)
    bad.write_bytes(blob + b"\0\0\0\0")
    with pytest.raises(FormatError, match="trailing"):
        read_cube(bad)


def test_write_cube_rejects_inconsistent_shapes(tmp_path):
    with pytest.raises(ContractError):
        write_cube(tmp_path / "x.tmtc", [np.zeros((1, 2, 2, 3)), np.zeros((1, 2, 2, 3)), np.zeros((2, 2, 2, 3))], 0, 0)
    with pytest.raises(ContractError):
        write_cube(tmp_path / "x.tmtc", [np.zeros((1, 2, 2, 3))] * 2, 0, 0)


def test_cube_directory_round_trip(tmp_path):
    tracklets = synth_generate_cubes(small_spec(), 2, 2, 4)
    save_cube_dir(tmp_path / "d", tracklets)
    back = load_cube_dir(tmp_path / "d")
    assert [(t.identity, t.camera) for t in back] == [(t.identity, t.camera) for t in tracklets]
    np.testing.assert_array_equal(back[5].cubes[2], tracklets[5].cubes[2].astype(np.float32))
    with pytest.raises(FileNotFoundError):
        load_cube_dir(tmp_path / "missing")
