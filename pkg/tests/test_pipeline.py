import json

import numpy as np
import pytest
from conftest import tiny_config

from tmtreid.data import synth_generate, SynthSpec
from tmtreid.numerics import ConfigError
from tmtreid.pipeline import (
    RunConfig,
    benchmark_config,
    fit,
    prepare_split,
    resolve_model_config,
    split_by_identity,
    split_by_tracklet,
    write_metrics_csv,
)


def test_benchmark_config_matches_the_desk_spec():
    cfg = benchmark_config()
    assert (cfg.synth.num_identities, cfg.synth.tracklets_per_id, cfg.synth.frames_per_tracklet) == (16, 4, 16)
    assert (cfg.train.frames, cfg.model.channels, cfg.model.num_heads) == (4, 32, 2)
    assert (cfg.model.depth_self, cfg.model.depth_cross, cfg.train.seed) == (1, 1, 7)
    split = prepare_split(cfg)
    steps = cfg.train.epochs * -(-len(split.train) // cfg.train.batch_size)
    assert steps <= 200


def test_config_round_trip_and_errors(tmp_path):
    cfg = benchmark_config(5)
    again = RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert again.to_dict() == cfg.to_dict()
    raw = cfg.to_dict()
    raw["model"]["channels"] = 7
    raw["train"]["lr_decay_factor"] = 0.5
    raw["train"]["bogus"] = 1
    with pytest.raises(ConfigError) as err:
        RunConfig.from_dict(raw)
    assert "bogus" in str(err.value)
    del raw["train"]["bogus"]
    with pytest.raises(ConfigError) as err:
        RunConfig.from_dict(raw).check()
    assert "channels" in str(err.value) and "lr_decay_factor" in str(err.value)


def test_tracklet_split_is_closed_set():
    tracklets = synth_generate(SynthSpec(num_identities=3, tracklets_per_id=4, frames_per_tracklet=2,
                                         height=8, width=4))
    train, query, gallery = split_by_tracklet(tracklets)
    assert len(train) == 6 and len(query) == 3 and len(gallery) == 3
    assert {t.identity for t in train} == {t.identity for t in query} == {0, 1, 2}
    assert all(q.camera != g.camera for q, g in zip(query, gallery))
    ids = {id(t) for t in train} | {id(t) for t in query} | {id(t) for t in gallery}
    assert len(ids) == 12


def test_identity_split_is_disjoint():
    tracklets = synth_generate(SynthSpec(num_identities=4, tracklets_per_id=3, frames_per_tracklet=2,
                                         height=8, width=4))
    train, query, gallery = split_by_identity(tracklets)
    assert not {t.identity for t in train} & {t.identity for t in query + gallery}
    assert {t.identity for t in query} <= {t.identity for t in gallery}


def test_resolve_model_config(tiny):
    split = prepare_split(tiny)
    mcfg = resolve_model_config(tiny, split)
    assert mcfg.num_identities == 4 and not mcfg.ingest and mcfg.frames == tiny.train.frames


def test_fit_is_deterministic(tiny, tmp_path):
    a, b = fit(tiny), fit(tiny_config())
    assert a.step_losses == b.step_losses
    write_metrics_csv(tmp_path / "a.csv", a.metrics)
    write_metrics_csv(tmp_path / "b.csv", b.metrics)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert len(a.metrics) == 2 and all(np.isfinite(r["map"]) for r in a.metrics)


def test_max_steps_and_zero_epochs(tiny):
    tiny.max_steps = 1
    assert len(fit(tiny).step_losses) == 1
    none = fit(tiny_config(epochs=0))
    assert none.step_losses == [] and none.metrics == [] and 0 <= none.report.map <= 1


def test_cube_source_trains(tiny):
    tiny.data.source = "synthetic_cubes"
    result = fit(tiny.check(), eval_every_epoch=False)
    assert result.model.extractor is None and np.isfinite(result.report.map)
