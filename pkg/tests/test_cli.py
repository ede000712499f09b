import csv
import json

import numpy as np
import pytest
from conftest import tiny_config

from tmtreid.cli import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_VALIDATION, bench_settings, main, run_bench, summarize_bench
from tmtreid.model import load_checkpoint


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.json"
    path.write_text(json.dumps(tiny_config().to_dict()))
    return path


def train(out, config_file, *extra):
    return main(["train", "--config", str(config_file), "--out", str(out), "--quiet", *extra])


def test_train_writes_artifacts_and_is_deterministic(tmp_path, config_file):
    assert train(tmp_path / "a", config_file) == EXIT_OK
    assert train(tmp_path / "b", config_file) == EXIT_OK
    for name in ("checkpoint.tmtk", "metrics.csv", "report.json", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a" / "metrics.csv")))
    assert [r["epoch"] for r in rows] == ["0", "1"]
    assert set(rows[0]) == {"epoch", "steps", "lr", "loss", "rank1", "map"}
    assert train(tmp_path / "c", config_file, "--seed", "4") == EXIT_OK
    assert (tmp_path / "a" / "checkpoint.tmtk").read_bytes() != (tmp_path / "c" / "checkpoint.tmtk").read_bytes()


def test_zero_epochs_writes_initialisation(tmp_path, config_file):
    assert train(tmp_path / "z", config_file, "--epochs", "0") == EXIT_OK
    model, header = load_checkpoint(tmp_path / "z" / "checkpoint.tmtk")
    assert header["config"]["train"]["epochs"] == 0
    rows = (tmp_path / "z" / "metrics.csv").read_text().splitlines()
    assert rows == ["epoch,steps,lr,loss,rank1,map"]


def test_eval_reproduces_training_report(tmp_path, config_file, capsys):
    train(tmp_path / "r", config_file)
    trained = json.loads((tmp_path / "r" / "report.json").read_text())
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(tmp_path / "r" / "checkpoint.tmtk"), "--out", str(tmp_path / "e")]) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    # the checkpoint stores float32, so only near-equality is expected
    assert abs(report["map"] - trained["map"]) < 0.05
    assert (tmp_path / "e" / "per_query_ap.csv").exists()


def test_eval_on_cube_directories(tmp_path, config_file, capsys):
    assert main(["synth-cubes", "--config", str(config_file), "--out", str(tmp_path / "cubes")]) == EXIT_OK
    ingest = tmp_path / "cubes" / "config.json"
    assert main(["train", "--config", str(ingest), "--out", str(tmp_path / "m"), "--quiet"]) == EXIT_OK
    ckpt = str(tmp_path / "m" / "checkpoint.tmtk")
    q, g = str(tmp_path / "cubes" / "query"), str(tmp_path / "cubes" / "gallery")
    capsys.readouterr()
    assert main(["eval", "--checkpoint", ckpt, "--query", q, "--gallery", q, "--single-gallery"]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["rank1"] == 1.0
    assert main(["eval", "--checkpoint", ckpt, "--query", q, "--gallery", g, "--view", "st"]) == EXIT_OK
    (tmp_path / "empty").mkdir()
    assert main(["eval", "--checkpoint", ckpt, "--query", str(tmp_path / "empty"), "--gallery", g]) == EXIT_VALIDATION
    assert main(["eval", "--checkpoint", ckpt, "--query", q]) == EXIT_VALIDATION
    # an image-trained checkpoint cannot read cube directories
    train(tmp_path / "img", config_file, "--epochs", "0")
    img = str(tmp_path / "img" / "checkpoint.tmtk")
    assert main(["eval", "--checkpoint", img, "--query", q, "--gallery", g]) == EXIT_VALIDATION


def test_inspect(tmp_path, config_file, capsys):
    main(["synth-cubes", "--config", str(config_file), "--out", str(tmp_path / "c")])
    cube = sorted((tmp_path / "c" / "query").glob("*.tmtc"))[0]
    capsys.readouterr()
    assert main(["inspect", str(cube)]) == EXIT_OK
    info = json.loads(capsys.readouterr().out)
    assert info["kind"] == "cube" and info["shape"] == [8, 8, 4, 8]
    train(tmp_path / "t", config_file, "--epochs", "0")
    capsys.readouterr()
    assert main(["inspect", str(tmp_path / "t" / "checkpoint.tmtk")]) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["kind"] == "checkpoint"


def test_exit_codes(tmp_path, config_file):
    assert main([]) == EXIT_VALIDATION
    assert main(["train", "--bogus"]) == EXIT_VALIDATION
    assert main(["bench", "--axis", "colour"]) == EXIT_VALIDATION
    assert main(["bench", "--axis", "cross_on_off", "--values", "maybe"]) == EXIT_VALIDATION
    assert main(["inspect", str(tmp_path / "missing.tmtc")]) == EXIT_IO
    bad = tmp_path / "bad.tmtc"
    bad.write_bytes(b"NOPE" + bytes(40))
    assert main(["inspect", str(bad)]) == EXIT_IO
    broken = tmp_path / "broken.json"
    broken.write_text(json.dumps({"model": {"channels": 7}, "train": {"lr": -1}}))
    assert main(["train", "--config", str(broken), "--out", str(tmp_path / "never")]) == EXIT_VALIDATION
    assert not (tmp_path / "never").exists()
    assert train(tmp_path / "t", config_file, "--T", "0") == EXIT_VALIDATION


def test_non_finite_training_exits_numeric(tmp_path):
    cfg = tiny_config(lr=1e30, grad_clip_norm=None, epochs=6)
    path = tmp_path / "diverge.json"
    path.write_text(json.dumps(cfg.to_dict()))
    with np.errstate(all="ignore"):
        assert main(["train", "--config", str(path), "--out", str(tmp_path / "d"), "--quiet"]) == EXIT_NUMERIC


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--blocks", "pooling_temporal", "verification"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("PASS") == 2
    assert main(["gradcheck", "--blocks", "selfview", "verification", "--corrupt", "selfview"]) == EXIT_NUMERIC
    lines = capsys.readouterr().out.splitlines()
    assert "FAIL" in lines[1] and "PASS" in lines[2]


def test_bench_settings():
    assert [v for v, _ in bench_settings("T", None)] == ["6", "8", "10", "12"]
    assert bench_settings("cross_on_off", None) == [("on", {"variant": "full"}), ("off", {"variant": "selfview"})]
    assert bench_settings("views", ["st"]) == [("st", {"view": "spatiotemporal"})]


def test_bench_cross_on_off_gives_two_rows(tmp_path, config_file, capsys):
    assert main(["bench", "--config", str(config_file), "--axis", "cross_on_off", "--out", str(tmp_path)]) == EXIT_OK
    rows = list(csv.DictReader(open(tmp_path / "bench_cross_on_off.csv")))
    assert [r["value"] for r in rows] == ["on", "off"]
    summary = list(csv.DictReader(open(tmp_path / "bench_cross_on_off_summary.csv")))
    assert len(summary) == 2 and summary[0]["seeds"] == "1"


def test_bench_views_is_deterministic_and_trains_once_per_seed():
    base = tiny_config()
    rows = run_bench(base, "views", seeds=2, log=None)
    assert len(rows) == 8 and [r["seed"] for r in rows[:4]] == [3] * 4
    again = run_bench(base, "views", seeds=2, log=None)
    assert [r["map"] for r in rows] == [r["map"] for r in again]
    summary = summarize_bench(rows)
    assert [s["value"] for s in summary] == ["spatial", "temporal", "st", "all"]
    assert all(s["seeds"] == 2 for s in summary)
