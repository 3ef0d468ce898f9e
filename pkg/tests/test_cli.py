import json

import numpy as np
import pytest

from permflow import cli, config as cfg_mod, flow, tasks

TINY_CONFIG = """
[task]
name = "boxes-cond"

[model]
single_layers = 2
single_hidden = 8
pair_layers = 2
pair_hidden = 8
embed_layers = 2
embed_channels = 2
embed_width = 6
seed = 1

[solver]
n_steps = 6

[train]
batch_size = 32
epochs = 0
lr = 0.002
"""


def _write_dataset(tmp_path, name="data", task="boxes-cond", count=12, seed=0, n_min=2, n_max=3,
                   n_prohibited=2):
    out = tmp_path / name
    rc = cli.main([
        "gen-data", "--task", task, "--n-min", str(n_min), "--n-max", str(n_max),
        "--count", str(count), "--seed", str(seed), "--n-prohibited", str(n_prohibited),
        "--out", str(out),
    ])
    assert rc == 0
    return out / "dataset.ndjson"


def test_gen_data_empty_dataset(tmp_path):
    rc = cli.main([
        "gen-data", "--task", "bbox", "--n-min", "1", "--n-max", "1",
        "--count", "0", "--out", str(tmp_path / "d"),
    ])
    assert rc == 0
    assert (tmp_path / "d" / "dataset.ndjson").read_text() == ""
    man = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert man["count"] == 0 and man["format"] == tasks.MANIFEST_FORMAT


def test_gen_data_deterministic(tmp_path):
    p1 = _write_dataset(tmp_path, "a", seed=5)
    p2 = _write_dataset(tmp_path, "b", seed=5)
    assert p1.read_bytes() == p2.read_bytes()
    man1 = json.loads((p1.parent / "manifest.json").read_text())
    man2 = json.loads((p2.parent / "manifest.json").read_text())
    assert man1 == man2


def test_gen_data_records_are_invariant_clean(tmp_path):
    path = _write_dataset(tmp_path, "c", count=50, n_min=5, n_max=5, n_prohibited=3)
    recs = tasks.load_records(path)
    assert len(recs) == 50
    for rec in recs:
        rec.validate()
        assert rec.n == 5


def test_train_zero_epochs_checkpoint_equals_init(tmp_path):
    data = _write_dataset(tmp_path, "train", count=8)
    val = _write_dataset(tmp_path, "val", count=4, seed=9)
    cfg_path = tmp_path / "cfg.toml"
    cfg_path.write_text(TINY_CONFIG)
    out = tmp_path / "run"
    rc = cli.main([
        "train", "--config", str(cfg_path), "--data", str(data), "--val", str(val),
        "--out", str(out),
    ])
    assert rc == 0
    ckpt = flow.load_checkpoint(out / "checkpoint.json")
    fresh = cfg_mod.build_model(cfg_mod.load_config(cfg_path))
    for (n1, a), (n2, b) in zip(ckpt.named_leaves(), fresh.named_leaves()):
        assert n1 == n2
        assert np.array_equal(a, b)
    assert (out / "history.csv").read_text().startswith("epoch,")
    assert (out / "resolved_config.toml").exists()


def test_train_missing_val_file_is_data_error(tmp_path, capsys):
    data = _write_dataset(tmp_path, "train2", count=4)
    cfg_path = tmp_path / "cfg.toml"
    cfg_path.write_text(TINY_CONFIG)
    rc = cli.main([
        "train", "--config", str(cfg_path), "--data", str(data),
        "--val", str(tmp_path / "nope.ndjson"), "--out", str(tmp_path / "r"),
    ])
    assert rc == 3
    assert "nope.ndjson" in capsys.readouterr().err


def test_config_unknown_keys_all_reported(tmp_path, capsys):
    cfg_path = tmp_path / "bad.toml"
    cfg_path.write_text(
        """
[model]
bogus_key = 1
another_bad = 2

[nosuch]
x = 1
"""
    )
    data = _write_dataset(tmp_path, "d2", count=4)
    rc = cli.main([
        "train", "--config", str(cfg_path), "--data", str(data), "--val", str(data),
        "--out", str(tmp_path / "r2"),
    ])
    assert rc == 2
    err = capsys.readouterr().err
    assert "bogus_key" in err and "another_bad" in err and "nosuch" in err


def test_resolved_config_reproduces_run(tmp_path):
    data = _write_dataset(tmp_path, "train3", count=8)
    val = _write_dataset(tmp_path, "val3", count=4, seed=3)
    cfg_path = tmp_path / "cfg.toml"
    cfg_path.write_text(TINY_CONFIG.replace("epochs = 0", "epochs = 1"))
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert cli.main(["train", "--config", str(cfg_path), "--data", str(data), "--val", str(val), "--out", str(out1)]) == 0
    resolved = out1 / "resolved_config.toml"
    assert cli.main(["train", "--config", str(resolved), "--data", str(data), "--val", str(val), "--out", str(out2)]) == 0
    assert (out1 / "checkpoint.json").read_bytes() == (out2 / "checkpoint.json").read_bytes()


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("trained")
    data = _write_dataset(tmp, "train", count=40, n_min=2, n_max=5)
    val = _write_dataset(tmp, "val", count=10, seed=11, n_min=2, n_max=5)
    cfg_path = tmp / "cfg.toml"
    cfg_path.write_text(TINY_CONFIG.replace("epochs = 0", "epochs = 1"))
    out = tmp / "run"
    rc = cli.main([
        "train", "--config", str(cfg_path), "--data", str(data), "--val", str(val),
        "--out", str(out),
    ])
    assert rc == 0
    return {"tmp": tmp, "data": data, "val": val, "cfg": cfg_path, "ckpt": out / "checkpoint.json"}


def test_logprob_idempotent(tmp_path, trained_run):
    out1, out2 = tmp_path / "lp1", tmp_path / "lp2"
    for out in (out1, out2):
        rc = cli.main([
            "logprob", "--checkpoint", str(trained_run["ckpt"]),
            "--data", str(trained_run["val"]), "--out", str(out),
        ])
        assert rc == 0
    assert (out1 / "logprob.csv").read_bytes() == (out2 / "logprob.csv").read_bytes()
    lines = (out1 / "logprob.csv").read_text().strip().split("\n")
    assert lines[0] == "index,n,log_prob,nfe"
    assert len(lines) == 11


def test_sample_generalizes_to_larger_sets(tmp_path, trained_run):
    # conditions come from held-out scenes; the set size is pushed past training range
    out = tmp_path / "s7"
    rc = cli.main([
        "sample", "--checkpoint", str(trained_run["ckpt"]), "--data", str(trained_run["val"]),
        "--n", "7", "--count", "3", "--seed", "4", "--out", str(out),
    ])
    assert rc == 0
    rows = [json.loads(l) for l in (out / "samples.ndjson").read_text().strip().split("\n")]
    assert len(rows) == 3
    assert all(len(r["sample"]) == 7 for r in rows)
    assert all(np.isfinite(r["log_prob"]) for r in rows)


def test_sample_with_scene_conditions_and_trajectories(tmp_path, trained_run):
    out = tmp_path / "sc"
    rc = cli.main([
        "sample", "--checkpoint", str(trained_run["ckpt"]), "--data", str(trained_run["val"]),
        "--count", "2", "--trajectories", "--out", str(out),
    ])
    assert rc == 0
    rows = [json.loads(l) for l in (out / "samples.ndjson").read_text().strip().split("\n")]
    assert len(rows) == 2
    assert "trajectory" in rows[0]
    assert rows[0]["trajectory"][0]["t"] == 0.0


def test_eval_writes_report(tmp_path, trained_run):
    out = tmp_path / "ev"
    rc = cli.main([
        "eval", "--checkpoint", str(trained_run["ckpt"]), "--data", str(trained_run["val"]),
        "--samples-per-scene", "4", "--max-scenes", "4", "--n-perms", "2", "--out", str(out),
    ])
    assert rc == 0
    doc = json.loads((out / "eval_report.json").read_text())
    assert doc["format"] == "permflow-eval-report-v1"
    assert 0.0 <= doc["acceptance_rate"] <= 1.0
    assert doc["n_scenes"] == 4


def test_checkpoint_config_mismatch_refused(tmp_path, trained_run, capsys):
    other_cfg = tmp_path / "other.toml"
    other_cfg.write_text(TINY_CONFIG.replace("single_hidden = 8", "single_hidden = 12"))
    rc = cli.main([
        "logprob", "--checkpoint", str(trained_run["ckpt"]), "--config", str(other_cfg),
        "--data", str(trained_run["val"]), "--out", str(tmp_path / "x"),
    ])
    assert rc == 2
    err = capsys.readouterr().err
    assert "hash" in err


def test_plot_empty_record_valid_svg(tmp_path):
    ds = tmp_path / "empty.ndjson"
    ds.write_text('{"prohibited": [], "targets": []}\n')
    out = tmp_path / "plots"
    rc = cli.main(["plot", "--data", str(ds), "--count", "1", "--out", str(out)])
    assert rc == 0
    svg = (out / "scene_000.svg").read_text()
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert "rect" in svg  # frame


def test_plot_with_model_samples(tmp_path, trained_run):
    out = tmp_path / "plots2"
    rc = cli.main([
        "plot", "--data", str(trained_run["val"]), "--checkpoint", str(trained_run["ckpt"]),
        "--count", "1", "--samples", "2", "--trajectories", "--out", str(out),
    ])
    assert rc == 0
    svg = (out / "scene_000.svg").read_text()
    assert "line" in svg and "</svg>" in svg
