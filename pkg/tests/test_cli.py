import json
from pathlib import Path

import pytest

from dasecount.cli import dispatch

REPO = Path(__file__).resolve().parents[1]
SMOKE = REPO / "configs" / "smoke.json"


def test_missing_config_exit_code(tmp_path, capsys):
    rc = dispatch(["synth", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)])
    assert rc == 2
    err = capsys.readouterr().err
    assert err.startswith("ERROR: config: file not found")
    assert len(err.strip().splitlines()) == 1  # single machine-parsable line


def test_unknown_config_section_rejected(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"synthh": {}}))
    rc = dispatch(["synth", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "ERROR: config:" in capsys.readouterr().err


def test_unknown_key_in_section_rejected(tmp_path, capsys):
    doc = json.loads(SMOKE.read_text())
    doc["preprocess"]["twww"] = 3
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps(doc))
    rc = dispatch(
        ["preprocess", "--in", str(tmp_path), "--out", str(tmp_path / "o"), "--config", str(cfg)]
    )
    assert rc == 2
    assert "twww" in capsys.readouterr().err


def test_metatest_insufficient_class_exit(tmp_path, capsys):
    # build a tiny dataset, then ask for more shots than a class holds
    data = tmp_path / "data"
    store = tmp_path / "store"
    model = tmp_path / "model"
    assert dispatch(["synth", "--config", str(SMOKE), "--out", str(data)]) == 0
    assert dispatch(["preprocess", "--in", str(data), "--out", str(store), "--config", str(SMOKE)]) == 0
    assert (
        dispatch(["train", "--in", str(store), "--out", str(model), "--config", str(SMOKE)]) == 0
    )
    rc = dispatch(
        [
            "metatest", "--model", str(model / "gen0.ckpt"), "--target", str(store),
            "--task", "tgt:dynamic", "--shots", "5", "--queries", "20",
            "--out", str(tmp_path / "rep"), "--config", str(SMOKE),
        ]
    )
    assert rc == 2
    err = capsys.readouterr().err
    assert err.startswith("ERROR: validation:")
    assert "class" in err


@pytest.mark.slow
def test_full_pipeline_smoke(tmp_path):
    data = tmp_path / "data"
    store = tmp_path / "store"
    model = tmp_path / "model"
    lineage = tmp_path / "lineage"
    reports = tmp_path / "reports"
    out = tmp_path / "out"

    assert dispatch(["synth", "--config", str(SMOKE), "--out", str(data)]) == 0
    assert (data / "manifest.json").is_file()

    assert dispatch(["preprocess", "--in", str(data), "--out", str(store), "--config", str(SMOKE)]) == 0
    assert (store / "store.json").is_file()

    assert dispatch(["train", "--in", str(store), "--out", str(model), "--config", str(SMOKE)]) == 0
    assert (model / "gen0.ckpt").is_file()
    assert (model / "curves.json").is_file()

    assert (
        dispatch(
            [
                "distill", "--teacher", str(model / "gen0.ckpt"), "--in", str(store),
                "--out", str(lineage), "--config", str(SMOKE),
            ]
        )
        == 0
    )
    assert (lineage / "gen0.ckpt").is_file() and (lineage / "gen1.ckpt").is_file()
    assert (lineage / "lineage.json").is_file()

    for cmd in (
        ["metatest", "--model", str(lineage / "gen0.ckpt"), "--target", str(store),
         "--task", "tgt:dynamic", "--shots", "1", "--out", str(reports), "--config", str(SMOKE)],
        ["baseline", "--kind", "direct_amp", "--model", str(lineage / "gen0.ckpt"),
         "--target", str(store), "--task", "tgt:dynamic", "--shots", "1",
         "--out", str(reports), "--config", str(SMOKE)],
        ["baseline", "--kind", "raw_lr", "--model", str(lineage / "gen0.ckpt"),
         "--target", str(store), "--task", "tgt:dynamic", "--shots", "1",
         "--out", str(reports), "--config", str(SMOKE)],
    ):
        assert dispatch(cmd) == 0

    assert dispatch(["report", "--in", str(reports), "--out", str(out), "--format", "csv,json"]) == 0
    assert (out / "summary.csv").is_file()
    assert (out / "summary.json").is_file()
    assert len(list(out.glob("confusion_*.csv"))) == 3
    lines = (out / "summary.csv").read_text().splitlines()
    assert len(lines) == 4  # header + 3 methods


@pytest.mark.slow
def test_flag_overrides_config(tmp_path):
    data = tmp_path / "data"
    store = tmp_path / "store"
    assert dispatch(["synth", "--config", str(SMOKE), "--out", str(data)]) == 0
    # --tw flag overrides the config's 128
    rc = dispatch(
        ["preprocess", "--in", str(data), "--out", str(store), "--config", str(SMOKE), "--tw", "256"]
    )
    assert rc == 0
    doc = json.loads((store / "store.json").read_text())
    assert doc["tw"] == 256
    assert doc["samples"][0]["path"].endswith(".dseg")

    # train flag override lands in the checkpoint's embedded config
    model = tmp_path / "model"
    store2 = tmp_path / "store2"
    assert dispatch(["preprocess", "--in", str(data), "--out", str(store2), "--config", str(SMOKE)]) == 0
    assert (
        dispatch(
            ["train", "--in", str(store2), "--out", str(model), "--config", str(SMOKE), "--epochs", "1"]
        )
        == 0
    )
    from dasecount.convnet import load_checkpoint

    _, meta = load_checkpoint(model / "gen0.ckpt")
    assert meta["train_config"]["epochs"] == 1


def test_determinism_same_seed_same_bytes(tmp_path):
    for d in ("a", "b"):
        assert dispatch(["synth", "--config", str(SMOKE), "--out", str(tmp_path / d)]) == 0
    a_files = sorted((tmp_path / "a").iterdir())
    for f in a_files:
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_thread_cap_env(monkeypatch):
    import torch

    from dasecount.cli import apply_thread_cap

    before = torch.get_num_threads()
    monkeypatch.setenv("DASECOUNT_THREADS", "1")
    apply_thread_cap()
    assert torch.get_num_threads() == 1
    torch.set_num_threads(before)

    monkeypatch.setenv("DASECOUNT_THREADS", "0")
    apply_thread_cap()  # 0 = auto, leaves the setting alone
    assert torch.get_num_threads() == before

    monkeypatch.setenv("DASECOUNT_THREADS", "lots")
    from dasecount.errors import ConfigError

    with pytest.raises(ConfigError):
        apply_thread_cap()


def test_metatest_flag_overrides():
    import argparse

    from dasecount.cli import _protocol

    config = {
        "seed": 3,
        "metatest": {
            "shots": 5, "queries_per_class": 10, "repeats": 4, "tap": "cnn1",
            "modality": "amp", "classifier": {"kind": "svm", "max_iters": 9},
        },
    }
    args = argparse.Namespace(
        shots=1, queries=None, repeats=None, tap="cnn2", modality=None,
        classifier="lr", seed=None,
    )
    proto = _protocol(config, args)
    assert proto.shots == 1  # flag wins
    assert proto.queries_per_class == 10  # config survives
    assert proto.repeats == 4
    assert proto.tap.value == "cnn2"  # flag wins
    assert proto.modality.value == "amp"  # config survives
    assert proto.classifier.kind.value == "lr"  # flag wins
    assert proto.classifier.max_iters == 9  # nested config survives
