import json

import pytest

from avlt.cli import config_from_dict, load_config, run_command
from avlt.errors import ConfigurationError


def _write_cfg(tmp_path, **over):
    cfg = {
        "seed": 3,
        "out_dir": str(tmp_path / "run"),
        "corpus": {"vqa_train": 400, "vqa_val": 150, "cap_train": 60, "cap_val": 30},
        "vqa_train": {"epochs": 1, "target_accuracy": 0.0},
        "cap_train": {"epochs": 1, "target_accuracy": 0.0},
        "attack": {"maxitr": 60, "restarts": 1},
        "cw": {"maxitr": 60, "restarts": 1},
    }
    cfg.update(over)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return str(p)


def test_no_command_and_unknown_command():
    assert run_command([]) == 1
    assert run_command(["frobnicate"]) == 1
    assert run_command(["attack-vqa", "--attack", "pgd"]) == 1


def test_bad_configs(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{not json")
    assert run_command(["eval", "--config", str(p)]) == 1
    p.write_text(json.dumps({"seed": 0, "colour": 1}))
    assert run_command(["eval", "--config", str(p)]) == 1
    assert run_command(["eval", "--config", str(tmp_path / "missing.json")]) == 1
    with pytest.raises(ConfigurationError):
        config_from_dict({"out_dir": "x"})
    with pytest.raises(ConfigurationError):
        config_from_dict({"seed": 0, "attack": {"bound": 1.0, "slack": 2.0}}).validate()
    with pytest.raises(ConfigurationError):
        config_from_dict({"seed": 0, "vqa_train": {"momentum": 0.9}}).validate()


def test_eval_on_empty_results_is_a_config_error(tmp_path):
    assert run_command(["eval", "--config", _write_cfg(tmp_path)]) == 1


def test_attack_without_checkpoint(tmp_path):
    assert run_command(["attack-vqa", "--config", _write_cfg(tmp_path), "--targets", "nonsense"]) == 1


def test_seed_override(tmp_path, monkeypatch):
    path = _write_cfg(tmp_path)
    monkeypatch.setenv("AVLT_SEED", "17")
    cfg, digest = load_config(path)
    assert cfg.seed == 17 and len(digest) == 64
    monkeypatch.setenv("AVLT_SEED", "x")
    with pytest.raises(ConfigurationError):
        load_config(path)


def test_gradcheck_command(tmp_path):
    assert run_command(["gradcheck", "--config", _write_cfg(tmp_path), "--probes", "20"]) == 0
    report = json.loads((tmp_path / "run" / "gradcheck.json").read_text())
    assert report["pass"] and len(report["checks"]) == 5


def test_pipeline_is_deterministic(tmp_path):
    cfg = _write_cfg(tmp_path)
    run = tmp_path / "run"
    assert run_command(["gen-data", "--config", cfg]) == 0
    assert (run / "data" / "vqa_train.json").exists()
    assert run_command(["train-vqa", "--config", cfg]) == 0
    assert run_command(["attack-vqa", "--config", cfg, "--targets", "nonsense", "--victim", "monolithic"]) == 0
    assert run_command(["eval", "--config", cfg]) == 0
    res = run / "results" / "ours-nonsense-monolithic"
    first = {n: (res / n).read_bytes() for n in ("summary.json", "cdf.csv")}
    summary = json.loads(first["summary.json"])
    assert summary["n"] == 100 and 0 <= summary["success_rate"] <= 1
    assert first["cdf.csv"].startswith(b"value,cumulative_fraction\n")

    # a fresh run from scratch reproduces the reports byte for byte
    (run / "targets" / "nonsense.json").unlink()
    assert run_command(["attack-vqa", "--config", cfg, "--targets", "nonsense", "--victim", "monolithic"]) == 0
    assert run_command(["eval", "--config", cfg]) == 0
    assert {n: (res / n).read_bytes() for n in first} == first
    manifest = json.loads((run / "manifest.json").read_text())
    assert {"gen-data", "train-vqa", "attack-vqa", "eval"} <= set(manifest["outputs"])

    assert run_command(["transfer", "--config", cfg, "--targets", "nonsense"]) == 0
    t = json.loads((run / "transfer" / "summary.json").read_text())
    assert set(t["directions"]) == {"monolithic->attentive", "attentive->monolithic"}
    for d in t["directions"].values():
        assert d["attempts"] == 100
        assert d["rate"] is None or 0 <= d["rate"] <= 1
