import json

import pytest

from metasd.checkpoint import load_checkpoint
from metasd.cli import EXIT_CODES, main


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_zero_epochs_writes_manifest_and_empty_metrics(tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--data", "toy150", "--epochs", 0, "--out", tmp_path)
    assert code == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"]["epochs"] == 0
    assert manifest["dataset"]["entities"] == 150 and len(manifest["dataset"]["digest"]) == 64
    assert (tmp_path / "metrics.jsonl").read_text() == ""


@pytest.mark.parametrize("preset,expected", [
    ("wo-meta", {"meta_enabled": False, "mask_mode": "dynamic"}),
    ("wo-prune", {"meta_enabled": True, "mask_mode": "random_frozen"}),
    ("wo-prune-meta", {"meta_enabled": False, "mask_mode": "random_frozen"}),
    ("fb15k237-paper", {"dim": 2000, "gamma": 0.9, "alpha": 0.5, "beta": 0.5, "lam": 0.1,
                        "mu": 1e-4, "optimizer": "adagrad", "backbone": "ComplEx"}),
])
def test_presets_are_recorded_in_the_manifest(tmp_path, capsys, preset, expected):
    code, _, _ = run(capsys, "train", "--data", "toy150", "--preset", preset, "--epochs", 0,
                     "--out", tmp_path)
    assert code == 0
    config = json.loads((tmp_path / "manifest.json").read_text())["config"]
    assert {k: config[k] for k in expected} == expected


def test_override_precedence(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"gamma": 0.5, "dim": 12, "alpha": 0.2}))
    code, _, _ = run(capsys, "train", "--data", "toy150", "--preset", "toy-smoke", "--config",
                     cfg, "--set", "alpha=0.3", "--gamma", 0.7, "--lambda", 0.05, "--epochs", 0,
                     "--threads", 2, "--out", tmp_path / "o")
    assert code == 0
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    config = manifest["config"]
    assert (config["gamma"], config["dim"], config["alpha"], config["lam"]) == (0.7, 12, 0.3, 0.05)
    assert manifest["threads"] == 2


def test_train_eval_export_round_trip(tmp_path, capsys):
    out = tmp_path / "run"
    code, text, _ = run(capsys, "train", "--data", "toy150", "--preset", "toy-smoke",
                        "--epochs", 2, "--out", out)
    assert code == 0 and "epoch    1" in text
    lines = (out / "metrics.jsonl").read_text().splitlines()
    record = json.loads(lines[-1])
    assert {"epoch", "student", "teacher", "sparsity", "valid", "mask_flips"} <= set(record)
    state = load_checkpoint(out / "checkpoint.msdk")
    manifest = json.loads((out / "manifest.json").read_text())
    assert state.config.to_dict() == manifest["config"]

    code, a, _ = run(capsys, "eval", out / "checkpoint.msdk", "--data", "toy150", "--student",
                     "--out", tmp_path / "rep.json")
    assert code == 0
    code, b, _ = run(capsys, "eval", out / "student.msds", "--data", "toy150")
    assert code == 0
    # the export stores float32 values; rankings agree at that precision on this model
    assert a.split("params=")[0] == b.split("params=")[0]
    assert f"params={int(round(0.1 * state.params.size))}" in a
    report = json.loads((tmp_path / "rep.json").read_text())
    assert set(report) == {"student"}

    code, text, _ = run(capsys, "export", out / "checkpoint.msdk", "--out", tmp_path / "x.msds")
    assert code == 0
    assert (tmp_path / "x.msds").read_bytes() == (out / "student.msds").read_bytes()


def test_data_stats_prints_counts_and_histogram(capsys):
    code, out, _ = run(capsys, "data-stats", "toy150", "--long-tail", 100)
    assert code == 0
    assert "entities   150" in out and "relations  40" in out and "train      4997" in out
    assert "long-tail" in out and "[10, 100)" in out


def test_error_paths_print_one_greppable_line(tmp_path, capsys):
    cases = [
        (("data-stats", tmp_path), "E_DATA"),
        (("train", "--data", "toy150", "--set", "learning_rate=1", "--out", tmp_path), "E_CONFIG"),
        (("train", "--data", "toy150", "--gamma", 1.5, "--out", tmp_path), "E_CONFIG"),
        (("eval", tmp_path / "missing.msdk", "--data", "toy150"), "E_CHECKPOINT"),
    ]
    for argv, code_name in cases:
        code, _, err = run(capsys, *argv)
        assert code == EXIT_CODES[code_name]
        lines = err.strip().splitlines()
        assert len(lines) == 1 and lines[0].startswith(f"metasd: error[{code_name}]")
    code, _, err = run(capsys, "data-stats", tmp_path)
    assert "train.txt" in err and "valid.txt" in err and "test.txt" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_nonzero_and_keeps_artifacts(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--data", "toy150", "--preset", "toy-smoke",
                       "--set", "optimizer=\"sgd\"", "--lambda", 1e6, "--set", "init_scale=1.0",
                       "--set", "meta_enabled=false", "--epochs", 3, "--out", tmp_path)
    assert code == EXIT_CODES["E_DIVERGED"]
    assert "error[E_DIVERGED]" in err
    assert (tmp_path / "manifest.json").exists() and (tmp_path / "metrics.jsonl").exists()
