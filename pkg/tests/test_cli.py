import json

import numpy as np
import pytest

from pulseforge.cli import MANIFEST, main, substream, verify_manifest
from pulseforge.gatenet import MlpModel, init_model

ARB_SMALL = ["--k", "20", "--n", "100", "--lengths", "2:60:8", "--n-gates", "100"]


def run(*argv):
    return main([str(a) for a in argv])


def test_dump_config(capsys):
    assert run("--dump-config") == 0
    out = capsys.readouterr().out
    for needle in ("anharmonicity_mhz = 200.0", "duration_ns = 125.0", "max_amp_mhz = 20.0", "k = 500", "n = 1000", "lengths = 2:150:10"):
        assert needle in out


def test_usage_errors(capsys):
    assert run("arb", "--bogus") == 2
    assert run() == 2
    assert run("nonsense") == 2


def test_validation_error_is_module_qualified(tmp_path, capsys):
    assert run("arb", "--k", "1", "--out", tmp_path / "a") == 1
    err = capsys.readouterr().err
    assert "pulseforge arb:" in err and "at least 2 sequences" in err


def test_arb_artifacts_and_determinism(tmp_path):
    for name in ("a", "b"):
        assert run("--seed", 5, "arb", "--sigma", 0.2, *ARB_SMALL, "--out", tmp_path / name) == 0
    fit = json.loads((tmp_path / "a" / "arb_fit.json").read_text())
    assert set(fit) >= {"A", "B", "f", "cov", "ci", "dof"}
    assert fit["ci"][0] <= fit["f"] <= fit["ci"][1]
    for f in ("arb_fit.json", "arb_lengths.csv", "arb_curve.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert verify_manifest(tmp_path / "a") == []
    (tmp_path / "a" / "arb_curve.csv").write_text("tampered\n")
    assert verify_manifest(tmp_path / "a") == ["arb_curve.csv"]


def test_config_file_sections(tmp_path, capsys):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[transmon]\nguard_levels = 1\n\n[arb]\nk = 7\n")
    assert run("--config", cfg, "--dump-config") == 0
    out = capsys.readouterr().out
    assert "guard_levels = 1" in out and "k = 7" in out
    bad = tmp_path / "bad.ini"
    bad.write_text("[nope]\nx = 1\n")
    assert run("--config", bad, "arb") == 1


@pytest.fixture(scope="module")
def pipeline_dirs(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run("gen-data", "--n-angles", 12, "--n-seeds", 1, "--target", 1e-3, "--out", root / "raw") == 0
    assert run("pipeline", "--raw", root / "raw" / "raw.csv", "--window", 2, "--n-out", 20, "--out", root / "ds") == 0
    assert run("train-mse", "--dataset", root / "ds", "--sizes", "1,6,20", "--epochs", 300, "--lr", 1e-2, "--out", root / "mse") == 0
    return root


def test_pipeline_outputs(pipeline_dirs):
    root = pipeline_dirs
    header = (root / "raw" / "raw.csv").read_text().splitlines()[0]
    assert header.startswith("angle,seed,c0") and header.endswith("fidelity,converged")
    assert (root / "ds" / "dataset.csv").exists()
    curve = (root / "mse" / "loss_curve.csv").read_text().splitlines()
    assert curve[0] == "epoch,train_loss,val_loss" and len(curve) == 302
    for d in ("raw", "ds", "mse"):
        assert verify_manifest(root / d) == []


def test_zero_epoch_training_writes_init(pipeline_dirs):
    root = pipeline_dirs
    assert run("--seed", 3, "train-mse", "--dataset", root / "ds", "--sizes", "1,6,20", "--epochs", 0, "--out", root / "mse0") == 0
    saved = MlpModel.load(root / "mse0" / "model.json")
    assert np.array_equal(saved.get_params(), init_model((1, 6, 20), seed=substream(3, "init")).get_params())


def test_downstream_commands(pipeline_dirs):
    root = pipeline_dirs
    model = root / "mse" / "model.json"
    assert run("eval", "--model", model, "--dataset", root / "ds", "--out", root / "ev") == 0
    ev = json.loads((root / "ev" / "eval.json").read_text())
    assert set(ev["fidelity"]) == {"train", "val", "test"}
    assert run("quantize", "--model", model, "--dataset", root / "ds", "--out", root / "q") == 0
    q = json.loads((root / "q" / "quantize.json").read_text())
    assert q["total_bits"] == 16 and q["integer_bits"] == 5
    assert run("train-infid", "--model", model, "--dataset", root / "ds", "--epochs", 1, "--out", root / "ti") == 0
    assert run("arb", "--provider", "model", "--model", model, "--dataset", root / "ds", *ARB_SMALL[:6], "--n-gates", 5, "--out", root / "am") == 0
    physics = root / "phys.ini"
    physics.write_text("[transmon]\nguard_levels = 1\n")
    assert run("finetune", "--model", model, "--physics", physics, "--n-angles", 6, "--batches", 2, "--n-val", 3,
               "--epochs", 1, "--alpha", 1e-4, "--epsilon", 1e-4, "--out", root / "ft") == 0
    assert (root / "ft" / "loss_curve.csv").exists()


def test_report(pipeline_dirs):
    root = pipeline_dirs
    assert run("report", "--from", root) == 0
    csv_text = (root / "report" / "report.csv").read_text()
    md = (root / "report" / "report.md").read_text()
    n_manifests = len([p for p in root.rglob(MANIFEST) if p.parent.name != "report"])
    assert len(csv_text.splitlines()) == n_manifests + 1
    assert md.startswith("| directory | command |")
    assert "gen-data" in csv_text and "train-mse" in csv_text
