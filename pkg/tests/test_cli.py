"""End-to-end tests of the command-line runner on a micro experiment."""

import json

import numpy as np
import pytest

from fltrace import nnengine as nn
from fltrace import whitebox
from fltrace.cli import (EXIT_EXHAUSTED, EXIT_MISSING, EXIT_OK,
                         EXIT_VALIDATION, main)

MICRO = {
    "code": {"m": 8},
    "whitebox": {"p": 16, "dtype": "float64"},
    "data": {"n_owners": 3, "synthetic_size": 120},
    "fl": {"owners_per_round": 2, "local_batch": 2, "iterations": 3,
           "wm_batch": 4, "log_every": 1, "eval_subsample": 8},
    "trials": {"cells": [[2, "None", 2]], "attack_data_size": 8},
}


@pytest.fixture(scope="session")
def micro_run(tmp_path_factory):
    """setup + train + attack on a 3-owner micro config, run once."""
    root = tmp_path_factory.mktemp("cli")
    import os
    os.environ["FLTRACE_CACHE_DIR"] = str(root / "cache")
    cfg_path = root / "micro.json"
    cfg_path.write_text(json.dumps(MICRO))
    run_dir = root / "run"
    argv = ["-c", str(cfg_path), "--run-dir", str(run_dir)]
    assert main(["setup"] + argv) == EXIT_OK
    assert main(["train"] + argv) == EXIT_OK
    assert main(["attack"] + argv + ["--colluders", "0,1",
                                     "--post", "Prune", "--name", "duo"]) \
        == EXIT_OK
    return run_dir, cfg_path, argv


def test_setup_writes_artifacts_and_manifest(micro_run):
    run_dir, _, _ = micro_run
    art = run_dir / "artifacts"
    for name in ("bias.trc", "codebook.trc", "triggers.trc", "basis.trc",
                 "projection.json", "partition.json"):
        assert (art / name).exists()
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["config"]["code"]["m"] == 8
    assert "setup" in manifest["commands"]
    assert manifest["commands"]["setup"]["corpus_source"] == "synthetic"
    part = json.loads((art / "partition.json").read_text())
    assert part["n_owners"] == 3
    assert sum(part["shard_sizes"]) + part["eval_size"] == 120


def test_train_writes_copies_logs_summary(micro_run):
    run_dir, _, _ = micro_run
    d = run_dir / "models" / "DropoutWM"
    assert sorted(f.name for f in d.glob("owner_*.tfnn")) == \
        ["owner_000.tfnn", "owner_001.tfnn", "owner_002.tfnn"]
    logs = [json.loads(line) for line in
            (d / "logs.jsonl").read_text().splitlines()]
    assert [lg["iteration"] for lg in logs] == [0, 1, 2]
    summary = json.loads((d / "train_summary.json").read_text())
    assert summary["iterations"] == 3
    assert len(summary["per_copy_trigger_accuracy"]) == 3
    assert len(summary["per_copy_projection"]) == 3


def test_train_nowm_single_checkpoint(micro_run):
    run_dir, _, argv = micro_run
    assert main(["train"] + argv + ["--strategy", "NoWM"]) == EXIT_OK
    assert (run_dir / "models" / "NoWM" / "model.tfnn").exists()


def test_train_owner_baseline(micro_run):
    run_dir, _, argv = micro_run
    assert main(["train"] + argv + ["--strategy", "IndependentOwnerBaseline",
                                    "--owner", "1"]) == EXIT_OK
    assert (run_dir / "models" / "IndependentOwnerBaseline"
            / "model.tfnn").exists()


def test_attack_records_spec(micro_run):
    run_dir, _, _ = micro_run
    attack = json.loads(
        (run_dir / "attacks" / "duo" / "attack.json").read_text())
    assert attack["spec"]["colluders"] == [0, 1]
    assert attack["spec"]["post_attack"]["kind"] == "Prune"
    assert (run_dir / "attacks" / "duo" / "model.tfnn").exists()


def _planted_suspect(run_dir, coeffs):
    """Model whose carrier projects with the given per-owner coefficients.

    With no coefficients the carrier is built from a direction orthogonal
    to every owner vector, so all projections are (numerically) zero.
    """
    desc = json.loads(
        (run_dir / "artifacts" / "projection.json").read_text())
    projection = whitebox.generate_projection(desc["l"], desc["p"],
                                              desc["seed"], dtype=np.float64)
    basis = whitebox.OwnerBasis.load(run_dir / "artifacts" / "basis.trc")
    target = sum((c * basis.column(j) for j, c in enumerate(coeffs)),
                 np.zeros(desc["p"]))
    if not np.any(target):
        own = basis.vectors[:, :len(coeffs)]
        stray = np.ones(desc["p"])
        target = stray - own @ (own.T @ stray)
    gram_inv = np.linalg.pinv(projection.entries.T @ projection.entries)
    model = nn.build_model(seed=123)
    model.set_carrier_weights(projection.entries @ (gram_inv @ target))
    return model


def test_trace_accuses_planted_owner(micro_run, capsys):
    run_dir, _, argv = micro_run
    suspect = _planted_suspect(run_dir, [0.0, 1.0, 0.0])
    path = run_dir / "planted.tfnn"
    nn.save_model(suspect, path)
    assert main(["trace"] + argv + ["--suspect", str(path),
                                    "--mode", "whitebox"]) == EXIT_OK
    report = json.loads(
        (run_dir / "reports" / "trace_planted.json").read_text())
    assert report["whitebox"]["accused"] == [1]
    assert "blackbox" not in report
    assert "accused=[1]" in capsys.readouterr().out


def test_trace_exhausted_exit_code(micro_run):
    run_dir, _, argv = micro_run
    # carrier orthogonal to every owner vector: nobody can cross 0.11,
    # and an untrained constant-output model cannot cross the code threshold
    suspect = _planted_suspect(run_dir, [0.0, 0.0, 0.0])
    path = run_dir / "nobody.tfnn"
    nn.save_model(suspect, path)
    assert main(["trace"] + argv + ["--suspect", str(path)]) == EXIT_EXHAUSTED
    report = json.loads(
        (run_dir / "reports" / "trace_nobody.json").read_text())
    assert report["blackbox"]["exhausted"] is True
    assert report["blackbox"]["accused"] is None
    assert report["whitebox"]["accused"] == []


def test_report_lists_run_contents(micro_run, capsys):
    run_dir, _, _ = micro_run
    assert main(["report", "--run-dir", str(run_dir)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "train DropoutWM:" in out
    assert "attack duo:" in out


def test_report_run_trials(micro_run, capsys):
    run_dir, _, argv = micro_run
    assert main(["report"] + argv + ["--run-trials",
                                     "--strategy", "DropoutWM"]) == EXIT_OK
    assert "trials DropoutWM: n=2" in capsys.readouterr().out
    trials = json.loads(
        (run_dir / "reports" / "trials_DropoutWM.json").read_text())
    assert trials["summary"]["n_trials"] == 2
    assert (run_dir / "reports" / "trials_DropoutWM.csv").exists()


def test_missing_config_file(tmp_path):
    assert main(["setup", "-c", str(tmp_path / "absent.json"),
                 "--run-dir", str(tmp_path)]) == EXIT_MISSING


def test_invalid_config_value(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"code": {"tau": 0.5}}))
    assert main(["setup", "-c", str(bad),
                 "--run-dir", str(tmp_path)]) == EXIT_VALIDATION


def test_train_without_setup(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(MICRO))
    assert main(["train", "-c", str(cfg),
                 "--run-dir", str(tmp_path / "empty")]) == EXIT_MISSING


def test_trace_missing_suspect(micro_run):
    _, _, argv = micro_run
    assert main(["trace"] + argv + ["--suspect", "/nonexistent.tfnn"]) \
        == EXIT_MISSING


def test_report_empty_run_dir(tmp_path, capsys):
    assert main(["report", "--run-dir", str(tmp_path / "nothing")]) \
        == EXIT_VALIDATION
    capsys.readouterr()


def test_selftest_passes(capsys):
    assert main(["selftest"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "selftest passed" in out
    assert "FAIL" not in out


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert "fltrace" in capsys.readouterr().out
