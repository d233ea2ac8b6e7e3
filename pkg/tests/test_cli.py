import csv
import hashlib
import json
import os

import pytest

from chronicrl.cli import EXIT_ACCEPTANCE, EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from chronicrl.dataset import read_dataset
from chronicrl.offline_q import QTable

SMALL = """\
population: {train: 120, eval: 40}
train: {iterations: 30}
study_b: {seeds: [0]}
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(SMALL)
    return str(p)


@pytest.fixture
def dataset(tmp_path, cfg):
    out = str(tmp_path / "d.csv")
    assert main(["generate", "--config", cfg, "--n", "80", "--seeds", "4", "--out", out]) == EXIT_OK
    return out


def test_generate_prints_counts_and_shares(tmp_path, cfg, capsys):
    out = str(tmp_path / "g.csv")
    assert main(["generate", "--config", cfg, "--condition", "T2D", "--n", "50", "--out", out]) == EXIT_OK
    text = capsys.readouterr().out
    assert "(50 patients)" in text and "archetype shares:" in text
    assert read_dataset(out).condition == "T2D"


def test_generate_rejects_bad_eps(tmp_path, cfg):
    assert main(["generate", "--config", cfg, "--eps", "0", "--out", str(tmp_path / "x.csv")]) == EXIT_USAGE


def test_train_weighted_runs_kappa_inference(tmp_path, cfg, dataset):
    out = str(tmp_path / "q.qtable")
    assert main(["train", dataset, "--config", cfg, "--variant", "capability_terminal", "--out", out]) == EXIT_OK
    assert os.path.exists(str(tmp_path / "q.kappa.csv"))
    table = QTable.load(out)
    assert table.meta["train"]["beta"] == 2.5 and table.meta["capability"] is not None
    diag = json.loads((tmp_path / "q.diagnostics.json").read_text())
    assert len(diag["td_error_trace"]) == 30


def test_train_uniform_skips_kappa(tmp_path, cfg, dataset):
    out = str(tmp_path / "u.qtable")
    assert main(["train", dataset, "--config", cfg, "--variant", "uniform_tiered", "--out", out]) == EXIT_OK
    assert not os.path.exists(str(tmp_path / "u.kappa.csv"))
    assert QTable.load(out).meta["capability"] is None


def test_train_spec_hash_mismatch_is_data_error(tmp_path, dataset):
    other = tmp_path / "other.yaml"
    other.write_text("condition_overrides: {HTN: {noise_sd: 2.0}}\n")
    assert main(["train", dataset, "--config", str(other), "--out", str(tmp_path / "q.qtable")]) == EXIT_DATA


def test_train_corrupt_dataset_is_data_error(tmp_path, cfg, dataset):
    lines = open(dataset).read().split("\n")
    lines[5] = lines[5].replace(",0,", ",1,", 1) if ",0," in lines[5] else lines[5] + "9"
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join(lines))
    assert main(["train", str(bad), "--config", cfg]) == EXIT_DATA


def test_evaluate_qtable_and_behavior(tmp_path, cfg, dataset, capsys):
    q = str(tmp_path / "q.qtable")
    main(["train", dataset, "--config", cfg, "--variant", "uniform_tiered", "--out", q])
    out = str(tmp_path / "ev.csv")
    assert main(["evaluate", "--config", cfg, "--qtable", q, "--seeds", "0,1", "--out", out]) == EXIT_OK
    with open(out) as fh:
        kinds = [r["kind"] for r in csv.DictReader(fh)]
    assert kinds.count("seed") == 2
    assert main(["evaluate", "--config", cfg, "--behavior", "--seeds", "0"]) == EXIT_OK
    assert "behavior" in capsys.readouterr().out


def test_evaluate_requires_a_policy(cfg):
    assert main(["evaluate", "--config", cfg]) == EXIT_USAGE


def test_study_a_outputs_manifest_and_check_status(tmp_path, cfg, capsys):
    out = tmp_path / "A"
    rc = main(["study-a", "--config", cfg, "--seeds", "0", "--out", str(out), "--check"])
    # a 120-patient smoke run cannot meet the calibration bands
    assert rc == EXIT_ACCEPTANCE
    for name in ("study_a.csv", "table1.md", "kappa.csv", "manifest.json", "acceptance.txt", "fig2_ttc.csv"):
        assert (out / name).exists(), name
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seeds"] == [0]
    assert manifest["config"]["population"]["train"] == 120
    digest = hashlib.sha256((out / "study_a.csv").read_bytes()).hexdigest()
    assert manifest["artifacts"]["study_a.csv"] == digest
    lines = (out / "acceptance.txt").read_text().strip().split("\n")
    assert all(line.startswith(("[PASS]", "[FAIL]")) for line in lines)


def test_study_b_and_report_round_trip(tmp_path, cfg, capsys):
    out = tmp_path / "B"
    assert main(["study-b", "--config", cfg, "--out", str(out)]) == EXIT_OK
    assert (out / "fig3_eps_sweep.csv").exists()
    with open(out / "fig3_eps_sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 2 * 4
    first = capsys.readouterr().out
    rep = tmp_path / "R"
    assert main(["report", str(out / "study_b.csv"), "--config", cfg, "--out", str(rep)]) == EXIT_OK
    again = capsys.readouterr().out
    # the markdown table is rebuilt identically from the CSV
    assert first.split("\n\n")[0] == again.split("\n\n")[0]


def test_report_rejects_mixed_and_duplicate_inputs(tmp_path, cfg):
    a, b = tmp_path / "A", tmp_path / "B"
    main(["study-a", "--config", cfg, "--seeds", "0", "--out", str(a)])
    main(["study-b", "--config", cfg, "--out", str(b)])
    assert main(["report", str(a / "study_a.csv"), str(b / "study_b.csv"), "--out", str(tmp_path / "r")]) == EXIT_DATA
    assert main(["report", str(a / "study_a.csv"), str(a / "study_a.csv"), "--out", str(tmp_path / "r")]) == EXIT_DATA
    assert main(["report", "--out", str(tmp_path / "r")]) == EXIT_USAGE
    assert main(["report", str(tmp_path / "missing.csv")]) == EXIT_DATA


def test_usage_errors(tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["no-such-command"]) == EXIT_USAGE
    assert main(["--version"]) == EXIT_OK
    bad = tmp_path / "bad.yaml"
    bad.write_text("mystery_field: 1\n")
    assert main(["generate", "--config", str(bad)]) == EXIT_USAGE
    assert main(["generate", "--config", str(tmp_path / "absent.yaml")]) == EXIT_USAGE
    assert main(["study-a", "--seeds", "x,y"]) == EXIT_USAGE


def test_unwritable_output_is_data_error(tmp_path, cfg):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["study-a", "--config", cfg, "--seeds", "0", "--out", str(blocker / "sub")]) == EXIT_DATA
