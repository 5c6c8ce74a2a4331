import csv
import json

import pytest

from dvrec.cli import main

SMALL = """\
d: 8
lr: 0.01
weight_decay: 0.0
outer_batch: 16
inner_batch: 16
widths: [16, 8]
tau: [4, 4]
reward_users: 20
k: 10
epochs: 2
cosine_every: 1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--output-dir", str(root / "raw"), "--users", "80", "--items", "120",
                 "--ratings", "5000", "--seed", "1"]) == 0
    assert main(["prepare", "--interactions", str(root / "raw/u.data"), "--categories",
                 str(root / "raw/u.genre"), "--core", "5", "--output", str(root / "data.dvr")]) == 0
    (root / "small.yaml").write_text(SMALL)
    assert main(["train", "--data", str(root / "data.dvr"), "--config", str(root / "small.yaml"),
                 "--output-dir", str(root / "run"), "--deterministic"]) == 0
    return root


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_prepare_is_reproducible(workspace, tmp_path):
    out = tmp_path / "again.dvr"
    assert main(["prepare", "--interactions", str(workspace / "raw/u.data"), "--categories",
                 str(workspace / "raw/u.genre"), "--core", "5", "--output", str(out)]) == 0
    assert out.read_bytes() == (workspace / "data.dvr").read_bytes()
    stats = json.loads((tmp_path / "again.dvr.stats.json").read_text())
    assert stats["categories"] == 19


def test_prepare_missing_categories_warns(workspace, tmp_path, caplog):
    assert main(["prepare", "--interactions", str(workspace / "raw/u.data"), "--categories",
                 str(tmp_path / "nope"), "--core", "5", "--output", str(tmp_path / "d.dvr")]) == 0
    assert "not found" in caplog.text
    assert json.loads((tmp_path / "d.dvr.stats.json").read_text())["categories"] == 1


def test_train_outputs(workspace):
    run = workspace / "run"
    for name in ("trace.csv", "cosine.csv", "pretrain.csv", "model.dvrc", "state.dvrc", "summary.json"):
        assert (run / name).exists(), name
    trace = _read(run / "trace.csv")
    assert "val_ndcg@10" in trace[0]
    assert len(_read(run / "cosine.csv")) == 2
    summary = json.loads((run / "summary.json").read_text())
    assert summary["status"] == "completed" and summary["epochs_completed"] == 2


def test_train_bad_config_exit_2(workspace, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("outer_batch: 8\ninner_batch: 16\n")
    assert main(["train", "--data", str(workspace / "data.dvr"), "--config", str(bad),
                 "--output-dir", str(tmp_path / "o")]) == 2
    bad.write_text("nonsense_key: 1\n")
    assert main(["train", "--data", str(workspace / "data.dvr"), "--config", str(bad),
                 "--output-dir", str(tmp_path / "o")]) == 2


def test_unknown_metric_exit_2(workspace, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--data", str(workspace / "data.dvr"), "--metric", "foo", "--output-dir", str(tmp_path)])
    assert exc.value.code == 2


def test_missing_data_exit_1(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none.dvr"), "--output-dir", str(tmp_path)]) == 1


def test_resume_matches(workspace, tmp_path):
    args = ["train", "--data", str(workspace / "data.dvr"), "--config", str(workspace / "small.yaml"),
            "--deterministic"]
    assert main(args + ["--output-dir", str(tmp_path / "a"), "--epochs", "1"]) == 0
    assert main(args + ["--output-dir", str(tmp_path / "a"), "--resume", str(tmp_path / "a/state.dvrc"),
                        "--epochs", "2"]) == 0
    assert (tmp_path / "a/trace.csv").read_bytes() == (workspace / "run/trace.csv").read_bytes()
    assert main(args + ["--output-dir", str(tmp_path / "b"), "--resume", str(tmp_path / "a/state.dvrc"),
                        "--k", "5"]) == 2


def test_grid(workspace, tmp_path):
    cfg = tmp_path / "grid.yaml"
    cfg.write_text(SMALL.replace("lr: 0.01", "lr: [0.01, 0.001]") + "valuator: false\n")
    assert main(["train", "--data", str(workspace / "data.dvr"), "--config", str(cfg), "--epochs", "1",
                 "--output-dir", str(tmp_path / "g")]) == 0
    grid = json.loads((tmp_path / "g/grid.json").read_text())
    assert {r["dir"] for r in grid["runs"]} == {"lr0.01_wd0", "lr0.001_wd0"}


def test_evaluate(workspace, tmp_path):
    assert main(["evaluate", "--data", str(workspace / "data.dvr"), "--checkpoint",
                 str(workspace / "run/model.dvrc"), "--k", "10", "--label", "dvr",
                 "--output-dir", str(tmp_path), "--deterministic"]) == 0
    rows = _read(tmp_path / "metrics.csv")
    assert {r["metric"] for r in rows} == {"recall", "ndcg", "cc", "ild", "gini", "loss"}
    assert all(r["split"] == "test" and r["model"] == "dvr" for r in rows)
    doc = json.loads((tmp_path / "metrics_dvr_test.json").read_text())
    assert set(doc["metrics"]) >= {"ndcg@10", "recall@10"}


def test_audit_exit_codes(tmp_path, capsys):
    assert main(["audit", "--nb", "2", "--trivial-net", "--output", str(tmp_path / "a.csv")]) == 0
    rows = _read(tmp_path / "a.csv")
    assert [float(r["phi_net"]) for r in rows] == [1.0, 1.0]
    assert main(["audit", "--nb", "6", "--batches", "2"]) == 0
    assert "PASS" in capsys.readouterr().out
    assert main(["audit", "--nb", "17"]) == 2
    assert main(["audit", "--nb", "3", "--trivial-net"]) == 2


def test_audit_failure_exit_3(monkeypatch):
    from dvrec import oracle

    monkeypatch.setattr(oracle, "TOLERANCE", -1.0)
    assert main(["audit", "--nb", "2", "--trivial-net"]) == 3


def test_dump_valuation(workspace, tmp_path):
    out = tmp_path / "v.csv"
    assert main(["dump-valuation", "--data", str(workspace / "data.dvr"), "--checkpoint",
                 str(workspace / "run/model.dvrc"), "--batches", "2", "--output", str(out)]) == 0
    rows = _read(out)
    assert len(rows) == 32 and set(rows[0]) == {"batch", "u", "i", "j", "phi", "w_hat", "s"}
    assert all(0.05 <= float(r["w_hat"]) <= 0.95 for r in rows)
