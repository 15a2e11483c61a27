import json
from pathlib import Path

import pytest

from dice.cli import main

CONFIGS = Path(__file__).resolve().parents[1] / "scripts" / "configs"

TINY = {
    "seed": 0,
    "model": {"kind": "mlp", "layer_sizes": [4, 5, 3], "activation": "tanh"},
    "data": {"per_node": 32, "dims": 4, "classes": 3, "n_eval": 32},
    "topology": {"builder": "ring", "n": 4},
    "train": {"rounds": 6, "lr": 0.1, "batch_size": 8},
}


def write_config(tmp_path, obj=TINY, name="c.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


def test_train_writes_snapshots_and_is_reproducible(tmp_path, capsys):
    cfg = write_config(tmp_path, {**TINY, "topology": {"builder": "ring", "n": 2}})
    assert main(["train", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["train", cfg, "--out", str(tmp_path / "b")]) == 0
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert man["snapshots"] == list(range(7))
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_train_refuses_to_overwrite(tmp_path, capsys):
    cfg = write_config(tmp_path)
    out = str(tmp_path / "tr")
    assert main(["train", cfg, "--out", out]) == 0
    assert main(["train", cfg, "--out", out]) == 2
    assert "--force" in capsys.readouterr().err
    assert main(["train", cfg, "--out", out, "--force"]) == 0


def test_validation_exit_code_names_field(tmp_path, capsys):
    bad = {**TINY, "train": {**TINY["train"], "batch_size": 0}}
    assert main(["train", write_config(tmp_path, bad), "--out", str(tmp_path / "x")]) == 2
    assert "train" in capsys.readouterr().err


def test_divergence_exit_code(tmp_path):
    lin = {**TINY, "model": {"kind": "linear-regression", "layer_sizes": [4, 1]},
           "data": {"task": "regression", "per_node": 32, "dims": 4, "n_eval": 8},
           "train": {"rounds": 400, "lr": 60.0, "batch_size": 8}}
    with pytest.warns(RuntimeWarning):
        assert main(["train", write_config(tmp_path, lin), "--out", str(tmp_path / "x")]) == 3


@pytest.fixture
def trace_dir(tmp_path):
    out = tmp_path / "tr"
    assert main(["train", write_config(tmp_path), "--out", str(out)]) == 0
    return out


def test_influence_reports(trace_dir, capsys):
    assert main(["influence", str(trace_dir), "--node", "1", "--iter", "2", "--radius", "0", "--estimator", "gt"]) == 0
    rep = json.loads((trace_dir / "influence_n1_t2_r0_gt.json").read_text())
    assert len(rep["per_hop"]) == 1 and list(rep["per_node"]) == ["1"]
    for r in (1, 2):
        assert main(["influence", str(trace_dir), "--node", "1", "--iter", "2", "--radius", str(r)]) == 0
    one = json.loads((trace_dir / "influence_n1_t2_r1_estimate.json").read_text())
    two = json.loads((trace_dir / "influence_n1_t2_r2_estimate.json").read_text())
    assert len(one["per_hop"]) == 2 and len(two["per_hop"]) == 3
    assert two["per_hop"][:2] == pytest.approx(one["per_hop"], rel=1e-12)
    csv_rows = (trace_dir / "influence_n1_t2_r1_estimate.csv").read_text().splitlines()
    assert csv_rows[0] == "kind,id,contribution"
    assert "total=" in capsys.readouterr().out


def test_influence_gt_and_estimate_are_close(trace_dir):
    for est in ("gt", "estimate"):
        assert main(["influence", str(trace_dir), "--node", "0", "--iter", "1", "--estimator", est]) == 0
    gt = json.loads((trace_dir / "influence_n0_t1_r1_gt.json").read_text())["total"]
    es = json.loads((trace_dir / "influence_n0_t1_r1_estimate.json").read_text())["total"]
    assert abs(gt - es) <= 0.1 * abs(gt)


def test_influence_errors(trace_dir):
    assert main(["influence", str(trace_dir), "--node", "0", "--iter", "5", "--radius", "2"]) == 2
    assert main(["influence", str(trace_dir), "--node", "0", "--iter", "0"]) == 0
    assert main(["influence", str(trace_dir), "--node", "0", "--iter", "0"]) == 2
    assert main(["influence", str(trace_dir), "--node", "0", "--iter", "0", "--force"]) == 0


def test_path_budget_exit_code(tmp_path):
    big = {**TINY, "topology": {"builder": "fully_connected", "n": 32},
           "train": {"rounds": 6, "lr": 0.1, "batch_size": 8}}
    out = tmp_path / "tr"
    assert main(["train", write_config(tmp_path, big), "--out", str(out)]) == 0
    assert main(["influence", str(out), "--node", "0", "--iter", "0", "--radius", "4"]) == 4


def test_influence_outputs_are_byte_identical_across_workers(tmp_path, monkeypatch):
    cfg = write_config(tmp_path)
    outs = []
    for i, threads in enumerate(("1", "8")):
        monkeypatch.setenv("DICE_THREADS", threads)
        d = tmp_path / f"t{i}"
        assert main(["train", cfg, "--out", str(d)]) == 0
        assert main(["influence", str(d), "--node", "2", "--iter", "1", "--radius", "3"]) == 0
        outs.append([(d / n).read_bytes() for n in ("manifest.json", "influence_n2_t1_r3_estimate.json",
                                                    "influence_n2_t1_r3_estimate.csv")])
    assert outs[0] == outs[1]


def _small(obj):
    obj = json.loads(json.dumps(obj))
    obj["data"].update(per_node=128, dims=8, classes=4, n_eval=64)
    obj["model"]["layer_sizes"] = [8, 8, 4]
    obj["topology"]["n"] = 8
    return obj


def test_experiment_alignment(tmp_path):
    obj = _small(json.loads((CONFIGS / "alignment.json").read_text()))
    obj["train"]["rounds"] = 10
    obj["train"]["batch_size"] = 32
    out = tmp_path / "al"
    assert main(["experiment", write_config(tmp_path, obj), "--kind", "alignment", "--out", str(out)]) == 0
    rows = (out / "alignment.csv").read_text().splitlines()
    assert len(rows) == 31 and rows[0] == "node,iteration,gt,estimate"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["passed"] and summary["trials"] == 30


def test_experiment_anomaly(tmp_path):
    obj = _small(json.loads((CONFIGS / "anomaly_flip.json").read_text()))
    obj["data"]["anomalies"][0]["node"] = 4
    obj["experiment"]["window"] = [0, 9]
    obj["train"].update(rounds=10, batch_size=64)
    out = tmp_path / "an"
    assert main(["experiment", write_config(tmp_path, obj), "--out", str(out)]) == 0
    lines = (out / "ranking.csv").read_text().splitlines()
    assert lines[1].split(",")[1] == "4" and lines[1].endswith(",1")


def test_experiment_cascade(tmp_path):
    obj = _small(json.loads((CONFIGS / "cascade.json").read_text()))
    obj["experiment"].update(stems=[0, 4], iterations=3)
    obj["train"].update(rounds=4, batch_size=32)
    out = tmp_path / "ca"
    assert main(["experiment", write_config(tmp_path, obj), "--out", str(out)]) == 0
    maps = json.loads((out / "cascade.json").read_text())
    assert set(maps) == {"0", "4"} and len(maps["0"]) == 3
    assert json.loads((out / "summary.json").read_text())["ratio"] > 1


def test_experiment_kind_mismatch(tmp_path):
    cfg = str(CONFIGS / "cascade.json")
    assert main(["experiment", cfg, "--kind", "alignment", "--out", str(tmp_path / "x")]) == 2
    assert main(["experiment", write_config(tmp_path), "--out", str(tmp_path / "y")]) == 2


def test_experiment_rerun_is_byte_identical(tmp_path):
    obj = _small(json.loads((CONFIGS / "cascade.json").read_text()))
    obj["experiment"].update(stems=[0, 4], iterations=2)
    obj["train"].update(rounds=3, batch_size=32)
    cfg = write_config(tmp_path, obj)
    for d in ("a", "b"):
        assert main(["experiment", cfg, "--out", str(tmp_path / d)]) == 0
    for name in ("cascade.json", "summary.json", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_verify_command(capsys):
    assert main(["verify", "--seeds", "2"]) == 0
    assert "0 failed" in capsys.readouterr().out
