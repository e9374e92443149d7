import json
from collections import Counter

import pytest

from grl_dann.cli import main, parse_lambda
from grl_dann.errors import ConfigError
from grl_dann.tensor_core import load_rdt


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["synth", "--per-class", "4", "--shift", "0.6", "--seed", "1",
                 "--out", str(out), "--force"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, data_dir):
    runs = {}
    for name, lam in (("a", "scheduled"), ("b", "scheduled"), ("zero", "zero")):
        out = tmp_path_factory.mktemp(name)
        assert main(["train", "--data", str(data_dir), "--out", str(out), "--epochs", "2",
                     "--batch-size", "4", "--seed", "3", "--lambda", lam, "--quiet",
                     "--force"]) == 0
        runs[name] = out
    return runs


def _records(run_dir):
    return [json.loads(line) for line in (run_dir / "run.jsonl").read_text().splitlines()]


def _tensor_bytes(manifest):
    rows = manifest.read_text().splitlines()[1:]
    return Counter(load_rdt(manifest.parent / r.split(",")[0]).tobytes() for r in rows)


def test_synth_counts(data_dir):
    meta = json.loads((data_dir / "synth.json").read_text())
    # 12 per domain: ceil(0.8 * 12) = 10 source train, round(0.4 * 12) = 5 target train
    assert meta["counts"] == {"source_train": 10, "source_test": 2,
                              "target_train": 5, "target_test": 7}
    for name, n in meta["counts"].items():
        assert len((data_dir / f"{name}.csv").read_text().splitlines()) == n + 1


def test_synth_is_byte_identical_on_rerun(data_dir, tmp_path):
    assert main(["synth", "--per-class", "4", "--shift", "0.6", "--seed", "1",
                 "--out", str(tmp_path)]) == 0
    for path in data_dir.rglob("*"):
        if path.is_file():
            assert (tmp_path / path.relative_to(data_dir)).read_bytes() == path.read_bytes()


def test_synth_zero_shift_pairs_match(tmp_path):
    assert main(["synth", "--per-class", "3", "--shift", "0", "--out", str(tmp_path)]) == 0
    src = _tensor_bytes(tmp_path / "source_train.csv") + _tensor_bytes(tmp_path / "source_test.csv")
    tgt = _tensor_bytes(tmp_path / "target_train.csv") + _tensor_bytes(tmp_path / "target_test.csv")
    assert src == tgt


def test_synth_refuses_non_empty_dir(tmp_path):
    (tmp_path / "keep.txt").write_text("x")
    assert main(["synth", "--per-class", "2", "--out", str(tmp_path)]) == ConfigError.exit_code


def test_train_is_deterministic(trained):
    a, b = trained["a"], trained["b"]
    assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()
    steps_a = [r for r in _records(a) if r["kind"] == "step"]
    steps_b = [r for r in _records(b) if r["kind"] == "step"]
    assert steps_a == steps_b


def test_run_record_contents(trained):
    records = _records(trained["a"])
    assert records[0]["kind"] == "config" and records[-1]["kind"] == "result"
    steps = [r for r in records if r["kind"] == "step"]
    assert len(steps) == 2 * 5                         # 10 source samples, 2 per batch
    assert steps[0]["lam"] == 0.0
    assert steps[-1]["lam"] == pytest.approx(0.999909204262595, rel=1e-12)
    result = records[-1]
    assert sum(map(sum, result["target_test"]["counts"])) == 7
    assert result["wall_clock_s"] > 0


def test_zero_lambda_run(trained):
    steps = [r for r in _records(trained["zero"]) if r["kind"] == "step"]
    assert all(r["lam"] == 0.0 for r in steps)
    assert all(r["objective"] == r["label_loss"] for r in steps)


def test_replay_from_recorded_config(trained, tmp_path):
    cfg = trained["a"] / "config.json"
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path), "--quiet"]) == 0
    assert (tmp_path / "model.ckpt").read_bytes() == (trained["a"] / "model.ckpt").read_bytes()
    final = [r for r in _records(tmp_path) if r["kind"] == "step"][-1]
    recorded = [r for r in _records(trained["a"]) if r["kind"] == "step"][-1]
    assert final == recorded


def test_flags_override_config_file(trained, tmp_path):
    cfg = json.loads((trained["a"] / "config.json").read_text())
    assert main(["train", "--config", str(trained["a"] / "config.json"), "--epochs", "1",
                 "--lambda", "fixed:0.25", "--out", str(tmp_path), "--quiet"]) == 0
    snapshot = json.loads((tmp_path / "config.json").read_text())
    assert snapshot == {**cfg, "epochs": 1, "lambda_mode": "fixed", "lambda_value": 0.25,
                        "out": str(tmp_path)}


def test_eval_writes_one_report_per_domain(trained, data_dir, tmp_path):
    assert main(["eval", "--checkpoint", str(trained["a"] / "model.ckpt"),
                 "--data", str(data_dir), "--out", str(tmp_path)]) == 0
    for domain in ("source", "target"):
        assert len((tmp_path / f"{domain}_confusion.csv").read_text().splitlines()) == 4
    assert json.loads((tmp_path / "target_summary.json").read_text())["total"] == 7


def test_project_is_deterministic_and_capped(trained, data_dir, tmp_path):
    args = ["project", "--checkpoint", str(trained["a"] / "model.ckpt"), "--data", str(data_dir),
            "--split", "train", "--max-per-domain", "6", "--seed", "2"]
    assert main(args + ["--out", str(tmp_path / "p1")]) == 0
    assert main(args + ["--out", str(tmp_path / "p2")]) == 0
    first = (tmp_path / "p1" / "projection_points.csv").read_text()
    assert first == (tmp_path / "p2" / "projection_points.csv").read_text()
    assert len(first.splitlines()) == 1 + 6 + 5        # target train holds only 5


def test_project_rejects_too_few_points(trained, data_dir, tmp_path):
    assert main(["project", "--checkpoint", str(trained["a"] / "model.ckpt"),
                 "--data", str(data_dir), "--max-per-domain", "2",
                 "--out", str(tmp_path)]) == 3


def test_bad_manifest_line_is_reported(data_dir, tmp_path, capsys):
    for name in ("source_train", "source_test", "target_train", "target_test"):
        text = (data_dir / f"{name}.csv").read_text()
        (tmp_path / f"{name}.csv").write_text(text)
    (tmp_path / "tensors").symlink_to(data_dir / "tensors")
    lines = (tmp_path / "source_train.csv").read_text().splitlines()
    lines[3] = lines[3].rsplit(",", 2)[0] + ",9,source"
    (tmp_path / "source_train.csv").write_text("\n".join(lines) + "\n")
    code = main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "run"), "--quiet"])
    assert code == 3
    assert "source_train.csv:4:" in capsys.readouterr().err


def test_config_errors_exit_2(data_dir, tmp_path, monkeypatch):
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path / "r"),
                 "--lambda", "sometimes"]) == 2
    assert main(["train", "--data", str(data_dir), "--out", str(tmp_path / "r"),
                 "--batch-size", "5"]) == 2
    monkeypatch.setenv("GRL_DANN_THREADS", "many")
    assert main(["gradcheck", "--seeds", "1"]) == 2


def test_parse_lambda():
    assert parse_lambda("scheduled") == ("scheduled", 1.0)
    assert parse_lambda("fixed:0.3") == ("fixed", 0.3)
    with pytest.raises(ConfigError):
        parse_lambda("fixed:")


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seeds", "1"]) == 0
    assert main(["gradcheck", "--seeds", "1", "--inject-fault", "conv_sign"]) == 4
    assert "FAIL conv2d_same" in capsys.readouterr().out
