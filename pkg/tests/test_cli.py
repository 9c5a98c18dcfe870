import hashlib
from pathlib import Path

import pytest

from fxgesture import cli, modelstore

SYN = ["--synthetic", "--per-class", "6"]


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(Path(d).iterdir())}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    args = ["train", "--preset", "smartwatch-lstm-32", *SYN, "--epochs", "8", "--out", str(out)]
    assert cli.main(args) == 0
    return out


def test_train_artifacts_and_determinism(tmp_path):
    args = ["train", "--preset", "smartwatch-lstm-128", "--synthetic", "--seed", "7",
            "--per-class", "3", "--epochs", "1", "--out", str(tmp_path)]
    assert cli.main(args) == 0
    first = _files(tmp_path)
    assert {"model_float.fxrn", "curve.csv", "train_manifest.txt"} <= set(first)
    assert cli.main(args) == 0
    assert _files(tmp_path) == first


def test_train_manifest_lists_resolved_config(trained):
    text = (trained / "train_manifest.txt").read_text()
    assert "preset = smartwatch-lstm-32" in text
    assert "per_class = 6" in text and "seed = 0" in text


def test_missing_data_path(tmp_path):
    out = tmp_path / "out"
    assert cli.main(["train", "--data", str(tmp_path / "nope"), "--out", str(out)]) == 2
    assert not out.exists()


def test_no_data_source_is_usage_error(tmp_path):
    assert cli.main(["train", "--out", str(tmp_path / "o")]) == 1
    assert not (tmp_path / "o").exists()


def test_bad_flags_exit_one(tmp_path):
    with pytest.raises(SystemExit) as e:
        cli.main(["train", "--preset", "nope"])
    assert e.value.code == 1
    with pytest.raises(SystemExit) as e:
        cli.main(["frobnicate"])
    assert e.value.code == 1


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment\npreset = smartwatch-lstm-32\nseed = 3\nsynthetic = true\n"
                   "per_class = 3\nepochs = 1\n")
    out = tmp_path / "o"
    assert cli.main(["train", "--config", str(cfg), "--seed", "5", "--out", str(out)]) == 0
    text = (out / "train_manifest.txt").read_text()
    assert "seed = 5" in text and "preset = smartwatch-lstm-32" in text
    cfg.write_text("bogus = 1\n")
    assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 1


def test_sensitivity_accel(trained, tmp_path):
    model = str(trained / "model_float.fxrn")
    before = hashlib.sha256(Path(model).read_bytes()).hexdigest()
    args = ["sensitivity", "--model", model, *SYN, "--bits", "2", "--retrain-epochs", "1",
            "--out", str(tmp_path)]
    assert cli.main(args) == 0
    rows = (tmp_path / "sensitivity.csv").read_text().splitlines()[2:]
    kinds = [r.split(",")[1] for r in rows]
    assert kinds.count("weight") == 3 and kinds.count("signal") == 2
    assert all(r.split(",")[4] for r in rows)
    assert (tmp_path / "sensitivity.txt").exists()
    assert (tmp_path / "sensitivity_manifest.txt").exists()
    assert hashlib.sha256(Path(model).read_bytes()).hexdigest() == before


def test_sensitivity_direct_only_and_group(trained, tmp_path):
    model = str(trained / "model_float.fxrn")
    assert cli.main(["sensitivity", "--model", model, *SYN, "--no-retrain",
                     "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "sensitivity.csv").read_text().splitlines()[2:]
    assert all(r.endswith(",") for r in rows)
    assert cli.main(["sensitivity", "--model", model, *SYN, "--no-retrain", "--group", "s:L1",
                     "--bits", "2,3", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "sensitivity.csv").read_text().splitlines()[2:]
    assert [r.split(",")[:3] for r in rows] == [["L1", "signal", "2"], ["L1", "signal", "3"]]
    assert cli.main(["sensitivity", "--model", model, *SYN, "--group", "w:C1",
                     "--out", str(tmp_path)]) == 1


def test_quantize_uniform(trained, tmp_path):
    args = ["quantize", "--model", str(trained / "model_float.fxrn"), *SYN, "--alloc", "all=2",
            "--retrain-epochs", "1", "--out", str(tmp_path)]
    assert cli.main(args) == 0
    assert "savings: 93.75%" in (tmp_path / "summary.txt").read_text()
    m = modelstore.read_model(tmp_path / "model_packed.fxrn")
    assert all(s.bits == 2 for s in m.weight_specs.values())
    assert {"cost.csv", "cost.txt", "quantize_manifest.txt"} <= set(_files(tmp_path))


def test_quantize_missing_group(trained, tmp_path, capsys):
    out = tmp_path / "o"
    args = ["quantize", "--model", str(trained / "model_float.fxrn"), *SYN,
            "--alloc", "w:*=2,s:In=2", "--out", str(out)]
    assert cli.main(args) == 1
    assert "s:L1" in capsys.readouterr().err
    assert not out.exists()


def test_quantize_escalate(trained, tmp_path):
    args = ["quantize", "--model", str(trained / "model_float.fxrn"), *SYN, "--escalate",
            "--target-miss", "0", "--max-bits", "3", "--no-retrain", "--out", str(tmp_path)]
    assert cli.main(args) == 0
    assert (tmp_path / "alloc_trace.csv").read_text().startswith("step,kind,group")
    no_target = ["quantize", "--model", str(trained / "model_float.fxrn"), *SYN, "--escalate",
                 "--out", str(tmp_path / "o")]
    assert cli.main(no_target) == 1
    assert not (tmp_path / "o").exists()


def test_eval(trained, tmp_path, capsys):
    model = str(trained / "model_float.fxrn")
    assert cli.main(["eval", "--model", model, *SYN, "--mode", "float", "--out", str(tmp_path)]) == 0
    miss = float(capsys.readouterr().out.strip())
    assert 0 <= miss <= 100
    assert (tmp_path / "eval_manifest.txt").exists()
    assert cli.main(["eval", "--model", model, *SYN, "--ratios", "0.5,0.5,0",
                     "--out", str(tmp_path)]) == 2


def test_eval_missing_model(tmp_path):
    assert cli.main(["eval", "--model", str(tmp_path / "none.fxrn"), *SYN,
                     "--out", str(tmp_path)]) == 2
    (tmp_path / "junk.fxrn").write_bytes(b"garbage")
    assert cli.main(["eval", "--model", str(tmp_path / "junk.fxrn"), *SYN,
                     "--out", str(tmp_path)]) == 2


def test_pack_then_eval_matches_master(trained, tmp_path, capsys):
    model = str(trained / "model_float.fxrn")
    assert cli.main(["pack", "--model", model, *SYN, "--alloc", "all=3", "--out", str(tmp_path)]) == 0
    capsys.readouterr()
    assert cli.main(["eval", "--model", str(tmp_path / "model_packed.fxrn"), *SYN,
                     "--out", str(tmp_path)]) == 0
    packed_miss = capsys.readouterr().out
    m = modelstore.read_model(tmp_path / "model_packed.fxrn")
    assert m.weight_specs and m.signal_specs
    assert packed_miss.strip()


def test_pack_weights_only_needs_no_data(trained, tmp_path):
    assert cli.main(["pack", "--model", str(trained / "model_float.fxrn"), "--alloc", "w:*=2",
                     "--out", str(tmp_path)]) == 0
    m = modelstore.read_model(tmp_path / "model_packed.fxrn")
    assert m.signal_specs == {}


def test_report(tmp_path, capsys):
    assert cli.main(["report", "--preset", "cambridge-cnn-lstm", "--out", str(tmp_path)]) == 0
    text = capsys.readouterr().out
    assert "56.448 M" in text and "34.56 K" in text and "fits in" in text
    assert cli.main(["report", "--preset", "smartwatch-lstm-128", "--out", str(tmp_path)]) == 0
    assert "680.96 K" in capsys.readouterr().out
    assert "packed_bytes,,17250" in (tmp_path / "cost.csv").read_text()
