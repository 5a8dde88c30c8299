import os

import numpy as np
import pytest

from caga import cli
from caga import selftest
from caga import tensor as T


def run(args, tmp_path):
    return cli.main(list(args) + ["--out", str(tmp_path)])


def test_selftest_passes(capsys):
    results = selftest.run_selftest()
    modules = {r.module for r in results}
    assert {"tensor", "layers", "attention", "model", "dataio", "training", "interpret"} <= modules
    assert all(r.passed for r in results), selftest.format_results(results)
    assert cli.main(["selftest"]) == 0
    assert "checks passed" in capsys.readouterr().out


def test_selftest_names_injected_wrong_backward(monkeypatch, capsys):
    def broken_exp(x):
        y = np.exp(x.data)
        return T.make_result(y, [x], lambda g: (2 * g * y,), "exp")

    monkeypatch.setattr(T, "exp", broken_exp)
    assert cli.main(["selftest"]) == 1
    out = capsys.readouterr().out
    assert "FAIL  tensor.grad:exp" in out and "failing: tensor.grad:exp" in out


def test_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["nonsense"])
    assert info.value.code == 2
    assert run(["cv", "--folds", "1"], tmp_path) == 2
    assert "at least 2" in capsys.readouterr().err


def test_io_errors(tmp_path):
    assert run(["eval", "--checkpoint", str(tmp_path / "none")], tmp_path / "o") == 3
    assert run(["cv", "--data", str(tmp_path / "none")], tmp_path / "o") == 3
    assert run(["profile", "--config", str(tmp_path / "none.txt")], tmp_path / "o") == 3


def test_synth_writes_tree(tmp_path):
    assert run(["synth", "--classes", "2", "--per-class", "3", "--size", "8"], tmp_path) == 0
    assert sorted(os.listdir(tmp_path / "synth")) == ["class0", "class1"]
    assert len(os.listdir(tmp_path / "synth" / "class0")) == 3


def test_profile_reports_caga_delta(tmp_path, capsys):
    assert run(["profile", "--dense-baseline", "512"], tmp_path) == 0
    out = capsys.readouterr().out
    assert "CAGA block parameters: 42704" in out
    assert (tmp_path / "profile.csv").read_text().startswith("layer,params,macs\n")


def test_config_file_and_flag_override(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("num_heads=2\nlr=0.5\n# comment\n")
    args = cli.build_parser().parse_args(["cv", "--config", str(cfg), "--lr", "0.01"])
    res = cli.resolve_config(args)
    assert res.model.caga.num_heads == 2 and res.train.lr == 0.01 and res.train.seed == 82


def test_train_eval_gradcam_round_trip(tmp_path):
    common = ["--classes", "2", "--per-class", "8", "--size", "16"]
    hyper = ["--folds", "4", "--epochs", "1", "--lr", "0.003"]
    cfg = tmp_path / "small.cfg"
    cfg.write_text("stem_channels=8,16\nstem_strides=2,1\n")
    out = tmp_path / "train"
    assert cli.main(["train", *common, *hyper, "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "manifest.json").exists() and (out / "checkpoint" / "manifest.txt").exists()
    assert cli.main(["eval", *common, "--folds", "4", "--checkpoint", str(out / "checkpoint"),
                     "--out", str(tmp_path / "eval")]) == 0
    assert (tmp_path / "eval" / "eval.csv").read_text().startswith("metric,value\naccuracy,")
    assert cli.main(["eval", *common, "--folds", "4", "--checkpoint", str(out / "checkpoint"),
                     "--min-accuracy", "1.01", "--out", str(tmp_path / "eval")]) == 1
    gc = tmp_path / "gc"
    assert cli.main(["gradcam", "--checkpoint", str(out / "checkpoint"), "--per-class", "8",
                     "--out", str(gc)]) == 0
    first = (gc / "overlay.ppm").read_bytes()
    assert cli.main(["gradcam", "--checkpoint", str(out / "checkpoint"), "--per-class", "8",
                     "--out", str(gc)]) == 0
    assert (gc / "overlay.ppm").read_bytes() == first
    assert cli.main(["gradcam", "--checkpoint", str(out / "checkpoint"), "--layer", "bogus",
                     "--out", str(gc)]) == 2


def test_outputs_stay_under_out(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    out = tmp_path / "only_here"
    assert cli.main(["synth", "--per-class", "1", "--size", "8", "--out", str(out)]) == 0
    assert os.listdir(tmp_path) == ["only_here"]
