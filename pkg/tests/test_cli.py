import csv
import json
from pathlib import Path

import pytest

from qsparse import scaling_law
from qsparse.cli import main, render_probe_svgs
from qsparse.training import read_runlog

TINY = [
    "--model.hidden_size=8",
    "--model.glu_size=12",
    "--model.n_heads=2",
    "--model.n_layers=1",
    "--model.seq_length=16",
    "--train.total_steps=12",
    "--train.warmup_steps=2",
    "--train.batch_size_tokens=64",
    "--train.log_interval=4",
]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "corpus.txt"
    assert main(["corpus", str(path), "--bytes=20000", "--seed=0"]) == 0
    return path


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    code = main(["train", "--corpus", str(corpus), "--out-dir", str(out), *TINY,
                 "--sparsity.mode=topk", "--sparsity.keep=0.7"])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    d = tmp_path_factory.mktemp("fit")
    obs = d / "obs.csv"
    scaling_law.write_observations(obs, scaling_law.synthetic_observations(scaling_law.REPORTED_FULL_PRECISION))
    out = d / "out"
    assert main(["fit", str(obs), "--out-dir", str(out)]) == 0
    return out


def test_train_outputs(trained):
    names = {p.name for p in trained.iterdir()}
    assert {"runlog.csv", "sparsity.csv", "grad_norms.csv", "checkpoint.bin", "config.txt",
            "loss.svg", "manifest.json"} <= names
    rows = read_runlog(trained / "runlog.csv")
    assert [r.step for r in rows] == list(range(12))
    # 1 - 6/8 on hidden inputs, 1 - ceil(8.4)/12 on the down input
    assert all(r.overall_sparsity >= 0.25 for r in rows)
    assert (trained / "grad_norms.csv").read_text().splitlines()[0] == "step,layer,projection,value"


def test_default_width_topk_floor(corpus, tmp_path):
    args = ["train", "--corpus", str(corpus), "--out-dir", str(tmp_path), "--model.n_layers=1",
            "--model.seq_length=32", "--train.total_steps=3", "--train.warmup_steps=0",
            "--train.batch_size_tokens=64", "--sparsity.mode=topk", "--sparsity.keep=0.7"]
    assert main(args) == 0
    assert all(r.overall_sparsity >= 0.3 for r in read_runlog(tmp_path / "runlog.csv"))


def test_missing_corpus_exit_2(tmp_path, capsys):
    assert main(["train", "--corpus", str(tmp_path / "nope.txt"), "--out-dir", str(tmp_path / "o")]) == 2
    assert "cannot read corpus" in capsys.readouterr().err


def test_bad_override_exit_2(corpus, tmp_path, capsys):
    assert main(["train", "--corpus", str(corpus), "--out-dir", str(tmp_path), "--model.bogus=1"]) == 2
    assert "model.bogus" in capsys.readouterr().err
    assert main(["train", "--corpus", str(corpus), "--out-dir", str(tmp_path), "--train.total_steps=x"]) == 2
    assert main(["train", "--corpus", str(corpus), "--out-dir", str(tmp_path), "--sparsity.keep=0"]) == 2


def test_config_file_and_line_errors(corpus, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny\nmodel.hidden_size=8\nnot a pair\n")
    assert main(["train", "--config", str(cfg), "--corpus", str(corpus), "--out-dir", str(tmp_path)]) == 2
    assert "run.cfg:3" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exit_3(corpus, tmp_path):
    args = ["train", "--corpus", str(corpus), "--out-dir", str(tmp_path), *TINY, "--train.learning_rate=1e300",
            "--train.grad_clip=none", "--train.warmup_steps=0"]
    assert main(args) == 3
    assert (tmp_path / "runlog.csv").exists()


def test_rerun_train_reproduces(trained, tmp_path, capsys):
    assert main(["rerun", str(trained / "manifest.json"), "--out-dir", str(tmp_path)]) == 0
    for name in ("runlog.csv", "sparsity.csv", "grad_norms.csv"):
        assert (tmp_path / name).read_bytes() == (trained / name).read_bytes()
    assert "reproduced" in capsys.readouterr().out


def test_rerun_detects_changed_input(trained, corpus, tmp_path):
    manifest = json.loads((trained / "manifest.json").read_text())
    manifest["inputs"]["corpus"]["sha256"] = "0" * 64
    bad = tmp_path / "m.json"
    bad.write_text(json.dumps(manifest))
    assert main(["rerun", str(bad), "--out-dir", str(tmp_path / "o")]) == 2


def test_rerun_detects_output_mismatch(trained, tmp_path, capsys):
    manifest = json.loads((trained / "manifest.json").read_text())
    manifest["outputs"]["runlog.csv"] = "f" * 64
    bad = tmp_path / "m.json"
    bad.write_text(json.dumps(manifest))
    assert main(["rerun", str(bad), "--out-dir", str(tmp_path / "o")]) == 3
    assert "mismatch: runlog.csv" in capsys.readouterr().err


def test_probe_outputs_and_svg_identity(trained, corpus, tmp_path):
    out = tmp_path / "probe"
    assert main(["probe", "--checkpoint", str(trained / "checkpoint.bin"), "--corpus", str(corpus),
                 "--out-dir", str(out), "--batches=2", "--train.batch_size_tokens=64"]) == 0
    with open(out / "gradients.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["variant"] for r in rows} == {"dense", "ste", "no_ste"}
    assert len(rows) == 3 * 7
    for proj in ("q", "k", "v", "out", "gate", "up", "down"):
        assert (out / f"grad_{proj}.svg").read_text().startswith("<svg")
    # charts are a pure function of the CSV
    again = tmp_path / "again"
    again.mkdir()
    for p in render_probe_svgs(out / "gradients.csv", again):
        assert p.read_bytes() == (out / p.name).read_bytes()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["ratios"]["QKV"] == pytest.approx(0.25)

    rerun = tmp_path / "rerun"
    assert main(["rerun", str(out / "manifest.json"), "--out-dir", str(rerun)]) == 0


def test_probe_config_mismatch_exit_2(trained, corpus, tmp_path):
    cfg = tmp_path / "other.cfg"
    cfg.write_text("model.hidden_size=16\n")
    assert main(["probe", "--checkpoint", str(trained / "checkpoint.bin"), "--corpus", str(corpus),
                 "--out-dir", str(tmp_path / "o"), "--config", str(cfg)]) == 2


def test_probe_bad_checkpoint_exit_2(corpus, tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"nonsense")
    assert main(["probe", "--checkpoint", str(bad), "--corpus", str(corpus), "--out-dir", str(tmp_path)]) == 2


def test_fit_outputs(fitted):
    params = json.loads((fitted / "params.json").read_text())
    truth = scaling_law.REPORTED_FULL_PRECISION.to_dict()
    for k, v in truth.items():
        assert params[k] == pytest.approx(v, rel=1e-2)
    assert len(params["starts"]) == 243
    for axis in ("n", "s", "optimal"):
        assert (fitted / f"curve_{axis}.csv").exists()
        assert (fitted / f"curve_{axis}.svg").exists()


def test_fit_malformed_line_exit_2(tmp_path, capsys):
    obs = tmp_path / "obs.csv"
    obs.write_text("n_params,sparsity,loss\n1e9,0.1,2.5\n1e9,oops,2.5\n")
    assert main(["fit", str(obs), "--out-dir", str(tmp_path / "o")]) == 2
    assert "obs.csv:3" in capsys.readouterr().err


def test_fit_too_few_exit_3(tmp_path, capsys):
    obs = tmp_path / "obs.csv"
    obs.write_text("n_params,sparsity,loss\n1e9,0.1,2.5\n")
    assert main(["fit", str(obs), "--out-dir", str(tmp_path / "o")]) == 3
    assert "fit failed" in capsys.readouterr().err


def test_optimal_reported_and_boundary(tmp_path, capsys, caplog):
    good = tmp_path / "p.json"
    good.write_text(json.dumps(scaling_law.REPORTED_FULL_PRECISION.to_dict()))
    assert main(["optimal", str(good)]) == 0
    result = json.loads(capsys.readouterr().out)
    assert 0.44 <= result["s_star"] <= 0.56 and not result["boundary"]

    degenerate = tmp_path / "d.json"
    degenerate.write_text(json.dumps({**scaling_law.REPORTED_FULL_PRECISION.to_dict(), "c_dense": 0.0}))
    with caplog.at_level("WARNING", logger="qsparse"):
        assert main(["optimal", str(degenerate), "--out-dir", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o" / "optimal.json").read_text())["boundary"] is True
    assert any("boundary" in r.message or "no interior" in r.message for r in caplog.records)


def test_optimal_bad_json_exit_2(tmp_path):
    bad = tmp_path / "p.json"
    bad.write_text("{\"alpha\": 1}")
    assert main(["optimal", str(bad)]) == 2


def test_rerun_fit_and_optimal(fitted, tmp_path):
    assert main(["rerun", str(fitted / "manifest.json"), "--out-dir", str(tmp_path / "fit")]) == 0
    for axis in ("n", "s", "optimal"):
        name = f"curve_{axis}.csv"
        assert (tmp_path / "fit" / name).read_bytes() == (fitted / name).read_bytes()
    assert main(["optimal", str(fitted / "params.json"), "--out-dir", str(tmp_path / "opt")]) == 0
    assert main(["rerun", str(tmp_path / "opt" / "manifest.json"), "--out-dir", str(tmp_path / "opt2")]) == 0


def test_unknown_argument_for_fit(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["fit", str(tmp_path / "x.csv"), "--out-dir", str(tmp_path), "--extra=1"])
    assert info.value.code == 2


def test_ablate_outputs(corpus, tmp_path):
    out = tmp_path / "ablate"
    assert main(["ablate", "--corpus", str(corpus), "--out-dir", str(out), *TINY, "--train.total_steps=4",
                 "--sparsity.keep=0.5"]) == 0
    with open(out / "comparison.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert {r["variant"] for r in rows} == {"topk_ste", "topk_no_ste", "relu", "dense"}
    step0 = {r["variant"]: r["loss"] for r in rows if r["step"] == "0"}
    assert step0["topk_ste"] == step0["topk_no_ste"]
    for name in ("loss.svg", "sparsity.svg", "topk_ste_components.svg", "relu_components.svg"):
        assert (out / name).exists()
    assert main(["rerun", str(out / "manifest.json"), "--out-dir", str(tmp_path / "again")]) == 0
    assert (tmp_path / "again" / "comparison.csv").read_bytes() == (out / "comparison.csv").read_bytes()
    assert Path(out / "topk_ste_checkpoint.bin").exists()
