import shutil
import subprocess
import sys

import numpy as np
import pytest
import yaml

from kgdiff.cli import main
from kgdiff.evaluator import read_report

from conftest import TINY

SETS = [a for o in TINY + ["stage1.epochs=3", "stage2.epochs=2"] for a in ("--set", o)]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-synthetic, train-encoder and train-denoiser into one directory."""
    out = tmp_path_factory.mktemp("run")
    for cmd in ("gen-synthetic", "train-encoder", "train-denoiser"):
        assert main([cmd, "--out", str(out), "-q", *SETS]) == 0
    return out


def test_pipeline_writes_every_artifact(pipeline, capsys):
    out = str(pipeline)
    assert run(capsys, "evaluate", "--out", out, "-q", *SETS)[0] == 0
    rows = read_report(pipeline / "metrics.tsv")
    assert [r["source"] for r in rows] == ["encoder", "generated"]
    code, text, _ = run(capsys, "dump-trajectory", "--out", out, "-q", "--queries", "2", *SETS)
    assert code == 0 and "gold rank improved or held" in text
    lines = (pipeline / "trajectory.csv").read_text().splitlines()
    assert len(lines) == 1 + 2 * 11 * 24  # K = 10 plus step 0, all 24 entities kept
    for name in ("data/train.txt", "encoder.ckpt", "stage1_log.tsv", "denoiser.ckpt", "stage2_log.tsv"):
        assert (pipeline / name).exists(), name


def test_effective_config_is_written(pipeline):
    cfg = yaml.safe_load((pipeline / "train-encoder.config.yaml").read_text())
    assert cfg["stage1"]["epochs"] == 3 and cfg["encoder"]["dim"] == 8
    assert cfg["data"]["dir"] == str((pipeline / "data").resolve())


def test_encoder_only_evaluation_needs_no_denoiser(pipeline, tmp_path, capsys):
    shutil.copy(pipeline / "encoder.ckpt", tmp_path / "encoder.ckpt")
    shutil.copytree(pipeline / "data", tmp_path / "data")
    code, _, _ = run(capsys, "evaluate", "--out", str(tmp_path), "-q", "--set", "eval.source=encoder", *SETS)
    assert code == 0
    assert [r["source"] for r in read_report(tmp_path / "metrics.tsv")] == ["encoder"]


def test_missing_denoiser_is_a_usage_error_naming_it(pipeline, tmp_path, capsys):
    shutil.copy(pipeline / "encoder.ckpt", tmp_path / "encoder.ckpt")
    code, _, err = run(capsys, "evaluate", "--out", str(tmp_path), "-q", *SETS)
    assert code == 2
    assert "denoiser checkpoint" in err and err.startswith("error: usage:")
    assert (tmp_path / "evaluate.config.yaml").exists()


def test_bad_override_exits_2(tmp_path, capsys):
    code, _, err = run(capsys, "train-encoder", "--out", str(tmp_path), "--set", "stage1.lr=-1")
    assert code == 2 and "stage1.lr" in err


def test_unknown_command_exits_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["fly"])
    assert info.value.code == 2


def test_corrupt_checkpoint_is_a_runtime_error(tmp_path, capsys):
    (tmp_path / "bad.ckpt").write_bytes(b"garbage-bytes-here-and-more")
    code, _, err = run(capsys, "inspect-checkpoint", str(tmp_path / "bad.ckpt"), "--out", str(tmp_path))
    assert code == 1 and err.startswith("error: checkpoint:")


def test_divergence_is_reported_with_its_category(tmp_path, capsys):
    with np.errstate(all="ignore"):
        code, _, err = run(capsys, "train-encoder", "--out", str(tmp_path), "-q", *SETS,
                           "--set", "stage1.lr=1.0e+200")
    assert code == 1 and err.startswith("error: divergence:") and "epoch 0" in err


def test_inspect_checkpoint_prints_the_header(pipeline, capsys):
    code, text, _ = run(capsys, "inspect-checkpoint", str(pipeline / "denoiser.ckpt"), "--out", str(pipeline))
    assert code == 0
    lines = text.splitlines()
    assert lines[0] == "owner=denoiser" and lines[1] == "version=1"
    assert any(ln.startswith("meta.encoder_hash=") for ln in lines)
    assert any(ln.strip().startswith("in_w\t24x16\tfloat64") for ln in lines)


def test_ablate_writes_tagged_rows(pipeline, tmp_path, capsys):
    shutil.copytree(pipeline / "data", tmp_path / "data")
    code, _, _ = run(capsys, "ablate", "--suite", "encoder", "--out", str(tmp_path), "-q", *SETS,
                     "--set", "stage1.epochs=1")
    assert code == 0
    rows = read_report(tmp_path / "ablation.tsv")
    assert [(r["variant"], r["source"]) for r in rows] == [("full", "encoder"), ("no-mgat", "encoder")]


def test_console_script_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "kgdiff.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "train-encoder" in res.stdout
