# File: test_cli.py
import os

import pandas as pd
import pytest
from click.testing import CliRunner

from cli import cli
from src.container import read_dataset

TINY = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs", "tiny.yaml")


def _run(*args):
    return CliRunner().invoke(cli, ["--log-level", "WARNING", "--no-progress", *args])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Generate data and train a tiny checkpoint once for the whole module."""
    root = tmp_path_factory.mktemp("cli")
    data, ckpt = root / "data", root / "ckpt"
    result = _run("gen-data", "--tasks", "mv2v_inpaint,v2v_gray", "--count", "4", "--seed", "1", "--config", TINY,
                  "--out", str(data))
    assert result.exit_code == 0, result.output
    result = _run("train", "--data", str(data), "--config", TINY, "--out", str(ckpt))
    assert result.exit_code == 0, result.output
    return root, data, ckpt


def test_gen_data_writes_container(workspace):
    """gen-data writes the requested number of samples"""
    _, data, _ = workspace
    samples = read_dataset(str(data))
    assert [s.task for s in samples] == ["mv2v_inpaint", "v2v_gray"] * 2


def test_train_outputs(workspace):
    """train writes a checkpoint, loss log and validation history"""
    _, _, ckpt = workspace
    assert (ckpt / "manifest.json").exists()
    log = pd.read_csv(ckpt / "loss_log.tsv", sep="\t")
    assert log["step"].max() == 4 and len(log) == 8
    assert set(log["task_tag"]) <= {"MV2V", "V2V"}
    validation = pd.read_csv(ckpt / "validation.tsv", sep="\t")
    assert set(validation["task"]) == {"mv2v_inpaint", "v2v_gray"}


def test_sample_from_task(workspace):
    """sample generates a video for a task and stores it as a container"""
    root, _, ckpt = workspace
    out = root / "sample"
    result = _run("sample", "--ckpt", str(ckpt), "--task", "mv2v_inpaint", "--seed", "3", "--steps", "2",
                  "--guide", "2.0", "--config", TINY, "--out", str(out))
    assert result.exit_code == 0, result.output
    (video,) = read_dataset(str(out))
    assert video.target.shape == (4, 16, 16, 3) and video.seed == 3


def test_sample_from_vcu_file(workspace):
    """sample can take its conditioning unit from a container"""
    root, data, ckpt = workspace
    result = _run("sample", "--ckpt", str(ckpt), "--vcu-file", str(data), "--steps", "1", "--out", str(root / "s2"))
    assert result.exit_code == 0, result.output


def test_eval(workspace):
    """eval writes the metric table"""
    root, data, ckpt = workspace
    out = root / "eval"
    result = _run("eval", "--ckpt", str(ckpt), "--data", str(data), "--config", TINY, "--out", str(out))
    assert result.exit_code == 0, result.output
    assert (out / "eval.tsv").exists() and (out / "eval.json").exists()


def test_missing_checkpoint_is_usage_error(tmp_path):
    """A missing checkpoint exits 2 and names the path"""
    missing = tmp_path / "no-such-ckpt"
    result = _run("sample", "--ckpt", str(missing), "--task", "t2v", "--out", str(tmp_path / "o"))
    assert result.exit_code == 2
    assert "no-such-ckpt" in result.output


def test_sample_needs_one_source(workspace, tmp_path):
    """Exactly one of --task and --vcu-file is required"""
    _, data, ckpt = workspace
    result = _run("sample", "--ckpt", str(ckpt), "--out", str(tmp_path / "o"))
    assert result.exit_code == 2
    result = _run("sample", "--ckpt", str(ckpt), "--task", "t2v", "--vcu-file", str(data), "--out", str(tmp_path / "o"))
    assert result.exit_code == 2


def test_unknown_task_is_usage_error(tmp_path):
    """Unknown task names are usage errors"""
    result = _run("gen-data", "--tasks", "x2v", "--count", "1", "--out", str(tmp_path / "d"))
    assert result.exit_code == 2


def test_bad_config_is_usage_error(tmp_path, workspace):
    """Unknown config sections are usage errors"""
    _, data, _ = workspace
    bad = tmp_path / "bad.yaml"
    bad.write_text("optimizer:\n  lr: 1\n")
    result = _run("train", "--data", str(data), "--config", str(bad), "--out", str(tmp_path / "c"))
    assert result.exit_code == 2
    assert "optimizer" in result.output


def test_corrupt_container_fails(tmp_path, workspace):
    """A malformed container is a validation failure"""
    _, _, ckpt = workspace
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / "manifest").write_text("format VCU1\nversion 1\ncount 1\n")
    (broken / "sample_000000.vcu").write_bytes(b"VCU1\x00")
    result = _run("eval", "--ckpt", str(ckpt), "--data", str(broken), "--out", str(tmp_path / "e"))
    assert result.exit_code == 1
    assert "sample_000000.vcu" in result.output


def test_check_subset():
    """check runs the named checks and exits 0 when they pass"""
    result = _run("check", "--only", "codec roundtrip", "--only", "placement")
    assert result.exit_code == 0, result.output
    assert "codec roundtrip" in result.output and "FAILED" not in result.output


def test_check_unknown_name():
    """Selecting no known check is a failure"""
    assert _run("check", "--only", "nonexistent").exit_code == 1


def test_ablate_command(tmp_path):
    """ablate writes the summary for one axis"""
    out = tmp_path / "abl"
    result = _run("ablate", "--axis", "shift", "--seeds", "1", "--steps", "1", "--config", TINY, "--out", str(out))
    assert result.exit_code == 0, result.output
    assert (out / "summary.tsv").exists()


def test_gen_data_is_deterministic(tmp_path):
    """Generating the same dataset twice gives byte-identical records"""
    for name in ("a", "b"):
        result = _run("gen-data", "--count", "10", "--seed", "7", "--config", TINY, "--out", str(tmp_path / name))
        assert result.exit_code == 0, result.output
    records = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert records == sorted(p.name for p in (tmp_path / "b").iterdir())
    assert all((tmp_path / "a" / r).read_bytes() == (tmp_path / "b" / r).read_bytes() for r in records)
