# File: test_checkpoint.py
import json
import os
import shutil

import numpy as np
import pytest

from src import numerics as num
from src.checkpoint import MANIFEST, load, save
from src.checks import TINY_GEOMETRY, tiny_model
from src.config import TrainConfig
from src.datagen import generate_dataset
from src.errors import CheckpointError, CheckpointVersionError
from src.model import init_params
from src.train import new_state, train_step


@pytest.fixture
def trained(tmp_path):
    cfg = tiny_model()
    train_cfg = TrainConfig(batch_size=2, learning_rate=1e-3)
    state = new_state(init_params(cfg, 0), train_cfg)
    data = generate_dataset(["mv2v_inpaint"], 2, 0, TINY_GEOMETRY)
    state, _ = train_step(state, cfg, train_cfg, data)
    path = tmp_path / "ckpt"
    save(state, str(path), cfg, train_cfg)
    return cfg, train_cfg, state, path


def test_roundtrip(trained):
    """Parameters, flags, moments, step and configs come back unchanged"""
    cfg, train_cfg, state, path = trained
    ckpt = load(str(path))
    assert ckpt.model_cfg == cfg and ckpt.train_cfg == train_cfg and ckpt.step == 1
    assert ckpt.params.names() == state.params.names()
    assert all(np.array_equal(ckpt.params[n], state.params[n]) for n in state.params.names())
    assert ckpt.params.trainable == state.params.trainable
    assert set(ckpt.moments) == set(state.moments)
    name = next(iter(state.moments))
    assert np.array_equal(ckpt.moments[name][1], state.moments[name][1])


def test_resume_continues_generator(trained):
    """A resumed state draws the same random numbers as the original"""
    _, _, state, path = trained
    resumed = load(str(path)).to_state()
    assert resumed.step == state.step
    assert np.array_equal(num.uniform(resumed.rng, (5,)), num.uniform(state.rng, (5,)))


def test_buffers_are_little_endian_f32(trained):
    """Each parameter is a raw float32 buffer of the manifest's shape"""
    _, _, state, path = trained
    raw = (path / "params" / "final.proj.weight.f32").read_bytes()
    assert len(raw) == 4 * state.params["final.proj.weight"].size
    assert np.array_equal(np.frombuffer(raw, dtype="<f4").reshape(state.params["final.proj.weight"].shape),
                          state.params["final.proj.weight"])


def test_unsupported_version(trained):
    """Manifests with another format version are refused"""
    _, _, _, path = trained
    manifest = json.loads((path / MANIFEST).read_text())
    manifest["version"] = 99
    (path / MANIFEST).write_text(json.dumps(manifest))
    with pytest.raises(CheckpointVersionError):
        load(str(path))


def test_unlisted_buffer(trained):
    """Buffers without manifest entries are an error"""
    _, _, _, path = trained
    (path / "params" / "stray.f32").write_bytes(b"\0" * 4)
    with pytest.raises(CheckpointError, match="stray"):
        load(str(path))


def test_truncated_buffer(trained):
    """A buffer of the wrong length is an error naming the tensor"""
    _, _, _, path = trained
    target = path / "params" / "patch_embed.bias.f32"
    target.write_bytes(target.read_bytes()[:-4])
    with pytest.raises(CheckpointError, match="patch_embed.bias"):
        load(str(path))


def test_missing_parameter(trained):
    """A manifest lacking a parameter of the model is an error"""
    _, _, _, path = trained
    manifest = json.loads((path / MANIFEST).read_text())
    manifest["parameters"] = [p for p in manifest["parameters"] if p["name"] != "final.proj.bias"]
    (path / MANIFEST).write_text(json.dumps(manifest))
    os.remove(path / "params" / "final.proj.bias.f32")
    with pytest.raises(CheckpointError, match="final.proj.bias"):
        load(str(path))


def test_missing_checkpoint(tmp_path):
    """Loading a directory without a manifest fails cleanly"""
    with pytest.raises(CheckpointError):
        load(str(tmp_path / "nowhere"))


def test_missing_params_directory(trained):
    """A checkpoint whose parameter folder is gone raises CheckpointError, not OSError"""
    _, _, _, path = trained
    shutil.rmtree(path / "params")
    with pytest.raises(CheckpointError, match="params directory"):
        load(str(path))


def test_save_params_only(tmp_path):
    """A bare parameter store saves with no moments"""
    cfg = tiny_model("fullft")
    save(init_params(cfg, 0), str(tmp_path), cfg)
    ckpt = load(str(tmp_path))
    assert ckpt.moments == {} and ckpt.train_cfg is None and ckpt.step == 0
