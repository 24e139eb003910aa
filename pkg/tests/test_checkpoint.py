from __future__ import annotations

import zipfile

import numpy as np
import pytest
import torch

from fewtrace.checkpoint import (
    load_ae,
    load_learner,
    load_tensors,
    save_ae,
    save_learner,
    save_tensors,
)
from fewtrace.errors import ValidationError
from fewtrace.fusion import AEConfig, init_ae_params
from fewtrace.meta import LearnerConfig, MetaConfig, init_learner_params


def test_tensor_archive_layout(tmp_path):
    path = tmp_path / "ck.zip"
    tensors = {"a.W": np.arange(6, dtype=np.float64).reshape(2, 3)}
    save_tensors(path, "fusion_autoencoder", tensors, {"config": {}, "seed": 1})
    with zipfile.ZipFile(path) as zf:
        names = set(zf.namelist())
    assert names == {"manifest.json", "tensors/a.W.f32"}
    manifest, loaded = load_tensors(path)
    assert manifest["kind"] == "fusion_autoencoder"
    assert loaded["a.W"].dtype == np.float32
    assert loaded["a.W"].shape == (2, 3)
    assert np.allclose(loaded["a.W"], tensors["a.W"])


def test_save_load_save_byte_identical(tmp_path):
    cfg = AEConfig(d_common=8, n_heads=2, seed=3)
    params = init_ae_params(10, 6, cfg)
    first = tmp_path / "a.zip"
    second = tmp_path / "b.zip"
    save_ae(first, params)
    reloaded, _ = load_ae(first)
    save_ae(second, reloaded)
    assert first.read_bytes() == second.read_bytes()


def test_repeated_save_byte_identical(tmp_path):
    cfg = AEConfig(d_common=8, n_heads=2, seed=4)
    params = init_ae_params(10, 6, cfg)
    a, b = tmp_path / "a.zip", tmp_path / "b.zip"
    save_ae(a, params)
    save_ae(b, params)
    assert a.read_bytes() == b.read_bytes()


@pytest.mark.parametrize("variant", ["multihead", "linear", "glu"])
def test_ae_round_trip_all_variants(tmp_path, variant):
    cfg = AEConfig(d_common=8, n_heads=4, seed=5, variant=variant)
    params = init_ae_params(7, 5, cfg)
    params.latent_mean = torch.zeros(8, dtype=torch.float64)
    params.latent_std = torch.ones(8, dtype=torch.float64)
    path = tmp_path / "ck.zip"
    save_ae(path, params, {"embedder": "hashing", "embed_dim": 5})
    loaded, manifest = load_ae(path)
    assert loaded.config == cfg
    assert manifest["featurize"]["embed_dim"] == 5
    for name, tensor in params.named_tensors().items():
        assert np.allclose(
            loaded.named_tensors()[name].numpy(),
            tensor.numpy().astype(np.float32),
        ), name
    assert loaded.latent_mean is not None


def test_kind_mismatch_rejected(tmp_path):
    cfg = LearnerConfig(d_model=8, n_heads=2, n_classes=3, seed=6)
    params = init_learner_params(cfg)
    path = tmp_path / "meta.zip"
    save_learner(path, params, cfg, MetaConfig())
    with pytest.raises(ValidationError, match="meta_learner"):
        load_ae(path)


@pytest.mark.parametrize("body", ["transformer_encoder", "linear", "rnn", "lstm", "cnn"])
def test_learner_round_trip_all_bodies(tmp_path, body):
    cfg = LearnerConfig(body=body, d_model=8, n_heads=2, n_classes=4, seed=7)
    mcfg = MetaConfig(alpha=0.2, beta=0.01, inner_steps=3, meta_iterations=9)
    params = init_learner_params(cfg, zero_head=False)
    path = tmp_path / "meta.zip"
    save_learner(path, params, cfg, mcfg)
    loaded, loaded_cfg, loaded_mcfg = load_learner(path)
    assert loaded_cfg == cfg
    assert loaded_mcfg == mcfg
    for name, tensor in params.named_tensors().items():
        assert np.allclose(
            loaded.named_tensors()[name].numpy(), tensor.numpy().astype(np.float32)
        ), name


def test_missing_checkpoint_is_validation_error(tmp_path):
    with pytest.raises(ValidationError, match="does not exist"):
        load_tensors(tmp_path / "absent.zip")


def test_corrupt_checkpoint_is_validation_error(tmp_path):
    path = tmp_path / "junk.zip"
    path.write_bytes(b"this is not a zip archive")
    with pytest.raises(ValidationError, match="not a valid archive"):
        load_tensors(path)
