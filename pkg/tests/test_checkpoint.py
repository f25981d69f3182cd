"""Tests for model construction and the checkpoint container."""

import math
from datetime import date

import numpy as np
import pytest
import torch

from hydrodiffusion.checkpoint import MAGIC, load_checkpoint, read_header, save_checkpoint
from hydrodiffusion.data import NormStats
from hydrodiffusion.errors import CheckpointError
from hydrodiffusion.models import ModelConfig, ModelKind, RunConfig
from hydrodiffusion.registry import GROUP_DT, GROUP_SSM, build_model, count_parameters, parameter_group_of
from tests.helpers import random_cond, toy_backbone


def _config() -> RunConfig:
    return RunConfig(seed=5, model=ModelConfig(backbone=toy_backbone()))


def _stats() -> NormStats:
    return NormStats(mean=np.arange(6.0), std=np.ones(6), d_z=2)


def _saved(tmp_path, kind=ModelKind.HYDRODIFFUSION, **kwargs):
    config = _config()
    model = build_model(kind, config.model, config.seed)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, kind, config, _stats(), **kwargs)
    return path, model


def _outputs(model, kind):
    cfg = toy_backbone()
    cond = random_cond(cfg, 2, seed=9)
    with torch.no_grad():
        if kind.is_diffusion:
            return model(torch.ones(2, cfg.l_f), torch.tensor([0.3, 0.6]), cond)
        return model(None, None, cond)


class TestRegistry:
    @pytest.mark.parametrize("kind", list(ModelKind))
    def test_same_seed_same_weights(self, kind):
        cfg = ModelConfig(backbone=toy_backbone())
        a, b = build_model(kind, cfg, seed=1), build_model(kind, cfg, seed=1)
        for (name, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(p, q), name

    def test_different_seed_different_weights(self):
        cfg = ModelConfig(backbone=toy_backbone())
        a, b = build_model(ModelKind.HYDRODIFFUSION, cfg, seed=1), build_model(ModelKind.HYDRODIFFUSION, cfg, seed=2)
        assert not torch.equal(a.encoder.weight, b.encoder.weight)

    def test_parameter_groups(self):
        model = build_model(ModelKind.HYDRODIFFUSION, ModelConfig(backbone=toy_backbone()), seed=0)
        kernel = model.layers[0].kernel
        assert parameter_group_of(kernel.log_dt) == GROUP_DT
        assert parameter_group_of(kernel.lambda_theta) == GROUP_SSM
        assert parameter_group_of(kernel.C) == GROUP_SSM
        assert parameter_group_of(kernel.D) == "default"
        assert count_parameters(model) == sum(p.numel() for p in model.parameters())

    def test_dtype_override(self):
        model = build_model(ModelKind.DETERMINISTIC_LSTM, ModelConfig(backbone=toy_backbone()), 0, dtype=torch.float32)
        assert next(model.parameters()).dtype == torch.float32
        assert torch.get_default_dtype() == torch.float64


class TestCheckpoint:
    @pytest.mark.parametrize("kind", list(ModelKind))
    def test_roundtrip_gives_identical_outputs(self, tmp_path, kind):
        path, model = _saved(tmp_path, kind)
        loaded = load_checkpoint(path, expected_kind=kind)
        assert loaded.kind == kind
        assert loaded.config == _config()
        assert torch.equal(_outputs(model.eval(), kind), _outputs(loaded.model, kind))

    def test_metadata_roundtrip(self, tmp_path):
        optimizer_state = {"exp_avg/encoder.weight": torch.full((4, 6), 0.5)}
        path, _ = _saved(tmp_path, step=12, epoch=3, optimizer_state=optimizer_state)
        loaded = load_checkpoint(path)
        assert (loaded.step, loaded.epoch) == (12, 3)
        np.testing.assert_array_equal(loaded.norm_stats.mean, np.arange(6.0))
        torch.testing.assert_close(loaded.optimizer_state["exp_avg/encoder.weight"], torch.full((4, 6), 0.5))

    def test_selection_state_roundtrip(self, tmp_path):
        kind = ModelKind.DETERMINISTIC_SSM
        latest = build_model(kind, _config().model, seed=11).state_dict()
        path, model = _saved(tmp_path, kind, epoch=4, last_state=latest, best_val=0.75, selected_epoch=2)
        loaded = load_checkpoint(path, expected_kind=kind)
        assert (loaded.epoch, loaded.selected_epoch, loaded.best_val) == (4, 2, 0.75)
        assert set(loaded.last_state) == set(latest)
        for name, tensor in latest.items():
            torch.testing.assert_close(loaded.last_state[name], tensor, rtol=0, atol=0, msg=name)
        for name, tensor in model.state_dict().items():
            torch.testing.assert_close(loaded.model.state_dict()[name], tensor, rtol=0, atol=0, msg=name)

    def test_selection_state_defaults(self, tmp_path):
        path, _ = _saved(tmp_path)
        loaded = load_checkpoint(path)
        assert loaded.last_state == {}
        assert loaded.best_val == math.inf
        assert read_header(path.read_bytes())[0].best_val is None

    def test_saves_are_byte_identical(self, tmp_path):
        path, model = _saved(tmp_path)
        again = tmp_path / "again.ckpt"
        save_checkpoint(again, model, ModelKind.HYDRODIFFUSION, _config(), _stats())
        assert path.read_bytes() == again.read_bytes()

    def test_header(self, tmp_path):
        path, model = _saved(tmp_path)
        payload = path.read_bytes()
        header, offset = read_header(payload)
        assert payload.startswith(MAGIC)
        assert header.kind == ModelKind.HYDRODIFFUSION
        assert len(payload) - offset == 8 * sum(p.numel() for p in model.state_dict().values())

    def test_truncated_file(self, tmp_path):
        path, _ = _saved(tmp_path)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        path, _ = _saved(tmp_path)
        path.write_bytes(path.read_bytes() + b"\x00" * 8)
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path, _ = _saved(tmp_path)
        path.write_bytes(b"NOTACKPT" + path.read_bytes()[8:])
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_kind_mismatch(self, tmp_path):
        path, _ = _saved(tmp_path, ModelKind.DIFFUSION_LSTM_ENCDEC)
        with pytest.raises(CheckpointError, match="expected hydrodiffusion"):
            load_checkpoint(path, expected_kind=ModelKind.HYDRODIFFUSION)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.ckpt"
        path.write_bytes(b"")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
