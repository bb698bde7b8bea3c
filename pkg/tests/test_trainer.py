"""Tests for the learning-rate schedule, training steps, fit, checkpoints and resume."""

import math

import pytest
import torch
from torch import nn

from src.container import read_container, tensor_digest
from src.dataset import AugmentPolicy, Batch, batch_iter, scan_dataset
from src.errors import ConfigError, CorruptWeights, NonFiniteLoss
from src.evaluator import evaluate_manifest, micro_dice
from src.extractor import make_stub_backend, save_backend
from src.model import ModelConfig, build_model, trainable_parameters
from src.trainer import (
    LOG_COLUMNS,
    TrainConfig,
    fit,
    load_checkpoint,
    lr_schedule,
    make_optimizer,
    resume,
    save_checkpoint,
    train_step,
)
from tests.conftest import write_crack_dataset


def _model_digest(model) -> str:
    return tensor_digest(model.state_dict().items())


def _batch(manifest, size=2) -> Batch:
    return next(iter(batch_iter(manifest, size)))


def _fixture_config(**kwargs) -> TrainConfig:
    defaults = dict(epochs=2, batch_size=2, lr0=1e-3, seed=0, augment=AugmentPolicy(seed=0))
    defaults.update(kwargs)
    return TrainConfig(**defaults)


class TestSchedule:
    def test_endpoints(self):
        cfg = TrainConfig(lr0=3e-4, epochs=100)
        assert lr_schedule(cfg, 0) == pytest.approx(3e-4, abs=1e-12)
        assert lr_schedule(cfg, 50) == pytest.approx(1.5e-4, abs=1e-12)
        assert lr_schedule(cfg, 100) == 0.0

    def test_non_increasing(self):
        cfg = TrainConfig(epochs=7)
        rates = [lr_schedule(cfg, e) for e in range(8)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))

    def test_quarter_point(self):
        cfg = TrainConfig(lr0=1.0, epochs=4)
        assert lr_schedule(cfg, 1) == pytest.approx(0.5 * (1 + math.cos(math.pi / 4)))

    @pytest.mark.parametrize("epoch", [-1, 101])
    def test_out_of_range(self, epoch):
        with pytest.raises(ValueError, match="outside"):
            lr_schedule(TrainConfig(epochs=100), epoch)


class TestTrainConfig:
    @pytest.mark.parametrize(
        "kwargs, field",
        [({"lr0": 0.0}, "lr0"), ({"epochs": 0}, "epochs"), ({"batch_size": 0}, "batch_size")],
    )
    def test_validation(self, kwargs, field):
        with pytest.raises(ConfigError, match=field):
            TrainConfig(**kwargs).validate()

    def test_dict_form_restores_config(self):
        cfg = TrainConfig(betas=(0.8, 0.99), augment=AugmentPolicy(rotation_choices=(0, 180), seed=4))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestOptimizer:
    def test_only_trainable_parameters(self, tiny_model):
        optimizer = make_optimizer(tiny_model, TrainConfig())
        handed = {id(p) for group in optimizer.param_groups for p in group["params"]}
        assert handed == {id(p) for _, p in trainable_parameters(tiny_model)}
        assert not handed & {id(p) for p in tiny_model.extractor.parameters()}

    def test_minimizes_a_quadratic(self):
        class Quadratic(nn.Module):
            def __init__(self):
                super().__init__()
                self.x = nn.Parameter(torch.zeros(3))

        module = Quadratic()
        optimizer = make_optimizer(module, TrainConfig(lr0=0.1, weight_decay=0.0))
        for _ in range(300):
            optimizer.zero_grad()
            ((module.x - 3.0) ** 2).sum().backward()
            optimizer.step()
        assert torch.allclose(module.x.detach(), torch.full((3,), 3.0), atol=0.05)


class TestTrainStep:
    def test_extractor_frozen_over_twenty_steps(self, tiny_model, crack_dataset):
        manifest = scan_dataset(crack_dataset, (32, 32))
        optimizer = make_optimizer(tiny_model, TrainConfig(lr0=1e-3))
        frozen_before = tiny_model.extractor.digest()
        trainable_before = {n: p.detach().clone() for n, p in trainable_parameters(tiny_model)}
        for step in range(20):
            loss = train_step(tiny_model, _batch(manifest), optimizer)
            assert math.isfinite(float(loss.total))
        assert tiny_model.extractor.digest() == frozen_before
        assert any(
            not torch.equal(p, trainable_before[n]) for n, p in trainable_parameters(tiny_model)
        )

    def test_batch_of_one_at_smallest_input(self, tiny_model):
        gen = torch.Generator().manual_seed(0)
        batch = Batch(torch.rand(1, 3, 16, 16, generator=gen), torch.zeros(1, 1, 16, 16))
        loss = train_step(tiny_model, batch, make_optimizer(tiny_model, TrainConfig()))
        assert math.isfinite(float(loss.total))

    def test_zero_learning_rate_changes_nothing(self, tiny_model, crack_dataset):
        manifest = scan_dataset(crack_dataset, (32, 32))
        optimizer = make_optimizer(tiny_model, TrainConfig())
        for group in optimizer.param_groups:
            group["lr"] = 0.0
        before = {n: p.detach().clone() for n, p in tiny_model.named_parameters()}
        train_step(tiny_model, _batch(manifest), optimizer)
        assert all(torch.equal(p, before[n]) for n, p in tiny_model.named_parameters())

    def test_returns_loss_components(self, tiny_model, crack_dataset):
        manifest = scan_dataset(crack_dataset, (32, 32))
        loss = train_step(tiny_model, _batch(manifest), make_optimizer(tiny_model, TrainConfig()))
        d = loss.to_dict()
        assert d["total"] == pytest.approx(d["bce"] + d["dice_loss"], rel=1e-6)
        assert not loss.total.requires_grad

    def test_non_finite_loss_names_component(self, tiny_model, crack_dataset):
        batch = _batch(scan_dataset(crack_dataset, (32, 32)))
        batch.images[0, 0, 0, 0] = float("nan")
        with pytest.raises(NonFiniteLoss, match="bce"):
            train_step(tiny_model, batch, make_optimizer(tiny_model, TrainConfig()))

    def test_non_finite_gradient_names_parameter(self, tiny_model, crack_dataset):
        batch = _batch(scan_dataset(crack_dataset, (32, 32)))
        name, param = trainable_parameters(tiny_model)[-1]
        param.register_hook(lambda grad: grad * float("nan"))
        with pytest.raises(NonFiniteLoss, match=name):
            train_step(tiny_model, batch, make_optimizer(tiny_model, TrainConfig()))


class TestFit:
    def test_outputs(self, tiny_config, crack_dataset, tmp_path):
        manifest = scan_dataset(crack_dataset, (32, 32))
        state = fit(build_model(tiny_config), manifest, manifest, _fixture_config(), tmp_path / "run")
        assert state.epoch == 2
        assert state.step == 2
        assert len(state.history) == 2
        assert (tmp_path / "run" / "last.ckpt").exists()
        assert (tmp_path / "run" / "best.ckpt").exists()

        lines = (tmp_path / "run" / "train.log").read_text().splitlines()
        assert len(lines) == 2
        fields = lines[1].split("\t")
        assert len(fields) == len(LOG_COLUMNS)
        assert fields[0] == "2"
        assert float(fields[1]) == pytest.approx(lr_schedule(_fixture_config(), 1), rel=1e-6)

    def test_seeded_runs_repeat(self, tiny_config, crack_dataset, tmp_path):
        manifest = scan_dataset(crack_dataset, (32, 32))
        a = fit(build_model(tiny_config), manifest, manifest, _fixture_config(), tmp_path / "a")
        b = fit(build_model(tiny_config), manifest, manifest, _fixture_config(), tmp_path / "b")
        for row_a, row_b in zip(a.history, b.history):
            for key in LOG_COLUMNS:
                assert row_a[key] == pytest.approx(row_b[key], abs=1e-6)

    def test_checkpoint_every(self, tiny_config, crack_dataset, tmp_path):
        manifest = scan_dataset(crack_dataset, (32, 32))
        cfg = _fixture_config(epochs=3, checkpoint_every=2)
        fit(build_model(tiny_config), manifest, manifest, cfg, tmp_path, stop_after_epoch=1)
        # stopping early still leaves a checkpoint for the last finished epoch
        _, state, _ = load_checkpoint(tmp_path / "last.ckpt")
        assert state.epoch == 1


class TestCheckpoint:
    def test_forward_outputs_reproduced_bitwise(self, tiny_config, crack_dataset, tmp_path):
        manifest = scan_dataset(crack_dataset, (32, 32))
        model = build_model(tiny_config)
        state = fit(model, manifest, manifest, _fixture_config(epochs=1), tmp_path)
        path = save_checkpoint(tmp_path / "copy.ckpt", model, state, _fixture_config(epochs=1))
        loaded, loaded_state, loaded_cfg = load_checkpoint(path)

        images = _batch(manifest).images
        model.eval()
        loaded.eval()
        with torch.no_grad():
            assert torch.equal(model(images).logits, loaded(images).logits)
        assert loaded_state.history == state.history
        assert loaded_cfg == _fixture_config(epochs=1)
        assert loaded.extractor.digest() == model.extractor.digest()

    def test_bytes_are_deterministic(self, tiny_config, crack_dataset, tmp_path):
        manifest = scan_dataset(crack_dataset, (32, 32))
        for name in ("a", "b"):
            fit(build_model(tiny_config), manifest, manifest, _fixture_config(epochs=1), tmp_path / name)
        assert (tmp_path / "a" / "last.ckpt").read_bytes() == (tmp_path / "b" / "last.ckpt").read_bytes()

    def test_extractor_file_is_not_a_checkpoint(self, tmp_path):
        path = save_backend(make_stub_backend(0, (4, 8, 8, 8, 8)), tmp_path / "e.fcnt")
        with pytest.raises(CorruptWeights, match="checkpoint"):
            load_checkpoint(path)

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "none.ckpt")


class TestResume:
    def test_interrupted_run_matches_uninterrupted(self, tiny_config, four_image_dataset, tmp_path):
        manifest = scan_dataset(four_image_dataset, (32, 32))
        cfg = _fixture_config(epochs=3)

        full_model = build_model(tiny_config)
        full = fit(full_model, manifest, manifest, cfg, tmp_path / "full")

        fit(build_model(tiny_config), manifest, manifest, cfg, tmp_path / "cut", stop_after_epoch=1)
        resumed_model, resumed = resume(tmp_path / "cut" / "last.ckpt", manifest, manifest, tmp_path / "cut")

        assert resumed.epoch == 3
        assert resumed.history == full.history
        assert _model_digest(resumed_model) == _model_digest(full_model)
        assert len((tmp_path / "cut" / "train.log").read_text().splitlines()) == 3

        full_best, full_meta = read_container(tmp_path / "full" / "best.ckpt")
        cut_best, cut_meta = read_container(tmp_path / "cut" / "best.ckpt")
        assert tensor_digest(cut_best.items()) == tensor_digest(full_best.items())
        assert cut_meta["state"] == full_meta["state"]


@pytest.mark.slow
class TestOverfitOneImage:
    def test_single_image_is_learned(self, tmp_path):
        root = write_crack_dataset(tmp_path / "one", 1, size=(256, 256), seed=3, thickness=8)
        manifest = scan_dataset(root, (256, 256))
        model = build_model(ModelConfig(base_channels=32), seed=0)
        optimizer = make_optimizer(model, TrainConfig(lr0=3e-4))
        batch = _batch(manifest, size=1)

        losses, dice = [], 0.0
        for step in range(1, 201):
            losses.append(float(train_step(model, batch, optimizer).total))
            if step % 25 == 0:
                dice = micro_dice(evaluate_manifest(model, manifest))
                if step >= 50 and dice > 0.95:
                    break
        assert losses[49] < losses[0]
        assert dice > 0.95
