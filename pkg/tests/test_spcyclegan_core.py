import csv
import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from torch import nn

from networks import (
    DiscriminatorArch,
    GeneratorArch,
    count_parameters,
    define_discriminator,
    define_generator,
    parameter_digest,
)
from sectioning import SliceAxis, extract_sections
from spcyclegan_core import (
    HISTORY_FIELDS,
    CheckpointError,
    ImagePool,
    SpCycleGanModels,
    SpCycleGanTrainer,
    TrainConfig,
    TrainingDivergedError,
    build_models,
    cycle_loss,
    cycle_loss_from,
    gan_loss_discriminator,
    gan_loss_generator,
    learning_rate_at,
    load_checkpoint,
    make_identity_models,
    save_checkpoint,
    spatial_loss,
    total_loss,
    train,
)
from volume_io import Volume

TOY_GENERATOR = GeneratorArch(ngf=2, n_blocks=2, n_downsampling=1)
TOY_DISCRIMINATOR = DiscriminatorArch(ndf=2, n_layers=1)


class AddConstant(nn.Module):
    def __init__(self, value):
        super().__init__()
        self.value = value

    def forward(self, x):
        return x + self.value


def toy_models(seed=0, dtype=torch.float64):
    cfg = TrainConfig(generator=TOY_GENERATOR, discriminator=TOY_DISCRIMINATOR, seed=seed)
    models = build_models(cfg)
    for net in models.named_networks().values():
        net.to(dtype)
    return models, cfg


def with_generators(models, g_ab=None, g_ba=None, h=None):
    return replace(
        models,
        G_AB=g_ab if g_ab is not None else models.G_AB,
        G_BA=g_ba if g_ba is not None else models.G_BA,
        H=h if h is not None else models.H,
    )


def section_stack(rng, count=8, size=16, axis=SliceAxis.XY):
    return extract_sections(Volume(rng.random((size, size, count))), axis)


class TestNetworks:
    @pytest.mark.parametrize("size", [256, 200])
    def test_default_generator_keeps_size(self, size):
        models = build_models(TrainConfig())
        with torch.no_grad():
            out = models.G_AB(torch.zeros(1, 1, size, size))
        assert out.shape == (1, 1, size, size)

    def test_shape_preserving_for_multiples_of_four(self):
        generator = define_generator(GeneratorArch(ngf=2, n_blocks=1))
        generator.eval()
        with torch.no_grad():
            for h in range(8, 257, 4):
                w = 264 - h
                assert generator(torch.zeros(1, 1, h, w)).shape == (1, 1, h, w)

    def test_same_seed_same_parameters(self):
        first = build_models(TrainConfig(generator=TOY_GENERATOR, discriminator=TOY_DISCRIMINATOR, seed=5))
        second = build_models(TrainConfig(generator=TOY_GENERATOR, discriminator=TOY_DISCRIMINATOR, seed=5))
        for name, net in first.named_networks().items():
            assert parameter_digest(net) == parameter_digest(second.named_networks()[name])

    def test_parameter_count_depends_on_architecture_only(self):
        a = build_models(TrainConfig(seed=1))
        b = build_models(TrainConfig(seed=2))
        assert count_parameters(a.G_AB) == count_parameters(b.G_AB) == count_parameters(a.H)
        assert count_parameters(a.D_A) == count_parameters(b.D_B)

    def test_conv_init_scale(self):
        models = build_models(TrainConfig(seed=0))
        weights = torch.cat([
            m.weight.detach().flatten() for m in models.G_AB.modules() if isinstance(m, nn.Conv2d)
        ])
        assert abs(float(weights.std()) - 0.02) < 0.002

    def test_identity_models(self):
        models = make_identity_models(SliceAxis.XZ)
        x = torch.rand(2, 1, 5, 7)
        assert torch.equal(models.G_AB(x), x)
        assert models.axis is SliceAxis.XZ


class TestGanLoss:
    def test_generator_zero_at_real_target(self):
        assert float(gan_loss_generator(torch.ones(1, 1, 4, 4), "least_squares")) == 0.0

    def test_perfect_discriminator(self):
        loss = gan_loss_discriminator(torch.ones(1, 1, 4, 4), torch.zeros(1, 1, 4, 4), "least_squares")
        assert float(loss) == 0.0

    def test_log_form_at_half_probability(self):
        # Score maps are logits; logit 0 is probability 0.5.
        zeros = torch.zeros(1, 1, 3, 3, dtype=torch.float64)
        assert float(gan_loss_generator(zeros, "log_vanilla")) == pytest.approx(math.log(2))
        assert float(gan_loss_discriminator(zeros, zeros, "log_vanilla")) == pytest.approx(2 * math.log(2))

    def test_nan_raises(self):
        with pytest.raises(TrainingDivergedError):
            gan_loss_generator(torch.tensor([float("nan")]), "least_squares")
        with pytest.raises(TrainingDivergedError):
            gan_loss_discriminator(torch.zeros(2), torch.tensor([0.0, float("inf")]), "log_vanilla")

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            gan_loss_generator(torch.zeros(2), "wasserstein")


class TestCycleAndSpatial:
    def test_identity_cycle_is_zero(self):
        models = make_identity_models(SliceAxis.XY)
        a, b = torch.rand(2, 1, 8, 8), torch.rand(2, 1, 8, 8)
        assert float(cycle_loss(a, b, models)) == 0.0
        assert float(spatial_loss(a, models)) == 0.0

    def test_constant_offset_cycle(self):
        a, b = torch.rand(2, 1, 8, 8, dtype=torch.float64), torch.rand(2, 1, 8, 8, dtype=torch.float64)
        assert float(cycle_loss_from(a + 0.1, a, b, b)) == pytest.approx(0.1)

    def test_constant_offset_spatial(self):
        models = make_identity_models(SliceAxis.XY)
        models = with_generators(models, h=AddConstant(0.2))
        a = torch.rand(1, 1, 8, 8, dtype=torch.float64)
        assert float(spatial_loss(a, models)) == pytest.approx(0.04)

    def test_brute_force_oracle(self, rng):
        models, _ = toy_models(seed=3)
        a = torch.from_numpy(rng.uniform(-1, 1, (2, 1, 8, 8)))
        b = torch.from_numpy(rng.uniform(-1, 1, (2, 1, 8, 8)))
        with torch.no_grad():
            rec_a = models.G_BA(models.G_AB(a)).numpy()
            rec_b = models.G_AB(models.G_BA(b)).numpy()
            restored_back = models.H(models.G_AB(a)).numpy()
            cyc = float(cycle_loss(a, b, models))
            spatial = float(spatial_loss(a, models))
        expected_cyc = np.abs(rec_a - a.numpy()).sum() / a.numel() + np.abs(rec_b - b.numpy()).sum() / b.numel()
        expected_spatial = ((restored_back - a.numpy()) ** 2).sum() / a.numel()
        assert cyc == pytest.approx(expected_cyc, rel=1e-12)
        assert spatial == pytest.approx(expected_spatial, rel=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cycle_loss_from(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5), torch.zeros(1), torch.zeros(1))


class TestTotalLoss:
    def test_decomposition(self, rng):
        for case in range(200):
            models, cfg = toy_models(seed=case)
            cfg = replace(cfg, lambda1=float(rng.uniform(0, 20)), lambda2=float(rng.uniform(0, 20)))
            a = torch.from_numpy(rng.uniform(-1, 1, (1, 1, 8, 8)))
            b = torch.from_numpy(rng.uniform(-1, 1, (1, 1, 8, 8)))
            parts = total_loss(a, b, models, cfg).as_floats()
            expected = parts["gan_ab"] + parts["gan_ba"] + cfg.lambda1 * parts["cyc"] + cfg.lambda2 * parts["spatial"]
            assert parts["total"] == pytest.approx(expected, rel=1e-6, abs=1e-6)

    def test_zero_lambdas(self, rng):
        models, cfg = toy_models()
        cfg = replace(cfg, lambda1=0.0, lambda2=0.0)
        a, b = torch.rand(1, 1, 8, 8, dtype=torch.float64), torch.rand(1, 1, 8, 8, dtype=torch.float64)
        parts = total_loss(a, b, models, cfg)
        assert float(parts.total) == float(parts.gan_ab + parts.gan_ba)

    def test_identity_generators_only_gan_terms(self):
        models, cfg = toy_models()
        models = with_generators(models, g_ab=nn.Identity(), g_ba=nn.Identity(), h=nn.Identity())
        a, b = torch.rand(1, 1, 8, 8, dtype=torch.float64), torch.rand(1, 1, 8, 8, dtype=torch.float64)
        parts = total_loss(a, b, models, cfg)
        assert float(parts.cyc) == 0.0 and float(parts.spatial) == 0.0

    def test_spatial_weight_zero_gives_h_no_gradient(self):
        models, cfg = toy_models()
        cfg = replace(cfg, lambda2=0.0)
        a, b = torch.rand(1, 1, 8, 8, dtype=torch.float64), torch.rand(1, 1, 8, 8, dtype=torch.float64)
        total_loss(a, b, models, cfg).total.backward()
        for param in models.H.parameters():
            assert param.grad is None or not param.grad.any()
        assert any(p.grad is not None and p.grad.any() for p in models.G_AB.parameters())


class TestGradients:
    """Analytic gradients against central differences on 4x4 float64 inputs."""

    def inputs(self, seed):
        generator = torch.Generator().manual_seed(seed)
        a = (torch.rand(1, 1, 4, 4, dtype=torch.float64, generator=generator) * 2 - 1).requires_grad_()
        b = (torch.rand(1, 1, 4, 4, dtype=torch.float64, generator=generator) * 2 - 1).requires_grad_()
        return a, b

    def test_cycle_gradient(self):
        models, _ = toy_models(seed=11)
        a, b = self.inputs(0)
        assert torch.autograd.gradcheck(lambda x, y: cycle_loss(x, y, models), (a, b), rtol=1e-4, atol=1e-6)

    def test_spatial_gradient(self):
        models, _ = toy_models(seed=12)
        a, _ = self.inputs(1)
        assert torch.autograd.gradcheck(lambda x: spatial_loss(x, models), (a,), rtol=1e-4, atol=1e-6)

    @pytest.mark.parametrize("mode", ["least_squares", "log_vanilla"])
    def test_gan_gradients(self, mode):
        real, fake = self.inputs(2)
        assert torch.autograd.gradcheck(lambda f: gan_loss_generator(f, mode), (fake,), rtol=1e-4, atol=1e-6)
        assert torch.autograd.gradcheck(
            lambda r, f: gan_loss_discriminator(r, f, mode), (real, fake), rtol=1e-4, atol=1e-6
        )


class TestSchedule:
    @pytest.mark.parametrize("epoch, lr", [(1, 0.0002), (100, 0.0002), (150, 0.0001), (200, 0.0)])
    def test_documented_points(self, epoch, lr):
        assert learning_rate_at(TrainConfig(), epoch) == lr

    def test_no_decay(self):
        cfg = TrainConfig(epochs_const=3, epochs_decay=0)
        assert learning_rate_at(cfg, 3) == cfg.lr


class TestImagePool:
    def test_passthrough_when_disabled(self):
        images = torch.rand(3, 1, 2, 2)
        assert ImagePool(0).query(images) is images

    def test_fills_then_mixes(self):
        pool = ImagePool(2, seed=0)
        first = torch.zeros(2, 1, 2, 2)
        assert torch.equal(pool.query(first), first)
        outputs = torch.cat([pool.query(torch.full((1, 1, 2, 2), float(k))) for k in range(1, 40)])
        values = set(outputs[:, 0, 0, 0].tolist())
        assert 0.0 in values
        assert len(values) > 2


class TestTraining:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr=0).validate()
        with pytest.raises(ValueError):
            TrainConfig(gan_mode="hinge").validate()
        with pytest.raises(ValueError):
            TrainConfig(patch_sizes={"xy": (30, 30)}).validate()
        with pytest.raises(ValueError, match="device"):
            TrainConfig(device="bogus").validate()

    @pytest.mark.parametrize(
        "n_layers, size, expected", [(3, 256, 30), (3, 200, 23), (2, 16, 2), (2, 8, 0), (1, 8, 2), (3, 16, 0)]
    )
    def test_discriminator_score_map(self, n_layers, size, expected):
        assert DiscriminatorArch(n_layers=n_layers).score_map_size(size) == expected

    def test_score_map_matches_network(self):
        arch = DiscriminatorArch(ndf=2, n_layers=2)
        net = define_discriminator(arch)
        with torch.no_grad():
            out = net(torch.zeros(1, 1, 16, 24))
        assert out.shape[-2:] == (arch.score_map_size(16), arch.score_map_size(24))

    def test_patch_too_small_for_discriminator(self, tiny_train_config):
        cfg = replace(tiny_train_config, patch_sizes={"xy": (16, 16), "xz": (16, 8), "yz": (16, 16)})
        with pytest.raises(ValueError, match="too small"):
            cfg.validate()
        replace(cfg, discriminator=DiscriminatorArch(ndf=4, n_layers=1)).validate()

    def test_smoke_run(self, tmp_path, rng, tiny_train_config):
        stack_a, stack_b = section_stack(rng), section_stack(rng)
        history_path = tmp_path / "history.csv"
        models, history = train(
            stack_a, stack_b, tiny_train_config, checkpoint_dir=tmp_path / "ckpt", history_path=history_path
        )
        assert len(history) == 2 * 8
        assert [e.epoch for e in history[::8]] == [1, 2]
        assert all(math.isfinite(e.total) for e in history)
        with open(history_path, newline="") as f:
            rows = list(csv.DictReader(f))
        assert list(rows[0]) == HISTORY_FIELDS
        assert len(rows) == 16

        loaded = load_checkpoint(tmp_path / "ckpt" / "xy_latest.pt")
        assert loaded.axis is SliceAxis.XY and loaded.epoch == 2
        models.G_AB.eval()
        x = torch.rand(3, 1, 16, 16) * 2 - 1
        with torch.no_grad():
            assert torch.equal(models.G_AB(x), loaded.G_AB(x))
        assert (tmp_path / "ckpt" / "xy_epoch0001.pt").exists()

    def test_learning_rate_follows_schedule(self, rng, tiny_train_config):
        cfg = replace(tiny_train_config, epochs_const=1, epochs_decay=2)
        _, history = train(section_stack(rng, count=2), section_stack(rng, count=2), cfg)
        lrs = [history[k].lr for k in range(0, len(history), 2)]
        assert lrs == pytest.approx([learning_rate_at(cfg, e) for e in (1, 2, 3)])

    def test_resume_continues_schedule(self, tmp_path, rng, tiny_train_config):
        cfg = replace(tiny_train_config, epochs_const=1, epochs_decay=2)
        stack_a, stack_b = section_stack(rng, count=2), section_stack(rng, count=2)
        train(stack_a, stack_b, cfg, checkpoint_dir=tmp_path)
        _, history = train(stack_a, stack_b, cfg, resume_from=tmp_path / "xy_epoch0001.pt")
        assert sorted({e.epoch for e in history}) == [2, 3]
        assert history[0].lr == pytest.approx(learning_rate_at(cfg, 2))

    def test_steps_leave_the_other_side_untouched(self, rng, tiny_train_config):
        models = build_models(tiny_train_config, SliceAxis.XY)
        trainer = SpCycleGanTrainer(models, tiny_train_config)
        real_a, real_b = torch.rand(1, 1, 16, 16) * 2 - 1, torch.rand(1, 1, 16, 16) * 2 - 1

        d_before = [parameter_digest(d) for d in models.discriminators()]
        g_before = [parameter_digest(g) for g in models.generators()]
        _, fake_a, fake_b = trainer.generator_step(real_a, real_b)
        assert [parameter_digest(d) for d in models.discriminators()] == d_before
        assert [parameter_digest(g) for g in models.generators()] != g_before

        g_after = [parameter_digest(g) for g in models.generators()]
        trainer.discriminator_step(real_a, real_b, fake_a, fake_b)
        assert [parameter_digest(g) for g in models.generators()] == g_after
        assert [parameter_digest(d) for d in models.discriminators()] != d_before

    def test_zero_spatial_weight_freezes_h(self, rng, tiny_train_config):
        cfg = replace(tiny_train_config, lambda2=0.0)
        models = build_models(cfg, SliceAxis.XY)
        before = parameter_digest(models.H)
        trainer = SpCycleGanTrainer(models, cfg)
        trainer.train(section_stack(rng, count=2), section_stack(rng, count=2))
        assert parameter_digest(models.H) == before

    def test_alternating_h_update(self, rng, tiny_train_config):
        cfg = replace(tiny_train_config, h_update="alternating", epochs_decay=0)
        models = build_models(cfg, SliceAxis.XY)
        before = parameter_digest(models.H)
        trainer = SpCycleGanTrainer(models, cfg)
        assert set(trainer.optimizers()) == {"G", "H", "D"}
        trainer.train(section_stack(rng, count=2), section_stack(rng, count=2))
        assert parameter_digest(models.H) != before

    def test_nan_input_diverges(self, tiny_train_config):
        trainer = SpCycleGanTrainer(build_models(tiny_train_config), tiny_train_config)
        bad = torch.full((1, 1, 16, 16), float("nan"))
        with pytest.raises(TrainingDivergedError):
            trainer.generator_step(bad, bad)

    def test_mismatched_axes(self, rng, tiny_train_config):
        with pytest.raises(ValueError):
            train(section_stack(rng), section_stack(rng, axis=SliceAxis.XZ), tiny_train_config)


class TestCheckpoint:
    def test_round_trip_inference_bitwise(self, tmp_path, tiny_train_config):
        models = build_models(tiny_train_config, SliceAxis.YZ)
        path = tmp_path / "m.pt"
        save_checkpoint(models, path, cfg=tiny_train_config)
        loaded = load_checkpoint(path)
        generator = torch.Generator().manual_seed(0)
        for _ in range(20):
            x = torch.rand(1, 1, 16, 16, generator=generator) * 2 - 1
            with torch.no_grad():
                assert torch.equal(models.G_AB(x), loaded.G_AB(x))

    def test_fresh_checkpoint_equals_rebuild(self, tmp_path, tiny_train_config):
        path = tmp_path / "m.pt"
        save_checkpoint(build_models(tiny_train_config), path)
        loaded = load_checkpoint(path)
        rebuilt = build_models(tiny_train_config)
        for name, net in rebuilt.named_networks().items():
            assert parameter_digest(net) == parameter_digest(loaded.named_networks()[name])

    def test_architecture_mismatch(self, tmp_path, tiny_train_config):
        path = tmp_path / "m.pt"
        save_checkpoint(build_models(tiny_train_config), path)
        with pytest.raises(CheckpointError):
            load_checkpoint(path, expected_arch=GeneratorArch())

    def test_tampered_parameters(self, tmp_path, tiny_train_config):
        path = tmp_path / "m.pt"
        save_checkpoint(build_models(tiny_train_config), path)
        payload = torch.load(path, weights_only=True)
        payload["generator_arch"]["ngf"] = 8
        torch.save(payload, path)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_version_mismatch(self, tmp_path, tiny_train_config):
        path = tmp_path / "m.pt"
        save_checkpoint(build_models(tiny_train_config), path)
        payload = torch.load(path, weights_only=True)
        payload["format_version"] = 99
        torch.save(payload, path)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_corrupt_file(self, tmp_path):
        path = tmp_path / "m.pt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "none.pt")

    def test_bundle_type(self, tmp_path, tiny_train_config):
        path = tmp_path / "m.pt"
        save_checkpoint(make_identity_models(SliceAxis.XY, tiny_train_config), path)
        assert isinstance(load_checkpoint(path), SpCycleGanModels)
