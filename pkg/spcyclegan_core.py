"""Spatially constrained CycleGAN: models, the four-term objective, training and checkpoints.

Domain A holds blurred/noisy sections, domain B well-defined ones. G_AB restores,
G_BA degrades, and H maps restored images back to the degraded look so that
H(G_AB(a)) stays aligned with a.
"""

import csv
import hashlib
import json
import logging
import math
import os
import random
import subprocess
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch.optim import lr_scheduler

from networks import (
    DiscriminatorArch,
    GeneratorArch,
    define_discriminator,
    define_generator,
    set_requires_grad,
)
from sectioning import PatchSpec, SliceAxis, check_patch_fits, sample_patches

logger = logging.getLogger(__name__)

GAN_MODES = ("least_squares", "log_vanilla")
H_UPDATES = ("joint", "alternating")
CHECKPOINT_VERSION = 1
DEFAULT_PATCH_SIZES = {"xy": (256, 256), "xz": (200, 200), "yz": (200, 200)}


class TrainingDivergedError(RuntimeError):
    """A loss became NaN or infinite."""


class CheckpointError(RuntimeError):
    """A checkpoint could not be read or does not match the expected architecture."""


@dataclass
class TrainConfig:
    lambda1: float = 10.0
    lambda2: float = 10.0
    lr: float = 0.0002
    epochs_const: int = 100
    epochs_decay: int = 100
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 1
    patch_sizes: dict = field(default_factory=lambda: dict(DEFAULT_PATCH_SIZES))
    patches_per_section: int = 1
    gan_mode: str = "least_squares"
    pool_size: int = 50
    h_update: str = "joint"
    checkpoint_every: int = 10
    seed: int = 0
    device: str = "cpu"
    generator: GeneratorArch = field(default_factory=GeneratorArch)
    discriminator: DiscriminatorArch = field(default_factory=DiscriminatorArch)

    def validate(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs_const < 0 or self.epochs_decay < 0 or self.total_epochs < 1:
            raise ValueError("at least one training epoch is required")
        if self.batch_size < 1 or self.patches_per_section < 1:
            raise ValueError("batch_size and patches_per_section must be >= 1")
        if self.gan_mode not in GAN_MODES:
            raise ValueError(f"gan_mode must be one of {GAN_MODES}, got '{self.gan_mode}'")
        if self.h_update not in H_UPDATES:
            raise ValueError(f"h_update must be one of {H_UPDATES}, got '{self.h_update}'")
        if self.pool_size < 0:
            raise ValueError("pool_size must be >= 0")
        multiple = self.generator.size_multiple
        for axis, (h, w) in self.patch_sizes.items():
            if h % multiple or w % multiple:
                raise ValueError(f"{axis} patch size {h}x{w} must be divisible by {multiple}")
            if self.generator.kind != "identity":
                map_h, map_w = self.discriminator.score_map_size(h), self.discriminator.score_map_size(w)
                if map_h < 1 or map_w < 1:
                    raise ValueError(
                        f"{axis} patch size {h}x{w} is too small for a {self.discriminator.n_layers}-layer "
                        f"discriminator (score map {map_h}x{map_w})"
                    )
        try:
            torch.device(self.device)
        except (RuntimeError, TypeError) as e:
            raise ValueError(f"invalid device '{self.device}': {e}")

    @property
    def total_epochs(self):
        return self.epochs_const + self.epochs_decay

    def patch_size_for(self, axis):
        return tuple(self.patch_sizes[axis.value])

    def to_dict(self):
        data = asdict(self)
        data["patch_sizes"] = {k: list(v) for k, v in self.patch_sizes.items()}
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["generator"] = GeneratorArch(**data.get("generator", {}))
        data["discriminator"] = DiscriminatorArch(**data.get("discriminator", {}))
        data["patch_sizes"] = {k: tuple(v) for k, v in data.get("patch_sizes", DEFAULT_PATCH_SIZES).items()}
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})

    def digest(self):
        return hashlib.md5(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def learning_rate_at(cfg, epoch):
    """Learning rate for a 1-based epoch: constant, then linear decay reaching 0 at the last epoch."""
    if cfg.epochs_decay == 0:
        return cfg.lr
    return cfg.lr * (1.0 - max(0, epoch - cfg.epochs_const) / float(cfg.epochs_decay))


@dataclass(eq=False)
class SpCycleGanModels:
    G_AB: torch.nn.Module
    G_BA: torch.nn.Module
    H: torch.nn.Module
    D_A: torch.nn.Module
    D_B: torch.nn.Module
    generator_arch: GeneratorArch
    discriminator_arch: DiscriminatorArch
    axis: SliceAxis = None
    epoch: int = 0

    def generators(self):
        return [self.G_AB, self.G_BA, self.H]

    def discriminators(self):
        return [self.D_A, self.D_B]

    def named_networks(self):
        return {"G_AB": self.G_AB, "G_BA": self.G_BA, "H": self.H, "D_A": self.D_A, "D_B": self.D_B}

    def to(self, device):
        for net in self.named_networks().values():
            net.to(device)
        return self


def build_models(cfg, axis=None):
    """Five freshly initialized networks; identical for identical seeds."""
    torch.manual_seed(cfg.seed)
    models = SpCycleGanModels(
        G_AB=define_generator(cfg.generator),
        G_BA=define_generator(cfg.generator),
        H=define_generator(cfg.generator),
        D_A=define_discriminator(cfg.discriminator),
        D_B=define_discriminator(cfg.discriminator),
        generator_arch=cfg.generator,
        discriminator_arch=cfg.discriminator,
        axis=axis,
    )
    return models.to(cfg.device)


def make_identity_models(axis, cfg=None):
    """Bundle whose generators are identity maps, used as a no-restoration baseline."""
    cfg = cfg or TrainConfig()
    identity_cfg = TrainConfig.from_dict({**cfg.to_dict(), "generator": asdict(GeneratorArch(kind="identity"))})
    return build_models(identity_cfg, axis)


def _check_finite(*tensors):
    for tensor in tensors:
        if not torch.isfinite(tensor).all():
            raise TrainingDivergedError("Non-finite values in loss inputs")


def _check_same_shape(x, y):
    if x.shape != y.shape:
        raise ValueError(f"Shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


def _gan_criterion(prediction, target_is_real, mode):
    target = torch.full_like(prediction, 1.0 if target_is_real else 0.0)
    if mode == "least_squares":
        return F.mse_loss(prediction, target)
    if mode == "log_vanilla":
        return F.binary_cross_entropy_with_logits(prediction, target)
    raise ValueError(f"gan mode '{mode}' not implemented")


def gan_loss_generator(d_out_fake, mode):
    """Generator side of the GAN term: the discriminator should call fakes real."""
    _check_finite(d_out_fake)
    return _gan_criterion(d_out_fake, True, mode)


def gan_loss_discriminator(d_out_real, d_out_fake, mode):
    """Discriminator side: real maps toward 1, fake maps toward 0, terms summed."""
    _check_finite(d_out_real, d_out_fake)
    return _gan_criterion(d_out_real, True, mode) + _gan_criterion(d_out_fake, False, mode)


def cycle_loss_from(rec_a, a, rec_b, b):
    _check_same_shape(rec_a, a)
    _check_same_shape(rec_b, b)
    return F.l1_loss(rec_a, a) + F.l1_loss(rec_b, b)


def spatial_loss_from(h_of_fake_b, a):
    _check_same_shape(h_of_fake_b, a)
    return F.mse_loss(h_of_fake_b, a)


def cycle_loss(a, b, models):
    """L1(G_BA(G_AB(a)), a) + L1(G_AB(G_BA(b)), b), each a per-pixel mean."""
    return cycle_loss_from(models.G_BA(models.G_AB(a)), a, models.G_AB(models.G_BA(b)), b)


def spatial_loss(a, models):
    """Mean squared error between H(G_AB(a)) and a."""
    return spatial_loss_from(models.H(models.G_AB(a)), a)


@dataclass
class LossBreakdown:
    gan_ab: torch.Tensor
    gan_ba: torch.Tensor
    cyc: torch.Tensor
    spatial: torch.Tensor
    total: torch.Tensor

    def as_floats(self):
        return {name: float(getattr(self, name).detach()) for name in ("gan_ab", "gan_ba", "cyc", "spatial", "total")}


def _generator_forward(a, b, models, cfg):
    fake_b = models.G_AB(a)
    fake_a = models.G_BA(b)
    gan_ab = gan_loss_generator(models.D_B(fake_b), cfg.gan_mode)
    gan_ba = gan_loss_generator(models.D_A(fake_a), cfg.gan_mode)
    cyc = cycle_loss_from(models.G_BA(fake_b), a, models.G_AB(fake_a), b)
    spatial = spatial_loss_from(models.H(fake_b), a)
    total = gan_ab + gan_ba + cfg.lambda1 * cyc + cfg.lambda2 * spatial
    if not torch.isfinite(total):
        raise TrainingDivergedError(f"Generator objective is not finite: {float(total)}")
    return LossBreakdown(gan_ab, gan_ba, cyc, spatial, total), fake_a, fake_b


def total_loss(a, b, models, cfg):
    """Full objective: gan_ab + gan_ba + lambda1 * cyc + lambda2 * spatial."""
    breakdown, _, _ = _generator_forward(a, b, models, cfg)
    return breakdown


class ImagePool:
    """History of generated images; half of the queries return an older fake."""

    def __init__(self, pool_size, seed=0):
        self.pool_size = pool_size
        self.images = []
        self.rng = random.Random(seed)

    def query(self, images):
        if self.pool_size == 0:
            return images
        out = []
        for image in images.detach():
            image = image.unsqueeze(0)
            if len(self.images) < self.pool_size:
                self.images.append(image)
                out.append(image)
            elif self.rng.uniform(0, 1) > 0.5:
                index = self.rng.randint(0, self.pool_size - 1)
                out.append(self.images[index].clone())
                self.images[index] = image
            else:
                out.append(image)
        return torch.cat(out, 0)


@dataclass
class HistoryEntry:
    epoch: int
    step: int
    gan_ab: float
    gan_ba: float
    cyc: float
    spatial: float
    total: float
    lr: float


HISTORY_FIELDS = [f.name for f in fields(HistoryEntry)]


def append_history(path, entries):
    """Append loss records to a CSV file, writing the header for a new file."""
    path = Path(path)
    new_file = not path.exists()
    os.makedirs(path.parent, exist_ok=True)
    with open(path, "a", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=HISTORY_FIELDS)
        if new_file:
            writer.writeheader()
        for entry in entries:
            writer.writerow(asdict(entry))


def to_network_range(patches):
    """[0, 1] numpy patches -> (N, 1, h, w) tensor in [-1, 1]."""
    batch = torch.from_numpy(np.ascontiguousarray(np.stack(patches), dtype=np.float32))
    return batch.unsqueeze(1) * 2.0 - 1.0


def from_network_range(batch):
    """(N, 1, h, w) tensor in [-1, 1] -> (N, h, w) numpy array clipped to [0, 1]."""
    out = (batch.detach().cpu().squeeze(1).numpy() + 1.0) / 2.0
    return np.clip(out, 0.0, 1.0)


class SpCycleGanTrainer:
    """Alternating generator/discriminator optimization over two section stacks."""

    def __init__(self, models, cfg, checkpoint_dir=None, history_path=None, start_epoch=0, optimizer_state=None):
        cfg.validate()
        self.models = models
        self.cfg = cfg
        self.device = torch.device(cfg.device)
        self.checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir else None
        self.history_path = Path(history_path) if history_path else None
        self.start_epoch = start_epoch
        self.last_checkpoint = None

        betas = (cfg.beta1, cfg.beta2)
        g_params = list(models.G_AB.parameters()) + list(models.G_BA.parameters())
        if cfg.h_update == "joint":
            g_params += list(models.H.parameters())
        self.optimizer_g = torch.optim.Adam(g_params, lr=cfg.lr, betas=betas)
        self.optimizer_h = None
        if cfg.h_update == "alternating":
            self.optimizer_h = torch.optim.Adam(models.H.parameters(), lr=cfg.lr, betas=betas)
        self.optimizer_d = torch.optim.Adam(
            list(models.D_A.parameters()) + list(models.D_B.parameters()), lr=cfg.lr, betas=betas
        )
        if optimizer_state:
            for name, optimizer in self.optimizers().items():
                if name in optimizer_state:
                    optimizer.load_state_dict(optimizer_state[name])

        def lambda_rule(index):
            return learning_rate_at(cfg, start_epoch + index + 1) / cfg.lr

        for optimizer in self.optimizers().values():
            for group in optimizer.param_groups:
                group["lr"] = cfg.lr
                group["initial_lr"] = cfg.lr
        self.schedulers = [lr_scheduler.LambdaLR(opt, lr_lambda=lambda_rule) for opt in self.optimizers().values()]

        seeds = np.random.SeedSequence(cfg.seed).generate_state(3)
        self.pool_a = ImagePool(cfg.pool_size, seed=int(seeds[2]))
        self.pool_b = ImagePool(cfg.pool_size, seed=int(seeds[2]) + 1)
        self._sampler_seeds = (int(seeds[0]), int(seeds[1]))

    def optimizers(self):
        optimizers = {"G": self.optimizer_g, "D": self.optimizer_d}
        if self.optimizer_h is not None:
            optimizers["H"] = self.optimizer_h
        return optimizers

    @property
    def current_lr(self):
        return self.optimizer_g.param_groups[0]["lr"]

    def generator_step(self, real_a, real_b):
        """One update of the generators on the full objective; discriminators frozen."""
        models = self.models
        set_requires_grad(models.discriminators(), False)
        self.optimizer_g.zero_grad()
        breakdown, fake_a, fake_b = _generator_forward(real_a, real_b, models, self.cfg)
        breakdown.total.backward()
        self.optimizer_g.step()
        if self.optimizer_h is not None:
            self.optimizer_h.zero_grad()
            h_loss = self.cfg.lambda2 * spatial_loss_from(models.H(fake_b.detach()), real_a)
            h_loss.backward()
            self.optimizer_h.step()
        set_requires_grad(models.discriminators(), True)
        return breakdown, fake_a.detach(), fake_b.detach()

    def discriminator_step(self, real_a, real_b, fake_a, fake_b):
        """One update of D_A and D_B on pooled fakes; generators untouched."""
        models = self.models
        mode = self.cfg.gan_mode
        self.optimizer_d.zero_grad()
        loss_d_b = gan_loss_discriminator(models.D_B(real_b), models.D_B(self.pool_b.query(fake_b)), mode)
        loss_d_a = gan_loss_discriminator(models.D_A(real_a), models.D_A(self.pool_a.query(fake_a)), mode)
        loss_d = loss_d_a + loss_d_b
        if not torch.isfinite(loss_d):
            raise TrainingDivergedError(f"Discriminator loss is not finite: {float(loss_d)}")
        loss_d.backward()
        self.optimizer_d.step()
        return loss_d.detach()

    def steps_per_epoch(self, stack_a, stack_b):
        patches = max(stack_a.count, stack_b.count) * self.cfg.patches_per_section
        return max(1, math.ceil(patches / self.cfg.batch_size))

    def _batches(self, stream):
        while True:
            yield to_network_range([next(stream) for _ in range(self.cfg.batch_size)]).to(self.device)

    def train(self, stack_a, stack_b):
        """Run the remaining epochs and return the list of HistoryEntry records."""
        if stack_a.count == 0 or stack_b.count == 0:
            raise ValueError("Both section stacks must be non-empty")
        if stack_a.axis != stack_b.axis:
            raise ValueError(f"Stacks slice different axes: {stack_a.axis.value} vs {stack_b.axis.value}")
        axis = stack_a.axis
        patch_size = self.cfg.patch_size_for(axis)
        spec_a = PatchSpec(patch_size, self.cfg.patches_per_section, self._sampler_seeds[0])
        spec_b = PatchSpec(patch_size, self.cfg.patches_per_section, self._sampler_seeds[1])
        check_patch_fits(stack_a, spec_a)
        check_patch_fits(stack_b, spec_b)
        batches_a = self._batches(sample_patches(stack_a, spec_a))
        batches_b = self._batches(sample_patches(stack_b, spec_b))

        n_steps = self.steps_per_epoch(stack_a, stack_b)
        history = []
        logger.info(
            f"Training {axis.value} SpCycleGAN: epochs {self.start_epoch + 1}..{self.cfg.total_epochs}, "
            f"{n_steps} steps/epoch, patch {patch_size}"
        )
        for model in self.models.named_networks().values():
            model.train()

        for epoch in range(self.start_epoch + 1, self.cfg.total_epochs + 1):
            lr = self.current_lr
            epoch_entries = []
            for step in range(1, n_steps + 1):
                real_a, real_b = next(batches_a), next(batches_b)
                try:
                    breakdown, fake_a, fake_b = self.generator_step(real_a, real_b)
                    self.discriminator_step(real_a, real_b, fake_a, fake_b)
                except TrainingDivergedError as e:
                    logger.error(
                        f"Training diverged at epoch {epoch} step {step}: {e}; "
                        f"last good checkpoint: {self.last_checkpoint or 'none'}"
                    )
                    raise
                epoch_entries.append(HistoryEntry(epoch=epoch, step=step, lr=lr, **breakdown.as_floats()))
            history.extend(epoch_entries)
            if self.history_path:
                append_history(self.history_path, epoch_entries)
            mean_total = sum(e.total for e in epoch_entries) / len(epoch_entries)
            logger.info(f"axis={axis.value} epoch={epoch} lr={lr:.6g} mean_total={mean_total:.4f}")

            for scheduler in self.schedulers:
                scheduler.step()
            self.models.epoch = epoch
            if self.checkpoint_dir and (epoch % self.cfg.checkpoint_every == 0 or epoch == self.cfg.total_epochs):
                self.last_checkpoint = self.checkpoint_dir / f"{axis.value}_epoch{epoch:04d}.pt"
                save_checkpoint(self.models, self.last_checkpoint, cfg=self.cfg, optimizers=self.optimizers())
                save_checkpoint(
                    self.models, self.checkpoint_dir / f"{axis.value}_latest.pt", cfg=self.cfg, optimizers=self.optimizers()
                )
        return history


def train(stack_a, stack_b, cfg, checkpoint_dir=None, history_path=None, resume_from=None):
    """Train one axis' SpCycleGAN and return (models, history)."""
    cfg.validate()
    start_epoch, optimizer_state = 0, None
    if resume_from:
        payload = read_checkpoint(resume_from)
        models = models_from_payload(payload)
        start_epoch = payload["epoch"]
        optimizer_state = payload.get("optimizers") or None
        logger.info(f"Resuming from {resume_from} at epoch {start_epoch}")
    else:
        models = build_models(cfg, stack_a.axis)
    models.axis = stack_a.axis
    models.to(cfg.device)
    trainer = SpCycleGanTrainer(
        models, cfg, checkpoint_dir=checkpoint_dir, history_path=history_path,
        start_epoch=start_epoch, optimizer_state=optimizer_state,
    )
    history = trainer.train(stack_a, stack_b)
    return models, history


def code_fingerprint():
    """Git revision of the working tree, or 'unknown' outside a repository."""
    try:
        result = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=10,
            cwd=os.path.dirname(os.path.abspath(__file__)),
        )
        if result.returncode == 0:
            return result.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return "unknown"


def save_checkpoint(models, path, cfg=None, optimizers=None):
    """Write a self-describing checkpoint: architecture, axis, epoch, parameters, optimizer state."""
    path = Path(path)
    os.makedirs(path.parent, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "generator_arch": models.generator_arch.to_dict(),
        "discriminator_arch": models.discriminator_arch.to_dict(),
        "axis": models.axis.value if models.axis else None,
        "epoch": models.epoch,
        "train_config": cfg.to_dict() if cfg else None,
        "config_digest": cfg.digest() if cfg else None,
        "code_fingerprint": code_fingerprint(),
        "models": {name: net.state_dict() for name, net in models.named_networks().items()},
        "optimizers": {name: opt.state_dict() for name, opt in (optimizers or {}).items()},
    }
    torch.save(payload, path)
    logger.info(f"Saved checkpoint {path} (axis={payload['axis']}, epoch={models.epoch})")


def read_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise CheckpointError(f"Corrupt checkpoint {path}: {e}")
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a checkpoint file")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"Checkpoint version {payload['format_version']} is not supported (expected {CHECKPOINT_VERSION})"
        )
    return payload


def models_from_payload(payload, expected_arch=None):
    generator_arch = GeneratorArch(**payload["generator_arch"])
    discriminator_arch = DiscriminatorArch(**payload["discriminator_arch"])
    if expected_arch is not None and expected_arch != generator_arch:
        raise CheckpointError(f"Checkpoint generator architecture {generator_arch} does not match {expected_arch}")
    models = SpCycleGanModels(
        G_AB=define_generator(generator_arch),
        G_BA=define_generator(generator_arch),
        H=define_generator(generator_arch),
        D_A=define_discriminator(discriminator_arch),
        D_B=define_discriminator(discriminator_arch),
        generator_arch=generator_arch,
        discriminator_arch=discriminator_arch,
        axis=SliceAxis(payload["axis"]) if payload.get("axis") else None,
        epoch=int(payload.get("epoch", 0)),
    )
    try:
        for name, net in models.named_networks().items():
            net.load_state_dict(payload["models"][name], strict=True)
    except (KeyError, RuntimeError) as e:
        raise CheckpointError(f"Checkpoint parameters do not fit the declared architecture: {e}")
    return models


def load_checkpoint(path, expected_arch=None):
    """Rebuild the five networks from a checkpoint file."""
    models = models_from_payload(read_checkpoint(path), expected_arch)
    for net in models.named_networks().values():
        net.eval()
    logger.info(f"Loaded checkpoint {path} (axis={models.axis.value if models.axis else None}, epoch={models.epoch})")
    return models
