"""Conditional-adversarial training: patch discriminator, losses, and the loop.

The discriminator judges (source image, mask) concatenations and emits a grid
of per-patch scores in (0, 1), 1 meaning plausible/real. The generator loss
adds the fuzzy dice term, weighted by lambda, to the adversarial term; the
discriminator minimizes binary cross entropy with real -> 1 and fake -> 0.
Each training step runs one discriminator update followed by one generator
update on the same batch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .cascade import GeneratorCascade
from .core import SliceSample, TrainingModality
from .dataio import AugmentParams, augment_once
from .networks import _init_module


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


class PatchDiscriminator(nn.Module):
    """Five 4x4 conv layers scoring (image, mask) patches.

    Strides (2, 2, 2, 1, 1), channels (64, 128, 256, 512, 1), leaky-ReLU 0.2,
    batch normalization on the middle three layers, sigmoid on the last.
    Inputs need H and W of at least 32.
    """

    def __init__(self, in_channels: int, seed: int = 0):
        super().__init__()
        if in_channels < 2:
            raise ValueError("discriminator judges image+mask stacks: in_channels >= 2")
        self.in_channels = in_channels
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, 64, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(64, 128, 4, stride=2, padding=1),
            nn.BatchNorm2d(128),
            nn.LeakyReLU(0.2),
            nn.Conv2d(128, 256, 4, stride=2, padding=1),
            nn.BatchNorm2d(256),
            nn.LeakyReLU(0.2),
            nn.Conv2d(256, 512, 4, stride=1, padding=1),
            nn.BatchNorm2d(512),
            nn.LeakyReLU(0.2),
            nn.Conv2d(512, 1, 4, stride=1, padding=1),
            nn.Sigmoid(),
        )
        g = torch.Generator()
        g.manual_seed(seed)
        _init_module(self, g)

    def forward(self, images: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        return self.net(torch.cat([images, masks], dim=1))


def build_discriminator(in_channels: int, seed: int = 0) -> PatchDiscriminator:
    return PatchDiscriminator(in_channels, seed=seed)


def dice_loss(pred: torch.Tensor, target: torch.Tensor, epsilon_dice: float = 1.0) -> torch.Tensor:
    """Fuzzy dice loss, averaged over the batch; value in [0, 1).

    Per sample: 1 - (2*sum(pred*target) + eps) / (sum(pred) + sum(target) + eps).
    With eps > 0 the loss is exactly 0 when pred equals a binary target,
    including the all-empty case.
    """
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {tuple(pred.shape)} != target {tuple(target.shape)}")
    dims = tuple(range(1, pred.ndim))
    inter = (pred * target).sum(dim=dims)
    total = pred.sum(dim=dims) + target.sum(dim=dims)
    return (1.0 - (2.0 * inter + epsilon_dice) / (total + epsilon_dice)).mean()


def adversarial_term(d_fake: torch.Tensor, epsilon_log: float = 1e-7) -> torch.Tensor:
    """Mean over patches of -log(D(x, G(x))), clamped away from log 0."""
    return -torch.log(torch.clamp(d_fake, min=epsilon_log)).mean()


def generator_loss(d_fake: torch.Tensor, pred: torch.Tensor, target: torch.Tensor,
                   lambda_weight: float = 150.0, epsilon_log: float = 1e-7,
                   epsilon_dice: float = 1.0) -> torch.Tensor:
    """Generator objective: adversarial term + lambda * fuzzy dice."""
    return adversarial_term(d_fake, epsilon_log) + lambda_weight * dice_loss(
        pred, target, epsilon_dice
    )


def discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor,
                       epsilon_log: float = 1e-7) -> torch.Tensor:
    """Binary cross entropy over patch grids with real -> 1 and fake -> 0."""
    if d_real.shape != d_fake.shape:
        raise ValueError(
            f"patch grids differ: {tuple(d_real.shape)} vs {tuple(d_fake.shape)}"
        )
    real = -torch.log(torch.clamp(d_real, min=epsilon_log)).mean()
    fake = -torch.log(torch.clamp(1.0 - d_fake, min=epsilon_log)).mean()
    return real + fake


@dataclass(frozen=True)
class AdversarialConfig:
    """Training hyperparameters; presets carry the published per-modality values."""

    lambda_weight: float = 150.0
    use_adversarial: bool = True
    epochs: int = 6
    batch_size: int = 3
    learning_rate: float = 1e-5
    seed: int = 0
    epsilon_log: float = 1e-7
    epsilon_dice: float = 1.0

    def __post_init__(self):
        if self.lambda_weight < 0:
            raise ValueError("lambda_weight must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    @classmethod
    def preset(cls, modality: TrainingModality, **overrides) -> "AdversarialConfig":
        """CT: 6 epochs, batch 3. MR (t1/t2): 20 epochs, batch 5. LR 1e-5."""
        modality = TrainingModality(modality)
        if modality is TrainingModality.CT:
            cfg = cls(epochs=6, batch_size=3)
        else:
            cfg = cls(epochs=20, batch_size=5)
        return replace(cfg, **overrides) if overrides else cfg


@dataclass(frozen=True)
class LossRecord:
    l_g: float
    l_d: float
    l_dice: float
    adv_term: float
    step: int


def save_loss_curve(records, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "l_G", "l_D", "l_dice", "adv_term"])
        for r in records:
            writer.writerow([r.step, repr(r.l_g), repr(r.l_d), repr(r.l_dice), repr(r.adv_term)])
    tmp.replace(path)


def batch_tensors(samples) -> tuple[torch.Tensor, torch.Tensor]:
    """Stack SliceSamples into (B, C, H, W) inputs and (B, 1, H, W) targets."""
    x = np.stack([s.input for s in samples]).astype(np.float32)
    y = np.stack([s.target for s in samples]).astype(np.float32)
    return (
        torch.from_numpy(x).permute(0, 3, 1, 2).contiguous(),
        torch.from_numpy(y).unsqueeze(1),
    )


class AdversarialTrainer:
    """Owns a generator (or cascade), optional discriminator, and their optimizers."""

    def __init__(self, model: nn.Module, discriminator: PatchDiscriminator | None,
                 config: AdversarialConfig):
        if config.use_adversarial and discriminator is None:
            raise ValueError("use_adversarial=True needs a discriminator")
        self.model = model
        self.discriminator = discriminator if config.use_adversarial else None
        self.config = config
        self.opt_g = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
        self.opt_d = (
            torch.optim.Adam(self.discriminator.parameters(), lr=config.learning_rate)
            if self.discriminator is not None
            else None
        )
        self.step = 0

    def _predict(self, x: torch.Tensor) -> torch.Tensor:
        out = self.model(x)
        return out[1] if isinstance(out, tuple) else out

    def train_step(self, inputs: torch.Tensor, targets: torch.Tensor) -> LossRecord:
        """One discriminator update then one generator update on the same batch.

        With use_adversarial=False the discriminator is skipped and the
        generator minimizes lambda * dice only.
        """
        cfg = self.config
        l_d = 0.0
        if self.discriminator is not None:
            with torch.no_grad():
                fake = self._predict(inputs)
            self.opt_d.zero_grad()
            d_real = self.discriminator(inputs, targets)
            d_fake = self.discriminator(inputs, fake)
            loss_d = discriminator_loss(d_real, d_fake, cfg.epsilon_log)
            loss_d.backward()
            self.opt_d.step()
            l_d = float(loss_d.detach())

        self.opt_g.zero_grad()
        pred = self._predict(inputs)
        l_dice_t = dice_loss(pred, targets, cfg.epsilon_dice)
        if self.discriminator is not None:
            adv_t = adversarial_term(self.discriminator(inputs, pred), cfg.epsilon_log)
            loss_g = adv_t + cfg.lambda_weight * l_dice_t
            adv = float(adv_t.detach())
        else:
            loss_g = cfg.lambda_weight * l_dice_t
            adv = 0.0
        loss_g.backward()
        self.opt_g.step()

        self.step += 1
        record = LossRecord(
            l_g=float(loss_g.detach()),
            l_d=l_d,
            l_dice=float(l_dice_t.detach()),
            adv_term=adv,
            step=self.step,
        )
        if not all(np.isfinite(v) for v in (record.l_g, record.l_d, record.l_dice)):
            raise NumericError(f"non-finite loss at step {record.step}: {record}")
        return record

    def train(self, samples: list[SliceSample],
              augment_params: AugmentParams | None = None) -> list[LossRecord]:
        """Run the configured number of epochs over the sample set.

        Samples are shuffled per epoch with a seeded generator. When
        augmentation is enabled, each sample is rendered through one fresh
        deterministic transform per epoch (copy index = epoch), so two runs
        with the same seed produce identical parameters.
        """
        if not samples:
            raise ValueError("empty training dataset")
        rng = np.random.default_rng(self.config.seed)
        records = []
        for epoch in range(self.config.epochs):
            order = rng.permutation(len(samples))
            epoch_samples = [samples[i] for i in order]
            if augment_params is not None:
                epoch_samples = [augment_once(s, augment_params, epoch) for s in epoch_samples]
            for start in range(0, len(epoch_samples), self.config.batch_size):
                chunk = epoch_samples[start : start + self.config.batch_size]
                x, y = batch_tensors(chunk)
                records.append(self.train_step(x, y))
        return records
