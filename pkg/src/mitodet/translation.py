"""Unpaired stain translation between scanner appearance domains.

Two generators (A->B, B->A) and two patch discriminators are trained
adversarially with least-squares GAN losses plus an L1 cycle-consistency
term; no identity loss. Generators are residual: they predict a bounded
per-pixel delta added to the input, so a zero-initialized head is an exact
identity mapping and the value range stays near [-1, 1] by construction.
Losses are computed on raw (unclamped) generator outputs; only
:func:`translate` clamps before quantizing back to 8-bit.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import data_io
from .nnutil import (
    batch_to_tensor,
    fingerprint_arrays,
    image_to_tensor,
    init_weights,
    load_state_arrays,
    single_threaded_torch,
    state_arrays,
    tensor_to_image,
)

__all__ = [
    "TranslationConfig",
    "TranslationModel",
    "Generator",
    "Discriminator",
    "ImagePool",
    "build_translation_model",
    "train_translation",
    "translate",
    "cycle_loss",
]

STAGE = "translation"


@dataclass
class TranslationConfig:
    """Hyperparameters of the unpaired translation stage.

    Defaults are the full-scale settings (1024 px patches, 200 epochs,
    lr 2e-4, cycle weight 10, history pool of 50); desk-scale runs shrink
    the architecture and patch size through the same knobs.
    """

    patch_size: int = 1024
    epochs: int = 200
    learning_rate: float = 2e-4
    cycle_weight: float = 10.0
    pool_size: int = 50
    generator_depth: int = 3  # residual blocks at the bottleneck
    discriminator_depth: int = 3  # stride-2 stages in the patch discriminator
    base_channels: int = 32
    downsample_stages: int = 2
    batch_size: int = 1
    identity_init: bool = False
    seed: int = 0

    def validate(self) -> None:
        if self.patch_size <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("patch_size, epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.cycle_weight < 0:
            raise ValueError("cycle_weight must be non-negative")
        if self.pool_size < 0:
            raise ValueError("pool_size must be non-negative")
        if self.generator_depth < 0 or self.downsample_stages < 0:
            raise ValueError("generator_depth and downsample_stages must be non-negative")
        if self.discriminator_depth < 1:
            raise ValueError("discriminator_depth must be at least 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be positive")
        factor = 2**self.downsample_stages
        if self.patch_size % factor:
            raise ValueError(
                f"patch_size {self.patch_size} must be divisible by the "
                f"downsampling factor {factor}"
            )

    @property
    def downsampling_factor(self) -> int:
        return 2**self.downsample_stages


class _ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.block(x)


class Generator(nn.Module):
    """Residual encoder-decoder predicting a tanh-bounded delta over the input."""

    def __init__(self, base_channels: int = 32, residual_blocks: int = 3, downsample_stages: int = 2):
        super().__init__()
        layers: list[nn.Module] = [
            nn.Conv2d(3, base_channels, 7, padding=3, padding_mode="reflect"),
            nn.InstanceNorm2d(base_channels),
            nn.ReLU(inplace=True),
        ]
        ch = base_channels
        for _ in range(downsample_stages):
            layers += [
                nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1),
                nn.InstanceNorm2d(ch * 2),
                nn.ReLU(inplace=True),
            ]
            ch *= 2
        layers += [_ResidualBlock(ch) for _ in range(residual_blocks)]
        for _ in range(downsample_stages):
            layers += [
                nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, output_padding=1),
                nn.InstanceNorm2d(ch // 2),
                nn.ReLU(inplace=True),
            ]
            ch //= 2
        self.body = nn.Sequential(*layers)
        self.head = nn.Conv2d(ch, 3, 7, padding=3, padding_mode="reflect")
        self.downsampling_factor = 2**downsample_stages

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + torch.tanh(self.head(self.body(x)))

    def zero_head(self) -> None:
        """Make the generator an exact identity (pass-through residual path)."""
        self.head.weight.data.zero_()
        if self.head.bias is not None:
            self.head.bias.data.zero_()


class Discriminator(nn.Module):
    """Patch discriminator: stride-2 conv stack emitting per-patch logits."""

    def __init__(self, base_channels: int = 32, depth: int = 3):
        super().__init__()
        layers: list[nn.Module] = [
            nn.Conv2d(3, base_channels, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2, inplace=True),
        ]
        ch = base_channels
        for _ in range(depth - 1):
            layers += [
                nn.Conv2d(ch, ch * 2, 4, stride=2, padding=1),
                nn.InstanceNorm2d(ch * 2),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            ch *= 2
        layers.append(nn.Conv2d(ch, 1, 4, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class ImagePool:
    """History buffer of generated images for discriminator updates.

    With capacity <= 1 the pool is a pure passthrough of the latest image;
    otherwise each query either returns the fresh image or swaps it against
    a random stored one (probability 1/2 each).
    """

    def __init__(self, size: int, rng: np.random.Generator):
        if size < 0:
            raise ValueError(f"pool size must be non-negative, got {size}")
        self.size = size
        self._rng = rng
        self._images: list[torch.Tensor] = []

    def query(self, images: torch.Tensor) -> torch.Tensor:
        if self.size <= 1:
            return images
        out = []
        for img in images:
            img = img.detach().unsqueeze(0)
            if len(self._images) < self.size:
                self._images.append(img)
                out.append(img)
            elif self._rng.random() < 0.5:
                out.append(img)
            else:
                j = int(self._rng.integers(self.size))
                out.append(self._images[j])
                self._images[j] = img
        return torch.cat(out, dim=0)


class TranslationModel:
    """Generator/discriminator quartet with its config; immutable after training."""

    stage = STAGE

    def __init__(
        self,
        g_ab: Generator,
        g_ba: Generator,
        d_a: Discriminator,
        d_b: Discriminator,
        config: TranslationConfig,
    ):
        self.g_ab = g_ab
        self.g_ba = g_ba
        self.d_a = d_a
        self.d_b = d_b
        self.config = config

    @property
    def downsampling_factor(self) -> int:
        return self.g_ab.downsampling_factor

    def eval(self) -> "TranslationModel":
        for net in (self.g_ab, self.g_ba, self.d_a, self.d_b):
            net.eval()
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for prefix, net in (
            ("g_ab", self.g_ab),
            ("g_ba", self.g_ba),
            ("d_a", self.d_a),
            ("d_b", self.d_b),
        ):
            for k, v in state_arrays(net).items():
                out[f"{prefix}.{k}"] = v
        return out

    def fingerprint(self) -> str:
        return fingerprint_arrays(self.state_arrays())

    def save(self, path: str | Path, history: Sequence[dict] | None = None) -> None:
        meta = {
            "config": asdict(self.config),
            "epochs_completed": len(history) if history else 0,
            "loss_history": list(history) if history else [],
        }
        data_io.save_checkpoint(path, STAGE, self.state_arrays(), meta)

    @classmethod
    def load(cls, path: str | Path) -> "TranslationModel":
        arrays, meta = data_io.load_checkpoint(path, expected_stage=STAGE)
        cfg = TranslationConfig(**meta["config"])
        model = build_translation_model(cfg)
        for prefix, net in (
            ("g_ab", model.g_ab),
            ("g_ba", model.g_ba),
            ("d_a", model.d_a),
            ("d_b", model.d_b),
        ):
            sub = {
                k[len(prefix) + 1 :]: v for k, v in arrays.items() if k.startswith(prefix + ".")
            }
            load_state_arrays(net, sub)
        return model.eval()


def build_translation_model(cfg: TranslationConfig) -> TranslationModel:
    """Fresh model with seed-deterministic initialization."""
    cfg.validate()
    gen = torch.Generator().manual_seed(cfg.seed)
    g_ab = Generator(cfg.base_channels, cfg.generator_depth, cfg.downsample_stages)
    g_ba = Generator(cfg.base_channels, cfg.generator_depth, cfg.downsample_stages)
    d_a = Discriminator(cfg.base_channels, cfg.discriminator_depth)
    d_b = Discriminator(cfg.base_channels, cfg.discriminator_depth)
    for net in (g_ab, g_ba, d_a, d_b):
        init_weights(net, gen)
    if cfg.identity_init:
        g_ab.zero_head()
        g_ba.zero_head()
    return TranslationModel(g_ab, g_ba, d_a, d_b, cfg)


def _validate_patches(patches: Sequence[np.ndarray], size: int, name: str) -> None:
    if len(patches) == 0:
        raise ValueError(f"domain {name} is empty")
    for i, p in enumerate(patches):
        if p.shape != (size, size, 3):
            raise ValueError(
                f"domain {name} patch {i} has shape {p.shape}, expected ({size}, {size}, 3)"
            )


def train_translation(
    domain_a: Sequence[np.ndarray],
    domain_b: Sequence[np.ndarray],
    cfg: TranslationConfig,
) -> tuple[TranslationModel, list[dict]]:
    """Adversarial training of the A<->B translation cycle.

    Returns the trained model and one history record per epoch with the mean
    generator adversarial loss, per-discriminator losses, and cycle loss.
    Bit-deterministic for a fixed seed.
    """
    cfg.validate()
    _validate_patches(domain_a, cfg.patch_size, "A")
    _validate_patches(domain_b, cfg.patch_size, "B")

    with single_threaded_torch():
        model = build_translation_model(cfg)
        g_ab, g_ba, d_a, d_b = model.g_ab, model.g_ba, model.d_a, model.d_b

        rng = np.random.default_rng(cfg.seed)
        pool_a = ImagePool(cfg.pool_size, rng)
        pool_b = ImagePool(cfg.pool_size, rng)

        opt_g = torch.optim.Adam(
            itertools.chain(g_ab.parameters(), g_ba.parameters()),
            lr=cfg.learning_rate,
            betas=(0.5, 0.999),
        )
        opt_da = torch.optim.Adam(d_a.parameters(), lr=cfg.learning_rate, betas=(0.5, 0.999))
        opt_db = torch.optim.Adam(d_b.parameters(), lr=cfg.learning_rate, betas=(0.5, 0.999))
        mse = nn.MSELoss()

        ta = batch_to_tensor(domain_a)
        tb = batch_to_tensor(domain_b)
        na, nb = len(domain_a), len(domain_b)
        steps = math.ceil(max(na, nb) / cfg.batch_size)

        def epoch_order(n: int) -> np.ndarray:
            reps = math.ceil(steps * cfg.batch_size / n)
            return np.concatenate([rng.permutation(n) for _ in range(reps)])

        history: list[dict] = []
        for epoch in range(cfg.epochs):
            order_a = epoch_order(na)
            order_b = epoch_order(nb)
            sums = {"generator_adversarial": 0.0, "cycle": 0.0,
                    "discriminator_a": 0.0, "discriminator_b": 0.0}
            for step in range(steps):
                sl = slice(step * cfg.batch_size, (step + 1) * cfg.batch_size)
                real_a = ta[order_a[sl]]
                real_b = tb[order_b[sl]]

                # generators
                opt_g.zero_grad()
                fake_b = g_ab(real_a)
                fake_a = g_ba(real_b)
                rec_a = g_ba(fake_b)
                rec_b = g_ab(fake_a)
                judged_b = d_b(fake_b)
                judged_a = d_a(fake_a)
                adv = mse(judged_b, torch.ones_like(judged_b)) + mse(
                    judged_a, torch.ones_like(judged_a)
                )
                cyc = torch.mean(torch.abs(rec_a - real_a)) + torch.mean(
                    torch.abs(rec_b - real_b)
                )
                (adv + cfg.cycle_weight * cyc).backward()
                opt_g.step()

                # discriminators, fed from the history pools
                opt_db.zero_grad()
                pooled_b = pool_b.query(fake_b.detach())
                real_b_logits = d_b(real_b)
                fake_b_logits = d_b(pooled_b)
                loss_db = 0.5 * (
                    mse(real_b_logits, torch.ones_like(real_b_logits))
                    + mse(fake_b_logits, torch.zeros_like(fake_b_logits))
                )
                loss_db.backward()
                opt_db.step()

                opt_da.zero_grad()
                pooled_a = pool_a.query(fake_a.detach())
                real_a_logits = d_a(real_a)
                fake_a_logits = d_a(pooled_a)
                loss_da = 0.5 * (
                    mse(real_a_logits, torch.ones_like(real_a_logits))
                    + mse(fake_a_logits, torch.zeros_like(fake_a_logits))
                )
                loss_da.backward()
                opt_da.step()

                sums["generator_adversarial"] += float(adv.item())
                sums["cycle"] += float(cyc.item())
                sums["discriminator_a"] += float(loss_da.item())
                sums["discriminator_b"] += float(loss_db.item())
            history.append(
                {"epoch": epoch, **{k: v / steps for k, v in sums.items()}}
            )
        return model.eval(), history


def translate(patch: np.ndarray, model: TranslationModel, direction: str = "a2b") -> np.ndarray:
    """Map a patch across domains; output has the same shape, clamped to range.

    The patch height and width must be divisible by the generator's
    downsampling factor (the generators are fully convolutional, so any
    compatible size works regardless of the training patch size).
    """
    if direction not in ("a2b", "b2a"):
        raise ValueError(f"direction must be 'a2b' or 'b2a', got {direction!r}")
    if patch.ndim != 3 or patch.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 raster, got shape {patch.shape}")
    factor = model.downsampling_factor
    h, w = patch.shape[:2]
    if h % factor or w % factor:
        raise ValueError(
            f"patch size {w}x{h} is not divisible by the required divisor {factor}"
        )
    gen = model.g_ab if direction == "a2b" else model.g_ba
    gen.eval()
    with torch.no_grad():
        out = gen(image_to_tensor(patch))
    return tensor_to_image(torch.clamp(out, -1.0, 1.0))


def cycle_loss(
    a_batch: Sequence[np.ndarray],
    b_batch: Sequence[np.ndarray],
    model: TranslationModel,
) -> float:
    """L1 cycle-reconstruction loss, mean over each direction, summed.

    Computed on raw generator outputs (no clamping), so exact inverse
    generator pairs score 0 even when intermediate values leave [-1, 1].
    """
    if len(a_batch) == 0 or len(b_batch) == 0:
        raise ValueError("both batches must be non-empty")
    ta = batch_to_tensor(a_batch)
    tb = batch_to_tensor(b_batch)
    with torch.no_grad():
        rec_a = model.g_ba(model.g_ab(ta))
        rec_b = model.g_ab(model.g_ba(tb))
        loss = torch.mean(torch.abs(rec_a - ta)) + torch.mean(torch.abs(rec_b - tb))
    return float(loss.item())
