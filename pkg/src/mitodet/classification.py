"""Binary mitosis vs non-mitosis classification of candidate crops.

Fixed-size crops are taken around candidate centers (mirror-padded at the
image border), resized to the network input resolution, and scored by a
small conv net with a two-way softmax. A candidate is accepted when the
mitosis probability reaches the confidence threshold (inclusive >=).

Offline augmentation expands the labeled crop set with flips and
right-angle rotations; online augmentation jitters training batches with
small mirror-filled shifts and flips. Both are label- and shape-preserving
and deterministic for a fixed seed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import data_io
from .geometry import Point, round_half_up
from .nnutil import (
    fingerprint_arrays,
    init_weights,
    load_state_arrays,
    single_threaded_torch,
    state_arrays,
)
from .tiling import extract_tile, TileSpec

__all__ = [
    "MITOSIS",
    "NON_MITOSIS",
    "ClassifierConfig",
    "LabeledCrop",
    "ClassifierModel",
    "make_crop",
    "augment_offline",
    "augment_online",
    "build_classifier_model",
    "train_classifier",
    "classify",
]

STAGE = "classifier"

MITOSIS = 1
NON_MITOSIS = 0


@dataclass
class ClassifierConfig:
    """Classifier hyperparameters.

    Defaults are the full-scale settings: 50 px crops, 50 epochs with early
    stopping (patience 5 on validation loss), lr 1e-3, confidence threshold
    0.7. ``network_input`` is the resize target fed to the network.
    """

    crop_size: int = 50
    network_input: int = 64
    epochs: int = 50
    learning_rate: float = 1e-3
    early_stop_patience: int = 5
    confidence_threshold: float = 0.7
    batch_size: int = 32
    val_fraction: float = 0.2
    offline_rotations: int = 3
    online_shift_fraction: float = 0.1
    base_channels: int = 16
    seed: int = 0

    def validate(self) -> None:
        if self.crop_size <= 0 or self.network_input <= 0:
            raise ValueError("crop_size and network_input must be positive")
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.early_stop_patience < 0:
            raise ValueError("early_stop_patience must be non-negative")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError("confidence_threshold must lie in [0, 1]")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.offline_rotations < 0:
            raise ValueError("offline_rotations must be non-negative")
        if not 0.0 <= self.online_shift_fraction <= 0.5:
            raise ValueError("online_shift_fraction must lie in [0, 0.5]")
        if self.base_channels < 4 or self.base_channels % 4:
            raise ValueError("base_channels must be a positive multiple of 4")


@dataclass(frozen=True)
class LabeledCrop:
    """A square crop with its binary label and provenance (slide id, center)."""

    pixels: np.ndarray
    label: int
    source: tuple[str, Point] | None = None

    def __post_init__(self) -> None:
        if self.label not in (MITOSIS, NON_MITOSIS):
            raise ValueError(f"label must be {MITOSIS} or {NON_MITOSIS}, got {self.label}")
        if self.pixels.ndim != 3 or self.pixels.shape[0] != self.pixels.shape[1]:
            raise ValueError(f"crop must be square HxWx3, got shape {self.pixels.shape}")


def make_crop(image: np.ndarray, center: Point, crop_size: int) -> np.ndarray:
    """Square crop centered on ``center``, mirror-padded past image borders."""
    h, w = image.shape[:2]
    if not (0 <= center.x < w and 0 <= center.y < h):
        raise ValueError(f"center ({center.x}, {center.y}) lies outside the {w}x{h} image")
    cx, cy = round_half_up(center.x), round_half_up(center.y)
    half = crop_size // 2
    spec = TileSpec(origin=Point(float(cx - half), float(cy - half)), size=crop_size)
    return extract_tile(image, spec)


def augment_offline(
    crop: LabeledCrop, seed: int, rotations: int = 3
) -> list[LabeledCrop]:
    """Expand one crop into the original, its vertical flip, and rotated copies.

    Rotations are right-angle (90/180/270 degrees), chosen by the seeded RNG,
    so shape and label are always preserved.
    """
    rng = np.random.default_rng(seed)
    out = [crop]
    out.append(
        LabeledCrop(pixels=crop.pixels[::-1].copy(), label=crop.label, source=crop.source)
    )
    for _ in range(rotations):
        k = int(rng.integers(1, 4))
        out.append(
            LabeledCrop(
                pixels=np.rot90(crop.pixels, k=k).copy(),
                label=crop.label,
                source=crop.source,
            )
        )
    return out


def augment_online(
    batch: np.ndarray, seed: int, shift_fraction: float = 0.1
) -> np.ndarray:
    """Per-sample random mirror-filled shifts and horizontal/vertical flips.

    ``batch`` is (B, H, W, C); the output has identical shape and dtype.
    A zero shift_fraction disables shifting (flips still apply only when the
    RNG draws them, so seed determinism covers the whole transform).
    """
    rng = np.random.default_rng(seed)
    b, h, w = batch.shape[:3]
    max_dy = int(round(shift_fraction * h))
    max_dx = int(round(shift_fraction * w))
    out = np.empty_like(batch)
    for i in range(b):
        img = batch[i]
        dy = int(rng.integers(-max_dy, max_dy + 1)) if max_dy else 0
        dx = int(rng.integers(-max_dx, max_dx + 1)) if max_dx else 0
        if dy or dx:
            pad_y, pad_x = abs(dy), abs(dx)
            padded = np.pad(
                img, ((pad_y, pad_y), (pad_x, pad_x), (0, 0)), mode="reflect"
            )
            img = padded[pad_y + dy : pad_y + dy + h, pad_x + dx : pad_x + dx + w]
        if rng.random() < 0.5:
            img = img[:, ::-1]
        if rng.random() < 0.5:
            img = img[::-1]
        out[i] = img
    return out


class ClassifierNet(nn.Module):
    """Small conv net: three stride-2 stages, global average pool, 2-way head."""

    def __init__(self, base_channels: int = 16):
        super().__init__()
        groups = 4
        c = base_channels
        self.features = nn.Sequential(
            nn.Conv2d(3, c, 3, stride=2, padding=1),
            nn.GroupNorm(groups, c),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            nn.GroupNorm(groups, 2 * c),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1),
            nn.GroupNorm(groups, 4 * c),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
        )
        self.head = nn.Linear(4 * c, 2)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feat = self.features(x).flatten(1)
        return self.head(feat)


class ClassifierModel:
    stage = STAGE

    def __init__(self, net: ClassifierNet, config: ClassifierConfig):
        self.net = net
        self.config = config

    def eval(self) -> "ClassifierModel":
        self.net.eval()
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        return state_arrays(self.net)

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
    def load(cls, path: str | Path) -> "ClassifierModel":
        arrays, meta = data_io.load_checkpoint(path, expected_stage=STAGE)
        model = build_classifier_model(ClassifierConfig(**meta["config"]))
        load_state_arrays(model.net, arrays)
        return model.eval()


def build_classifier_model(cfg: ClassifierConfig) -> ClassifierModel:
    cfg.validate()
    gen = torch.Generator().manual_seed(cfg.seed)
    net = ClassifierNet(cfg.base_channels)
    init_weights(net, gen)
    return ClassifierModel(net, cfg)


def _crops_to_tensor(pixels: np.ndarray, network_input: int) -> torch.Tensor:
    """(B, s, s, 3) uint8 -> (B, 3, n, n) float32 in [-1, 1], bilinear resize."""
    t = torch.from_numpy(np.asarray(pixels, dtype=np.float32) / 127.5 - 1.0)
    t = t.permute(0, 3, 1, 2).contiguous()
    if t.shape[2] != network_input:
        t = nn.functional.interpolate(
            t, size=(network_input, network_input), mode="bilinear", align_corners=False
        )
    return t


def train_classifier(
    crops: Sequence[LabeledCrop], cfg: ClassifierConfig
) -> tuple[ClassifierModel, list[dict]]:
    """Cross-entropy training with early stopping on validation loss.

    The crop list is split into train/validation stratified by label; online
    augmentation perturbs each training batch. Training stops once the
    validation loss has not improved for more than ``early_stop_patience``
    epochs and the best-epoch weights are restored. Bit-deterministic for a
    fixed seed.
    """
    cfg.validate()
    labels = np.array([c.label for c in crops], dtype=np.int64)
    if len(set(labels.tolist())) < 2:
        raise ValueError("training data must contain both labels")
    for i, c in enumerate(crops):
        if c.pixels.shape != (cfg.crop_size, cfg.crop_size, 3):
            raise ValueError(
                f"crop {i} has shape {c.pixels.shape}, expected "
                f"({cfg.crop_size}, {cfg.crop_size}, 3)"
            )

    rng = np.random.default_rng(cfg.seed)
    # stratified split: hold out val_fraction of each label
    train_idx: list[int] = []
    val_idx: list[int] = []
    for label in (NON_MITOSIS, MITOSIS):
        idx = np.flatnonzero(labels == label)
        idx = idx[rng.permutation(len(idx))]
        n_val = max(1, round_half_up(len(idx) * cfg.val_fraction))
        val_idx.extend(idx[:n_val].tolist())
        train_idx.extend(idx[n_val:].tolist())
    if not train_idx:
        raise ValueError("not enough crops to form a training split")
    train_idx.sort()
    val_idx.sort()

    pixels = np.stack([c.pixels for c in crops])
    with single_threaded_torch():
        model = build_classifier_model(cfg)
        net = model.net
        opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
        ce = nn.CrossEntropyLoss()

        val_x = _crops_to_tensor(pixels[val_idx], cfg.network_input)
        val_y = torch.from_numpy(labels[val_idx])

        best_val = float("inf")
        best_state: dict[str, np.ndarray] | None = None
        epochs_since_best = 0
        history: list[dict] = []
        for epoch in range(cfg.epochs):
            net.train()
            order = rng.permutation(len(train_idx))
            train_losses = []
            for start in range(0, len(order), cfg.batch_size):
                sel = [train_idx[j] for j in order[start : start + cfg.batch_size]]
                batch = augment_online(
                    pixels[sel],
                    seed=int(rng.integers(0, 2**31)),
                    shift_fraction=cfg.online_shift_fraction,
                )
                x = _crops_to_tensor(batch, cfg.network_input)
                y = torch.from_numpy(labels[sel])
                loss = ce(net(x), y)
                opt.zero_grad()
                loss.backward()
                opt.step()
                train_losses.append(float(loss.item()))

            net.eval()
            with torch.no_grad():
                val_logits = net(val_x)
                val_loss = float(ce(val_logits, val_y).item())
                val_acc = float((val_logits.argmax(dim=1) == val_y).float().mean().item())
            history.append(
                {
                    "epoch": epoch,
                    "train_loss": float(np.mean(train_losses)),
                    "val_loss": val_loss,
                    "val_accuracy": val_acc,
                }
            )
            if val_loss < best_val:
                best_val = val_loss
                best_state = state_arrays(net)
                epochs_since_best = 0
            else:
                epochs_since_best += 1
                if epochs_since_best > cfg.early_stop_patience:
                    break
        if best_state is not None:
            load_state_arrays(net, best_state)
        return model.eval(), history


def classify(
    crop: np.ndarray, model: ClassifierModel, cfg: ClassifierConfig | None = None
) -> tuple[float, bool]:
    """Mitosis probability and the thresholded decision for one crop.

    The decision is inclusive: probability >= confidence_threshold accepts.
    """
    cfg = cfg or model.config
    if crop.shape != (cfg.crop_size, cfg.crop_size, 3):
        raise ValueError(
            f"expected a ({cfg.crop_size}, {cfg.crop_size}, 3) crop, got shape {crop.shape}"
        )
    model.net.eval()
    with torch.no_grad():
        logits = model.net(_crops_to_tensor(crop[None], cfg.network_input))
        prob = float(torch.softmax(logits[0], dim=0)[MITOSIS].item())
    return prob, prob >= cfg.confidence_threshold
