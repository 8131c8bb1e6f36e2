"""Single-stage anchor-based candidate detector on square tiles.

A fully convolutional backbone produces one feature map at a fixed stride;
each feature location carries one anchor per (size, ratio) combination.
Training uses a focal classification loss over all non-ignored anchors plus
a smooth-L1 regression loss on positives. Inference decodes anchor deltas,
clips boxes to the tile, drops low scores, then applies greedy NMS.

The detector has a single foreground class: it proposes both mitoses and
look-alike structures, and the downstream classifier disambiguates.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import data_io
from .geometry import BoundingBox, Detection, nms
from .nnutil import (
    batch_to_tensor,
    fingerprint_arrays,
    image_to_tensor,
    init_weights,
    load_state_arrays,
    single_threaded_torch,
    state_arrays,
)

__all__ = [
    "DetectorConfig",
    "AnchorSet",
    "AnchorTargets",
    "DetectorModel",
    "generate_anchors",
    "encode_boxes",
    "decode_boxes",
    "encode_targets",
    "focal_loss_with_logits",
    "smooth_l1",
    "build_detector_model",
    "train_detector",
    "detect",
]

STAGE = "detector"


@dataclass
class DetectorConfig:
    """Detector hyperparameters.

    Defaults are the full-scale settings: 512 px tiles, NMS IoU 0.1, score
    threshold 0.35, lr 1e-4, 10000 training iterations. Anchor assignment
    uses IoU >= pos_iou for positives and < neg_iou for negatives with the
    in-between band ignored; focal loss uses alpha 0.25, gamma 2.
    """

    tile_size: int = 512
    nms_iou: float = 0.1
    score_threshold: float = 0.35
    learning_rate: float = 1e-4
    train_iterations: int = 10000
    anchor_sizes: tuple[float, ...] = (32.0, 48.0, 64.0)
    anchor_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)
    feature_stride: int = 16
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    smooth_l1_beta: float = 1.0 / 9.0
    base_channels: int = 32
    batch_size: int = 8
    seed: int = 0

    def validate(self) -> None:
        if self.tile_size <= 0:
            raise ValueError("tile_size must be positive")
        for name in ("nms_iou", "score_threshold", "focal_alpha"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.learning_rate <= 0 or self.train_iterations <= 0 or self.batch_size <= 0:
            raise ValueError("learning_rate, train_iterations and batch_size must be positive")
        if not self.anchor_sizes or not self.anchor_ratios:
            raise ValueError("anchor_sizes and anchor_ratios must be non-empty")
        if any(s <= 0 for s in self.anchor_sizes) or any(r <= 0 for r in self.anchor_ratios):
            raise ValueError("anchor sizes and ratios must be positive")
        if self.feature_stride <= 0 or 2 ** int(math.log2(self.feature_stride)) != self.feature_stride:
            raise ValueError(f"feature_stride must be a power of two, got {self.feature_stride}")
        if not 0.0 <= self.neg_iou <= self.pos_iou <= 1.0:
            raise ValueError("need 0 <= neg_iou <= pos_iou <= 1")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be non-negative")
        if self.smooth_l1_beta < 0:
            raise ValueError("smooth_l1_beta must be non-negative")
        if self.base_channels < 4 or self.base_channels % 4:
            raise ValueError("base_channels must be a positive multiple of 4")
        if self.tile_size % self.feature_stride:
            raise ValueError(
                f"tile_size {self.tile_size} must be divisible by "
                f"feature_stride {self.feature_stride}"
            )

    @property
    def anchors_per_location(self) -> int:
        return len(self.anchor_sizes) * len(self.anchor_ratios)


@dataclass(frozen=True)
class AnchorSet:
    """All anchors of a tile, row-major by location, then size, then ratio."""

    boxes: np.ndarray  # (N, 4) x_min, y_min, x_max, y_max
    grid_shape: tuple[int, int]  # (rows, cols)
    stride: int

    def __len__(self) -> int:
        return self.boxes.shape[0]


@dataclass(frozen=True)
class AnchorTargets:
    labels: np.ndarray  # (N,) int8: 1 positive, 0 negative, -1 ignored
    deltas: np.ndarray  # (N, 4) float32 regression targets
    matched_truth: np.ndarray  # (N,) int64 truth index, -1 when unmatched


def generate_anchors(cfg: DetectorConfig, tile_size: int | None = None) -> AnchorSet:
    """Deterministic anchor grid; anchors may extend past tile edges."""
    ts = cfg.tile_size if tile_size is None else tile_size
    if ts % cfg.feature_stride:
        raise ValueError(
            f"tile size {ts} is not divisible by feature_stride {cfg.feature_stride}"
        )
    s = cfg.feature_stride
    rows = cols = ts // s
    shapes = np.array(
        [
            (size / math.sqrt(ratio), size * math.sqrt(ratio))
            for size in cfg.anchor_sizes
            for ratio in cfg.anchor_ratios
        ],
        dtype=np.float64,
    )  # (K, 2) width, height; ratio is height/width at constant area
    cy, cx = np.meshgrid(
        (np.arange(rows) + 0.5) * s, (np.arange(cols) + 0.5) * s, indexing="ij"
    )
    centers = np.stack([cx.ravel(), cy.ravel()], axis=1)  # (rows*cols, 2) row-major
    k = shapes.shape[0]
    c = np.repeat(centers, k, axis=0)
    wh = np.tile(shapes, (centers.shape[0], 1))
    boxes = np.concatenate([c - wh / 2.0, c + wh / 2.0], axis=1)
    return AnchorSet(boxes=boxes, grid_shape=(rows, cols), stride=s)


def encode_boxes(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Center/size offsets of target boxes relative to anchors."""
    anchors = np.asarray(anchors, dtype=np.float64)
    boxes = np.asarray(boxes, dtype=np.float64)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = (anchors[:, 0] + anchors[:, 2]) / 2.0
    acy = (anchors[:, 1] + anchors[:, 3]) / 2.0
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bcx = (boxes[:, 0] + boxes[:, 2]) / 2.0
    bcy = (boxes[:, 1] + boxes[:, 3]) / 2.0
    return np.stack(
        [(bcx - acx) / aw, (bcy - acy) / ah, np.log(bw / aw), np.log(bh / ah)], axis=1
    )


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_boxes`."""
    anchors = np.asarray(anchors, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    acx = (anchors[:, 0] + anchors[:, 2]) / 2.0
    acy = (anchors[:, 1] + anchors[:, 3]) / 2.0
    bcx = acx + deltas[:, 0] * aw
    bcy = acy + deltas[:, 1] * ah
    bw = aw * np.exp(deltas[:, 2])
    bh = ah * np.exp(deltas[:, 3])
    return np.stack(
        [bcx - bw / 2.0, bcy - bh / 2.0, bcx + bw / 2.0, bcy + bh / 2.0], axis=1
    )


def _iou_matrix(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    ax1, ay1, ax2, ay2 = (anchors[:, i : i + 1] for i in range(4))
    bx1, by1, bx2, by2 = (boxes[None, :, i] for i in range(4))
    ix = np.minimum(ax2, bx2) - np.maximum(ax1, bx1)
    iy = np.minimum(ay2, by2) - np.maximum(ay1, by1)
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    return inter / (area_a + area_b - inter)


def encode_targets(anchors: AnchorSet, truths: Sequence[BoundingBox], cfg: DetectorConfig) -> AnchorTargets:
    """Per-anchor class targets and regression deltas for one tile.

    Anchors with best IoU >= pos_iou are positive, < neg_iou negative, the
    band in between ignored. Each truth additionally forces its best-IoU
    anchor positive (when that IoU is > 0), so no truth goes unrepresented.
    Every anchor regresses toward its own best-overlapping truth.
    """
    n = len(anchors)
    if not truths:
        return AnchorTargets(
            labels=np.zeros(n, dtype=np.int8),
            deltas=np.zeros((n, 4), dtype=np.float32),
            matched_truth=np.full(n, -1, dtype=np.int64),
        )
    tb = np.array([t.as_tuple() for t in truths], dtype=np.float64)
    iou = _iou_matrix(anchors.boxes, tb)
    best_truth = iou.argmax(axis=1)
    best_iou = iou[np.arange(n), best_truth]

    labels = np.full(n, -1, dtype=np.int8)
    labels[best_iou < cfg.neg_iou] = 0
    labels[best_iou >= cfg.pos_iou] = 1
    # max-IoU fallback: the best anchor of each truth is positive
    for t in range(tb.shape[0]):
        a = int(iou[:, t].argmax())
        if iou[a, t] > 0.0:
            labels[a] = 1

    matched = np.where(labels == 1, best_truth, -1).astype(np.int64)
    deltas = np.zeros((n, 4), dtype=np.float32)
    pos = labels == 1
    if pos.any():
        deltas[pos] = encode_boxes(anchors.boxes[pos], tb[best_truth[pos]]).astype(np.float32)
    return AnchorTargets(labels=labels, deltas=deltas, matched_truth=matched)


def focal_loss_with_logits(
    logits: torch.Tensor, targets: torch.Tensor, alpha: float, gamma: float
) -> torch.Tensor:
    """Elementwise sigmoid focal loss; gamma=0, alpha=0.5 is 0.5 * BCE."""
    ce = nn.functional.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p = torch.sigmoid(logits)
    p_t = p * targets + (1.0 - p) * (1.0 - targets)
    alpha_t = alpha * targets + (1.0 - alpha) * (1.0 - targets)
    return alpha_t * (1.0 - p_t) ** gamma * ce


def smooth_l1(diff: torch.Tensor, beta: float) -> torch.Tensor:
    """Elementwise smooth-L1: quadratic inside beta, linear outside."""
    if beta <= 0:
        return torch.abs(diff)
    adiff = torch.abs(diff)
    return torch.where(adiff < beta, 0.5 * adiff**2 / beta, adiff - 0.5 * beta)


class DetectorNet(nn.Module):
    """Conv backbone at a fixed output stride with classification/box heads."""

    def __init__(self, base_channels: int, feature_stride: int, anchors_per_location: int):
        super().__init__()
        n_down = int(math.log2(feature_stride))
        groups = 4
        layers: list[nn.Module] = []
        ch_in = 3
        ch = base_channels
        for i in range(n_down):
            layers += [
                nn.Conv2d(ch_in, ch, 3, stride=2, padding=1),
                nn.GroupNorm(groups, ch),
                nn.ReLU(inplace=True),
            ]
            ch_in = ch
            ch = min(ch * 2, base_channels * 4)
        self.backbone = nn.Sequential(*layers)
        self.trunk = nn.Sequential(
            nn.Conv2d(ch_in, ch_in, 3, padding=1),
            nn.GroupNorm(groups, ch_in),
            nn.ReLU(inplace=True),
            nn.Conv2d(ch_in, ch_in, 3, padding=1),
            nn.GroupNorm(groups, ch_in),
            nn.ReLU(inplace=True),
        )
        self.cls_head = nn.Conv2d(ch_in, anchors_per_location, 3, padding=1)
        self.box_head = nn.Conv2d(ch_in, 4 * anchors_per_location, 3, padding=1)
        self.anchors_per_location = anchors_per_location

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Returns (logits (B, N), deltas (B, N, 4)) in anchor order."""
        feat = self.trunk(self.backbone(x))
        b = x.shape[0]
        k = self.anchors_per_location
        logits = self.cls_head(feat).permute(0, 2, 3, 1).reshape(b, -1)
        deltas = (
            self.box_head(feat)
            .reshape(b, k, 4, feat.shape[2], feat.shape[3])
            .permute(0, 3, 4, 1, 2)
            .reshape(b, -1, 4)
        )
        return logits, deltas


class DetectorModel:
    stage = STAGE

    def __init__(self, net: DetectorNet, config: DetectorConfig):
        self.net = net
        self.config = config
        self.anchors = generate_anchors(config)

    def eval(self) -> "DetectorModel":
        self.net.eval()
        return self

    def state_arrays(self) -> dict[str, np.ndarray]:
        return state_arrays(self.net)

    def fingerprint(self) -> str:
        return fingerprint_arrays(self.state_arrays())

    def save(self, path: str | Path, history: Sequence[dict] | None = None) -> None:
        meta = {
            "config": asdict(self.config),
            "iterations_completed": len(history) if history else 0,
            "loss_history": list(history) if history else [],
        }
        cfg_dict = meta["config"]
        cfg_dict["anchor_sizes"] = list(cfg_dict["anchor_sizes"])
        cfg_dict["anchor_ratios"] = list(cfg_dict["anchor_ratios"])
        data_io.save_checkpoint(path, STAGE, self.state_arrays(), meta)

    @classmethod
    def load(cls, path: str | Path) -> "DetectorModel":
        arrays, meta = data_io.load_checkpoint(path, expected_stage=STAGE)
        cfg_dict = dict(meta["config"])
        cfg_dict["anchor_sizes"] = tuple(cfg_dict["anchor_sizes"])
        cfg_dict["anchor_ratios"] = tuple(cfg_dict["anchor_ratios"])
        model = build_detector_model(DetectorConfig(**cfg_dict))
        load_state_arrays(model.net, arrays)
        return model.eval()


def build_detector_model(cfg: DetectorConfig) -> DetectorModel:
    """Fresh detector with seed-deterministic init and low foreground prior."""
    cfg.validate()
    gen = torch.Generator().manual_seed(cfg.seed)
    net = DetectorNet(cfg.base_channels, cfg.feature_stride, cfg.anchors_per_location)
    init_weights(net, gen)
    # bias the classification head so initial foreground probability is ~0.01
    prior = 0.01
    net.cls_head.bias.data.fill_(-math.log((1.0 - prior) / prior))
    return DetectorModel(net, cfg)


def train_detector(
    tiles: Sequence[tuple[np.ndarray, Sequence[BoundingBox]]],
    cfg: DetectorConfig,
) -> tuple[DetectorModel, list[dict]]:
    """Train on (tile raster, truth boxes) pairs; returns model and history.

    Focal classification loss runs over every non-ignored anchor, smooth-L1
    over positive anchors, both normalized by the positive count. Tiles
    without truth contribute classification loss only. A stream assigning no
    positive anchors anywhere is rejected as untrainable. Bit-deterministic
    for a fixed seed.
    """
    cfg.validate()
    if len(tiles) == 0:
        raise ValueError("tile stream is empty")
    for i, (img, _) in enumerate(tiles):
        if img.shape != (cfg.tile_size, cfg.tile_size, 3):
            raise ValueError(
                f"tile {i} has shape {img.shape}, expected "
                f"({cfg.tile_size}, {cfg.tile_size}, 3)"
            )

    anchors = generate_anchors(cfg)
    target_list = [encode_targets(anchors, truths, cfg) for _, truths in tiles]
    if not any((t.labels == 1).any() for t in target_list):
        raise ValueError("no tile assigns any positive anchor; stream is untrainable")

    with single_threaded_torch():
        model = build_detector_model(cfg)
        net = model.net
        net.train()
        opt = torch.optim.Adam(net.parameters(), lr=cfg.learning_rate)
        rng = np.random.default_rng(cfg.seed)

        images = batch_to_tensor([img for img, _ in tiles])
        labels = torch.from_numpy(np.stack([t.labels for t in target_list])).to(torch.float32)
        deltas = torch.from_numpy(np.stack([t.deltas for t in target_list]))

        history: list[dict] = []
        for it in range(cfg.train_iterations):
            idx = rng.integers(0, len(tiles), size=cfg.batch_size)
            batch = torch.from_numpy(idx)
            logits, pred_deltas = net(images[batch])
            lab = labels[batch]
            valid = lab >= 0.0
            pos = lab == 1.0
            num_pos = float(pos.sum().item())
            norm = max(1.0, num_pos)

            cls_loss = (
                focal_loss_with_logits(
                    logits[valid], lab[valid], cfg.focal_alpha, cfg.focal_gamma
                ).sum()
                / norm
            )
            if num_pos > 0:
                box_loss = (
                    smooth_l1(pred_deltas[pos] - deltas[batch][pos], cfg.smooth_l1_beta).sum()
                    / norm
                )
            else:
                box_loss = torch.zeros((), dtype=logits.dtype)
            loss = cls_loss + box_loss
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(
                {
                    "iteration": it,
                    "total": float(loss.item()),
                    "classification": float(cls_loss.item()),
                    "box": float(box_loss.item()),
                    "num_positives": num_pos,
                }
            )
        return model.eval(), history


def detect(
    tile: np.ndarray, model: DetectorModel, cfg: DetectorConfig | None = None
) -> list[Detection]:
    """Candidate detections on one tile, in the tile frame.

    Scores below the threshold are dropped, surviving anchor deltas are
    decoded, boxes are clipped to the tile, then greedy NMS runs at the
    configured IoU. Output is sorted by descending score.
    """
    cfg = cfg or model.config
    ts = cfg.tile_size
    if tile.shape != (ts, ts, 3):
        raise ValueError(f"expected a ({ts}, {ts}, 3) tile, got shape {tile.shape}")
    model.net.eval()
    with torch.no_grad():
        logits, pred_deltas = model.net(image_to_tensor(tile))
    scores = torch.sigmoid(logits[0]).numpy().astype(np.float64)
    keep = scores >= cfg.score_threshold
    if not keep.any():
        return []
    boxes = decode_boxes(model.anchors.boxes[keep], pred_deltas[0].numpy()[keep])
    dets = []
    for (x1, y1, x2, y2), s in zip(boxes, scores[keep]):
        clipped = BoundingBox(x1, y1, x2, y2).clipped(float(ts), float(ts))
        if clipped is not None:
            dets.append(Detection(box=clipped, score=float(min(s, 1.0)), class_id=0))
    return nms(dets, cfg.nms_iou)
