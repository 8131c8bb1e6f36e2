"""End-to-end inference: tile, translate, detect, merge, classify, emit.

One slide flows through the stages of the testing pipeline: a grid of large
patches is stain-translated into the target domain, each translated patch is
split into detection tiles, per-tile candidates are mapped back to the slide
frame and de-duplicated with NMS, fixed-size crops around the surviving
centers are classified, and the centers of accepted candidates become the
output. Stage outputs can be cached per slide, content-addressed by the
upstream configuration and model fingerprints, so re-runs with one changed
stage recompute only what sits downstream.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .classification import ClassifierConfig, ClassifierModel, classify, make_crop
from .detection import DetectorConfig, DetectorModel, detect
from .geometry import BoundingBox, Detection, Point, box_center, nms, round_half_up
from .tiling import TilingConfig, build_grid, extract_tile, tissue_fraction
from .translation import TranslationConfig, TranslationModel, translate

__all__ = [
    "PipelineConfig",
    "PipelineModels",
    "SlideResult",
    "SplitSpec",
    "run_slide",
    "build_translated_canvas",
    "make_split",
    "emit_results",
    "read_results",
    "save_split",
    "load_split",
]

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    translation: TranslationConfig = field(default_factory=TranslationConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    tiling: TilingConfig = field(default_factory=TilingConfig)
    merge_nms_iou: float = 0.1
    classify_from_translated: bool = True
    cache_dir: str | None = None

    def validate(self) -> None:
        self.translation.validate()
        self.detector.validate()
        self.classifier.validate()
        self.tiling.validate()
        if not 0.0 <= self.merge_nms_iou <= 1.0:
            raise ValueError("merge_nms_iou must lie in [0, 1]")
        if self.tiling.translation_tile_size % self.translation.downsampling_factor:
            raise ValueError(
                "translation_tile_size must be divisible by the generator's "
                f"downsampling factor {self.translation.downsampling_factor}"
            )
        if self.detector.tile_size > self.tiling.translation_tile_size:
            raise ValueError("detector tile cannot exceed the translation tile")


@dataclass
class PipelineModels:
    translation: TranslationModel
    detector: DetectorModel
    classifier: ClassifierModel


@dataclass
class SlideResult:
    slide_id: str
    mitoses: list[tuple[Point, float]]
    candidates_total: int
    runtime: dict[str, float]
    extent: tuple[int, int]


# --------------------------------------------------------------------------- #
# Stage cache
# --------------------------------------------------------------------------- #


def _cache_key(*parts: str | bytes) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p.encode() if isinstance(p, str) else p)
        h.update(b"\x1f")
    return h.hexdigest()


def _cache_load(cache_dir: str | None, key: str) -> dict[str, np.ndarray] | None:
    if cache_dir is None:
        return None
    path = Path(cache_dir) / f"{key}.npz"
    if not path.exists():
        return None
    with np.load(path) as npz:
        return {k: npz[k] for k in npz.files}


def _cache_store(cache_dir: str | None, key: str, arrays: Mapping[str, np.ndarray]) -> None:
    if cache_dir is None:
        return
    path = Path(cache_dir)
    path.mkdir(parents=True, exist_ok=True)
    np.savez(path / f"{key}.npz", **arrays)


# --------------------------------------------------------------------------- #
# Stages
# --------------------------------------------------------------------------- #


def build_translated_canvas(
    image: np.ndarray,
    model: TranslationModel,
    tiling: TilingConfig,
) -> np.ndarray:
    """Stain-translate a slide patch by patch into one slide-sized canvas.

    Patches below the tissue threshold keep their original pixels (anything
    detected there would be background anyway). The canvas is an internal
    working surface for detection and cropping, not a stitched deliverable;
    it holds the whole region in memory, which is fine for exported regions.
    """
    h, w = image.shape[:2]
    grid = build_grid((w, h), tiling.translation_tile_size, tiling.translation_stride)
    canvas = image.copy()
    for spec in grid.tiles:
        patch = extract_tile(image, spec)
        if tissue_fraction(patch, tiling.background_luminance) < tiling.min_tissue_fraction:
            continue
        translated = translate(patch, model, direction="a2b")
        x0, y0 = round_half_up(spec.origin.x), round_half_up(spec.origin.y)
        # clip to the slide for the degenerate mirror-padded tile
        sx0, sy0 = max(x0, 0), max(y0, 0)
        sx1, sy1 = min(x0 + spec.size, w), min(y0 + spec.size, h)
        canvas[sy0:sy1, sx0:sx1] = translated[sy0 - y0 : sy1 - y0, sx0 - x0 : sx1 - x0]
    return canvas


_BORDER_EPS = 0.75


def _touches_interior_border(
    box, det_spec, extent: tuple[int, int], eps: float = _BORDER_EPS
) -> bool:
    """True when a slide-frame box is cut off at a tile edge inside the slide.

    Tile overlap is sized so every object fits wholly inside some tile, so
    boxes truncated at interior tile borders are partial views of an object
    another tile sees complete; keeping them would create low-IoU duplicates
    the merge NMS cannot fold. Edges on the slide boundary are kept: there is
    no second view of an object at the slide border.
    """
    w, h = extent
    x0, y0 = det_spec.origin.x, det_spec.origin.y
    x1, y1 = x0 + det_spec.size, y0 + det_spec.size
    if x0 > 0 and box.x_min <= x0 + eps:
        return True
    if y0 > 0 and box.y_min <= y0 + eps:
        return True
    if x1 < w and box.x_max >= x1 - eps:
        return True
    if y1 < h and box.y_max >= y1 - eps:
        return True
    return False


def _detect_candidates(
    canvas: np.ndarray,
    models: PipelineModels,
    cfg: PipelineConfig,
) -> list[Detection]:
    """Detection tiles over the translated canvas, merged in the slide frame.

    The tile grid is laid out slide-wide rather than per translation patch:
    the canvas already holds translated pixels everywhere, and a slide-wide
    grid lets tiles straddle translation-patch borders, so objects sitting on
    those borders are still seen whole by some tile. Tiles below the tissue
    threshold are skipped.
    """
    h, w = canvas.shape[:2]
    grid = build_grid((w, h), cfg.detector.tile_size, cfg.tiling.detection_stride)
    slide_dets: list[Detection] = []
    for det_spec in grid.tiles:
        tile = extract_tile(canvas, det_spec)
        if (
            tissue_fraction(tile, cfg.tiling.background_luminance)
            < cfg.tiling.min_tissue_fraction
        ):
            continue
        for d in detect(tile, models.detector, cfg.detector):
            slide_box = det_spec.transform.box_to_slide(d.box)
            if _touches_interior_border(slide_box, det_spec, (w, h)):
                continue
            clipped = slide_box.clipped(float(w), float(h))
            if clipped is not None:
                slide_dets.append(Detection(box=clipped, score=d.score, class_id=d.class_id))
    return nms(slide_dets, cfg.merge_nms_iou)


def run_slide(
    image: np.ndarray,
    slide_id: str,
    models: PipelineModels,
    cfg: PipelineConfig,
) -> SlideResult:
    """Full inference on one slide region; deterministic given models and config.

    Candidates surviving the detector's score threshold and the cross-tile
    merge NMS are cropped (from translated imagery by default) and
    classified; centers of accepted candidates are emitted with their
    probability, ordered by descending probability then x then y.
    """
    cfg.validate()
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"run_slide expects an HxWx3 raster, got shape {image.shape}")
    h, w = image.shape[:2]
    runtime: dict[str, float] = {}
    t_start = time.perf_counter()

    # stage 1: stain translation
    t0 = time.perf_counter()
    trans_key = _cache_key(
        "translation",
        image.tobytes(),
        json.dumps(
            [
                cfg.tiling.translation_tile_size,
                cfg.tiling.translation_stride,
                cfg.tiling.min_tissue_fraction,
                cfg.tiling.background_luminance,
            ]
        ),
        models.translation.fingerprint(),
    )
    cached = _cache_load(cfg.cache_dir, trans_key)
    if cached is not None:
        canvas = cached["canvas"]
        log.debug("slide %s: translation canvas served from cache", slide_id)
    else:
        canvas = build_translated_canvas(image, models.translation, cfg.tiling)
        _cache_store(cfg.cache_dir, trans_key, {"canvas": canvas})
    runtime["translation"] = time.perf_counter() - t0

    # stage 2: candidate detection + cross-tile merge
    t0 = time.perf_counter()
    det_key = _cache_key(
        "candidates",
        trans_key,
        json.dumps(
            {
                "detector": sorted(vars(cfg.detector).items(), key=str),
                "detection_stride": cfg.tiling.detection_stride,
                "merge_nms_iou": cfg.merge_nms_iou,
            },
            default=str,
        ),
        models.detector.fingerprint(),
    )
    cached = _cache_load(cfg.cache_dir, det_key)
    if cached is not None:
        candidates = [
            Detection(box=BoundingBox(*b), score=float(s))
            for b, s in zip(cached["boxes"].reshape(-1, 4), cached["scores"])
        ]
        log.debug("slide %s: candidates served from cache", slide_id)
    else:
        candidates = _detect_candidates(canvas, models, cfg)
        _cache_store(
            cfg.cache_dir,
            det_key,
            {
                "boxes": np.array([d.box.as_tuple() for d in candidates], dtype=np.float64),
                "scores": np.array([d.score for d in candidates], dtype=np.float64),
            },
        )
    runtime["detection"] = time.perf_counter() - t0

    # stage 3: crop classification at candidate centers
    t0 = time.perf_counter()
    crop_source = canvas if cfg.classify_from_translated else image
    mitoses: list[tuple[Point, float]] = []
    for d in candidates:
        center = box_center(d.box)
        cx = min(max(center.x, 0.0), w - 1.0)
        cy = min(max(center.y, 0.0), h - 1.0)
        crop = make_crop(crop_source, Point(cx, cy), cfg.classifier.crop_size)
        prob, accepted = classify(crop, models.classifier, cfg.classifier)
        if accepted:
            mitoses.append((Point(cx, cy), prob))
    mitoses.sort(key=lambda mp: (-mp[1], mp[0].x, mp[0].y))
    runtime["classification"] = time.perf_counter() - t0
    runtime["total"] = time.perf_counter() - t_start

    return SlideResult(
        slide_id=slide_id,
        mitoses=mitoses,
        candidates_total=len(candidates),
        runtime=runtime,
        extent=(w, h),
    )


# --------------------------------------------------------------------------- #
# Dataset splitting
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class SplitSpec:
    """Slide-level train/val/test partition; sets are disjoint and exhaustive."""

    train_ids: frozenset[str]
    val_ids: frozenset[str]
    test_ids: frozenset[str]
    seed: int

    def validate(self) -> None:
        sets = (self.train_ids, self.val_ids, self.test_ids)
        total = sum(len(s) for s in sets)
        union = self.train_ids | self.val_ids | self.test_ids
        if total != len(union):
            raise ValueError("split partitions overlap")


def make_split(
    slide_ids: Iterable[str],
    seed: int,
    test_fraction: float = 0.3,
    val_fraction: float = 0.2,
    scanner_ids: Mapping[str, str] | None = None,
) -> SplitSpec:
    """Slide-level split: test_fraction held out, then val_fraction of the rest.

    Counts use round-half-up, so 150 slides at the default 7:3 then 8:2
    ratios give 84 train / 21 val / 45 test. When a scanner mapping is
    supplied the split is stratified per scanner (rounding applies per
    group, so totals can move by one slide per group). Deterministic for a
    fixed seed; never splits below slide granularity.
    """
    ids = sorted(set(slide_ids))
    if len(ids) < 5:
        raise ValueError(f"need at least 5 slides to split, got {len(ids)}")
    if not 0.0 < test_fraction < 1.0 or not 0.0 < val_fraction < 1.0:
        raise ValueError("fractions must lie in (0, 1)")

    rng = np.random.default_rng(seed)
    groups: dict[str, list[str]]
    if scanner_ids is None:
        groups = {"": ids}
    else:
        groups = {}
        for sid in ids:
            groups.setdefault(scanner_ids.get(sid, ""), []).append(sid)

    train: set[str] = set()
    val: set[str] = set()
    test: set[str] = set()
    for key in sorted(groups):
        members = sorted(groups[key])
        order = rng.permutation(len(members))
        shuffled = [members[i] for i in order]
        n = len(shuffled)
        n_test = round_half_up(n * test_fraction)
        n_val = round_half_up((n - n_test) * val_fraction)
        test.update(shuffled[:n_test])
        val.update(shuffled[n_test : n_test + n_val])
        train.update(shuffled[n_test + n_val :])

    spec = SplitSpec(
        train_ids=frozenset(train), val_ids=frozenset(val), test_ids=frozenset(test), seed=seed
    )
    spec.validate()
    return spec


def save_split(spec: SplitSpec, path: str | Path) -> None:
    data = {
        "train_ids": sorted(spec.train_ids),
        "val_ids": sorted(spec.val_ids),
        "test_ids": sorted(spec.test_ids),
        "seed": spec.seed,
    }
    Path(path).write_text(json.dumps(data, indent=2))


def load_split(path: str | Path) -> SplitSpec:
    data = json.loads(Path(path).read_text())
    return SplitSpec(
        train_ids=frozenset(data["train_ids"]),
        val_ids=frozenset(data["val_ids"]),
        test_ids=frozenset(data["test_ids"]),
        seed=int(data["seed"]),
    )


# --------------------------------------------------------------------------- #
# Result emission
# --------------------------------------------------------------------------- #

_RESULT_FIELDS = ("slide_id", "x", "y", "prob")


def emit_results(results: SlideResult | Sequence[SlideResult], path: str | Path) -> None:
    """Write accepted mitosis centers as CSV: slide_id, x, y, prob.

    Rows are ordered by slide id, then descending probability, then x, then
    y. Floats are written with full round-trip precision.
    """
    if isinstance(results, SlideResult):
        results = [results]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(_RESULT_FIELDS)
        for result in sorted(results, key=lambda r: r.slide_id):
            rows = sorted(result.mitoses, key=lambda mp: (-mp[1], mp[0].x, mp[0].y))
            for point, prob in rows:
                writer.writerow([result.slide_id, repr(point.x), repr(point.y), repr(prob)])


def read_results(path: str | Path) -> dict[str, list[tuple[Point, float]]]:
    """Read an emitted CSV back into per-slide scored points."""
    out: dict[str, list[tuple[Point, float]]] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(header) != _RESULT_FIELDS:
            raise ValueError(f"{path}: expected header {','.join(_RESULT_FIELDS)}")
        for row in reader:
            slide_id, x, y, prob = row
            out.setdefault(slide_id, []).append((Point(float(x), float(y)), float(prob)))
    return out
