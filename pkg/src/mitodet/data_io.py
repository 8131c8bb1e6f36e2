"""Dataset ingestion, synthetic fixtures, and checkpoint persistence.

The manifest is a single JSON index referencing standard 8-bit RGB image
files, which keeps the pipeline decoupled from vendor WSI formats. Four
scanner ids are recognized; GT450 slides are the unannotated translation
target domain and must not carry annotations.

Checkpoints are a self-describing binary container: magic header, format
version, stage tag, SHA-256 checksum, then an npz payload holding parameter
tensors plus a JSON metadata record (config echo, epoch counter, loss
history). Writers replace the target atomically.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from PIL import Image

from .geometry import BoundingBox, Point, box_center

__all__ = [
    "ANNOTATED_SCANNERS",
    "TARGET_SCANNER",
    "SCANNER_IDS",
    "LABEL_MITOSIS",
    "LABEL_HARD_NEGATIVE",
    "POINT_BOX_SIZE",
    "Annotation",
    "SlideRecord",
    "DatasetManifest",
    "ManifestError",
    "load_manifest",
    "save_manifest",
    "SynthSpec",
    "synth_dataset",
    "render_synthetic_slide",
    "sample_object_layout",
    "CheckpointError",
    "save_checkpoint",
    "load_checkpoint",
    "extract_translation_patches",
    "extract_detection_tiles",
    "extract_labeled_crops",
]

ANNOTATED_SCANNERS = ("XR", "S360", "CS2")
TARGET_SCANNER = "GT450"
SCANNER_IDS = ANNOTATED_SCANNERS + (TARGET_SCANNER,)

LABEL_MITOSIS = "mitosis"
LABEL_HARD_NEGATIVE = "hard_negative"
_LABELS = (LABEL_MITOSIS, LABEL_HARD_NEGATIVE)

# point annotations are expanded to this square box (the crop-window convention)
POINT_BOX_SIZE = 50.0


class ManifestError(ValueError):
    """Raised for schema violations; messages carry the offending record index."""


@dataclass(frozen=True)
class Annotation:
    """A ground-truth object on a slide, in slide-frame coordinates."""

    slide_id: str
    box: BoundingBox
    label: str

    def __post_init__(self) -> None:
        if self.label not in _LABELS:
            raise ValueError(f"label must be one of {_LABELS}, got {self.label!r}")

    @property
    def center(self) -> Point:
        return box_center(self.box)


@dataclass(frozen=True)
class SlideRecord:
    slide_id: str
    scanner_id: str
    path: str
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.scanner_id not in SCANNER_IDS:
            raise ValueError(f"scanner_id must be one of {SCANNER_IDS}, got {self.scanner_id!r}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"slide extent must be positive, got {self.width}x{self.height}")

    @property
    def extent(self) -> tuple[int, int]:
        return (self.width, self.height)


@dataclass
class DatasetManifest:
    slides: tuple[SlideRecord, ...]
    annotations: tuple[Annotation, ...]
    root: Path = field(default_factory=Path)

    def slide_ids(self) -> list[str]:
        return [s.slide_id for s in self.slides]

    def get_slide(self, slide_id: str) -> SlideRecord:
        for s in self.slides:
            if s.slide_id == slide_id:
                return s
        raise KeyError(f"unknown slide id: {slide_id!r}")

    def annotations_for(self, slide_id: str) -> list[Annotation]:
        return [a for a in self.annotations if a.slide_id == slide_id]

    def scanner_by_slide(self) -> dict[str, str]:
        return {s.slide_id: s.scanner_id for s in self.slides}

    def annotated_slide_ids(self) -> list[str]:
        return [s.slide_id for s in self.slides if s.scanner_id != TARGET_SCANNER]

    def target_slide_ids(self) -> list[str]:
        return [s.slide_id for s in self.slides if s.scanner_id == TARGET_SCANNER]

    def mitosis_centers_by_slide(self) -> dict[str, list[Point]]:
        """Evaluation truth: mitosis centers for every annotated-scanner slide."""
        centers: dict[str, list[Point]] = {sid: [] for sid in self.annotated_slide_ids()}
        for a in self.annotations:
            if a.label == LABEL_MITOSIS:
                centers[a.slide_id].append(a.center)
        return centers

    def load_image(self, slide_id: str) -> np.ndarray:
        rec = self.get_slide(slide_id)
        path = Path(rec.path)
        if not path.is_absolute():
            path = self.root / path
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
        if arr.shape[:2] != (rec.height, rec.width):
            raise ManifestError(
                f"slide {slide_id!r}: image is {arr.shape[1]}x{arr.shape[0]}, "
                f"manifest says {rec.width}x{rec.height}"
            )
        return arr


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ManifestError(msg)


def _parse_annotation(record: Mapping, index: int, slides: Mapping[str, SlideRecord]) -> Annotation:
    where = f"annotation record {index}"
    _require(isinstance(record, Mapping), f"{where}: expected an object")
    slide_id = record.get("slide_id")
    _require(isinstance(slide_id, str) and slide_id in slides,
             f"{where}: unknown or missing slide_id {slide_id!r}")
    label = record.get("label")
    _require(label in _LABELS, f"{where}: label must be one of {_LABELS}, got {label!r}")
    slide = slides[slide_id]
    _require(
        slide.scanner_id != TARGET_SCANNER,
        f"{where}: slide {slide_id!r} is a {TARGET_SCANNER} slide and must carry no annotations",
    )
    box_keys = ("x_min", "y_min", "x_max", "y_max")
    if all(k in record for k in box_keys):
        try:
            box = BoundingBox(*(float(record[k]) for k in box_keys))
        except (TypeError, ValueError) as exc:
            raise ManifestError(f"{where}: invalid box: {exc}") from exc
    elif "x" in record and "y" in record:
        # point annotation: expand to the standard crop-window box
        try:
            cx, cy = float(record["x"]), float(record["y"])
        except (TypeError, ValueError) as exc:
            raise ManifestError(f"{where}: invalid point: {exc}") from exc
        half = POINT_BOX_SIZE / 2.0
        box = BoundingBox(cx - half, cy - half, cx + half, cy + half)
    else:
        raise ManifestError(f"{where}: need either x_min/y_min/x_max/y_max or x/y")
    _require(
        0.0 <= box.x_min and 0.0 <= box.y_min
        and box.x_max <= slide.width and box.y_max <= slide.height,
        f"{where}: box {box.as_tuple()} extends outside slide "
        f"{slide_id!r} ({slide.width}x{slide.height})",
    )
    return Annotation(slide_id=slide_id, box=box, label=label)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Parse and validate a manifest JSON file.

    Point annotations (x/y records) are normalized to 50x50 boxes around the
    point. Any schema violation raises :class:`ManifestError` naming the
    offending record index.
    """
    path = Path(path)
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: not valid JSON: {exc}") from exc
    _require(isinstance(data, Mapping), "manifest root must be an object")
    raw_slides = data.get("slides")
    _require(isinstance(raw_slides, list) and raw_slides, "manifest needs a non-empty 'slides' list")

    slides: dict[str, SlideRecord] = {}
    records = []
    for i, rec in enumerate(raw_slides):
        where = f"slide record {i}"
        _require(isinstance(rec, Mapping), f"{where}: expected an object")
        try:
            slide = SlideRecord(
                slide_id=str(rec["slide_id"]),
                scanner_id=str(rec["scanner_id"]),
                path=str(rec["path"]),
                width=int(rec["width"]),
                height=int(rec["height"]),
            )
        except KeyError as exc:
            raise ManifestError(f"{where}: missing field {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise ManifestError(f"{where}: {exc}") from exc
        _require(slide.slide_id not in slides, f"{where}: duplicate slide_id {slide.slide_id!r}")
        slides[slide.slide_id] = slide
        records.append(slide)

    annotations = [
        _parse_annotation(rec, i, slides) for i, rec in enumerate(data.get("annotations", []))
    ]
    return DatasetManifest(
        slides=tuple(records), annotations=tuple(annotations), root=path.parent
    )


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    data = {
        "slides": [
            {
                "slide_id": s.slide_id,
                "scanner_id": s.scanner_id,
                "path": s.path,
                "width": s.width,
                "height": s.height,
            }
            for s in manifest.slides
        ],
        "annotations": [
            {
                "slide_id": a.slide_id,
                "x_min": a.box.x_min,
                "y_min": a.box.y_min,
                "x_max": a.box.x_max,
                "y_max": a.box.y_max,
                "label": a.label,
            }
            for a in manifest.annotations
        ],
    }
    _atomic_write(Path(path), json.dumps(data, indent=2).encode())


# --------------------------------------------------------------------------- #
# Synthetic fixture generation
# --------------------------------------------------------------------------- #

# per-scanner color regime: per-channel (gain, offset) applied to the shared
# grayscale tissue field; regimes differ mostly by a global color shift
_COLOR_REGIMES: dict[str, tuple[tuple[float, float], ...]] = {
    "XR": ((0.95, 0.05), (0.55, 0.18), (0.80, 0.10)),
    "S360": ((1.00, 0.00), (0.62, 0.10), (0.70, 0.18)),
    "CS2": ((0.90, 0.08), (0.58, 0.22), (0.88, 0.04)),
    "GT450": ((0.70, 0.12), (0.72, 0.08), (1.00, -0.02)),
}

KIND_MITOSIS = "mitosis"
KIND_HARD_NEGATIVE = "hard_negative"


@dataclass
class SynthSpec:
    """Counts and geometry for the synthetic two-domain fixture dataset."""

    slides_per_scanner: int = 2
    scanners: tuple[str, ...] = ("XR", TARGET_SCANNER)
    extent: tuple[int, int] = (256, 256)
    mitoses_per_slide: int = 5
    hard_negatives_per_slide: int = 5
    object_radius: float = 6.0
    seed: int = 0

    def validate(self) -> None:
        if self.slides_per_scanner <= 0:
            raise ValueError("slides_per_scanner must be positive")
        if self.extent[0] <= 0 or self.extent[1] <= 0:
            raise ValueError("extent must be positive")
        if self.mitoses_per_slide < 0 or self.hard_negatives_per_slide < 0:
            raise ValueError("object counts must be non-negative")
        if self.object_radius <= 0:
            raise ValueError("object_radius must be positive")
        for sc in self.scanners:
            if sc not in SCANNER_IDS:
                raise ValueError(f"unknown scanner {sc!r}; valid: {SCANNER_IDS}")


def _smooth_texture(extent: tuple[int, int], rng: np.random.Generator, cell: int = 8) -> np.ndarray:
    """Low-frequency noise field in [0, 1], bilinearly upsampled from a coarse grid."""
    w, h = extent
    gw, gh = max(2, w // cell + 2), max(2, h // cell + 2)
    coarse = rng.uniform(0.0, 1.0, size=(gh, gw))
    img = Image.fromarray((coarse * 255.0).astype(np.uint8), mode="L")
    fine = np.asarray(img.resize((w, h), Image.BILINEAR), dtype=np.float64) / 255.0
    return fine


def _ellipse_mask(
    extent: tuple[int, int], center: Point, rx: float, ry: float
) -> np.ndarray:
    w, h = extent
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    return ((xs - center.x) / rx) ** 2 + ((ys - center.y) / ry) ** 2 <= 1.0


def sample_object_layout(
    extent: tuple[int, int],
    n_mitoses: int,
    n_hard_negatives: int,
    radius: float,
    rng: np.random.Generator,
    margin: float | None = None,
    min_separation: float | None = None,
) -> list[tuple[Point, str]]:
    """Rejection-sample non-overlapping object centers inside the extent."""
    w, h = extent
    margin = margin if margin is not None else 3.0 * radius
    min_separation = min_separation if min_separation is not None else 5.0 * radius
    kinds = [KIND_MITOSIS] * n_mitoses + [KIND_HARD_NEGATIVE] * n_hard_negatives
    placed: list[Point] = []
    out: list[tuple[Point, str]] = []
    for kind in kinds:
        for _ in range(1000):
            c = Point(rng.uniform(margin, w - margin), rng.uniform(margin, h - margin))
            if all(c.distance_to(p) >= min_separation for p in placed):
                placed.append(c)
                out.append((c, kind))
                break
        else:
            raise ValueError(
                f"could not place {len(kinds)} objects of radius {radius} in extent {extent}"
            )
    return out


def render_synthetic_slide(
    extent: tuple[int, int],
    scanner_id: str,
    objects: Sequence[tuple[Point, str]],
    rng: np.random.Generator,
    object_radius: float = 6.0,
) -> np.ndarray:
    """Textured tissue-like raster with planted dark blobs and ring look-alikes.

    Mitoses are filled dark ellipses; hard negatives are dark annuli with the
    background showing through the middle. Color comes from the per-scanner
    regime so different scanners emulate different staining appearances.
    """
    if scanner_id not in _COLOR_REGIMES:
        raise ValueError(f"unknown scanner {scanner_id!r}")
    w, h = extent
    texture = _smooth_texture(extent, rng)
    field = 0.72 + 0.18 * texture  # light tissue background

    for center, kind in objects:
        rx = object_radius * rng.uniform(0.9, 1.1)
        ry = object_radius * rng.uniform(0.9, 1.1)
        if kind == KIND_MITOSIS:
            mask = _ellipse_mask(extent, center, rx, ry)
            field[mask] *= 0.18
        else:
            outer = _ellipse_mask(extent, center, rx, ry)
            inner = _ellipse_mask(extent, center, 0.5 * rx, 0.5 * ry)
            field[outer & ~inner] *= 0.18

    regime = _COLOR_REGIMES[scanner_id]
    channels = []
    for gain, offset in regime:
        chan = field * gain + offset
        channels.append(chan)
    img = np.stack(channels, axis=-1)
    img += rng.normal(0.0, 0.008, size=img.shape)  # mild sensor noise
    img = np.clip(img, 0.0, 1.0) * 255.0
    return np.floor(img + 0.5).astype(np.uint8)


def synth_dataset(spec: SynthSpec, out_dir: str | Path) -> DatasetManifest:
    """Write a deterministic synthetic dataset (PNGs + manifest.json).

    Every slide gets planted objects; annotations are recorded only for
    annotated scanners, mirroring the real dataset where the translation
    target scanner ships without labels.
    """
    spec.validate()
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    slides: list[SlideRecord] = []
    annotations: list[Annotation] = []
    for scanner in spec.scanners:
        for i in range(spec.slides_per_scanner):
            slide_id = f"{scanner}_{i:03d}"
            layout = sample_object_layout(
                spec.extent,
                spec.mitoses_per_slide,
                spec.hard_negatives_per_slide,
                spec.object_radius,
                rng,
            )
            image = render_synthetic_slide(
                spec.extent, scanner, layout, rng, object_radius=spec.object_radius
            )
            rel_path = f"images/{slide_id}.png"
            Image.fromarray(image).save(out_dir / rel_path)
            slides.append(
                SlideRecord(
                    slide_id=slide_id,
                    scanner_id=scanner,
                    path=rel_path,
                    width=spec.extent[0],
                    height=spec.extent[1],
                )
            )
            if scanner == TARGET_SCANNER:
                continue
            r = spec.object_radius
            for center, kind in layout:
                label = LABEL_MITOSIS if kind == KIND_MITOSIS else LABEL_HARD_NEGATIVE
                annotations.append(
                    Annotation(
                        slide_id=slide_id,
                        box=BoundingBox(center.x - r, center.y - r, center.x + r, center.y + r),
                        label=label,
                    )
                )

    manifest = DatasetManifest(
        slides=tuple(slides), annotations=tuple(annotations), root=out_dir
    )
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


# --------------------------------------------------------------------------- #
# Checkpoint container
# --------------------------------------------------------------------------- #

CHECKPOINT_MAGIC = b"MFCK"
CHECKPOINT_VERSION = 1
CHECKPOINT_STAGES = ("translation", "detector", "classifier")


class CheckpointError(ValueError):
    """Bad magic, version or stage mismatch, or checksum failure."""


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def save_checkpoint(
    path: str | Path,
    stage: str,
    arrays: Mapping[str, np.ndarray],
    meta: Mapping,
) -> None:
    """Persist parameter arrays plus JSON-serializable metadata for one stage."""
    if stage not in CHECKPOINT_STAGES:
        raise CheckpointError(f"stage must be one of {CHECKPOINT_STAGES}, got {stage!r}")
    buf = io.BytesIO()
    payload_arrays = {f"param::{k}": np.asarray(v) for k, v in arrays.items()}
    payload_arrays["__meta__"] = np.frombuffer(
        json.dumps(dict(meta)).encode(), dtype=np.uint8
    )
    np.savez(buf, **payload_arrays)
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).digest()
    stage_b = stage.encode()
    header = (
        CHECKPOINT_MAGIC
        + struct.pack("<I", CHECKPOINT_VERSION)
        + struct.pack("<B", len(stage_b))
        + stage_b
        + struct.pack("<Q", len(payload))
        + digest
    )
    _atomic_write(Path(path), header + payload)


def load_checkpoint(
    path: str | Path, expected_stage: str | None = None
) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint back; returns (parameter arrays, metadata dict)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    off = 4
    (version,) = struct.unpack_from("<I", blob, off)
    off += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )
    (stage_len,) = struct.unpack_from("<B", blob, off)
    off += 1
    stage = blob[off : off + stage_len].decode()
    off += stage_len
    (payload_len,) = struct.unpack_from("<Q", blob, off)
    off += 8
    digest = blob[off : off + 32]
    off += 32
    payload = blob[off : off + payload_len]
    if len(payload) != payload_len or hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted file)")
    if expected_stage is not None and stage != expected_stage:
        raise CheckpointError(
            f"{path}: stage mismatch: file holds a {stage!r} checkpoint, "
            f"expected {expected_stage!r}"
        )
    with np.load(io.BytesIO(payload)) as npz:
        meta = json.loads(bytes(npz["__meta__"]).decode())
        arrays = {
            k[len("param::") :]: npz[k] for k in npz.files if k.startswith("param::")
        }
    return arrays, meta


# --------------------------------------------------------------------------- #
# Training-data extraction
# --------------------------------------------------------------------------- #


def extract_translation_patches(
    manifest: DatasetManifest,
    patch_size: int,
    min_tissue_fraction: float = 0.05,
    background_luminance: float = 0.85,
) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Tissue-filtered unpaired patch sets: (annotated-scanner, target-scanner)."""
    from .tiling import build_grid, extract_tile, tissue_fraction

    domain_a: list[np.ndarray] = []
    domain_b: list[np.ndarray] = []
    for rec in manifest.slides:
        image = manifest.load_image(rec.slide_id)
        grid = build_grid(rec.extent, patch_size, patch_size)
        sink = domain_b if rec.scanner_id == TARGET_SCANNER else domain_a
        for spec in grid.tiles:
            patch = extract_tile(image, spec)
            if tissue_fraction(patch, background_luminance) >= min_tissue_fraction:
                sink.append(patch)
    return domain_a, domain_b


def extract_detection_tiles(
    manifest: DatasetManifest,
    slide_ids: Sequence[str],
    tile_size: int,
    stride: int,
    translator: Callable[[np.ndarray], np.ndarray] | None = None,
    min_tissue_fraction: float = 0.05,
    background_luminance: float = 0.85,
) -> list[tuple[np.ndarray, list[BoundingBox]]]:
    """Detector training tiles with per-tile truth boxes in the tile frame.

    Both annotation labels become foreground truth: the detector proposes
    candidates, the classifier disambiguates. A truth box belongs to the
    tile containing its center and is clipped to the tile bounds. Tiles
    below the tissue threshold and without truth are dropped.
    """
    from .tiling import build_grid, extract_tile, tissue_fraction

    out: list[tuple[np.ndarray, list[BoundingBox]]] = []
    for slide_id in slide_ids:
        rec = manifest.get_slide(slide_id)
        image = manifest.load_image(slide_id)
        if translator is not None:
            image = translator(image)
        boxes = [a.box for a in manifest.annotations_for(slide_id)]
        grid = build_grid(rec.extent, tile_size, stride)
        for spec in grid.tiles:
            ox, oy = spec.origin.x, spec.origin.y
            local = [
                clipped
                for b in boxes
                if ox <= box_center(b).x < ox + tile_size
                and oy <= box_center(b).y < oy + tile_size
                and (clipped := b.translated(-ox, -oy).clipped(tile_size, tile_size)) is not None
            ]
            tile = extract_tile(image, spec)
            if not local and tissue_fraction(tile, background_luminance) < min_tissue_fraction:
                continue
            out.append((tile, local))
    return out


def extract_labeled_crops(
    manifest: DatasetManifest,
    slide_ids: Sequence[str],
    crop_size: int,
    translator: Callable[[np.ndarray], np.ndarray] | None = None,
):
    """Classifier crops around annotation centers: mitosis vs hard negative."""
    from .classification import LabeledCrop, MITOSIS, NON_MITOSIS, make_crop

    crops: list[LabeledCrop] = []
    for slide_id in slide_ids:
        image = manifest.load_image(slide_id)
        if translator is not None:
            image = translator(image)
        for a in manifest.annotations_for(slide_id):
            pixels = make_crop(image, a.center, crop_size)
            label = MITOSIS if a.label == LABEL_MITOSIS else NON_MITOSIS
            crops.append(LabeledCrop(pixels=pixels, label=label, source=(slide_id, a.center)))
    return crops
