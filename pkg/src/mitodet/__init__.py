"""Three-stage mitotic-figure detection toolkit.

Stages: unpaired stain translation into a reference scanner domain,
anchor-based candidate detection on square tiles, and binary crop
classification, plus the tiling, coordinate mapping, dataset splitting and
distance-matched F1 evaluation machinery around them.
"""

from .geometry import (
    BoundingBox,
    Detection,
    FrameTransform,
    Point,
    box_center,
    iou,
    nms,
)
from .tiling import TileGrid, TileSpec, TilingConfig, build_grid, extract_tile, tissue_fraction
from .evaluation import EvalConfig, MatchResult, evaluate_dataset, match_points, prf
from .translation import (
    TranslationConfig,
    TranslationModel,
    build_translation_model,
    cycle_loss,
    train_translation,
    translate,
)
from .detection import (
    DetectorConfig,
    DetectorModel,
    build_detector_model,
    detect,
    generate_anchors,
    train_detector,
)
from .classification import (
    ClassifierConfig,
    ClassifierModel,
    LabeledCrop,
    augment_offline,
    augment_online,
    build_classifier_model,
    classify,
    make_crop,
    train_classifier,
)
from .pipeline import (
    PipelineConfig,
    PipelineModels,
    SlideResult,
    SplitSpec,
    emit_results,
    make_split,
    read_results,
    run_slide,
)
from .data_io import (
    Annotation,
    DatasetManifest,
    SlideRecord,
    SynthSpec,
    load_checkpoint,
    load_manifest,
    save_checkpoint,
    save_manifest,
    synth_dataset,
)

__version__ = "0.1.0"
