"""Open-world object detection benchmark construction, metrics and post-processing."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    UNKNOWN,
    BBox,
    Category,
    Dataset,
    GroundTruthBox,
    ImageInfo,
    Prediction,
    TaskSpec,
    iou,
    load_annotations,
    load_predictions,
)
from .matching import MatchConfig, match_known, match_unknown  # noqa: E402
from .metrics import EvalReport, evaluate  # noqa: E402

__all__ = [
    "UNKNOWN", "BBox", "Category", "Dataset", "GroundTruthBox", "ImageInfo", "Prediction",
    "TaskSpec", "iou", "load_annotations", "load_predictions", "MatchConfig", "match_known",
    "match_unknown", "EvalReport", "evaluate",
]
