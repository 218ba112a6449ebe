"""Class-specific expelling classifier.

``calibrate`` measures, per known class c, the mean class-c score m_c that
training predictions give when they overlap a class-c ground truth with IOU
above ``phi``. ``expel`` then zeroes every test score that does not beat
``alpha * m_c``; a prediction left with no known class becomes UNKNOWN with
score 1.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from .core import UNKNOWN, GroundTruthBox, Prediction, ValidationError, iou, read_json

log = logging.getLogger(__name__)

PROFILE_VERSION = 1


@dataclass(frozen=True)
class ClassStats:
    m: float | None  # mean confident training score; None when count == 0
    count: int


@dataclass(frozen=True)
class ExpellingProfile:
    classes: Mapping[int, ClassStats]
    alpha: float = 0.5
    phi: float = 0.9
    config_digest: str = ""

    def __post_init__(self):
        if self.alpha < 0:
            raise ValidationError(f"alpha must be >= 0, got {self.alpha}")
        if not 0.0 <= self.phi <= 1.0:
            raise ValidationError(f"phi must lie in [0, 1], got {self.phi}")

    def with_alpha(self, alpha: float) -> "ExpellingProfile":
        return ExpellingProfile(self.classes, alpha, self.phi, self.config_digest)

    @property
    def never_expels(self) -> list[int]:
        return sorted(c for c, s in self.classes.items() if s.count == 0)

    def threshold(self, class_id: int) -> float:
        """The amount a class-``class_id`` score has to exceed to survive."""
        stats = self.classes.get(class_id)
        if stats is None or stats.count == 0:
            return 0.0
        return self.alpha * stats.m

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": PROFILE_VERSION,
            "config_digest": self.config_digest,
            "phi": self.phi,
            "alpha": self.alpha,
            "classes": {str(c): {"m": s.m, "M": s.count} for c, s in sorted(self.classes.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExpellingProfile":
        try:
            classes = {int(c): ClassStats(None if v.get("m") is None else float(v["m"]), int(v["M"]))
                       for c, v in d["classes"].items()}
            return cls(classes, float(d["alpha"]), float(d["phi"]), str(d.get("config_digest", "")))
        except (KeyError, TypeError, AttributeError, ValueError) as exc:
            raise ValidationError(f"malformed expelling profile ({exc})") from None


def load_profile(path) -> ExpellingProfile:
    return ExpellingProfile.from_dict(read_json(path))


def confident_scores(
    predictions: Sequence[Prediction],
    ground_truths: Sequence[GroundTruthBox],
    phi: float,
    classes: Iterable[int] | None = None,
) -> dict[int, list[float]]:
    """Class-c scores of every (prediction, class-c ground truth) pair with IOU > phi.

    A prediction overlapping two class-c boxes contributes twice, once per pair.
    """
    wanted = None if classes is None else set(classes)
    gts_by_image: dict[int, list[GroundTruthBox]] = defaultdict(list)
    for g in ground_truths:
        if not g.is_crowd and (wanted is None or g.class_id in wanted):
            gts_by_image[g.image_id].append(g)
    out: dict[int, list[float]] = defaultdict(list)
    for j, p in enumerate(predictions):
        gts = gts_by_image.get(p.image_id)
        if not gts:
            continue
        if p.score_vector is None:
            raise ValidationError(f"training prediction {j} has no per-class scores")
        for g in gts:
            if iou(p.bbox, g.bbox) > phi:
                if g.class_id not in p.score_vector:
                    raise ValidationError(
                        f"training prediction {j} has no score for class {g.class_id}"
                    )
                out[g.class_id].append(p.score_vector[g.class_id])
    return out


def calibrate(
    train_predictions: Sequence[Prediction],
    train_ground_truths: Sequence[GroundTruthBox],
    phi: float = 0.9,
    alpha: float = 0.5,
    classes: Iterable[int] | None = None,
    config_digest: str = "",
) -> ExpellingProfile:
    if classes is None:
        classes = {g.class_id for g in train_ground_truths}
        for p in train_predictions:
            classes.update(p.score_vector or ())
    classes = sorted(set(classes))
    pairs = confident_scores(train_predictions, train_ground_truths, phi, classes)
    stats = {}
    for c in classes:
        scores = pairs.get(c, [])
        stats[c] = ClassStats(sum(scores) / len(scores) if scores else None, len(scores))
    profile = ExpellingProfile(stats, alpha, phi, config_digest)
    if profile.never_expels:
        log.warning("no confident training pairs for classes %s; they never expel",
                    profile.never_expels)
    return profile


@dataclass(frozen=True)
class CalibratedPrediction:
    original: Prediction
    surviving: Mapping[int, float]
    label: int
    score: float
    expelled: tuple[int, ...] = field(default=())

    def to_prediction(self) -> Prediction:
        p = self.original
        return Prediction(p.image_id, p.bbox, self.label, self.score, dict(self.surviving))


def expel(prediction: Prediction, profile: ExpellingProfile) -> CalibratedPrediction:
    vec = prediction.score_vector
    if prediction.is_unknown:
        return CalibratedPrediction(prediction, dict(vec or {}), UNKNOWN, prediction.score)
    if vec is None:
        raise ValidationError("prediction has no per-class scores to calibrate")
    missing = [c for c in profile.classes if c not in vec]
    if missing:
        raise ValidationError(f"score vector lacks profiled classes {sorted(missing)}")
    surviving = {}
    expelled = []
    for c, s in vec.items():
        if s - profile.threshold(c) > 0:
            surviving[c] = s
        else:
            surviving[c] = 0.0
            if s > 0:
                expelled.append(c)
    alive = [c for c, s in surviving.items() if s > 0]
    if not alive:
        return CalibratedPrediction(prediction, surviving, UNKNOWN, 1.0, tuple(sorted(expelled)))
    top = max(surviving[c] for c in alive)
    tied = sorted(c for c in alive if surviving[c] == top)
    label = prediction.label if prediction.label in tied else tied[0]
    return CalibratedPrediction(prediction, surviving, label, top, tuple(sorted(expelled)))


def apply_batch(predictions: Sequence[Prediction], profile: ExpellingProfile) -> list[CalibratedPrediction]:
    return [expel(p, profile) for p in predictions]
