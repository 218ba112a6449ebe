"""Domain types, COCO-style ingestion and box geometry.

Boxes are stored as corner coordinates ``(x_min, y_min, x_max, y_max)`` on a
continuous plane; area carries no "+1" pixel correction. Files on disk use the
COCO ``[x, y, width, height]`` encoding.
"""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

UNKNOWN = -1


class OWODError(ValueError):
    """Base class for every input problem this package reports."""


class ParseError(OWODError):
    def __init__(self, path, message: str, byte_offset: int | None = None):
        self.path = str(path)
        self.byte_offset = byte_offset
        where = f" at byte {byte_offset}" if byte_offset is not None else ""
        super().__init__(f"{self.path}: {message}{where}")


class IntegrityError(OWODError):
    """A reference points at an image or category that is not declared."""


class ValidationError(OWODError):
    """A value is outside its allowed range or breaks a type invariant."""


@dataclass(frozen=True, slots=True)
class BBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max >= self.x_min and self.y_max >= self.y_min):
            raise ValidationError(f"inverted box {self.as_tuple()}")

    @classmethod
    def from_xywh(cls, xywh: Sequence[float]) -> "BBox":
        if len(xywh) != 4:
            raise ValidationError(f"bbox needs 4 numbers, got {list(xywh)}")
        x, y, w, h = (float(v) for v in xywh)
        if w < 0 or h < 0:
            raise ValidationError(f"negative width/height in bbox {list(xywh)}")
        return cls(x, y, x + w, y + h)

    def to_xywh(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max - self.x_min, self.y_max - self.y_min]

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x_min + dx, self.y_min + dy, self.x_max + dx, self.y_max + dy)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when the union has no area."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)


@dataclass(frozen=True, slots=True)
class Category:
    id: int
    name: str
    supercategory: str = ""


@dataclass(frozen=True, slots=True)
class ImageInfo:
    id: int
    file_name: str
    width: int = 0
    height: int = 0


@dataclass(frozen=True, slots=True)
class GroundTruthBox:
    id: int
    image_id: int
    bbox: BBox
    class_id: int
    is_crowd: bool = False


@dataclass(frozen=True, slots=True)
class Prediction:
    image_id: int
    bbox: BBox
    label: int
    score: float
    score_vector: Mapping[int, float] | None = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"score {self.score} outside [0, 1]")
        if self.score_vector is not None:
            for c, s in self.score_vector.items():
                if not 0.0 <= s <= 1.0:
                    raise ValidationError(f"score for class {c} is {s}, outside [0, 1]")
            if self.label != UNKNOWN and self.score_vector:
                top = max(self.score_vector.values())
                if self.score_vector.get(self.label) != top:
                    raise ValidationError(
                        f"label {self.label} is not the argmax of its score vector"
                    )

    @property
    def is_unknown(self) -> bool:
        return self.label == UNKNOWN


@dataclass(frozen=True)
class Dataset:
    images: tuple[ImageInfo, ...]
    ground_truths: tuple[GroundTruthBox, ...]
    classes: tuple[Category, ...]

    def __post_init__(self):
        image_ids = {im.id for im in self.images}
        class_ids = {c.id for c in self.classes}
        if len(class_ids) != len(self.classes):
            raise IntegrityError("duplicate category ids")
        if UNKNOWN in class_ids:
            raise IntegrityError(f"category id {UNKNOWN} is reserved for unknown")
        for gt in self.ground_truths:
            if gt.image_id not in image_ids:
                raise IntegrityError(f"annotation {gt.id} refers to missing image {gt.image_id}")
            if gt.class_id not in class_ids:
                raise IntegrityError(
                    f"annotation {gt.id} refers to undeclared category {gt.class_id}"
                )

    @property
    def class_ids(self) -> list[int]:
        return [c.id for c in self.classes]

    def category(self, class_id: int) -> Category:
        for c in self.classes:
            if c.id == class_id:
                return c
        raise KeyError(class_id)

    def gts_by_image(self) -> dict[int, list[GroundTruthBox]]:
        out: dict[int, list[GroundTruthBox]] = defaultdict(list)
        for gt in self.ground_truths:
            out[gt.image_id].append(gt)
        return out

    def subset(
        self,
        image_ids: Iterable[int],
        keep_class_ids: Iterable[int] | None = None,
        classes: Sequence[Category] | None = None,
    ) -> "Dataset":
        """Restrict to some images, optionally dropping annotations of other classes."""
        wanted = set(image_ids)
        keep = None if keep_class_ids is None else set(keep_class_ids)
        images = tuple(im for im in self.images if im.id in wanted)
        gts = tuple(
            gt
            for gt in self.ground_truths
            if gt.image_id in wanted and (keep is None or gt.class_id in keep)
        )
        return Dataset(images, gts, tuple(classes) if classes is not None else self.classes)


@dataclass(frozen=True)
class TaskSpec:
    """Ordered partition of class ids into incremental tasks (1-based)."""

    tasks: tuple[frozenset[int], ...]
    all_classes: frozenset[int]
    names: tuple[str, ...] = field(default=())

    @classmethod
    def from_lists(cls, tasks: Sequence[Iterable[int]], all_classes: Iterable[int] | None = None,
                   names: Sequence[str] | None = None) -> "TaskSpec":
        ts = tuple(frozenset(t) for t in tasks)
        everything = frozenset(all_classes) if all_classes is not None else frozenset().union(*ts)
        return cls(ts, everything, tuple(names or (f"task{i + 1}" for i in range(len(ts)))))

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    def _check_index(self, t: int) -> None:
        if not 0 <= t <= self.num_tasks:
            raise IndexError(f"task index {t} out of range 1..{self.num_tasks}")

    def known(self, t: int) -> frozenset[int]:
        self._check_index(t)
        return frozenset().union(*self.tasks[:t])

    def unknown(self, t: int) -> frozenset[int]:
        return self.all_classes - self.known(t)

    def current(self, t: int) -> frozenset[int]:
        self._check_index(t)
        if t == 0:
            return frozenset()
        return self.tasks[t - 1]

    def problems(self) -> list[dict[str, Any]]:
        """Every way this spec fails to be a growing partition; empty when valid."""
        found: list[dict[str, Any]] = []
        seen: dict[int, int] = {}
        for i, task in enumerate(self.tasks, start=1):
            if not task:
                found.append({"task": i, "reason": "task introduces no classes"})
            for c in sorted(task):
                if c in seen:
                    found.append({"task": i, "class_id": c,
                                  "reason": f"class also in task {seen[c]}"})
                else:
                    seen[c] = i
                if c not in self.all_classes:
                    found.append({"task": i, "class_id": c, "reason": "class not in dataset"})
        for c in sorted(self.all_classes - set(seen)):
            found.append({"class_id": c, "reason": "class assigned to no task"})
        return found

    def validate(self) -> None:
        issues = self.problems()
        if issues:
            raise ValidationError(f"task config is not a partition of the classes: {issues}")


# --------------------------------------------------------------------------- IO


def read_json(path) -> Any:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ParseError(path, "not valid UTF-8", exc.start) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise ParseError(path, f"malformed JSON ({exc.msg})", offset) from exc


def dataset_from_coco(coco: Mapping[str, Any]) -> Dataset:
    for key in ("images", "annotations", "categories"):
        if not isinstance(coco.get(key), list):
            raise ValidationError(f'COCO file lacks a "{key}" array')
    classes = tuple(
        Category(int(c["id"]), str(c.get("name", c["id"])), str(c.get("supercategory", "")))
        for c in coco["categories"]
    )
    images = tuple(
        ImageInfo(int(im["id"]), str(im.get("file_name", "")),
                  int(im.get("width", 0)), int(im.get("height", 0)))
        for im in coco["images"]
    )
    gts = []
    for ann in coco["annotations"]:
        try:
            bbox = BBox.from_xywh(ann["bbox"])
        except ValidationError as exc:
            raise ValidationError(f"annotation {ann.get('id')}: {exc}") from None
        gts.append(GroundTruthBox(int(ann["id"]), int(ann["image_id"]), bbox,
                                  int(ann["category_id"]), bool(ann.get("iscrowd", 0))))
    return Dataset(images, tuple(gts), classes)


def load_annotations(path) -> Dataset:
    return dataset_from_coco(read_json(path))


def dataset_to_coco(ds: Dataset) -> dict[str, Any]:
    return {
        "images": [
            {"id": im.id, "file_name": im.file_name, "width": im.width, "height": im.height}
            for im in ds.images
        ],
        "annotations": [
            {"id": gt.id, "image_id": gt.image_id, "category_id": gt.class_id,
             "bbox": gt.bbox.to_xywh(), "area": gt.bbox.area, "iscrowd": int(gt.is_crowd)}
            for gt in ds.ground_truths
        ],
        "categories": [
            {"id": c.id, "name": c.name, "supercategory": c.supercategory} for c in ds.classes
        ],
    }


def save_annotations(ds: Dataset, path) -> None:
    Path(path).write_text(json.dumps(dataset_to_coco(ds)), encoding="utf-8")


def prediction_from_dict(d: Mapping[str, Any], class_ids: set[int], where: str = "") -> Prediction:
    cat = int(d["category_id"])
    if cat != UNKNOWN and cat not in class_ids:
        raise ValidationError(f"{where}category_id {cat} is neither -1 nor a declared class")
    score = float(d["score"])
    if not (0.0 <= score <= 1.0) or math.isnan(score):
        raise ValidationError(f"{where}score {score} outside [0, 1]")
    vector = None
    if d.get("scores") is not None:
        vector = {}
        for k, v in d["scores"].items():
            c = int(k)
            if c not in class_ids:
                raise ValidationError(f"{where}scores mention undeclared class {c}")
            vector[c] = float(v)
    try:
        return Prediction(int(d["image_id"]), BBox.from_xywh(d["bbox"]), cat, score, vector)
    except ValidationError as exc:
        raise ValidationError(f"{where}{exc}") from None


def load_predictions(path, classes: Iterable[Category] | Iterable[int]) -> list[Prediction]:
    """Read a detection-results file; ``category_id == -1`` marks an unknown detection."""
    data = read_json(path)
    if not isinstance(data, list):
        raise ValidationError(f"{path}: predictions file must hold a JSON array")
    ids = {c.id if isinstance(c, Category) else int(c) for c in classes}
    preds = []
    for i, d in enumerate(data):
        try:
            preds.append(prediction_from_dict(d, ids, where=f"prediction {i}: "))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"prediction {i}: missing or malformed field {exc}") from None
    return preds


def prediction_to_dict(p: Prediction) -> dict[str, Any]:
    d: dict[str, Any] = {"image_id": p.image_id, "category_id": p.label,
                         "bbox": p.bbox.to_xywh(), "score": p.score}
    if p.score_vector is not None:
        d["scores"] = {str(c): s for c, s in sorted(p.score_vector.items())}
    return d


def save_predictions(preds: Iterable[Prediction], path) -> None:
    Path(path).write_text(json.dumps([prediction_to_dict(p) for p in preds]), encoding="utf-8")
