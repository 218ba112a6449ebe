"""Proposal advisor: confirm potential unknown RPN proposals with auxiliary
proposals, relabel their anchors, and score the guided RPN classification loss.

Auxiliary proposals are read from files (e.g. Selective Search output); this
module never computes them.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Any, Iterable, Mapping, Sequence

from .core import BBox, ValidationError, iou, read_json

log = logging.getLogger(__name__)

POSITIVE = "positive"
NEGATIVE = "negative"
UNKNOWN_POSITIVE = "unknown_positive"
IGNORE = "ignore"
ANCHOR_LABELS = (POSITIVE, NEGATIVE, UNKNOWN_POSITIVE, IGNORE)

EPS = 1e-7


@dataclass(frozen=True)
class Proposal:
    bbox: BBox
    objectness: float
    source: str = "rpn"  # "rpn" or "auxiliary"
    matched_known: bool = False
    anchor_id: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.objectness <= 1.0:
            raise ValidationError(f"objectness {self.objectness} outside [0, 1]")
        if self.source not in ("rpn", "auxiliary"):
            raise ValidationError(f"unknown proposal source {self.source!r}")


@dataclass(frozen=True)
class Anchor:
    bbox: BBox
    label: str
    score: float | None = None

    def __post_init__(self):
        if self.label not in ANCHOR_LABELS:
            raise ValidationError(f"anchor label must be one of {ANCHOR_LABELS}, got {self.label!r}")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValidationError(f"anchor score {self.score} outside [0, 1]")


AnchorSet = tuple[Anchor, ...]


def select_potential_unknowns(
    proposals: Sequence[Proposal], known_matched: Iterable[int] = (), k: int = 50
) -> list[Proposal]:
    """The ``k`` highest-objectness proposals not assigned to a known object."""
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    skip = set(known_matched) | {i for i, p in enumerate(proposals) if p.matched_known}
    pool = [p for i, p in enumerate(proposals) if i not in skip]
    return sorted(pool, key=lambda p: -p.objectness)[:k]


def confirm(
    potentials: Sequence[Proposal], auxiliary: Sequence[Proposal], theta: float = 0.7
) -> list[tuple[Proposal, float]]:
    """Keep a proposal's objectness only if some auxiliary box overlaps it with IOU > theta."""
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [0, 1], got {theta}")
    out = []
    for p in potentials:
        best = max((iou(p.bbox, a.bbox) for a in auxiliary), default=0.0)
        out.append((p, p.objectness if best > theta else 0.0))
    return out


def select_confirmed(confirmed: Sequence[tuple[Proposal, float]], k: int | None = None) -> list[tuple[Proposal, float]]:
    """Nonzero confirmed proposals, best first; top ``k`` of them when given."""
    kept = sorted((c for c in confirmed if c[1] > 0), key=lambda c: -c[1])
    return kept if k is None else kept[:k]


def reassign_anchors(
    anchors: Sequence[Anchor], confirmed: Sequence[Proposal], match_iou: float = 0.7
) -> AnchorSet:
    """Move the negative anchors behind confirmed proposals to ``unknown_positive``.

    A proposal carrying ``anchor_id`` names its anchor directly; otherwise any
    negative anchor with IOU > ``match_iou`` against it is taken.
    """
    direct = {p.anchor_id for p in confirmed if p.anchor_id is not None}
    boxes = [p.bbox for p in confirmed if p.anchor_id is None]
    out = []
    for idx, a in enumerate(anchors):
        if a.label == NEGATIVE and (
            idx in direct or any(iou(a.bbox, b) > match_iou for b in boxes)
        ):
            a = replace(a, label=UNKNOWN_POSITIVE)
        out.append(a)
    return tuple(out)


@dataclass(frozen=True)
class LossReport:
    value: float
    terms: int
    clamped: int


def rpn_cls_loss_report(anchors: Sequence[Anchor], eps: float = EPS) -> LossReport:
    total, terms, clamped = 0.0, 0, 0
    for i, a in enumerate(anchors):
        if a.label == IGNORE:
            continue
        if a.score is None:
            raise ValidationError(f"anchor {i} ({a.label}) has no score")
        f = a.score
        if f < eps or f > 1.0 - eps:
            f = min(max(f, eps), 1.0 - eps)
            clamped += 1
        if a.label in (POSITIVE, UNKNOWN_POSITIVE):
            total -= math.log(f)
        else:
            total -= math.log1p(-f)
        terms += 1
    if clamped:
        log.warning("clamped %d anchor scores into [%g, 1 - %g]", clamped, eps, eps)
    return LossReport(total, terms, clamped)


def rpn_cls_loss(anchors: Sequence[Anchor]) -> float:
    """Summed BCE: target 1 on positive and unknown-positive anchors, 0 on negatives."""
    return rpn_cls_loss_report(anchors).value


# ---------------------------------------------------------------------- IO


def _group(data: Any, path) -> dict[str | None, list[Mapping[str, Any]]]:
    if isinstance(data, list):
        return {None: data}
    if isinstance(data, Mapping) and all(isinstance(v, list) for v in data.values()):
        return {str(k): v for k, v in data.items()}
    raise ValidationError(f"{path}: expected an array, or an object of arrays keyed by image id")


def _bbox(d: Mapping[str, Any], where: str) -> BBox:
    try:
        return BBox.from_xywh(d["bbox"])
    except (KeyError, TypeError):
        raise ValidationError(f"{where}: missing or malformed bbox") from None


def load_rpn_proposals(path) -> dict[str | None, list[Proposal]]:
    """``{image key: proposals}``; a bare array loads under the key None."""
    out = {}
    for key, items in _group(read_json(path), path).items():
        props = []
        for i, d in enumerate(items):
            where = f"{path}[{key}][{i}]" if key is not None else f"{path}[{i}]"
            if "objectness" not in d:
                raise ValidationError(f"{where}: missing objectness")
            aid = d.get("anchor_id")
            props.append(Proposal(_bbox(d, where), float(d["objectness"]), "rpn",
                                  bool(d.get("matched_known", False)),
                                  None if aid is None else int(aid)))
        out[key] = props
    return out


def load_auxiliary_proposals(path, top_k: int | None = 50) -> dict[str | None, list[Proposal]]:
    """Auxiliary boxes per image, capped at ``top_k`` by score (file order when unscored)."""
    out = {}
    for key, items in _group(read_json(path), path).items():
        rows = []
        for i, d in enumerate(items):
            where = f"{path}[{key}][{i}]" if key is not None else f"{path}[{i}]"
            s = d.get("score")
            rows.append((_bbox(d, where), None if s is None else float(s)))
        if rows and all(s is not None for _, s in rows):
            rows.sort(key=lambda r: -r[1])
        if top_k is not None:
            rows = rows[:top_k]
        # auxiliary boxes carry no objectness; their own score is kept when it is a probability
        out[key] = [Proposal(b, s if s is not None and 0 <= s <= 1 else 1.0, "auxiliary")
                    for b, s in rows]
    return out


def load_anchors(path) -> dict[str | None, AnchorSet]:
    out = {}
    for key, items in _group(read_json(path), path).items():
        anchors = []
        for i, d in enumerate(items):
            where = f"{path}[{key}][{i}]" if key is not None else f"{path}[{i}]"
            s = d.get("score")
            anchors.append(Anchor(_bbox(d, where), str(d.get("label", "")),
                                  None if s is None else float(s)))
        out[key] = tuple(anchors)
    return out


def proposal_to_dict(p: Proposal, confirmed_score: float | None = None) -> dict[str, Any]:
    d: dict[str, Any] = {"bbox": p.bbox.to_xywh(), "objectness": p.objectness}
    if p.anchor_id is not None:
        d["anchor_id"] = p.anchor_id
    if confirmed_score is not None:
        d["confirmed_score"] = confirmed_score
    return d


def anchor_to_dict(a: Anchor) -> dict[str, Any]:
    d: dict[str, Any] = {"bbox": a.bbox.to_xywh(), "label": a.label}
    if a.score is not None:
        d["score"] = a.score
    return d


def ungroup(groups: Mapping[str | None, Any]) -> Any:
    """Inverse of the file grouping: a bare list when the file held one."""
    if set(groups) == {None}:
        return groups[None]
    return dict(groups)


def read_confirmed(path) -> dict[str | None, list[Proposal]]:
    """Read a confirm output file; only entries with a nonzero confirmed score are returned."""
    out = {}
    for key, items in _group(read_json(path), path).items():
        props = []
        for i, d in enumerate(items):
            if float(d.get("confirmed_score", d.get("objectness", 0.0))) <= 0:
                continue
            aid = d.get("anchor_id")
            props.append(Proposal(_bbox(d, f"{path}[{i}]"), float(d.get("objectness", 0.0)),
                                  "rpn", False, None if aid is None else int(aid)))
        out[key] = props
    return out
