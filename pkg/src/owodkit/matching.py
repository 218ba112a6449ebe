"""Greedy prediction-to-ground-truth matching and the raw open-world counts.

Protocol shared by every matcher here:

* predictions are visited by descending score; equal scores keep input order;
* a prediction takes the not-yet-matched ground truth with the highest IOU,
  earlier ground truths winning IOU ties, provided that IOU is strictly
  greater than ``iou_threshold``;
* crowd ground truths are never matched.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

from .core import GroundTruthBox, Prediction, TaskSpec, ValidationError, iou


@dataclass(frozen=True)
class MatchConfig:
    iou_threshold: float = 0.5
    score_threshold: float = 0.0
    # count A-OSE per misclassifying prediction instead of per unknown object
    fp_o_per_prediction: bool = False

    def __post_init__(self):
        for name in ("iou_threshold", "score_threshold"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name}={v} outside [0, 1]")


@dataclass
class MatchTable:
    """Result of matching known-class predictions against known-class ground truths.

    ``per_class[c]`` lists ``(prediction_index, score, is_tp)`` in the order the
    greedy pass visited them. Predictions suppressed by a crowd region appear in
    ``ignored`` and in no class list.
    """

    per_class: dict[int, list[tuple[int, float, bool]]]
    num_gt: dict[int, int]
    assignment: dict[int, dict[int, int]]  # image_id -> {gt id: prediction index}
    unmatched_gt: list[int]
    ignored: list[int] = field(default_factory=list)

    @property
    def tp_indices(self) -> set[int]:
        return {i for rows in self.per_class.values() for i, _, tp in rows if tp}

    @property
    def tp_k(self) -> int:
        return sum(tp for rows in self.per_class.values() for _, _, tp in rows)

    @property
    def fp_k(self) -> int:
        return sum(not tp for rows in self.per_class.values() for _, _, tp in rows)


@dataclass(frozen=True)
class UnknownCounts:
    tp_u: int
    fn_u: int
    fn_u_star: int
    fp_o: int
    total_unknown_gt: int

    def __post_init__(self):
        if self.tp_u + self.fn_u != self.total_unknown_gt:
            raise ValueError("tp_u + fn_u must equal total_unknown_gt")
        if not 0 <= self.fn_u_star <= self.fn_u:
            raise ValueError("fn_u_star must lie in [0, fn_u]")


def score_order(preds: Sequence[Prediction], indices: Sequence[int]) -> list[int]:
    # sorted() is stable, so equal scores keep their input order
    return sorted(indices, key=lambda i: -preds[i].score)


def greedy_assign(
    preds: Sequence[Prediction],
    pred_indices: Sequence[int],
    gts: Sequence[GroundTruthBox],
    iou_threshold: float,
) -> dict[int, int]:
    """Match predictions (already score-ordered) to ``gts`` within one image.

    Returns ``{prediction index: position in gts}`` for every matched prediction.
    """
    taken = [False] * len(gts)
    out: dict[int, int] = {}
    for i in pred_indices:
        best, best_iou = -1, iou_threshold
        for k, gt in enumerate(gts):
            if taken[k]:
                continue
            v = iou(preds[i].bbox, gt.bbox)
            if v > best_iou:
                best, best_iou = k, v
        if best >= 0:
            taken[best] = True
            out[i] = best
    return out


def _by_image(items, key=lambda x: x.image_id):
    groups = defaultdict(list)
    for x in items:
        groups[key(x)].append(x)
    return groups


def _eligible(preds: Sequence[Prediction], cfg: MatchConfig) -> list[int]:
    return [i for i, p in enumerate(preds) if p.score >= cfg.score_threshold]


def match_known(
    predictions: Sequence[Prediction],
    ground_truths: Sequence[GroundTruthBox],
    task: TaskSpec,
    task_index: int,
    cfg: MatchConfig = MatchConfig(),
) -> MatchTable:
    if task_index < 1:
        raise IndexError(f"task index {task_index} out of range 1..{task.num_tasks}")
    known = task.known(task_index)
    order = score_order(predictions, _eligible(predictions, cfg))
    gts_by_key: dict[tuple[int, int], list[GroundTruthBox]] = defaultdict(list)
    crowd_by_key: dict[tuple[int, int], list[GroundTruthBox]] = defaultdict(list)
    num_gt = {c: 0 for c in known}
    for gt in ground_truths:
        if gt.class_id not in known:
            continue
        if gt.is_crowd:
            crowd_by_key[gt.image_id, gt.class_id].append(gt)
        else:
            gts_by_key[gt.image_id, gt.class_id].append(gt)
            num_gt[gt.class_id] += 1

    ordered_by_key: dict[tuple[int, int], list[int]] = defaultdict(list)
    for i in order:
        p = predictions[i]
        if p.label in known:
            ordered_by_key[p.image_id, p.label].append(i)

    matched: dict[int, int] = {}
    assignment: dict[int, dict[int, int]] = defaultdict(dict)
    ignored: set[int] = set()
    for key, idxs in ordered_by_key.items():
        gts = gts_by_key.get(key, [])
        got = greedy_assign(predictions, idxs, gts, cfg.iou_threshold)
        for i, k in got.items():
            matched[i] = gts[k].id
            assignment[key[0]][gts[k].id] = i
        crowds = crowd_by_key.get(key, [])
        for i in idxs:
            if i in got or not crowds:
                continue
            if max(iou(predictions[i].bbox, g.bbox) for g in crowds) > cfg.iou_threshold:
                ignored.add(i)

    per_class: dict[int, list[tuple[int, float, bool]]] = {c: [] for c in known}
    for i in order:
        p = predictions[i]
        if p.label in known and i not in ignored:
            per_class[p.label].append((i, p.score, i in matched))

    matched_gt = set(matched.values())
    unmatched = [gt.id for gts in gts_by_key.values() for gt in gts if gt.id not in matched_gt]
    return MatchTable(per_class, num_gt, dict(assignment), sorted(unmatched), sorted(ignored))


def unknown_ground_truths(
    ground_truths: Sequence[GroundTruthBox], task: TaskSpec, task_index: int
) -> list[GroundTruthBox]:
    unknown = task.unknown(task_index)
    return [gt for gt in ground_truths if gt.class_id in unknown and not gt.is_crowd]


def match_unknown(
    predictions: Sequence[Prediction],
    ground_truths: Sequence[GroundTruthBox],
    task: TaskSpec,
    task_index: int,
    cfg: MatchConfig = MatchConfig(),
    table: MatchTable | None = None,
    known_pool: set[int] | None = None,
) -> UnknownCounts:
    """Count TP_u, FN_u, FN_u* and FP_o for the task's unknown ground truths.

    ``known_pool`` restricts which known-labelled predictions may count as
    misclassifying an unknown object; by default every eligible known-labelled
    prediction that is not a known-class true positive.
    """
    if table is None:
        table = match_known(predictions, ground_truths, task, task_index, cfg)
    known = task.known(task_index)
    eligible = _eligible(predictions, cfg)
    unk_gts = unknown_ground_truths(ground_truths, task, task_index)
    tps = table.tp_indices
    confusers = [i for i in eligible if predictions[i].label in known and i not in tps]
    if known_pool is not None:
        confusers = [i for i in confusers if i in known_pool]

    gt_groups = _by_image(unk_gts)
    unk_preds = _by_image(
        (i for i in score_order(predictions, eligible) if predictions[i].is_unknown),
        key=lambda i: predictions[i].image_id,
    )
    conf_groups = _by_image(confusers, key=lambda i: predictions[i].image_id)

    tp_u = fn_u_star = fp_o = 0
    confusing_preds: set[int] = set()
    for image_id, gts in gt_groups.items():
        got = greedy_assign(predictions, unk_preds.get(image_id, []), gts, cfg.iou_threshold)
        recalled = set(got.values())
        tp_u += len(recalled)
        for k, gt in enumerate(gts):
            hits = [i for i in conf_groups.get(image_id, [])
                    if iou(predictions[i].bbox, gt.bbox) > cfg.iou_threshold]
            if hits:
                fp_o += 1
                confusing_preds.update(hits)
                if k not in recalled:
                    fn_u_star += 1
    if cfg.fp_o_per_prediction:
        fp_o = len(confusing_preds)
    total = len(unk_gts)
    return UnknownCounts(tp_u, total - tp_u, fn_u_star, fp_o, total)
