"""Open-world detection metrics: AP/mAP splits, recall, UR, WI, A-OSE, UDR, UDP."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from .core import Dataset, Prediction, TaskSpec
from .matching import MatchConfig, MatchTable, UnknownCounts, match_known, match_unknown

log = logging.getLogger(__name__)

CSV_COLUMNS = ["task", "WI", "A-OSE", "mAP_prev", "mAP_cur", "mAP_both", "UR", "UDR", "UDP"]


def average_precision(
    rows: Sequence[tuple[float, bool]], num_gt: int, method: str = "continuous"
) -> float | None:
    """AP of one class from ``(score, is_tp)`` rows.

    ``method="continuous"`` integrates the monotone precision envelope over
    every recall step; ``"voc11"`` averages it at recall 0, 0.1, ..., 1.
    Returns None for a class without ground truth.
    """
    if num_gt <= 0:
        return None
    if not rows:
        return 0.0
    order = sorted(range(len(rows)), key=lambda i: -rows[i][0])
    hits = np.array([rows[i][1] for i in order], dtype=float)
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    if method == "voc11":
        ap = 0.0
        for r in np.linspace(0.0, 1.0, 11):
            above = precision[recall >= r]
            ap += (above.max() if above.size else 0.0) / 11.0
        return float(ap)
    if method != "continuous":
        raise ValueError(f"unknown AP method {method!r}")
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def mean_ap(aps: dict[int, float | None], classes) -> float | None:
    vals = [aps[c] for c in classes if aps.get(c) is not None]
    return float(np.mean(vals)) if vals else None


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def udr(counts: UnknownCounts) -> float | None:
    return _ratio(counts.tp_u + counts.fn_u_star, counts.tp_u + counts.fn_u)


def udp(counts: UnknownCounts) -> float | None:
    return _ratio(counts.tp_u, counts.tp_u + counts.fn_u_star)


def unknown_recall(counts: UnknownCounts) -> float | None:
    return _ratio(counts.tp_u, counts.total_unknown_gt)


def wi_from_counts(fp_o: int, tp_k: int, fp_k: int) -> float | None:
    return _ratio(fp_o, tp_k + fp_k)


@dataclass(frozen=True)
class WildernessImpact:
    value: float | None
    tp_k: int
    fp_k: int
    fp_o: int
    recall_level: float | None
    achieved_recall: float | None
    reached: bool


def wi_operating_point(table: MatchTable, recall_level: float | None) -> tuple[set[int], float | None, bool]:
    """Known-class predictions kept at the first score where pooled known recall hits ``recall_level``.

    Every prediction scoring at least that threshold is kept. With
    ``recall_level=None`` (or an unreachable level) all predictions are kept.
    """
    rows = sorted(
        ((s, i, tp) for r in table.per_class.values() for i, s, tp in r),
        key=lambda x: -x[0],
    )
    total_gt = sum(table.num_gt.values())
    all_idx = {i for _, i, _ in rows}
    final_recall = sum(tp for *_, tp in rows) / total_gt if total_gt else None
    if recall_level is None:
        return all_idx, final_recall, True
    if total_gt == 0:
        return all_idx, None, False
    hits = 0
    for s, _, tp in rows:
        hits += tp
        if hits / total_gt >= recall_level:
            return {i for sc, i, _ in rows if sc >= s}, hits / total_gt, True
    return all_idx, final_recall, False


def wilderness_impact(
    table: MatchTable,
    predictions: Sequence[Prediction],
    ground_truths,
    task: TaskSpec,
    task_index: int,
    cfg: MatchConfig = MatchConfig(),
    recall_level: float | None = 0.8,
) -> WildernessImpact:
    """WI = FP_o / (TP_k + FP_k) over the predictions kept at the recall operating point."""
    kept, achieved, reached = wi_operating_point(table, recall_level)
    if not reached and recall_level is not None:
        log.warning("known recall %.3f never reached; WI uses every prediction", recall_level)
    tp_k = sum(tp for r in table.per_class.values() for i, _, tp in r if i in kept)
    fp_k = sum(not tp for r in table.per_class.values() for i, _, tp in r if i in kept)
    counts = match_unknown(predictions, ground_truths, task, task_index, cfg,
                           table=table, known_pool=kept)
    den = tp_k + fp_k
    if den == 0:
        log.warning("WI undefined: no known-class predictions")
    value = wi_from_counts(counts.fp_o, tp_k, fp_k)
    return WildernessImpact(value, tp_k, fp_k, counts.fp_o, recall_level, achieved, reached)


@dataclass
class EvalReport:
    task_index: int
    ap: dict[int, float | None]
    recall: dict[int, float | None]
    map_previous: float | None
    map_current: float | None
    map_both: float | None
    ur: float | None
    wi: float | None
    a_ose: int
    udr: float | None
    udp: float | None
    counts: UnknownCounts
    wi_detail: WildernessImpact
    tp_k: int
    fp_k: int
    config: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["ap"] = {str(k): v for k, v in sorted(self.ap.items())}
        d["recall"] = {str(k): v for k, v in sorted(self.recall.items())}
        return d

    def csv_row(self) -> dict[str, Any]:
        return {
            "task": self.task_index, "WI": self.wi, "A-OSE": self.a_ose,
            "mAP_prev": self.map_previous, "mAP_cur": self.map_current,
            "mAP_both": self.map_both, "UR": self.ur, "UDR": self.udr, "UDP": self.udp,
        }


def reports_to_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in reports:
        w.writerow({k: ("" if v is None else v) for k, v in r.csv_row().items()})
    return buf.getvalue()


def evaluate(
    dataset: Dataset,
    predictions: Sequence[Prediction],
    task: TaskSpec,
    task_index: int,
    cfg: MatchConfig = MatchConfig(),
    wi_recall: float | None = 0.8,
    ap_method: str = "continuous",
) -> EvalReport:
    gts = dataset.ground_truths
    table = match_known(predictions, gts, task, task_index, cfg)
    counts = match_unknown(predictions, gts, task, task_index, cfg, table=table)
    ap: dict[int, float | None] = {}
    recall: dict[int, float | None] = {}
    for c in sorted(task.known(task_index)):
        rows = [(s, tp) for _, s, tp in table.per_class[c]]
        n = table.num_gt[c]
        ap[c] = average_precision(rows, n, ap_method)
        recall[c] = sum(tp for _, tp in rows) / n if n else None
    wi = wilderness_impact(table, predictions, gts, task, task_index, cfg, wi_recall)
    return EvalReport(
        task_index=task_index,
        ap=ap,
        recall=recall,
        map_previous=mean_ap(ap, task.known(task_index - 1)),
        map_current=mean_ap(ap, task.current(task_index)),
        map_both=mean_ap(ap, task.known(task_index)),
        ur=unknown_recall(counts),
        wi=wi.value,
        a_ose=counts.fp_o,
        udr=udr(counts),
        udp=udp(counts),
        counts=counts,
        wi_detail=wi,
        tp_k=table.tp_k,
        fp_k=table.fp_k,
        config={
            "iou_threshold": cfg.iou_threshold,
            "score_threshold": cfg.score_threshold,
            "fp_o_per_prediction": cfg.fp_o_per_prediction,
            "wi_recall": wi_recall,
            "ap_method": ap_method,
        },
    )
