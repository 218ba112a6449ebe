"""Brute-force reference computations, written without touching owodkit's matcher.

The greedy protocol (score-descending, best available GT by IOU, earlier GT on
IOU ties, strict IOU threshold) is equivalent to picking, among *all*
injective prediction->GT assignments, the one whose per-prediction keys
``(iou, -gt_position)`` are lexicographically largest when predictions are
listed by descending score. ``best_assignment`` enumerates every assignment
and picks that maximum directly.
"""
from __future__ import annotations

UNKNOWN = -1
NONE_KEY = (-1.0, 0)


def box_iou(a, b):
    """IOU of corner tuples, computed from scratch."""
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    w = min(ax1, bx1) - max(ax0, bx0)
    h = min(ay1, by1) - max(ay0, by0)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def _enumerate(n_preds, options, chosen, used, out):
    k = len(chosen)
    if k == n_preds:
        out.append(tuple(chosen))
        return
    chosen.append(None)
    _enumerate(n_preds, options, chosen, used, out)
    chosen.pop()
    for g in options[k]:
        if g not in used:
            used.add(g)
            chosen.append(g)
            _enumerate(n_preds, options, chosen, used, out)
            chosen.pop()
            used.discard(g)


def best_assignment(pred_boxes, gt_boxes, thr):
    """pred_boxes must already be in visiting order. Returns {pred pos: gt pos}."""
    ious = [[box_iou(p, g) for g in gt_boxes] for p in pred_boxes]
    options = [[k for k in range(len(gt_boxes)) if ious[i][k] > thr] for i in range(len(pred_boxes))]
    candidates = []
    _enumerate(len(pred_boxes), options, [], set(), candidates)

    def key(assign):
        return tuple(NONE_KEY if g is None else (ious[i][g], -g) for i, g in enumerate(assign))

    best = max(candidates, key=key)
    return {i: g for i, g in enumerate(best) if g is not None}


def visiting_order(preds):
    """Indices by descending score, equal scores in input order."""
    return sorted(range(len(preds)), key=lambda i: (-preds[i]["score"], i))


def oracle_counts(preds, gts, known, unknown, thr=0.5):
    """Raw open-world counts for plain-dict scenes.

    preds: [{image, box, label, score}], label UNKNOWN (-1) for unknown.
    gts:   [{image, box, cls}] (no crowd).
    """
    order = visiting_order(preds)
    known_tp = set()
    known_fp = 0
    for c in known:
        for img in {p["image"] for p in preds} | {g["image"] for g in gts}:
            pi = [i for i in order if preds[i]["label"] == c and preds[i]["image"] == img]
            gi = [k for k, g in enumerate(gts) if g["cls"] == c and g["image"] == img]
            got = best_assignment([preds[i]["box"] for i in pi], [gts[k]["box"] for k in gi], thr)
            known_tp.update(pi[j] for j in got)
    known_fp = sum(1 for p_i, p in enumerate(preds) if p["label"] in known and p_i not in known_tp)

    unk_gt = [k for k, g in enumerate(gts) if g["cls"] in unknown]
    recalled = set()
    for img in {gts[k]["image"] for k in unk_gt}:
        pi = [i for i in order if preds[i]["label"] == UNKNOWN and preds[i]["image"] == img]
        gi = [k for k in unk_gt if gts[k]["image"] == img]
        got = best_assignment([preds[i]["box"] for i in pi], [gts[k]["box"] for k in gi], thr)
        recalled.update(gi[g] for g in got.values())

    confusers = [i for i, p in enumerate(preds) if p["label"] in known and i not in known_tp]
    fp_o = fn_u_star = 0
    for k in unk_gt:
        hit = any(
            preds[i]["image"] == gts[k]["image"] and box_iou(preds[i]["box"], gts[k]["box"]) > thr
            for i in confusers
        )
        fp_o += hit
        fn_u_star += hit and k not in recalled
    tp_u = len(recalled)
    return {
        "tp_k": len(known_tp),
        "fp_k": known_fp,
        "tp_u": tp_u,
        "fn_u": len(unk_gt) - tp_u,
        "fn_u_star": fn_u_star,
        "fp_o": fp_o,
        "total_unknown_gt": len(unk_gt),
    }


def oracle_ap(hits, num_gt):
    """All-point interpolated AP: mean over TPs of the best precision at or after that rank.

    ``hits`` is the TP/FP sequence in visiting order.
    """
    if num_gt == 0:
        return None
    precisions = []
    tp = 0
    for n, h in enumerate(hits, start=1):
        tp += h
        precisions.append(tp / n)
    total = 0.0
    for r, h in enumerate(hits):
        if h:
            total += max(precisions[r:])
    return total / num_gt

