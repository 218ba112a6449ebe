import csv
import io
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from owodkit.builder import load_task_config, resolve_task_spec
from owodkit.core import UNKNOWN, BBox, Dataset, GroundTruthBox, Prediction, TaskSpec, load_annotations, load_predictions
from owodkit.matching import MatchConfig, UnknownCounts, match_known, match_unknown
from owodkit.metrics import (
    CSV_COLUMNS,
    average_precision,
    evaluate,
    reports_to_csv,
    udp,
    udr,
    unknown_recall,
    wi_from_counts,
    wilderness_impact,
)

from oracles import oracle_ap, oracle_counts
from scenes import CLASSES, KNOWN, SPEC, UNKNOWN_CLASSES, random_scene, to_objects

DATA = Path(__file__).parent / "data"
seeds = st.integers(min_value=0, max_value=2**32 - 1)


# ------------------------------------------------------------------ AP


@pytest.mark.parametrize(
    "hits, num_gt, expected",
    [
        ([True, False], 1, 1.0),
        ([False, True], 1, 0.5),
        ([True, True, True], 3, 1.0),
        ([True], 2, 0.5),
        ([False, False], 1, 0.0),
        ([], 4, 0.0),
        ([True], 0, None),
    ],
)
def test_ap_examples(hits, num_gt, expected):
    rows = [(1.0 - i / 10, h) for i, h in enumerate(hits)]
    assert average_precision(rows, num_gt) == pytest.approx(expected, abs=1e-12) if expected is not None \
        else average_precision(rows, num_gt) is None


def test_ap_sorts_by_score():
    assert average_precision([(0.1, True), (0.9, False)], 1) == 0.5


def test_voc11_example():
    # precision 1 up to recall 0.5, nothing afterwards: 6 of 11 points
    assert average_precision([(0.9, True)], 2, method="voc11") == pytest.approx(6 / 11)


def test_unknown_ap_method():
    with pytest.raises(ValueError):
        average_precision([(0.5, True)], 1, method="coco")


@settings(max_examples=300)
@given(st.lists(st.booleans(), max_size=30), st.integers(0, 5))
def test_ap_matches_reference(hits, extra_gt):
    num_gt = sum(hits) + extra_gt
    rows = [(1.0 - i / 100, h) for i, h in enumerate(hits)]
    got = average_precision(rows, num_gt)
    want = oracle_ap(hits, num_gt)
    if want is None:
        assert got is None
    else:
        assert got == pytest.approx(want, abs=1e-12)
        assert 0.0 <= got <= 1.0


# ----------------------------------------------------- ratio metrics


def test_wi_ratio_examples():
    assert wi_from_counts(3, 7, 3) == pytest.approx(0.3)
    assert wi_from_counts(0, 5, 5) == 0.0
    assert wi_from_counts(0, 0, 0) is None


@pytest.mark.parametrize(
    "counts, want_udr, want_udp",
    [
        (UnknownCounts(tp_u=1, fn_u=1, fn_u_star=0, fp_o=0, total_unknown_gt=2), 0.5, 1.0),
        (UnknownCounts(tp_u=0, fn_u=2, fn_u_star=2, fp_o=2, total_unknown_gt=2), 1.0, 0.0),
        (UnknownCounts(tp_u=3, fn_u=1, fn_u_star=1, fp_o=1, total_unknown_gt=4), 1.0, 0.75),
        (UnknownCounts(0, 0, 0, 0, 0), None, None),
    ],
)
def test_udr_udp_examples(counts, want_udr, want_udp):
    assert udr(counts) == want_udr
    assert udp(counts) == want_udp


def test_inconsistent_counts_rejected():
    with pytest.raises(ValueError):
        UnknownCounts(tp_u=1, fn_u=0, fn_u_star=0, fp_o=0, total_unknown_gt=3)
    with pytest.raises(ValueError):
        UnknownCounts(tp_u=0, fn_u=1, fn_u_star=2, fp_o=2, total_unknown_gt=1)


# ------------------------------------------------------------ evaluate


def test_perfect_predictions():
    gts = tuple(GroundTruthBox(i, 0, BBox(10 * i, 0, 10 * i + 5, 5), c)
                for i, c in enumerate(KNOWN + UNKNOWN_CLASSES))
    ds, _ = to_objects([], [])
    ds = Dataset(ds.images, gts, CLASSES)
    preds = [Prediction(0, g.bbox, g.class_id if g.class_id in KNOWN else UNKNOWN, 0.9) for g in gts]
    r = evaluate(ds, preds, SPEC, 1)
    assert r.map_both == r.map_current == 1.0
    assert r.map_previous is None
    assert r.ur == r.udr == r.udp == 1.0
    assert r.wi == 0.0 and r.a_ose == 0


@pytest.fixture
def fixture4():
    ds = load_annotations(DATA / "fixture4_gt.json")
    spec = resolve_task_spec(load_task_config(DATA / "fixture4_tasks.json"), ds.classes)
    preds = load_predictions(DATA / "fixture4_preds.json", ds.classes)
    return ds, spec, preds


def test_four_image_fixture(fixture4):
    """Hand-computed values.

    Class 1: TP, TP, duplicate FP -> AP 1. Class 2: two FPs -> AP 0.
    Class 3: FP then TP -> AP 0.5. Three unknown objects: one recalled, one
    hidden under a class-3 box, one missed outright, plus a class-2 box on the
    recalled one.
    """
    ds, spec, preds = fixture4
    r = evaluate(ds, preds, spec, 2)
    assert r.ap == {1: 1.0, 2: 0.0, 3: 0.5}
    assert r.recall == {1: 1.0, 2: 0.0, 3: 1.0}
    assert r.map_previous == 0.5 and r.map_current == 0.5 and r.map_both == 0.5
    assert (r.tp_k, r.fp_k) == (3, 4)
    assert r.counts == UnknownCounts(tp_u=1, fn_u=2, fn_u_star=1, fp_o=2, total_unknown_gt=3)
    assert r.ur == pytest.approx(1 / 3)
    assert r.udr == pytest.approx(2 / 3)
    assert r.udp == 0.5
    assert r.a_ose == 2
    # known recall tops out at 3/5, so the 0.8 operating point keeps everything
    assert not r.wi_detail.reached
    assert r.wi == pytest.approx(2 / 7)


def test_four_image_fixture_against_oracle(fixture4):
    ds, spec, preds = fixture4
    plain_preds = [{"image": p.image_id, "box": p.bbox.as_tuple(), "label": p.label, "score": p.score} for p in preds]
    plain_gts = [{"image": g.image_id, "box": g.bbox.as_tuple(), "cls": g.class_id} for g in ds.ground_truths]
    want = oracle_counts(plain_preds, plain_gts, spec.known(2), spec.unknown(2))
    r = evaluate(ds, preds, spec, 2)
    assert want["tp_k"] == r.tp_k and want["fp_k"] == r.fp_k
    assert want["fp_o"] == r.a_ose and want["fn_u_star"] == r.counts.fn_u_star


def test_wi_operating_point(fixture4):
    ds, spec, preds = fixture4
    table = match_known(preds, ds.ground_truths, spec, 2)
    wi = wilderness_impact(table, preds, ds.ground_truths, spec, 2, recall_level=0.4)
    # scores 0.95 (FP over an unknown), 0.9 (TP), 0.85 (TP) reach recall 2/5
    assert wi.reached and wi.achieved_recall == pytest.approx(0.4)
    assert (wi.tp_k, wi.fp_k, wi.fp_o) == (2, 1, 1)
    assert wi.value == pytest.approx(1 / 3)


def test_csv_output(fixture4):
    ds, spec, preds = fixture4
    text = reports_to_csv([evaluate(ds, preds, spec, t) for t in (1, 2, 3)])
    rows = list(csv.DictReader(io.StringIO(text)))
    assert list(rows[0]) == CSV_COLUMNS
    assert [r["task"] for r in rows] == ["1", "2", "3"]
    # nothing was known before task 1
    assert rows[0]["mAP_prev"] == ""
    # the last task has no unknowns
    assert rows[2]["UR"] == ""


def test_report_serialises(fixture4):
    ds, spec, preds = fixture4
    d = evaluate(ds, preds, spec, 2).to_dict()
    assert d["ap"] == {"1": 1.0, "2": 0.0, "3": 0.5}
    assert d["counts"]["fp_o"] == 2


# ----------------------------------------------------------- properties


def _evaluate(preds, gts, spec=SPEC, classes=CLASSES):
    ds, objs = to_objects([], [])
    gt_objs = tuple(GroundTruthBox(k, g["image"], BBox(*g["box"]), g["cls"]) for k, g in enumerate(gts))
    objs = [Prediction(p["image"], BBox(*p["box"]), p["label"], p["score"]) for p in preds]
    return evaluate(Dataset(ds.images, gt_objs, classes), objs, spec, 1)


@settings(max_examples=100, deadline=None)
@given(seeds, st.permutations(list(range(1, 6))))
def test_map_invariant_under_class_relabelling(seed, perm):
    preds, gts = random_scene(np.random.default_rng(seed))
    before = _evaluate(preds, gts)
    mapping = {c: 100 + p for c, p in zip(range(1, 6), perm)}
    mapping[UNKNOWN] = UNKNOWN
    preds2 = [dict(p, label=mapping[p["label"]]) for p in preds]
    gts2 = [dict(g, cls=mapping[g["cls"]]) for g in gts]
    classes2 = tuple(type(c)(mapping[c.id], c.name, c.supercategory) for c in CLASSES)
    spec2 = TaskSpec.from_lists([[mapping[c] for c in KNOWN], [mapping[c] for c in UNKNOWN_CLASSES]])
    after = _evaluate(preds2, gts2, spec2, classes2)
    assert after.map_both == before.map_both
    assert after.counts == before.counts


@settings(max_examples=200, deadline=None)
@given(seeds, st.sampled_from(KNOWN), st.integers(0, 1))
def test_zero_score_fp_of_other_class_leaves_ap(seed, cls, image):
    preds, gts = random_scene(np.random.default_rng(seed))
    before = _evaluate(preds, gts)
    extra = {"image": image, "box": (0.0, 0.0, 20.0, 20.0), "label": cls, "score": 0.0}
    after = _evaluate(preds + [extra], gts)
    for c in KNOWN:
        if c != cls:
            assert after.ap[c] == before.ap[c]


@settings(max_examples=200, deadline=None)
@given(seeds, st.floats(0.01, 1.0), st.data())
def test_recalling_an_unknown_never_lowers_ur_or_udr(seed, score, data):
    preds, gts = random_scene(np.random.default_rng(seed))
    before = _evaluate(preds, gts)
    unknown = [g for g in gts if g["cls"] in UNKNOWN_CLASSES]
    if not unknown:
        return
    g = data.draw(st.sampled_from(unknown))
    after = _evaluate(preds + [{"image": g["image"], "box": g["box"], "label": UNKNOWN, "score": score}], gts)
    assert after.ur >= before.ur
    assert after.udr >= before.udr


@settings(max_examples=300, deadline=None)
@given(seeds)
def test_udr_times_total_counts_detected_unknowns(seed):
    r = _evaluate(*random_scene(np.random.default_rng(seed)))
    c = r.counts
    if c.total_unknown_gt:
        assert r.udr * c.total_unknown_gt == pytest.approx(c.tp_u + c.fn_u_star)
        assert r.ur == unknown_recall(c)


@settings(max_examples=200, deadline=None)
@given(seeds)
def test_wi_uses_all_predictions_without_recall_level(seed):
    preds, gts = random_scene(np.random.default_rng(seed))
    ds, objs = to_objects(preds, gts)
    table = match_known(objs, ds.ground_truths, SPEC, 1)
    wi = wilderness_impact(table, objs, ds.ground_truths, SPEC, 1, recall_level=None)
    c = match_unknown(objs, ds.ground_truths, SPEC, 1, table=table)
    assert (wi.tp_k, wi.fp_k, wi.fp_o) == (table.tp_k, table.fp_k, c.fp_o)
    want = oracle_counts(preds, gts, KNOWN, UNKNOWN_CLASSES)
    assert wi.fp_o == want["fp_o"]


def test_score_threshold_config():
    preds = [{"image": 0, "box": (0.0, 0.0, 5.0, 5.0), "label": 1, "score": 0.2}]
    gts = [{"image": 0, "box": (0.0, 0.0, 5.0, 5.0), "cls": 1}]
    ds, objs = to_objects(preds, gts)
    assert evaluate(ds, objs, SPEC, 1).ap[1] == 1.0
    assert evaluate(ds, objs, SPEC, 1, MatchConfig(score_threshold=0.5)).ap[1] == 0.0
