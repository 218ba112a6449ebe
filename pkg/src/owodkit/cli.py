"""``owodkit`` command line: build, audit, eval, cec and pad pipelines.

Exit codes: 0 success, 1 audit failure, 2 input error. Machine-readable
payloads go to stdout, diagnostics to stderr. Set ``OWODKIT_LOG_LEVEL`` to
change verbosity.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .builder import (
    DEFAULT_CONFIG,
    audit,
    build,
    config_digest,
    load_plan,
    load_task_config,
    read_exclusion_list,
    resolve_task_spec,
    save_plan,
)
from .cec import apply_batch, calibrate, load_profile
from .core import OWODError, load_annotations, load_predictions, prediction_to_dict
from .matching import MatchConfig
from .metrics import evaluate, reports_to_csv
from .pad import (
    anchor_to_dict,
    confirm,
    load_anchors,
    load_auxiliary_proposals,
    load_rpn_proposals,
    proposal_to_dict,
    read_confirmed,
    reassign_anchors,
    rpn_cls_loss_report,
    select_confirmed,
    select_potential_unknowns,
    ungroup,
)

log = logging.getLogger("owodkit")

EXIT_OK, EXIT_AUDIT_FAIL, EXIT_INPUT = 0, 1, 2


class UsageError(OWODError):
    pass


# ----------------------------------------------------------------- manifests


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict[str, Any]
    config_digest: str
    inputs: dict[str, str]
    outputs: list[str]
    seed: int | None = None
    tool_version: str = __version__
    started_at: str = ""
    wall_clock_s: float = 0.0
    extra: dict[str, Any] = field(default_factory=dict)


def make_manifest(command: str, args: argparse.Namespace, input_keys: Sequence[str],
                  outputs: Sequence[Path], started: float, seed: int | None = None) -> RunManifest:
    config = {k: v for k, v in vars(args).items() if k != "func" and not callable(v)}
    config = json.loads(json.dumps(config, default=str))
    inputs = {}
    for k in input_keys:
        p = getattr(args, k, None)
        if p:
            inputs[str(p)] = file_digest(p)
    return RunManifest(
        command=command,
        config=config,
        config_digest=hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest(),
        inputs=inputs,
        outputs=[str(o) for o in outputs],
        seed=seed,
        started_at=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(started)),
        wall_clock_s=round(time.time() - started, 3),
    )


def write_manifest(manifest: RunManifest, path: Path) -> None:
    path.write_text(json.dumps(asdict(manifest), indent=2), encoding="utf-8")


def emit(payload: Any, out: str | None, command: str, args, input_keys, started,
         seed: int | None = None) -> None:
    """Write ``payload`` to ``out`` (plus its manifest) or to stdout."""
    text = payload if isinstance(payload, str) else json.dumps(payload, indent=2)
    if out:
        out_path = Path(out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")
        write_manifest(make_manifest(command, args, input_keys, [out_path], started, seed),
                       out_path.with_name(out_path.name + ".manifest.json"))
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _task_config_path(value: str) -> Path:
    return DEFAULT_CONFIG if value == "coco" else Path(value)


# ------------------------------------------------------------------ commands


def format_count_table(counts: dict[str, Any], names: Sequence[str]) -> str:
    n = len(counts["train"])
    header = ["", *[f"Task {t}" for t in range(1, n + 1)]]
    rows = [
        ["Split", *names],
        ["Train", *map(str, counts["train"])],
        ["Val", *map(str, counts["val"])],
        ["Test", *([str(counts["test"])] * n)],
    ]
    table = [header, *rows]
    widths = [max(len(r[i]) for r in table) for i in range(n + 1)]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in table)


def cmd_build(args) -> int:
    started = time.time()
    train = load_annotations(args.annotations)
    test = load_annotations(args.test_annotations) if args.test_annotations else None
    cfg_path = _task_config_path(args.task_config)
    config = load_task_config(cfg_path)
    spec = resolve_task_spec(config, train.classes)
    exclusion = read_exclusion_list(args.exclusion_list) if args.exclusion_list else []
    plan = build(train, spec, exclusion, args.val_size, args.seed, test_pool=test,
                 fine_tune=args.fine_tune, image_root=args.image_root,
                 completeness_floor=args.completeness_floor, digest=config_digest(config))
    out = Path(args.out)
    run = make_manifest("build", args, ["annotations", "test_annotations", "exclusion_list"],
                        [], started, seed=args.seed)
    run.inputs[str(cfg_path)] = file_digest(cfg_path)
    manifest_path = save_plan(plan, out, {"run": asdict(run)})
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    manifest["run"]["outputs"] = [str(out / f) for f in manifest["files"].values()]
    manifest["run"]["wall_clock_s"] = round(time.time() - started, 3)
    manifest_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    print(format_count_table(plan.counts(), list(spec.names)))
    log.info("wrote split plan to %s", manifest_path)
    return EXIT_OK


def cmd_audit(args) -> int:
    plan = load_plan(args.plan)
    source = load_annotations(args.source) if args.source else None
    report = audit(plan, source)
    print(json.dumps(report.to_dict(), indent=2))
    for name, r in report.results.items():
        log.info("%-24s %s", name, r.status)
    return EXIT_OK if report.passed else EXIT_AUDIT_FAIL


def _eval_inputs(gt_path, preds_path, config_path):
    gt = load_annotations(gt_path)
    preds = load_predictions(preds_path, gt.classes)
    spec = resolve_task_spec(load_task_config(_task_config_path(config_path)), gt.classes)
    return gt, preds, spec


def cmd_eval(args) -> int:
    started = time.time()
    gt, preds, spec = _eval_inputs(args.gt, args.preds, args.task_config)
    if not 1 <= args.task <= spec.num_tasks:
        raise UsageError(f"--task must lie in 1..{spec.num_tasks}")
    cfg = MatchConfig(args.iou, args.score_threshold, args.fp_o_per_prediction)
    report = evaluate(gt, preds, spec, args.task, cfg, args.wi_recall, args.ap_method)
    emit(report.to_dict(), args.out, "eval", args, ["gt", "preds"], started)
    if args.csv:
        Path(args.csv).write_text(reports_to_csv([report]), encoding="utf-8")
    return EXIT_OK


def cmd_cec_calibrate(args) -> int:
    started = time.time()
    gt = load_annotations(args.train_gt)
    preds = load_predictions(args.train_preds, gt.classes)
    classes = None
    if args.task_config:
        spec = resolve_task_spec(load_task_config(_task_config_path(args.task_config)), gt.classes)
        classes = spec.known(args.task)
    digest = hashlib.sha256(
        json.dumps({"phi": args.phi, "alpha": args.alpha, "train_preds": file_digest(args.train_preds),
                    "train_gt": file_digest(args.train_gt)}, sort_keys=True).encode()
    ).hexdigest()
    profile = calibrate(preds, gt.ground_truths, args.phi, args.alpha, classes, digest)
    emit(profile.to_dict(), args.out, "cec calibrate", args, ["train_preds", "train_gt"], started)
    return EXIT_OK


def cmd_cec_apply(args) -> int:
    started = time.time()
    profile = load_profile(args.profile)
    if args.alpha is not None:
        profile = profile.with_alpha(args.alpha)
    classes = load_annotations(args.gt).classes if args.gt else list(profile.classes)
    preds = load_predictions(args.preds, classes)
    out = [c.to_prediction() for c in apply_batch(preds, profile)]
    emit([prediction_to_dict(p) for p in out], args.out, "cec apply", args,
         ["preds", "profile", "gt"], started)
    return EXIT_OK


def sweep_alphas(train_preds, train_gt, val_gt, val_preds, spec, task, alphas, phi,
                 cfg: MatchConfig, max_drop: float) -> list[dict[str, Any]]:
    """Evaluate calibrated val predictions for each alpha against the uncalibrated baseline."""
    base = evaluate(val_gt, val_preds, spec, task, cfg)
    profile = calibrate(train_preds, train_gt.ground_truths, phi, 0.0, spec.known(task))
    rows = []
    for a in alphas:
        calibrated = [c.to_prediction() for c in apply_batch(val_preds, profile.with_alpha(a))]
        rep = evaluate(val_gt, calibrated, spec, task, cfg)
        drop = None
        if base.map_both is not None and rep.map_both is not None:
            drop = base.map_both - rep.map_both
        rows.append({"alpha": a, "mAP_both": rep.map_both, "mAP_drop": drop, "UDP": rep.udp,
                     "UR": rep.ur, "A-OSE": rep.a_ose})
    ok = [r["alpha"] for r in rows if r["mAP_drop"] is not None and r["mAP_drop"] <= max_drop]
    chosen = max(ok) if ok else None
    for r in rows:
        r["selected"] = r["alpha"] == chosen
    return rows


def cmd_cec_sweep(args) -> int:
    started = time.time()
    train_gt = load_annotations(args.train_gt)
    train_preds = load_predictions(args.train_preds, train_gt.classes)
    val_gt, val_preds, spec = _eval_inputs(args.val_gt, args.val_preds, args.task_config)
    try:
        alphas = [float(a) for a in args.alphas.split(",") if a.strip()]
    except ValueError:
        raise UsageError(f"--alphas must be comma-separated numbers, got {args.alphas!r}") from None
    rows = sweep_alphas(train_preds, train_gt, val_gt, val_preds, spec, args.task, alphas,
                        args.phi, MatchConfig(args.iou), args.max_drop)
    cols = ["alpha", "mAP_both", "mAP_drop", "UDP", "UR", "A-OSE", "selected"]
    lines = [",".join(cols)]
    for r in rows:
        lines.append(",".join("" if r[c] is None else str(r[c]) for c in cols))
    emit("\n".join(lines) + "\n", args.out, "cec sweep", args,
         ["train_preds", "train_gt", "val_preds", "val_gt"], started)
    return EXIT_OK


def _pair_groups(a: dict, b: dict, what: str) -> list:
    if set(a) == {None} or set(b) == {None}:
        if set(a) != set(b):
            raise UsageError(f"{what}: one file is per-image keyed and the other is not")
    return sorted(a, key=str)


def cmd_pad_confirm(args) -> int:
    started = time.time()
    rpn = load_rpn_proposals(args.rpn_proposals)
    aux = load_auxiliary_proposals(args.aux_proposals, args.aux_topk)
    out = {}
    for key in _pair_groups(rpn, aux, "pad confirm"):
        potentials = select_potential_unknowns(rpn[key], k=args.topk)
        confirmed = confirm(potentials, aux.get(key, []), args.theta)
        if args.select_k is not None:
            confirmed = select_confirmed(confirmed, args.select_k)
        out[key] = [proposal_to_dict(p, s) for p, s in confirmed]
    emit(ungroup(out), args.out, "pad confirm", args, ["rpn_proposals", "aux_proposals"], started)
    return EXIT_OK


def cmd_pad_reassign(args) -> int:
    started = time.time()
    anchors = load_anchors(args.anchors)
    confirmed = read_confirmed(args.confirmed)
    out = {}
    for key in _pair_groups(anchors, confirmed, "pad reassign"):
        relabeled = reassign_anchors(anchors[key], confirmed.get(key, []), args.match_iou)
        out[key] = [anchor_to_dict(a) for a in relabeled]
    emit(ungroup(out), args.out, "pad reassign", args, ["anchors", "confirmed"], started)
    return EXIT_OK


def cmd_pad_loss(args) -> int:
    anchors = load_anchors(args.anchors)
    total, terms, clamped = 0.0, 0, 0
    for group in anchors.values():
        r = rpn_cls_loss_report(group)
        total += r.value
        terms += r.terms
        clamped += r.clamped
    print(f"{total:.10g}")
    print(json.dumps({"terms": terms, "clamped": clamped}), file=sys.stderr)
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="owodkit", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build", help="build task splits from COCO-style annotations")
    b.add_argument("--annotations", required=True, help="training-pool COCO JSON")
    b.add_argument("--test-annotations", help="test-pool COCO JSON (e.g. val2017)")
    b.add_argument("--task-config", required=True,
                   help='task split JSON/TOML, or "coco" for the bundled semantic split')
    b.add_argument("--exclusion-list", help="newline-delimited test image ids to drop")
    b.add_argument("--val-size", type=int, default=1000)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--fine-tune", action="store_true",
                   help="label train/val with every known class, not only the new ones")
    b.add_argument("--image-root", help="deduplicate by image content hash under this root")
    b.add_argument("--completeness-floor", type=int, default=1)
    b.add_argument("--out", default="split_plan")
    b.set_defaults(func=cmd_build)

    a = sub.add_parser("audit", help="check a split plan against the five principles")
    a.add_argument("--plan", required=True, help="plan directory or its manifest.json")
    a.add_argument("--source", help="test-pool COCO JSON to confirm test labels are intact")
    a.set_defaults(func=cmd_audit)

    e = sub.add_parser("eval", help="score a prediction file for one task")
    e.add_argument("--gt", required=True)
    e.add_argument("--preds", required=True)
    e.add_argument("--task-config", required=True)
    e.add_argument("--task", type=int, required=True, help="1-based task index")
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--score-threshold", type=float, default=0.0)
    e.add_argument("--wi-recall", type=float, default=0.8)
    e.add_argument("--ap-method", choices=["continuous", "voc11"], default="continuous")
    e.add_argument("--fp-o-per-prediction", action="store_true")
    e.add_argument("--out", help="report JSON path (stdout when omitted)")
    e.add_argument("--csv", help="also write the one-row CSV summary here")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("cec", help="class-specific expelling classifier")
    csub = c.add_subparsers(dest="cec_command", required=True)
    cc = csub.add_parser("calibrate")
    cc.add_argument("--train-preds", required=True)
    cc.add_argument("--train-gt", required=True)
    cc.add_argument("--phi", type=float, default=0.9)
    cc.add_argument("--alpha", type=float, default=0.5)
    cc.add_argument("--task-config", help="restrict the profile to known classes of --task")
    cc.add_argument("--task", type=int, default=1)
    cc.add_argument("--out")
    cc.set_defaults(func=cmd_cec_calibrate)
    ca = csub.add_parser("apply")
    ca.add_argument("--preds", required=True)
    ca.add_argument("--profile", required=True)
    ca.add_argument("--alpha", type=float, help="override the profile's alpha")
    ca.add_argument("--gt", help="annotation file whose categories validate --preds")
    ca.add_argument("--out")
    ca.set_defaults(func=cmd_cec_apply)
    cs = csub.add_parser("sweep")
    cs.add_argument("--train-preds", required=True)
    cs.add_argument("--train-gt", required=True)
    cs.add_argument("--val-preds", required=True)
    cs.add_argument("--val-gt", required=True)
    cs.add_argument("--task-config", required=True)
    cs.add_argument("--task", type=int, required=True)
    cs.add_argument("--alphas", default="0,0.25,0.5,0.75,1.0")
    cs.add_argument("--phi", type=float, default=0.9)
    cs.add_argument("--iou", type=float, default=0.5)
    cs.add_argument("--max-drop", type=float, default=0.01,
                    help="largest tolerated known-mAP drop when picking alpha")
    cs.add_argument("--out")
    cs.set_defaults(func=cmd_cec_sweep)

    p = sub.add_parser("pad", help="proposal advisor operations")
    psub = p.add_subparsers(dest="pad_command", required=True)
    pc = psub.add_parser("confirm")
    pc.add_argument("--rpn-proposals", required=True)
    pc.add_argument("--aux-proposals", required=True)
    pc.add_argument("--theta", type=float, default=0.7)
    pc.add_argument("--topk", type=int, default=50, help="potential unknowns taken from the RPN")
    pc.add_argument("--aux-topk", type=int, default=50, help="auxiliary proposals kept per image")
    pc.add_argument("--select-k", type=int, help="keep only the best k confirmed proposals")
    pc.add_argument("--out")
    pc.set_defaults(func=cmd_pad_confirm)
    pr = psub.add_parser("reassign")
    pr.add_argument("--anchors", required=True)
    pr.add_argument("--confirmed", required=True)
    pr.add_argument("--match-iou", type=float, default=0.7)
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_pad_reassign)
    pl = psub.add_parser("loss")
    pl.add_argument("--anchors", required=True)
    pl.set_defaults(func=cmd_pad_loss)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    logging.basicConfig(
        level=os.environ.get("OWODKIT_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (OWODError, OSError, IndexError, KeyError) as exc:
        print(f"owodkit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
