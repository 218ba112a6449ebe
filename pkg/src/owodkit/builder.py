"""Open-world task splits from COCO-style annotations, plus a principle audit.

A split plan holds, for every task, a train and a val split labelled with the
task's classes, and one test split with complete annotations shared by all
tasks. ``audit`` re-checks a plan against five benchmark principles: class
openness, task increment, annotation specificity, label integrity and data
specificity.
"""
from __future__ import annotations

import hashlib
import json
import logging
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .core import (
    Category,
    Dataset,
    OWODError,
    TaskSpec,
    ValidationError,
    dataset_to_coco,
    load_annotations,
    read_json,
    save_annotations,
)

log = logging.getLogger(__name__)

PRINCIPLES = (
    "class_openness",
    "task_increment",
    "annotation_specificity",
    "label_integrity",
    "data_specificity",
)

DEFAULT_CONFIG = Path(__file__).with_name("configs") / "coco_semantic_split.json"


# ----------------------------------------------------------------- task config


def load_task_config(path) -> list[dict[str, Any]]:
    """Read an ordered task list from JSON or TOML.

    Accepted shapes: a JSON array of ``{name, classes}``, or an object/TOML
    table with a ``tasks`` array of the same.
    """
    path = Path(path)
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        try:
            data = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError(f"{path}: {exc}") from None
    else:
        data = read_json(path)
    if isinstance(data, Mapping):
        data = data.get("tasks")
    if not isinstance(data, list) or not all(isinstance(t, Mapping) and "classes" in t for t in data):
        raise ValidationError(f"{path}: expected an ordered array of {{name, classes}}")
    return [dict(t) for t in data]


def config_digest(config: Sequence[Mapping[str, Any]]) -> str:
    blob = json.dumps(list(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def resolve_task_spec(config: Sequence[Mapping[str, Any]], classes: Sequence[Category]) -> TaskSpec:
    """Turn class names or ids in a task config into a TaskSpec over ``classes``."""
    by_name = {c.name: c.id for c in classes}
    ids = {c.id for c in classes}
    tasks, names, missing = [], [], []
    for i, entry in enumerate(config, start=1):
        members = []
        for ref in entry["classes"]:
            if isinstance(ref, int) and ref in ids:
                members.append(ref)
            elif isinstance(ref, str) and ref in by_name:
                members.append(by_name[ref])
            else:
                missing.append(ref)
        tasks.append(members)
        names.append(str(entry.get("name", f"task{i}")))
    if missing:
        raise ValidationError(f"task config names classes absent from the dataset: {missing}")
    dupes = [c for c, n in Counter(c for t in tasks for c in t).items() if n > 1]
    if dupes:
        raise ValidationError(f"task config lists classes more than once: {sorted(dupes)}")
    spec = TaskSpec.from_lists(tasks, ids, names)
    spec.validate()
    return spec


# ------------------------------------------------------------------- dedupe


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    try:
        with open(path, "rb") as f:
            for chunk in iter(lambda: f.read(1 << 20), b""):
                h.update(chunk)
    except OSError as exc:
        raise OWODError(f"cannot read image file {path}: {exc}") from None
    return h.hexdigest()


def image_keys(dataset: Dataset, image_root=None) -> dict[int, str]:
    """Identity key per image: content hash if ``image_root`` is given, else file name."""
    if image_root is None:
        return {im.id: im.file_name for im in dataset.images}
    root = Path(image_root)
    return {im.id: _file_digest(root / im.file_name) for im in dataset.images}


def deduplicate(dataset: Dataset, image_root=None) -> tuple[Dataset, list[int]]:
    """Drop exact duplicate images, keeping the first occurrence.

    Images are duplicates when they share an id, or their key (see
    ``image_keys``) matches.
    """
    keys = image_keys(dataset, image_root)
    seen_ids: set[int] = set()
    seen_keys: set[str] = set()
    keep_pos, removed = [], []
    for pos, im in enumerate(dataset.images):
        key = keys[im.id]
        if im.id in seen_ids or key in seen_keys:
            removed.append(im.id)
            continue
        seen_ids.add(im.id)
        seen_keys.add(key)
        keep_pos.append(pos)
    if not removed:
        return dataset, []
    images = tuple(dataset.images[p] for p in keep_pos)
    kept_ids = {im.id for im in images}
    gts = tuple(g for g in dataset.ground_truths if g.image_id in kept_ids)
    return Dataset(images, gts, dataset.classes), removed


def flag_incomplete(dataset: Dataset, floor: int = 1) -> list[int]:
    """Images whose annotation count falls below ``floor``: likely incompletely labelled."""
    counts = Counter(g.image_id for g in dataset.ground_truths)
    return sorted(im.id for im in dataset.images if counts[im.id] < floor)


# ------------------------------------------------------------------- build


@dataclass
class TaskSplit:
    train: Dataset
    val: Dataset


@dataclass
class SplitPlan:
    task_spec: TaskSpec
    classes: tuple[Category, ...]
    tasks: list[TaskSplit]
    test: Dataset
    exclusion_list: list[int]
    seed: int
    fine_tune: bool = False
    completeness_floor: int = 1
    removed_duplicates: list[int] = field(default_factory=list)
    config_digest: str = ""

    def counts(self) -> dict[str, Any]:
        return {
            "train": [len(t.train.images) for t in self.tasks],
            "val": [len(t.val.images) for t in self.tasks],
            "test": len(self.test.images),
        }

    def label_rule(self, t: int) -> frozenset[int]:
        return self.task_spec.known(t) if self.fine_tune else self.task_spec.current(t)


def build(
    dataset: Dataset,
    task_spec: TaskSpec,
    exclusion_list: Iterable[int] = (),
    val_size: int = 1000,
    seed: int = 0,
    *,
    test_pool: Dataset | None = None,
    fine_tune: bool = False,
    image_root=None,
    completeness_floor: int = 1,
    digest: str = "",
) -> SplitPlan:
    """Build a split plan from a training pool (``dataset``) and a test pool.

    For task t the train split holds the training-pool images with at least one
    instance of t's newly introduced classes, annotated with those classes only
    (all of known(t) when ``fine_tune``). ``val_size`` of them are moved to the
    val split by a seeded draw. The test split is the test pool minus
    ``exclusion_list``, annotations untouched.
    """
    task_spec.validate()
    if set(task_spec.all_classes) != set(dataset.class_ids):
        raise ValidationError("task config and dataset disagree on the class set")
    exclusion = list(dict.fromkeys(int(i) for i in exclusion_list))

    train_pool, removed = deduplicate(dataset, image_root)
    test_ds = Dataset((), (), dataset.classes)
    if test_pool is not None:
        test_pool, removed_test = deduplicate(test_pool, image_root)
        removed += removed_test
        missing = sorted(set(exclusion) - {im.id for im in test_pool.images})
        if missing:
            raise ValidationError(f"exclusion list ids not in the test pool: {missing[:20]}")
        test_ids = {im.id for im in test_pool.images} - set(exclusion)
        test_ds = test_pool.subset(test_ids)
        # an image seen at test time may not also be trained on
        test_keys = set(image_keys(test_ds, image_root).values())
        train_keys = image_keys(train_pool, image_root)
        clash = [i for i, k in train_keys.items() if i in test_ids or k in test_keys]
        if clash:
            log.info("dropping %d training images that also appear in the test split", len(clash))
            train_pool = train_pool.subset(set(train_keys) - set(clash))
            removed += clash
    elif exclusion:
        raise ValidationError("an exclusion list needs a test pool")

    rng = random.Random(seed)
    by_image: dict[int, set[int]] = defaultdict(set)
    for g in train_pool.ground_truths:
        by_image[g.image_id].add(g.class_id)
    splits = []
    for t in range(1, task_spec.num_tasks + 1):
        new = task_spec.current(t)
        labels = task_spec.known(t) if fine_tune else new
        cats = tuple(c for c in dataset.classes if c.id in labels)
        candidates = sorted(i for i in (im.id for im in train_pool.images) if by_image[i] & new)
        if val_size >= len(candidates):
            raise ValidationError(
                f"task {t}: val_size {val_size} is not smaller than its {len(candidates)} training images"
            )
        val_ids = set(rng.sample(candidates, val_size))
        train_ids = set(candidates) - val_ids
        splits.append(TaskSplit(
            train=train_pool.subset(train_ids, labels, cats),
            val=train_pool.subset(val_ids, labels, cats),
        ))
    return SplitPlan(task_spec, dataset.classes, splits, test_ds, exclusion, seed,
                     fine_tune, completeness_floor, removed, digest)


# ------------------------------------------------------------------- audit


@dataclass
class PrincipleResult:
    principle: str
    status: str  # "pass", "fail" or "skipped"
    counter_examples: list[dict[str, Any]] = field(default_factory=list)
    note: str = ""

    @property
    def passed(self) -> bool:
        return self.status != "fail"


@dataclass
class AuditReport:
    results: dict[str, PrincipleResult]
    duplicate_clusters: list[list[int]]
    incomplete_suspects: list[int]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results.values())

    def to_dict(self) -> dict[str, Any]:
        return {
            "passed": self.passed,
            "principles": {
                k: {"status": r.status, "counter_examples": r.counter_examples, "note": r.note}
                for k, r in self.results.items()
            },
            "duplicate_clusters": self.duplicate_clusters,
            "incomplete_suspects": self.incomplete_suspects,
        }


def _result(name: str, bad: list[dict[str, Any]], note: str = "") -> PrincipleResult:
    return PrincipleResult(name, "fail" if bad else "pass", bad, note)


def _check_class_openness(plan: SplitPlan) -> PrincipleResult:
    if not plan.test.images:
        return PrincipleResult("class_openness", "skipped", note="plan has no test split")
    present = {g.class_id for g in plan.test.ground_truths}
    bad = []
    for t in range(1, plan.task_spec.num_tasks):
        if not present & plan.task_spec.unknown(t):
            bad.append({"task": t, "reason": "test split holds no instance of an unknown class"})
    return _result("class_openness", bad)


def _check_task_increment(plan: SplitPlan) -> PrincipleResult:
    spec = plan.task_spec
    bad = list(spec.problems())
    declared = {c.id for c in plan.classes}
    if declared != set(spec.all_classes):
        bad.append({"reason": "task spec class set differs from dataset classes",
                    "class_ids": sorted(declared ^ set(spec.all_classes))})
    for t in range(1, spec.num_tasks + 1):
        if not spec.known(t - 1) < spec.known(t):
            bad.append({"task": t, "reason": "known set does not strictly grow"})
    if len(plan.tasks) != spec.num_tasks:
        bad.append({"reason": f"plan has {len(plan.tasks)} task splits for {spec.num_tasks} tasks"})
    if spec.num_tasks and spec.unknown(spec.num_tasks):
        bad.append({"task": spec.num_tasks, "reason": "classes still unknown after the last task",
                    "class_ids": sorted(spec.unknown(spec.num_tasks))})
    return _result("task_increment", bad)


def _check_annotation_specificity(plan: SplitPlan) -> PrincipleResult:
    bad = []
    for t, split in enumerate(plan.tasks[:plan.task_spec.num_tasks], start=1):
        unknown = plan.task_spec.unknown(t)
        for name, ds in (("train", split.train), ("val", split.val)):
            for g in ds.ground_truths:
                if g.class_id in unknown:
                    bad.append({"task": t, "split": name, "annotation_id": g.id,
                                "image_id": g.image_id, "class_id": g.class_id})
    return _result("annotation_specificity", bad)


def _check_label_integrity(plan: SplitPlan, source: Dataset | None) -> PrincipleResult:
    if not plan.test.images:
        return PrincipleResult("label_integrity", "skipped", note="plan has no test split")
    excluded = set(plan.exclusion_list)
    counts = Counter(g.image_id for g in plan.test.ground_truths)
    bad = []
    for im in plan.test.images:
        if im.id in excluded:
            bad.append({"image_id": im.id, "reason": "excluded image present in test split"})
        elif counts[im.id] < plan.completeness_floor:
            bad.append({"image_id": im.id, "reason":
                        f"{counts[im.id]} annotations, below floor {plan.completeness_floor}"})
    if source is not None:
        wanted: dict[int, set[int]] = defaultdict(set)
        for g in source.ground_truths:
            wanted[g.image_id].add(g.id)
        have: dict[int, set[int]] = defaultdict(set)
        for g in plan.test.ground_truths:
            have[g.image_id].add(g.id)
        for im in plan.test.images:
            if im.id in wanted and have[im.id] != wanted[im.id]:
                bad.append({"image_id": im.id, "reason": "test annotations differ from source",
                            "missing_annotation_ids": sorted(wanted[im.id] - have[im.id])})
    return _result("label_integrity", bad)


def _check_data_specificity(plan: SplitPlan) -> tuple[PrincipleResult, list[list[int]]]:
    bad = []
    clusters: dict[tuple[str, str], set[int]] = defaultdict(set)

    def dup_scan(where: str, ds: Dataset):
        ids = Counter(im.id for im in ds.images)
        for i, n in ids.items():
            if n > 1:
                bad.append({"split": where, "image_id": i, "reason": "image listed twice"})
        by_name: dict[str, list[int]] = defaultdict(list)
        for im in ds.images:
            by_name[im.file_name].append(im.id)
        for name, group in by_name.items():
            if len(set(group)) > 1:
                bad.append({"split": where, "image_id": group[1], "file_name": name,
                            "reason": f"duplicate of image {group[0]}"})
                clusters[where, name].update(group)

    dup_scan("test", plan.test)
    test_ids = {im.id for im in plan.test.images}
    test_names = {im.file_name for im in plan.test.images}
    for t, split in enumerate(plan.tasks, start=1):
        dup_scan(f"task{t}/train", split.train)
        dup_scan(f"task{t}/val", split.val)
        sets = {
            "train": ({im.id for im in split.train.images}, {im.file_name for im in split.train.images}),
            "val": ({im.id for im in split.val.images}, {im.file_name for im in split.val.images}),
            "test": (test_ids, test_names),
        }
        for a, b in (("train", "val"), ("train", "test"), ("val", "test")):
            shared = sets[a][0] & sets[b][0]
            for i in sorted(shared):
                bad.append({"task": t, "splits": [a, b], "image_id": i,
                            "reason": "image in two splits"})
            by_name = sets[a][1] & sets[b][1]
            if by_name and not shared:
                named = [im.id for im in (split.train if a == "train" else split.val).images
                         if im.file_name in by_name]
                for i in sorted(named):
                    bad.append({"task": t, "splits": [a, b], "image_id": i,
                                "reason": "same file name in two splits"})
    return _result("data_specificity", bad), sorted(sorted(c) for c in clusters.values())


def audit(plan: SplitPlan, dataset: Dataset | None = None) -> AuditReport:
    """Check ``plan`` against the five principles; ``dataset`` is the optional test source."""
    data_res, clusters = _check_data_specificity(plan)
    results = {
        "class_openness": _check_class_openness(plan),
        "task_increment": _check_task_increment(plan),
        "annotation_specificity": _check_annotation_specificity(plan),
        "label_integrity": _check_label_integrity(plan, dataset),
        "data_specificity": data_res,
    }
    return AuditReport(results, clusters, flag_incomplete(plan.test, plan.completeness_floor))


# ------------------------------------------------------------------ plan IO


def save_plan(plan: SplitPlan, out_dir, extra: Mapping[str, Any] | None = None) -> Path:
    """Write one COCO JSON per (task, split), the test JSON and ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files: dict[str, str] = {}
    for t, split in enumerate(plan.tasks, start=1):
        for name, ds in (("train", split.train), ("val", split.val)):
            fname = f"task{t}_{name}.json"
            save_annotations(ds, out / fname)
            files[f"task{t}/{name}"] = fname
    save_annotations(plan.test, out / "test.json")
    files["test"] = "test.json"
    manifest = {
        "kind": "owod-split-plan",
        "seed": plan.seed,
        "fine_tune": plan.fine_tune,
        "completeness_floor": plan.completeness_floor,
        "config_digest": plan.config_digest,
        "tasks": [
            {"name": n, "classes": sorted(t)}
            for n, t in zip(plan.task_spec.names, plan.task_spec.tasks)
        ],
        "categories": dataset_to_coco(Dataset((), (), plan.classes))["categories"],
        "exclusion_list": plan.exclusion_list,
        "removed_duplicates": plan.removed_duplicates,
        "counts": plan.counts(),
        "files": files,
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return path


def load_plan(path) -> SplitPlan:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    m = read_json(path)
    try:
        classes = tuple(Category(int(c["id"]), c["name"], c.get("supercategory", ""))
                        for c in m["categories"])
        spec = TaskSpec.from_lists([t["classes"] for t in m["tasks"]], [c.id for c in classes],
                                   [t.get("name", "") for t in m["tasks"]])
        tasks = [
            TaskSplit(load_annotations(path.parent / m["files"][f"task{t}/train"]),
                      load_annotations(path.parent / m["files"][f"task{t}/val"]))
            for t in range(1, len(m["tasks"]) + 1)
        ]
        test = load_annotations(path.parent / m["files"]["test"])
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: malformed plan manifest ({exc})") from None
    return SplitPlan(spec, classes, tasks, test, list(m.get("exclusion_list", [])),
                     int(m.get("seed", 0)), bool(m.get("fine_tune", False)),
                     int(m.get("completeness_floor", 1)), list(m.get("removed_duplicates", [])),
                     m.get("config_digest", ""))


def read_exclusion_list(path) -> list[int]:
    out = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            out.append(int(line))
        except ValueError:
            raise ValidationError(f"{path}:{n}: not an image id: {line!r}") from None
    return out
