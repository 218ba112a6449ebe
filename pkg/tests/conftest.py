import json
import random

import pytest

from owodkit.core import BBox, Category, Dataset, GroundTruthBox, ImageInfo, Prediction, TaskSpec


def make_pools(seed: int, n_classes: int = 6, n_tasks: int = 3, n_train: int = 60,
               n_test: int = 20, n_blank_test: int = 2):
    """Synthetic train/test pools plus a task split and the blank test images to exclude.

    Every test image carries one instance of each task's classes, so every
    task's unknown classes show up at test time.
    """
    rng = random.Random(seed)
    classes = tuple(Category(c, f"class{c}", f"super{(c - 1) % n_tasks}") for c in range(1, n_classes + 1))
    ids = [c.id for c in classes]
    rng.shuffle(ids)
    cuts = sorted(rng.sample(range(1, n_classes), n_tasks - 1))
    tasks = [ids[a:b] for a, b in zip([0, *cuts], [*cuts, n_classes])]
    spec = TaskSpec.from_lists(tasks, [c.id for c in classes])

    ann_id = 1

    def boxes(image_id, class_ids):
        nonlocal ann_id
        out = []
        for c in class_ids:
            x, y = rng.uniform(0, 50), rng.uniform(0, 50)
            out.append(GroundTruthBox(ann_id, image_id, BBox(x, y, x + rng.uniform(1, 30), y + rng.uniform(1, 30)), c))
            ann_id += 1
        return out

    train_images, train_gts = [], []
    for i in range(1, n_train + 1):
        train_images.append(ImageInfo(i, f"train_{i:05d}.jpg", 100, 100))
        # guarantee every task enough images of its own
        own = tasks[i % n_tasks]
        picked = [rng.choice(own)] + rng.sample(range(1, n_classes + 1), rng.randint(0, 3))
        train_gts += boxes(i, picked)
    test_images, test_gts = [], []
    for i in range(10_001, 10_001 + n_test):
        test_images.append(ImageInfo(i, f"test_{i}.jpg", 100, 100))
        test_gts += boxes(i, [rng.choice(t) for t in tasks])
    blanks = []
    for i in range(20_001, 20_001 + n_blank_test):
        test_images.append(ImageInfo(i, f"test_{i}.jpg", 100, 100))
        blanks.append(i)
    train = Dataset(tuple(train_images), tuple(train_gts), classes)
    test = Dataset(tuple(test_images), tuple(test_gts), classes)
    return train, test, spec, blanks


@pytest.fixture
def pools():
    return make_pools(0)


def write_json(path, obj):
    path.write_text(json.dumps(obj), encoding="utf-8")
    return path


def box(x0, y0, x1, y1):
    return BBox(float(x0), float(y0), float(x1), float(y1))


def pred(image_id, b, label, score, vector=None):
    return Prediction(image_id, b, label, score, vector)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
