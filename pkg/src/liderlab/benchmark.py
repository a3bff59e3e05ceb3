"""Task streams, the continual training loop and its accuracy metrics."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import MLPBackbone, init_backbone
from .errors import ConfigurationError
from .lider import LiderConfig
from .rehearsal import (
    Learner,
    MemoryBuffer,
    MethodConfig,
    gdumb_fit,
    joint_fit,
    observe,
    train_epochs,
)
from .spectral import ORACLE_POWER_ITERS, model_lipschitz_product


@dataclass
class Task:
    classes: tuple[int, ...]
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    # source row numbers, kept for CSV round trips
    train_rows: np.ndarray | None = None
    test_rows: np.ndarray | None = None


@dataclass
class TaskStream:
    tasks: list[Task]
    n_classes: int
    # original label of each class index (CSV streams)
    class_labels: list[int] | None = None

    def __post_init__(self):
        self.validate()

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def dim(self) -> int:
        return self.tasks[0].x_train.shape[1]

    def validate(self) -> None:
        seen: set[int] = set()
        for t, task in enumerate(self.tasks):
            cls = set(task.classes)
            if cls & seen:
                raise ConfigurationError(f"task {t} reuses classes {sorted(cls & seen)}")
            seen |= cls
            for y in (task.y_train, task.y_test):
                stray = set(np.unique(y).tolist()) - cls
                if stray:
                    raise ConfigurationError(f"task {t} holds labels {sorted(stray)} "
                                             f"outside its classes {sorted(cls)}")
        if seen and max(seen) >= self.n_classes:
            raise ConfigurationError("class index beyond n_classes")


def standardize(stream: TaskStream) -> TaskStream:
    """Zero mean, unit variance per feature, statistics from the union of train sets."""
    train = np.concatenate([t.x_train for t in stream.tasks])
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    tasks = [Task(t.classes, (t.x_train - mean) / std, t.y_train, (t.x_test - mean) / std,
                  t.y_test, t.train_rows, t.test_rows) for t in stream.tasks]
    return TaskStream(tasks, stream.n_classes, stream.class_labels)


def make_synthetic_stream(n_tasks: int = 5, classes_per_task: int = 2, dim: int = 16,
                          train_per_class: int = 200, test_per_class: int = 100,
                          cluster_spread: float = 1.0, seed: int = 0,
                          separation: float = 3.0, standardized: bool = True) -> TaskStream:
    """Isotropic Gaussian blobs, one per class, means on a sphere of radius ``separation``."""
    for name, v in (("n_tasks", n_tasks), ("classes_per_task", classes_per_task), ("dim", dim),
                    ("train_per_class", train_per_class), ("test_per_class", test_per_class)):
        if v < 1:
            raise ConfigurationError(f"{name} must be >= 1, got {v}")
    rng = np.random.default_rng(seed)
    n_classes = n_tasks * classes_per_task
    means = rng.standard_normal((n_classes, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    tasks = []
    for t in range(n_tasks):
        classes = tuple(range(t * classes_per_task, (t + 1) * classes_per_task))
        parts = {"train": ([], []), "test": ([], [])}
        for c in classes:
            for split, n in (("train", train_per_class), ("test", test_per_class)):
                parts[split][0].append(means[c] + cluster_spread * rng.standard_normal((n, dim)))
                parts[split][1].append(np.full(n, c, dtype=np.int64))
        tasks.append(Task(classes, np.concatenate(parts["train"][0]),
                          np.concatenate(parts["train"][1]),
                          np.concatenate(parts["test"][0]), np.concatenate(parts["test"][1])))
    stream = TaskStream(tasks, n_classes)
    return standardize(stream) if standardized else stream


class CSVFormatError(ConfigurationError):
    pass


def _parse_csv(path) -> tuple[np.ndarray, np.ndarray]:
    labels, rows, width = [], [], None
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not cell.strip() for cell in row):
                continue
            if width is None:
                width = len(row)
                if width < 2:
                    raise CSVFormatError(f"{path}:{lineno}: need a label and at least one feature")
            elif len(row) != width:
                raise CSVFormatError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            try:
                labels.append(int(row[0]))
            except ValueError:
                raise CSVFormatError(f"{path}:{lineno}: label {row[0]!r} is not an integer") from None
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise CSVFormatError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise CSVFormatError(f"{path}: no data rows")
    return np.asarray(labels, dtype=np.int64), np.asarray(rows, dtype=np.float64)


def load_csv_stream(path, n_tasks: int, split_fraction: float = 0.8, seed: int = 0,
                    standardized: bool = False) -> TaskStream:
    """Rows ``label,f1,...,fd``; sorted classes are cut into ``n_tasks`` contiguous groups."""
    if not 0.0 < split_fraction < 1.0:
        raise ConfigurationError(f"split_fraction must lie in (0, 1), got {split_fraction}")
    labels, feats = _parse_csv(path)
    class_labels = sorted(set(labels.tolist()))
    if n_tasks < 1 or len(class_labels) % n_tasks:
        raise ConfigurationError(f"{len(class_labels)} classes cannot be split into {n_tasks} tasks")
    index = {lab: i for i, lab in enumerate(class_labels)}
    y = np.array([index[lab] for lab in labels], dtype=np.int64)
    per_task = len(class_labels) // n_tasks
    rng = np.random.default_rng(seed)
    tasks = []
    for t in range(n_tasks):
        classes = tuple(range(t * per_task, (t + 1) * per_task))
        tr, te = [], []
        for c in classes:
            rows = np.flatnonzero(y == c)
            rows = rows[rng.permutation(len(rows))]
            cut = int(round(split_fraction * len(rows)))
            cut = min(max(cut, 1), len(rows))
            tr.append(np.sort(rows[:cut]))
            te.append(np.sort(rows[cut:]))
        tr, te = np.concatenate(tr), np.concatenate(te)
        tasks.append(Task(classes, feats[tr], y[tr], feats[te], y[te], tr, te))
    stream = TaskStream(tasks, len(class_labels), class_labels)
    return standardize(stream) if standardized else stream


def write_csv_stream(stream: TaskStream, path) -> None:
    """Emit every example as ``label,features`` (original row order when known)."""
    records = []
    for task in stream.tasks:
        for x, y, rows in ((task.x_train, task.y_train, task.train_rows),
                           (task.x_test, task.y_test, task.test_rows)):
            order = rows if rows is not None else np.full(len(y), -1)
            records.extend(zip(order.tolist(), y.tolist(), x))
    if all(r[0] >= 0 for r in records):
        records.sort(key=lambda r: r[0])
    labels = stream.class_labels
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for _, y, x in records:
            lab = labels[y] if labels is not None else y
            writer.writerow([lab] + [repr(float(v)) for v in x])


# -------------------------------------------------------------------- metrics

class AccuracyMatrix:
    """``a[i][t]``: accuracy on task ``i`` after training through task ``t`` (t >= i)."""

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ConfigurationError(f"accuracy matrix must be square, got shape {arr.shape}")
        self.values = arr

    @classmethod
    def empty(cls, n_tasks: int) -> "AccuracyMatrix":
        return cls(np.full((n_tasks, n_tasks), np.nan))

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "AccuracyMatrix":
        """Rows may be ragged: row ``i`` lists ``a[i][i:]`` or the full row."""
        n = len(rows)
        m = cls.empty(n)
        for i, row in enumerate(rows):
            row = list(row)
            start = n - len(row)
            if start not in (0, i):
                raise ConfigurationError(f"row {i} has {len(row)} entries")
            for j, v in enumerate(row):
                if v is not None and start + j >= i:
                    m.values[i, start + j] = v
        return m

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, key):
        return self.values[key]

    def set(self, i: int, t: int, value: float) -> None:
        if t < i:
            raise ConfigurationError(f"a[{i}][{t}] is undefined (task {i} not yet seen)")
        self.values[i, t] = value

    def is_complete(self) -> bool:
        n = len(self)
        return all(np.isfinite(self.values[i, t]) for i in range(n) for t in range(i, n))

    def to_csv(self, path) -> None:
        n = len(self)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["task"] + [f"after_{t}" for t in range(n)])
            for i in range(n):
                writer.writerow([i] + [repr(float(self.values[i, t])) if t >= i else ""
                                       for t in range(n)])

    def tolist(self) -> list[list[float | None]]:
        n = len(self)
        return [[float(self.values[i, t]) if t >= i else None for t in range(n)]
                for i in range(n)]


def _as_matrix(matrix) -> AccuracyMatrix:
    return matrix if isinstance(matrix, AccuracyMatrix) else AccuracyMatrix.from_rows(matrix)


def faa(matrix) -> float:
    """Mean over tasks of the accuracy after the last task."""
    m = _as_matrix(matrix)
    final = m.values[:, -1]
    if not np.all(np.isfinite(final)):
        raise ConfigurationError("final column of the accuracy matrix is incomplete")
    return float(np.mean(final))


def ff(matrix) -> float:
    """Mean over all but the last task of the drop from best to final accuracy."""
    m = _as_matrix(matrix)
    n = len(m)
    if n < 2:
        raise ConfigurationError("forgetting needs at least two tasks")
    if not m.is_complete():
        raise ConfigurationError("accuracy matrix is incomplete")
    a = m.values
    drops = [max(a[i, t] - a[i, n - 1] for t in range(i, n)) for i in range(n - 1)]
    return float(sum(drops) / (n - 1))


def class_il_accuracy(model, x: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(np.argmax(model.predict(x), axis=1) == y))


def task_il_accuracy(model, x: np.ndarray, y: np.ndarray, task_classes: Sequence[int]) -> float:
    if len(y) == 0:
        return float("nan")
    cols = np.asarray(sorted(task_classes))
    pred = cols[np.argmax(model.predict(x)[:, cols], axis=1)]
    return float(np.mean(pred == y))


# ----------------------------------------------------------------- experiment

@dataclass(frozen=True)
class BufferConfig:
    capacity: int = 50
    poison_p: float = 0.0

    def __post_init__(self):
        if self.capacity < 0:
            raise ConfigurationError("buffer capacity must be >= 0")
        if not 0.0 <= self.poison_p <= 1.0:
            raise ConfigurationError(f"poison_p must lie in [0, 1], got {self.poison_p}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    hidden: tuple[int, ...] = (64, 64)
    lr_milestones: tuple[int, ...] = ()
    lr_gamma: float = 0.1
    probe_per_task: int = 50
    probe_power_iters: int = ORACLE_POWER_ITERS

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError(f"epochs must be >= 0, got {self.epochs}")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigurationError(f"hidden must list positive widths, got {self.hidden}")


@dataclass
class RunLog:
    steps: list[dict] = field(default_factory=list)
    lipschitz_products: list[float] = field(default_factory=list)
    lider_skipped_steps: int = 0


@dataclass
class ExperimentResult:
    cil: AccuracyMatrix
    til: AccuracyMatrix
    log: RunLog
    model: MLPBackbone
    buffer: MemoryBuffer
    snapshots: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        n = len(self.cil)
        return {
            "faa_cil": faa(self.cil),
            "faa_til": faa(self.til),
            "ff_cil": ff(self.cil) if n > 1 else None,
            "ff_til": ff(self.til) if n > 1 else None,
            "lipschitz_product_per_task": list(self.log.lipschitz_products),
            "lider_skipped_steps": self.log.lider_skipped_steps,
        }


def probe_batch(stream: TaskStream, upto: int, per_task: int) -> np.ndarray:
    return np.concatenate([t.x_test[:per_task] for t in stream.tasks[:upto + 1]])


def run_experiment(stream: TaskStream, method: MethodConfig, lider: LiderConfig | None = None,
                   train: TrainConfig = TrainConfig(), seed: int = 0,
                   buffer: BufferConfig = BufferConfig(), keep_snapshots: bool = False,
                   ) -> ExperimentResult:
    """Train task by task, evaluating every seen task after each one."""
    dims = [stream.dim, *train.hidden, stream.n_classes]
    n = len(stream)
    cil, til = AccuracyMatrix.empty(n), AccuracyMatrix.empty(n)
    log = RunLog()
    capacity = 0 if method.name in ("finetune", "joint") else buffer.capacity
    learner = Learner(init_backbone(dims, seed), MemoryBuffer(capacity, f"{seed}-buffer"), method,
                      lider, power_rng=np.random.default_rng([seed, 99]),
                      poison_p=buffer.poison_p)
    snapshots = []
    schedule = {"milestones": train.lr_milestones, "gamma": train.lr_gamma}

    def on_step(epoch, report, t=0):
        log.steps.append({"task": t, "epoch": epoch, **report})
        if report.get("lider_skipped"):
            log.lider_skipped_steps += 1

    for t, task in enumerate(stream.tasks):
        learner.begin_task(t, task.classes)
        shuffle = np.random.default_rng([seed, t])
        hook = lambda e, r, t=t: on_step(e, r, t)  # noqa: E731
        if method.name == "gdumb":
            if train.epochs > 0:
                order = shuffle.permutation(len(task.y_train))
                observe(learner, task.x_train[order], task.y_train[order], order)
                learner.model = gdumb_fit(learner.buffer, lambda: init_backbone(dims, seed),
                                          method, lider, seed=[seed, t])
        elif method.name == "joint":
            seen = [(s.x_train, s.y_train) for s in stream.tasks[:t + 1]]
            learner.model = joint_fit(seen, init_backbone(dims, seed), method, train.epochs,
                                      seed=seed, on_step=hook, **schedule)
        else:
            train_epochs(learner, task.x_train, task.y_train, train.epochs, shuffle,
                         insert=True, on_step=hook, **schedule)

        model = learner.model
        for i in range(t + 1):
            past = stream.tasks[i]
            cil.set(i, t, class_il_accuracy(model, past.x_test, past.y_test))
            til.set(i, t, task_il_accuracy(model, past.x_test, past.y_test, past.classes))
        probe = probe_batch(stream, t, train.probe_per_task)
        product = model_lipschitz_product(model, probe, train.probe_power_iters, seed=[seed, t])
        log.lipschitz_products.append(product)
        if keep_snapshots:
            snapshots.append({"task": t, "model": model.to_dict(),
                              "buffer": learner.buffer.to_dict()})

    return ExperimentResult(cil, til, log, learner.model, learner.buffer, snapshots)


def experiment_config_echo(method: MethodConfig, lider: LiderConfig | None, train: TrainConfig,
                           buffer: BufferConfig) -> dict:
    return {"method": asdict(method), "lider": None if lider is None else asdict(lider),
            "train": asdict(train), "buffer": asdict(buffer)}
