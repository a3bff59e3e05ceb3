"""Replay buffer and the training-step rules of the rehearsal methods.

Every method is a plain SGD step on a method-specific loss; when a
:class:`~liderlab.lider.LiderConfig` is attached to the learner the
Lipschitz regulariser is added on the replay batch drawn for that step.
"""

from __future__ import annotations

import logging
import random
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .backbone import MLPBackbone
from .errors import ConfigurationError
from .lider import LiderConfig, LipschitzTargets, lider_loss
from .tensor import Tensor, add, backward, mse, mul, sgd_step, softmax_cross_entropy

log = logging.getLogger(__name__)

METHODS = ("er", "er_ace", "derpp", "gdumb", "joint", "finetune")


@dataclass
class BufferEntry:
    x: np.ndarray
    y: int
    task_id: int
    insertion_step: int
    stored_logits: np.ndarray | None = None
    true_label: int | None = None
    source_index: int = -1

    def to_dict(self) -> dict:
        return {
            "x": self.x.tolist(), "y": int(self.y), "task_id": int(self.task_id),
            "insertion_step": int(self.insertion_step),
            "stored_logits": None if self.stored_logits is None else self.stored_logits.tolist(),
            "true_label": None if self.true_label is None else int(self.true_label),
            "source_index": int(self.source_index),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BufferEntry":
        logits = d.get("stored_logits")
        return cls(np.asarray(d["x"], dtype=np.float64), int(d["y"]), int(d["task_id"]),
                   int(d["insertion_step"]),
                   None if logits is None else np.asarray(logits, dtype=np.float64),
                   d.get("true_label"), int(d.get("source_index", -1)))


class MemoryBuffer:
    """Capacity-bounded store maintained by reservoir sampling."""

    def __init__(self, capacity: int, seed=None, rng: random.Random | None = None):
        if capacity < 0:
            raise ConfigurationError(f"buffer capacity must be >= 0, got {capacity}")
        self.capacity = int(capacity)
        self.entries: list[BufferEntry] = []
        self.seen_count = 0
        self.rng = rng if rng is not None else random.Random(seed)

    def __len__(self) -> int:
        return len(self.entries)

    def is_empty(self) -> bool:
        return not self.entries

    def arrays(self, entries: Sequence[BufferEntry] | None = None) -> tuple[np.ndarray, np.ndarray]:
        entries = self.entries if entries is None else entries
        if not entries:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        return (np.stack([e.x for e in entries]),
                np.array([e.y for e in entries], dtype=np.int64))

    def to_dict(self) -> dict:
        return {"capacity": self.capacity, "seen_count": self.seen_count,
                "entries": [e.to_dict() for e in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "MemoryBuffer":
        buf = cls(int(d["capacity"]))
        buf.seen_count = int(d["seen_count"])
        buf.entries = [BufferEntry.from_dict(e) for e in d["entries"]]
        return buf


@dataclass(frozen=True)
class PoisonConfig:
    p: float
    pool: tuple[int, ...]

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigurationError(f"poison probability must lie in [0, 1], got {self.p}")


def reservoir_insert(buffer: MemoryBuffer, entry: BufferEntry,
                     poison: PoisonConfig | None = None, rng=None) -> None:
    """Offer one stream item to the buffer.

    The n-th offered item is kept with probability ``capacity / n``,
    replacing a uniformly chosen slot once the buffer is full. An item that
    is kept may be relabelled (``poison``) with a different class of the pool.
    """
    rng = buffer.rng if rng is None else rng
    buffer.seen_count += 1
    n = buffer.seen_count
    if n <= buffer.capacity:
        slot = len(buffer.entries)
    else:
        slot = rng.randrange(n)
        if slot >= buffer.capacity:
            return
    if poison is not None and poison.p > 0 and rng.random() < poison.p:
        others = [c for c in poison.pool if c != entry.y]
        if others:
            if entry.true_label is None:
                entry.true_label = entry.y
            entry.y = others[rng.randrange(len(others))]
    if slot == len(buffer.entries):
        buffer.entries.append(entry)
    else:
        buffer.entries[slot] = entry


def sample_batch(buffer: MemoryBuffer, n: int, rng=None) -> list[BufferEntry]:
    """``n`` entries drawn uniformly with replacement."""
    if n == 0:
        return []
    if buffer.is_empty():
        raise ConfigurationError("cannot sample from an empty buffer")
    rng = buffer.rng if rng is None else rng
    return rng.choices(buffer.entries, k=n)


# ------------------------------------------------------------------ learners

@dataclass(frozen=True)
class MethodConfig:
    name: str = "er"
    lr: float = 0.1
    batch_size: int = 4
    # None: same size as the stream batch
    buffer_batch_size: int | None = None
    derpp_alpha: float = 0.3
    derpp_beta: float = 0.3
    gdumb_fit_epochs: int = 30

    def __post_init__(self):
        if self.name not in METHODS:
            raise ConfigurationError(f"unknown method {self.name!r}; expected one of {METHODS}")
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.derpp_alpha < 0 or self.derpp_beta < 0:
            raise ConfigurationError("derpp alpha/beta must be >= 0")
        if self.gdumb_fit_epochs < 0:
            raise ConfigurationError("gdumb fit_epochs must be >= 0")


@dataclass
class Learner:
    """Mutable training state owned by one experiment."""

    model: MLPBackbone
    buffer: MemoryBuffer
    method: MethodConfig
    lider: LiderConfig | None = None
    targets: LipschitzTargets | None = None
    power_rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    lr: float | None = None
    poison_p: float = 0.0
    task_id: int = 0
    current_classes: tuple[int, ...] = ()
    seen_classes: tuple[int, ...] = ()
    step_count: int = 0

    def __post_init__(self):
        if self.lr is None:
            self.lr = self.method.lr
        if self.lider is not None and self.targets is None:
            self.targets = LipschitzTargets.for_layers(self.model.n_layers)

    @property
    def regularized(self) -> bool:
        return self.lider is not None and self.lider.active

    def begin_task(self, task_id: int, classes: Sequence[int]) -> None:
        self.task_id = task_id
        self.current_classes = tuple(sorted(int(c) for c in classes))
        self.seen_classes = tuple(sorted(set(self.seen_classes) | set(self.current_classes)))

    @property
    def buffer_batch_size(self) -> int | None:
        return self.method.buffer_batch_size


def _replay(learner: Learner, n: int) -> list[BufferEntry]:
    if learner.buffer.is_empty():
        return []
    return sample_batch(learner.buffer, learner.buffer_batch_size or n)


def _apply(learner: Learner, terms: dict[str, Tensor], replay_x, stream_x) -> dict[str, float]:
    """Sum the method terms, add the regulariser, take one SGD step."""
    total = Tensor(0.0)
    for t in terms.values():
        total = add(total, t)
    report = {k: v.item() for k, v in terms.items()}
    params = list(learner.model.weights)
    if learner.regularized:
        reg = lider_loss(learner.model, replay_x, learner.targets, learner.lider,
                         learner.power_rng, stream_x=stream_x)
        report["lider"] = reg.item()
        report["lider_skipped"] = not reg.tracked
        total = add(total, reg)
        params += learner.targets.learnable
    report["total"] = total.item()
    grads = backward(total, wrt=params)
    learner.model.weights = sgd_step(learner.model.weights, grads, learner.lr)
    if learner.regularized and learner.targets.learnable:
        learner.targets.c = sgd_step(learner.targets.c, grads,
                                     learner.lider.target_lr or learner.lr)
    learner.step_count += 1
    return report


def er_step(learner: Learner, x: np.ndarray, y: np.ndarray) -> dict[str, float]:
    """Cross-entropy over the stream batch concatenated with a replay batch."""
    replay = _replay(learner, len(x))
    bx, by = learner.buffer.arrays(replay)
    xs = np.concatenate([x, bx]) if replay else x
    ys = np.concatenate([y, by]) if replay else y
    ce = softmax_cross_entropy(learner.model.forward(xs), ys)
    return _apply(learner, {"ce": ce}, bx if replay else None, x)


def er_ace_step(learner: Learner, x: np.ndarray, y: np.ndarray) -> dict[str, float]:
    """Stream loss masked to the current task's classes, replay loss over all seen classes."""
    if not learner.current_classes:
        raise ConfigurationError("er_ace needs the current task's classes (call begin_task)")
    terms = {"ce_stream": softmax_cross_entropy(learner.model.forward(x), y,
                                                mask=learner.current_classes)}
    replay = _replay(learner, len(x))
    bx = None
    if replay:
        bx, by = learner.buffer.arrays(replay)
        terms["ce_buffer"] = softmax_cross_entropy(learner.model.forward(bx), by,
                                                   mask=learner.seen_classes)
    return _apply(learner, terms, bx, x)


def derpp_step(learner: Learner, x: np.ndarray, y: np.ndarray) -> dict[str, float]:
    """Stream CE + logit matching on one replay batch + CE on a second, independent one."""
    m = learner.method
    terms = {"ce_stream": softmax_cross_entropy(learner.model.forward(x), y)}
    bx = None
    if not learner.buffer.is_empty():
        first = _replay(learner, len(x))
        if any(e.stored_logits is None for e in first):
            raise ConfigurationError("derpp replay entries must carry stored logits")
        bx, _ = learner.buffer.arrays(first)
        stored = np.stack([e.stored_logits for e in first])
        if m.derpp_alpha > 0:
            terms["logit_mse"] = mul(mse(learner.model.forward(bx), stored), m.derpp_alpha)
        if m.derpp_beta > 0:
            second = _replay(learner, len(x))
            bx2, by2 = learner.buffer.arrays(second)
            terms["ce_buffer"] = mul(softmax_cross_entropy(learner.model.forward(bx2), by2),
                                     m.derpp_beta)
    return _apply(learner, terms, bx, x)


STEP_RULES: dict[str, Callable[[Learner, np.ndarray, np.ndarray], dict]] = {
    "er": er_step,
    "finetune": er_step,
    "joint": er_step,
    "er_ace": er_ace_step,
    "derpp": derpp_step,
}


def observe(learner: Learner, x: np.ndarray, y: np.ndarray, indices: Sequence[int]) -> None:
    """Offer a stream batch to the buffer (DER++ entries carry current logits)."""
    if learner.buffer.capacity == 0:
        return
    logits = learner.model.predict(x) if learner.method.name == "derpp" else None
    poison = (PoisonConfig(learner.poison_p, learner.current_classes)
              if learner.poison_p > 0 else None)
    for i in range(len(x)):
        entry = BufferEntry(np.array(x[i]), int(y[i]), learner.task_id, learner.step_count,
                            None if logits is None else logits[i].copy(),
                            source_index=int(indices[i]))
        reservoir_insert(learner.buffer, entry, poison)


def lr_at_epoch(base_lr: float, epoch: int, milestones: Sequence[int] = (), gamma: float = 0.1) -> float:
    return base_lr * gamma ** sum(1 for m in milestones if epoch >= m)


def train_epochs(learner: Learner, x: np.ndarray, y: np.ndarray, epochs: int,
                 rng: np.random.Generator, *, insert: bool = False,
                 milestones: Sequence[int] = (), gamma: float = 0.1,
                 step_rule: Callable | None = None, on_step: Callable | None = None) -> None:
    """Shuffled minibatch epochs; stream items are offered to the buffer on the first epoch only."""
    step_rule = step_rule or STEP_RULES[learner.method.name]
    n, bs = len(x), learner.method.batch_size
    for epoch in range(epochs):
        learner.lr = lr_at_epoch(learner.method.lr, epoch, milestones, gamma)
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            report = step_rule(learner, x[idx], y[idx])
            if on_step is not None:
                on_step(epoch, report)
            if insert and epoch == 0:
                observe(learner, x[idx], y[idx], idx)
    learner.lr = learner.method.lr


def gdumb_fit(buffer: MemoryBuffer, model_init: Callable[[], MLPBackbone], method: MethodConfig,
              lider: LiderConfig | None = None, seed=0) -> MLPBackbone:
    """Train a freshly initialised model on the buffer contents alone."""
    if buffer.is_empty():
        raise ConfigurationError("gdumb_fit needs a non-empty buffer")
    x, y = buffer.arrays()
    entropy = [int(s) for s in np.atleast_1d(seed)]
    learner = Learner(model_init(), MemoryBuffer(0), method, lider,
                      power_rng=np.random.default_rng(entropy + [1]))

    def buffer_step(lr_: Learner, bx, by):
        ce = softmax_cross_entropy(lr_.model.forward(bx), by)
        return _apply(lr_, {"ce": ce}, bx, bx)

    train_epochs(learner, x, y, method.gdumb_fit_epochs, np.random.default_rng(entropy + [0]),
                 step_rule=buffer_step)
    return learner.model


def joint_fit(tasks: Sequence[tuple[np.ndarray, np.ndarray]], model: MLPBackbone,
              method: MethodConfig, epochs: int, seed=0, **kwargs) -> MLPBackbone:
    """I.i.d. training on the union of all tasks (the non-continual upper bound)."""
    x = np.concatenate([t[0] for t in tasks])
    y = np.concatenate([t[1] for t in tasks])
    learner = Learner(model, MemoryBuffer(0), method)
    train_epochs(learner, x, y, epochs, np.random.default_rng([seed, 0]), step_rule=er_step,
                 **kwargs)
    return learner.model


def finetune_run(tasks: Sequence[tuple[np.ndarray, np.ndarray]], model: MLPBackbone,
                 method: MethodConfig, epochs: int, seed=0, **kwargs) -> MLPBackbone:
    """Sequential training with no countermeasure to forgetting."""
    learner = Learner(model, MemoryBuffer(0), method)
    for t, (x, y) in enumerate(tasks):
        train_epochs(learner, x, y, epochs, np.random.default_rng([seed, t]),
                     step_rule=er_step, **kwargs)
    return learner.model
