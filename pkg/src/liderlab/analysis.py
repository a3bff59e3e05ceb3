"""Post-hoc diagnostics for a trained backbone.

Decision surfaces around a point, FGSM directions, perturbation-based
robustness scores, the buffer-guessing game and weight-perturbation curves.
None of these functions modifies the model it is given.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .backbone import MLPBackbone
from .errors import ConfigurationError, DimensionError
from .rehearsal import MemoryBuffer
from .tensor import Tensor, backward, softmax, softmax_cross_entropy

log = logging.getLogger(__name__)

DEFAULT_N_PERTURB = 32
DEFAULT_RADIUS = 0.1
DEFAULT_GRID_SIZE = 21


def _masked(logits: np.ndarray, class_mask: Sequence[int] | None, true_class: int):
    if class_mask is None:
        return logits, int(true_class)
    cols = sorted(int(c) for c in class_mask)
    if int(true_class) not in cols:
        raise ConfigurationError(f"true class {true_class} is outside the class mask {cols}")
    return logits[..., cols], cols.index(int(true_class))


def _margin(logits: np.ndarray, t: int) -> np.ndarray:
    """``z_t - max_{i != t} z_i`` along the last axis."""
    others = np.delete(logits, t, axis=-1)
    return logits[..., t] - others.max(axis=-1)


def decision_value(model: MLPBackbone, x, true_class: int,
                   class_mask: Sequence[int] | None = None) -> float:
    """Logit margin of the true class; positive iff the (masked) argmax is correct."""
    z, t = _masked(model.predict(np.asarray(x, dtype=np.float64)), class_mask, true_class)
    if z.shape[-1] < 2:
        raise DimensionError("decision value needs at least two classes")
    return float(_margin(z, t))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _random_unit(dim: int, rng: np.random.Generator) -> np.ndarray:
    return _unit(rng.standard_normal(dim))


def input_gradient(model: MLPBackbone, x, true_class: int) -> np.ndarray:
    """Gradient of the cross-entropy at ``(x, true_class)`` w.r.t. the input."""
    xt = Tensor(np.asarray(x, dtype=np.float64)[None, :], requires_grad=True)
    frozen = MLPBackbone(list(model.layer_dims), [Tensor(w.data) for w in model.weights])
    loss = softmax_cross_entropy(frozen.forward(xt), np.array([int(true_class)]))
    return backward(loss, wrt=[xt])[xt][0]


def fgsm_direction(model: MLPBackbone, x, true_class: int, seed=0) -> np.ndarray:
    """L2-normalised sign of the input gradient (non-targeted FGSM direction)."""
    g = np.sign(input_gradient(model, x, true_class))
    if not np.any(g):
        log.warning("zero input gradient at class %d; using a random direction", true_class)
        return _random_unit(len(g), np.random.default_rng(seed))
    return _unit(g)


@dataclass
class SurfaceGrid:
    """``values[a, b]`` is ``S(x + coeffs[a] * alpha + coeffs[b] * beta)``."""

    values: np.ndarray
    coeffs: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    center: np.ndarray

    @property
    def grid_size(self) -> int:
        return len(self.coeffs)

    def center_value(self) -> float:
        c = self.grid_size // 2
        return float(self.values[c, c])

    def rows(self):
        for a, i in enumerate(self.coeffs):
            for b, j in enumerate(self.coeffs):
                yield float(i), float(j), float(self.values[a, b])


def decision_surface(model: MLPBackbone, x, true_class: int, eps: float = 1.0,
                     grid_size: int = DEFAULT_GRID_SIZE, seed=0,
                     class_mask: Sequence[int] | None = None) -> SurfaceGrid:
    """Evaluate the logit margin on a plane spanned by a random and an FGSM direction."""
    if grid_size < 1 or grid_size % 2 == 0:
        raise ConfigurationError(f"grid_size must be a positive odd number, got {grid_size}")
    if eps < 0:
        raise ConfigurationError(f"eps must be >= 0, got {eps}")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    alpha = _random_unit(len(x), rng)
    beta = fgsm_direction(model, x, true_class, seed=rng)
    coeffs = np.linspace(-eps, eps, grid_size)
    coeffs[grid_size // 2] = 0.0
    pts = (x[None, None, :] + coeffs[:, None, None] * alpha[None, None, :]
           + coeffs[None, :, None] * beta[None, None, :])
    z = model.predict(pts.reshape(-1, len(x)))
    zm, t = _masked(z, class_mask, true_class)
    values = _margin(zm, t).reshape(grid_size, grid_size)
    return SurfaceGrid(values, coeffs, alpha, beta, x.copy())


def robustness_score(model: MLPBackbone, x, true_class: int, task_classes: Sequence[int],
                     n_perturb: int = DEFAULT_N_PERTURB, radius: float = DEFAULT_RADIUS,
                     seed=0) -> float:
    """Mean of ``p_true - max p`` over uniform L-inf perturbations, with the
    softmax restricted to ``task_classes``. Never positive."""
    if n_perturb < 1:
        raise ConfigurationError("n_perturb must be >= 1")
    if radius < 0:
        raise ConfigurationError("radius must be >= 0")
    cols = sorted(int(c) for c in task_classes)
    if int(true_class) not in cols:
        raise ConfigurationError(f"true class {true_class} is not among {cols}")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    pts = x[None, :] + rng.uniform(-radius, radius, size=(n_perturb, len(x)))
    p = softmax(model.predict(pts), mask=cols)
    t = cols.index(int(true_class))
    return float(np.mean(p[:, t] - p.max(axis=1)))


@dataclass(frozen=True)
class ProbeConfig:
    n_perturb: int = DEFAULT_N_PERTURB
    radius: float = DEFAULT_RADIUS
    seed: int = 0


def rank_auc(scores, labels) -> float:
    """Mann-Whitney AUC with average ranks for ties (positives = ``labels`` true)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise ConfigurationError("AUC needs both positive and negative examples")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_points(scores, labels) -> np.ndarray:
    """ROC vertices as rows ``(fpr, tpr, threshold)``, one per distinct score."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        raise ConfigurationError("ROC needs both positive and negative examples")
    order = np.argsort(-scores, kind="mergesort")
    s, lab = scores[order], labels[order]
    tp, fp = np.cumsum(lab), np.cumsum(~lab)
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    pts = np.column_stack([fp[ends] / n_neg, tp[ends] / n_pos, s[ends]])
    return np.vstack([[0.0, 0.0, np.inf], pts])


def trapezoid_auc(points: np.ndarray) -> float:
    return float(np.trapezoid(points[:, 1], points[:, 0]))


def buffer_membership(buffer: MemoryBuffer, task_id: int, n_train: int) -> np.ndarray:
    """Boolean mask over a task's training rows: which ones sit in the buffer."""
    mask = np.zeros(n_train, dtype=bool)
    for e in buffer.entries:
        if e.task_id == task_id and e.source_index is not None:
            mask[e.source_index] = True
    return mask


def buffer_guessing_auc(model: MLPBackbone, buffer: MemoryBuffer, task0, probe=ProbeConfig()):
    """Guess which task-0 training points are buffer residents from their robustness.

    ``task0`` needs ``x_train``, ``y_train`` and ``classes``. Returns the
    rank-statistic AUC and the ROC vertices.
    """
    member = buffer_membership(buffer, 0, len(task0.y_train))
    if not member.any() or member.all():
        raise ConfigurationError("buffer must hold some, but not all, task-0 training points")
    rng = np.random.default_rng(probe.seed)
    seeds = rng.integers(0, 2**63 - 1, size=len(member))
    scores = np.array([
        robustness_score(model, x, y, task0.classes, probe.n_perturb, probe.radius, int(s))
        for x, y, s in zip(task0.x_train, task0.y_train, seeds)])
    return rank_auc(scores, member), roc_points(scores, member)


def weight_perturbation_robustness(model: MLPBackbone, x: np.ndarray, y: np.ndarray,
                                   sigmas: Sequence[float], trials: int = 20, seed=0):
    """Class-IL accuracy under Gaussian weight noise scaled per layer by ``std(W_k)``.

    Returns ``(mean, std)`` arrays aligned with ``sigmas``. The model itself
    is never touched; each trial perturbs a private copy of the weights.
    """
    sigmas = [float(s) for s in sigmas]
    if any(s < 0 for s in sigmas):
        raise ConfigurationError("sigmas must be >= 0")
    if trials < 1:
        raise ConfigurationError("trials must be >= 1")
    base = [w.data for w in model.weights]
    scale = [float(np.std(w)) for w in base]
    rng = np.random.default_rng(seed)
    means, stds = [], []
    for sigma in sigmas:
        accs = []
        for _ in range(trials):
            noisy = [w + sigma * s * rng.standard_normal(w.shape) for w, s in zip(base, scale)]
            pred = np.argmax(model.with_weights(noisy).predict(x), axis=1)
            accs.append(float(np.mean(pred == y)))
        accs = np.asarray(accs)
        # centred on the first trial so identical trials give that value exactly
        means.append(accs[0] + np.mean(accs - accs[0]))
        stds.append(np.std(accs - accs[0]))
    return np.array(means), np.array(stds)


# ------------------------------------------------------------------ emitters

def _write_rows(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows([[repr(float(v)) for v in row] for row in rows])


def write_surface_csv(grid: SurfaceGrid, path) -> None:
    _write_rows(path, ["i", "j", "S"], grid.rows())


def write_roc_csv(points: np.ndarray, path) -> None:
    _write_rows(path, ["fpr", "tpr", "threshold"], points)


def write_robustness_csv(sigmas, means, stds, path) -> None:
    _write_rows(path, ["sigma", "mean_acc", "std_acc"], zip(sigmas, means, stds))
