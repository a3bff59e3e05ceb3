"""Dense float64 arrays with reverse-mode differentiation.

Every operation on a tracked input (a leaf with ``requires_grad`` or the
output of another tracked operation) attaches an :class:`OpRecord` to its
result. :func:`backward` collects the records reachable from a scalar loss
into a :class:`Tape` in topological order and walks it in reverse. A tape
can be walked once: its records are consumed, and a second backward pass
through any of them raises :class:`~liderlab.errors.TapeError`.

Only the operations the rest of the package needs are provided; there is no
broadcasting beyond tensor-with-python-scalar arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, DimensionError, NumericError, TapeError

NORM_EPS = 1e-12

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass(eq=False)
class OpRecord:
    op: str
    inputs: tuple["Tensor", ...]
    backward: BackwardFn | None
    consumed: bool = False


class Tensor:
    """Immutable dense array; ``data`` is a read-only float64 ndarray."""

    __slots__ = ("data", "requires_grad", "grad", "_record")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._record: OpRecord | None = None

    @classmethod
    def _result(cls, arr: np.ndarray, op: str, inputs: tuple["Tensor", ...],
                backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        arr.setflags(write=False)
        out.data = arr
        out.requires_grad = False
        out.grad = None
        out._record = OpRecord(op, inputs, backward) if _tracked(inputs) else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self._record is not None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _not_scalar(t: Tensor):
    raise DimensionError(f"item() needs a single element, got shape {t.shape}")


def _tracked(inputs: Iterable[Tensor]) -> bool:
    return any(t.requires_grad or t._record is not None for t in inputs)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar_like(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar_like(b):
        s = float(b)
        return Tensor._result(a.data + s, "add_scalar", (a,), lambda g: (g,))
    b = as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return Tensor._result(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar_like(b):
        return add(a, -float(b))
    b = as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} differ")
    return Tensor._result(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return Tensor._result(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if _is_scalar_like(b):
        s = float(b)
        return Tensor._result(a.data * s, "scale", (a,), lambda g: (g * s,))
    b = as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return Tensor._result(ad * bd, "mul", (a, b), lambda g: (g * bd, g * ad))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor._result(np.where(mask, a.data, 0.0), "relu", (a,),
                          lambda g: (g * mask,))


# ------------------------------------------------------------------ structural

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")
    ad, bd = a.data, b.data
    return Tensor._result(ad @ bd, "matmul", (a, b),
                          lambda g: (g @ bd.T, ad.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D operand, got {a.shape}")
    return Tensor._result(a.data.T, "transpose", (a,), lambda g: (g.T,))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} into {shape}")
    src = a.shape
    return Tensor._result(a.data.reshape(shape), "reshape", (a,),
                          lambda g: (g.reshape(src),))


def stack(tensors: Sequence[Tensor]) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise DimensionError("stack needs at least one tensor")
    if any(t.shape != ts[0].shape for t in ts):
        raise DimensionError("stack: all shapes must agree")
    return Tensor._result(np.stack([t.data for t in ts]), "stack", ts,
                          lambda g: tuple(g[i] for i in range(len(ts))))


def tsum(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    return Tensor._result(np.sum(a.data), "sum", (a,),
                          lambda g: (np.full(shape, float(g)),))


def tmean(a) -> Tensor:
    a = as_tensor(a)
    shape, n = a.shape, a.size
    return Tensor._result(np.mean(a.data), "mean", (a,),
                          lambda g: (np.full(shape, float(g) / n),))


# --------------------------------------------------------------- nonlinearity

def l2_normalize_rows(a, eps: float = NORM_EPS) -> Tensor:
    """Divide each row by ``max(||row||_2, eps)``; all-zero rows stay zero."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"l2_normalize_rows needs a 2-D operand, got {a.shape}")
    norms = np.sqrt(np.sum(a.data * a.data, axis=1))
    live = norms > eps
    denom = np.where(live, norms, eps)[:, None]
    out = a.data / denom

    def backward(g):
        radial = np.sum(g * out, axis=1, keepdims=True) * out
        return (np.where(live[:, None], g - radial, g) / denom,)

    return Tensor._result(out, "l2_normalize_rows", (a,), backward)


def softmax_cross_entropy(logits, labels, mask: Sequence[int] | None = None) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under a softmax of ``logits``.

    With ``mask`` the softmax runs over those columns only; the remaining
    columns take no part in the value and receive exactly zero gradient.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be 2-D, got {logits.shape}")
    n, n_classes = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for {n} rows of logits")
    if n == 0:
        raise DimensionError("softmax_cross_entropy on an empty batch")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ConfigurationError(f"labels must lie in [0, {n_classes})")

    if mask is None:
        cols = np.arange(n_classes)
        pos = labels
    else:
        cols = np.asarray(sorted(set(int(c) for c in mask)), dtype=np.int64)
        if cols.size == 0 or cols[0] < 0 or cols[-1] >= n_classes:
            raise ConfigurationError(f"mask {list(mask)} outside [0, {n_classes})")
        lookup = np.full(n_classes, -1, dtype=np.int64)
        lookup[cols] = np.arange(cols.size)
        pos = lookup[labels]
        if np.any(pos < 0):
            bad = sorted(set(labels[pos < 0].tolist()))
            raise ConfigurationError(f"labels {bad} are outside the class mask {cols.tolist()}")

    sub = logits.data[:, cols]
    shifted = sub - sub.max(axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(shifted), axis=1))
    rows = np.arange(n)
    value = np.mean(log_z - shifted[rows, pos])
    probs = np.exp(shifted - log_z[:, None])

    def backward(g):
        d_sub = probs.copy()
        d_sub[rows, pos] -= 1.0
        full = np.zeros((n, n_classes))
        full[:, cols] = d_sub * (float(g) / n)
        return (full,)

    return Tensor._result(value, "softmax_cross_entropy", (logits,), backward)


def softmax(logits: np.ndarray, mask: Sequence[int] | None = None) -> np.ndarray:
    """Plain (untracked) row softmax, optionally over a column subset."""
    z = np.asarray(logits, dtype=np.float64)
    if mask is not None:
        z = z[..., list(mask)]
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def mse(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data
    n = diff.size
    scale = 2.0 / n

    def backward(g):
        ga = diff * (scale * float(g))
        return (ga, -ga)

    return Tensor._result(np.mean(diff * diff), "mse", (a, b), backward)


def abs_mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.size
    sign = np.sign(a.data)  # sign(0) == 0: the zero subgradient
    return Tensor._result(np.mean(np.abs(a.data)), "abs_mean", (a,),
                          lambda g: (sign * (float(g) / n),))


# --------------------------------------------------------------------- backward

class Tape:
    """Records reachable from one loss, inputs always before consumers."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @property
    def records(self) -> list[OpRecord]:
        return [n._record for n in self.nodes]

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(loss, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or node._record is None:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for parent in node._record.inputs:
                if parent._record is not None and id(parent) not in seen:
                    stack_.append((parent, False))
        return cls(order)

    def run(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        for rec in self.records:
            if rec.consumed:
                raise TapeError(f"backward through an already-consumed '{rec.op}' record; "
                                "recompute the forward pass first")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        leaves: dict[int, Tensor] = {}
        if loss._record is None and loss.requires_grad:
            leaves[id(loss)] = loss
        for node in reversed(self.nodes):
            rec = node._record
            g = grads.pop(id(node), None)
            if g is not None:
                for parent, pg in zip(rec.inputs, rec.backward(g)):
                    if pg is None or not parent.tracked:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
                    if parent._record is None:
                        leaves[key] = parent
            rec.consumed = True
            rec.backward = None

        result: dict[Tensor, np.ndarray] = {}
        for key, leaf in leaves.items():
            leaf.grad = grads[key]
            result[leaf] = leaf.grad
        for leaf in wrt or ():
            if leaf not in result:
                leaf.grad = np.zeros(leaf.shape)
                result[leaf] = leaf.grad
        return result


def backward(loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Populate ``.grad`` on every grad-enabled leaf reachable from ``loss``.

    Leaves listed in ``wrt`` that the loss does not depend on get zeros.
    Returns a mapping leaf -> gradient (keyed by identity).
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    return Tape.from_loss(loss).run(loss, wrt)


def sgd_step(params: Sequence[Tensor], grads: dict[Tensor, np.ndarray], lr: float) -> list[Tensor]:
    """Return fresh leaves ``p - lr * g``; params without a gradient are copied through."""
    if not lr > 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    updated = []
    for p in params:
        g = grads.get(p)
        if g is None:
            updated.append(Tensor(p.data, requires_grad=True))
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter of shape {p.shape}")
        updated.append(Tensor(p.data - lr * g, requires_grad=True))
    return updated
