"""Layer-wise Lipschitz estimates from batch feature maps.

For consecutive feature maps the transmitting matrix ``TM = A^T A`` with
``A = norm(F_cur)^T norm(F_prev)`` is symmetric PSD; its dominant eigenvalue,
found by power iteration, stands in for the spectral norm of the layer.
A cyclic Jacobi eigensolver serves as an exact, non-differentiable oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from .backbone import ForwardTrace, MLPBackbone, forward_with_trace
from .errors import DimensionError
from .tensor import NORM_EPS, Tensor, as_tensor, l2_normalize_rows, matmul, reshape, transpose

TRAIN_POWER_ITERS = 5
ORACLE_POWER_ITERS = 50
JACOBI_TOL = 1e-12


@dataclass
class SpectralEstimate:
    lambdas: list[Tensor]

    def __len__(self) -> int:
        return len(self.lambdas)

    def values(self) -> np.ndarray:
        return np.array([lam.item() for lam in self.lambdas])

    def product(self) -> float:
        return float(np.prod(self.values()))


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def transmitting_matrix(f_prev, f_cur) -> Tensor:
    f_prev, f_cur = as_tensor(f_prev), as_tensor(f_cur)
    if f_prev.ndim != 2 or f_cur.ndim != 2:
        raise DimensionError("feature maps must be 2-D (batch x features)")
    if f_prev.shape[0] != f_cur.shape[0]:
        raise DimensionError(f"batch sizes differ: {f_prev.shape[0]} vs {f_cur.shape[0]}")
    if f_prev.shape[0] == 0:
        raise DimensionError("transmitting matrix of an empty batch")
    a = matmul(transpose(l2_normalize_rows(f_cur)), l2_normalize_rows(f_prev))
    return matmul(transpose(a), a)


def power_iteration(m, iters: int = TRAIN_POWER_ITERS, seed=None) -> Tensor:
    """Dominant eigenvalue of a symmetric PSD matrix as a Rayleigh quotient.

    The iterate is computed on raw values; only the final ``v^T M v`` is
    recorded, so the gradient w.r.t. ``M`` is ``v v^T``.
    """
    m = as_tensor(m)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionError(f"power iteration needs a square matrix, got {m.shape}")
    n = m.shape[0]
    if n < 1:
        raise DimensionError("power iteration on an empty matrix")
    if iters < 1:
        raise ValueError(f"iters must be >= 1, got {iters}")
    v = _as_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    md = m.data
    for _ in range(iters):
        mv = md @ v
        v = mv / max(np.linalg.norm(mv), NORM_EPS)
    row, col = Tensor(v[None, :]), Tensor(v[:, None])
    return reshape(matmul(matmul(row, m), col), ())


@numba.njit(cache=True)
def _jacobi_sweeps(a, tol, max_sweeps):
    n = a.shape[0]
    scale = 0.0
    for i in range(n):
        for j in range(n):
            scale += a[i, j] * a[i, j]
    scale = np.sqrt(scale)
    for _ in range(max_sweeps):
        off = 0.0
        for i in range(n):
            for j in range(n):
                if i != j:
                    off += a[i, j] * a[i, j]
        if np.sqrt(off) <= tol * scale:
            return True
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = 1.0 / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta < 0.0:
                    t = -t
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp = a[k, p]
                    akq = a[k, q]
                    a[k, p] = c * akp - s * akq
                    a[k, q] = s * akp + c * akq
                for k in range(n):
                    apk = a[p, k]
                    aqk = a[q, k]
                    a[p, k] = c * apk - s * aqk
                    a[q, k] = s * apk + c * aqk
                a[p, q] = 0.0
                a[q, p] = 0.0
    return False


def jacobi_eigenvalues(m, tol: float = JACOBI_TOL, max_sweeps: int = 100) -> np.ndarray:
    """All eigenvalues of a symmetric matrix, ascending, by cyclic Jacobi rotations."""
    a = np.array(m.data if isinstance(m, Tensor) else m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {a.shape}")
    asym = np.max(np.abs(a - a.T)) if a.size else 0.0
    if asym > 1e-9 * max(1.0, np.max(np.abs(a)) if a.size else 0.0):
        raise ValueError(f"matrix is not symmetric (max |M - M^T| = {asym:.3e})")
    a = 0.5 * (a + a.T)
    if not _jacobi_sweeps(a, tol, max_sweeps):
        raise ArithmeticError("Jacobi rotations did not converge")
    return np.sort(np.diag(a))


def dense_max_eigenvalue(m) -> float:
    return float(jacobi_eigenvalues(m)[-1])


def layer_lipschitz_estimates(trace: ForwardTrace, iters: int = TRAIN_POWER_ITERS,
                              seed=None) -> SpectralEstimate:
    """One estimate per weight layer: power iteration on ``TM(F^{k-1}, F^k)``."""
    rng = _as_rng(seed)
    maps = trace.feature_maps
    return SpectralEstimate([power_iteration(transmitting_matrix(maps[k - 1], maps[k]), iters, rng)
                             for k in range(1, len(maps))])


def lipschitz_product(lambdas: Sequence[float]) -> float:
    return float(np.prod(np.asarray(lambdas, dtype=np.float64)))


def model_lipschitz_product(model: MLPBackbone, batch, iters: int = ORACLE_POWER_ITERS,
                            seed=0) -> float:
    """Detached product of the layer estimates on ``batch`` (an upper-bound proxy)."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("model_lipschitz_product needs a non-empty 2-D batch")
    frozen = MLPBackbone(list(model.layer_dims), [Tensor(w.data) for w in model.weights])
    _, trace = forward_with_trace(frozen, Tensor(x))
    return layer_lipschitz_estimates(trace, iters, seed).product()
