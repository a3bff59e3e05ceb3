"""Lipschitz-driven regulariser for rehearsal.

Two terms over the per-layer estimates ``lam_k`` of a designated batch
(replay examples by default):

* ``(1/K) sum |lam_k - c_k|`` pulls every layer toward a target ``c_k``,
  learned by gradient descent or held fixed;
* ``(1/K) sum |lam_k|`` pushes the estimates themselves toward zero.

The total is ``alpha * first + beta * second``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .backbone import MLPBackbone, forward_with_trace
from .errors import ConfigurationError, DimensionError
from .spectral import TRAIN_POWER_ITERS, SpectralEstimate, layer_lipschitz_estimates
from .tensor import Tensor, abs_mean, add, mul, stack, sub

TARGET_MODES = ("learned", "fixed")
REGULARIZATION_TARGETS = ("buffer", "stream")


@dataclass(frozen=True)
class LiderConfig:
    alpha: float = 0.1
    beta: float = 0.1
    power_iters: int = TRAIN_POWER_ITERS
    target_mode: str = "learned"
    fixed_target: float = 1.0
    # None: use the backbone learning rate
    target_lr: float | None = None
    regularization_target: str = "buffer"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError(f"alpha and beta must be >= 0, got {self.alpha}, {self.beta}")
        if int(self.power_iters) < 1:
            raise ConfigurationError(f"power_iters must be >= 1, got {self.power_iters}")
        if self.target_mode not in TARGET_MODES:
            raise ConfigurationError(f"target_mode must be one of {TARGET_MODES}")
        if self.regularization_target not in REGULARIZATION_TARGETS:
            raise ConfigurationError(
                f"regularization_target must be one of {REGULARIZATION_TARGETS}")
        if not np.isfinite(self.fixed_target):
            raise ConfigurationError("fixed_target must be finite")
        if self.target_lr is not None and not self.target_lr > 0:
            raise ConfigurationError(f"target_lr must be positive, got {self.target_lr}")

    @property
    def active(self) -> bool:
        return self.alpha > 0 or self.beta > 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LipschitzTargets:
    """Per-layer targets ``c_k``; placeholders until the first regularised step."""

    c: list[Tensor] = field(default_factory=list)
    initialized: bool = False

    @classmethod
    def for_layers(cls, n_layers: int) -> "LipschitzTargets":
        return cls([Tensor(0.0) for _ in range(n_layers)], initialized=False)

    def __len__(self) -> int:
        return len(self.c)

    def values(self) -> np.ndarray:
        return np.array([t.item() for t in self.c])

    @property
    def learnable(self) -> list[Tensor]:
        return [t for t in self.c if t.requires_grad]

    def initialize(self, estimate: SpectralEstimate, cfg: LiderConfig) -> None:
        if cfg.target_mode == "fixed":
            self.c = [Tensor(cfg.fixed_target) for _ in estimate.lambdas]
        else:
            # start at the measured estimates so the first pull is zero
            self.c = [Tensor(lam.data, requires_grad=True) for lam in estimate.lambdas]
        self.initialized = True


def loss_c_lip(est: SpectralEstimate, targets: LipschitzTargets | Sequence[Tensor]) -> Tensor:
    c = targets.c if isinstance(targets, LipschitzTargets) else list(targets)
    if len(c) != len(est.lambdas):
        raise DimensionError(f"{len(est.lambdas)} estimates but {len(c)} targets")
    if not c:
        raise DimensionError("empty estimate")
    return abs_mean(sub(stack(est.lambdas), stack(c)))


def loss_0_lip(est: SpectralEstimate) -> Tensor:
    if not est.lambdas:
        raise DimensionError("empty estimate")
    return abs_mean(stack(est.lambdas))


def lider_loss(model: MLPBackbone, buffer_x, targets: LipschitzTargets, cfg: LiderConfig,
               rng: np.random.Generator, stream_x=None) -> Tensor:
    """Regulariser on the designated batch; exact zero when there is nothing to regularise.

    In buffer mode ``stream_x`` is never read.
    """
    if not cfg.active:
        return Tensor(0.0)
    batch = buffer_x if cfg.regularization_target == "buffer" else stream_x
    if batch is None or len(batch) == 0:
        return Tensor(0.0)
    _, trace = forward_with_trace(model, np.asarray(batch, dtype=np.float64))
    est = layer_lipschitz_estimates(trace, cfg.power_iters, rng)
    if not targets.initialized:
        targets.initialize(est, cfg)
    total = Tensor(0.0)
    if cfg.alpha > 0:
        total = add(total, mul(loss_c_lip(est, targets), cfg.alpha))
    if cfg.beta > 0:
        total = add(total, mul(loss_0_lip(est), cfg.beta))
    return total
