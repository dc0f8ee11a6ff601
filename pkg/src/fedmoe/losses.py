"""Task loss plus the thresholded load-balancing penalty.

Each adapter layer yields a batch-mean routing distribution P.  When that
distribution concentrates past a threshold (its max entry reaching
``theta_th``), the layer contributes KL(P || uniform) to an auxiliary term
that pushes routing back toward balance; below the threshold the layer
contributes exactly zero.  The total objective is
``task + lam * reduce(per_layer_terms)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .errors import ConfigurationError, InputError, UsageError
from .tensor import Tensor

LAYER_REDUCTIONS = ("mean", "sum")


@dataclass(frozen=True)
class AuxLossConfig:
    """Auxiliary-loss knobs: weight, activation threshold, layer reduction."""

    lam: float = 1e-4
    theta_th: float = 0.3
    layer_reduction: str = "mean"

    def __post_init__(self):
        if self.lam < 0.0:
            raise ConfigurationError(f"aux weight lambda must be >= 0, got {self.lam}")
        if not 0.0 < self.theta_th <= 1.0:
            raise ConfigurationError(
                f"theta_th must lie in (0, 1], got {self.theta_th}")
        if self.layer_reduction not in LAYER_REDUCTIONS:
            raise ConfigurationError(
                f"layer_reduction must be one of {LAYER_REDUCTIONS}, "
                f"got {self.layer_reduction!r}")


def uniform_target(n_experts: int) -> np.ndarray:
    """The balanced routing target: 1/M per expert."""
    if n_experts < 1:
        raise ConfigurationError("need at least one expert")
    return np.full(n_experts, 1.0 / n_experts)


def _check_distribution(name: str, values: np.ndarray) -> None:
    if values.ndim != 1:
        raise InputError(f"{name} must be a vector, got shape {values.shape}")
    if (values < 0.0).any():
        raise InputError(f"{name} has negative entries")
    if abs(values.sum() - 1.0) > 1e-6:
        raise InputError(f"{name} sums to {values.sum():.8f}, not 1")


def kl_divergence(p_local, p_global) -> Tensor:
    """KL(P_l || P_g) with 0 log 0 = 0; differentiable in P_l.

    ``p_local`` may be a Tensor on the active tape; ``p_global`` is treated
    as a constant and must be strictly positive.
    """
    p = p_local if isinstance(p_local, Tensor) else Tensor(p_local)
    q = p_global.values if isinstance(p_global, Tensor) else np.asarray(
        p_global, dtype=np.float64)
    _check_distribution("P_l", p.values)
    _check_distribution("P_g", q)
    if (q <= 0.0).any():
        raise InputError("P_g has a zero entry; KL would be undefined")
    return tz.rel_entropy(p, q)


def aux_loss_layer(p_local, cfg: AuxLossConfig) -> Tensor:
    """One layer's auxiliary term: KL to uniform if the gate fires, else 0.

    The gate compares theta = max(P_l) against cfg.theta_th on values only;
    gradients flow through the KL term, never through the gate itself.
    """
    p = p_local if isinstance(p_local, Tensor) else Tensor(p_local)
    _check_distribution("P_l", p.values)
    theta = p.values.max()
    if theta < cfg.theta_th:
        return Tensor(0.0)
    return kl_divergence(p, uniform_target(p.values.size))


def total_loss(task: Tensor, per_layer_aux: list[Tensor], cfg: AuxLossConfig) -> Tensor:
    """``task + lam * reduce(per_layer_aux)``; returns ``task`` itself at lam=0."""
    if cfg.lam == 0.0:
        return task
    if not per_layer_aux:
        raise UsageError("aux weighting is on but no per-layer terms were given")
    aux = per_layer_aux[0]
    for term in per_layer_aux[1:]:
        aux = aux + term
    if cfg.layer_reduction == "mean":
        aux = aux * (1.0 / len(per_layer_aux))
    return task + cfg.lam * aux
