"""Self-training objectives and divergences over batches of probability rows.

All reductions are batch means. Logs go through :func:`autodiff.log`, which
clamps at 1e-12, so every value stays finite at exact one-hot inputs.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

ROW_SUM_TOL = 1e-6


class ObjectiveKind(str, Enum):
    ENTROPY = "entropy"
    PSEUDO_LABEL_CE = "pseudo_label_ce"
    NEG_SQUARED_PROB = "neg_squared_prob"


class DivergenceKind(str, Enum):
    SYM_KL = "sym_kl"
    KL = "kl"
    REVERSE_KL = "reverse_kl"
    JS = "js"
    MSE = "mse"


def _check_rows(p: Tensor, what: str = "p") -> None:
    if p.data.ndim != 2:
        raise ContractError(f"{what} must be [b, C], got {p.shape}")
    dev = np.abs(p.data.sum(axis=1) - 1.0)
    if dev.size and dev.max() > ROW_SUM_TOL:
        raise ContractError(f"{what} rows are not probability vectors (max |sum-1| = {dev.max():.3g})")


def _neg_plogp_rows(p: Tensor) -> Tensor:
    return ad.scale(ad.row_sum(ad.mul(p, ad.log(p))), -1.0)


def entropy_per_sample(p: Tensor) -> Tensor:
    _check_rows(p)
    return _neg_plogp_rows(p)


def entropy(p: Tensor) -> Tensor:
    """Batch-mean Shannon entropy in nats."""
    return ad.mean(entropy_per_sample(p))


def objective_per_sample(kind: ObjectiveKind, p: Tensor) -> Tensor:
    kind = ObjectiveKind(kind)
    _check_rows(p)
    if kind is ObjectiveKind.ENTROPY:
        return _neg_plogp_rows(p)
    if kind is ObjectiveKind.PSEUDO_LABEL_CE:
        # argmax picks the lowest index on ties; the label itself carries no gradient
        labels = np.argmax(p.data, axis=1)
        onehot = np.zeros(p.shape)
        onehot[np.arange(p.shape[0]), labels] = 1.0
        return ad.scale(ad.row_sum(ad.mul(ad.log(p), Tensor(onehot))), -1.0)
    return ad.scale(ad.row_sum(ad.mul(p, p)), -1.0)


def objective(kind: ObjectiveKind, p: Tensor) -> Tensor:
    return ad.mean(objective_per_sample(kind, p))


def _kl_rows(p: Tensor, q: Tensor) -> Tensor:
    return ad.row_sum(ad.mul(p, ad.sub(ad.log(p), ad.log(q))))


def divergence_per_sample(kind: DivergenceKind, p: Tensor, q_detached: Tensor) -> Tensor:
    kind = DivergenceKind(kind)
    if q_detached.node is not None or q_detached.requires_grad:
        raise ContractError("divergence target must be stop-gradient'ed")
    if p.shape != q_detached.shape:
        raise ContractError(f"shape mismatch {p.shape} vs {q_detached.shape}")
    _check_rows(p)
    _check_rows(q_detached, "q")
    q = q_detached
    if kind is DivergenceKind.KL:
        return _kl_rows(p, q)
    if kind is DivergenceKind.REVERSE_KL:
        return _kl_rows(q, p)
    if kind is DivergenceKind.SYM_KL:
        return ad.add(_kl_rows(p, q), _kl_rows(q, p))
    if kind is DivergenceKind.JS:
        m = ad.scale(ad.add(p, q), 0.5)
        return ad.scale(ad.add(_kl_rows(p, m), _kl_rows(q, m)), 0.5)
    d = ad.sub(p, q)
    return ad.row_sum(ad.mul(d, d))


def divergence(kind: DivergenceKind, p: Tensor, q_detached: Tensor) -> Tensor:
    """Batch-mean ``D(p || q)``; gradients reach only ``p``."""
    return ad.mean(divergence_per_sample(kind, p, q_detached))


def cross_entropy_rows(p: Tensor, q: Tensor) -> Tensor:
    """Per-row ``-sum q log p``."""
    return ad.scale(ad.row_sum(ad.mul(q, ad.log(p))), -1.0)


def zerosiam_loss(
    p_o: Tensor,
    p_r: Tensor,
    alpha: float = 1.0,
    obj: ObjectiveKind = ObjectiveKind.ENTROPY,
    div: DivergenceKind = DivergenceKind.SYM_KL,
) -> Tensor:
    """``obj(p_o) + alpha * D(p_o || sg[p_r])``.

    The target is detached here regardless of what the caller passed. With
    ``alpha == 0`` the divergence is left out of the graph entirely.
    """
    if alpha < 0:
        raise ContractError(f"alpha must be non-negative, got {alpha}")
    base = objective(obj, p_o)
    if alpha == 0:
        return base
    return ad.add(base, ad.scale(divergence(div, p_o, ad.stop_gradient(p_r)), alpha))
