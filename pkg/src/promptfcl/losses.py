"""Training objectives: cross-entropy, the contrastive-continual hinge, FedProx."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

VARIANTS = ("cprompt", "ce_only", "ce_fedprox")


@dataclass(frozen=True)
class C2LossParams:
    gamma_c2l: float = 0.5
    margin: float = 0.5
    lambda_c2l: float = 0.5

    def __post_init__(self):
        if not self.gamma_c2l > 0:
            raise ValueError(f"gamma_c2l must be > 0, got {self.gamma_c2l}")
        if not 0 <= self.margin <= 1:
            raise ValueError(f"margin must lie in [0, 1], got {self.margin}")
        if not 0 <= self.lambda_c2l <= 1:
            raise ValueError(f"lambda_c2l must lie in [0, 1], got {self.lambda_c2l}")


def cross_entropy(logits, labels) -> Tensor:
    """Mean of ``-log softmax(logits)[label]``; ``logits`` is ``(C,)`` or ``(B, C)``."""
    logits = T.as_tensor(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    B, C = logits.shape
    if labels.shape != (B,):
        raise T.ShapeError(f"cross_entropy: {labels.shape[0]} labels for {B} rows")
    if labels.min() < 0 or labels.max() >= C:
        raise ValueError(f"label out of range for {C} seen classes: {labels.tolist()}")
    picked = T.log_softmax(logits, axis=-1)[np.arange(B), labels]
    return -picked.mean()


def _const(x) -> Tensor:
    return Tensor(x.data if isinstance(x, Tensor) else x)


def c2_loss(P_curr, P_prev, others, params: C2LossParams) -> Tensor:
    """max(|P_curr - P_prev| - gamma * min_i |P_curr - others_i| + margin, 0).

    Distances are Frobenius norms over the whole prompt block. ``P_prev`` and
    ``others`` are treated as constants; ties in the min go to the first
    entry. With no negatives the loss is identically zero.
    """
    P_curr = T.as_tensor(P_curr)
    others = list(others)
    for o in [P_prev] + others:
        if tuple(np.shape(o.data if isinstance(o, Tensor) else o)) != P_curr.shape:
            raise T.ShapeError(f"c2_loss: block shape {np.shape(o.data if isinstance(o, Tensor) else o)} "
                               f"!= current prompt {P_curr.shape}")
    if not others:
        return Tensor(0.0)
    drift = T.l2_distance(P_curr, _const(P_prev))
    dists = [T.l2_distance(P_curr, _const(o)) for o in others]
    nearest = dists[int(np.argmin([d.item() for d in dists]))]
    return T.relu(drift - nearest * params.gamma_c2l + params.margin)


def fedprox_term(local, global_snapshot, mu: float) -> Tensor:
    """(mu / 2) * sum of squared differences over paired parameter blocks."""
    if mu < 0:
        raise ValueError(f"mu must be >= 0, got {mu}")
    local = [T.as_tensor(t) for t in (local if isinstance(local, (list, tuple)) else [local])]
    snap = global_snapshot if isinstance(global_snapshot, (list, tuple)) else [global_snapshot]
    if len(local) != len(snap):
        raise T.ShapeError(f"fedprox_term: {len(local)} local blocks vs {len(snap)} global blocks")
    total = Tensor(0.0)
    for p, g in zip(local, snap):
        g = _const(g)
        if p.shape != g.shape:
            raise T.ShapeError(f"fedprox_term: shapes {p.shape} and {g.shape} differ")
        d = p - g
        total = total + (d * d).sum()
    return total * (mu / 2.0)


def total_loss(ce, c2l, lambda_c2l: float) -> Tensor:
    return T.as_tensor(ce) + T.as_tensor(c2l) * float(lambda_c2l)
