"""Spectrally contrastive objective over a batch of aligned feature pairs.

Row i of the two feature matrices is the positive pair; every other row of
the second matrix is a negative for anchor i.  Only the x-anchored form is
used (no symmetrized term).
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor

__all__ = ["cosine_rows", "pair_loss", "batch_loss"]


def _check_features(x: Tensor, y: Tensor) -> None:
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError(
            f"feature batches must be aligned (P, d) matrices, got {x.shape} and {y.shape}"
        )
    for name, t in (("x", x), ("y", y)):
        norms = np.linalg.norm(t.data, axis=1)
        if not np.isfinite(t.data).all():
            raise FloatingPointError(f"non-finite {name} features")
        if (norms == 0).any():
            raise ValueError(f"zero-norm {name} feature row")


def cosine_rows(x: Tensor, y: Tensor) -> Tensor:
    """(P, P) matrix of cosine similarities between rows of x and rows of y."""
    xn = x / ((x * x).sum(axis=1, keepdims=True)).sqrt()
    yn = y / ((y * y).sum(axis=1, keepdims=True)).sqrt()
    return xn @ yn.T


def batch_loss(x: Tensor, y: Tensor, alpha: float = 0.1) -> Tensor:
    """Mean over anchors of -log softmax(cos/alpha) at the positive pair."""
    if alpha <= 0:
        raise ValueError(f"temperature must be positive, got {alpha}")
    x, y = Tensor._lift(x), Tensor._lift(y)
    _check_features(x, y)
    p = x.shape[0]
    sims = cosine_rows(x, y) * (1.0 / alpha)
    shift = Tensor(sims.data.max(axis=1, keepdims=True))  # constant, stability only
    lse = (sims - shift).exp().sum(axis=1).log() + shift.reshape(-1)
    idx = np.arange(p)
    pos = sims[idx, idx]
    return (lse - pos).mean()


def pair_loss(i: int, x: Tensor, y: Tensor, alpha: float = 0.1) -> Tensor:
    """Loss contribution of anchor i alone."""
    if alpha <= 0:
        raise ValueError(f"temperature must be positive, got {alpha}")
    x, y = Tensor._lift(x), Tensor._lift(y)
    _check_features(x, y)
    sims = cosine_rows(x[i:i + 1], y) * (1.0 / alpha)
    shift = Tensor(sims.data.max())
    lse = (sims - shift).exp().sum().log() + shift
    return lse - sims[0, i]
