"""Inference: score every pixel against the prior target spectrum and apply
nonlinear background suppression.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, no_grad

__all__ = ["ScoreMap", "detect", "suppress", "write_scores", "read_scores"]

SCORES_MAGIC = b"HTDS"


@dataclass
class ScoreMap:
    raw: np.ndarray          # (H, W) cosine statistic, in [-1, 1]
    suppressed: np.ndarray   # (H, W) after background suppression, in (0, 1]
    delta: float


def suppress(mu: np.ndarray, delta: float = 0.1) -> np.ndarray:
    """exp(-(mu - 1)^2 / delta); strictly increasing in mu on [-1, 1]."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    mu = np.asarray(mu, dtype=np.float64)
    return np.exp(-((mu - 1.0) ** 2) / delta)


def detect(cube, target_spectrum, model, delta: float = 0.1, chunk: int = 512) -> ScoreMap:
    """Cosine similarity between each pixel's feature and the target feature."""
    values = cube.values if hasattr(cube, "values") else np.asarray(cube)
    h, w, bands = values.shape
    target = np.asarray(target_spectrum, dtype=np.float64).reshape(-1)
    if target.shape[0] != bands:
        raise ValueError(
            f"target spectrum has {target.shape[0]} bands, cube has {bands}"
        )
    dtype = model.dtype
    with no_grad():
        tfeat = model.forward(Tensor(target.astype(dtype))).data.astype(np.float64)
        tfeat /= np.linalg.norm(tfeat)
        flat = values.reshape(h * w, bands).astype(dtype)
        mu = np.empty(h * w, dtype=np.float64)
        for start in range(0, h * w, chunk):
            feats = model.forward(Tensor(flat[start:start + chunk])).data.astype(np.float64)
            norms = np.linalg.norm(feats, axis=1)
            mu[start:start + len(feats)] = (feats @ tfeat) / norms
    mu = np.clip(mu.reshape(h, w), -1.0, 1.0)
    return ScoreMap(raw=mu, suppressed=suppress(mu, delta), delta=delta)


def write_scores(path, scores: np.ndarray) -> None:
    scores = np.asarray(scores)
    if scores.ndim != 2:
        raise ValueError(f"score map must be 2-D, got shape {scores.shape}")
    h, w = scores.shape
    with open(path, "wb") as fh:
        fh.write(SCORES_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(scores.astype("<f4").tobytes())


def read_scores(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SCORES_MAGIC:
            raise ValueError(f"bad score-map magic {magic!r} at offset 0 (expected HTDS)")
        h, w = struct.unpack("<II", fh.read(8))
        payload = fh.read()
    expected = 4 * h * w
    if len(payload) != expected:
        raise ValueError(
            f"truncated score map: expected {expected} payload bytes, got {len(payload)}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(h, w).astype(np.float64)
