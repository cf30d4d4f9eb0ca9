"""Spatial-encoded spectral augmentation: each sampled patch yields a
(view, center) training pair, the view being the cosine-softmax-weighted
combination of the patch pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Patch",
    "extract_patch",
    "sesa_weights",
    "sesa_view",
    "sesa_pairs",
    "sample_batch",
    "epoch_batches",
]

_NORM_GUARD = 1e-12


@dataclass
class Patch:
    pixels: np.ndarray      # (p*p, B), row-major over the window
    center: np.ndarray      # (B,)
    location: tuple[int, int]

    @property
    def size(self) -> int:
        return int(np.sqrt(self.pixels.shape[0]))


def _window_indices(rows, cols, p: int, h: int, w: int):
    offs = np.arange(p) - p // 2
    rr = np.clip(np.asarray(rows)[..., None] + offs, 0, h - 1)
    cc = np.clip(np.asarray(cols)[..., None] + offs, 0, w - 1)
    return rr, cc


def extract_patch(values: np.ndarray, row: int, col: int, p: int) -> Patch:
    """Clamp-to-border window around (row, col); center at index (p*p-1)//2."""
    if p % 2 == 0:
        raise ValueError(f"patch size must be odd, got {p}")
    h, w, b = values.shape
    rr, cc = _window_indices(row, col, p, h, w)
    pixels = values[rr[:, None], cc[None, :]].reshape(p * p, b)
    return Patch(pixels=pixels, center=values[row, col].copy(), location=(row, col))


def sesa_weights(patch: Patch) -> np.ndarray:
    """Softmax over cosine similarities between the center and each pixel."""
    pix = np.asarray(patch.pixels, dtype=np.float64)
    y = np.asarray(patch.center, dtype=np.float64)
    if not (np.isfinite(pix).all() and np.isfinite(y).all()):
        raise FloatingPointError("sesa_weights: non-finite spectra")
    norms = np.linalg.norm(pix, axis=1) + _NORM_GUARD
    ynorm = np.linalg.norm(y) + _NORM_GUARD
    cos = pix @ y / (norms * ynorm)
    cos -= cos.max()
    w = np.exp(cos)
    return w / w.sum()


def _convex_mix(pix: np.ndarray, y: np.ndarray, w: np.ndarray) -> np.ndarray:
    # evaluated as y + sum w_i (P_i - y) so degenerate patches reproduce y
    # exactly; the clip pins the result inside the per-band hull against
    # 1-ulp summation drift
    x = y + np.einsum("...q,...qb->...b", w, pix - y[..., None, :], optimize=True)
    return np.clip(x, pix.min(axis=-2), pix.max(axis=-2))


def sesa_view(patch: Patch) -> np.ndarray:
    """Convex combination of the patch pixels under the similarity weights."""
    w = sesa_weights(patch)
    return _convex_mix(patch.pixels.astype(np.float64), patch.center.astype(np.float64), w)


def sesa_pairs(
    values: np.ndarray, centers: np.ndarray, p: int
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized (view, center) pairs for a set of (row, col) centers."""
    if p % 2 == 0:
        raise ValueError(f"patch size must be odd, got {p}")
    h, w, b = values.shape
    centers = np.asarray(centers)
    rr, cc = _window_indices(centers[:, 0], centers[:, 1], p, h, w)
    pix = values[rr[:, :, None], cc[:, None, :]].reshape(len(centers), p * p, b)
    pix = pix.astype(np.float64)
    y = values[centers[:, 0], centers[:, 1]].astype(np.float64)
    norms = np.linalg.norm(pix, axis=2) + _NORM_GUARD
    ynorm = np.linalg.norm(y, axis=1) + _NORM_GUARD
    cos = np.einsum("kqb,kb->kq", pix, y, optimize=True) / (norms * ynorm[:, None])
    cos -= cos.max(axis=1, keepdims=True)
    wts = np.exp(cos)
    wts /= wts.sum(axis=1, keepdims=True)
    return _convex_mix(pix, y, wts), y


def sample_batch(cube, p: int, batch: int, rng: np.random.Generator):
    """Draw `batch` centers uniformly without replacement and build pairs.

    Returns a list of (view, center, (row, col)).
    """
    values = cube.values if hasattr(cube, "values") else np.asarray(cube)
    h, w, _ = values.shape
    n = h * w
    if batch > n:
        raise ValueError(f"batch size {batch} exceeds pixel count {n}")
    flat = rng.choice(n, size=batch, replace=False)
    centers = np.stack([flat // w, flat % w], axis=1)
    x, y = sesa_pairs(values, centers, p)
    return [
        (x[i], y[i], (int(centers[i, 0]), int(centers[i, 1])))
        for i in range(batch)
    ]


def epoch_batches(cube, p: int, batch: int, rng: np.random.Generator):
    """One epoch: a fresh permutation of all pixels chunked into batches
    (the last chunk may be short).  Yields (views, centers) arrays."""
    values = cube.values if hasattr(cube, "values") else np.asarray(cube)
    h, w, _ = values.shape
    n = h * w
    order = rng.permutation(n)
    for start in range(0, n, batch):
        flat = order[start:start + batch]
        centers = np.stack([flat // w, flat % w], axis=1)
        yield sesa_pairs(values, centers, p)
