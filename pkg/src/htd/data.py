"""Hyperspectral cube / mask / spectrum file formats, target-spectrum
selection, and a synthetic scene generator for desk-scale end-to-end runs.

Cube layout is band-interleaved-by-pixel: each pixel's spectrum is
contiguous, matching the per-pixel access pattern of the detector.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

__all__ = [
    "HsiCube",
    "SyntheticSceneSpec",
    "FormatError",
    "read_cube",
    "write_cube",
    "read_mask",
    "write_mask",
    "read_spectrum",
    "write_spectrum",
    "select_target_spectrum",
    "generate_scene",
]

CUBE_MAGIC = b"HSB1"
MASK_MAGIC = b"HSM1"


class FormatError(ValueError):
    """Malformed on-disk artifact."""


@dataclass
class HsiCube:
    values: np.ndarray  # (H, W, B) float32

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def bands(self) -> int:
        return self.values.shape[2]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise FormatError(f"cube must be (H, W, B), got shape {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise FormatError("cube contains non-finite values")


@dataclass
class SyntheticSceneSpec:
    height: int = 64
    width: int = 64
    bands: int = 60
    endmembers: int = 4
    snr_db: float = 30.0
    abundance_low: float = 0.3
    abundance_high: float = 0.7
    target_count: int = 40
    seed: int = 7

    def validate(self) -> None:
        if min(self.height, self.width, self.bands) < 1:
            raise ValueError("cube extents must be positive")
        if self.endmembers < 2:
            raise ValueError("need at least 2 background endmembers")
        if not 0.0 < self.abundance_low <= self.abundance_high <= 1.0:
            raise ValueError("abundance range must satisfy 0 < lo <= hi <= 1")
        if not 0 < self.target_count <= self.height * self.width:
            raise ValueError("target count must fit in the scene")


# -- binary formats ------------------------------------------------------------


def write_cube(path, cube: HsiCube) -> None:
    with open(path, "wb") as fh:
        fh.write(CUBE_MAGIC)
        fh.write(struct.pack("<III", cube.height, cube.width, cube.bands))
        fh.write(cube.values.astype("<f4").tobytes())


def read_cube(path) -> HsiCube:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CUBE_MAGIC:
            raise FormatError(f"bad cube magic {magic!r} at offset 0 (expected HSB1)")
        header = fh.read(12)
        if len(header) != 12:
            raise FormatError("truncated cube header")
        h, w, b = struct.unpack("<III", header)
        payload = fh.read()
    expected = 4 * h * w * b
    if len(payload) != expected:
        raise FormatError(
            f"truncated cube payload: expected {expected} bytes, got {len(payload)}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(h, w, b)
    if not np.isfinite(values).all():
        raise FormatError("cube payload contains non-finite values")
    return HsiCube(values=values.copy())


def write_mask(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2 or not np.isin(mask, (0, 1)).all():
        raise FormatError("mask must be a 2-D array of 0/1")
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(MASK_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(mask.astype(np.uint8).tobytes())


def read_mask(path, cube: HsiCube | None = None) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MASK_MAGIC:
            raise FormatError(f"bad mask magic {magic!r} at offset 0 (expected HSM1)")
        h, w = struct.unpack("<II", fh.read(8))
        payload = fh.read()
    if len(payload) != h * w:
        raise FormatError(
            f"truncated mask payload: expected {h * w} bytes, got {len(payload)}"
        )
    mask = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    if not np.isin(mask, (0, 1)).all():
        raise FormatError("mask bytes must be 0 or 1")
    if cube is not None and (h, w) != (cube.height, cube.width):
        raise FormatError(
            f"mask extent {(h, w)} does not match cube {(cube.height, cube.width)}"
        )
    return mask.copy()


def write_spectrum(path, spectrum: np.ndarray) -> None:
    spectrum = np.asarray(spectrum, dtype=np.float64).reshape(-1)
    with open(path, "w") as fh:
        for v in spectrum:
            fh.write(f"{float(v)!r}\n")


def read_spectrum(path, cube: HsiCube | None = None) -> np.ndarray:
    lines = [ln for ln in open(path).read().splitlines() if ln.strip()]
    try:
        spectrum = np.array([float(ln) for ln in lines], dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"spectrum file {path}: {exc}") from exc
    if cube is not None and spectrum.shape[0] != cube.bands:
        raise FormatError(
            f"spectrum has {spectrum.shape[0]} bands, cube has {cube.bands}"
        )
    return spectrum


# -- target selection ---------------------------------------------------------


def select_target_spectrum(cube: HsiCube, mask: np.ndarray) -> np.ndarray:
    """The target pixel closest (Euclidean) to the mean target spectrum;
    ties break toward the lowest row-major index."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise ValueError("mask contains no target pixels")
    pixels = cube.values[mask].astype(np.float64)
    mean = pixels.mean(axis=0)
    idx = int(np.argmin(np.linalg.norm(pixels - mean, axis=1)))
    return pixels[idx]


# -- synthetic scene ------------------------------------------------------------


def _smooth_endmember(bands: int, rng: np.random.Generator) -> np.ndarray:
    idx = np.arange(bands, dtype=np.float64)
    n_gauss = int(rng.integers(3, 6))
    sig = np.zeros(bands)
    for _ in range(n_gauss):
        center = rng.uniform(0, bands)
        width = rng.uniform(bands / 20.0, bands / 6.0)
        amp = rng.uniform(0.4, 1.0)
        sig += amp * np.exp(-((idx - center) ** 2) / (2.0 * width ** 2))
    sig = np.clip(sig, 0.0, None)
    return sig / sig.max()


def generate_scene(spec: SyntheticSceneSpec) -> tuple[HsiCube, np.ndarray, np.ndarray]:
    """Smooth background endmembers mixed by a spatially smoothed simplex
    abundance field, an implanted distinct target signature, white Gaussian
    noise at the requested SNR.  Returns (cube, mask, target signature)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h, w, b, e = spec.height, spec.width, spec.bands, spec.endmembers

    endmembers = np.stack([_smooth_endmember(b, rng) for _ in range(e)])

    # target signature: regenerate until spectrally distinct from the background
    for _ in range(64):
        target = _smooth_endmember(b, rng)
        cos = endmembers @ target / (
            np.linalg.norm(endmembers, axis=1) * np.linalg.norm(target)
        )
        if cos.max() < 0.9:
            break

    fields = rng.standard_normal((e, h, w))
    fields = np.stack([gaussian_filter(f, sigma=min(h, w) / 10.0) for f in fields])
    fields /= np.abs(fields).max(axis=(1, 2), keepdims=True) + 1e-12
    abundances = np.exp(3.0 * fields)
    abundances /= abundances.sum(axis=0, keepdims=True)

    clean = np.einsum("ehw,eb->hwb", abundances, endmembers, optimize=True)

    flat = rng.choice(h * w, size=spec.target_count, replace=False)
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[flat // w, flat % w] = 1
    fracs = rng.uniform(spec.abundance_low, spec.abundance_high, size=spec.target_count)
    for loc, f in zip(flat, fracs):
        r, c = loc // w, loc % w
        clean[r, c] = f * target + (1.0 - f) * clean[r, c]

    if np.isinf(spec.snr_db):
        noisy = clean
    else:
        signal_power = float(np.mean(clean ** 2))
        noise_power = signal_power / (10.0 ** (spec.snr_db / 10.0))
        noisy = clean + rng.normal(0.0, np.sqrt(noise_power), size=clean.shape)

    return HsiCube(values=noisy.astype(np.float32)), mask, target.copy()
