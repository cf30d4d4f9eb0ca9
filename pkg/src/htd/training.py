"""AdamW optimization with linear warmup followed by a cosine decay,
driving the augmentation -> encoder -> contrastive-loss pipeline.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .augment import epoch_batches
from .autodiff import Tensor
from .loss import batch_loss
from .model import ModelConfig, SpectralEncoder

__all__ = [
    "TrainConfig",
    "AdamW",
    "lr_at",
    "train",
    "load_config",
    "DivergenceError",
]


class DivergenceError(RuntimeError):
    """Raised when the loss stops being finite."""


@dataclass
class TrainConfig:
    epochs: int = 200
    batch: int = 80
    base_lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_fraction: float = 0.10
    alpha: float = 0.1
    patch: int = 5
    seed: int = 0
    precision: str = "f32"  # f32 | f64
    # encoder hyperparameters (band count comes from the cube)
    group_length: int = 12
    embed_size: int = 16
    state_size: int = 16
    feature_size: int = 32
    depth: int = 1
    leaky_slope: float = 0.01

    def validate(self) -> None:
        positive = [
            "epochs", "batch", "base_lr", "weight_decay", "alpha", "patch",
            "group_length", "embed_size", "state_size", "feature_size", "depth",
        ]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.patch % 2 == 0:
            raise ValueError("patch size must be odd")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    def model_config(self, bands: int) -> ModelConfig:
        return ModelConfig(
            bands=bands,
            group_length=self.group_length,
            embed_size=self.embed_size,
            state_size=self.state_size,
            feature_size=self.feature_size,
            depth=self.depth,
            leaky_slope=self.leaky_slope,
        )


_INT_FIELDS = {
    "epochs", "batch", "patch", "seed", "group_length", "embed_size",
    "state_size", "feature_size", "depth",
}


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    """Plain-text `key = value` lines, `#` comments."""
    cfg = base or TrainConfig()
    known = {f.name for f in fields(TrainConfig)}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        if key == "precision":
            setattr(cfg, key, value)
        elif key in _INT_FIELDS:
            setattr(cfg, key, int(value))
        else:
            setattr(cfg, key, float(value))
    cfg.validate()
    return cfg


class AdamW:
    """Decoupled weight decay Adam."""

    def __init__(
        self,
        params: dict[str, Tensor],
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise DivergenceError(f"non-finite gradient for parameter {name!r}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p.data = p.data - lr * (
                mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data
            )


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear 0 -> base_lr over the warmup span, then cosine decay to 0 at
    the final step."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    warmup = max(1, math.ceil(cfg.warmup_fraction * total_steps))
    if step < warmup:
        return cfg.base_lr * step / warmup
    span = max(1, total_steps - 1 - warmup)
    progress = (step - warmup) / span
    return cfg.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def train(
    cube,
    cfg: TrainConfig,
    out_dir,
    progress: bool = False,
) -> tuple[SpectralEncoder, list[tuple[int, float, float]]]:
    """Full training run.  Writes `loss.csv` and `model.ckpt` under out_dir;
    on divergence the last finished epoch's checkpoint is kept and
    DivergenceError is raised.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    values = cube.values if hasattr(cube, "values") else np.asarray(cube)
    h, w, bands = values.shape
    values = values.astype(cfg.dtype)

    rng = np.random.default_rng(cfg.seed)
    model = SpectralEncoder(cfg.model_config(bands), rng=rng, dtype=cfg.dtype)
    opt = AdamW(model.parameters(), weight_decay=cfg.weight_decay)

    n_pixels = h * w
    steps_per_epoch = math.ceil(n_pixels / cfg.batch)
    total_steps = cfg.epochs * steps_per_epoch

    ckpt_path = out_dir / "model.ckpt"
    log_path = out_dir / "loss.csv"
    log: list[tuple[int, float, float]] = []
    step = 0
    try:
        for epoch in range(cfg.epochs):
            losses = []
            lr = 0.0
            for views, centers in epoch_batches(values, cfg.patch, cfg.batch, rng):
                stacked = np.concatenate([views, centers]).astype(cfg.dtype)
                feats = model.forward(Tensor(stacked))
                k = len(views)
                loss = batch_loss(feats[:k], feats[k:], cfg.alpha)
                val = float(loss.data)
                if not math.isfinite(val):
                    raise DivergenceError(
                        f"non-finite loss at epoch {epoch}, step {step}"
                    )
                opt.zero_grad()
                loss.backward()
                lr = lr_at(step, total_steps, cfg)
                opt.step(lr)
                losses.append(val)
                step += 1
            mean_loss = float(np.mean(losses))
            log.append((epoch, mean_loss, lr))
            if progress:
                print(f"epoch {epoch}: loss {mean_loss:.4f} lr {lr:.3g}", flush=True)
            model.save(ckpt_path)
            _write_loss_csv(log_path, log)
    except DivergenceError:
        _write_loss_csv(log_path, log)
        raise
    return model, log


def _write_loss_csv(path, log) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss", "lr"])
        for epoch, mean_loss, lr in log:
            writer.writerow([epoch, repr(mean_loss), repr(lr)])
