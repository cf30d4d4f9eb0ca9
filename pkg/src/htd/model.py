"""Detector backbone: group-wise spectral embedding, pyramid SSM block(s),
and the two-layer contrastive projection head.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    conv1d,
    conv1d_out_len,
    deconv1d,
    deconv1d_geometry,
)
from .scan import S6Params, init_s6_params, s6_forward

__all__ = [
    "EmbeddingConfig",
    "ModelConfig",
    "SpectralEncoder",
    "rmsnorm",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"HTDM"
CHECKPOINT_VERSION = 1

RMSNORM_EPS = 1e-6
N_LEVELS = 4  # pyramid levels 0..3 (three halvings)


@dataclass(frozen=True)
class EmbeddingConfig:
    """Group-wise spectral embedding geometry."""

    bands: int
    group_length: int
    embed_size: int

    @property
    def stride(self) -> int:
        return max(1, self.group_length // 4)

    @property
    def seq_len(self) -> int:
        return (self.bands - self.group_length) // self.stride + 1

    def validate(self) -> None:
        if self.group_length > self.bands:
            raise ShapeError(
                f"group length {self.group_length} exceeds band count {self.bands}"
            )
        if self.seq_len < 8:
            raise ShapeError(
                f"sequence length {self.seq_len} < 8; three halvings would "
                "empty the pyramid (reduce group length or stride)"
            )


@dataclass(frozen=True)
class ModelConfig:
    bands: int
    group_length: int
    embed_size: int = 16
    state_size: int = 16
    feature_size: int = 32
    depth: int = 1
    leaky_slope: float = 0.01

    @property
    def embedding(self) -> EmbeddingConfig:
        return EmbeddingConfig(self.bands, self.group_length, self.embed_size)


def rmsnorm(s: Tensor, gain: Tensor, eps: float = RMSNORM_EPS) -> Tensor:
    """Scale each token by gain / RMS(token), RMS over the channel axis."""
    ms = (s * s).mean(axis=-1, keepdims=True)
    return s / (ms + eps).sqrt() * gain


def _level_lengths(l0: int) -> list[int]:
    lengths = [l0]
    for _ in range(N_LEVELS - 1):
        lengths.append(lengths[-1] // 2)
    return lengths


class SpectralEncoder:
    """f: raw spectrum -> d-dimensional contrastive feature.

    Parameters live in a flat name -> Tensor dict so the optimizer and the
    checkpoint writer can stay generic.
    """

    def __init__(
        self,
        cfg: ModelConfig,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ):
        cfg.embedding.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.parallel_scan = False
        self._params: dict[str, Tensor] = {}
        self._s6: list[list[S6Params]] = []
        if rng is None:
            rng = np.random.default_rng(0)
        self._init_params(rng)

    # -- parameter setup ---------------------------------------------------

    def _uniform(self, fan_in: int, *shape) -> Tensor:
        bound = 1.0 / np.sqrt(fan_in)
        data = self._rng.uniform(-bound, bound, size=shape).astype(self.dtype)
        return Tensor(data, requires_grad=True)

    def _add(self, name: str, t: Tensor) -> Tensor:
        self._params[name] = t
        return t

    def _init_params(self, rng: np.random.Generator) -> None:
        self._rng = rng
        cfg = self.cfg
        n = cfg.embed_size
        emb = cfg.embedding
        self._add("embed.w", self._uniform(emb.group_length, n, 1, emb.group_length))
        self._add("embed.b", self._uniform(emb.group_length, n))

        for i in range(cfg.depth):
            pre = f"block{i}."
            widths = [2 ** (k + 1) * n for k in range(N_LEVELS)]
            self._add(pre + "g", Tensor(np.ones(n, dtype=self.dtype), requires_grad=True))
            self._add(pre + "z1.w", self._uniform(n, n, 2 * n))
            self._add(pre + "z1.b", self._uniform(n, 2 * n))
            self._add(pre + "z2.w", self._uniform(n, n, 2 * n))
            self._add(pre + "z2.b", self._uniform(n, 2 * n))
            level_s6 = []
            for k in range(N_LEVELS):
                c = widths[k]
                if k > 0:
                    c_in = widths[k - 1]
                    self._add(pre + f"down{k}.w", self._uniform(3 * c_in, c, c_in, 3))
                    self._add(pre + f"down{k}.b", self._uniform(3 * c_in, c))
                self._add(pre + f"dw{k}.w", self._uniform(3, c, 1, 3))
                self._add(pre + f"dw{k}.b", self._uniform(3, c))
                s6 = init_s6_params(c, cfg.state_size, rng, self.dtype)
                for sub, t in s6.tensors().items():
                    self._add(pre + f"s6.{k}.{sub}", t)
                level_s6.append(s6)
                if k < N_LEVELS - 1:
                    # upsample from level k+1 back to width of level k
                    self._add(
                        pre + f"up{k}.w", self._uniform(3 * widths[k + 1], widths[k + 1], c, 3)
                    )
                    self._add(pre + f"up{k}.b", self._uniform(3 * widths[k + 1], c))
                    self._add(pre + f"fuse{k}.w", self._uniform(c, c, c))
                    self._add(pre + f"fuse{k}.b", self._uniform(c, c))
            self._add(pre + "out.w", self._uniform(2 * n, 2 * n, n))
            self._add(pre + "out.b", self._uniform(2 * n, n))
            self._s6.append(level_s6)

        flat = emb.seq_len * n
        d = cfg.feature_size
        self._add("sch.w1", self._uniform(flat, flat, 2 * d))
        self._add("sch.b1", self._uniform(flat, 2 * d))
        self._add("sch.w2", self._uniform(2 * d, 2 * d, d))
        self._add("sch.b2", self._uniform(2 * d, d))
        del self._rng

    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def param(self, name: str) -> Tensor:
        return self._params[name]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.zero_grad()

    # -- forward pieces ------------------------------------------------------

    def embed(self, x: Tensor) -> Tensor:
        """(P, B) spectra -> (P, L, N) token sequences."""
        x = Tensor._lift(x)
        if x.shape[-1] != self.cfg.bands:
            raise ShapeError(
                f"expected {self.cfg.bands}-band spectra, got shape {x.shape}"
            )
        emb = self.cfg.embedding
        seq = x.reshape(*x.shape, 1)
        out = conv1d(
            seq,
            self._params["embed.w"],
            self._params["embed.b"],
            stride=emb.stride,
        )
        return out.leaky_relu(self.cfg.leaky_slope)

    def pyramid_block(self, s: Tensor, index: int = 0) -> Tensor:
        """One multiresolution SSM block; preserves the (.., L, N) shape."""
        pre = f"block{index}."
        p = self._params
        l0 = s.shape[-2]
        if l0 < 8:
            raise ShapeError(f"pyramid block needs sequence length >= 8, got {l0}")
        lengths = _level_lengths(l0)

        sbar = rmsnorm(s, p[pre + "g"])
        z1 = sbar @ p[pre + "z1.w"] + p[pre + "z1.b"]
        z2 = sbar @ p[pre + "z2.w"] + p[pre + "z2.b"]

        extracted = []
        cur = z1
        for k in range(N_LEVELS):
            if k > 0:
                cur = conv1d(
                    cur, p[pre + f"down{k}.w"], p[pre + f"down{k}.b"],
                    stride=2, padding=1,
                )
                if cur.shape[-2] > lengths[k]:
                    # conv length formula yields ceil(L/2); crop to floor halving
                    cur = cur[..., : lengths[k], :]
            width = cur.shape[-1]
            local = conv1d(
                cur, p[pre + f"dw{k}.w"], p[pre + f"dw{k}.b"],
                stride=1, padding=1, groups=width,
            ).silu()
            extracted.append(
                s6_forward(local, self._s6[index][k], parallel=self.parallel_scan)
            )

        fused = extracted[N_LEVELS - 1]
        for k in range(N_LEVELS - 2, -1, -1):
            padding, opad = deconv1d_geometry(fused.shape[-2], lengths[k])
            up = deconv1d(
                fused, p[pre + f"up{k}.w"], p[pre + f"up{k}.b"],
                padding=padding, output_padding=opad,
            )
            fused = up + (extracted[k] @ p[pre + f"fuse{k}.w"] + p[pre + f"fuse{k}.b"])

        gated = fused * z2.sigmoid()
        return s + (gated @ p[pre + "out.w"] + p[pre + "out.b"])

    def sch(self, s: Tensor) -> Tensor:
        """Contrastive head: flatten tokens, two fully connected layers."""
        p = self._params
        flat = s.reshape(*s.shape[:-2], s.shape[-2] * s.shape[-1])
        hidden = (flat @ p["sch.w1"] + p["sch.b1"]).leaky_relu(self.cfg.leaky_slope)
        return hidden @ p["sch.w2"] + p["sch.b2"]

    def forward(self, x) -> Tensor:
        """(P, B) or (B,) spectra -> (P, d) or (d,) features."""
        x = Tensor._lift(x)
        single = x.ndim == 1
        if single:
            x = x.reshape(1, -1)
        s = self.embed(x)
        for i in range(self.cfg.depth):
            s = self.pyramid_block(s, i)
        out = self.sch(s)
        return out.reshape(-1) if single else out

    __call__ = forward

    # -- checkpoint I/O -----------------------------------------------------

    def save(self, path) -> None:
        cfg = self.cfg
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack(
                "<7I", CHECKPOINT_VERSION, cfg.bands, cfg.group_length,
                cfg.embed_size, cfg.state_size, cfg.feature_size, cfg.depth,
            ))
            fh.write(struct.pack("<I", len(self._params)))
            for name in sorted(self._params):
                t = self._params[name]
                raw = name.encode()
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<B", t.ndim))
                fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
                fh.write(t.data.astype("<f4").tobytes())

    @classmethod
    def load(cls, path, dtype=np.float32) -> "SpectralEncoder":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(
                    f"bad checkpoint magic {magic!r} at offset 0 (expected HTDM)"
                )
            version, bands, m, n, d_state, d_feat, depth = struct.unpack(
                "<7I", fh.read(28)
            )
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            cfg = ModelConfig(
                bands=bands, group_length=m, embed_size=n,
                state_size=d_state, feature_size=d_feat, depth=depth,
            )
            model = cls(cfg, rng=np.random.default_rng(0), dtype=dtype)
            (count,) = struct.unpack("<I", fh.read(4))
            for _ in range(count):
                (nlen,) = struct.unpack("<H", fh.read(2))
                name = fh.read(nlen).decode()
                (ndim,) = struct.unpack("<B", fh.read(1))
                shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
                nbytes = 4 * int(np.prod(shape)) if ndim else 4
                data = np.frombuffer(fh.read(nbytes), dtype="<f4").reshape(shape)
                if name not in model._params:
                    raise ValueError(f"checkpoint has unknown parameter {name!r}")
                tgt = model._params[name]
                if tgt.shape != shape:
                    raise ShapeError(
                        f"checkpoint parameter {name!r} shape {shape} != {tgt.shape}"
                    )
                tgt.data = data.astype(model.dtype)
        return model
