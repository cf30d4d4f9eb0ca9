"""Dense-tensor engine with reverse-mode automatic differentiation.

Tensors wrap numpy arrays and record a tape of backward closures when any
input requires gradients.  Broadcasting follows numpy's trailing-dimension
alignment; gradients are summed back down to the original shapes.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "is_grad_enabled",
    "concat",
    "outer_product",
    "conv1d",
    "deconv1d",
    "deconv1d_geometry",
    "conv1d_out_len",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the context (pure inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # branch on sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1
    )
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward: Callable[[], None] | None = None
        self._prev: tuple[Tensor, ...] = ()

    # -- basics ----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    # -- graph plumbing ----------------------------------------------------

    @staticmethod
    def _lift(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"]) -> "Tensor":
        req = _grad_enabled and any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=req)
        if req:
            out._prev = tuple(parents)
        return out

    def backward(self) -> None:
        """Reverse-accumulate gradients from a scalar root."""
        if self.size != 1:
            raise ShapeError(
                f"backward requires a scalar root, got shape {self.shape}"
            )
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._prev:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = Tensor._lift(other)
        out = Tensor._result(self.data + other.data, (self, other))
        if out.requires_grad:
            def _bw():
                if self.requires_grad:
                    self._accumulate(_unbroadcast(out.grad, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(out.grad, other.shape))
            out._backward = _bw
        return out

    __radd__ = __add__

    def __sub__(self, other):
        other = Tensor._lift(other)
        out = Tensor._result(self.data - other.data, (self, other))
        if out.requires_grad:
            def _bw():
                if self.requires_grad:
                    self._accumulate(_unbroadcast(out.grad, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(-out.grad, other.shape))
            out._backward = _bw
        return out

    def __rsub__(self, other):
        return Tensor._lift(other) - self

    def __mul__(self, other):
        other = Tensor._lift(other)
        out = Tensor._result(self.data * other.data, (self, other))
        if out.requires_grad:
            def _bw():
                if self.requires_grad:
                    self._accumulate(_unbroadcast(out.grad * other.data, self.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(out.grad * self.data, other.shape))
            out._backward = _bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = Tensor._lift(other)
        out = Tensor._result(self.data / other.data, (self, other))
        if out.requires_grad:
            def _bw():
                if self.requires_grad:
                    self._accumulate(
                        _unbroadcast(out.grad / other.data, self.shape)
                    )
                if other.requires_grad:
                    other._accumulate(
                        _unbroadcast(
                            -out.grad * self.data / (other.data * other.data),
                            other.shape,
                        )
                    )
            out._backward = _bw
        return out

    def __rtruediv__(self, other):
        return Tensor._lift(other) / self

    def __neg__(self):
        return self * -1.0

    def __pow__(self, p):
        if not np.isscalar(p):
            raise TypeError("only constant exponents are supported")
        out = Tensor._result(self.data ** p, (self,))
        if out.requires_grad:
            def _bw():
                self._accumulate(out.grad * p * self.data ** (p - 1))
            out._backward = _bw
        return out

    def __matmul__(self, other):
        other = Tensor._lift(other)
        a, b = self.data, other.data
        if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
            raise ShapeError(
                f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}"
            )
        out = Tensor._result(np.matmul(a, b), (self, other))
        if out.requires_grad:
            def _bw():
                g = out.grad
                if self.requires_grad:
                    if b.ndim == 1:
                        da = np.multiply.outer(g, b) if g.ndim else g * b
                    else:
                        da = np.matmul(g, np.swapaxes(b, -1, -2))
                    self._accumulate(_unbroadcast(da, self.shape))
                if other.requires_grad:
                    if a.ndim == 1:
                        db = np.multiply.outer(a, g) if b.ndim > 1 else a * g
                    else:
                        ga = g[..., None] if b.ndim == 1 else g
                        bb = np.matmul(np.swapaxes(a, -1, -2), ga)
                        if b.ndim == 1:
                            bb = bb[..., 0]
                        db = bb
                    other._accumulate(_unbroadcast(db, other.shape))
            out._backward = _bw
        return out

    # -- elementwise nonlinearities -------------------------------------------

    def exp(self):
        out = Tensor._result(np.exp(self.data), (self,))
        if out.requires_grad:
            def _bw():
                self._accumulate(out.grad * out.data)
            out._backward = _bw
        return out

    def log(self):
        out = Tensor._result(np.log(self.data), (self,))
        if out.requires_grad:
            def _bw():
                self._accumulate(out.grad / self.data)
            out._backward = _bw
        return out

    def sqrt(self):
        return self ** 0.5

    def softplus(self):
        out = Tensor._result(np.logaddexp(0.0, self.data), (self,))
        if out.requires_grad:
            def _bw():
                self._accumulate(out.grad * _sigmoid(self.data))
            out._backward = _bw
        return out

    def sigmoid(self):
        s = _sigmoid(self.data)
        out = Tensor._result(s, (self,))
        if out.requires_grad:
            def _bw():
                self._accumulate(out.grad * out.data * (1.0 - out.data))
            out._backward = _bw
        return out

    def silu(self):
        s = _sigmoid(self.data)
        out = Tensor._result(self.data * s, (self,))
        if out.requires_grad:
            def _bw():
                self._accumulate(out.grad * (s + self.data * s * (1.0 - s)))
            out._backward = _bw
        return out

    def leaky_relu(self, slope: float = 0.01):
        factor = np.where(self.data > 0, 1.0, slope).astype(self.data.dtype)
        out = Tensor._result(self.data * factor, (self,))
        if out.requires_grad:
            def _bw():
                self._accumulate(out.grad * factor)
            out._backward = _bw
        return out

    # -- reductions / shape ops -------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out = Tensor._result(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out.requires_grad:
            def _bw():
                g = out.grad
                if axis is not None and not keepdims:
                    axes = axis if isinstance(axis, tuple) else (axis,)
                    g = np.expand_dims(g, axes)
                self._accumulate(np.broadcast_to(g, self.shape).astype(self.dtype))
            out._backward = _bw
        return out

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else np.prod(
            [self.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor._result(self.data.reshape(shape), (self,))
        if out.requires_grad:
            def _bw():
                self._accumulate(out.grad.reshape(self.shape))
            out._backward = _bw
        return out

    def transpose(self, axes=None):
        out = Tensor._result(np.transpose(self.data, axes), (self,))
        if out.requires_grad:
            inv = None if axes is None else np.argsort(axes)
            def _bw():
                self._accumulate(np.transpose(out.grad, inv))
            out._backward = _bw
        return out

    @property
    def T(self):
        return self.transpose()

    def broadcast_to(self, shape):
        out = Tensor._result(np.broadcast_to(self.data, shape).copy(), (self,))
        if out.requires_grad:
            def _bw():
                self._accumulate(_unbroadcast(out.grad, self.shape))
            out._backward = _bw
        return out

    def __getitem__(self, idx):
        out = Tensor._result(self.data[idx], (self,))
        if out.requires_grad:
            def _bw():
                if self.grad is None:
                    self.grad = np.zeros_like(self.data)
                np.add.at(self.grad, idx, out.grad)
            out._backward = _bw
        return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [Tensor._lift(t) for t in tensors]
    out = Tensor._result(
        np.concatenate([t.data for t in tensors], axis=axis), tensors
    )
    if out.requires_grad:
        sizes = [t.shape[axis] for t in tensors]
        splits = np.cumsum(sizes[:-1])
        def _bw():
            for t, g in zip(tensors, np.split(out.grad, splits, axis=axis)):
                if t.requires_grad:
                    t._accumulate(g)
        out._backward = _bw
    return out


def outer_product(a: Tensor, b: Tensor) -> Tensor:
    """Outer product of two 1-D tensors."""
    a, b = Tensor._lift(a), Tensor._lift(b)
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeError(
            f"outer_product expects vectors, got shapes {a.shape} and {b.shape}"
        )
    return a.reshape(-1, 1) * b.reshape(1, -1)


# -- 1-D convolutions ----------------------------------------------------


def conv1d_out_len(length: int, kernel: int, stride: int, padding: int) -> int:
    if length + 2 * padding < kernel:
        raise ShapeError(
            f"conv1d would produce an empty output: L={length}, m={kernel}, p={padding}"
        )
    return (length + 2 * padding - kernel) // stride + 1


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Strided 1-D convolution over (..., L, C_in) with kernels (C_out, C_in/g, m)."""
    x, weight = Tensor._lift(x), Tensor._lift(weight)
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 3:
        raise ShapeError(f"conv1d input must be (P, L, C) or (L, C), got {x.shape}")
    P, L, c_in = xd.shape
    c_out, c_in_g, m = weight.shape
    if c_in % groups or c_out % groups or c_in_g != c_in // groups:
        raise ShapeError(
            f"conv1d group mismatch: input channels {c_in}, kernels {weight.shape}, groups {groups}"
        )
    if stride < 1 or m < 1:
        raise ShapeError(f"conv1d needs stride >= 1 and kernel >= 1, got {stride}, {m}")
    l_out = conv1d_out_len(L, m, stride, padding)

    xp = np.pad(xd, ((0, 0), (padding, padding), (0, 0))) if padding else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, m, axis=1)[:, ::stride]
    # win: (P, l_out, c_in, m)
    wd = weight.data
    if groups == 1:
        y = np.einsum("plcm,ocm->plo", win, wd, optimize=True)
    elif groups == c_in == c_out:
        y = np.einsum("plcm,cm->plc", win, wd[:, 0, :], optimize=True)
    else:
        gs_in, gs_out = c_in // groups, c_out // groups
        y = np.empty((P, l_out, c_out), dtype=xd.dtype)
        for g in range(groups):
            y[..., g * gs_out:(g + 1) * gs_out] = np.einsum(
                "plcm,ocm->plo",
                win[:, :, g * gs_in:(g + 1) * gs_in],
                wd[g * gs_out:(g + 1) * gs_out],
                optimize=True,
            )
    if bias is not None:
        y = y + bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)
    out = Tensor._result(y[0] if squeeze else y, parents)
    if out.requires_grad:
        def _bw():
            gy = out.grad[None] if squeeze else out.grad
            if bias is not None and bias.requires_grad:
                bias._accumulate(gy.sum(axis=(0, 1)))
            if weight.requires_grad:
                if groups == 1:
                    dw = np.einsum("plcm,plo->ocm", win, gy, optimize=True)
                elif groups == c_in == c_out:
                    dw = np.einsum("plcm,plc->cm", win, gy, optimize=True)[:, None]
                else:
                    gs_in, gs_out = c_in // groups, c_out // groups
                    dw = np.empty_like(wd)
                    for g in range(groups):
                        dw[g * gs_out:(g + 1) * gs_out] = np.einsum(
                            "plcm,plo->ocm",
                            win[:, :, g * gs_in:(g + 1) * gs_in],
                            gy[..., g * gs_out:(g + 1) * gs_out],
                            optimize=True,
                        )
                weight._accumulate(dw)
            if x.requires_grad:
                if groups == 1:
                    dwin = np.einsum("plo,ocm->plcm", gy, wd, optimize=True)
                elif groups == c_in == c_out:
                    dwin = np.einsum("plc,cm->plcm", gy, wd[:, 0, :], optimize=True)
                else:
                    gs_in, gs_out = c_in // groups, c_out // groups
                    dwin = np.empty((P, l_out, c_in, m), dtype=xd.dtype)
                    for g in range(groups):
                        dwin[:, :, g * gs_in:(g + 1) * gs_in] = np.einsum(
                            "plo,ocm->plcm",
                            gy[..., g * gs_out:(g + 1) * gs_out],
                            wd[g * gs_out:(g + 1) * gs_out],
                            optimize=True,
                        )
                dxp = np.zeros((P, L + 2 * padding, c_in), dtype=xd.dtype)
                for k in range(m):
                    dxp[:, k:k + stride * (l_out - 1) + 1:stride] += dwin[:, :, :, k]
                dx = dxp[:, padding:padding + L] if padding else dxp
                x._accumulate(dx[0] if squeeze else dx)
        out._backward = _bw
    return out


def deconv1d_geometry(l_in: int, l_target: int) -> tuple[int, int]:
    """Pick (padding, output_padding) so a stride-2/kernel-3 transposed conv
    maps l_in to exactly l_target."""
    for padding in (0, 1):
        for opad in (0, 1):
            if 2 * (l_in - 1) + 3 - 2 * padding + opad == l_target:
                return padding, opad
    raise ShapeError(
        f"no (padding, output_padding) maps length {l_in} to {l_target} "
        "with stride 2 and kernel 3"
    )


def deconv1d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    padding: int = 0,
    output_padding: int = 0,
) -> Tensor:
    """Transposed 1-D convolution, stride 2, kernel 3.

    weight: (C_in, C_out, 3).  Output length 2(L-1) + 3 - 2*padding + output_padding.
    """
    x, weight = Tensor._lift(x), Tensor._lift(weight)
    stride, m = 2, 3
    squeeze = x.ndim == 2
    xd = x.data[None] if squeeze else x.data
    P, L, c_in = xd.shape
    if weight.shape[0] != c_in or weight.shape[2] != m:
        raise ShapeError(
            f"deconv1d kernels {weight.shape} do not match input channels {c_in}"
        )
    if output_padding not in (0, 1):
        raise ShapeError(f"output_padding must be 0 or 1, got {output_padding}")
    c_out = weight.shape[1]
    l_out = stride * (L - 1) + m - 2 * padding + output_padding
    if l_out < 1:
        raise ShapeError(f"deconv1d output length {l_out} < 1")

    l_full = stride * (L - 1) + m + output_padding
    buf = np.zeros((P, l_full, c_out), dtype=xd.dtype)
    wd = weight.data
    for k in range(m):
        buf[:, k:k + stride * (L - 1) + 1:stride] += np.matmul(xd, wd[:, :, k])
    y = buf[:, padding:padding + l_out]
    if bias is not None:
        y = y + bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)
    out = Tensor._result(y[0] if squeeze else y, parents)
    if out.requires_grad:
        def _bw():
            gy = out.grad[None] if squeeze else out.grad
            if bias is not None and bias.requires_grad:
                bias._accumulate(gy.sum(axis=(0, 1)))
            gbuf = np.zeros((P, l_full, c_out), dtype=xd.dtype)
            gbuf[:, padding:padding + l_out] = gy
            if weight.requires_grad:
                dw = np.empty_like(wd)
                for k in range(m):
                    gslice = gbuf[:, k:k + stride * (L - 1) + 1:stride]
                    dw[:, :, k] = np.einsum("pli,plo->io", xd, gslice, optimize=True)
                weight._accumulate(dw)
            if x.requires_grad:
                dx = np.zeros_like(xd)
                for k in range(m):
                    gslice = gbuf[:, k:k + stride * (L - 1) + 1:stride]
                    dx += np.matmul(gslice, wd[:, :, k].T)
                x._accumulate(dx[0] if squeeze else dx)
        out._backward = _bw
    return out


# -- finite-difference checking -------------------------------------------


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords_per_tensor: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must return a scalar Tensor built from `params`.  When
    `max_coords_per_tensor` is set, a random subset of coordinates per tensor
    is probed (needed to keep large models within a time budget).
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    root = f()
    if not np.isfinite(root.data).all():
        raise FloatingPointError("grad_check: non-finite function value")
    root.backward()
    analytic = [
        np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params
    ]

    worst = 0.0
    for p, g in zip(params, analytic):
        n = p.size
        if max_coords_per_tensor is not None and n > max_coords_per_tensor:
            coords = rng.choice(n, size=max_coords_per_tensor, replace=False)
        else:
            coords = range(n)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in coords:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                hi = float(f().data)
                flat[i] = orig - eps
                lo = float(f().data)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise FloatingPointError("grad_check: non-finite perturbed value")
            cd = (hi - lo) / (2.0 * eps)
            err = abs(gflat[i] - cd) / max(1.0, abs(gflat[i]))
            worst = max(worst, err)
    return worst
