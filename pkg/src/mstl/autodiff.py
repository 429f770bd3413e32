"""Small reverse-mode autodiff over float64 numpy arrays.

Every op builds a new :class:`Tensor` that remembers its operands and a
closure mapping the output gradient to operand gradients.  :func:`backward`
orders the graph topologically (the tape) and runs those closures once each.

Gradients on leaves accumulate across repeated ``backward`` calls, the same
way PyTorch does; call :meth:`Tensor.zero_grad` between steps.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "tensor",
    "randn",
    "gaussian",
    "matmul",
    "conv2d",
    "relu",
    "add",
    "mul",
    "scale",
    "flatten",
    "global_avg_pool",
    "sum_all",
    "custom",
    "build_tape",
    "backward",
]

DTYPE = np.float64


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def tensor(values, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(values, dtype=DTYPE), requires_grad=requires_grad)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], fn, op: str) -> Tensor:
    # Only keep graph edges when some operand needs a gradient.
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=fn, op=op)
    return Tensor(data, op=op)


# --------------------------------------------------------------------------
# Seeded Gaussian sampling
# --------------------------------------------------------------------------

def gaussian(count: int, seed: int | Sequence[int]) -> np.ndarray:
    """Standard normal draws: Philox-4x64 uniforms fed through Box-Muller.

    Philox is counter-based, so the stream for a given seed never depends on
    platform or numpy's choice of normal sampler.
    """
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    pairs = (count + 1) // 2
    u1 = gen.random(pairs)
    u2 = gen.random(pairs)
    # random() is in [0, 1); shift u1 into (0, 1] so log() is finite.
    radius = np.sqrt(-2.0 * np.log1p(-u1))
    angle = 2.0 * math.pi * u2
    out = np.empty(2 * pairs, dtype=DTYPE)
    out[0::2] = radius * np.cos(angle)
    out[1::2] = radius * np.sin(angle)
    return out[:count]


def randn(shape: Sequence[int], seed: int | Sequence[int], scale: float = 1.0, requires_grad: bool = False) -> Tensor:
    """Tensor of Gaussian(0, scale**2) values, bit-identical for equal seeds."""
    shape = tuple(int(s) for s in shape)
    if not shape:
        raise ShapeError("randn needs a non-empty shape")
    if any(s <= 0 for s in shape):
        raise ShapeError(f"randn shape has a zero or negative dimension: {shape}")
    if scale < 0:
        raise ValueError(f"scale must be >= 0, got {scale}")
    values = gaussian(math.prod(shape), seed) * scale
    return Tensor(values.reshape(shape), requires_grad=requires_grad)


# --------------------------------------------------------------------------
# Ops
# --------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def fn(g):
        return (g @ B.T if a.requires_grad else None), (A.T @ g if b.requires_grad else None)

    return _result(A @ B, (a, b), fn, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; ``b`` may also be a vector added to every row of ``a``."""
    if a.shape == b.shape:
        return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if b.data.ndim == 1 and a.data.ndim >= 1 and a.shape[-1] == b.shape[0]:
        axes = tuple(range(a.data.ndim - 1))
        return _result(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=axes)), "add_bias")
    raise ShapeError(f"add shape mismatch: {a.shape} + {b.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} * {b.shape}")
    A, B = a.data, b.data
    return _result(A * B, (a, b), lambda g: (g * B, g * A), "mul")


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result(x.data * s, (x,), lambda g: (g * s,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # subgradient at exactly 0 is 0
    return _result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def flatten(x: Tensor) -> Tensor:
    """Flatten everything after the leading (batch) axis; 1-D input stays 1-D."""
    shape = x.shape
    if x.data.ndim <= 1:
        out = x.data.reshape(-1)
    else:
        out = x.data.reshape(shape[0], -1)
    return _result(out, (x,), lambda g: (g.reshape(shape),), "flatten")


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the two trailing spatial axes: [c,h,w] -> [c] or [n,c,h,w] -> [n,c]."""
    if x.data.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool needs [c,h,w] or [n,c,h,w], got {x.shape}")
    shape = x.shape
    area = shape[-1] * shape[-2]
    out = x.data.sum(axis=(-2, -1)) / area

    def fn(g):
        return (np.broadcast_to((g / area)[..., None, None], shape).copy(),)

    return _result(out, (x,), fn, "global_avg_pool")


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, np.asarray(g).item()),), "sum")


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor | None = None) -> Tensor:
    """Valid, stride-1 cross-correlation.

    ``x`` is [c_in,h,w] or a batch [n,c_in,h,w]; ``kernels`` is
    [c_out,c_in,kh,kw]; ``bias`` is [c_out].
    """
    single = x.data.ndim == 3
    X = x.data[None] if single else x.data
    K = kernels.data
    if X.ndim != 4 or K.ndim != 4:
        raise ShapeError(f"conv2d expects input [c,h,w]/[n,c,h,w] and 4-D kernels, got {x.shape}, {kernels.shape}")
    n, c_in, h, w = X.shape
    c_out, k_in, kh, kw = K.shape
    if k_in != c_in:
        raise ShapeError(f"conv2d channel mismatch: input has {c_in}, kernels expect {k_in}")
    if kh > h or kw > w:
        raise ShapeError(f"conv2d kernel {kh}x{kw} larger than input {h}x{w}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")
    oh, ow = h - kh + 1, w - kw + 1

    # cols[n, oh, ow, c_in*kh*kw]
    win = np.lib.stride_tricks.sliding_window_view(X, (kh, kw), axis=(2, 3))
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c_in * kh * kw)
    Kmat = K.reshape(c_out, -1)
    out = (cols @ Kmat.T).reshape(n, oh, ow, c_out)
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if single:
        out = out[0]

    def fn(g):
        G = g[None] if single else g
        gmat = G.transpose(0, 2, 3, 1).reshape(n * oh * ow, c_out)
        g_kernels = (gmat.T @ cols).reshape(K.shape)
        g_x = None
        if x.requires_grad:
            g_cols = (gmat @ Kmat).reshape(n, oh, ow, c_in, kh, kw)
            g_x = np.zeros_like(X)
            for i in range(kh):
                for j in range(kw):
                    g_x[:, :, i:i + oh, j:j + ow] += g_cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            if single:
                g_x = g_x[0]
        grads = [g_x, g_kernels]
        if bias is not None:
            grads.append(G.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, kernels) if bias is None else (x, kernels, bias)
    return _result(out, parents, fn, "conv2d")


def custom(data: np.ndarray, parents: tuple[Tensor, ...], fn, op: str) -> Tensor:
    """Register an op defined elsewhere (e.g. a fused loss) on the graph."""
    return _result(data, parents, fn, op)


# --------------------------------------------------------------------------
# Backward pass
# --------------------------------------------------------------------------

def build_tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (operands first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, tape: Iterable[Tensor] | None = None) -> None:
    """Populate ``.grad`` of every requires_grad leaf reachable from ``loss``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = list(tape) if tape is not None else build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
