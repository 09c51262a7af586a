"""Dense float64 tensors with a small reverse-mode autodiff tape.

The graph is dynamic: every op on a tensor that requires grad records its
parents and a backward closure. ``backward`` walks the graph once in reverse
topological order, accumulates ``.grad`` on every node, then frees the graph
(parents and closures of interior nodes are dropped), so a graph can be
differentiated only once. Leaves keep their gradients until ``zero_grad``.

Ops never broadcast silently; incompatible shapes raise ``ShapeError``.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item: expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # operator sugar maps onto the fixed op vocabulary
    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return scale(self, -1.0)

    def __sub__(self, other: Tensor) -> Tensor:
        return add(self, scale(other, -1.0))

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, op: str, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data, op=op)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _node(a.data + b.data, "add", (a, b), backward)


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("multiply", a, b)

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _node(a.data * b.data, "multiply", (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, "scale", (a,), lambda g: _accum(a, g * c))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _node(a.data @ b.data, "matmul", (a, b), backward)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias along axis 1.

    ``b`` is either ``[C]`` (shared over the batch) or ``[B, C]`` (one row per
    batch element); ``x`` is ``[B, C]`` or ``[B, C, H, W]``. This is the only
    op that expands a smaller operand, and it does so along a declared axis.
    """
    xs, bs = x.shape, b.shape
    ok = x.data.ndim in (2, 4) and (
        (len(bs) == 1 and bs[0] == xs[1]) or (len(bs) == 2 and bs == xs[:2])
    )
    if not ok:
        raise ShapeError(f"bias_add: shape mismatch {xs} vs {bs}")
    if len(bs) == 1:
        bb = b.data.reshape((1, -1) + (1,) * (x.data.ndim - 2))
    else:
        bb = b.data.reshape(bs + (1,) * (x.data.ndim - 2))
    spatial = tuple(range(2, x.data.ndim))

    def backward(g):
        _accum(x, g)
        if b.requires_grad:
            gb = g.sum(axis=spatial) if spatial else g
            _accum(b, gb.sum(axis=0) if len(bs) == 1 else gb)

    return _node(x.data + bb, "bias_add", (x, b), backward)


def _im2col(x: np.ndarray) -> np.ndarray:
    """[B,C,H,W] -> [B, C*9, H*W] patches of the zero-padded input."""
    B, C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # B,C,H,W,3,3
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * 9, H * W)


def _conv(x: np.ndarray, k: np.ndarray, cols: np.ndarray | None = None) -> np.ndarray:
    B, _, H, W = x.shape
    cout = k.shape[0]
    if cols is None:
        cols = _im2col(x)
    return (k.reshape(cout, -1) @ cols).reshape(B, cout, H, W)


def conv2d(x: Tensor, k: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (cross-correlation)."""
    if (
        x.data.ndim != 4
        or k.data.ndim != 4
        or k.shape[2:] != (3, 3)
        or k.shape[1] != x.shape[1]
    ):
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {k.shape}")
    cols = _im2col(x.data)
    B, _, H, W = x.shape
    cout = k.shape[0]
    y = _conv(x.data, k.data, cols)

    def backward(g):
        if k.requires_grad:
            g2 = g.reshape(B, cout, H * W)
            _accum(k, (g2 @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(k.shape))
        if x.requires_grad:
            # transposed conv = conv with spatially flipped, channel-swapped kernel
            kt = np.ascontiguousarray(k.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            _accum(x, _conv(g, kt))

    return _node(y, "conv2d", (x, k), backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4 or (a.shape[0],) + a.shape[2:] != (b.shape[0],) + b.shape[2:]:
        raise ShapeError(f"concat: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]

    def backward(g):
        _accum(a, g[:, :ca])
        _accum(b, g[:, ca:])

    return _node(np.concatenate([a.data, b.data], axis=1), "concat", (a, b), backward)


def avg_pool2(x: Tensor) -> Tensor:
    if x.data.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"avg_pool2: needs [B,C,H,W] with even H, W, got {x.shape}")
    B, C, H, W = x.shape
    y = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def backward(g):
        _accum(x, np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * 0.25)

    return _node(y, "avg_pool2", (x,), backward)


def upsample2(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2: needs [B,C,H,W], got {x.shape}")
    B, C, H, W = x.shape
    y = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def backward(g):
        _accum(x, g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)))

    return _node(y, "upsample2", (x,), backward)


def silu(x: Tensor) -> Tensor:
    sig = 1.0 / (1.0 + np.exp(-x.data))
    y = x.data * sig

    def backward(g):
        _accum(x, g * (sig * (1.0 + x.data * (1.0 - sig))))

    return _node(y, "silu", (x,), backward)


def square(x: Tensor) -> Tensor:
    return _node(x.data * x.data, "square", (x,), lambda g: _accum(x, 2.0 * g * x.data))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    if n == 0:
        raise ShapeError("mean: empty tensor")
    return _node(
        np.asarray(x.data.mean()), "mean", (x,), lambda g: _accum(x, np.full(x.shape, float(g) / n))
    )


PRIMITIVES = {
    "add": add,
    "multiply": multiply,
    "scale": scale,
    "matmul": matmul,
    "bias_add": bias_add,
    "conv2d": conv2d,
    "concat": concat_channels,
    "avg_pool2": avg_pool2,
    "upsample2": upsample2,
    "silu": silu,
    "square": square,
    "mean": mean,
}


def primitive_forward(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# ------------------------------------------------------------------ autodiff


def _topo(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every node that requires grad."""
    if loss.data.size != 1 or loss.data.ndim > 1:
        raise ShapeError(f"backward: loss must be scalar (shape [] or [1]), got {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._parents:
            node._parents = ()
            node._backward = None


_FD_STENCILS = {
    2: ((1.0, -1.0), (0.5, -0.5)),
    4: ((2.0, 1.0, -1.0, -2.0), (-1.0 / 12, 8.0 / 12, -8.0 / 12, 1.0 / 12)),
}


def finite_difference_gradient(
    f: Callable[[np.ndarray], float], p: np.ndarray, h: float = 1e-5, order: int = 2
) -> np.ndarray:
    """Central differences of a scalar function ``f`` at ``p``, one coordinate at a time.

    ``order=2`` is the plain (f(p+h) - f(p-h)) / 2h stencil. ``order=4`` uses the
    five-point stencil, whose O(h^4) truncation error lets a larger h keep the
    roundoff term (about eps * |f| / h) small when ``f`` itself is large.
    """
    if not h > 0:
        raise ValueError(f"step h must be positive, got {h}")
    if order not in _FD_STENCILS:
        raise ValueError(f"order must be one of {sorted(_FD_STENCILS)}, got {order}")
    offsets, weights = _FD_STENCILS[order]
    p = np.array(p, dtype=np.float64, copy=True)
    f0 = float(f(p.copy()))
    if not np.isfinite(f0):
        raise ValueError("f(p) is not finite")
    grad = np.empty_like(p)
    flat, gflat = p.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        vals = []
        for d in offsets:
            flat[i] = orig + d * h
            vals.append(float(f(p.copy())))
        flat[i] = orig
        if not all(np.isfinite(vals)):
            raise ValueError(f"non-finite evaluation at coordinate {i}")
        gflat[i] = sum(w * v for w, v in zip(weights, vals)) / h
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    a, n = np.asarray(analytic).ravel(), np.asarray(numeric).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def parameters(values: Iterable[np.ndarray]) -> list[Tensor]:
    return [Tensor(v, requires_grad=True) for v in values]
