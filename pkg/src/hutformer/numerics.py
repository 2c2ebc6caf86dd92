"""Dense float64 tensors with reverse-mode differentiation.

Every op accepts tensors with arbitrary leading (batch) axes. A node only
records its parents and a backward closure when at least one input requires a
gradient, so frozen sub-networks cost nothing on the backward pass.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, NumericError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64, order="C")
        if 0 in arr.shape:
            raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def backward(self):
        return backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# ---------------------------------------------------------------- graph


class ComputeGraph:
    """Topologically ordered nodes reachable from an output tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputeGraph":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)


def backward(loss: Tensor, graph: ComputeGraph | None = None) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor requiring grad.

    Returns the map from each reached tensor to its gradient (for this call).
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    graph = graph or ComputeGraph.from_output(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        result[node] = g
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
    return result


def zero_grad(params: Iterable[Tensor]):
    for p in params:
        p.grad = None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _node(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def absolute(x: Tensor) -> Tensor:
    # subgradient 0 at the kink
    s = np.sign(x.data)
    return _node(np.abs(x.data), (x,), lambda g: (g * s,))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / math.sqrt(2.0)))
    pdf = np.exp(-0.5 * xd * xd) / math.sqrt(2.0 * math.pi)
    return _node(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),))


def relu(x: Tensor) -> Tensor:
    m = x.data > 0
    return _node(x.data * m, (x,), lambda g: (g * m,))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes, with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _node(ad @ bd, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y[..., k] = sum_m W[k, m] x[..., m] + b[k]."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    y = x2 @ wd.T
    if bias is not None:
        y = y + bias.data
    y = y.reshape(*lead, wd.shape[0])

    def bw(g):
        g2 = g.reshape(-1, wd.shape[0])
        gx = (g2 @ wd).reshape(xd.shape) if x.requires_grad else None
        gw = g2.T @ x2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(y, parents, bw)


def softmax_last(x: Tensor) -> Tensor:
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise NumericError("softmax_last received non-finite input")
    z = np.exp(xd - xd.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis (biased variance), then apply gain and bias."""
    xd = x.data
    d = xd.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} vs gain {gain.shape} / bias {bias.shape}")
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data

    def bw(g):
        gxhat = g * gd
        gx = inv * (
            gxhat
            - gxhat.mean(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(xhat * gd + bias.data, (x, gain, bias), bw)


# ---------------------------------------------------------------- shape ops


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _node(x.data.reshape(shape).copy(), (x,), lambda g: (g.reshape(src),))


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
    )


def transpose_last2(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as e:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from e
    cuts = np.cumsum(sizes)[:-1]
    return _node(out, tensors, lambda g: tuple(np.split(g, cuts, axis=ax)))


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    ax = axis % x.ndim
    if sum(sizes) != x.shape[ax]:
        raise ShapeError(f"split sizes {list(sizes)} do not sum to extent {x.shape[ax]}")
    out, start = [], 0
    for n in sizes:
        out.append(take_slice(x, start, start + n, ax))
        start += n
    return out


def take_slice(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    ax = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return _node(x.data[idx].copy(), (x,), bw)


def repeat(x: Tensor, repeats: int, axis: int) -> Tensor:
    """np.repeat along ``axis`` (nearest-neighbour upsampling)."""
    ax = axis % x.ndim
    n = x.shape[ax]

    def bw(g):
        shp = list(g.shape)
        shp[ax : ax + 1] = [n, repeats]
        return (g.reshape(shp).sum(axis=ax + 1),)

    return _node(np.repeat(x.data, repeats, axis=ax), (x,), bw)


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _node(
        np.ascontiguousarray(np.broadcast_to(x.data, tuple(shape))),
        (x,),
        lambda g: (_unbroadcast(g, src),),
    )


def embedding(table: Tensor, index: np.ndarray) -> Tensor:
    """Row lookup ``table[index]``; gradient scatters back into the rows used."""
    index = np.asarray(index)
    if index.dtype.kind not in "iu":
        raise ContractError(f"embedding index must be integer, got {index.dtype}")
    n = table.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise IndexError(f"embedding index out of range [0, {n}): min={index.min()} max={index.max()}")
    shape = table.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, index.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _node(table.data[index], (table,), bw)


# ---------------------------------------------------------------- reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _node(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _node(np.asarray(x.data.mean()), (x,), lambda g: (np.full(shape, float(g) / n),))


def sum_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    ax = axis % x.ndim
    shape = x.shape

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(x.data.sum(axis=ax, keepdims=keepdims), (x,), bw)


def mean_axis(x: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    return mul(sum_axis(x, axis, keepdims), 1.0 / x.shape[axis])


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``x`` over entries where ``mask`` is true."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"mask shape {mask.shape} != tensor shape {x.shape}")
    count = int(mask.sum())
    if count == 0:
        raise NumericError("masked mean over an empty mask")
    w = mask / count
    return _node(np.asarray((x.data * w).sum()), (x,), lambda g: (float(g) * w,))


# ---------------------------------------------------------------- gradient checking


def grad_compare(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """(analytic, central-difference) gradient pairs, one per parameter.

    ``fn`` is re-evaluated with each parameter entry nudged by +-eps in place.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    for p in params:
        p.grad = None
    loss = fn()
    backward(loss)
    pairs = []
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        numeric = np.zeros(p.shape)
        flat = p.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = fn().item()
                flat[i] = orig - eps
                fm = fn().item()
                flat[i] = orig
                numeric.reshape(-1)[i] = (fp - fm) / (2 * eps)
        pairs.append((analytic, numeric))
    for p in params:
        p.grad = None
    return pairs


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """Element-wise |a - n| / max(|a|, |n|, 1e-8)."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The relative error denominator is max(|analytic|, |numeric|, 1e-8).
    """
    worst = 0.0
    for analytic, numeric in grad_compare(fn, params, eps):
        worst = max(worst, float(np.max(relative_errors(analytic, numeric))))
    return worst
