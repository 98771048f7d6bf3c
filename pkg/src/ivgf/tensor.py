"""Dense float64 tensors, forward kernels, and a reverse-mode tape.

Conventions:
  * all values are numpy float64 arrays; kernels never mutate their inputs,
    so identical inputs give bit-identical outputs
  * every kernel result carries a creation sequence number; backward walks
    the reachable nodes in exact reverse creation order
  * a backward closure returns one gradient array (or None) per parent
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

_seq_counter = itertools.count()

# Test hook: when set to an op name, backward negates that op's parent
# gradients, simulating a sign bug the gradcheck harness must catch.
FAULT_SIGN_OP = None


class Tensor:
    """A dense float64 array plus an optional place on the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward_fn", "_seq")

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = op
        self._parents = tuple(parents)
        self._backward_fn = backward_fn
        self._seq = next(_seq_counter)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __neg__(self):
        return _node(-self.data, "neg", (self,), lambda g: (-g,))

    def __truediv__(self, c):
        if isinstance(c, Tensor):
            raise TypeError("tensor/tensor division is not a supported kernel")
        inv = 1.0 / float(c)
        return _node(self.data * inv, "divs", (self,), lambda g: (g * inv,))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        x = self

        def back(g):
            return (np.full_like(x.data, float(g.reshape(()))),)

        return _node(np.asarray(self.data.sum()), "sum", (self,), back)

    def mean(self) -> "Tensor":
        x = self
        inv = 1.0 / x.data.size

        def back(g):
            return (np.full_like(x.data, float(g.reshape(())) * inv),)

        return _node(np.asarray(self.data.mean()), "mean", (self,), back)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(data, op, parents, backward_fn) -> Tensor:
    req = any(p.requires_grad for p in parents)
    return Tensor(
        data,
        requires_grad=req,
        op=op,
        parents=parents if req else (),
        backward_fn=backward_fn if req else None,
    )


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise kernels ----------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, "add", (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, "sub", (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, "mul", (a, b), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0

    def back(g):
        return (g * mask,)

    return _node(np.where(mask, x.data, 0.0), "relu", (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    # 1/(1+exp(-x)) computed branch-wise so both tails stay finite
    out = np.empty_like(x.data)
    pos = x.data >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    out[~pos] = ex / (1.0 + ex)

    def back(g):
        return (g * out * (1.0 - out),)

    return _node(out, "sigmoid", (x,), back)


# -- shape kernels ----------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def back(g):
        return (g.reshape(x.shape),)

    return _node(x.data.reshape(shape), "reshape", (x,), back)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a 2-d tensor, got shape {x.shape}")

    def back(g):
        return (np.ascontiguousarray(g.T),)

    return _node(np.ascontiguousarray(x.data.T), "transpose", (x,), back)


def concat(parts, axis: int) -> Tensor:
    parts = tuple(parts)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(np.ascontiguousarray(g[tuple(slicer)]))
        return tuple(grads)

    return _node(np.concatenate([p.data for p in parts], axis=axis), "concat", parts, back)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    if start < 0 or length < 0 or start + length > x.shape[axis]:
        raise DimensionError(
            f"narrow [{start}:{start + length}] out of range for axis {axis} of shape {x.shape}"
        )
    slicer = [slice(None)] * x.ndim
    slicer[axis] = slice(start, start + length)
    slicer = tuple(slicer)

    def back(g):
        gx = np.zeros_like(x.data)
        gx[slicer] = g
        return (gx,)

    return _node(np.ascontiguousarray(x.data[slicer]), "narrow", (x,), back)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Integer-factor nearest-neighbor upsampling of a [C,H,W] map."""
    if x.ndim != 3:
        raise DimensionError(f"upsample_nearest expects [C,H,W], got shape {x.shape}")
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=1), factor, axis=2)

    def back(g):
        return (g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),)

    return _node(out, "upsample_nearest", (x,), back)


# -- dense kernels ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _node(a.data @ b.data, "matmul", (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x[..., D_in] @ weight[D_out, D_in]^T + bias[D_out]."""
    d_in = x.shape[-1]
    if weight.ndim != 2 or weight.shape[1] != d_in:
        raise DimensionError(
            f"linear: input trailing dim {d_in} does not match weight {weight.shape}"
        )
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias shape {bias.shape} != ({weight.shape[0]},)")
    out = x.data @ weight.data.T + bias.data

    def back(g):
        g2 = g.reshape(-1, weight.shape[0])
        x2 = x.data.reshape(-1, d_in)
        return g @ weight.data, g2.T @ x2, g2.sum(axis=0)

    return _node(out, "linear", (x, weight, bias), back)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution of a [C,H,W] map with [C_out,C_in,k,k] weights, zero padding."""
    if x.ndim != 3:
        raise DimensionError(f"conv2d expects input [C,H,W], got shape {x.shape}")
    c_out, c_in, kh, kw = weight.shape
    if kh != kw or kh not in (1, 3):
        raise ValueError(f"conv2d supports square 1x1 or 3x3 kernels, got {kh}x{kw}")
    if x.shape[0] != c_in:
        raise DimensionError(
            f"conv2d: weight expects {c_in} input channels, input has {x.shape[0]}"
        )
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} != ({c_out},)")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    _, h, w = x.shape
    k = kh
    if h + 2 * padding < k or w + 2 * padding < k:
        raise DimensionError(f"conv2d: padded input {h}x{w} (pad {padding}) smaller than kernel {k}")
    h_out = (h + 2 * padding - k) // stride + 1
    w_out = (w + 2 * padding - k) // stride + 1

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (padding, padding), (padding, padding)))

    # im2col: cols[c, di, dj, i, j] = padded[c, i*s + di, j*s + dj]
    cols = np.empty((c_in, k, k, h_out, w_out))
    for di in range(k):
        for dj in range(k):
            cols[:, di, dj] = xp[:, di : di + h_out * stride : stride, dj : dj + w_out * stride : stride]
    cols2 = cols.reshape(c_in * k * k, h_out * w_out)
    out = (weight.data.reshape(c_out, -1) @ cols2 + bias.data[:, None]).reshape(c_out, h_out, w_out)

    def back(g):
        g2 = g.reshape(c_out, -1)
        gw = (g2 @ cols2.T).reshape(weight.shape)
        gb = g2.sum(axis=1)
        gcols = (weight.data.reshape(c_out, -1).T @ g2).reshape(c_in, k, k, h_out, w_out)
        gxp = np.zeros_like(xp)
        for di in range(k):
            for dj in range(k):
                gxp[:, di : di + h_out * stride : stride, dj : dj + w_out * stride : stride] += gcols[:, di, dj]
        gx = gxp[:, padding : padding + h, padding : padding + w] if padding else gxp
        return np.ascontiguousarray(gx), gw, gb

    return _node(out, "conv2d", (x, weight, bias), back)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Row-wise normalization of [N,C] with biased variance."""
    if x.ndim != 2:
        raise DimensionError(f"layer_norm expects [N,C], got shape {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} != ({c},)"
        )
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be > 0, got {eps}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)  # biased: divide by C
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std

    def back(g):
        gy = g * gamma.data
        gx = (gy - gy.mean(axis=1, keepdims=True) - xhat * (gy * xhat).mean(axis=1, keepdims=True)) * inv_std
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _node(xhat * gamma.data + beta.data, "layer_norm", (x, gamma, beta), back)


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of [N,M], stabilized by per-row max subtraction."""
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects [N,M], got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def back(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _node(s, "softmax_rows", (x,), back)


def log_softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"log_softmax_rows expects [N,M], got shape {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True)
    logs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def back(g):
        return (g - np.exp(logs) * g.sum(axis=1, keepdims=True),)

    return _node(logs, "log_softmax_rows", (x,), back)


# -- pooling ----------------------------------------------------------------


def _bin_edges(length: int, out: int):
    """Adaptive bin i covers [floor(i*L/out), ceil((i+1)*L/out))."""
    return [(math.floor(i * length / out), math.ceil((i + 1) * length / out)) for i in range(out)]


def adaptive_pool(x: Tensor, mode: str, out_size) -> Tensor:
    """Adaptive pooling: [C,H,W] -> [C,oh,ow], or [N,C] -> [N,out] along rows."""
    if mode not in ("avg", "max"):
        raise ValueError(f"adaptive_pool mode must be 'avg' or 'max', got {mode!r}")
    if x.ndim == 3:
        oh, ow = (out_size, out_size) if isinstance(out_size, int) else tuple(out_size)
        return _adaptive_pool2d(x, mode, oh, ow)
    if x.ndim == 2:
        out = out_size if isinstance(out_size, int) else tuple(out_size)[0]
        return _adaptive_pool_rows(x, mode, out)
    raise DimensionError(f"adaptive_pool expects [C,H,W] or [N,C], got shape {x.shape}")


def _check_pool_target(target: int, length: int, what: str):
    if target <= 0:
        raise ValueError(f"adaptive_pool: {what} target must be >= 1, got {target}")
    if target > length:
        raise DimensionError(f"adaptive_pool: {what} target {target} exceeds input {length}")


def _adaptive_pool2d(x: Tensor, mode: str, oh: int, ow: int) -> Tensor:
    c, h, w = x.shape
    _check_pool_target(oh, h, "height")
    _check_pool_target(ow, w, "width")
    rows = _bin_edges(h, oh)
    cols = _bin_edges(w, ow)
    out = np.empty((c, oh, ow))
    argmax = np.empty((c, oh, ow), dtype=np.int64) if mode == "max" else None
    for i, (r0, r1) in enumerate(rows):
        for j, (c0, c1) in enumerate(cols):
            block = x.data[:, r0:r1, c0:c1].reshape(c, -1)
            if mode == "avg":
                out[:, i, j] = block.mean(axis=1)
            else:
                idx = block.argmax(axis=1)
                argmax[:, i, j] = idx
                out[:, i, j] = block[np.arange(c), idx]

    def back(g):
        gx = np.zeros_like(x.data)
        for i, (r0, r1) in enumerate(rows):
            for j, (c0, c1) in enumerate(cols):
                if mode == "avg":
                    area = (r1 - r0) * (c1 - c0)
                    gx[:, r0:r1, c0:c1] += (g[:, i, j] / area)[:, None, None]
                else:
                    width = c1 - c0
                    idx = argmax[:, i, j]
                    gx[np.arange(c), r0 + idx // width, c0 + idx % width] += g[:, i, j]
        return (gx,)

    return _node(out, f"adaptive_{mode}_pool2d", (x,), back)


def _adaptive_pool_rows(x: Tensor, mode: str, out_width: int) -> Tensor:
    n, c = x.shape
    _check_pool_target(out_width, c, "width")
    edges = _bin_edges(c, out_width)
    out = np.empty((n, out_width))
    argmax = np.empty((n, out_width), dtype=np.int64) if mode == "max" else None
    for j, (c0, c1) in enumerate(edges):
        block = x.data[:, c0:c1]
        if mode == "avg":
            out[:, j] = block.mean(axis=1)
        else:
            idx = block.argmax(axis=1)
            argmax[:, j] = idx
            out[:, j] = block[np.arange(n), idx]

    def back(g):
        gx = np.zeros_like(x.data)
        for j, (c0, c1) in enumerate(edges):
            if mode == "avg":
                gx[:, c0:c1] += (g[:, j] / (c1 - c0))[:, None]
            else:
                gx[np.arange(n), c0 + argmax[:, j]] += g[:, j]
        return (gx,)

    return _node(out, f"adaptive_{mode}_pool_rows", (x,), back)


# -- the tape ---------------------------------------------------------------


@dataclass
class Graph:
    """Kernel applications reachable from a root, in forward creation order."""

    nodes: list


def trace(root: Tensor) -> Graph:
    seen = set()
    nodes = []
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack.extend(t._parents)
    nodes.sort(key=lambda t: t._seq)
    return Graph(nodes)


def backward(loss: Tensor) -> Graph:
    """Accumulate d(loss)/d(node) into .grad for every reachable tensor."""
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = trace(loss)
    for node in graph.nodes:
        node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        if node._backward_fn is None or node.grad is None:
            continue
        grads = node._backward_fn(node.grad)
        if FAULT_SIGN_OP is not None and node.op == FAULT_SIGN_OP:
            grads = tuple(None if g is None else -g for g in grads)
        for parent, g in zip(node._parents, grads):
            if g is None or not parent.requires_grad:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
    return graph


def named_gradients(loss: Tensor, params) -> dict:
    """Backward pass returning {name: gradient}; unreached params get zeros."""
    for p in params.values():
        p.grad = None
    backward(loss)
    return {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }


# -- independent gradient oracle ---------------------------------------------


def finite_diff_grad(f, x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function, element by element.

    `f` is called with `x` after perturbing x.data in place; the original
    values are restored before returning. Stays fully independent of the
    tape: it only ever evaluates f.
    """
    if eps <= 0:
        raise ValueError(f"finite_diff_grad eps must be > 0, got {eps}")
    flat = x.data.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(x))
        flat[i] = orig - eps
        f_minus = float(f(x))
        flat[i] = orig
        grad[i] = (f_plus - f_minus) / (2.0 * eps)
    return grad.reshape(x.shape)


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-3) -> float:
    """Largest elementwise |a-b| / max(|a|, |b|, floor).

    The floor guards the quotient where both gradients are ~0, where central
    differences only carry roundoff noise.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
