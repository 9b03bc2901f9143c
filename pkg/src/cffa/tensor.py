"""Small reverse-mode autodiff engine on top of numpy (float64 throughout).

Every differentiable operation returns a new :class:`Tensor` that remembers its
parents and a backward rule. ``Tensor.backward`` walks the graph in reverse
topological order and accumulates gradients into every tensor that requires
them. Gradients add across repeated uses; callers zero them between steps.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

PROB_CLAMP = 1e-7

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (inference paths)."""
    global _grad_enabled
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def zero_grad(self):
        self.grad = None

    def backward(self, grad: np.ndarray | None = None):
        """Backpropagate from this tensor; a scalar gets seed gradient 1."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                # leaf
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return mul(self, power(as_tensor(other), -1.0))

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    t = Tensor(data, requires_grad=True, name=name)
    return t


def _topological_order(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise -----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def power(a: Tensor, exponent: float) -> Tensor:
    a = as_tensor(a)
    return _result(
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def absolute(a: Tensor) -> Tensor:
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clamp(a: Tensor, low: float, high: float) -> Tensor:
    inside = (a.data >= low) & (a.data <= high)
    return _result(np.clip(a.data, low, high), (a,), lambda g: (g * inside,))


# reductions and shape --------------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    inverse = None if axes is None else np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def take(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, sizes, axis=axis)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    return _result(
        np.stack([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.moveaxis(g, axis, 0)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


# layers ----------------------------------------------------------------------

def fully_connected(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """out[n, j] = sum_i w[j, i] * x[n, i] + b[j]."""
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise ShapeError(
            f"fully_connected: input {x.shape} incompatible with weights {weights.shape}"
        )
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"fully_connected: bias {bias.shape} != ({weights.shape[0]},)")

    def backward(g):
        return g @ weights.data, g.T @ x.data, g.sum(axis=0)

    return _result(x.data @ weights.data.T + bias.data, (x, weights, bias), backward)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (N, C, H, W) padded -> (N, Ho, Wo, C, kh, kw)
    windows = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]
    return windows.transpose(0, 2, 3, 1, 4, 5)


def conv2d(x: Tensor, weights: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4 or weights.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weights, got {x.shape}, {weights.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weights.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input has {cin} channels but weights expect {wcin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias {bias.shape} != ({cout},)")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError("conv2d: kernel larger than padded input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols6 = _im2col(xp, kh, kw, stride)
    ho, wo = cols6.shape[1], cols6.shape[2]
    cols = cols6.reshape(n * ho * wo, cin * kh * kw)
    wmat = weights.data.reshape(cout, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (g2.T @ cols).reshape(weights.shape)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw, gb

    return _result(np.ascontiguousarray(out), (x, weights, bias), backward)


# activations and losses --------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = np.empty_like(x.data)
    pos = x.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),))


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ShapeError(f"softmax_rows needs a rank-2 input, got {x.shape}")
    z = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    out = z / z.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _result(out, (x,), backward)


def smooth_l1(residual: Tensor) -> Tensor:
    """Elementwise Huber with beta 1: 0.5 r^2 if |r| < 1 else |r| - 0.5."""
    r = residual.data
    small = np.abs(r) < 1.0
    out = np.where(small, 0.5 * r * r, np.abs(r) - 0.5)
    return _result(out, (residual,), lambda g: (g * np.where(small, r, np.sign(r)),))


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean negative log-probability of ``labels`` under row-wise ``probs``."""
    if probs.ndim != 2:
        raise ShapeError(f"cross_entropy needs rank-2 probabilities, got {probs.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n, k = probs.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"cross_entropy: label outside [0, {k})")
    if n == 0:
        return _result(np.asarray(0.0), (probs,), lambda g: (np.zeros_like(probs.data),))
    rows = np.arange(n)
    picked = probs.data[rows, labels]
    clipped = np.clip(picked, PROB_CLAMP, 1.0 - PROB_CLAMP)
    inside = (picked >= PROB_CLAMP) & (picked <= 1.0 - PROB_CLAMP)

    def backward(g):
        full = np.zeros_like(probs.data)
        full[rows, labels] = -g * inside / (clipped * n)
        return (full,)

    return _result(np.asarray(-np.log(clipped).mean()), (probs,), backward)


def binary_cross_entropy(probs: Tensor, targets, reduction: str = "mean") -> Tensor:
    """-(t log p + (1 - t) log(1 - p)) with p clamped to [1e-7, 1 - 1e-7]."""
    p = clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    t = np.asarray(targets, dtype=np.float64)
    losses = -(log(p) * t + log(1.0 - p) * (1.0 - t))
    if reduction == "none":
        return losses
    if reduction == "sum":
        return losses.sum()
    return losses.mean()


def activation(x: Tensor, kind: str, labels=None) -> Tensor:
    table = {
        "relu": relu,
        "sigmoid": sigmoid,
        "softmax_rows": softmax_rows,
        "smooth_l1": smooth_l1,
    }
    if kind == "cross_entropy":
        return cross_entropy(x, labels)
    if kind not in table:
        raise ValueError(f"unknown activation {kind!r}")
    return table[kind](x)


def gradient_reverse(x: Tensor, coeff: float = 1.0) -> Tensor:
    """Identity forward; backward multiplies the incoming gradient by -coeff."""
    if coeff < 0:
        raise ValueError("gradient_reverse coefficient must be non-negative")
    return _result(x.data.copy(), (x,), lambda g: (-coeff * g,))


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Align-corners linear interpolation weights, shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in))
    if n_in == 1 or n_out == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m


def bilinear_upsample(fmap: Tensor, out_h: int, out_w: int) -> Tensor:
    if fmap.ndim != 2:
        raise ShapeError(f"bilinear_upsample expects an [H, W] map, got {fmap.shape}")
    if out_h <= 0 or out_w <= 0:
        raise ValueError("bilinear_upsample: output size must be positive")
    h, w = fmap.shape
    if out_h < h or out_w < w:
        raise ValueError(f"bilinear_upsample only enlarges: {h}x{w} -> {out_h}x{out_w}")
    ry = interpolation_matrix(h, out_h)
    rx = interpolation_matrix(w, out_w)
    return _result(ry @ fmap.data @ rx.T, (fmap,), lambda g: (ry.T @ g @ rx,))


# gradient checking -------------------------------------------------------------

def check_gradients(
    loss_fn: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-5
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn`` rebuilds the graph from ``params`` on every call and must return
    a scalar. Per parameter tensor the error is ``||a - n|| / max(||a||, ||n||)``;
    tensors whose gradients are both numerically zero are skipped.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    if loss.data.size != 1:
        raise ShapeError("check_gradients needs a scalar loss")
    loss.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = float(loss_fn().data)
            flat[i] = orig - step
            down = float(loss_fn().data)
            flat[i] = orig
            numeric[i] = (up - down) / (2 * step)
        a = analytic.reshape(-1)
        scale = max(np.linalg.norm(a), np.linalg.norm(numeric))
        if scale > 1e-12:
            worst = max(worst, float(np.linalg.norm(a - numeric) / scale))
    return worst
