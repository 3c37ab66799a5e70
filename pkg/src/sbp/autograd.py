"""Minimal reverse-mode automatic differentiation over numpy arrays.

Only the operations the TCN and the spliced likelihood need are provided.
Gradients accumulate in ``Tensor.grad`` after calling ``backward()`` on a
scalar result.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, parents: Sequence["Tensor"] = (), backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = tuple(parents)
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = backward

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return getitem(self, index)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data + b.data,
        parents=(a, b),
        backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data - b.data,
        parents=(a, b),
        backward=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.data * b.data,
        parents=(a, b),
        backward=lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return Tensor(
        out,
        parents=(a, b),
        backward=lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor(a.data @ b.data, parents=(a, b), backward=back)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return Tensor(out, parents=(a,), backward=lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.log(a.data), parents=(a,), backward=lambda g: (g / a.data,))


def log1p(a) -> Tensor:
    a = as_tensor(a)
    return Tensor(np.log1p(a.data), parents=(a,), backward=lambda g: (g / (1.0 + a.data),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, 0.0), parents=(a,), backward=lambda g: (g * mask,))


def softplus(a) -> Tensor:
    """``log(1 + exp(a))`` evaluated without overflow."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    sig = 0.5 * (1.0 + np.tanh(0.5 * x))
    return Tensor(out, parents=(a,), backward=lambda g: (g * sig,))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    soft = np.exp(out)
    return Tensor(
        out,
        parents=(a,),
        backward=lambda g: (g - soft * g.sum(axis=axis, keepdims=True),),
    )


def sum(a, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return Tensor(a.data.sum(axis=axis), parents=(a,), backward=back)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor(a.data[index], parents=(a,), backward=back)


def take_along_last(a, idx: np.ndarray) -> Tensor:
    """``a[..., idx]`` row-wise: picks ``a[i, idx[i]]`` from a 2-D tensor."""
    a = as_tensor(a)
    rows = np.arange(a.shape[0])

    def back(g):
        full = np.zeros_like(a.data)
        full[rows, idx] = g
        return (full,)

    return Tensor(a.data[rows, idx], parents=(a,), backward=back)


def where(mask: np.ndarray, a, b) -> Tensor:
    """Select with a constant mask; gradients flow only through the chosen side."""
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    return Tensor(
        np.where(mask, a.data, b.data),
        parents=(a, b),
        backward=lambda g: (_unbroadcast(np.where(mask, g, 0.0), a.shape), _unbroadcast(np.where(mask, 0.0, g), b.shape)),
    )


def causal_conv1d(x, weight, bias, dilation: int = 1) -> Tensor:
    """Dilated causal convolution.

    ``x`` has shape (batch, in_channels, length), ``weight`` has shape
    (out_channels, in_channels, kernel) and ``bias`` (out_channels,).  Tap
    ``k`` of the kernel reads ``x[..., t - (kernel - 1 - k) * dilation]``;
    positions before the start of the window read zeros.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    batch, c_in, length = x.shape
    c_out, _, kernel = weight.shape
    pad = (kernel - 1) * dilation
    # channels-first columns: (kernel * c_in, batch * length)
    xt = np.zeros((c_in, batch, pad + length))
    xt[:, :, pad:] = x.data.transpose(1, 0, 2)
    cols = np.concatenate(
        [xt[:, :, k * dilation : k * dilation + length].reshape(c_in, -1) for k in range(kernel)], axis=0
    )
    w_col = weight.data.transpose(0, 2, 1).reshape(c_out, kernel * c_in)
    out = (w_col @ cols).reshape(c_out, batch, length).transpose(1, 0, 2) + bias.data[None, :, None]

    def back(g):
        g_col = g.transpose(1, 0, 2).reshape(c_out, -1)
        gw = (g_col @ cols.T).reshape(c_out, kernel, c_in).transpose(0, 2, 1)
        gcols = w_col.T @ g_col
        gxt = np.zeros_like(xt)
        for k in range(kernel):
            gxt[:, :, k * dilation : k * dilation + length] += gcols[k * c_in : (k + 1) * c_in].reshape(c_in, batch, length)
        return gxt[:, :, pad:].transpose(1, 0, 2), gw, g.sum(axis=(0, 2))

    return Tensor(out, parents=(x, weight, bias), backward=back)
