"""Minimal reverse-mode gradient engine for the fixed operator set the
segmentation network needs.

Tensors wrap channels-last numpy arrays, (Z, Y, X, C) for feature blocks.
Each op records a closure that maps the output gradient to the parents'
gradients; `backward` walks the tape in reverse topological order. The
engine is dtype-generic: float32 in production, float64 for gradient
verification against finite differences.
"""

from __future__ import annotations

import numpy as np

from . import convops


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None

    @property
    def shape(self):
        return self.data.shape

    def accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad
        else:
            self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None


def _node(data, parents, backward_fn) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents))
    if out.requires_grad:
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def backward(root: Tensor, seed_grad: np.ndarray) -> None:
    """Propagate d(loss)/d(root) through the tape into every .grad."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            stack.append((parent, False))

    root.accumulate(np.ascontiguousarray(seed_grad, dtype=root.data.dtype))
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        node.backward_fn(node.grad)
        node.grad = None  # interior grads are no longer needed; free eagerly


def conv3d(x: Tensor, w: Tensor, kernel: int) -> Tensor:
    """'Same' convolution; w is the (C_out, C_in*k^3) filter matrix."""
    out_data, padded = convops.conv3d(x.data, w.data, kernel)
    c_in = x.data.shape[3]

    def backward_fn(grad):
        if w.requires_grad:
            w.accumulate(convops.conv3d_grad_weights(grad, padded, kernel))
        if x.requires_grad:
            x.accumulate(convops.conv3d_grad_input(grad, w.data, c_in, kernel))

    return _node(out_data, (x, w), backward_fn)


def conv_transpose2(x: Tensor, w: Tensor) -> Tensor:
    """Stride-2 transposed convolution; w is (C_in, C_out, 2, 2, 2)."""
    out_data = convops.convtranspose2(x.data, w.data)

    def backward_fn(grad):
        if w.requires_grad:
            w.accumulate(convops.convtranspose2_grad_weights(grad, x.data))
        if x.requires_grad:
            x.accumulate(convops.convtranspose2_grad_input(grad, w.data))

    return _node(out_data, (x, w), backward_fn)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias along the trailing axis."""

    def backward_fn(grad):
        if b.requires_grad:
            b.accumulate(grad.reshape(-1, grad.shape[-1]).sum(axis=0))
        if x.requires_grad:
            x.accumulate(grad)

    return _node(x.data + b.data, (x, b), backward_fn)


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)

    def backward_fn(grad):
        if x.requires_grad:
            x.accumulate(np.where(out_data > 0, grad, 0))

    return _node(out_data, (x,), backward_fn)


def maxpool2(x: Tensor) -> Tensor:
    pooled, idx = convops.maxpool2(x.data)

    def backward_fn(grad):
        if x.requires_grad:
            x.accumulate(convops.maxpool2_backward(grad, idx, x.data.shape))

    return _node(pooled, (x,), backward_fn)


def concat(parts: list[Tensor]) -> Tensor:
    """Concatenate feature blocks along the channel (last) axis."""
    widths = [p.data.shape[-1] for p in parts]
    bounds = np.cumsum([0] + widths)

    def backward_fn(grad):
        for part, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if part.requires_grad:
                part.accumulate(np.ascontiguousarray(grad[..., lo:hi]))

    return _node(np.concatenate([p.data for p in parts], axis=-1), parts, backward_fn)


def centralize(x: Tensor, mean: np.ndarray, std: np.ndarray) -> Tensor:
    """Per-channel (x - mean) / std with constant (non-trainable) statistics."""
    mean = np.asarray(mean, dtype=x.data.dtype)
    std = np.asarray(std, dtype=x.data.dtype)

    def backward_fn(grad):
        if x.requires_grad:
            x.accumulate(grad / std)

    return _node((x.data - mean) / std, (x,), backward_fn)
