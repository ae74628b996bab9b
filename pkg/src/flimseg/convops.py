"""Dense 3D convolution primitives for channels-last float arrays.

Convolution here is always stride 1 with 'same' zero padding and odd
kernels: the dot product between a filter's weight vector and the
vectorized patch at each voxel, which is the view the whole filter
estimation pipeline is built on. Filter weight vectors are ordered
(channel, dz, dy, dx), matching the patch engine.

Implementation: one GEMM per kernel tap over the flattened padded array.
A window start at padded coordinate (z, y, x) has flat index
z*Yp*Xp + y*Xp + x, so shifting by a tap offset is a constant flat shift
and every tap's input is a contiguous slice; no im2col materialization
is needed. Rows whose start lies in the padding ring compute garbage and
are never read back.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.linalg.blas import dgemm, sgemm

BLOCK_ROWS = 16384


def _gemm_acc(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> None:
    """c += a @ b for C-contiguous a (m,k), b (k,n), c (m,n), in place.

    Runs BLAS on the transposed (Fortran) views so nothing is copied.
    """
    gemm = sgemm if a.dtype == np.float32 else dgemm
    gemm(1.0, b.T, a.T, beta=1.0, c=c.T, overwrite_c=True)


def _flat_geometry(spatial, kernel):
    z, y, x = spatial
    r = kernel // 2
    zp, yp, xp = z + 2 * r, y + 2 * r, x + 2 * r
    max_shift = (kernel - 1) * (yp * xp + xp + 1)
    rows = zp * yp * xp - max_shift
    return (zp, yp, xp), rows


def pad_input(x: np.ndarray, kernel: int) -> np.ndarray:
    """Zero-pad a (Z, Y, X, C) array by k//2 on each spatial side."""
    r = kernel // 2
    return np.pad(x, ((r, r), (r, r), (r, r), (0, 0)))


def _valid_view(flat: np.ndarray, spatial, padded_spatial, channels):
    """(Z, Y, X, C) strided view of the valid window-start rows."""
    z, y, x = spatial
    _, yp, xp = padded_spatial
    item = flat.itemsize
    return as_strided(
        flat,
        shape=(z, y, x, channels),
        strides=(yp * xp * channels * item, xp * channels * item, channels * item, item),
    )


def _tap_offsets(kernel: int, yp: int, xp: int):
    for dz in range(kernel):
        for dy in range(kernel):
            for dx in range(kernel):
                yield dz, dy, dx, (dz * yp + dy) * xp + dx


def conv3d(x: np.ndarray, weights: np.ndarray, kernel: int, padded: np.ndarray = None):
    """'Same' 3D convolution of (Z, Y, X, C_in) with (C_out, C_in*k^3) weights.

    Returns (out, padded): the (Z, Y, X, C_out) result plus the padded input,
    which callers doing backpropagation reuse for the weight gradient.
    """
    if kernel % 2 == 0 or kernel < 1:
        raise ValueError(f"kernel must be odd and positive, got {kernel}")
    z, y, xw, c_in = x.shape
    n_cols = c_in * kernel ** 3
    if weights.ndim != 2 or weights.shape[1] != n_cols:
        raise ValueError(
            f"weights must be (C_out, {n_cols}) for C_in={c_in}, k={kernel}; "
            f"got {weights.shape}"
        )
    c_out = weights.shape[0]
    taps = weights.reshape(c_out, c_in, kernel, kernel, kernel)

    if padded is None:
        padded = pad_input(x, kernel)
    pshape = padded.shape[:3]
    _, rows = _flat_geometry((z, y, xw), kernel)
    flat = padded.reshape(-1, c_in)

    tap_mats = [
        (shift, np.ascontiguousarray(taps[:, :, dz, dy, dx].T, dtype=x.dtype))
        for dz, dy, dx, shift in _tap_offsets(kernel, pshape[1], pshape[2])
    ]
    acc = np.zeros((rows, c_out), dtype=x.dtype)
    # row blocks keep one input slab cache-hot across all k^3 taps
    for r0 in range(0, rows, BLOCK_ROWS):
        r1 = min(r0 + BLOCK_ROWS, rows)
        block = acc[r0:r1]
        for shift, tap in tap_mats:
            _gemm_acc(flat[r0 + shift : r1 + shift], tap, block)
    out = np.ascontiguousarray(_valid_view(acc, (z, y, xw), pshape, c_out))
    return out, padded


def conv3d_grad_weights(
    grad_out: np.ndarray, padded: np.ndarray, kernel: int
) -> np.ndarray:
    """Gradient w.r.t. the (C_out, C_in*k^3) weight matrix."""
    z, y, xw, c_out = grad_out.shape
    c_in = padded.shape[3]
    pshape = padded.shape[:3]
    _, rows = _flat_geometry((z, y, xw), kernel)
    flat = padded.reshape(-1, c_in)

    g_acc = np.zeros((rows, c_out), dtype=grad_out.dtype)
    _valid_view(g_acc, (z, y, xw), pshape, c_out)[...] = grad_out

    gemm = sgemm if grad_out.dtype == np.float32 else dgemm
    offsets = list(_tap_offsets(kernel, pshape[1], pshape[2]))
    sums = [np.zeros((c_in, c_out), dtype=grad_out.dtype) for _ in offsets]
    for r0 in range(0, rows, BLOCK_ROWS):
        r1 = min(r0 + BLOCK_ROWS, rows)
        g_block = g_acc[r0:r1]
        for acc, (_, _, _, shift) in zip(sums, offsets):
            block = flat[r0 + shift : r1 + shift]
            # (C_out, C_in) += g_block^T @ block; transposed views are
            # Fortran-order, so BLAS consumes them without copying
            gemm(1.0, g_block.T, block.T, trans_b=1, beta=1.0, c=acc.T, overwrite_c=True)
    grad_w = np.empty((c_out, c_in, kernel, kernel, kernel), dtype=grad_out.dtype)
    for acc, (dz, dy, dx, _) in zip(sums, offsets):
        grad_w[:, :, dz, dy, dx] = acc.T
    return grad_w.reshape(c_out, c_in * kernel ** 3)


def flip_weights(weights: np.ndarray, c_in: int, kernel: int) -> np.ndarray:
    """(C_out, C_in*k^3) -> (C_in, C_out*k^3) with spatially flipped taps.

    Convolving an output gradient with these weights yields the input
    gradient of the original convolution.
    """
    c_out = weights.shape[0]
    w = weights.reshape(c_out, c_in, kernel, kernel, kernel)
    w = w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
    return np.ascontiguousarray(w).reshape(c_in, c_out * kernel ** 3)


def conv3d_grad_input(
    grad_out: np.ndarray, weights: np.ndarray, c_in: int, kernel: int
) -> np.ndarray:
    """Gradient w.r.t. the convolution input, same shape as the input."""
    out, _ = conv3d(grad_out, flip_weights(weights, c_in, kernel), kernel)
    return out


def maxpool2(x: np.ndarray):
    """2x2x2 max pooling with stride 2; returns (pooled, argmax indices).

    Odd trailing slices are dropped (floor semantics).
    """
    z, y, w, c = x.shape
    z2, y2, w2 = z // 2, y // 2, w // 2
    blocks = np.ascontiguousarray(
        x[: z2 * 2, : y2 * 2, : w2 * 2]
        .reshape(z2, 2, y2, 2, w2, 2, c)
        .transpose(0, 2, 4, 1, 3, 5, 6)
    ).reshape(z2, y2, w2, 8, c)
    idx = np.argmax(blocks, axis=3)
    pooled = np.take_along_axis(blocks, idx[:, :, :, None], axis=3)[:, :, :, 0]
    return np.ascontiguousarray(pooled), idx


def maxpool2_backward(grad_out: np.ndarray, idx: np.ndarray, in_shape) -> np.ndarray:
    """Scatter pooled gradients back to the argmax positions."""
    z, y, w, c = in_shape
    z2, y2, w2 = grad_out.shape[:3]
    blocks = np.zeros((z2, y2, w2, 8, c), dtype=grad_out.dtype)
    np.put_along_axis(blocks, idx[:, :, :, None], grad_out[:, :, :, None], axis=3)
    grad_in = np.zeros(in_shape, dtype=grad_out.dtype)
    grad_in[: z2 * 2, : y2 * 2, : w2 * 2] = (
        blocks.reshape(z2, y2, w2, 2, 2, 2, c)
        .transpose(0, 3, 1, 4, 2, 5, 6)
        .reshape(z2 * 2, y2 * 2, w2 * 2, c)
    )
    return grad_in


def convtranspose2(x: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Transposed convolution, kernel 2^3 stride 2, doubling each extent.

    weights: (C_in, C_out, 2, 2, 2). Each output voxel receives exactly one
    kernel tap, so the op reduces to eight 1x1 convolutions.
    """
    z, y, w, c_in = x.shape
    c_out = weights.shape[1]
    out = np.empty((2 * z, 2 * y, 2 * w, c_out), dtype=x.dtype)
    x_flat = x.reshape(-1, c_in)
    for a in range(2):
        for b in range(2):
            for c in range(2):
                tap = np.ascontiguousarray(weights[:, :, a, b, c], dtype=x.dtype)
                out[a::2, b::2, c::2] = (x_flat @ tap).reshape(z, y, w, c_out)
    return out


def convtranspose2_grad_input(grad_out: np.ndarray, weights: np.ndarray) -> np.ndarray:
    c_in, c_out = weights.shape[:2]
    z, y, w = (s // 2 for s in grad_out.shape[:3])
    grad_in = np.zeros((z * y * w, c_in), dtype=grad_out.dtype)
    for a in range(2):
        for b in range(2):
            for c in range(2):
                tap = np.ascontiguousarray(weights[:, :, a, b, c].T, dtype=grad_out.dtype)
                g = np.ascontiguousarray(grad_out[a::2, b::2, c::2]).reshape(-1, c_out)
                _gemm_acc(g, tap, grad_in)
    return grad_in.reshape(z, y, w, c_in)


def convtranspose2_grad_weights(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    c_in = x.shape[3]
    c_out = grad_out.shape[3]
    grad_w = np.empty((c_in, c_out, 2, 2, 2), dtype=grad_out.dtype)
    x_flat = x.reshape(-1, c_in)
    for a in range(2):
        for b in range(2):
            for c in range(2):
                g = np.ascontiguousarray(grad_out[a::2, b::2, c::2]).reshape(-1, c_out)
                grad_w[:, :, a, b, c] = x_flat.T @ g
    return grad_w
