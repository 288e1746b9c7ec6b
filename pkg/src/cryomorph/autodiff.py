"""A small reverse-mode differentiation engine over numpy arrays.

Only the operators needed by the encoder/decoder, the rigid grid sampler and
the losses are provided. Each op returns a new ``DiffTensor`` whose
``_backward`` closure pushes its output gradient into its parents.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateFrame, ShapeMismatch
from .se3 import DEGENERATE_SIN


class DiffTensor:
    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, values, requires_grad=False, parents=(), backward=None, name=None):
        self.values = np.asarray(values)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None
        self.name = name

    def __repr__(self):
        label = f" {self.name}" if self.name else ""
        return f"DiffTensor{label}(shape={self.shape}, dtype={self.dtype})"

    @property
    def shape(self):
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def ndim(self):
        return self.values.ndim

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if not self.requires_grad:
            return
        g = np.asarray(g, dtype=self.values.dtype)
        if g.shape != self.values.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != value shape {self.values.shape}")
        self.grad = g.copy() if self.grad is None else self.grad + g

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Interior nodes are visited once each in reverse topological order;
        their gradients are released afterwards.
        """
        if grad is None:
            grad = np.ones_like(self.values)
        order = []
        seen = set()
        stack = [(self, False)]
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
        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            node._backward(node.grad)
            if node._parents:
                node.grad = None

    def detach(self):
        return DiffTensor(self.values)

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)


def as_tensor(x) -> DiffTensor:
    return x if isinstance(x, DiffTensor) else DiffTensor(x)


def parameter(values, name=None) -> DiffTensor:
    return DiffTensor(values, requires_grad=True, name=name)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    return DiffTensor(a.values + b.values, parents=(a, b), backward=backward)


def sub(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(-g, b.shape))

    return DiffTensor(a.values - b.values, parents=(a, b), backward=backward)


def mul(a, b) -> DiffTensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.values, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.values, b.shape))

    return DiffTensor(a.values * b.values, parents=(a, b), backward=backward)


def tsum(x, axis=None) -> DiffTensor:
    x = as_tensor(x)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.shape))

    return DiffTensor(x.values.sum(axis=axis), parents=(x,), backward=backward)


def tmean(x, axis=None) -> DiffTensor:
    x = as_tensor(x)
    n = x.values.size if axis is None else x.shape[axis]
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x, shape) -> DiffTensor:
    x = as_tensor(x)

    def backward(g):
        x._accumulate(g.reshape(x.shape))

    return DiffTensor(x.values.reshape(shape), parents=(x,), backward=backward)


def getitem(x, key) -> DiffTensor:
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.values)
        full[key] = g
        x._accumulate(full)

    return DiffTensor(x.values[key], parents=(x,), backward=backward)


def tanh(x) -> DiffTensor:
    x = as_tensor(x)
    y = np.tanh(x.values)

    def backward(g):
        x._accumulate(g * (1.0 - y * y))

    return DiffTensor(y, parents=(x,), backward=backward)


def elu(x) -> DiffTensor:
    x = as_tensor(x)
    pos = x.values > 0
    neg = np.expm1(np.minimum(x.values, 0.0))
    y = np.where(pos, x.values, neg)

    def backward(g):
        x._accumulate(g * np.where(pos, 1.0, neg + 1.0))

    return DiffTensor(y, parents=(x,), backward=backward)


def tabs(x) -> DiffTensor:
    x = as_tensor(x)

    def backward(g):
        x._accumulate(g * np.sign(x.values))

    return DiffTensor(np.abs(x.values), parents=(x,), backward=backward)


def linear(x, w, b=None) -> DiffTensor:
    """``x @ w.T + b`` with ``x`` of shape ``(B, in)`` and ``w`` of ``(out, in)``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"linear: input {x.shape} incompatible with weight {w.shape}")
    parents = (x, w) if b is None else (x, w, as_tensor(b))
    y = x.values @ w.values.T
    if b is not None:
        y = y + parents[2].values

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ w.values)
        if w.requires_grad:
            w._accumulate(g.T @ x.values)
        if b is not None:
            parents[2]._accumulate(g.sum(axis=0))

    return DiffTensor(y, parents=parents, backward=backward)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool) -> DiffTensor:
    """Inverted dropout; the identity outside training."""
    x = as_tensor(x)
    if not training or p <= 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, keep)


def add_gaussian(x, scale: float, rng: np.random.Generator | None, training: bool) -> DiffTensor:
    x = as_tensor(x)
    if not training or scale == 0:
        return x
    return add(x, (rng.standard_normal(x.shape) * scale).astype(x.dtype))


# --- 3D convolution -------------------------------------------------------


def _windows(xp, k, stride):
    win = sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
    return win[:, :, ::stride, ::stride, ::stride]


def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))


def _conv_forward(x, k, stride, pad):
    """Cross-correlation of ``x (B, C, n, n, n)`` with ``k (O, C, s, s, s)``."""
    win = _windows(_pad(x, pad), k.shape[2], stride)
    out = np.tensordot(win, k, axes=([1, 5, 6, 7], [1, 2, 3, 4]))
    return np.ascontiguousarray(out.transpose(0, 4, 1, 2, 3))


def _conv_input_grad(g, k, stride, pad, in_size):
    """Adjoint of ``_conv_forward`` with respect to its input."""
    B = g.shape[0]
    C, ks = k.shape[1], k.shape[2]
    n_out = g.shape[2]
    cols = np.tensordot(k, g, axes=([0], [1]))  # (C, ks, ks, ks, B, o, o, o)
    size = in_size + 2 * pad
    size = max(size, (n_out - 1) * stride + ks)
    xp = np.zeros((B, C, size, size, size), dtype=np.result_type(g, k))
    span = stride * (n_out - 1) + 1
    for i, j, m in np.ndindex(ks, ks, ks):
        xp[:, :, i:i + span:stride, j:j + span:stride, m:m + span:stride] += cols[
            :, i, j, m
        ].transpose(1, 0, 2, 3, 4)
    return xp[:, :, pad:pad + in_size, pad:pad + in_size, pad:pad + in_size]


def _conv_kernel_grad(x, g, ks, stride, pad):
    win = _windows(_pad(x, pad), ks, stride)
    return np.tensordot(g, win, axes=([0, 2, 3, 4], [0, 2, 3, 4]))


def _check_conv(x, k, what):
    if x.ndim != 5 or k.ndim != 5 or len(set(k.shape[2:])) != 1:
        raise ShapeMismatch(f"{what}: expected 5-D input and cubic 5-D kernel")


def conv3(x, k, b=None, stride: int = 1, pad: int = 0) -> DiffTensor:
    """3D cross-correlation. ``x``: (B, C, n, n, n); ``k``: (O, C, s, s, s); ``b``: (O,)."""
    x, k = as_tensor(x), as_tensor(k)
    _check_conv(x, k, "conv3")
    if x.shape[1] != k.shape[1]:
        raise ShapeMismatch(f"conv3: input has {x.shape[1]} channels, kernel expects {k.shape[1]}")
    if conv_output_size(x.shape[2], k.shape[2], stride, pad) < 1:
        raise ShapeMismatch("conv3: kernel larger than padded input")
    parents = (x, k) if b is None else (x, k, as_tensor(b))
    y = _conv_forward(x.values, k.values, stride, pad)
    if b is not None:
        y = y + parents[2].values[None, :, None, None, None]
    n_in = x.shape[2]

    def backward(g):
        if x.requires_grad:
            x._accumulate(_conv_input_grad(g, k.values, stride, pad, n_in))
        if k.requires_grad:
            k._accumulate(_conv_kernel_grad(x.values, g, k.shape[2], stride, pad))
        if b is not None:
            parents[2]._accumulate(g.sum(axis=(0, 2, 3, 4)))

    return DiffTensor(y, parents=parents, backward=backward)


def conv3_transpose(x, k, b=None, stride: int = 1, pad: int = 0) -> DiffTensor:
    """Adjoint of ``conv3`` in its input: ``x`` (B, O, m, m, m) -> (B, C, n, n, n).

    ``k`` has the conv3 layout (O, C, s, s, s); ``n = (m - 1) * stride - 2 * pad + s``.
    """
    x, k = as_tensor(x), as_tensor(k)
    _check_conv(x, k, "conv3_transpose")
    if x.shape[1] != k.shape[0]:
        raise ShapeMismatch(
            f"conv3_transpose: input has {x.shape[1]} channels, kernel expects {k.shape[0]}"
        )
    ks = k.shape[2]
    n_out = (x.shape[2] - 1) * stride - 2 * pad + ks
    if n_out < 1:
        raise ShapeMismatch("conv3_transpose: empty output")
    parents = (x, k) if b is None else (x, k, as_tensor(b))
    y = _conv_input_grad(x.values, k.values, stride, pad, n_out)
    if b is not None:
        y = y + parents[2].values[None, :, None, None, None]

    def backward(g):
        if x.requires_grad:
            x._accumulate(_conv_forward(g, k.values, stride, pad))
        if k.requires_grad:
            k._accumulate(_conv_kernel_grad(g, x.values, ks, stride, pad))
        if b is not None:
            parents[2]._accumulate(g.sum(axis=(0, 2, 3, 4)))

    return DiffTensor(y, parents=parents, backward=backward)


# --- rotations and rigid sampling ----------------------------------------


def s2s2_rotation(p) -> DiffTensor:
    """Batched Gram-Schmidt: (B, 6) -> (B, 3, 3) with columns b1, b2, b3."""
    p = as_tensor(p)
    a1, a2 = p.values[:, :3], p.values[:, 3:]
    n1 = np.linalg.norm(a1, axis=1, keepdims=True)
    n2 = np.linalg.norm(a2, axis=1, keepdims=True)
    cross = np.linalg.norm(np.cross(a1, a2), axis=1, keepdims=True)
    if np.any(n1 <= 1e-12) or np.any(cross <= DEGENERATE_SIN * n1 * n2):
        raise DegenerateFrame("S2S2 vectors are zero or parallel")
    b1 = a1 / n1
    s = np.sum(a2 * b1, axis=1, keepdims=True)
    u = a2 - s * b1
    nu = np.linalg.norm(u, axis=1, keepdims=True)
    b2 = u / nu
    b3 = np.cross(b1, b2)
    R = np.stack([b1, b2, b3], axis=-1)

    def backward(g):
        g1, g2, g3 = g[:, :, 0], g[:, :, 1], g[:, :, 2]
        g1 = g1 + np.cross(b2, g3)
        g2 = g2 + np.cross(g3, b1)
        gu = (g2 - np.sum(g2 * b2, axis=1, keepdims=True) * b2) / nu
        gub1 = np.sum(gu * b1, axis=1, keepdims=True)
        ga2 = gu - gub1 * b1
        g1 = g1 - gub1 * a2 - s * gu
        ga1 = (g1 - np.sum(g1 * b1, axis=1, keepdims=True) * b1) / n1
        p._accumulate(np.concatenate([ga1, ga2], axis=1))

    return DiffTensor(R, parents=(p,), backward=backward)


def sample_rigid(v, rotation, translation) -> DiffTensor:
    """Differentiable rigid resampling of a batch of cubic volumes.

    ``v``: (B, d, d, d); ``rotation``: (B, 3, 3); ``translation``: (B, 3).
    Output voxel ``x`` takes the trilinear value of ``v`` at
    ``R^T (x - c - t) + c``, zero outside the grid.
    """
    from .volume import grid_points, snap, trilinear_stencil

    v, rotation, translation = as_tensor(v), as_tensor(rotation), as_tensor(translation)
    if v.ndim != 4 or len(set(v.shape[1:])) != 1:
        raise ShapeMismatch(f"sample_rigid expects (B, d, d, d), got {v.shape}")
    B, d = v.shape[0], v.shape[1]
    n = d**3
    c = (d - 1) / 2.0
    R = rotation.values.astype(np.float64)
    q = grid_points(d)[None, :, :] - c - translation.values.astype(np.float64)[:, None, :]
    coords = snap(np.einsum("bnj,bji->bni", q, R) + c)
    idx, w, valid, frac, _ = trilinear_stencil(coords, d)
    idx = idx + (np.arange(B) * n)[:, None, None]
    corners = v.values.reshape(-1)[idx]
    out = np.einsum("bnk,bnk->bn", corners, w.astype(v.dtype))

    def backward(g):
        g = g.reshape(B, n)
        if v.requires_grad:
            acc = np.bincount(idx.ravel(), weights=(g[:, :, None] * w).ravel(), minlength=B * n)
            v._accumulate(acc.reshape(v.shape))
        if rotation.requires_grad or translation.requires_grad:
            dp = _trilinear_coord_grad(corners.astype(np.float64), frac) * valid[..., None]
            gp = g[:, :, None].astype(np.float64) * dp
            if rotation.requires_grad:
                rotation._accumulate(np.einsum("bnj,bni->bji", q, gp))
            if translation.requires_grad:
                translation._accumulate(-np.einsum("bni,bji->bj", gp, R))

    out = out.reshape(v.shape)
    return DiffTensor(out, parents=(v, rotation, translation), backward=backward)


def _trilinear_coord_grad(corners, frac):
    """d(value)/d(coords) inside each cell; corners ordered as ``np.ndindex(2, 2, 2)``."""
    tx, ty, tz = frac[..., 0], frac[..., 1], frac[..., 2]
    gx = np.zeros_like(tx)
    gy = np.zeros_like(tx)
    gz = np.zeros_like(tx)
    for k, (cx, cy, cz) in enumerate(np.ndindex(2, 2, 2)):
        val = corners[..., k]
        wx = tx if cx else 1 - tx
        wy = ty if cy else 1 - ty
        wz = tz if cz else 1 - tz
        gx += (1 if cx else -1) * wy * wz * val
        gy += (1 if cy else -1) * wx * wz * val
        gz += (1 if cz else -1) * wx * wy * val
    return np.stack([gx, gy, gz], axis=-1)


# --- losses ---------------------------------------------------------------


def sse(a, b) -> DiffTensor:
    """Per-item sum of squared errors over all non-batch axes: (B, ...) -> (B,)."""
    diff = sub(a, b)
    sq = mul(diff, diff)
    return tsum(reshape(sq, (sq.shape[0], -1)), axis=1)


def l1(a, b) -> DiffTensor:
    diff = tabs(sub(a, b))
    return tsum(reshape(diff, (diff.shape[0], -1)), axis=1)


def min_reduce(x) -> tuple:
    """Row-wise minimum of ``x`` (B, N); the gradient reaches only the argmin.

    Ties resolve to the lowest index. Returns ``(values, argmin)``.
    """
    x = as_tensor(x)
    arg = np.argmin(x.values, axis=1)
    rows = np.arange(x.shape[0])

    def backward(g):
        full = np.zeros_like(x.values)
        full[rows, arg] = g
        x._accumulate(full)

    return DiffTensor(x.values[rows, arg], parents=(x,), backward=backward), arg


def candidate_sse(target, decoded, operators, chunk: int = 8, post=None) -> DiffTensor:
    """SSE between each target and every candidate transform of its decoded volume.

    ``target`` and ``decoded``: (B, d, d, d). ``operators`` is a list of N
    sparse (d^3, d^3) resampling matrices (constants). Returns (B, N).
    ``post`` optionally maps a stack of volumes (m, d, d, d) through a fixed
    self-adjoint linear operator (e.g. a Fourier mask) before comparison.
    The backward pass only touches (item, candidate) pairs with a nonzero
    upstream gradient.
    """
    import scipy.sparse as sp

    target, decoded = as_tensor(target), as_tensor(decoded)
    if target.shape != decoded.shape:
        raise ShapeMismatch(f"target {target.shape} and decoded {decoded.shape} differ")
    B = target.shape[0]
    n = int(np.prod(target.shape[1:]))
    T = target.values.reshape(B, n)
    D = decoded.values.reshape(B, n)
    N = len(operators)
    out = np.empty((B, N), dtype=np.result_type(T, D))
    Dt = np.ascontiguousarray(D.T)
    for start in range(0, N, chunk):
        block = sp.vstack(operators[start:start + chunk], format="csr")
        # (m, B, n) contiguous rows: the same summation order as ``sse``
        Y = np.ascontiguousarray((block @ Dt).reshape(-1, n, B).transpose(0, 2, 1))
        m = Y.shape[0]
        if post is not None:
            Y = post(Y.reshape(m * B, *target.shape[1:])).reshape(m, B, n)
        diff = Y - T[None]
        out[:, start:start + m] = (diff * diff).sum(axis=2).T

    def backward(g):
        gT = np.zeros_like(T)
        gD = np.zeros_like(D)
        shape = (1, *target.shape[1:])
        for b, k in zip(*np.nonzero(g)):
            y = operators[k] @ D[b]
            if post is not None:
                y = post(y.reshape(shape)).reshape(n)
            r = y - T[b]
            scale = 2.0 * g[b, k]
            back = r if post is None else post(r.reshape(shape)).reshape(n)
            gD[b] += scale * (operators[k].T @ back)
            gT[b] -= scale * r
        target._accumulate(gT.reshape(target.shape))
        decoded._accumulate(gD.reshape(decoded.shape))

    return DiffTensor(out, parents=(target, decoded), backward=backward)
