"""Differentiable operations over :class:`Tensor`.

Every op takes Tensors (or array-likes, treated as constants), computes its
forward value with numpy and, when recording, attaches a closure mapping the
output gradient to one gradient per input.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import NonFiniteError, ShapeError, Tensor, as_tensor, make_output

NEG_INF = -1e9


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def _require_finite(op: str, *arrays: np.ndarray) -> None:
    for arr in arrays:
        if not np.isfinite(arr).all():
            raise NonFiniteError(op, where="input")


# ----------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(g, sb) if b.requires_grad else None)

    return make_output(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (_unbroadcast(g, sa) if a.requires_grad else None,
                _unbroadcast(-g, sb) if b.requires_grad else None)

    return make_output(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return make_output(ad * bd, (a, b), backward, "mul")


def scale(a, c: float) -> Tensor:
    """Multiply by a python scalar."""
    a = as_tensor(a)
    c = float(c)
    return make_output(a.data * c, (a,), lambda g: (g * c,), "mul-by-scalar")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_output(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return make_output(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_output(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return make_output(y, (a,), lambda g: (g * y,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise NonFiniteError("log", where="input (non-positive)")
    x = a.data
    return make_output(np.log(x), (a,), lambda g: (g / x,), "log")


# ------------------------------------------------------------------ reductions

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_output(np.asarray(y, dtype=np.float64), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    y = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([shape[ax] for ax in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return make_output(np.asarray(y, dtype=np.float64), (a,), backward, "mean")


# -------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError("matmul", ad.shape, bd.shape)
    try:
        y = ad @ bd
    except ValueError:
        raise ShapeError("matmul", ad.shape, bd.shape) from None

    def backward(g):
        ga = gb = None
        if bd.ndim == 2:
            k, m = bd.shape
            if b.requires_grad:
                gb = ad.reshape(-1, k).T @ g.reshape(-1, m)
            if a.requires_grad:
                ga = g @ bd.T
        else:
            if a.requires_grad:
                ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
            if b.requires_grad:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return make_output(y, (a, b), backward, "matmul")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    """Concatenate along ``axis`` (last dimension by default)."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat-last-dim", detail="no inputs")
    ndim = ts[0].ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim or any(t.shape[i] != ts[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeError("concat-last-dim", ts[0].shape, t.shape)
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))

    return make_output(np.concatenate([t.data for t in ts], axis=ax), ts, backward, "concat-last-dim")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        y = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return make_output(y, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_output(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is Ellipsis or i is None for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic_index(idx)

    rows = np.asarray(idx) if isinstance(idx, (list, np.ndarray)) else None
    row_gather = rows is not None and rows.ndim == 1 and rows.dtype.kind in "iu"

    def backward(g):
        if row_gather:
            # gather along axis 0: scatter-add back with a one-hot product (much faster than add.at)
            onehot = np.zeros((shape[0], rows.size))
            onehot[rows, np.arange(rows.size)] = 1.0
            return ((onehot @ g.reshape(rows.size, -1)).reshape(shape),)
        out = np.zeros(shape, dtype=np.float64)
        if basic:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return make_output(np.array(a.data[idx], dtype=np.float64), (a,), backward, "getitem")


# ------------------------------------------------------------ normalisations

def softmax(a) -> Tensor:
    """Softmax over the last dimension, max-subtracted."""
    a = as_tensor(a)
    _require_finite("softmax-last-dim", a.data)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_output(y, (a,), backward, "softmax-last-dim")


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    _require_finite("log-softmax", a.data)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return make_output(y, (a,), backward, "log-softmax")


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError("layer-norm", a.shape, gamma.shape, beta.shape)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data

    def backward(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(x.ndim - 1))
        return dx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_output(xhat * gd + beta.data, (a, gamma, beta), backward, "layer-norm")


# ---------------------------------------------------------------------- losses

def l1_distance(a, b, weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean absolute difference; ``weights`` (broadcastable constant) masks entries."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("l1-distance", a.shape, b.shape)
    diff = a.data - b.data
    if weights is None:
        w = np.ones_like(diff)
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), diff.shape)
    denom = max(float(w.sum()), 1e-300)
    y = np.asarray((np.abs(diff) * w).sum() / denom)
    sgn = np.sign(diff) * w / denom

    def backward(g):
        return g * sgn, -g * sgn

    return make_output(y, (a, b), backward, "l1-distance")


def cross_entropy(logits, targets, mask: Optional[np.ndarray] = None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits`` (last dim)."""
    logits = as_tensor(logits)
    t = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != t.shape:
        raise ShapeError("cross-entropy-with-logits", logits.shape, t.shape)
    v = logits.shape[-1]
    if t.size and (t.min() < 0 or t.max() >= v):
        raise ShapeError("cross-entropy-with-logits", logits.shape, t.shape, detail="target id out of range")
    _require_finite("cross-entropy-with-logits", logits.data)
    m = np.ones(t.shape) if mask is None else np.asarray(mask, dtype=np.float64)
    count = float(m.sum())
    if count <= 0:
        raise ShapeError("cross-entropy-with-logits", logits.shape, detail="empty target mask")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=-1, keepdims=True)
    logp = z - np.log(s)
    picked = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    y = np.asarray(-(picked * m).sum() / count)
    p = e / s

    def backward(g):
        d = p.copy()
        np.put_along_axis(d, t[..., None], np.take_along_axis(d, t[..., None], axis=-1) - 1.0, axis=-1)
        return (d * (m / count)[..., None] * g,)

    return make_output(y, (logits,), backward, "cross-entropy-with-logits")


def pick(a, ids) -> Tensor:
    """Gather ``a[..., ids[...]]`` along the last dimension."""
    a = as_tensor(a)
    t = np.asarray(ids, dtype=np.int64)
    if a.shape[:-1] != t.shape:
        raise ShapeError("pick", a.shape, t.shape)
    y = np.take_along_axis(a.data, t[..., None], axis=-1)[..., 0]
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=np.float64)
        np.put_along_axis(out, t[..., None], g[..., None], axis=-1)
        return (out,)

    return make_output(y, (a,), backward, "pick")


# ---------------------------------------------------------------- similarity

def cosine_similarity(a, b) -> Tensor:
    """Cosine similarity along the last dimension; rows with zero norm give 0."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError("cosine-similarity", a.shape, b.shape)
    ad, bd = a.data, b.data
    na = np.sqrt((ad * ad).sum(axis=-1))
    nb = np.sqrt((bd * bd).sum(axis=-1))
    ok = (na > 0) & (nb > 0)
    den = np.where(ok, na * nb, 1.0)
    dot = (ad * bd).sum(axis=-1)
    cos = np.where(ok, dot / den, 0.0)

    def backward(g):
        sa = np.where(ok, 1.0 / np.where(ok, na * na, 1.0), 0.0)
        sb = np.where(ok, 1.0 / np.where(ok, nb * nb, 1.0), 0.0)
        inv = np.where(ok, 1.0 / den, 0.0)
        ga = g[..., None] * (bd * inv[..., None] - (cos * sa)[..., None] * ad)
        gb = g[..., None] * (ad * inv[..., None] - (cos * sb)[..., None] * bd)
        return ga, gb

    return make_output(cos, (a, b), backward, "cosine-similarity")


# ------------------------------------------------------------------- lookups

def embedding(table, ids) -> Tensor:
    table = as_tensor(table)
    idx = np.asarray(ids, dtype=np.int64)
    v, d = table.shape
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        raise ShapeError("embedding-lookup", table.shape, idx.shape, detail="id out of range")
    y = table.data[idx]

    def backward(g):
        flat = idx.reshape(-1)
        out = np.zeros((v, d), dtype=np.float64)
        if flat.size:
            onehot = np.zeros((flat.size, v))
            onehot[np.arange(flat.size), flat] = 1.0
            out = onehot.T @ g.reshape(-1, d)
        return (out,)

    return make_output(y, (table,), backward, "embedding-lookup")


def mean_pool_segments(x, pool: np.ndarray) -> Tensor:
    """Apply a constant pooling matrix: ``pool @ x``.

    ``pool`` has shape (..., L, T) and rows that average contiguous frame
    segments; see :func:`segment_pool_matrix`.
    """
    x = as_tensor(x)
    p = np.asarray(pool, dtype=np.float64)
    if p.shape[-1] != x.shape[-2]:
        raise ShapeError("mean-pool-segments", x.shape, p.shape)
    y = p @ x.data

    def backward(g):
        return (_unbroadcast(np.swapaxes(p, -1, -2) @ g, x.shape),)

    return make_output(y, (x,), backward, "mean-pool-segments")


def segment_sizes(total: int, parts: int) -> list[int]:
    """Split ``total`` items into ``parts`` contiguous sizes, remainder to the earliest."""
    if parts < 1:
        raise ValueError("parts must be >= 1")
    base, rem = divmod(total, parts)
    return [base + 1 if i < rem else base for i in range(parts)]


def segment_pool_matrix(total: int, parts: int, width: Optional[int] = None) -> np.ndarray:
    """(parts, width) averaging matrix over ``total`` frames (width >= total)."""
    width = total if width is None else width
    m = np.zeros((parts, width))
    start = 0
    for i, n in enumerate(segment_sizes(total, parts)):
        m[i, start:start + n] = 1.0 / n
        start += n
    return m


# --------------------------------------------------------------- convolutions

def conv1d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """1-D convolution over time.  x: (B, T, Cin), w: (K, Cin, Cout), b: (Cout,)."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError("conv1d", x.shape, w.shape)
    bsz, t, cin = x.shape
    k, _, cout = w.shape
    tp = t + 2 * padding
    if tp < k:
        raise ShapeError("conv1d", x.shape, w.shape, detail="input shorter than kernel")
    to = (tp - k) // stride + 1
    xp = np.zeros((bsz, tp, cin))
    xp[:, padding:padding + t] = x.data
    span = stride * (to - 1) + 1
    cols = [xp[:, j:j + span:stride] for j in range(k)]
    wd = w.data
    y = np.zeros((bsz, to, cout))
    for j in range(k):
        y += cols[j] @ wd[j]
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError("conv1d", w.shape, b.shape)
        y += b.data
        parents.append(b)

    def backward(g):
        gxp = np.zeros_like(xp) if x.requires_grad else None
        gw = np.empty_like(wd) if w.requires_grad else None
        g2 = g.reshape(-1, cout)
        for j in range(k):
            if gxp is not None:
                gxp[:, j:j + span:stride] += g @ wd[j].T
            if gw is not None:
                gw[j] = cols[j].reshape(-1, cin).T @ g2
        grads = [None if gxp is None else gxp[:, padding:padding + t], gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return tuple(grads)

    return make_output(y, parents, backward, "conv1d")


def conv_transpose1d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed 1-D convolution.  Output length (T-1)*stride - 2*padding + K."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError("transpose-conv1d", x.shape, w.shape)
    bsz, t, cin = x.shape
    k, _, cout = w.shape
    full = (t - 1) * stride + k
    to = full - 2 * padding
    if to < 1:
        raise ShapeError("transpose-conv1d", x.shape, w.shape, detail="empty output")
    span = stride * (t - 1) + 1
    xd, wd = x.data, w.data
    yf = np.zeros((bsz, full, cout))
    for j in range(k):
        yf[:, j:j + span:stride] += xd @ wd[j]
    y = yf[:, padding:padding + to].copy()
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError("transpose-conv1d", w.shape, b.shape)
        y += b.data
        parents.append(b)

    def backward(g):
        gf = np.zeros((bsz, full, cout))
        gf[:, padding:padding + to] = g
        gx = np.zeros_like(xd) if x.requires_grad else None
        gw = np.empty_like(wd) if w.requires_grad else None
        x2 = xd.reshape(-1, cin)
        for j in range(k):
            gs = gf[:, j:j + span:stride]
            if gx is not None:
                gx += gs @ wd[j].T
            if gw is not None:
                gw[j] = x2.T @ gs.reshape(-1, cout)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.reshape(-1, cout).sum(axis=0))
        return tuple(grads)

    return make_output(y, parents, backward, "transpose-conv1d")
