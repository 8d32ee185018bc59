"""A small reverse-mode autodiff engine over numpy arrays.

Operations are recorded on the active :class:`Tape` in creation order, which
is already a topological order; :meth:`Tape.backward` replays the record in
reverse. Only the primitives the unrolled network needs are provided.
"""

from __future__ import annotations

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from numpy.lib.stride_tricks import sliding_window_view

_ACTIVE: list["Tape"] = []


class Tensor:
    __slots__ = ("value", "requires_grad", "parents", "vjp", "grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents: tuple = ()
        self.vjp = None
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __neg__ = lambda self: mul(self, -1.0)

    def __getitem__(self, idx):
        return index(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)

    def backward(self, loss: Tensor, wrt=None) -> list[np.ndarray] | None:
        """Accumulate d loss / d leaf into ``.grad`` of every leaf that requires
        it; returns the gradients of `wrt` (zeros where unused)."""
        if loss.value.size != 1:
            raise ValueError("backward needs a scalar loss")
        adj = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = adj.pop(id(node), None)
            if g is None or node.vjp is None:
                continue
            grads = node.vjp(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if parent.vjp is None:
                    parent.grad = pg if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    adj[key] = pg if key not in adj else adj[key] + pg
        if loss.vjp is None and loss.requires_grad:
            loss.grad = np.ones_like(loss.value)
        if wrt is None:
            return None
        return [p.grad if p.grad is not None else np.zeros_like(p.value) for p in wrt]


def _node(value, parents, vjp) -> Tensor:
    parents = tuple(parents)
    out = Tensor(value)
    if _ACTIVE and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.vjp = vjp
        _ACTIVE[-1].nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.value * b.value, (a, b),
                 lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    q = a.value / b.value
    return _node(q, (a, b),
                 lambda g: (_unbroadcast(g / b.value, a.shape), _unbroadcast(-g * q / b.value, b.shape)))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.value > 0
    # np.maximum keeps NaN visible so a diverged state cannot masquerade as zero
    return _node(np.maximum(x.value, 0.0), (x,), lambda g: (g * mask,))


def soft_threshold(v, t) -> Tensor:
    """sign(v) * max(|v| - t, 0) with a (scalar) threshold tensor t."""
    v, t = as_tensor(v), as_tensor(t)
    mag = np.abs(v.value) - t.value
    active = mag > 0
    s = np.sign(v.value)
    out = s * np.maximum(mag, 0.0)
    return _node(out, (v, t), lambda g: (g * active, _unbroadcast(-g * s * active, t.shape)))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _node(x.value ** 2, (x,), lambda g: (2.0 * g * x.value,))


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return _node(np.sum(x.value), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.value.size
    return _node(np.mean(x.value), (x,), lambda g: (np.full(x.shape, g / n),))


def mse_loss(pred, target) -> Tensor:
    return mean_all(square(sub(pred, target)))


# ---------------------------------------------------------------- shapes

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _node(x.value.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def index(x, idx) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        out = np.zeros_like(x.value)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.value[idx], (x,), vjp)


def concat(tensors, axis: int) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _node(np.concatenate([t.value for t in ts], axis=axis), ts,
                 lambda g: tuple(np.split(g, sizes, axis=axis)))


def pad_edge(x, pad_h: tuple[int, int], pad_w: tuple[int, int]) -> Tensor:
    """Edge-replicate padding of the last two axes."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    rows = np.clip(np.arange(-pad_h[0], h + pad_h[1]), 0, h - 1)
    cols = np.clip(np.arange(-pad_w[0], w + pad_w[1]), 0, w - 1)

    def vjp(g):
        gr = np.zeros(g.shape[:-2] + (h, g.shape[-1]))
        np.add.at(gr, (..., rows, slice(None)), g)
        out = np.zeros(x.shape)
        np.add.at(out, (..., cols), gr)
        return (out,)

    return _node(x.value[..., rows, :][..., cols], (x,), vjp)


def crop(x, h: int, w: int, top: int = 0, left: int = 0) -> Tensor:
    x = as_tensor(x)

    def vjp(g):
        out = np.zeros(x.shape)
        out[..., top:top + h, left:left + w] = g
        return (out,)

    return _node(x.value[..., top:top + h, left:left + w], (x,), vjp)


# ---------------------------------------------------------------- linear algebra

def matmul(x, m) -> Tensor:
    """x @ m for 2D operands; either may be a constant. A scipy sparse `m`
    is treated as a constant."""
    x = as_tensor(x)
    if sp.issparse(m):
        mt = m.T.tocsr()
        return _node(np.asarray((mt @ x.value.T).T), (x,), lambda g: (np.asarray((m @ g.T).T),))
    m = as_tensor(m)
    return _node(x.value @ m.value, (x, m), lambda g: (g @ m.value.T, x.value.T @ g))


def spd_solve(base: np.ndarray, terms, rhs, jitter: float = 0.0) -> Tensor:
    """Solve (base + sum_k c_k M_k + jitter I) X^T = rhs^T for a batch of
    right-hand sides (rows of `rhs`).

    `terms` is a list of (c_k, M_k) with c_k a scalar tensor and M_k a
    constant symmetric matrix (dense or sparse).
    """
    rhs = as_tensor(rhs)
    coeffs = [as_tensor(c) for c, _ in terms]
    mats = [m for _, m in terms]
    a = np.array(base, dtype=np.float64, copy=True)
    for c, m in zip(coeffs, mats):
        a += float(c.value) * (m.toarray() if sp.issparse(m) else m)
    if jitter:
        a[np.diag_indices_from(a)] += jitter
    factor = sla.cho_factor(a, lower=True, check_finite=False)
    x = sla.cho_solve(factor, np.atleast_2d(rhs.value).T, check_finite=False).T.reshape(rhs.shape)

    def vjp(g):
        w = sla.cho_solve(factor, np.atleast_2d(g).T, check_finite=False).T.reshape(g.shape)
        grads = [w]
        xx = np.atleast_2d(x)
        ww = np.atleast_2d(w)
        for m in mats:
            mx = np.asarray((m @ xx.T).T)
            grads.append(np.array(-np.sum(ww * mx)))
        return tuple(grads)

    return _node(x, (rhs, *coeffs), vjp)


# ---------------------------------------------------------------- convolutional layers

def conv2d(x, w, b=None) -> Tensor:
    """'Same' cross-correlation, stride 1, zero padding; x (B,C,H,W), w (O,C,k,k) with k odd."""
    x, w = as_tensor(x), as_tensor(w)
    k = w.shape[-1]
    p = k // 2
    xv = x.value
    if k == 1:
        out = np.einsum("bchw,oc->bohw", xv, w.value[:, :, 0, 0], optimize=True)
        cols = None
    else:
        xp = np.pad(xv, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = sliding_window_view(xp, (k, k), axis=(2, 3))  # (B,C,H,W,k,k)
        out = np.tensordot(cols, w.value, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        out = out + b.value[None, :, None, None]
        parents.append(b)

    def vjp(g):
        if k == 1:
            gx = np.einsum("bohw,oc->bchw", g, w.value[:, :, 0, 0], optimize=True)
            gw = np.einsum("bohw,bchw->oc", g, xv, optimize=True)[:, :, None, None]
        else:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            gp = np.pad(g, ((0, 0), (0, 0), (p, p), (p, p)))
            gcols = sliding_window_view(gp, (k, k), axis=(2, 3))
            gx = np.tensordot(gcols, w.value[:, :, ::-1, ::-1], axes=([1, 4, 5], [0, 2, 3])).transpose(0, 3, 1, 2)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _node(out, parents, vjp)


def batch_norm(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
               train: bool, momentum: float = 0.1, eps: float = 1e-5,
               update_running: bool = True) -> Tensor:
    """Per-channel batch normalization of (B,C,H,W). Train mode normalizes
    with batch statistics and (optionally) updates the running buffers in place."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = (0, 2, 3)
    xv = x.value
    if train:
        mu = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        if update_running:
            m = xv.size // xv.shape[1]
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu[None, :, None, None]) * inv[None, :, None, None]
    out = gamma.value[None, :, None, None] * xhat + beta.value[None, :, None, None]

    def vjp(g):
        gg = g.sum(axis=axes)
        gxh = (g * xhat).sum(axis=axes)
        dxhat = g * gamma.value[None, :, None, None]
        if train:
            m = xv.size // xv.shape[1]
            gx = (inv[None, :, None, None] / m) * (
                m * dxhat - dxhat.sum(axis=axes)[None, :, None, None]
                - xhat * (dxhat * xhat).sum(axis=axes)[None, :, None, None])
        else:
            gx = dxhat * inv[None, :, None, None]
        return gx, gxh, gg

    return _node(out, (x, gamma, beta), vjp)


def maxpool2(x) -> Tensor:
    x = as_tensor(x)
    b, c, h, w = x.shape
    blocks = x.value.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros(blocks.shape)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)
        return (gx,)

    return _node(out, (x,), vjp)


def upsample2(x) -> Tensor:
    x = as_tensor(x)
    b, c, h, w = x.shape
    out = np.repeat(np.repeat(x.value, 2, axis=2), 2, axis=3)
    return _node(out, (x,), lambda g: (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),))
