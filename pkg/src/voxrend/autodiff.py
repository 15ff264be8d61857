"""Reverse-mode automatic differentiation over numpy arrays.

The engine is a classic Wengert tape specialised for this pipeline: a
forward pass builds :class:`Var` nodes on a :class:`Tape`, `backward`
walks the nodes once in reverse creation order and accumulates adjoints
into every leaf.  Ops are whole-array (a node's value is an ``f64``
ndarray), so the Python overhead per training step is a few hundred
function calls regardless of batch size.

Design rules the rest of the package relies on:

* every op accepts a mix of ``Var`` and plain ndarray/scalar inputs and
  returns a plain ndarray when no input is a ``Var`` -- the same forward
  code therefore runs tape-free (used for finite-difference normals and
  for evaluation);
* a tape is single-shot: ``backward`` consumes it, a second call raises
  ``ContractError``;
* the L1 building block ``absolute`` uses subgradient 0 at 0;
* adjoint accumulation follows reverse creation order, which is fixed,
  so gradients are bit-for-bit reproducible.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DomainError

Array = np.ndarray


def _asarray(x) -> Array:
    return np.asarray(x, dtype=np.float64)


class Tape:
    """Records the forward graph and owns one backward sweep."""

    def __init__(self) -> None:
        self._nodes: list[Var] = []
        self._consumed = False

    def leaf(self, value, name: str) -> "Var":
        v = Var(_asarray(value), tape=self, name=name)
        return v

    def _register(self, var: "Var") -> None:
        var._index = len(self._nodes)
        self._nodes.append(var)

    def backward(self, root: "Var") -> dict[str, Array]:
        """Accumulate adjoints of ``root`` into every named leaf.

        Returns a map ``name -> gradient`` with one entry per leaf
        registered on this tape (zeros for leaves the root does not
        depend on).
        """
        if self._consumed:
            raise ContractError("tape already consumed by a previous backward()")
        if not isinstance(root, Var) or root.tape is not self:
            raise ContractError("backward() root is detached from this tape")
        if root.value.size != 1:
            raise ContractError("backward() expects a scalar root")
        self._consumed = True

        root.grad = np.ones_like(root.value)
        for node in reversed(self._nodes[: root._index + 1]):
            g = node.grad
            if g is None or node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None:
                    continue
                if parent.grad is None:
                    parent.grad = pg.copy() if pg.base is not None else pg
                else:
                    parent.grad = parent.grad + pg

        grads: dict[str, Array] = {}
        for node in self._nodes:
            if node.name is not None:
                g = node.grad
                grads[node.name] = np.zeros_like(node.value) if g is None else g
        return grads


class Var:
    """A node on the tape: an f64 array plus how to push adjoints back."""

    __slots__ = ("value", "tape", "name", "grad", "_parents", "_vjp", "_index")

    def __init__(
        self,
        value: Array,
        tape: Tape,
        name: str | None = None,
        parents: Sequence["Var"] = (),
        vjp: Callable[[Array], Sequence[Array | None]] | None = None,
    ) -> None:
        self.value = value
        self.tape = tape
        self.name = name
        self.grad: Array | None = None
        self._parents = tuple(parents)
        self._vjp = vjp
        tape._register(self)

    @property
    def shape(self):
        return self.value.shape

    # arithmetic sugar
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

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Var(shape={self.value.shape}{tag})"


def value_of(x) -> Array:
    return x.value if isinstance(x, Var) else _asarray(x)


def _tape_of(*args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif tape is not a.tape:
                raise ContractError("operands live on different tapes")
    return tape


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _lift(out: Array, tape: Tape | None, parents, vjp):
    if tape is None:
        return out
    vars_ = [p for p in parents if isinstance(p, Var)]
    if not vars_:
        return out

    def vjp_filtered(g):
        full = vjp(g)
        return [pg for p, pg in zip(parents, full) if isinstance(p, Var)]

    return Var(out, tape, parents=vars_, vjp=vjp_filtered)


# ---------------------------------------------------------------------------
# elementwise / linear algebra


def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    return _lift(out, _tape_of(a, b), (a, b),
                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    return _lift(out, _tape_of(a, b), (a, b),
                 lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    return _lift(out, _tape_of(a, b), (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    av, bv = value_of(a), value_of(b)
    out = av / bv
    return _lift(out, _tape_of(a, b), (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * av / (bv * bv), bv.shape)))


def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av @ bv
    return _lift(out, _tape_of(a, b), (a, b),
                 lambda g: (g @ bv.T, av.T @ g))


def exp(x):
    xv = value_of(x)
    out = np.exp(xv)
    return _lift(out, _tape_of(x), (x,), lambda g: (g * out,))


def log(x):
    xv = value_of(x)
    out = np.log(xv)
    return _lift(out, _tape_of(x), (x,), lambda g: (g / xv,))


def absolute(x):
    xv = value_of(x)
    out = np.abs(xv)
    sign = np.sign(xv)  # sign(0) == 0: L1 subgradient at the kink
    return _lift(out, _tape_of(x), (x,), lambda g: (g * sign,))


def clamp(x, lo=None, hi=None):
    """Clip with zero gradient wherever a bound is active."""
    xv = value_of(x)
    out = np.clip(xv, lo, hi)
    inside = np.ones_like(xv)
    if lo is not None:
        inside = inside * (xv > lo)
    if hi is not None:
        inside = inside * (xv < hi)
    return _lift(out, _tape_of(x), (x,), lambda g: (g * inside,))


def logistic(x):
    """Numerically stable sigmoid."""
    xv = value_of(x)
    out = np.empty_like(xv)
    pos = xv >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xv[pos]))
    ex = np.exp(xv[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _lift(out, _tape_of(x), (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x, beta: float = 1.0):
    """softplus_beta(x) = log(1 + exp(beta*x)) / beta, overflow-safe.

    For ``beta*|x| > 40`` the correction term is below one ulp of
    ``max(x, 0)``, so it is skipped; the derivative saturates to exactly
    0/1 there, which keeps finite-difference checks of the piecewise
    form consistent.
    """
    from . import _kernels

    xv = value_of(x)
    out = _kernels.softplus_value(xv, beta)

    def vjp(g):
        return (g * _kernels.softplus_sigma(xv, beta),)

    return _lift(out, _tape_of(x), (x,), vjp)


def softplus_grad(x: Array, beta: float = 1.0) -> Array:
    """Plain-array derivative of :func:`softplus` (sigma(beta*x))."""
    from . import _kernels

    return _kernels.softplus_sigma(np.asarray(x, dtype=np.float64), beta)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x, shape):
    xv = value_of(x)
    out = xv.reshape(shape)
    return _lift(out, _tape_of(x), (x,), lambda g: (g.reshape(xv.shape),))


def getitem(x, key):
    xv = value_of(x)
    out = xv[key]

    def vjp(g):
        full = np.zeros_like(xv)
        full[key] = g
        return (full,)

    return _lift(out, _tape_of(x), (x,), vjp)


def concat(parts, axis: int = -1):
    vals = [value_of(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _lift(out, _tape_of(*parts), tuple(parts), vjp)


def sum_(x, axis=None, keepdims: bool = False):
    xv = value_of(x)
    out = xv.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, xv.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, xv.shape).copy(),)

    return _lift(out, _tape_of(x), (x,), vjp)


def mean(x, axis=None, keepdims: bool = False):
    xv = value_of(x)
    n = xv.size if axis is None else xv.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def cumsum(x, axis: int):
    xv = value_of(x)
    out = np.cumsum(xv, axis=axis)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _lift(out, _tape_of(x), (x,), vjp)


# ---------------------------------------------------------------------------
# pipeline-specific ops


def gather_interp(data, flat_idx: Array, weights: Array, num_cells: int):
    """Weighted gather: ``out[i] = sum_k weights[i,k] * data2d[flat_idx[i,k]]``.

    ``data`` is (cells, ch) (a flattened volume), ``flat_idx``/``weights``
    are (n, k) with precomputed interpolation corners.  The VJP scatters
    back with per-channel bincount, which keeps the reduction order
    fixed.
    """
    from . import _kernels

    dv = value_of(data)
    out = _kernels.gather_weighted(dv, flat_idx, weights)

    def vjp(g):
        return (_kernels.scatter_weighted(g, flat_idx, weights, num_cells),)

    return _lift(out, _tape_of(data), (data,), vjp)


def scatter_mean(feats, cell_idx: Array, num_cells: int):
    """Per-cell mean of rows of ``feats`` (n, ch) grouped by ``cell_idx``.

    Cells receiving no row stay exactly zero.
    """
    fv = value_of(feats)
    counts = np.bincount(cell_idx, minlength=num_cells).astype(np.float64)
    out = np.zeros((num_cells, fv.shape[1]))
    for c in range(fv.shape[1]):
        out[:, c] = np.bincount(cell_idx, weights=fv[:, c], minlength=num_cells)
    nz = counts > 0
    out[nz] /= counts[nz, None]

    def vjp(g):
        scale = np.zeros(num_cells)
        scale[nz] = 1.0 / counts[nz]
        return ((g * scale[:, None])[cell_idx],)

    return _lift(out, _tape_of(feats), (feats,), vjp)


def segment_mean_edges(x, src: Array, dst: Array, num_rows: int):
    """``out[i] = mean over edges (src->dst==i) of x[src]``; empty rows are 0."""
    xv = value_of(x)
    counts = np.bincount(dst, minlength=num_rows).astype(np.float64)
    nz = counts > 0
    inv = np.zeros(num_rows)
    inv[nz] = 1.0 / counts[nz]
    out = np.zeros((num_rows, xv.shape[1]))
    for c in range(xv.shape[1]):
        out[:, c] = np.bincount(dst, weights=xv[src, c], minlength=num_rows)
    out *= inv[:, None]

    def vjp(g):
        gi = g * inv[:, None]
        back = np.zeros_like(xv)
        for c in range(xv.shape[1]):
            back[:, c] = np.bincount(src, weights=gi[dst, c], minlength=xv.shape[0])
        return (back,)

    return _lift(out, _tape_of(x), (x,), vjp)


def conv3x3(vol, kernel, bias):
    """Zero-padded 3x3x3 convolution over a (lx,ly,lz,cin) volume.

    ``kernel`` is (3,3,3,cin,cout); the output keeps the spatial dims.
    """
    vv, kv, bv = value_of(vol), value_of(kernel), value_of(bias)
    lx, ly, lz, cin = vv.shape
    cout = kv.shape[-1]
    pad = np.zeros((lx + 2, ly + 2, lz + 2, cin))
    pad[1:-1, 1:-1, 1:-1] = vv
    out = np.tile(bv, (lx, ly, lz, 1))
    flat = out.reshape(-1, cout)
    for dx in range(3):
        for dy in range(3):
            for dz in range(3):
                view = pad[dx:dx + lx, dy:dy + ly, dz:dz + lz].reshape(-1, cin)
                flat += view @ kv[dx, dy, dz]
    out = flat.reshape(lx, ly, lz, cout)

    def vjp(g):
        gflat = g.reshape(-1, cout)
        gk = np.zeros_like(kv)
        gpad = np.zeros_like(pad)
        for dx in range(3):
            for dy in range(3):
                for dz in range(3):
                    view = pad[dx:dx + lx, dy:dy + ly, dz:dz + lz].reshape(-1, cin)
                    gk[dx, dy, dz] = view.T @ gflat
                    gpad[dx:dx + lx, dy:dy + ly, dz:dz + lz] += (
                        gflat @ kv[dx, dy, dz].T).reshape(lx, ly, lz, cin)
        gb = gflat.sum(axis=0)
        return (gpad[1:-1, 1:-1, 1:-1], gk, gb)

    return _lift(out, _tape_of(vol, kernel, bias), (vol, kernel, bias), vjp)


def ray_weighted_sum(w, q, rays: int, depth: int):
    """``out[r,k] = sum_d w[r,d] * q[r*depth+d, k]`` (per-ray compositing)."""
    wv, qv = value_of(w), value_of(q)
    k = qv.shape[1]
    q3 = qv.reshape(rays, depth, k)
    out = np.einsum("rd,rdk->rk", wv, q3)

    def vjp(g):
        gw = np.einsum("rk,rdk->rd", g, q3)
        gq = (wv[:, :, None] * g[:, None, :]).reshape(rays * depth, k)
        return (gw, gq)

    return _lift(out, _tape_of(w, q), (w, q), vjp)
