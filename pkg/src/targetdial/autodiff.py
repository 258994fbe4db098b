"""Dense-array math with reverse-mode differentiation on an explicit tape.

Everything is float64 numpy. A :class:`Tensor` either lives on a
:class:`Tape` (training: every op is recorded and differentiable) or is
tape-free (inference: same arithmetic, nothing recorded). Ops are plain
functions; the recorded tape is a flat list in execution order, so the
backward pass is a single reverse sweep that visits each node once.

Every op checks its output for NaN/Inf and raises
:class:`~targetdial.errors.NumericError` naming the op, which turns silent
divergence into a hard failure at the op that produced it.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_F = np.float64


class Tensor:
    """A value plus its position on a tape (node < 0 means constant)."""

    __slots__ = ("value", "tape", "node")

    def __init__(self, value, tape=None, node=-1):
        self.value = value
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.value.shape}, taped={self.tape is not None})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Flat record of ops in execution order plus per-node gradient buffers.

    Leaves are memoized by array identity, so a parameter used twice in one
    step accumulates both gradient contributions on a single node.
    """

    def __init__(self):
        self._parents = []  # tuple of parent node ids per node (-1 = constant)
        self._vjps = []  # callable grad -> tuple of parent grads, or None for leaves
        self._grads = None
        self._leaf_nodes = {}  # id(array) -> node
        self._leaf_arrays = []  # keeps lifted arrays alive so ids stay unique

    @property
    def n_nodes(self):
        return len(self._parents)

    def leaf(self, array):
        """Lift a parameter array onto the tape (memoized per array object)."""
        key = id(array)
        node = self._leaf_nodes.get(key)
        if node is None:
            node = self._record((), None)
            self._leaf_nodes[key] = node
            self._leaf_arrays.append(array)
        return Tensor(array, self, node)

    def _record(self, parents, vjp):
        self._parents.append(parents)
        self._vjps.append(vjp)
        return len(self._parents) - 1

    def backward(self, loss):
        """Fill gradient buffers for every node reachable from ``loss``.

        ``loss`` must be a scalar tensor on this tape.
        """
        if loss.tape is not self:
            raise ContractError("loss tensor does not belong to this tape")
        if loss.value.ndim != 0:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.value.shape}"
            )
        grads = [None] * len(self._parents)
        grads[loss.node] = np.ones((), dtype=_F)
        for node in range(loss.node, -1, -1):
            g = grads[node]
            if g is None:
                continue
            vjp = self._vjps[node]
            if vjp is None:
                continue
            for parent, pgrad in zip(self._parents[node], vjp(g)):
                if parent < 0 or pgrad is None:
                    continue
                if grads[parent] is None:
                    grads[parent] = pgrad
                else:
                    grads[parent] = grads[parent] + pgrad
        self._grads = grads

    def grad(self, ref):
        """Gradient for a leaf array or tensor; zeros if unreached by backward."""
        if self._grads is None:
            raise ContractError("backward has not been run on this tape")
        if isinstance(ref, Tensor):
            node, value = ref.node, ref.value
        else:
            node, value = self._leaf_nodes.get(id(ref), -1), ref
        if node < 0:
            raise ContractError("tensor is not on this tape")
        g = self._grads[node]
        return np.zeros_like(value) if g is None else g


def as_tensor(value, tape=None):
    """Wrap a raw array/scalar as a constant (or a leaf when ``tape`` given)."""
    array = np.asarray(value, dtype=_F)
    if tape is not None:
        return tape.leaf(array)
    return Tensor(array)


def _check_finite(op, value):
    # sum of a float array is non-finite iff some element is (inf+inf=inf,
    # inf-inf=nan), which makes this much cheaper than isfinite().all()
    if not math.isfinite(float(value.sum())):
        raise NumericError(f"non-finite output in op '{op}'")
    return value


def _result(op, value, inputs, vjp_builder):
    """Build the output tensor, recording on a tape if any input is taped."""
    _check_finite(op, value)
    tape = None
    for t in inputs:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ContractError(f"op '{op}' mixes tensors from two tapes")
            tape = t.tape
    if tape is None:
        return Tensor(value)
    node = tape._record(tuple(t.node for t in inputs), vjp_builder())
    return Tensor(value, tape, node)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (reverses numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a, b):
    av, bv = a.value, b.value

    def make_vjp():
        return lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape))

    return _result("add", av + bv, (a, b), make_vjp)


def sub(a, b):
    av, bv = a.value, b.value

    def make_vjp():
        return lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape))

    return _result("sub", av - bv, (a, b), make_vjp)


def mul(a, b):
    av, bv = a.value, b.value

    def make_vjp():
        return lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape))

    return _result("mul", av * bv, (a, b), make_vjp)


def matmul(a, b):
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0 or av.shape[-1] != bv.shape[0]:
        raise DimensionError(f"matmul shapes {av.shape} @ {bv.shape} do not align")

    def make_vjp():
        def vjp(g):
            if av.ndim == 1 and bv.ndim == 1:  # dot -> scalar
                return g * bv, g * av
            if av.ndim == 1:  # (n,) @ (n,m) -> (m,)
                return bv @ g, np.outer(av, g)
            if bv.ndim == 1:  # (k,n) @ (n,) -> (k,)
                return np.outer(g, bv), av.T @ g
            return g @ bv.T, av.T @ g

        return vjp

    return _result("matmul", av @ bv, (a, b), make_vjp)


def affine(x, w, b):
    """x @ w + b; the workhorse behind every dense layer here."""
    return add(matmul(x, w), b)


def concat(parts):
    """Concatenate 1-D tensors."""
    for p in parts:
        if p.value.ndim != 1:
            raise DimensionError("concat expects 1-D tensors")
    sizes = [p.value.shape[0] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def make_vjp():
        return lambda g: tuple(np.split(g, offsets))

    return _result("concat", np.concatenate([p.value for p in parts]), tuple(parts), make_vjp)


def concat_cols(parts):
    """Concatenate 2-D tensors along axis 1 (equal row counts required)."""
    rows = {p.value.shape[0] for p in parts}
    if len(rows) != 1 or any(p.value.ndim != 2 for p in parts):
        raise DimensionError("concat_cols expects 2-D tensors with equal row counts")
    sizes = [p.value.shape[1] for p in parts]
    offsets = np.cumsum(sizes)[:-1]

    def make_vjp():
        return lambda g: tuple(np.split(g, offsets, axis=1))

    value = np.concatenate([p.value for p in parts], axis=1)
    return _result("concat_cols", value, tuple(parts), make_vjp)


def repeat_rows(x, n):
    """Tile a 1-D tensor into n identical rows; gradient sums back over rows."""
    if x.value.ndim != 1:
        raise DimensionError("repeat_rows expects a 1-D tensor")

    def make_vjp():
        return lambda g: (g.sum(axis=0),)

    value = np.repeat(x.value[None, :], n, axis=0)
    return _result("repeat_rows", value, (x,), make_vjp)


def reshape(x, shape):
    old_shape = x.value.shape
    if int(np.prod(shape)) != x.value.size:
        raise DimensionError(f"cannot reshape {old_shape} to {shape}")

    def make_vjp():
        return lambda g: (g.reshape(old_shape),)

    return _result("reshape", x.value.reshape(shape), (x,), make_vjp)


def flatten(x):
    return reshape(x, (x.value.size,))


def sigmoid(x):
    out = 1.0 / (1.0 + np.exp(-x.value))

    def make_vjp():
        return lambda g: (g * out * (1.0 - out),)

    return _result("sigmoid", out, (x,), make_vjp)


def tanh(x):
    out = np.tanh(x.value)

    def make_vjp():
        return lambda g: (g * (1.0 - out * out),)

    return _result("tanh", out, (x,), make_vjp)


def relu(x):
    xv = x.value
    out = np.maximum(xv, 0.0)

    def make_vjp():
        return lambda g: (g * (xv > 0.0),)

    return _result("relu", out, (x,), make_vjp)


def log(x):
    xv = x.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(xv)

    def make_vjp():
        return lambda g: (g / xv,)

    return _result("log", out, (x,), make_vjp)


def clip(x, lo, hi):
    """Clamp values; gradient passes through only where nothing was clipped."""
    xv = x.value
    out = np.clip(xv, lo, hi)

    def make_vjp():
        inside = (xv > lo) & (xv < hi)
        return lambda g: (g * inside,)

    return _result("clip", out, (x,), make_vjp)


def softmax_masked(x, mask):
    """Softmax over the True positions of ``mask``; masked-out outputs are 0.

    ``mask`` is a constant boolean array, not a tensor.
    """
    xv = x.value
    mask = np.asarray(mask, dtype=bool)
    if xv.shape != mask.shape or xv.ndim != 1:
        raise DimensionError("softmax_masked expects matching 1-D score/mask shapes")
    if not mask.any():
        raise ContractError("softmax_masked over an empty mask")
    scores = xv[mask]
    e = np.exp(scores - scores.max())
    probs = e / e.sum()
    out = np.zeros_like(xv)
    out[mask] = probs

    def make_vjp():
        def vjp(g):
            gm = g[mask]
            dx = np.zeros_like(xv)
            dx[mask] = probs * (gm - np.dot(gm, probs))
            return (dx,)

        return vjp

    return _result("softmax_masked", out, (x,), make_vjp)


def gather(table, indices):
    """Select rows of a 2-D tensor; the gradient scatter-adds back."""
    tv = table.value
    if tv.ndim != 2:
        raise DimensionError("gather expects a 2-D table")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= tv.shape[0]):
        raise DimensionError(f"gather index out of range for table with {tv.shape[0]} rows")

    def make_vjp():
        def vjp(g):
            dt = np.zeros_like(tv)
            np.add.at(dt, idx, g)
            return (dt,)

        return vjp

    return _result("gather", tv[idx], (table,), make_vjp)


def sum_all(x):
    shape = x.value.shape

    def make_vjp():
        return lambda g: (np.broadcast_to(g, shape).copy() if shape else g,)

    return _result("sum", np.asarray(x.value.sum()), (x,), make_vjp)


def mean_all(x):
    shape = x.value.shape
    size = x.value.size

    def make_vjp():
        return lambda g: (np.full(shape, g / size) if shape else g,)

    return _result("mean", np.asarray(x.value.mean()), (x,), make_vjp)


def mean0(x):
    """Mean over axis 0 of a 2-D tensor: (n, m) -> (m,)."""
    if x.value.ndim != 2:
        raise DimensionError("mean0 expects a 2-D tensor")
    n = x.value.shape[0]

    def make_vjp():
        return lambda g: (np.repeat(g[None, :] / n, n, axis=0),)

    return _result("mean0", x.value.mean(axis=0), (x,), make_vjp)


_GRU_PARAM_ORDER = ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")


def gru_cell(x, h, params):
    """One step of a standard gated recurrent unit.

    ``params`` maps the names w_z/u_z/b_z, w_r/u_r/b_r, w_h/u_h/b_h to
    tensors: update gate z, reset gate r, candidate from the reset-scaled
    state, then the convex blend of old state and candidate.

    Recorded as one fused tape node with an analytic backward; the cell
    sits on the hot path of every sequence, and the fused form cuts the
    tape to a third for identical numbers (checked against central
    differences in the test suite).
    """
    xv, hv = x.value, h.value
    p = {name: params[name].value for name in _GRU_PARAM_ORDER}
    if xv.shape[-1] != p["w_z"].shape[0] or hv.shape[-1] != p["u_z"].shape[0]:
        raise DimensionError("gru_cell input/state dims do not match parameters")
    z = 1.0 / (1.0 + np.exp(-(xv @ p["w_z"] + hv @ p["u_z"] + p["b_z"])))
    r = 1.0 / (1.0 + np.exp(-(xv @ p["w_r"] + hv @ p["u_r"] + p["b_r"])))
    rh = r * hv
    cand = np.tanh(xv @ p["w_h"] + rh @ p["u_h"] + p["b_h"])
    out = (1.0 - z) * hv + z * cand

    def make_vjp():
        def vjp(g):
            dz = g * (cand - hv) * z * (1.0 - z)
            dcand = g * z * (1.0 - cand * cand)
            dh = g * (1.0 - z)
            drh = dcand @ p["u_h"].T
            dr = drh * hv * r * (1.0 - r)
            dh = dh + drh * r
            dx = dcand @ p["w_h"].T + dr @ p["w_r"].T + dz @ p["w_z"].T
            dh = dh + dr @ p["u_r"].T + dz @ p["u_z"].T
            return (
                dx,
                dh,
                np.outer(xv, dz),
                np.outer(hv, dz),
                dz,
                np.outer(xv, dr),
                np.outer(hv, dr),
                dr,
                np.outer(xv, dcand),
                np.outer(rh, dcand),
                dcand,
            )

        return vjp

    inputs = (x, h) + tuple(params[name] for name in _GRU_PARAM_ORDER)
    return _result("gru_cell", out, inputs, make_vjp)
