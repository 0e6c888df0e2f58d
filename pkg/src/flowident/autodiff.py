"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything trainable in this package is built on the small tape machine in
this module: a ``Tensor`` wraps a float64 ndarray plus an optional handle
into the active ``Tape``; primitives record themselves onto the tape in
append order, so the node list is topologically sorted by construction and
``Tape.backward`` is a single reverse sweep.

Design rules:

- float64 only; identifiability metrics downstream are sensitive to drift.
- gradients accumulate additively at fan-out nodes; forward activations are
  saved on the tape (no recomputation).
- broadcasting is numpy trailing-dimension broadcasting; anything fancier
  must be an explicit ``reshape``/``broadcast``.
- a primitive applied to finite inputs either returns finite values or
  raises; NaN/inf never propagate silently.

Tapes are single-threaded. Tensors without a node handle are plain values
and safe to share; tapes are never shared.
"""

from __future__ import annotations

import numpy as np


class ShapeMismatch(ValueError):
    """Incompatible operand shapes for a primitive."""

    def __init__(self, tag, shape_a, shape_b=None):
        self.tag = tag
        self.shapes = (tuple(shape_a), tuple(shape_b) if shape_b is not None else None)
        if shape_b is None:
            msg = f"{tag}: bad shape {tuple(shape_a)}"
        else:
            msg = f"{tag}: incompatible shapes {tuple(shape_a)} and {tuple(shape_b)}"
        super().__init__(msg)


class DomainError(ValueError):
    """Primitive evaluated outside its mathematical domain."""


class UsageError(TypeError):
    """API misuse (non-scalar backward seed, bad step size, ...)."""


def _as_array(x):
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """A float64 array, possibly tied to a node of the active tape.

    ``node_id`` is None for plain values (constants, data); such tensors are
    lifted onto the tape on first use inside a recorded expression.  A tensor
    recorded on one tape must not be reused under a different tape.
    """

    __slots__ = ("data", "node_id", "tape")

    def __init__(self, data, node_id=None, tape=None):
        if type(data) is np.ndarray and data.dtype == np.float64:
            self.data = data
        else:
            self.data = _as_array(data)
        self.node_id = node_id
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, node={self.node_id})"

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return tslice(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


class _Node:
    __slots__ = ("tag", "input_ids", "meta", "value", "aux")

    def __init__(self, tag, input_ids, meta, value, aux=None):
        self.tag = tag
        self.input_ids = input_ids
        self.meta = meta
        self.value = value
        self.aux = aux


_active_tape = None


class Tape:
    """Append-only computation record.

    Inputs of node k always have id < k, so the node list is acyclic and
    already topologically ordered.  Usable as a context manager::

        with Tape() as tape:
            x = tape.leaf(arr)
            loss = (x * x).sum()
        grads = tape.backward(loss)
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _active_tape
        if _active_tape is not None:
            raise UsageError("a tape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _active_tape
        _active_tape = None
        return False

    def _append(self, tag, input_ids, meta, value, aux=None):
        self.nodes.append(_Node(tag, input_ids, meta, value, aux))
        return len(self.nodes) - 1

    def leaf(self, data):
        """Register a value as a leaf node and return its Tensor."""
        arr = _as_array(data).copy()
        nid = self._append("leaf", (), None, arr)
        return Tensor(arr, nid, self)

    def lift(self, x):
        """Coerce x to a Tensor tracked on this tape."""
        if isinstance(x, Tensor):
            if x.node_id is not None:
                if x.tape is not self:
                    raise UsageError("tensor belongs to a different tape")
                return x
            return self.leaf(x.data)
        return self.leaf(x)

    def backward(self, output):
        """Reverse sweep from a scalar output node.

        Returns a dict mapping node id -> gradient ndarray for every node
        the output depends on; nodes not present received zero gradient.
        """
        if not isinstance(output, Tensor) or output.node_id is None or output.tape is not self:
            raise UsageError("backward requires a Tensor recorded on this tape")
        if output.size != 1:
            raise UsageError(
                f"backward requires a scalar output, got shape {output.shape}"
            )
        out_id = output.node_id
        grads = {out_id: np.ones_like(self.nodes[out_id].value)}
        for nid in range(out_id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if node.tag == "leaf":
                continue
            vjp, with_aux = _REGISTRY[node.tag][1], _REGISTRY[node.tag][2]
            in_values = [self.nodes[i].value for i in node.input_ids]
            if with_aux:
                in_grads = vjp(g, in_values, node.value, node.meta, node.aux)
            else:
                in_grads = vjp(g, in_values, node.value, node.meta)
            for iid, ig in zip(node.input_ids, in_grads):
                if ig is None:
                    continue
                prev = grads.get(iid)
                grads[iid] = ig if prev is None else prev + ig
        return grads

    def grad(self, grads, tensor):
        """Gradient of the swept output w.r.t. ``tensor`` (zeros if unused)."""
        g = grads.get(tensor.node_id)
        if g is None:
            return np.zeros_like(tensor.data)
        return g

    def replay(self):
        """Re-execute every node in order; returns the list of new values.

        Leaves keep their stored value.  Replaying the same tape twice is
        bit-identical because every forward function is deterministic.
        """
        values = []
        for node in self.nodes:
            if node.tag == "leaf":
                values.append(node.value)
            else:
                fwd, _, with_aux = _REGISTRY[node.tag]
                out = fwd([values[i] for i in node.input_ids], node.meta)
                values.append(out[0] if with_aux else out)
        return values


# -- primitive registry ------------------------------------------------------

_REGISTRY = {}


def register_primitive(tag, forward, vjp, with_aux=False):
    """Add a primitive to the registry (used by e.g. the flow inverse).

    A with_aux primitive's forward returns (value, aux); aux is stored on
    the node and handed back to the vjp as a fifth argument.
    """
    if tag in _REGISTRY:
        raise UsageError(f"primitive {tag!r} already registered")
    _REGISTRY[tag] = (forward, vjp, with_aux)


def registered_primitives():
    return sorted(_REGISTRY)


def _check_finite(tag, out):
    # cheap screen first: a finite array can only sum to non-finite by
    # overflow, so the exact elementwise check runs on the rare failing path
    if not np.isfinite(out.sum()):
        if not np.all(np.isfinite(out)):
            raise DomainError(f"{tag}: non-finite output")
    return out


def apply_primitive(tag, inputs, meta=None):
    """Evaluate a registered primitive on Tensors.

    With an active tape the result is recorded; otherwise the value is
    computed directly and returned as an untracked Tensor.
    """
    if tag not in _REGISTRY:
        raise UsageError(f"unknown primitive {tag!r}")
    fwd, _, with_aux = _REGISTRY[tag]
    tape = _active_tape
    if tape is None:
        values = [t.data if isinstance(t, Tensor) else _as_array(t) for t in inputs]
        out = fwd(values, meta)
        aux = None
        if with_aux:
            out, aux = out
        _check_finite(tag, out)
        return Tensor(out)
    lifted = [tape.lift(t) for t in inputs]
    values = [t.data for t in lifted]
    out = fwd(values, meta)
    aux = None
    if with_aux:
        out, aux = out
    _check_finite(tag, out)
    nid = tape._append(tag, tuple(t.node_id for t in lifted), meta, out, aux)
    return Tensor(out, nid, tape)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binop_shapes_ok(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
        return True
    except ValueError:
        return False


def _ew_forward(tag, fn):
    def forward(values, meta):
        a, b = values
        if not _binop_shapes_ok(a, b):
            raise ShapeMismatch(tag, a.shape, b.shape)
        return fn(a, b)

    return forward


# add / sub / mul / div ------------------------------------------------------

register_primitive(
    "add",
    _ew_forward("add", np.add),
    lambda g, v, o, m: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)),
)

register_primitive(
    "sub",
    _ew_forward("sub", np.subtract),
    lambda g, v, o, m: (_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)),
)

register_primitive(
    "mul",
    _ew_forward("mul", np.multiply),
    lambda g, v, o, m: (
        _unbroadcast(g * v[1], v[0].shape),
        _unbroadcast(g * v[0], v[1].shape),
    ),
)


def _div_forward(values, meta):
    a, b = values
    if not _binop_shapes_ok(a, b):
        raise ShapeMismatch("div", a.shape, b.shape)
    if np.any(b == 0.0):
        raise DomainError("div: zero divisor")
    return a / b


register_primitive(
    "div",
    _div_forward,
    lambda g, v, o, m: (
        _unbroadcast(g / v[1], v[0].shape),
        _unbroadcast(-g * v[0] / (v[1] * v[1]), v[1].shape),
    ),
)

register_primitive(
    "neg",
    lambda v, m: -v[0],
    lambda g, v, o, m: (-g,),
)

# matmul / matinv / transpose --------------------------------------------------


def _matmul_forward(values, meta):
    a, b = values
    if a.ndim < 2 or b.ndim < 2:
        raise UsageError("matmul operands must have ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    return np.matmul(a, b)


def _matmul_vjp(g, v, o, m):
    a, b = v
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


register_primitive("matmul", _matmul_forward, _matmul_vjp)


def _matinv_forward(values, meta):
    a = values[0]
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeMismatch("matinv", a.shape)
    try:
        return np.linalg.inv(a)
    except np.linalg.LinAlgError as exc:
        raise DomainError(f"matinv: singular matrix ({exc})") from exc


register_primitive(
    "matinv",
    _matinv_forward,
    lambda g, v, o, m: (-o.T @ g @ o.T,),
)


def _linear_forward(values, meta):
    x, w, b = values
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch("linear", x.shape, w.shape)
    return x @ w.T + b


def _linear_vjp(g, v, o, m):
    x, w, _ = v
    return g @ w, g.T @ x, g.sum(axis=0)


register_primitive("linear", _linear_forward, _linear_vjp)


def _linear2_forward(values, meta):
    x1, w1, x2, w2, b = values
    if x1.shape[1] != w1.shape[1]:
        raise ShapeMismatch("linear2", x1.shape, w1.shape)
    if x2.shape[1] != w2.shape[1]:
        raise ShapeMismatch("linear2", x2.shape, w2.shape)
    return x1 @ w1.T + x2 @ w2.T + b


def _linear2_vjp(g, v, o, m):
    x1, w1, x2, w2, _ = v
    return g @ w1, g.T @ x1, g @ w2, g.T @ x2, g.sum(axis=0)


register_primitive("linear2", _linear2_forward, _linear2_vjp)


def _transpose_forward(values, meta):
    return np.transpose(values[0], axes=meta)


def _transpose_vjp(g, v, o, meta):
    if meta is None:
        return (np.transpose(g),)
    inv = np.argsort(meta)
    return (np.transpose(g, axes=inv),)


register_primitive("transpose", _transpose_forward, _transpose_vjp)

# pointwise nonlinearities -----------------------------------------------------


def _sigmoid(x):
    # stable two-branch logistic
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    return np.logaddexp(0.0, x)


register_primitive(
    "sigmoid",
    lambda v, m: _sigmoid(v[0]),
    lambda g, v, o, m: (g * o * (1.0 - o),),
)

register_primitive(
    "tanh",
    lambda v, m: np.tanh(v[0]),
    lambda g, v, o, m: (g * (1.0 - o * o),),
)

register_primitive(
    "softplus",
    lambda v, m: _softplus(v[0]),
    lambda g, v, o, m: (g * _sigmoid(v[0]),),
)

register_primitive(
    "exp",
    lambda v, m: _check_exp(v[0]),
    lambda g, v, o, m: (g * o,),
)


def _check_exp(x):
    if np.any(x > 709.0):
        raise DomainError("exp: argument overflows float64")
    return np.exp(x)


def _log_forward(values, meta):
    x = values[0]
    if np.any(x <= 0.0):
        raise DomainError("log: non-positive input")
    return np.log(x)


register_primitive(
    "log",
    _log_forward,
    lambda g, v, o, m: (g / v[0],),
)


def _leaky_forward(values, meta):
    x = values[0]
    slope = meta
    return np.where(x >= 0.0, x, slope * x)


register_primitive(
    "leaky_relu",
    _leaky_forward,
    lambda g, v, o, meta: (g * np.where(v[0] >= 0.0, 1.0, meta),),
)

# reductions -------------------------------------------------------------------


def _red_meta(meta):
    if meta is None:
        return None, False
    return meta


def _expand_for(g, x_shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, x_shape)
    if keepdims:
        return np.broadcast_to(g, x_shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(a % len(x_shape) for a in axes)
    g = np.expand_dims(g, axes)
    return np.broadcast_to(g, x_shape)


def _sum_vjp(g, v, o, meta):
    axis, keepdims = _red_meta(meta)
    return (_expand_for(g, v[0].shape, axis, keepdims).copy(),)


register_primitive(
    "sum",
    lambda v, m: np.sum(v[0], axis=_red_meta(m)[0], keepdims=_red_meta(m)[1]),
    _sum_vjp,
)


def _mean_count(shape, axis):
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    axes = axis if isinstance(axis, tuple) else (axis,)
    n = 1
    for a in axes:
        n *= shape[a % len(shape)]
    return n


def _mean_vjp(g, v, o, meta):
    axis, keepdims = _red_meta(meta)
    n = _mean_count(v[0].shape, axis)
    return (_expand_for(g, v[0].shape, axis, keepdims) / n,)


register_primitive(
    "mean",
    lambda v, m: np.mean(v[0], axis=_red_meta(m)[0], keepdims=_red_meta(m)[1]),
    _mean_vjp,
)


def _logsumexp_forward(values, meta):
    x = values[0]
    axis, keepdims = _red_meta(meta)
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out


def _logsumexp_vjp(g, v, o, meta):
    x = v[0]
    axis, keepdims = _red_meta(meta)
    if keepdims or axis is None:
        ob = o if axis is not None or keepdims else np.reshape(o, (1,) * x.ndim)
        gb = g if axis is not None or keepdims else np.reshape(g, (1,) * x.ndim)
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % x.ndim for a in axes)
        ob = np.expand_dims(o, axes)
        gb = np.expand_dims(g, axes)
    return (np.exp(x - ob) * gb,)


register_primitive("logsumexp", _logsumexp_forward, _logsumexp_vjp)


def _softmax_forward(values, meta):
    x = values[0]
    axis = -1 if meta is None else meta
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=axis, keepdims=True)


def _softmax_vjp(g, v, o, meta):
    axis = -1 if meta is None else meta
    inner = np.sum(g * o, axis=axis, keepdims=True)
    return (o * (g - inner),)


register_primitive("softmax", _softmax_forward, _softmax_vjp)

# shape ops --------------------------------------------------------------------


def _concat_forward(values, meta):
    axis = meta
    base = list(values[0].shape)
    for x in values[1:]:
        s = list(x.shape)
        if len(s) != len(base):
            raise ShapeMismatch("concat", values[0].shape, x.shape)
        s[axis] = base[axis]
        if s != base:
            raise ShapeMismatch("concat", values[0].shape, x.shape)
    return np.concatenate(values, axis=axis)


def _concat_vjp(g, v, o, meta):
    axis = meta
    sizes = [x.shape[axis] for x in v]
    splits = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, splits, axis=axis))


register_primitive("concat", _concat_forward, _concat_vjp)


def _slice_vjp(g, v, o, meta):
    out = np.zeros_like(v[0])
    out[meta] = g
    return (out,)


register_primitive(
    "slice",
    lambda v, m: v[0][m].copy(),
    _slice_vjp,
)


def _broadcast_forward(values, meta):
    x = values[0]
    try:
        return np.broadcast_to(x, meta).copy()
    except ValueError:
        raise ShapeMismatch("broadcast", x.shape, meta)


register_primitive(
    "broadcast",
    _broadcast_forward,
    lambda g, v, o, meta: (_unbroadcast(g, v[0].shape),),
)


def _reshape_forward(values, meta):
    x = values[0]
    if int(np.prod(meta)) != x.size:
        raise ShapeMismatch("reshape", x.shape, meta)
    return x.reshape(meta).copy()


register_primitive(
    "reshape",
    _reshape_forward,
    lambda g, v, o, meta: (g.reshape(v[0].shape),),
)

# -- functional API ------------------------------------------------------------


def add(a, b):
    return apply_primitive("add", (a, b))


def sub(a, b):
    return apply_primitive("sub", (a, b))


def mul(a, b):
    return apply_primitive("mul", (a, b))


def div(a, b):
    return apply_primitive("div", (a, b))


def neg(a):
    return apply_primitive("neg", (a,))


def matmul(a, b):
    return apply_primitive("matmul", (a, b))


def linear(x, w, b):
    """Fused affine map x @ w.T + b for 2-D x."""
    return apply_primitive("linear", (x, w, b))


def linear2(x1, w1, x2, w2, b):
    """Fused two-input affine map x1 @ w1.T + x2 @ w2.T + b."""
    return apply_primitive("linear2", (x1, w1, x2, w2, b))


def matinv(a):
    return apply_primitive("matinv", (a,))


def transpose(a, axes=None):
    return apply_primitive("transpose", (a,), axes)


def sigmoid(a):
    return apply_primitive("sigmoid", (a,))


def tanh(a):
    return apply_primitive("tanh", (a,))


def softplus(a):
    return apply_primitive("softplus", (a,))


def exp(a):
    return apply_primitive("exp", (a,))


def log(a):
    return apply_primitive("log", (a,))


def leaky_relu(a, slope):
    return apply_primitive("leaky_relu", (a,), float(slope))


def tsum(a, axis=None, keepdims=False):
    return apply_primitive("sum", (a,), (axis, keepdims))


def tmean(a, axis=None, keepdims=False):
    return apply_primitive("mean", (a,), (axis, keepdims))


def logsumexp(a, axis=None, keepdims=False):
    return apply_primitive("logsumexp", (a,), (axis, keepdims))


def softmax(a, axis=-1):
    return apply_primitive("softmax", (a,), axis)


def concat(parts, axis=0):
    return apply_primitive("concat", tuple(parts), axis)


def tslice(a, key):
    if not isinstance(key, tuple):
        key = (key,)
    return apply_primitive("slice", (a,), key)


def broadcast_to(a, shape):
    return apply_primitive("broadcast", (a,), tuple(shape))


def reshape(a, shape):
    return apply_primitive("reshape", (a,), tuple(shape))


def constant(x):
    """Untracked Tensor wrapper around x."""
    return Tensor(x)


# -- finite-difference oracle ----------------------------------------------------


def grad_check(f, point, step=1e-5):
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps a Tensor to a scalar Tensor.  The central difference is taken
    coordinate-by-coordinate at the given step, and the returned value is

        max_i |ad_i - cd_i| / (|cd_i| + 1e-8).

    Raises DomainError if f is non-finite near the point, UsageError for a
    step outside (0, 1e-2] or a non-scalar f.
    """
    if not (0.0 < step <= 1e-2):
        raise UsageError(f"step must lie in (0, 1e-2], got {step}")
    x0 = _as_array(point)

    with Tape() as tape:
        xt = tape.leaf(x0)
        out = f(xt)
        if not isinstance(out, Tensor) or out.size != 1:
            raise UsageError("grad_check requires a scalar-valued function")
    if not np.isfinite(out.data):
        raise DomainError("grad_check: function value is non-finite")
    autograd = tape.grad(tape.backward(out), xt)

    flat = x0.reshape(-1)
    cd = np.zeros_like(flat)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = step
        up = f(Tensor((flat + bump).reshape(x0.shape))).data
        dn = f(Tensor((flat - bump).reshape(x0.shape))).data
        if not (np.isfinite(up) and np.isfinite(dn)):
            raise DomainError("grad_check: function value is non-finite")
        cd[i] = (float(up) - float(dn)) / (2.0 * step)
    ad = autograd.reshape(-1)
    return float(np.max(np.abs(ad - cd) / (np.abs(cd) + 1e-8)))
