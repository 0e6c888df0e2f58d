"""Noise-history conditioned transition model for style dynamics.

A recurrent cell summarizes past style noise into a hidden state; a
component-wise monotone flow (stacked simplex-weighted sigmoid layers) maps
fresh noise to the next style vector conditioned on that state; a separate
invertible feed-forward mapper turns static noise into content.  Keeping the
flow component-wise makes the generated style coordinates conditionally
independent given history by construction, which is the architectural
constraint the identifiability analysis needs.

The scalar flow map per component is

    y = logit( sum_k w_k * sigmoid(a_k x + b_k) ),   a_k > 0, w on the simplex,

evaluated in log-space for stability; its log-derivative is analytic.  The
inverse is solved by bracketed bisection and registered as an autodiff
primitive whose gradients come from the implicit function theorem, so exact
likelihoods can be trained through it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from flowident import autodiff as ad
from flowident import networks as nets
from flowident.autodiff import Tensor

# clamp threshold in the logit domain: logit(1 - 1e-12)
SATURATION_CLIP = float(np.log(1.0 - 1e-12) - np.log(1e-12))

IDENTITY_A_HAT = float(np.log(np.expm1(1.0)))  # softplus(IDENTITY_A_HAT) == 1


class SaturationError(RuntimeError):
    """Monotone map could not bracket the requested output value."""


class SaturationCounter:
    """Counts clamped evaluations; surfaced in training logs."""

    def __init__(self):
        self.count = 0

    def add(self, k):
        self.count += int(k)


# ---------------------------------------------------------------------------
# recurrent cells
# ---------------------------------------------------------------------------


@dataclass
class GRUCellParams:
    """Gated recurrence: h' = (1-u) * h + u * tanh-candidate."""

    w_u: np.ndarray
    v_u: np.ndarray
    b_u: np.ndarray
    w_r: np.ndarray
    v_r: np.ndarray
    b_r: np.ndarray
    w_c: np.ndarray
    v_c: np.ndarray
    b_c: np.ndarray

    @property
    def hidden_dim(self):
        return self.b_u.shape[0]

    def named_arrays(self, prefix="gru"):
        for name in ("w_u", "v_u", "b_u", "w_r", "v_r", "b_r", "w_c", "v_c", "b_c"):
            yield f"{prefix}.{name}", getattr(self, name)


@dataclass
class RNNCellParams:
    """Plain tanh recurrence, the no-gating ablation cell."""

    w: np.ndarray
    v: np.ndarray
    b: np.ndarray

    @property
    def hidden_dim(self):
        return self.b.shape[0]

    def named_arrays(self, prefix="rnn"):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.v", self.v
        yield f"{prefix}.b", self.b


def init_gru(rng, n_in, hidden):
    def mat(o, i):
        return rng.normal(size=(o, i)) / np.sqrt(i)

    return GRUCellParams(
        w_u=mat(hidden, n_in),
        v_u=mat(hidden, hidden),
        b_u=np.zeros(hidden),
        w_r=mat(hidden, n_in),
        v_r=mat(hidden, hidden),
        b_r=np.zeros(hidden),
        w_c=mat(hidden, n_in),
        v_c=mat(hidden, hidden),
        b_c=np.zeros(hidden),
    )


def init_rnn(rng, n_in, hidden):
    return RNNCellParams(
        w=rng.normal(size=(hidden, n_in)) / np.sqrt(n_in),
        v=rng.normal(size=(hidden, hidden)) / np.sqrt(hidden),
        b=np.zeros(hidden),
    )


def cell_step_core(cell, t, h, e):
    """One recurrence step on Tensors; h (B, H), e (B, n_in)."""
    if isinstance(cell, GRUCellParams):
        u = ad.sigmoid(ad.linear2(e, t["w_u"], h, t["v_u"], t["b_u"]))
        r = ad.sigmoid(ad.linear2(e, t["w_r"], h, t["v_r"], t["b_r"]))
        c = ad.tanh(ad.linear2(e, t["w_c"], r * h, t["v_c"], t["b_c"]))
        return (1.0 - u) * h + u * c
    return ad.tanh(ad.linear2(e, t["w"], h, t["v"], t["b"]))


def _cell_tensors(cell, lift):
    return {name.split(".")[-1]: lift(arr) for name, arr in cell.named_arrays()}


def gru_step(params, h_prev, eps_t):
    """Standard gated recurrence on plain vectors."""
    t = _cell_tensors(params, ad.constant)
    h = cell_step_core(
        params, t, ad.constant(np.asarray(h_prev)[None, :]), ad.constant(np.asarray(eps_t)[None, :])
    )
    return h.data[0]


# ---------------------------------------------------------------------------
# sigmoid-flow layers
# ---------------------------------------------------------------------------


@dataclass
class DSFLayerParams:
    """Unconstrained per-component layer parameters, width K.

    Constraint mapping: slopes a = softplus(a_hat) > 0, offsets b = b_hat,
    mixture weights w = softmax(w_hat) on the simplex.
    """

    a_hat: np.ndarray  # (n, K)
    b_hat: np.ndarray
    w_hat: np.ndarray

    def constrained(self):
        a = np.logaddexp(0.0, self.a_hat)
        w = np.exp(self.w_hat - self.w_hat.max(axis=-1, keepdims=True))
        w = w / w.sum(axis=-1, keepdims=True)
        return a, self.b_hat.copy(), w

    def named_arrays(self, prefix):
        yield f"{prefix}.a_hat", self.a_hat
        yield f"{prefix}.b_hat", self.b_hat
        yield f"{prefix}.w_hat", self.w_hat


def identity_layer(n, k):
    """Parameters for which the layer is exactly the identity map."""
    return DSFLayerParams(
        a_hat=np.full((n, k), IDENTITY_A_HAT),
        b_hat=np.zeros((n, k)),
        w_hat=np.zeros((n, k)),
    )


def _dsf_pieces(a_hat, b_hat, w_hat, x):
    """Stable log-space pieces shared by the forward value and log-slope."""
    a = ad.softplus(a_hat)
    log_a = ad.log(a)
    log_w = w_hat - ad.logsumexp(w_hat, axis=-1, keepdims=True)
    u = a * x.reshape(*x.shape, 1) + b_hat
    sp_pos = ad.softplus(u)
    sp_neg = ad.softplus(ad.neg(u))
    log_s = ad.logsumexp(log_w - sp_neg, axis=-1)
    log_1ms = ad.logsumexp(log_w - sp_pos, axis=-1)
    return log_a, log_w, sp_pos, sp_neg, log_s, log_1ms


def dsf_core(a_hat, b_hat, w_hat, x, counter=None):
    """(y, dlog) on Tensors; all shapes (..., n) with (..., n, K) params.

    ``y`` saturates at the float boundary of the inner convex combination;
    saturated entries are clamped to +-logit(1 - 1e-12) and counted.
    """
    log_a, log_w, sp_pos, sp_neg, log_s, log_1ms = _dsf_pieces(a_hat, b_hat, w_hat, x)
    y = log_s - log_1ms
    dlog = ad.logsumexp(log_w + log_a - sp_pos - sp_neg, axis=-1) - log_s - log_1ms
    hot = np.abs(y.data) > SATURATION_CLIP
    if hot.any():
        if counter is not None:
            counter.add(hot.sum())
        keep = ad.constant((~hot).astype(np.float64))
        cap = ad.constant(np.where(hot, np.sign(y.data) * SATURATION_CLIP, 0.0))
        y = y * keep + cap
    return y, dlog


def dsf_dlog(a_hat, b_hat, w_hat, x):
    log_a, log_w, sp_pos, sp_neg, log_s, log_1ms = _dsf_pieces(a_hat, b_hat, w_hat, x)
    return ad.logsumexp(log_w + log_a - sp_pos - sp_neg, axis=-1) - log_s - log_1ms


def dsf_forward(layer, x, counter=None):
    """Public single-layer map on a plain vector: returns (y, dlog)."""
    xv = np.asarray(x, dtype=np.float64)
    y, dlog = dsf_core(
        ad.constant(layer.a_hat),
        ad.constant(layer.b_hat),
        ad.constant(layer.w_hat),
        ad.constant(xv[None, :] if xv.ndim == 1 else xv),
        counter=counter,
    )
    if xv.ndim == 1:
        return y.data[0], dlog.data[0]
    return y.data, dlog.data


# ---------------------------------------------------------------------------
# the inverse as an implicit-gradient primitive
# ---------------------------------------------------------------------------


def _np_dsf_value(a, b, w, x):
    """Stable numpy evaluation of the scalar layer map."""
    u = a * x[..., None] + b
    sp_pos = np.logaddexp(0.0, u)
    sp_neg = np.logaddexp(0.0, -u)
    with np.errstate(divide="ignore"):
        log_w = np.log(w)
    log_s = _lse(log_w - sp_neg)
    log_1ms = _lse(log_w - sp_pos)
    return log_s - log_1ms


def _lse(x):
    m = np.max(x, axis=-1, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=-1, keepdims=True)))[..., 0]


def _np_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _bisect_numpy(y, a, b, w, tol, max_iter, width_tol):
    st = _np_sigmoid(y)
    tol_s = np.maximum(tol * st * (1.0 - st), 2.5e-16 * np.maximum(st, 1.0 - st))

    def s_of(x):
        u = np.clip(a * x[..., None] + b, -700.0, 700.0)
        return np.sum(w / (1.0 + np.exp(-u)), axis=-1)

    lo = np.full_like(y, -8.0)
    hi = np.full_like(y, 8.0)
    for _ in range(8):
        low_bad = s_of(lo) > st
        high_bad = s_of(hi) < st
        if not (low_bad.any() or high_bad.any()):
            break
        lo = np.where(low_bad, np.maximum(lo * 2.0, -50.0), lo)
        hi = np.where(high_bad, np.minimum(hi * 2.0, 50.0), hi)
    else:
        if (s_of(lo) > st).any() or (s_of(hi) < st).any():
            return None
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        err = s_of(mid) - st
        if np.all(np.abs(err) <= tol_s) and np.max(hi - lo) <= width_tol:
            lo = hi = mid
            break
        go_up = err < 0.0
        lo = np.where(go_up, mid, lo)
        hi = np.where(go_up, hi, mid)
    return 0.5 * (lo + hi)


try:  # compiled kernel; the numpy path above is the reference fallback
    import math

    import numba

    @numba.njit(cache=True, fastmath=False)
    def _bisect_numba(y, a, b, w, tol, max_iter, width_tol):  # pragma: no cover
        m, k = a.shape
        out = np.empty(m)
        for i in range(m):
            yi = y[i]
            if yi >= 0.0:
                st = 1.0 / (1.0 + math.exp(-yi))
            else:
                e = math.exp(yi)
                st = e / (1.0 + e)
            tol_i = tol * st * (1.0 - st)
            floor = 2.5e-16 * max(st, 1.0 - st)
            if tol_i < floor:
                tol_i = floor
            lo = -8.0
            hi = 8.0
            ok_lo = False
            ok_hi = False
            for _ in range(9):
                s_lo = 0.0
                s_hi = 0.0
                for j in range(k):
                    u1 = a[i, j] * lo + b[i, j]
                    if u1 > 700.0:
                        u1 = 700.0
                    elif u1 < -700.0:
                        u1 = -700.0
                    s_lo += w[i, j] / (1.0 + math.exp(-u1))
                    u2 = a[i, j] * hi + b[i, j]
                    if u2 > 700.0:
                        u2 = 700.0
                    elif u2 < -700.0:
                        u2 = -700.0
                    s_hi += w[i, j] / (1.0 + math.exp(-u2))
                ok_lo = s_lo <= st
                ok_hi = s_hi >= st
                if ok_lo and ok_hi:
                    break
                if not ok_lo:
                    lo = max(lo * 2.0, -50.0)
                if not ok_hi:
                    hi = min(hi * 2.0, 50.0)
            if not (ok_lo and ok_hi):
                out[i] = np.nan
                continue
            for _ in range(max_iter):
                mid = 0.5 * (lo + hi)
                s_mid = 0.0
                for j in range(k):
                    u = a[i, j] * mid + b[i, j]
                    if u > 700.0:
                        u = 700.0
                    elif u < -700.0:
                        u = -700.0
                    s_mid += w[i, j] / (1.0 + math.exp(-u))
                err = s_mid - st
                if (err <= tol_i and -err <= tol_i) and hi - lo <= width_tol:
                    lo = mid
                    hi = mid
                    break
                if err < 0.0:
                    lo = mid
                else:
                    hi = mid
            out[i] = 0.5 * (lo + hi)
        return out

    _HAVE_NUMBA = True
except Exception:  # pragma: no cover
    _HAVE_NUMBA = False


def _dsf_inverse_forward(values, meta):
    # bisection runs in the inner sigmoid-mixture space: solving F(x) = y is
    # the same as solving s(x) = sigmoid(y), which avoids logs per iteration;
    # the width gate keeps the solved point smooth in its inputs (the value
    # criterion alone leaves flat lanes with coarse x resolution, which shows
    # up as noise under finite differences)
    y, a, b, w = values
    tol, max_iter = meta
    width_tol = max(1e-12, 10.0 * tol)
    if _HAVE_NUMBA:
        shape = y.shape
        k = a.shape[-1]
        out = _bisect_numba(
            np.ascontiguousarray(y.reshape(-1)),
            np.ascontiguousarray(a.reshape(-1, k)),
            np.ascontiguousarray(b.reshape(-1, k)),
            np.ascontiguousarray(w.reshape(-1, k)),
            tol,
            max_iter,
            width_tol,
        )
        if np.isnan(out).any():
            bad = int(np.argwhere(np.isnan(out))[0][0])
            raise SaturationError(
                f"flow inverse: no bracket within |x| <= 50 at flat index {bad}"
            )
        return out.reshape(shape)
    out = _bisect_numpy(y, a, b, w, tol, max_iter, width_tol)
    if out is None:
        raise SaturationError("flow inverse: no bracket within |x| <= 50")
    return out


def _dsf_inverse_vjp(g, values, out, meta):
    y, a, b, w = values
    x = out
    u = a * x[..., None] + b
    sp_pos = np.logaddexp(0.0, u)
    sp_neg = np.logaddexp(0.0, -u)
    with np.errstate(divide="ignore"):
        log_w = np.log(w)
        log_a = np.log(a)
    log_sigp = -sp_pos - sp_neg  # log sigmoid'(u)
    log_den = _lse(log_w + log_a + log_sigp)  # log sum_k w a sig'
    log_s = _lse(log_w - sp_neg)
    log_1ms = _lse(log_w - sp_pos)
    g_y = g * np.exp(log_s + log_1ms - log_den)
    ratio = np.exp(log_w + log_sigp - log_den[..., None])  # w_k sig'_k / den
    g_a = -g[..., None] * ratio * x[..., None]
    g_b = -g[..., None] * ratio
    g_w = -g[..., None] * np.exp(-sp_neg - log_den[..., None])  # sig_k / den
    return g_y, g_a, g_b, g_w


ad.register_primitive("dsf_inverse", _dsf_inverse_forward, _dsf_inverse_vjp)


def dsf_inverse(y, a, b, w, tol=1e-12, max_iter=80):
    """Invert the constrained layer map per component (bracketed bisection)."""
    return ad.apply_primitive("dsf_inverse", (y, a, b, w), (float(tol), int(max_iter)))


def _logslope_pieces(a, b, w, x):
    u = a * x[..., None] + b
    sp_pos = np.logaddexp(0.0, u)
    sp_neg = np.logaddexp(0.0, -u)
    with np.errstate(divide="ignore"):
        log_w = np.log(w)
        log_a = np.log(a)
    log_sigp = -sp_pos - sp_neg
    log_den = _lse(log_w + log_a + log_sigp)
    log_s = _lse(log_w - sp_neg)
    log_1ms = _lse(log_w - sp_pos)
    return u, sp_pos, sp_neg, log_w, log_a, log_sigp, log_den, log_s, log_1ms


def _dsf_logslope_forward(values, meta):
    x, a, b, w = values
    pieces = _logslope_pieces(a, b, w, x)
    _, _, _, _, _, _, log_den, log_s, log_1ms = pieces
    return log_den - log_s - log_1ms


def _dsf_logslope_vjp(g, values, out, meta):
    # all ratios are exponentials of log differences, stable at saturation
    x, a, b, w = values
    (u, sp_pos, sp_neg, log_w, log_a, log_sigp, log_den, log_s, log_1ms) = (
        _logslope_pieces(a, b, w, x)
    )
    sig = _np_sigmoid(u)
    one_minus_2s = 1.0 - 2.0 * sig
    r1 = np.exp(log_w + log_a + log_sigp - log_den[..., None])  # w a sig' / den
    r0 = np.exp(log_w + log_sigp - log_den[..., None])  # w sig' / den
    s1 = np.exp(log_w + log_sigp - log_1ms[..., None])  # w sig' / (1-s)
    s2 = np.exp(log_w + log_sigp - log_s[..., None])  # w sig' / s
    du = r1 * one_minus_2s + (s1 - s2)  # d out / d u_k
    g_x = g * np.sum(a * du, axis=-1)
    gk = g[..., None]
    g_a = gk * (x[..., None] * du + r0)
    g_b = gk * du
    g_w = gk * (
        np.exp(log_a + log_sigp - log_den[..., None])
        + np.exp(-sp_neg - log_1ms[..., None])
        - np.exp(-sp_neg - log_s[..., None])
    )
    return g_x, g_a, g_b, g_w


ad.register_primitive("dsf_logslope", _dsf_logslope_forward, _dsf_logslope_vjp)


def dsf_logslope(x, a, b, w):
    """Fused log-derivative of the constrained layer map (one tape node)."""
    return ad.apply_primitive("dsf_logslope", (x, a, b, w))


# packed variants: one tensor (..., n, 3, K) of unconstrained layer
# parameters, constraints applied inside the primitive; this keeps the
# likelihood tape at two nodes per flow layer


def _unpack_theta(theta):
    a_hat = theta[..., 0, :]
    b = theta[..., 1, :]
    w_hat = theta[..., 2, :]
    a = np.logaddexp(0.0, a_hat)
    e = np.exp(w_hat - w_hat.max(axis=-1, keepdims=True))
    w = e / e.sum(axis=-1, keepdims=True)
    return a_hat, a, b, w_hat, w


def _pack_grads(g_a, g_b, g_w, a_hat, w):
    g_theta = np.empty(g_a.shape[:-1] + (3,) + g_a.shape[-1:])
    g_theta[..., 0, :] = g_a * _np_sigmoid(a_hat)
    g_theta[..., 1, :] = g_b
    g_theta[..., 2, :] = w * (g_w - np.sum(g_w * w, axis=-1, keepdims=True))
    return g_theta


def _dsf_inverse_packed_forward(values, meta):
    y, theta = values
    _, a, b, _, w = _unpack_theta(theta)
    return _dsf_inverse_forward((y, a, b, w), meta)


def _dsf_inverse_packed_vjp(g, values, out, meta):
    y, theta = values
    a_hat, a, b, _, w = _unpack_theta(theta)
    g_y, g_a, g_b, g_w = _dsf_inverse_vjp(g, (y, a, b, w), out, meta)
    return g_y, _pack_grads(g_a, g_b, g_w, a_hat, w)


ad.register_primitive("dsf_inverse_packed", _dsf_inverse_packed_forward, _dsf_inverse_packed_vjp)


def _dsf_logslope_packed_forward(values, meta):
    x, theta = values
    _, a, b, _, w = _unpack_theta(theta)
    return _dsf_logslope_forward((x, a, b, w), meta)


def _dsf_logslope_packed_vjp(g, values, out, meta):
    x, theta = values
    a_hat, a, b, _, w = _unpack_theta(theta)
    g_x, g_a, g_b, g_w = _dsf_logslope_vjp(g, (x, a, b, w), out, meta)
    return g_x, _pack_grads(g_a, g_b, g_w, a_hat, w)


ad.register_primitive("dsf_logslope_packed", _dsf_logslope_packed_forward, _dsf_logslope_packed_vjp)


def dsf_inverse_packed(y, theta, tol=1e-12, max_iter=80):
    return ad.apply_primitive("dsf_inverse_packed", (y, theta), (float(tol), int(max_iter)))


def dsf_logslope_packed(x, theta):
    return ad.apply_primitive("dsf_logslope_packed", (x, theta))


# single-node layer inverse: returns [x, dlog] side by side so the solver,
# the log-slope, and all their shared pieces run once per layer


def _layer_inverse_forward(values, meta):
    y, theta = values
    _, a, b, _, w = _unpack_theta(theta)
    x = _dsf_inverse_forward((y, a, b, w), meta)
    dlog = _dsf_logslope_forward((x, a, b, w), None)
    return np.concatenate([x, dlog], axis=-1)


def _layer_inverse_vjp(g, values, out, meta):
    y, theta = values
    n = y.shape[-1]
    gx = g[..., :n]
    gd = g[..., n:]
    x = out[..., :n]
    a_hat, a, b, _, w = _unpack_theta(theta)

    (u, sp_pos, sp_neg, log_w, log_a, log_sigp, log_den, log_s, log_1ms) = (
        _logslope_pieces(a, b, w, x)
    )
    sig = _np_sigmoid(u)
    one_minus_2s = 1.0 - 2.0 * sig
    r1 = np.exp(log_w + log_a + log_sigp - log_den[..., None])
    r0 = np.exp(log_w + log_sigp - log_den[..., None])
    s1 = np.exp(log_w + log_sigp - log_1ms[..., None])
    s2 = np.exp(log_w + log_sigp - log_s[..., None])
    du = r1 * one_minus_2s + (s1 - s2)
    # explicit log-slope partials
    dl_dx = np.sum(a * du, axis=-1)
    dl_da = x[..., None] * du + r0
    dl_db = du
    dl_dw = (
        np.exp(log_a + log_sigp - log_den[..., None])
        + np.exp(-sp_neg - log_1ms[..., None])
        - np.exp(-sp_neg - log_s[..., None])
    )
    # implicit inverse partials (all stable ratios)
    dx_dy = np.exp(log_s + log_1ms - log_den)
    ratio = np.exp(log_w + log_sigp - log_den[..., None])
    dx_da = -ratio * x[..., None]
    dx_db = -ratio
    dx_dw = -np.exp(-sp_neg - log_den[..., None])

    g_eff = gx + gd * dl_dx  # gradient reaching x from both outputs
    g_y = g_eff * dx_dy
    ge = g_eff[..., None]
    gdk = gd[..., None]
    g_a = ge * dx_da + gdk * dl_da
    g_b = ge * dx_db + gdk * dl_db
    g_w = ge * dx_dw + gdk * dl_dw
    return g_y, _pack_grads(g_a, g_b, g_w, a_hat, w)


ad.register_primitive("dsf_layer_inverse", _layer_inverse_forward, _layer_inverse_vjp)


def dsf_layer_inverse(y, theta, tol=1e-12, max_iter=80):
    """Solve one layer and report its forward log-slope in a single node."""
    return ad.apply_primitive(
        "dsf_layer_inverse", (y, theta), (float(tol), int(max_iter))
    )


# ---------------------------------------------------------------------------
# conditional flow
# ---------------------------------------------------------------------------


@dataclass
class ConditionalFlowParams:
    """Stack of D component-wise layers fed by one shared conditioner.

    The conditioner maps the recurrent state to every layer's unconstrained
    parameters at once; inside a layer nothing mixes across components.
    """

    conditioner: nets.MLPParams  # hidden -> D * n * 3K (tanh hidden layers)
    n_s: int
    depth: int
    width: int  # K

    def named_arrays(self, prefix="flow"):
        yield from self.conditioner.named_arrays(f"{prefix}.cond")


def init_conditional_flow(rng, n_s, hidden, depth=2, width=8, cond_hidden=64):
    out_dim = depth * n_s * 3 * width
    cond = nets.init_mlp(
        rng, [hidden, cond_hidden, cond_hidden, out_dim], activation="tanh", out_scale=0.01
    )
    template = np.zeros((depth, n_s, 3, width))
    template[:, :, 0, :] = IDENTITY_A_HAT
    template[:, :, 1, :] = np.linspace(-0.5, 0.5, width)  # spread unit offsets
    template[:, :, 2, :] = 0.0
    w_last, _ = cond.weights[-1]
    cond.weights[-1] = (w_last, template.reshape(-1).copy())
    return ConditionalFlowParams(conditioner=cond, n_s=n_s, depth=depth, width=width)


def force_identity(flow):
    """Make the conditioner emit exact identity-layer parameters everywhere."""
    template = np.zeros((flow.depth, flow.n_s, 3, flow.width))
    template[:, :, 0, :] = IDENTITY_A_HAT
    w_last, _ = flow.conditioner.weights[-1]
    w_last[:] = 0.0
    flow.conditioner.weights[-1] = (w_last, template.reshape(-1).copy())
    return flow


def flow_layer_params(flow, t, h):
    """Conditioner output split into per-layer (a_hat, b_hat, w_hat) Tensors."""
    b = h.shape[0]
    raw = nets.mlp_core(flow.conditioner, h, lift=lambda arr: t[id(arr)])
    grid = raw.reshape(b, flow.depth, flow.n_s, 3, flow.width)
    layers = []
    for d in range(flow.depth):
        a_hat = grid[:, d, :, 0, :]
        b_hat = grid[:, d, :, 1, :]
        w_hat = grid[:, d, :, 2, :]
        layers.append((a_hat, b_hat, w_hat))
    return layers


def _flow_lift_table(flow, lift):
    return {id(arr): lift(arr) for _, arr in flow.named_arrays()}


def flow_forward_core(flow, eps, h, lift=ad.constant, counter=None):
    """eps (B, n), h (B, H) Tensors -> (z (B, n), logdet (B,))."""
    t = _flow_lift_table(flow, lift)
    layers = flow_layer_params(flow, t, h)
    x = eps
    logdet = None
    for a_hat, b_hat, w_hat in layers:
        x, dlog = dsf_core(a_hat, b_hat, w_hat, x, counter=counter)
        contrib = dlog.sum(axis=-1)
        logdet = contrib if logdet is None else logdet + contrib
    return x, logdet


def flow_inverse_core(flow, z, h, tol=1e-12, lift=ad.constant):
    """z (B, n), h (B, H) Tensors -> (eps (B, n), forward logdet at eps (B,)).

    Layers are undone top-down; each solved point feeds the analytic
    log-slope so the returned logdet is the forward one evaluated where the
    inverse landed.
    """
    t = _flow_lift_table(flow, lift)
    b = h.shape[0]
    n = flow.n_s
    raw = nets.mlp_core(flow.conditioner, h, lift=lambda arr: t[id(arr)])
    grid = raw.reshape(b, flow.depth, flow.n_s, 3, flow.width)
    x = z
    logdet = None
    for d in range(flow.depth - 1, -1, -1):
        pair = dsf_layer_inverse(x, grid[:, d], tol=tol)
        x = pair[:, 0:n]
        contrib = pair[:, n : 2 * n].sum(axis=-1)
        logdet = contrib if logdet is None else logdet + contrib
    return x, logdet


def flow_forward(flow, eps_t, h_prev, counter=None):
    """Public single-vector wrapper: returns (z, logdet) as plain values."""
    z, logdet = flow_forward_core(
        flow,
        ad.constant(np.asarray(eps_t)[None, :]),
        ad.constant(np.asarray(h_prev)[None, :]),
        counter=counter,
    )
    return z.data[0], float(logdet.data[0])


def flow_inverse(flow, z_t_s, h_prev, tol=1e-10):
    """Invert the conditional flow for one style vector."""
    if tol <= 0:
        raise ad.UsageError("tol must be positive")
    eps, _ = flow_inverse_core(
        flow,
        ad.constant(np.asarray(z_t_s)[None, :]),
        ad.constant(np.asarray(h_prev)[None, :]),
        tol=tol,
    )
    return eps.data[0]


# ---------------------------------------------------------------------------
# no-flow ablation head: joint conditional Gaussian transition
# ---------------------------------------------------------------------------


@dataclass
class GaussianHeadParams:
    """Feed-forward head emitting a mean and a dense precision factor.

    The style step becomes z = m(h) + inv(A(h))^T eps with A lower triangular
    (positive diagonal), i.e. a joint feed-forward transition that mixes
    noise components and deliberately breaks the component-wise constraint.
    """

    net: nets.MLPParams  # hidden -> n + n(n+1)/2
    n_s: int

    def named_arrays(self, prefix="gauss"):
        yield from self.net.named_arrays(f"{prefix}.net")


def init_gaussian_head(rng, n_s, hidden, cond_hidden=64):
    out = n_s + n_s * (n_s + 1) // 2
    net = nets.init_mlp(
        rng, [hidden, cond_hidden, cond_hidden, out], activation="tanh", out_scale=0.01
    )
    return GaussianHeadParams(net=net, n_s=n_s)


def gaussian_head_core(head, t, h):
    """Tensors (m (B, n), A (B, n, n) lower with positive diagonal)."""
    b = h.shape[0]
    n = head.n_s
    raw = nets.mlp_core(head.net, h, lift=lambda arr: t[id(arr)])
    m = raw[:, :n]
    tril = raw[:, n:]
    rows, cols = np.tril_indices(n)
    mats = []
    for j in range(tril.shape[1]):
        basis = np.zeros((n, n))
        basis[rows[j], cols[j]] = 1.0
        entry = tril[:, j : j + 1]
        if rows[j] == cols[j]:
            entry = ad.exp(entry)
        mats.append(entry.reshape(b, 1, 1) * ad.constant(basis))
    a = mats[0]
    for mj in mats[1:]:
        a = a + mj
    return m, a


# ---------------------------------------------------------------------------
# content mapper and the bundled transition module
# ---------------------------------------------------------------------------


@dataclass
class ContentMapperParams:
    """Invertible feed-forward map from content noise to content.

    Two hidden layers of width n_c with leaky activations; weights stored in
    the factored square form so the exact-likelihood backend can invert it
    and read off log-determinants.
    """

    stack: nets.InvertibleDecoderParams

    @property
    def n_c(self):
        return self.stack.n

    def named_arrays(self, prefix="content"):
        yield from self.stack.named_arrays(prefix)

    def named_buffers(self, prefix="content"):
        yield from self.stack.named_buffers(prefix)


def init_content_mapper(rng, n_c, depth=3, slope=0.3):
    return ContentMapperParams(stack=nets.init_invertible_decoder(rng, n_c, depth, slope))


def content_map(params, eps_c):
    """Forward content map on plain vectors/rows."""
    out, _ = nets.decode_invertible(params.stack, eps_c)
    return out


@dataclass
class TTMParams:
    """All learnable parameters of the transition module."""

    cell_kind: str  # "gru" | "rnn"
    cell: object
    style_kind: str  # "flow" | "gaussian"
    flow: ConditionalFlowParams | None
    gauss: GaussianHeadParams | None
    content: ContentMapperParams
    n_s: int
    n_c: int
    hidden: int

    def named_arrays(self, prefix="ttm"):
        yield from self.cell.named_arrays(f"{prefix}.cell")
        if self.style_kind == "flow":
            yield from self.flow.named_arrays(f"{prefix}.flow")
        else:
            yield from self.gauss.named_arrays(f"{prefix}.gauss")
        yield from self.content.named_arrays(f"{prefix}.content")

    def named_buffers(self, prefix="ttm"):
        yield from self.content.named_buffers(f"{prefix}.content")


def init_ttm(
    rng,
    n_s,
    n_c,
    hidden=64,
    flow_depth=2,
    flow_width=8,
    cond_hidden=64,
    cell_kind="gru",
    style_kind="flow",
    content_depth=3,
):
    cell = (init_gru if cell_kind == "gru" else init_rnn)(rng, n_s, hidden)
    flow = gauss = None
    if style_kind == "flow":
        flow = init_conditional_flow(rng, n_s, hidden, flow_depth, flow_width, cond_hidden)
    else:
        gauss = init_gaussian_head(rng, n_s, hidden, cond_hidden)
    return TTMParams(
        cell_kind=cell_kind,
        cell=cell,
        style_kind=style_kind,
        flow=flow,
        gauss=gauss,
        content=init_content_mapper(rng, n_c, depth=content_depth),
        n_s=n_s,
        n_c=n_c,
        hidden=hidden,
    )


def ttm_generate(params, eps_c, eps_s, counter=None):
    """Run the generator over one noise draw.

    eps_c (n_c,), eps_s (T, n_s) -> (z_c (n_c,), Z_s (T, n_s), logdets (T,),
    H (T, hidden)); H[t] is the state after consuming eps_s[t].  The initial
    state is zero and the recurrence consumes the noise, not the generated
    style, so the flow conditioning never depends on its own output.
    """
    eps_c = np.asarray(eps_c, dtype=np.float64)
    eps_s = np.asarray(eps_s, dtype=np.float64)
    T = eps_s.shape[0]
    z_c = content_map(params.content, eps_c)
    cell_t = _cell_tensors(params.cell, ad.constant)
    h = ad.constant(np.zeros((1, params.hidden)))
    Z = np.empty_like(eps_s)
    logdets = np.empty(T)
    H = np.empty((T, params.hidden))
    for t in range(T):
        e = ad.constant(eps_s[t][None, :])
        if params.style_kind == "flow":
            z, ld = flow_forward_core(params.flow, e, h, counter=counter)
            Z[t] = z.data[0]
            logdets[t] = ld.data[0]
        else:
            tbl = {id(arr): ad.constant(arr) for _, arr in params.gauss.named_arrays()}
            m, a = gaussian_head_core(params.gauss, tbl, h)
            amat = a.data[0]
            Z[t] = m.data[0] + np.linalg.solve(amat.T, eps_s[t])
            logdets[t] = -float(np.log(np.diag(amat)).sum())
        h = cell_step_core(params.cell, cell_t, h, e)
        H[t] = h.data[0]
    return z_c, Z, logdets, H
