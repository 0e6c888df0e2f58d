"""Scalar-valued probe functions, one per registered primitive.

Each case maps a flat input vector to a scalar through the primitive under
test (plus minimal glue whose own cases appear separately), so grad_check
can sweep every primitive at seeded random points.  Probe points are kept
away from kinks and domain boundaries by construction.
"""

import numpy as np

from flowident import autodiff as ad
from flowident import transition  # noqa: F401  (registers dsf_inverse)


def _split(x, *sizes):
    parts = []
    off = 0
    for s in sizes:
        parts.append(x[off : off + s])
        off += s
    return parts


_C6 = ad.constant(np.linspace(0.3, 1.3, 6))
_C4 = ad.constant(np.array([0.7, -0.4, 1.1, 0.25]))
_C23 = ad.constant(np.arange(6.0).reshape(2, 3) * 0.3 + 0.1)
_C32 = ad.constant(np.arange(6.0).reshape(3, 2) * 0.2 - 0.4)


def _case_add(x):
    a, b = _split(x, 3, 3)
    return ((a + b) * _C6[:3]).sum()


def _case_sub(x):
    a, b = _split(x, 3, 3)
    return ((a - b) * _C6[:3]).sum()


def _case_mul(x):
    a, b = _split(x, 3, 3)
    return (a * b).sum()


def _case_div(x):
    a, b = _split(x, 3, 3)
    return (a / (ad.softplus(b) + 0.5)).sum()


def _case_neg(x):
    return (-x * _C6).sum()


def _case_matmul(x):
    a = x[:6].reshape(2, 3)
    b = x[6:].reshape(3, 2)
    return ((a @ b) * _C23[:, :2]).sum()


def _case_linear(x):
    xin, w, b = _split(x, 4, 6, 3)
    out = ad.linear(xin.reshape(2, 2), w.reshape(3, 2), b)
    return (out * _C23).sum()


def _case_linear2(x):
    x1, w1, x2, w2, b = _split(x, 4, 6, 4, 6, 3)
    out = ad.linear2(
        x1.reshape(2, 2), w1.reshape(3, 2), x2.reshape(2, 2), w2.reshape(3, 2), b
    )
    return (out * _C23).sum()


_C33 = ad.constant(np.linspace(-0.8, 0.9, 9).reshape(3, 3))


def _case_matinv(x):
    m = x.reshape(3, 3) * 0.3 + ad.constant(3.0 * np.eye(3))
    return (ad.matinv(m) * _C33).sum()


def _case_transpose(x):
    return (ad.transpose(x.reshape(2, 3)) * _C32).sum()


def _case_sigmoid(x):
    return (ad.sigmoid(x) * _C6).sum()


def _case_tanh(x):
    return (ad.tanh(x) * _C6).sum()


def _case_softplus(x):
    return (ad.softplus(x) * _C6).sum()


def _case_exp(x):
    return (ad.exp(x * 0.5) * _C6).sum()


def _case_log(x):
    return (ad.log(ad.softplus(x) + 0.1) * _C6).sum()


def _case_leaky(x):
    return (ad.leaky_relu(x - 5.0, 0.2) + ad.leaky_relu(x + 5.0, 0.2)).sum()


def _case_sum(x):
    return (x.reshape(2, 3).sum(axis=1) * _C4[:2]).sum()


def _case_mean(x):
    return (x.reshape(2, 3).mean(axis=0) * _C6[:3]).sum()


def _case_logsumexp(x):
    whole = ad.logsumexp(x)
    rows = ad.logsumexp(x.reshape(2, 3), axis=1)
    return whole + (rows * _C4[:2]).sum()


def _case_softmax(x):
    return (ad.softmax(x.reshape(2, 3), axis=-1) * _C23).sum()


def _case_concat(x):
    a, b = _split(x, 2, 4)
    return (ad.concat([a, b], axis=0) * _C6).sum()


def _case_slice(x):
    return (x[1:4] * _C6[:3]).sum() + x[0] * 0.5


def _case_broadcast(x):
    wide = ad.broadcast_to(x.reshape(1, 6), (3, 6))
    return (wide * ad.constant(np.linspace(0.1, 1.8, 18).reshape(3, 6))).sum()


def _case_reshape(x):
    return (x.reshape(3, 2) * _C32).sum()


_LIN20 = ad.constant(np.linspace(0.11, 0.3, 20))


def _case_dsf_inverse(x):
    # constrained flow-layer parameters are built from the free point, so the
    # finite-difference sweep also exercises the implicit inverse gradient;
    # the linear term keeps every coordinate's reference gradient away from
    # zero, where the relative-error metric is ill-conditioned
    n, k = 2, 3
    y, ah, bh, wh = _split(x, n, n * k, n * k, n * k)
    a = ad.softplus(ah.reshape(n, k)) + 0.1
    b = bh.reshape(n, k)
    w = ad.softmax(wh.reshape(n, k), axis=-1)
    probe = (transition.dsf_inverse(y * 0.5, a, b, w) * _C4[:2]).sum()
    return probe + (x * _LIN20).sum()


def _case_dsf_logslope(x):
    n, k = 2, 3
    y, ah, bh, wh = _split(x, n, n * k, n * k, n * k)
    a = ad.softplus(ah.reshape(n, k)) + 0.1
    b = bh.reshape(n, k)
    w = ad.softmax(wh.reshape(n, k), axis=-1)
    probe = (transition.dsf_logslope(y * 0.5, a, b, w) * _C4[:2]).sum()
    return probe + (x * _LIN20).sum()


def _case_dsf_inverse_packed(x):
    n, k = 2, 3
    y, theta = _split(x, n, n * 3 * k)
    probe = (
        transition.dsf_inverse_packed(y * 0.5, theta.reshape(n, 3, k)) * _C4[:2]
    ).sum()
    return probe + (x * _LIN20).sum()


def _case_dsf_logslope_packed(x):
    n, k = 2, 3
    y, theta = _split(x, n, n * 3 * k)
    probe = (
        transition.dsf_logslope_packed(y * 0.5, theta.reshape(n, 3, k)) * _C4[:2]
    ).sum()
    return probe + (x * _LIN20).sum()


def _case_dsf_layer_inverse(x):
    n, k = 2, 3
    y, theta = _split(x, n, n * 3 * k)
    pair = transition.dsf_layer_inverse(y * 0.5, theta.reshape(n, 3, k))
    probe = (pair * ad.concat([_C4[:2], _C4[2:4]], axis=0)).sum()
    return probe + (x * _LIN20).sum()


def cases():
    """List of (primitive tag, input dimension, probe function)."""
    table = [
        ("add", 6, _case_add),
        ("sub", 6, _case_sub),
        ("mul", 6, _case_mul),
        ("div", 6, _case_div),
        ("neg", 6, _case_neg),
        ("matmul", 12, _case_matmul),
        ("linear", 13, _case_linear),
        ("linear2", 23, _case_linear2),
        ("matinv", 9, _case_matinv),
        ("transpose", 6, _case_transpose),
        ("sigmoid", 6, _case_sigmoid),
        ("tanh", 6, _case_tanh),
        ("softplus", 6, _case_softplus),
        ("exp", 6, _case_exp),
        ("log", 6, _case_log),
        ("leaky_relu", 6, _case_leaky),
        ("sum", 6, _case_sum),
        ("mean", 6, _case_mean),
        ("logsumexp", 6, _case_logsumexp),
        ("softmax", 6, _case_softmax),
        ("concat", 6, _case_concat),
        ("slice", 6, _case_slice),
        ("broadcast", 6, _case_broadcast),
        ("reshape", 6, _case_reshape),
        ("dsf_inverse", 2 + 3 * 2 * 3, _case_dsf_inverse),
        ("dsf_logslope", 2 + 3 * 2 * 3, _case_dsf_logslope),
        ("dsf_inverse_packed", 2 + 3 * 2 * 3, _case_dsf_inverse_packed),
        ("dsf_logslope_packed", 2 + 3 * 2 * 3, _case_dsf_logslope_packed),
        ("dsf_layer_inverse", 2 + 3 * 2 * 3, _case_dsf_layer_inverse),
    ]
    missing = set(ad.registered_primitives()) - {t for t, _, _ in table} - {"leaf"}
    assert not missing, f"primitives without a grad-check case: {missing}"
    return table
