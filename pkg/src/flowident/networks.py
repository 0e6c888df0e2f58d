"""Estimator-side networks: invertible decoder, free decoder, discriminators.

The invertible decoder keeps every square weight in factored form
(fixed permutation, unit lower triangle, upper triangle with a
positive-parameterized diagonal), so log-determinants are exact sums of the
diagonal parameters and inversion is a pair of triangular structures undone
in closed form.  Leaky activations sit between layers, never after the last
one; their log-slopes join the log-determinant with the branch actually
taken.

All forward passes are written against the autodiff Tensor API, so the same
code runs recorded (training) or plain (evaluation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from flowident import autodiff as ad
from flowident.autodiff import Tensor


class ConstructionError(ValueError):
    """Parameters violate a structural invariant at build time."""


_ZEROS = {}


def _zero_bias(n):
    t = _ZEROS.get(n)
    if t is None or t.tape is not None:
        t = _ZEROS[n] = ad.constant(np.zeros(n))
    return t


def _as_2d(x):
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False


# ---------------------------------------------------------------------------
# factored invertible layers
# ---------------------------------------------------------------------------


@dataclass
class PLULayer:
    """One square affine layer stored as permutation * lower * upper."""

    perm: np.ndarray  # (n,) int, fixed
    lower: np.ndarray  # (n, n), strict lower part is free
    upper: np.ndarray  # (n, n), strict upper part is free
    log_diag: np.ndarray  # (n,), diagonal of U is exp(log_diag) > 0
    bias: np.ndarray  # (n,)

    @property
    def n(self):
        return self.perm.shape[0]

    def named_arrays(self, prefix):
        yield f"{prefix}.lower", self.lower
        yield f"{prefix}.upper", self.upper
        yield f"{prefix}.log_diag", self.log_diag
        yield f"{prefix}.bias", self.bias

    def named_buffers(self, prefix):
        yield f"{prefix}.perm", self.perm

    def perm_matrix(self):
        n = self.n
        p = np.zeros((n, n))
        p[np.arange(n), self.perm.astype(int)] = 1.0
        return p


def init_plu(rng, n):
    """Near-permutation initialization; well conditioned by construction."""
    return PLULayer(
        perm=rng.permutation(n).astype(np.float64),
        lower=rng.normal(size=(n, n)) * (0.05 / np.sqrt(n)),
        upper=rng.normal(size=(n, n)) * (0.05 / np.sqrt(n)),
        log_diag=rng.normal(size=n) * 0.05,
        bias=np.zeros(n),
    )


def _assemble_weight(layer, t):
    """Weight tensor W = P (I + strict_lower) (strict_upper + diag)."""
    n = layer.n
    low_mask = ad.constant(np.tril(np.ones((n, n)), k=-1))
    up_mask = ad.constant(np.triu(np.ones((n, n)), k=1))
    eye = ad.constant(np.eye(n))
    lo = t["lower"] * low_mask + eye
    up = t["upper"] * up_mask + eye * ad.exp(t["log_diag"])
    return ad.constant(layer.perm_matrix()) @ lo @ up


@dataclass
class InvertibleDecoderParams:
    """Stack of factored square layers with leaky activations in between."""

    layers: list  # list[PLULayer]
    slope: float

    def __post_init__(self):
        if not (0.0 < self.slope <= 1.0):
            raise ConstructionError(
                f"leaky slope must lie in (0, 1], got {self.slope}"
            )

    @property
    def n(self):
        return self.layers[0].n

    def named_arrays(self, prefix="decoder"):
        for i, layer in enumerate(self.layers):
            yield from layer.named_arrays(f"{prefix}.l{i}")

    def named_buffers(self, prefix="decoder"):
        for i, layer in enumerate(self.layers):
            yield from layer.named_buffers(f"{prefix}.l{i}")


def init_invertible_decoder(rng, n, depth=3, slope=0.3):
    return InvertibleDecoderParams(
        layers=[init_plu(rng, n) for _ in range(depth)], slope=slope
    )


def _layer_tensors(layer, lift):
    return {
        "lower": lift(layer.lower),
        "upper": lift(layer.upper),
        "log_diag": lift(layer.log_diag),
        "bias": lift(layer.bias),
    }


def decode_core(params, z, lift=ad.constant):
    """z (B, n) -> (x (B, n), logdet (B,)), all Tensors.

    ``lift`` maps parameter arrays to Tensors (tape leaves during training).
    The log-determinant collects the diagonal parameters of every layer plus
    the log of each leaky slope actually taken.
    """
    b = z.shape[0]
    x = z
    logdet = ad.constant(np.zeros(b))
    n_layers = len(params.layers)
    for li, layer in enumerate(params.layers):
        t = _layer_tensors(layer, lift)
        w = _assemble_weight(layer, t)
        x = ad.linear(x, w, t["bias"])
        logdet = logdet + ad.broadcast_to(t["log_diag"].sum().reshape(1), (b,))
        if li < n_layers - 1:
            slopes = np.where(x.data >= 0.0, 1.0, params.slope)
            logdet = logdet + ad.constant(np.log(slopes).sum(axis=-1))
            x = ad.leaky_relu(x, params.slope)
    return x, logdet


def invert_core(params, x, lift=ad.constant):
    """x (B, n) -> (z (B, n), forward logdet at z (B,)), all Tensors."""
    b = x.shape[0]
    n_layers = len(params.layers)
    z = x
    logdet = ad.constant(np.zeros(b))
    for li in range(n_layers - 1, -1, -1):
        layer = params.layers[li]
        t = _layer_tensors(layer, lift)
        if li < n_layers - 1:
            # undo leaky: sign is preserved, so the branch is read off z itself
            inv_slopes = np.where(z.data >= 0.0, 1.0, 1.0 / params.slope)
            z = z * ad.constant(inv_slopes)
            logdet = logdet + ad.constant(-np.log(inv_slopes).sum(axis=-1))
        w = _assemble_weight(layer, t)
        z = ad.linear(z - t["bias"], ad.matinv(w), _zero_bias(layer.n))
        logdet = logdet + ad.broadcast_to(t["log_diag"].sum().reshape(1), (b,))
    return z, logdet


def decode_invertible(params, z):
    """Public decode: accepts one vector or a batch of rows."""
    z2, squeeze = _as_2d(z)
    x, logdet = decode_core(params, ad.constant(z2))
    if squeeze:
        return x.data[0], float(logdet.data[0])
    return x.data, logdet.data


def invert_decoder(params, x):
    """Exact inverse of decode_invertible (layer-by-layer undo)."""
    x2, squeeze = _as_2d(x)
    z, _ = invert_core(params, ad.constant(x2))
    return z.data[0] if squeeze else z.data


# ---------------------------------------------------------------------------
# plain feed-forward networks
# ---------------------------------------------------------------------------


@dataclass
class MLPParams:
    weights: list  # list[(W (out,in), b (out,))]
    slope: float = 0.2
    activation: str = "leaky"  # or "tanh"

    def named_arrays(self, prefix):
        for i, (w, b) in enumerate(self.weights):
            yield f"{prefix}.w{i}", w
            yield f"{prefix}.b{i}", b


def init_mlp(rng, dims, slope=0.2, activation="leaky", out_scale=1.0):
    weights = []
    for i in range(len(dims) - 1):
        scale = 1.0 / np.sqrt(dims[i])
        if i == len(dims) - 2:
            scale *= out_scale
        weights.append(
            (rng.normal(size=(dims[i + 1], dims[i])) * scale, np.zeros(dims[i + 1]))
        )
    return MLPParams(weights=weights, slope=slope, activation=activation)


def mlp_core(params, x, lift=ad.constant):
    """Feed-forward pass, activation between layers, linear output."""
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(params.weights):
        h = ad.linear(h, lift(w), lift(b))
        if i < last:
            if params.activation == "tanh":
                h = ad.tanh(h)
            else:
                h = ad.leaky_relu(h, params.slope)
    return h


def mlp_input_grad(params, x, lift=ad.constant):
    """Row gradient of a scalar-output MLP w.r.t. its input, as tape ops.

    Only valid for leaky activations (piecewise-linear slopes enter as
    constants, exact almost everywhere), scalar output dimension.  Written
    symbolically so parameter gradients can flow through the result; this is
    what the gradient penalty differentiates.
    """
    if params.activation != "leaky":
        raise ConstructionError("input gradient helper requires leaky activations")
    pre_signs = []
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(params.weights):
        h = ad.linear(h, lift(w), lift(b))
        if i < last:
            pre_signs.append(np.where(h.data >= 0.0, 1.0, params.slope))
            h = ad.leaky_relu(h, params.slope)
    out = h  # (B, 1)
    bsz = x.shape[0]
    w_last = lift(params.weights[last][0])  # (1, d_last)
    g = ad.broadcast_to(w_last, (bsz, w_last.shape[1]))
    for i in range(last - 1, -1, -1):
        g = g * ad.constant(pre_signs[i])
        g = g @ lift(params.weights[i][0])
    return out, g


@dataclass
class FreeDecoderParams:
    """Unconstrained decoder network z -> x, final layer linear."""

    net: MLPParams

    def named_arrays(self, prefix="free_decoder"):
        yield from self.net.named_arrays(prefix)


def init_free_decoder(rng, n_z, n_x, hidden=(64, 64), slope=0.2):
    return FreeDecoderParams(net=init_mlp(rng, [n_z, *hidden, n_x], slope=slope))


def decode_free(params, z):
    z2, squeeze = _as_2d(z)
    x = mlp_core(params.net, ad.constant(z2))
    return x.data[0] if squeeze else x.data


# ---------------------------------------------------------------------------
# discriminators
# ---------------------------------------------------------------------------


@dataclass
class DiscriminatorParams:
    """Per-frame scorer plus a windowed scorer with a style-prediction head.

    The window score is a plain leaky MLP; the style-prediction head reads
    the score network's last hidden activation (a shared trunk), which is
    what the information-regularization loss consumes.
    """

    frame: MLPParams  # n_x -> 1
    seq: MLPParams  # W * n_x -> 1
    pred: MLPParams  # trunk width -> W * n_s
    window: int
    n_s: int

    def named_arrays(self, prefix="disc"):
        yield from self.frame.named_arrays(f"{prefix}.frame")
        yield from self.seq.named_arrays(f"{prefix}.seq")
        yield from self.pred.named_arrays(f"{prefix}.pred")


def init_discriminators(rng, n_x, n_s, window, hidden=128, slope=0.2):
    return DiscriminatorParams(
        frame=init_mlp(rng, [n_x, hidden, hidden, 1], slope=slope),
        seq=init_mlp(rng, [window * n_x, hidden, hidden, 1], slope=slope),
        pred=init_mlp(rng, [hidden, window * n_s], slope=slope),
        window=window,
        n_s=n_s,
    )


def _mlp_capture(params, x, lift):
    """Forward pass that also returns the last hidden activation."""
    h = x
    hidden = None
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(params.weights):
        h = ad.linear(h, lift(w), lift(b))
        if i < last:
            if params.activation == "tanh":
                h = ad.tanh(h)
            else:
                h = ad.leaky_relu(h, params.slope)
            hidden = h
    return h, hidden


def discriminate_core(params, windows, lift=ad.constant):
    """windows (B, W, n_x) Tensor -> (frame (B, W), score (B,), preds (B, W, n_s))."""
    b, w, n_x = windows.shape
    flat = windows.reshape(b * w, n_x)
    frame_scores = mlp_core(params.frame, flat, lift).reshape(b, w)
    trunk_in = windows.reshape(b, w * n_x)
    score, hidden = _mlp_capture(params.seq, trunk_in, lift)
    preds = mlp_core(params.pred, hidden, lift).reshape(b, w, params.n_s)
    return frame_scores, score.reshape(b), preds


def discriminate(params, window):
    """Score one window (W, n_x): per-frame scores, window score, style preds."""
    arr = np.asarray(window, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != params.window:
        raise ad.ShapeMismatch("discriminate", arr.shape, (params.window, -1))
    f, s, p = discriminate_core(params, ad.constant(arr[None]))
    return f.data[0], float(s.data[0]), p.data[0]
