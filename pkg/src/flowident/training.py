"""Optimization backends driving the estimator toward the data distribution.

Two backends:

- ``mle``          exact pseudo-likelihood through the invertible decoder and
                   the flow inverse; the stable default and the route every
                   identifiability claim is measured on.
- ``adversarial``  non-saturating GAN losses on per-frame and windowed
                   scores with an R1 penalty on real samples and an
                   information-regularization term tying window-discriminator
                   features to the generator's style path.

The per-window negative log-likelihood is assembled on one tape:

    sum_t [ -log p(eps_hat_t) + logdet_fwd(flow at eps_hat_t) ]
  + [ -log p(content noise) + logdet_fwd(content map) ]          (once, on the
                                                     time-averaged content block)
  + gaussian score of the mean-removed content deviations at a fixed scale
  + sum_t logdet_fwd(decoder at z_hat_t)

where hats come from exact inverses of the decoder, flow, and content map.
The deviation score is a normalized density on the (T-1) per-dimension
deviation coordinates (the time-mean plus mean-removed deviations form an
orthonormal split of the frame-wise content block, so the summed squared
deviations are exactly the squared deviation coordinates).  A plain
quadratic penalty is not enough here: the decoder earns (T-1) * n_c * log(mu)
nats of log-determinant by inflating the content-deviation directions by mu
while a fixed quadratic only pushes back linearly in mu^2, so the optimum
parks the deviations at O(1) junk and blockwise separation dies.  The
normalized score pins them at DEV_SCALE instead.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from flowident import autodiff as ad
from flowident import fastpath as fp
from flowident import networks as nets
from flowident import process as pr
from flowident import transition as tr
from flowident.autodiff import Tape

# fused compiled style-likelihood kernel; the tape-composed path is kept as
# the reference implementation and exercised by equivalence tests
USE_FUSED = True

# fixed scale of the content-deviation score (standardized observation units);
# training anneals toward it from DEV_SCALE_WARM over DEV_WARM_STEPS to avoid
# slamming the decoder while the blocks are still unaligned
DEV_SCALE = 0.1
DEV_SCALE_WARM = 0.5
DEV_WARM_STEPS = 1500


def dev_scale_at(step):
    if step >= DEV_WARM_STEPS:
        return DEV_SCALE
    frac = step / DEV_WARM_STEPS
    return float(np.exp((1 - frac) * np.log(DEV_SCALE_WARM) + frac * np.log(DEV_SCALE)))

LOG_2PI = float(np.log(2.0 * np.pi))

_STREAM_INIT = 201
_STREAM_BATCH = 202
_STREAM_NOISE = 203
_STREAM_GEN = 204

VARIANTS = ("full", "no-gru", "no-flow")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class ConfigError(ValueError):
    """Invalid training or model configuration."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    n_s: int
    n_c: int
    n_x: int
    T: int
    variant: str = "full"
    hidden: int = 64
    flow_depth: int = 2
    flow_width: int = 8
    cond_hidden: int = 64
    decoder_depth: int = 3
    decoder_slope: float = 0.3
    content_depth: int = 3
    disc_hidden: int = 128
    free_decoder_hidden: tuple = (64, 64)

    @property
    def window(self):
        return min(self.T, 8)

    def validate(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.n_s < 1 or self.n_c < 1:
            raise ConfigError("n_s and n_c must be >= 1")
        return self


@dataclass
class TrainConfig:
    backend: str = "mle"
    steps: int = 20000
    batch_size: int = 32
    lr_g: float = 1e-3
    lr_d: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda_mi: float = 1.0
    r1_weight: float = 1.0
    lambda_sparse: float = 0.0
    seed: int = 0
    eval_every: int = 500
    checkpoint_every: int = 5000
    n_train: int = 2048
    flow_tol: float = 1e-10
    divergence_threshold: float = 1e6

    def validate(self):
        if self.backend not in ("mle", "adversarial"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ConfigError("learning rates must be positive")
        if self.lambda_mi < 0:
            raise ConfigError("lambda_mi must be >= 0")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        return self


@dataclass
class TrainHistory:
    """Append-only per-eval records; step indices strictly increase."""

    records: list = field(default_factory=list)
    diverged: bool = False
    aborted_at: int | None = None

    def append(self, rec):
        if self.records and rec["step"] <= self.records[-1]["step"]:
            raise ValueError("history steps must strictly increase")
        self.records.append(rec)


# ---------------------------------------------------------------------------
# model bundle
# ---------------------------------------------------------------------------


@dataclass
class FittedModel:
    model_cfg: ModelConfig
    backend: str
    ttm: tr.TTMParams
    decoder: object  # InvertibleDecoderParams (mle) or FreeDecoderParams
    disc: nets.DiscriminatorParams | None
    x_mean: np.ndarray
    x_std: np.ndarray
    step: int = 0
    saturation: tr.SaturationCounter = field(default_factory=tr.SaturationCounter)

    def named_arrays(self):
        yield from self.ttm.named_arrays("ttm")
        if isinstance(self.decoder, nets.InvertibleDecoderParams):
            yield from self.decoder.named_arrays("decoder")
        else:
            yield from self.decoder.named_arrays("free_decoder")
        if self.disc is not None:
            yield from self.disc.named_arrays("disc")

    def named_buffers(self):
        yield from self.ttm.named_buffers("ttm")
        if isinstance(self.decoder, nets.InvertibleDecoderParams):
            yield from self.decoder.named_buffers("decoder")
        yield "norm.x_mean", self.x_mean
        yield "norm.x_std", self.x_std

    def generator_arrays(self):
        yield from self.ttm.named_arrays("ttm")
        if isinstance(self.decoder, nets.InvertibleDecoderParams):
            yield from self.decoder.named_arrays("decoder")
        else:
            yield from self.decoder.named_arrays("free_decoder")

    def snapshot(self):
        return {name: arr.copy() for name, arr in self.named_arrays()}

    def restore(self, snap):
        for name, arr in self.named_arrays():
            arr[...] = snap[name]

    # -- inference ----------------------------------------------------------

    def standardize(self, x):
        return (x - self.x_mean) / self.x_std

    def destandardize(self, xs):
        return xs * self.x_std + self.x_mean

    def estimate_latents(self, X):
        """Invert the decoder on observations (exact-likelihood backend).

        X (N, T, n_x) -> (style (N, T, n_s), content (N, n_c)); the content
        estimate is the time average of the decoder's content block.
        """
        if not isinstance(self.decoder, nets.InvertibleDecoderParams):
            raise ConfigError("latent estimation requires the invertible decoder")
        n, t, n_x = X.shape
        flat = self.standardize(np.asarray(X, dtype=np.float64)).reshape(n * t, n_x)
        z, _ = nets.invert_core(self.decoder, ad.constant(flat))
        z = z.data.reshape(n, t, n_x)
        n_s = self.model_cfg.n_s
        return z[:, :, :n_s], z[:, :, n_s:].mean(axis=1)

    def generate(self, n_seq, T=None, seed=0):
        """Sample sequences from the fitted generative model.

        Returns (X (n, T, n_x) in data units, Z_s (n, T, n_s), z_c (n, n_c)).
        """
        T = T or self.model_cfg.T
        rng = np.random.default_rng([_STREAM_GEN, seed])
        n_s, n_c = self.model_cfg.n_s, self.model_cfg.n_c
        Xs, Zs, Zc = [], [], []
        for _ in range(n_seq):
            eps_c = rng.standard_normal(n_c)
            eps_s = rng.standard_normal((T, n_s))
            z_c, Z, _, _ = tr.ttm_generate(self.ttm, eps_c, eps_s, counter=self.saturation)
            lat = np.concatenate([Z, np.broadcast_to(z_c, (T, n_c))], axis=1)
            if isinstance(self.decoder, nets.InvertibleDecoderParams):
                x, _ = nets.decode_invertible(self.decoder, lat)
            else:
                x = nets.decode_free(self.decoder, lat)
            Xs.append(self.destandardize(x))
            Zs.append(Z)
            Zc.append(z_c)
        return np.stack(Xs), np.stack(Zs), np.stack(Zc)


def init_model(model_cfg, train_cfg, x_mean, x_std):
    model_cfg.validate()
    rng = np.random.default_rng([_STREAM_INIT, train_cfg.seed])
    style_kind = "gaussian" if model_cfg.variant == "no-flow" else "flow"
    cell_kind = "rnn" if model_cfg.variant == "no-gru" else "gru"
    ttm = tr.init_ttm(
        rng,
        model_cfg.n_s,
        model_cfg.n_c,
        hidden=model_cfg.hidden,
        flow_depth=model_cfg.flow_depth,
        flow_width=model_cfg.flow_width,
        cond_hidden=model_cfg.cond_hidden,
        cell_kind=cell_kind,
        style_kind=style_kind,
        content_depth=model_cfg.content_depth,
    )
    if train_cfg.backend == "mle":
        if model_cfg.n_x != model_cfg.n_s + model_cfg.n_c:
            raise ConfigError("exact-likelihood backend needs n_x == n_s + n_c")
        decoder = nets.init_invertible_decoder(
            rng, model_cfg.n_x, model_cfg.decoder_depth, model_cfg.decoder_slope
        )
        disc = None
    else:
        decoder = nets.init_free_decoder(
            rng,
            model_cfg.n_s + model_cfg.n_c,
            model_cfg.n_x,
            hidden=model_cfg.free_decoder_hidden,
        )
        disc = nets.init_discriminators(
            rng, model_cfg.n_x, model_cfg.n_s, model_cfg.window, model_cfg.disc_hidden
        )
    return FittedModel(
        model_cfg=model_cfg,
        backend=train_cfg.backend,
        ttm=ttm,
        decoder=decoder,
        disc=disc,
        x_mean=np.asarray(x_mean, dtype=np.float64),
        x_std=np.asarray(x_std, dtype=np.float64),
    )


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


class Adam:
    """Plain Adam with bias correction; updates arrays in place."""

    def __init__(self, named, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.named = list(named)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(arr) for name, arr in self.named}
        self.v = {name: np.zeros_like(arr) for name, arr in self.named}

    def step(self, grads):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, arr in self.named:
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            arr -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)


def _bind(tape, named):
    """Lift parameter arrays as tape leaves; returns (id table, leaf map)."""
    table = {}
    leaves = {}
    for name, arr in named:
        leaf = tape.leaf(arr)
        table[id(arr)] = leaf
        leaves[name] = leaf
    return table, leaves


def _lift_from(table):
    return lambda arr: table[id(arr)]


# ---------------------------------------------------------------------------
# exact-likelihood objective
# ---------------------------------------------------------------------------


def nll_core(model, x_std_batch, tape, table, counter=None, flow_tol=1e-12, dev_scale=DEV_SCALE):
    """Per-window NLL terms on an open tape; x_std_batch is standardized.

    Returns (loss Tensor (scalar), parts dict of floats).
    """
    cfg = model.model_cfg
    b, t_len, n_x = x_std_batch.shape
    n_s, n_c = cfg.n_s, cfg.n_c
    lift = _lift_from(table)

    flat = ad.constant(x_std_batch.reshape(b * t_len, n_x))
    z_flat, logdet_dec = nets.invert_core(model.decoder, flat, lift)
    nll_dec = logdet_dec.reshape(b, t_len).sum(axis=1)

    z = z_flat.reshape(b, t_len, n_x)
    zs = z[:, :, 0:n_s]
    zc_frames = z[:, :, n_s : n_s + n_c]
    zc_bar = zc_frames.mean(axis=1)
    dev = zc_frames - zc_bar.reshape(b, 1, n_c)
    dev_const = n_c * (t_len - 1) * (np.log(dev_scale) + 0.5 * LOG_2PI)
    dev_score = (dev * dev).sum(axis=2).sum(axis=1) * (0.5 / dev_scale**2) + dev_const

    eps_c, logdet_cm = nets.invert_core(model.ttm.content.stack, zc_bar, lift)
    nll_content = (
        (eps_c * eps_c).sum(axis=1) * 0.5
        + 0.5 * n_c * LOG_2PI
        + logdet_cm
        + 0.5 * n_c * np.log(t_len)  # jacobian of the mean coordinate
    )

    if model.ttm.style_kind == "flow" and fp.HAVE_FASTPATH and USE_FUSED:
        cond_tensors = [table[id(arr)] for _, arr in model.ttm.flow.named_arrays()]
        cell_tensors = [table[id(arr)] for _, arr in model.ttm.cell.named_arrays()]
        nll_style = fp.style_seq_nll(
            zs, model.ttm.flow, model.ttm.cell, cell_tensors, cond_tensors, tol=flow_tol
        )
    else:
        nll_style = _style_nll_reference(model, zs, table, flow_tol)

    per_window = nll_dec + nll_content + nll_style + dev_score
    loss = per_window.mean()
    if isinstance(model.ttm.cell, tr.GRUCellParams):
        sparse_arrays = [table[id(model.ttm.cell.w_u)], table[id(model.ttm.cell.w_r)], table[id(model.ttm.cell.w_c)]]
    else:
        sparse_arrays = [table[id(model.ttm.cell.w)]]
    lam = getattr(model, "_lambda_sparse", 0.0)
    if lam > 0.0:
        l1 = None
        for wt in sparse_arrays:
            absw = ad.leaky_relu(wt, 0.0) + ad.leaky_relu(ad.neg(wt), 0.0)
            term = absw.sum()
            l1 = term if l1 is None else l1 + term
        loss = loss + lam * l1
    parts = {
        "nll": float(per_window.mean().data),
        "nll_dec": float(nll_dec.mean().data),
        "nll_style": float(nll_style.mean().data),
        "nll_content": float(nll_content.mean().data),
        "dev_score": float(dev_score.mean().data),
        "dev_rms": float(np.sqrt((dev.data**2).mean())),
    }
    return loss, parts


def _style_nll_reference(model, zs, table, flow_tol):
    """Tape-composed style likelihood (reference path and ablation head)."""
    b, t_len, n_s = zs.shape
    cell_t = {
        name.split(".")[-1]: table[id(arr)]
        for name, arr in model.ttm.cell.named_arrays()
    }
    h = ad.constant(np.zeros((b, model.ttm.hidden)))
    nll_style = None
    eye = np.eye(n_s)
    for ti in range(t_len):
        zs_t = zs[:, ti]
        if model.ttm.style_kind == "flow":
            eps_t, ld_t = tr.flow_inverse_core(
                model.ttm.flow, zs_t, h, tol=flow_tol, lift=_lift_from(table)
            )
            nll_t = (eps_t * eps_t).sum(axis=1) * 0.5 + 0.5 * n_s * LOG_2PI + ld_t
        else:
            gauss_table = {
                id(arr): table[id(arr)] for _, arr in model.ttm.gauss.named_arrays()
            }
            m, a = tr.gaussian_head_core(model.ttm.gauss, gauss_table, h)
            r = (zs_t - m).reshape(b, n_s, 1)
            eps_t = ad.apply_primitive(
                "matmul", (ad.transpose(a, (0, 2, 1)), r)
            ).reshape(b, n_s)
            diag = (a * ad.constant(eye)).sum(axis=-1)
            nll_t = (
                (eps_t * eps_t).sum(axis=1) * 0.5
                + 0.5 * n_s * LOG_2PI
                - ad.log(diag).sum(axis=1)
            )
        nll_style = nll_t if nll_style is None else nll_style + nll_t
        h = tr.cell_step_core(model.ttm.cell, cell_t, h, eps_t)
    return nll_style


def nll_objective(model, X_batch, flow_tol=1e-12, lambda_sparse=0.0, dev_scale=DEV_SCALE):
    """Mean per-window NLL of raw observation windows under the model.

    Returns (loss Tensor, tape, parts, leaves) where ``leaves`` maps
    parameter names to their tape leaves.  Windows whose flow inverse
    saturates are skipped and counted; more than 1% of a batch saturating is
    an error.
    """
    X_batch = np.asarray(X_batch, dtype=np.float64)
    xs = model.standardize(X_batch)
    model._lambda_sparse = lambda_sparse
    try:
        with Tape() as tape:
            table, leaves = _bind(tape, model.generator_arrays())
            loss, parts = nll_core(
                model, xs, tape, table, counter=model.saturation, flow_tol=flow_tol,
                dev_scale=dev_scale,
            )
        return loss, tape, parts, leaves
    except tr.SaturationError:
        keep = []
        for i in range(xs.shape[0]):
            try:
                with Tape() as probe:
                    t2, _ = _bind(probe, model.generator_arrays())
                    nll_core(
                        model, xs[i : i + 1], probe, t2, flow_tol=flow_tol,
                        dev_scale=dev_scale,
                    )
                keep.append(i)
            except tr.SaturationError:
                continue
        skipped = xs.shape[0] - len(keep)
        model.saturation.add(skipped)
        if skipped > max(1, 0.01 * xs.shape[0]) or not keep:
            raise tr.SaturationError(
                f"{skipped} of {xs.shape[0]} windows saturated the flow inverse"
            )
        with Tape() as tape:
            table, leaves = _bind(tape, model.generator_arrays())
            loss, parts = nll_core(
                model, xs[keep], tape, table, counter=model.saturation, flow_tol=flow_tol,
                dev_scale=dev_scale,
            )
        parts["skipped"] = skipped
        return loss, tape, parts, leaves


# ---------------------------------------------------------------------------
# adversarial objective
# ---------------------------------------------------------------------------


def _generate_windows_core(model, table, eps_c, eps_s, counter=None):
    """Tape path noise -> standardized observation windows.

    eps_c (B, n_c), eps_s (B, W, n_s) Tensors; returns (windows (B, W, n_x),
    style (B, W, n_s)).
    """
    cfg = model.model_cfg
    b, w, n_s = eps_s.shape
    lift = _lift_from(table)
    z_c, _ = nets.decode_core(model.ttm.content.stack, eps_c, lift)
    cell_t = {
        name.split(".")[-1]: table[id(arr)]
        for name, arr in model.ttm.cell.named_arrays()
    }
    h = ad.constant(np.zeros((b, model.ttm.hidden)))
    zs_list = []
    for ti in range(w):
        e_t = eps_s[:, ti]
        z_t, _ = tr.flow_forward_core(model.ttm.flow, e_t, h, lift=lift, counter=counter)
        zs_list.append(z_t.reshape(b, 1, n_s))
        h = tr.cell_step_core(model.ttm.cell, cell_t, h, e_t)
    zs = ad.concat(zs_list, axis=1)
    lat = ad.concat([zs, ad.broadcast_to(z_c.reshape(b, 1, cfg.n_c), (b, w, cfg.n_c))], axis=2)
    lat_flat = lat.reshape(b * w, n_s + cfg.n_c)
    if isinstance(model.decoder, nets.InvertibleDecoderParams):
        x_flat, _ = nets.decode_core(model.decoder, lat_flat, lift)
    else:
        x_flat = nets.mlp_core(model.decoder.net, lat_flat, lift)
    return x_flat.reshape(b, w, cfg.n_x), zs


def _softplus_mean(x):
    return ad.softplus(x).mean()


def _r1_penalty(mlp, x_flat, lift):
    _, g = nets.mlp_input_grad(mlp, x_flat, lift)
    return (g * g).sum(axis=1).mean()


def adversarial_step(model, adam_g, adam_d, real_windows_std, rng, cfg):
    """One discriminator update then one generator update.

    Both updates share the same noise draw; the information term (squared
    error between the window network's style predictions and the generator's
    style path) trains the prediction head on the discriminator side and the
    generator on its side.
    """
    bsz = real_windows_std.shape[0]
    w = model.model_cfg.window
    n_s, n_c = model.model_cfg.n_s, model.model_cfg.n_c
    eps_c = rng.standard_normal((bsz, n_c))
    eps_s = rng.standard_normal((bsz, w, n_s))

    # discriminator pass: generator constants, disc leaves
    with Tape() as tape_d:
        table_d, _ = _bind(tape_d, model.disc.named_arrays("disc"))
        lift_d = _lift_from(table_d)
        gen_table = {id(arr): ad.constant(arr) for _, arr in model.generator_arrays()}
        fake, fake_zs = _generate_windows_core(
            model, gen_table, ad.constant(eps_c), ad.constant(eps_s), counter=model.saturation
        )
        fake_c = ad.constant(fake.data)
        real = ad.constant(real_windows_std)
        rf, rs, _ = nets.discriminate_core(model.disc, real, lift_d)
        ff, fs, fpred = nets.discriminate_core(model.disc, fake_c, lift_d)
        d_gan = (
            _softplus_mean(ad.neg(rf.reshape(bsz * w)))
            + _softplus_mean(ff.reshape(bsz * w))
            + _softplus_mean(ad.neg(rs))
            + _softplus_mean(fs)
        )
        r1 = _r1_penalty(
            model.disc.frame, real.reshape(bsz * w, model.model_cfg.n_x), lift_d
        )
        r1 = r1 + _r1_penalty(
            model.disc.seq, real.reshape(bsz, w * model.model_cfg.n_x), lift_d
        )
        mi = fpred - ad.constant(fake_zs.data)
        mi = (mi * mi).mean()
        d_loss = d_gan + 0.5 * cfg.r1_weight * r1 + cfg.lambda_mi * mi
    if not np.isfinite(d_loss.data):
        raise TrainingDiverged("non-finite discriminator loss", {"loss": float(d_loss.data)})
    grads = tape_d.backward(d_loss)
    named_d = dict(model.disc.named_arrays("disc"))
    adam_d.step({n: tape_d.grad(grads, table_d[id(a)]) for n, a in named_d.items()})

    # generator pass: disc constants, generator leaves
    with Tape() as tape_g:
        table_g, _ = _bind(tape_g, model.generator_arrays())
        fake, fake_zs = _generate_windows_core(
            model, table_g, ad.constant(eps_c), ad.constant(eps_s), counter=model.saturation
        )
        ff, fs, fpred = nets.discriminate_core(model.disc, fake)
        g_gan = _softplus_mean(ad.neg(ff.reshape(bsz * w))) + _softplus_mean(ad.neg(fs))
        diff = fpred - fake_zs
        mi_g = (diff * diff).mean()
        g_loss = g_gan + cfg.lambda_mi * mi_g
    if not np.isfinite(g_loss.data):
        raise TrainingDiverged("non-finite generator loss", {"loss": float(g_loss.data)})
    grads = tape_g.backward(g_loss)
    named_g = dict(model.generator_arrays())
    adam_g.step({n: tape_g.grad(grads, table_g[id(a)]) for n, a in named_g.items()})

    return {
        "d_loss": float(d_loss.data),
        "g_loss": float(g_loss.data),
        "r1": float(r1.data),
        "mi_mse": float(mi_g.data),
    }


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def train(
    spec,
    cfg,
    model_cfg=None,
    dataset=None,
    quiet=True,
    metrics_cb=None,
    checkpoint_cb=None,
):
    """Fit a model to data drawn from (or supplied for) a process spec.

    Returns (FittedModel, TrainHistory).  Divergence restores the last
    checkpointed parameters and flags the history instead of raising.
    """
    cfg.validate()
    if model_cfg is None:
        model_cfg = ModelConfig(n_s=spec.n_s, n_c=spec.n_c, n_x=spec.n_x, T=spec.T)
    model_cfg.validate()
    if dataset is None:
        dataset = pr.sample_dataset(spec, cfg.n_train)
    X = dataset.X
    x_mean = X.reshape(-1, X.shape[-1]).mean(axis=0)
    x_std = np.maximum(X.reshape(-1, X.shape[-1]).std(axis=0), 1e-8)
    model = init_model(model_cfg, cfg, x_mean, x_std)

    named_g = list(model.generator_arrays())
    adam_g = Adam(named_g, cfg.lr_g, cfg.beta1, cfg.beta2, cfg.adam_eps)
    adam_d = None
    if cfg.backend == "adversarial":
        adam_d = Adam(
            list(model.disc.named_arrays("disc")), cfg.lr_d, cfg.beta1, cfg.beta2, cfg.adam_eps
        )

    heldout = pr.sample_dataset(spec, min(256, max(cfg.n_train // 8, 64)), base_offset=10**6)
    rng_batch = np.random.default_rng([_STREAM_BATCH, cfg.seed])
    rng_noise = np.random.default_rng([_STREAM_NOISE, cfg.seed])

    history = TrainHistory()
    last_good = model.snapshot()
    skipped_steps = 0
    t_start = time.time()
    window = model_cfg.window

    def real_windows(idx):
        return model.standardize(X[idx][:, :window])

    for step in range(1, cfg.steps + 1):
        idx = rng_batch.integers(0, dataset.n, size=cfg.batch_size)
        if cfg.backend == "mle":
            try:
                loss_t, tape, parts, leaves = nll_objective(
                    model, X[idx], flow_tol=cfg.flow_tol,
                    lambda_sparse=cfg.lambda_sparse, dev_scale=dev_scale_at(step),
                )
                skipped_steps = 0
            except tr.SaturationError:
                skipped_steps += 1
                model.saturation.add(cfg.batch_size)
                if skipped_steps > 50:
                    model.restore(last_good)
                    history.diverged = True
                    history.aborted_at = step
                    break
                continue
            loss_val = float(loss_t.data)
            if not np.isfinite(loss_val) or loss_val > cfg.divergence_threshold:
                model.restore(last_good)
                history.diverged = True
                history.aborted_at = step
                break
            grads = tape.backward(loss_t)
            adam_g.step({n: tape.grad(grads, leaf) for n, leaf in leaves.items()})
            losses = {"loss": loss_val, **parts}
        else:
            try:
                losses = adversarial_step(
                    model, adam_g, adam_d, real_windows(idx), rng_noise, cfg
                )
            except TrainingDiverged:
                model.restore(last_good)
                history.diverged = True
                history.aborted_at = step
                break
            loss_val = losses["g_loss"]

        model.step = step
        if step % cfg.eval_every == 0 or step == cfg.steps:
            rec = {
                "step": step,
                "wall_clock": time.time() - t_start,
                "saturation": model.saturation.count,
                **losses,
            }
            if cfg.backend == "mle":
                rec["heldout_nll"] = heldout_nll(model, heldout, cfg)
            rec.update(_quick_ground_truth_metrics(model, heldout))
            history.append(rec)
            if metrics_cb:
                metrics_cb(rec)
            if not quiet:
                print(
                    f"step {step}: "
                    + " ".join(f"{k}={v:.4f}" for k, v in rec.items() if isinstance(v, float))
                )
            last_good = model.snapshot()
        if checkpoint_cb and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            checkpoint_cb(model, step)

    if checkpoint_cb:
        checkpoint_cb(model, model.step)
    return model, history


def heldout_nll(model, heldout, cfg):
    total = 0.0
    count = 0
    bs = 128
    for i in range(0, heldout.n, bs):
        loss_t, _, _, _ = nll_objective(model, heldout.X[i : i + bs], flow_tol=cfg.flow_tol)
        total += float(loss_t.data) * min(bs, heldout.n - i)
        count += min(bs, heldout.n - i)
    return total / count


def _quick_ground_truth_metrics(model, heldout):
    if not isinstance(model.decoder, nets.InvertibleDecoderParams):
        return {}
    from flowident import evaluation as ev

    zs_est, zc_est = model.estimate_latents(heldout.X)
    n = heldout.Z_s.shape[0] * heldout.Z_s.shape[1]
    out = {"mcc": ev.mcc(heldout.Z_s.reshape(n, -1), zs_est.reshape(n, -1)).mcc_style}
    if heldout.n >= 50:
        r2 = ev.blockwise_r2(zc_est, heldout.z_c, seed=0)
        out["r2_content"] = float(np.mean(r2))
    return out
