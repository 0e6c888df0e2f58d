"""Seeded ground-truth simulator for latent sequence processes, plus
numeric audits of the identifiability assumptions the estimators rely on.

The simulated process draws a static content vector and a style-dynamics
sequence, where each style component evolves through a per-component
transition driven by the previous step and fresh independent noise, and the
observation is a (possibly invertible) leaky-MLP mixture of both blocks.

Four transition families ship:

- ``heteroscedastic-gaussian``  mean and log-scale are one-hidden-layer
  networks of the parents; the default positive control: its conditional
  log-density has rich second- and third-order cross derivatives.
- ``linear-gaussian-constvar``  certified negative control: the third-order
  cross-derivative block vanishes identically.
- ``post-nonlinear``            invertible scalar warp of a constant-scale
  Gaussian step; cross-derivative rows stay inside an n_s-dim subspace.
- ``iid``                       no parent dependence at all.

Everything is a pure function of (spec, seed), so trajectories can be drawn
in parallel and stored in caller-fixed order.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))

FAMILIES = (
    "heteroscedastic-gaussian",
    "linear-gaussian-constvar",
    "post-nonlinear",
    "iid",
)

CONTENT_LAWS = ("standard-normal", "uniform")

# rng stream tags; every consumer mixes one of these into its SeedSequence
# so seeds never collide across purposes
_STREAM_TRAJ = 101
_STREAM_MIX = 102
_STREAM_PARAMS = 103
_STREAM_PROBE = 104
_STREAM_REG = 105


class SpecError(ValueError):
    """Invalid process specification."""


class SimulationError(RuntimeError):
    """Simulator could not satisfy a construction constraint."""


def _rng(*keys):
    return np.random.default_rng(list(keys))


# ---------------------------------------------------------------------------
# specification types
# ---------------------------------------------------------------------------


@dataclass
class TransitionSpec:
    """Family tag, per-component parent indices and coefficient arrays."""

    family: str
    parent_map: list
    parameters: dict

    def validate(self, n_s):
        if self.family not in FAMILIES:
            raise SpecError(f"unknown transition family {self.family!r}")
        if len(self.parent_map) != n_s:
            raise SpecError("parent_map must list parents for every component")
        for parents in self.parent_map:
            for p in parents:
                if not (0 <= p < n_s):
                    raise SpecError(f"parent index {p} out of range")


@dataclass
class MixingSpec:
    """Observation network: leaky MLP, orthogonal-then-perturbed weights."""

    depth: int
    widths: list
    activation: float
    weight_init: dict
    invertible: bool

    def validate(self, n_in, n_x):
        if self.depth != len(self.widths):
            raise SpecError("mixing depth must equal len(widths)")
        if self.widths[-1] != n_x:
            raise SpecError("mixing widths must end at n_x")
        if not (0.0 < self.activation < 1.0):
            raise SpecError("mixing activation slope must lie in (0,1)")
        if self.invertible and any(w != n_in for w in self.widths):
            raise SpecError("invertible mixing forces square layers")


@dataclass
class ProcessSpec:
    """Complete description of a ground-truth generative process."""

    n_s: int
    n_c: int
    n_x: int
    T: int
    transition: TransitionSpec
    content_law: str
    mixing: MixingSpec
    seed: int
    _mix_cache: list = field(default=None, repr=False, compare=False)

    def validate(self):
        if self.n_s < 1:
            raise SpecError("n_s must be >= 1")
        if self.n_c < 0:
            raise SpecError("n_c must be >= 0")
        if self.T < 2:
            raise SpecError("T must be >= 2")
        if self.n_x < self.n_s + self.n_c:
            raise SpecError("n_x must be at least n_s + n_c")
        if self.content_law not in CONTENT_LAWS:
            raise SpecError(f"unknown content law {self.content_law!r}")
        self.transition.validate(self.n_s)
        self.mixing.validate(self.n_s + self.n_c, self.n_x)
        return self

    # -- JSON (schema version 1, field names as in the data model) ---------

    def to_json_dict(self):
        return {
            "schema_version": 1,
            "n_s": self.n_s,
            "n_c": self.n_c,
            "n_x": self.n_x,
            "T": self.T,
            "transition": {
                "family": self.transition.family,
                "parent_map": [list(map(int, p)) for p in self.transition.parent_map],
                "parameters": _params_to_jsonable(self.transition.parameters),
            },
            "content_law": self.content_law,
            "mixing": {
                "depth": self.mixing.depth,
                "widths": list(map(int, self.mixing.widths)),
                "activation": self.mixing.activation,
                "weight_init": dict(self.mixing.weight_init),
                "invertible": self.mixing.invertible,
            },
            "seed": int(self.seed),
        }

    @classmethod
    def from_json_dict(cls, doc):
        if doc.get("schema_version") != 1:
            raise SpecError(f"unsupported schema_version {doc.get('schema_version')!r}")
        tr = doc["transition"]
        spec = cls(
            n_s=int(doc["n_s"]),
            n_c=int(doc["n_c"]),
            n_x=int(doc["n_x"]),
            T=int(doc["T"]),
            transition=TransitionSpec(
                family=tr["family"],
                parent_map=[list(map(int, p)) for p in tr["parent_map"]],
                parameters=_params_from_jsonable(tr.get("parameters")),
            ),
            content_law=doc["content_law"],
            mixing=MixingSpec(
                depth=int(doc["mixing"]["depth"]),
                widths=list(map(int, doc["mixing"]["widths"])),
                activation=float(doc["mixing"]["activation"]),
                weight_init=dict(doc["mixing"]["weight_init"]),
                invertible=bool(doc["mixing"]["invertible"]),
            ),
            seed=int(doc["seed"]),
        )
        if spec.transition.parameters is None:
            spec.transition.parameters = default_transition_parameters(
                spec.transition.family, spec.transition.parent_map, spec.seed
            )
        return spec.validate()


def _params_to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _params_to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_params_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def _params_from_jsonable(obj):
    if obj is None:
        return None
    if isinstance(obj, dict):
        return {k: _params_from_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, list):
        if obj and all(isinstance(v, (int, float)) for v in obj):
            return np.asarray(obj, dtype=np.float64)
        if obj and all(
            isinstance(v, list) and all(isinstance(u, (int, float)) for u in v)
            for v in obj
        ):
            return np.asarray(obj, dtype=np.float64)
        return [_params_from_jsonable(v) for v in obj]
    return obj


# ---------------------------------------------------------------------------
# transition parameter generation
# ---------------------------------------------------------------------------

_HIDDEN = 16


def _gen_net(rng, n_in, out_scale, bias_out=0.0):
    """One-hidden-layer net coefficients with bounded output amplitude."""
    return {
        "w1": rng.normal(size=(_HIDDEN, n_in)) * (1.6 / np.sqrt(max(n_in, 1))),
        "b1": rng.normal(size=_HIDDEN) * 0.4,
        "w2": rng.normal(size=_HIDDEN) * (out_scale / np.sqrt(_HIDDEN)),
        "b2": float(bias_out),
    }


def default_transition_parameters(family, parent_map, seed):
    """Deterministic family parameters used when a config omits them."""
    n_s = len(parent_map)
    rng = _rng(_STREAM_PARAMS, seed)
    if family == "heteroscedastic-gaussian":
        comps = []
        for i in range(n_s):
            mu = _gen_net(rng, len(parent_map[i]), out_scale=0.9)
            sg = _gen_net(rng, len(parent_map[i]), out_scale=1.0, bias_out=np.log(0.45))
            comps.append({"mu": mu, "sg": sg})
        return {"act": "tanh", "components": comps}
    if family == "linear-gaussian-constvar":
        a = rng.normal(size=(n_s, n_s)) / np.sqrt(n_s)
        mask = np.zeros((n_s, n_s))
        for i, parents in enumerate(parent_map):
            mask[i, parents] = 1.0
        a = a * mask
        rho = max(np.abs(np.linalg.eigvals(a)))
        if rho > 0:
            a *= 0.7 / rho
        return {"A": a, "sigma": np.full(n_s, 0.6)}
    if family == "post-nonlinear":
        comps = [
            {"mu": _gen_net(rng, len(parent_map[i]), out_scale=0.9)} for i in range(n_s)
        ]
        return {
            "act": "tanh",
            "components": comps,
            "sigma": np.full(n_s, 0.6),
            "pnl_slope": np.full(n_s, 0.7),
        }
    if family == "iid":
        return {"scale": np.ones(n_s)}
    raise SpecError(f"unknown transition family {family!r}")


def full_parent_map(n_s):
    return [list(range(n_s)) for _ in range(n_s)]


# ---------------------------------------------------------------------------
# one-hidden-layer nets (values and input gradients)
# ---------------------------------------------------------------------------


def _act_fns(tag):
    if tag == "tanh":
        return np.tanh, lambda u: 1.0 - np.tanh(u) ** 2
    if tag == "sin":
        return np.sin, np.cos
    raise SpecError(f"unknown activation {tag!r}")


def _net_value(net, p, act):
    u = net["w1"] @ p + net["b1"]
    return net["b2"] + net["w2"] @ act(u)


def _net_value_grad(net, p, act, dact):
    u = net["w1"] @ p + net["b1"]
    val = net["b2"] + net["w2"] @ act(u)
    grad = (net["w2"] * dact(u)) @ net["w1"]
    return val, grad


def _hetero_mu_sigma(params, parent_map, z_prev):
    act, _ = _act_fns(params["act"])
    n = len(parent_map)
    mu = np.empty(n)
    sigma = np.empty(n)
    for i, comp in enumerate(params["components"]):
        p = z_prev[parent_map[i]]
        mu[i] = _net_value(comp["mu"], p, act)
        sigma[i] = np.exp(_net_value(comp["sg"], p, act))
    return mu, sigma


def _hetero_mu_sigma_grads(params, parent_map, z_prev):
    act, dact = _act_fns(params["act"])
    n = len(parent_map)
    mu = np.empty(n)
    sigma = np.empty(n)
    dmu = np.zeros((n, n))
    dsg = np.zeros((n, n))
    for i, comp in enumerate(params["components"]):
        idx = parent_map[i]
        p = z_prev[idx]
        mu[i], gmu = _net_value_grad(comp["mu"], p, act, dact)
        s_log, gsg = _net_value_grad(comp["sg"], p, act, dact)
        sigma[i] = np.exp(s_log)
        dmu[i, idx] = gmu
        dsg[i, idx] = sigma[i] * gsg
    return mu, sigma, dmu, dsg


def _pnl_mu(params, parent_map, z_prev):
    act, _ = _act_fns(params["act"])
    return np.array(
        [
            _net_value(comp["mu"], z_prev[parent_map[i]], act)
            for i, comp in enumerate(params["components"])
        ]
    )


def _pnl_mu_grads(params, parent_map, z_prev):
    act, dact = _act_fns(params["act"])
    n = len(parent_map)
    mu = np.empty(n)
    dmu = np.zeros((n, n))
    for i, comp in enumerate(params["components"]):
        idx = parent_map[i]
        mu[i], g = _net_value_grad(comp["mu"], z_prev[idx], act, dact)
        dmu[i, idx] = g
    return mu, dmu


def _pnl_forward(u, a):
    return u + a * np.tanh(u)


def _pnl_inverse(z, a):
    # q(u) = u + a tanh(u) is strictly increasing with |q(u) - u| <= a,
    # so [z - a - 1e-9, z + a + 1e-9] always brackets the root
    lo = z - a - 1e-9
    hi = z + a + 1e-9
    for _ in range(90):
        mid = 0.5 * (lo + hi)
        take_hi = _pnl_forward(mid, a) < z
        lo = np.where(take_hi, mid, lo)
        hi = np.where(take_hi, hi, mid)
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# family operations: step / log density / derivative blocks
# ---------------------------------------------------------------------------


def transition_step(spec, z_prev, eps):
    """Apply one transition step; vectorized over leading axes of eps."""
    fam = spec.transition.family
    params = spec.transition.parameters
    pm = spec.transition.parent_map
    if fam == "heteroscedastic-gaussian":
        mu, sigma = _hetero_mu_sigma(params, pm, z_prev)
        return mu + sigma * eps
    if fam == "linear-gaussian-constvar":
        return params["A"] @ z_prev + params["sigma"] * eps
    if fam == "post-nonlinear":
        mu = _pnl_mu(params, pm, z_prev)
        return _pnl_forward(mu + params["sigma"] * eps, params["pnl_slope"])
    if fam == "iid":
        return params["scale"] * eps
    raise SpecError(f"unknown transition family {fam!r}")


def _gauss_logpdf(x, mu, sigma):
    return -0.5 * LOG_2PI - np.log(sigma) - 0.5 * ((x - mu) / sigma) ** 2


def transition_log_density(spec, z_t, z_prev):
    """Per-component conditional log-densities log p(z_{t,i} | z_{t-1}).

    Components are conditionally independent, so the sum over the returned
    vector is the joint conditional log-density.
    """
    from flowident.autodiff import DomainError

    fam = spec.transition.family
    params = spec.transition.parameters
    pm = spec.transition.parent_map
    z_t = np.asarray(z_t, dtype=np.float64)
    z_prev = np.asarray(z_prev, dtype=np.float64)
    if fam == "heteroscedastic-gaussian":
        mu, sigma = _hetero_mu_sigma(params, pm, z_prev)
        return _gauss_logpdf(z_t, mu, sigma)
    if fam == "linear-gaussian-constvar":
        return _gauss_logpdf(z_t, params["A"] @ z_prev, params["sigma"])
    if fam == "post-nonlinear":
        a = params["pnl_slope"]
        mu = _pnl_mu(params, pm, z_prev)
        u = _pnl_inverse(z_t, a)
        qp = 1.0 + a * (1.0 - np.tanh(u) ** 2)
        return _gauss_logpdf(u, mu, params["sigma"]) - np.log(qp)
    if fam == "iid":
        scale = params["scale"]
        if np.any(scale <= 0.0):
            raise DomainError("iid family with point-mass noise has no density")
        return _gauss_logpdf(z_t, 0.0, scale)
    raise SpecError(f"unknown transition family {fam!r}")


def transition_dlogp_dz(spec, z_t, z_prev):
    """Analytic first derivative of each eta_i w.r.t. z_{t,i}."""
    fam = spec.transition.family
    params = spec.transition.parameters
    pm = spec.transition.parent_map
    if fam == "heteroscedastic-gaussian":
        mu, sigma = _hetero_mu_sigma(params, pm, z_prev)
        return -(z_t - mu) / sigma**2
    if fam == "linear-gaussian-constvar":
        return -(z_t - params["A"] @ z_prev) / params["sigma"] ** 2
    if fam == "post-nonlinear":
        a = params["pnl_slope"]
        mu = _pnl_mu(params, pm, z_prev)
        u = _pnl_inverse(z_t, a)
        t = np.tanh(u)
        qp = 1.0 + a * (1.0 - t**2)
        qpp = -2.0 * a * t * (1.0 - t**2)
        return -(u - mu) / (params["sigma"] ** 2 * qp) - qpp / qp**2
    if fam == "iid":
        return -z_t / params["scale"] ** 2
    raise SpecError(f"unknown transition family {fam!r}")


def transition_d2logp_dz2(spec, z_t, z_prev):
    """Analytic second derivative of each eta_i w.r.t. z_{t,i}."""
    fam = spec.transition.family
    params = spec.transition.parameters
    pm = spec.transition.parent_map
    if fam == "heteroscedastic-gaussian":
        _, sigma = _hetero_mu_sigma(params, pm, z_prev)
        return -1.0 / sigma**2
    if fam == "linear-gaussian-constvar":
        return -1.0 / params["sigma"] ** 2 * np.ones_like(z_t)
    if fam == "post-nonlinear":
        a = params["pnl_slope"]
        sigma = params["sigma"]
        mu = _pnl_mu(params, pm, z_prev)
        u = _pnl_inverse(z_t, a)
        t = np.tanh(u)
        qp = 1.0 + a * (1.0 - t**2)
        qpp = -2.0 * a * t * (1.0 - t**2)
        qppp = -2.0 * a * (1.0 - t**2) * (1.0 - 3.0 * t**2)
        term_gauss = (-1.0 / sigma**2) / qp**2 + (u - mu) * qpp / (sigma**2 * qp**3)
        term_warp = -qppp / qp**3 + 2.0 * qpp**2 / qp**4
        return term_gauss + term_warp
    if fam == "iid":
        return -1.0 / params["scale"] ** 2 * np.ones_like(z_t)
    raise SpecError(f"unknown transition family {fam!r}")


def transition_cross_derivs(spec, z_t, z_prev, fd_step=1e-4):
    """Cross-derivative blocks of the conditional log-density.

    Returns (d2, d3) with d2[i, l] the mixed second derivative of eta_i in
    z_{t,i} and z_{t-1,l}, and d3[i, l] the mixed third derivative (twice in
    z_{t,i}).  Analytic for the shipped families; the central-difference
    fallback over the analytic lower-order derivatives (step ``fd_step``)
    kicks in for families without closed forms.
    """
    fam = spec.transition.family
    params = spec.transition.parameters
    pm = spec.transition.parent_map
    n = spec.n_s
    if fam == "heteroscedastic-gaussian":
        mu, sigma, dmu, dsg = _hetero_mu_sigma_grads(params, pm, z_prev)
        r = (z_t - mu) / sigma**2
        d2 = dmu / sigma[:, None] ** 2 + 2.0 * r[:, None] * dsg / sigma[:, None]
        d3 = 2.0 * dsg / sigma[:, None] ** 3
        return d2, d3
    if fam == "linear-gaussian-constvar":
        d2 = params["A"] / params["sigma"][:, None] ** 2
        return d2, np.zeros((n, n))
    if fam == "post-nonlinear":
        a = params["pnl_slope"]
        _, dmu = _pnl_mu_grads(params, pm, z_prev)
        u = _pnl_inverse(np.asarray(z_t, dtype=np.float64), a)
        t = np.tanh(u)
        qp = 1.0 + a * (1.0 - t**2)
        qpp = -2.0 * a * t * (1.0 - t**2)
        inv_p = 1.0 / qp
        inv_pp = -qpp / qp**3
        d2 = dmu / params["sigma"][:, None] ** 2 * inv_p[:, None]
        d3 = dmu / params["sigma"][:, None] ** 2 * inv_pp[:, None]
        return d2, d3
    if fam == "iid":
        return np.zeros((n, n)), np.zeros((n, n))
    return cross_derivs_fd(spec, z_t, z_prev, fd_step)


def cross_derivs_fd(spec, z_t, z_prev, step=1e-4):
    """Central differences (over z_{t-1,l}) of the analytic z-derivatives."""
    n = spec.n_s
    d2 = np.zeros((n, n))
    d3 = np.zeros((n, n))
    for l in range(n):
        zp = np.array(z_prev, dtype=np.float64)
        zp[l] += step
        up1 = transition_dlogp_dz(spec, z_t, zp)
        up2 = transition_d2logp_dz2(spec, z_t, zp)
        zp[l] -= 2.0 * step
        dn1 = transition_dlogp_dz(spec, z_t, zp)
        dn2 = transition_d2logp_dz2(spec, z_t, zp)
        d2[:, l] = (up1 - dn1) / (2.0 * step)
        d3[:, l] = (up2 - dn2) / (2.0 * step)
    return d2, d3


# ---------------------------------------------------------------------------
# mixing network
# ---------------------------------------------------------------------------


def mixing_weights(spec):
    """Materialize the mixing layers deterministically from spec.seed.

    Each weight starts orthogonal (semi-orthogonal when rectangular), gets a
    Gaussian perturbation, and is redrawn until the condition-number cap and
    (for invertible specs) the minimum-singular-value floor hold; ten failed
    attempts raise SimulationError.
    """
    if spec._mix_cache is not None:
        return spec._mix_cache
    rng = _rng(_STREAM_MIX, spec.seed)
    n_in = spec.n_s + spec.n_c
    dims = [n_in] + list(spec.mixing.widths)
    perturb = float(spec.mixing.weight_init.get("perturb_scale", 0.2))
    cond_cap = float(spec.mixing.weight_init.get("cond_cap", 8.0))
    layers = []
    for li in range(spec.mixing.depth):
        d_out, d_in = dims[li + 1], dims[li]
        ok = False
        for _ in range(10):
            big = max(d_out, d_in)
            q, _ = np.linalg.qr(rng.normal(size=(big, big)))
            w = q[:d_out, :d_in] + perturb * rng.normal(size=(d_out, d_in)) / np.sqrt(d_in)
            svals = np.linalg.svd(w, compute_uv=False)
            if spec.mixing.invertible and svals[-1] <= 1e-3:
                continue
            if svals[-1] > 0 and svals[0] / svals[-1] > cond_cap:
                continue
            ok = True
            break
        if not ok:
            raise SimulationError(
                f"mixing layer {li}: no acceptable weights after 10 attempts"
            )
        layers.append(w)
    spec._mix_cache = layers
    return layers


def apply_mixing(spec, z):
    """Map latent rows (..., n_s + n_c) to observations (..., n_x)."""
    slope = spec.mixing.activation
    h = np.asarray(z, dtype=np.float64)
    weights = mixing_weights(spec)
    for li, w in enumerate(weights):
        h = h @ w.T
        if li < len(weights) - 1:
            h = np.where(h >= 0.0, h, slope * h)
    return h


def invert_mixing(spec, x):
    """Exact inverse of an invertible mixing network (oracle utility)."""
    if not spec.mixing.invertible:
        raise SpecError("mixing is not invertible")
    slope = spec.mixing.activation
    weights = mixing_weights(spec)
    h = np.asarray(x, dtype=np.float64)
    for li in range(len(weights) - 1, -1, -1):
        if li < len(weights) - 1:
            h = np.where(h >= 0.0, h, h / slope)
        h = np.linalg.solve(weights[li], h.T).T if h.ndim > 1 else np.linalg.solve(weights[li], h)
    return h


def mixing_jacobian(spec, z):
    """Analytic Jacobian of the mixing network at one latent point."""
    slope = spec.mixing.activation
    weights = mixing_weights(spec)
    h = np.asarray(z, dtype=np.float64)
    jac = np.eye(h.shape[-1])
    for li, w in enumerate(weights):
        h = h @ w.T
        jac = w @ jac
        if li < len(weights) - 1:
            s = np.where(h >= 0.0, 1.0, slope)
            jac = s[:, None] * jac
            h = np.where(h >= 0.0, h, slope * h)
    return jac


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """One sampled sequence with the noise draws that produced it."""

    Z_s: np.ndarray  # (T, n_s)
    z_c: np.ndarray  # (n_c,)
    X: np.ndarray  # (T, n_x)
    E_s: np.ndarray  # (T, n_s)
    e_c: np.ndarray  # (n_c,)


def sample_trajectory(spec, seed_offset):
    """Draw one trajectory; bit-identical for equal (spec, seed, offset).

    Row 0 of E_s holds the draw behind the initial state: z_1 is standard
    normal for parent-driven families (a stationary stand-in) and
    scale * noise for the iid family.
    """
    rng = _rng(_STREAM_TRAJ, spec.seed, seed_offset)
    if spec.content_law == "standard-normal":
        e_c = rng.standard_normal(spec.n_c)
    else:
        e_c = rng.uniform(-1.0, 1.0, size=spec.n_c)
    z_c = e_c.copy()  # content map of the true process is the identity
    E_s = rng.standard_normal((spec.T, spec.n_s))
    Z_s = np.empty((spec.T, spec.n_s))
    if spec.transition.family == "iid":
        Z_s[0] = spec.transition.parameters["scale"] * E_s[0]
    else:
        Z_s[0] = E_s[0]
    for t in range(1, spec.T):
        Z_s[t] = transition_step(spec, Z_s[t - 1], E_s[t])
    X = apply_mixing(spec, np.concatenate([Z_s, np.broadcast_to(z_c, (spec.T, spec.n_c))], axis=1))
    return Trajectory(Z_s=Z_s, z_c=z_c, X=X, E_s=E_s, e_c=e_c)


def verify_trajectory(spec, traj):
    """Re-apply transition and mixing; True iff reproduction is bitwise."""
    for t in range(1, spec.T):
        again = transition_step(spec, traj.Z_s[t - 1], traj.E_s[t])
        if not np.array_equal(again, traj.Z_s[t]):
            return False
    lat = np.concatenate(
        [traj.Z_s, np.broadcast_to(traj.z_c, (spec.T, spec.n_c))], axis=1
    )
    return np.array_equal(apply_mixing(spec, lat), traj.X)


@dataclass
class Dataset:
    """Stacked trajectories plus the spec that generated them."""

    spec: ProcessSpec
    Z_s: np.ndarray  # (N, T, n_s)
    z_c: np.ndarray  # (N, n_c)
    X: np.ndarray  # (N, T, n_x)
    E_s: np.ndarray  # (N, T, n_s)
    e_c: np.ndarray  # (N, n_c)

    @property
    def n(self):
        return self.X.shape[0]


def sample_dataset(spec, n, base_offset=0):
    trajs = [sample_trajectory(spec, base_offset + i) for i in range(n)]
    return Dataset(
        spec=spec,
        Z_s=np.stack([t.Z_s for t in trajs]),
        z_c=np.stack([t.z_c for t in trajs]),
        X=np.stack([t.X for t in trajs]),
        E_s=np.stack([t.E_s for t in trajs]),
        e_c=np.stack([t.e_c for t in trajs]),
    )


def dataset_to_csv(ds, path):
    """Flat export, one row per (trajectory, t); static columns repeat."""
    n_s, n_c, n_x = ds.spec.n_s, ds.spec.n_c, ds.spec.n_x
    header = (
        ["trajectory", "t"]
        + [f"z_s{i}" for i in range(n_s)]
        + [f"z_c{i}" for i in range(n_c)]
        + [f"x{i}" for i in range(n_x)]
        + [f"eps_s{i}" for i in range(n_s)]
        + [f"eps_c{i}" for i in range(n_c)]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for k in range(ds.n):
            for t in range(ds.spec.T):
                row = (
                    [k, t]
                    + list(ds.Z_s[k, t])
                    + list(ds.z_c[k])
                    + list(ds.X[k, t])
                    + list(ds.E_s[k, t])
                    + list(ds.e_c[k])
                )
                writer.writerow(
                    [repr(float(v)) if isinstance(v, float) else v for v in row]
                )


# ---------------------------------------------------------------------------
# assumption audits
# ---------------------------------------------------------------------------


@dataclass
class ProbeEvidence:
    z_t: np.ndarray
    z_prev: np.ndarray
    l_index: int
    zetas: np.ndarray
    matrix: np.ndarray  # (2 n_s, 2 n_s), rows are the derivative vectors
    min_singular_value: float


@dataclass
class SufficientChangeEvidence:
    """Per-probe derivative matrices backing the sufficient-changes verdict."""

    probes: list
    tolerance: float
    pass_fraction: float
    verdict: str  # PASS / FAIL


def check_sufficient_changes(spec, n_probes, tol, seed=0):
    """Probe the sufficient-changes condition on the transition density.

    For each probe point the 2*n_s rows pair the mixed second- and
    third-order derivative vectors of the component log-densities, taken at
    2*n_s values of one previous-step coordinate drawn uniformly in [-2, 2];
    the coordinate maximizing the minimum singular value is recorded.  PASS
    requires min singular value > tol at >= 90% of probes.
    """
    from flowident.autodiff import UsageError

    if tol <= 0:
        raise UsageError("tol must be positive")
    spec.validate()
    rng = _rng(_STREAM_PROBE, spec.seed, seed)
    n = spec.n_s
    probes = []
    n_pass = 0
    for _ in range(n_probes):
        z_t = rng.standard_normal(n)
        z_base = rng.standard_normal(n)
        zetas = rng.uniform(-2.0, 2.0, size=(n, 2 * n))
        best = None
        for l in range(n):
            rows = np.empty((2 * n, 2 * n))
            for j in range(2 * n):
                zp = z_base.copy()
                zp[l] = zetas[l, j]
                d2, d3 = transition_cross_derivs(spec, z_t, zp)
                rows[j] = np.concatenate([d2[:, l], d3[:, l]])
            sv = float(np.linalg.svd(rows, compute_uv=False)[-1])
            if best is None or sv > best[0]:
                best = (sv, l, rows, zetas[l].copy())
        sv, l, rows, zs = best
        probes.append(
            ProbeEvidence(
                z_t=z_t,
                z_prev=z_base,
                l_index=l,
                zetas=zs,
                matrix=rows,
                min_singular_value=sv,
            )
        )
        if sv > tol:
            n_pass += 1
    frac = n_pass / max(n_probes, 1)
    return SufficientChangeEvidence(
        probes=probes,
        tolerance=tol,
        pass_fraction=frac,
        verdict="PASS" if frac >= 0.9 else "FAIL",
    )


@dataclass
class AssumptionReport:
    """Verdicts with numeric evidence for the theorem assumptions.

    Verdicts are PASS / FAIL / UNTESTED; operator-injectivity (B2) and the
    model-side conditions (B4, C3) are not computable from a process spec
    alone and stay UNTESTED here.
    """

    b1_density: dict
    b3_regularity: dict
    c2_sufficiency: SufficientChangeEvidence
    overall: dict
    warnings: list

    def to_json_dict(self):
        ev = self.c2_sufficiency
        return {
            "b1_density": self.b1_density,
            "b3_regularity": self.b3_regularity,
            "c2_sufficiency": {
                "tolerance": ev.tolerance,
                "pass_fraction": ev.pass_fraction,
                "verdict": ev.verdict,
                "min_singular_values": [p.min_singular_value for p in ev.probes],
                "l_indices": [p.l_index for p in ev.probes],
            },
            "overall": self.overall,
            "warnings": self.warnings,
        }


def check_regularity(spec, n_samples, seed=0):
    """Positive-density and mixing-regularity fragments of the report.

    B1 samples conditional transition densities (and the content density) at
    simulated points and checks they are positive and finite.  The B3
    surrogate reports the smallest mixing-Jacobian singular value over
    sampled latents; injectivity of the conditional observation law is
    accepted when it stays above 1e-4.
    """
    spec.validate()
    rng = _rng(_STREAM_REG, spec.seed, seed)
    dens_vals = []
    sv_min = np.inf
    for _ in range(n_samples):
        z_prev = rng.standard_normal(spec.n_s)
        eps = rng.standard_normal(spec.n_s)
        z_t = transition_step(spec, z_prev, eps)
        dens_vals.append(float(np.exp(np.sum(transition_log_density(spec, z_t, z_prev)))))
        if spec.content_law == "standard-normal":
            e_c = rng.standard_normal(spec.n_c)
            dens_vals.append(float(np.exp(-0.5 * e_c @ e_c - 0.5 * spec.n_c * LOG_2PI)))
        else:
            dens_vals.append(0.5**spec.n_c)
        z_full = np.concatenate([z_t, rng.standard_normal(spec.n_c)])
        svals = np.linalg.svd(mixing_jacobian(spec, z_full), compute_uv=False)
        sv_min = min(sv_min, float(svals[-1]))
    lo, hi = float(np.min(dens_vals)), float(np.max(dens_vals))
    b1 = {
        "min_density": lo,
        "max_density": hi,
        "verdict": "PASS" if lo > 0.0 and np.isfinite(hi) else "FAIL",
    }
    b3 = {
        "min_jacobian_singular_value": sv_min,
        "verdict": "PASS" if sv_min > 1e-4 else "FAIL",
    }
    return b1, b3


def audit_assumptions(spec, n_probes=50, tol=1e-4, n_samples=200, seed=0):
    """Run all process-side assumption checks and bundle the report."""
    spec.validate()
    warnings = []
    fam = spec.transition.family
    if fam == "iid":
        warnings.append("iid transition: style dynamics are absent")
    b1, b3 = check_regularity(spec, n_samples, seed=seed)
    c2 = check_sufficient_changes(spec, n_probes, tol, seed=seed)
    smooth = True
    if fam == "iid" and np.any(spec.transition.parameters["scale"] <= 0):
        smooth = False
    overall = {
        "B1": b1["verdict"],
        "B2": "UNTESTED",
        "B3": b3["verdict"],
        "B4": "UNTESTED",
        "C1": "PASS" if smooth else "FAIL",
        "C2": c2.verdict,
        "C3": "UNTESTED",
    }
    return AssumptionReport(
        b1_density=b1,
        b3_regularity=b3,
        c2_sufficiency=c2,
        overall=overall,
        warnings=warnings,
    )


# ---------------------------------------------------------------------------
# spec presets
# ---------------------------------------------------------------------------


def make_spec(
    family="heteroscedastic-gaussian",
    n_s=3,
    n_c=3,
    n_x=6,
    T=10,
    seed=0,
    content_law="standard-normal",
    mixing_depth=2,
    invertible=True,
    widths=None,
    activation=0.3,
    parent_map=None,
    parameters=None,
):
    """Build a validated ProcessSpec with deterministic default parameters."""
    if widths is None:
        widths = [n_x] * mixing_depth
    pm = parent_map if parent_map is not None else full_parent_map(n_s)
    tr = TransitionSpec(family=family, parent_map=pm, parameters=parameters)
    if tr.parameters is None:
        tr.parameters = default_transition_parameters(family, pm, seed)
    spec = ProcessSpec(
        n_s=n_s,
        n_c=n_c,
        n_x=n_x,
        T=T,
        transition=tr,
        content_law=content_law,
        mixing=MixingSpec(
            depth=len(widths),
            widths=list(widths),
            activation=activation,
            weight_init={"perturb_scale": 0.2, "cond_cap": 8.0},
            invertible=invertible,
        ),
        seed=seed,
    )
    return spec.validate()


def default_spec(seed=0, **overrides):
    """The shipped heteroscedastic default process."""
    return make_spec(family="heteroscedastic-gaussian", seed=seed, **overrides)


def spec_to_json(spec):
    return json.dumps(spec.to_json_dict(), indent=2, sort_keys=True)


def spec_from_json(text):
    return ProcessSpec.from_json_dict(json.loads(text))
