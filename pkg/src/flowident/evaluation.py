"""Disentanglement metrics and the ablation protocol.

Component-wise recovery is scored by the mean correlation coefficient after
an optimal one-to-one matching (rank correlation by default, since any
per-component invertible map that is continuous is monotone, and ranks are
invariant to those).  Blockwise recovery is scored by held-out R-squared of
a kernel ridge regressor from estimated content to true content; the same
regressor from the estimated style path to true content measures leakage
and should stay low.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.stats import rankdata


class MetricError(ValueError):
    pass


class DegenerateColumnError(MetricError):
    def __init__(self, which, col):
        self.column = col
        super().__init__(f"{which} column {col} is constant")


# ---------------------------------------------------------------------------
# assignment
# ---------------------------------------------------------------------------


def hungarian(cost):
    """Minimum-cost row->column assignment of a square matrix.

    Ties are broken toward the lexicographically smallest assignment vector
    so results are deterministic; equality of cost is judged at 1e-9
    relative tolerance.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise MetricError(f"cost matrix must be square, got {c.shape}")
    if not np.all(np.isfinite(c)):
        raise MetricError("cost matrix must be finite")
    n = c.shape[0]
    rows, cols = linear_sum_assignment(c)
    best = float(c[rows, cols].sum())
    tol = 1e-9 * max(1.0, abs(best))

    assignment = np.full(n, -1, dtype=int)
    free_cols = list(range(n))
    remaining = best
    for i in range(n):
        for j in sorted(free_cols):
            rest_rows = list(range(i + 1, n))
            rest_cols = [k for k in free_cols if k != j]
            if rest_rows:
                sub = c[np.ix_(rest_rows, rest_cols)]
                rr, cc = linear_sum_assignment(sub)
                rest = float(sub[rr, cc].sum())
            else:
                rest = 0.0
            if c[i, j] + rest <= remaining + tol:
                assignment[i] = j
                free_cols.remove(j)
                remaining = remaining - c[i, j]
                break
        else:  # numerical safety net: fall back to the unrefined optimum
            assignment[rows] = cols
            break
    return assignment


# ---------------------------------------------------------------------------
# matched correlation
# ---------------------------------------------------------------------------


@dataclass
class MCCResult:
    mcc_style: float
    permutation: np.ndarray  # estimated index -> true index
    per_pair_corr: np.ndarray  # (n_est, n_true) absolute correlations
    method: str


def _check_columns(name, z):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise MetricError(f"{name} must be 2-D")
    stds = z.std(axis=0)
    bad = np.where(stds == 0.0)[0]
    if bad.size:
        raise DegenerateColumnError(name, int(bad[0]))
    return z


def mcc(Z_true, Z_est, corr="spearman"):
    """Mean absolute correlation of optimally matched components.

    Rank correlation (default) scores recovery up to any strictly monotone
    per-component distortion; Pearson is available for linear conventions.
    """
    zt = _check_columns("Z_true", Z_true)
    ze = _check_columns("Z_est", Z_est)
    if zt.shape[0] != ze.shape[0]:
        raise MetricError("row counts differ")
    if corr not in ("pearson", "spearman"):
        raise MetricError(f"unknown correlation method {corr!r}")
    if corr == "spearman":
        zt = np.column_stack([rankdata(zt[:, j]) for j in range(zt.shape[1])])
        ze = np.column_stack([rankdata(ze[:, j]) for j in range(ze.shape[1])])
    d_est = ze.shape[1]
    full = np.corrcoef(ze, zt, rowvar=False)
    cross = np.abs(full[:d_est, d_est:])  # [est_i, true_j]
    perm = hungarian(1.0 - cross)
    matched = cross[np.arange(d_est), perm]
    return MCCResult(
        mcc_style=float(matched.mean()),
        permutation=perm,
        per_pair_corr=cross,
        method=corr,
    )


# ---------------------------------------------------------------------------
# blockwise regression
# ---------------------------------------------------------------------------


def _median_bandwidth(x, rng):
    m = x.shape[0]
    take = rng.choice(m, size=min(m, 512), replace=False)
    sub = x[take]
    d2 = np.sum((sub[:, None, :] - sub[None, :, :]) ** 2, axis=-1)
    med = np.sqrt(np.median(d2[np.triu_indices(sub.shape[0], k=1)]))
    return med if med > 0 else 1.0


def _rbf(a, b, h):
    d2 = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * a @ b.T
    )
    return np.exp(-np.maximum(d2, 0.0) / (2.0 * h * h))


def blockwise_r2(source, target, ridge=1e-3, seed=0):
    """Held-out R-squared per target dimension of an RBF kernel ridge fit.

    Bandwidth is the median pairwise distance of the training split (70% of
    rows, seeded shuffle); requires at least 50 rows and a non-degenerate
    source.
    """
    x = np.asarray(source, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] != y.shape[0]:
        raise MetricError("row counts differ")
    if x.shape[0] < 50:
        raise MetricError("need at least 50 rows")
    if float(x.std(axis=0).max()) == 0.0:
        raise MetricError("source has zero variance")
    rng = np.random.default_rng([77, seed])
    order = rng.permutation(x.shape[0])
    n_train = int(round(0.7 * x.shape[0]))
    tr_idx, te_idx = order[:n_train], order[n_train:]
    xtr, xte = x[tr_idx], x[te_idx]
    ytr, yte = y[tr_idx], y[te_idx]
    h = _median_bandwidth(xtr, rng)
    k = _rbf(xtr, xtr, h)
    alpha = np.linalg.solve(k + ridge * np.eye(k.shape[0]), ytr)
    pred = _rbf(xte, xtr, h) @ alpha
    sse = np.sum((yte - pred) ** 2, axis=0)
    sst = np.sum((yte - yte.mean(axis=0)) ** 2, axis=0)
    out = np.empty(y.shape[1])
    for j in range(y.shape[1]):
        out[j] = 1.0 - sse[j] / sst[j] if sst[j] > 0 else 0.0
    return out


# ---------------------------------------------------------------------------
# model evaluation
# ---------------------------------------------------------------------------


@dataclass
class IdentifiabilityReport:
    mcc_style: float
    permutation: np.ndarray
    per_pair_corr: np.ndarray
    r2_content: np.ndarray  # per content dimension, should be high
    r2_cross: np.ndarray  # style -> content leakage, should be low
    method: dict

    def to_json_dict(self):
        return {
            "mcc_style": self.mcc_style,
            "permutation": [int(p) for p in self.permutation],
            "per_pair_corr": self.per_pair_corr.tolist(),
            "r2_content": self.r2_content.tolist(),
            "r2_cross": self.r2_cross.tolist(),
            "method": dict(self.method),
        }

    def to_csv(self, path, run_id=""):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["run", "metric", "index", "value"])
            w.writerow([run_id, "mcc_style", "", repr(self.mcc_style)])
            for j, v in enumerate(self.r2_content):
                w.writerow([run_id, "r2_content", j, repr(float(v))])
            for j, v in enumerate(self.r2_cross):
                w.writerow([run_id, "r2_cross", j, repr(float(v))])
            for j, p in enumerate(self.permutation):
                w.writerow([run_id, "permutation", j, int(p)])


def _posthoc_latents(model, X_eval, seed=0):
    """Regression encoder for backends without an exact inverse.

    Fit an RBF kernel ridge map from generated frames to generator latents,
    then apply it to the real frames.  An approximation by construction.
    """
    n, t_len, n_x = X_eval.shape
    n_gen = 384
    gx, gz, gc = model.generate(n_gen, T=t_len, seed=seed)
    src = gx.reshape(n_gen * t_len, n_x)
    tgt = np.concatenate(
        [gz.reshape(n_gen * t_len, -1), np.repeat(gc, t_len, axis=0)], axis=1
    )
    rng = np.random.default_rng([78, seed])
    take = rng.choice(src.shape[0], size=min(2000, src.shape[0]), replace=False)
    src, tgt = src[take], tgt[take]
    h = _median_bandwidth(src, rng)
    k = _rbf(src, src, h)
    alpha = np.linalg.solve(k + 1e-3 * np.eye(k.shape[0]), tgt)
    flat = X_eval.reshape(n * t_len, n_x)
    pred = _rbf(flat, src, h) @ alpha
    n_s = model.model_cfg.n_s
    zs_est = pred[:, :n_s].reshape(n, t_len, n_s)
    zc_est = pred[:, n_s:].reshape(n, t_len, -1).mean(axis=1)
    return zs_est, zc_est


def evaluate_model(model, spec, n_eval=512, corr="spearman", seed=0):
    """Score Definition-style recovery of a fitted model on fresh data."""
    from flowident import process as pr

    eval_ds = pr.sample_dataset(spec, n_eval, base_offset=2 * 10**6)
    try:
        zs_est, zc_est = model.estimate_latents(eval_ds.X)
        encoder = "exact-inverse"
    except Exception:
        zs_est, zc_est = _posthoc_latents(model, eval_ds.X, seed=seed)
        encoder = "posthoc-regression"
    n, t_len = eval_ds.Z_s.shape[:2]
    frag = mcc(eval_ds.Z_s.reshape(n * t_len, -1), zs_est.reshape(n * t_len, -1), corr)
    r2_c = blockwise_r2(zc_est, eval_ds.z_c, seed=seed)
    r2_x = blockwise_r2(zs_est.reshape(n, -1), eval_ds.z_c, seed=seed)
    return IdentifiabilityReport(
        mcc_style=frag.mcc_style,
        permutation=frag.permutation,
        per_pair_corr=frag.per_pair_corr,
        r2_content=r2_c,
        r2_cross=r2_x,
        method={
            "corr": corr,
            "encoder": encoder,
            "regressor": "krr-rbf-median",
            "ridge": 1e-3,
            "n_eval": int(n_eval),
        },
    )


# ---------------------------------------------------------------------------
# ablation protocol
# ---------------------------------------------------------------------------


@dataclass
class AblationTable:
    rows: list  # per (variant, seed): dict
    aggregates: dict  # variant -> {"mcc_mean", "mcc_std", "r2_mean", "r2_std"}
    variants: list

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "seed", "mcc_style", "r2_content", "r2_cross"])
            for r in self.rows:
                w.writerow(
                    [
                        r["variant"],
                        r["seed"],
                        repr(r["mcc_style"]),
                        repr(r["r2_content"]),
                        repr(r["r2_cross"]),
                    ]
                )

    def plot_data(self):
        return {
            "x": list(self.variants),
            "y": [self.aggregates[v]["mcc_mean"] for v in self.variants],
            "yerr": [self.aggregates[v]["mcc_std"] for v in self.variants],
            "metric": "mcc_style",
        }

    def full_ranks_first(self):
        means = {v: self.aggregates[v]["mcc_mean"] for v in self.variants}
        return all(means["full"] >= m for v, m in means.items())


def ablation_suite(
    spec_builder,
    base_cfg,
    variants=("full", "no-gru", "no-flow"),
    seeds=(0, 1, 2),
    model_cfg=None,
    n_eval=384,
    quiet=True,
):
    """Train each variant per seed and tabulate recovery metrics.

    ``spec_builder`` maps a seed to the (paired) ground-truth process used by
    every variant at that seed, so comparisons are like-for-like.  Requires
    at least 3 seeds.
    """
    from flowident import process as pr
    from flowident import training as tn

    if len(seeds) < 3:
        raise MetricError("ablation requires at least 3 seeds")
    rows = []
    for seed in seeds:
        spec = spec_builder(seed) if callable(spec_builder) else spec_builder
        dataset = pr.sample_dataset(spec, base_cfg.n_train)
        for variant in variants:
            cfg = replace(base_cfg, seed=seed)
            mc = model_cfg or tn.ModelConfig(
                n_s=spec.n_s, n_c=spec.n_c, n_x=spec.n_x, T=spec.T
            )
            mc = replace(mc, variant=variant)
            model, _ = tn.train(spec, cfg, model_cfg=mc, dataset=dataset, quiet=quiet)
            rep = evaluate_model(model, spec, n_eval=n_eval, seed=seed)
            rows.append(
                {
                    "variant": variant,
                    "seed": int(seed),
                    "mcc_style": rep.mcc_style,
                    "r2_content": float(np.mean(rep.r2_content)),
                    "r2_cross": float(np.mean(rep.r2_cross)),
                }
            )
            if not quiet:
                print(
                    f"[ablation] {variant} seed={seed}: "
                    f"mcc={rep.mcc_style:.3f} r2={np.mean(rep.r2_content):.3f}"
                )
    aggregates = {}
    for v in variants:
        vals = [r["mcc_style"] for r in rows if r["variant"] == v]
        r2s = [r["r2_content"] for r in rows if r["variant"] == v]
        aggregates[v] = {
            "mcc_mean": float(np.mean(vals)),
            "mcc_std": float(np.std(vals)),
            "r2_mean": float(np.mean(r2s)),
            "r2_std": float(np.std(r2s)),
        }
    return AblationTable(rows=rows, aggregates=aggregates, variants=list(variants))
