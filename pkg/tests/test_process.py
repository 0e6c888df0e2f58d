import numpy as np
import pytest
from scipy.integrate import quad

from flowident import process as pr
from flowident.autodiff import DomainError, UsageError


def small_spec(family="heteroscedastic-gaussian", seed=0, **kw):
    kw.setdefault("n_s", 2)
    kw.setdefault("n_c", 2)
    kw.setdefault("n_x", 4)
    kw.setdefault("T", 6)
    return pr.make_spec(family=family, seed=seed, **kw)


# -- sampling ----------------------------------------------------------------


def test_iid_zero_noise_scale_degenerate():
    spec = small_spec("iid")
    spec.transition.parameters["scale"] = np.zeros(2)
    traj = pr.sample_trajectory(spec, 0)
    assert np.array_equal(traj.Z_s, np.zeros_like(traj.Z_s))
    assert np.all(traj.Z_s == traj.Z_s[0])


def test_sampling_deterministic():
    spec = small_spec(seed=3)
    a = pr.sample_trajectory(spec, 11)
    b = pr.sample_trajectory(spec, 11)
    for field in ("Z_s", "z_c", "X", "E_s", "e_c"):
        assert np.array_equal(getattr(a, field), getattr(b, field))
    c = pr.sample_trajectory(spec, 12)
    assert not np.array_equal(a.X, c.X)


def test_conditional_mean_matches_monte_carlo():
    # redraw z_t 1e5 times at a fixed previous step; empirical mean must sit
    # within 3 standard errors of the transition mean network
    spec = small_spec("heteroscedastic-gaussian", seed=1)
    rng = np.random.default_rng(0)
    z_prev = rng.standard_normal(2)
    eps = rng.standard_normal((100_000, 2))
    draws = pr.transition_step(spec, z_prev, eps)
    mu, sigma = pr._hetero_mu_sigma(spec.transition.parameters, spec.transition.parent_map, z_prev)
    se = sigma / np.sqrt(eps.shape[0])
    assert np.all(np.abs(draws.mean(axis=0) - mu) < 3 * se)


def test_trajectory_reconstruction_bitwise():
    for family in pr.FAMILIES:
        spec = small_spec(family, seed=5)
        traj = pr.sample_trajectory(spec, 9)
        assert pr.verify_trajectory(spec, traj)


def test_mixing_retry_exhaustion():
    spec = small_spec(seed=0)
    spec.mixing.weight_init["cond_cap"] = 1.0 + 1e-12  # unreachable cap
    spec._mix_cache = None
    with pytest.raises(pr.SimulationError):
        pr.mixing_weights(spec)


# -- transition log density ----------------------------------------------------


def test_iid_standard_normal_density_at_zero():
    spec = small_spec("iid")
    eta = pr.transition_log_density(spec, np.zeros(2), np.zeros(2))
    assert np.allclose(eta, -0.918939, atol=1e-6)


def test_linear_zero_residual_density():
    spec = small_spec("linear-gaussian-constvar", seed=2)
    spec.transition.parameters["sigma"] = np.ones(2)
    z_prev = np.array([0.3, -0.7])
    z_t = spec.transition.parameters["A"] @ z_prev
    eta = pr.transition_log_density(spec, z_t, z_prev)
    assert np.allclose(eta, -0.918939, atol=1e-6)


def test_iid_point_mass_density_error():
    spec = small_spec("iid")
    spec.transition.parameters["scale"] = np.zeros(2)
    with pytest.raises(DomainError):
        pr.transition_log_density(spec, np.zeros(2), np.zeros(2))


def test_heteroscedastic_density_against_kde():
    # kernel estimate from 1e6 conditional draws within 2% at the probe
    spec = small_spec("heteroscedastic-gaussian", seed=1)
    rng = np.random.default_rng(4)
    z_prev = rng.standard_normal(2)
    eps = rng.standard_normal((1_000_000, 2))
    draws = pr.transition_step(spec, z_prev, eps)
    z_t = pr.transition_step(spec, z_prev, np.array([0.4, -0.2]))
    eta = pr.transition_log_density(spec, z_t, z_prev)
    for i in range(2):
        samples = draws[:, i]
        h = 1.06 * samples.std() * samples.size ** (-1 / 5)
        kde = np.mean(np.exp(-0.5 * ((z_t[i] - samples) / h) ** 2)) / (h * np.sqrt(2 * np.pi))
        assert abs(kde - np.exp(eta[i])) / np.exp(eta[i]) < 0.02


@pytest.mark.parametrize("family", pr.FAMILIES)
def test_density_normalizes_by_quadrature(family):
    spec = small_spec(family, seed=3)
    rng = np.random.default_rng(7)
    z_prev = rng.standard_normal(2)
    base = rng.standard_normal(2) * 0.5
    for i in range(2):
        def integrand(v, i=i):
            z = base.copy()
            z[i] = v
            return float(np.exp(pr.transition_log_density(spec, z, z_prev)[i]))

        total, _ = quad(integrand, -10, 10, limit=200)
        assert abs(total - 1.0) < 1e-3, (family, i, total)


def test_cross_derivatives_match_finite_differences():
    # the analytic blocks against central differences of the analytic
    # lower-order derivatives (the documented fallback route)
    for family in pr.FAMILIES:
        spec = small_spec(family, seed=6)
        rng = np.random.default_rng(8)
        z_t = rng.standard_normal(2)
        z_prev = rng.standard_normal(2)
        d2, d3 = pr.transition_cross_derivs(spec, z_t, z_prev)
        f2, f3 = pr.cross_derivs_fd(spec, z_t, z_prev, step=1e-5)
        assert np.allclose(d2, f2, rtol=1e-4, atol=1e-6), family
        assert np.allclose(d3, f3, rtol=1e-4, atol=1e-5), family


# -- sufficient changes ----------------------------------------------------------


def test_linear_family_fails_sufficient_changes():
    ev = pr.check_sufficient_changes(small_spec("linear-gaussian-constvar"), 20, 1e-4)
    assert ev.verdict == "FAIL"
    assert all(p.min_singular_value < 1e-10 for p in ev.probes)


def test_iid_family_fails_with_zero_rows():
    ev = pr.check_sufficient_changes(small_spec("iid"), 10, 1e-4)
    assert ev.verdict == "FAIL"
    assert all(np.allclose(p.matrix, 0.0) for p in ev.probes)


def test_heteroscedastic_passes_with_rank_oracle():
    spec = small_spec("heteroscedastic-gaussian", seed=0)
    ev = pr.check_sufficient_changes(spec, 50, 1e-4, seed=0)
    assert ev.verdict == "PASS"
    assert ev.pass_fraction >= 0.9
    # independent full-rank oracle on the stored probe matrices
    for p in ev.probes[:10]:
        assert np.linalg.matrix_rank(p.matrix, tol=1e-8) == 2 * spec.n_s


def test_sinusoidal_variance_modulation_passes():
    spec = small_spec("heteroscedastic-gaussian", seed=2)
    spec.transition.parameters["act"] = "sin"
    ev = pr.check_sufficient_changes(spec, 30, 1e-4, seed=1)
    assert ev.verdict == "PASS"


def test_verdict_stable_across_probe_seeds():
    expected = {"heteroscedastic-gaussian": "PASS", "linear-gaussian-constvar": "FAIL", "iid": "FAIL"}
    for family, want in expected.items():
        spec = small_spec(family, seed=4)
        verdicts = {pr.check_sufficient_changes(spec, 30, 1e-4, seed=s).verdict for s in range(5)}
        assert verdicts == {want}, family


def test_sufficient_changes_rejects_bad_tol():
    with pytest.raises(UsageError):
        pr.check_sufficient_changes(small_spec(), 5, 0.0)


# -- regularity -------------------------------------------------------------------


def test_gaussian_families_pass_b1():
    b1, _ = pr.check_regularity(small_spec(), 100)
    assert b1["verdict"] == "PASS"
    assert b1["min_density"] > 0


def test_invertible_mixing_passes_b3():
    _, b3 = pr.check_regularity(small_spec(), 100)
    assert b3["verdict"] == "PASS"
    assert b3["min_jacobian_singular_value"] > 1e-4


def test_bottleneck_mixing_fails_b3():
    spec = small_spec(invertible=False, widths=[1, 4])
    _, b3 = pr.check_regularity(spec, 50)
    assert b3["verdict"] == "FAIL"


def test_audit_report_has_all_verdicts():
    rep = pr.audit_assumptions(small_spec(), n_probes=10, n_samples=30)
    assert set(rep.overall) == {"B1", "B2", "B3", "B4", "C1", "C2", "C3"}
    assert all(v in ("PASS", "FAIL", "UNTESTED") for v in rep.overall.values())
    assert rep.overall["B2"] == "UNTESTED"
    rep_iid = pr.audit_assumptions(small_spec("iid"), n_probes=10, n_samples=30)
    assert rep_iid.overall["C2"] == "FAIL"
    assert any("absent" in w for w in rep_iid.warnings)


# -- serialization ------------------------------------------------------------------


def test_spec_json_round_trip():
    for family in pr.FAMILIES:
        spec = small_spec(family, seed=9)
        text = pr.spec_to_json(spec)
        back = pr.spec_from_json(text)
        assert pr.spec_to_json(back) == text
        t1 = pr.sample_trajectory(spec, 0)
        t2 = pr.sample_trajectory(back, 0)
        assert np.array_equal(t1.X, t2.X)


def test_dataset_csv_export(tmp_path):
    spec = small_spec(seed=1, T=3)
    ds = pr.sample_dataset(spec, 4)
    path = tmp_path / "out.csv"
    pr.dataset_to_csv(ds, path)
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 1 + 4 * 3
    header = lines[0].split(",")
    assert header[:2] == ["trajectory", "t"]
    row = lines[1].split(",")
    assert float(row[2]) == ds.Z_s[0, 0, 0]


def test_spec_validation_errors():
    with pytest.raises(pr.SpecError):
        pr.make_spec(n_s=0)
    with pytest.raises(pr.SpecError):
        pr.make_spec(n_x=3, n_s=2, n_c=2)
    with pytest.raises(pr.SpecError):
        pr.make_spec(T=1)
    with pytest.raises(pr.SpecError):
        pr.make_spec(family="nope")
