import numpy as np
import pytest

from flowident import autodiff as ad
from flowident.autodiff import DomainError, ShapeMismatch, Tape, Tensor, UsageError


def test_matmul_identity():
    a = np.arange(12.0).reshape(3, 4)
    out = ad.matmul(ad.constant(np.eye(3)), ad.constant(a))
    assert np.array_equal(out.data, a)


def test_matmul_hand_value():
    out = ad.matmul(ad.constant([[1.0, 2.0], [3.0, 4.0]]), ad.constant([[5.0], [6.0]]))
    assert out.data.tolist() == [[17.0], [39.0]]


def test_sigmoid_at_zero():
    assert ad.sigmoid(ad.constant(0.0)).data == 0.5


def test_square_gradient():
    with Tape() as tape:
        x = tape.leaf(3.0)
        y = x * x
    g = tape.grad(tape.backward(y), x)
    assert g == pytest.approx(6.0, abs=1e-12)


def test_sigmoid_gradient_at_zero():
    with Tape() as tape:
        x = tape.leaf(0.0)
        y = ad.sigmoid(x)
    g = tape.grad(tape.backward(y), x)
    assert g == pytest.approx(0.25, abs=1e-12)


def test_mean_matmul_grad_matches_central_differences():
    # independent finite-difference oracle, written out by hand
    rng = np.random.default_rng(7)
    a0 = rng.normal(size=(3, 4))
    b0 = rng.normal(size=(4, 2))
    with Tape() as tape:
        a = tape.leaf(a0)
        y = ad.matmul(a, ad.constant(b0)).mean()
    ga = tape.grad(tape.backward(y), a)

    def f(a_flat):
        return np.matmul(a_flat.reshape(3, 4), b0).mean()

    h = 1e-5
    flat = a0.reshape(-1)
    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        cd = (f(flat + e) - f(flat - e)) / (2 * h)
        assert abs(ga.reshape(-1)[i] - cd) / (abs(cd) + 1e-8) < 1e-7


def test_grad_check_polynomial():
    err = ad.grad_check(lambda x: (x * x).sum(), np.array([1.5]), step=1e-5)
    assert err < 1e-6


def test_grad_check_logsumexp():
    rng = np.random.default_rng(11)
    err = ad.grad_check(lambda x: ad.logsumexp(x), rng.normal(size=10), step=1e-5)
    assert err < 1e-4


def test_grad_check_away_from_kink():
    # |x - 0.7| via leaky_relu with slope ~ 0: kink at 0.7, probe at 1.4
    def f(x):
        return (ad.leaky_relu(x - 0.7, 1e-12) + ad.leaky_relu(0.7 - x, 1e-12)).sum()

    err = ad.grad_check(f, np.array([1.4, -0.3]), step=1e-5)
    assert err < 1e-4


def test_grad_check_rejects_bad_step():
    with pytest.raises(UsageError):
        ad.grad_check(lambda x: x.sum(), np.zeros(2), step=0.5)
    with pytest.raises(UsageError):
        ad.grad_check(lambda x: x.sum(), np.zeros(2), step=0.0)


def test_all_primitives_grad_check_100_points():
    import zlib

    from primitive_cases import cases

    for tag, dim, fn in cases():
        worst = 0.0
        for seed in range(100):
            rng = np.random.default_rng((zlib.crc32(tag.encode()), seed))
            point = rng.normal(size=dim)
            worst = max(worst, ad.grad_check(fn, point, step=1e-5))
        assert worst < 1e-4, f"{tag}: max rel err {worst}"


def test_logsumexp_shift_invariance():
    rng = np.random.default_rng(3)
    x = rng.normal(size=50)
    for c in (1.0, -7.5, 123.0):
        a = ad.logsumexp(ad.constant(x)).item()
        b = ad.logsumexp(ad.constant(x + c)).item() - c
        assert abs(a - b) < 1e-12


def test_replay_bit_identical():
    rng = np.random.default_rng(5)
    with Tape() as tape:
        a = tape.leaf(rng.normal(size=(4, 4)))
        b = tape.leaf(rng.normal(size=(4, 4)))
        y = ad.tanh(a @ b) + ad.softplus(a)
        loss = ad.logsumexp(y.reshape(16))
    vals1 = tape.replay()
    vals2 = tape.replay()
    for original, v1, v2 in zip((n.value for n in tape.nodes), vals1, vals2):
        assert np.array_equal(original, v1)
        assert np.array_equal(v1, v2)
    g1 = tape.backward(loss)
    g2 = tape.backward(loss)
    for k in g1:
        assert np.array_equal(g1[k], g2[k])


def test_gradient_of_unreached_node_is_zero():
    with Tape() as tape:
        x = tape.leaf(2.0)
        unused = tape.leaf(5.0)
        y = x * x
    grads = tape.backward(y)
    assert tape.grad(grads, unused) == 0.0


def test_shape_mismatch_names_tag_and_shapes():
    with pytest.raises(ShapeMismatch) as exc:
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))
    assert exc.value.tag == "matmul"
    assert "(2, 3)" in str(exc.value)

    with pytest.raises(ShapeMismatch):
        ad.add(ad.constant(np.ones((2, 3))), ad.constant(np.ones((4,))))


def test_log_domain_error():
    with pytest.raises(DomainError):
        ad.log(ad.constant([-1.0]))
    with pytest.raises(DomainError):
        ad.log(ad.constant([0.0]))


def test_exp_overflow_raises():
    with pytest.raises(DomainError):
        ad.exp(ad.constant([1000.0]))


def test_div_by_zero_raises():
    with pytest.raises(DomainError):
        ad.div(ad.constant([1.0]), ad.constant([0.0]))


def test_backward_non_scalar_is_usage_error():
    with Tape() as tape:
        x = tape.leaf(np.ones(3))
        y = x * 2.0
    with pytest.raises(UsageError):
        tape.backward(y)


def test_fanout_accumulates():
    with Tape() as tape:
        x = tape.leaf(2.0)
        y = x * x + x * 3.0
    g = tape.grad(tape.backward(y), x)
    assert g == pytest.approx(2 * 2.0 + 3.0)


def test_broadcast_trailing_only():
    row = ad.constant(np.arange(3.0))
    wide = ad.broadcast_to(row, (4, 3))
    assert wide.shape == (4, 3)
    with pytest.raises(ShapeMismatch):
        ad.broadcast_to(ad.constant(np.arange(4.0)), (4, 3))


def test_tensor_cannot_cross_tapes():
    with Tape() as t1:
        x = t1.leaf(1.0)
    with Tape() as t2:  # noqa: F841
        with pytest.raises(UsageError):
            _ = x * 2.0


def test_untracked_eval_outside_tape():
    y = ad.tanh(ad.constant([[0.5]])) @ ad.constant(np.ones((1, 1)))
    assert y.node_id is None
    assert y.data.shape == (1, 1)
