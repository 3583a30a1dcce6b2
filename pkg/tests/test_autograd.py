import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from meshmorph import autograd as ad
from meshmorph.autograd import ShapeError, Tape, Tensor, backward
from meshmorph.gradcheck import check_gradients
from meshmorph.gradsuite import op_cases
from meshmorph.optim import AdamState, adam_step, lr_at_epoch


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


# ---------------------------------------------------------------- forward contracts

def test_matmul_identity():
    x = np.random.default_rng(0).standard_normal((3, 4))
    assert np.array_equal(ad.matmul(np.eye(3), x).data, x)


def test_gather_sentinel():
    x = np.arange(6.0).reshape(2, 3)
    out = ad.gather_rows(x, [1, -1]).data
    assert out.tolist() == [[3, 4, 5], [0, 0, 0]]


def test_gather_out_of_range():
    with pytest.raises(IndexError):
        ad.gather_rows(np.zeros((2, 3)), [2])


def test_l1_self_is_zero():
    x = np.random.default_rng(1).standard_normal((4, 3))
    assert ad.l1_loss(x, x).item() == 0.0


@pytest.mark.parametrize("op,args", [
    (ad.matmul, (np.zeros((2, 3)), np.zeros((4, 2)))),
    (ad.add, (np.zeros((2, 3)), np.zeros((3, 2)))),
    (ad.linear, (np.zeros((2, 3)), np.zeros((4, 2)))),
    (ad.l1_loss, (np.zeros(3), np.zeros(4))),
])
def test_shape_errors_name_the_op(op, args):
    with pytest.raises(ShapeError, match=op.__name__):
        op(*args)


def test_spmm_shape_error():
    with pytest.raises(ShapeError, match="spmm"):
        ad.spmm(sp.eye(3, format="csr"), np.zeros((4, 2)))


def test_no_tape_no_recording():
    x = leaf([1.0, 2.0])
    y = ad.sum(ad.mul(x, x))
    assert y.tape is None


# ---------------------------------------------------------------- backward contracts

def test_sum_gradient_all_ones():
    x = leaf(np.random.default_rng(0).standard_normal(7))
    with Tape() as tape:
        loss = ad.sum(x)
    (g,) = backward(tape, loss, [x])
    assert np.array_equal(g, np.ones(7))


def test_l1_gradient_sign_analysis():
    a, n = 2.5, 6
    x = leaf(np.linspace(1, 2, n))
    b = np.zeros(n)
    with Tape() as tape:
        loss = ad.l1_loss(ad.scale(x, a), b)
    (g,) = backward(tape, loss, [x])
    np.testing.assert_allclose(g, a / n)


def test_unused_param_gets_zeros():
    x, unused = leaf([1.0, 2.0]), leaf(np.ones((2, 2)))
    with Tape() as tape:
        loss = ad.sum(x)
    g = backward(tape, loss, [x, unused])
    assert np.array_equal(g[1], np.zeros((2, 2)))
    assert np.array_equal(unused.grad, np.zeros((2, 2)))


def test_backward_rejects_non_scalar():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = ad.scale(x, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        backward(tape, y, [x])


def test_gather_backward_scatter_adds():
    x = leaf(np.ones((3, 2)))
    with Tape() as tape:
        loss = ad.sum(ad.gather_rows(x, [[0, 0, -1], [2, -1, -1]]))
    (g,) = backward(tape, loss, [x])
    assert g.tolist() == [[2, 2], [0, 0], [1, 1]]


@pytest.mark.parametrize("seed", range(5))
def test_every_op_passes_gradcheck(seed):
    for name, (fn, point) in op_cases(seed).items():
        rep = check_gradients(fn, point, eps=1e-6, tol=1e-5)
        assert rep.passed, f"{name}: {rep}"


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_backward_is_linear(alpha, beta, seed):
    rng = np.random.default_rng(seed)
    x = leaf(rng.standard_normal((4, 3)))
    w = rng.standard_normal((3, 2))

    def grad(fn):
        with Tape() as tape:
            loss = fn()
        return backward(tape, loss, [x])[0]

    f = lambda: ad.sum(ad.relu(ad.linear(x, w)))  # noqa: E731
    g = lambda: ad.sum(ad.mul(x, x))  # noqa: E731
    combo = grad(lambda: ad.add(ad.scale(f(), alpha), ad.scale(g(), beta)))
    np.testing.assert_allclose(combo, alpha * grad(f) + beta * grad(g), atol=1e-12)


def test_gradients_deterministic():
    rng = np.random.default_rng(4)
    x = leaf(rng.standard_normal((5, 3)))
    w = rng.standard_normal((3, 3))

    def run():
        with Tape() as tape:
            loss = ad.mean(ad.relu(ad.linear(x, w)))
        return backward(tape, loss, [x])[0].copy()

    assert np.array_equal(run(), run())


# ---------------------------------------------------------------- gradient checker

def test_checker_sum_of_squares_tight():
    x = np.random.default_rng(0).standard_normal(6)
    rep = check_gradients(lambda ps: ad.sum(ad.mul(ps[0], ps[0])), x, tol=1e-7)
    assert rep.passed, str(rep)


def test_checker_l1_of_linear():
    rng = np.random.default_rng(2)
    w, x = rng.standard_normal((3, 4)), rng.standard_normal((5, 3))
    b = ad.linear(x, w).data + rng.choice([-1.0, 1.0], (5, 4))  # residuals away from 0
    rep = check_gradients(lambda ps: ad.l1_loss(ad.linear(ps[0], ps[1]), b), [x, w], tol=1e-5)
    assert rep.passed, str(rep)


def test_checker_flags_wrong_gradient():
    def bad(ps):
        x = ps[0]
        # forward doubles, backward claims identity
        return ad.sum(ad._record("bad", (x,), x.data * 2.0, lambda g: (g,)))

    rep = check_gradients(bad, np.ones(3))
    assert not rep.passed and rep.max_rel_error == pytest.approx(0.5, rel=1e-6)


def test_checker_reports_non_finite_location():
    with np.errstate(divide="ignore", invalid="ignore"):
        rep = check_gradients(lambda ps: ad.sum(ad.div_rows(ps[0], ps[1])),
                              [np.ones((2, 1)), np.array([1.0, 0.0])])
    assert not rep.passed and rep.worst is not None and "non-finite" in rep.message


# ---------------------------------------------------------------- Adam

def test_adam_zero_gradient():
    p = {"w": np.array([1.0, -2.0])}
    state = AdamState()
    adam_step(p, {"w": np.zeros(2)}, state, lr=0.1)
    assert p["w"].tolist() == [1.0, -2.0] and state.step == 1


def test_adam_first_step_magnitude_is_lr():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    adam_step(p, {"w": np.array([0.3, -7.0, 0.0])}, AdamState(), lr=0.01)
    np.testing.assert_allclose(p["w"], [0.99, -1.99, 3.0], rtol=1e-6)


def test_adam_scalar_quadratic_decreases():
    # simulated oracle: plain-python Adam on f(x) = x^2
    x_ref, m, v = 1.0, 0.0, 0.0
    ref = []
    for t in range(1, 11):
        g = 2 * x_ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x_ref -= 0.1 * (m / (1 - 0.9 ** t)) / ((v / (1 - 0.999 ** t)) ** 0.5 + 1e-8)
        ref.append(x_ref)
    p, state, seen = {"x": np.array([1.0])}, AdamState(), []
    for _ in range(10):
        adam_step(p, {"x": 2 * p["x"]}, state, lr=0.1)
        seen.append(float(p["x"][0]))
    np.testing.assert_allclose(seen, ref, rtol=1e-13)
    assert all(abs(b) < abs(a) for a, b in zip([1.0] + seen, seen))


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState(), lr=0.1)


@given(st.floats(1e-5, 1.0), st.floats(0.5, 1.0), st.integers(0, 300))
def test_lr_schedule(lr0, decay, epoch):
    assert abs(lr_at_epoch(lr0, decay, epoch) - lr0 * decay ** epoch) <= 1e-15
