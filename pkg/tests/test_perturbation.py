import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kernreg.autodiff import Tensor, grad
from kernreg.autodiff.check import numerical_gradient, relative_error
from kernreg.network import (
    Linear,
    NetworkSpec,
    ReLU,
    Softplus,
    build_network,
    linear_model,
    loss,
    mlp,
    per_example_loss,
    predict,
)
from kernreg.perturbation import (
    AttackConfig,
    Geometry,
    adv_penalty,
    adv_penalty_expr,
    grad_norm_expr,
    grad_norm_penalty,
    grad_norm_search,
    input_gradients,
    loss_grad_expr,
    loss_grad_penalty,
    max_gradient_norm,
    pgd_attack,
    project,
)
from kernreg.spectral import product_of_norms


def linear(w):
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    net, _ = build_network(linear_model(w.shape[1], w.shape[0]))
    return net, {"W1": w}


def test_default_step_sizes():
    assert AttackConfig(1.0, steps=5).alpha == pytest.approx(0.4)
    assert AttackConfig(1.0, steps=5, geometry="linf").alpha == pytest.approx(0.5)
    with pytest.raises(ValueError):
        AttackConfig(-1.0)
    with pytest.raises(ValueError):
        AttackConfig(1.0, steps=0)


def test_projection_onto_balls():
    rng = np.random.default_rng(0)
    d = rng.normal(size=(20, 7)) * 3
    p2 = project(d, 0.5, Geometry.L2)
    assert np.all(np.linalg.norm(p2, axis=1) <= 0.5 + 1e-12)
    pinf = project(d, 0.5, Geometry.LINF)
    assert np.abs(pinf).max() <= 0.5
    small = d * 1e-3
    np.testing.assert_array_equal(project(small, 0.5, Geometry.L2), small)


def test_adv_penalty_zero_ball():
    net, params = build_network(mlp(3, (5,), 2), 0)
    res = adv_penalty(net, params, np.random.default_rng(0).normal(size=(4, 3)), AttackConfig(0.0))
    assert res.value == 0.0


def test_adv_penalty_linear_l2_closed_form():
    net, params = linear([3.0, 4.0])
    for seed in range(5):
        batch = np.random.default_rng(seed).normal(size=(6, 2)) * 10
        res = adv_penalty(net, params, batch, AttackConfig(0.5))
        assert res.per_class[0] == pytest.approx(2.5, abs=1e-9)
        assert res.value == pytest.approx(6.25, abs=1e-9)


def test_adv_penalty_linear_linf_closed_form():
    net, params = linear([3.0, -4.0])
    res = adv_penalty(net, params, np.ones((3, 2)), AttackConfig(0.1, geometry="linf"))
    assert res.per_class[0] == pytest.approx(0.7, abs=1e-12)


def test_adv_penalty_multiclass_sums_over_classes():
    W = np.array([[3.0, 4.0], [1.0, 0.0], [0.0, -2.0]])
    net, params = linear(W)
    res = adv_penalty(net, params, np.zeros((2, 2)), AttackConfig(0.5))
    np.testing.assert_allclose(res.per_class, 0.5 * np.linalg.norm(W, axis=1), atol=1e-12)
    assert res.value == pytest.approx(np.sum((0.5 * np.linalg.norm(W, axis=1)) ** 2))
    assert [w.cls for w in res.witnesses] == [0, 1, 2]
    assert adv_penalty(net, params, np.zeros((2, 2)), AttackConfig(0.5), squared=False).value == pytest.approx(
        0.5 * np.linalg.norm(W, axis=1).sum()
    )


def test_adv_penalty_expr_matches_value():
    net, params = build_network(mlp(4, (6,), 3, "softplus"), 1)
    batch = np.random.default_rng(0).normal(size=(5, 4))
    res = adv_penalty(net, params, batch, AttackConfig(0.3))
    expr = adv_penalty_expr(net, params, res.witnesses)
    assert expr.item() == pytest.approx(res.value, rel=1e-12)


def test_grad_norm_linear_is_weight_norm():
    W = np.array([[3.0, 4.0], [1.0, -1.0]])
    net, params = linear(W)
    batch = np.random.default_rng(0).normal(size=(4, 2))
    assert grad_norm_penalty(net, params, batch, "l2") == pytest.approx(25 + 2)
    assert grad_norm_penalty(net, params, batch, "linf") == pytest.approx(49 + 4)


def test_grad_norm_of_half_squared_norm():
    # the gradient of ||x||^2 / 2 is x itself
    batch = np.array([[1.0, 0.0], [0.0, 2.0]])
    res = max_gradient_norm(batch[None], batch)
    assert res.value == 4.0
    assert res.witnesses[0].index == 1


def test_grad_norm_bounded_by_spectral_product():
    rng = np.random.default_rng(0)
    for seed in range(100):
        net, params = build_network(mlp(4, (6, 5), 3), seed)
        res = grad_norm_search(net, params, rng.normal(size=(8, 4)))
        upper = product_of_norms(params)
        assert np.all(res.per_class <= upper + 1e-6)


def test_lower_le_upper_for_adv_penalty():
    rng = np.random.default_rng(1)
    for seed in range(20):
        net, params = build_network(mlp(4, (6, 5), 3), seed)
        eps = 0.3
        res = adv_penalty(net, params, rng.normal(size=(8, 4)), AttackConfig(eps, steps=10))
        assert np.all(res.per_class / eps <= product_of_norms(params) + 1e-6)


def test_input_gradients_match_finite_differences():
    net, params = build_network(mlp(3, (5,), 2, "softplus"), 0)
    x = np.random.default_rng(0).normal(size=(4, 3))
    g = input_gradients(net, params, x)
    for k in range(2):
        for i in range(4):
            fd = numerical_gradient(lambda z: predict(net, params, z[None])[0, k], x[i])
            np.testing.assert_allclose(g[k, i], fd, atol=1e-8)


def test_pgd_zero_ball():
    net, params = build_network(mlp(3, (5,), 2), 0)
    x = np.ones((2, 3))
    assert not np.any(pgd_attack(net, params, "cross-entropy", x, np.array([0, 1]), AttackConfig(0.0)))


def test_pgd_hinge_linear_closed_form():
    rng = np.random.default_rng(0)
    w = np.array([[1.0, -2.0, 0.5]])
    net, params = linear(w)
    eps = 0.3
    x = rng.normal(size=(50, 3)) * 0.2
    y = np.where(rng.random(50) < 0.5, -1, 1)
    delta = pgd_attack(net, params, "hinge", x, y, AttackConfig(eps))
    wn = np.linalg.norm(w)
    expected_delta = -eps * y[:, None] * w / wn
    margin = y * (x @ w[0])
    inside = margin < 1
    np.testing.assert_allclose(delta[inside], expected_delta[inside], atol=1e-6)
    robust = per_example_loss("hinge", predict(net, params, x + delta), y).data
    np.testing.assert_allclose(robust[inside], np.maximum(0, 1 - margin + eps * wn)[inside], atol=1e-9)
    clean = per_example_loss("hinge", predict(net, params, x), y).data
    np.testing.assert_allclose((robust - clean)[inside], eps * wn, atol=1e-6)


def test_pgd_linf_logistic_closed_form():
    w = np.array([[0.5, -1.5, 2.0, 0.0001]])
    net, params = linear(w)
    x = np.random.default_rng(1).normal(size=(10, 4))
    y = np.array([1, -1] * 5)
    delta = pgd_attack(net, params, "logistic", x, y, AttackConfig(0.1, geometry="linf"))
    np.testing.assert_allclose(delta, -0.1 * y[:, None] * np.sign(w), atol=1e-6)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.floats(0.01, 1.0), st.sampled_from(["l2", "linf"]))
def test_pgd_never_worse_than_clean(seed, eps, geometry):
    net, params = build_network(mlp(3, (8,), 4), seed)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(6, 3))
    y = rng.integers(0, 4, size=6)
    delta = pgd_attack(net, params, "cross-entropy", x, y, AttackConfig(eps, geometry=geometry))
    assert np.all(Geometry(geometry).attack_norm(delta) <= eps + 1e-12)
    clean = per_example_loss("cross-entropy", predict(net, params, x), y).data
    robust = per_example_loss("cross-entropy", predict(net, params, x + delta), y).data
    assert np.all(robust >= clean)


def test_single_example_attack_shape():
    net, params = linear([1.0, 1.0])
    d = pgd_attack(net, params, "hinge", np.zeros(2), 1, AttackConfig(0.5))
    assert d.shape == (2,)


def test_adv_penalty_monotone_in_epsilon():
    w = np.array([[1.0, 2.0, -1.0]])
    net, params = linear(w)
    batch = np.random.default_rng(0).normal(size=(5, 3))
    values = [adv_penalty(net, params, batch, AttackConfig(e)).value for e in (0.0, 0.1, 0.2, 0.5, 1.0)]
    assert all(a <= b for a, b in zip(values, values[1:]))
    # on a net, warm starting each radius from the previous witness keeps the trend
    net, params = build_network(mlp(3, (8,), 2), 3)
    prev, delta0 = -1.0, None
    for e in (0.05, 0.1, 0.2, 0.4):
        res = adv_penalty(net, params, batch, AttackConfig(e), delta0=delta0)
        from kernreg.perturbation import adv_search

        delta0, _ = adv_search(net, params, batch, AttackConfig(e), delta0=delta0)
        assert res.value >= prev - 1e-12
        prev = res.value


def test_scale_equivariance_on_linear_models():
    w = np.array([[0.3, -0.7]])
    batch = np.random.default_rng(0).normal(size=(5, 2))
    net, p1 = linear(w)
    _, p2 = linear(2 * w)
    cfg = AttackConfig(0.2)
    assert adv_penalty(net, p2, batch, cfg).per_class[0] == pytest.approx(2 * adv_penalty(net, p1, batch, cfg).per_class[0], rel=1e-12)
    assert grad_norm_search(net, p2, batch).per_class[0] == pytest.approx(2 * grad_norm_search(net, p1, batch).per_class[0], rel=1e-12)


def test_loss_grad_examples():
    net, params = linear([[0.5, 0.25]])
    x = np.array([[10.0, 10.0]])
    assert loss_grad_penalty(net, params, x, np.array([1]), "hinge") == 0.0
    w = np.array([[1.0, -2.0]])
    net, params = linear(w)
    x = np.array([[2.0, 1.0]])  # <w, x> = 0
    assert loss_grad_penalty(net, params, x, np.array([1]), "logistic") == pytest.approx(5 / 4)
    assert loss_grad_penalty(net, params, x, np.array([1]), "logistic", "linf") == pytest.approx(3 / 2)


def test_loss_grad_first_order_expansion():
    net, params = build_network(mlp(3, (6,), 3, "softplus"), 2)
    x = np.random.default_rng(0).normal(size=(1, 3))
    y = np.array([1])
    clean = loss("cross-entropy", predict(net, params, x), y).item()
    slope = np.sqrt(loss_grad_penalty(net, params, x, y, "cross-entropy"))
    errs = []
    for eps in (0.02, 0.01, 0.005):
        delta = pgd_attack(net, params, "cross-entropy", x, y, AttackConfig(eps, steps=50, step_size=eps / 10))
        robust = loss("cross-entropy", predict(net, params, x + delta), y).item()
        errs.append(abs(robust - (clean + eps * slope)))
    assert errs[1] < errs[0] / 1.8 and errs[2] < errs[1] / 1.8
    assert errs[-1] / 0.005 < 0.05  # o(eps)


DOUBLE_BACKPROP_NET = NetworkSpec((3,), (Linear(5, 3), Softplus(10.0), Linear(4, 5), Softplus(10.0), Linear(2, 4)))


def _param_fd_check(expr_fn, params, tol):
    P = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    gs = grad(expr_fn(P), list(P.values()))
    for (name, v), g in zip(params.items(), gs):
        def f(w, name=name):
            local = dict(params)
            local[name] = w
            return expr_fn(local).item()

        fd = numerical_gradient(f, v, h=1e-5)
        assert relative_error(g.data, fd) < tol, name


@pytest.mark.parametrize("geometry", ["l2", "linf"])
def test_grad_norm_expr_param_gradient(geometry):
    net, params = build_network(DOUBLE_BACKPROP_NET, 0)
    batch = np.random.default_rng(0).normal(size=(4, 3))
    res = grad_norm_search(net, params, batch, geometry)
    assert grad_norm_expr(net, params, res.witnesses, geometry).item() == pytest.approx(res.value, rel=1e-12)
    _param_fd_check(lambda P: grad_norm_expr(net, P, res.witnesses, geometry), params, 1e-4)


@pytest.mark.parametrize("kind,geometry", [("cross-entropy", "l2"), ("cross-entropy", "linf")])
def test_loss_grad_expr_param_gradient(kind, geometry):
    net, params = build_network(DOUBLE_BACKPROP_NET, 1)
    rng = np.random.default_rng(1)
    x, y = rng.normal(size=(4, 3)), rng.integers(0, 2, size=4)
    _param_fd_check(lambda P: loss_grad_expr(net, P, x, y, kind, geometry), params, 1e-4)


def test_adv_expr_param_gradient():
    net, params = build_network(DOUBLE_BACKPROP_NET, 2)
    res = adv_penalty(net, params, np.random.default_rng(2).normal(size=(4, 3)), AttackConfig(0.2))
    _param_fd_check(lambda P: adv_penalty_expr(net, P, res.witnesses), params, 1e-6)
