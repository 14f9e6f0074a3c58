import numpy as np
import pytest

from kernreg.autodiff import (
    ComputeGraph,
    GraphShapeError,
    NonScalarRootError,
    ShapeError,
    Tensor,
    evaluate,
    grad,
    ops,
    param_gradient,
    trace,
)
from kernreg.autodiff.check import numerical_gradient, relative_error


def _value(fn, *arrays):
    return float(fn(*[Tensor(a) for a in arrays]).data)


class TestEvaluate:
    def test_product(self):
        g = trace(lambda x, y: x * y, {"x": 2.0, "y": 3.0})
        assert evaluate(g, {"x": 2.0, "y": 3.0}).item() == 6.0

    def test_relu_negative(self):
        g = trace(lambda x: ops.relu(x), {"x": -1.0})
        assert evaluate(g, {"x": -1.0}).item() == 0.0

    def test_three_layer_graph_matches_straight_line(self):
        rng = np.random.default_rng(1)
        shapes = {"W1": (5, 4), "W2": (6, 5), "W3": (3, 6)}

        def net(W1, W2, W3, x):
            h = ops.relu(ops.matmul(W1, x))
            h = ops.softplus(ops.matmul(W2, h), beta=2.0)
            return ops.matmul(W3, h)

        init = {k: rng.normal(size=s) for k, s in shapes.items()}
        g = trace(net, init, {"x": rng.normal(size=(4, 2))})
        for _ in range(20):
            b = {k: rng.normal(size=s) for k, s in shapes.items()}
            b["x"] = rng.normal(size=(4, 2))
            h = np.maximum(b["W1"] @ b["x"], 0)
            h = np.logaddexp(0, 2.0 * (b["W2"] @ h)) / 2.0
            expected = b["W3"] @ h
            np.testing.assert_allclose(evaluate(g, b).data, expected, rtol=1e-13, atol=1e-13)

    def test_shape_mismatch_names_node(self):
        g = trace(lambda w, x: ops.sum(ops.matmul(w, x)), {"w": np.ones((2, 3))}, {"x": np.ones((3, 1))})
        with pytest.raises(GraphShapeError, match=r"node \d+ \(matmul\)"):
            g.evaluate({"w": np.ones((2, 3)), "x": np.ones((4, 1))})

    def test_eager_shape_mismatch(self):
        with pytest.raises(ShapeError, match="matmul"):
            ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_unbound_leaf(self):
        g = trace(lambda x, y: x * y, {"x": 1.0, "y": 1.0})
        with pytest.raises(KeyError):
            g.evaluate({"x": 1.0})

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        w = rng.normal(size=(8, 16))
        x = rng.normal(size=(16, 32))
        g = trace(lambda w, x: ops.sum(ops.relu(ops.matmul(w, x)) ** 2), {"w": w}, {"x": x})
        a = g.param_gradient({"w": w, "x": x})["w"].data
        b = g.param_gradient({"w": w, "x": x})["w"].data
        assert a.tobytes() == b.tobytes()


class TestParamGradient:
    def test_linear(self):
        g = trace(lambda w, x: w * x, {"w": 5.0}, {"x": 3.0})
        assert g.param_gradient({"w": 5.0, "x": 3.0})["w"].item() == 3.0

    def test_relu_sum_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        W = rng.normal(size=(6, 4))
        x = rng.normal(size=(4,))
        assert np.min(np.abs(W @ x)) > 1e-3
        g = trace(lambda W, x: ops.sum(ops.relu(ops.matmul(W, ops.reshape(x, (4, 1))))), {"W": W}, {"x": x})
        got = param_gradient(g, {"W": W, "x": x})["W"].data
        fd = numerical_gradient(lambda w: np.maximum(w @ x, 0).sum(), W)
        assert relative_error(got, fd) < 1e-6

    def test_unused_leaf_is_zero(self):
        g = trace(lambda w, v, x: x * 2.0 + v, {"w": np.ones(3), "v": 1.0}, {"x": np.ones(3)})
        out = trace(lambda w, v, x: ops.sum(x * 2.0 + v), {"w": np.ones(3), "v": 1.0}, {"x": np.ones(3)})
        grads = out.param_gradient({"w": np.ones(3), "v": 1.0, "x": np.ones(3)})
        np.testing.assert_array_equal(grads["w"].data, np.zeros(3))
        assert grads["v"].item() == 3.0
        assert len(g) > 0

    def test_non_scalar_root(self):
        g = trace(lambda w: w * 2.0, {"w": np.ones(3)})
        with pytest.raises(NonScalarRootError):
            g.param_gradient({"w": np.ones(3)})
        with pytest.raises(NonScalarRootError):
            grad(Tensor(np.ones(3), requires_grad=True) * 2.0, [Tensor(1.0)])

    def test_differentiate_twice(self):
        g = trace(lambda x: x * x * x, {"x": 2.0})
        d1 = g.differentiate(["x"])
        d2 = d1.differentiate(["x"])
        assert d1.evaluate({"x": 3.0}).item() == pytest.approx(27.0)
        assert d2.evaluate({"x": 3.0}).item() == pytest.approx(18.0)

    def test_differentiated_graph_recomputes_relu_mask(self):
        g = trace(lambda w, x: ops.sum(ops.relu(w * x)), {"w": 1.0}, {"x": np.array([1.0, -2.0, 3.0])})
        dg = g.differentiate(["w"])
        assert dg.evaluate({"w": 1.0, "x": np.array([1.0, -2.0, 3.0])}).item() == 4.0
        assert dg.evaluate({"w": -1.0, "x": np.array([1.0, -2.0, 3.0])}).item() == -2.0


# (name, function of tensors, input shapes, sampler) for every primitive
def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _normal(rng, shape):
    return rng.normal(size=shape)


def _away_from_zero(rng, shape):
    return rng.choice([-1, 1], size=shape) * rng.uniform(0.2, 2.0, size=shape)


def _distinct(rng, shape):
    # ties make max non-differentiable; a random permutation of a grid avoids them
    n = int(np.prod(shape))
    return (rng.permutation(n) * 0.37 + rng.uniform(0, 0.1)).reshape(shape)


PRIMITIVES = [
    ("add", lambda a, b: a + b, [(3, 4), (4,)], _normal),
    ("sub", lambda a, b: a - b, [(3, 4), (3, 1)], _normal),
    ("mul", lambda a, b: a * b, [(3, 4), (3, 4)], _normal),
    ("div", lambda a, b: a / b, [(3, 4), (3, 4)], _positive),
    ("neg", lambda a: -a, [(5,)], _normal),
    ("power", lambda a: a**3, [(5,)], _normal),
    ("power-frac", lambda a: a**1.5, [(5,)], _positive),
    ("exp", lambda a: ops.exp(a), [(5,)], _normal),
    ("log", lambda a: ops.log(a), [(5,)], _positive),
    ("sqrt", lambda a: ops.sqrt(a), [(5,)], _positive),
    ("relu", lambda a: ops.relu(a), [(6,)], _away_from_zero),
    ("abs", lambda a: ops.abs(a), [(6,)], _away_from_zero),
    ("sigmoid", lambda a: ops.sigmoid(a), [(6,)], _normal),
    ("softplus", lambda a: ops.softplus(a, beta=3.0), [(6,)], _normal),
    ("reshape", lambda a: ops.reshape(a, (6, 2)), [(3, 4)], _normal),
    ("transpose", lambda a: ops.transpose(a, (1, 0, 2)), [(2, 3, 2)], _normal),
    ("sum-axis", lambda a: ops.sum(a, axis=1), [(3, 4)], _normal),
    ("sum-keep", lambda a: ops.sum(a, axis=(0, 2), keepdims=True), [(2, 3, 2)], _normal),
    ("index", lambda a: a[np.array([0, 2, 2])], [(3, 4)], _normal),
    ("max", lambda a: ops.max(a, axis=1), [(3, 5)], _distinct),
    ("broadcast", lambda a: ops.broadcast_to(a, (3, 4)), [(1, 4)], _normal),
    ("matmul", lambda a, b: ops.matmul(a, b), [(3, 4), (4, 2)], _normal),
    ("conv2d", lambda x, w: ops.conv2d(x, w, stride=1, padding=1), [(2, 2, 5, 5), (3, 2, 3, 3)], _normal),
    ("conv2d-strided", lambda x, w: ops.conv2d(x, w, stride=2, padding=(0, 1)), [(1, 2, 5, 6), (2, 2, 3, 2)], _normal),
    ("conv2d-input-grad", lambda g, w: ops.conv2d_input_grad(g, w, (2, 5, 5), 1, 1), [(2, 3, 5, 5), (3, 2, 3, 3)], _normal),
    ("conv2d-weight-grad", lambda x, g: ops.conv2d_weight_grad(x, g, (3, 2, 3, 3), 1, 1), [(2, 2, 5, 5), (2, 3, 5, 5)], _normal),
    ("avgpool2d", lambda x: ops.avg_pool2d(x, 2), [(2, 2, 5, 4)], _normal),
    ("avgunpool2d", lambda g: ops.avg_unpool2d(g, 2, (5, 4)), [(2, 2, 2, 2)], _normal),
    ("maxpool2d", lambda x: ops.max_pool2d(x, (1, 2)), [(2, 2, 1, 6)], _distinct),
    ("global-maxpool", lambda x: ops.global_max_pool2d(x), [(2, 3, 3, 3)], _distinct),
    ("logsumexp", lambda a: ops.logsumexp(a, axis=1), [(3, 4)], _normal),
]


@pytest.mark.parametrize("name,fn,shapes,sampler", PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
def test_primitive_gradient_matches_finite_differences(name, fn, shapes, sampler):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    worst = 0.0
    for _ in range(100):
        arrays = [sampler(rng, s) for s in shapes]
        out_shape = fn(*[Tensor(a) for a in arrays]).shape
        proj = rng.normal(size=out_shape)
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        got = grad(ops.sum(fn(*leaves) * proj), leaves)
        for i, a in enumerate(arrays):

            def scalar(v, i=i):
                args = list(arrays)
                args[i] = v
                return float(np.sum(fn(*[Tensor(z) for z in args]).data * proj))

            fd = numerical_gradient(scalar, a)
            worst = max(worst, relative_error(got[i].data, fd))
    assert worst < 1e-6, f"{name}: worst relative error {worst:.2e}"


@pytest.mark.parametrize(
    "name,fn,shapes,sampler",
    [p for p in PRIMITIVES if p[0] in {"mul", "conv2d", "conv2d-input-grad", "conv2d-weight-grad", "softplus", "maxpool2d", "avgpool2d", "div", "power"}],
    ids=lambda p: p if isinstance(p, str) else None,
)
def test_second_order_matches_finite_differences(name, fn, shapes, sampler):
    """Differentiate ||grad_x <proj, fn(x, ...)>||^2 with respect to every input."""
    rng = np.random.default_rng(7)
    for _ in range(5):
        arrays = [sampler(rng, s) for s in shapes]
        proj = rng.normal(size=fn(*[Tensor(a) for a in arrays]).shape)

        def penalty(*ts):
            (gx,) = grad(ops.sum(fn(*ts) * proj), [ts[0]], create_graph=True)
            return ops.sum(gx * gx)

        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        got = grad(penalty(*leaves), leaves)
        for i, a in enumerate(arrays):

            def scalar(v, i=i):
                args = [Tensor(z, requires_grad=True) for z in arrays]
                args[i] = Tensor(v, requires_grad=True)
                return penalty(*args).item()

            fd = numerical_gradient(scalar, a)
            assert relative_error(got[i].data, fd) < 1e-6, name


def test_linearity_of_differentiation():
    rng = np.random.default_rng(11)
    for _ in range(20):
        W = rng.normal(size=(4, 3))
        x = rng.normal(size=(3, 5))
        alpha, beta = rng.normal(size=2)

        def A(W):
            return ops.sum(ops.softplus(ops.matmul(W, Tensor(x))) ** 2)

        def B(W):
            return ops.sum(ops.exp(ops.matmul(W, Tensor(x)) * 0.1))

        w = Tensor(W, requires_grad=True)
        (gc,) = grad(A(w) * alpha + B(w) * beta, [w])
        (ga,) = grad(A(w), [w])
        (gb,) = grad(B(w), [w])
        np.testing.assert_allclose(gc.data, alpha * ga.data + beta * gb.data, rtol=0, atol=1e-12 * max(1, np.abs(gc.data).max()))


def test_compute_graph_topological():
    g = trace(lambda w, x: ops.sum(ops.relu(w * x) + w), {"w": 2.0}, {"x": np.ones(3)})
    for i, node in enumerate(g.nodes):
        assert all(p < i for p in node.parents)
    assert isinstance(g, ComputeGraph)
