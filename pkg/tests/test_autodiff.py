import numpy as np
import pytest

from embedlab.autodiff import (
    Graph,
    GraphError,
    Param,
    evaluate,
    finite_diff_grad,
    grad_check,
    gradient,
    param_gradients,
)


def half_sq_norm_graph():
    g = Graph()
    x = g.placeholder("x")
    g.mark_output(g.scale(g.dot(x, x), 0.5))
    return g


class TestEvaluate:
    def test_identity(self):
        g = Graph()
        g.mark_output(g.placeholder("x"))
        np.testing.assert_array_equal(evaluate(g, {"x": np.array([3.0])}), [3.0])

    def test_half_square_norm(self):
        g = half_sq_norm_graph()
        assert float(evaluate(g, {"x": np.array([3.0, 4.0])})) == 12.5

    def test_cosine_parallel(self):
        g = Graph()
        a = g.placeholder("a")
        g.mark_output(g.cosine(a, g.constant(np.array([2.0, 4.0]))))
        out = evaluate(g, {"a": np.array([1.0, 2.0])})
        assert float(out) == pytest.approx(1.0, abs=1e-15)

    def test_unbound_input_rejected(self):
        g = half_sq_norm_graph()
        with pytest.raises(GraphError, match="unbound"):
            evaluate(g, {})

    def test_nonfinite_rejected_with_node_identity(self):
        g = half_sq_norm_graph()
        with pytest.raises(GraphError, match="node 0"):
            evaluate(g, {"x": np.array([np.inf, 1.0])})


class TestGradient:
    def test_half_square_norm_gradient_is_x(self):
        g = half_sq_norm_graph()
        x = np.array([3.0, 4.0])
        evaluate(g, {"x": x})
        np.testing.assert_array_equal(gradient(g, "x"), x)

    def test_tanh_at_zero(self):
        g = Graph()
        x = g.placeholder("x")
        g.mark_output(g.vsum(g.tanh(x)))
        evaluate(g, {"x": np.array([0.0])})
        np.testing.assert_array_equal(gradient(g, "x"), [1.0])

    def test_cosine_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        y = rng.standard_normal(5)
        g = Graph()
        x = g.placeholder("x")
        g.mark_output(g.cosine(x, g.constant(y)))
        x0 = rng.standard_normal(5)
        evaluate(g, {"x": x0})
        auto = gradient(g, "x")
        fd = finite_diff_grad(lambda v: float(evaluate(g, {"x": v})), x0, 1e-6)
        evaluate(g, {"x": x0})
        assert np.linalg.norm(auto - fd) / np.linalg.norm(fd) < 1e-6

    def test_requires_scalar_output(self):
        g = Graph()
        x = g.placeholder("x")
        g.mark_output(g.tanh(x))
        evaluate(g, {"x": np.array([0.3, 0.4])})
        with pytest.raises(GraphError, match="scalar"):
            gradient(g, "x")

    def test_gradient_before_evaluate_rejected(self):
        g = half_sq_norm_graph()
        with pytest.raises(GraphError, match="evaluate"):
            gradient(Graph(), "x") if False else gradient(g, "x")

    def test_sum_of_graphs_linearity_exact(self):
        """Building f1 + f2 in one graph gives gradient g1 + g2 bitwise."""
        rng = np.random.default_rng(5)
        W1 = rng.standard_normal((3, 3))
        W2 = rng.standard_normal((3, 3))
        x0 = rng.standard_normal(3)

        def single(W):
            g = Graph()
            x = g.placeholder("x")
            g.mark_output(g.dot(g.tanh(g.affine(x, W)), g.constant(np.ones(3))))
            evaluate(g, {"x": x0})
            return gradient(g, "x")

        g = Graph()
        x = g.placeholder("x")
        f1 = g.dot(g.tanh(g.affine(x, W1)), g.constant(np.ones(3)))
        f2 = g.dot(g.tanh(g.affine(x, W2)), g.constant(np.ones(3)))
        g.mark_output(g.add(f1, f2))
        evaluate(g, {"x": x0})
        combined = gradient(g, "x")
        np.testing.assert_array_equal(combined, single(W1) + single(W2))


class TestGradCheck:
    def test_linear_graph_is_exact(self):
        g = Graph()
        x = g.placeholder("x")
        g.mark_output(g.dot(x, g.constant(np.array([2.0, -1.0, 0.5]))))
        evaluate(g, {"x": np.array([0.3, 0.7, -0.2])})
        assert grad_check(g, "x", probe_count=3, step=1e-6) <= 1e-10

    def test_tanh_mlp(self):
        rng = np.random.default_rng(11)
        g = Graph()
        x = g.placeholder("x")
        h1 = g.tanh(g.affine(x, rng.standard_normal((8, 4)), rng.standard_normal(8)))
        h2 = g.tanh(g.affine(h1, rng.standard_normal((8, 8)), rng.standard_normal(8)))
        g.mark_output(g.dot(h2, g.constant(rng.standard_normal(8))))
        evaluate(g, {"x": rng.standard_normal(4)})
        assert grad_check(g, "x", probe_count=4, step=1e-5) <= 1e-6

    def test_constant_graph_zero_gradient(self):
        g = Graph()
        g.placeholder("x")
        g.mark_output(g.constant(np.array(4.2)))
        evaluate(g, {"x": np.array([1.0, 2.0])})
        np.testing.assert_array_equal(gradient(g, "x"), np.zeros(2))
        assert grad_check(g, "x", probe_count=2, step=1e-6) == 0.0


def _primitive_cases(rng):
    """One scalar-output graph builder per primitive, with a random input."""
    d = 5
    W = rng.standard_normal((4, d))
    b = rng.standard_normal(4)
    A = rng.standard_normal((d, d))
    yvec = rng.standard_normal(d)
    mu = rng.standard_normal(d)
    var = rng.uniform(0.5, 2.0, d)
    ones4 = np.ones(4)

    def out_affine(g, x):
        return g.dot(g.affine(x, W, b), g.constant(ones4))

    def out_tanh(g, x):
        return g.vsum(g.tanh(x))

    def out_silu(g, x):
        return g.vsum(g.silu(x))

    def out_softmax(g, x):
        return g.pick(g.softmax(x), 2)

    def out_logsumexp(g, x):
        return g.logsumexp(x)

    def out_dot(g, x):
        return g.dot(x, g.constant(yvec))

    def out_norm(g, x):
        return g.norm(x)

    def out_cosine(g, x):
        return g.cosine(x, g.constant(yvec))

    def out_quadform(g, x):
        return g.quadform(x, A)

    def out_gauss(g, x):
        return g.gauss_logpdf(x, g.constant(mu), var)

    def out_gauss_mu(g, x):
        return g.gauss_logpdf(g.constant(mu), x, var)

    def out_mix(g, x):
        s = g.smul(g.pick(g.softmax(x), 0), g.sub(x, g.constant(mu)))
        return g.logsumexp(g.concat([s, g.mul(x, x)]))

    return [out_affine, out_tanh, out_silu, out_softmax, out_logsumexp,
            out_dot, out_norm, out_cosine, out_quadform, out_gauss,
            out_gauss_mu, out_mix]


def test_every_primitive_matches_central_differences():
    """100 random probes spread over the primitive set, 1e-6 relative."""
    rng = np.random.default_rng(42)
    cases = _primitive_cases(rng)
    probes_per_case = 100 // len(cases) + 1
    for build in cases:
        for _ in range(probes_per_case):
            g = Graph()
            x = g.placeholder("x")
            g.mark_output(build(g, x))
            x0 = rng.standard_normal(5) * 1.5
            evaluate(g, {"x": x0})
            auto = gradient(g, "x")
            fd = finite_diff_grad(lambda v: float(evaluate(g, {"x": v})), x0, 1e-6)
            err = np.linalg.norm(auto - fd) / (np.linalg.norm(fd) + 1e-12)
            assert err < 1e-6, f"{build.__name__}: {err}"


def test_param_gradients_accumulate():
    """Affine weights receive exact outer-product gradients."""
    rng = np.random.default_rng(9)
    W = Param(rng.standard_normal((3, 4)))
    bvec = Param(np.zeros(3))
    g = Graph()
    x = g.placeholder("x")
    g.mark_output(g.dot(g.affine(x, W, bvec), g.constant(np.array([1.0, 2.0, 3.0]))))
    x0 = rng.standard_normal(4)
    evaluate(g, {"x": x0})
    param_gradients(g)
    np.testing.assert_allclose(W.grad, np.outer([1.0, 2.0, 3.0], x0), rtol=1e-15)
    np.testing.assert_allclose(bvec.grad, [1.0, 2.0, 3.0], rtol=1e-15)
