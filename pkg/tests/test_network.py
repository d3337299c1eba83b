import math

import numpy as np
import pytest

from pcp_transfer.network import (
    Architecture,
    NetworkParams,
    ShapeError,
    forward,
    forward_many,
    glorot_init,
    grad_params,
    jacobian,
    layer_grad_sq_norms,
    param_counts,
    vjp,
)

SIM_ARCH = Architecture((30, 24, 16, 12, 8, 1))


def naive_forward(arch, flat, x):
    """Straight-line re-implementation: explicit loops over units."""
    h = list(x)
    pos = 0
    for (d, k), act in zip(zip(arch.widths[:-1], arch.widths[1:]), arch.activations):
        W = [[flat[pos + r * d + c] for c in range(d)] for r in range(k)]
        pos += k * d
        b = [flat[pos + r] for r in range(k)]
        pos += k
        z = [sum(W[r][c] * h[c] for c in range(d)) + b[r] for r in range(k)]
        h = [max(v, 0.0) for v in z] if act == "relu" else z
    return h[0]


def central_fd(fun, flat, h=1e-5):
    g = np.empty_like(flat)
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (fun(up) - fun(dn)) / (2 * h)
    return g


class TestArchitecture:
    def test_param_counts(self):
        assert param_counts(Architecture((1, 1))) == (2,)
        assert param_counts(SIM_ARCH) == (744, 400, 204, 104, 9)
        assert param_counts(Architecture((3, 4, 1)))[0] == 16

    def test_defaults_relu_hidden_identity_output(self):
        assert SIM_ARCH.activations == ("relu",) * 4 + ("identity",)

    @pytest.mark.parametrize("widths", [(3,), (3, 0, 1), (3, 2)])
    def test_rejects_bad_widths(self, widths):
        with pytest.raises(ShapeError):
            Architecture(widths)

    def test_rejects_nonlinear_output(self):
        with pytest.raises(ShapeError):
            Architecture((2, 1), ("relu",))

    def test_counts_sum_to_flat_length(self):
        rng = np.random.default_rng(0)
        p = glorot_init(SIM_ARCH, rng)
        assert sum(param_counts(SIM_ARCH)) == p.flat.size


class TestForward:
    def test_zero_network(self):
        p = NetworkParams.zeros(SIM_ARCH)
        assert forward(p, np.ones(30)) == 0.0

    def test_identity_case(self):
        arch = Architecture.linear((2, 2, 1))
        flat = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
        assert forward(NetworkParams(arch, flat), np.array([1.0, 2.0])) == 1.0

    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(7)
        p = glorot_init(SIM_ARCH, rng)
        p.flat[:] += rng.normal(scale=0.1, size=p.flat.size)
        for _ in range(5):
            x = rng.normal(size=30)
            assert abs(forward(p, x) - naive_forward(SIM_ARCH, p.flat, x)) < 1e-12

    def test_batch_matches_rows(self):
        rng = np.random.default_rng(1)
        p = glorot_init(SIM_ARCH, rng)
        X = rng.normal(size=(6, 30))
        np.testing.assert_allclose(forward(p, X), [forward(p, x) for x in X], rtol=0, atol=1e-14)

    def test_forward_many(self):
        rng = np.random.default_rng(2)
        thetas = np.stack([glorot_init(SIM_ARCH, rng).flat for _ in range(4)])
        X = rng.normal(size=(5, 30))
        out = forward_many(thetas, SIM_ARCH, X)
        expected = [forward(NetworkParams(SIM_ARCH, t), X) for t in thetas]
        np.testing.assert_allclose(out, expected, atol=1e-13)

    def test_shape_error(self):
        p = NetworkParams.zeros(SIM_ARCH)
        with pytest.raises(ShapeError):
            forward(p, np.ones(29))
        with pytest.raises(ShapeError):
            NetworkParams(SIM_ARCH, np.zeros(3))

    def test_homogeneous_in_final_weights(self):
        rng = np.random.default_rng(3)
        p = glorot_init(SIM_ARCH, rng)
        x = rng.normal(size=30)
        q = p.copy()
        W, b = q.layer(SIM_ARCH.n_layers - 1)
        b[:] = 0.0
        base = forward(q, x)
        W *= 2.5
        assert forward(q, x) == pytest.approx(2.5 * base, rel=1e-14)


class TestGradients:
    def test_dead_units(self):
        p = NetworkParams.zeros(SIM_ARCH)
        g = grad_params(p, np.ones(30))
        assert g.head[-1] == 1.0
        assert np.all(g.flat[:-1] == 0.0)

    def test_finite_differences_random(self):
        rng = np.random.default_rng(11)
        arch = Architecture((5, 4, 3, 1))
        for _ in range(10):
            p = glorot_init(arch, rng)
            p.flat[:] += rng.normal(scale=0.3, size=p.flat.size)
            x = rng.normal(size=5)
            g = grad_params(p, x).flat
            fd = central_fd(lambda f: forward(NetworkParams(arch, f), x), p.flat)
            np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-9)

    def test_linear_network_closed_form(self):
        rng = np.random.default_rng(5)
        arch = Architecture.linear((4, 3, 2, 1))
        p = NetworkParams(arch, rng.normal(size=arch.n_params))
        x = rng.normal(size=4)
        (W1, _), (W2, _), (W3, _) = (p.layer(i) for i in range(3))
        downstream = (W3 @ W2).ravel()  # d f / d (W1 x + b1)
        expected = np.outer(downstream, x)
        W1_grad, b1_grad = grad_params(p, x).layer(0)
        np.testing.assert_allclose(W1_grad, expected, atol=1e-14)
        np.testing.assert_allclose(b1_grad, downstream, atol=1e-14)

    def test_jacobian_and_vjp_agree(self):
        rng = np.random.default_rng(9)
        p = glorot_init(SIM_ARCH, rng)
        X = rng.normal(size=(7, 30))
        J = jacobian(p, X)
        for n in range(7):
            np.testing.assert_allclose(J[n], grad_params(p, X[n]).flat, atol=1e-14)
        g = rng.normal(size=7)
        np.testing.assert_allclose(vjp(p, X, g).flat, g @ J, atol=1e-12)

    def test_layer_norms_match_jacobian(self):
        rng = np.random.default_rng(4)
        p = glorot_init(SIM_ARCH, rng)
        X = rng.normal(size=(6, 30))
        J = jacobian(p, X)
        expected = np.stack(
            [np.sum(J[:, SIM_ARCH.layer_slice(i)] ** 2, axis=1) for i in range(SIM_ARCH.n_layers)], axis=1
        )
        np.testing.assert_allclose(layer_grad_sq_norms(p, X), expected, rtol=1e-12)


class TestGlorot:
    def test_bounds(self):
        rng = np.random.default_rng(0)
        arch = Architecture.linear((2, 2, 1))
        for _ in range(50):
            W, b = glorot_init(arch, rng).layer(0)
            assert np.all(np.abs(W) <= math.sqrt(6 / 4))
            assert np.all(b == 0)

    def test_deterministic(self):
        a = glorot_init(SIM_ARCH, np.random.default_rng(123)).flat
        b = glorot_init(SIM_ARCH, np.random.default_rng(123)).flat
        assert np.array_equal(a, b)

    def test_variance(self):
        arch = Architecture.linear((300, 400, 1))
        W, _ = glorot_init(arch, np.random.default_rng(0)).layer(0)
        assert W.var() == pytest.approx(2 / 700, rel=0.05)
