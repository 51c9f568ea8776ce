"""Gradient-engine checks: every op against central finite differences."""

import numpy as np
import pytest

from concaveq import autodiff as ad


def fd_grad(fn, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(x)
        flat[i] = orig - step
        down = fn(x)
        flat[i] = orig
        gf[i] = (up - down) / (2 * step)
    return g


def check_unary(op, np_fn, rng, shape=(3, 4), low=-2.0, high=2.0, kink=None):
    """Analytic vs finite-difference gradients on 100 random inputs."""
    for _ in range(100):
        x = rng.uniform(low, high, size=shape)
        if kink is not None:
            x = x + np.where(np.abs(x) < 0.05, 0.1 * np.sign(x) + 0.05, 0.0)
        node = ad.parameter(x)
        loss = ad.sum_all(ad.mul(op(node), ad.constant(rng.uniform(-1, 1, shape))))
        wait = loss.value  # force forward
        assert np.isfinite(wait).all()
        ad.backward(loss)
        weights_loss = lambda arr: float(
            (np_fn(arr) * loss_weights).sum())  # noqa: E731
        loss_weights = loss._parents[0]._parents[1].value
        expected = fd_grad(weights_loss, x.copy())
        np.testing.assert_allclose(ad.grad(node), expected, rtol=1e-4, atol=1e-6)


class TestElementwiseGradients:
    def test_relu_value(self):
        assert float(ad.relu(ad.constant(-2.0)).value) == 0.0
        assert float(ad.relu(ad.constant(3.5)).value) == 3.5

    def test_abs_value(self):
        assert float(ad.absval(ad.constant(-0.7)).value) == 0.7

    def test_softmax_symmetry(self):
        s = ad.softmax(ad.constant([0.0, 0.0, 0.0]))
        np.testing.assert_allclose(s.value, [1 / 3] * 3, atol=1e-15)

    def test_relu_subgradient_zero_at_zero(self):
        x = ad.parameter(0.0)
        ad.backward(ad.sum_all(ad.relu(x)))
        assert float(ad.grad(x)) == 0.0

    def test_abs_subgradient_zero_at_zero(self):
        x = ad.parameter(0.0)
        ad.backward(ad.sum_all(ad.absval(x)))
        assert float(ad.grad(x)) == 0.0

    def test_square_gradient(self):
        x = ad.parameter(3.0)
        ad.backward(ad.mul(x, x))
        assert float(ad.grad(x)) == pytest.approx(6.0, abs=1e-12)

    @pytest.mark.parametrize("op,np_fn,low,high,kink", [
        (ad.relu, lambda x: np.maximum(x, 0), -2, 2, True),
        (ad.absval, np.abs, -2, 2, True),
        (ad.neg, lambda x: -x, -2, 2, None),
        (ad.square, lambda x: x * x, -2, 2, None),
        (ad.exp, np.exp, -2, 2, None),
        (ad.log, np.log, 0.1, 3, None),
    ])
    def test_unary_matches_central_differences(self, op, np_fn, low, high, kink):
        rng = np.random.default_rng(7)
        shape = (3, 4)
        for _ in range(100):
            x = rng.uniform(low, high, size=shape)
            if kink:
                x = x + np.where(np.abs(x) < 0.05, np.sign(x) * 0.1 + 0.05, 0.0)
            w = rng.uniform(-1, 1, shape)
            node = ad.parameter(x)
            ad.backward(ad.sum_all(ad.mul(op(node), ad.constant(w))))
            expected = fd_grad(lambda a: float((np_fn(a) * w).sum()), x.copy())
            err = np.abs(ad.grad(node) - expected) / np.maximum(1, np.abs(expected))
            assert err.max() < 1e-4


class TestBinaryAndShapeGradients:
    @pytest.mark.parametrize("shapes", [((3, 4), (3, 4)), ((3, 4), (4,)),
                                        ((3, 1), (1, 4)), ((2, 3, 4), (4,))])
    def test_add_mul_broadcast(self, shapes):
        rng = np.random.default_rng(11)
        for op, np_fn in [(ad.add, np.add), (ad.mul, np.multiply),
                          (ad.sub, np.subtract)]:
            for _ in range(25):
                a = rng.uniform(-2, 2, shapes[0])
                b = rng.uniform(-2, 2, shapes[1])
                w = rng.uniform(-1, 1, np.broadcast_shapes(*shapes))
                na, nb = ad.parameter(a), ad.parameter(b)
                ad.backward(ad.sum_all(ad.mul(op(na, nb), ad.constant(w))))
                ga = fd_grad(lambda x: float((np_fn(x, b) * w).sum()), a.copy())
                gb = fd_grad(lambda x: float((np_fn(a, x) * w).sum()), b.copy())
                np.testing.assert_allclose(ad.grad(na), ga, rtol=1e-4, atol=1e-7)
                np.testing.assert_allclose(ad.grad(nb), gb, rtol=1e-4, atol=1e-7)

    def test_affine_matches_central_differences(self):
        rng = np.random.default_rng(13)
        for _ in range(100):
            x = rng.uniform(-1, 1, (5, 3))
            w = rng.uniform(-1, 1, (4, 3))
            b = rng.uniform(-1, 1, (4,))
            out_w = rng.uniform(-1, 1, (5, 4))
            nx, nw, nb = ad.parameter(x), ad.parameter(w), ad.parameter(b)
            ad.backward(ad.sum_all(ad.mul(ad.affine(nx, nw, nb), ad.constant(out_w))))

            def f(xx, ww, bb):
                return float(((xx @ ww.T + bb) * out_w).sum())

            np.testing.assert_allclose(
                ad.grad(nx), fd_grad(lambda a: f(a, w, b), x.copy()), rtol=1e-4, atol=1e-7)
            np.testing.assert_allclose(
                ad.grad(nw), fd_grad(lambda a: f(x, a, b), w.copy()), rtol=1e-4, atol=1e-7)
            np.testing.assert_allclose(
                ad.grad(nb), fd_grad(lambda a: f(x, w, a), b.copy()), rtol=1e-4, atol=1e-7)

    def test_affine_shape_error_names_shapes(self):
        with pytest.raises(ad.ShapeError, match="affine"):
            ad.affine(ad.constant(np.zeros((2, 3))),
                      ad.constant(np.zeros((4, 5))),
                      ad.constant(np.zeros(4)))

    def test_bmatvec_both_ranks(self):
        rng = np.random.default_rng(17)
        for xs in [(6, 3), (6, 2, 3)]:
            for _ in range(50):
                w = rng.uniform(-1, 1, (6, 4, 3))
                x = rng.uniform(-1, 1, xs)
                ow = rng.uniform(-1, 1, xs[:-1] + (4,))
                nw, nx = ad.parameter(w), ad.parameter(x)
                ad.backward(ad.sum_all(ad.mul(ad.bmatvec(nw, nx), ad.constant(ow))))

                def f(ww, xx):
                    if xx.ndim == 2:
                        val = np.einsum("boi,bi->bo", ww, xx)
                    else:
                        val = np.einsum("boi,bci->bco", ww, xx)
                    return float((val * ow).sum())

                np.testing.assert_allclose(
                    ad.grad(nw), fd_grad(lambda a: f(a, x), w.copy()), rtol=1e-4, atol=1e-7)
                np.testing.assert_allclose(
                    ad.grad(nx), fd_grad(lambda a: f(w, a), x.copy()), rtol=1e-4, atol=1e-7)

    def test_concat_slice_reshape_take(self):
        rng = np.random.default_rng(19)
        for _ in range(50):
            a = rng.uniform(-1, 1, (4, 3))
            b = rng.uniform(-1, 1, (4, 2))
            w = rng.uniform(-1, 1, (4, 5))
            na, nb = ad.parameter(a), ad.parameter(b)
            cat = ad.concat([na, nb], axis=-1)
            ad.backward(ad.sum_all(ad.mul(cat, ad.constant(w))))
            np.testing.assert_allclose(ad.grad(na), w[:, :3])
            np.testing.assert_allclose(ad.grad(nb), w[:, 3:])

            idx = rng.integers(0, 3, size=(4,))
            na2 = ad.parameter(a)
            ad.backward(ad.sum_all(ad.take_last(na2, idx)))
            expected = np.zeros_like(a)
            expected[np.arange(4), idx] = 1.0
            np.testing.assert_allclose(ad.grad(na2), expected)

            na3 = ad.parameter(a)
            sl = ad.slice_last(na3, 1, 3)
            ad.backward(ad.sum_all(ad.mul(sl, ad.constant(w[:, 1:3]))))
            expected = np.zeros_like(a)
            expected[:, 1:3] = w[:, 1:3]
            np.testing.assert_allclose(ad.grad(na3), expected)

    def test_softmax_logsoftmax_gradients(self):
        rng = np.random.default_rng(23)
        for op, np_fn in [
            (ad.softmax, lambda x: np.exp(x) / np.exp(x).sum(-1, keepdims=True)),
            (ad.log_softmax,
             lambda x: x - np.log(np.exp(x).sum(-1, keepdims=True))),
        ]:
            for _ in range(100):
                x = rng.uniform(-3, 3, (5, 4))
                w = rng.uniform(-1, 1, (5, 4))
                node = ad.parameter(x)
                ad.backward(ad.sum_all(ad.mul(op(node), ad.constant(w))))
                expected = fd_grad(lambda a: float((np_fn(a) * w).sum()), x.copy())
                err = np.abs(ad.grad(node) - expected) / np.maximum(1, np.abs(expected))
                assert err.max() < 1e-4


class TestBackwardContract:
    def test_backward_requires_scalar(self):
        with pytest.raises(ValueError, match="scalar"):
            ad.backward(ad.constant(np.zeros(3)))

    def test_disconnected_node_gets_exact_zero(self):
        x = ad.parameter([1.0, 2.0])
        y = ad.parameter([3.0, 4.0])
        ad.backward(ad.sum_all(ad.square(x)))
        assert y.grad is None
        np.testing.assert_array_equal(ad.grad(y), np.zeros(2))

    def test_backward_deterministic_bitwise(self):
        rng = np.random.default_rng(29)
        x = ad.parameter(rng.uniform(-1, 1, (8, 5)))
        w = ad.parameter(rng.uniform(-1, 1, (7, 5)))
        b = ad.parameter(rng.uniform(-1, 1, (7,)))

        def run():
            for p in (x, w, b):
                p.grad = None
            out = ad.relu(ad.affine(x, w, b))
            ad.backward(ad.sum_all(ad.mul(out, out)))
            return ad.grad(x).copy(), ad.grad(w).copy(), ad.grad(b).copy()

        g1 = run()
        g2 = run()
        for a, b_ in zip(g1, g2):
            assert np.array_equal(a, b_)

    def test_fanout_accumulates(self):
        # y = x*x + x used twice: dy/dx = 2x + 1
        x = ad.parameter(3.0)
        ad.backward(ad.add(ad.mul(x, x), x))
        assert float(ad.grad(x)) == pytest.approx(7.0, abs=1e-12)


class TestGradCheck:
    def test_quadratic_form_passes_tight(self):
        rng = np.random.default_rng(31)
        params = {f"p{i}": ad.parameter(rng.uniform(-1, 1, (3,))) for i in range(10)}
        coef = {k: rng.uniform(0.5, 2.0, (3,)) for k in params}

        def loss():
            terms = [ad.sum_all(ad.mul(ad.square(p), ad.constant(coef[k])))
                     for k, p in params.items()]
            total = terms[0]
            for t in terms[1:]:
                total = ad.add(total, t)
            return total

        report = ad.grad_check(loss, params, step=1e-5, tolerance=1e-6)
        assert report.passed, report.lines()

    def test_corrupted_gradient_fails(self):
        p = ad.parameter(np.array([1.0, -2.0]))

        def loss():
            out = ad.sum_all(ad.square(p))
            return ad.scale(out, 1.0)

        report = ad.grad_check(loss, {"p": p}, step=1e-5, tolerance=1e-6)
        assert report.passed

        class Doubled:
            value = p.value
            grad = None

        doubled = ad.parameter(p.value)

        def bad_loss():
            # analytic path sees 2x the parameter; FD path perturbs `doubled`
            return ad.sum_all(ad.square(ad.scale(doubled, np.sqrt(2.0))))

        report = ad.grad_check(bad_loss, {"p": doubled}, step=1e-5, tolerance=1e-6)
        assert not report.passed

    def test_nonfinite_perturbation_names_parameter(self):
        p = ad.parameter(np.array([0.0]))

        def loss():
            return ad.sum_all(ad.log(p))

        with pytest.raises(ad.GradCheckError, match=r"p\[0\]"):
            ad.grad_check(loss, {"p": p}, step=1e-5, tolerance=1e-4)

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            ad.grad_check(lambda: ad.constant(0.0), {}, step=0.0)
