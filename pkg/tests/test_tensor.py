"""Engine tests: forward shapes, hand-checked gradients, finite-difference
oracles for every primitive, and structural invariants of the tape."""

import numpy as np
import pytest

from auxvae import tensor as T


def leaf(arr, grad=True):
    return T.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


class TestForwardBasics:
    def test_matmul_hand(self):
        out = T.matmul(T.Tensor([[1.0, 2.0], [3.0, 4.0]]), T.Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_conv2d_size_formula(self):
        # floor((33 + 2*1 - 4)/2) + 1 = 16
        x = T.Tensor(np.zeros((1, 1, 33, 33)))
        w = T.Tensor(np.zeros((32, 1, 4, 4)))
        assert T.conv2d(x, w, stride=2, padding=1).shape == (1, 32, 16, 16)

    def test_conv_transpose_size_formula(self):
        # (8 - 1)*4 - 0 + 5 = 33
        x = T.Tensor(np.zeros((1, 2, 8, 8)))
        w = T.Tensor(np.zeros((2, 1, 5, 5)))
        assert T.conv_transpose2d(x, w, stride=4, padding=0).shape == (1, 1, 33, 33)

    def test_conv2d_delta_kernel_identity(self):
        rng = np.random.default_rng(0)
        x = T.Tensor(rng.normal(size=(2, 3, 5, 5)))
        w = np.zeros((3, 3, 1, 1))
        for c in range(3):
            w[c, c, 0, 0] = 1.0
        out = T.conv2d(x, T.Tensor(w), stride=1, padding=0)
        np.testing.assert_array_equal(out.data, x.data)

    def test_bias_broadcast(self):
        x = T.Tensor(np.ones((4, 3)))
        b = T.Tensor(np.array([1.0, 2.0, 3.0]))
        out = T.add(x, b)
        np.testing.assert_array_equal(out.data, np.ones((4, 3)) + [1, 2, 3])

    def test_shape_errors_name_the_op(self):
        with pytest.raises(T.ShapeError, match="matmul"):
            T.matmul(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((2, 3))))
        with pytest.raises(T.ShapeError, match="add"):
            T.add(T.Tensor(np.ones((2, 3))), T.Tensor(np.ones((3, 2))))
        with pytest.raises(T.ShapeError, match="conv2d"):
            T.conv2d(T.Tensor(np.ones((1, 1, 2, 2))),
                     T.Tensor(np.ones((1, 1, 4, 4))), stride=1, padding=0)

    def test_debug_checks_flag(self):
        T.set_debug_checks(True)
        try:
            with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
                T.log(T.Tensor(np.array([-1.0])))
        finally:
            T.set_debug_checks(False)


class TestBackwardBasics:
    def test_sigmoid_grad_at_zero(self):
        x = leaf([0.0])
        g = T.backward(T.tensor_sum(T.sigmoid(x)), wrt=[x])[x]
        np.testing.assert_allclose(g.data, [0.25], atol=1e-15)

    def test_sum_of_squares_grad(self):
        x = leaf([1.0, 2.0, 3.0])
        g = T.backward(T.tensor_sum(T.square(x)), wrt=[x])[x]
        np.testing.assert_array_equal(g.data, [2.0, 4.0, 6.0])

    def test_non_scalar_loss_rejected(self):
        x = leaf([1.0, 2.0])
        with pytest.raises(T.GradientError, match="scalar"):
            T.backward(T.square(x))

    def test_detached_loss_rejected(self):
        with pytest.raises(T.GradientError, match="detached"):
            T.backward(T.Tensor(np.array(1.0)))

    def test_unused_parameter_gets_zero_grad(self):
        x, y = leaf([1.0, 2.0]), leaf([[3.0]])
        g = T.backward(T.tensor_sum(x), wrt=[x, y])
        np.testing.assert_array_equal(g[x].data, [1.0, 1.0])
        np.testing.assert_array_equal(g[y].data, [[0.0]])

    def test_reuse_accumulates(self):
        x = leaf([2.0])
        loss = T.tensor_sum(T.multiply(x, x))  # x used twice
        g = T.backward(loss, wrt=[x])[x]
        np.testing.assert_allclose(g.data, [4.0])

    def test_chain_rule_linearity(self):
        # grad(a*f + b*g) == a*grad(f) + b*grad(g) exactly at 64-bit
        rng = np.random.default_rng(7)
        for _ in range(5):
            x = leaf(rng.normal(size=6))
            a, b = rng.normal(), rng.normal()

            def f(t):
                return T.tensor_sum(T.multiply(T.exp(T.multiply(t, 0.3)), t))

            def g(t):
                return T.mean(T.square(T.tanh(t)))

            combined = T.add(T.multiply(f(x), a), T.multiply(g(x), b))
            gc = T.backward(combined, wrt=[x])[x].data
            gf = T.backward(f(x), wrt=[x])[x].data
            gg = T.backward(g(x), wrt=[x])[x].data
            np.testing.assert_allclose(gc, a * gf + b * gg, atol=1e-12)

    def test_no_grad_suppresses_recording(self):
        x = leaf([1.0])
        with T.no_grad():
            y = T.square(x)
        assert y.node is None and not y.requires_grad


class TestRoundTrips:
    def test_reshape_round_trip(self):
        rng = np.random.default_rng(1)
        x = T.Tensor(rng.normal(size=(3, 4)))
        back = T.reshape(T.reshape(x, (2, 6)), (3, 4))
        np.testing.assert_array_equal(back.data, x.data)

    def test_slice_concat_round_trip(self):
        rng = np.random.default_rng(2)
        x = T.Tensor(rng.normal(size=(4, 6)))
        parts = [T.slice_axis(x, 1, 0, 2), T.slice_axis(x, 1, 2, 6)]
        np.testing.assert_array_equal(T.concat(parts, axis=1).data, x.data)

    def test_slice_out_of_range(self):
        with pytest.raises(T.ShapeError, match="slice"):
            T.slice_axis(T.Tensor(np.ones((2, 3))), 1, 2, 5)


def _nudged(rng, shape, margin=0.25):
    """Random point with every coordinate kept away from zero."""
    x = rng.normal(size=shape)
    return x + np.sign(x) * margin


# input builders per primitive: seed -> (function of a flat point, point)
def _primitive_cases(seed):
    rng = np.random.default_rng(seed)
    a23 = rng.normal(size=(2, 3))
    b34 = rng.normal(size=(3, 4))
    m23 = rng.normal(size=(2, 3))
    img = rng.normal(size=(1, 2, 6, 6))
    ker = rng.normal(size=(3, 2, 3, 3))
    tker = rng.normal(size=(2, 3, 3, 3))
    bias3 = rng.normal(size=3)
    pos = np.abs(rng.normal(size=(2, 3))) + 0.5

    def over(shape, fn):
        return lambda p: fn(T.reshape(p, shape))

    cases = {
        "matmul": (over((2, 3), lambda t: T.mean(T.matmul(t, T.Tensor(b34)))),
                   a23.ravel()),
        "add": (over((2, 3), lambda t: T.mean(T.add(t, T.Tensor(bias3)))),
                a23.ravel()),
        "subtract": (over((2, 3), lambda t: T.mean(T.subtract(T.Tensor(m23), t))),
                     a23.ravel()),
        "multiply": (over((2, 3), lambda t: T.mean(T.multiply(t, T.Tensor(m23)))),
                     a23.ravel()),
        "divide": (over((2, 3), lambda t: T.mean(T.divide(T.Tensor(m23), t))),
                   pos.ravel()),
        "negate": (over((2, 3), lambda t: T.mean(T.negate(t))), a23.ravel()),
        "relu": (over((2, 3), lambda t: T.mean(T.relu(t))),
                 _nudged(rng, (2, 3)).ravel()),
        "sigmoid": (over((2, 3), lambda t: T.mean(T.sigmoid(t))), a23.ravel()),
        "tanh": (over((2, 3), lambda t: T.mean(T.tanh(t))), a23.ravel()),
        "exp": (over((2, 3), lambda t: T.mean(T.exp(t))), a23.ravel()),
        "log": (over((2, 3), lambda t: T.mean(T.log(t))), pos.ravel()),
        "square": (over((2, 3), lambda t: T.mean(T.square(t))), a23.ravel()),
        "sqrt": (over((2, 3), lambda t: T.mean(T.sqrt(t))), pos.ravel()),
        "power": (over((2, 3), lambda t: T.mean(T.power(t, 3.0))), a23.ravel()),
        "absolute": (over((2, 3), lambda t: T.mean(T.absolute(t))),
                     _nudged(rng, (2, 3)).ravel()),
        "clamp": (over((2, 3), lambda t: T.mean(T.clamp(t, -1.0, 1.0))),
                  _nudged(rng, (2, 3), margin=0.3).ravel() * 0.4),
        "sum": (over((2, 3), lambda t: T.multiply(T.tensor_sum(T.tensor_sum(t, axis=0)), 0.5)),
                a23.ravel()),
        "mean": (over((2, 3), lambda t: T.tensor_sum(T.mean(t, axis=1))), a23.ravel()),
        "reshape": (over((2, 3), lambda t: T.mean(T.square(T.reshape(t, (3, 2))))),
                    a23.ravel()),
        "transpose": (over((2, 3), lambda t: T.mean(T.matmul(T.transpose(t), t))),
                      a23.ravel()),
        "slice": (over((2, 3), lambda t: T.mean(T.square(T.slice_axis(t, 1, 1, 3)))),
                  a23.ravel()),
        "concat": (over((2, 3), lambda t: T.mean(T.square(
                       T.concat([t, T.multiply(t, 2.0)], axis=0)))),
                   a23.ravel()),
        "conv2d": (over((3, 2, 3, 3), lambda t: T.mean(T.conv2d(
                       T.Tensor(img), t, T.Tensor(bias3), stride=2, padding=1))),
                   ker.ravel()),
        "conv_transpose2d": (over((2, 3, 3, 3), lambda t: T.mean(T.conv_transpose2d(
                                 T.Tensor(img), t, T.Tensor(bias3), stride=2, padding=1))),
                             tker.ravel()),
    }
    return cases


class TestGradChecks:
    @pytest.mark.parametrize("kind", sorted(T.PRIMITIVES))
    def test_primitive_gradients(self, kind):
        for seed in range(3):
            fn, point = _primitive_cases(seed)[kind]
            report = T.grad_check(fn, T.Tensor(point), step=1e-5, tol=1e-4)
            assert report.passed, f"{kind} seed {seed}: {report}"

    def test_conv2d_input_gradient(self):
        rng = np.random.default_rng(5)
        w = T.Tensor(rng.normal(size=(2, 1, 3, 3)))

        def f(p):
            return T.mean(T.conv2d(T.reshape(p, (1, 1, 6, 6)), w,
                                   stride=2, padding=1))

        report = T.grad_check(f, T.Tensor(rng.normal(size=36)), tol=1e-4)
        assert report.passed

    def test_grad_check_linear_exact(self):
        report = T.grad_check(lambda t: T.tensor_sum(t),
                              T.Tensor(np.arange(5.0)), tol=1e-12)
        np.testing.assert_array_equal(report.analytic, np.ones(5))
        assert report.max_rel_error <= 1e-10

    def test_grad_check_rejects_nonfinite(self):
        with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
            T.grad_check(lambda t: T.tensor_sum(T.log(t)),
                         T.Tensor(np.array([1e-6])), step=1e-5)


class TestPrimitiveRegistry:
    def test_dispatch(self):
        out = T.apply_primitive("add", [T.Tensor([1.0]), T.Tensor([2.0])])
        np.testing.assert_array_equal(out.data, [3.0])
        with pytest.raises(KeyError):
            T.apply_primitive("fft", [])

    def test_required_primitives_present(self):
        required = {"matmul", "add", "subtract", "multiply", "relu", "sigmoid",
                    "tanh", "exp", "log", "square", "sum", "mean", "reshape",
                    "slice", "concat", "conv2d", "conv_transpose2d"}
        assert required <= set(T.PRIMITIVES)
