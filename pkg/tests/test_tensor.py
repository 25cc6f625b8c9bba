"""Tensor core: arithmetic, reductions, and the recorded-trace backward."""

import numpy as np
import pytest

from dpec.errors import (
    AxisOutOfRange,
    DivisionDomain,
    NonScalarRoot,
    ShapeMismatch,
)
from dpec import tensor as T
from dpec.tensor import Tape, Tensor

from util import check_grads


def rnd(shape, seed=0, dtype=np.float64):
    return np.random.default_rng(seed).standard_normal(shape).astype(dtype)


class TestForward:
    def test_add(self):
        out = T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(out.data, [4.0, 6.0])

    def test_silu_at_zero(self):
        assert T.silu(Tensor([0.0])).item() == 0.0

    def test_silu_value(self):
        x = 1.3
        expect = x / (1.0 + np.exp(-x))
        assert T.silu(Tensor([x])).item() == pytest.approx(expect, rel=1e-12)

    def test_scalar_broadcast(self):
        out = Tensor([1.0, 2.0, 3.0]) * Tensor(2.0)
        np.testing.assert_array_equal(out.data, [2.0, 4.0, 6.0])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            T.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))

    def test_div_strict_zero(self):
        with pytest.raises(DivisionDomain):
            T.div(Tensor([1.0]), Tensor([0.0]), strict=True)
        # non-strict follows IEEE
        assert np.isinf(T.div(Tensor([1.0]), Tensor([0.0])).data[0])

    def test_elementwise_dispatch(self):
        out = T.elementwise("mul", Tensor([2.0]), Tensor([3.0]))
        assert out.item() == 6.0
        with pytest.raises(ValueError):
            T.elementwise("nope", Tensor([1.0]))

    def test_matmul(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[1.0], [1.0]])
        np.testing.assert_array_equal((a @ b).data, [[3.0], [7.0]])

    def test_matmul_identity(self):
        x = Tensor(rnd((3, 3)))
        out = Tensor(np.eye(3)) @ x
        np.testing.assert_allclose(out.data, x.data)

    def test_matmul_bad_shapes(self):
        with pytest.raises(ShapeMismatch):
            T.matmul(Tensor(rnd((2, 3))), Tensor(rnd((2, 3))))

    def test_reduce_sum(self):
        assert T.reduce("sum", Tensor([1.0, 2.0, 3.0])).item() == 6.0

    def test_reduce_mean_constant(self):
        c = 0.7
        out = T.reduce("mean", Tensor(np.full((4, 5), c)))
        assert out.item() == pytest.approx(c)

    def test_reduce_axis_out_of_range(self):
        with pytest.raises(AxisOutOfRange):
            T.reduce("sum", Tensor([1.0]), axes=3)

    def test_immutability(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError):
            t.data[0] = 5.0

    def test_row_major_round_trip(self):
        arr = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
        t = Tensor(arr)
        for i in range(2):
            for j in range(3):
                for k in range(4):
                    flat = (i * 3 + j) * 4 + k
                    assert t.data[i, j, k] == t.data.reshape(-1)[flat] == flat


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(rnd((3, 4)), requires_grad=True)
        with Tape() as tape:
            loss = x.sum()
        g = tape.backward(loss).grad(x)
        np.testing.assert_array_equal(g, np.ones((3, 4)))

    def test_square_gives_2x(self):
        x = Tensor(rnd((5,)), requires_grad=True)
        with Tape() as tape:
            loss = (x * x).sum()
        g = tape.backward(loss).grad(x)
        np.testing.assert_allclose(g, 2 * x.data)

    def test_max_tie_first_occurrence(self):
        x = Tensor([2.0, 5.0, 5.0], requires_grad=True)
        with Tape() as tape:
            loss = T.reduce("max", x)
        g = tape.backward(loss).grad(x)
        np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])

    def test_min_axis_ties(self):
        x = Tensor([[3.0, 1.0, 1.0], [2.0, 2.0, 4.0]], requires_grad=True)
        with Tape() as tape:
            loss = T.reduce("min", x, axes=1).sum()
        g = tape.backward(loss).grad(x)
        np.testing.assert_array_equal(g, [[0, 1, 0], [1, 0, 0]])

    def test_non_scalar_root(self):
        x = Tensor(rnd((3,)), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(NonScalarRoot):
            tape.backward(y)

    def test_unrecorded_root(self):
        x = Tensor(rnd((1,)))
        with Tape() as tape:
            y = x * 2.0  # nothing requires grad, so nothing is recorded
        with pytest.raises(NonScalarRoot):
            tape.backward(y)

    def test_untouched_leaf_zero_adjoint(self):
        x = Tensor(rnd((3,)), requires_grad=True)
        y = Tensor(rnd((3,)), requires_grad=True)
        with Tape() as tape:
            tape.watch(y)
            loss = x.sum()
        grads = tape.backward(loss)
        np.testing.assert_array_equal(grads.grad(y), np.zeros(3))

    def test_chain_linearity(self):
        x = Tensor(rnd((6,)), requires_grad=True)
        a, b = 2.5, -1.25

        def run(fn):
            with Tape() as tape:
                loss = fn(x)
            return tape.backward(loss).grad(x)

        f = lambda t: (t * t).sum()
        g = lambda t: T.exp(t).sum()
        combo = run(lambda t: a * f(t) + b * g(t))
        np.testing.assert_allclose(
            combo, a * run(f) + b * run(g), rtol=0, atol=1e-12
        )

    def test_determinism(self):
        x = Tensor(rnd((16,)), requires_grad=True)

        def run():
            with Tape() as tape:
                loss = (T.silu(x * 3.0) * T.sigmoid(x)).sum()
            return tape.backward(loss).grad(x).tobytes()

        assert run() == run()


class TestGradChecks:
    """Central finite differences at random coordinates, f64."""

    @pytest.mark.parametrize(
        "name,fn",
        [
            ("exp", T.exp),
            ("sqrt", lambda t: T.sqrt(T.absolute(t) + 0.5)),
            ("abs", T.absolute),
            ("silu", T.silu),
            ("sigmoid", T.sigmoid),
            ("softplus", T.softplus),
            ("log", lambda t: T.log(T.absolute(t) + 0.5)),
            ("pow", lambda t: T.power(T.absolute(t) + 0.5, 0.4)),
            ("clip", lambda t: T.clip(t * 0.3, -0.5, 0.5)),
        ],
    )
    def test_unary(self, name, fn):
        params = {"x": Tensor(rnd((4, 5), seed=3), requires_grad=True)}
        check_grads(lambda p: fn(p["x"]).sum(), params, rtol=1e-5)

    def test_silu_slope_at_1p5(self):
        x = Tensor([1.5], requires_grad=True)
        with Tape() as tape:
            y = T.silu(x).sum()
        an = tape.backward(y).grad(x)[0]
        h = 1e-6
        s = lambda v: v / (1.0 + np.exp(-v))
        fd = (s(1.5 + h) - s(1.5 - h)) / (2 * h)
        assert abs(an - fd) / abs(fd) < 1e-6

    def test_binary_ops(self):
        params = {
            "a": Tensor(rnd((3, 4), seed=1), requires_grad=True),
            "b": Tensor(rnd((3, 4), seed=2) + 3.0, requires_grad=True),
        }

        def build(p):
            return ((p["a"] * p["b"] + p["a"]) / p["b"] - p["a"]).sum()

        check_grads(build, params, rtol=1e-5)

    def test_matmul_grad(self):
        params = {
            "a": Tensor(rnd((4, 3), seed=5), requires_grad=True),
            "b": Tensor(rnd((3, 2), seed=6), requires_grad=True),
        }
        check_grads(lambda p: (p["a"] @ p["b"]).sum(), params, rtol=1e-6)

    def test_reductions_grad(self):
        params = {"x": Tensor(rnd((4, 6), seed=7), requires_grad=True)}
        check_grads(
            lambda p: T.reduce("mean", p["x"], axes=1).sum()
            + T.reduce("max", p["x"], axes=0).sum(),
            params,
        )

    def test_structural_grad(self):
        params = {"x": Tensor(rnd((2, 3, 4), seed=8), requires_grad=True)}

        def build(p):
            y = T.transpose(p["x"], (2, 0, 1)).reshape((4, 6))
            y = T.concat([y, y * 2.0], axis=1)
            y = T.pad_nd(y, ((1, 1), (0, 2)), mode="reflect")
            return (y * y)[1:4, 2:9].sum()

        check_grads(build, params)

    def test_take_tokens_grad(self):
        perm = np.array([3, 0, 2, 1])
        params = {"x": Tensor(rnd((2, 4, 3), seed=9), requires_grad=True)}
        check_grads(
            lambda p: (T.take_tokens(p["x"], perm) ** 2.0).sum(), params
        )

    def test_composite_chain(self):
        params = {
            "w": Tensor(rnd((4, 4), seed=10) * 0.3, requires_grad=True),
            "x": Tensor(rnd((4, 4), seed=11), requires_grad=True),
        }

        def build(p):
            h = T.silu(p["x"] @ p["w"])
            return (h * T.sigmoid(h)).mean()

        check_grads(build, params)
