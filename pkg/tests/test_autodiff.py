import numpy as np
import pytest

from rlrs import autodiff as ad
from rlrs.autodiff import Tape

from gradcheck import central_difference, max_rel_error

TOL = 1e-4
H = 1e-5


def check_op(build, arrays, tol=TOL):
    """Compare tape gradients of a scalarized op against central differences.

    ``build(tape, vars) -> Var`` produces the op output; the check reduces
    it to a scalar by a fixed random weighting so every output element
    contributes.
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    weights = np.random.default_rng(99).normal(size=np.asarray(build_value(build, arrays)).shape)

    def scalar(xs):
        return float((build_value(build, xs) * weights).sum())

    tape = Tape()
    vs = [tape.var(a.copy()) for a in arrays]
    out = build(tape, vs)
    loss = ad.reduce_sum(ad.mul(out, out.tape.var(weights)))
    tape.backward(loss)
    analytic = [v.grad if v.grad is not None else np.zeros_like(v.value) for v in vs]
    numeric = central_difference(scalar, arrays, h=H)
    err = max_rel_error(analytic, numeric)
    assert err < tol, f"max relative error {err:.3g}"


def build_value(build, arrays):
    tape = Tape()
    vs = [tape.var(np.asarray(a, dtype=np.float64).copy()) for a in arrays]
    return build(tape, vs).value


class TestPrimitiveValues:
    def test_matmul_identity(self, rng):
        a = rng.normal(size=(3, 3))
        tape = Tape()
        out = ad.matmul(tape.var(np.eye(3)), tape.var(a))
        assert np.allclose(out.value, a, atol=0, rtol=0)

    def test_softmax_uniform(self):
        tape = Tape()
        out = ad.softmax(tape.var(np.full((2, 5), 3.7)))
        assert np.allclose(out.value, 0.2, atol=1e-15)

    def test_reduce_sum_grad_is_ones(self, rng):
        tape = Tape()
        x = tape.var(rng.normal(size=(4, 3)))
        tape.backward(ad.reduce_sum(x))
        assert np.array_equal(x.grad, np.ones((4, 3)))

    def test_rank_limit(self):
        tape = Tape()
        with pytest.raises(ValueError, match="rank"):
            tape.var(np.zeros((2, 2, 2, 2, 2)))

    def test_shape_mismatch_reports_both_shapes(self, rng):
        tape = Tape()
        a, b = tape.var(rng.normal(size=(2, 3))), tape.var(rng.normal(size=(4, 5)))
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
            ad.add(a, b)
        with pytest.raises(ValueError, match="inner dimensions"):
            ad.matmul(a, b)


class TestBackwardBasics:
    def test_square_at_three(self):
        tape = Tape()
        x = tape.var(np.asarray(3.0))
        tape.backward(ad.mul(x, x))
        assert float(x.grad) == 6.0

    def test_constant_has_zero_gradient(self):
        tape = Tape()
        x = tape.var(np.asarray(2.0))
        c = tape.var(np.asarray(5.0))
        grads = ad.gradients(tape, ad.mul(c, c), {"x": x, "c": c})
        assert grads["x"] == 0.0
        assert grads["c"] == 10.0

    def test_non_scalar_output_rejected(self, rng):
        tape = Tape()
        x = tape.var(rng.normal(size=(3,)))
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(x)

    def test_cross_tape_mixing_rejected(self, rng):
        t1, t2 = Tape(), Tape()
        with pytest.raises(ValueError, match="tape"):
            ad.add(t1.var(rng.normal(size=2)), t2.var(rng.normal(size=2)))

    def test_linearity_of_backward(self, rng):
        x0 = rng.normal(size=(4,))

        def grad_of(combine):
            tape = Tape()
            x = tape.var(x0.copy())
            a = ad.reduce_sum(ad.mul(x, x))
            b = ad.reduce_sum(ad.silu(x))
            tape.backward(combine(a, b))
            return x.grad

        ga = grad_of(lambda a, b: a)
        gb = grad_of(lambda a, b: b)
        gsum = grad_of(ad.add)
        assert np.allclose(gsum, ga + gb, rtol=1e-12, atol=1e-15)

    def test_repeated_backward_resets_grads(self, rng):
        tape = Tape()
        x = tape.var(rng.normal(size=(3,)))
        loss = ad.reduce_sum(ad.mul(x, x))
        tape.backward(loss)
        once = x.grad.copy()
        tape.backward(loss)
        assert np.array_equal(x.grad, once)

    def test_determinism_bitwise(self):
        def run():
            rng = np.random.default_rng(7)
            tape = Tape()
            x = tape.var(rng.normal(size=(5, 4)))
            w = tape.var(rng.normal(size=(4, 3)))
            out = ad.reduce_sum(ad.softmax(ad.matmul(x, w)))
            tape.backward(out)
            return out.value.copy(), x.grad.copy(), w.grad.copy()

        first, second = run(), run()
        for a, b in zip(first, second):
            assert np.array_equal(a, b)


class TestPrimitiveGradients:
    def test_add_broadcast(self, rng):
        check_op(lambda t, v: ad.add(v[0], v[1]), [rng.normal(size=(3, 4)), rng.normal(size=(4,))])

    def test_sub(self, rng):
        check_op(lambda t, v: ad.sub(v[0], v[1]), [rng.normal(size=(2, 3)), rng.normal(size=(2, 3))])

    def test_mul_broadcast(self, rng):
        check_op(lambda t, v: ad.mul(v[0], v[1]), [rng.normal(size=(3, 4)), rng.normal(size=(3, 1))])

    def test_matmul_2d(self, rng):
        check_op(lambda t, v: ad.matmul(v[0], v[1]), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))])

    def test_matmul_batched(self, rng):
        check_op(
            lambda t, v: ad.matmul(v[0], v[1]),
            [rng.normal(size=(2, 2, 3, 4)), rng.normal(size=(2, 2, 4, 3))],
        )

    def test_matmul_stacked_times_flat(self, rng):
        check_op(lambda t, v: ad.matmul(v[0], v[1]), [rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))])

    def test_transpose(self, rng):
        check_op(lambda t, v: ad.transpose(v[0], (1, 0, 2)), [rng.normal(size=(2, 3, 4))])

    def test_reshape(self, rng):
        check_op(lambda t, v: ad.reshape(v[0], (6, 2)), [rng.normal(size=(3, 4))])

    def test_split_and_concat(self, rng):
        def build(t, v):
            parts = ad.split(v[0], 3, axis=1)
            return ad.concat([parts[2], parts[0], parts[1]], axis=1)

        check_op(build, [rng.normal(size=(2, 6))])

    def test_reduce_sum_axis(self, rng):
        check_op(lambda t, v: ad.reduce_sum(v[0], axis=1), [rng.normal(size=(3, 4))])

    def test_reduce_sum_keepdims(self, rng):
        check_op(lambda t, v: ad.reduce_sum(v[0], axis=-1, keepdims=True), [rng.normal(size=(3, 4))])

    def test_mean(self, rng):
        check_op(lambda t, v: ad.mean(v[0], axis=0), [rng.normal(size=(5, 2))])

    def test_embedding_lookup(self, rng):
        ids = np.array([[0, 2, 2], [1, 0, 3]])
        check_op(lambda t, v: ad.embedding_lookup(v[0], ids), [rng.normal(size=(4, 5))])

    def test_softmax(self, rng):
        check_op(lambda t, v: ad.softmax(v[0]), [rng.normal(size=(3, 6))])

    def test_logsumexp(self, rng):
        check_op(lambda t, v: ad.logsumexp(v[0]), [rng.normal(size=(4, 7))])

    def test_silu(self, rng):
        check_op(lambda t, v: ad.silu(v[0]), [rng.normal(size=(3, 5))])

    def test_swiglu(self, rng):
        check_op(
            lambda t, v: ad.swiglu(v[0], v[1], v[2], v[3]),
            [
                rng.normal(size=(4, 3)),
                rng.normal(size=(3, 6)),
                rng.normal(size=(3, 6)),
                rng.normal(size=(6, 3)),
            ],
        )

    def test_rms_norm(self, rng):
        check_op(lambda t, v: ad.rms_norm(v[0], v[1]), [rng.normal(size=(4, 6)), rng.normal(size=(6,))])

    def test_take_rows_with_duplicates(self, rng):
        idx = np.array([0, 2, 2, 1])
        check_op(lambda t, v: ad.take_rows(v[0], idx), [rng.normal(size=(3, 4))])

    def test_take_rows_unique_fast_path(self, rng):
        idx = np.array([2, 0, 3])
        check_op(lambda t, v: ad.take_rows(v[0], idx, unique=True), [rng.normal(size=(4, 5))])

    def test_scatter_rows(self, rng):
        idx = np.array([4, 1, 2])
        check_op(lambda t, v: ad.scatter_rows(v[0], idx, 6), [rng.normal(size=(3, 4))])

    def test_gather_last(self, rng):
        idx = np.array([1, 3, 0])
        check_op(lambda t, v: ad.gather_last(v[0], idx), [rng.normal(size=(3, 4))])

    def test_operator_sugar(self, rng):
        check_op(lambda t, v: (v[0] + 2.0) * v[1] - v[0], [rng.normal(size=(3,)), rng.normal(size=(3,))])


class TestMlpGradient:
    def test_two_layer_mlp_matches_finite_differences(self, rng):
        x = rng.normal(size=(5, 4))
        w1 = rng.normal(size=(4, 8)) * 0.5
        w2 = rng.normal(size=(8, 3)) * 0.5
        gain = rng.normal(size=(3,)) + 1.0

        def build(t, v):
            h = ad.silu(ad.matmul(v[0], v[1]))
            return ad.rms_norm(ad.matmul(h, v[2]), v[3])

        check_op(build, [x, w1, w2, gain], tol=1e-5)
