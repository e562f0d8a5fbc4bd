import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mccf import diffgraph as dg
from mccf.diffgraph import ShapeError, Tape, TapeError, Tensor

H = 1e-5


def numeric_grads(f, inputs, h=H):
    """Central differences of scalar f() w.r.t. each array in ``inputs`` (perturbed in place)."""
    out = []
    for x in inputs:
        g = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            orig = x[idx]
            x[idx] = orig + h
            up = f()
            x[idx] = orig - h
            down = f()
            x[idx] = orig
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def check_op(build, *arrays_in, seed=0, tol=1e-6):
    """Compare tape gradients of sum(R * build(*tensors)) with central differences."""
    rng = np.random.default_rng(seed)
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays_in]
    probe = build(*tensors).data
    R = rng.normal(size=np.shape(probe))

    with Tape() as tape:
        loss = dg.sum(dg.mul(build(*tensors), R))
    tape.backward(loss)

    def f():
        return float(np.sum(build(*tensors).data * R))

    numeric = numeric_grads(f, [t.data for t in tensors])
    for t, n in zip(tensors, numeric):
        a = t.grad if t.grad is not None else np.zeros_like(n)
        err = np.abs(a - n) / (np.abs(a) + 1e-8)
        assert np.all((err < tol) | (np.abs(a - n) < 1e-9)), (np.max(np.abs(a - n)), np.max(err))


def rnd(*shape, seed=1, lo=None):
    x = np.random.default_rng(seed).normal(size=shape)
    if lo is not None:  # keep away from a kink / the log singularity
        x = np.sign(x) * (np.abs(x) + lo)
    return x


class TestPrimitiveGradients:
    def test_matmul_3x3(self):
        check_op(dg.matmul, rnd(3, 3), rnd(3, 3, seed=2))

    @pytest.mark.parametrize("sa,sb", [((4,), (4, 3)), ((2, 4), (4,)), ((4,), (4,)),
                                       ((2, 3, 4), (2, 4, 5)), ((2, 3, 4), (4, 2))])
    def test_matmul_shapes(self, sa, sb):
        check_op(dg.matmul, rnd(*sa), rnd(*sb, seed=3))

    def test_matvec(self):
        check_op(dg.matvec, rnd(3, 4), rnd(4, seed=2))

    @pytest.mark.parametrize("op", [dg.add, dg.sub, dg.mul])
    def test_broadcast_arith(self, op):
        check_op(op, rnd(3, 1, 4), rnd(2, 1, seed=2))
        check_op(op, rnd(3), rnd(seed=4))

    def test_neg_scale(self):
        check_op(dg.neg, rnd(2, 3))
        check_op(lambda x: dg.scale(x, -2.5), rnd(2, 3))

    def test_sparse_matmul(self):
        x = sp.random(5, 4, density=0.5, random_state=0, format="csr")
        check_op(lambda w: dg.sparse_matmul(x, w), rnd(4, 3))
        check_op(lambda w: dg.sparse_matmul(x.toarray(), w), rnd(4, 3))

    def test_shape_ops(self):
        check_op(lambda x: dg.transpose(x, (2, 0, 1)), rnd(2, 3, 4))
        check_op(lambda x: dg.reshape(x, (6, 2)), rnd(3, 4))
        check_op(lambda a, b: dg.concat([a, b], axis=1), rnd(2, 3), rnd(2, 2, seed=2))
        check_op(lambda x: dg.take(x, [2, 0, 2, 1], axis=1), rnd(3, 4))
        check_op(lambda x: dg.take(x, np.array([[0, 1], [1, 1]]), axis=0), rnd(2, 3))

    def test_reductions(self):
        check_op(lambda x: dg.sum(x, axis=1), rnd(3, 4))
        check_op(lambda x: dg.sum(x, axis=0, keepdims=True), rnd(3, 4))
        check_op(lambda x: dg.mean(x, axis=(0, 2)), rnd(2, 3, 4))
        check_op(dg.mean, rnd(5))

    @pytest.mark.parametrize("spec,sa,sb", [("bmd,md->bm", (2, 3, 4), (3, 4)),
                                            ("bm,bmd->bd", (2, 3), (2, 3, 4)),
                                            ("ij,jk->ik", (2, 3), (3, 2))])
    def test_einsum(self, spec, sa, sb):
        check_op(lambda a, b: dg.einsum(spec, a, b), rnd(*sa), rnd(*sb, seed=2))

    def test_einsum_rejects_private_sum(self):
        with pytest.raises(ShapeError):
            dg.einsum("ij,k->k", Tensor(np.ones((2, 2))), Tensor(np.ones(2)))

    def test_nonlinearities(self):
        check_op(dg.relu, rnd(4, 5, lo=0.01))
        check_op(lambda x: dg.leaky_relu(x, 0.2), rnd(4, 5, lo=0.01))
        check_op(dg.sigmoid, rnd(4, 5) * 4)
        check_op(dg.exp, rnd(3, 3))
        check_op(dg.log, np.abs(rnd(3, 3, lo=0.1)))
        check_op(lambda x: dg.clamp(x, -0.5, 0.5), rnd(10, lo=0.01) * 0.3 + 0.01)

    def test_softmax(self):
        check_op(dg.softmax, rnd(5))
        check_op(lambda x: dg.softmax(x, axis=0), rnd(4, 3))
        mask = np.array([[True, False, True], [False, False, False], [True, True, True]])
        check_op(lambda x: dg.softmax(x, axis=1, mask=mask), rnd(3, 3))

    def test_dropout_with_fixed_mask_is_linear(self):
        check_op(lambda x: dg.dropout(x, 0.5, np.random.default_rng(3), True), rnd(4, 4))

    def test_pointwise_and_custom(self):
        check_op(lambda x: dg.pointwise(x, np.sin(x.data), np.cos(x.data)), rnd(6))
        check_op(lambda a, b: dg.custom("prod", (a, b), a.data * b.data,
                                        lambda g: (g * b.data, g * a.data)), rnd(3), rnd(3, seed=5))

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)),
           arrays(np.float64, (4, 2), elements=st.floats(-3, 3)))
    def test_matmul_randomized(self, a, b):
        check_op(dg.matmul, a, b)


class TestExamples:
    def test_matvec_identity(self):
        np.testing.assert_array_equal(dg.matvec(np.eye(2), np.array([3.0, 4.0])).data, [3, 4])

    def test_concat_then_sum_routes_one(self):
        a, b = Tensor([1.0], requires_grad=True), Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            c = dg.concat([a, b])
            loss = dg.sum(c)
        np.testing.assert_array_equal(c.data, [1, 2])
        tape.backward(loss)
        np.testing.assert_array_equal(a.grad, [1.0])
        np.testing.assert_array_equal(b.grad, [1.0])

    def test_scalar_grads(self):
        x = Tensor(3.0, requires_grad=True)
        with Tape() as tape:
            y = x * x
        tape.backward(y)
        assert float(x.grad) == 6.0
        x, y = Tensor(2.0, requires_grad=True), Tensor(5.0, requires_grad=True)
        with Tape() as tape:
            z = x * y
        tape.backward(z)
        assert (float(x.grad), float(y.grad)) == (5.0, 2.0)

    def test_activation_values(self):
        np.testing.assert_array_equal(dg.relu(np.array([-1.0, 0.0, 2.0])).data, [0, 0, 2])
        assert float(dg.sigmoid(0.0).data) == 0.5
        assert float(dg.leaky_relu(-1.0, 0.2).data) == pytest.approx(-0.2)

    def test_relu_subgradient_at_zero(self):
        x = Tensor(np.zeros(3), requires_grad=True)
        with Tape() as tape:
            loss = dg.sum(dg.relu(x))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, 0.0)

    def test_sigmoid_saturates_without_warnings(self):
        with np.errstate(all="raise"):
            s = dg.sigmoid(np.array([-800.0, 800.0])).data
        np.testing.assert_array_equal(s, [0.0, 1.0])


class TestSoftmax:
    def test_examples(self):
        np.testing.assert_array_equal(dg.softmax(np.zeros(2)).data, [0.5, 0.5])
        with np.errstate(all="raise"):
            np.testing.assert_array_equal(dg.softmax(np.array([1000.0, 1000.0])).data, [0.5, 0.5])

    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)),
           st.floats(-100, 100))
    def test_normalized_and_shift_invariant(self, x, c):
        y = dg.softmax(x).data
        assert np.all(y >= 0)
        assert abs(y.sum() - 1.0) < 1e-12
        np.testing.assert_allclose(dg.softmax(x + c).data, y, atol=1e-12)

    def test_mask(self):
        x = np.array([[3.0, 100.0, 1.0], [5.0, 6.0, 7.0]])
        mask = np.array([[True, False, True], [False, False, False]])
        y = dg.softmax(x, axis=1, mask=mask).data
        np.testing.assert_allclose(y[0], [np.exp(2) / (np.exp(2) + 1), 0, 1 / (np.exp(2) + 1)])
        np.testing.assert_array_equal(y[1], 0.0)


class TestDropout:
    def test_identity_cases(self):
        x = Tensor(np.arange(5.0))
        assert dg.dropout(x, 0.0, np.random.default_rng(0), True) is x
        assert dg.dropout(x, 0.5, None, False) is x

    def test_survivors_and_mean(self):
        x = np.ones(100_000)
        y = dg.dropout(x, 0.5, np.random.default_rng(0), True).data
        assert abs(np.mean(y != 0) - 0.5) < 0.01
        assert abs(y.mean() - 1.0) < 0.01

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            dg.dropout(np.ones(2), 1.0, np.random.default_rng(0), True)


class TestTape:
    def test_non_scalar_loss(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with Tape() as tape:
            y = x * 2.0
        with pytest.raises(ShapeError):
            tape.backward(y)

    def test_reuse_is_an_error(self):
        x = Tensor(1.0, requires_grad=True)
        with Tape() as tape:
            y = x * x
        tape.backward(y)
        with pytest.raises(TapeError):
            tape.backward(y)
        with pytest.raises(TapeError):
            with tape:
                pass

    def test_topological_record(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape() as tape:
            y = dg.sum(dg.relu(x * 2.0) + x)
        produced = set()
        for node in tape.nodes:
            for inp in node.inputs:
                assert inp._op is None or id(inp) in produced
            produced.add(id(node.output))
        tape.backward(y)

    def test_no_recording_outside_tape(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = x * 3.0
        assert y._op is None and not y.requires_grad

    def test_shape_errors(self):
        with pytest.raises(ShapeError):
            dg.matmul(np.ones((2, 3)), np.ones((2, 3)))
        with pytest.raises(ShapeError):
            dg.add(np.ones(2), np.ones(3))
        with pytest.raises(ShapeError):
            dg.reshape(np.ones(4), (3,))

    def test_linearity(self):
        rng = np.random.default_rng(0)
        xa = rng.normal(size=4)

        def grad_of(build):
            x = Tensor(xa.copy(), requires_grad=True)
            with Tape() as tape:
                loss = build(x)
            tape.backward(loss)
            return x.grad

        f = lambda x: dg.sum(dg.sigmoid(x))  # noqa: E731
        g = lambda x: dg.sum(dg.mul(x, x))  # noqa: E731
        combo = grad_of(lambda x: dg.add(dg.scale(f(x), 2.0), dg.scale(g(x), -3.0)))
        np.testing.assert_allclose(combo, 2.0 * grad_of(f) - 3.0 * grad_of(g), rtol=1e-12)

    def test_leaf_used_twice_accumulates(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with Tape() as tape:
            loss = dg.sum(dg.add(dg.mul(x, x), dg.scale(x, 3.0)))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, 2 * x.data + 3.0)

    def test_bitwise_reproducible(self):
        def run():
            rng = np.random.default_rng(4)
            a = Tensor(rng.normal(size=(5, 6)), requires_grad=True)
            b = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
            with Tape() as tape:
                loss = dg.sum(dg.softmax(dg.matmul(a, b), axis=1) * rng.normal(size=(5, 3)))
            tape.backward(loss)
            return a.grad.tobytes() + b.grad.tobytes()

        assert run() == run()
