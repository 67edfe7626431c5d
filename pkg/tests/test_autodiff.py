"""Core tensor/tape/op tests, including the hand-computed oracles."""

import numpy as np
import pytest

from faceforge.autodiff import AutodiffError, BatchNormState, Tape, Tensor, grad_check, ops


def rand(shape, seed, scale=1.0):
    gen = np.random.default_rng(seed)
    return Tensor(gen.standard_normal(shape) * scale, dtype=np.float32)


class TestTensor:
    def test_rejects_nan(self):
        with pytest.raises(AutodiffError):
            Tensor(np.array([1.0, np.nan]))

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_rejects_inf_at_op_boundary(self):
        a = Tensor(np.array([1e30], np.float32))
        with pytest.raises(AutodiffError):
            ops.elementwise_mul(a, a)  # overflows float32 -> rejected

    def test_default_dtype_is_float32(self):
        assert Tensor([1.0, 2.0]).dtype == np.float32

    def test_item_requires_scalar(self):
        with pytest.raises(AutodiffError):
            Tensor([1.0, 2.0]).item()


class TestAffine:
    def test_identity_weight(self):
        x = Tensor([3.0, 4.0])
        w = Tensor(np.eye(2))
        b = Tensor([0.0, 0.0])
        np.testing.assert_array_equal(ops.affine(x, w, b).data, [3.0, 4.0])

    def test_hand_computed(self):
        # [[1,2],[3,4]] @ (1,1) + (1,1) = (4, 8)
        y = ops.affine(Tensor([1.0, 1.0]), Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([1.0, 1.0]))
        np.testing.assert_allclose(y.data, [4.0, 8.0])

    def test_gradient_of_sum_wrt_input(self):
        # column sums of the weight: (1+3, 2+4) = (4, 6)
        x = Tensor([0.3, -0.2], requires_grad=True)
        w = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([0.0, 0.0])
        with Tape() as tape:
            loss = ops.sum_all(ops.affine(x, w, b))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [4.0, 6.0])

    def test_batched_matches_loop(self):
        gen = np.random.default_rng(3)
        xs = gen.standard_normal((5, 4)).astype(np.float32)
        w = Tensor(gen.standard_normal((3, 4)).astype(np.float32))
        b = Tensor(gen.standard_normal(3).astype(np.float32))
        batched = ops.affine(Tensor(xs), w, b).data
        for i in range(5):
            row = ops.affine(Tensor(xs[i]), w, b).data
            np.testing.assert_allclose(batched[i], row, rtol=1e-6)

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(AutodiffError, match=r"\(3,\).*\(2, 2\)"):
            ops.affine(Tensor([1.0, 2.0, 3.0]), Tensor(np.eye(2)), Tensor([0.0, 0.0]))


class TestActivations:
    def test_relu_sign_cases(self):
        y = ops.relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])

    def test_relu_identity_on_positives(self):
        x = Tensor([0.5, 1.5, 9.0])
        np.testing.assert_array_equal(ops.relu(x).data, x.data)

    def test_relu_gradient_mask(self):
        x = Tensor([-2.0, 3.0, -0.5, 1.0], requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_all(ops.relu(x))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0, 1.0])

    def test_sigmoid_symmetry_point(self):
        assert ops.sigmoid(Tensor([0.0])).data[0] == pytest.approx(0.5)

    def test_sigmoid_saturation_no_overflow(self):
        y = ops.sigmoid(Tensor([40.0, -40.0, 500.0, -500.0], dtype=np.float64))
        assert abs(y.data[0] - 1.0) < 1e-12
        assert abs(y.data[1]) < 1e-12
        assert np.isfinite(y.data).all()

    def test_sigmoid_gradient_formula(self):
        x = Tensor([0.3, -1.2], requires_grad=True)
        with Tape() as tape:
            s = ops.sigmoid(x)
            loss = ops.sum_all(s)
        tape.backward(loss)
        expected = s.data * (1 - s.data)
        np.testing.assert_allclose(x.grad, expected, rtol=1e-6)


class TestElementwise:
    def test_mul_identity(self):
        a = Tensor([1.5, -2.0])
        np.testing.assert_array_equal(ops.mul(a, Tensor([1.0, 1.0])).data, a.data)

    def test_mul_annihilator(self):
        a = Tensor([1.5, -2.0])
        np.testing.assert_array_equal(ops.mul(a, Tensor([0.0, 0.0])).data, [0.0, 0.0])

    def test_mul_hand_oracle(self):
        y = ops.mul(Tensor([2.0, 3.0]), Tensor([4.0, 5.0]))
        np.testing.assert_array_equal(y.data, [8.0, 15.0])

    def test_mul_shape_mismatch(self):
        with pytest.raises(AutodiffError):
            ops.mul(Tensor([1.0]), Tensor([1.0, 2.0]))

    def test_clamp01_straight_through(self):
        x = Tensor([-0.5, 0.25, 1.5], requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_all(ops.clamp01(x))
        tape.backward(loss)
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


class TestConv2d:
    def test_ones_kernel_constant_image(self):
        c = 0.7
        x = Tensor(np.full((1, 6, 6), c, np.float32))
        k = Tensor(np.ones((1, 1, 3, 3), np.float32))
        y = ops.conv2d(x, k, stride=1)
        np.testing.assert_allclose(y.data[0, 1:-1, 1:-1], 9 * c, rtol=1e-6)

    def test_delta_kernel_is_identity(self):
        gen = np.random.default_rng(0)
        x = Tensor(gen.standard_normal((1, 5, 7)).astype(np.float32))
        k = np.zeros((1, 1, 3, 3), np.float32)
        k[0, 0, 1, 1] = 1.0
        y = ops.conv2d(x, Tensor(k), stride=1)
        np.testing.assert_allclose(y.data, x.data, rtol=1e-6)

    def test_stride2_output_size(self):
        x = Tensor(np.zeros((2, 7, 9), np.float32))
        k = Tensor(np.zeros((3, 2, 3, 3), np.float32))
        assert ops.conv2d(x, k, stride=2).shape == (3, 4, 5)

    def test_unsupported_stride(self):
        with pytest.raises(AutodiffError):
            ops.conv2d(Tensor(np.zeros((1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=3)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_gradient_finite_differences(self, stride):
        x = rand((1, 4, 4), seed=1)
        k = rand((2, 1, 3, 3), seed=2)

        def f(xx, kk):
            return ops.sum_all(ops.sigmoid(ops.conv2d(xx, kk, stride=stride)))

        assert grad_check(f, [x, k]) < 1e-4


class TestBatchnorm:
    def test_train_standardizes(self):
        gen = np.random.default_rng(5)
        x = Tensor(gen.standard_normal((64, 3)).astype(np.float32) * 4 + 2)
        state = BatchNormState(3)
        y = ops.batchnorm(x, state, mode="train")
        np.testing.assert_allclose(y.data.mean(axis=0), 0.0, atol=1e-5)
        np.testing.assert_allclose(y.data.var(axis=0), 1.0, atol=1e-3)

    def test_eval_identity_with_unit_stats(self):
        x = Tensor(np.array([[0.3, -0.7, 2.0]], np.float32))
        state = BatchNormState(3)
        y = ops.batchnorm(x, state, mode="eval")
        np.testing.assert_allclose(y.data, x.data, atol=1e-5)

    def test_train_rejects_batch_of_one(self):
        state = BatchNormState(3)
        with pytest.raises(AutodiffError):
            ops.batchnorm(Tensor(np.zeros((1, 3))), state, mode="train")

    def test_gradient_finite_differences(self):
        x = rand((4, 3), seed=7)

        def f(xx):
            state = BatchNormState(3)
            state.gamma = Tensor(np.array([1.1, 0.9, 1.3], np.float64), requires_grad=True)
            state.beta = Tensor(np.array([0.1, -0.2, 0.0], np.float64), requires_grad=True)
            return ops.sum_all(ops.sigmoid(ops.batchnorm(xx, state, mode="train")))

        assert grad_check(f, [x]) < 1e-4


class TestGroupedSoftmax:
    def test_single_group_symmetry(self):
        y = ops.grouped_softmax(Tensor([0.0, 0.0]), [(0, 2)])
        np.testing.assert_allclose(y.data, [0.5, 0.5])

    def test_two_groups_closed_form(self):
        x = Tensor([0.0, 0.0, np.log(2.0), 0.0])
        y = ops.grouped_softmax(x, [(0, 2), (2, 4)])
        np.testing.assert_allclose(y.data, [0.5, 0.5, 2 / 3, 1 / 3], rtol=1e-6)

    def test_shift_invariance_per_group(self):
        gen = np.random.default_rng(2)
        base = gen.standard_normal(5).astype(np.float32)
        shifted = base.copy()
        shifted[2:] += 3.7  # constant shift inside the second group only
        spans = [(0, 2), (2, 5)]
        a = ops.grouped_softmax(Tensor(base), spans).data
        b = ops.grouped_softmax(Tensor(shifted), spans).data
        np.testing.assert_allclose(a, b, rtol=1e-5)

    def test_each_span_sums_to_one(self):
        x = rand((3, 7), seed=9)
        y = ops.grouped_softmax(x, [(0, 4), (4, 7)]).data
        np.testing.assert_allclose(y[:, :4].sum(axis=1), 1.0, rtol=1e-6)
        np.testing.assert_allclose(y[:, 4:].sum(axis=1), 1.0, rtol=1e-6)

    def test_bad_spans_rejected(self):
        with pytest.raises(AutodiffError):
            ops.grouped_softmax(Tensor([0.0, 0.0, 0.0]), [(0, 2)])
        with pytest.raises(AutodiffError):
            ops.grouped_softmax(Tensor([0.0, 0.0, 0.0]), [(0, 2), (1, 3)])


class TestTape:
    def test_accumulates_gradient_for_repeated_use(self):
        x = Tensor([1.5], requires_grad=True)
        with Tape() as tape:
            loss = ops.sum_all(ops.add(x, x))
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [2.0])

    def test_accumulates_across_branches(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape() as tape:
            y = ops.mul(x, x)          # x^2
            z = ops.add(y, x)          # x^2 + x
            loss = ops.sum_all(z)
        tape.backward(loss)
        np.testing.assert_allclose(x.grad, [5.0])  # 2x + 1

    def test_no_tape_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        tape = Tape()
        with tape:
            pass
        y = ops.relu(x)  # outside the with-block
        assert len(tape) == 0
        assert y.grad is None

    def test_forward_deterministic(self):
        x = rand((4, 4), seed=11)
        w = rand((4, 4), seed=12)
        b = rand((4,), seed=13)
        a = ops.sigmoid(ops.affine(x, w, b)).data
        b2 = ops.sigmoid(ops.affine(x, w, b)).data
        assert np.array_equal(a, b2)


OP_CASES = {
    "affine": lambda s: (
        lambda x, w, b: ops.sum_all(ops.affine(x, w, b)),
        [rand((4,), s), rand((3, 4), s + 100), rand((3,), s + 200)],
    ),
    "relu": lambda s: (
        lambda x: ops.sum_all(ops.relu(x)),
        [Tensor(np.random.default_rng(s).standard_normal(6) + 0.05)],  # keep off the kink
    ),
    "sigmoid": lambda s: (lambda x: ops.sum_all(ops.sigmoid(x)), [rand((6,), s)]),
    "mul": lambda s: (
        lambda a, b: ops.sum_all(ops.mul(a, b)),
        [rand((5,), s), rand((5,), s + 1)],
    ),
    "add": lambda s: (
        lambda a, b: ops.sum_all(ops.add(a, b)),
        [rand((5,), s), rand((5,), s + 1)],
    ),
    "sub": lambda s: (
        lambda a, b: ops.sum_all(ops.sub(a, b)),
        [rand((5,), s), rand((5,), s + 1)],
    ),
    "div": lambda s: (
        lambda a, b: ops.sum_all(ops.div(a, b)),
        [rand((5,), s), Tensor(np.random.default_rng(s + 1).uniform(0.5, 2.0, 5))],
    ),
    "scale": lambda s: (lambda x: ops.sum_all(ops.scale(x, -2.5)), [rand((5,), s)]),
    "add_scalar": lambda s: (lambda x: ops.sum_all(ops.add_scalar(x, 1.7)), [rand((5,), s)]),
    "absolute": lambda s: (
        lambda x: ops.sum_all(ops.absolute(x)),
        [Tensor(np.random.default_rng(s).standard_normal(6) + 0.04)],
    ),
    "sqrt": lambda s: (
        lambda x: ops.sum_all(ops.sqrt(x)),
        [Tensor(np.random.default_rng(s).uniform(0.5, 3.0, 5))],
    ),
    "sum_last": lambda s: (
        lambda x: ops.sum_all(ops.sigmoid(ops.sum_last(x))),
        [rand((3, 4), s)],
    ),
    "mean_all": lambda s: (lambda x: ops.mean_all(x), [rand((4, 3), s)]),
    "concat": lambda s: (
        lambda a, b: ops.sum_all(ops.sigmoid(ops.concat([a, b]))),
        [rand((3,), s), rand((4,), s + 1)],
    ),
    "reshape": lambda s: (
        lambda x: ops.sum_all(ops.sigmoid(ops.reshape(x, (2, 6)))),
        [rand((3, 4), s)],
    ),
    "l2_normalize": lambda s: (
        lambda x: ops.sum_all(ops.l2_normalize(x)),
        [Tensor(np.random.default_rng(s).standard_normal(6) + 2.0)],
    ),
    "l2_normalize_rows": lambda s: (
        lambda x: ops.sum_all(ops.l2_normalize(x)),
        [Tensor(np.random.default_rng(s).standard_normal((3, 5)) + 2.0)],
    ),
    "grouped_softmax": lambda s: (
        lambda x: ops.sum_all(ops.mul(ops.grouped_softmax(x, [(0, 3), (3, 7)]), x)),
        [rand((7,), s)],
    ),
    "conv2d": lambda s: (
        lambda x, k: ops.sum_all(ops.sigmoid(ops.conv2d(x, k, stride=1))),
        [rand((2, 4, 4), s), rand((2, 2, 3, 3), s + 1)],
    ),
    "conv2d_stride2": lambda s: (
        lambda x, k: ops.sum_all(ops.sigmoid(ops.conv2d(x, k, stride=2))),
        [rand((1, 5, 5), s), rand((2, 1, 3, 3), s + 1)],
    ),
    "batchnorm": lambda s: (
        lambda x, g, b: ops.sum_all(
            ops.sigmoid(_bn_with(x, g, b))
        ),
        [rand((4, 3), s), Tensor(np.random.default_rng(s + 1).uniform(0.5, 1.5, 3)), rand((3,), s + 2)],
    ),
    "softmax_cross_entropy": lambda s: (
        lambda x: ops.softmax_cross_entropy(x, np.array([0, 2, 1])),
        [rand((3, 4), s)],
    ),
    "clamp01": lambda s: (
        lambda x: ops.sum_all(ops.clamp01(x)),
        [Tensor(np.random.default_rng(s).uniform(0.05, 0.95, 6))],
    ),
}


def _bn_with(x, gamma, beta):
    state = BatchNormState(gamma.shape[0])
    state.gamma = gamma
    state.beta = beta
    return ops.batchnorm(x, state, mode="train")


@pytest.mark.parametrize("name", sorted(OP_CASES))
@pytest.mark.parametrize("seed", range(10))
def test_every_op_passes_grad_check(name, seed):
    f, points = OP_CASES[name](seed)
    assert grad_check(f, points) < 1e-4


class TestGradCheck:
    def test_sum_of_squares_is_nearly_exact(self):
        x = rand((6,), seed=21)

        def f(xx):
            return ops.sum_all(ops.mul(xx, xx))

        assert grad_check(f, [x]) < 1e-8

    def test_composite_sigmoid_affine_stack(self):
        # cosine-distance-style loss through a two-layer sigmoid stack
        gen = np.random.default_rng(33)
        w1 = Tensor(gen.standard_normal((5, 4)).astype(np.float32))
        b1 = Tensor(gen.standard_normal(5).astype(np.float32))
        w2 = Tensor(gen.standard_normal((4, 5)).astype(np.float32))
        b2 = Tensor(gen.standard_normal(4).astype(np.float32))
        target = Tensor(gen.standard_normal(4).astype(np.float32))

        def f(x):
            h = ops.sigmoid(ops.affine(x, w1, b1))
            e = ops.l2_normalize(ops.affine(h, w2, b2))
            t = ops.l2_normalize(target)
            cos = ops.sum_all(ops.mul(e, t))
            return ops.add_scalar(ops.scale(cos, -1.0), 1.0)

        assert grad_check(f, [rand((4,), seed=34)]) < 1e-4

    def test_wrong_gradient_is_detected(self):
        from faceforge.autodiff.ops import _result

        def bad_square(x):
            y = x.data * x.data

            def backward(g):
                return (g * 3.0 * x.data,)  # deliberately wrong: should be 2x

            return _result(y, (x,), backward)

        def f(x):
            return ops.sum_all(bad_square(x))

        assert grad_check(f, [rand((4,), seed=40)]) > 1e-2

    def test_nonfinite_probe_raises(self):
        def f(x):
            return ops.sum_all(ops.div(x, ops.add_scalar(x, -x.data[0])))

        with pytest.raises(AutodiffError):
            grad_check(f, [Tensor([1.0, 1.0])])
