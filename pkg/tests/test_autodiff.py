import numpy as np
import pytest

from mprender import autodiff as ad
from mprender.autodiff import Tape, Tensor
from mprender.errors import ContractViolation

from reference import assert_close_rel, central_difference, naive_conv3d


def scalar_loss_grads(build, leaves):
    """Run build(tensors) -> scalar Tensor and return analytic grads."""
    tape = Tape()
    tensors = [Tensor(a, tape=tape) for a in leaves]
    loss = build(*tensors)
    tape.backward(loss)
    return [t.grad for t in tensors]


def check_against_fd(build, leaves, rtol=1e-5, step=1e-4):
    leaves = [np.asarray(a, dtype=np.float64) for a in leaves]
    analytic = scalar_loss_grads(build, leaves)

    def f():
        tensors = [Tensor(a) for a in leaves]
        return build(*tensors).item()

    numeric = central_difference(f, leaves, step=step)
    for a, n in zip(analytic, numeric):
        assert_close_rel(a, n, rtol)


class TestConv3d:
    def test_scalar_multiply_add(self):
        x = Tensor(np.full((1, 1, 1, 1), 2.0))
        w = Tensor(np.full((1, 1, 1, 1, 1), 3.0))
        b = Tensor(np.array([1.0]))
        out = ad.conv3d(x, w, b)
        assert out.data.reshape(-1)[0] == pytest.approx(7.0)

    def test_identity_kernel(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 5, 5)))
        w = np.zeros((2, 2, 3, 3, 3))
        w[0, 0, 1, 1, 1] = 1.0
        w[1, 1, 1, 1, 1] = 1.0
        out = ad.conv3d(x, Tensor(w), Tensor(np.zeros(2)), padding="same")
        np.testing.assert_allclose(out.data, x.data, rtol=1e-6)

    @pytest.mark.parametrize("stride,dilation,padding", [
        ((1, 1, 1), (1, 1, 1), "same"),
        ((1, 1, 1), (1, 1, 1), "valid"),
        ((1, 2, 2), (1, 1, 1), "same"),
        ((2, 2, 2), (1, 1, 1), "same"),
        ((1, 1, 1), (2, 2, 2), "same"),
        ((2, 1, 1), (1, 2, 2), "valid"),
    ])
    def test_matches_naive_loop(self, rng, stride, dilation, padding):
        x = rng.standard_normal((2, 4, 6, 6))
        w = rng.standard_normal((3, 2, 3, 3, 3))
        b = rng.standard_normal(3)
        got = ad.conv3d(Tensor(x), Tensor(w), Tensor(b), stride=stride,
                        dilation=dilation, padding=padding).data
        want = naive_conv3d(x, w, b, stride=stride, dilation=dilation, padding=padding)
        assert got.shape == want.shape
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-12)

    def test_channel_mismatch_raises(self, rng):
        x = Tensor(rng.standard_normal((3, 2, 2, 2)))
        w = Tensor(rng.standard_normal((1, 2, 1, 1, 1)))
        with pytest.raises(ContractViolation):
            ad.conv3d(x, w, Tensor(np.zeros(1)))

    def test_even_kernel_raises(self, rng):
        x = Tensor(rng.standard_normal((1, 4, 4, 4)))
        w = Tensor(rng.standard_normal((1, 1, 2, 3, 3)))
        with pytest.raises(ContractViolation):
            ad.conv3d(x, w, Tensor(np.zeros(1)))

    def test_gradient_matches_finite_differences(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        w = rng.standard_normal((2, 2, 3, 3, 3))
        b = rng.standard_normal(2)
        check_against_fd(lambda xt, wt, bt: ad.tsum(ad.conv3d(xt, wt, bt)), [x, w, b])

    def test_strided_dilated_gradient(self, rng):
        x = rng.standard_normal((2, 4, 6, 6))
        w = rng.standard_normal((2, 2, 3, 3, 3))
        b = rng.standard_normal(2)
        check_against_fd(
            lambda xt, wt, bt: ad.tmean(ad.mul(
                ad.conv3d(xt, wt, bt, stride=(1, 2, 2), dilation=(2, 1, 1)),
                ad.conv3d(xt, wt, bt, stride=(1, 2, 2), dilation=(2, 1, 1)))),
            [x, w, b])


class TestRelu:
    def test_values(self):
        out = ad.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_all_positive_is_identity(self, rng):
        x = rng.uniform(0.1, 5.0, (4, 5))
        np.testing.assert_array_equal(ad.relu(Tensor(x)).data, x)

    def test_subgradient_at_zero(self):
        tape = Tape()
        x = Tensor(np.array([-1.0, 2.0]), tape=tape)
        tape.backward(ad.tsum(ad.relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0, 1.0])
        tape = Tape()
        x = Tensor(np.array([0.0]), tape=tape)
        tape.backward(ad.tsum(ad.relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0])


class TestUpsample:
    def test_factor_one_is_identity(self, rng):
        x = rng.standard_normal((2, 2, 3, 3))
        np.testing.assert_array_equal(ad.upsample_nearest(Tensor(x), 1).data, x)

    def test_replicates_value(self):
        out = ad.upsample_nearest(Tensor(np.full((1, 1, 1, 1), 4.5)), 2)
        assert out.shape == (1, 2, 2, 2)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 2), 4.5))

    def test_backward_sums_blocks(self):
        tape = Tape()
        x = Tensor(np.ones((1, 1, 1, 1)), tape=tape)
        tape.backward(ad.tsum(ad.upsample_nearest(x, 2)))
        np.testing.assert_array_equal(x.grad, np.full((1, 1, 1, 1), 8.0))

    def test_anisotropic_gradient(self, rng):
        x = rng.standard_normal((2, 2, 2, 3))
        check_against_fd(
            lambda xt: ad.tsum(ad.mul(ad.upsample_nearest(xt, (1, 2, 2)),
                                      ad.upsample_nearest(xt, (1, 2, 2)))), [x])


class TestSoftmax:
    def test_equal_logits(self):
        out = ad.softmax_axis(Tensor(np.zeros(4)), axis=0)
        np.testing.assert_allclose(out.data, 0.25, atol=1e-7)

    def test_analytic_ratio(self):
        out = ad.softmax_axis(Tensor(np.log([1.0, 3.0])), axis=0)
        np.testing.assert_allclose(out.data, [0.25, 0.75], atol=1e-7)

    def test_shift_invariance(self, rng):
        x = rng.standard_normal((3, 5))
        a = ad.softmax_axis(Tensor(x), axis=1).data
        b = ad.softmax_axis(Tensor(x + 1000.0), axis=1).data
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_sums_to_one_and_nonnegative(self, rng):
        for _ in range(20):
            x = Tensor(rng.standard_normal((4, 3, 3)) * 10)
            out = ad.softmax_axis(x, axis=0).data
            assert (out >= 0).all()
            np.testing.assert_allclose(out.sum(axis=0), 1.0, atol=1e-6)

    def test_gradient(self, rng):
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal((3, 4))
        check_against_fd(
            lambda xt: ad.tsum(ad.mul(ad.softmax_axis(xt, axis=0), w)), [x])


class TestElementwiseAndReductions:
    def test_concat_channel_count(self, rng):
        a = Tensor(rng.standard_normal((2, 3, 3, 3)))
        b = Tensor(rng.standard_normal((3, 3, 3, 3)))
        assert ad.concat_channels(a, b).shape == (5, 3, 3, 3)

    def test_concat_shape_mismatch(self, rng):
        a = Tensor(rng.standard_normal((2, 3, 3, 3)))
        b = Tensor(rng.standard_normal((3, 3, 3, 4)))
        with pytest.raises(ContractViolation):
            ad.concat_channels(a, b)

    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(Tensor(np.array(0.0))).item() == pytest.approx(0.5)

    def test_sigmoid_stable_in_tails(self):
        out = ad.sigmoid(Tensor(np.array([-500.0, 500.0])))
        np.testing.assert_allclose(out.data, [0.0, 1.0], atol=1e-12)

    def test_mean(self):
        assert ad.tmean(Tensor(np.array([1.0, 2.0, 3.0]))).item() == pytest.approx(2.0)

    def test_add_mul_sub_values(self, rng):
        a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
        np.testing.assert_allclose(ad.add(Tensor(a), Tensor(b)).data, a + b)
        np.testing.assert_allclose(ad.sub(Tensor(a), Tensor(b)).data, a - b)
        np.testing.assert_allclose(ad.mul(Tensor(a), Tensor(b)).data, a * b)

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "sigmoid", "abs",
                                    "relu", "mean_axis", "sum_axis", "concat",
                                    "slice", "reshape", "moveaxis"])
    def test_gradients_match_finite_differences(self, rng, op):
        a = rng.standard_normal((3, 4, 2))
        b = rng.standard_normal((3, 4, 2))
        builds = {
            "add": lambda x, y: ad.tsum(ad.mul(ad.add(x, y), ad.add(x, y))),
            "sub": lambda x, y: ad.tsum(ad.mul(ad.sub(x, y), ad.sub(x, y))),
            "mul": lambda x, y: ad.tsum(ad.mul(x, y)),
            "sigmoid": lambda x, y: ad.tsum(ad.mul(ad.sigmoid(x), y)),
            "abs": lambda x, y: ad.tsum(ad.mul(ad.absolute(x), y)),
            "relu": lambda x, y: ad.tsum(ad.mul(ad.relu(x), y)),
            "mean_axis": lambda x, y: ad.tsum(ad.mul(ad.tmean(x, axis=1), ad.tmean(y, axis=1))),
            "sum_axis": lambda x, y: ad.tsum(ad.mul(ad.tsum(x, axis=0), ad.tsum(y, axis=0))),
            "concat": lambda x, y: ad.tsum(ad.mul(ad.concat_channels(x, y),
                                                  ad.concat_channels(y, x))),
            "slice": lambda x, y: ad.tsum(ad.mul(ad.slice_channels(x, 1, 3),
                                                 ad.slice_channels(y, 0, 2))),
            "reshape": lambda x, y: ad.tsum(ad.mul(ad.reshape(x, (4, 6)), ad.reshape(y, (4, 6)))),
            "moveaxis": lambda x, y: ad.tsum(ad.mul(ad.moveaxis(x, 0, 2), ad.moveaxis(y, 0, 2))),
        }
        check_against_fd(builds[op], [a, b])

    def test_broadcast_mul_gradient(self, rng):
        a = rng.standard_normal((4, 3, 2, 2))
        b = rng.standard_normal((4, 1, 2, 2))
        check_against_fd(lambda x, y: ad.tsum(ad.mul(x, y)), [a, b])


class TestBackward:
    def test_square(self):
        tape = Tape()
        x = Tensor(np.array(3.0), tape=tape)
        tape.backward(ad.mul(x, x))
        assert x.grad == pytest.approx(6.0)

    def test_conv_sum_matches_fd(self, rng):
        x = rng.standard_normal((1, 3, 4, 4))
        w = rng.standard_normal((2, 1, 3, 3, 3))
        check_against_fd(
            lambda xt, wt: ad.tsum(ad.conv3d(xt, wt, Tensor(np.zeros(2, dtype=np.float64)))),
            [x, w], rtol=1e-5)

    def test_disconnected_leaf_zero(self, rng):
        tape = Tape()
        x = Tensor(rng.standard_normal(3), tape=tape)
        unused = Tensor(rng.standard_normal(5), tape=tape)
        tape.backward(ad.tsum(ad.mul(x, x)))
        np.testing.assert_array_equal(unused.grad, np.zeros(5))

    def test_no_double_accumulation(self):
        tape = Tape()
        x = Tensor(np.array([1.0, 4.0]), tape=tape)
        tape.backward(ad.tsum(ad.add(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])

    def test_non_scalar_loss_raises(self, rng):
        tape = Tape()
        x = Tensor(rng.standard_normal(3), tape=tape)
        with pytest.raises(ContractViolation):
            tape.backward(ad.add(x, x))

    def test_mixed_tape_raises(self, rng):
        a = Tensor(rng.standard_normal(3), tape=Tape())
        b = Tensor(rng.standard_normal(3), tape=Tape())
        with pytest.raises(ContractViolation):
            ad.add(a, b)


class TestTensorInvariants:
    def test_zero_extent_rejected(self):
        with pytest.raises(ContractViolation):
            Tensor(np.zeros((2, 0, 3)))

    def test_int_input_becomes_float32(self):
        assert Tensor([1, 2, 3]).dtype == np.float32

    def test_float64_preserved(self):
        assert Tensor(np.zeros(3, dtype=np.float64)).dtype == np.float64

    def test_contiguous(self, rng):
        x = rng.standard_normal((4, 4)).T
        assert Tensor(x).data.flags["C_CONTIGUOUS"]
