import math

import numpy as np
import pytest

from mscl import autodiff as ad
from mscl.gradcheck import check_gradients, numerical_gradient, run_op_suite


def scalar_loss(fn):
    """Run fn under a fresh tape and backpropagate its scalar output."""
    with ad.Tape() as tape:
        out = fn()
    tape.backward(out)
    return out


class TestMatmul:
    def test_identity(self):
        eye = ad.Tensor(np.eye(2))
        m = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(eye, m).data, m.data)

    def test_hand_product(self):
        a = ad.Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = ad.Tensor([[5.0], [6.0]])
        np.testing.assert_array_equal(ad.matmul(a, b).data, [[17.0], [39.0]])

    def test_dimension_error_names_shapes(self):
        a = ad.Tensor(np.zeros((2, 3)))
        b = ad.Tensor(np.zeros((2, 3)))
        with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(a, b)


class TestSoftmaxRows:
    def test_symmetry(self):
        out = ad.softmax_rows(ad.Tensor([0.0, 0.0]))
        np.testing.assert_allclose(out.data, [0.5, 0.5], atol=1e-15)

    def test_two_logit_value(self):
        out = ad.softmax_rows(ad.Tensor([1.0, 0.0]))
        e = math.exp(1.0)
        assert abs(out.data[0] - e / (e + 1.0)) < 1e-6
        assert abs(out.data[1] - 1.0 / (e + 1.0)) < 1e-6

    def test_shift_invariance(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(-3, 3, size=(4, 6))
        a = ad.softmax_rows(ad.Tensor(x)).data
        b = ad.softmax_rows(ad.Tensor(x + 123.456)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_rows_sum_to_one_at_large_magnitude(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-1e3, 1e3, size=(8, 5))
        out = ad.softmax_rows(ad.Tensor(x)).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
        assert (out >= 0).all()

    def test_nan_rejected(self):
        with pytest.raises(ad.InvalidValueError):
            ad.softmax_rows(ad.Tensor([np.nan, 0.0]))


class TestLayerNorm:
    def test_constant_row_zeroed(self):
        x = ad.Tensor([5.0, 5.0, 5.0, 5.0])
        out = ad.layer_norm(x, ad.Tensor(np.ones(4)), ad.Tensor(np.zeros(4)), eps=1e-5)
        np.testing.assert_allclose(out.data, np.zeros(4), atol=1e-12)

    def test_already_normalized_row(self):
        x = ad.Tensor([1.0, -1.0])
        out = ad.layer_norm(x, ad.Tensor(np.ones(2)), ad.Tensor(np.zeros(2)), eps=1e-9)
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-6)

    def test_row_moments(self):
        rng = np.random.default_rng(11)
        x = rng.uniform(-2, 2, size=(3, 8))
        eps = 1e-8
        out = ad.layer_norm(ad.Tensor(x), ad.Tensor(np.ones(8)), ad.Tensor(np.zeros(8)), eps=eps).data
        # direct moment computation over each output row
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-6)
        expected_var = x.var(axis=1) / (x.var(axis=1) + eps)
        np.testing.assert_allclose(out.var(axis=1), expected_var, atol=1e-6)

    def test_zero_features_rejected(self):
        with pytest.raises(ad.EmptyInputError):
            ad.layer_norm(ad.Tensor(np.zeros((2, 0))), ad.Tensor([]), ad.Tensor([]), eps=1e-5)


class TestRelu:
    def test_definition(self):
        np.testing.assert_array_equal(ad.relu(ad.Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_all_negative(self):
        np.testing.assert_array_equal(ad.relu(ad.Tensor([-3.0, -0.5])).data, [0.0, 0.0])

    def test_flat_region_gradient(self):
        x = ad.Tensor([-1.0], requires_grad=True)
        scalar_loss(lambda: ad.sum_all(ad.relu(x)))
        np.testing.assert_array_equal(x.grad, [0.0])


class TestMaxPoolRows:
    def test_single_view_identity(self):
        x = ad.Tensor([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(ad.max_pool_rows([x]).data, x.data)

    def test_elementwise_maximum(self):
        a = ad.Tensor([1.0, 5.0])
        b = ad.Tensor([3.0, 2.0])
        np.testing.assert_array_equal(ad.max_pool_rows([a, b]).data, [3.0, 5.0])

    def test_tie_gradient_goes_to_lowest_index(self):
        a = ad.Tensor([2.0, 2.0], requires_grad=True)
        b = ad.Tensor([2.0, 0.0], requires_grad=True)
        scalar_loss(lambda: ad.sum_all(ad.max_pool_rows([a, b])))
        np.testing.assert_array_equal(a.grad, [1.0, 1.0])
        np.testing.assert_array_equal(b.grad, [0.0, 0.0])

    def test_empty_sequence_rejected(self):
        with pytest.raises(ad.EmptyInputError):
            ad.max_pool_rows([])


class TestCrossEntropyRows:
    def test_perfect_prediction(self):
        p = ad.Tensor([[1.0, 0.0], [0.0, 1.0]])
        y = ad.Tensor([[1.0, 0.0], [0.0, 1.0]])
        assert ad.cross_entropy_rows(p, y).item() == 0.0

    def test_uniform_four_way(self):
        p = ad.Tensor([[0.25, 0.25, 0.25, 0.25]])
        y = ad.Tensor([[0.0, 1.0, 0.0, 0.0]])
        assert abs(ad.cross_entropy_rows(p, y).item() - math.log(4.0)) < 1e-6

    def test_two_rows_mean_of_terms(self):
        p = ad.Tensor([[0.7, 0.2, 0.1], [0.25, 0.5, 0.25]])
        y = ad.Tensor([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        expected = -(math.log(0.7) + math.log(0.25)) / 2.0
        assert abs(ad.cross_entropy_rows(p, y).item() - expected) < 1e-12

    def test_non_one_hot_rejected(self):
        p = ad.Tensor([[0.5, 0.5]])
        with pytest.raises(ad.LabelError):
            ad.cross_entropy_rows(p, ad.Tensor([[0.5, 0.5]]))
        with pytest.raises(ad.LabelError):
            ad.cross_entropy_rows(p, ad.Tensor([[1.0, 1.0]]))


class TestCosineSim:
    def test_self_similarity(self):
        a = ad.Tensor([1.0, 2.0, -3.0])
        assert abs(ad.cosine_sim(a, ad.Tensor(a.data.copy())).item() - 1.0) < 1e-12

    def test_orthogonal(self):
        assert ad.cosine_sim(ad.Tensor([1.0, 0.0]), ad.Tensor([0.0, 1.0])).item() == 0.0

    def test_forty_five_degrees(self):
        got = ad.cosine_sim(ad.Tensor([1.0, 1.0]), ad.Tensor([1.0, 0.0])).item()
        assert abs(got - 1.0 / math.sqrt(2.0)) < 1e-6

    def test_length_mismatch(self):
        with pytest.raises(ad.ShapeError):
            ad.cosine_sim(ad.Tensor([1.0, 2.0]), ad.Tensor([1.0, 2.0, 3.0]))


class TestBackward:
    def test_softmax_sum_has_zero_gradient(self):
        x = ad.Tensor([0.3, -1.2, 0.8], requires_grad=True)
        scalar_loss(lambda: ad.sum_all(ad.softmax_rows(x)))
        np.testing.assert_allclose(x.grad, np.zeros(3), atol=1e-12)

    def test_square_sum_gradient(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        scalar_loss(lambda: ad.sum_all(ad.mul(x, x)))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        with ad.Tape() as tape:
            y = ad.mul(x, x)
        with pytest.raises(ad.ShapeError):
            tape.backward(y)

    def test_repeated_backward_rejected(self):
        x = ad.Tensor([1.0], requires_grad=True)
        with ad.Tape() as tape:
            y = ad.sum_all(x)
        tape.backward(y)
        with pytest.raises(ad.TapeError):
            tape.backward(y)

    def test_shared_tensor_gradients_sum(self):
        x = ad.Tensor(np.array([0.4, -0.7, 1.1]), requires_grad=True)

        def loss():
            return ad.add(ad.sum_all(ad.mul(x, x)), ad.sum_all(ad.exp(x)))

        err = check_gradients(loss, [x])
        assert err < 1e-4
        # analytic shape: 2x + e^x
        scalar_loss(loss)
        np.testing.assert_allclose(x.grad, 2 * x.data + np.exp(x.data), atol=1e-12)

    def test_inference_without_tape_records_nothing(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        out = ad.sum_all(ad.mul(x, x))
        assert out.item() == 5.0
        assert x.grad is None


class TestGradientSuite:
    def test_all_ops_match_finite_differences(self):
        for check in run_op_suite(seed=0):
            assert check.passed, f"{check.name}: {check.max_rel_err:.3e}"

    def test_corruption_is_detected(self):
        results = {c.name: c for c in run_op_suite(seed=0, corrupt_op="layer_norm")}
        assert not results["layer_norm"].passed
        assert results["matmul"].passed

    def test_numerical_gradient_helper(self):
        x = ad.Tensor([0.5, -0.25])
        g = numerical_gradient(lambda: float((x.data ** 2).sum()), x)
        np.testing.assert_allclose(g, 2 * x.data, atol=1e-8)


class TestAdamW:
    def _params(self):
        p = ad.Tensor([1.0, -2.0], requires_grad=True)
        return {"p": p}

    def test_zero_grad_zero_decay_is_identity(self):
        params = self._params()
        before = params["p"].data.copy()
        opt = ad.AdamW(params, lr=0.1, weight_decay=0.0)
        params["p"].grad = np.zeros(2)
        opt.step()
        np.testing.assert_array_equal(params["p"].data, before)

    def test_descent_direction(self):
        p = ad.Tensor([1.0], requires_grad=True)
        opt = ad.AdamW({"p": p}, lr=0.1, weight_decay=0.0)
        p.grad = np.array([1.0])
        opt.step()
        assert p.data[0] < 1.0

    def test_decay_is_decoupled_from_moments(self):
        p = ad.Tensor([10.0], requires_grad=True)
        opt = ad.AdamW({"p": p}, lr=0.5, weight_decay=0.1)
        p.grad = np.array([0.0])
        opt.step()
        # moments stay zero under a zero gradient; only decay moves the weight
        np.testing.assert_array_equal(opt.m["p"], [0.0])
        np.testing.assert_array_equal(opt.v["p"], [0.0])
        np.testing.assert_allclose(p.data, [10.0 * (1 - 0.5 * 0.1)])

    def test_seeded_runs_are_bitwise_identical(self):
        def run():
            rng = np.random.default_rng(42)
            w = ad.Tensor(rng.normal(size=(3, 3)), requires_grad=True)
            opt = ad.AdamW({"w": w}, lr=1e-2, weight_decay=0.02)
            for _ in range(5):
                with ad.Tape() as tape:
                    loss = ad.sum_all(ad.mul(w, w))
                tape.backward(loss)
                opt.step()
                opt.zero_grad()
            return w.data.tobytes()

        assert run() == run()

    def test_missing_grad_rejected(self):
        params = self._params()
        opt = ad.AdamW(params, lr=0.1)
        with pytest.raises(ad.OptimizerError, match="p"):
            opt.step()
