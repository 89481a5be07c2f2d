import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cider import autodiff as ad
from cider.autodiff import Adam, Tape, Tensor, backward, grad_check
from cider.errors import ContractError, DimensionError, NumericError, ParseError

from _fixtures import primitive_cases, primitive_report


def _param(data, name="p"):
    return Tensor(np.array(data, dtype=float), requires_grad=True, name=name)


class TestForwardValues:
    def test_sigmoid_of_zero(self):
        np.testing.assert_array_equal(ad.sigmoid(Tensor(np.zeros((2, 2)))).data, 0.5)

    def test_sigmoid_is_stable_at_extremes(self):
        out = ad.sigmoid(Tensor([[-800.0, 800.0]])).data
        np.testing.assert_array_equal(out, [[0.0, 1.0]])

    def test_matmul_identity(self):
        m = np.random.default_rng(0).normal(size=(3, 4))
        np.testing.assert_array_equal(ad.matmul(Tensor(np.eye(3)), Tensor(m)).data, m)

    def test_weighted_bce_matches_scalar_formula(self):
        # 2-node graph with one edge, w = n^2 / (2|E|) = 2, prediction 0.5 everywhere
        adj = np.array([[0.0, 1.0], [1.0, 0.0]])
        w = 2 ** 2 / (2 * 1)
        got = ad.weighted_bce(Tensor(np.full((2, 2), 0.5)), adj, w).item()
        terms = [-(w * t * math.log(0.5) + (1 - t) * math.log(0.5)) for t in adj.ravel()]
        assert got == pytest.approx(sum(terms) / 4, abs=1e-15)

    def test_log_clamps_at_floor(self):
        assert ad.log(Tensor([[0.0]])).item() == pytest.approx(math.log(ad.LOG_FLOOR))

    def test_softmax_rows_sum_to_one(self):
        s = ad.softmax(Tensor(np.random.default_rng(1).normal(size=(3, 4)))).data
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-15)

    def test_cross_entropy_of_uniform_logits(self):
        assert ad.softmax_cross_entropy(Tensor([[0.0, 0.0]]), 1).item() == pytest.approx(math.log(2))

    def test_gcn_norm_single_edge(self):
        out = ad.gcn_norm(Tensor([[0.0, 1.0], [1.0, 0.0]])).data
        np.testing.assert_allclose(out, 0.5, atol=1e-15)

    def test_concat_and_mask(self):
        a, b = Tensor([[1.0], [2.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]])
        np.testing.assert_array_equal(ad.concat_cols(a, b).data, [[1, 3, 4], [2, 5, 6]])
        np.testing.assert_array_equal(ad.mask(b, np.array([[1, 0], [0, 1]])).data, [[3, 0], [0, 6]])


class TestErrors:
    def test_matmul_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_add_incompatible_shapes(self):
        with pytest.raises(DimensionError):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))

    def test_non_finite_output_names_the_op(self):
        with pytest.raises(NumericError, match="exp"):
            ad.exp(Tensor([[1000.0]]))

    def test_non_finite_tensor_rejected(self):
        with pytest.raises(NumericError):
            Tensor([[np.nan]])

    def test_backward_needs_scalar(self):
        x = _param(np.ones((2, 2)))
        with Tape():
            with pytest.raises(ContractError):
                backward(ad.scale(x, 2.0))

    def test_repeated_backward_is_an_error(self):
        x = _param([[3.0]])
        with Tape():
            loss = ad.mul(x, x)
            backward(loss)
            with pytest.raises(ContractError):
                backward(loss)

    def test_cross_entropy_target_out_of_range(self):
        with pytest.raises(ContractError):
            ad.softmax_cross_entropy(Tensor([[0.0, 0.0]]), 2)


class TestBackward:
    def test_square(self):
        x = _param([[3.0]])
        with Tape():
            backward(ad.mul(x, x))
        np.testing.assert_array_equal(x.grad, [[6.0]])

    def test_linear_map(self):
        rng = np.random.default_rng(2)
        a = rng.normal(size=(4, 3))
        x = _param(rng.normal(size=(3, 2)))
        with Tape():
            backward(ad.total(ad.matmul(Tensor(a), x)))
        # d sum(A X) / dX[k, j] = sum_i A[i, k]
        np.testing.assert_allclose(x.grad, np.repeat(a.sum(axis=0)[:, None], 2, axis=1), atol=1e-14)

    def test_mse_closed_form(self):
        rng = np.random.default_rng(3)
        a, y = rng.normal(size=(3, 3)), rng.normal(size=(3, 1))
        x = _param(rng.normal(size=(3, 1)))
        with Tape():
            backward(ad.mse(ad.matmul(Tensor(a), x), y))
        np.testing.assert_allclose(x.grad, 2 * a.T @ (a @ x.data - y) / 3, atol=1e-14)

    def test_gradients_accumulate_across_uses(self):
        x = _param([[2.0]])
        with Tape():
            backward(ad.add(ad.scale(x, 3.0), ad.mul(x, x)))
        np.testing.assert_allclose(x.grad, [[3.0 + 4.0]])

    def test_linearity(self):
        rng = np.random.default_rng(4)
        w = _param(rng.normal(size=(3, 3)))
        xa, xb = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))

        def la():
            return ad.total(ad.sigmoid(ad.matmul(w, Tensor(xa))))

        def lb():
            return ad.mse(ad.matmul(w, Tensor(xb)), np.zeros((3, 2)))

        grads = []
        for f in (la, lb, lambda: ad.add(la(), lb())):
            w.grad = None
            with Tape():
                backward(f())
            grads.append(w.grad.copy())
        np.testing.assert_allclose(grads[2], grads[0] + grads[1], rtol=0, atol=1e-12)

    def test_constant_inputs_are_not_recorded(self):
        with Tape() as tape:
            ad.sigmoid(ad.matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2)))))
        assert len(tape) == 0

    def test_no_grad_skips_recording(self):
        x = _param(np.ones((2, 2)))
        with Tape() as tape, ad.no_grad():
            out = ad.relu(x)
        assert len(tape) == 0 and not out.requires_grad

    def test_tape_reuse_after_backward_starts_fresh(self):
        x = _param([[1.0]])
        with Tape() as tape:
            backward(ad.scale(x, 2.0))
            loss = ad.scale(x, 5.0)
            assert len(tape) == 1
            backward(loss)
        np.testing.assert_allclose(x.grad, [[7.0]])

    def test_replay_is_bit_identical(self):
        def run():
            rng = np.random.default_rng(11)
            w = _param(rng.normal(size=(4, 4)))
            noise = rng.normal(size=(4, 4))
            with Tape():
                backward(ad.total(ad.exp(ad.scale(ad.add(w, noise), 0.1))))
            return w.grad

        assert np.array_equal(run(), run())


PRIMITIVES = primitive_cases()


class TestGradCheck:
    @pytest.mark.parametrize("name", sorted(PRIMITIVES))
    def test_primitive(self, name):
        report = primitive_report(name, *PRIMITIVES[name])
        assert report.passed, report

    def test_constant_function(self):
        x = _param(np.ones((2, 2)))
        report = grad_check(lambda: Tensor([[4.0]]), [x])
        assert report.max_rel_error == 0.0 and report.passed

    def test_mse_of_linear_map(self):
        rng = np.random.default_rng(7)
        w = _param(rng.normal(size=(3, 3)), "w")
        x, y = rng.normal(size=(3, 1)), rng.normal(size=(3, 1))
        assert grad_check(lambda: ad.mse(ad.matmul(w, Tensor(x)), y), {"w": w}, tol=1e-4).passed

    def test_detects_wrong_gradient(self):
        x = _param([[1.5]])

        def broken():
            # forward x^2 with the backward of x^3
            return ad._op("broken", x.data ** 2, (x,), lambda g: (g * 3 * x.data ** 2,))

        assert not grad_check(broken, [x]).passed

    def test_relative_error_floor(self):
        err = ad.relative_error(np.array([[1.0, 1e-9]]), np.array([[1.0, 2e-9]]))
        assert err.max() < 1e-6


class TestAdam:
    def test_zero_gradient_no_decay_is_noop(self):
        p = _param([[0.3, -1.2]])
        opt = Adam([p], weight_decay=0.0)
        p.grad = np.zeros((1, 2))
        opt.step()
        np.testing.assert_array_equal(p.data, [[0.3, -1.2]])

    def test_first_step_constant_gradient(self):
        p = _param([[0.0]])
        opt = Adam([p], weight_decay=0.0)
        p.grad = np.ones((1, 1))
        opt.step()
        # m_hat = v_hat = 1 after bias correction
        assert p.data[0, 0] == pytest.approx(-0.001 / (1.0 + 1e-8), abs=1e-18)

    def test_weight_decay_shrinks_parameter(self):
        p = _param([[1.0]])
        opt = Adam([p], learning_rate=0.001, weight_decay=0.0005)
        p.grad = np.zeros((1, 1))
        opt.step()
        g = 0.0005
        assert p.data[0, 0] == pytest.approx(1.0 - 0.001 * g / (g + 1e-8), abs=1e-15)

    def test_missing_gradient(self):
        p = _param([[1.0]])
        with pytest.raises(ContractError):
            Adam([p]).step()

    def test_gradients_cleared_and_counter_increases(self):
        p = _param([[1.0]])
        opt = Adam([p])
        for k in (1, 2):
            p.grad = np.ones((1, 1))
            opt.step()
            assert p.grad is None and opt.step_count == k

    def test_adam_step_checks_parameters(self):
        p, q = _param([[1.0]]), _param([[2.0]])
        with pytest.raises(ContractError):
            ad.adam_step([q], Adam([p]))

    def test_matches_reference_over_several_steps(self):
        rng = np.random.default_rng(8)
        p = _param(rng.normal(size=(2, 3)))
        theta = p.data.copy()
        m = np.zeros_like(theta)
        v = np.zeros_like(theta)
        opt = Adam([p], learning_rate=0.01, weight_decay=0.01)
        for t in range(1, 6):
            g = rng.normal(size=theta.shape)
            p.grad = g.copy()
            opt.step()
            g = g + 0.01 * theta
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            theta = theta - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.data, theta, rtol=0, atol=1e-14)


class TestCheckpoint:
    def test_round_trip_is_exact(self, tmp_path):
        rng = np.random.default_rng(9)
        tensors = {"a": rng.normal(size=(3, 2)), "b": Tensor(rng.normal(size=(1, 4)) * 1e-300)}
        ad.save_checkpoint(tmp_path / "c.json", tensors, {"kind": "test"})
        back, desc = ad.load_checkpoint(tmp_path / "c.json")
        assert desc == {"kind": "test"}
        np.testing.assert_array_equal(back["a"], tensors["a"])
        np.testing.assert_array_equal(back["b"], tensors["b"].data)

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{\n  not json")
        with pytest.raises(ParseError, match="bad.json:2"):
            ad.load_checkpoint(path)

    def test_wrong_format_version(self, tmp_path):
        path = tmp_path / "v.json"
        path.write_text('{"format_version": 7, "tensors": {}}')
        with pytest.raises(ContractError):
            ad.load_checkpoint(path)


finite = st.floats(-3, 3, allow_nan=False)


@given(st.integers(1, 4), st.integers(1, 4), st.data())
def test_broadcast_gradient_shapes(rows, cols, data):
    a = _param(np.array(data.draw(st.lists(finite, min_size=rows * cols, max_size=rows * cols)))
               .reshape(rows, cols))
    b = _param(np.array(data.draw(st.lists(finite, min_size=cols, max_size=cols))).reshape(1, cols))
    with Tape():
        backward(ad.total(ad.mul(ad.add(a, b), a)))
    assert a.grad.shape == a.shape and b.grad.shape == b.shape


@given(st.lists(st.floats(-30, 30, allow_nan=False), min_size=1, max_size=12))
def test_sigmoid_symmetry(xs):
    x = np.array(xs).reshape(1, -1)
    total = ad.sigmoid(Tensor(x)).data + ad.sigmoid(Tensor(-x)).data
    np.testing.assert_allclose(total, 1.0, atol=1e-15)
