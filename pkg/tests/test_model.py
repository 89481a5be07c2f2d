import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cider import autodiff as ad
from cider.autodiff import Adam, Tape, Tensor, backward
from cider.errors import ContractError, DimensionError, NumericError
from cider.gnn import GcnLayer, TaskModel, propagation_matrix
from cider.graph import adjacency_from_edges
from cider.model import (
    CiderParams, LatentGaussian, decode_inner_product, encode_shared, infer_causal,
    infer_spurious, loss_kld, loss_l1_model, loss_l1_phenomenon, loss_reconstruction,
    loss_task, make_counterfactual, positive_weight, reparam_sample, total_loss,
)

from _fixtures import SIX_NODE_EDGES, cycle_adj, hand_params

EDGE = np.array([[0.0, 1.0], [1.0, 0.0]])


def _const(arr):
    return Tensor(np.asarray(arr, dtype=float))


def _gauss(mu, lv):
    return LatentGaussian(_const(mu), _const(lv))


def _head_only_model(bias, d=1, classes=2):
    """Task model whose logits equal ``bias`` regardless of the graph."""
    layer = GcnLayer(_const(np.ones((d, 1))), None, "relu")
    return TaskModel([layer], _const(np.zeros((1, classes))), _const([bias]))


class TestEncoder:
    def test_zero_features(self):
        p = hand_params(3, 4, 2)
        h = encode_shared(p, np.zeros((5, 3)), cycle_adj(5))
        np.testing.assert_array_equal(h.data, 0.0)

    def test_identity_configuration(self):
        p = hand_params(3, 3, 2)
        p.shared.weight.data = np.eye(3)
        p.shared.activation = "identity"
        x = np.random.default_rng(0).normal(size=(4, 3))
        h = encode_shared(p, x, None, a_hat=_const(np.eye(4)))
        np.testing.assert_array_equal(h.data, x)

    def test_triangle_by_hand(self):
        p = hand_params(2, 2, 2)
        p.shared.weight.data = np.array([[1.0, -1.0], [2.0, 0.5]])
        tri = adjacency_from_edges(3, [(0, 1), (1, 2), (0, 2)])
        x = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        # sum propagation: (A + I) X = [[2, 2]] * 3 rows; times W = [6, -1] -> relu [6, 0]
        h = encode_shared(p, x, tri)
        np.testing.assert_array_equal(h.data, [[6.0, 0.0]] * 3)


class TestHeads:
    def test_zero_hidden_is_standard_normal(self):
        p = hand_params(3, 4, 2)
        g = infer_causal(p, _const(np.zeros((5, 4))), _const(np.eye(5)))
        np.testing.assert_array_equal(g.mu.data, 0.0)
        np.testing.assert_array_equal(g.log_var.data, 0.0)

    def test_log_var_clamp(self):
        p = hand_params(3, 4, 2, scale=1.0, seed=1)
        p.logvar_c.weight.data = 1e4 * np.array([[1.0, -1.0]] * 4)
        g = infer_causal(p, _const(np.ones((3, 4))), _const(np.eye(3)))
        np.testing.assert_array_equal(g.log_var.data, [[10.0, -10.0]] * 3)

    def test_spurious_zero_inputs(self):
        p = hand_params(3, 4, 2)
        g = infer_spurious(p, _const(np.zeros((5, 4))), _const(np.zeros((5, 2))), _const(np.eye(5)))
        np.testing.assert_array_equal(g.mu.data, 0.0)
        np.testing.assert_array_equal(g.log_var.data, 0.0)

    def test_spurious_depends_on_causal_sample(self):
        p = hand_params(3, 4, 2, seed=2)
        h = _const(np.zeros((5, 4)))
        a = infer_spurious(p, h, _const(np.zeros((5, 2))), _const(np.eye(5)))
        b = infer_spurious(p, h, _const(np.ones((5, 2))), _const(np.eye(5)))
        assert not np.array_equal(a.mu.data, b.mu.data)

    def test_spurious_shape_check(self):
        p = hand_params(3, 4, 2)
        with pytest.raises(DimensionError):
            infer_spurious(p, _const(np.zeros((5, 4))), _const(np.zeros((5, 3))), _const(np.eye(5)))

    def test_gaussian_shape_check(self):
        with pytest.raises(DimensionError):
            _gauss(np.zeros((2, 2)), np.zeros((2, 3)))


class TestReparam:
    def test_clamp_floor_collapses_to_mean(self):
        mu = np.random.default_rng(0).normal(size=(50, 3))
        z = reparam_sample(_gauss(mu, np.full((50, 3), -10.0)), np.random.default_rng(1))
        assert np.abs(z.data - mu).max() < 6 * math.exp(-5)

    def test_monte_carlo_mean(self):
        z = reparam_sample(_gauss(np.ones((10000, 1)), np.zeros((10000, 1))), np.random.default_rng(2))
        assert abs(z.data.mean() - 1.0) < 0.05

    def test_seeded(self):
        g = _gauss(np.zeros((4, 2)), np.zeros((4, 2)))
        a = reparam_sample(g, np.random.default_rng(3)).data
        b = reparam_sample(g, np.random.default_rng(3)).data
        assert np.array_equal(a, b)


class TestDecoder:
    def test_zero_embedding(self):
        p = decode_inner_product(np.zeros((4, 3))).data
        np.testing.assert_array_equal(p, 0.5 * (1 - np.eye(4)))

    def test_orthogonal_rows(self):
        p = decode_inner_product(np.array([[1.0, 0.0], [0.0, 3.0]])).data
        assert p[0, 1] == 0.5

    def test_parallel_rows(self):
        p = decode_inner_product(np.array([[1.0, 0.0], [1.0, 0.0]])).data
        assert p[0, 1] == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-15)


class TestCounterfactual:
    def test_same_draw_is_reconstruction_on_support(self):
        rng = np.random.default_rng(4)
        adj = cycle_adj(5)
        pc = decode_inner_product(rng.normal(size=(5, 2))).data
        ps = decode_inner_product(rng.normal(size=(5, 2))).data
        np.testing.assert_allclose(make_counterfactual(pc, ps, adj), (pc + ps - pc * ps) * adj,
                                   atol=1e-15)

    def test_absorbing_causal_channel(self):
        adj = adjacency_from_edges(6, SIX_NODE_EDGES)
        draw = (np.random.default_rng(5).random((6, 6)) < 0.5).astype(float)
        np.testing.assert_array_equal(make_counterfactual(adj, draw, adj), adj)

    def test_empty_causal_channel(self):
        adj = cycle_adj(5)
        draw = (np.random.default_rng(6).random((5, 5)) < 0.5).astype(float)
        np.testing.assert_array_equal(make_counterfactual(np.zeros((5, 5)), draw, adj), draw * adj)


class TestL1Losses:
    def test_identical_counterfactuals(self, small_ds, small_task):
        g = small_ds.graphs[0]
        assert loss_l1_model(small_task, g.x, g.adj, [g.adj, g.adj]).item() == 0.0

    def test_two_node_by_hand(self):
        layer = GcnLayer(_const([[1.0, 2.0]]), _const(np.zeros((1, 2))), "relu")
        model = TaskModel([layer], _const(np.ones((2, 2))), _const(np.zeros((1, 2))))
        x = np.array([[1.0], [2.0]])
        # full graph: (A + I) x = [3, 3] -> rep [3, 6]; half edge: [2, 2.5] -> rep [2.25, 4.5]
        loss = loss_l1_model(model, x, EDGE, [Tensor(0.5 * EDGE)])
        assert loss.item() == pytest.approx(0.75 + 1.5, abs=1e-14)

    def test_empty_list(self, small_task):
        with pytest.raises(ContractError):
            loss_l1_model(small_task, np.ones((2, 10)), EDGE, [])

    def test_phenomenon_saturated(self):
        model = _head_only_model([50.0, -50.0])
        assert loss_l1_phenomenon(model, np.ones((2, 1)), [EDGE] * 3, 0).item() < 1e-40

    def test_phenomenon_uniform(self):
        model = _head_only_model([0.0, 0.0])
        loss = loss_l1_phenomenon(model, np.ones((2, 1)), [EDGE] * 4, 1)
        assert loss.item() == pytest.approx(4 * math.log(2), abs=1e-14)


class TestKld:
    def test_standard_normal(self):
        g = _gauss(np.zeros((3, 2)), np.zeros((3, 2)))
        assert loss_kld(g, g).item() == 0.0

    def test_unit_mean(self):
        assert loss_kld(_gauss([[1.0]], [[0.0]])).item() == 0.5

    def test_needs_input(self):
        with pytest.raises(ContractError):
            loss_kld()


class TestReconstruction:
    def test_exact_reconstruction(self):
        adj = cycle_adj(6)
        assert loss_reconstruction(Tensor(adj), adj).item() < 1e-10

    def test_half_everywhere(self):
        adj = cycle_adj(5)
        n, ones = 5, 10.0
        w = n * n / ones
        expected = (w * ones + (n * n - ones)) * math.log(2) / (n * n)
        assert loss_reconstruction(Tensor(np.full((5, 5), 0.5)), adj).item() == pytest.approx(expected, abs=1e-14)

    def test_positive_weight(self):
        assert positive_weight(EDGE) == 2.0
        with pytest.raises(ContractError):
            positive_weight(np.zeros((3, 3)))

    def test_vgae_training_decreases_loss(self):
        rng = np.random.default_rng(7)
        adj = adjacency_from_edges(6, SIX_NODE_EDGES)
        x = rng.normal(size=(6, 3))
        params = CiderParams.init(3, rng, hidden=8, h=4)
        opt = Adam(params.parameters(), learning_rate=0.01, weight_decay=0.0)
        a_hat = propagation_matrix(adj, params.propagation)
        losses = []
        for _ in range(500):
            with Tape():
                g = infer_causal(params, encode_shared(params, x, None, a_hat), a_hat)
                loss = loss_reconstruction(decode_inner_product(g.mu), adj)
                backward(loss)
            for p in params.parameters():
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            opt.step()
            losses.append(loss.item())
        assert (np.diff(losses) < 0).mean() >= 0.95


class TestTaskLoss:
    def test_perfect_prediction(self):
        model = _head_only_model([800.0, -800.0])
        assert loss_task(model, EDGE, np.ones((2, 1)), 0, EDGE).item() == 0.0

    def test_uniform_prediction(self):
        model = _head_only_model([0.0, 0.0])
        assert loss_task(model, EDGE, np.ones((2, 1)), 1, EDGE).item() == 0.25


class TestTotalLoss:
    def test_arithmetic(self):
        assert total_loss(0, 0, 0, 0).total == 0.0
        assert total_loss(1, 2, 3, 4).total == 10.0
        assert total_loss(1, 2, 3, 4, lambda_task=0.0).total == 6.0

    def test_tensor_total_matches_value(self):
        parts = [Tensor([[v]]) for v in (0.5, 1.5, 2.0, 3.0)]
        out = total_loss(*parts, lambda_task=0.5)
        assert out.tensor.item() == out.total == 5.5
        assert out.as_dict()["task"] == 3.0

    def test_non_finite_part_is_named(self):
        with pytest.raises(NumericError, match="recon"):
            total_loss(1.0, 1.0, float("nan"), 1.0)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = CiderParams.init(4, np.random.default_rng(8), hidden=5, h=3, propagation="sym")
        params.save(tmp_path / "c.json", extra={"note": 1})
        back = CiderParams.load(tmp_path / "c.json")
        assert back.descriptor() == params.descriptor()
        for name, t in params.named_tensors().items():
            np.testing.assert_array_equal(back.named_tensors()[name].data, t.data)

    def test_rejects_task_checkpoint(self, tmp_path):
        TaskModel.init(2, (2,), 2, np.random.default_rng(0)).save(tmp_path / "t.json")
        with pytest.raises(ContractError):
            CiderParams.load(tmp_path / "t.json")

    def test_head_shapes_checked(self):
        p = hand_params(3, 4, 2)
        with pytest.raises(DimensionError):
            CiderParams(p.shared, p.mu_c, p.logvar_c, p.mu_c, p.logvar_s)


@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(-10, 10)), min_size=1, max_size=8))
def test_kld_is_nonnegative(pairs):
    mu = np.array([[m for m, _ in pairs]])
    lv = np.array([[v for _, v in pairs]])
    assert loss_kld(_gauss(mu, lv)).item() >= -1e-12


@given(st.integers(2, 8), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_decoder_is_symmetric_with_zero_diagonal(n, h, seed):
    p = decode_inner_product(np.random.default_rng(seed).normal(size=(n, h))).data
    np.testing.assert_array_equal(p, p.T)
    np.testing.assert_array_equal(np.diag(p), 0.0)
    assert ((p >= 0) & (p <= 1)).all()
