import numpy as np
import pytest

from fedmoe import tensor as tz
from fedmoe.adapter import MoEAdapter, RoutingStats, topk_mask
from fedmoe.errors import (AggregationError, ConfigurationError, DimensionError,
                           UsageError)
from fedmoe.tensor import Tape, Tensor

from oracles import finite_difference_grads, softmax_direct


def brute_force_topk(logits, k):
    """Independent selection rule: largest logits, lowest index on ties."""
    order = sorted(range(len(logits)), key=lambda i: (-logits[i], i))
    return sorted(order[:k])


def identity_router_adapter(m, k, **kwargs):
    """Adapter whose routing logits equal the input token (d = M)."""
    adapter = MoEAdapter(dim=m, ranks=[2] * m, k=k, **kwargs)
    adapter.router.WR.values[...] = np.eye(m)
    return adapter


# -- routing -------------------------------------------------------------------


def test_route_uniform_logits_full_activation():
    adapter = MoEAdapter(dim=4, ranks=[1, 1, 1, 1], k=4)
    weights, selected = adapter.route(np.array([0.3, -0.1, 0.8, 0.0]))
    np.testing.assert_allclose(weights, 0.25, atol=1e-15)  # router starts at 0
    assert selected == [0, 1, 2, 3]


def test_route_k1_is_one_hot_at_argmax():
    adapter = identity_router_adapter(4, k=1)
    weights, selected = adapter.route(np.array([0.1, 3.0, -1.0, 0.0]))
    np.testing.assert_array_equal(weights, [0.0, 1.0, 0.0, 0.0])
    assert selected == [1]


def test_route_k2_matches_softmax_over_selected():
    adapter = identity_router_adapter(4, k=2)
    weights, selected = adapter.route(np.array([2.0, 1.0, 0.0, -1.0]))
    assert selected == [0, 1]
    np.testing.assert_allclose(weights[:2], softmax_direct([2.0, 1.0]), atol=1e-12)
    np.testing.assert_allclose(weights, [0.7311, 0.2689, 0.0, 0.0], atol=1e-4)


def test_route_breaks_ties_toward_lowest_index():
    adapter = identity_router_adapter(4, k=2)
    weights, selected = adapter.route(np.array([1.0, 1.0, 1.0, 0.0]))
    assert selected == [0, 1]
    np.testing.assert_allclose(weights, [0.5, 0.5, 0.0, 0.0], atol=1e-15)


def test_route_contract_on_random_tokens():
    rng = np.random.default_rng(7)
    adapter = MoEAdapter(dim=12, ranks=[1] * 8, k=3)
    adapter.router.WR.values[...] = rng.normal(size=(8, 12))
    for _ in range(200):
        x = rng.normal(size=12)
        weights, selected = adapter.route(x)
        nonzero = np.flatnonzero(weights)
        assert len(nonzero) == 3
        assert abs(weights.sum() - 1.0) <= 1e-12
        logits = adapter.router.WR.values @ x
        assert selected == brute_force_topk(logits, 3)
        assert sorted(nonzero.tolist()) == selected


def test_route_rejects_uniform_mode():
    adapter = MoEAdapter(dim=4, ranks=[2, 2], k=2, gating_mode="uniform_one")
    with pytest.raises(UsageError):
        adapter.route(np.zeros(4))


def test_topk_mask_selects_per_row():
    z = np.array([[3.0, 1.0, 2.0], [1.0, 1.0, 0.0]])
    mask = topk_mask(z, 2)
    np.testing.assert_array_equal(mask, [[True, False, True], [True, True, False]])


# -- forward -------------------------------------------------------------------


def test_zero_initialized_adapter_is_exact_identity():
    rng = np.random.default_rng(8)
    adapter = MoEAdapter(dim=6, ranks=[3, 3], k=1, rng=rng)
    backbone_out = rng.normal(size=(5, 6))
    x = rng.normal(size=(5, 6))
    out = adapter.forward(Tensor(backbone_out), Tensor(x))
    np.testing.assert_array_equal(out.values, backbone_out)


def test_single_token_forward_keeps_shape():
    adapter = MoEAdapter(dim=4, ranks=[2, 2], k=2)
    out = adapter.forward(Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert out.shape == (4,)


def test_hand_evaluated_two_expert_case():
    # d=2, M=2, K=1; router makes expert 0 win for x = [1, 0]
    adapter = MoEAdapter(dim=2, ranks=[1, 1], k=1, activation="linear")
    adapter.router.WR.values[...] = [[5.0, 0.0], [0.0, 5.0]]
    adapter.experts[0].E1.values[...] = [[1.0, 2.0]]
    adapter.experts[0].E2.values[...] = [[3.0], [4.0]]
    adapter.experts[1].E1.values[...] = [[100.0, 100.0]]
    adapter.experts[1].E2.values[...] = [[100.0], [100.0]]
    backbone_out = np.array([0.5, -0.5])
    x = np.array([1.0, 0.0])
    out = adapter.forward(Tensor(backbone_out), Tensor(x))
    # E1 @ x = 1.0; E2 * 1.0 = [3, 4]; plus the backbone output
    np.testing.assert_allclose(out.values, [3.5, 3.5], atol=1e-12)


def test_equal_logits_full_activation_averages_experts():
    rng = np.random.default_rng(9)
    adapter = MoEAdapter(dim=5, ranks=[2, 2, 2, 2], k=4, rng=rng)
    for e in adapter.experts:
        e.E2.values[...] = rng.normal(size=e.E2.shape)
    x = rng.normal(size=(3, 5))
    out = adapter.forward(Tensor(np.zeros((3, 5))), Tensor(x))
    want = np.mean([e.forward(Tensor(x)).values for e in adapter.experts], axis=0)
    np.testing.assert_allclose(out.values, want, atol=1e-12)


def test_permuting_experts_and_router_rows_changes_nothing():
    rng = np.random.default_rng(10)
    adapter = MoEAdapter(dim=6, ranks=[2, 2, 2], k=2, rng=rng)
    adapter.router.WR.values[...] = rng.normal(size=(3, 6))
    for e in adapter.experts:
        e.E2.values[...] = rng.normal(size=e.E2.shape)

    perm = [2, 0, 1]
    twin = MoEAdapter(dim=6, ranks=[2, 2, 2], k=2)
    twin.router.WR.values[...] = adapter.router.WR.values[perm]
    for dst, src in enumerate(perm):
        twin.experts[dst].E1.values[...] = adapter.experts[src].E1.values
        twin.experts[dst].E2.values[...] = adapter.experts[src].E2.values

    x = rng.normal(size=(4, 6))
    base = rng.normal(size=(4, 6))
    out = adapter.forward(Tensor(base), Tensor(x))
    out_perm = twin.forward(Tensor(base), Tensor(x))
    np.testing.assert_allclose(out_perm.values, out.values, atol=1e-12)

    w, sel = adapter.route(x[0])
    w_perm, sel_perm = twin.route(x[0])
    np.testing.assert_allclose(w_perm, w[perm], atol=1e-15)
    assert sel_perm == sorted(int(np.argsort(perm)[i]) for i in sel)


def test_forward_rejects_mismatched_shapes():
    adapter = MoEAdapter(dim=4, ranks=[2], k=1)
    with pytest.raises(DimensionError):
        adapter.forward(Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 4))))
    with pytest.raises(DimensionError):
        adapter.forward(Tensor(np.zeros((2, 5))), Tensor(np.zeros((2, 5))))


# -- LoRA equivalence -------------------------------------------------------------


def test_from_lora_single_expert_keeps_factors():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(4, 10))
    b = rng.normal(size=(10, 4))
    adapter = MoEAdapter.from_lora(Tensor(a), Tensor(b), ranks=[4])
    np.testing.assert_array_equal(adapter.experts[0].E1.values, a)
    np.testing.assert_array_equal(adapter.experts[0].E2.values, b)


def test_from_lora_block_sum_reconstructs_dense_product():
    rng = np.random.default_rng(12)
    a = rng.normal(size=(4, 9))
    b = rng.normal(size=(9, 4))
    adapter = MoEAdapter.from_lora(Tensor(a), Tensor(b), ranks=[2, 2])
    total = sum(e.E2.values @ e.E1.values for e in adapter.experts)
    np.testing.assert_allclose(total, b @ a, atol=1e-12)


@pytest.mark.parametrize("ranks", [[4], [2, 2], [1, 3], [1, 1, 1, 1]])
def test_from_lora_forward_equals_lora_update(ranks):
    rng = np.random.default_rng(13)
    a = rng.normal(size=(4, 8))
    b = rng.normal(size=(8, 4))
    adapter = MoEAdapter.from_lora(Tensor(a), Tensor(b), ranks=ranks)
    for _ in range(10):
        x = rng.normal(size=8)
        base = rng.normal(size=8)
        out = adapter.forward(Tensor(base), Tensor(x))
        np.testing.assert_allclose(out.values, base + b @ (a @ x), atol=1e-9)


def test_from_lora_zero_factor_is_zero_map():
    b = np.random.default_rng(14).normal(size=(6, 3))
    adapter = MoEAdapter.from_lora(Tensor(np.zeros((3, 6))), Tensor(b), [1, 2])
    x = np.ones(6)
    out = adapter.forward(Tensor(np.zeros(6)), Tensor(x))
    np.testing.assert_array_equal(out.values, np.zeros(6))


def test_from_lora_validates_ranks_and_shapes():
    a, b = Tensor(np.zeros((4, 8))), Tensor(np.zeros((8, 4)))
    with pytest.raises(ConfigurationError):
        MoEAdapter.from_lora(a, b, ranks=[2, 3])
    with pytest.raises(DimensionError):
        MoEAdapter.from_lora(a, Tensor(np.zeros((4, 8))), ranks=[2, 2])
    with pytest.raises(ConfigurationError):
        MoEAdapter.from_lora(Tensor(np.zeros((9, 8))), Tensor(np.zeros((8, 9))),
                             ranks=[9])


# -- gradients ---------------------------------------------------------------------


def test_adapter_gradients_match_finite_differences():
    rng = np.random.default_rng(15)
    adapter = MoEAdapter(dim=6, ranks=[2, 2, 2], k=2, rng=rng)
    adapter.router.WR.values[...] = rng.normal(size=(3, 6))
    for e in adapter.experts:
        e.E2.values[...] = rng.normal(size=e.E2.shape) * 0.1
    x = rng.normal(size=(4, 6))
    base = rng.normal(size=(4, 6))
    w = rng.normal(size=(4, 6))

    def loss_value(_arrays):
        out = adapter.forward(Tensor(base), Tensor(x))
        return tz.mul(out, Tensor(w)).sum().item()

    params = adapter.parameters()
    with Tape() as tape:
        out = adapter.forward(Tensor(base), Tensor(x))
        loss = tz.mul(out, Tensor(w)).sum()
    tape.backward(loss)
    fd = finite_difference_grads(loss_value, [p.values for p in params])
    for p, want in zip(params, fd):
        np.testing.assert_allclose(p.grad, want, rtol=1e-4, atol=1e-8)


def test_never_routed_expert_gets_exactly_zero_grad():
    adapter = MoEAdapter(dim=4, ranks=[1, 1, 1, 1], k=2,
                         rng=np.random.default_rng(16))
    # experts 0 and 1 always win; experts 2 and 3 never enter the top-2
    adapter.router.WR.values[...] = 0.0
    adapter.router.WR.values[0] = [3.0, 3.0, 3.0, 3.0]
    adapter.router.WR.values[1] = [2.0, 2.0, 2.0, 2.0]
    x = np.abs(np.random.default_rng(17).normal(size=(6, 4))) + 0.1
    with Tape() as tape:
        out = adapter.forward(Tensor(np.zeros((6, 4))), Tensor(x))
        loss = out.sum()
    tape.backward(loss)
    for m in (2, 3):
        np.testing.assert_array_equal(adapter.experts[m].E1.grad, 0.0)
        np.testing.assert_array_equal(adapter.experts[m].E2.grad, 0.0)
    assert np.any(adapter.experts[0].E2.grad != 0.0)


def test_last_mean_probs_is_batch_mean_dense_softmax():
    rng = np.random.default_rng(18)
    adapter = MoEAdapter(dim=5, ranks=[1, 1, 1], k=1, rng=rng)
    adapter.router.WR.values[...] = rng.normal(size=(3, 5))
    x = rng.normal(size=(7, 5))
    adapter.forward(Tensor(np.zeros((7, 5))), Tensor(x))
    logits = x @ adapter.router.WR.values.T
    want = np.mean([softmax_direct(row) for row in logits], axis=0)
    np.testing.assert_allclose(adapter.last_mean_probs.values, want, atol=1e-12)


# -- parameter exchange ---------------------------------------------------------------


def test_parameter_round_trip_is_bit_identical():
    rng = np.random.default_rng(19)
    adapter = MoEAdapter(dim=6, ranks=[2, 3], k=1, rng=rng)
    saved = [p.values.copy() for p in adapter.parameters()]
    adapter.load_parameters(saved)
    for p, s in zip(adapter.parameters(), saved):
        np.testing.assert_array_equal(p.values, s)


def test_parameter_order_is_experts_then_router():
    adapter = MoEAdapter(dim=4, ranks=[1, 2], k=1)
    shapes = [p.shape for p in adapter.parameters()]
    assert shapes == [(1, 4), (4, 1), (2, 4), (4, 2), (2, 4)]
    assert adapter.parameter_names() == [
        "expert0.E1", "expert0.E2", "expert1.E1", "expert1.E2", "router.WR"]


def test_load_transposed_tensor_names_position():
    adapter = MoEAdapter(dim=6, ranks=[2, 3], k=1)
    bad = [p.values.copy() for p in adapter.parameters()]
    bad[2] = bad[2].T
    with pytest.raises(AggregationError, match="parameter 2"):
        adapter.load_parameters(bad)
    with pytest.raises(AggregationError, match="5 tensors"):
        adapter.load_parameters(bad[:-1])


def test_adapters_with_different_k_interoperate():
    first = MoEAdapter(dim=5, ranks=[2, 2], k=1, rng=np.random.default_rng(20))
    second = MoEAdapter(dim=5, ranks=[2, 2], k=2, rng=np.random.default_rng(21))
    second.load_parameters([p.values.copy() for p in first.parameters()])
    x = np.random.default_rng(22).normal(size=(3, 5))
    first.forward(Tensor(np.zeros((3, 5))), Tensor(x))
    second.forward(Tensor(np.zeros((3, 5))), Tensor(x))


def test_load_keeps_tensor_identity_for_optimizer_state():
    adapter = MoEAdapter(dim=4, ranks=[2], k=1)
    before = adapter.parameters()
    adapter.load_parameters([np.ones_like(p.values) for p in before])
    assert all(a is b for a, b in zip(before, adapter.parameters()))


# -- stats and construction -------------------------------------------------------------


def test_routing_stats_accumulate_and_reset():
    rng = np.random.default_rng(23)
    adapter = MoEAdapter(dim=6, ranks=[1, 1, 1, 1], k=2, rng=rng)
    adapter.router.WR.values[...] = rng.normal(size=(4, 6))
    adapter.collect_stats = True
    adapter.forward(Tensor(np.zeros((10, 6))), Tensor(rng.normal(size=(10, 6))))
    adapter.forward(Tensor(np.zeros((5, 6))), Tensor(rng.normal(size=(5, 6))))
    stats = adapter.stats
    assert stats.tokens_seen == 15
    assert stats.counts.sum() == 15 * 2
    assert abs(stats.mean_probs.sum() - 1.0) <= 1e-9
    stats.reset()
    assert stats.tokens_seen == 0 and stats.counts.sum() == 0


def test_stats_not_collected_by_default():
    adapter = MoEAdapter(dim=4, ranks=[2, 2], k=1)
    adapter.forward(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 4))))
    assert adapter.stats.tokens_seen == 0


def test_empty_stats_mean_probs_raises():
    with pytest.raises(UsageError):
        RoutingStats.empty(4).mean_probs


@pytest.mark.parametrize("kwargs", [
    dict(dim=4, ranks=[2, 2], k=3),
    dict(dim=4, ranks=[2, 2], k=0),
    dict(dim=4, ranks=[], k=1),
    dict(dim=4, ranks=[2, 0], k=1),
    dict(dim=4, ranks=[2, 2], k=1, gating_mode="dense"),
    dict(dim=4, ranks=[2, 2], k=1, activation="relu"),
])
def test_construction_rejects_bad_config(kwargs):
    with pytest.raises(ConfigurationError):
        MoEAdapter(**kwargs)
