import itertools

import numpy as np
import pytest

from mlorq.exceptions import DegenerateAnchorsWarning, Infeasible, NoFeasibleBit, ZeroSignal
from mlorq.inter_search import (
    LayerMetrics,
    MemoryBudget,
    MetricTable,
    activation_bit_allocation,
    candidate_network_nmse,
    interpolate_metric_table,
    select_anchors,
    solve_allocation,
)
from mlorq.intra_search import LOWRANK, QUANT, Candidate
from mlorq.netsim import Layer, SequentialModel, forward_trace


def _linear_model(rng, n_out=3, n_in=4):
    return SequentialModel([Layer("a", rng.standard_normal((n_out, n_in)))])


def test_nmse_zero_noise(small_model, rng):
    tr = forward_trace(small_model, rng.standard_normal((8, 6)))
    for i, layer in enumerate(small_model.layers):
        assert candidate_network_nmse(small_model, tr, i, layer.weight) == 0.0


def test_nmse_single_layer_closed_form(rng):
    model = _linear_model(rng)
    x = rng.standard_normal((10, 4))
    tr = forward_trace(model, x)
    W = model.layers[0].weight
    Wt = W + 0.1 * rng.standard_normal(W.shape)
    want = np.sum(((W - Wt) @ x.T) ** 2) / np.sum((W @ x.T) ** 2)
    assert candidate_network_nmse(model, tr, 0, Wt) == pytest.approx(want, rel=1e-12)
    D = 0.05 * rng.standard_normal(W.shape)
    one = candidate_network_nmse(model, tr, 0, W + D)
    two = candidate_network_nmse(model, tr, 0, W + 2 * D)
    assert two == pytest.approx(4 * one, rel=1e-10)


def test_nmse_zero_signal(rng):
    model = SequentialModel([Layer("a", np.zeros((2, 3)))])
    tr = forward_trace(model, rng.standard_normal((4, 3)))
    with pytest.raises(ZeroSignal):
        candidate_network_nmse(model, tr, 0, np.ones((2, 3)))


def _group(losses, mems, ba=4, bb=4):
    return [Candidate(LOWRANK, float(l), int(m), rank=i + 1, bits_a=ba, bits_b=bb)
            for i, (l, m) in enumerate(zip(losses, mems))]


def test_small_groups_exact():
    front = _group([5, 3, 1], [10, 20, 30]) + [Candidate(QUANT, 0.5, 40, bits_w=8)]
    calls = []
    m = interpolate_metric_table(front, 4, lambda c: calls.append(c) or c.local_loss * 2)
    assert len(calls) == 4 and not m.interpolated.any()
    np.testing.assert_array_equal(m.phi, [10, 6, 2, 1])


def test_anchors_exact_and_affine_interpolation(rng):
    n = 40
    losses = np.sort(rng.uniform(0, 10, n))[::-1]
    mems = np.arange(1, n + 1) * 37
    front = _group(losses, mems)
    affine = lambda c: 0.3 * c.local_loss + 0.02
    exact = interpolate_metric_table(front, 8, affine)
    assert exact.interpolated.sum() == n - 8
    for c, phi, flag in zip(front, exact.phi, exact.interpolated):
        if not flag:
            assert phi == affine(c)  # anchors bit-for-bit
        assert abs(phi - affine(c)) <= 1e-9


def test_midpoint_interpolation():
    front = _group([4.0, 3.0, 2.0], [1, 2, 3])
    table = {4.0: 1.0, 2.0: 5.0}
    m = interpolate_metric_table(front, 2, lambda c: table[c.local_loss])
    assert m.interpolated.tolist() == [False, True, False]
    assert m.phi[1] == 3.0


def test_degenerate_anchors_warn():
    # both anchors share the local loss of the middle member
    front = _group([2.0, 2.0, 2.0], [1, 2, 3])
    vals = {1: 0.7, 3: 0.9}
    with pytest.warns(DegenerateAnchorsWarning):
        m = interpolate_metric_table(front, 2, lambda c: vals[c.memory_bits])
    assert m.phi[1] in (0.7, 0.9)


def test_select_anchors_extremes_and_ties():
    assert select_anchors([1, 2, 3], [3, 2, 1], 5) == [0, 1, 2]
    idx = select_anchors(list(range(0, 100, 5)), list(range(20, 0, -1)), 4)
    assert idx[0] == 0 and idx[-1] == 19 and len(idx) == 4
    # two members equally close to the midpoint target; lower loss wins
    assert select_anchors([0, 4, 6, 10], [9, 5, 3, 1], 3) == [0, 2, 3]


def test_interpolate_rejects_small_k():
    with pytest.raises(ValueError):
        interpolate_metric_table(_group([1], [1]), 1, lambda c: 0.0)


def _instance(rng, n_layers, max_c, mem_hi=20):
    fronts, phis = [], []
    for _ in range(n_layers):
        k = int(rng.integers(1, max_c + 1))
        fronts.append([Candidate(QUANT, 0.0, int(m), bits_w=2) for m in rng.integers(1, mem_hi, k)])
        phis.append(rng.uniform(0, 1, k))
    table = MetricTable([LayerMetrics(p, np.zeros(len(p), bool)) for p in phis])
    return fronts, phis, table


def _exhaustive(fronts, phis, budget):
    best = None
    for combo in itertools.product(*[range(len(f)) for f in fronts]):
        mem = sum(fronts[l][j].memory_bits for l, j in enumerate(combo))
        if mem > budget:
            continue
        obj = sum(phis[l][j] for l, j in enumerate(combo))
        if best is None or obj < best[0] - 1e-15:
            best = (obj, combo)
    return best


def test_allocation_matches_exhaustive(rng):
    for _ in range(100):
        fronts, phis, table = _instance(rng, int(rng.integers(1, 5)), 5)
        budget = int(rng.integers(1, 20 * len(fronts)))
        want = _exhaustive(fronts, phis, budget)
        if want is None:
            with pytest.raises(Infeasible):
                solve_allocation(fronts, table, budget, delta=1)
            continue
        sol = solve_allocation(fronts, table, budget, delta=1)
        assert sol.objective == pytest.approx(want[0], rel=1e-12, abs=1e-15)
        assert sol.total_memory_bits <= budget
        assert sol.total_memory_bits == sum(c.memory_bits for c in sol.candidates)


def test_allocation_unconstrained_picks_argmin(rng):
    fronts, phis, table = _instance(rng, 4, 5)
    sol = solve_allocation(fronts, table, 10**6, delta=1)
    assert sol.choices == [int(np.argmin(p)) for p in phis]


def test_allocation_infeasible():
    fronts = [[Candidate(QUANT, 0.0, 10, bits_w=2)], [Candidate(QUANT, 0.0, 7, bits_w=2)]]
    table = MetricTable([LayerMetrics(np.zeros(1), np.zeros(1, bool))] * 2)
    with pytest.raises(Infeasible):
        solve_allocation(fronts, table, 16, delta=1)
    assert solve_allocation(fronts, table, 17, delta=1).total_memory_bits == 17
    # feasible in bits, not in 8-bit units (2 + 1 units > 17 // 8)
    with pytest.raises(Infeasible):
        solve_allocation(fronts, table, 17, delta=8)


def test_allocation_tie_break():
    fronts = [[Candidate(QUANT, 0.0, m, bits_w=2) for m in (1, 2, 3)]] * 2
    table = MetricTable([LayerMetrics(np.array([1.0, 1.0, 1.0]), np.zeros(3, bool))] * 2)
    assert solve_allocation(fronts, table, 6, delta=1).choices == [0, 0]


def test_allocation_bit_exact_with_rounding(rng):
    for _ in range(30):
        fronts, phis, table = _instance(rng, 3, 5, mem_hi=5000)
        budget = int(rng.integers(5000, 15000))
        try:
            sol = solve_allocation(fronts, table, budget, delta=1024)
        except Infeasible:
            continue
        assert sol.total_memory_bits <= budget


def test_allocation_monotone_in_budget(rng):
    for _ in range(30):
        fronts, phis, table = _instance(rng, 3, 5)
        objs = []
        for budget in range(60, 0, -3):
            try:
                objs.append(solve_allocation(fronts, table, budget, delta=1).objective)
            except Infeasible:
                break
        assert all(b >= a for a, b in zip(objs, objs[1:]))


def test_budget_from_avg_bits():
    b = MemoryBudget.from_avg_bits(4, [(3, 4), (2, 3)])
    assert b.weights_bits == 4 * 18
    with pytest.raises(ValueError):
        MemoryBudget(0)


def test_activation_examples():
    bits = (2, 3, 4, 6, 8)
    assert activation_bit_allocation({"x": 1000}, 4096, bits) == {"x": 4}
    assert activation_bit_allocation({"x": 512}, 4096, bits) == {"x": 8}
    with pytest.raises(NoFeasibleBit):
        activation_bit_allocation({"x": 3000}, 4096, bits)
