"""Network-level candidate scoring and global budget allocation."""

import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .exceptions import DegenerateAnchorsWarning, Infeasible, NoFeasibleBit, ZeroSignal
from .netsim import output_with_layer_replaced
from .quantizer import check_bitset


def candidate_network_nmse(model, float_trace, index, weight):
    """Normalized output MSE when only layer ``index`` uses ``weight``."""
    ref = float_trace.output
    signal = float(np.sum(ref**2))
    if signal == 0.0:
        raise ZeroSignal("float network output is identically zero")
    out = output_with_layer_replaced(model, float_trace, index, weight)
    return float(np.sum((ref - out) ** 2)) / signal


@dataclass
class LayerMetrics:
    """Metric per front candidate, aligned with the front order."""

    phi: np.ndarray
    interpolated: np.ndarray


@dataclass
class MetricTable:
    layers: List[LayerMetrics]

    def __getitem__(self, i):
        return self.layers[i]

    def __len__(self):
        return len(self.layers)


def select_anchors(memories, losses, k_inf):
    """Indices of ``k_inf`` members spaced uniformly in memory.

    Both extremes are always included; among equally close candidates the one
    with the lowest local loss wins.
    """
    memories = np.asarray(memories, dtype=np.float64)
    losses = np.asarray(losses, dtype=np.float64)
    n = len(memories)
    if n <= k_inf:
        return list(range(n))
    targets = np.linspace(memories.min(), memories.max(), k_inf)
    chosen = []
    for t in targets:
        best = None
        for i in range(n):
            if i in chosen:
                continue
            key = (abs(memories[i] - t), losses[i], i)
            if best is None or key < best[0]:
                best = (key, i)
        chosen.append(best[1])
    return sorted(chosen)


def interpolate_metric_table(front, k_inf, exact_evaluator):
    """Metric for every front member, interpolating inside large groups.

    Quant-only members and low-rank groups of at most ``k_inf`` members are
    evaluated exactly. Larger ``(b_A, b_B)`` groups are evaluated at
    ``k_inf`` anchors and the rest interpolated linearly in local loss.
    """
    if k_inf < 2:
        raise ValueError("k_inf must be at least 2")
    cands = list(front)
    phi = np.full(len(cands), np.nan)
    interp = np.zeros(len(cands), dtype=bool)
    groups: Dict[tuple, list] = {}
    for i, c in enumerate(cands):
        if c.is_lowrank:
            groups.setdefault(c.group, []).append(i)
        else:
            phi[i] = exact_evaluator(c)
    for key in sorted(groups):
        idx = groups[key]
        if len(idx) <= k_inf:
            for i in idx:
                phi[i] = exact_evaluator(cands[i])
            continue
        mem = [cands[i].memory_bits for i in idx]
        loss = [cands[i].local_loss for i in idx]
        anchors = [idx[j] for j in select_anchors(mem, loss, k_inf)]
        for i in anchors:
            phi[i] = exact_evaluator(cands[i])
        a_loss = np.array([cands[i].local_loss for i in anchors])
        for i in idx:
            if i in anchors:
                continue
            L = cands[i].local_loss
            lower = [a for a, la in zip(anchors, a_loss) if la <= L]
            upper = [a for a, la in zip(anchors, a_loss) if la >= L]
            lo = max(lower, key=lambda a: cands[a].local_loss) if lower else None
            hi = min(upper, key=lambda a: cands[a].local_loss) if upper else None
            if lo is None or hi is None:
                # outside the anchor span; clamp to the nearest anchor
                phi[i] = phi[hi if lo is None else lo]
            else:
                L_lo, L_hi = cands[lo].local_loss, cands[hi].local_loss
                if L_hi == L_lo:
                    warnings.warn(f"degenerate anchors for group {key}", DegenerateAnchorsWarning)
                    phi[i] = phi[lo]
                else:
                    beta = (L - L_lo) / (L_hi - L_lo)
                    phi[i] = phi[lo] * (1.0 - beta) + phi[hi] * beta
            interp[i] = True
    return LayerMetrics(phi=phi, interpolated=interp)


@dataclass(frozen=True)
class MemoryBudget:
    weights_bits: int
    activation_bits: Optional[int] = None

    def __post_init__(self):
        if self.weights_bits <= 0:
            raise ValueError("weight budget must be positive")
        if self.activation_bits is not None and self.activation_bits <= 0:
            raise ValueError("activation budget must be positive")

    @classmethod
    def from_avg_bits(cls, avg_bits, shapes, activation_bits=None):
        total = sum(int(o) * int(i) for o, i in shapes)
        return cls(int(math.floor(avg_bits * total)), activation_bits)


@dataclass
class AllocationSolution:
    choices: List[int]
    candidates: list
    total_memory_bits: int
    objective: float
    budget_bits: int
    activation_bits: Dict[str, int] = field(default_factory=dict)


def solve_allocation(fronts, metric_table, budget, delta=1024):
    """Exact multiple-choice knapsack by dynamic programming.

    Candidate memories are rounded up to units of ``delta`` bits, so a
    solution feasible in units is feasible in bits. Among optimal solutions
    the lexicographically smallest index vector is returned.
    """
    budget_bits = budget.weights_bits if isinstance(budget, MemoryBudget) else int(budget)
    delta = int(delta)
    if delta < 1:
        raise ValueError("delta must be >= 1")
    fronts = [list(f) for f in fronts]
    costs = [np.asarray(metric_table[i].phi, dtype=np.float64) for i in range(len(fronts))]
    for f, c in zip(fronts, costs):
        if not f:
            raise Infeasible("a layer has no candidates")
        if len(f) != len(c):
            raise ValueError("metric table does not match fronts")
    min_bits = sum(min(c.memory_bits for c in f) for f in fronts)
    if min_bits > budget_bits:
        raise Infeasible(f"minimal assignment needs {min_bits} bits, budget is {budget_bits}")
    units = [np.array([-(-c.memory_bits // delta) for c in f], dtype=np.int64) for f in fronts]
    cap = budget_bits // delta
    if sum(int(u.min()) for u in units) > cap:
        raise Infeasible(
            f"budget is feasible in bits but not in units of {delta} bits; use a smaller delta"
        )
    L = len(fronts)
    # best[l][u]: min cost of layers l..L-1 within u units
    best = [None] * (L + 1)
    best[L] = np.zeros(cap + 1)
    for l in range(L - 1, -1, -1):
        cur = np.full(cap + 1, np.inf)
        nxt = best[l + 1]
        for w, c in zip(units[l], costs[l]):
            if w > cap:
                continue
            cand = np.full(cap + 1, np.inf)
            cand[w:] = c + nxt[: cap + 1 - w]
            np.minimum(cur, cand, out=cur)
        best[l] = cur
    if not np.isfinite(best[0][cap]):
        raise Infeasible("no assignment fits the budget")
    choices = []
    u = cap
    for l in range(L):
        target = best[l][u]
        for j, (w, c) in enumerate(zip(units[l], costs[l])):
            if w <= u and c + best[l + 1][u - w] == target:
                choices.append(j)
                u -= int(w)
                break
    chosen = [fronts[l][j] for l, j in enumerate(choices)]
    total = sum(c.memory_bits for c in chosen)
    objective = float(sum(costs[l][j] for l, j in enumerate(choices)))
    return AllocationSolution(choices, chosen, total, objective, budget_bits)


def activation_bit_allocation(tensor_sizes, budget_bits, bitset):
    """Largest bit-width per activation tensor with ``b * size <= budget``."""
    if budget_bits <= 0:
        raise ValueError("activation budget must be positive")
    bits = check_bitset(bitset)
    out = {}
    for name, size in tensor_sizes.items():
        cap = int(budget_bits) // int(size)
        feasible = [b for b in bits if b <= cap]
        if not feasible:
            raise NoFeasibleBit(
                f"activation {name!r} of size {size} cannot fit {budget_bits} bits at {bits[0]} bits"
            )
        out[name] = max(feasible)
    return out
