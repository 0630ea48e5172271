"""Per-layer candidate enumeration and Pareto filtering."""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .exceptions import EmptyInput, ShapeMismatch
from .lowrank import Decomposition, hessian_weighted_decompose
from .quantizer import (
    PERCENTILE_GRID,
    QuantParams,
    check_bitset,
    quantize_codes,
    dequantize,
    search_params_A,
    search_params_B,
    search_params_hmse,
)

QUANT = "quant"
LOWRANK = "lowrank"


@dataclass(frozen=True)
class Candidate:
    """One compression option for one layer.

    ``kind`` is ``"quant"`` (dense weight at ``bits_w``) or ``"lowrank"``
    (rank ``rank`` factors at ``bits_a`` / ``bits_b``).
    """

    kind: str
    local_loss: float
    memory_bits: int
    layer_index: int = 0
    bits_w: Optional[int] = None
    rank: Optional[int] = None
    bits_a: Optional[int] = None
    bits_b: Optional[int] = None
    params: Tuple[QuantParams, ...] = field(default=(), compare=False, repr=False)

    @property
    def is_lowrank(self):
        return self.kind == LOWRANK

    @property
    def group(self):
        return (self.bits_a, self.bits_b) if self.is_lowrank else None

    def tie_key(self):
        # smaller rank, then smaller b_A, then quant before low-rank
        if self.is_lowrank:
            return (self.rank, self.bits_a, 1, self.bits_b)
        return (0, self.bits_w, 0, 0)

    def label(self):
        if self.is_lowrank:
            return f"lowrank(r={self.rank}, b_A={self.bits_a}, b_B={self.bits_b})"
        return f"quant(b={self.bits_w})"


def local_loss(W, W_hat, C):
    """Hessian-weighted squared Frobenius error ``||C * (W - W_hat)||_F^2``."""
    W = np.asarray(W, dtype=np.float64)
    W_hat = np.asarray(W_hat, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    if W.shape != W_hat.shape or C.shape != W.shape:
        raise ShapeMismatch(f"shapes differ: W {W.shape}, W_hat {W_hat.shape}, C {C.shape}")
    return float(np.sum((C * (W - W_hat)) ** 2))


def memory_footprint(kind, n_out, n_in, bits_w=None, rank=None, bits_a=None, bits_b=None):
    """Weight storage in bits (scales and zero points are not counted)."""
    if kind == QUANT:
        return int(n_out) * int(n_in) * int(bits_w)
    if kind == LOWRANK:
        return int(rank) * (int(n_out) * int(bits_a) + int(n_in) * int(bits_b))
    raise ValueError(f"unknown candidate kind {kind!r}")


def rank_schedule(r_max, stride=1):
    """Ranks ``1, 1+stride, ...`` plus ``r_max``."""
    stride = max(int(stride), 1)
    ranks = list(range(1, r_max + 1, stride))
    if ranks[-1] != r_max:
        ranks.append(r_max)
    return ranks


def candidate_count(n_out, n_in, n_bits, compressible=True, rank_stride=1):
    if not compressible:
        return n_bits
    return n_bits * (1 + n_bits * len(rank_schedule(min(n_out, n_in), rank_stride)))


class LayerSpace:
    """Everything needed to enumerate and materialize one layer's candidates.

    Holds the weight, Hessian weights, decomposition and the quantized
    matrices for every bit-width. Construction runs the parameter searches.
    """

    def __init__(self, weight, hessian, bitset, grid=PERCENTILE_GRID, layer_index=0,
                 compressible=True, decomposition=None):
        self.W = np.asarray(weight, dtype=np.float64)
        self.hessian = hessian
        self.bitset = check_bitset(bitset)
        self.grid = tuple(grid)
        self.layer_index = layer_index
        self.compressible = compressible
        self.w_params = {b: search_params_hmse(self.W, hessian.C, b, self.grid) for b in self.bitset}
        self.w_quant = {b: dequantize(quantize_codes(self.W, p), p) for b, p in self.w_params.items()}
        self.decomposition: Optional[Decomposition] = None
        self.a_params: Dict[int, QuantParams] = {}
        self.b_params: Dict[int, QuantParams] = {}
        self.a_quant: Dict[int, np.ndarray] = {}
        self.b_quant: Dict[int, np.ndarray] = {}
        if compressible:
            dec = decomposition or hessian_weighted_decompose(self.W, hessian.Q)
            self.decomposition = dec
            for b in self.bitset:
                pa = search_params_A(dec.A, dec.B, hessian.C, b, self.grid)
                pb = search_params_B(dec.B, b, self.grid)
                self.a_params[b], self.b_params[b] = pa, pb
                self.a_quant[b] = dequantize(quantize_codes(dec.A, pa), pa)
                self.b_quant[b] = dequantize(quantize_codes(dec.B, pb), pb)

    @property
    def shape(self):
        return self.W.shape

    @property
    def r_max(self):
        return min(self.W.shape)

    def factors(self, cand):
        """Quantized ``(A_r, B_r)`` for a low-rank candidate."""
        r = cand.rank
        return self.a_quant[cand.bits_a][:, :r], self.b_quant[cand.bits_b][:r, :]

    def weight(self, cand):
        """Dense compressed weight of a candidate."""
        if cand.is_lowrank:
            A, B = self.factors(cand)
            return A @ B
        return self.w_quant[cand.bits_w]

    def incremental_weights(self, bits_a, bits_b, ranks):
        """Yield ``(r, W_r)`` accumulating rank blocks of the quantized factors.

        Because A is quantized per row with parameters frozen across ranks,
        the quantized rank-``r`` factor is a column slice of the full one and
        ``W_r = W_{r'} + A[:, r':r] @ B[r':r, :]``.
        """
        A = self.a_quant[bits_a]
        B = self.b_quant[bits_b]
        acc = np.zeros_like(self.W)
        prev = 0
        for r in ranks:
            acc += A[:, prev:r] @ B[prev:r, :]
            prev = r
            yield r, acc


def enumerate_candidates(space, rank_stride=1):
    n_out, n_in = space.shape
    C2 = space.hessian.C ** 2
    out = []
    for b in space.bitset:
        out.append(Candidate(
            kind=QUANT,
            local_loss=float(np.sum(C2 * (space.W - space.w_quant[b]) ** 2)),
            memory_bits=memory_footprint(QUANT, n_out, n_in, bits_w=b),
            layer_index=space.layer_index,
            bits_w=b,
            params=(space.w_params[b],),
        ))
    if not space.compressible:
        return out
    ranks = rank_schedule(space.r_max, rank_stride)
    for ba in space.bitset:
        for bb in space.bitset:
            for r, W_r in space.incremental_weights(ba, bb, ranks):
                out.append(Candidate(
                    kind=LOWRANK,
                    local_loss=float(np.sum(C2 * (space.W - W_r) ** 2)),
                    memory_bits=memory_footprint(LOWRANK, n_out, n_in, rank=r, bits_a=ba, bits_b=bb),
                    layer_index=space.layer_index,
                    rank=r,
                    bits_a=ba,
                    bits_b=bb,
                    params=(space.a_params[ba], space.b_params[bb]),
                ))
    return out


def dominates(p, q):
    """``p`` is no worse on both objectives and strictly better on one."""
    return (p.local_loss <= q.local_loss and p.memory_bits <= q.memory_bits
            and (p.local_loss < q.local_loss or p.memory_bits < q.memory_bits))


@dataclass
class ParetoFront:
    """Non-dominated candidates sorted by memory ascending."""

    candidates: List[Candidate]

    def __len__(self):
        return len(self.candidates)

    def __iter__(self):
        return iter(self.candidates)

    def __getitem__(self, i):
        return self.candidates[i]


def pareto_front(candidates):
    """Non-dominated subset under (local loss, memory), both minimized.

    Candidates equal on both objectives collapse to the one with the
    smallest :meth:`Candidate.tie_key`.
    """
    candidates = list(candidates)
    if not candidates:
        raise EmptyInput("cannot build a Pareto front from no candidates")
    order = sorted(candidates, key=lambda c: (c.memory_bits, c.local_loss, c.tie_key()))
    front = []
    best = np.inf
    for c in order:
        if c.local_loss < best:
            front.append(c)
            best = c.local_loss
    return ParetoFront(front)


def front_to_rows(front, layer_name=""):
    """Rows for the front CSV export."""
    rows = []
    for c in front:
        rows.append({
            "layer": layer_name,
            "kind": c.kind,
            "r": c.rank if c.is_lowrank else "",
            "b_A": c.bits_a if c.is_lowrank else "",
            "b_B": c.bits_b if c.is_lowrank else "",
            "b_W": "" if c.is_lowrank else c.bits_w,
            "local_loss": repr(c.local_loss),
            "memory_bits": c.memory_bits,
        })
    return rows
