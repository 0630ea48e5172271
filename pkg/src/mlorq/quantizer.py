"""Uniform affine quantization and quantization-parameter searches.

All quantizers are asymmetric (scale plus zero point) and per output channel,
i.e. one ``(scale, zero_point)`` pair per matrix row. Activations use the same
machinery with a single row.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

#: Percentile grid evaluated by every parameter search.
PERCENTILE_GRID = (0.97, 0.98, 0.99, 0.995, 0.9995, 0.9997, 0.9999, 0.99995, 0.99999, 1.0)
DEFAULT_BITSET = (2, 3, 4, 6, 8)

SCALE_EPS = 1e-12
# stretch parameters of the rectified sigmoid
ZETA = 1.1
GAMMA = -0.1


@dataclass(frozen=True)
class QuantParams:
    """Per-row quantization parameters.

    Scales are rounded to the nearest float32 value on construction so that
    parameters persisted in a float32 container dequantize bit-identically.
    """

    scales: np.ndarray
    zero_points: np.ndarray
    bits: int
    percentiles: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        scales = np.asarray(self.scales, dtype=np.float32).astype(np.float64).reshape(-1)
        zps = np.asarray(self.zero_points, dtype=np.int64).reshape(-1)
        bits = int(self.bits)
        if scales.shape != zps.shape:
            raise ValueError("scales and zero_points must have the same length")
        if bits < 1:
            raise ValueError(f"bit-width must be positive, got {bits}")
        if np.any(~(scales > 0)):
            raise ValueError("scales must be strictly positive")
        if np.any(zps < 0) or np.any(zps > 2**bits - 1):
            raise ValueError("zero points must lie in [0, 2^b - 1]")
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "zero_points", zps)
        object.__setattr__(self, "bits", bits)

    @property
    def n_rows(self):
        return self.scales.shape[0]

    @property
    def qmax(self):
        return 2**self.bits - 1

    def take_rows(self, rows):
        pct = None if self.percentiles is None else self.percentiles[rows]
        return QuantParams(self.scales[rows], self.zero_points[rows], self.bits, pct)


def check_bitset(bitset):
    """Return the bit-width options as a sorted tuple, validating them."""
    bits = sorted({int(b) for b in bitset})
    if not bits:
        raise ValueError("bit-width set must be non-empty")
    if bits[0] < 2:
        raise ValueError("bit-widths must be >= 2")
    return tuple(bits)


def round_half_away(x):
    """Round to nearest integer, ties away from zero."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _as_rows(M):
    M = np.asarray(M, dtype=np.float64)
    if M.ndim == 1:
        M = M[None, :]
    if M.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {M.shape}")
    return M


def _resolve(params, b):
    if b is not None and int(b) != params.bits:
        params = QuantParams(params.scales, params.zero_points, b, params.percentiles)
    return params


def quantize_codes(M, params, b=None):
    """Integer codes ``clip(round(M/s) + z, 0, 2^b - 1)`` of ``M``."""
    params = _resolve(params, b)
    M = _as_rows(M)
    if M.shape[0] != params.n_rows:
        raise ValueError(f"params cover {params.n_rows} rows, matrix has {M.shape[0]}")
    s = params.scales[:, None]
    codes = round_half_away(M / s) + params.zero_points[:, None]
    return np.clip(codes, 0, params.qmax).astype(np.int64)


def dequantize(codes, params):
    codes = np.asarray(codes)
    if codes.ndim == 1:
        codes = codes[None, :]
    return params.scales[:, None] * (codes - params.zero_points[:, None]).astype(np.float64)


def quantize_uniform(M, params, b=None):
    """Fake-quantize ``M`` row-wise; returns the dequantized matrix."""
    params = _resolve(params, b)
    return dequantize(quantize_codes(M, params), params)


def rectified_sigmoid(V):
    """``h(V) = clip(sigmoid(V) * (zeta - gamma) + gamma, 0, 1)``."""
    sig = 0.5 * (1.0 + np.tanh(0.5 * np.asarray(V, dtype=np.float64)))
    return np.clip(sig * (ZETA - GAMMA) + GAMMA, 0.0, 1.0)


def rectified_sigmoid_grad(V):
    """Derivative of :func:`rectified_sigmoid`; zero where the clip saturates."""
    sig = 0.5 * (1.0 + np.tanh(0.5 * np.asarray(V, dtype=np.float64)))
    raw = sig * (ZETA - GAMMA) + GAMMA
    inside = (raw > 0.0) & (raw < 1.0)
    return np.where(inside, sig * (1.0 - sig) * (ZETA - GAMMA), 0.0)


def rounding_regularizer(V, beta):
    """``sum(1 - |2 h(V) - 1| ** beta)``; zero iff every h(V) is 0 or 1."""
    h = rectified_sigmoid(V)
    return float(np.sum(1.0 - np.abs(2.0 * h - 1.0) ** beta))


def soft_quantize(M, V, params, b=None, beta=2.0):
    """Soft quantizer with learnable rounding offsets.

    Returns the soft-quantized matrix and the rounding regularizer value.
    """
    params = _resolve(params, b)
    M = _as_rows(M)
    V = np.asarray(V, dtype=np.float64).reshape(M.shape)
    s = params.scales[:, None]
    z = params.zero_points[:, None]
    codes = np.clip(np.floor(M / s) + rectified_sigmoid(V) + z, 0, params.qmax)
    return s * (codes - z), rounding_regularizer(V, beta)


def percentile_range(M, p):
    """Two-sided symmetric order-statistic clip range per row.

    ``hi`` is the order statistic at index ``ceil(p*n) - 1`` of the sorted
    row and ``lo`` its mirror from the bottom.
    """
    if not 0.0 < p <= 1.0:
        raise ValueError(f"percentile must lie in (0, 1], got {p}")
    M = _as_rows(M)
    n = M.shape[1]
    srt = np.sort(M, axis=1)
    k = int(np.clip(np.ceil(p * n - 1e-9) - 1, 0, n - 1))
    return srt[:, n - 1 - k], srt[:, k]


def params_from_range(lo, hi, b):
    """Scale and zero point covering ``[lo, hi]`` extended to include 0."""
    lo = np.atleast_1d(np.asarray(lo, dtype=np.float64))
    hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))
    qmax = 2**b - 1
    const = hi == lo
    lo_z = np.minimum(lo, 0.0)
    hi_z = np.maximum(hi, 0.0)
    s = np.maximum((hi_z - lo_z) / qmax, SCALE_EPS)
    s = s.astype(np.float32).astype(np.float64)
    z = np.clip(round_half_away(-lo_z / s), 0, qmax)
    # constant non-zero rows: a single grid step of |c| represents c exactly
    c = lo
    nz = const & (c != 0.0)
    s = np.where(nz, np.abs(c), np.where(const, SCALE_EPS, s))
    s = np.maximum(s.astype(np.float32).astype(np.float64), SCALE_EPS)
    z = np.where(nz, np.where(c > 0, 0, 1), np.where(const, 0, z))
    return s, z.astype(np.int64)


def percentile_params(M, p, b):
    """Quantization parameters from the ``p``-percentile clip range."""
    lo, hi = percentile_range(M, p)
    s, z = params_from_range(lo, hi, b)
    return QuantParams(s, z, b, np.full(s.shape, float(p)))


def _grid_search(M, b, grid, row_loss):
    """Per-row argmin of ``row_loss`` over the percentile grid.

    ``row_loss`` maps a fake-quantized matrix to a vector of per-row losses.
    Exact ties resolve toward the larger percentile.
    """
    grid = np.asarray(sorted(float(p) for p in grid))
    cands = [percentile_params(M, p, b) for p in grid]
    losses = np.stack([row_loss(quantize_uniform(M, c)) for c in cands])
    last = len(grid) - 1 - np.argmin(losses[::-1], axis=0)
    rows = np.arange(losses.shape[1])
    scales = np.stack([c.scales for c in cands])[last, rows]
    zps = np.stack([c.zero_points for c in cands])[last, rows]
    return QuantParams(scales, zps, b, grid[last])


def grid_objective(M, params_list, row_loss):
    """Total loss of each params candidate; used by exhaustive re-evaluation."""
    return np.array([row_loss(quantize_uniform(M, p)).sum() for p in params_list])


def search_params_hmse(W, C, b, grid=PERCENTILE_GRID):
    """Hessian-weighted MSE search: minimize ``||C * (W - Q(W))||_F^2``."""
    W = _as_rows(W)
    C2 = np.asarray(C, dtype=np.float64) ** 2
    if C2.shape != W.shape:
        raise ValueError(f"weighting shape {C2.shape} != weight shape {W.shape}")
    return _grid_search(W, b, grid, lambda Wq: np.sum(C2 * (W - Wq) ** 2, axis=1))


def search_params_A(A, B, C, b, grid=PERCENTILE_GRID):
    """Search parameters of the left factor against the full-rank product.

    Minimizes ``||C * (A B - Q(A) B)||_F^2``. Row ``i`` of the product only
    depends on row ``i`` of ``Q(A)``, so the search is separable per row.
    """
    A = _as_rows(A)
    B = _as_rows(B)
    C2 = np.asarray(C, dtype=np.float64) ** 2
    if A.shape[1] != B.shape[0] or C2.shape != (A.shape[0], B.shape[1]):
        raise ValueError("A, B and C shapes do not conform")
    return _grid_search(A, b, grid, lambda Aq: np.sum(C2 * ((A - Aq) @ B) ** 2, axis=1))


def search_params_B(B, b, grid=PERCENTILE_GRID):
    """Plain per-row MSE search for the right factor."""
    B = _as_rows(B)
    return _grid_search(B, b, grid, lambda Bq: np.sum((B - Bq) ** 2, axis=1))


def activation_params(x, b, grid=PERCENTILE_GRID):
    """Per-tensor parameters for an activation batch (single row, min MSE)."""
    flat = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return search_params_B(flat, b, grid)


def quantize_activation(x, params):
    x = np.asarray(x, dtype=np.float64)
    return quantize_uniform(x.reshape(1, -1), params).reshape(x.shape)
