"""Hessian-weighted SVD with a quantization-aware factor split."""

from dataclasses import dataclass

import numpy as np

from .exceptions import IndexOutOfRange, ShapeMismatch, SvdNoConvergence


@dataclass(frozen=True)
class Decomposition:
    """Full-rank factors with ``A @ B == W``.

    ``A = diag(Q)^-1 U`` (``n_out x r_max``) and ``B = diag(S) V^T``
    (``r_max x n_in``), where ``U S V^T`` is the SVD of ``diag(Q) W``.
    """

    A: np.ndarray
    B: np.ndarray
    singular_values: np.ndarray

    @property
    def r_max(self):
        return self.singular_values.shape[0]


def hessian_weighted_decompose(W, Q=None):
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ShapeMismatch(f"weight must be a matrix, got shape {W.shape}")
    n_out = W.shape[0]
    Q = np.ones(n_out) if Q is None else np.asarray(Q, dtype=np.float64).reshape(-1)
    if Q.shape != (n_out,):
        raise ShapeMismatch(f"row weights have length {Q.shape[0]}, expected {n_out}")
    if np.any(~(Q > 0)):
        raise ValueError("row weights must be strictly positive")
    try:
        U, S, Vt = np.linalg.svd(Q[:, None] * W, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdNoConvergence(str(exc)) from exc
    # orient each pair so the largest-magnitude entry of U's column is positive
    pivot = np.argmax(np.abs(U), axis=0)
    sign = np.sign(U[pivot, np.arange(U.shape[1])])
    sign[sign == 0] = 1.0
    U = U * sign
    Vt = Vt * sign[:, None]
    return Decomposition(A=U / Q[:, None], B=S[:, None] * Vt, singular_values=S)


def truncate(decomposition, r):
    """First ``r`` columns of ``A`` and first ``r`` rows of ``B``."""
    r = int(r)
    if not 1 <= r <= decomposition.r_max:
        raise IndexOutOfRange(f"rank {r} outside [1, {decomposition.r_max}]")
    return decomposition.A[:, :r], decomposition.B[:r, :]


def weighted_residual(W, Q, decomposition, r):
    """``||diag(Q) (W - A_r B_r)||_F^2`` for the unquantized truncation."""
    A_r, B_r = truncate(decomposition, r)
    E = np.asarray(W, dtype=np.float64) - A_r @ B_r
    return float(np.sum((np.asarray(Q)[:, None] * E) ** 2))
