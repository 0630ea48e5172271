"""Low-rank aware adaptive rounding.

For each layer, learn whether every element of the quantized factors rounds
up or down so that the compressed layer reproduces the float layer's output
on calibration data. Quant-only layers use the same machinery with a single
dense factor.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .compressed import CompressedLayer
from .exceptions import ShapeMismatch
from .intra_search import LOWRANK, QUANT
from .netsim import activate
from .quantizer import (
    GAMMA,
    ZETA,
    QuantParams,
    quantize_codes,
    rectified_sigmoid,
    rectified_sigmoid_grad,
)

logger = logging.getLogger(__name__)

H_EPS = 1e-4
TARGETS = ("compressed_input", "float_input")


@dataclass
class LoRAdaConfig:
    iterations: int = 20000
    learning_rate: float = 0.3
    reg_weight: float = 0.3
    batch_size: int = 32
    beta_start: float = 20.0
    beta_end: float = 2.0
    warmup: float = 0.2
    seed: int = 0
    target: str = "compressed_input"

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.learning_rate <= 0 or self.reg_weight < 0 or self.batch_size < 1:
            raise ValueError("learning_rate, batch_size must be positive and reg_weight >= 0")
        if self.beta_start <= 0 or self.beta_end <= 0:
            raise ValueError("beta values must be positive")
        if not 0.0 <= self.warmup < 1.0:
            raise ValueError("warmup must lie in [0, 1)")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")

    def beta_at(self, step):
        """Annealed regularizer exponent, or ``None`` during warmup."""
        start = int(self.warmup * self.iterations)
        if step < start:
            return None
        span = max(self.iterations - start - 1, 1)
        frac = min((step - start) / span, 1.0)
        return self.beta_start + (self.beta_end - self.beta_start) * frac


def init_rounding_vars(M, params):
    """Rounding variables whose ``h(V)`` equals the fractional part of ``M/s``."""
    M = np.asarray(M, dtype=np.float64)
    scaled = M / params.scales[:, None]
    frac = scaled - np.floor(scaled)
    p = np.clip((frac - GAMMA) / (ZETA - GAMMA), H_EPS, 1.0 - H_EPS)
    return np.log(p) - np.log1p(-p)


@dataclass
class RoundingState:
    """Learnable rounding of one layer's one or two quantized factors."""

    mats: List[np.ndarray]
    params: List[QuantParams]
    V: List[np.ndarray]
    reg_weight: float = 0.3
    beta: Optional[float] = 2.0
    m: List[np.ndarray] = field(default_factory=list)
    v: List[np.ndarray] = field(default_factory=list)
    step: int = 0

    def __post_init__(self):
        self.mats = [np.asarray(M, dtype=np.float64) for M in self.mats]
        self.V = [np.asarray(V, dtype=np.float64).copy() for V in self.V]
        for M, V, p in zip(self.mats, self.V, self.params):
            if M.shape != V.shape or M.shape[0] != p.n_rows:
                raise ShapeMismatch("rounding variables must match their factor")
        if len(self.mats) == 2 and self.mats[0].shape[1] != self.mats[1].shape[0]:
            raise ShapeMismatch("factor inner dimensions differ")
        self._floor = [np.floor(M / p.scales[:, None]) for M, p in zip(self.mats, self.params)]
        if not self.m:
            self.m = [np.zeros_like(V) for V in self.V]
            self.v = [np.zeros_like(V) for V in self.V]

    @classmethod
    def create(cls, mats, params, reg_weight=0.3):
        return cls(list(mats), list(params), [init_rounding_vars(M, p) for M, p in zip(mats, params)],
                   reg_weight=reg_weight)

    @property
    def kind(self):
        return LOWRANK if len(self.mats) == 2 else QUANT

    def _soft(self, i, hvals):
        p = self.params[i]
        raw = self._floor[i] + hvals + p.zero_points[:, None]
        inside = (raw > 0) & (raw < p.qmax)
        vals = p.scales[:, None] * (np.clip(raw, 0, p.qmax) - p.zero_points[:, None])
        return vals, inside

    def soft_factors(self):
        return [self._soft(i, rectified_sigmoid(V))[0] for i, V in enumerate(self.V)]

    def hard_codes(self):
        out = []
        for i, V in enumerate(self.V):
            p = self.params[i]
            up = (rectified_sigmoid(V) >= 0.5).astype(np.float64)
            out.append(np.clip(self._floor[i] + up + p.zero_points[:, None], 0, p.qmax).astype(np.int64))
        return out

    def nearest_codes(self):
        return [quantize_codes(M, p) for M, p in zip(self.mats, self.params)]


def _predict(factors, X):
    out = X
    for F in reversed(factors):
        out = out @ F.T
    return out


def reconstruction_error(factors, X, T):
    """Mean over samples of the squared output error ``||T - X (prod F)^T||^2``."""
    R = T - _predict(factors, X)
    return float(np.sum(R**2)) / X.shape[0]


def lorada_objective_and_gradient(state, X, T):
    """Objective value and gradients w.r.t. every rounding variable.

    ``X`` is the layer input batch (one sample per row) and ``T`` the float
    target output ``X_target @ W.T``. The reconstruction term is averaged
    over samples; the regularizer uses ``state.beta`` unless it is ``None``.
    """
    X = np.asarray(X, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ShapeMismatch("input batch must be a non-empty matrix")
    hs = [rectified_sigmoid(V) for V in state.V]
    soft = [state._soft(i, h) for i, h in enumerate(hs)]
    F = [s[0] for s in soft]
    if X.shape[1] != F[-1].shape[1] or T.shape != (X.shape[0], F[0].shape[0]):
        raise ShapeMismatch("batch shapes do not match the layer")
    n = X.shape[0]
    if len(F) == 2:
        XB = X @ F[1].T
        R = T - XB @ F[0].T
        value = float(np.sum(R**2)) / n
        grads_F = [-2.0 / n * (R.T @ XB), -2.0 / n * ((F[0].T @ R.T) @ X)]
    else:
        R = T - X @ F[0].T
        value = float(np.sum(R**2)) / n
        grads_F = [-2.0 / n * (R.T @ X)]
    grads = []
    for i, V in enumerate(state.V):
        p = state.params[i]
        dh = rectified_sigmoid_grad(V)
        g = grads_F[i] * p.scales[:, None] * soft[i][1] * dh
        if state.beta is not None and state.reg_weight > 0:
            u = 2.0 * hs[i] - 1.0
            value += state.reg_weight * float(np.sum(1.0 - np.abs(u) ** state.beta))
            g = g - state.reg_weight * state.beta * np.abs(u) ** (state.beta - 1) * np.sign(u) * 2.0 * dh
        grads.append(g)
    return value, grads


def _adam_step(state, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    state.step += 1
    t = state.step
    for i, g in enumerate(grads):
        state.m[i] = b1 * state.m[i] + (1 - b1) * g
        state.v[i] = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = state.m[i] / (1 - b1**t)
        v_hat = state.v[i] / (1 - b2**t)
        state.V[i] = state.V[i] - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class RoundingResult:
    codes: List[np.ndarray]
    params: List[QuantParams]
    objective: float
    nearest_objective: float
    committed_objective: float
    fell_back: bool
    state: RoundingState

    def factors(self):
        return _dequant(self.codes, self.params)


def _dequant(codes, params):
    return [p.scales[:, None] * (c - p.zero_points[:, None]).astype(np.float64)
            for c, p in zip(codes, params)]


def optimize_layer(state, config, X, T):
    """Adam over the rounding variables, then commit to hard rounding.

    Falls back to nearest rounding if the committed rounding reconstructs
    the calibration targets worse.
    """
    X = np.asarray(X, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    state.reg_weight = config.reg_weight
    nearest = state.nearest_codes()
    near_obj = reconstruction_error(_dequant(nearest, state.params), X, T)
    if config.iterations == 0:
        return RoundingResult(nearest, state.params, near_obj, near_obj, near_obj, False, state)
    rng = np.random.default_rng(config.seed)
    n = X.shape[0]
    bs = min(config.batch_size, n)
    order = rng.permutation(n)
    pos = 0
    for step in range(config.iterations):
        if pos + bs > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + bs]
        pos += bs
        state.beta = config.beta_at(step)
        _, grads = lorada_objective_and_gradient(state, X[idx], T[idx])
        _adam_step(state, grads, config.learning_rate)
    committed = state.hard_codes()
    comm_obj = reconstruction_error(_dequant(committed, state.params), X, T)
    if comm_obj <= near_obj:
        return RoundingResult(committed, state.params, comm_obj, near_obj, comm_obj, False, state)
    logger.warning("committed rounding worse than nearest (%.6g > %.6g); keeping nearest",
                   comm_obj, near_obj)
    return RoundingResult(nearest, state.params, near_obj, near_obj, comm_obj, True, state)


def run_sequential_rounding(model, plan, calibration, config):
    """Round every layer in order, propagating the compressed activations.

    ``plan`` lists, per layer, ``(kind, float_factors, params)`` where
    ``float_factors`` is ``[W]`` for quant-only layers and ``[A_r, B_r]``
    for low-rank layers. Returns a list of :class:`CompressedLayer`.
    """
    x_c = np.asarray(calibration, dtype=np.float64)
    x_f = x_c
    out = []
    for i, (layer, (kind, mats, params)) in enumerate(zip(model.layers, plan)):
        x_tgt = x_c if config.target == "compressed_input" else x_f
        T = x_tgt @ layer.weight.T
        state = RoundingState.create(mats, params, config.reg_weight)
        layer_cfg = LoRAdaConfig(**{**config.__dict__, "seed": config.seed + i})
        res = optimize_layer(state, layer_cfg, x_c, T)
        logger.info("layer %s: nearest %.6g -> rounded %.6g", layer.name,
                    res.nearest_objective, res.objective)
        comp = CompressedLayer(layer.name, kind, tuple(res.codes), tuple(params))
        out.append(comp)
        x_c = activate(layer.activation, layer.linear(x_c, comp.dense_weight()))
        x_f = activate(layer.activation, layer.linear(x_f))
    return out
