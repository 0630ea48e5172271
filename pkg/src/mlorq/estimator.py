"""scikit-learn style front end for the full compression workflow."""

import logging

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .compressed import CompressedLayer
from .exceptions import InputError, ShapeMismatch
from .inter_search import (
    MemoryBudget,
    MetricTable,
    activation_bit_allocation,
    candidate_network_nmse,
    interpolate_metric_table,
    solve_allocation,
)
from .intra_search import LOWRANK, LayerSpace, enumerate_candidates, pareto_front
from .lorada import LoRAdaConfig, run_sequential_rounding
from .lowrank import truncate
from .netsim import HessianWeights, SequentialModel, estimate_hessian_diag, forward, forward_trace
from .quantizer import (
    DEFAULT_BITSET,
    PERCENTILE_GRID,
    activation_params,
    check_bitset,
    quantize_activation,
    quantize_codes,
)

logger = logging.getLogger(__name__)

HESSIAN_MODES = ("auto", "provided", "gauss_newton", "identity")


def resolve_hessians(model, calibration, mode="auto"):
    """Hessian weights per layer.

    Precedence for ``auto``: tensors shipped with the model, then the
    Gauss-Newton estimate. Supplied tensors hold the Hessian diagonal, so
    the elementwise weights are their square roots.
    """
    if mode not in HESSIAN_MODES:
        raise ValueError(f"hessian mode must be one of {HESSIAN_MODES}")
    if mode == "identity":
        return [HessianWeights.identity(l.weight.shape) for l in model.layers]
    if mode == "provided":
        missing = [l.name for l in model.layers if l.name not in model.hessians]
        if missing:
            raise InputError(f"no Hessian supplied for layers {missing}")
    estimated = None
    out = []
    for i, layer in enumerate(model.layers):
        if mode in ("auto", "provided") and layer.name in model.hessians:
            H = np.asarray(model.hessians[layer.name], dtype=np.float64)
            if H.shape != layer.weight.shape:
                raise ShapeMismatch(f"Hessian of {layer.name} has shape {H.shape}")
            out.append(HessianWeights.from_C(np.sqrt(np.maximum(H, 0.0))))
        else:
            if estimated is None:
                estimated = estimate_hessian_diag(model, calibration)
            out.append(estimated[i])
    return out


class MLoRQ(BaseEstimator):
    """Joint mixed-precision and low-rank compression of a sequential model.

    ``fit`` takes calibration inputs (one sample per row) and chooses, per
    layer, a quantization bit-width or a quantized low-rank factorization
    under the weight-memory budget. ``predict`` runs the compressed model.

    Parameters
    ----------
    model : SequentialModel
        Float model to compress.
    budget_bits, avg_bits : int or float
        Weight-memory budget, either in bits or as an average bit-width over
        all weight elements. Exactly one must be given.
    act_budget_bits : int, optional
        Maximal activation tensor size in bits; enables activation
        quantization.
    lorada : LoRAdaConfig or None
        Adaptive rounding settings; ``None`` keeps nearest rounding.
    """

    def __init__(self, model=None, budget_bits=None, avg_bits=None, act_budget_bits=None,
                 bitset=DEFAULT_BITSET, rank_stride=1, k_inf=16, delta=1024,
                 percentiles=PERCENTILE_GRID, hessian="auto", quant_only=False,
                 lorada=None, random_state=0):
        self.model = model
        self.budget_bits = budget_bits
        self.avg_bits = avg_bits
        self.act_budget_bits = act_budget_bits
        self.bitset = bitset
        self.rank_stride = rank_stride
        self.k_inf = k_inf
        self.delta = delta
        self.percentiles = percentiles
        self.hessian = hessian
        self.quant_only = quant_only
        self.lorada = lorada
        self.random_state = random_state

    def _validate(self, X, reset=False):
        if not isinstance(self.model, SequentialModel):
            raise TypeError("model must be a SequentialModel")
        X = check_array(X, dtype=np.float64, ensure_min_samples=1)
        if X.shape[1] != self.model.n_features_in:
            raise ShapeMismatch(
                f"X has {X.shape[1]} features, model expects {self.model.n_features_in}"
            )
        if reset:
            self.n_features_in_ = X.shape[1]
        return X

    def _budget(self):
        if (self.budget_bits is None) == (self.avg_bits is None):
            raise ValueError("give exactly one of budget_bits and avg_bits")
        if self.budget_bits is not None:
            return MemoryBudget(int(self.budget_bits), self.act_budget_bits)
        shapes = [l.weight.shape for l in self.model.layers]
        return MemoryBudget.from_avg_bits(self.avg_bits, shapes, self.act_budget_bits)

    def fit(self, X, y=None):
        X = self._validate(X, reset=True)
        model = self.model
        bitset = check_bitset(self.bitset)
        budget = self._budget()
        trace = forward_trace(model, X)
        self.hessians_ = resolve_hessians(model, X, self.hessian)
        self.spaces_ = []
        self.candidates_ = []
        self.fronts_ = []
        for i, (layer, hw) in enumerate(zip(model.layers, self.hessians_)):
            space = LayerSpace(layer.weight, hw, bitset, self.percentiles, layer_index=i,
                               compressible=layer.compressible and not self.quant_only)
            cands = enumerate_candidates(space, self.rank_stride)
            front = pareto_front(cands)
            logger.info("layer %s: %d candidates, %d on the front", layer.name, len(cands), len(front))
            self.spaces_.append(space)
            self.candidates_.append(cands)
            self.fronts_.append(front)
        metrics = []
        for i, (space, front) in enumerate(zip(self.spaces_, self.fronts_)):
            def evaluate(c, i=i, space=space):
                w = space.factors(c) if c.is_lowrank else space.weight(c)
                return candidate_network_nmse(model, trace, i, w)
            metrics.append(interpolate_metric_table(front, self.k_inf, evaluate))
        self.metric_table_ = MetricTable(metrics)
        self.solution_ = solve_allocation(self.fronts_, self.metric_table_, budget, self.delta)

        self.activation_bits_ = {}
        self.activation_params_ = {}
        if budget.activation_bits is not None:
            sizes = {l.name: l.n_in for l in model.layers}
            self.activation_bits_ = activation_bit_allocation(sizes, budget.activation_bits, bitset)
            for l, xi in zip(model.layers, trace.inputs):
                self.activation_params_[l.name] = activation_params(
                    xi, self.activation_bits_[l.name], self.percentiles)
        self.solution_.activation_bits = dict(self.activation_bits_)

        self.compressed_layers_ = self._round(X)
        self.compressed_model_ = model.with_weights([c.dense_weight() for c in self.compressed_layers_])
        return self

    def rounding_plan(self):
        plan = []
        for space, cand in zip(self.spaces_, self.solution_.candidates):
            if cand.is_lowrank:
                pa, pb = cand.params
                plan.append((LOWRANK, list(truncate(space.decomposition, cand.rank)),
                             [pa, pb.take_rows(slice(0, cand.rank))]))
            else:
                plan.append((cand.kind, [space.W], list(cand.params)))
        return plan

    def _round(self, X):
        plan = self.rounding_plan()
        cfg = self.lorada
        if cfg is None:
            return [
                CompressedLayer(l.name, kind, tuple(quantize_codes(M, p) for M, p in zip(mats, params)),
                                tuple(params))
                for l, (kind, mats, params) in zip(self.model.layers, plan)
            ]
        if not isinstance(cfg, LoRAdaConfig):
            cfg = LoRAdaConfig(**cfg)
        return run_sequential_rounding(self.model, plan, X, cfg)

    def input_quantizers(self):
        idx = {l.name: i for i, l in enumerate(self.model.layers)}
        return {idx[n]: (lambda x, p=p: quantize_activation(x, p))
                for n, p in self.activation_params_.items()}

    def predict(self, X):
        """Output of the compressed model."""
        check_is_fitted(self, "compressed_model_")
        X = self._validate(X)
        return forward(self.compressed_model_, X, self.input_quantizers())

    def nmse(self, X):
        """Normalized output MSE of the compressed model against the float one."""
        ref = forward(self.model, self._validate(X))
        out = self.predict(X)
        return float(np.sum((ref - out) ** 2) / np.sum(ref**2))

    def score(self, X, y=None):
        return -self.nmse(X)
