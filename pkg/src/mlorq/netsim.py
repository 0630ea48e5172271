"""Forward simulation of sequential chains of linear layers.

Batches are row-major: an input batch has one sample per row, so a layer
computes ``y = x @ W.T + b``.
"""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .exceptions import EmptyCalibration, IndexOutOfRange, ShapeMismatch

ACTIVATIONS = ("none", "relu", "gelu")
ZERO_ROW_EPS = 1e-8
_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x):
    """tanh approximation of GELU."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def gelu_grad(x):
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * du


def activate(name, y):
    if name == "none":
        return y
    if name == "relu":
        return np.maximum(y, 0.0)
    if name == "gelu":
        return gelu(y)
    raise ValueError(f"unknown activation {name!r}")


def activate_grad(name, y):
    if name == "none":
        return np.ones_like(y)
    if name == "relu":
        return (y > 0).astype(np.float64)
    if name == "gelu":
        return gelu_grad(y)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class Layer:
    name: str
    weight: np.ndarray
    bias: Optional[np.ndarray] = None
    activation: str = "none"
    compressible: bool = True

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ShapeMismatch(f"layer {self.name}: weight must be 2-D")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
            if self.bias.shape[0] != self.n_out:
                raise ShapeMismatch(f"layer {self.name}: bias length {self.bias.shape[0]} != {self.n_out}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"layer {self.name}: unknown activation {self.activation!r}")

    @property
    def n_out(self):
        return self.weight.shape[0]

    @property
    def n_in(self):
        return self.weight.shape[1]

    def linear(self, x, weight=None):
        W = self.weight if weight is None else weight
        y = x @ W.T
        if self.bias is not None:
            y = y + self.bias
        return y


@dataclass
class SequentialModel:
    layers: List[Layer]
    name: str = "model"
    hessians: dict = field(default_factory=dict)

    def __post_init__(self):
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.n_in != prev.n_out:
                raise ShapeMismatch(
                    f"layer {cur.name} expects {cur.n_in} inputs, {prev.name} produces {prev.n_out}"
                )

    def __len__(self):
        return len(self.layers)

    @property
    def n_features_in(self):
        return self.layers[0].n_in

    def with_weights(self, weights):
        """Copy of the model with the dense weights replaced (``None`` keeps)."""
        layers = [
            Layer(l.name, l.weight if w is None else w, l.bias, l.activation, l.compressible)
            for l, w in zip(self.layers, weights)
        ]
        return SequentialModel(layers, self.name, dict(self.hessians))


@dataclass
class ForwardTrace:
    inputs: List[np.ndarray]
    preactivations: List[np.ndarray]
    output: np.ndarray


def _check_inputs(model, inputs):
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.n_features_in:
        raise ShapeMismatch(f"inputs of shape {x.shape} do not match {model.n_features_in} features")
    return x


def forward_trace(model, inputs, input_quantizers=None):
    """Run the chain, caching each layer's input and pre-activation.

    ``input_quantizers`` optionally maps layer index to a callable applied
    to that layer's input batch (activation fake-quantization).
    """
    x = _check_inputs(model, inputs)
    xs, ys = [], []
    for i, layer in enumerate(model.layers):
        if input_quantizers and i in input_quantizers:
            x = input_quantizers[i](x)
        xs.append(x)
        y = layer.linear(x)
        ys.append(y)
        x = activate(layer.activation, y)
    return ForwardTrace(xs, ys, x)


def forward(model, inputs, input_quantizers=None):
    return forward_trace(model, inputs, input_quantizers).output


def output_with_layer_replaced(model, float_trace, index, weight):
    """Network output with layer ``index`` using ``weight``.

    Preceding layers stay in floating point: the computation restarts at the
    cached float input of that layer. ``weight`` may be a dense matrix or an
    ``(A, B)`` factor pair.
    """
    if not 0 <= index < len(model.layers):
        raise IndexOutOfRange(f"layer index {index} out of range")
    layer = model.layers[index]
    if isinstance(weight, tuple):
        A, B = weight
        weight = np.asarray(A, dtype=np.float64) @ np.asarray(B, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    if weight.shape != layer.weight.shape:
        raise ShapeMismatch(f"replacement weight {weight.shape} != {layer.weight.shape}")
    x = activate(layer.activation, layer.linear(float_trace.inputs[index], weight))
    for nxt in model.layers[index + 1:]:
        x = activate(nxt.activation, nxt.linear(x))
    return x


@dataclass(frozen=True)
class HessianWeights:
    """Elementwise weights ``C`` and their row sums ``Q``."""

    C: np.ndarray
    Q: np.ndarray

    @classmethod
    def from_C(cls, C, eps=ZERO_ROW_EPS):
        C = np.array(C, dtype=np.float64)
        if C.ndim != 2 or np.any(C < 0) or not np.all(np.isfinite(C)):
            raise ValueError("Hessian weights must be a finite non-negative matrix")
        zero = C.sum(axis=1) <= 0
        C[zero, :] = eps
        return cls(C=C, Q=C.sum(axis=1))

    @classmethod
    def identity(cls, shape):
        return cls.from_C(np.ones(shape))


def output_jacobian_energy(model, trace):
    """Per-sample ``a[n, i] = sum_k J[n, k, i]^2`` for every layer.

    ``J`` is the Jacobian of the network output with respect to the layer's
    pre-activation output.
    """
    n = trace.output.shape[0]
    last = model.layers[-1]
    d_out = last.n_out
    G = np.broadcast_to(np.eye(d_out), (n, d_out, d_out)) * activate_grad(
        last.activation, trace.preactivations[-1]
    )[:, None, :]
    energies = [None] * len(model.layers)
    energies[-1] = np.einsum("nki,nki->ni", G, G)
    for i in range(len(model.layers) - 2, -1, -1):
        G = (G @ model.layers[i + 1].weight) * activate_grad(
            model.layers[i].activation, trace.preactivations[i]
        )[:, None, :]
        energies[i] = np.einsum("nki,nki->ni", G, G)
    return energies


def estimate_hessian_diag(model, calibration):
    """Gauss-Newton diagonal Hessian weights for every layer.

    ``C[i, j] = sqrt(sum_n a_i^(n) * (x_j^(n))^2)`` with ``a`` from
    :func:`output_jacobian_energy`.
    """
    x = np.asarray(calibration, dtype=np.float64)
    if x.size == 0 or x.ndim < 1 or (x.ndim == 2 and x.shape[0] == 0):
        raise EmptyCalibration("calibration set is empty")
    trace = forward_trace(model, x)
    energies = output_jacobian_energy(model, trace)
    return [
        HessianWeights.from_C(np.sqrt(np.maximum(a.T @ (xi**2), 0.0)))
        for a, xi in zip(energies, trace.inputs)
    ]
