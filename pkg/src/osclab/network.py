# SPDX-License-Identifier: GPL-3.0-or-later
"""
Multi-layer perceptron with hand-written reverse-mode gradients.

Latent weights are kept at full precision. In fake-quant mode the forward
pass multiplies by q(w) and the backward pass hands the gradient with
respect to q(w) unchanged to w (straight-through estimator).
"""

import copy
import math
import struct
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path

import numpy as np

from osclab.quantizer import QuantSpec, quantize
from osclab.tensor import (
    STREAM_INIT,
    ContractError,
    IndexMatrix,
    Matrix,
    Rng,
    ShapeError,
    matmul,
    rand_normal,
)

CHECKPOINT_MAGIC = b"OSCL"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sII")
_LAYER = struct.Struct("<IIBB")


class Activation(StrEnum):
    RELU = "relu"
    IDENTITY = "identity"


_ACTIVATION_TAGS = {Activation.RELU: 0, Activation.IDENTITY: 1}


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: Activation = Activation.RELU
    quantized: bool = True


@dataclass
class Model:
    layers: list[LayerSpec]
    weights: list[Matrix]
    biases: list[Matrix]
    # Bumped on every parameter update; forward caches remember it.
    version: int = 0

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("Model needs at least one layer")
        if not len(self.layers) == len(self.weights) == len(self.biases):
            raise ShapeError("Each layer needs exactly one weight and bias matrix")
        for i, (layer, w, b) in enumerate(zip(self.layers, self.weights, self.biases)):
            if w.shape != (layer.in_dim, layer.out_dim):
                raise ShapeError(
                    f"Layer {i}: weights {w.shape} do not match"
                    f" ({layer.in_dim}, {layer.out_dim})"
                )
            if b.shape != (1, layer.out_dim):
                raise ShapeError(f"Layer {i}: biases {b.shape} do not match")
        for i, (prev, layer) in enumerate(zip(self.layers, self.layers[1:]), start=1):
            if prev.out_dim != layer.in_dim:
                raise ShapeError(
                    f"Layer {i} expects {layer.in_dim} inputs,"
                    f" previous layer produces {prev.out_dim}"
                )

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def quantized_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.quantized]

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def touch(self) -> None:
        self.version += 1


def init_model(layers: list[LayerSpec], rng: Rng) -> Model:
    """He-normal weights (std = sqrt(2 / in_dim)), zero biases."""
    weights = [
        rand_normal(
            rng.split(STREAM_INIT, i),
            layer.in_dim,
            layer.out_dim,
            0.0,
            math.sqrt(2.0 / layer.in_dim),
        )
        for i, layer in enumerate(layers)
    ]
    biases = [np.zeros((1, layer.out_dim)) for layer in layers]
    return Model(layers=layers, weights=weights, biases=biases)


def mlp_layers(
    in_dim: int,
    hidden: list[int],
    out_dim: int,
    *,
    activation: Activation = Activation.RELU,
    unquantized_layers: list[int] | None = None,
) -> list[LayerSpec]:
    dims = [in_dim, *hidden, out_dim]
    skip = set(unquantized_layers or [])
    last = len(dims) - 2
    return [
        LayerSpec(
            in_dim=a,
            out_dim=b,
            activation=Activation.IDENTITY if i == last else activation,
            quantized=i not in skip,
        )
        for i, (a, b) in enumerate(zip(dims, dims[1:]))
    ]


@dataclass(frozen=True)
class FullPrecision:
    pass


@dataclass(frozen=True)
class FakeQuant:
    """
    Quantized forward pass. With ``scales`` (one per layer, None entries for
    layers that compute their own) the scale is frozen instead of recomputed
    from the current weights.
    """

    spec: QuantSpec
    scales: tuple[float | None, ...] | None = None


type ForwardMode = FullPrecision | FakeQuant

FULL_PRECISION = FullPrecision()


def layer_scale(mode: FakeQuant, layer: int) -> float | None:
    if mode.scales is None:
        return None
    return mode.scales[layer]


def effective_weights(model: Model, mode: ForwardMode) -> list[Matrix]:
    """Weights used by the forward product: q(w) for quantized layers."""
    if isinstance(mode, FullPrecision):
        return list(model.weights)
    return [
        quantize(w, mode.spec, layer_scale(mode, i)).values if layer.quantized else w
        for i, (layer, w) in enumerate(zip(model.layers, model.weights))
    ]


def bin_indices(model: Model, spec: QuantSpec, scales=None) -> list[IndexMatrix]:
    return [
        quantize(w, spec, None if scales is None else scales[i]).bin_indices
        for i, w in enumerate(model.weights)
    ]


@dataclass
class ForwardCache:
    mode: ForwardMode
    version: int
    inputs: list[Matrix] = field(default_factory=list)
    pre_activations: list[Matrix] = field(default_factory=list)
    weights: list[Matrix] = field(default_factory=list)


@dataclass
class Gradients:
    weights: list[Matrix]
    biases: list[Matrix]

    def add_weight_terms(self, terms: list[Matrix | None]) -> None:
        for i, term in enumerate(terms):
            if term is not None:
                self.weights[i] = self.weights[i] + term


def forward(
    model: Model, x: Matrix, mode: ForwardMode = FULL_PRECISION
) -> tuple[Matrix, ForwardCache]:
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise ShapeError(f"Model expects {model.in_dim} input columns, got {x.shape}")

    weights = effective_weights(model, mode)
    cache = ForwardCache(mode=mode, version=model.version, weights=weights)
    out = x
    for layer, w, b in zip(model.layers, weights, model.biases):
        cache.inputs.append(out)
        z = matmul(out, w) + b
        cache.pre_activations.append(z)
        out = np.maximum(z, 0.0) if layer.activation == Activation.RELU else z
    return out, cache


def backward(
    model: Model,
    cache: ForwardCache,
    grad_logits: Matrix,
    mode: ForwardMode = FULL_PRECISION,
) -> Gradients:
    if cache.version != model.version:
        raise ContractError(
            f"Stale forward cache: model changed from version {cache.version}"
            f" to {model.version}"
        )
    if cache.mode != mode:
        raise ContractError(f"Forward ran in {cache.mode}, backward asked for {mode}")
    if grad_logits.shape != cache.pre_activations[-1].shape:
        raise ShapeError(
            f"Gradient shape {grad_logits.shape} does not match"
            f" logits {cache.pre_activations[-1].shape}"
        )

    n = len(model.layers)
    grad_w: list[Matrix] = [np.empty(0)] * n
    grad_b: list[Matrix] = [np.empty(0)] * n
    delta = grad_logits
    for i in reversed(range(n)):
        if model.layers[i].activation == Activation.RELU:
            delta = delta * (cache.pre_activations[i] > 0.0)
        grad_w[i] = matmul(cache.inputs[i].T, delta)
        grad_b[i] = delta.sum(axis=0, keepdims=True)
        if i > 0:
            # STE: propagate through q(w) as if it were w.
            delta = matmul(delta, cache.weights[i].T)
    return Gradients(weights=grad_w, biases=grad_b)


def loss_mse(pred: Matrix, target: Matrix) -> tuple[float, Matrix]:
    """0.5 * squared error, summed over outputs and averaged over rows."""
    if pred.shape != target.shape:
        raise ShapeError(f"Prediction {pred.shape} and target {target.shape} differ")
    rows = pred.shape[0]
    diff = pred - target
    return 0.5 * float(np.sum(diff * diff)) / rows, diff / rows


def loss_softmax_ce(logits: Matrix, labels: np.ndarray) -> tuple[float, Matrix]:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"Logits {logits.shape} and labels {labels.shape} differ")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError(f"Labels must lie in [0, {logits.shape[1]})")
    rows = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    picked = log_probs[np.arange(rows), labels]
    grad = np.exp(log_probs)
    grad[np.arange(rows), labels] -= 1.0
    return -float(picked.mean()), grad / rows


def accuracy(logits: Matrix, labels: np.ndarray) -> float:
    if labels.size == 0:
        return 0.0
    return float(np.mean(np.argmax(logits, axis=1) == labels))


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    moments: list[tuple[Matrix, Matrix]] = field(default_factory=list)

    @classmethod
    def for_model(cls, model: Model, lr: float, **kwargs) -> "AdamState":
        params = [*model.weights, *model.biases]
        moments = [(np.zeros_like(p), np.zeros_like(p)) for p in params]
        return cls(lr=lr, moments=moments, **kwargs)


def adam_step(
    model: Model, gradients: Gradients, state: AdamState
) -> tuple[Model, AdamState]:
    """Bias-corrected Adam update of all parameters, in place."""
    params = [*model.weights, *model.biases]
    grads = [*gradients.weights, *gradients.biases]
    if len(grads) != len(state.moments):
        raise ShapeError("Gradients do not match the optimizer state")

    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for param, grad, (m, v) in zip(params, grads, state.moments):
        if grad.shape != param.shape:
            raise ShapeError(f"Gradient {grad.shape} does not match {param.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        param -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)

    model.touch()
    return model, state


def save_checkpoint(model: Model, path: Path | str) -> None:
    with open(path, "wb") as f:
        f.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(model.layers)))
        for layer, w, b in zip(model.layers, model.weights, model.biases):
            f.write(
                _LAYER.pack(
                    layer.in_dim,
                    layer.out_dim,
                    _ACTIVATION_TAGS[layer.activation],
                    int(layer.quantized),
                )
            )
            f.write(w.astype("<f8").tobytes(order="C"))
            f.write(b.astype("<f8").tobytes(order="C"))


def _read(data: bytes, offset: int, size: int, what: str) -> bytes:
    if offset + size > len(data):
        raise CheckpointFormatError(
            f"Truncated checkpoint at byte offset {offset}:"
            f" expected {size} bytes of {what}"
        )
    return data[offset : offset + size]


def load_checkpoint(path: Path | str) -> Model:
    with open(path, "rb") as f:
        data = f.read()

    magic, version, count = _HEADER.unpack(_read(data, 0, _HEADER.size, "header"))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"Bad magic {magic!r} at byte offset 0")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(
            f"Unsupported checkpoint version {version} at byte offset 4"
        )

    tags = {tag: activation for activation, tag in _ACTIVATION_TAGS.items()}
    offset = _HEADER.size
    layers, weights, biases = [], [], []
    for i in range(count):
        in_dim, out_dim, tag, quantized = _LAYER.unpack(
            _read(data, offset, _LAYER.size, f"layer {i} header")
        )
        if tag not in tags:
            raise CheckpointFormatError(
                f"Unknown activation tag {tag} at byte offset {offset + 8}"
            )
        offset += _LAYER.size
        layers.append(LayerSpec(in_dim, out_dim, tags[tag], bool(quantized)))
        for shape, target in (((in_dim, out_dim), weights), ((1, out_dim), biases)):
            size = 8 * shape[0] * shape[1]
            raw = _read(data, offset, size, f"layer {i} parameters")
            values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
            target.append(values.reshape(shape))
            offset += size

    if offset != len(data):
        raise CheckpointFormatError(f"Trailing bytes after byte offset {offset}")
    return Model(layers=layers, weights=weights, biases=biases)
