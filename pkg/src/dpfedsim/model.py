"""Fully connected ReLU network with a softmax cross-entropy head, stored flat.

Parameters live in a single 1-D float64 vector so the rest of the package can
treat a model as a point in R^D.  Layout, per layer l (sizes n_l -> n_{l+1}):
the weight matrix W_l of shape (n_l, n_{l+1}) in row-major order, followed by
the bias b_l of length n_{l+1}.  A forward pass computes
h_{l+1} = relu(h_l @ W_l + b_l) for hidden layers and softmax on the last.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import ParamVector

_PROB_FLOOR = 1e-15  # clamp applied to predicted probabilities before log


@dataclass(frozen=True)
class MlpSpec:
    """Architecture description: layer sizes from input to output."""

    layer_sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("layer_sizes needs at least an input and an output layer")
        if any(s < 1 for s in sizes):
            raise ValueError("layer sizes must all be positive")
        if sizes[-1] < 2:
            raise ValueError("output layer needs at least 2 classes")

    @property
    def num_params(self) -> int:
        return sum(
            n_in * n_out + n_out
            for n_in, n_out in zip(self.layer_sizes, self.layer_sizes[1:])
        )

    @property
    def num_classes(self) -> int:
        return self.layer_sizes[-1]


def _check_params(spec: MlpSpec, w: ParamVector) -> None:
    if w.ndim != 1 or w.shape[0] != spec.num_params:
        raise ValueError(
            f"parameter vector has {w.shape} entries, spec wants ({spec.num_params},)"
        )


def unpack(spec: MlpSpec, w: ParamVector) -> list[tuple[np.ndarray, np.ndarray]]:
    """Views (no copies) of (W_l, b_l) per layer over the flat vector."""
    _check_params(spec, w)
    layers = []
    offset = 0
    for n_in, n_out in zip(spec.layer_sizes, spec.layer_sizes[1:]):
        weight = w[offset : offset + n_in * n_out].reshape(n_in, n_out)
        offset += n_in * n_out
        bias = w[offset : offset + n_out]
        offset += n_out
        layers.append((weight, bias))
    return layers


def init_params(spec: MlpSpec, seed: int) -> ParamVector:
    """Glorot-uniform weights (limit sqrt(6/(fan_in+fan_out))), zero biases."""
    rng = np.random.default_rng(seed)
    w = np.zeros(spec.num_params, dtype=np.float64)
    for weight, bias in unpack(spec, w):
        n_in, n_out = weight.shape
        limit = np.sqrt(6.0 / (n_in + n_out))
        weight[...] = rng.uniform(-limit, limit, size=(n_in, n_out))
        bias[...] = 0.0
    return w


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def forward_batch(spec: MlpSpec, w: ParamVector, features: np.ndarray) -> np.ndarray:
    """Class probabilities for a (n, input_dim) batch; rows sum to 1."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != spec.layer_sizes[0]:
        raise ValueError(
            f"feature dimension {x.shape[1]} != input layer {spec.layer_sizes[0]}"
        )
    layers = unpack(spec, w)
    h = x
    for weight, bias in layers[:-1]:
        h = np.maximum(h @ weight + bias, 0.0)
    weight, bias = layers[-1]
    return _softmax_rows(h @ weight + bias)


def forward(spec: MlpSpec, w: ParamVector, features: np.ndarray) -> np.ndarray:
    """Class probabilities for a single example (1-D feature vector)."""
    return forward_batch(spec, w, features)[0]


def predict(spec: MlpSpec, w: ParamVector, features: np.ndarray) -> int:
    """Argmax class; ties resolve to the lowest index (np.argmax semantics)."""
    return int(np.argmax(forward(spec, w, features)))


def loss(spec: MlpSpec, w: ParamVector, features: np.ndarray, labels) -> float:
    """Mean cross-entropy -log p[label] over a nonempty batch."""
    labs = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labs.size == 0:
        raise ValueError("loss over an empty batch is undefined")
    if labs.min() < 0 or labs.max() >= spec.num_classes:
        raise ValueError(f"label out of range [0, {spec.num_classes})")
    probs = forward_batch(spec, w, features)
    if probs.shape[0] != labs.size:
        raise ValueError("features and labels disagree on batch size")
    picked = np.maximum(probs[np.arange(labs.size), labs], _PROB_FLOOR)
    return float(np.add.accumulate(-np.log(picked))[-1] / labs.size)


def loss_and_gradient(
    spec: MlpSpec, w: ParamVector, features: np.ndarray, label: int
) -> tuple[float, ParamVector]:
    """Single-example loss and its gradient w.r.t. the flat parameter vector.

    Backprop with the fused softmax cross-entropy delta (probs - onehot),
    assembled into the same flat layout as the input.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != spec.layer_sizes[0]:
        raise ValueError(
            f"expected a flat feature vector of length {spec.layer_sizes[0]}"
        )
    label = int(label)
    if not 0 <= label < spec.num_classes:
        raise ValueError(f"label out of range [0, {spec.num_classes})")
    layers = unpack(spec, w)

    # forward, keeping activations per layer
    activations = [x]
    h = x
    for weight, bias in layers[:-1]:
        h = np.maximum(h @ weight + bias, 0.0)
        activations.append(h)
    weight, bias = layers[-1]
    probs = _softmax_rows(h @ weight + bias)
    loss_value = -float(np.log(max(probs[label], _PROB_FLOOR)))

    grad = np.zeros(spec.num_params, dtype=np.float64)
    grad_layers = unpack(spec, grad)

    delta = probs.copy()
    delta[label] -= 1.0  # d loss / d logits for softmax + cross-entropy
    for l in range(len(layers) - 1, -1, -1):
        g_weight, g_bias = grad_layers[l]
        np.outer(activations[l], delta, out=g_weight)
        g_bias[...] = delta
        if l > 0:
            # relu derivative: the stored activation is already max(z, 0)
            delta = (layers[l][0] @ delta) * (activations[l] > 0.0)
    return loss_value, grad


def per_sample_gradient(
    spec: MlpSpec, w: ParamVector, features: np.ndarray, label: int
) -> ParamVector:
    return loss_and_gradient(spec, w, features, label)[1]
