"""Task and generator MLPs over flat parameter vectors.

The task net is feature extractor (relu stack, relu on the feature layer
too) plus a linear classifier head.  The generator is a relu stack with a
tanh output of the same width as its input, so its raw output lives in
(-1, 1) per coordinate.  Parameters are packed layer by layer as
(W row-major, b) into one flat vector; pack order is the contract every
gradient and aggregation routine relies on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .params import DimensionMismatch, ParamVector


@dataclass(frozen=True)
class TaskArch:
    input_dim: int
    hidden_dims: tuple[int, ...]
    feature_dim: int
    num_classes: int

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims, self.feature_dim, self.num_classes)
        if any(d <= 0 for d in dims):
            raise ValueError(f"all layer dims must be positive: {dims}")
        if self.feature_dim < 2:
            raise ValueError("feature_dim must be >= 2 for direction-based losses")

    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per layer, classifier head last."""
        widths = [self.input_dim, *self.hidden_dims, self.feature_dim]
        pairs = list(zip(widths[:-1], widths[1:]))
        pairs.append((self.feature_dim, self.num_classes))
        return pairs

    def param_count(self) -> int:
        return sum((din + 1) * dout for din, dout in self.layer_dims())


@dataclass(frozen=True)
class GenArch:
    input_dim: int
    hidden_dims: tuple[int, ...]

    def __post_init__(self):
        dims = (self.input_dim, *self.hidden_dims)
        if any(d <= 0 for d in dims):
            raise ValueError(f"all layer dims must be positive: {dims}")

    def layer_dims(self) -> list[tuple[int, int]]:
        widths = [self.input_dim, *self.hidden_dims, self.input_dim]
        return list(zip(widths[:-1], widths[1:]))

    def param_count(self) -> int:
        return sum((din + 1) * dout for din, dout in self.layer_dims())


def _split_layers(values: np.ndarray, layer_dims) -> list[tuple[np.ndarray, np.ndarray]]:
    need = sum((din + 1) * dout for din, dout in layer_dims)
    if values.size != need:
        raise DimensionMismatch(f"params have {values.size} entries, arch needs {need}")
    layers = []
    pos = 0
    for din, dout in layer_dims:
        w = values[pos : pos + din * dout].reshape(din, dout)
        pos += din * dout
        b = values[pos : pos + dout]
        pos += dout
        layers.append((w, b))
    if pos != values.size:
        raise DimensionMismatch(f"params have {values.size} entries, arch needs {pos}")
    return layers


def init_params(arch, rng: np.random.Generator) -> ParamVector:
    """Glorot-uniform weights, zero biases, drawn in pack order."""
    chunks = []
    for din, dout in arch.layer_dims():
        s = np.sqrt(6.0 / (din + dout))
        chunks.append(rng.uniform(-s, s, size=din * dout))
        chunks.append(np.zeros(dout))
    return ParamVector(np.concatenate(chunks))


def task_apply(params: ParamVector, arch: TaskArch, x_batch: np.ndarray):
    """Batched forward pass: returns (features (B, F), logits (B, C))."""
    x_batch = np.asarray(x_batch, dtype=np.float64)
    if x_batch.ndim != 2 or x_batch.shape[1] != arch.input_dim:
        raise DimensionMismatch(
            f"expected inputs of shape (B, {arch.input_dim}), got {x_batch.shape}"
        )
    layers = _split_layers(params.values, arch.layer_dims())
    a = x_batch
    for w, b in layers[:-1]:
        a = np.maximum(a @ w + b, 0.0)
    wc, bc = layers[-1]
    return a, a @ wc + bc


def task_forward(params: ParamVector, arch: TaskArch, x: np.ndarray):
    """Single-sample forward: returns (feature vector, logit vector)."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != arch.input_dim:
        raise DimensionMismatch(f"input has dim {x.size}, arch wants {arch.input_dim}")
    feats, logits = task_apply(params, arch, x[None, :])
    return feats[0], logits[0]


def gen_apply(params: ParamVector, arch: GenArch, x_batch: np.ndarray) -> np.ndarray:
    """Batched generator output in (-1, 1)^input_dim."""
    x_batch = np.asarray(x_batch, dtype=np.float64)
    if x_batch.ndim != 2 or x_batch.shape[1] != arch.input_dim:
        raise DimensionMismatch(
            f"expected inputs of shape (B, {arch.input_dim}), got {x_batch.shape}"
        )
    layers = _split_layers(params.values, arch.layer_dims())
    a = x_batch
    for w, b in layers[:-1]:
        a = np.maximum(a @ w + b, 0.0)
    wo, bo = layers[-1]
    return np.tanh(a @ wo + bo)


def gen_forward(params: ParamVector, arch: GenArch, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if x.size != arch.input_dim:
        raise DimensionMismatch(f"input has dim {x.size}, arch wants {arch.input_dim}")
    return gen_apply(params, arch, x[None, :])[0]


def layer_tensors(params: ParamVector, arch, trainable: bool) -> list[tuple[ad.Tensor, ad.Tensor]]:
    """Per-layer (W, b) autodiff leaves sliced out of a flat vector."""
    return [
        (ad.Tensor(w, requires_grad=trainable), ad.Tensor(b, requires_grad=trainable))
        for w, b in _split_layers(params.values, arch.layer_dims())
    ]


def task_graph(layers: list[tuple[ad.Tensor, ad.Tensor]], x: ad.Tensor):
    """Graph version of task_apply on prebuilt layer tensors."""
    a = x
    for w, b in layers[:-1]:
        a = ad.relu(ad.add_bias(ad.matmul(a, w), b))
    wc, bc = layers[-1]
    return a, ad.add_bias(ad.matmul(a, wc), bc)


def gen_graph(layers: list[tuple[ad.Tensor, ad.Tensor]], x: ad.Tensor) -> ad.Tensor:
    a = x
    for w, b in layers[:-1]:
        a = ad.relu(ad.add_bias(ad.matmul(a, w), b))
    wo, bo = layers[-1]
    return ad.tanh(ad.add_bias(ad.matmul(a, wo), bo))


def flat_grad(layers: list[tuple[ad.Tensor, ad.Tensor]]) -> ParamVector:
    """Collect layer gradients back into pack order; missing grads are zero."""
    chunks = []
    for w, b in layers:
        gw = w.grad if w.grad is not None else np.zeros_like(w.value)
        gb = b.grad if b.grad is not None else np.zeros_like(b.value)
        chunks.append(np.asarray(gw).reshape(-1))
        chunks.append(np.asarray(gb).reshape(-1))
    return ParamVector(np.concatenate(chunks))
