"""Feed-forward classifiers: dense layers, forward passes, loss and weight files."""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from ._kernels import kernels
from .autodiff import DimensionError, Tensor

RELU = "relu"
IDENTITY = "identity"
_ACTIVATIONS = (IDENTITY, RELU)

# hidden widths are not given for the base learners; 256 is our default
DEFAULT_HIDDEN = 256
ARCHITECTURES = {"fnn2": 2, "fnn4": 4, "fnn5": 5}


class WeightFileError(ValueError):
    """A weight file is malformed or internally inconsistent."""


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = RELU

    def __post_init__(self):
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)
        self.bias = np.ascontiguousarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2:
            raise DimensionError(f"weights must be 2-D, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[0],):
            raise DimensionError(
                f"bias shape {self.bias.shape} does not match {self.weights.shape[0]} outputs"
            )
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


@dataclass
class Network:
    """Stack of dense layers mapping R^input_dim to output_dim logits."""

    layers: list[DenseLayer]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.layers:
            raise DimensionError("a network needs at least one layer")
        for i, (a, b) in enumerate(zip(self.layers[:-1], self.layers[1:])):
            if a.out_dim != b.in_dim:
                raise DimensionError(
                    f"layer {i} outputs {a.out_dim} values but layer {i + 1} expects {b.in_dim}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def weight_matrices(self) -> list[np.ndarray]:
        return [layer.weights for layer in self.layers]

    def parameters(self) -> list[np.ndarray]:
        params = []
        for layer in self.layers:
            params.extend([layer.weights, layer.bias])
        return params

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.input_dim or x.ndim not in (1, 2):
            raise DimensionError(f"expected inputs with {self.input_dim} features, got shape {x.shape}")
        return x

    def forward(self, x) -> np.ndarray:
        """Logits for a single input vector or a batch (rows)."""
        x = self._check_input(x)
        single = x.ndim == 1
        h = np.atleast_2d(x)
        for layer in self.layers:
            h = h @ layer.weights.T
            h += layer.bias
            if layer.activation == RELU:
                h = kernels.relu_forward(h)
        return h[0] if single else h

    __call__ = forward

    def trace(self, x: Tensor, params: Sequence[Tensor] | None = None) -> Tensor:
        """Forward pass recorded on the autodiff graph.

        ``params`` optionally supplies leaf tensors standing in for
        ``parameters()`` (same order) so their gradients can be read back.
        """
        if x.shape[-1] != self.input_dim:
            raise DimensionError(f"expected inputs with {self.input_dim} features, got shape {x.shape}")
        h = x if x.ndim == 2 else ad.reshape(x, (1, x.shape[0]))
        for i, layer in enumerate(self.layers):
            if params is None:
                w, b = Tensor(layer.weights.T), Tensor(layer.bias)
                h = ad.add(ad.matmul(h, w), b)
            else:
                w, b = params[2 * i], params[2 * i + 1]
                h = ad.add(ad.matmul(h, _transpose(w)), b)
            if layer.activation == RELU:
                h = ad.relu(h)
        return h if x.ndim == 2 else ad.reshape(h, (self.output_dim,))

    def parameter_leaves(self) -> list[Tensor]:
        return [Tensor(p, requires_grad=True) for p in self.parameters()]


def _transpose(w: Tensor) -> Tensor:
    def backward(g, upstream):
        ad._send(upstream, w, g.T)

    return Tensor(w.data.T, _parents=(w,), _backward=backward, op="transpose")


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def init_network(
    sizes: Sequence[int], rng: np.random.Generator, final_activation: str = IDENTITY
) -> Network:
    """He-initialised ReLU network with the given layer widths (input first)."""
    if len(sizes) < 2:
        raise ValueError("need at least input and output sizes")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        act = final_activation if i == len(sizes) - 2 else RELU
        layers.append(DenseLayer(w, np.zeros(fan_out), act))
    return Network(layers)


def build_architecture(
    name: str,
    input_dim: int,
    n_classes: int,
    rng: np.random.Generator,
    hidden: int = DEFAULT_HIDDEN,
) -> Network:
    """One of the registered base learners: fnn2, fnn4 or fnn5 dense layers."""
    try:
        depth = ARCHITECTURES[name]
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; choose from {sorted(ARCHITECTURES)}") from None
    sizes = [input_dim] + [hidden] * (depth - 1) + [n_classes]
    net = init_network(sizes, rng)
    net.meta = {"arch": name, "hidden": hidden}
    return net


def cross_entropy(logits, label: int) -> float:
    """-log softmax(logits)[label] for one logit vector, computed stably."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 1:
        raise DimensionError(f"expected a logit vector, got shape {z.shape}")
    if not 0 <= label < z.shape[0]:
        raise ValueError(f"label {label} outside [0, {z.shape[0]})")
    m = z.max()
    return float(np.log(np.exp(z - m).sum()) - (z[label] - m))


# ---------------------------------------------------------------------------
# weight files
# ---------------------------------------------------------------------------
#
# Layout (all little-endian):
#   magic    8 bytes   b"LIPNNET\0"
#   version  u32       1
#   nlayers  u32
#   per layer header: out u32, in u32, activation u8 (0 identity, 1 relu)
#   payload: per layer, weights (out*in f64, row-major) then bias (out f64)
# Trailing bytes are rejected.

MAGIC = b"LIPNNET\x00"
VERSION = 1
_HEADER = struct.Struct("<8sII")
_LAYER = struct.Struct("<IIB")


def serialize(net: Network) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, len(net.layers))]
    for layer in net.layers:
        parts.append(_LAYER.pack(layer.out_dim, layer.in_dim, _ACTIVATIONS.index(layer.activation)))
    for layer in net.layers:
        parts.append(layer.weights.astype("<f8").tobytes())
        parts.append(layer.bias.astype("<f8").tobytes())
    return b"".join(parts)


def deserialize(blob: bytes) -> Network:
    if len(blob) < _HEADER.size:
        raise WeightFileError("truncated header")
    magic, version, nlayers = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise WeightFileError(f"bad magic {magic!r}")
    if version != VERSION:
        raise WeightFileError(f"unsupported version {version}")
    if nlayers == 0:
        raise WeightFileError("file declares zero layers")
    offset = _HEADER.size
    if len(blob) < offset + nlayers * _LAYER.size:
        raise WeightFileError("truncated layer table")
    dims = []
    for _ in range(nlayers):
        out_dim, in_dim, act = _LAYER.unpack_from(blob, offset)
        offset += _LAYER.size
        if act >= len(_ACTIVATIONS):
            raise WeightFileError(f"unknown activation code {act}")
        if out_dim == 0 or in_dim == 0:
            raise WeightFileError("zero-sized layer")
        dims.append((out_dim, in_dim, _ACTIVATIONS[act]))
    for i in range(1, nlayers):
        if dims[i][1] != dims[i - 1][0]:
            raise WeightFileError(
                f"layer {i} declares {dims[i][1]} inputs but layer {i - 1} has {dims[i - 1][0]} outputs"
            )
    expected = offset + 8 * sum(o * n + o for o, n, _ in dims)
    if len(blob) < expected:
        raise WeightFileError(f"truncated payload: {len(blob)} bytes, need {expected}")
    if len(blob) > expected:
        raise WeightFileError(f"{len(blob) - expected} unexpected trailing bytes")
    layers = []
    for out_dim, in_dim, act in dims:
        w = np.frombuffer(blob, dtype="<f8", count=out_dim * in_dim, offset=offset).reshape(out_dim, in_dim)
        offset += 8 * out_dim * in_dim
        b = np.frombuffer(blob, dtype="<f8", count=out_dim, offset=offset)
        offset += 8 * out_dim
        layers.append(DenseLayer(w.astype(np.float64), b.astype(np.float64), act))
    return Network(layers)


def save_network(net: Network, path) -> None:
    Path(path).write_bytes(serialize(net))


def load_network(path) -> Network:
    return deserialize(Path(path).read_bytes())
