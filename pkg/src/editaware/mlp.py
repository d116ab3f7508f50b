"""Small fully connected networks with exact reverse-mode gradients.

These back the frozen colour-LUT and tone-curve approximators. Points are
processed as ``(n, in_features)`` arrays in double precision.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MLPW"
VERSION = 1

ACTIVATIONS = {"linear": 0, "tanh": 1}
_TAG_TO_ACT = {v: k for k, v in ACTIVATIONS.items()}


class WeightFormatError(ValueError):
    """Raised when an MLPW file is malformed or has an unknown version."""


@dataclass
class Layer:
    weight: np.ndarray  # (in, out)
    bias: np.ndarray  # (out,)
    activation: str = "tanh"

    @property
    def width(self) -> int:
        return self.weight.shape[1]


@dataclass
class MLPTape:
    """Activations recorded by :meth:`MlpWeights.forward` for the backward pass."""

    inputs: list[np.ndarray] = field(default_factory=list)
    outputs: list[np.ndarray] = field(default_factory=list)


@dataclass
class MlpWeights:
    """Layer list of a pointwise MLP.

    ``layers[i].weight`` has shape ``(in_i, out_i)`` and the forward map is
    ``h <- act(h @ W + b)``.
    """

    layers: list[Layer]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("an MLP needs at least one layer")
        prev = self.layers[0].weight.shape[0]
        for layer in self.layers:
            if layer.weight.ndim != 2 or layer.weight.shape[0] != prev:
                raise ValueError("layer shapes do not chain")
            if layer.bias.shape != (layer.width,):
                raise ValueError("bias shape does not match layer width")
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {layer.activation!r}")
            prev = layer.width

    @property
    def n_in(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def n_out(self) -> int:
        return self.layers[-1].width

    @classmethod
    def init(cls, n_in, hidden, n_out, rng, activation="tanh"):
        """Glorot-uniform initialisation with zero biases and a linear head."""
        sizes = [n_in, *hidden, n_out]
        layers = []
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            limit = np.sqrt(6.0 / (a + b))
            w = rng.uniform(-limit, limit, size=(a, b))
            act = "linear" if i == len(sizes) - 2 else activation
            layers.append(Layer(w, np.zeros(b), act))
        return cls(layers)

    @classmethod
    def identity(cls, n):
        """Exact identity map as a single linear layer."""
        return cls([Layer(np.eye(n), np.zeros(n), "linear")])

    def copy(self) -> "MlpWeights":
        return MlpWeights(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    # -- parameter vector view (used by the fitting optimiser) -------------
    def get_flat(self) -> np.ndarray:
        return np.concatenate(
            [np.concatenate([l.weight.ravel(), l.bias]) for l in self.layers]
        )

    def set_flat(self, theta: np.ndarray) -> None:
        pos = 0
        for l in self.layers:
            n = l.weight.size
            l.weight = theta[pos : pos + n].reshape(l.weight.shape).copy()
            pos += n
            l.bias = theta[pos : pos + l.width].copy()
            pos += l.width

    # -- evaluation ---------------------------------------------------------
    def forward(self, x: np.ndarray, tape: MLPTape | None = None) -> np.ndarray:
        h = x
        for layer in self.layers:
            if tape is not None:
                tape.inputs.append(h)
            h = h @ layer.weight + layer.bias
            if layer.activation == "tanh":
                h = np.tanh(h)
            if tape is not None:
                tape.outputs.append(h)
        return h

    __call__ = forward

    def backward_input(self, tape: MLPTape, grad_out: np.ndarray) -> np.ndarray:
        """Gradient with respect to the network input."""
        g = grad_out
        for layer, out in zip(reversed(self.layers), reversed(tape.outputs)):
            if layer.activation == "tanh":
                g = g * (1.0 - out * out)
            g = g @ layer.weight.T
        return g

    def backward_params(self, tape: MLPTape, grad_out: np.ndarray) -> np.ndarray:
        """Flat gradient with respect to all weights and biases."""
        g = grad_out
        grads = []
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if layer.activation == "tanh":
                g = g * (1.0 - tape.outputs[i] ** 2)
            grads.append((tape.inputs[i].T @ g, g.sum(axis=0)))
            if i:
                g = g @ layer.weight.T
        return np.concatenate(
            [np.concatenate([gw.ravel(), gb]) for gw, gb in reversed(grads)]
        )

    # -- serialisation -----------------------------------------------------
    def to_bytes(self) -> bytes:
        out = [MAGIC, struct.pack("<HBBB", VERSION, self.n_in, self.n_out, len(self.layers))]
        for l in self.layers:
            out.append(struct.pack("<I", l.width))
            out.append(np.ascontiguousarray(l.weight, dtype="<f8").tobytes())
            out.append(np.ascontiguousarray(l.bias, dtype="<f8").tobytes())
            out.append(struct.pack("<B", ACTIVATIONS[l.activation]))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "MlpWeights":
        if data[:4] != MAGIC:
            raise WeightFormatError("bad magic, not an MLPW file")
        try:
            version, n_in, n_out, n_layers = struct.unpack_from("<HBBB", data, 4)
        except struct.error as exc:
            raise WeightFormatError("truncated header") from exc
        if version != VERSION:
            raise WeightFormatError(f"unsupported MLPW version {version}")
        pos = 9
        prev = n_in
        layers = []
        try:
            for _ in range(n_layers):
                (width,) = struct.unpack_from("<I", data, pos)
                pos += 4
                w = np.frombuffer(data, "<f8", prev * width, pos).reshape(prev, width)
                pos += 8 * prev * width
                b = np.frombuffer(data, "<f8", width, pos)
                pos += 8 * width
                (tag,) = struct.unpack_from("<B", data, pos)
                pos += 1
                if tag not in _TAG_TO_ACT:
                    raise WeightFormatError(f"unknown activation tag {tag}")
                layers.append(Layer(w.astype(np.float64), b.astype(np.float64), _TAG_TO_ACT[tag]))
                prev = width
        except (struct.error, ValueError) as exc:
            if isinstance(exc, WeightFormatError):
                raise
            raise WeightFormatError("truncated layer data") from exc
        if pos != len(data):
            raise WeightFormatError("trailing bytes after last layer")
        mlp = cls(layers)
        if mlp.n_out != n_out:
            raise WeightFormatError("declared output arity does not match layers")
        return mlp

    def checksum(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def save_weights(mlp: MlpWeights, path) -> None:
    Path(path).write_bytes(mlp.to_bytes())


def load_weights(path) -> MlpWeights:
    return MlpWeights.from_bytes(Path(path).read_bytes())
