"""Three-layer perceptron scorer with hand-written reverse mode.

Topology is fixed: ``d -> h1 -> h2 -> 1`` with ``tanh`` hidden units and a
linear output, so the score is an unbounded ranking value. Weights are
stored ``(fan_in, fan_out)`` and applied as ``x @ W + b``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import NumericError, ShapeError

LayerSizes = tuple[int, int, int, int]


@dataclass
class MlpParams:
    weights: tuple[np.ndarray, np.ndarray, np.ndarray]
    biases: tuple[np.ndarray, np.ndarray, np.ndarray]

    @property
    def sizes(self) -> LayerSizes:
        w1, w2, w3 = self.weights
        return (w1.shape[0], w1.shape[1], w2.shape[1], w3.shape[1])

    def arrays(self) -> list[np.ndarray]:
        w1, w2, w3 = self.weights
        b1, b2, b3 = self.biases
        return [w1, b1, w2, b2, w3, b3]

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def from_flat(cls, vec: np.ndarray, sizes: LayerSizes) -> "MlpParams":
        vec = np.asarray(vec, dtype=np.float64)
        shapes = _shapes(sizes)
        expected = sum(int(np.prod(s)) for s in shapes)
        if vec.size != expected:
            raise ShapeError(f"flat vector has {vec.size} entries, layer sizes {sizes} need {expected}")
        out, at = [], 0
        for shape in shapes:
            k = int(np.prod(shape))
            out.append(vec[at:at + k].reshape(shape).copy())
            at += k
        w1, b1, w2, b2, w3, b3 = out
        return cls((w1, w2, w3), (b1, b2, b3))

    def copy(self) -> "MlpParams":
        return MlpParams(tuple(w.copy() for w in self.weights),
                         tuple(b.copy() for b in self.biases))

    @property
    def num_params(self) -> int:
        return sum(a.size for a in self.arrays())


def _shapes(sizes: LayerSizes) -> list[tuple[int, ...]]:
    d, h1, h2, o = sizes
    return [(d, h1), (h1,), (h1, h2), (h2,), (h2, o), (o,)]


def init_params(d: int, hidden: tuple[int, int] = (64, 32), rng=None) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(rng)
    sizes = (d, hidden[0], hidden[1], 1)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(tuple(weights), tuple(biases))


def _check_finite(a: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {where}")


def _forward_cache(params: MlpParams, features: np.ndarray):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.sizes[0]:
        raise ShapeError(f"features of shape {x.shape} do not fit input width {params.sizes[0]}")
    w1, w2, w3 = params.weights
    b1, b2, b3 = params.biases
    a1 = np.tanh(x @ w1 + b1)
    a2 = np.tanh(a1 @ w2 + b2)
    out = (a2 @ w3 + b3)[:, 0]
    return x, a1, a2, out


def forward(params: MlpParams, features) -> np.ndarray:
    """One score per row."""
    return _forward_cache(params, features)[3]


LossFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


def value_and_grad(params: MlpParams, features, loss_fn: LossFn) -> tuple[float, MlpParams]:
    """Evaluate ``loss_fn`` on the scores and backpropagate to every parameter.

    ``loss_fn(scores)`` must return the scalar loss and its gradient with
    respect to ``scores``.
    """
    x, a1, a2, scores = _forward_cache(params, features)
    _check_finite(a1, "hidden layer 1 activations")
    _check_finite(a2, "hidden layer 2 activations")
    _check_finite(scores, "output scores")
    value, dscores = loss_fn(scores)
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss value {value}")
    dscores = np.asarray(dscores, dtype=np.float64)
    _check_finite(dscores, "loss gradient w.r.t. scores")

    w1, w2, w3 = params.weights
    d3 = dscores[:, None]
    gw3 = a2.T @ d3
    gb3 = d3.sum(axis=0)
    d2 = (d3 @ w3.T) * (1.0 - a2 ** 2)
    gw2 = a1.T @ d2
    gb2 = d2.sum(axis=0)
    d1 = (d2 @ w2.T) * (1.0 - a1 ** 2)
    gw1 = x.T @ d1
    gb1 = d1.sum(axis=0)
    for g, name in ((gw3, "output layer"), (gw2, "hidden layer 2"), (gw1, "hidden layer 1")):
        _check_finite(g, f"gradient of {name}")
    return float(value), MlpParams((gw1, gw2, gw3), (gb1, gb2, gb3))


def grad(params: MlpParams, features, loss_fn: LossFn) -> MlpParams:
    return value_and_grad(params, features, loss_fn)[1]


def _combine(a: MlpParams, b: MlpParams, scale: float) -> MlpParams:
    """``a + scale * b`` leaf by leaf."""
    if a.sizes != b.sizes:
        raise ShapeError(f"parameter shapes differ: {a.sizes} vs {b.sizes}")
    return MlpParams(
        tuple(x + scale * y for x, y in zip(a.weights, b.weights)),
        tuple(x + scale * y for x, y in zip(a.biases, b.biases)),
    )


def sam_perturb(params: MlpParams, gradient: MlpParams, nu: float) -> MlpParams:
    """Move ``nu`` along the normalized gradient; identity when the gradient vanishes."""
    if nu < 0:
        raise ValueError(f"nu must be non-negative, got {nu}")
    norm = float(np.linalg.norm(gradient.flat()))
    if norm == 0.0:
        return params.copy()
    return _combine(params, gradient, nu / norm)


def sgd_step(params: MlpParams, gradient: MlpParams, eta: float) -> MlpParams:
    if eta <= 0:
        raise ValueError(f"learning rate must be positive, got {eta}")
    return _combine(params, gradient, -eta)


# Checkpoint layout (all little-endian):
#   bytes 0-3   magic b"RAFM"
#   bytes 4-7   uint32 format version (1)
#   bytes 8-23  4 x uint32 layer sizes d, h1, h2, out
#   bytes 24-31 uint64 number of float64 values that follow
#   bytes 32-   float64 values in the order W1, b1, W2, b2, W3, b3 (row-major)
CHECKPOINT_MAGIC = b"RAFM"
CHECKPOINT_VERSION = 1
_HEADER = struct.Struct("<4sI4IQ")


def save_checkpoint(path, params: MlpParams) -> None:
    vec = params.flat().astype("<f8")
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, *params.sizes, vec.size)
    Path(path).write_bytes(header + vec.tobytes())


def load_checkpoint(path) -> MlpParams:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated checkpoint header")
    magic, version, d, h1, h2, o, count = _HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC or version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    body = raw[_HEADER.size:]
    if len(body) != 8 * count:
        raise ValueError(f"{path}: expected {count} float64 values, found {len(body) / 8:g}")
    vec = np.frombuffer(body, dtype="<f8").astype(np.float64)
    return MlpParams.from_flat(vec, (d, h1, h2, o))
