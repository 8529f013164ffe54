"""
Neural Net Tool - grouped residual MLPs with hand-written reverse mode, init and Adam
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, NamedTuple, Tuple

import numpy as np

from utils.errors import InvalidInputError, NonFiniteGradientError, StaleTapeError
from utils.logger import setup_logger

logger = setup_logger(__name__)

LEAKY_SLOPE = 0.1
LAYER_COUNT = 4


class ParamSpec(NamedTuple):
    """One named parameter block; fan_in == 0 marks a bias (zero init)"""

    name: str
    shape: Tuple[int, ...]
    fan_in: int = 0
    fan_out: int = 0


class ParamVector:
    """Flat float64 storage for every learnable parameter with named views into it"""

    def __init__(self, layout: Iterable[ParamSpec], data: np.ndarray | None = None):
        self.layout: List[ParamSpec] = list(layout)
        self.index: Dict[str, Tuple[int, Tuple[int, ...]]] = {}
        offset = 0
        for spec in self.layout:
            if spec.name in self.index:
                raise InvalidInputError(f"Duplicate parameter name {spec.name}")
            self.index[spec.name] = (offset, tuple(spec.shape))
            offset += int(np.prod(spec.shape, dtype=np.int64))
        self.size = offset

        if data is None:
            data = np.zeros(offset)
        data = np.asarray(data, dtype=np.float64)
        if data.shape != (offset,):
            raise InvalidInputError(f"Parameter data has shape {data.shape}, layout needs ({offset},)")
        self.data = data
        self.version = 0

    def view(self, name: str) -> np.ndarray:
        start, shape = self.index[name]
        return self.data[start : start + int(np.prod(shape, dtype=np.int64))].reshape(shape)

    def names(self) -> List[str]:
        return [spec.name for spec in self.layout]

    def zeros_like(self) -> "ParamVector":
        return ParamVector(self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.layout, self.data.copy())

    def flatten(self) -> np.ndarray:
        return self.data.copy()

    def unflatten(self, flat) -> "ParamVector":
        return ParamVector(self.layout, np.array(flat, dtype=np.float64))

    def bump(self) -> None:
        """Mark the values as changed so older tapes are rejected"""
        self.version += 1


def init_params(layout: Iterable[ParamSpec], seed) -> ParamVector:
    """Glorot-uniform weights in ±sqrt(6 / (fan_in + fan_out)); zero biases"""
    rng = np.random.default_rng(seed)
    params = ParamVector(layout)
    for spec in params.layout:
        if spec.fan_in == 0:
            continue
        limit = np.sqrt(6.0 / (spec.fan_in + spec.fan_out))
        params.view(spec.name)[...] = rng.uniform(-limit, limit, size=spec.shape)
    return params


def leaky_relu(z: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(z > 0.0, z, slope * z)


def leaky_relu_grad(z: np.ndarray, slope: float = LEAKY_SLOPE) -> np.ndarray:
    return np.where(z > 0.0, 1.0, slope)


def sigmoid(s: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(s))
    return np.where(s >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass(frozen=True)
class MLPSpec:
    """G independent residual MLPs (grouped channels) of identical shape"""

    input_dim: int
    width: int
    groups: int = 1
    prefix: str = ""
    layers: int = LAYER_COUNT
    slope: float = LEAKY_SLOPE

    def layout(self) -> List[ParamSpec]:
        G, H, p = self.groups, self.width, self.prefix
        specs = [
            ParamSpec(f"{p}W0", (G, self.input_dim, H), self.input_dim, H),
            ParamSpec(f"{p}b0", (G, H)),
        ]
        for i in range(1, self.layers):
            specs.append(ParamSpec(f"{p}W{i}", (G, H, H), H, H))
            specs.append(ParamSpec(f"{p}b{i}", (G, H)))
        specs.append(ParamSpec(f"{p}head_w", (G, H), H, 1))
        specs.append(ParamSpec(f"{p}head_b", (G,)))
        return specs


@dataclass
class Tape:
    inputs: np.ndarray
    layer_inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    features: np.ndarray
    outputs: np.ndarray
    version: int


class ResidualMLP:
    """Layer 0: in -> H; layers 1..L-1: y = LeakyReLU(Wx + b) + x; head: H -> 1, sigmoid"""

    def __init__(self, spec: MLPSpec, params: ParamVector):
        self.spec = spec
        self.params = params
        missing = [s.name for s in spec.layout() if s.name not in params.index]
        if missing:
            raise InvalidInputError(f"Parameter vector lacks {missing}")

    def _weights(self, i: int) -> Tuple[np.ndarray, np.ndarray]:
        p = self.spec.prefix
        return self.params.view(f"{p}W{i}"), self.params.view(f"{p}b{i}")

    def forward(self, inputs) -> Tuple[np.ndarray, Tape]:
        """inputs (G, N, input_dim) -> values (G, N) in (0, 1)"""
        x = np.asarray(inputs, dtype=np.float64)
        if x.ndim == 2 and self.spec.groups == 1:
            x = x[None]
        if x.ndim != 3 or x.shape[0] != self.spec.groups or x.shape[2] != self.spec.input_dim:
            raise InvalidInputError(
                f"MLP expects (G={self.spec.groups}, N, {self.spec.input_dim}) inputs, got {x.shape}"
            )
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("MLP inputs must be finite")

        slope = self.spec.slope
        layer_inputs, pre_activations = [], []

        W, b = self._weights(0)
        z = np.matmul(x, W) + b[:, None, :]
        layer_inputs.append(x)
        pre_activations.append(z)
        h = leaky_relu(z, slope)

        for i in range(1, self.spec.layers):
            W, b = self._weights(i)
            z = np.matmul(h, W) + b[:, None, :]
            layer_inputs.append(h)
            pre_activations.append(z)
            h = leaky_relu(z, slope) + h

        p = self.spec.prefix
        scores = np.einsum("gnh,gh->gn", h, self.params.view(f"{p}head_w"))
        scores = scores + self.params.view(f"{p}head_b")[:, None]
        outputs = sigmoid(scores)
        return outputs, Tape(x, layer_inputs, pre_activations, h, outputs, self.params.version)

    def backward(self, tape: Tape, upstream, grads: ParamVector | None = None):
        """Accumulate d(sum upstream * outputs) into grads; return (grads, d inputs)"""
        if tape.version != self.params.version:
            raise StaleTapeError("Parameters changed since this tape was recorded")
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != tape.outputs.shape:
            upstream = np.broadcast_to(upstream, tape.outputs.shape)
        if grads is None:
            grads = self.params.zeros_like()

        slope, p = self.spec.slope, self.spec.prefix
        d_scores = upstream * tape.outputs * (1.0 - tape.outputs)
        grads.view(f"{p}head_w")[...] += np.einsum("gn,gnh->gh", d_scores, tape.features)
        grads.view(f"{p}head_b")[...] += d_scores.sum(axis=1)
        dh = d_scores[:, :, None] * self.params.view(f"{p}head_w")[:, None, :]

        for i in range(self.spec.layers - 1, -1, -1):
            W, _ = self._weights(i)
            dz = dh * leaky_relu_grad(tape.pre_activations[i], slope)
            grads.view(f"{p}W{i}")[...] += np.einsum("gni,gnj->gij", tape.layer_inputs[i], dz)
            grads.view(f"{p}b{i}")[...] += dz.sum(axis=1)
            d_in = np.matmul(dz, np.transpose(W, (0, 2, 1)))
            dh = d_in + dh if i > 0 else d_in

        return grads, dh


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    learning_rate: float = 1e-4

    @classmethod
    def zeros(cls, size: int, learning_rate: float = 1e-4, **kwargs) -> "AdamState":
        return cls(np.zeros(size), np.zeros(size), learning_rate=learning_rate, **kwargs)


def adam_step(state: AdamState, params: ParamVector, grads) -> ParamVector:
    """Bias-corrected Adam update applied in place; non-finite gradients skip the step"""
    g = grads.data if isinstance(grads, ParamVector) else np.asarray(grads, dtype=np.float64)
    if g.shape != params.data.shape or state.m.shape != params.data.shape:
        raise InvalidInputError(
            f"Adam shapes differ: params {params.data.shape}, grads {g.shape}, state {state.m.shape}"
        )
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError(f"Non-finite gradient at Adam step {state.t + 1}; step skipped")

    state.t += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (g * g)

    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    denom = np.sqrt(state.v / bc2) + state.eps
    params.data -= (state.learning_rate / bc1) * state.m / denom
    params.bump()
    return params
