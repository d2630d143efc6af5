"""Dense layers, an LSTM cell, dropout, Adam with l2, and parameter I/O."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ShapeError, Tape

CHECKPOINT_VERSION = 1

ParameterSet = dict  # name -> float64 ndarray, insertion ordered


@dataclass(frozen=True)
class DenseLayer:
    """Node ids of an (out x in) weight and an (out,) bias on one tape."""
    weight: int
    bias: int


@dataclass(frozen=True)
class LstmCell:
    """Node ids of an LSTM cell; gate blocks ordered input, forget, candidate, output."""
    weight_ih: int
    weight_hh: int
    bias: int


@dataclass
class HyperParams:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    l2_weight: float = 1e-4
    keep_prob: float = 0.8
    l2_biases: bool = False

    def __post_init__(self):
        if not 0.0 < self.keep_prob <= 1.0:
            raise ValueError(f"keep_prob must be in (0, 1], got {self.keep_prob}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.l2_weight < 0:
            raise ValueError("l2_weight must be non-negative")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step_count: int = 0

    @classmethod
    def zeros_like(cls, params, names=None):
        names = list(params) if names is None else names
        return cls({n: np.zeros_like(params[n]) for n in names},
                   {n: np.zeros_like(params[n]) for n in names}, 0)


def is_bias(name: str) -> bool:
    return name.endswith("_b")


def dense_forward(tape: Tape, x: int, layer: DenseLayer, activation: str = "none") -> int:
    w = tape.value(layer.weight)
    if tape.value(x).shape[-1] != w.shape[1]:
        raise ShapeError(f"dense: input width {tape.value(x).shape[-1]} != layer width {w.shape[1]}")
    y = tape.add(tape.matmul(x, tape.transpose(layer.weight)), layer.bias)
    if activation == "relu":
        return tape.relu(y)
    if activation == "sigmoid":
        return tape.sigmoid(y)
    if activation != "none":
        raise ValueError(f"unknown activation {activation!r}")
    return y


def lstm_step(tape: Tape, h: int, c: int, e: int, cell: LstmCell) -> tuple[int, int]:
    """One LSTM step; works on single vectors or row-batched matrices."""
    hidden = tape.value(cell.weight_hh).shape[1]
    if tape.value(h).shape[-1] != hidden or tape.value(c).shape[-1] != hidden:
        raise ShapeError(f"lstm: state width {tape.value(h).shape} / {tape.value(c).shape}, hidden {hidden}")
    if tape.value(e).shape[-1] != tape.value(cell.weight_ih).shape[1]:
        raise ShapeError(f"lstm: input width {tape.value(e).shape[-1]} "
                         f"!= {tape.value(cell.weight_ih).shape[1]}")
    gates = tape.add(tape.add(tape.matmul(e, tape.transpose(cell.weight_ih)),
                              tape.matmul(h, tape.transpose(cell.weight_hh))),
                     cell.bias)
    blocks = [tape.slice(gates, (Ellipsis, slice(k * hidden, (k + 1) * hidden))) for k in range(4)]
    i = tape.sigmoid(blocks[0])
    f = tape.sigmoid(blocks[1])
    g = tape.tanh(blocks[2])
    o = tape.sigmoid(blocks[3])
    c_new = tape.add(tape.mul(f, c), tape.mul(i, g))
    h_new = tape.mul(o, tape.tanh(c_new))
    return h_new, c_new


def dropout(tape: Tape, x: int, keep_prob: float, rng: np.random.Generator | None,
            training: bool) -> int:
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep_prob must be in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1.0:
        return x
    shape = tape.value(x).shape
    mask = (rng.random(shape) < keep_prob) / keep_prob
    return tape.mul(x, tape.constant(mask))


def adam_step(params: ParameterSet, grads: dict, state: AdamState, hyper: HyperParams,
              names=None) -> None:
    """Bias-corrected Adam with classic l2 (added to the gradient), in place.

    Only ``names`` (default: every key of ``state.m``) are updated.
    """
    names = list(state.m) if names is None else list(names)
    for n in names:
        if grads[n].shape != params[n].shape:
            raise ShapeError(f"adam: grad {grads[n].shape} vs param {params[n].shape} for {n}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = hyper.beta1, hyper.beta2
    corr1 = 1.0 - b1 ** t
    corr2 = 1.0 - b2 ** t
    for n in names:
        p = params[n]
        g = grads[n]
        if hyper.l2_weight and (hyper.l2_biases or not is_bias(n)):
            g = g + hyper.l2_weight * p
        if not g.any():
            # an untouched tensor keeps its value and moments, as with a missing grad
            continue
        m = state.m[n]
        v = state.v[n]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= hyper.learning_rate * (m / corr1) / (np.sqrt(v / corr2) + hyper.epsilon)


def xavier_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    fan_out, fan_in = shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(shapes: dict, seed: int, lstm_biases=()) -> ParameterSet:
    """Xavier-uniform weights, zero biases, forget-gate block of LSTM biases at 1."""
    for name, shape in shapes.items():
        if any(int(d) <= 0 for d in shape):
            raise ValueError(f"non-positive dimension in {name}: {shape}")
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in shapes.items():
        if len(shape) == 2:
            params[name] = xavier_uniform(rng, shape)
        else:
            b = np.zeros(shape)
            if name in lstm_biases:
                hidden = shape[0] // 4
                b[hidden:2 * hidden] = 1.0
            params[name] = b
    return params


def save_checkpoint(path, params: ParameterSet, metadata: dict) -> None:
    doc = {
        "metadata": {**metadata, "version": CHECKPOINT_VERSION},
        "params": {n: {"shape": list(p.shape), "data": [float(x) for x in p.ravel()]}
                   for n, p in params.items()},
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[ParameterSet, dict]:
    """Read a checkpoint; raises ``json.JSONDecodeError`` (with position) or ``ValueError``."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        params = {n: np.array(e["data"], dtype=np.float64).reshape(e["shape"])
                  for n, e in doc["params"].items()}
        meta = doc["metadata"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed checkpoint {path}: {exc}") from exc
    return params, meta
