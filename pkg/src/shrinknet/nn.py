"""Small dense building blocks: MLPs, Glorot init, Adam.

An MLP here is a width list [d_in, h1, ..., d_out] with ReLU on every
hidden layer and a configurable output activation (identity by default).
Weights are stored input-major, so a layer computes x @ W + b.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigError


def glorot_init(fan_in: int, fan_out: int, rng) -> np.ndarray:
    """Uniform Glorot sample of shape (fan_in, fan_out)."""
    if fan_in <= 0 or fan_out <= 0:
        raise ConfigError(f"glorot_init: fans must be positive, got ({fan_in}, {fan_out})")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class MlpParams:
    """Affine layers plus the output-activation switch."""

    widths: tuple[int, ...]
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)
    out_activation: str = "identity"  # or "relu"

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def make_mlp(widths, rng, out_activation="identity") -> MlpParams:
    """Glorot weights, zero biases. Every layer has a bias."""
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2:
        raise ConfigError(f"an MLP needs at least two widths, got {widths}")
    if any(w <= 0 for w in widths):
        raise ConfigError(f"MLP widths must be positive, got {widths}")
    if out_activation not in ("identity", "relu"):
        raise ConfigError(f"unknown output activation {out_activation!r}")
    mlp = MlpParams(widths=widths, out_activation=out_activation)
    for d_in, d_out in zip(widths[:-1], widths[1:]):
        mlp.weights.append(glorot_init(d_in, d_out, rng))
        mlp.biases.append(np.zeros((1, d_out)))
    return mlp


def default_hidden(d_in: int) -> list[int]:
    """Hidden-width rule used by the stock architecture: a symmetric bump
    of +10, +15, +20, +15, +10 over the input width."""
    return [d_in + 10, d_in + 15, d_in + 20, d_in + 15, d_in + 10]


def mlp_apply(binding, mlp: MlpParams, x):
    """Tape forward pass. `x` is a Node of shape (N, d_in)."""
    if x.value.shape[1] != mlp.in_dim:
        raise ConfigError(
            f"MLP expects input width {mlp.in_dim}, got {x.value.shape[1]}")
    h = x
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = ad.add(ad.matmul(h, binding.param(w)), binding.param(b))
        if i < last or mlp.out_activation == "relu":
            h = ad.relu(h)
    return h


def mlp_forward(mlp: MlpParams, x: np.ndarray) -> np.ndarray:
    """Plain forward pass on a raw (N, d_in) array."""
    binding = Binding(ad.Tape())
    out = mlp_apply(binding, mlp, ad.constant(binding.tape, x))
    return out.value


class Binding:
    """Maps parameter arrays to leaf nodes on one tape, one node per array."""

    def __init__(self, tape):
        self.tape = tape
        self._nodes = {}

    def param(self, array):
        node = self._nodes.get(id(array))
        if node is None:
            node = ad.leaf(self.tape, array)
            self._nodes[id(array)] = node
        return node

    def nodes_for(self, arrays):
        return [self.param(a) for a in arrays]


@dataclass
class AdamState:
    """First/second moment accumulators plus the step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: list[np.ndarray]) -> "AdamState":
        return cls(m=[np.zeros_like(p) for p in params],
                   v=[np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params, grads,
              lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, applied to `params` in place."""
    if not (len(state.m) == len(params) == len(grads)):
        raise ConfigError("adam_step: state/params/grads length mismatch")
    state.t += 1
    t = state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ConfigError(
                f"adam_step: shape mismatch at parameter {i}: "
                f"param {p.shape}, grad {g.shape}, state {state.m[i].shape}")
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        m_hat = state.m[i] / (1.0 - beta1 ** t)
        v_hat = state.v[i] / (1.0 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params
