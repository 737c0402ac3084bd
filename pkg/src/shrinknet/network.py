"""Stacks of shrinking blocks arranged as a tree, plus the classifier head.

A layer carries `fan_out` blocks per incoming branch, so layer L holds
prod(fan_out[0..L]) independently parameterized blocks. Every leaf emits a
(1, T) cloud (the final layer pools into a single region); the global
descriptor is the channel-wise max over leaves, and a dense head turns it
into log class probabilities.

Parameter and clustering randomness is keyed by the block's tree path, so
adding a branch never perturbs the initialization of existing siblings.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import seeds
from .errors import ConfigError, NumericError
from .nn import Binding, MlpParams, make_mlp, mlp_apply
from .unit import UnitParams, make_unit_params, unit_forward_on_tape


@dataclass(frozen=True)
class LayerSpec:
    fan_out: int
    n_regions: int
    out_dim: int
    hidden: tuple[int, ...] | None = None


@dataclass(frozen=True)
class NetworkConfig:
    in_dim: int
    layers: tuple[LayerSpec, ...]
    classifier_hidden: tuple[int, ...]
    n_classes: int

    def validate(self):
        if self.in_dim < 1:
            raise ConfigError(f"in_dim must be >= 1, got {self.in_dim}")
        if not self.layers:
            raise ConfigError("a network needs at least one layer")
        if self.n_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.n_classes}")
        prev_dim = self.in_dim
        prev_regions = None
        for i, layer in enumerate(self.layers):
            if layer.fan_out < 1:
                raise ConfigError(f"layer {i}: fan_out must be >= 1")
            if layer.out_dim <= prev_dim:
                raise ConfigError(
                    f"layer {i}: channel width must strictly increase "
                    f"({prev_dim} -> {layer.out_dim})")
            if prev_regions is not None and layer.n_regions >= prev_regions:
                raise ConfigError(
                    f"layer {i}: region count must strictly decrease "
                    f"({prev_regions} -> {layer.n_regions})")
            if layer.n_regions < 1:
                raise ConfigError(f"layer {i}: region count must be >= 1")
            prev_dim = layer.out_dim
            prev_regions = layer.n_regions
        if self.layers[-1].n_regions != 1:
            raise ConfigError(
                f"the final layer must pool to one region, got {self.layers[-1].n_regions}")

    def to_dict(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "layers": [
                {"fan_out": l.fan_out, "n_regions": l.n_regions,
                 "out_dim": l.out_dim,
                 "hidden": list(l.hidden) if l.hidden is not None else None}
                for l in self.layers
            ],
            "classifier_hidden": list(self.classifier_hidden),
            "n_classes": self.n_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        layers = tuple(
            LayerSpec(fan_out=int(l["fan_out"]), n_regions=int(l["n_regions"]),
                      out_dim=int(l["out_dim"]),
                      hidden=tuple(l["hidden"]) if l.get("hidden") is not None else None)
            for l in d["layers"])
        cfg = cls(in_dim=int(d["in_dim"]), layers=layers,
                  classifier_hidden=tuple(int(h) for h in d["classifier_hidden"]),
                  n_classes=int(d["n_classes"]))
        cfg.validate()
        return cfg


def stock_config(n_classes: int = 10, in_dim: int = 3) -> NetworkConfig:
    """The reference architecture: fan-outs 2/3/2, regions 240/48/1,
    channel schedule 3 -> 6 -> 12 -> 18, head 36/46/56/46."""
    return NetworkConfig(
        in_dim=in_dim,
        layers=(
            LayerSpec(fan_out=2, n_regions=240, out_dim=6),
            LayerSpec(fan_out=3, n_regions=48, out_dim=12),
            LayerSpec(fan_out=2, n_regions=1, out_dim=18),
        ),
        classifier_hidden=(36, 46, 56, 46),
        n_classes=n_classes,
    )


@dataclass
class NetworkParams:
    config: NetworkConfig
    units: dict[tuple[int, ...], UnitParams]
    classifier: MlpParams

    def unit_paths(self):
        return sorted(self.units, key=lambda p: (len(p), p))

    def leaf_paths(self):
        depth = len(self.config.layers)
        return [p for p in self.unit_paths() if len(p) == depth]

    def flat_arrays(self) -> list[np.ndarray]:
        out = []
        for path in self.unit_paths():
            out += self.units[path].arrays()
        out += self.classifier.arrays()
        return out

    def array_names(self) -> list[str]:
        names = []
        for path in self.unit_paths():
            tag = "unit" + "".join(f".{c}" for c in path)
            names += [f"{tag}/{n}" for n in self.units[path].array_names()]
        for i in range(len(self.classifier.weights)):
            names += [f"classifier/w{i}", f"classifier/b{i}"]
        return names

    def clone(self) -> "NetworkParams":
        """Deep copy of every parameter array."""
        copied = build_network(self.config, seed=0)
        for src, dst in zip(self.flat_arrays(), copied.flat_arrays()):
            dst[...] = src
        return copied


def _layer_paths(config, depth):
    paths = [()]
    for layer in config.layers[:depth]:
        paths = [p + (c,) for p in paths for c in range(layer.fan_out)]
    return paths


def build_network(config: NetworkConfig, seed: int) -> NetworkParams:
    """Initialize every block and the head from path-keyed streams."""
    config.validate()
    units = {}
    in_dim = config.in_dim
    for depth, layer in enumerate(config.layers):
        for path in _layer_paths(config, depth + 1):
            rng = seeds.stream(seed, seeds.INIT, 1, depth, *path)
            units[path] = make_unit_params(
                in_dim, layer.out_dim, layer.n_regions, rng, hidden=layer.hidden)
        in_dim = layer.out_dim
    head_widths = [config.layers[-1].out_dim, *config.classifier_hidden, config.n_classes]
    classifier = make_mlp(head_widths, seeds.stream(seed, seeds.INIT, 0))
    return NetworkParams(config=config, units=units, classifier=classifier)


@dataclass
class NetworkTrace:
    log_probs: np.ndarray                      # (1, n_classes)
    descriptor: np.ndarray                     # (1, T_last)
    leaf_outputs: dict                         # path -> (1, T_last)
    unit_traces: dict                          # path -> UnitTrace


def _descriptor_node(leaf_nodes):
    stacked = ad.concat_rows(leaf_nodes)
    values = stacked.value
    winners = np.argmax(values, axis=0)[None, :]  # ties: lowest leaf index
    return ad.gather_pool(stacked, winners)


def global_descriptor(leaf_clouds) -> np.ndarray:
    """Channel-wise max over leaf outputs; order of leaves is irrelevant."""
    if not leaf_clouds:
        raise ConfigError("global_descriptor: no leaf outputs")
    stacked = np.concatenate([np.asarray(c, dtype=np.float64) for c in leaf_clouds], axis=0)
    return stacked.max(axis=0, keepdims=True)


def network_forward_on_tape(binding, params, cloud, seed, stream_key=(),
                            assignments=None):
    """Forward a raw (N, in_dim) cloud to a (1, n_classes) log-prob node.

    `stream_key` prefixes the per-block clustering streams (epoch, sample
    id, ...). `assignments` optionally injects {path: ClusterAssignment}.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != params.config.in_dim:
        raise ConfigError(
            f"network expects (N, {params.config.in_dim}) clouds, got {cloud.shape}")
    frontier = {(): ad.constant(binding.tape, cloud)}
    unit_traces = {}
    for depth, layer in enumerate(params.config.layers):
        grown = {}
        for parent_path, x in frontier.items():
            for child in range(layer.fan_out):
                path = parent_path + (child,)
                rng = seeds.stream(seed, *stream_key, depth, *path)
                injected = assignments.get(path) if assignments else None
                pooled, trace = unit_forward_on_tape(
                    binding, params.units[path], x, rng=rng, assignment=injected)
                expected = (layer.n_regions, layer.out_dim)
                if pooled.value.shape != expected:
                    raise NumericError(
                        f"block {path} produced shape {pooled.value.shape}, "
                        f"expected {expected}")
                grown[path] = pooled
                unit_traces[path] = trace
        frontier = grown

    leaf_paths = sorted(frontier, key=lambda p: (len(p), p))
    descriptor = _descriptor_node([frontier[p] for p in leaf_paths])
    logits = mlp_apply(binding, params.classifier, descriptor)
    log_probs = ad.log_softmax_rows(logits)

    trace = NetworkTrace(
        log_probs=log_probs.value.copy(),
        descriptor=descriptor.value.copy(),
        leaf_outputs={p: frontier[p].value.copy() for p in leaf_paths},
        unit_traces=unit_traces,
    )
    return log_probs, trace


def network_forward(params, cloud, seed, stream_key=(seeds.EVAL, 0),
                    assignments=None):
    """Array-level forward pass. Returns (log_probs (1, n_classes), trace)."""
    binding = Binding(ad.Tape())
    node, trace = network_forward_on_tape(
        binding, params, cloud, seed, stream_key=stream_key,
        assignments=assignments)
    return node.value.copy(), trace
