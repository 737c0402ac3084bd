"""Declarative run configuration.

A run is described by one YAML document (a key/value tree). Every key has
a default; an empty document reproduces the stock architecture and
training recipe exactly. Unknown keys are rejected by name so that typos
cannot silently fall back to defaults.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import yaml

from .errors import ConfigError
from .network import LayerSpec, NetworkConfig
from .train import TrainConfig

DEFAULTS = {
    "seed": 0,
    "data": {
        "dir": None,            # mesh tree for `preprocess`
        "train_cache": None,
        "test_cache": None,
        "points": 1200,
        "dims": 3,
    },
    "network": {
        "fan_outs": [2, 3, 2],
        "regions": [240, 48, 1],
        "dims": [6, 12, 18],
        "hidden": None,          # per-block MLP hidden widths; None = stock rule
        "classifier_hidden": [36, 46, 56, 46],
        "classes": None,         # None = take the class count from the cache
    },
    "train": {
        "lr": 3.0e-4,
        "beta1": 0.9,
        "beta2": 0.999,
        "batch_size": 32,
        "max_epochs": 200,
        "patience": 20,
        "val_fraction": 0.1,
        "noise_sigma": 0.02,
        "out_dir": "runs/default",
    },
}


def _merge(defaults, given, path):
    if given is None:
        return copy.deepcopy(defaults)
    if not isinstance(given, dict):
        raise ConfigError(f"config key {path or '<root>'} must be a mapping")
    out = {}
    for key, default in defaults.items():
        here = f"{path}.{key}" if path else key
        if key in given and isinstance(default, dict):
            out[key] = _merge(default, given[key], here)
        elif key in given:
            out[key] = copy.deepcopy(given[key])
        else:
            out[key] = copy.deepcopy(default)
    for key in given:
        if key not in defaults:
            here = f"{path}.{key}" if path else key
            raise ConfigError(f"unknown config key: {here}")
    return out


def _expect_int(tree, path):
    v = _dig(tree, path)
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"config key {path} must be an integer, got {v!r}")


def _expect_number(tree, path):
    v = _dig(tree, path)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"config key {path} must be a number, got {v!r}")


def _expect_int_list(tree, path, allow_none=False):
    v = _dig(tree, path)
    if v is None and allow_none:
        return
    if not isinstance(v, list) or not v or any(
            isinstance(x, bool) or not isinstance(x, int) for x in v):
        raise ConfigError(f"config key {path} must be a list of integers, got {v!r}")


def _dig(tree, path):
    node = tree
    for part in path.split("."):
        node = node[part]
    return node


@dataclass
class RunConfig:
    """A fully resolved configuration tree."""

    tree: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @property
    def seed(self) -> int:
        return self.tree["seed"]

    @property
    def data(self) -> dict:
        return self.tree["data"]

    @property
    def network(self) -> dict:
        return self.tree["network"]

    @property
    def train(self) -> dict:
        return self.tree["train"]

    def to_dict(self) -> dict:
        return copy.deepcopy(self.tree)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.tree, sort_keys=False)

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.tree == other.tree


def resolve_config(given: dict | None) -> RunConfig:
    """Merge a parsed document over the defaults and validate the shape."""
    tree = _merge(DEFAULTS, given, "")
    _expect_int(tree, "seed")
    _expect_int(tree, "data.points")
    _expect_int(tree, "data.dims")
    _expect_int_list(tree, "network.fan_outs")
    _expect_int_list(tree, "network.regions")
    _expect_int_list(tree, "network.dims")
    _expect_int_list(tree, "network.hidden", allow_none=True)
    _expect_int_list(tree, "network.classifier_hidden")
    if tree["network"]["classes"] is not None:
        _expect_int(tree, "network.classes")
    for key in ("lr", "beta1", "beta2", "val_fraction", "noise_sigma"):
        _expect_number(tree, f"train.{key}")
    for key in ("batch_size", "max_epochs", "patience"):
        _expect_int(tree, f"train.{key}")
    net = tree["network"]
    if not (len(net["fan_outs"]) == len(net["regions"]) == len(net["dims"])):
        raise ConfigError(
            "network.fan_outs, network.regions, and network.dims must have "
            "the same length (one entry per layer)")
    if tree["data"]["dims"] not in (3, 6):
        raise ConfigError(f"data.dims must be 3 or 6, got {tree['data']['dims']}")
    return RunConfig(tree=tree)


def load_config(path=None, overrides=None) -> RunConfig:
    """Read a YAML document (or start from defaults) and apply overrides,
    a {dotted.key: value} mapping from command-line flags."""
    given = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                given = yaml.safe_load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
        if given is None:
            given = {}
        if not isinstance(given, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    cfg = resolve_config(given)
    for dotted, value in (overrides or {}).items():
        node = cfg.tree
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key: {dotted}")
        node[parts[-1]] = value
    return cfg


def parse_config_text(text: str) -> RunConfig:
    given = yaml.safe_load(text)
    if given is None:
        given = {}
    if not isinstance(given, dict):
        raise ConfigError("config document: top level must be a mapping")
    return resolve_config(given)


def network_config_from(run: RunConfig, n_classes: int) -> NetworkConfig:
    """Instantiate the architecture for a dataset with `n_classes` classes."""
    net = run.network
    declared = net["classes"]
    if declared is not None and declared != n_classes:
        raise ConfigError(
            f"config declares {declared} classes but the dataset defines {n_classes}")
    hidden = tuple(net["hidden"]) if net["hidden"] is not None else None
    layers = tuple(
        LayerSpec(fan_out=f, n_regions=k, out_dim=d, hidden=hidden)
        for f, k, d in zip(net["fan_outs"], net["regions"], net["dims"]))
    cfg = NetworkConfig(
        in_dim=run.data["dims"],
        layers=layers,
        classifier_hidden=tuple(net["classifier_hidden"]),
        n_classes=n_classes,
    )
    cfg.validate()
    return cfg


def train_config_from(run: RunConfig) -> TrainConfig:
    t = run.train
    cfg = TrainConfig(
        seed=run.seed,
        lr=float(t["lr"]),
        beta1=float(t["beta1"]),
        beta2=float(t["beta2"]),
        batch_size=t["batch_size"],
        max_epochs=t["max_epochs"],
        patience=t["patience"],
        val_fraction=float(t["val_fraction"]),
        noise_sigma=float(t["noise_sigma"]),
    )
    cfg.validate()
    return cfg
