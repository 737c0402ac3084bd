"""Stacking blocks into a tree: the stock architecture, shape flow,
descriptor properties, and configuration validation."""

import numpy as np
import pytest

from shrinknet import seeds
from shrinknet.errors import ConfigError
from shrinknet.network import (LayerSpec, NetworkConfig, build_network,
                               global_descriptor, network_forward,
                               stock_config)


def small_config(n_classes=3):
    return NetworkConfig(
        in_dim=3,
        layers=(LayerSpec(fan_out=2, n_regions=5, out_dim=6, hidden=(4,)),
                LayerSpec(fan_out=1, n_regions=1, out_dim=12, hidden=(4,))),
        classifier_hidden=(8,),
        n_classes=n_classes)


def test_stock_architecture_counts():
    cfg = stock_config()
    cfg.validate()
    assert [l.fan_out for l in cfg.layers] == [2, 3, 2]
    assert [l.n_regions for l in cfg.layers] == [240, 48, 1]
    assert [l.out_dim for l in cfg.layers] == [6, 12, 18]
    assert cfg.in_dim == 3 and cfg.n_classes == 10
    assert cfg.classifier_hidden == (36, 46, 56, 46)
    params = build_network(cfg, seed=0)
    # 2 + 2*3 + 2*3*2 blocks, of which the last 12 are leaves
    assert len(params.unit_paths()) == 20
    assert len(params.leaf_paths()) == 12
    assert list(params.classifier.widths) == [18, 36, 46, 56, 46, 10]


def test_stock_unit_dimensions_per_depth():
    params = build_network(stock_config(), seed=1)
    dims = {0: (3, 6, 240), 1: (6, 12, 48), 2: (12, 18, 1)}
    for path in params.unit_paths():
        unit = params.units[path]
        want_in, want_out, want_k = dims[len(path) - 1]
        assert unit.in_dim == want_in
        assert unit.out_dim == want_out
        assert unit.n_regions == want_k


def test_forward_shapes_and_normalized_log_probs():
    cfg = small_config()
    params = build_network(cfg, seed=2)
    cloud = np.random.default_rng(0).standard_normal((40, 3))
    log_probs, trace = network_forward(params, cloud, seed=2)
    assert log_probs.shape == (1, 3)
    assert np.exp(log_probs).sum() == pytest.approx(1.0, abs=1e-12)
    assert trace.descriptor.shape == (1, 12)
    assert sorted(trace.leaf_outputs) == [(0, 0), (1, 0)]
    for leaf, arr in trace.leaf_outputs.items():
        assert arr.shape == (1, 12)


def test_forward_is_deterministic_for_a_fixed_seed_and_stream():
    cfg = small_config()
    params = build_network(cfg, seed=3)
    cloud = np.random.default_rng(1).standard_normal((30, 3))
    lp1, _ = network_forward(params, cloud, seed=3, stream_key=(seeds.EVAL, 5))
    lp2, _ = network_forward(params, cloud, seed=3, stream_key=(seeds.EVAL, 5))
    assert np.array_equal(lp1, lp2)


def test_build_is_reproducible_and_seed_sensitive():
    cfg = small_config()
    a = build_network(cfg, seed=7)
    b = build_network(cfg, seed=7)
    c = build_network(cfg, seed=8)
    for x, y in zip(a.flat_arrays(), b.flat_arrays()):
        assert np.array_equal(x, y)
    assert any(not np.array_equal(x, y)
               for x, y in zip(a.flat_arrays(), c.flat_arrays()))


def test_adding_a_branch_does_not_perturb_siblings():
    # block initialization streams are keyed by path, so widening a layer
    # leaves existing blocks byte-identical
    narrow = NetworkConfig(in_dim=3,
                           layers=(LayerSpec(1, 4, 6, hidden=(4,)),
                                   LayerSpec(1, 1, 12, hidden=(4,))),
                           classifier_hidden=(8,), n_classes=3)
    wide = NetworkConfig(in_dim=3,
                         layers=(LayerSpec(2, 4, 6, hidden=(4,)),
                                 LayerSpec(1, 1, 12, hidden=(4,))),
                         classifier_hidden=(8,), n_classes=3)
    pn = build_network(narrow, seed=11)
    pw = build_network(wide, seed=11)
    for path in pn.unit_paths():
        a = pn.units[path]
        b = pw.units[path]
        for x, y in zip(a.arrays(), b.arrays()):
            assert np.array_equal(x, y)


def test_descriptor_is_leaf_order_invariant():
    rng = np.random.default_rng(5)
    leaves = [rng.standard_normal((1, 7)) for _ in range(6)]
    base = global_descriptor(leaves)
    assert base.shape == (1, 7)
    for trial in range(5):
        order = rng.permutation(6)
        assert np.array_equal(base, global_descriptor([leaves[i] for i in order]))
    # and it really is the channel-wise maximum
    stacked = np.concatenate(leaves, axis=0)
    assert np.array_equal(base.ravel(), stacked.max(axis=0))


def test_config_validation_rejects_bad_stacks():
    with pytest.raises(ConfigError):  # channel widths must strictly increase
        NetworkConfig(in_dim=3, layers=(LayerSpec(1, 4, 6), LayerSpec(1, 1, 6)),
                      classifier_hidden=(8,), n_classes=3).validate()
    with pytest.raises(ConfigError):  # region counts must strictly decrease
        NetworkConfig(in_dim=3, layers=(LayerSpec(1, 4, 6), LayerSpec(1, 4, 12)),
                      classifier_hidden=(8,), n_classes=3).validate()
    with pytest.raises(ConfigError):  # the last layer must pool to one region
        NetworkConfig(in_dim=3, layers=(LayerSpec(1, 4, 6),),
                      classifier_hidden=(8,), n_classes=3).validate()
    with pytest.raises(ConfigError):  # need at least two classes
        NetworkConfig(in_dim=3, layers=(LayerSpec(1, 1, 6),),
                      classifier_hidden=(8,), n_classes=1).validate()
    with pytest.raises(ConfigError):  # need at least one layer
        NetworkConfig(in_dim=3, layers=(), classifier_hidden=(8,),
                      n_classes=3).validate()


def test_config_dict_round_trip():
    cfg = small_config()
    again = NetworkConfig.from_dict(cfg.to_dict())
    assert again == cfg


def test_forward_rejects_wrong_input_width():
    cfg = small_config()
    params = build_network(cfg, seed=4)
    with pytest.raises(ConfigError):
        network_forward(params, np.zeros((20, 4)), seed=4)


def test_param_names_are_stable_and_unique():
    params = build_network(small_config(), seed=6)
    names = params.array_names()
    arrays = params.flat_arrays()
    assert len(names) == len(arrays)
    assert len(set(names)) == len(names)
    assert any(name.startswith("unit.0/") for name in names)
    assert any(name.startswith("classifier/") for name in names)
