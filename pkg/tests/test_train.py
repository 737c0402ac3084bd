"""Loss, metrics, the training loop, and checkpointing."""

import math

import numpy as np
import pytest

from shrinknet import seeds
from shrinknet.dataio import DatasetCache, Sample
from shrinknet.errors import ConfigError, DataError, NumericError
from shrinknet.network import LayerSpec, NetworkConfig
from shrinknet.synth import make_synth_cache
from shrinknet.train import (Checkpoint, TrainConfig, evaluate,
                             load_checkpoint, metrics_from_confusion,
                             nll_loss, save_checkpoint, stratified_split,
                             train)

LN_10 = 2.302585092994046


def tiny_net(n_classes=2):
    return NetworkConfig(in_dim=3,
                         layers=(LayerSpec(1, 3, 6, hidden=(4,)),
                                 LayerSpec(1, 1, 12, hidden=(4,))),
                         classifier_hidden=(8,), n_classes=n_classes)


def tiny_cfg(**kw):
    base = dict(seed=5, lr=1e-2, batch_size=4, max_epochs=2, patience=50,
                val_fraction=0.25, noise_sigma=0.02)
    base.update(kw)
    return TrainConfig(**base)


def test_nll_of_the_uniform_distribution_is_ln_10():
    log_probs = np.full((1, 10), math.log(0.1))
    assert nll_loss(log_probs, 3) == pytest.approx(LN_10, abs=1e-15)


def test_nll_rejects_out_of_range_labels():
    log_probs = np.log(np.full((1, 4), 0.25))
    with pytest.raises(DataError):
        nll_loss(log_probs, 4)
    with pytest.raises(DataError):
        nll_loss(log_probs, -1)


def test_metrics_two_class_oracle():
    # 3 true zeros predicted zero, 1 predicted one; 1 true one predicted
    # zero, 5 predicted one
    m = metrics_from_confusion(np.array([[3, 1], [1, 5]]))
    assert m.precision[0] == pytest.approx(0.75)
    assert m.recall[0] == pytest.approx(0.75)
    assert m.f1[0] == pytest.approx(0.75)
    assert m.precision[1] == pytest.approx(5 / 6)
    assert m.recall[1] == pytest.approx(5 / 6)
    assert m.f1[1] == pytest.approx(5 / 6)
    assert m.accuracy == pytest.approx(0.8)
    assert np.array_equal(m.support, [4, 6])


def test_metrics_absent_class_yields_nan_not_zero():
    m = metrics_from_confusion(np.array([[5, 0, 0], [2, 3, 0], [0, 0, 0]]))
    assert math.isnan(m.recall[2])          # class 2 never occurred
    assert math.isnan(m.precision[2])       # and was never predicted
    assert math.isnan(m.f1[2])
    assert m.recall[0] == pytest.approx(1.0)


def test_micro_precision_equals_accuracy():
    rng = np.random.default_rng(0)
    for trial in range(10):
        cm = rng.integers(0, 9, size=(4, 4))
        if cm.sum() == 0:
            continue
        m = metrics_from_confusion(cm)
        micro = np.trace(cm) / cm.sum()     # pooled TP over pooled total
        assert m.accuracy == pytest.approx(micro)


def test_metrics_rejects_bad_matrices():
    with pytest.raises(ConfigError):
        metrics_from_confusion(np.zeros((2, 3)))
    with pytest.raises(ConfigError):
        metrics_from_confusion(np.array([[1, -1], [0, 2]]))
    with pytest.raises(DataError):
        metrics_from_confusion(np.zeros((2, 2)))


def test_stratified_split_holds_out_per_class():
    labels = np.array([0] * 10 + [1] * 20)
    train_idx, val_idx = stratified_split(labels, 0.2,
                                          seeds.stream(0, seeds.SPLIT))
    assert np.array_equal(np.sort(np.concatenate([train_idx, val_idx])),
                          np.arange(30))
    assert (labels[val_idx] == 0).sum() == 2
    assert (labels[val_idx] == 1).sum() == 4
    assert np.array_equal(train_idx, np.sort(train_idx))
    assert np.array_equal(val_idx, np.sort(val_idx))


def test_stratified_split_never_empties_a_class():
    labels = np.array([0, 0, 1, 1])
    train_idx, val_idx = stratified_split(labels, 0.5,
                                          seeds.stream(1, seeds.SPLIT))
    # half of each class may go to validation, but never the whole class
    assert (labels[train_idx] == 0).any()
    assert (labels[train_idx] == 1).any()


def test_training_is_deterministic():
    data = make_synth_cache(["sphere", "cube"], per_class=4, count=32, seed=2)
    c1, h1 = train(tiny_cfg(), tiny_net(), data)
    c2, h2 = train(tiny_cfg(), tiny_net(), data)
    assert h1 == h2
    for a, b in zip(c1.params.flat_arrays(), c2.params.flat_arrays()):
        assert np.array_equal(a, b)


def test_resume_is_bit_exact():
    data = make_synth_cache(["sphere", "cube"], per_class=4, count=32, seed=3)
    full, hist_full = train(tiny_cfg(max_epochs=4), tiny_net(), data)
    half, _ = train(tiny_cfg(max_epochs=2), tiny_net(), data)
    resumed, hist_resumed = train(tiny_cfg(max_epochs=4), tiny_net(), data,
                                  resume=half)
    assert hist_resumed == hist_full
    for a, b in zip(full.params.flat_arrays(), resumed.params.flat_arrays()):
        assert np.array_equal(a, b)
    for a, b in zip(full.adam.m + full.adam.v, resumed.adam.m + resumed.adam.v):
        assert np.array_equal(a, b)
    assert full.adam.t == resumed.adam.t


def test_checkpoint_file_round_trip(tmp_path):
    data = make_synth_cache(["sphere", "cube"], per_class=4, count=32, seed=4)
    ckpt, _ = train(tiny_cfg(), tiny_net(), data)
    path = str(tmp_path / "ckpt.bin")
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.net_config == ckpt.net_config
    assert back.train_config == ckpt.train_config
    assert back.class_names == ckpt.class_names
    assert back.epoch == ckpt.epoch
    assert back.best_epoch == ckpt.best_epoch
    assert back.best_metric == ckpt.best_metric
    assert back.history == ckpt.history
    for a, b in zip(ckpt.params.flat_arrays(), back.params.flat_arrays()):
        assert np.array_equal(a, b)
    for a, b in zip(ckpt.best_params.flat_arrays(),
                    back.best_params.flat_arrays()):
        assert np.array_equal(a, b)
    assert back.adam.t == ckpt.adam.t
    for a, b in zip(ckpt.adam.m + ckpt.adam.v, back.adam.m + back.adam.v):
        assert np.array_equal(a, b)


def test_checkpoint_detects_corruption(tmp_path):
    data = make_synth_cache(["sphere", "cube"], per_class=2, count=16, seed=5)
    ckpt, _ = train(tiny_cfg(max_epochs=1, val_fraction=0.0), tiny_net(), data)
    path = str(tmp_path / "ckpt.bin")
    save_checkpoint(ckpt, path)
    raw = bytearray(open(path, "rb").read())
    raw[-20] ^= 0x01
    open(path, "wb").write(bytes(raw))
    with pytest.raises(DataError):
        load_checkpoint(path)


def test_resumed_run_reuses_its_own_checkpoint_config(tmp_path):
    # saving then resuming from disk behaves exactly like an in-memory resume
    data = make_synth_cache(["sphere", "cube"], per_class=4, count=32, seed=6)
    full, hist_full = train(tiny_cfg(max_epochs=3), tiny_net(), data)
    half, _ = train(tiny_cfg(max_epochs=1), tiny_net(), data)
    path = str(tmp_path / "half.bin")
    save_checkpoint(half, path)
    resumed, hist = train(tiny_cfg(max_epochs=3), tiny_net(), data,
                          resume=load_checkpoint(path))
    assert hist == hist_full
    for a, b in zip(full.params.flat_arrays(), resumed.params.flat_arrays()):
        assert np.array_equal(a, b)


def test_no_validation_split_disables_early_stop_and_tracks_final():
    data = make_synth_cache(["sphere", "cube"], per_class=3, count=24, seed=7)
    ckpt, history = train(tiny_cfg(max_epochs=2, val_fraction=0.0, patience=1),
                          tiny_net(), data)
    assert len(history) == 2
    assert all(math.isnan(row.val_accuracy) for row in history)
    assert ckpt.best_metric is None
    assert ckpt.best_epoch == 2             # final params stand in for best
    for a, b in zip(ckpt.params.flat_arrays(), ckpt.best_params.flat_arrays()):
        assert np.array_equal(a, b)


def test_early_stopping_on_a_plateau():
    # validation accuracy can only take a handful of values here, so with
    # patience 1 the run must stop long before max_epochs
    data = make_synth_cache(["sphere", "cube"], per_class=4, count=24, seed=8)
    ckpt, history = train(tiny_cfg(max_epochs=40, patience=1, val_fraction=0.25),
                          tiny_net(), data)
    assert len(history) < 40
    assert ckpt.epoch == len(history)


def test_non_finite_loss_is_reported_with_location():
    data = make_synth_cache(["sphere", "cube"], per_class=2, count=16, seed=9)
    data.samples[0].cloud[0, 0] = np.nan
    with pytest.raises(NumericError) as info:
        train(tiny_cfg(max_epochs=1, val_fraction=0.0, noise_sigma=0.0),
              tiny_net(), data)
    msg = str(info.value)
    assert "epoch 1" in msg and "batch" in msg


def test_train_validates_data_against_the_config():
    data = make_synth_cache(["sphere", "cube"], per_class=2, count=16, seed=10)
    with pytest.raises(ConfigError):
        train(tiny_cfg(), tiny_net(n_classes=3), data)   # class count mismatch
    wrong_dims = NetworkConfig(in_dim=6, layers=(LayerSpec(1, 1, 12),),
                               classifier_hidden=(8,), n_classes=2)
    with pytest.raises(ConfigError):
        train(tiny_cfg(), wrong_dims, data)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(lr=0.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(val_fraction=1.0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(noise_sigma=-0.1).validate()
    TrainConfig().validate()                # the defaults are legal


def test_evaluate_uses_best_params_and_counts_everything():
    data = make_synth_cache(["sphere", "cube"], per_class=4, count=32, seed=11)
    ckpt, _ = train(tiny_cfg(), tiny_net(), data)
    m = evaluate(ckpt, data)
    assert m.confusion.sum() == len(data.samples)
    assert 0.0 <= m.accuracy <= 1.0
    # evaluation is deterministic
    m2 = evaluate(ckpt, data)
    assert np.array_equal(m.confusion, m2.confusion)
