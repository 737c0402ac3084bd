"""Training loop, checkpointing, and evaluation metrics.

Every random decision derives from the run seed through counter-keyed
streams (shuffling, noise, clustering, the validation split), so two runs
with one seed produce bit-identical histories and a checkpoint resume
continues exactly where the interrupted run would have gone.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import seeds
from .binio import Reader, Writer
from .dataio import DatasetCache, add_noise
from .errors import ConfigError, DataError, NumericError
from .network import NetworkConfig, NetworkParams, build_network, network_forward_on_tape
from .nn import AdamState, Binding, adam_step

CKPT_MAGIC = b"PCLCKPT1"
CKPT_VERSION = 1


def nll_loss(log_probs, label: int) -> float:
    """Negative log-likelihood of the true class, given log probabilities."""
    log_probs = np.asarray(log_probs, dtype=np.float64).reshape(-1)
    if not 0 <= label < log_probs.shape[0]:
        raise DataError(
            f"label {label} out of range for {log_probs.shape[0]} classes")
    return float(-log_probs[label])


def _nll_node(binding, log_probs_node, label: int):
    n = log_probs_node.value.shape[1]
    if not 0 <= label < n:
        raise DataError(f"label {label} out of range for {n} classes")
    onehot = np.zeros((1, n))
    onehot[0, label] = 1.0
    picked = ad.mul(log_probs_node, ad.constant(binding.tape, onehot))
    return ad.scale(ad.sum_all(picked), -1.0)


# ---- metrics ---------------------------------------------------------------

@dataclass
class Metrics:
    confusion: np.ndarray      # (K, K) int64, rows = true class, cols = predicted
    accuracy: float
    precision: np.ndarray      # (K,), NaN where the class was never predicted
    recall: np.ndarray         # (K,), NaN where the class never occurred
    f1: np.ndarray             # (K,), NaN where undefined
    support: np.ndarray        # (K,) true occurrences per class
    class_names: list[str]


def metrics_from_confusion(confusion, class_names=None) -> Metrics:
    confusion = np.asarray(confusion)
    if confusion.ndim != 2 or confusion.shape[0] != confusion.shape[1]:
        raise ConfigError(f"confusion matrix must be square, got {confusion.shape}")
    if (confusion < 0).any():
        raise ConfigError("confusion matrix has negative counts")
    total = int(confusion.sum())
    if total == 0:
        raise DataError("confusion matrix is empty")
    k = confusion.shape[0]
    if class_names is None:
        class_names = [str(i) for i in range(k)]
    if len(class_names) != k:
        raise ConfigError("class name count does not match the matrix")

    tp = np.diag(confusion).astype(np.float64)
    predicted = confusion.sum(axis=0).astype(np.float64)
    actual = confusion.sum(axis=1).astype(np.float64)
    precision = np.where(predicted > 0, tp / np.where(predicted > 0, predicted, 1.0), np.nan)
    recall = np.where(actual > 0, tp / np.where(actual > 0, actual, 1.0), np.nan)
    pr = precision + recall
    defined = np.nan_to_num(pr, nan=0.0) > 0
    f1 = np.where(defined,
                  2.0 * precision * recall / np.where(defined, pr, 1.0),
                  np.nan)
    return Metrics(
        confusion=confusion.astype(np.int64),
        accuracy=float(tp.sum() / total),
        precision=precision,
        recall=recall,
        f1=f1,
        support=confusion.sum(axis=1).astype(np.int64),
        class_names=list(class_names),
    )


# ---- configuration and checkpoints ----------------------------------------

@dataclass
class TrainConfig:
    seed: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 20
    val_fraction: float = 0.1
    noise_sigma: float = 0.02

    def validate(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(
                f"val_fraction must be in [0, 1), got {self.val_fraction}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass
class HistoryRow:
    epoch: int                 # 1-based
    train_loss: float
    val_accuracy: float        # NaN when no validation split exists

    def __eq__(self, other):
        if not isinstance(other, HistoryRow):
            return NotImplemented
        same_acc = (self.val_accuracy == other.val_accuracy
                    or (math.isnan(self.val_accuracy)
                        and math.isnan(other.val_accuracy)))
        return (self.epoch == other.epoch
                and self.train_loss == other.train_loss
                and same_acc)


@dataclass
class Checkpoint:
    """Complete training state.

    `params` is the live state for resuming; `best_params` is the
    best-validation snapshot that evaluation should use. All stream
    randomness is counter-based, so `seed` plus `epoch` fully determine
    the RNG state.
    """

    net_config: NetworkConfig
    train_config: TrainConfig
    class_names: list[str]
    params: NetworkParams
    best_params: NetworkParams
    adam: AdamState
    epoch: int                 # completed epochs
    best_metric: float | None  # best validation accuracy, None without a split
    best_epoch: int
    epochs_since_best: int
    history: list[HistoryRow] = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.train_config.seed


def save_checkpoint(ckpt: Checkpoint, path):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    header = {
        "net": ckpt.net_config.to_dict(),
        "train": asdict(ckpt.train_config),
        "class_names": ckpt.class_names,
        "epoch": ckpt.epoch,
        "best_metric": ckpt.best_metric,
        "best_epoch": ckpt.best_epoch,
        "epochs_since_best": ckpt.epochs_since_best,
        "history": [[h.epoch, h.train_loss,
                     None if math.isnan(h.val_accuracy) else h.val_accuracy]
                    for h in ckpt.history],
    }
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            w = Writer(fh, CKPT_MAGIC, CKPT_VERSION)
            w.text(json.dumps(header))
            arrays = ckpt.params.flat_arrays()
            w.u32(len(arrays))
            for a in arrays:
                w.array(a)
            for a in ckpt.best_params.flat_arrays():
                w.array(a)
            w.u64(ckpt.adam.t)
            for a in ckpt.adam.m:
                w.array(a)
            for a in ckpt.adam.v:
                w.array(a)
            w.finish()
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    r = Reader(raw, CKPT_MAGIC, CKPT_VERSION, label="checkpoint")
    header = json.loads(r.text())
    net_config = NetworkConfig.from_dict(header["net"])
    train_config = TrainConfig(**header["train"])

    def read_params():
        params = build_network(net_config, seed=0)
        for dst in params.flat_arrays():
            src = r.array()
            if src.shape != dst.shape:
                raise DataError(
                    f"checkpoint: array shape {src.shape} does not match "
                    f"the declared architecture ({dst.shape})")
            dst[...] = src
        return params

    count = r.u32()
    probe = build_network(net_config, seed=0)
    if count != len(probe.flat_arrays()):
        raise DataError("checkpoint: parameter count does not match the architecture")
    params = read_params()
    best_params = read_params()
    t = r.u64()
    adam = AdamState(m=[r.array() for _ in range(count)],
                     v=[r.array() for _ in range(count)], t=int(t))
    r.done()

    history = [HistoryRow(epoch=int(e), train_loss=float(l),
                          val_accuracy=float("nan") if a is None else float(a))
               for e, l, a in header["history"]]
    return Checkpoint(
        net_config=net_config, train_config=train_config,
        class_names=list(header["class_names"]),
        params=params, best_params=best_params, adam=adam,
        epoch=int(header["epoch"]),
        best_metric=header["best_metric"],
        best_epoch=int(header["best_epoch"]),
        epochs_since_best=int(header["epochs_since_best"]),
        history=history,
    )


# ---- the loop --------------------------------------------------------------

def stratified_split(labels, fraction: float, rng):
    """Per-class holdout. Returns (train_idx, val_idx), both sorted."""
    labels = np.asarray(labels)
    val = []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        n_val = int(round(fraction * members.size))
        n_val = min(n_val, members.size - 1)  # never orphan a class entirely
        if n_val > 0:
            picked = rng.permutation(members)[:n_val]
            val.append(picked)
    val_idx = np.sort(np.concatenate(val)) if val else np.array([], dtype=np.intp)
    mask = np.ones(labels.size, dtype=bool)
    mask[val_idx] = False
    return np.flatnonzero(mask), val_idx


def _forward_loss(binding, params, cloud, label, seed, stream_key):
    logp, _ = network_forward_on_tape(binding, params, cloud, seed,
                                      stream_key=stream_key)
    return _nll_node(binding, logp, label), logp


def _predict(params, cloud, seed, uid):
    binding = Binding(ad.Tape())
    logp, _ = network_forward_on_tape(binding, params, cloud, seed,
                                      stream_key=(seeds.EVAL, uid))
    return int(np.argmax(logp.value[0])), logp.value[0]


def train(train_cfg: TrainConfig, net_cfg: NetworkConfig, data: DatasetCache,
          resume: Checkpoint | None = None, log=None):
    """Fit a network on `data`. Returns (Checkpoint, history).

    Mini-batches are reshuffled every epoch; gradients are averaged over
    each batch in sample order; fresh Gaussian noise augments the spatial
    channels each epoch. A stratified validation split drives early
    stopping (patience epochs without a new best accuracy), and the
    best-validation parameters ride along in the returned checkpoint.
    With val_fraction=0 the loop runs to max_epochs and the final
    parameters double as the best ones.
    """
    train_cfg.validate()
    net_cfg.validate()
    if not data.samples:
        raise DataError("training data is empty")
    if data.dims != net_cfg.in_dim:
        raise ConfigError(
            f"network expects {net_cfg.in_dim}-channel clouds but the "
            f"dataset provides {data.dims}")
    if len(data.class_names) != net_cfg.n_classes:
        raise ConfigError(
            f"network has {net_cfg.n_classes} classes but the dataset "
            f"defines {len(data.class_names)}")
    seed = train_cfg.seed

    if resume is not None:
        params = resume.params
        adam = resume.adam
        best_params = resume.best_params
        best_metric = resume.best_metric
        best_epoch = resume.best_epoch
        epochs_since_best = resume.epochs_since_best
        history = list(resume.history)
        start_epoch = resume.epoch
    else:
        params = build_network(net_cfg, seed)
        adam = AdamState.for_params(params.flat_arrays())
        best_params = params.clone()
        best_metric = None
        best_epoch = 0
        epochs_since_best = 0
        history = []
        start_epoch = 0

    flat = params.flat_arrays()
    names = params.array_names()
    labels = [s.label for s in data.samples]
    train_idx, val_idx = stratified_split(
        labels, train_cfg.val_fraction, seeds.stream(seed, seeds.SPLIT))
    if train_idx.size == 0:
        raise DataError("no training samples left after the validation split")

    completed = start_epoch
    for epoch in range(start_epoch, train_cfg.max_epochs):
        order = seeds.stream(seed, seeds.SHUFFLE, epoch).permutation(train_idx)
        loss_sum = 0.0
        for lo in range(0, order.size, train_cfg.batch_size):
            batch = order[lo:lo + train_cfg.batch_size]
            grad_acc = [np.zeros_like(p) for p in flat]
            for uid in batch:
                sample = data.samples[uid]
                cloud = sample.cloud
                if train_cfg.noise_sigma > 0:
                    cloud = add_noise(cloud, train_cfg.noise_sigma,
                                      seeds.stream(seed, seeds.NOISE, epoch, int(uid)))
                binding = Binding(ad.Tape())
                try:
                    loss_node, _ = _forward_loss(
                        binding, params, cloud, sample.label, seed,
                        stream_key=(seeds.CLUSTER, epoch, int(uid)))
                except NumericError as exc:
                    # guards deeper in the stack know what broke; the loop
                    # knows where
                    raise NumericError(
                        f"{exc} (epoch {epoch + 1}, batch "
                        f"{lo // train_cfg.batch_size + 1}, "
                        f"sample {sample.source})") from exc
                loss = float(loss_node.value)
                if not math.isfinite(loss):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch + 1}, batch "
                        f"{lo // train_cfg.batch_size + 1}, sample {sample.source}")
                grads = ad.backward(binding.tape, loss_node, binding.nodes_for(flat))
                for acc, g in zip(grad_acc, grads):
                    acc += g
                loss_sum += loss
            inv = 1.0 / batch.size
            for i, g in enumerate(grad_acc):
                g *= inv
                if not np.isfinite(g).all():
                    raise NumericError(
                        f"non-finite gradient at epoch {epoch + 1}, batch "
                        f"{lo // train_cfg.batch_size + 1}, parameter {names[i]}")
            adam_step(adam, flat, grad_acc, lr=train_cfg.lr,
                      beta1=train_cfg.beta1, beta2=train_cfg.beta2)

        train_loss = loss_sum / order.size
        if val_idx.size:
            correct = 0
            for uid in val_idx:
                sample = data.samples[uid]
                pred, _ = _predict(params, sample.cloud, seed, int(uid))
                correct += int(pred == sample.label)
            val_acc = correct / val_idx.size
        else:
            val_acc = float("nan")
        history.append(HistoryRow(epoch=epoch + 1, train_loss=train_loss,
                                  val_accuracy=val_acc))
        completed = epoch + 1
        if log:
            shown = "-" if math.isnan(val_acc) else f"{val_acc:.4f}"
            log(f"epoch {epoch + 1}/{train_cfg.max_epochs}  "
                f"loss {train_loss:.4f}  val_acc {shown}")

        if val_idx.size:
            if best_metric is None or val_acc > best_metric:
                best_metric = val_acc
                best_epoch = epoch + 1
                best_params = params.clone()
                epochs_since_best = 0
            else:
                epochs_since_best += 1
            if epochs_since_best >= train_cfg.patience:
                break

    if not val_idx.size:
        best_params = params.clone()
        best_epoch = completed

    ckpt = Checkpoint(
        net_config=net_cfg, train_config=train_cfg,
        class_names=list(data.class_names),
        params=params, best_params=best_params, adam=adam,
        epoch=completed, best_metric=best_metric, best_epoch=best_epoch,
        epochs_since_best=epochs_since_best, history=history,
    )
    return ckpt, history


def evaluate(ckpt: Checkpoint, data: DatasetCache) -> Metrics:
    """Score the checkpoint's best-validation parameters on a dataset."""
    if not data.samples:
        raise DataError("evaluation data is empty")
    if data.dims != ckpt.net_config.in_dim:
        raise ConfigError(
            f"checkpoint expects {ckpt.net_config.in_dim}-channel clouds, "
            f"dataset provides {data.dims}")
    if len(data.class_names) != len(ckpt.class_names):
        raise ConfigError(
            "dataset class count does not match the checkpoint")
    k = len(ckpt.class_names)
    confusion = np.zeros((k, k), dtype=np.int64)
    for uid, sample in enumerate(data.samples):
        pred, _ = _predict(ckpt.best_params, sample.cloud, ckpt.seed, uid)
        confusion[sample.label, pred] += 1
    return metrics_from_confusion(confusion, ckpt.class_names)
