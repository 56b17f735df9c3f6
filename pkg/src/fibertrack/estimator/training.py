"""Mini-batch RMSprop training with the axial atan2 loss and early stopping."""
from __future__ import annotations

import copy
import csv
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigurationError
from . import network as net
from .optim import init_state, rmsprop_step


@dataclass(frozen=True)
class TrainConfig:
    """Training hyper-parameters.

    ``batch_size`` is per worker, so one step consumes
    ``batch_size * worker_count`` samples. With ``scale_lr`` the learning
    rate is multiplied by ``worker_count`` (linear scaling rule).
    """

    learning_rate: float = 6e-5
    l2: float = 1e-3
    dropout: float = 0.1
    batch_size: int = 40
    rmsprop_decay: float = 0.9
    early_stop_patience: int = 20
    rng_seed: int = 0
    worker_count: int = 1
    max_epochs: int = 1000
    max_steps: int | None = None
    time_limit: float | None = None
    scale_lr: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.worker_count < 1:
            raise ConfigurationError("worker_count must be >= 1")
        if self.learning_rate <= 0 or self.l2 < 0:
            raise ConfigurationError("learning_rate must be positive and l2 nonnegative")
        if not 0.0 <= self.rmsprop_decay < 1.0:
            raise ConfigurationError("rmsprop_decay must lie in [0, 1)")
        if self.early_stop_patience < 0:
            raise ConfigurationError("early_stop_patience must be >= 0")

    @property
    def effective_lr(self):
        return self.learning_rate * (self.worker_count if self.scale_lr else 1)


@dataclass
class EpochRecord:
    epoch: int
    train_error_rad: float
    val_error_rad: float
    steps: int


@dataclass
class TrainResult:
    params: dict
    history: list = field(default_factory=list)
    best_epoch: int = -1
    steps: int = 0
    stopped: str = ""

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_error_rad", "val_error_rad"])
            for r in self.history:
                w.writerow([r.epoch, repr(r.train_error_rad), repr(r.val_error_rad)])


def batch_gradient(params, config, views, targets, masks, l2, pool=None, workers=1):
    """Mean loss gradient of one global batch plus the L2 term.

    The batch is split into ``workers`` contiguous shards whose summed
    gradients are gathered and divided by the batch size (synchronous
    all-reduce).
    """
    n = len(targets)
    shards = np.array_split(np.arange(n), workers)

    def shard(idx):
        m = None if masks is None else masks[idx]
        return net.loss_gradient(params, config, views[idx], targets[idx], m)

    if pool is not None and workers > 1:
        results = list(pool.map(shard, shards))
    else:
        results = [shard(s) for s in shards]
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    errors = []
    for _, err, g, _ in results:
        for k in grads:
            grads[k] += g[k]
        errors.append(err)
    for k in grads:
        grads[k] /= n
    _, l2g = net.l2_penalty(params, l2)
    for k, g in l2g.items():
        grads[k] += g
    return grads, np.concatenate(errors)


def evaluate(params, config, dataset, batch=256):
    """Per-sample axial angular errors (radians) of the network on ``dataset``."""
    from ..losses import axial_angle
    pred = net.predict(params, config, dataset.views, batch)
    return axial_angle(dataset.targets, pred.astype(np.float64))


def train(train_set, val_set, net_config, config=TrainConfig(), params=None, log=None):
    """Train until early stopping, ``max_epochs`` or ``max_steps``.

    Each epoch visits a fresh permutation of ``train_set`` in global
    batches; validation mean angular error is recorded after every epoch
    and the best-scoring parameters are returned.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ConfigurationError("training and validation sets must be non-empty")
    if train_set.shells != net_config.shells:
        raise ConfigurationError(
            f"dataset has {train_set.shells} shells, network expects {net_config.shells}")
    dtype = np.dtype(config.dtype)
    rng = np.random.default_rng(config.rng_seed)
    if params is None:
        params = net.init_params(net_config, rng, dtype)
    state = init_state(params)
    views = train_set.views.astype(dtype, copy=False)
    targets = train_set.targets
    global_batch = config.batch_size * config.worker_count
    lr = config.effective_lr
    result = TrainResult(copy.deepcopy(params))
    best = np.inf
    stale = 0
    steps = 0
    t0 = time.perf_counter()
    pool = ThreadPoolExecutor(config.worker_count) if config.worker_count > 1 else None
    try:
        for epoch in range(config.max_epochs):
            order = rng.permutation(len(train_set))
            errs = []
            for start in range(0, len(order), global_batch):
                idx = order[start:start + global_batch]
                masks = None
                if config.dropout > 0:
                    masks = net.make_dropout_masks(net_config, len(idx), config.dropout, rng, dtype)
                grads, err = batch_gradient(params, net_config, views[idx], targets[idx], masks,
                                            config.l2, pool, config.worker_count)
                rmsprop_step(params, grads, state, lr, config.rmsprop_decay)
                errs.append(err)
                steps += 1
                if config.max_steps is not None and steps >= config.max_steps:
                    break
                if config.time_limit is not None and time.perf_counter() - t0 > config.time_limit:
                    break
            val = float(np.mean(evaluate(params, net_config, val_set)))
            rec = EpochRecord(epoch, float(np.mean(np.concatenate(errs))), val, steps)
            result.history.append(rec)
            if log is not None:
                log(rec)
            if val < best:
                best, stale = val, 0
                result.params = copy.deepcopy(params)
                result.best_epoch = epoch
            else:
                stale += 1
                if stale > config.early_stop_patience:
                    result.stopped = "patience"
                    break
            if config.max_steps is not None and steps >= config.max_steps:
                result.stopped = "max_steps"
                break
            if config.time_limit is not None and time.perf_counter() - t0 > config.time_limit:
                result.stopped = "time_limit"
                break
        else:
            result.stopped = "max_epochs"
    finally:
        if pool is not None:
            pool.shutdown()
    result.steps = steps
    return result
