"""Glue between a RunConfig and the library: dataset preparation, model and
optimizer construction, resume handling, run directories, epsilon sweeps.
"""

from __future__ import annotations

import os
import warnings
from contextlib import contextmanager

import numpy as np

from .config import RunConfig, serialize
from .data import AugmentConfig, Dataset, load_cifar10, synthetic_dataset
from .errors import ConfigError, EpsResNetError
from .model import EpsResNet, NetworkSpec, build_network
from .optim import LrPolicy, Sgd
from .restore import load_model, lr_policy_from_metadata
from .train import CollapsePolicy, TrainResult, train


@contextmanager
def run_dir_lock(out_dir: str):
    """One writer per run directory; stale locks must be removed by hand."""
    os.makedirs(out_dir, exist_ok=True)
    lock_path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"run directory {out_dir} is locked by another writer "
                          f"(remove {lock_path} if that run is dead)")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        if os.path.exists(lock_path):
            os.remove(lock_path)


def prepare_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "cifar10":
        train_set, test_set = load_cifar10(
            cfg.data_dir,
            train_limit=cfg.train_size or None,
            test_limit=cfg.val_size or None)
        if cfg.train_size:
            train_set = train_set.subset(cfg.train_size)
        if cfg.val_size:
            test_set = test_set.subset(cfg.val_size)
        return train_set, test_set
    n_train = cfg.train_size or 5000
    n_val = cfg.val_size or 1000
    full = synthetic_dataset(cfg.dataset, n_train + n_val, cfg.data_seed,
                             classes=cfg.classes)
    train_set = Dataset(full.images[:n_train], full.labels[:n_train],
                        full.mean, full.std, full.classes)
    val_set = Dataset(full.images[n_train:], full.labels[n_train:],
                      full.mean, full.std, full.classes)
    return train_set, val_set


def network_spec(cfg: RunConfig, classes: int | None = None) -> NetworkSpec:
    return NetworkSpec(
        blocks_per_group=cfg.blocks_per_group,
        base_width=cfg.base_width,
        classes=classes if classes is not None else cfg.classes,
        epsilon=cfg.epsilon,
        gate_realization=cfg.gate_realization,
        big_L=cfg.big_L,
        side_supervision=cfg.side_supervision,
        side_coefficient=cfg.side_coefficient,
        bn_momentum=cfg.bn_momentum,
        bn_eps=cfg.bn_eps,
        dtype=cfg.dtype)


def run_training(cfg: RunConfig, resume: str | None = None,
                 quiet: bool = True) -> TrainResult:
    """Train per config inside cfg.out_dir (metrics, checkpoint, config)."""
    cfg.validate()
    if not cfg.out_dir:
        raise ConfigError("out_dir is required for training runs")
    train_set, val_set = prepare_data(cfg)
    start_epoch = 0
    with run_dir_lock(cfg.out_dir):
        with open(os.path.join(cfg.out_dir, "config.txt"), "w") as fh:
            fh.write(serialize(cfg))
        if resume is not None:
            model, velocity, meta = load_model(resume,
                                               execute_collapsed=cfg.execute_collapsed)
            lr_policy = lr_policy_from_metadata(meta)
            start_epoch = int(meta["train.epoch"]) + 1
            optimizer = Sgd(model.params, lr=cfg.base_lr, momentum=cfg.momentum,
                            weight_decay=cfg.weight_decay, decay_bn=cfg.decay_bn)
            for name, v in velocity.items():
                optimizer.velocity[name][...] = v
        else:
            model = build_network(network_spec(cfg, train_set.classes), cfg.seed,
                                  dtype=cfg.dtype,
                                  execute_collapsed=cfg.execute_collapsed)
            lr_policy = LrPolicy(base_lr=cfg.base_lr,
                                 standard_milestones=cfg.standard_milestones,
                                 adaptive_milestones=cfg.adaptive_milestones)
            optimizer = Sgd(model.params, lr=cfg.base_lr, momentum=cfg.momentum,
                            weight_decay=cfg.weight_decay, decay_bn=cfg.decay_bn)
        collapse = CollapsePolicy(cfg.collapse_threshold, cfg.confirm_epochs,
                                  cfg.zero_tolerance)
        augment_cfg = AugmentConfig(pad=cfg.pad, hflip_prob=cfg.hflip_prob) \
            if cfg.augment else None
        meta_extra = {
            "data.mean": ",".join(repr(float(m)) for m in train_set.mean),
            "data.std": ",".join(repr(float(s)) for s in train_set.std),
        }
        return train(model, train_set, val_set, optimizer, lr_policy, collapse,
                     epochs=cfg.epochs, seed=cfg.seed, batch_size=cfg.batch_size,
                     augment_cfg=augment_cfg, out_dir=cfg.out_dir,
                     start_epoch=start_epoch, metadata_extra=meta_extra,
                     quiet=quiet)


SWEEP_HEADER = "epsilon,discard_ratio,val_error"


def run_sweep(cfg: RunConfig, eps_list: list[float],
              quiet: bool = True) -> tuple[str, list[tuple[float, float, float]]]:
    """One training run per epsilon, shared seed; returns (csv path, rows)."""
    if not cfg.out_dir:
        raise ConfigError("out_dir is required for sweeps")
    unique: list[float] = []
    for e in eps_list:
        if e in unique:
            warnings.warn(f"duplicate epsilon {e} dropped from sweep")
        else:
            unique.append(e)
    if len(unique) < 2:
        raise ConfigError("an epsilon sweep needs at least 2 distinct values")
    rows = []
    os.makedirs(cfg.out_dir, exist_ok=True)
    for eps in unique:
        from .config import apply_overrides
        sub = apply_overrides(cfg, {
            "epsilon": repr(eps),
            "out_dir": os.path.join(cfg.out_dir, f"eps_{eps:g}")})
        result = run_training(sub, quiet=quiet)
        final = result.logs[-1]
        rows.append((eps, final.discard_ratio, final.val_error))
    csv_path = os.path.join(cfg.out_dir, "sweep.csv")
    with open(csv_path, "w") as fh:
        fh.write(SWEEP_HEADER + "\n")
        for eps, ratio, err in rows:
            fh.write(f"{eps:.8g},{ratio:.8g},{err:.8g}\n")
    return csv_path, rows
