"""Mini-batch training driver: epoch loop, gate-activity accounting,
collapse detection, adaptive learning-rate resets, metrics emission.

Metrics CSV schema (one row per block per epoch, plus one 'net' summary row
per epoch):

    epoch,block,gate_off_fraction,max_abs_response,wmin,wp7,wp50,wp93,wmax,
    train_loss,val_error,lr,discard_ratio

Block rows fill the gate and weight-percentile columns (gate columns stay
empty for ungated transition blocks); the summary row fills the last four
columns. A block is marked collapsed when its gate was off for the full
collapse-threshold fraction of training samples for `confirm_epochs`
consecutive epochs; collapsed blocks keep receiving weight-decay updates,
their gate is pinned shut, and the learning-rate policy resets at most once
per epoch no matter how many blocks collapsed in it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from .data import AugmentConfig, Dataset, iter_batches
from .errors import NumericFaultError
from .model import BlockState, EpsResNet, total_loss
from .optim import LrPolicy, Sgd, advance_epoch, lr_for_epoch, on_block_discarded
from . import tensor as T

METRICS_HEADER = ("epoch,block,gate_off_fraction,max_abs_response,"
                  "wmin,wp7,wp50,wp93,wmax,train_loss,val_error,lr,discard_ratio")


@dataclass
class CollapsePolicy:
    full_epoch_fraction_threshold: float = 1.0
    confirm_epochs: int = 2
    zero_tolerance: float = 1e-4

    def __post_init__(self):
        if not (0 < self.full_epoch_fraction_threshold <= 1.0):
            raise ValueError("threshold must be in (0, 1]")
        if self.confirm_epochs < 1:
            raise ValueError("confirm_epochs must be >= 1")


@dataclass
class GateRecord:
    block_index: int
    epoch: int
    gate_off_fraction: float
    max_abs_response: float


@dataclass
class WeightStats:
    block_index: int
    epoch: int
    wmin: float
    p7: float
    p50: float
    p93: float
    wmax: float


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_error: float
    lr: float
    discard_ratio: float
    gate_records: list[GateRecord] = field(default_factory=list)
    weight_stats: list[WeightStats] = field(default_factory=list)
    newly_collapsed: list[int] = field(default_factory=list)


@dataclass
class TrainResult:
    logs: list[EpochLog]
    lr_policy: LrPolicy
    metrics_path: str | None
    checkpoint_path: str | None


def _fmt(x) -> str:
    if x is None:
        return ""
    return f"{x:.8g}"


def evaluate(model: EpsResNet, dataset: Dataset, batch_size: int = 256) -> float:
    """Top-1 error rate in eval mode (running BN statistics)."""
    wrong = 0
    with T.no_grad():
        for start in range(0, len(dataset), batch_size):
            images = dataset.images[start:start + batch_size]
            labels = dataset.labels[start:start + batch_size]
            logits = model.forward(images, training=False).logits.data
            wrong += int(np.sum(np.argmax(logits, axis=1) != labels))
    return wrong / len(dataset)


def detect_collapse(model: EpsResNet, policy: CollapsePolicy) -> list[int]:
    """Blocks whose gate-off fraction held at the threshold long enough."""
    newly = []
    for blk in model.prunable_blocks():
        status = model.statuses[blk.global_index]
        if status.state != BlockState.ACTIVE:
            continue
        hist = status.gate_off_history
        if len(hist) < policy.confirm_epochs:
            continue
        window = hist[-policy.confirm_epochs:]
        if all(f >= policy.full_epoch_fraction_threshold for f in window):
            newly.append(blk.global_index)
    return newly


def _weight_percentiles(model: EpsResNet, block_index: int) -> tuple:
    names = model.block_param_names(block_index)
    allw = np.concatenate([model.params[n].data.reshape(-1) for n in names])
    p7, p50, p93 = np.percentile(allw, [7, 50, 93])
    return float(allw.min()), float(p7), float(p50), float(p93), float(allw.max())


def _discard_ratio(model: EpsResNet) -> float:
    prunable = model.prunable_blocks()
    if not prunable:
        return 0.0
    done = sum(1 for b in prunable
               if model.statuses[b.global_index].state != BlockState.ACTIVE)
    return done / len(prunable)


def training_state_tensors(model: EpsResNet, optimizer: Sgd) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for name, p in model.params.items():
        tensors[name] = p.data
    tensors.update(model.bn_stats)
    for name, v in optimizer.velocity.items():
        tensors[f"opt.velocity.{name}"] = v
    return tensors


def train(model: EpsResNet, train_set: Dataset, val_set: Dataset,
          optimizer: Sgd, lr_policy: LrPolicy, collapse_policy: CollapsePolicy,
          epochs: int, seed: int, batch_size: int = 128,
          augment_cfg: AugmentConfig | None = None,
          out_dir: str | None = None, start_epoch: int = 0,
          metadata_extra: dict[str, str] | None = None,
          quiet: bool = True) -> TrainResult:
    """Run epochs [start_epoch, epochs); append metrics; checkpoint per epoch.

    All randomness is derived from (seed, epoch, batch index), so resuming
    from the per-epoch checkpoint reproduces the uninterrupted run exactly.
    On a numeric fault the last completed epoch's checkpoint is retained.
    """
    metrics_path = checkpoint_path = None
    metrics_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, "metrics.csv")
        checkpoint_path = os.path.join(out_dir, "checkpoint.eres")
        mode = "a" if start_epoch > 0 and os.path.exists(metrics_path) else "w"
        metrics_fh = open(metrics_path, mode)
        if mode == "w":
            metrics_fh.write(METRICS_HEADER + "\n")

    logs: list[EpochLog] = []
    try:
        for epoch in range(start_epoch, epochs):
            lr = lr_for_epoch(lr_policy, epoch)
            optimizer.lr = lr
            loss_sum, sample_count = 0.0, 0
            off_counts: dict[int, int] = {}
            max_resp: dict[int, float] = {}
            for images, labels in iter_batches(train_set, batch_size, seed, epoch,
                                               augment_cfg):
                out = model.forward(images, training=True)
                loss = total_loss(out.logits, out.side_logits, labels, model,
                                  optimizer.weight_decay,
                                  model.spec.side_coefficient, optimizer.decay_bn)
                loss.backward()
                optimizer.step()
                optimizer.zero_grad()
                n = len(labels)
                loss_sum += loss.item() * n
                sample_count += n
                for tr in out.gates:
                    off_counts[tr.block_index] = off_counts.get(tr.block_index, 0) \
                        + int(np.sum(tr.t == 0))
                    prev = max_resp.get(tr.block_index, float("-inf"))
                    if not np.isnan(tr.max_abs):
                        max_resp[tr.block_index] = max(prev, tr.max_abs)

            log = EpochLog(epoch=epoch, train_loss=loss_sum / max(sample_count, 1),
                          val_error=0.0, lr=lr, discard_ratio=0.0)
            for blk in model.blocks:
                status = model.statuses[blk.global_index]
                if blk.gated:
                    frac = off_counts.get(blk.global_index, 0) / max(sample_count, 1)
                    resp = max_resp.get(blk.global_index, float("nan"))
                    status.gate_off_history.append(frac)
                    log.gate_records.append(GateRecord(blk.global_index, epoch, frac, resp))
                wmin, p7, p50, p93, wmax = _weight_percentiles(model, blk.global_index)
                log.weight_stats.append(WeightStats(blk.global_index, epoch,
                                                    wmin, p7, p50, p93, wmax))

            log.newly_collapsed = detect_collapse(model, collapse_policy)
            for gi in log.newly_collapsed:
                model.statuses[gi].collapse(epoch)
            if log.newly_collapsed:
                lr_policy = on_block_discarded(lr_policy)
            elif lr_policy.phase == "adaptive":
                lr_policy = advance_epoch(lr_policy)

            log.discard_ratio = _discard_ratio(model)
            log.val_error = evaluate(model, val_set)
            logs.append(log)
            if not quiet:
                print(f"epoch {epoch}: loss {log.train_loss:.4f} "
                      f"val_err {log.val_error:.4f} lr {lr:g} "
                      f"discard {log.discard_ratio:.3f}")

            if metrics_fh is not None:
                _write_epoch_rows(metrics_fh, model, log)
                metrics_fh.flush()
            if checkpoint_path is not None:
                meta = dict(metadata_extra or {})
                meta.update(run_metadata(model, lr_policy, epoch, seed))
                ckpt.save_checkpoint(checkpoint_path,
                                     training_state_tensors(model, optimizer), meta)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return TrainResult(logs, lr_policy, metrics_path, checkpoint_path)


def _write_epoch_rows(fh, model: EpsResNet, log: EpochLog) -> None:
    gate_by_block = {g.block_index: g for g in log.gate_records}
    stats_by_block = {w.block_index: w for w in log.weight_stats}
    for blk in model.blocks:
        g = gate_by_block.get(blk.global_index)
        w = stats_by_block[blk.global_index]
        fh.write(",".join([
            str(log.epoch), blk.name,
            _fmt(g.gate_off_fraction) if g else "",
            _fmt(g.max_abs_response) if g else "",
            _fmt(w.wmin), _fmt(w.p7), _fmt(w.p50), _fmt(w.p93), _fmt(w.wmax),
            "", "", "", ""]) + "\n")
    fh.write(",".join([
        str(log.epoch), "net", "", "", "", "", "", "", "",
        _fmt(log.train_loss), _fmt(log.val_error), _fmt(log.lr),
        _fmt(log.discard_ratio)]) + "\n")


def run_metadata(model: EpsResNet, lr_policy: LrPolicy, epoch: int,
                 seed: int) -> dict[str, str]:
    spec = model.spec
    meta = {
        "spec.blocks_per_group": str(spec.blocks_per_group),
        "spec.base_width": str(spec.base_width),
        "spec.classes": str(spec.classes),
        "spec.epsilon": "none" if spec.epsilon is None else repr(float(spec.epsilon)),
        "spec.gate_realization": spec.gate_realization,
        "spec.big_L": repr(float(spec.big_L)),
        "spec.side_supervision": str(int(spec.side_supervision)),
        "spec.side_coefficient": repr(float(spec.side_coefficient)),
        "spec.bn_momentum": repr(float(spec.bn_momentum)),
        "spec.bn_eps": repr(float(spec.bn_eps)),
        "spec.dtype": "f64" if model.dtype == np.float64 else "f32",
        "train.epoch": str(epoch),
        "train.seed": str(seed),
        "lr.base_lr": repr(float(lr_policy.base_lr)),
        "lr.standard_milestones": ",".join(str(m) for m in lr_policy.standard_milestones),
        "lr.adaptive_milestones": ",".join(str(m) for m in lr_policy.adaptive_milestones),
        "lr.phase": lr_policy.phase,
        "lr.epochs_since_reset": str(lr_policy.epochs_since_reset),
        "blocks": ";".join(_block_entry(model, b) for b in model.blocks),
    }
    for blk in model.blocks:
        hist = model.statuses[blk.global_index].gate_off_history
        meta[f"history.{blk.name}"] = ",".join(repr(float(h)) for h in hist)
    return meta


def _block_entry(model: EpsResNet, blk) -> str:
    status = model.statuses[blk.global_index]
    ce = -1 if status.collapsed_epoch is None else status.collapsed_epoch
    return (f"{blk.group}:{blk.local_index}:{blk.in_channels}:{blk.out_channels}:"
            f"{blk.stride}:{int(blk.gated)}:{status.state.value}:{ce}")
