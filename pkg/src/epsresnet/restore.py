"""Rebuild a model (and optimizer state) from a checkpoint archive."""

from __future__ import annotations

import numpy as np

from .checkpoint import load_checkpoint
from .errors import CheckpointError
from .model import (BlockSpec, BlockState, BlockStatus, EpsResNet, NetworkSpec)
from .optim import LrPolicy
from .tensor import Tensor


def _parse_blocks(raw: str) -> tuple[list[BlockSpec], dict[int, BlockStatus]]:
    blocks, statuses = [], {}
    gi = 0
    for entry in raw.split(";"):
        parts = entry.split(":")
        if len(parts) != 8:
            raise CheckpointError(f"malformed block entry {entry!r}")
        g, local, in_c, out_c, stride, gated, state, ce = parts
        blocks.append(BlockSpec(global_index=gi, group=int(g), local_index=int(local),
                                in_channels=int(in_c), out_channels=int(out_c),
                                stride=int(stride), gated=bool(int(gated))))
        status = BlockStatus(state=BlockState(state),
                             collapsed_epoch=None if int(ce) < 0 else int(ce))
        statuses[gi] = status
        gi += 1
    return blocks, statuses


def spec_from_metadata(meta: dict[str, str]) -> NetworkSpec:
    eps_raw = meta["spec.epsilon"]
    return NetworkSpec(
        blocks_per_group=int(meta["spec.blocks_per_group"]),
        base_width=int(meta["spec.base_width"]),
        classes=int(meta["spec.classes"]),
        epsilon=None if eps_raw == "none" else float(eps_raw),
        gate_realization=meta["spec.gate_realization"],
        big_L=float(meta["spec.big_L"]),
        side_supervision=bool(int(meta["spec.side_supervision"])),
        side_coefficient=float(meta["spec.side_coefficient"]),
        bn_momentum=float(meta["spec.bn_momentum"]),
        bn_eps=float(meta["spec.bn_eps"]),
        dtype=meta["spec.dtype"],
    )


def lr_policy_from_metadata(meta: dict[str, str]) -> LrPolicy:
    def _ms(raw: str) -> tuple[int, ...]:
        return tuple(int(x) for x in raw.split(",") if x)
    return LrPolicy(base_lr=float(meta["lr.base_lr"]),
                    standard_milestones=_ms(meta["lr.standard_milestones"]),
                    adaptive_milestones=_ms(meta["lr.adaptive_milestones"]),
                    phase=meta["lr.phase"],
                    epochs_since_reset=int(meta["lr.epochs_since_reset"]))


def model_from_archive(tensors: dict[str, np.ndarray], meta: dict[str, str],
                       execute_collapsed: bool = False
                       ) -> tuple[EpsResNet, dict[str, np.ndarray]]:
    """Returns the model plus any optimizer velocity tensors found."""
    try:
        spec = spec_from_metadata(meta)
        blocks, statuses = _parse_blocks(meta["blocks"])
    except KeyError as exc:
        raise CheckpointError(f"checkpoint metadata missing key {exc}") from exc
    model = EpsResNet(spec, blocks, dtype=spec.dtype,
                      execute_collapsed=execute_collapsed)
    model.statuses = statuses
    velocity: dict[str, np.ndarray] = {}
    for name, arr in tensors.items():
        if name.startswith("opt.velocity."):
            velocity[name[len("opt.velocity."):]] = arr
        elif name.endswith(".running_mean") or name.endswith(".running_var"):
            model.bn_stats[name] = arr
        else:
            model.params[name] = Tensor(arr, requires_grad=True)
    for blk in blocks:
        hist = meta.get(f"history.{blk.name}", "")
        statuses[blk.global_index].gate_off_history = \
            [float(x) for x in hist.split(",") if x]
    try:
        model.rebuild_layers()
    except KeyError as exc:
        raise CheckpointError(f"checkpoint is missing tensor {exc}") from exc
    return model, velocity


def load_model(path: str, execute_collapsed: bool = False
               ) -> tuple[EpsResNet, dict[str, np.ndarray], dict[str, str]]:
    tensors, meta = load_checkpoint(path)
    model, velocity = model_from_archive(tensors, meta, execute_collapsed)
    return model, velocity, meta
