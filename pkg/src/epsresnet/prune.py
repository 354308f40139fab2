"""Structural pruning: hard-zero collapsed blocks, rebuild the network
without them, and verify the reduced network is equivalent on data.

A gated block whose gate stayed shut computes output == input exactly, so
removing it cannot change any logit for inputs that keep the gate shut.
Hard-zeroing its parameters first extends that guarantee to every possible
input (an all-zero residual branch produces an exactly-zero response, which
the gate maps to an exact identity), which is what makes the equivalence
check below a bit-exact comparison rather than a tolerance judgment.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PruneError
from .model import BlockSpec, BlockState, EpsResNet
from .tensor import Tensor


@dataclass
class CompressionReport:
    layers_total: int
    layers_retained: int
    params_full: int
    params_reduced: int
    bytes_full: int
    bytes_reduced: int
    pruned_blocks: tuple[str, ...]

    @property
    def layers_discarded(self) -> int:
        return self.layers_total - self.layers_retained

    @property
    def compression_ratio(self) -> float:
        return self.layers_total / self.layers_retained

    def to_text(self) -> str:
        rows = [
            ("layers total", str(self.layers_total)),
            ("layers retained", str(self.layers_retained)),
            ("layers discarded", str(self.layers_discarded)),
            ("compression ratio", f"{self.compression_ratio:.4g}"),
            ("params full", str(self.params_full)),
            ("params reduced", str(self.params_reduced)),
            ("bytes full", str(self.bytes_full)),
            ("bytes reduced", str(self.bytes_reduced)),
            ("pruned blocks", ", ".join(self.pruned_blocks) or "(none)"),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)

    CSV_HEADER = ("layers_total,layers_retained,layers_discarded,compression_ratio,"
                  "params_full,params_reduced,bytes_full,bytes_reduced,pruned_blocks")

    def to_csv_row(self) -> str:
        return ",".join([
            str(self.layers_total), str(self.layers_retained),
            str(self.layers_discarded), f"{self.compression_ratio:.8g}",
            str(self.params_full), str(self.params_reduced),
            str(self.bytes_full), str(self.bytes_reduced),
            ";".join(self.pruned_blocks)])


@dataclass
class EquivalenceReport:
    max_abs_diff: float
    worst_sample: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_abs_diff <= self.tolerance

    def __str__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return (f"equivalence {verdict}: max |logit diff| = {self.max_abs_diff:.3g} "
                f"(tolerance {self.tolerance:g}, worst sample {self.worst_sample})")


def prune(model: EpsResNet, zero_tolerance: float = 1e-4, force: bool = False,
          blocks: list[int] | None = None) -> tuple[EpsResNet, CompressionReport]:
    """Remove collapsed blocks; returns (reduced model, report).

    The selected blocks are hard-zeroed inside `model` itself, so a
    subsequent equivalence check of `model` against the reduced network
    compares two mathematically identical functions. Eligibility: a block
    must be collapsed and have max |parameter| below `zero_tolerance`;
    `force` overrides both checks. Transition blocks are never removable.
    """
    if blocks is None:
        selected = [b.global_index for b in model.blocks
                    if model.statuses[b.global_index].state == BlockState.COLLAPSED]
    else:
        selected = list(blocks)
    chosen: list[BlockSpec] = []
    for gi in selected:
        blk = model._block(gi)
        status = model.statuses[gi]
        if blk.is_transition:
            raise PruneError(f"{blk.name} is a transition block and cannot be pruned")
        if status.state == BlockState.ACTIVE and not force:
            raise PruneError(f"{blk.name} is still active; pass force to prune anyway")
        max_abs = model.block_max_abs_param(gi)
        if max_abs >= zero_tolerance and not force:
            raise PruneError(
                f"{blk.name} has max |parameter| {max_abs:.3g} >= tolerance "
                f"{zero_tolerance:g}; its weights have not collapsed yet "
                f"(pass force to hard-zero it regardless)")
        chosen.append(blk)

    params_full = model.parameter_count()
    layers_total = 2 * len(model.blocks) + 2
    for blk in chosen:
        model.zero_block(blk.global_index)
        model.statuses[blk.global_index].state = BlockState.PRUNED

    reduced = _rebuild_without(model, {b.global_index for b in chosen})
    report = CompressionReport(
        layers_total=layers_total,
        layers_retained=2 * len(reduced.blocks) + 2,
        params_full=params_full,
        params_reduced=reduced.parameter_count(),
        bytes_full=params_full * model.dtype.itemsize,
        bytes_reduced=reduced.parameter_count() * reduced.dtype.itemsize,
        pruned_blocks=tuple(b.name for b in chosen))
    return reduced, report


def _rebuild_without(model: EpsResNet, removed: set[int]) -> EpsResNet:
    import copy as _copy
    removed_names = {model._block(gi).name for gi in removed}
    new_blocks: list[BlockSpec] = []
    rename: dict[str, str] = {}
    counters = {1: 0, 2: 0, 3: 0}
    kept = [b for b in model.blocks if b.global_index not in removed]
    for gi, blk in enumerate(kept):
        counters[blk.group] += 1
        nb = BlockSpec(global_index=gi, group=blk.group,
                       local_index=counters[blk.group],
                       in_channels=blk.in_channels, out_channels=blk.out_channels,
                       stride=blk.stride, gated=blk.gated)
        rename[blk.name] = nb.name
        new_blocks.append(nb)

    reduced = EpsResNet(_copy.deepcopy(model.spec), new_blocks, dtype=model.dtype,
                        execute_collapsed=model.execute_collapsed)
    # The auxiliary head's attachment point is meaningless after re-indexing;
    # its parameters ride along so the parameter accounting stays exact.
    reduced.spec.side_supervision = False

    def block_prefix(name: str) -> str | None:
        if not name.startswith("group"):
            return None
        parts = name.split(".")
        return parts[0] + "." + parts[1]

    def new_name(old: str) -> str:
        prefix = block_prefix(old)
        if prefix is not None and prefix in rename:
            return rename[prefix] + old[len(prefix):]
        return old

    for name, p in model.params.items():
        if block_prefix(name) in removed_names:
            continue
        reduced.params[new_name(name)] = Tensor(p.data.copy(), requires_grad=True)
    for name, arr in model.bn_stats.items():
        if block_prefix(name) in removed_names:
            continue
        reduced.bn_stats[new_name(name)] = arr.copy()

    reduced.statuses = {nb.global_index: _copy.deepcopy(model.statuses[ob.global_index])
                        for nb, ob in zip(new_blocks, kept)}
    reduced.rebuild_layers()
    return reduced


def verify_equivalence(full: EpsResNet, reduced: EpsResNet, images: np.ndarray,
                       tolerance: float = 1e-5, batch_size: int = 256) -> EquivalenceReport:
    """Max |logit difference| between the two networks over a dataset.

    Both models run in eval mode with their stored BN statistics. When the
    removed blocks were hard-zeroed the difference is exactly zero.
    """
    from .model import evaluate_logits
    worst, worst_i = 0.0, -1
    for start in range(0, len(images), batch_size):
        batch = images[start:start + batch_size]
        la = evaluate_logits(full, batch)
        lb = evaluate_logits(reduced, batch)
        diff = np.abs(la - lb).max(axis=1)
        i = int(np.argmax(diff))
        if diff[i] > worst or worst_i < 0:
            worst = float(diff[i])
            worst_i = start + i
    return EquivalenceReport(worst, worst_i, tolerance)
