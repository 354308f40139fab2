"""Network assembly: pre-activation residual blocks with threshold gates.

Topology: one 3x3 stem conv, three groups of residual blocks at feature-map
sizes 32/16/8 and widths w/2w/4w, then BN, ReLU, global average pooling and
a fully-connected classifier. The first block of groups 2 and 3 changes
resolution and width through a parameter-free shortcut (stride-2 subsample
plus channel zero-padding); those transition blocks are never gated and
never pruned, since their input/output shapes differ and "output equals
input" is not defined for them. Every other block wraps its residual in the
threshold gate, so a gated-off sample passes through the block unchanged,
bit for bit.

An auxiliary classifier can be attached at the midpoint block's output
during training (global average pool, then a fully-connected layer); it
never participates in inference.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError
from .gate import GateConfig, sample_max_abs, sparsify
from .ops import (BatchNormState, Conv2dParams, LinearParams, batch_norm_nhwc,
                  conv2d_nhwc, global_avg_pool_nhwc, linear, relu,
                  softmax_cross_entropy)
from .tensor import Tensor, make_op, resolve_dtype
from . import tensor as T


class BlockState(enum.Enum):
    ACTIVE = "active"
    COLLAPSED = "collapsed"
    PRUNED = "pruned"


@dataclass
class BlockStatus:
    """Lifecycle of one residual block; transitions only move forward."""
    state: BlockState = BlockState.ACTIVE
    collapsed_epoch: int | None = None
    gate_off_history: list[float] = field(default_factory=list)

    def collapse(self, epoch: int) -> None:
        if self.state == BlockState.PRUNED:
            raise ValueError("a pruned block cannot change state")
        if self.state == BlockState.ACTIVE:
            self.state = BlockState.COLLAPSED
            self.collapsed_epoch = epoch


@dataclass
class BlockSpec:
    global_index: int      # 0-based across all groups
    group: int             # 1 | 2 | 3
    local_index: int       # 1-based within the group (used in parameter names)
    in_channels: int
    out_channels: int
    stride: int
    gated: bool

    @property
    def name(self) -> str:
        return f"group{self.group}.block{self.local_index}"

    @property
    def is_transition(self) -> bool:
        return self.stride != 1 or self.in_channels != self.out_channels


@dataclass
class NetworkSpec:
    """Declarative description of the network; width doubles per group."""
    blocks_per_group: int = 3
    base_width: int = 16
    classes: int = 10
    epsilon: float | None = 2.5
    gate_realization: str = "exact"
    big_L: float = 1e9
    side_supervision: bool = True
    side_coefficient: float = 0.1
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    dtype: str = "f32"

    def __post_init__(self):
        if self.blocks_per_group < 1:
            raise ConfigError("blocks_per_group must be >= 1")
        if self.base_width < 1:
            raise ConfigError("base_width must be >= 1")
        if self.epsilon is not None and not (self.epsilon > 0):
            raise ConfigError("epsilon must be positive (use None to disable gating)")

    @property
    def widths(self) -> tuple[int, int, int]:
        return (self.base_width, 2 * self.base_width, 4 * self.base_width)

    @property
    def total_blocks(self) -> int:
        return 3 * self.blocks_per_group

    @property
    def conv_layers(self) -> int:
        """Weighted layers: stem conv + 2 per block + the classifier."""
        return 6 * self.blocks_per_group + 2

    @property
    def side_block(self) -> int:
        """0-based index of the block feeding the auxiliary loss."""
        return math.ceil(self.total_blocks / 2) - 1

    def standard_blocks(self) -> list[BlockSpec]:
        blocks = []
        widths = self.widths
        gi = 0
        for g in (1, 2, 3):
            w = widths[g - 1]
            for b in range(1, self.blocks_per_group + 1):
                transition = g > 1 and b == 1
                in_c = widths[g - 2] if transition else w
                blocks.append(BlockSpec(
                    global_index=gi, group=g, local_index=b,
                    in_channels=in_c, out_channels=w,
                    stride=2 if transition else 1,
                    gated=self.epsilon is not None and not transition))
                gi += 1
        return blocks


@dataclass
class GateTrace:
    block_index: int
    t: np.ndarray
    max_abs: float


@dataclass
class ForwardResult:
    logits: Tensor
    side_logits: Tensor | None
    gates: list[GateTrace]


def _shortcut_nhwc(x: Tensor, out_c: int) -> Tensor:
    in_shape = x.data.shape

    def backward(g):
        return (kernels.subsample_pad_channels_grad(g, in_shape),)

    return make_op(kernels.subsample_pad_channels(x.data, out_c),
                   (x,), backward, "shortcut")


class EpsResNet:
    """Parameters plus a define-by-run forward builder."""

    def __init__(self, spec: NetworkSpec, blocks: list[BlockSpec],
                 dtype=None, execute_collapsed: bool = False):
        self.spec = spec
        self.blocks = blocks
        self.dtype = np.dtype(resolve_dtype(dtype if dtype is not None else spec.dtype))
        self.execute_collapsed = execute_collapsed
        self.params: dict[str, Tensor] = {}
        self.bn_stats: dict[str, np.ndarray] = {}
        self.statuses: dict[int, BlockStatus] = {
            b.global_index: BlockStatus() for b in blocks}
        self._layers: dict = {}
        self._gate_cfg = None
        if spec.epsilon is not None:
            self._gate_cfg = GateConfig(spec.epsilon, spec.big_L, spec.gate_realization)

    # -- construction --------------------------------------------------------

    def _param(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(array.astype(self.dtype), requires_grad=True)
        self.params[name] = t
        return t

    def _bn(self, prefix: str, channels: int) -> BatchNormState:
        gamma = self._param(f"{prefix}.gamma", np.ones(channels))
        beta = self._param(f"{prefix}.beta", np.zeros(channels))
        rm = np.zeros(channels, dtype=self.dtype)
        rv = np.ones(channels, dtype=self.dtype)
        self.bn_stats[f"{prefix}.running_mean"] = rm
        self.bn_stats[f"{prefix}.running_var"] = rv
        return BatchNormState(gamma, beta, rm, rv,
                              momentum=self.spec.bn_momentum, eps=self.spec.bn_eps)

    def initialize(self, rng_seed: int) -> None:
        """Gaussian(0, 0.01) weights, zero biases, unit BN scales."""
        rng = np.random.default_rng(rng_seed)
        spec = self.spec

        def conv_weight(name, out_c, in_c):
            return self._param(name, rng.normal(0.0, 0.01, (out_c, in_c, 3, 3)))

        self._layers = {}
        w0 = spec.base_width
        self._layers["stem"] = Conv2dParams(conv_weight("stem.conv.weight", w0, 3))
        for blk in self.blocks:
            p = blk.name
            self._layers[f"{p}.bn1"] = self._bn(f"{p}.bn1", blk.in_channels)
            self._layers[f"{p}.conv1"] = Conv2dParams(
                conv_weight(f"{p}.conv1.weight", blk.out_channels, blk.in_channels),
                stride=blk.stride)
            self._layers[f"{p}.bn2"] = self._bn(f"{p}.bn2", blk.out_channels)
            self._layers[f"{p}.conv2"] = Conv2dParams(
                conv_weight(f"{p}.conv2.weight", blk.out_channels, blk.out_channels),
                bias=self._param(f"{p}.conv2.bias", np.zeros(blk.out_channels)))
        head_w = spec.widths[2]
        self._layers["head.bn"] = self._bn("head.bn", head_w)
        self._layers["head.fc"] = LinearParams(
            self._param("head.fc.weight", rng.normal(0.0, 0.01, (spec.classes, head_w))),
            self._param("head.fc.bias", np.zeros(spec.classes)))
        if spec.side_supervision:
            side_w = self._width_after_block(spec.side_block)
            self._layers["side.fc"] = LinearParams(
                self._param("side.fc.weight", rng.normal(0.0, 0.01, (spec.classes, side_w))),
                self._param("side.fc.bias", np.zeros(spec.classes)))

    def _width_after_block(self, global_index: int) -> int:
        for blk in self.blocks:
            if blk.global_index == global_index:
                return blk.out_channels
        raise ShapeError(f"no block with global index {global_index}")

    def rebuild_layers(self) -> None:
        """Re-bind layer containers to the current params/bn_stats dicts."""
        self._layers = {}
        spec = self.spec
        self._layers["stem"] = Conv2dParams(self.params["stem.conv.weight"])
        for blk in self.blocks:
            p = blk.name
            self._layers[f"{p}.bn1"] = BatchNormState(
                self.params[f"{p}.bn1.gamma"], self.params[f"{p}.bn1.beta"],
                self.bn_stats[f"{p}.bn1.running_mean"], self.bn_stats[f"{p}.bn1.running_var"],
                momentum=spec.bn_momentum, eps=spec.bn_eps)
            self._layers[f"{p}.conv1"] = Conv2dParams(
                self.params[f"{p}.conv1.weight"], stride=blk.stride)
            self._layers[f"{p}.bn2"] = BatchNormState(
                self.params[f"{p}.bn2.gamma"], self.params[f"{p}.bn2.beta"],
                self.bn_stats[f"{p}.bn2.running_mean"], self.bn_stats[f"{p}.bn2.running_var"],
                momentum=spec.bn_momentum, eps=spec.bn_eps)
            self._layers[f"{p}.conv2"] = Conv2dParams(
                self.params[f"{p}.conv2.weight"], bias=self.params[f"{p}.conv2.bias"])
        self._layers["head.bn"] = BatchNormState(
            self.params["head.bn.gamma"], self.params["head.bn.beta"],
            self.bn_stats["head.bn.running_mean"], self.bn_stats["head.bn.running_var"],
            momentum=spec.bn_momentum, eps=spec.bn_eps)
        self._layers["head.fc"] = LinearParams(
            self.params["head.fc.weight"], self.params["head.fc.bias"])
        if spec.side_supervision:
            self._layers["side.fc"] = LinearParams(
                self.params["side.fc.weight"], self.params["side.fc.bias"])

    # -- forward -------------------------------------------------------------

    def _residual(self, x: Tensor, blk: BlockSpec, training: bool) -> Tensor:
        p = blk.name
        h = batch_norm_nhwc(x, self._layers[f"{p}.bn1"], training)
        h = relu(h)
        h = conv2d_nhwc(h, self._layers[f"{p}.conv1"])
        h = batch_norm_nhwc(h, self._layers[f"{p}.bn2"], training)
        h = relu(h)
        return conv2d_nhwc(h, self._layers[f"{p}.conv2"])

    def _block_forward(self, x: Tensor, blk: BlockSpec, training: bool,
                       gates: list[GateTrace]) -> Tensor:
        status = self.statuses[blk.global_index]
        if status.state == BlockState.PRUNED:
            return x
        if blk.is_transition:
            return T.add(_shortcut_nhwc(x, blk.out_channels),
                         self._residual(x, blk, training))
        if not blk.gated:
            return T.add(x, self._residual(x, blk, training))

        if status.state == BlockState.COLLAPSED and not self.execute_collapsed:
            # Gate is pinned shut once collapsed, so the block output is the
            # input, exactly; skipping the dead computation changes nothing.
            gates.append(GateTrace(blk.global_index,
                                   np.zeros(x.shape[0], dtype=np.uint8), float("nan")))
            return x

        f = self._residual(x, blk, training)
        forced_off = status.state == BlockState.COLLAPSED
        out = sparsify(f, self._gate_cfg, force_off=forced_off)
        max_abs = float(sample_max_abs(f.data).max())
        gates.append(GateTrace(blk.global_index,
                               (np.asarray(out.t) != 0).astype(np.uint8), max_abs))
        if not np.any(out.t):
            # Every sample gated off: the residual contributes exactly zero
            # forward and backward, so bypass it on the tape as well.
            return x
        return T.add(x, out.s)

    def forward(self, images: np.ndarray, training: bool = True) -> ForwardResult:
        """Run the network on an NCHW image batch."""
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected (B, 3, H, W) images, got {images.shape}")
        x_nhwc = np.ascontiguousarray(
            images.transpose(0, 2, 3, 1).astype(self.dtype, copy=False))
        x = Tensor(x_nhwc)
        x = conv2d_nhwc(x, self._layers["stem"])
        gates: list[GateTrace] = []
        side_feats = None
        for blk in self.blocks:
            x = self._block_forward(x, blk, training, gates)
            if training and self.spec.side_supervision and \
                    blk.global_index == self.spec.side_block:
                side_feats = x
        h = batch_norm_nhwc(x, self._layers["head.bn"], training)
        h = relu(h)
        pooled = global_avg_pool_nhwc(h)
        logits = linear(pooled, self._layers["head.fc"])
        side_logits = None
        if side_feats is not None:
            side_logits = linear(global_avg_pool_nhwc(side_feats), self._layers["side.fc"])
        return ForwardResult(logits, side_logits, gates)

    # -- bookkeeping ---------------------------------------------------------

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def block_param_names(self, global_index: int) -> list[str]:
        blk = self._block(global_index)
        prefix = blk.name + "."
        return [n for n in self.params if n.startswith(prefix)]

    def _block(self, global_index: int) -> BlockSpec:
        for blk in self.blocks:
            if blk.global_index == global_index:
                return blk
        raise ShapeError(f"no block with global index {global_index}")

    def block_max_abs_param(self, global_index: int) -> float:
        names = self.block_param_names(global_index)
        return max(float(np.abs(self.params[n].data).max()) for n in names)

    def zero_block(self, global_index: int) -> None:
        """Hard-zero every trainable parameter of one block."""
        for n in self.block_param_names(global_index):
            self.params[n].data[...] = 0
        blk = self._block(global_index)
        self.bn_stats[f"{blk.name}.bn1.running_mean"][...] = 0
        self.bn_stats[f"{blk.name}.bn1.running_var"][...] = 1
        self.bn_stats[f"{blk.name}.bn2.running_mean"][...] = 0
        self.bn_stats[f"{blk.name}.bn2.running_var"][...] = 1

    def prunable_blocks(self) -> list[BlockSpec]:
        return [b for b in self.blocks if b.gated]

    def copy(self) -> "EpsResNet":
        import copy as _copy
        clone = EpsResNet(_copy.deepcopy(self.spec), _copy.deepcopy(self.blocks),
                          dtype=self.dtype, execute_collapsed=self.execute_collapsed)
        for name, p in self.params.items():
            clone.params[name] = Tensor(p.data.copy(), requires_grad=True)
        clone.bn_stats = {k: v.copy() for k, v in self.bn_stats.items()}
        clone.statuses = _copy.deepcopy(self.statuses)
        clone.rebuild_layers()
        return clone

    def astype(self, dtype) -> "EpsResNet":
        """Copy of the model with parameters cast to another dtype."""
        dt = np.dtype(resolve_dtype(dtype))
        clone = self.copy()
        clone.dtype = dt
        for name, p in clone.params.items():
            clone.params[name] = Tensor(p.data.astype(dt), requires_grad=True)
        clone.bn_stats = {k: v.astype(dt) for k, v in clone.bn_stats.items()}
        clone.rebuild_layers()
        return clone


def build_network(spec: NetworkSpec, rng_seed: int, dtype=None,
                  execute_collapsed: bool = False) -> EpsResNet:
    """Construct and initialize the network described by `spec`."""
    model = EpsResNet(spec, spec.standard_blocks(), dtype=dtype,
                      execute_collapsed=execute_collapsed)
    model.initialize(rng_seed)
    return model


def l2_sum_squares(model: EpsResNet, decay_bn: bool = True) -> float:
    """Sum of squared weights over the decayed parameter set."""
    total = 0.0
    for name, p in model.params.items():
        if not decay_bn and (name.endswith(".gamma") or name.endswith(".beta")):
            continue
        total += float(np.sum(p.data.astype(np.float64) ** 2))
    return total


def total_loss(logits: Tensor, side_logits: Tensor | None, labels: np.ndarray,
               model: EpsResNet, weight_decay: float,
               side_coefficient: float = 0.1, decay_bn: bool = True) -> Tensor:
    """Cross-entropy plus auxiliary cross-entropy plus the L2 objective term.

    The L2 term enters as a constant: its gradient is applied inside the
    optimizer as coupled weight decay, so the returned scalar carries the
    full objective value while backward() yields the cross-entropy
    gradients only.
    """
    loss = softmax_cross_entropy(logits, labels)
    if side_logits is not None and side_coefficient != 0.0:
        loss = T.add(loss, T.scale(softmax_cross_entropy(side_logits, labels),
                                   side_coefficient))
    if weight_decay:
        reg = 0.5 * weight_decay * l2_sum_squares(model, decay_bn)
        loss = T.shift(loss, reg)
    return loss


def evaluate_logits(model: EpsResNet, images: np.ndarray) -> np.ndarray:
    """Inference-mode logits for an NCHW batch (no graph recording)."""
    with T.no_grad():
        return model.forward(images, training=False).logits.data
