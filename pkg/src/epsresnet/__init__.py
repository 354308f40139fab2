"""Residual networks with a sparsity-promoting threshold gate.

Blocks whose residual response stays uniformly below a threshold epsilon
become strict identity mappings during training; their weights are then
driven to zero by weight decay alone, and the trained network can be
structurally pruned into a provably equivalent reduced network.
"""

from .tensor import (Tensor, finite_diff_check, finite_checks, grad_enabled,
                     no_grad, resolve_dtype, trace)
from .ops import (BatchNormState, Conv2dParams, LinearParams, batch_norm,
                  conv2d, global_avg_pool, linear, relu, softmax_cross_entropy)
from .gate import GateConfig, GateOutput, gate_indicator, relu_circuit, sparsify
from .model import (BlockSpec, BlockState, BlockStatus, EpsResNet, ForwardResult,
                    NetworkSpec, build_network, evaluate_logits, total_loss)
from .optim import LrPolicy, Sgd, lr_for_epoch, on_block_discarded
from .data import (AugmentConfig, Dataset, augment, iter_batches, load_cifar10,
                   synthetic_dataset, synthetic_images, write_cifar_binary)
from .train import (CollapsePolicy, GateRecord, WeightStats, detect_collapse,
                    evaluate, train)
from .checkpoint import load_checkpoint, save_checkpoint
from .restore import load_model
from .prune import CompressionReport, EquivalenceReport, prune, verify_equivalence
from .config import PRESETS, RunConfig, from_preset, load_config
from .errors import (CheckpointError, ConfigError, EpsResNetError,
                     NumericFaultError, PruneError, ShapeError, StateError)

__version__ = "0.1.0"
