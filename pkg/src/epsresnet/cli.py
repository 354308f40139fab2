"""Command-line interface.

Subcommands: train, eval, prune, inspect, sweep-epsilon, report.
Exit codes: 0 success, 2 configuration error, 3 numeric fault, 4 I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import RunConfig, apply_overrides, from_preset, load_config
from .data import DataError
from .errors import (CheckpointError, ConfigError, EpsResNetError,
                     NumericFaultError, PruneError)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="key = value config file")
    p.add_argument("--preset", metavar="NAME",
                   help="named preset (cifar10-eps110, cifar10-eps20)")
    p.add_argument("--epsilon", metavar="R", help="gate threshold; 'none' disables gating")
    p.add_argument("--gate-realization", choices=("exact", "circuit"))
    p.add_argument("--seed", type=int, metavar="N")
    p.add_argument("--epochs", type=int, metavar="N")
    p.add_argument("--data", metavar="DIR", help="dataset directory (CIFAR-10 binaries)")
    p.add_argument("--out", metavar="DIR", help="run output directory")
    p.add_argument("--dtype", choices=("f32", "f64"))
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")


def _resolve_config(args) -> RunConfig:
    if args.config and args.preset:
        raise ConfigError("--config and --preset are mutually exclusive")
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = from_preset(args.preset)
    else:
        cfg = RunConfig()
    overrides: dict[str, str] = {}
    if args.epsilon is not None:
        overrides["epsilon"] = args.epsilon
    if args.gate_realization is not None:
        overrides["gate_realization"] = args.gate_realization
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.epochs is not None:
        overrides["epochs"] = str(args.epochs)
    if args.data is not None:
        overrides["data_dir"] = args.data
        overrides["dataset"] = "cifar10"
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.dtype is not None:
        overrides["dtype"] = args.dtype
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    from .runner import run_training
    cfg = _resolve_config(args)
    resume = getattr(args, "resume", None)
    result = run_training(cfg, resume=resume, quiet=args.quiet)
    final = result.logs[-1]
    print(f"done: {cfg.epochs} epochs, final val error {final.val_error:.4f}, "
          f"discard ratio {final.discard_ratio:.3f}")
    print(f"metrics: {result.metrics_path}")
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .runner import run_sweep
    cfg = _resolve_config(args)
    eps_list = [float(x) for x in args.epsilon_list.split(",") if x.strip()]
    csv_path, rows = run_sweep(cfg, eps_list, quiet=args.quiet)
    print("epsilon  discard_ratio  val_error")
    for eps, ratio, err in rows:
        print(f"{eps:<8g} {ratio:<14.3f} {err:.4f}")
    print(f"sweep table: {csv_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .restore import load_model
    from .runner import prepare_data
    from .train import evaluate
    model, _, meta = load_model(args.checkpoint)
    cfg = _resolve_config(args)
    if cfg.dataset == "cifar10" and "data.mean" in meta:
        from .data import load_cifar10
        mean = np.array([float(x) for x in meta["data.mean"].split(",")], np.float32)
        std = np.array([float(x) for x in meta["data.std"].split(",")], np.float32)
        _, val_set = load_cifar10(cfg.data_dir, test_limit=cfg.val_size or None,
                                  mean=mean, std=std)
    else:
        _, val_set = prepare_data(cfg)
    err = evaluate(model, val_set)
    print(f"top-1 error: {err:.4f} ({len(val_set)} samples)")
    return EXIT_OK


def cmd_prune(args) -> int:
    from .checkpoint import save_checkpoint
    from .prune import prune, verify_equivalence
    from .restore import load_model
    from .runner import prepare_data
    from .train import run_metadata, training_state_tensors
    from .optim import Sgd
    model, _, meta = load_model(args.checkpoint)
    reduced, report = prune(model, zero_tolerance=args.zero_tolerance,
                            force=args.force)
    cfg = _resolve_config(args)
    _, val_set = prepare_data(cfg)
    equiv = verify_equivalence(model, reduced, val_set.images,
                               tolerance=args.equivalence_tolerance)
    out = args.out or (os.path.splitext(args.checkpoint)[0] + ".pruned.eres")
    from .restore import lr_policy_from_metadata
    policy = lr_policy_from_metadata(meta)
    new_meta = dict(meta)
    new_meta.update(run_metadata(reduced, policy, int(meta["train.epoch"]),
                                 int(meta["train.seed"])))
    opt = Sgd(reduced.params)
    save_checkpoint(out, training_state_tensors(reduced, opt), new_meta)
    print(report.to_text())
    print(str(equiv))
    base = os.path.splitext(out)[0]
    with open(base + ".report.csv", "w") as fh:
        fh.write(report.CSV_HEADER + "\n" + report.to_csv_row() + "\n")
    print(f"reduced checkpoint: {out}")
    if not equiv.passed:
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .model import BlockState
    from .restore import load_model
    model, _, meta = load_model(args.checkpoint)
    print(f"epoch {meta.get('train.epoch', '?')}, seed {meta.get('train.seed', '?')}, "
          f"epsilon {meta.get('spec.epsilon', '?')}")
    header = f"{'block':<18}{'group':<7}{'status':<11}{'gate_off':<10}{'max|w|':<10}"
    print(header)
    print("-" * len(header))
    for blk in model.blocks:
        status = model.statuses[blk.global_index]
        hist = status.gate_off_history
        frac = f"{hist[-1]:.3f}" if hist and blk.gated else "-"
        max_w = model.block_max_abs_param(blk.global_index)
        print(f"{blk.name:<18}{blk.group:<7}{status.state.value:<11}"
              f"{frac:<10}{max_w:<10.3g}")
    prunable = model.prunable_blocks()
    done = sum(1 for b in prunable
               if model.statuses[b.global_index].state != BlockState.ACTIVE)
    print(f"{done}/{len(prunable)} prunable blocks discarded")
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import render_run_report
    written = render_run_report(args.run, args.out)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="epsresnet",
        description="Train gated residual networks, discard identity blocks, "
                    "and prune them into equivalent reduced networks.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network per config/preset")
    _add_config_flags(p)
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")
    p.add_argument("--quiet", action="store_true", default=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep-epsilon", help="one short run per epsilon value")
    _add_config_flags(p)
    p.add_argument("--epsilon-list", required=True, metavar="R,R,...",
                   help="comma-separated epsilon values (at least 2)")
    p.add_argument("--quiet", action="store_true", default=False)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="top-1 error of a checkpoint on a dataset")
    p.add_argument("checkpoint")
    _add_config_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("prune", help="remove collapsed blocks, verify equivalence")
    p.add_argument("checkpoint")
    _add_config_flags(p)
    p.add_argument("--zero-tolerance", type=float, default=1e-4)
    p.add_argument("--equivalence-tolerance", type=float, default=1e-5)
    p.add_argument("--force", action="store_true",
                   help="prune collapsed blocks whose weights have not decayed, "
                        "or any explicitly still-active block")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("inspect", help="per-block status table of a checkpoint")
    p.add_argument("checkpoint")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("report", help="render figures from a run directory")
    p.add_argument("--run", required=True, metavar="DIR")
    p.add_argument("--out", metavar="DIR", help="where to write figures (default: run dir)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFaultError as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, DataError, FileNotFoundError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except PruneError as exc:
        print(f"prune refused: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EpsResNetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
