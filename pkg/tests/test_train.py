import os

import numpy as np
import pytest

from epsresnet.data import synthetic_dataset
from epsresnet.model import BlockState, NetworkSpec, build_network
from epsresnet.optim import LrPolicy, Sgd
from epsresnet.train import (CollapsePolicy, detect_collapse, evaluate, train)


def tiny_dataset(n=64, classes=4, seed=0):
    ds = synthetic_dataset("separable", n, seed=seed, classes=classes)
    return ds


def tiny_model(epsilon, classes=4, seed=1, n_blocks=1, width=4, side=False,
               execute_collapsed=False):
    spec = NetworkSpec(blocks_per_group=n_blocks, base_width=width,
                       classes=classes, epsilon=epsilon, side_supervision=side)
    return build_network(spec, rng_seed=seed, execute_collapsed=execute_collapsed)


def run_train(model, train_set, val_set, epochs, seed=3, lr=0.05,
              weight_decay=2e-4, batch_size=16, out_dir=None,
              milestones=(), adaptive=(), start_epoch=0):
    opt = Sgd(model.params, lr=lr, momentum=0.9, weight_decay=weight_decay)
    policy = LrPolicy(base_lr=lr, standard_milestones=milestones,
                      adaptive_milestones=adaptive)
    return train(model, train_set, val_set, opt, policy, CollapsePolicy(),
                 epochs=epochs, seed=seed, batch_size=batch_size,
                 out_dir=out_dir, start_epoch=start_epoch)


def test_sanity_run_learns_separable_data():
    ds = tiny_dataset(96, classes=2)
    model = tiny_model(epsilon=None, classes=2)
    run_train(model, ds, ds, epochs=20)
    assert evaluate(model, ds) < 0.05


def test_epsilon_inf_gates_shut_from_first_epoch():
    ds = tiny_dataset(32)
    model = tiny_model(epsilon=float("inf"))
    result = run_train(model, ds, ds, epochs=1)
    recs = result.logs[0].gate_records
    assert recs and all(r.gate_off_fraction == 1.0 for r in recs)


def test_epsilon_tiny_gates_never_fully_shut():
    ds = tiny_dataset(32)
    model = tiny_model(epsilon=1e-30)
    result = run_train(model, ds, ds, epochs=3)
    for log in result.logs:
        for rec in log.gate_records:
            assert rec.gate_off_fraction < 1.0
    assert all(log.discard_ratio == 0.0 for log in result.logs)


def test_detect_collapse_needs_consecutive_full_epochs():
    model = tiny_model(epsilon=1.0, n_blocks=2)
    policy = CollapsePolicy(confirm_epochs=2)
    blk = model.prunable_blocks()[0].global_index
    model.statuses[blk].gate_off_history = [1.0, 1.0]
    assert blk in detect_collapse(model, policy)
    model.statuses[blk].gate_off_history = [1.0, 0.99]
    assert blk not in detect_collapse(model, policy)
    model.statuses[blk].gate_off_history = [1.0]
    assert blk not in detect_collapse(model, policy)


def test_collapse_marks_blocks_and_resets_lr_once():
    ds = tiny_dataset(32)
    model = tiny_model(epsilon=1e6, n_blocks=2)  # all gates shut immediately
    result = run_train(model, ds, ds, epochs=3, lr=0.05)
    # confirm_epochs=2: every prunable block collapses at epoch 1, together
    assert result.logs[0].newly_collapsed == []
    collapsed = result.logs[1].newly_collapsed
    assert sorted(collapsed) == sorted(b.global_index
                                       for b in model.prunable_blocks())
    assert result.lr_policy.phase == "adaptive"
    assert result.logs[1].discard_ratio == 1.0
    for blk in model.prunable_blocks():
        assert model.statuses[blk.global_index].state == BlockState.COLLAPSED
        assert model.statuses[blk.global_index].collapsed_epoch == 1


def test_collapsed_block_max_abs_weight_non_increasing():
    ds = tiny_dataset(32)
    model = tiny_model(epsilon=1e6, n_blocks=1)
    result = run_train(model, ds, ds, epochs=6, weight_decay=0.01)
    blk = model.prunable_blocks()[0].global_index
    series = []
    for log in result.logs:
        for w in log.weight_stats:
            if w.block_index == blk:
                series.append(max(abs(w.wmin), abs(w.wmax)))
    collapse_epoch = model.statuses[blk].collapsed_epoch
    for a, b in zip(series[collapse_epoch:], series[collapse_epoch + 1:]):
        assert b <= a + 1e-12


def test_discard_ratio_non_decreasing():
    ds = tiny_dataset(32)
    model = tiny_model(epsilon=1e6, n_blocks=2)
    result = run_train(model, ds, ds, epochs=5)
    ratios = [log.discard_ratio for log in result.logs]
    assert all(b >= a for a, b in zip(ratios, ratios[1:]))
    assert ratios[-1] == 1.0


def test_evaluate_constant_predictor_error():
    ds = tiny_dataset(200, classes=10)
    model = tiny_model(epsilon=None, classes=10)
    for p in model.params.values():
        p.data[...] = 0  # logits identically zero: constant argmax
    err = evaluate(model, ds)
    expected = 1.0 - np.mean(ds.labels == 0)
    assert err == expected
    assert abs(err - 0.9) < 0.05


def test_evaluate_is_deterministic():
    ds = tiny_dataset(64)
    model = tiny_model(epsilon=None)
    assert evaluate(model, ds) == evaluate(model, ds)


def test_metrics_csv_byte_identical_for_same_seed(tmp_path):
    ds = tiny_dataset(48)
    for sub in ("a", "b"):
        model = tiny_model(epsilon=0.5, seed=11)
        run_train(model, ds, ds, epochs=3, out_dir=str(tmp_path / sub))
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    b = (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a == b


def test_metrics_csv_schema(tmp_path):
    ds = tiny_dataset(32)
    model = tiny_model(epsilon=0.5, n_blocks=1)
    run_train(model, ds, ds, epochs=2, out_dir=str(tmp_path))
    lines = (tmp_path / "metrics.csv").read_text().strip().splitlines()
    assert lines[0] == ("epoch,block,gate_off_fraction,max_abs_response,"
                       "wmin,wp7,wp50,wp93,wmax,train_loss,val_error,lr,discard_ratio")
    # per epoch: one row per block plus a summary row
    assert len(lines) == 1 + 2 * (3 + 1)
    summary = lines[4].split(",")
    assert summary[1] == "net"
    assert summary[2] == "" and float(summary[9]) > 0


def test_collapsed_skip_equals_execute(tmp_path):
    ds = tiny_dataset(32)
    results = {}
    for mode in (False, True):
        model = tiny_model(epsilon=1e6, n_blocks=2, execute_collapsed=mode)
        results[mode] = run_train(model, ds, ds, epochs=5, weight_decay=0.01,
                                  out_dir=str(tmp_path / f"mode{mode}"))
        results[f"model{mode}"] = model
    for log_a, log_b in zip(results[False].logs, results[True].logs):
        assert log_a.train_loss == log_b.train_loss
        assert log_a.val_error == log_b.val_error
        assert log_a.discard_ratio == log_b.discard_ratio
    for name in results["modelFalse"].params:
        assert np.array_equal(results["modelFalse"].params[name].data,
                              results["modelTrue"].params[name].data), name


def test_numeric_fault_keeps_last_good_checkpoint(tmp_path):
    from epsresnet.errors import NumericFaultError
    from epsresnet.restore import load_model
    ds = tiny_dataset(32)
    model = tiny_model(epsilon=None, n_blocks=1)
    out = str(tmp_path)
    run_train(model, ds, ds, epochs=2, out_dir=out)
    ckpt = os.path.join(out, "checkpoint.eres")
    good = open(ckpt, "rb").read()
    model.params["stem.conv.weight"].data[...] = np.nan
    with np.errstate(invalid="ignore"), pytest.raises(NumericFaultError):
        run_train(model, ds, ds, epochs=3, start_epoch=2, out_dir=out)
    assert open(ckpt, "rb").read() == good
    restored, _, meta = load_model(ckpt)
    assert meta["train.epoch"] == "1"
