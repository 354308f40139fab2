import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from epsresnet import tensor as T
from epsresnet.gate import (GateConfig, gate_indicator, relu_circuit,
                            sample_max_abs, sparsify)
from epsresnet.tensor import Tensor, finite_diff_check


def test_indicator_all_below_threshold():
    r = np.array([[0.1, -0.2]])
    assert gate_indicator(r, 2.5).tolist() == [0]


def test_indicator_one_above_threshold():
    r = np.array([[3.0, 0.0]])
    assert gate_indicator(r, 2.5).tolist() == [1]


def test_indicator_boundary_counts_as_off():
    # the ReLU circuit yields relu(|x| - eps) = 0 at equality
    r = np.array([[-2.5]])
    assert gate_indicator(r, 2.5).tolist() == [0]


def test_indicator_per_sample():
    r = np.array([[0.1, 0.2], [5.0, 0.0], [-0.3, -9.0]])
    assert gate_indicator(r, 1.0).tolist() == [0, 1, 1]


def test_sparsify_all_off_gives_exact_zero():
    rng = np.random.default_rng(0)
    f = rng.normal(0, 0.1, (4, 2, 3, 3)).astype(np.float32)
    out = sparsify(Tensor(f), GateConfig(epsilon=2.5))
    assert out.t.tolist() == [0, 0, 0, 0]
    assert np.all(out.s.data == 0.0)


def test_sparsify_mixed_batch():
    f = np.stack([np.full((2, 2), 0.01, np.float32),
                  np.full((2, 2), 5.0, np.float32)])
    out = sparsify(Tensor(f), GateConfig(epsilon=1.0))
    assert out.t.tolist() == [0, 1]
    assert np.all(out.s.data[0] == 0.0)
    assert np.array_equal(out.s.data[1], f[1])


def test_sparsify_tiny_epsilon_passes_through_bit_exact():
    rng = np.random.default_rng(1)
    f = rng.normal(0, 1, (3, 4, 2, 2)).astype(np.float32)
    out = sparsify(Tensor(f), GateConfig(epsilon=1e-30))
    assert out.t.tolist() == [1, 1, 1]
    assert np.array_equal(out.s.data, f)


def test_sparsify_backward_masks_per_sample():
    f = np.stack([np.full((3,), 0.01), np.full((3,), 5.0)])
    x = Tensor(f, dtype=np.float64, requires_grad=True)
    out = sparsify(x, GateConfig(epsilon=1.0))
    T.tsum(out.s).backward()
    assert np.array_equal(x.grad[0], [0, 0, 0])
    assert np.array_equal(x.grad[1], [1, 1, 1])


def test_sparsify_backward_matches_finite_diff_away_from_boundary():
    eps = 1.0
    rng = np.random.default_rng(2)
    # keep every |element| at least 1e-3 away from epsilon
    f = rng.normal(0, 1, (4, 5))
    f[np.abs(np.abs(f) - eps) < 5e-2] += 0.2
    x = Tensor(f, dtype=np.float64, requires_grad=True)

    def loss():
        out = sparsify(x, GateConfig(epsilon=eps))
        return T.tsum(T.mul(out.s, out.s))

    reports = finite_diff_check(loss, {"x": x})
    assert all(r.passed for r in reports), reports


def test_force_off_disconnects_gradient():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(0, 10, (2, 3)), requires_grad=True)
    out = sparsify(x, GateConfig(epsilon=0.5), force_off=True)
    assert out.t.tolist() == [0, 0]
    assert np.all(out.s.data == 0.0)
    assert out.s._backward_fn is None


def test_circuit_case_all_small():
    f = Tensor(np.array([[0.3, -0.4, 0.0]]), dtype=np.float64)
    out = relu_circuit(f, GateConfig(epsilon=0.5, realization="circuit"))
    assert out.t.tolist() == [0.0]
    assert np.all(out.s.data == 0.0)


def test_circuit_case_one_large():
    f = Tensor(np.array([[0.3, -4.0, 0.0]]), dtype=np.float64)
    out = relu_circuit(f, GateConfig(epsilon=0.5, realization="circuit"))
    assert out.t.tolist() == [1.0]
    assert np.array_equal(out.s.data, f.data)


def test_circuit_requires_f64():
    with pytest.raises(ValueError):
        relu_circuit(Tensor(np.zeros((1, 2)), dtype=np.float32),
                     GateConfig(epsilon=1.0, realization="circuit"))


def test_circuit_agrees_with_exact_on_10k_cases():
    rng = np.random.default_rng(4)
    big_l = 1e9
    cfg = GateConfig(epsilon=1.0, big_L=big_l, realization="circuit")
    disagreements = 0
    checked = 0
    for _ in range(100):
        eps = float(10 ** rng.uniform(-2, 1))
        cfg = GateConfig(epsilon=eps, big_L=big_l, realization="circuit")
        f = rng.normal(0, eps * 2, (100, 7))
        t_exact = gate_indicator(f, eps)
        out = relu_circuit(Tensor(f, dtype=np.float64), cfg)
        # the two can only differ when the circuit's sum falls in (0, 1/L)
        overshoot = np.abs(f) - eps
        ssum = np.where(overshoot > 0, overshoot, 0.0).sum(axis=1)
        band = (ssum > 0) & (ssum < 1.0 / big_l)
        comparable = ~band
        checked += int(comparable.sum())
        disagreements += int(np.sum(out.t[comparable] != t_exact[comparable]))
    assert checked >= 9900
    assert disagreements == 0


def test_circuit_band_shrinks_with_l():
    # construct a sum inside (0, 1/L_small) but outside (0, 1/L_large)
    eps = 1.0
    f = np.array([[eps + 2e-7]])
    small = relu_circuit(Tensor(f, dtype=np.float64),
                         GateConfig(epsilon=eps, big_L=1e6, realization="circuit"))
    large = relu_circuit(Tensor(f, dtype=np.float64),
                         GateConfig(epsilon=eps, big_L=1e9, realization="circuit"))
    assert 0.0 < small.t[0] < 1.0      # fractional inside the band
    assert large.t[0] == 1.0           # resolved once L grows


def test_gate_config_validation():
    with pytest.raises(ValueError):
        GateConfig(epsilon=0.0)
    with pytest.raises(ValueError):
        GateConfig(epsilon=1.0, big_L=10.0, realization="circuit")
    with pytest.raises(ValueError):
        GateConfig(epsilon=1.0, realization="soft")


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=12),
       st.floats(0.01, 5.0))
def test_idempotence(values, eps):
    f = np.array([values])
    once = sparsify(Tensor(f, dtype=np.float64), GateConfig(epsilon=eps))
    twice = sparsify(once.s, GateConfig(epsilon=eps))
    assert np.array_equal(once.s.data, twice.s.data)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=12),
       st.floats(0.01, 5.0), st.floats(0.01, 5.0))
def test_monotonicity_in_epsilon(values, eps_a, eps_b):
    lo, hi = sorted((eps_a, eps_b))
    f = np.array([values])
    assert gate_indicator(f, lo)[0] >= gate_indicator(f, hi)[0]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gated_sample_strict_identity(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 1, (1, 8)).astype(np.float32)
    f = rng.normal(0, 0.1, (1, 8)).astype(np.float32)
    eps = float(np.abs(f).max())  # boundary counts as off
    out = sparsify(Tensor(f), GateConfig(epsilon=eps))
    h = T.add(Tensor(x), out.s)
    assert np.array_equal(h.data, x)
