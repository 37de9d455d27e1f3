import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfsnn import numerics as nm
from mfsnn.numerics import Tensor
from mfsnn.spiking import LifParams, LifState, lif_step, run_window, surrogate_grad


def step_once(v, current, params):
    spikes, state = lif_step(LifState(Tensor(np.array(v, dtype=float))),
                             Tensor(np.array(current, dtype=float)), params)
    return spikes.data, state.v.data


def test_quiescent_neuron_stays_at_rest():
    s, v = step_once([0.0], [0.0], LifParams())
    assert s.tolist() == [0.0] and v.tolist() == [0.0]


def test_strong_input_spikes_and_resets():
    s, v = step_once([0.0], [4.0], LifParams(tau_m=2.0, v_threshold=1.0))
    assert s.tolist() == [1.0] and v.tolist() == [0.0]


def test_subthreshold_fixed_point_never_spikes():
    p = LifParams(tau_m=2.0, v_threshold=1.0, t_window=200)
    state = LifState.resting((1,), p)
    for _ in range(p.t_window):
        s, state = lif_step(state, Tensor([0.4]), p)
        assert s.data[0] == 0.0
    assert state.v.data[0] == pytest.approx(0.4, abs=1e-12)


def test_subthreshold_trace_matches_geometric_closed_form():
    p = LifParams(tau_m=3.0, v_threshold=10.0)
    current, a = 2.0, 1.0 / 3.0
    state = LifState.resting((1,), p)
    for t in range(1, 30):
        _, state = lif_step(state, Tensor([current]), p)
        expected = current * (1.0 - (1.0 - a) ** t)
        assert state.v.data[0] == pytest.approx(expected, rel=1e-12)


def test_lif_step_shape_mismatch():
    p = LifParams()
    with pytest.raises(ValueError):
        lif_step(LifState.resting((3,), p), Tensor(np.zeros(2)), p)


def test_lif_params_validation():
    with pytest.raises(ValueError):
        LifParams(tau_m=1.0)
    with pytest.raises(ValueError):
        LifParams(v_threshold=0.0, v_reset=0.0)
    with pytest.raises(ValueError):
        LifParams(t_window=0)


def test_surrogate_at_zero_is_half_alpha():
    for alpha in (0.5, 2.0, 7.0):
        assert surrogate_grad(np.array([0.0]), alpha)[0] == alpha / 2


def test_surrogate_vanishes_far_away():
    g = surrogate_grad(np.array([-1e8, 1e8]), 2.0)
    assert np.all(g < 1e-15)


@given(st.floats(-50, 50, allow_nan=False), st.floats(0.1, 10))
def test_surrogate_is_even(u, alpha):
    assert surrogate_grad(np.array([u]), alpha)[0] == surrogate_grad(np.array([-u]), alpha)[0]


def test_run_window_zero_current_gives_zero_rate():
    assert np.all(run_window(Tensor(np.zeros(5)), None, LifParams()).data == 0)


def test_run_window_saturated_neuron_fires_every_step():
    p = LifParams(tau_m=2.0, v_threshold=1.0)
    assert run_window(Tensor([100.0]), None, p).data.tolist() == [1.0]


def test_run_window_uses_layer():
    p = LifParams()
    out = run_window(Tensor([1.0]), lambda x: x * 100.0, p)
    assert out.data.tolist() == [1.0]


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_rates_in_unit_interval_and_spikes_binary(seed):
    rng = np.random.default_rng(seed)
    rec = []
    rate = run_window(Tensor(rng.uniform(-3, 6, (4, 5))), None, LifParams(), rec)
    assert np.all((rate.data >= 0) & (rate.data <= 1))
    spikes = np.stack(rec)
    assert set(np.unique(spikes)) <= {0.0, 1.0}


def test_reset_holds_exactly_after_spike():
    p = LifParams(v_reset=-0.3)
    rng = np.random.default_rng(1)
    state = LifState.resting((50,), p)
    current = Tensor(rng.uniform(0, 5, 50))
    for _ in range(10):
        s, state = lif_step(state, current, p)
        assert np.all(state.v.data[s.data == 1] == -0.3)


def test_window_matches_stepwise_composition():
    p = LifParams()
    rng = np.random.default_rng(4)
    i0 = rng.uniform(-1, 4, (6, 3))
    probe = rng.normal(size=i0.shape)

    a = Tensor(i0, requires_grad=True)
    nm.backward((run_window(a, None, p) * probe).sum())

    b = Tensor(i0, requires_grad=True)
    state, total = LifState.resting(i0.shape, p), None
    for _ in range(p.t_window):
        s, state = lif_step(state, b, p)
        total = s if total is None else total + s
    composed = total * (1.0 / p.t_window)
    nm.backward((composed * probe).sum())

    assert np.array_equal(run_window(Tensor(i0), None, p).data, composed.data)
    np.testing.assert_allclose(a.grad, b.grad, rtol=0, atol=1e-12)


def test_single_neuron_chain_rule_one_step():
    """d spike / d w for s = H(w*x/tau - thr) is the surrogate times x/tau."""
    p = LifParams(tau_m=2.0, v_threshold=1.0, surrogate_alpha=2.0, t_window=1)
    x, w0 = 1.5, 0.8
    w = Tensor([w0], requires_grad=True)
    rate = run_window(Tensor([x]) * w, None, p)
    nm.backward(rate.sum())
    u = w0 * x / p.tau_m - p.v_threshold
    expected = p.surrogate_alpha / (2 * (1 + math.pi / 2 * p.surrogate_alpha * abs(u)) ** 2) * x / p.tau_m
    assert abs(w.grad[0] - expected) < 1e-10


def test_single_neuron_chain_rule_two_steps_no_spike():
    """Two sub-threshold steps: rate = (s1 + s2)/2, v2 depends on v1."""
    p = LifParams(tau_m=2.0, v_threshold=5.0, surrogate_alpha=2.0, t_window=2)
    i0 = 1.2
    a = 1 / p.tau_m
    cur = Tensor([i0], requires_grad=True)
    nm.backward(run_window(cur, None, p).sum())
    v1 = a * i0
    v2 = v1 + a * (i0 - v1)
    sg = lambda v: surrogate_grad(np.array([v - p.v_threshold]), p.surrogate_alpha)[0]
    # dv1/dI = a ; dv2/dI = a + (1 - a) * a
    expected = 0.5 * (sg(v1) * a + sg(v2) * (a + (1 - a) * a))
    assert abs(cur.grad[0] - expected) < 1e-10
