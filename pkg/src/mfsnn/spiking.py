"""Leaky integrate-and-fire dynamics with a surrogate-gradient spike."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import Tensor, _record, add, as_tensor, mul, step_with_surrogate, sub


@dataclass(frozen=True)
class LifParams:
    tau_m: float = 2.0
    v_threshold: float = 1.0
    v_reset: float = 0.0
    surrogate_alpha: float = 2.0
    t_window: int = 20

    def __post_init__(self):
        if not self.tau_m > 1:
            raise ValueError(f"tau_m must exceed 1, got {self.tau_m}")
        if not self.v_threshold > self.v_reset:
            raise ValueError("v_threshold must exceed v_reset")
        if self.surrogate_alpha <= 0:
            raise ValueError("surrogate_alpha must be positive")
        if int(self.t_window) != self.t_window or self.t_window < 1:
            raise ValueError(f"t_window must be a positive integer, got {self.t_window}")


@dataclass
class LifState:
    v: Tensor

    @classmethod
    def resting(cls, shape, params: LifParams) -> LifState:
        return cls(Tensor(np.full(shape, params.v_reset, dtype=np.float64)))


def surrogate_grad(u, alpha: float) -> np.ndarray:
    """alpha / (2 (1 + pi/2 * alpha * |u|)^2), the backward stand-in for the step."""
    u = np.asarray(u.data if isinstance(u, Tensor) else u, dtype=np.float64)
    return alpha / (2.0 * (1.0 + 0.5 * math.pi * alpha * np.abs(u)) ** 2)


def spike_fn(u, alpha: float) -> Tensor:
    return step_with_surrogate(u, lambda x: surrogate_grad(x, alpha))


def lif_step(state: LifState, input_current, params: LifParams) -> tuple[Tensor, LifState]:
    """Advance one step: leak/integrate, fire at threshold, hard reset.

    The reset is detached from the graph; gradients reach the membrane only
    through the integration path and the surrogate.
    """
    current = as_tensor(input_current)
    if state.v.shape != current.shape:
        raise ValueError(f"shape mismatch: membrane {state.v.shape} vs current {current.shape}")
    v = add(state.v, mul(1.0 / params.tau_m, sub(current, state.v)))
    spikes = spike_fn(sub(v, params.v_threshold), params.surrogate_alpha)
    fired = spikes.data
    v_next = add(mul(v, 1.0 - fired), params.v_reset * fired)
    return spikes, LifState(v_next)


def run_window(layer_input, layer: Callable[[Tensor], Tensor] | None, params: LifParams,
               record: list | None = None) -> Tensor:
    """Drive LIF neurons with ``layer(layer_input)`` held constant for the window.

    Returns the per-neuron firing rate (mean spike over ``t_window`` steps).
    When ``record`` is a list, each step's binary spike array is appended.
    """
    current = as_tensor(layer(layer_input) if layer is not None else layer_input)
    i_in = current.data
    steps, decay = params.t_window, 1.0 / params.tau_m
    v = np.full(i_in.shape, params.v_reset, dtype=np.float64)
    total = np.zeros_like(i_in)
    pre = []  # membrane before reset, per step
    for _ in range(steps):
        v = v + decay * (i_in - v)
        fired = (v - params.v_threshold >= 0).astype(np.float64)
        pre.append(v)
        if record is not None:
            record.append(fired)
        total = total + fired
        v = v * (1.0 - fired) + params.v_reset * fired

    def back(g):
        # backprop through time; reset is detached, matching lif_step
        g_spike = g / steps
        g_v = np.zeros_like(i_in)
        g_i = np.zeros_like(i_in)
        for u in reversed(pre):
            fired = (u - params.v_threshold >= 0).astype(np.float64)
            g_u = g_v * (1.0 - fired) + g_spike * surrogate_grad(u - params.v_threshold,
                                                                params.surrogate_alpha)
            g_i += decay * g_u
            g_v = (1.0 - decay) * g_u
        return (g_i,)

    return _record(total * (1.0 / steps), (current,), back)
