"""Continuous-time reference oracles for the subthreshold membrane equations.

Synaptic traces are advanced exactly (pure exponential decay between input
spikes, a unit jump at each spike); the membrane potential is integrated with
classical fourth-order Runge-Kutta on a fixed grid. Spikes falling inside a grid
interval split it so each jump lands on its exact time. No firing or reset is
applied.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeMismatchError, StepSizeError
from .neuron import DgnLayerParams

SpikeTimes = Sequence[Sequence[float]]
Rhs = Callable[[float, np.ndarray], np.ndarray]


@dataclass
class OdeTrajectory:
    t: np.ndarray
    V: np.ndarray


def _rk4_step(f: Rhs, t: float, y: np.ndarray, h: float) -> np.ndarray:
    k1 = f(t, y)
    k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = f(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _sorted_events(spike_times: SpikeTimes, t_end: float) -> list[tuple[float, int]]:
    events: list[tuple[float, int]] = []
    for channel, times in enumerate(spike_times):
        for time in times:
            time = float(time)
            if time < 0:
                raise ValueError(f"spike time {time} on channel {channel} is negative")
            if time <= t_end:
                events.append((time, channel))
    events.sort()
    return events


def _integrate(
    spike_times: SpikeTimes,
    jumps: np.ndarray,
    tau_s: float,
    make_rhs: Callable[[np.ndarray, float], Rhs],
    v0: np.ndarray,
    t_end: float,
    dt_fine: float,
) -> OdeTrajectory:
    if not dt_fine > 0 or not t_end > 0:
        raise ValueError("t_end and dt_fine must be positive")
    if dt_fine > tau_s / 10.0:
        raise StepSizeError(
            f"dt_fine={dt_fine} is too coarse for tau_s={tau_s}; need dt_fine <= tau_s/10"
        )
    if len(spike_times) != jumps.shape[0]:
        raise ShapeMismatchError(
            f"got spike times for {len(spike_times)} channels, expected {jumps.shape[0]}"
        )

    n_steps = int(round(t_end / dt_fine))
    events = _sorted_events(spike_times, t_end)
    traces = np.zeros(jumps.shape[1])
    V = np.array(v0, dtype=np.float64)
    t_grid = np.arange(n_steps + 1) * dt_fine
    out = np.empty((n_steps + 1,) + V.shape)
    out[0] = V

    cursor = 0
    while cursor < len(events) and events[cursor][0] <= 0.0:
        traces = traces + jumps[events[cursor][1]]
        cursor += 1

    t_now = 0.0

    def advance(t_target: float) -> None:
        nonlocal traces, V, t_now
        h = t_target - t_now
        if h <= 0:
            return
        V = _rk4_step(make_rhs(traces, t_now), t_now, V, h)
        traces = traces * math.exp(-h / tau_s)
        t_now = t_target

    for k in range(n_steps):
        t_next = t_grid[k + 1]
        while cursor < len(events) and events[cursor][0] <= t_next:
            time, channel = events[cursor]
            advance(time)
            traces = traces + jumps[channel]
            cursor += 1
        advance(t_next)
        out[k + 1] = V
    return OdeTrajectory(t=t_grid, V=out)


def ode_reference_dgn(
    spike_times: SpikeTimes,
    params: DgnLayerParams,
    t_end: float,
    dt_fine: float,
    v0: np.ndarray | float = 0.0,
) -> OdeTrajectory:
    """Integrate dV/dt = -(g_l + sum C_i D_i) V + sum W_i D_i for every unit of ``params``.

    Returns ``V`` with shape ``(steps + 1, units)`` sampled on the fine grid.
    """
    W, C = params.W, params.C
    g_l = params.g_l if params.static_gate_enabled else 0.0
    dynamic = params.dynamic_gate_enabled
    tau_s = params.tau_s

    def make_rhs(d_start: np.ndarray, t_start: float) -> Rhs:
        def rhs(t: float, V: np.ndarray) -> np.ndarray:
            D = d_start * math.exp(-(t - t_start) / tau_s)
            conductance = g_l + (C @ D if dynamic else 0.0)
            return -conductance * V + W @ D

        return rhs

    v_init = np.broadcast_to(np.asarray(v0, dtype=np.float64), (params.units,))
    return _integrate(
        spike_times,
        np.eye(params.in_channels),
        tau_s,
        make_rhs,
        v_init,
        t_end,
        dt_fine,
    )


def ode_reference_conductance(
    spike_times: SpikeTimes,
    C: np.ndarray,
    E: np.ndarray,
    g_l: float,
    tau_s: float,
    t_end: float,
    dt_fine: float,
    v0: float = 0.0,
) -> OdeTrajectory:
    """Integrate the conductance neuron dV/dt = -g_l V + sum g_i (E_i - V).

    Each input spike raises the synaptic conductance g_i by C_i, after which it
    decays with time constant tau_s. Returns ``V`` with shape ``(steps + 1,)``.
    """
    C = np.asarray(C, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    if C.shape != E.shape or C.ndim != 1:
        raise ShapeMismatchError("C and E must be vectors of equal length")
    if not g_l > 0 or not tau_s > 0:
        raise ValueError("g_l and tau_s must be positive")

    def make_rhs(g_start: np.ndarray, t_start: float) -> Rhs:
        def rhs(t: float, V: np.ndarray) -> np.ndarray:
            g = g_start * math.exp(-(t - t_start) / tau_s)
            return -g_l * V + np.sum(g * (E - V))

        return rhs

    return _integrate(
        spike_times,
        np.diag(C),
        tau_s,
        make_rhs,
        np.asarray(float(v0)),
        t_end,
        dt_fine,
    )
