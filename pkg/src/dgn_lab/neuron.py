"""Single-timestep dynamics of dynamic gated (DGN), LIF and ALIF neurons.

All state is explicit and every function is pure: a step takes the previous
``NeuronLayerState`` plus the input spikes and returns the next state with a
``StepRecord`` holding everything backpropagation needs.

Traces are per synapse and per postsynaptic unit, so a layer with ``U`` units
and ``I`` input channels carries a ``(U, I)`` trace matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import expit

from .errors import ShapeMismatchError


class Truncation(str, Enum):
    """The truncation applied to the decay pre-activation."""

    SIGMOID = "sigmoid"
    HARD_CLAMP01 = "hard_clamp01"

    def apply(self, a: np.ndarray) -> np.ndarray:
        if self is Truncation.SIGMOID:
            return expit(a)
        return np.clip(a, 0.0, 1.0)

    def derivative(self, a: np.ndarray) -> np.ndarray:
        # HardClamp01 uses the subgradient 1 strictly inside (0, 1) and 0 elsewhere.
        if self is Truncation.SIGMOID:
            s = expit(a)
            return s * (1.0 - s)
        return np.where((a > 0.0) & (a < 1.0), 1.0, 0.0)


class SurrogateKind(str, Enum):
    RECTANGULAR = "rectangular"
    TRIANGULAR = "triangular"
    SIGMOID_DERIVATIVE = "sigmoid_derivative"
    ATAN = "atan"


@dataclass(frozen=True)
class SurrogateSpec:
    """Stand-in for dz/dV, centred on the threshold with peak height ``1/width``.

    ``psi`` is the surrogate derivative and ``primal`` its antiderivative (a CDF
    rising from 0 to 1), used as the spike function of a smoothed network.
    """

    kind: SurrogateKind = SurrogateKind.TRIANGULAR
    width: float = 1.0

    def __post_init__(self) -> None:
        if not self.width > 0:
            raise ValueError("surrogate width must be positive")
        object.__setattr__(self, "kind", SurrogateKind(self.kind))

    def psi(self, v: np.ndarray, theta: float | np.ndarray) -> np.ndarray:
        x = np.asarray(v, dtype=np.float64) - theta
        w = self.width
        if self.kind is SurrogateKind.RECTANGULAR:
            return np.where(np.abs(x) <= w / 2.0, 1.0 / w, 0.0)
        if self.kind is SurrogateKind.TRIANGULAR:
            return np.maximum(0.0, 1.0 - np.abs(x) / w) / w
        if self.kind is SurrogateKind.SIGMOID_DERIVATIVE:
            k = 4.0 / w
            s = expit(k * x)
            return k * s * (1.0 - s)
        alpha = 2.0 / w
        return (alpha / 2.0) / (1.0 + (math.pi / 2.0 * alpha * x) ** 2)

    def primal(self, v: np.ndarray, theta: float | np.ndarray) -> np.ndarray:
        x = np.asarray(v, dtype=np.float64) - theta
        w = self.width
        if self.kind is SurrogateKind.RECTANGULAR:
            return np.clip(x / w + 0.5, 0.0, 1.0)
        if self.kind is SurrogateKind.TRIANGULAR:
            u = np.clip(x / w, -1.0, 1.0)
            return np.where(u <= 0.0, 0.5 * (1.0 + u) ** 2, 1.0 - 0.5 * (1.0 - u) ** 2)
        if self.kind is SurrogateKind.SIGMOID_DERIVATIVE:
            return expit(4.0 / w * x)
        alpha = 2.0 / w
        return 0.5 + np.arctan(math.pi / 2.0 * alpha * x) / math.pi


def _as_matrix(values: np.ndarray, name: str) -> np.ndarray:
    array = np.array(values, dtype=np.float64)
    if array.ndim != 2:
        raise ShapeMismatchError(f"{name} must be a 2-D matrix, got shape {array.shape}")
    return array


@dataclass
class DgnLayerParams:
    """Learnable and fixed parameters of one dynamic gated layer."""

    W: np.ndarray
    C: np.ndarray
    g_l: float = 0.1
    tau_s: float = 2.0
    dt: float = 1.0
    theta: float = 1.0
    static_gate_enabled: bool = True
    dynamic_gate_enabled: bool = True
    truncation: Truncation = Truncation.SIGMOID
    surrogate: SurrogateSpec = field(default_factory=SurrogateSpec)
    smoothed: bool = False
    feedforward_channels: int | None = None

    def __post_init__(self) -> None:
        self.W = _as_matrix(self.W, "W")
        self.C = _as_matrix(self.C, "C")
        if self.W.shape != self.C.shape:
            raise ShapeMismatchError(
                f"W and C must have identical shape, got {self.W.shape} and {self.C.shape}"
            )
        _check_positive(g_l=self.g_l, tau_s=self.tau_s, dt=self.dt, theta=self.theta)
        self.truncation = Truncation(self.truncation)
        _check_split(self.feedforward_channels, self.in_channels)

    @property
    def units(self) -> int:
        return self.W.shape[0]

    @property
    def in_channels(self) -> int:
        return self.W.shape[1]

    @property
    def trace_decay(self) -> float:
        return math.exp(-self.dt / self.tau_s)


@dataclass
class LifParams:
    """Leaky integrate-and-fire baseline with fixed decay ``exp(-g_l*dt)``.

    ``decay`` overrides the membrane decay factor when set.
    """

    W: np.ndarray
    g_l: float = 0.1
    tau_s: float = 2.0
    dt: float = 1.0
    theta: float = 1.0
    surrogate: SurrogateSpec = field(default_factory=SurrogateSpec)
    smoothed: bool = False
    decay: float | None = None
    feedforward_channels: int | None = None

    def __post_init__(self) -> None:
        self.W = _as_matrix(self.W, "W")
        _check_positive(g_l=self.g_l, tau_s=self.tau_s, dt=self.dt, theta=self.theta)
        if self.decay is not None and not 0.0 <= self.decay <= 1.0:
            raise ValueError("decay must lie in [0, 1]")
        _check_split(self.feedforward_channels, self.in_channels)

    @property
    def units(self) -> int:
        return self.W.shape[0]

    @property
    def in_channels(self) -> int:
        return self.W.shape[1]

    @property
    def trace_decay(self) -> float:
        return math.exp(-self.dt / self.tau_s)

    @property
    def membrane_decay(self) -> float:
        if self.decay is not None:
            return float(self.decay)
        return math.exp(-self.g_l * self.dt)


@dataclass
class AlifParams(LifParams):
    """LIF with threshold ``theta + beta * a`` where ``a`` traces the unit's own spikes."""

    beta: float = 0.2
    tau_adapt: float = 20.0

    def __post_init__(self) -> None:
        super().__post_init__()
        if self.beta < 0:
            raise ValueError("beta must be zero or greater")
        _check_positive(tau_adapt=self.tau_adapt)

    @property
    def adaptation_decay(self) -> float:
        return math.exp(-self.dt / self.tau_adapt)


LayerParams = DgnLayerParams | LifParams


def _check_positive(**values: float) -> None:
    for name, value in values.items():
        if not value > 0:
            raise ValueError(f"{name} must be positive, got {value!r}")


def _check_split(split: int | None, in_channels: int) -> None:
    if split is not None and not 0 <= split <= in_channels:
        raise ShapeMismatchError(f"feedforward_channels {split} outside [0, {in_channels}]")


@dataclass
class NeuronLayerState:
    D: np.ndarray
    V: np.ndarray
    z_prev: np.ndarray
    adaptation: np.ndarray | None = None

    @classmethod
    def zeros(cls, units: int, in_channels: int, adaptive: bool = False) -> "NeuronLayerState":
        """Initial state D(0)=0, V(0)=0, z(-1)=0."""
        return cls(
            D=np.zeros((units, in_channels)),
            V=np.zeros(units),
            z_prev=np.zeros(units),
            adaptation=np.zeros(units) if adaptive else None,
        )


@dataclass
class StepRecord:
    """Per-timestep values cached for BPTT."""

    D: np.ndarray
    rho: np.ndarray
    V: np.ndarray
    z: np.ndarray
    psi: np.ndarray
    pre_activation: np.ndarray
    threshold: np.ndarray
    adaptation: np.ndarray | None = None


def input_current(W: np.ndarray, D: np.ndarray, split: int | None = None) -> np.ndarray:
    """Per-unit sum over synapses of W_i * D_i.

    With ``split`` the first ``split`` (feedforward) columns are contracted on
    their own and the recurrent columns added afterwards, so zero recurrent
    weights leave the feedforward result bit-identical.
    """
    if split is None or split >= W.shape[1]:
        return np.einsum("ui,ui->u", W, D)
    current = np.einsum(
        "ui,ui->u", np.ascontiguousarray(W[:, :split]), np.ascontiguousarray(D[:, :split])
    )
    return current + np.einsum("ui,ui->u", W[:, split:], D[:, split:])


def synapse_trace_step(D_prev: np.ndarray, z_in: np.ndarray, params: LayerParams) -> np.ndarray:
    D_prev = np.asarray(D_prev, dtype=np.float64)
    z_in = np.asarray(z_in, dtype=np.float64)
    if D_prev.shape != params.W.shape:
        raise ShapeMismatchError(
            f"trace matrix has shape {D_prev.shape}, layer expects {params.W.shape}"
        )
    if z_in.shape != (params.in_channels,):
        raise ShapeMismatchError(
            f"input has shape {z_in.shape}, layer expects ({params.in_channels},)"
        )
    return params.trace_decay * D_prev + z_in[np.newaxis, :]


def decay_factor(D_t: np.ndarray, params: DgnLayerParams) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(rho, pre_activation)`` for the current traces."""
    if D_t.shape != params.C.shape:
        raise ShapeMismatchError(
            f"trace matrix has shape {D_t.shape}, layer expects {params.C.shape}"
        )
    pre = np.full(params.units, 1.0)
    # Disabled gates are skipped rather than multiplied by zero so that the
    # gate-off pre-activation is bit-identical to 1 - g_l*dt.
    if params.static_gate_enabled:
        pre = pre - params.g_l * params.dt
    if params.dynamic_gate_enabled:
        pre = pre - params.dt * input_current(params.C, D_t, params.feedforward_channels)
    return params.truncation.apply(pre), pre


def membrane_step(
    V_prev: np.ndarray,
    rho: np.ndarray,
    D_t: np.ndarray,
    z_out_prev: np.ndarray,
    params: LayerParams,
) -> np.ndarray:
    """Soft-reset membrane update; the reset uses the previous step's spikes."""
    current = input_current(params.W, D_t, params.feedforward_channels)
    return rho * V_prev + params.dt * current - params.theta * z_out_prev


def fire(
    V_t: np.ndarray,
    params: LayerParams,
    threshold: np.ndarray | float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Spike where ``V >= threshold``; smoothed layers emit the surrogate primal instead."""
    theta = params.theta if threshold is None else threshold
    if params.smoothed:
        z = params.surrogate.primal(V_t, theta)
    else:
        z = np.where(V_t >= theta, 1.0, 0.0)
    return z, params.surrogate.psi(V_t, theta)


def dgn_step(
    state: NeuronLayerState, z_in: np.ndarray, params: DgnLayerParams
) -> tuple[NeuronLayerState, StepRecord]:
    D = synapse_trace_step(state.D, z_in, params)
    rho, pre = decay_factor(D, params)
    V = membrane_step(state.V, rho, D, state.z_prev, params)
    z, psi = fire(V, params)
    record = StepRecord(
        D=D,
        rho=rho,
        V=V,
        z=z,
        psi=psi,
        pre_activation=pre,
        threshold=np.full(params.units, params.theta),
    )
    return NeuronLayerState(D=D, V=V, z_prev=z), record


def lif_step(
    state: NeuronLayerState, z_in: np.ndarray, params: LifParams
) -> tuple[NeuronLayerState, StepRecord]:
    D = synapse_trace_step(state.D, z_in, params)
    rho = np.full(params.units, params.membrane_decay)
    V = membrane_step(state.V, rho, D, state.z_prev, params)
    z, psi = fire(V, params)
    record = StepRecord(
        D=D,
        rho=rho,
        V=V,
        z=z,
        psi=psi,
        pre_activation=np.full(params.units, 1.0 - params.g_l * params.dt),
        threshold=np.full(params.units, params.theta),
    )
    return NeuronLayerState(D=D, V=V, z_prev=z), record


def alif_step(
    state: NeuronLayerState, z_in: np.ndarray, params: AlifParams
) -> tuple[NeuronLayerState, StepRecord]:
    a_prev = state.adaptation if state.adaptation is not None else np.zeros(params.units)
    a = params.adaptation_decay * a_prev + state.z_prev
    threshold = params.theta + params.beta * a
    D = synapse_trace_step(state.D, z_in, params)
    rho = np.full(params.units, params.membrane_decay)
    V = membrane_step(state.V, rho, D, state.z_prev, params)
    z, psi = fire(V, params, threshold=threshold)
    record = StepRecord(
        D=D,
        rho=rho,
        V=V,
        z=z,
        psi=psi,
        pre_activation=np.full(params.units, 1.0 - params.g_l * params.dt),
        threshold=threshold,
        adaptation=a,
    )
    return NeuronLayerState(D=D, V=V, z_prev=z, adaptation=a), record
