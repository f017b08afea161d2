"""Feedforward and recurrent networks of DGN/LIF/ALIF layers with an averaged readout."""
from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Mapping

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import NonFiniteError, ShapeMismatchError
from .neuron import (
    AlifParams,
    DgnLayerParams,
    LayerParams,
    LifParams,
    NeuronLayerState,
    StepRecord,
    alif_step,
    dgn_step,
    lif_step,
)


class NeuronKind(str, Enum):
    DGN = "dgn"
    LIF = "lif"
    ALIF = "alif"


StepFn = Callable[[NeuronLayerState, np.ndarray, LayerParams], tuple[NeuronLayerState, StepRecord]]

_STEP_FUNCTIONS: dict[NeuronKind, StepFn] = {
    NeuronKind.DGN: dgn_step,
    NeuronKind.LIF: lif_step,
    NeuronKind.ALIF: alif_step,
}

_PARAM_TYPES: dict[NeuronKind, type] = {
    NeuronKind.DGN: DgnLayerParams,
    NeuronKind.LIF: LifParams,
    NeuronKind.ALIF: AlifParams,
}


@dataclass
class LayerSpec:
    """One hidden layer.

    ``params.W``/``params.C`` hold the feedforward weights. Recurrent layers add
    ``W_rec`` (and ``C_rec`` for DGN) acting on the layer's own spikes from the
    previous step; self-connections on the diagonal are allowed.
    """

    neuron_kind: NeuronKind
    params: LayerParams
    recurrent: bool = False
    W_rec: np.ndarray | None = None
    C_rec: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.neuron_kind = NeuronKind(self.neuron_kind)
        expected = _PARAM_TYPES[self.neuron_kind]
        if type(self.params) is not expected:
            raise TypeError(
                f"{self.neuron_kind.value} layer needs {expected.__name__}, "
                f"got {type(self.params).__name__}"
            )
        units = self.units
        if self.recurrent:
            if self.W_rec is None:
                self.W_rec = np.zeros((units, units))
            self.W_rec = np.array(self.W_rec, dtype=np.float64)
            if self.W_rec.shape != (units, units):
                raise ShapeMismatchError(f"W_rec must be ({units}, {units}), got {self.W_rec.shape}")
            if self.has_conductance:
                if self.C_rec is None:
                    self.C_rec = np.zeros((units, units))
                self.C_rec = np.array(self.C_rec, dtype=np.float64)
                if self.C_rec.shape != (units, units):
                    raise ShapeMismatchError(
                        f"C_rec must be ({units}, {units}), got {self.C_rec.shape}"
                    )
            else:
                self.C_rec = None
        else:
            self.W_rec = None
            self.C_rec = None

    @property
    def units(self) -> int:
        return self.params.units

    @property
    def in_channels(self) -> int:
        return self.params.in_channels

    @property
    def has_conductance(self) -> bool:
        return self.neuron_kind is NeuronKind.DGN

    @property
    def total_inputs(self) -> int:
        return self.in_channels + (self.units if self.recurrent else 0)

    def step_params(self, smoothed: bool) -> LayerParams:
        """Parameters seen by the step function, recurrent channels appended."""
        changes: dict[str, object] = {"smoothed": smoothed}
        if self.recurrent:
            changes["feedforward_channels"] = self.in_channels
            changes["W"] = np.hstack([self.params.W, self.W_rec])
            if self.has_conductance:
                changes["C"] = np.hstack([self.params.C, self.C_rec])
        return dataclasses.replace(self.params, **changes)

    def step(self, state: NeuronLayerState, z_in: np.ndarray, params: LayerParams):
        return _STEP_FUNCTIONS[self.neuron_kind](state, z_in, params)

    def initial_state(self) -> NeuronLayerState:
        return NeuronLayerState.zeros(
            self.units, self.total_inputs, adaptive=self.neuron_kind is NeuronKind.ALIF
        )


@dataclass
class NetworkConfig:
    """Layers, readout weights ``W_L`` (readout_dim x last units) and metadata."""

    layers: list[LayerSpec]
    readout_dim: int
    input_channels: int
    W_L: np.ndarray
    smoothed: bool = False
    init_seed: int | None = None

    def __post_init__(self) -> None:
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        if self.readout_dim < 1 or self.input_channels < 1:
            raise ValueError("readout_dim and input_channels must be positive")
        expected_in = self.input_channels
        for index, layer in enumerate(self.layers):
            if layer.in_channels != expected_in:
                raise ShapeMismatchError(
                    f"layer {index} expects {layer.in_channels} inputs, previous stage provides {expected_in}"
                )
            expected_in = layer.units
        self.W_L = np.array(self.W_L, dtype=np.float64)
        if self.W_L.shape != (self.readout_dim, expected_in):
            raise ShapeMismatchError(
                f"W_L must be ({self.readout_dim}, {expected_in}), got {self.W_L.shape}"
            )

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays keyed by path, in a fixed order. Values are live references."""
        params: dict[str, np.ndarray] = {}
        for index, layer in enumerate(self.layers):
            prefix = f"layers.{index}"
            params[f"{prefix}.W"] = layer.params.W
            if layer.has_conductance:
                params[f"{prefix}.C"] = layer.params.C
            if layer.recurrent:
                params[f"{prefix}.W_rec"] = layer.W_rec
                if layer.has_conductance:
                    params[f"{prefix}.C_rec"] = layer.C_rec
        params["readout.W_L"] = self.W_L
        return params

    def with_parameters(self, values: Mapping[str, np.ndarray]) -> "NetworkConfig":
        """Deep copy with the named arrays replaced."""
        clone = copy.deepcopy(self)
        for name, array in values.items():
            _assign(clone, name, np.array(array, dtype=np.float64))
        return clone

    def with_smoothing(self, smoothed: bool = True) -> "NetworkConfig":
        clone = copy.deepcopy(self)
        clone.smoothed = smoothed
        return clone


def _assign(net: NetworkConfig, name: str, array: np.ndarray) -> None:
    current = net.parameters().get(name)
    if current is None:
        raise KeyError(f"unknown parameter {name!r}")
    if current.shape != array.shape:
        raise ShapeMismatchError(f"{name} must have shape {current.shape}, got {array.shape}")
    if name == "readout.W_L":
        net.W_L = array
        return
    _, index, attr = name.split(".")
    layer = net.layers[int(index)]
    if attr in ("W", "C"):
        setattr(layer.params, attr, array)
    else:
        setattr(layer, attr, array)


@dataclass
class ForwardCache:
    """Everything the backward passes need: per-layer records and inputs for every step."""

    inputs: np.ndarray
    layer_inputs: list[np.ndarray]
    records: list[list[StepRecord]]
    o: np.ndarray

    @property
    def T(self) -> int:
        return self.inputs.shape[0]


@dataclass
class ReadoutResult:
    o: np.ndarray
    y_pred: np.ndarray
    loss: float | None = None


def _values(x) -> np.ndarray:
    values = getattr(x, "values", x)
    return np.asarray(values, dtype=np.float64)


def forward(net: NetworkConfig, x) -> tuple[ReadoutResult, ForwardCache]:
    """Run the network over all timesteps of ``x`` (channels x timesteps)."""
    values = _values(x)
    if values.ndim != 2 or values.shape[0] != net.input_channels:
        raise ShapeMismatchError(
            f"input must be ({net.input_channels}, timesteps), got {values.shape}"
        )
    T = values.shape[1]
    step_params = [layer.step_params(net.smoothed) for layer in net.layers]
    states = [layer.initial_state() for layer in net.layers]
    records: list[list[StepRecord]] = [[] for _ in net.layers]
    layer_inputs = [np.zeros((T, layer.total_inputs)) for layer in net.layers]
    o = np.zeros((T, net.readout_dim))

    for t in range(T):
        z = values[:, t]
        for index, layer in enumerate(net.layers):
            if layer.recurrent:
                z = np.concatenate([z, states[index].z_prev])
            layer_inputs[index][t] = z
            states[index], record = layer.step(states[index], z, step_params[index])
            if not np.all(np.isfinite(record.V)):
                raise NonFiniteError(index, t, "V")
            records[index].append(record)
            z = record.z
        o[t] = net.W_L @ z

    y_pred = o.mean(axis=0)
    cache = ForwardCache(
        inputs=values.T.copy(), layer_inputs=layer_inputs, records=records, o=o
    )
    return ReadoutResult(o=o, y_pred=y_pred), cache


def loss(y_pred: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """Softmax cross-entropy on the averaged readout and its gradient."""
    y_pred = np.asarray(y_pred, dtype=np.float64)
    if not 0 <= label < y_pred.shape[0]:
        raise ValueError(f"label {label} out of range for {y_pred.shape[0]} classes")
    value = float(-log_softmax(y_pred)[label])
    grad = softmax(y_pred)
    grad[label] -= 1.0
    return value, grad


def predict(net: NetworkConfig, x) -> int:
    """Argmax of the averaged readout; ties go to the lowest index."""
    result, _ = forward(net, x)
    return int(np.argmax(result.y_pred))
