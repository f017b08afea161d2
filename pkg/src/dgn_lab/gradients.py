"""Gradients of the averaged-readout loss: two analytic paths and a finite-difference oracle.

``bptt_closed_form`` carries forward sensitivities of every membrane potential
with respect to every hidden parameter through time, so dV^t/dW and dV^t/dC
follow the recursion with factor ``rho^t - theta * Psi^{t-1}`` for a single
layer. ``bptt_reverse_mode`` walks the unrolled graph backwards. Both use the
same cut: dz/dV is the cached surrogate value and nothing else flows through
the Heaviside.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np

from .errors import CacheError, GradientCheckError, ShapeMismatchError
from .network import ForwardCache, LayerSpec, NetworkConfig, NeuronKind, forward, loss
from .neuron import AlifParams, DgnLayerParams, LifParams, SurrogateKind, SurrogateSpec
from .rng import derive_rng

logger = logging.getLogger(__name__)

DUAL_PATH_TOLERANCE = 1e-10
FINITE_DIFFERENCE_TOLERANCE = 1e-5


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 0.0) -> float:
    """``max|a - b| / max(max|a|, max|b|)``; zero when both tensors are zero."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"cannot compare shapes {a.shape} and {b.shape}")
    if a.size == 0:
        return 0.0
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), floor)
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(a - b))) / scale


@dataclass
class LayerGradients:
    dW: np.ndarray
    dC: np.ndarray | None = None
    dW_rec: np.ndarray | None = None
    dC_rec: np.ndarray | None = None


@dataclass
class GradientSet:
    """Gradients for every trainable array of a network, keyed like ``NetworkConfig.parameters``."""

    layers: list[LayerGradients]
    dW_L: np.ndarray

    @classmethod
    def zeros_like(cls, net: NetworkConfig) -> "GradientSet":
        return cls.from_dict({name: np.zeros_like(value) for name, value in net.parameters().items()})

    @classmethod
    def from_dict(cls, values: Mapping[str, np.ndarray]) -> "GradientSet":
        layers: dict[int, dict[str, np.ndarray]] = {}
        dW_L = None
        for name, array in values.items():
            if name == "readout.W_L":
                dW_L = np.asarray(array, dtype=np.float64)
                continue
            _, index, attr = name.split(".")
            layers.setdefault(int(index), {})["d" + attr] = np.asarray(array, dtype=np.float64)
        if dW_L is None:
            raise KeyError("gradients need a readout.W_L entry")
        ordered = [LayerGradients(**layers[index]) for index in sorted(layers)]
        return cls(layers=ordered, dW_L=dW_L)

    def as_dict(self) -> dict[str, np.ndarray]:
        values: dict[str, np.ndarray] = {}
        for index, layer in enumerate(self.layers):
            for attr in ("W", "C", "W_rec", "C_rec"):
                array = getattr(layer, "d" + attr)
                if array is not None:
                    values[f"layers.{index}.{attr}"] = array
        values["readout.W_L"] = self.dW_L
        return values

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self.as_dict().items())

    def __add__(self, other: "GradientSet") -> "GradientSet":
        mine, theirs = self.as_dict(), other.as_dict()
        if mine.keys() != theirs.keys():
            raise ShapeMismatchError("gradient sets describe different networks")
        return GradientSet.from_dict({name: mine[name] + theirs[name] for name in mine})

    def scaled(self, factor: float) -> "GradientSet":
        return GradientSet.from_dict({name: factor * value for name, value in self})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(value)) for _, value in self)

    def relative_errors(self, other: "GradientSet", floor: float = 0.0) -> dict[str, float]:
        mine, theirs = self.as_dict(), other.as_dict()
        if mine.keys() != theirs.keys():
            raise ShapeMismatchError("gradient sets describe different networks")
        return {name: relative_error(mine[name], theirs[name], floor) for name in mine}

    def max_relative_error(self, other: "GradientSet", floor: float = 0.0) -> float:
        return max(self.relative_errors(other, floor).values())


def _check_cache(cache: ForwardCache, net: NetworkConfig) -> None:
    if len(cache.records) != len(net.layers):
        raise CacheError(
            f"cache holds {len(cache.records)} layers, network has {len(net.layers)}"
        )
    for index, (layer, records) in enumerate(zip(net.layers, cache.records)):
        if len(records) != cache.T:
            raise CacheError(f"layer {index} cached {len(records)} of {cache.T} timesteps")
        if layer.neuron_kind is NeuronKind.ALIF and any(r.adaptation is None for r in records):
            raise CacheError(f"layer {index} is adaptive but the cache lacks adaptation traces")
    if cache.o.shape != (cache.T, net.readout_dim):
        raise CacheError(f"cached readout has shape {cache.o.shape}")


def _split_full(layer: LayerSpec, full: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    n_ff = layer.in_channels
    if layer.recurrent:
        return full[:, :n_ff].copy(), full[:, n_ff:].copy()
    return full, None


def _readout_gradient(net: NetworkConfig, cache: ForwardCache, dLdy: np.ndarray):
    dEdo = np.asarray(dLdy, dtype=np.float64) / cache.T
    if dEdo.shape != (net.readout_dim,):
        raise ShapeMismatchError(f"dL/dy_pred must have shape ({net.readout_dim},)")
    z_sum = np.sum([record.z for record in cache.records[-1]], axis=0)
    return dEdo, np.outer(dEdo, z_sum)


def backward(
    net: NetworkConfig,
    cache: ForwardCache,
    dLdy: np.ndarray,
    include_c_path: bool = True,
) -> tuple[GradientSet, np.ndarray]:
    """Reverse sweep returning parameter gradients and the input adjoint (channels x T).

    ``include_c_path=False`` drops the adjoint flowing from the decay gate back
    into the traces, i.e. the input's influence on ``rho``. Parameter gradients
    of the layer itself are unaffected; lower layers and the input adjoint only
    see the current pathway.
    """
    _check_cache(cache, net)
    T = cache.T
    dEdo, dW_L = _readout_gradient(net, cache, dLdy)
    gz_ext = np.tile(net.W_L.T @ dEdo, (T, 1))
    layer_grads: list[LayerGradients] = [None] * len(net.layers)  # type: ignore[list-item]

    for index in reversed(range(len(net.layers))):
        layer = net.layers[index]
        params = layer.step_params(net.smoothed)
        records = cache.records[index]
        units, inputs = params.W.shape
        n_ff = layer.in_channels
        trace_decay = params.trace_decay
        adaptive = isinstance(params, AlifParams)
        gated = isinstance(params, DgnLayerParams) and params.dynamic_gate_enabled

        dW_full = np.zeros((units, inputs))
        dC_full = np.zeros((units, inputs))
        gx = np.zeros((T, inputs))
        gV_next = np.zeros(units)
        gD_next = np.zeros((units, inputs))
        gA_next = np.zeros(units)
        gx_next = np.zeros(inputs)
        rho_next = np.zeros(units)

        for t in reversed(range(T)):
            record = records[t]
            gz = gz_ext[t] - params.theta * gV_next
            if layer.recurrent:
                gz = gz + gx_next[n_ff:]
            if adaptive:
                gz = gz + gA_next
            gV = record.psi * gz + rho_next * gV_next
            gD = trace_decay * gD_next + params.dt * params.W * gV[:, None]
            dW_full += params.dt * gV[:, None] * record.D
            if gated:
                V_prev = records[t - 1].V if t > 0 else np.zeros(units)
                gpre = gV * V_prev * params.truncation.derivative(record.pre_activation)
                dC_full -= params.dt * gpre[:, None] * record.D
                if include_c_path:
                    gD = gD - params.dt * params.C * gpre[:, None]
            if adaptive:
                gA_next = params.adaptation_decay * gA_next - params.beta * record.psi * gz
            gx[t] = gD.sum(axis=0)
            gV_next, gD_next, gx_next, rho_next = gV, gD, gx[t], record.rho

        dW, dW_rec = _split_full(layer, dW_full)
        grads = LayerGradients(dW=dW, dW_rec=dW_rec)
        if layer.has_conductance:
            grads.dC, grads.dC_rec = _split_full(layer, dC_full)
        layer_grads[index] = grads
        gz_ext = gx[:, :n_ff]

    return GradientSet(layers=layer_grads, dW_L=dW_L), gz_ext.T.copy()


def bptt_reverse_mode(cache: ForwardCache, dLdy: np.ndarray, net: NetworkConfig) -> GradientSet:
    grads, _ = backward(net, cache, dLdy)
    return grads


@dataclass
class _LayerLayout:
    w_index: np.ndarray
    c_index: np.ndarray | None


def _parameter_layout(net: NetworkConfig) -> tuple[list[_LayerLayout], dict[str, slice], int]:
    """Flat positions of every hidden parameter, in ``NetworkConfig.parameters`` order."""
    slices: dict[str, slice] = {}
    offset = 0
    for name, array in net.parameters().items():
        if name == "readout.W_L":
            continue
        slices[name] = slice(offset, offset + array.size)
        offset += array.size

    def index_block(name: str, shape: tuple[int, int]) -> np.ndarray:
        return np.arange(slices[name].start, slices[name].stop).reshape(shape)

    layouts = []
    for index, layer in enumerate(net.layers):
        prefix = f"layers.{index}"
        units, n_ff = layer.units, layer.in_channels

        def full_index(attr: str) -> np.ndarray:
            blocks = [index_block(f"{prefix}.{attr}", (units, n_ff))]
            if layer.recurrent:
                blocks.append(index_block(f"{prefix}.{attr}_rec", (units, units)))
            return np.hstack(blocks)

        layouts.append(
            _LayerLayout(
                w_index=full_index("W"),
                c_index=full_index("C") if layer.has_conductance else None,
            )
        )
    return layouts, slices, offset


def bptt_closed_form(cache: ForwardCache, dLdy: np.ndarray, net: NetworkConfig) -> GradientSet:
    """Forward-accumulated sensitivities contracted with the explicit readout partials.

    Per layer the recursion tracks dV^t/dtheta (units x params), the trace
    sensitivities driven by lower-layer and recurrent spike sensitivities, and
    for adaptive layers the threshold-trace sensitivity. The result is
    ``sum_t (dE/do_t) W_L dz_L^t/dtheta``.
    """
    _check_cache(cache, net)
    T = cache.T
    dEdo, dW_L = _readout_gradient(net, cache, dLdy)
    layouts, slices, n_params = _parameter_layout(net)
    lower: list[np.ndarray] | None = None

    for index, layer in enumerate(net.layers):
        params = layer.step_params(net.smoothed)
        records = cache.records[index]
        layout = layouts[index]
        units, inputs = params.W.shape
        n_ff = layer.in_channels
        rows = np.repeat(np.arange(units), inputs)
        w_cols = layout.w_index.ravel()
        adaptive = isinstance(params, AlifParams)
        gated = isinstance(params, DgnLayerParams) and params.dynamic_gate_enabled

        V_sens = np.zeros((units, n_params))
        Z_prev = np.zeros((units, n_params))
        D_sens = np.zeros((inputs, n_params))
        A_sens = np.zeros((units, n_params))
        outputs: list[np.ndarray] = []

        for t in range(T):
            record = records[t]
            x_sens = np.zeros((inputs, n_params))
            if lower is not None:
                x_sens[:n_ff] = lower[t]
            if layer.recurrent:
                x_sens[n_ff:] = Z_prev
            D_sens = params.trace_decay * D_sens + x_sens

            V_new = record.rho[:, None] * V_sens + params.dt * (params.W @ D_sens)
            V_new -= params.theta * Z_prev
            V_new[rows, w_cols] += params.dt * record.D.ravel()
            if gated:
                pre_sens = -params.dt * (params.C @ D_sens)
                pre_sens[rows, layout.c_index.ravel()] -= params.dt * record.D.ravel()
                V_prev = records[t - 1].V if t > 0 else np.zeros(units)
                slope = V_prev * params.truncation.derivative(record.pre_activation)
                V_new += slope[:, None] * pre_sens

            if adaptive:
                A_sens = params.adaptation_decay * A_sens + Z_prev
                Z = record.psi[:, None] * (V_new - params.beta * A_sens)
            else:
                Z = record.psi[:, None] * V_new

            V_sens, Z_prev = V_new, Z
            outputs.append(Z)
        lower = outputs

    flat = (dEdo @ net.W_L) @ np.sum(lower, axis=0)
    values = {
        name: flat[span].reshape(net.parameters()[name].shape) for name, span in slices.items()
    }
    values["readout.W_L"] = dW_L
    return GradientSet.from_dict(values)


def sample_gradient(
    net: NetworkConfig, x, label: int, method: str = "reverse"
) -> tuple[float, GradientSet, np.ndarray]:
    """Forward, loss and backward for one sample. Returns ``(loss, grads, y_pred)``."""
    result, cache = forward(net, x)
    value, dLdy = loss(result.y_pred, label)
    if method == "reverse":
        grads = bptt_reverse_mode(cache, dLdy, net)
    elif method == "closed_form":
        grads = bptt_closed_form(cache, dLdy, net)
    else:
        raise ValueError(f"unknown gradient method {method!r}")
    return value, grads, result.y_pred


def finite_difference_grad(net: NetworkConfig, x, label: int, h: float = 1e-5) -> GradientSet:
    """Central differences of the loss for every parameter of a smoothed network.

    The network passed in is left untouched; perturbations happen on a copy.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError(f"h must lie in [1e-6, 1e-4], got {h}")
    if not net.smoothed:
        raise ValueError("finite differences need a smoothed network (net.smoothed=True)")
    work = copy.deepcopy(net)

    def evaluate() -> float:
        result, _ = forward(work, x)
        value, _ = loss(result.y_pred, label)
        if not np.isfinite(value):
            raise GradientCheckError(f"non-finite loss {value!r} while differencing")
        return value

    grads: dict[str, np.ndarray] = {}
    for name, array in work.parameters().items():
        grad = np.zeros_like(array)
        for idx in np.ndindex(array.shape):
            original = array[idx]
            array[idx] = original + h
            plus = evaluate()
            array[idx] = original - h
            minus = evaluate()
            array[idx] = original
            grad[idx] = (plus - minus) / (2.0 * h)
        grads[name] = grad
    return GradientSet.from_dict(grads)


@dataclass
class GradcheckCase:
    name: str
    check: str
    errors: dict[str, float]
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.errors.values())

    @property
    def worst_parameter(self) -> str:
        return max(self.errors, key=self.errors.get)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tolerance


@dataclass
class GradcheckReport:
    cases: list[GradcheckCase] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(case.passed for case in self.cases)

    def failures(self) -> list[GradcheckCase]:
        return [case for case in self.cases if not case.passed]

    def worst(self, check: str) -> float:
        errors = [case.worst for case in self.cases if case.check == check]
        return max(errors) if errors else 0.0

    def per_layer_worst(self) -> dict[str, float]:
        """Worst error grouped by ``layers.<i>`` or ``readout``."""
        worst: dict[str, float] = {}
        for case in self.cases:
            for name, error in case.errors.items():
                group = name.rsplit(".", 1)[0]
                worst[group] = max(worst.get(group, 0.0), error)
        return worst


def random_network(
    rng: np.random.Generator,
    kinds: tuple[NeuronKind, ...] = (NeuronKind.DGN,),
    recurrent: bool = False,
    units: int = 4,
    channels: int = 6,
    classes: int = 3,
    smoothed: bool = False,
    surrogate: SurrogateSpec | None = None,
) -> NetworkConfig:
    """Small network with weights large enough that units fire within a few steps."""
    surrogate = surrogate or SurrogateSpec(SurrogateKind.SIGMOID_DERIVATIVE, 1.0)
    layers = []
    in_channels = channels
    for kind in kinds:
        W = rng.uniform(0.0, 1.0, size=(units, in_channels))
        common = dict(g_l=0.1, tau_s=2.0, dt=1.0, theta=1.0, surrogate=surrogate)
        if kind is NeuronKind.DGN:
            params = DgnLayerParams(W=W, C=rng.uniform(0.0, 0.2, size=W.shape), **common)
        elif kind is NeuronKind.ALIF:
            params = AlifParams(W=W, beta=0.3, tau_adapt=5.0, **common)
        else:
            params = LifParams(W=W, **common)
        layer = LayerSpec(neuron_kind=kind, params=params, recurrent=recurrent)
        if recurrent:
            layer.W_rec = rng.uniform(-0.5, 0.5, size=(units, units))
            if layer.has_conductance:
                layer.C_rec = rng.uniform(0.0, 0.1, size=(units, units))
        layers.append(layer)
        in_channels = units
    W_L = rng.uniform(-1.0, 1.0, size=(classes, units))
    return NetworkConfig(
        layers=layers, readout_dim=classes, input_channels=channels, W_L=W_L, smoothed=smoothed
    )


def random_input(rng: np.random.Generator, channels: int, timesteps: int, rate: float = 0.3):
    return (rng.random((channels, timesteps)) < rate).astype(np.float64)


_CASE_SHAPES = [
    ((NeuronKind.DGN,), False),
    ((NeuronKind.DGN,), True),
    ((NeuronKind.DGN, NeuronKind.DGN), False),
    ((NeuronKind.DGN, NeuronKind.LIF), True),
    ((NeuronKind.ALIF,), False),
    ((NeuronKind.LIF, NeuronKind.DGN), False),
    ((NeuronKind.ALIF, NeuronKind.DGN), True),
]


def run_gradcheck(
    seed: int = 0,
    cases: int = 20,
    fd_cases: int = 2,
    h: float = 1e-5,
    dual_tolerance: float = DUAL_PATH_TOLERANCE,
    fd_tolerance: float = FINITE_DIFFERENCE_TOLERANCE,
    mutate: Callable[[GradientSet], GradientSet] | None = None,
) -> GradcheckReport:
    """Compare closed-form against reverse-mode on random nets, then both against FD.

    ``mutate`` is applied to every closed-form gradient before comparison; it
    exists so tests can inject a bug and watch the checker fail.
    """
    report = GradcheckReport()
    for case in range(cases):
        rng = derive_rng(seed, case)
        kinds, recurrent = _CASE_SHAPES[case % len(_CASE_SHAPES)]
        units = int(rng.integers(2, 9))
        timesteps = int(rng.integers(2, 11))
        net = random_network(rng, kinds, recurrent=recurrent, units=units)
        x = random_input(rng, net.input_channels, timesteps)
        label = int(rng.integers(net.readout_dim))
        result, cache = forward(net, x)
        _, dLdy = loss(result.y_pred, label)
        closed = bptt_closed_form(cache, dLdy, net)
        if mutate is not None:
            closed = mutate(closed)
        reverse = bptt_reverse_mode(cache, dLdy, net)
        errors = closed.relative_errors(reverse, floor=1e-12)
        name = f"case{case}-{'-'.join(k.value for k in kinds)}{'-rec' if recurrent else ''}"
        report.cases.append(GradcheckCase(name, "dual-path", errors, dual_tolerance))
        logger.debug("%s dual-path worst %.3e", name, max(errors.values()))

    for case in range(fd_cases):
        rng = derive_rng(seed, cases + case)
        net = random_network(
            rng,
            (NeuronKind.DGN,),
            recurrent=bool(case % 2),
            units=4,
            smoothed=True,
            surrogate=SurrogateSpec(SurrogateKind.SIGMOID_DERIVATIVE, 1.0),
        )
        x = random_input(rng, net.input_channels, 8)
        label = int(rng.integers(net.readout_dim))
        _, analytic, _ = sample_gradient(net, x, label, method="closed_form")
        if mutate is not None:
            analytic = mutate(analytic)
        numeric = finite_difference_grad(net, x, label, h=h)
        errors = analytic.relative_errors(numeric, floor=1e-4)
        name = f"fd{case}-dgn{'-rec' if case % 2 else ''}"
        report.cases.append(GradcheckCase(name, "finite-difference", errors, fd_tolerance))
        logger.debug("%s finite-difference worst %.3e", name, max(errors.values()))
    return report
