"""Weight initialisation, Adam, and the minibatch training loop."""
from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from .data import SpikeDataset
from .errors import NonFiniteError, TrainingCancelledError, TrainingDivergedError
from .gradients import GradientSet, sample_gradient
from .network import LayerSpec, NetworkConfig, NeuronKind, forward, loss
from .neuron import (
    AlifParams,
    DgnLayerParams,
    LifParams,
    SurrogateKind,
    SurrogateSpec,
    Truncation,
)
from .parallel import parallel_map
from .rng import STREAM_INIT, STREAM_SHUFFLE, derive_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class UniformInit:
    """Uniform draws in ``[center - delta, center + delta]``."""

    center: float = 0.01
    delta: float = 0.005

    def __post_init__(self) -> None:
        if self.delta < 0:
            raise ValueError("init delta must be zero or greater")

    def sample(self, rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
        if self.delta == 0:
            return np.full(shape, float(self.center))
        return rng.uniform(self.center - self.delta, self.center + self.delta, size=shape)


@dataclass(frozen=True)
class InitSpec:
    w: UniformInit = field(default_factory=UniformInit)
    c: UniformInit = field(default_factory=UniformInit)


def init_weights(
    shape: tuple[int, int],
    c_spec: UniformInit,
    w_spec: UniformInit,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``W`` then ``C`` from the same generator."""
    W = w_spec.sample(rng, shape)
    C = c_spec.sample(rng, shape)
    return W, C


@dataclass(frozen=True)
class ModelSpec:
    """Architecture and neuron constants used to build a fresh network."""

    neuron_kind: NeuronKind = NeuronKind.DGN
    hidden: tuple[int, ...] = (16,)
    recurrent: bool = False
    g_l: float = 0.1
    tau_s: float = 2.0
    dt: float = 1.0
    theta: float = 1.0
    truncation: Truncation = Truncation.SIGMOID
    surrogate: SurrogateKind = SurrogateKind.TRIANGULAR
    surrogate_width: float = 1.0
    static_gate_enabled: bool = True
    dynamic_gate_enabled: bool = True
    beta: float = 0.2
    tau_adapt: float = 20.0
    smoothed: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "neuron_kind", NeuronKind(self.neuron_kind))
        object.__setattr__(self, "truncation", Truncation(self.truncation))
        object.__setattr__(self, "surrogate", SurrogateKind(self.surrogate))
        object.__setattr__(self, "hidden", tuple(int(units) for units in self.hidden))
        if not self.hidden or min(self.hidden) < 1:
            raise ValueError("hidden must list at least one positive layer size")


def _layer_params(model: ModelSpec, W: np.ndarray, C: np.ndarray):
    surrogate = SurrogateSpec(model.surrogate, model.surrogate_width)
    common = dict(
        g_l=model.g_l,
        tau_s=model.tau_s,
        dt=model.dt,
        theta=model.theta,
        surrogate=surrogate,
        smoothed=model.smoothed,
    )
    if model.neuron_kind is NeuronKind.DGN:
        return DgnLayerParams(
            W=W,
            C=C,
            static_gate_enabled=model.static_gate_enabled,
            dynamic_gate_enabled=model.dynamic_gate_enabled,
            truncation=model.truncation,
            **common,
        )
    if model.neuron_kind is NeuronKind.ALIF:
        return AlifParams(W=W, beta=model.beta, tau_adapt=model.tau_adapt, **common)
    return LifParams(W=W, **common)


def init_network(
    model: ModelSpec,
    input_channels: int,
    classes: int,
    init: InitSpec,
    seed: int,
) -> NetworkConfig:
    """Fresh network; the readout is uniform in ``+-1/sqrt(units)``."""
    rng = derive_rng(seed, STREAM_INIT)
    layers = []
    in_channels = input_channels
    for units in model.hidden:
        W, C = init_weights((units, in_channels), init.c, init.w, rng)
        layer = LayerSpec(
            neuron_kind=model.neuron_kind,
            params=_layer_params(model, W, C),
            recurrent=model.recurrent,
        )
        if model.recurrent:
            layer.W_rec, C_rec = init_weights((units, units), init.c, init.w, rng)
            if layer.has_conductance:
                layer.C_rec = C_rec
        layers.append(layer)
        in_channels = units
    bound = 1.0 / math.sqrt(in_channels)
    W_L = rng.uniform(-bound, bound, size=(classes, in_channels))
    return NetworkConfig(
        layers=layers,
        readout_dim=classes,
        input_channels=input_channels,
        W_L=W_L,
        smoothed=model.smoothed,
        init_seed=seed,
    )


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.lr < 0:
            raise ValueError("lr must be zero or greater")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray] | GradientSet,
    state: AdamState,
) -> dict[str, np.ndarray]:
    """Bias-corrected Adam update. Advances ``state`` and returns new arrays."""
    grad_map = grads.as_dict() if isinstance(grads, GradientSet) else grads
    state.step += 1
    bias1 = 1.0 - state.beta1**state.step
    bias2 = 1.0 - state.beta2**state.step
    updated = {}
    for name, value in params.items():
        grad = grad_map[name]
        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        m_hat = m / bias1
        v_hat = v / bias2
        updated[name] = value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 64
    lr: float = 0.001
    batch_size: int = 16
    seed: int = 0
    shuffle: bool = True
    init: InitSpec = field(default_factory=InitSpec)
    gradient_method: str = "reverse"

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.lr < 0:
            raise ValueError("lr must be zero or greater")
        if self.gradient_method not in ("reverse", "closed_form"):
            raise ValueError(f"unknown gradient method {self.gradient_method!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    eval_acc: float | None = None

    def as_dict(self) -> dict[str, float | int | None]:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "train_acc": self.train_acc,
            "eval_acc": self.eval_acc,
        }


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def final(self) -> EpochRecord | None:
        return self.records[-1] if self.records else None


@dataclass
class TrainProgress:
    epoch: int = 0
    batches_done: int = 0
    samples_seen: int = 0
    last_loss: float | None = None


@dataclass
class Evaluation:
    accuracy: float
    loss: float
    predictions: list[int]


def _evaluate_one(net: NetworkConfig, sample) -> tuple[float, int]:
    result, _ = forward(net, sample.x)
    value, _ = loss(result.y_pred, sample.label)
    return value, int(np.argmax(result.y_pred))


def evaluate(net: NetworkConfig, dataset: SpikeDataset | Iterable, threads: int = 1) -> Evaluation:
    """Clean accuracy and mean loss."""
    samples = list(dataset)
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    outcomes = parallel_map(lambda sample: _evaluate_one(net, sample), samples, threads)
    predictions = [prediction for _, prediction in outcomes]
    correct = sum(int(p == s.label) for p, s in zip(predictions, samples))
    mean_loss = float(np.mean([value for value, _ in outcomes]))
    return Evaluation(accuracy=correct / len(samples), loss=mean_loss, predictions=predictions)


def accuracy(net: NetworkConfig, dataset: SpikeDataset | Iterable, threads: int = 1) -> float:
    return evaluate(net, dataset, threads).accuracy


class Trainer:
    """Minibatch Adam training with cancellation and progress callbacks.

    Cancellation is checked between batches; a cancelled run raises
    ``TrainingCancelledError`` and leaves the network passed to ``train``
    untouched.
    """

    def __init__(self, config: TrainConfig | None = None, threads: int = 1):
        self.config = config or TrainConfig()
        self.threads = threads
        self._cancel_event = threading.Event()
        self._progress = TrainProgress()
        self._progress_callback: Callable[[TrainProgress], None] | None = None

    def cancel(self) -> None:
        self._cancel_event.set()

    def is_cancelled(self) -> bool:
        return self._cancel_event.is_set()

    def set_progress_callback(self, callback: Callable[[TrainProgress], None]) -> None:
        self._progress_callback = callback

    def _check_cancelled(self) -> None:
        if self.is_cancelled():
            raise TrainingCancelledError("Training was cancelled by user")

    def _batch_gradient(self, net: NetworkConfig, batch: list, epoch: int, batch_index: int):
        method = self.config.gradient_method

        def run(sample):
            try:
                return sample_gradient(net, sample.x, sample.label, method=method)
            except NonFiniteError as exc:
                raise TrainingDivergedError(epoch, batch_index, math.nan) from exc

        results = parallel_map(run, batch, self.threads)
        total = results[0][1]
        for _, grads, _ in results[1:]:
            total = total + grads
        losses = [value for value, _, _ in results]
        correct = sum(
            int(np.argmax(y_pred) == sample.label) for (_, _, y_pred), sample in zip(results, batch)
        )
        mean_loss = float(np.mean(losses))
        if not math.isfinite(mean_loss) or not total.is_finite():
            raise TrainingDivergedError(epoch, batch_index, mean_loss)
        return total.scaled(1.0 / len(batch)), losses, correct

    def train(
        self,
        net: NetworkConfig,
        dataset: SpikeDataset,
        eval_dataset: SpikeDataset | None = None,
    ) -> tuple[NetworkConfig, TrainHistory]:
        if len(dataset) == 0:
            raise ValueError("cannot train on an empty dataset")
        self._progress = TrainProgress()
        config = self.config
        state = AdamState(lr=config.lr)
        params = {name: value.copy() for name, value in net.parameters().items()}
        current = net.with_parameters(params)
        history = TrainHistory()

        for epoch in range(1, config.epochs + 1):
            order = np.arange(len(dataset))
            if config.shuffle:
                order = derive_rng(config.seed, STREAM_SHUFFLE, epoch).permutation(len(dataset))
            epoch_losses: list[float] = []
            epoch_correct = 0
            for batch_index, start in enumerate(range(0, len(order), config.batch_size)):
                self._check_cancelled()
                batch = [dataset[int(i)] for i in order[start : start + config.batch_size]]
                grads, losses, correct = self._batch_gradient(current, batch, epoch, batch_index)
                params = adam_step(params, grads, state)
                current = current.with_parameters(params)
                epoch_losses.extend(losses)
                epoch_correct += correct
                self._progress.epoch = epoch
                self._progress.batches_done += 1
                self._progress.samples_seen += len(batch)
                self._progress.last_loss = float(np.mean(losses))
                if self._progress_callback:
                    self._progress_callback(self._progress)

            record = EpochRecord(
                epoch=epoch,
                train_loss=float(np.mean(epoch_losses)),
                train_acc=epoch_correct / len(dataset),
            )
            if eval_dataset is not None and len(eval_dataset):
                record.eval_acc = accuracy(current, eval_dataset, self.threads)
            history.records.append(record)
            logger.info(
                "epoch %d loss %.4f train_acc %.3f", epoch, record.train_loss, record.train_acc
            )
        return current, history


def train(
    net: NetworkConfig,
    dataset: SpikeDataset,
    config: TrainConfig,
    eval_dataset: SpikeDataset | None = None,
    threads: int = 1,
    progress_callback: Callable[[TrainProgress], None] | None = None,
) -> tuple[NetworkConfig, TrainHistory]:
    """Train a copy of ``net``; deterministic for a given ``config.seed``."""
    trainer = Trainer(config, threads=threads)
    if progress_callback:
        trainer.set_progress_callback(progress_callback)
    return trainer.train(net, dataset, eval_dataset)
