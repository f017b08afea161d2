"""Evaluation-time perturbations: Bernoulli spike noise and gradient-sign attacks.

Noise injectors and the random PGD start draw from ``rng.derive_rng`` streams
keyed by ``(spec.seed, stream, sample_index)``, so a sweep is reproducible and
independent of how many threads evaluate it. Attack outputs are clamped below
at zero and never leave the ``epsilon`` box around the clean input.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Sequence

import numpy as np

from .data import LabeledSample, SpikeDataset, SpikeTensor
from .gradients import backward
from .network import NetworkConfig, forward, loss
from .parallel import parallel_map
from .rng import STREAM_ATTACK, STREAM_NOISE, derive_rng

logger = logging.getLogger(__name__)


class PerturbationKind(str, Enum):
    ADDITIVE = "additive"
    SUBTRACTIVE = "subtractive"
    MIXED = "mixed"
    FGSM = "fgsm"
    PGD = "pgd"
    BIM = "bim"

    @property
    def is_attack(self) -> bool:
        return self in (PerturbationKind.FGSM, PerturbationKind.PGD, PerturbationKind.BIM)


@dataclass(frozen=True)
class PerturbationSpec:
    kind: PerturbationKind
    p: float = 0.0
    epsilon: float = 0.0
    alpha: float = 0.01
    k: int = 4
    mixed_factor: float = 10.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", PerturbationKind(self.kind))
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must lie in [0, 1], got {self.p}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be zero or greater")
        if self.alpha < 0:
            raise ValueError("alpha must be zero or greater")
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.mixed_factor < 0:
            raise ValueError("mixed_factor must be zero or greater")
        if self.seed < 0:
            raise ValueError("seed must be zero or greater")
        if self.kind in (PerturbationKind.PGD, PerturbationKind.BIM) and self.alpha * self.k < self.epsilon:
            logger.warning(
                "%s with alpha*k=%g cannot reach the epsilon=%g budget",
                self.kind.value,
                self.alpha * self.k,
                self.epsilon,
            )

    @property
    def strength(self) -> float:
        return self.epsilon if self.kind.is_attack else self.p

    def label(self) -> str:
        if self.kind.is_attack:
            return f"{self.kind.value}(eps={self.epsilon:g})"
        return f"{self.kind.value}(p={self.p:g})"


def _as_array(x: SpikeTensor | np.ndarray) -> np.ndarray:
    return np.asarray(getattr(x, "values", x), dtype=np.float64)


def additive_noise(x: SpikeTensor, p: float, rng: np.random.Generator) -> SpikeTensor:
    """Add a Bernoulli(p) spike to every element."""
    values = _as_array(x)
    flips = rng.random(values.shape) < p
    return SpikeTensor(np.maximum(values + flips, 0.0))


def subtractive_noise(x: SpikeTensor, p: float, rng: np.random.Generator) -> SpikeTensor:
    """Remove a Bernoulli(p) spike where the input is positive; zeros are untouched."""
    values = _as_array(x)
    flips = rng.random(values.shape) < p
    return SpikeTensor(np.where(values > 0, np.maximum(values - flips, 0.0), values))


def mixed_noise(
    x: SpikeTensor, p: float, mixed_factor: float, rng: np.random.Generator
) -> SpikeTensor:
    """Delete at rate ``p*mixed_factor`` where positive, insert at rate ``p`` where zero.

    A single uniform draw per element decides both branches, so an all-zero
    input sees exactly what ``additive_noise`` would.
    """
    values = _as_array(x)
    delete_rate = p * mixed_factor
    if delete_rate > 1.0:
        logger.warning("mixed noise deletion rate %g clamped to 1", delete_rate)
        delete_rate = 1.0
    draws = rng.random(values.shape)
    deleted = np.maximum(values - (draws < delete_rate), 0.0)
    inserted = values + (draws < p)
    return SpikeTensor(np.where(values > 0, deleted, inserted))


def input_gradient(
    net: NetworkConfig, x: SpikeTensor | np.ndarray, label: int, include_c_path: bool = True
) -> np.ndarray:
    """dL/dx for every input element, shaped like ``x``.

    ``include_c_path=False`` ignores how the input moves the decay gate and
    keeps only the current pathway.
    """
    result, cache = forward(net, x)
    _, dLdy = loss(result.y_pred, label)
    _, gx = backward(net, cache, dLdy, include_c_path=include_c_path)
    return gx


def _project(candidate: np.ndarray, clean: np.ndarray, epsilon: float) -> np.ndarray:
    return np.maximum(np.clip(candidate, clean - epsilon, clean + epsilon), 0.0)


def fgsm(
    net: NetworkConfig,
    x: SpikeTensor,
    label: int,
    epsilon: float,
    include_c_path: bool = True,
) -> SpikeTensor:
    """One signed gradient step; ``sign(0) = 0`` leaves flat directions alone."""
    if epsilon < 0:
        raise ValueError("epsilon must be zero or greater")
    clean = _as_array(x)
    if epsilon == 0:
        return SpikeTensor(clean)
    grad = input_gradient(net, clean, label, include_c_path)
    return SpikeTensor(np.maximum(clean + epsilon * np.sign(grad), 0.0))


def _iterate(
    net: NetworkConfig,
    clean: np.ndarray,
    start: np.ndarray,
    label: int,
    epsilon: float,
    alpha: float,
    k: int,
    include_c_path: bool,
) -> np.ndarray:
    adv = _project(start, clean, epsilon)
    for _ in range(k):
        grad = input_gradient(net, adv, label, include_c_path)
        adv = _project(adv + alpha * np.sign(grad), clean, epsilon)
    return adv


def pgd(
    net: NetworkConfig,
    x: SpikeTensor,
    label: int,
    epsilon: float,
    alpha: float,
    k: int,
    rng: np.random.Generator,
    include_c_path: bool = True,
) -> SpikeTensor:
    """Iterated signed steps from a uniform random start inside the epsilon box."""
    if k < 1:
        raise ValueError("k must be at least 1")
    clean = _as_array(x)
    if epsilon == 0:
        return SpikeTensor(clean)
    start = clean + rng.uniform(-epsilon, epsilon, size=clean.shape)
    return SpikeTensor(_iterate(net, clean, start, label, epsilon, alpha, k, include_c_path))


def bim(
    net: NetworkConfig,
    x: SpikeTensor,
    label: int,
    epsilon: float,
    alpha: float,
    k: int,
    include_c_path: bool = True,
) -> SpikeTensor:
    """PGD started from the clean input; fully deterministic."""
    if k < 1:
        raise ValueError("k must be at least 1")
    clean = _as_array(x)
    if epsilon == 0:
        return SpikeTensor(clean)
    return SpikeTensor(_iterate(net, clean, clean, label, epsilon, alpha, k, include_c_path))


def perturb_sample(
    net: NetworkConfig,
    sample: LabeledSample,
    spec: PerturbationSpec,
    index: int,
    include_c_path: bool = True,
) -> SpikeTensor:
    """Apply ``spec`` to the ``index``-th sample of a dataset."""
    kind = spec.kind
    if kind is PerturbationKind.ADDITIVE:
        return additive_noise(sample.x, spec.p, derive_rng(spec.seed, STREAM_NOISE, index))
    if kind is PerturbationKind.SUBTRACTIVE:
        return subtractive_noise(sample.x, spec.p, derive_rng(spec.seed, STREAM_NOISE, index))
    if kind is PerturbationKind.MIXED:
        rng = derive_rng(spec.seed, STREAM_NOISE, index)
        return mixed_noise(sample.x, spec.p, spec.mixed_factor, rng)
    if kind is PerturbationKind.FGSM:
        return fgsm(net, sample.x, sample.label, spec.epsilon, include_c_path)
    if kind is PerturbationKind.PGD:
        rng = derive_rng(spec.seed, STREAM_ATTACK, index)
        return pgd(
            net, sample.x, sample.label, spec.epsilon, spec.alpha, spec.k, rng, include_c_path
        )
    return bim(net, sample.x, sample.label, spec.epsilon, spec.alpha, spec.k, include_c_path)


@dataclass
class RobustnessRow:
    kind: str
    p: float | None
    epsilon: float | None
    alpha: float | None
    k: int | None
    mixed_factor: float | None
    accuracy: float
    samples: int

    def as_dict(self) -> dict:
        return {
            "kind": self.kind,
            "p": self.p,
            "epsilon": self.epsilon,
            "alpha": self.alpha,
            "k": self.k,
            "mixed_factor": self.mixed_factor,
            "accuracy": self.accuracy,
            "samples": self.samples,
        }


@dataclass
class RobustnessTable:
    rows: list[RobustnessRow] = field(default_factory=list)

    @property
    def clean_accuracy(self) -> float:
        return self.rows[0].accuracy

    def for_kind(self, kind: PerturbationKind | str) -> list[RobustnessRow]:
        kind = PerturbationKind(kind).value
        return [row for row in self.rows if row.kind == kind]

    def by_kind(self) -> dict[str, "RobustnessTable"]:
        """One accuracy-vs-strength table per perturbation kind, each led by the clean row."""
        kinds = dict.fromkeys(row.kind for row in self.rows[1:])
        return {kind: RobustnessTable([self.rows[0], *self.for_kind(kind)]) for kind in kinds}


def _row_for(spec: PerturbationSpec, accuracy: float, samples: int) -> RobustnessRow:
    noise = not spec.kind.is_attack
    iterative = spec.kind in (PerturbationKind.PGD, PerturbationKind.BIM)
    return RobustnessRow(
        kind=spec.kind.value,
        p=spec.p if noise else None,
        epsilon=None if noise else spec.epsilon,
        alpha=spec.alpha if iterative else None,
        k=spec.k if iterative else None,
        mixed_factor=spec.mixed_factor if spec.kind is PerturbationKind.MIXED else None,
        accuracy=accuracy,
        samples=samples,
    )


def evaluate_under(
    net: NetworkConfig,
    dataset: SpikeDataset,
    specs: Sequence[PerturbationSpec],
    threads: int = 1,
    include_c_path: bool = True,
) -> RobustnessTable:
    """Accuracy per perturbation spec with the clean accuracy as the first row."""
    samples = list(dataset)
    if not samples:
        raise ValueError("cannot evaluate robustness on an empty dataset")
    indexed = list(enumerate(samples))

    def correct_clean(item: tuple[int, LabeledSample]) -> bool:
        result, _ = forward(net, item[1].x)
        return int(np.argmax(result.y_pred)) == item[1].label

    table = RobustnessTable()
    clean = parallel_map(correct_clean, indexed, threads)
    table.rows.append(
        RobustnessRow("clean", None, None, None, None, None, sum(clean) / len(samples), len(samples))
    )
    for spec in specs:

        def correct_under(item: tuple[int, LabeledSample], spec: PerturbationSpec = spec) -> bool:
            index, sample = item
            perturbed = perturb_sample(net, sample, spec, index, include_c_path)
            result, _ = forward(net, perturbed)
            return int(np.argmax(result.y_pred)) == sample.label

        outcomes = parallel_map(correct_under, indexed, threads)
        row = _row_for(spec, sum(outcomes) / len(samples), len(samples))
        table.rows.append(row)
        logger.info("%s accuracy %.4f", spec.label(), row.accuracy)
    return table


def sweep_specs(
    kind: PerturbationKind | str,
    strengths: Sequence[float],
    **fields,
) -> list[PerturbationSpec]:
    """One spec per strength: ``p`` for noise kinds, ``epsilon`` for attacks."""
    base = PerturbationSpec(kind=PerturbationKind(kind), **fields)
    attr = "epsilon" if base.kind.is_attack else "p"
    return [replace(base, **{attr: float(strength)}) for strength in strengths]


def reference_points_specs(seed: int = 0) -> list[PerturbationSpec]:
    """The reference operating point of every perturbation kind."""
    return [
        PerturbationSpec(PerturbationKind.ADDITIVE, p=0.006, seed=seed),
        PerturbationSpec(PerturbationKind.SUBTRACTIVE, p=0.3, seed=seed),
        PerturbationSpec(PerturbationKind.MIXED, p=0.006, mixed_factor=10.0, seed=seed),
        PerturbationSpec(PerturbationKind.FGSM, epsilon=0.003, seed=seed),
        PerturbationSpec(PerturbationKind.PGD, epsilon=0.003, alpha=0.01, k=4, seed=seed),
        PerturbationSpec(PerturbationKind.BIM, epsilon=0.003, alpha=0.01, k=4, seed=seed),
    ]


@dataclass
class CalibrationResult:
    trials: int
    events: int
    expected_rate: float
    rate: float
    low: float
    high: float

    @property
    def within(self) -> bool:
        return self.low <= self.rate <= self.high


def bernoulli_calibration(
    events: int, trials: int, expected_rate: float, sigmas: float = 4.0
) -> CalibrationResult:
    """Empirical rate against the normal-approximation binomial interval around ``expected_rate``."""
    if trials < 1:
        raise ValueError("trials must be positive")
    half_width = sigmas * math.sqrt(expected_rate * (1.0 - expected_rate) / trials)
    return CalibrationResult(
        trials=trials,
        events=events,
        expected_rate=expected_rate,
        rate=events / trials,
        low=expected_rate - half_width,
        high=expected_rate + half_width,
    )
