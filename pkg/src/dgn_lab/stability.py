"""Steady-state statistics of the noise-driven subthreshold membrane.

Inputs are ``mu_i + sigma_i * xi(t)`` with one white-noise source ``xi`` shared
by every channel. The membrane obeys::

    dV = [-(g_l + sum C_i mu_i) V + sum W_i mu_i] dt + b(V) dW
    b(V) = sum W_i sigma_i - (sum C_i sigma_i) V        (full, Ito)
    b    = sum sigma_i (W_i - C_i V_steady)              (linearised)

No spiking or reset is modelled. Monte Carlo trials run in fixed-size chunks;
each chunk draws from its own ``(seed, STREAM_SDE, chunk)`` stream so results do
not depend on the worker count.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable

import numpy as np

from .errors import DivergenceError, InstabilityError, StepSizeError
from .parallel import parallel_map
from .rng import STREAM_SDE, derive_rng

logger = logging.getLogger(__name__)

CHUNK_TRIALS = 1000
MIN_POOLED_STEPS = 10


class SdeMode(str, Enum):
    FULL_NONLINEAR = "full_nonlinear"
    LINEARIZED = "linearized"


class SdeScheme(str, Enum):
    EULER_MARUYAMA = "euler_maruyama"
    MILSTEIN = "milstein"


@dataclass
class StabilityConfig:
    """Input statistics, synaptic weights and integration controls.

    ``dt_sde`` defaults to ``0.01/G0`` and ``t_end`` to ``20/G0``. ``v0`` defaults
    to the analytic steady-state mean.
    """

    mu: np.ndarray
    sigma: np.ndarray
    W: np.ndarray
    C: np.ndarray
    g_l: float
    dt_sde: float | None = None
    t_end: float | None = None
    burn_in: float = 0.5
    trials: int = 1000
    mode: SdeMode = SdeMode.LINEARIZED
    scheme: SdeScheme = SdeScheme.EULER_MARUYAMA
    seed: int = 0
    v0: float | None = None
    record_trajectories: int = 0

    def __post_init__(self) -> None:
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        self.sigma = np.atleast_1d(np.asarray(self.sigma, dtype=np.float64))
        self.W = np.atleast_1d(np.asarray(self.W, dtype=np.float64))
        self.C = np.atleast_1d(np.asarray(self.C, dtype=np.float64))
        shapes = {self.mu.shape, self.sigma.shape, self.W.shape, self.C.shape}
        if len(shapes) != 1 or self.mu.ndim != 1:
            raise ValueError("mu, sigma, W and C must be vectors of equal length")
        if np.any(self.sigma < 0):
            raise ValueError("sigma must be nonnegative")
        if not self.g_l > 0:
            raise ValueError("g_l must be positive")
        if not 0.0 <= self.burn_in < 1.0:
            raise ValueError("burn_in must lie in [0, 1)")
        if self.trials < 1:
            raise ValueError("trials must be positive")
        if self.record_trajectories < 0:
            raise ValueError("record_trajectories must be zero or greater")
        self.mode = SdeMode(self.mode)
        self.scheme = SdeScheme(self.scheme)

    @property
    def G0(self) -> float:
        return float(self.g_l + np.dot(self.C, self.mu))

    @property
    def channels(self) -> int:
        return self.mu.shape[0]


def _stable_g0(cfg: StabilityConfig) -> float:
    g0 = cfg.G0
    if not g0 > 0:
        raise InstabilityError(f"G0 = g_l + sum(C*mu) = {g0} is not positive; no steady state")
    return g0


def steady_state_mean(cfg: StabilityConfig) -> float:
    return float(np.dot(cfg.W, cfg.mu)) / _stable_g0(cfg)


def numerator_components(cfg: StabilityConfig) -> np.ndarray:
    """Signed per-channel terms ``sigma_i (W_i - C_i V_steady)`` of the DGN variance."""
    v_steady = steady_state_mean(cfg)
    return cfg.sigma * (cfg.W - cfg.C * v_steady)


def analytic_variance_dgn(cfg: StabilityConfig) -> float:
    g0 = _stable_g0(cfg)
    return float(np.sum(numerator_components(cfg))) ** 2 / (2.0 * g0)


def analytic_variance_lif(cfg: StabilityConfig) -> float:
    return float(np.dot(cfg.W, cfg.sigma)) ** 2 / (2.0 * cfg.g_l)


@dataclass
class SdeSummary:
    mean: float
    mean_se: float
    variance: float
    variance_se: float
    trials: int
    steps: int
    dt: float
    pooled_steps: int
    trajectories: np.ndarray | None = field(default=None, repr=False)


@dataclass
class _ChunkStats:
    first: np.ndarray
    second: np.ndarray
    trajectories: np.ndarray | None


def _coefficients(cfg: StabilityConfig, v_steady: float):
    g0 = cfg.G0
    drive = float(np.dot(cfg.W, cfg.mu))

    def drift(V: np.ndarray) -> np.ndarray:
        return -g0 * V + drive

    if cfg.mode is SdeMode.LINEARIZED:
        b_const = float(np.sum(cfg.sigma * (cfg.W - cfg.C * v_steady)))

        def diffusion(V: np.ndarray) -> np.ndarray:
            return np.full_like(V, b_const)

    else:
        b0 = float(np.dot(cfg.W, cfg.sigma))
        b1 = float(np.dot(cfg.C, cfg.sigma))

        def diffusion(V: np.ndarray) -> np.ndarray:
            return b0 - b1 * V

    return drift, diffusion


def _run_chunk(
    cfg: StabilityConfig,
    chunk: int,
    trials: int,
    steps: int,
    dt: float,
    burn_steps: int,
    v_start: float,
    v_steady: float,
    drift: Callable[[np.ndarray], np.ndarray],
    diffusion: Callable[[np.ndarray], np.ndarray],
) -> _ChunkStats:
    rng = derive_rng(cfg.seed, STREAM_SDE, chunk)
    sqrt_dt = math.sqrt(dt)
    V = np.full(trials, float(v_start))
    first = np.zeros(trials)
    second = np.zeros(trials)
    keep = min(cfg.record_trajectories, trials) if chunk == 0 else 0
    trajectories = np.empty((steps + 1, keep)) if keep else None
    if trajectories is not None:
        trajectories[0] = V[:keep]
    milstein = cfg.scheme is SdeScheme.MILSTEIN

    for step in range(1, steps + 1):
        dW = sqrt_dt * rng.standard_normal(trials)
        a = drift(V)
        b = diffusion(V)
        V_next = V + a * dt + b * dW
        if milstein:
            # Derivative-free correction: b'(V) b(V) estimated from a support value.
            support = V + a * dt + b * sqrt_dt
            V_next += (diffusion(support) - b) * (dW * dW - dt) / (2.0 * sqrt_dt)
        V = V_next
        if not np.all(np.isfinite(V)):
            trial = int(np.flatnonzero(~np.isfinite(V))[0])
            raise DivergenceError(step, chunk * CHUNK_TRIALS + trial, float(V[trial]))
        if step > burn_steps:
            offset = V - v_steady
            first += offset
            second += offset * offset
        if trajectories is not None:
            trajectories[step] = V[:keep]
    pooled = steps - burn_steps
    return _ChunkStats(first / pooled, second / pooled, trajectories)


def simulate_sde(cfg: StabilityConfig, threads: int = 1) -> SdeSummary:
    """Euler-Maruyama (or Milstein) Monte Carlo of the membrane SDE.

    Each trial contributes its post-burn-in time averages; the variance is taken
    about the grand mean of all trials, and standard errors are the spread of
    per-trial estimates over ``sqrt(trials)``.
    """
    g0 = _stable_g0(cfg)
    dt = cfg.dt_sde if cfg.dt_sde is not None else 0.01 / g0
    if not dt > 0:
        raise ValueError("dt_sde must be positive")
    if dt > 0.01 / g0 * (1.0 + 1e-12):
        raise StepSizeError(f"dt_sde={dt} exceeds 0.01/G0={0.01 / g0}")
    t_end = cfg.t_end if cfg.t_end is not None else 20.0 / g0
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    steps = max(1, int(round(t_end / dt)))
    burn_steps = int(math.floor(cfg.burn_in * steps))
    if burn_steps >= steps:
        burn_steps = steps - 1
    if steps - burn_steps < MIN_POOLED_STEPS:
        logger.warning(
            "only %d steps remain after burn-in; statistics will be noisy", steps - burn_steps
        )

    v_steady = steady_state_mean(cfg)
    v_start = v_steady if cfg.v0 is None else float(cfg.v0)
    drift, diffusion = _coefficients(cfg, v_steady)
    chunks = [
        (index, min(CHUNK_TRIALS, cfg.trials - start))
        for index, start in enumerate(range(0, cfg.trials, CHUNK_TRIALS))
    ]
    results = parallel_map(
        lambda item: _run_chunk(
            cfg, item[0], item[1], steps, dt, burn_steps, v_start, v_steady, drift, diffusion
        ),
        chunks,
        threads,
    )
    first = np.concatenate([result.first for result in results])
    second = np.concatenate([result.second for result in results])
    offset_mean = float(np.mean(first))
    per_trial_var = second - 2.0 * offset_mean * first + offset_mean**2
    n = cfg.trials
    spread = (lambda values: float(np.std(values, ddof=1)) / math.sqrt(n)) if n > 1 else (lambda _: 0.0)
    summary = SdeSummary(
        mean=v_steady + offset_mean,
        mean_se=spread(first),
        variance=float(np.mean(per_trial_var)),
        variance_se=spread(per_trial_var),
        trials=n,
        steps=steps,
        dt=dt,
        pooled_steps=steps - burn_steps,
        trajectories=results[0].trajectories,
    )
    logger.info(
        "SDE %s: mean %.6g variance %.6g +- %.2g over %d trials",
        cfg.mode.value,
        summary.mean,
        summary.variance,
        summary.variance_se,
        n,
    )
    return summary


def discretization_floor(cfg: StabilityConfig, threads: int = 1) -> float:
    """Monte Carlo variance of the same setup with every sigma set to zero."""
    return simulate_sde(replace(cfg, sigma=np.zeros_like(cfg.sigma)), threads).variance


def milstein_cross_check(cfg: StabilityConfig, threads: int = 1) -> tuple[SdeSummary, SdeSummary]:
    """Euler-Maruyama and Milstein summaries on identical noise streams."""
    euler = simulate_sde(replace(cfg, scheme=SdeScheme.EULER_MARUYAMA), threads)
    milstein = simulate_sde(replace(cfg, scheme=SdeScheme.MILSTEIN), threads)
    return euler, milstein


def lif_counterpart(cfg: StabilityConfig) -> StabilityConfig:
    """Same inputs and weights with the conductance pathway removed."""
    return replace(cfg, C=np.zeros_like(cfg.C))


def _ratio(numerator: float, denominator: float) -> float:
    if denominator == 0.0:
        return 1.0 if numerator == 0.0 else math.inf
    return numerator / denominator


@dataclass
class StabilityReport:
    analytic_mean: float
    analytic_var_dgn: float
    analytic_var_lif: float
    analytic_ratio: float
    numerator_components: np.ndarray
    mc_dgn: SdeSummary | None = None
    mc_lif: SdeSummary | None = None

    @property
    def mc_ratio(self) -> float | None:
        if self.mc_dgn is None or self.mc_lif is None:
            return None
        return _ratio(self.mc_dgn.variance, self.mc_lif.variance)

    @property
    def dgn_lower(self) -> bool:
        return self.analytic_var_dgn < self.analytic_var_lif

    @property
    def mc_relative_error(self) -> float | None:
        if self.mc_dgn is None or self.analytic_var_dgn == 0.0:
            return None
        return abs(self.mc_dgn.variance - self.analytic_var_dgn) / self.analytic_var_dgn


def compare_dgn_lif(
    cfg_dgn: StabilityConfig,
    cfg_lif: StabilityConfig | None = None,
    monte_carlo: bool = True,
    threads: int = 1,
) -> StabilityReport:
    """Analytic and (optionally) Monte Carlo variances of a DGN setup and its LIF counterpart."""
    cfg_lif = cfg_lif if cfg_lif is not None else lif_counterpart(cfg_dgn)
    for name in ("mu", "sigma", "W"):
        if not np.array_equal(getattr(cfg_dgn, name), getattr(cfg_lif, name)):
            raise ValueError(f"DGN and LIF configs must share {name}")
    if cfg_dgn.g_l != cfg_lif.g_l:
        raise ValueError("DGN and LIF configs must share g_l")
    var_dgn = analytic_variance_dgn(cfg_dgn)
    var_lif = analytic_variance_lif(cfg_lif)
    report = StabilityReport(
        analytic_mean=steady_state_mean(cfg_dgn),
        analytic_var_dgn=var_dgn,
        analytic_var_lif=var_lif,
        analytic_ratio=_ratio(var_dgn, var_lif),
        numerator_components=numerator_components(cfg_dgn),
    )
    if monte_carlo:
        report.mc_dgn = simulate_sde(cfg_dgn, threads)
        report.mc_lif = simulate_sde(lif_counterpart(cfg_lif), threads)
    return report


def random_sweep_configs(
    n: int,
    seed: int,
    channels: int = 4,
    g0_range: tuple[float, float] = (0.5, 5.0),
    proportional: bool = False,
    **overrides,
) -> list[StabilityConfig]:
    """Random configs with ``mu > 0``, ``C >= 0`` and ``G0`` drawn from ``g0_range``.

    ``proportional=True`` sets ``C_i = W_i / k`` for a random ``k > 0``.
    """
    low, high = g0_range
    if not 0 < low <= high:
        raise ValueError("g0_range must be positive and ordered")
    configs = []
    for index in range(n):
        rng = derive_rng(seed, STREAM_SDE, 1_000_000 + index)
        target = rng.uniform(low, high)
        mu = rng.uniform(0.5, 1.5, channels)
        sigma = rng.uniform(0.05, 0.2, channels)
        W = rng.uniform(0.2, 1.0, channels)
        C = W / rng.uniform(0.5, 2.0) if proportional else rng.uniform(0.0, 1.0, channels)
        # Leave at least 40% of G0 to the leak so g_l stays well away from zero.
        share = rng.uniform(0.1, 0.6) * target
        scale = share / float(np.dot(C, mu))
        C = C * scale
        if proportional:
            W = W * scale
        g_l = target - float(np.dot(C, mu))
        configs.append(StabilityConfig(mu=mu, sigma=sigma, W=W, C=C, g_l=g_l, **overrides))
    return configs
