"""Full-size acceptance runs. Deselected by default; run with ``pytest -m slow``."""
import math
from dataclasses import replace

import numpy as np
import pytest

from dgn_lab.data import LabeledSample, SpikeTensor, SynthSpec, synth_pattern_dataset
from dgn_lab.gradients import random_input, random_network
from dgn_lab.network import NeuronKind
from dgn_lab.perturbation import (
    PerturbationKind,
    PerturbationSpec,
    additive_noise,
    bernoulli_calibration,
    evaluate_under,
    mixed_noise,
    perturb_sample,
    subtractive_noise,
)
from dgn_lab.rng import derive_rng
from dgn_lab.stability import (
    StabilityConfig,
    analytic_variance_dgn,
    analytic_variance_lif,
    compare_dgn_lif,
    discretization_floor,
    lif_counterpart,
    random_sweep_configs,
    simulate_sde,
)
from dgn_lab.training import InitSpec, ModelSpec, TrainConfig, UniformInit, accuracy, init_network, train

pytestmark = pytest.mark.slow


def test_linearised_variance_across_random_sweep() -> None:
    for cfg in random_sweep_configs(10, seed=0, trials=10_000):
        summary = simulate_sde(cfg, threads=4)
        expected = analytic_variance_dgn(cfg)
        assert abs(summary.variance - expected) / expected < 0.03
        plain = lif_counterpart(cfg)
        assert analytic_variance_dgn(plain) == pytest.approx(analytic_variance_lif(plain), rel=1e-14)


def test_cancellation_sits_on_the_discretization_floor() -> None:
    cfg = random_sweep_configs(1, seed=1, trials=10_000)[0]
    # Quiet last channel carries the drive; the others cancel their own noise.
    cfg.sigma[-1] = 0.0
    v_target = 1.0
    cfg.W[:-1] = cfg.C[:-1] * v_target
    cfg.C[-1] = 0.0
    cfg.W[-1] = (v_target * cfg.G0 - float(np.dot(cfg.W[:-1], cfg.mu[:-1]))) / cfg.mu[-1]
    summary = simulate_sde(cfg, threads=4)
    assert summary.variance <= 5.0 * discretization_floor(cfg, threads=4) + 1e-10


def _two_channel(**kw) -> StabilityConfig:
    return StabilityConfig(mu=[1.0, 1.0], sigma=[0.1, 0.1], W=[1.0, 0.5], C=[0.3, 0.2], g_l=0.5, **kw)


def test_halving_the_step_keeps_the_variance_within_its_error() -> None:
    coarse = simulate_sde(_two_channel(trials=10_000, seed=8), threads=4)
    fine = simulate_sde(_two_channel(trials=10_000, seed=8, dt_sde=coarse.dt / 2.0), threads=4)
    assert fine.steps == 2 * coarse.steps
    assert abs(fine.variance - coarse.variance) <= 3.0 * math.hypot(fine.variance_se, coarse.variance_se)


def test_variance_error_shrinks_as_inverse_root_of_trials() -> None:
    trials = [100, 1000, 10_000]
    errors = [simulate_sde(_two_channel(trials=n, seed=9), threads=4).variance_se for n in trials]
    slope = np.polyfit(np.log(trials), np.log(errors), 1)[0]
    assert -0.6 <= slope <= -0.4


def test_proportional_conductance_suppresses_noise() -> None:
    configs = random_sweep_configs(100, seed=5, proportional=True, trials=1000)
    lower = 0
    for cfg in configs:
        report = compare_dgn_lif(cfg, threads=4)
        if report.dgn_lower and report.mc_ratio < 1.0:
            lower += 1
    assert lower >= 95


def test_noise_injectors_are_calibrated() -> None:
    base = (derive_rng(0).random((1000, 1000)) < 0.5).astype(np.float64)
    x = SpikeTensor(base)
    positives, zeros = int(base.sum()), base.size - int(base.sum())
    p = 0.006

    added = additive_noise(SpikeTensor.zeros(1000, 1000), p, derive_rng(1)).values.sum()
    assert bernoulli_calibration(int(added), 1_000_000, p).within

    removed = base.sum() - subtractive_noise(x, 0.3, derive_rng(2)).values.sum()
    assert bernoulli_calibration(int(removed), positives, 0.3).within

    mixed = mixed_noise(x, p, 10.0, derive_rng(3)).values
    assert bernoulli_calibration(int(mixed[base == 0].sum()), zeros, p).within
    assert bernoulli_calibration(int((mixed[base == 1] == 0).sum()), positives, 10 * p).within


def test_attacks_respect_budget_over_many_samples() -> None:
    rng = derive_rng(4)
    net = random_network(rng, (NeuronKind.DGN,), recurrent=True)
    epsilon = 0.05
    for kind in (PerturbationKind.FGSM, PerturbationKind.PGD, PerturbationKind.BIM):
        spec = PerturbationSpec(kind, epsilon=epsilon, alpha=0.02, k=4, seed=1)
        for index in range(1000):
            sample = LabeledSample(SpikeTensor(random_input(rng, net.input_channels, 8)), index % 3)
            adv = perturb_sample(net, sample, spec, index).values
            assert np.max(np.abs(adv - sample.x.values)) <= epsilon + 1e-12
            if kind is PerturbationKind.BIM:
                again = perturb_sample(net, sample, spec, index).values
                assert np.array_equal(adv, again)


def test_desk_scale_robustness_regression() -> None:
    spec = SynthSpec(classes=2, channels=20, timesteps=50, samples_per_class=20)
    init = InitSpec(w=UniformInit(0.2, 0.1), c=UniformInit(0.01, 0.005))
    config = TrainConfig(epochs=50, lr=0.01, batch_size=8, init=init)
    specs = [
        PerturbationSpec(PerturbationKind.ADDITIVE, p=0.05),
        PerturbationSpec(PerturbationKind.FGSM, epsilon=0.01),
    ]
    scores = {NeuronKind.DGN: [], NeuronKind.LIF: []}
    for seed in range(5):
        dataset = synth_pattern_dataset(spec, seed)
        for kind in scores:
            model = ModelSpec(neuron_kind=kind, hidden=(16,))
            net = init_network(model, spec.channels, spec.classes, init, seed)
            trained, _ = train(net, dataset, config, threads=4)
            assert accuracy(trained, dataset) >= 0.95
            seeded = [replace(s, seed=seed) for s in specs]
            table = evaluate_under(trained, dataset, seeded, threads=4)
            scores[kind].append(np.mean([row.accuracy for row in table.rows[1:]]))
    assert np.mean(scores[NeuronKind.DGN]) >= np.mean(scores[NeuronKind.LIF])
