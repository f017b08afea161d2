import math

import numpy as np
import pytest

from dgn_lab.errors import CacheError
from dgn_lab.gradients import (
    GradientSet,
    bptt_closed_form,
    bptt_reverse_mode,
    finite_difference_grad,
    random_input,
    random_network,
    relative_error,
    run_gradcheck,
    sample_gradient,
)
from dgn_lab.network import LayerSpec, NetworkConfig, NeuronKind, forward, loss
from dgn_lab.neuron import DgnLayerParams, SurrogateKind, SurrogateSpec
from dgn_lab.rng import derive_rng

SMOOTH = SurrogateSpec(SurrogateKind.SIGMOID_DERIVATIVE, 1.0)


def both_paths(net: NetworkConfig, x: np.ndarray, label: int) -> tuple[GradientSet, GradientSet]:
    result, cache = forward(net, x)
    _, dLdy = loss(result.y_pred, label)
    return bptt_closed_form(cache, dLdy, net), bptt_reverse_mode(cache, dLdy, net)


def flip_first_layer(grads: GradientSet) -> GradientSet:
    values = grads.as_dict()
    values["layers.0.W"] = -values["layers.0.W"]
    return GradientSet.from_dict(values)


def tiny_dgn(w: float, c: float, W_L: list[float]) -> NetworkConfig:
    layer = LayerSpec(
        NeuronKind.DGN,
        DgnLayerParams(W=np.full((1, 1), w), C=np.full((1, 1), c), g_l=0.1, tau_s=2.0),
    )
    return NetworkConfig(
        layers=[layer], readout_dim=len(W_L), input_channels=1,
        W_L=np.array(W_L).reshape(-1, 1),
    )


def test_zero_input_gives_zero_gradients() -> None:
    net = random_network(derive_rng(0), (NeuronKind.DGN, NeuronKind.ALIF), recurrent=True)
    closed, reverse = both_paths(net, np.zeros((net.input_channels, 6)), 1)
    for grads in (closed, reverse):
        assert all(not np.any(value) for _, value in grads)


@pytest.mark.parametrize(
    "kinds,recurrent",
    [((NeuronKind.DGN,), False), ((NeuronKind.DGN, NeuronKind.LIF), True), ((NeuronKind.ALIF,), False)],
)
def test_vanishing_surrogate_confines_credit_to_the_readout(kinds, recurrent) -> None:
    # A rectangle this narrow never contains a computed V, so psi is zero at every step.
    needle = SurrogateSpec(SurrogateKind.RECTANGULAR, 1e-12)
    rng = derive_rng(14)
    net = random_network(rng, kinds, recurrent=recurrent, surrogate=needle)
    x = random_input(rng, net.input_channels, 10)
    result, cache = forward(net, x)
    assert not any(np.any(record.psi) for records in cache.records for record in records)
    assert any(np.any(record.z) for record in cache.records[-1])

    _, dLdy = loss(result.y_pred, 2)
    for grads in (bptt_closed_form(cache, dLdy, net), bptt_reverse_mode(cache, dLdy, net)):
        for name, value in grads:
            if name != "readout.W_L":
                assert not np.any(value), name
        assert np.any(grads.dW_L)


def test_two_step_single_unit_matches_hand_expansion() -> None:
    w, c, g_l, dt, theta = 0.7, 0.15, 0.1, 1.0, 1.0
    lam = math.exp(-dt / 2.0)
    net = tiny_dgn(w, c, [1.0, -1.0])

    def expit(a: float) -> float:
        return 1.0 / (1.0 + math.exp(-a))

    def psi(v: float) -> float:
        return max(0.0, 1.0 - abs(v - theta))

    D0 = 1.0
    V0 = dt * w * D0
    z0 = 1.0 if V0 >= theta else 0.0
    D1 = lam * D0 + 1.0
    pre1 = 1.0 - g_l * dt - dt * c * D1
    rho1 = expit(pre1)
    V1 = rho1 * V0 + dt * w * D1 - theta * z0
    z1 = 1.0 if V1 >= theta else 0.0
    assert (z0, z1) == (0.0, 1.0)

    y_pred = np.array([1.0, -1.0]) * (z0 + z1) / 2.0
    _, dLdy = loss(y_pred, 0)
    s = float(np.array([1.0, -1.0]) @ dLdy) / 2.0

    dV0_dw = dt * D0
    dV1_dw = rho1 * dV0_dw + dt * D1 - theta * psi(V0) * dV0_dw
    dE_dw = s * (psi(V0) * dV0_dw + psi(V1) * dV1_dw)
    dV1_dc = rho1 * (1.0 - rho1) * (-dt * D1) * V0
    dE_dc = s * psi(V1) * dV1_dc

    closed, reverse = both_paths(net, np.ones((1, 2)), 0)
    for grads in (closed, reverse):
        assert grads.layers[0].dW[0, 0] == pytest.approx(dE_dw, rel=1e-12)
        assert grads.layers[0].dC[0, 0] == pytest.approx(dE_dc, rel=1e-12)
        np.testing.assert_allclose(grads.dW_L[:, 0], dLdy / 2.0 * (z0 + z1))


def test_single_step_is_plain_chain_rule() -> None:
    net = tiny_dgn(0.8, 0.1, [2.0, 0.5])
    closed, reverse = both_paths(net, np.ones((1, 1)), 1)
    result, _ = forward(net, np.ones((1, 1)))
    _, dLdy = loss(result.y_pred, 1)
    psi = 1.0 - abs(0.8 - 1.0)
    expected = float(np.array([2.0, 0.5]) @ dLdy) * psi * 1.0
    for grads in (closed, reverse):
        assert grads.layers[0].dW[0, 0] == pytest.approx(expected, rel=1e-12)
        assert grads.layers[0].dC[0, 0] == 0.0


@pytest.mark.parametrize(
    "kinds,recurrent",
    [
        ((NeuronKind.DGN,), False),
        ((NeuronKind.DGN,), True),
        ((NeuronKind.LIF,), True),
        ((NeuronKind.ALIF,), True),
        ((NeuronKind.DGN, NeuronKind.ALIF), False),
        ((NeuronKind.LIF, NeuronKind.DGN), True),
    ],
)
def test_closed_form_matches_reverse_mode(kinds, recurrent) -> None:
    for seed in range(4):
        rng = derive_rng(seed, 99)
        net = random_network(rng, kinds, recurrent=recurrent, units=4)
        x = random_input(rng, net.input_channels, 10)
        closed, reverse = both_paths(net, x, int(rng.integers(3)))
        assert closed.max_relative_error(reverse, floor=1e-12) <= 1e-10


def test_readout_gradient_matches_finite_differences() -> None:
    rng = derive_rng(7)
    net = random_network(rng, (NeuronKind.DGN,), recurrent=True)
    x = random_input(rng, net.input_channels, 8)
    _, grads, _ = sample_gradient(net, x, 2)

    h = 1e-5
    numeric = np.zeros_like(net.W_L)
    for idx in np.ndindex(net.W_L.shape):
        values = {}
        for sign in (1.0, -1.0):
            W_L = net.W_L.copy()
            W_L[idx] += sign * h
            result, _ = forward(net.with_parameters({"readout.W_L": W_L}), x)
            values[sign] = loss(result.y_pred, 2)[0]
        numeric[idx] = (values[1.0] - values[-1.0]) / (2 * h)
    np.testing.assert_allclose(grads.dW_L, numeric, atol=1e-8)


@pytest.mark.parametrize(
    "kinds,recurrent",
    [
        ((NeuronKind.DGN,), False),
        ((NeuronKind.DGN,), True),
        ((NeuronKind.ALIF,), False),
        ((NeuronKind.DGN, NeuronKind.LIF), False),
    ],
)
def test_smoothed_gradients_match_finite_differences(kinds, recurrent) -> None:
    rng = derive_rng(11)
    net = random_network(rng, kinds, recurrent=recurrent, units=4, smoothed=True, surrogate=SMOOTH)
    x = random_input(rng, net.input_channels, 8)
    _, analytic, _ = sample_gradient(net, x, 0, method="closed_form")
    numeric = finite_difference_grad(net, x, 0, h=1e-5)
    assert analytic.max_relative_error(numeric, floor=1e-4) <= 1e-5


def test_finite_difference_error_decays_quadratically() -> None:
    rng = derive_rng(12)
    net = random_network(rng, (NeuronKind.DGN,), units=3, smoothed=True, surrogate=SMOOTH)
    x = random_input(rng, net.input_channels, 6)
    _, analytic, _ = sample_gradient(net, x, 1)

    def error(h: float) -> float:
        numeric = finite_difference_grad(net, x, 1, h=h)
        return max(float(np.max(np.abs(a - b))) for (_, a), (_, b) in zip(analytic, numeric))

    assert error(5e-5) < error(1e-4) / 3.0


def test_identical_channels_get_identical_gradients() -> None:
    layer = LayerSpec(
        NeuronKind.DGN,
        DgnLayerParams(W=np.full((2, 2), 0.6), C=np.full((2, 2), 0.05), surrogate=SMOOTH),
    )
    net = NetworkConfig(
        layers=[layer], readout_dim=2, input_channels=2,
        W_L=np.array([[1.0, -0.5], [-1.0, 0.5]]), smoothed=True,
    )
    row = (derive_rng(13).random(7) < 0.5).astype(float)
    x = np.vstack([row, row])
    closed, reverse = both_paths(net, x, 0)
    numeric = finite_difference_grad(net, x, 0)
    for grads in (closed, reverse, numeric):
        np.testing.assert_allclose(grads.layers[0].dW[:, 0], grads.layers[0].dW[:, 1], atol=1e-9)
        np.testing.assert_allclose(grads.layers[0].dC[:, 0], grads.layers[0].dC[:, 1], atol=1e-9)


def test_gradcheck_default_run_passes() -> None:
    report = run_gradcheck(seed=0)
    assert report.passed
    assert len([case for case in report.cases if case.check == "dual-path"]) == 20
    assert report.worst("dual-path") < 1e-10
    assert set(report.per_layer_worst()) <= {"layers.0", "layers.1", "readout"}


def test_gradcheck_catches_sign_flip() -> None:
    report = run_gradcheck(seed=1, cases=4, fd_cases=1, mutate=flip_first_layer)
    assert not report.passed
    failures = report.failures()
    assert failures
    assert {case.worst_parameter for case in failures} == {"layers.0.W"}


def test_incomplete_cache_is_rejected() -> None:
    rng = derive_rng(14)
    net = random_network(rng)
    result, cache = forward(net, random_input(rng, net.input_channels, 5))
    cache.records[0].pop()
    _, dLdy = loss(result.y_pred, 0)
    with pytest.raises(CacheError, match="cached 4 of 5"):
        bptt_closed_form(cache, dLdy, net)
    with pytest.raises(CacheError):
        bptt_reverse_mode(cache, dLdy, net)


def test_finite_difference_preconditions() -> None:
    net = random_network(derive_rng(15))
    x = np.zeros((net.input_channels, 3))
    with pytest.raises(ValueError, match="smoothed"):
        finite_difference_grad(net, x, 0)
    with pytest.raises(ValueError, match="h must lie"):
        finite_difference_grad(net.with_smoothing(), x, 0, h=1e-2)


def test_relative_error_conventions() -> None:
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0, 2.0]), np.array([1.0, 1.0])) == pytest.approx(0.5)
    assert relative_error(np.array([1e-9]), np.zeros(1), floor=1e-4) == pytest.approx(1e-5)
