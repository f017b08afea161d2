import dataclasses
import math

import numpy as np
import pytest

from dgn_lab.data import SpikeTensor
from dgn_lab.errors import NonFiniteError, ShapeMismatchError
from dgn_lab.gradients import random_input, random_network
from dgn_lab.network import LayerSpec, NetworkConfig, NeuronKind, forward, loss, predict
from dgn_lab.neuron import DgnLayerParams, LifParams
from dgn_lab.rng import derive_rng


def one_unit_net(W: float, W_L: list[float], tau_s: float = 2.0) -> NetworkConfig:
    layer = LayerSpec(
        NeuronKind.DGN,
        DgnLayerParams(W=np.full((1, 1), W), C=np.zeros((1, 1)), tau_s=tau_s),
    )
    return NetworkConfig(
        layers=[layer],
        readout_dim=len(W_L),
        input_channels=1,
        W_L=np.array(W_L, dtype=float).reshape(-1, 1),
    )


def test_zero_input_is_silent() -> None:
    net = random_network(derive_rng(0), (NeuronKind.DGN, NeuronKind.LIF), recurrent=True)
    result, cache = forward(net, np.zeros((net.input_channels, 12)))
    assert all(np.all(r.z == 0) for records in cache.records for r in records)
    assert np.all(result.o == 0)
    assert np.all(result.y_pred == 0)


def test_hand_computed_three_step_readout() -> None:
    # A short synaptic time constant makes the spike pattern follow the input.
    net = one_unit_net(W=2.0, W_L=[1.0, -0.5], tau_s=0.1)
    result, cache = forward(net, SpikeTensor(np.array([[1.0, 0.0, 1.0]])))
    assert [r.z[0] for r in cache.records[0]] == [1.0, 0.0, 1.0]
    np.testing.assert_allclose(result.y_pred, [2.0 / 3.0, -1.0 / 3.0], atol=1e-12)


def test_readout_is_mean_of_cached_outputs() -> None:
    rng = derive_rng(1)
    net = random_network(rng, (NeuronKind.ALIF, NeuronKind.DGN), recurrent=True)
    result, cache = forward(net, random_input(rng, net.input_channels, 9))
    np.testing.assert_allclose(cache.o.mean(axis=0), result.y_pred, atol=1e-12)
    assert cache.T == 9


def test_cache_covers_every_timestep_of_long_input() -> None:
    rng = derive_rng(2)
    net = random_network(rng, (NeuronKind.DGN,), recurrent=False, units=8, channels=700)
    _, cache = forward(net, random_input(rng, 700, 250, rate=0.02))
    assert len(cache.records[0]) == 250
    assert cache.layer_inputs[0].shape == (250, 700)


def test_recurrent_inputs_are_previous_spikes() -> None:
    rng = derive_rng(3)
    net = random_network(rng, (NeuronKind.DGN,), recurrent=True, units=5, channels=4)
    _, cache = forward(net, random_input(rng, 4, 10, rate=0.5))
    inputs = cache.layer_inputs[0]
    assert np.all(inputs[0, 4:] == 0)
    for t in range(1, 10):
        np.testing.assert_array_equal(inputs[t, 4:], cache.records[0][t - 1].z)


def test_recurrent_weights_default_to_zero() -> None:
    layer = LayerSpec(
        NeuronKind.DGN,
        DgnLayerParams(W=np.ones((3, 2)), C=np.zeros((3, 2))),
        recurrent=True,
    )
    assert layer.W_rec.shape == (3, 3) and not layer.W_rec.any()
    assert layer.C_rec.shape == (3, 3)
    assert layer.total_inputs == 5

    lif = LayerSpec(NeuronKind.LIF, LifParams(W=np.ones((3, 2))), recurrent=True, C_rec=np.ones((3, 3)))
    assert lif.C_rec is None


def test_layer_rejects_mismatched_params_type() -> None:
    with pytest.raises(TypeError, match="needs DgnLayerParams"):
        LayerSpec(NeuronKind.DGN, LifParams(W=np.ones((1, 1))))


def test_network_rejects_inconsistent_shapes() -> None:
    layer = LayerSpec(NeuronKind.LIF, LifParams(W=np.ones((2, 3))))
    with pytest.raises(ShapeMismatchError, match="layer 0 expects 3 inputs"):
        NetworkConfig(layers=[layer], readout_dim=2, input_channels=4, W_L=np.zeros((2, 2)))
    with pytest.raises(ShapeMismatchError, match="W_L must be"):
        NetworkConfig(layers=[layer], readout_dim=2, input_channels=3, W_L=np.zeros((2, 3)))

    net = NetworkConfig(layers=[layer], readout_dim=2, input_channels=3, W_L=np.zeros((2, 2)))
    with pytest.raises(ShapeMismatchError, match="input must be"):
        forward(net, np.zeros((2, 5)))


def test_non_finite_potential_names_layer_and_step() -> None:
    net = one_unit_net(W=math.nan, W_L=[1.0])
    with pytest.raises(NonFiniteError) as info:
        forward(net, np.array([[0.0, 1.0, 0.0]]))
    assert info.value.layer == 0
    assert info.value.timestep == 0


def test_parameters_are_ordered_paths() -> None:
    net = random_network(derive_rng(4), (NeuronKind.DGN, NeuronKind.LIF), recurrent=True)
    assert list(net.parameters()) == [
        "layers.0.W",
        "layers.0.C",
        "layers.0.W_rec",
        "layers.0.C_rec",
        "layers.1.W",
        "layers.1.W_rec",
        "readout.W_L",
    ]


def test_with_parameters_leaves_original_untouched() -> None:
    net = random_network(derive_rng(5), (NeuronKind.DGN,), recurrent=False)
    before = net.parameters()["layers.0.W"].copy()
    clone = net.with_parameters({"layers.0.W": np.zeros_like(before)})
    assert not clone.parameters()["layers.0.W"].any()
    np.testing.assert_array_equal(net.parameters()["layers.0.W"], before)
    with pytest.raises(KeyError, match="unknown parameter"):
        net.with_parameters({"layers.0.C_rec": np.zeros((4, 4))})


def test_loss_uniform_and_dominant() -> None:
    value, grad = loss(np.zeros(4), 2)
    assert value == pytest.approx(math.log(4))
    np.testing.assert_allclose(grad, [0.25, 0.25, -0.75, 0.25])

    value, _ = loss(np.array([0.0, 3.0, 0.0, 0.0]), 1)
    assert value < math.log(4)

    with pytest.raises(ValueError, match="out of range"):
        loss(np.zeros(3), 3)


def test_loss_gradient_matches_central_differences() -> None:
    y = np.array([0.3, -1.2, 0.8, 0.05])
    _, grad = loss(y, 0)
    h = 1e-6
    numeric = np.array(
        [(loss(y + h * e, 0)[0] - loss(y - h * e, 0)[0]) / (2 * h) for e in np.eye(4)]
    )
    np.testing.assert_allclose(grad, numeric, atol=1e-8)


def test_predict_argmax_and_ties() -> None:
    # A unit driven hard enough to fire every step averages W_L's column unchanged.
    always_on = np.ones((1, 6))
    assert predict(one_unit_net(W=100.0, W_L=[0.2, 0.9, 0.1]), always_on) == 1
    assert predict(one_unit_net(W=100.0, W_L=[0.5, 0.5]), always_on) == 0
    assert predict(one_unit_net(W=100.0, W_L=[0.2, 0.9, 0.1]), np.zeros((1, 6))) == 0


def feedforward_copy(net: NetworkConfig) -> NetworkConfig:
    layers = [LayerSpec(layer.neuron_kind, layer.params) for layer in net.layers]
    return NetworkConfig(
        layers=layers, readout_dim=net.readout_dim, input_channels=net.input_channels, W_L=net.W_L
    )


@pytest.mark.parametrize(
    "kinds", [(NeuronKind.DGN,), (NeuronKind.LIF,), (NeuronKind.ALIF, NeuronKind.DGN)]
)
@pytest.mark.parametrize("units, channels", [(4, 6), (16, 20), (128, 700)])
def test_zero_recurrent_weights_match_feedforward_exactly(kinds, units, channels) -> None:
    rng = derive_rng(units)
    net = random_network(rng, kinds, recurrent=True, units=units, channels=channels)
    for layer in net.layers:
        layer.W_rec = np.zeros_like(layer.W_rec)
        if layer.C_rec is not None:
            layer.C_rec = np.zeros_like(layer.C_rec)
    x = random_input(rng, channels, 20, rate=0.1)

    recurrent_result, recurrent_cache = forward(net, x)
    plain_result, plain_cache = forward(feedforward_copy(net), x)
    for recurrent_records, plain_records in zip(recurrent_cache.records, plain_cache.records):
        for a, b in zip(recurrent_records, plain_records):
            assert np.array_equal(a.V, b.V)
            assert np.array_equal(a.z, b.z)
    assert np.array_equal(recurrent_result.y_pred, plain_result.y_pred)


@pytest.mark.parametrize("kind", [NeuronKind.DGN, NeuronKind.ALIF])
def test_hidden_unit_permutation_is_equivariant(kind) -> None:
    rng = derive_rng(7)
    net = random_network(rng, (kind,), recurrent=True, units=5, channels=4)
    perm = rng.permutation(5)
    layer = net.layers[0]
    changes = {"W": layer.params.W[perm]}
    if layer.has_conductance:
        changes["C"] = layer.params.C[perm]
    permuted_layer = LayerSpec(
        kind,
        dataclasses.replace(layer.params, **changes),
        recurrent=True,
        W_rec=layer.W_rec[np.ix_(perm, perm)],
        C_rec=layer.C_rec[np.ix_(perm, perm)] if layer.C_rec is not None else None,
    )
    permuted = NetworkConfig(
        layers=[permuted_layer],
        readout_dim=net.readout_dim,
        input_channels=net.input_channels,
        W_L=net.W_L[:, perm],
    )
    x = random_input(rng, 4, 15, rate=0.4)

    result, cache = forward(net, x)
    permuted_result, permuted_cache = forward(permuted, x)
    for record, permuted_record in zip(cache.records[0], permuted_cache.records[0]):
        np.testing.assert_allclose(permuted_record.V, record.V[perm], atol=1e-12)
        np.testing.assert_array_equal(permuted_record.z, record.z[perm])
    np.testing.assert_allclose(permuted_result.y_pred, result.y_pred, atol=1e-12)


def test_forward_is_bit_identical_across_calls() -> None:
    rng = derive_rng(8)
    net = random_network(rng, (NeuronKind.DGN, NeuronKind.ALIF), recurrent=True)
    x = random_input(rng, net.input_channels, 12)
    first, first_cache = forward(net, x)
    second, second_cache = forward(net, x)
    assert np.array_equal(first.y_pred, second.y_pred)
    assert np.array_equal(first_cache.o, second_cache.o)
