import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nmsnn.errors import DimensionError, DomainError
from nmsnn.oracles import (
    central_difference,
    relative_error,
    relaxed_network_loss,
    scalar_lif_reference,
    scalar_network_loss,
)
from nmsnn.snn import (
    LayerState,
    LIFParams,
    SpikingNetwork,
    backward_network,
    cross_entropy_over_time,
    forward_network,
    init_network,
    lif_step,
    simulate_layer,
    stbp_backward,
    surrogate_derivative,
)


def test_zero_input_is_a_fixed_point():
    p = LIFParams(leak_alpha=0.5)
    st_ = lif_step(LayerState.zeros(1), np.zeros(1), np.ones((1, 1)), p)
    assert st_.pre_reset[0] == 0.0 and st_.spikes[0] == 0.0 and st_.membrane[0] == 0.0


def test_soft_reset_subtracts_threshold():
    p = LIFParams(leak_alpha=0.5, v_threshold=1.0)
    st_ = lif_step(LayerState.zeros(1), np.ones(1), np.array([[1.2]]), p)
    assert st_.spikes[0] == 1.0
    assert st_.membrane[0] == pytest.approx(0.2, abs=1e-15)


def test_threshold_crossing_is_inclusive():
    p = LIFParams(v_threshold=1.0)
    st_ = lif_step(LayerState.zeros(1), np.ones(1), np.array([[1.0]]), p)
    assert st_.spikes[0] == 1.0 and st_.membrane[0] == 0.0


def test_two_neuron_trace_matches_scalar_loop():
    rng = np.random.default_rng(3)
    p = LIFParams(leak_alpha=0.8, v_threshold=0.7)
    w = rng.normal(size=(2, 5))
    x = (rng.random((3, 5)) < 0.4).astype(float)
    tr = simulate_layer(w, x[None], p)
    pre, spikes = scalar_lif_reference(w.tolist(), x.tolist(), p)
    np.testing.assert_array_equal(tr.spikes[0], np.array(spikes))
    np.testing.assert_allclose(tr.pre_reset[0], np.array(pre), rtol=0, atol=1e-14)


def test_step_by_step_equals_whole_sequence():
    rng = np.random.default_rng(4)
    p = LIFParams()
    w = rng.normal(size=(4, 6))
    x = (rng.random((3, 7, 6)) < 0.5).astype(float)
    tr = simulate_layer(w, x, p)
    state = LayerState.zeros(4, (3,))
    for t in range(7):
        state = lif_step(state, x[:, t], w, p)
        np.testing.assert_array_equal(state.spikes, tr.spikes[:, t])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_spikes_binary_and_reset_bounded(seed):
    rng = np.random.default_rng(seed)
    p = LIFParams(leak_alpha=float(rng.uniform(0.1, 1.0)), v_threshold=float(rng.uniform(0.2, 2.0)))
    w = rng.normal(scale=2.0, size=(5, 4))
    x = (rng.random((2, 6, 4)) < 0.5).astype(float)
    tr = simulate_layer(w, x, p)
    assert set(np.unique(tr.spikes)) <= {0.0, 1.0}
    post = tr.pre_reset - p.v_threshold * tr.spikes
    assert np.all(post <= tr.pre_reset)
    assert np.array_equal(post == tr.pre_reset, tr.spikes == 0)


def test_surrogate_values():
    p = LIFParams(v_threshold=1.0, surrogate_width=0.25)
    assert surrogate_derivative(1.0, p) == pytest.approx(1.0 / (4 * 0.25))
    assert surrogate_derivative(1.0 + 5 * 0.25, p) == pytest.approx(surrogate_derivative(1.0 - 5 * 0.25, p))
    s1 = 1.0 / (1.0 + math.exp(-1.0))
    p1 = LIFParams(v_threshold=1.0, surrogate_width=1.0)
    assert surrogate_derivative(2.0, p1) == pytest.approx(s1 * (1 - s1), abs=1e-12)
    assert surrogate_derivative(2.0, p1) == pytest.approx(0.1966, abs=1e-4)


def test_params_validation():
    with pytest.raises(DomainError):
        LIFParams(leak_alpha=0.0)
    with pytest.raises(DomainError):
        LIFParams(v_threshold=-1.0)
    with pytest.raises(DomainError):
        LIFParams(surrogate_width=0.0)


def test_shape_errors():
    p = LIFParams()
    with pytest.raises(DimensionError):
        simulate_layer(np.ones((2, 3)), np.ones((1, 2, 4)), p)
    with pytest.raises(DimensionError):
        lif_step(LayerState.zeros(3), np.ones(2), np.ones((2, 2)), p)
    with pytest.raises(DimensionError):
        SpikingNetwork(layers=[np.ones((3, 4)), np.ones((2, 2))], readout=np.ones((2, 2)))


def test_zero_spike_errors_give_zero_gradient():
    rng = np.random.default_rng(0)
    p = LIFParams()
    w = rng.normal(size=(3, 4))
    tr = simulate_layer(w, (rng.random((2, 5, 4)) < 0.5).astype(float), p)
    bs = stbp_backward(tr, np.zeros_like(tr.spikes), w, p)
    assert not bs.weight_grad_accum.any()


def test_single_step_gradient_collapses():
    rng = np.random.default_rng(1)
    p = LIFParams()
    w = rng.normal(size=(3, 4))
    x = (rng.random((1, 1, 4)) < 0.5).astype(float)
    tr = simulate_layer(w, x, p)
    e = rng.normal(size=(1, 1, 3))
    bs = stbp_backward(tr, e, w, p)
    want = (e[0, 0] * surrogate_derivative(tr.pre_reset[0, 0], p))[:, None] * x[0, 0][None, :]
    np.testing.assert_allclose(bs.weight_grad_accum, want, rtol=1e-14)


def test_error_at_one_step_only_reaches_earlier_steps():
    rng = np.random.default_rng(2)
    p = LIFParams(leak_alpha=0.9)
    w = rng.normal(size=(3, 4)) * 2
    tr = simulate_layer(w, (rng.random((1, 6, 4)) < 0.6).astype(float), p)
    e = np.zeros((1, 6, 3))
    e[0, 3] = 1.0
    bs = stbp_backward(tr, e, w, p)
    assert not bs.membrane_error[0, 4:].any()


def _relaxed_gradcheck(rng, sizes, T, B=2):
    p = LIFParams(leak_alpha=0.7, v_threshold=0.6)
    net = init_network(sizes, p, rng)
    for w in net.layers:
        w *= 3
    x = (rng.random((B, T, sizes[0])) < 0.5).astype(float)
    y = rng.integers(0, sizes[-1], size=B)
    fwd = forward_network(net, x)
    g = backward_network(net, fwd, y)

    def f():
        return relaxed_network_loss(net, x, y, net.layers, fwd)

    analytic = np.concatenate([*(a.ravel() for a in g.layers), g.readout.ravel()])
    numeric = np.concatenate(
        [*(central_difference(f, w).ravel() for w in net.layers), central_difference(f, net.readout).ravel()]
    )
    return relative_error(analytic, numeric)


def test_three_neuron_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    assert _relaxed_gradcheck(rng, [4, 3, 2], T=4) < 1e-4


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gradients_match_relaxed_finite_differences(seed):
    rng = np.random.default_rng(seed)
    sizes = [int(rng.integers(2, 9)) for _ in range(3)]
    assert _relaxed_gradcheck(rng, sizes, T=int(rng.integers(1, 6))) < 1e-4


def test_relaxed_loss_equals_true_loss_at_nominal_point():
    rng = np.random.default_rng(6)
    net = init_network([5, 4, 3, 2], LIFParams(), rng)
    for w in net.layers:
        w *= 3
    x = (rng.random((3, 4, 5)) < 0.5).astype(float)
    y = rng.integers(0, 2, size=3)
    fwd = forward_network(net, x)
    assert relaxed_network_loss(net, x, y, net.layers, fwd) == pytest.approx(
        cross_entropy_over_time(fwd.logits, y), abs=1e-12
    )


def test_two_layer_loss_matches_scalar_loop():
    rng = np.random.default_rng(7)
    p = LIFParams(leak_alpha=0.6, v_threshold=0.8)
    net = init_network([6, 4, 3, 3], p, rng)
    for w in net.layers:
        w *= 2.5
    x = (rng.random((1, 5, 6)) < 0.5).astype(float)
    y = np.array([2])
    fwd = forward_network(net, x)
    ref = scalar_network_loss([w.tolist() for w in net.layers], net.readout.tolist(), p, net.readout_leak,
                              x[0].tolist(), 2)
    assert cross_entropy_over_time(fwd.logits, y) == pytest.approx(ref, abs=1e-6)


def test_readout_of_single_spike_is_column_average():
    # no hidden layer, no leak: the readout integrates one spike and holds it
    readout = np.array([[0.3, -0.2], [0.7, 0.1]])
    net = SpikingNetwork(layers=[], readout=readout, readout_leak=1.0)
    T = 4
    x = np.zeros((1, T, 2))
    x[0, 0, 0] = 1.0
    fwd = forward_network(net, x)
    np.testing.assert_allclose(fwd.scores[0], readout[:, 0])


def test_forward_is_deterministic():
    net = init_network([8, 6, 3], LIFParams(), np.random.default_rng(0))
    x = (np.random.default_rng(1).random((4, 5, 8)) < 0.5).astype(float)
    a = forward_network(net, x)
    b = forward_network(net, x)
    assert a.scores.tobytes() == b.scores.tobytes()
    ga = backward_network(net, a, [0, 1, 2, 0])
    gb = backward_network(net, b, [0, 1, 2, 0])
    assert all(u.tobytes() == v.tobytes() for u, v in zip(ga.layers, gb.layers))
