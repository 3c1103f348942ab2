"""Discrete-time LIF layers with an explicit STBP backward pass.

Time convention used throughout: input frame ``x_t`` (t = 1..T) drives the
pre-reset membrane of the same step,

    u~_t = alpha * u_{t-1} + W x_t
    s_t  = H(u~_t - V_th)
    u_t  = u~_t - V_th * s_t

with ``u_0 = 0``. Layers are stacked without synaptic delay, so layer ``l``
at step ``t`` sees the spikes layer ``l-1`` emitted at step ``t``.

All arrays carry a leading batch axis ``B`` and a time axis ``T``:
inputs ``(B, T, n_in)``, membranes and spikes ``(B, T, n)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .errors import DimensionError, DomainError, NumericError

__all__ = [
    "LIFParams",
    "LayerState",
    "TemporalTrace",
    "BackwardState",
    "SpikingNetwork",
    "ForwardResult",
    "NetworkGrads",
    "lif_step",
    "surrogate_derivative",
    "simulate_layer",
    "stbp_backward",
    "forward_network",
    "backward_network",
    "cross_entropy_over_time",
    "init_network",
]


@dataclass(frozen=True)
class LIFParams:
    leak_alpha: float = 0.5
    v_threshold: float = 1.0
    surrogate_width: float = 0.25
    reset_mode: str = "soft_subtract"

    def __post_init__(self):
        if not 0.0 < self.leak_alpha <= 1.0:
            raise DomainError(f"leak_alpha must lie in (0, 1], got {self.leak_alpha}")
        if not self.v_threshold > 0.0:
            raise DomainError(f"v_threshold must be > 0, got {self.v_threshold}")
        if not self.surrogate_width > 0.0:
            raise DomainError(f"surrogate_width must be > 0, got {self.surrogate_width}")
        if self.reset_mode != "soft_subtract":
            raise DomainError(f"unsupported reset_mode {self.reset_mode!r}")


@dataclass
class LayerState:
    """Membrane state of one layer after step ``t``."""

    membrane: np.ndarray
    pre_reset: np.ndarray
    spikes: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int, batch: tuple[int, ...] = ()) -> "LayerState":
        z = np.zeros(batch + (n,))
        return cls(membrane=z, pre_reset=z.copy(), spikes=z.copy(), t=0)


@dataclass
class TemporalTrace:
    """Cached activations of one layer, everything the backward pass needs."""

    inputs: np.ndarray  # (B, T, n_in)
    pre_reset: np.ndarray  # (B, T, n)
    spikes: np.ndarray  # (B, T, n)

    @property
    def time_steps(self) -> int:
        return self.spikes.shape[1]


@dataclass
class BackwardState:
    spike_error: np.ndarray  # e_t, (B, T, n)
    membrane_error: np.ndarray  # delta_t, (B, T, n)
    weight_grad_accum: np.ndarray  # (n, n_in)
    input_error: np.ndarray  # dL/dx_t, (B, T, n_in)


def surrogate_derivative(pre_reset, params: LIFParams):
    """Sigmoid surrogate for dH/du evaluated at ``pre_reset - v_threshold``."""
    w = params.surrogate_width
    sig = expit((np.asarray(pre_reset, dtype=float) - params.v_threshold) / w)
    return sig * (1.0 - sig) / w


def lif_step(
    state: LayerState,
    input_spikes: np.ndarray,
    weights: np.ndarray,
    params: LIFParams,
    trace: list | None = None,
) -> LayerState:
    """Advance one layer by a single time step.

    ``trace``, when given, is a list that receives ``(pre_reset, spikes)``.
    """
    weights = np.asarray(weights, dtype=float)
    input_spikes = np.asarray(input_spikes, dtype=float)
    if weights.ndim != 2 or input_spikes.shape[-1] != weights.shape[1]:
        raise DimensionError(
            f"input of width {input_spikes.shape[-1]} does not match weights {weights.shape}"
        )
    if state.membrane.shape[-1] != weights.shape[0]:
        raise DimensionError(
            f"state of width {state.membrane.shape[-1]} does not match weights {weights.shape}"
        )
    pre = params.leak_alpha * state.membrane + input_spikes @ weights.T
    if not np.all(np.isfinite(pre)):
        raise NumericError(f"non-finite membrane at step {state.t + 1}")
    spikes = (pre >= params.v_threshold).astype(float)
    post = pre - params.v_threshold * spikes
    if trace is not None:
        trace.append((pre, spikes))
    return LayerState(membrane=post, pre_reset=pre, spikes=spikes, t=state.t + 1)


def simulate_layer(weights: np.ndarray, inputs: np.ndarray, params: LIFParams) -> TemporalTrace:
    """Run one LIF layer over all T steps of ``inputs`` (B, T, n_in)."""
    weights = np.asarray(weights, dtype=float)
    inputs = np.asarray(inputs, dtype=float)
    if inputs.ndim != 3 or inputs.shape[2] != weights.shape[1]:
        raise DimensionError(f"inputs {inputs.shape} incompatible with weights {weights.shape}")
    B, T, _ = inputs.shape
    n = weights.shape[0]
    # the synaptic current is linear, so all steps can be computed at once
    current = inputs @ weights.T
    if not np.all(np.isfinite(current)):
        raise NumericError("non-finite synaptic current")
    pre = np.empty((B, T, n))
    spikes = np.empty((B, T, n))
    u = np.zeros((B, n))
    alpha, vth = params.leak_alpha, params.v_threshold
    for t in range(T):
        p = alpha * u + current[:, t]
        s = (p >= vth).astype(float)
        u = p - vth * s
        pre[:, t] = p
        spikes[:, t] = s
    return TemporalTrace(inputs=inputs, pre_reset=pre, spikes=spikes)


def stbp_backward(
    trace: TemporalTrace,
    spike_errors: np.ndarray,
    weights: np.ndarray,
    params: LIFParams,
) -> BackwardState:
    """Backward-in-time membrane error recursion for one layer.

    ``spike_errors`` holds dL/ds_t for every step, including whatever flows
    back from the layer above. The recursion is

        delta_t = e_t * phi'(u~_t - V_th) + alpha * (1 - s_t) * delta_{t+1}

    with ``delta_{T+1} = 0``, and dL/dW = sum_t delta_t x_t^T (summed over
    the batch as well).
    """
    spike_errors = np.asarray(spike_errors, dtype=float)
    if spike_errors.shape != trace.spikes.shape:
        raise DimensionError(
            f"spike errors {spike_errors.shape} do not match trace {trace.spikes.shape}"
        )
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (trace.spikes.shape[2], trace.inputs.shape[2]):
        raise DimensionError(f"weights {weights.shape} do not match trace")
    T = trace.time_steps
    grad_sur = surrogate_derivative(trace.pre_reset, params)
    gate = params.leak_alpha * (1.0 - trace.spikes)
    delta = np.empty_like(spike_errors)
    nxt = np.zeros_like(spike_errors[:, 0])
    for t in range(T - 1, -1, -1):
        nxt = spike_errors[:, t] * grad_sur[:, t] + gate[:, t] * nxt
        delta[:, t] = nxt
    wgrad = np.einsum("btn,bti->ni", delta, trace.inputs)
    return BackwardState(
        spike_error=spike_errors,
        membrane_error=delta,
        weight_grad_accum=wgrad,
        input_error=delta @ weights,
    )


# ---------------------------------------------------------------------------
# Networks: a stack of LIF layers followed by a non-spiking leaky readout
# ---------------------------------------------------------------------------


@dataclass
class SpikingNetwork:
    layers: list[np.ndarray]
    readout: np.ndarray
    params: LIFParams = field(default_factory=LIFParams)
    readout_leak: float = 0.5

    def __post_init__(self):
        width = None
        if self.layers == [] and self.readout.ndim != 2:
            raise DimensionError("readout weights must be 2-D")
        for i, w in enumerate(self.layers):
            if w.ndim != 2:
                raise DimensionError(f"layer {i} weights must be 2-D")
            if width is not None and w.shape[1] != width:
                raise DimensionError(f"layer {i} expects {w.shape[1]} inputs, previous layer emits {width}")
            width = w.shape[0]
        if width is not None and self.readout.shape[1] != width:
            raise DimensionError(f"readout expects {self.readout.shape[1]} inputs, last layer emits {width}")
        if not 0.0 <= self.readout_leak <= 1.0:
            raise DomainError("readout_leak must lie in [0, 1]")

    @property
    def sizes(self) -> list[int]:
        return [self.layers[0].shape[1]] + [w.shape[0] for w in self.layers] + [self.readout.shape[0]]


def init_network(sizes, params: LIFParams, rng: np.random.Generator, readout_leak: float = 0.5) -> SpikingNetwork:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.

    ``sizes`` lists input width, hidden widths and the number of classes.
    """
    mats = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        mats.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
    return SpikingNetwork(layers=mats[:-1], readout=mats[-1], params=params, readout_leak=readout_leak)


@dataclass
class ForwardResult:
    scores: np.ndarray  # readout membrane averaged over T, (B, C)
    logits: np.ndarray  # per-step readout membrane, (B, T, C)
    traces: list[TemporalTrace]
    readout_input: np.ndarray  # spikes feeding the readout, (B, T, n)


def _readout(spikes: np.ndarray, weights: np.ndarray, leak: float) -> np.ndarray:
    current = spikes @ weights.T
    v = np.empty_like(current)
    acc = np.zeros_like(current[:, 0])
    for t in range(current.shape[1]):
        acc = leak * acc + current[:, t]
        v[:, t] = acc
    return v


def forward_network(net: SpikingNetwork, encoded_input, weights=None) -> ForwardResult:
    """Simulate the network on ``encoded_input`` (B, T, n_in).

    ``weights`` optionally replaces ``net.layers`` (used for masked weights).
    """
    layers = net.layers if weights is None else weights
    if len(layers) != len(net.layers):
        raise DimensionError("weight override must supply every hidden layer")
    x = np.asarray(encoded_input, dtype=float)
    traces = []
    for w in layers:
        tr = simulate_layer(w, x, net.params)
        traces.append(tr)
        x = tr.spikes
    if x.shape[2] != net.readout.shape[1]:
        raise DimensionError("readout width does not match last layer")
    logits = _readout(x, net.readout, net.readout_leak)
    return ForwardResult(scores=logits.mean(axis=1), logits=logits, traces=traces, readout_input=x)


def cross_entropy_over_time(logits: np.ndarray, labels: np.ndarray) -> float:
    """Per-step cross entropy summed over T, averaged over the batch."""
    logp = log_softmax(logits, axis=-1)
    B = logits.shape[0]
    picked = logp[np.arange(B), :, labels]
    return float(-picked.sum() / B)


@dataclass
class NetworkGrads:
    loss: float
    layers: list[np.ndarray]  # dL/dW for every hidden layer (w.r.t. the weights used in forward)
    readout: np.ndarray
    backward: list[BackwardState]


def backward_network(net: SpikingNetwork, fwd: ForwardResult, labels, weights=None) -> NetworkGrads:
    """Cross-entropy loss and STBP gradients for every layer."""
    layers = net.layers if weights is None else weights
    labels = np.asarray(labels)
    logits = fwd.logits
    B, T, C = logits.shape
    loss = cross_entropy_over_time(logits, labels)
    dlogits = softmax(logits, axis=-1)
    dlogits[np.arange(B), :, labels] -= 1.0
    dlogits /= B
    # the readout membrane carries gradient backwards through its leak
    g = np.empty_like(dlogits)
    acc = np.zeros((B, C))
    for t in range(T - 1, -1, -1):
        acc = dlogits[:, t] + net.readout_leak * acc
        g[:, t] = acc
    readout_grad = np.einsum("btc,bth->ch", g, fwd.readout_input)
    err = g @ net.readout
    states = [None] * len(layers)
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        st = stbp_backward(fwd.traces[i], err, layers[i], net.params)
        states[i] = st
        grads[i] = st.weight_grad_accum
        err = st.input_error
    return NetworkGrads(loss=loss, layers=grads, readout=readout_grad, backward=states)
