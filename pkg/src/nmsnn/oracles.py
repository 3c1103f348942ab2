"""Independent reference computations used to check the fast paths.

Nothing here shares code with the implementations it checks beyond the
parameter containers: the LIF reference is a scalar loop, gradients come from
central finite differences of a relaxed forward pass, and expectations come
from exhaustive enumeration.

The relaxed forward pass holds the hard spikes and reset gates of a nominal
run fixed and lets only a smooth deviation flow through the spike function:

    s_t = s*_t + sigma((u~_t - V)/w) - sigma((u~*_t - V)/w)
    u_t = (1 - s*_t) u~_t + s*_t (u~*_t - V)

At the nominal weights its value equals the true network, and its exact
derivative is the surrogate recursion (phi' through the spike, the reset gate
``1 - s`` through the membrane).
"""
from __future__ import annotations

import math

import numpy as np

from .snn import LIFParams, SpikingNetwork, forward_network

__all__ = [
    "scalar_lif_reference",
    "scalar_network_loss",
    "relaxed_network_loss",
    "central_difference",
    "relative_error",
]


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def scalar_lif_reference(weights, inputs, params: LIFParams):
    """Element-by-element simulation of one layer for a single sample.

    ``inputs`` is a list of T input vectors. Returns (pre_reset, spikes) as
    nested lists.
    """
    n, m = len(weights), len(weights[0])
    u = [0.0] * n
    pres, spikes = [], []
    for x in inputs:
        pre_t, s_t = [], []
        for i in range(n):
            acc = params.leak_alpha * u[i]
            for j in range(m):
                acc += weights[i][j] * x[j]
            s = 1.0 if acc >= params.v_threshold else 0.0
            u[i] = acc - params.v_threshold * s
            pre_t.append(acc)
            s_t.append(s)
        pres.append(pre_t)
        spikes.append(s_t)
    return pres, spikes


def scalar_network_loss(layers, readout, params: LIFParams, readout_leak: float, inputs, label: int) -> float:
    """Loss of one sample computed with plain Python loops."""
    x = [list(map(float, row)) for row in inputs]
    for w in layers:
        _, x = scalar_lif_reference(w, x, params)
    C = len(readout)
    v = [0.0] * C
    loss = 0.0
    for s in x:
        for c in range(C):
            v[c] = readout_leak * v[c] + sum(readout[c][h] * s[h] for h in range(len(s)))
        mx = max(v)
        lse = mx + math.log(sum(math.exp(vc - mx) for vc in v))
        loss += lse - v[label]
    return loss


def relaxed_network_loss(net: SpikingNetwork, inputs, labels, weights, nominal, readout=None) -> float:
    """Loss of the relaxed network at ``weights`` around the ``nominal`` forward result."""
    p = net.params
    w_s = p.surrogate_width
    readout = net.readout if readout is None else readout
    x = np.asarray(inputs, dtype=float)
    for W, tr in zip(weights, nominal.traces):
        B, T, _ = x.shape
        current = x @ np.asarray(W).T
        u = np.zeros((B, W.shape[0]))
        out = np.empty((B, T, W.shape[0]))
        for t in range(T):
            s_star = tr.spikes[:, t]
            pre_star = tr.pre_reset[:, t]
            pre = p.leak_alpha * u + current[:, t]
            sig = 1.0 / (1.0 + np.exp(-(pre - p.v_threshold) / w_s))
            sig_star = 1.0 / (1.0 + np.exp(-(pre_star - p.v_threshold) / w_s))
            out[:, t] = s_star + sig - sig_star
            u = (1.0 - s_star) * pre + s_star * (pre_star - p.v_threshold)
        x = out
    B, T, _ = x.shape
    current = x @ readout.T
    v = np.zeros((B, readout.shape[0]))
    loss = 0.0
    labels = np.asarray(labels)
    for t in range(T):
        v = net.readout_leak * v + current[:, t]
        mx = v.max(axis=1, keepdims=True)
        lse = (mx + np.log(np.exp(v - mx).sum(axis=1, keepdims=True)))[:, 0]
        loss += float(np.sum(lse - v[np.arange(B), labels]))
    return loss / B


def central_difference(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Gradient of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x, dtype=float)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-12) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||)."""
    a = np.ravel(a)
    b = np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def nominal_forward(net, inputs, weights=None):
    return forward_network(net, inputs, weights)
