"""Sparsity and efficiency accounting.

Synaptic operations are counted with the usual spikes x surviving-synapses
convention: every spike a layer receives at a step costs one operation per
nonzero outgoing synapse of the presynaptic neuron into that layer.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

__all__ = [
    "SparsitySnapshot",
    "weight_retention",
    "connectivity_retention",
    "count_sops",
    "snapshot",
]


@dataclass
class SparsitySnapshot:
    weight_retained_pct: float
    conn_retained_pct: float
    sops_millions: float
    per_layer: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _pairs(weights, masks):
    if masks is None:
        masks = [None] * len(weights)
    if len(masks) != len(weights):
        raise ValueError("need one mask (or None) per maskable tensor")
    for w, m in zip(weights, masks):
        w = np.asarray(w)
        yield w, (np.ones(w.shape) if m is None else np.asarray(m))


def weight_retention(weights, masks=None) -> float:
    """Percentage of maskable weights that are nonzero after masking.

    ``weights`` and ``masks`` are lists of dense (rows, cols) tensors, one per
    maskable layer; a ``None`` mask means all ones.
    """
    kept = total = 0
    for w, m in _pairs(weights, masks):
        kept += np.count_nonzero(w * m)
        total += w.size
    return 100.0 * kept / total if total else 100.0


def connectivity_retention(weights, masks=None, alive=None) -> float:
    """Percentage of synapses that survive.

    A synapse survives when its mask bit is set and, if ``alive`` lists
    per-layer ``(post_alive, pre_alive)`` boolean vectors, both neurons it
    connects are alive. Without neuron pruning this equals the fraction of
    set mask bits.
    """
    kept = total = 0
    for i, (w, m) in enumerate(_pairs(weights, masks)):
        live = m != 0
        if alive is not None and alive[i] is not None:
            post, pre = alive[i]
            live = live & np.asarray(post, bool)[:, None] & np.asarray(pre, bool)[None, :]
        kept += int(live.sum())
        total += w.size
    return 100.0 * kept / total if total else 100.0


def count_sops(layer_inputs, effective_weights) -> float:
    """Synaptic operations per sample, in millions.

    ``layer_inputs[l]`` are the spikes (B, T, n_in) arriving at layer ``l``
    and ``effective_weights[l]`` its (masked) weight matrix, readout included.
    """
    total = 0.0
    batch = None
    for x, w in zip(layer_inputs, effective_weights):
        x = np.asarray(x)
        batch = x.shape[0]
        fan_out = np.count_nonzero(np.asarray(w), axis=0)
        total += float(np.einsum("bti,i->", x, fan_out))
    if not batch:
        return 0.0
    return total / batch / 1e6


def snapshot(weights, masks, layer_inputs=None, effective_weights=None) -> SparsitySnapshot:
    per_layer = []
    for i, (w, m) in enumerate(_pairs(weights, masks)):
        per_layer.append(
            {
                "layer": i,
                "weight_retained_pct": weight_retention([w], [m]),
                "conn_retained_pct": connectivity_retention([w], [m]),
            }
        )
    sops = 0.0
    if layer_inputs is not None:
        sops = count_sops(layer_inputs, effective_weights)
    return SparsitySnapshot(
        weight_retained_pct=weight_retention(weights, masks),
        conn_retained_pct=connectivity_retention(weights, masks),
        sops_millions=sops,
        per_layer=per_layer,
    )
