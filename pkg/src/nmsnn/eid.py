"""Eligibility-inspired distillation.

Per-weight credits are temporally accumulated gradient magnitudes
``sum_t |delta_t^i x_t^j|``. Within each N:M block the credits become a soft
target ``q = softmax(credit / tau_q)``, and the block's mask distribution is
pulled towards it with ``KL(q || pi)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import softmax

from .errors import DimensionError, DomainError
from .masks import BlockLayout, BlockLogits

__all__ = [
    "EligibilityCredits",
    "BlockTargets",
    "batch_credit",
    "accumulate_credits",
    "block_targets",
    "eid_loss",
    "dump_blocks",
]


@dataclass
class EligibilityCredits:
    per_weight: np.ndarray
    ema_decay: float = 0.9
    step_count: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ema_decay < 1.0:
            raise DomainError("ema_decay must lie in [0, 1)")

    @classmethod
    def zeros(cls, shape, ema_decay: float = 0.9) -> "EligibilityCredits":
        return cls(per_weight=np.zeros(shape), ema_decay=ema_decay)


@dataclass
class BlockTargets:
    q: np.ndarray  # (num_blocks, M)
    tau_q: float


def batch_credit(membrane_error: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    """sum over batch and time of |delta_t^i x_t^j| for a (B, T, n) / (B, T, n_in) pair."""
    return np.einsum("btn,bti->ni", np.abs(membrane_error), np.abs(inputs))


def _update(credits: EligibilityCredits, c_batch: np.ndarray) -> EligibilityCredits:
    if c_batch.shape != credits.per_weight.shape:
        raise DimensionError(f"credit {c_batch.shape} does not match {credits.per_weight.shape}")
    d = credits.ema_decay
    new = d * credits.per_weight + (1.0 - d) * c_batch
    assert np.all(new >= 0.0), "credits went negative"
    return EligibilityCredits(per_weight=new, ema_decay=d, step_count=credits.step_count + 1)


def accumulate_credits(credits: EligibilityCredits, per_step_grads) -> EligibilityCredits:
    """Fold one batch of per-timestep weight gradients into the running credits.

    ``per_step_grads`` is a sequence over t of gradient tensors shaped like the
    weights, or an array whose trailing two axes are the weight axes (any
    leading axes, time and sample, are summed after taking magnitudes).
    """
    if isinstance(per_step_grads, np.ndarray):
        g = per_step_grads
    else:
        g = np.stack([np.asarray(x, dtype=float) for x in per_step_grads])
    shape = credits.per_weight.shape
    if g.shape[-2:] != shape:
        raise DimensionError(f"gradients {g.shape} do not end in {shape}")
    c_batch = np.abs(g).reshape((-1,) + shape).sum(axis=0)
    return _update(credits, c_batch)


def accumulate_from_trace(credits: EligibilityCredits, membrane_error, inputs) -> EligibilityCredits:
    """Same as ``accumulate_credits`` without materialising per-step tensors."""
    return _update(credits, batch_credit(membrane_error, inputs))


def block_targets(
    credits: EligibilityCredits,
    layout: BlockLayout,
    tau_q: float = 1.0,
    normalize: bool = True,
) -> BlockTargets:
    """Blockwise softmax of credits at temperature ``tau_q``.

    With ``normalize`` each block's credits are divided by the block maximum
    first (when positive). Padded positions get probability zero.
    """
    if not tau_q > 0.0:
        raise DomainError(f"tau_q must be > 0, got {tau_q}")
    c = layout.to_blocks(credits.per_weight).astype(float)
    valid = layout.valid()
    if normalize:
        peak = np.max(np.where(valid, c, 0.0), axis=1, keepdims=True)
        c = np.where(peak > 0, c / np.where(peak > 0, peak, 1.0), c)
    z = np.where(valid, c / tau_q, -np.inf)
    return BlockTargets(q=softmax(z, axis=1), tau_q=float(tau_q))


def _stack(items, attr):
    if isinstance(items, (list, tuple)):
        return np.concatenate([getattr(x, attr) for x in items], axis=0)
    return getattr(items, attr)


def eid_loss(targets, logits) -> tuple[float, list[np.ndarray] | np.ndarray]:
    """Mean over all blocks of KL(q || pi) and its gradient w.r.t. the logits.

    ``targets`` and ``logits`` are matching single objects or lists (one per
    tensor); the mean runs over the blocks of all tensors together. The
    gradient is ``(pi - q) / B``, returned in the same structure as ``logits``.
    """
    q = _stack(targets, "q")
    if isinstance(logits, (list, tuple)):
        logp = np.concatenate([lg.log_probs() for lg in logits], axis=0)
    else:
        logp = logits.log_probs()
    if q.shape != logp.shape:
        raise DimensionError(f"targets {q.shape} and logits {logp.shape} disagree")
    B = q.shape[0]
    pos = q > 0
    logq = np.log(np.where(pos, q, 1.0))
    kl = np.where(pos, q * (logq - np.where(pos, logp, 0.0)), 0.0).sum()
    grad = (np.exp(logp) - q) / B
    if isinstance(logits, (list, tuple)):
        out, start = [], 0
        for lg in logits:
            n = lg.theta.shape[0]
            out.append(grad[start : start + n])
            start += n
        return float(kl / B), out
    return float(kl / B), grad


def dump_blocks(stream, credits: EligibilityCredits, layout: BlockLayout, targets: BlockTargets, logits: BlockLogits, name: str = ""):
    """Write one JSON line per block with its credits, target and mask distribution."""
    c = layout.to_blocks(credits.per_weight)
    p = logits.probs()
    for i in range(layout.num_blocks):
        rec = {
            "tensor": name,
            "block": i,
            "credits": [round(float(x), 8) for x in c[i]],
            "q": [round(float(x), 8) for x in targets.q[i]],
            "pi": [round(float(x), 8) for x in p[i]],
        }
        stream.write(json.dumps(rec) + "\n")
