"""Turning accumulated gradient magnitudes into per-block target distributions.

Credits are an exponential moving average of sum_t |delta_t| * |x_t| per
weight. Inside each block they are scaled by the block maximum and passed
through a softmax at temperature tau_q. The KL from that target to the mask
distribution is added to the task loss.
"""
import numpy as np

from nmsnn.eid import EligibilityCredits, accumulate_from_trace, block_targets, eid_loss
from nmsnn.masks import BlockLogits, MaskConfig

rng = np.random.default_rng(1)
layout = MaskConfig(2, 4).layout((2, 8))
credits = EligibilityCredits.zeros((2, 8), ema_decay=0.9)

# inputs 1 and 6 fire often; the membrane error is the same everywhere
for _ in range(20):
    x = (rng.random((16, 5, 8)) < np.array([0.1, 0.8, 0.1, 0.1, 0.1, 0.1, 0.8, 0.1])).astype(float)
    delta = rng.normal(size=(16, 5, 2))
    credits = accumulate_from_trace(credits, delta, x)

print("credits per weight:\n", credits.per_weight.round(3))
for tau_q in (1.0, 0.2):
    tg = block_targets(credits, layout, tau_q=tau_q)
    print(f"\ntargets at tau_q={tau_q}:\n", tg.q.round(3))

logits = BlockLogits(np.zeros((layout.num_blocks, 4)))
tg = block_targets(credits, layout, tau_q=0.2)
for step in range(201):
    kl, grad = eid_loss(tg, logits)
    if step % 50 == 0:
        print(f"step {step:3d}  KL {kl:.5f}")
    logits.theta -= 2.0 * grad
print("mask distribution after descent:\n", logits.probs().round(3))
