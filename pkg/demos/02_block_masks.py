"""Sampling N:M block masks from per-position logits.

Each block keeps M logits. N Gumbel-max draws pick N one-hot vectors and
their elementwise OR is the block mask, so a block ends up with between 1
and N kept weights (fewer than N when two draws collide).
"""
import numpy as np

from nmsnn.masks import (
    AnnealSchedule,
    BlockLogits,
    MaskConfig,
    anneal_tau,
    compose_mask,
    enumerate_mask_space,
    finalize_hard_masks,
    gumbel_draw,
    straight_through,
)

rng = np.random.default_rng(0)

for n, m in [(2, 4), (2, 8)]:
    print(f"{n}:{m} reachable masks: {len(enumerate_mask_space(MaskConfig(n, m)))}")

eye = np.eye(4)
print("OR of e1 and e3:", compose_mask([eye[1], eye[3]]))
print("OR of e2 and e2:", compose_mask([eye[2], eye[2]]))

# a 3x8 weight matrix holds six blocks of four
layout = MaskConfig(2, 4).layout((3, 8))
logits = BlockLogits(rng.normal(size=(layout.num_blocks, 4)))
print("\nblock probabilities:\n", logits.probs().round(3))

sched = AnnealSchedule(tau_max=1.0, tau_min=0.1, total_steps=5)
print("\ntemperatures:", [round(anneal_tau(sched, t), 4) for t in range(6)])

s = gumbel_draw(logits, rng, tau=anneal_tau(sched, 5), n_draws=2)
bits = finalize_hard_masks(s.hard)
print("\nhard block masks:\n", bits)
print("as a weight mask:\n", layout.from_blocks(bits))

# forward value is the hard mask; gradients flow through the soft relaxation
st = straight_through(s)
print("straight-through forward equals hard mask:", np.array_equal(st.mask(), bits))
g = st.mask_vjp(np.ones_like(bits, dtype=float))
print("logit gradient of sum(mask):\n", g.round(4))
