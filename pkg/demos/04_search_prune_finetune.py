"""A complete run on the 8x8 handwritten digits: search, prune, finetune.

Prints the per-epoch report stream and the summary, then compares with a
dense network trained for the same number of epochs.
"""
from nmsnn.config import config_from_dict
from nmsnn.pipeline import reports_csv, run

base = {
    "seed": 0,
    "dataset": {"kind": "image_rate_coded", "source_path": "sklearn:digits"},
    "hidden": [128],
    "batch_size": 32,
    "epochs_search": 5,
    "epochs_finetune": 15,
    "optimizer": {"lr": 3e-3, "logit_lr": 0.05},
    "tau_q": 0.2,
}

trainer, summary = run(config_from_dict({**base, "mask": {"n_keep": 2, "block_size": 4}}))
print(reports_csv(trainer.reports))
print("2:4 test accuracy", summary["final_accuracy"])
print("weights kept %.1f%%" % summary["sparsity"]["weight_retained_pct"])

_, dense = run(config_from_dict({**base, "mask": {"enabled": False}}))
print("dense test accuracy", dense["final_accuracy"])

# blocks where both draws hit the same position keep a single weight
pops = [m.sum(axis=1) for m in trainer.frozen_masks]
for i, p in enumerate(pops):
    print(f"layer {i}: {int((p == 1).sum())} of {p.size} blocks keep one weight")
