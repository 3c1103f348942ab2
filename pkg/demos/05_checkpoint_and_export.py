"""Checkpoint mid-search, resume, and export the frozen masks as a bitset file."""
import json
import tempfile
from pathlib import Path

from nmsnn.config import config_from_dict
from nmsnn.masks import import_masks
from nmsnn.pipeline import Trainer, run

cfg = config_from_dict({"seed": 7, "hidden": [32], "epochs_search": 4, "epochs_finetune": 4,
                        "checkpoint_every": 2})
root = Path(tempfile.mkdtemp())

full, summary = run(cfg, output_dir=root / "full")
print(sorted(p.name for p in (root / "full" / "checkpoints").iterdir()))

resumed = Trainer.from_checkpoint(root / "full" / "checkpoints" / "epoch_0002.ckpt", output_dir=root / "again")
print("resumed in phase", resumed.phase, "after", resumed.search_epoch, "search epochs")
resumed.run()
resumed.write_outputs()
same = (root / "full" / "summary.json").read_bytes() == (root / "again" / "summary.json").read_bytes()
print("byte-identical summary:", same)

nbytes = full.export_masks(root / "masks.nmm")
print("mask file", nbytes, "bytes")
for name, (mcfg, layout, bits) in import_masks(root / "masks.nmm").items():
    print(name, f"{mcfg.n_keep}:{mcfg.block_size}", bits.shape, "kept", int(bits.sum()))
print(json.dumps(summary["sparsity"], indent=1)[:400])
