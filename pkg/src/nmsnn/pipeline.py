"""Search -> prune -> finetune training of N:M sparse spiking networks.

The trainer is an explicit state machine (phase, epoch counters, RNG states,
optimizer moments) so that a checkpoint taken at any epoch boundary resumes
to exactly the same run.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, config_from_dict
from .data import load_dataset
from .eid import EligibilityCredits, accumulate_from_trace, block_targets, eid_loss
from .errors import DivergenceError, InvariantViolation, NumericError, StateError
from .masks import (
    AnnealSchedule,
    BlockLogits,
    MaskConfig,
    anneal_tau,
    argmax_basis,
    export_masks,
    finalize_hard_masks,
    gumbel_draw,
    straight_through,
)
from .metrics import count_sops, snapshot
from .optim import cosine_lr, make_optimizer
from .snn import LIFParams, backward_network, forward_network, init_network

__all__ = [
    "PhaseReport",
    "REPORT_COLUMNS",
    "Trainer",
    "search_phase",
    "prune_phase",
    "finetune_phase",
    "run",
]

log = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "phase",
    "epoch",
    "task_loss",
    "eid_loss",
    "train_accuracy",
    "accuracy",
    "tau",
    "weight_retained_pct",
    "conn_retained_pct",
    "sops_millions",
)


@dataclass
class PhaseReport:
    phase: str
    epoch: int
    task_loss: float | None
    eid_loss: float | None
    train_accuracy: float | None
    accuracy: float
    tau: float | None
    weight_retained_pct: float
    conn_retained_pct: float
    sops_millions: float

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_COLUMNS}


@dataclass
class SearchStep:
    task_loss: float
    eid_loss: float
    weight_grads: list[np.ndarray]
    readout_grad: np.ndarray
    logit_grads: list[np.ndarray]
    scores: np.ndarray


def _rng_from_state(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


@dataclass
class _Batches:
    order: np.ndarray
    size: int

    def __iter__(self):
        for start in range(0, len(self.order), self.size):
            yield self.order[start : start + self.size]


class Trainer:
    def __init__(self, cfg: RunConfig, train=None, test=None, output_dir=None):
        self.cfg = cfg.validate()
        if train is None:
            train, test = load_dataset(cfg.dataset_spec(), cfg.seed)
        self.train, self.test = train, test
        self.output_dir = Path(output_dir) if output_dir is not None else None

        root = np.random.SeedSequence(cfg.seed)
        init_ss, sampler_ss, data_ss = root.spawn(3)
        init_rng = np.random.Generator(np.random.PCG64(init_ss))
        self.sampler_rng = np.random.Generator(np.random.PCG64(sampler_ss))
        self.data_rng = np.random.Generator(np.random.PCG64(data_ss))

        self.params = LIFParams(
            leak_alpha=cfg.lif.leak_alpha,
            v_threshold=cfg.lif.v_threshold,
            surrogate_width=cfg.lif.surrogate_width,
        )
        sizes = [train.input_dim, *cfg.hidden, train.num_classes]
        self.net = init_network(sizes, self.params, init_rng, readout_leak=cfg.lif.readout_leak)
        self.mask_cfg = MaskConfig(cfg.mask.n_keep, cfg.mask.block_size)
        self.layouts = [self.mask_cfg.layout(w.shape) for w in self.net.layers]
        self.logits = [BlockLogits.initial(lay, init_rng) for lay in self.layouts]
        self.credits = [EligibilityCredits.zeros(w.shape, cfg.credit_decay) for w in self.net.layers]
        self.schedule = AnnealSchedule(cfg.anneal.tau_max, cfg.anneal.tau_min, cfg.epochs_search)
        self.optimizer = make_optimizer(cfg.optimizer, cfg.optimizer.lr, cfg.optimizer.logit_lr)

        self.last_samples: list[np.ndarray] | None = None
        self.frozen_masks: list[np.ndarray] | None = None
        self.reports: list[dict] = []
        self.search_epoch = 0
        self.finetune_epoch = 0
        if cfg.mask.enabled:
            self.phase = "search"
        else:
            # dense baseline: all-ones masks, the whole budget is finetuning
            self.frozen_masks = [np.ones((lay.num_blocks, lay.block_size), dtype=np.uint8) for lay in self.layouts]
            self.phase = "finetune"

    # ------------------------------------------------------------------
    # bookkeeping

    @property
    def finetune_epochs(self) -> int:
        if self.cfg.mask.enabled:
            return self.cfg.epochs_finetune
        return self.cfg.epochs_search + self.cfg.epochs_finetune

    @property
    def epochs_done(self) -> int:
        return self.search_epoch + self.finetune_epoch

    @property
    def done(self) -> bool:
        return self.phase == "done"

    def dense_masks(self, blocks) -> list[np.ndarray]:
        return [lay.from_blocks(b).astype(float) for lay, b in zip(self.layouts, blocks)]

    def current_block_masks(self):
        if self.frozen_masks is not None:
            return self.frozen_masks
        if self.last_samples is not None:
            return [finalize_hard_masks(h) for h in self.last_samples]
        return [finalize_hard_masks(argmax_basis(lg, self.mask_cfg.n_keep, self.cfg.mask.replacement)) for lg in self.logits]

    def effective_weights(self, dense_masks):
        return [w * m for w, m in zip(self.net.layers, dense_masks)]

    def _apply(self, key, group, param, grad, lr_scale=1.0, keep=None):
        upd = self.optimizer.step(key, group, param, grad, lr_scale)
        if keep is not None:
            upd = upd * keep
        param += upd

    # ------------------------------------------------------------------
    # evaluation

    def evaluate(self, dataset, dense_masks):
        """Accuracy and per-sample SOPs on ``dataset`` with fixed masks."""
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.cfg.seed, 0xE7A1])))
        eff = self.effective_weights(dense_masks)
        correct = 0
        sops = 0.0
        bs = max(self.cfg.batch_size, 256)
        for idx in _Batches(np.arange(len(dataset)), bs):
            batch = dataset.batch(idx, rng)
            try:
                fwd = forward_network(self.net, batch.spikes, eff)
            except NumericError as exc:
                raise DivergenceError(f"evaluation after epoch {self.epochs_done}: {exc}") from exc
            correct += int(np.sum(np.argmax(fwd.scores, axis=1) == batch.labels))
            inputs = [tr.inputs for tr in fwd.traces] + [fwd.readout_input]
            sops += count_sops(inputs, eff + [self.net.readout]) * len(idx)
        n = len(dataset)
        return correct / n, sops / n

    def _report(self, phase, epoch, task_loss, eid, train_acc, tau, block_masks):
        dense = self.dense_masks(block_masks)
        acc, sops = self.evaluate(self.test, dense)
        snap = snapshot(self.net.layers, dense)
        rep = PhaseReport(
            phase=phase,
            epoch=epoch,
            task_loss=task_loss,
            eid_loss=eid,
            train_accuracy=train_acc,
            accuracy=acc,
            tau=tau,
            weight_retained_pct=snap.weight_retained_pct,
            conn_retained_pct=snap.conn_retained_pct,
            sops_millions=sops,
        ).to_dict()
        self.reports.append(rep)
        log.info("%s epoch %d: loss=%s acc=%.4f", phase, epoch, task_loss, acc)
        return rep

    # ------------------------------------------------------------------
    # phases

    def search_gradients(self, batch, samples, update_credits: bool = True) -> SearchStep:
        """Task loss, EID loss and gradients for one batch under sampled masks.

        The logit gradient is the straight-through pullback of the task loss
        plus ``eid_lambda`` times the EID gradient, evaluated with the credits
        after this batch has been folded in.
        """
        cfg = self.cfg
        sts = [straight_through(s) for s in samples]
        dense = [lay.from_blocks(st.mask()) for lay, st in zip(self.layouts, sts)]
        eff = self.effective_weights(dense)
        fwd, grads = self._forward_backward(batch, eff)
        if update_credits:
            for i in range(len(self.credits)):
                self.credits[i] = accumulate_from_trace(
                    self.credits[i], grads.backward[i].membrane_error, fwd.traces[i].inputs
                )
        eid = 0.0
        eid_grads = None
        if cfg.eid_lambda > 0:
            targets = [
                block_targets(c, lay, cfg.tau_q, cfg.credit_normalize) for c, lay in zip(self.credits, self.layouts)
            ]
            eid, eid_grads = eid_loss(targets, self.logits)
        weight_grads, logit_grads = [], []
        for i, (w, lay, st) in enumerate(zip(self.net.layers, self.layouts, sts)):
            g_eff = grads.layers[i]
            dtheta = st.mask_vjp(lay.to_blocks(g_eff * w))
            if eid_grads is not None:
                dtheta = dtheta + cfg.eid_lambda * eid_grads[i]
            weight_grads.append(g_eff * dense[i])
            logit_grads.append(dtheta)
        return SearchStep(
            task_loss=grads.loss,
            eid_loss=eid,
            weight_grads=weight_grads,
            readout_grad=grads.readout,
            logit_grads=logit_grads,
            scores=fwd.scores,
        )

    def _forward_backward(self, batch, eff):
        try:
            fwd = forward_network(self.net, batch.spikes, eff)
        except NumericError as exc:
            raise DivergenceError(f"{self.phase} epoch {self.epochs_done + 1}: {exc}") from exc
        grads = backward_network(self.net, fwd, batch.labels, eff)
        if not math.isfinite(grads.loss):
            raise DivergenceError(f"non-finite task loss in {self.phase} epoch {self.epochs_done + 1}")
        return fwd, grads

    def search_epoch_step(self):
        """One search epoch: joint update of weights and mask logits."""
        if self.phase != "search":
            raise StateError(f"search step requested in phase {self.phase!r}")
        cfg = self.cfg
        N = self.mask_cfg.n_keep
        tau = anneal_tau(self.schedule, self.search_epoch + 1)
        order = self.data_rng.permutation(len(self.train))
        tot_loss = tot_eid = 0.0
        correct = seen = 0
        for idx in _Batches(order, cfg.batch_size):
            batch = self.train.batch(idx, self.data_rng)
            samples = [gumbel_draw(lg, self.sampler_rng, tau, N, cfg.mask.replacement) for lg in self.logits]
            step = self.search_gradients(batch, samples)
            for i, w in enumerate(self.net.layers):
                self._apply(f"layer{i}", "weights", w, step.weight_grads[i])
                self._apply(f"logits{i}", "logits", self.logits[i].theta, step.logit_grads[i])
            self._apply("readout", "weights", self.net.readout, step.readout_grad)
            self.last_samples = [s.hard for s in samples]
            n = len(idx)
            tot_loss += step.task_loss * n
            tot_eid += step.eid_loss * n
            correct += int(np.sum(np.argmax(step.scores, axis=1) == batch.labels))
            seen += n
        self.search_epoch += 1
        return self._report(
            "search", self.epochs_done, tot_loss / seen, tot_eid / seen, correct / seen, tau,
            self.current_block_masks(),
        )

    def prune(self):
        """Freeze masks from the last hard draws and zero the pruned weights."""
        if self.phase != "search":
            raise StateError(f"prune requested in phase {self.phase!r}")
        if self.search_epoch < self.cfg.epochs_search:
            raise StateError("prune requested before search completed")
        N = self.mask_cfg.n_keep
        if self.cfg.mask.prune_from == "argmax":
            hard = [argmax_basis(lg, N, self.cfg.mask.replacement) for lg in self.logits]
        elif self.last_samples is not None:
            hard = self.last_samples
        else:
            # no search epochs: a single draw from the initial logits
            tau = self.schedule.tau_max
            hard = [gumbel_draw(lg, self.sampler_rng, tau, N, self.cfg.mask.replacement).hard for lg in self.logits]
        self.frozen_masks = [finalize_hard_masks(h) for h in hard]
        for w, m in zip(self.net.layers, self.dense_masks(self.frozen_masks)):
            w *= m
        self.phase = "finetune"
        tau = anneal_tau(self.schedule, self.schedule.total_steps)
        return self._report("prune", self.epochs_done, None, None, None, tau, self.frozen_masks)

    def finetune_epoch_step(self):
        """One epoch of weight training with frozen masks."""
        if self.phase != "finetune":
            raise StateError(f"finetune step requested in phase {self.phase!r}")
        cfg = self.cfg
        dense = self.dense_masks(self.frozen_masks)
        zero_pos = [m == 0 for m in dense]
        lr_scale = cosine_lr(self.finetune_epoch, self.finetune_epochs)
        order = self.data_rng.permutation(len(self.train))
        tot_loss = 0.0
        correct = seen = 0
        for idx in _Batches(order, cfg.batch_size):
            batch = self.train.batch(idx, self.data_rng)
            fwd, grads = self._forward_backward(batch, self.effective_weights(dense))
            for i, w in enumerate(self.net.layers):
                self._apply(f"layer{i}", "weights", w, grads.layers[i] * dense[i], lr_scale, keep=dense[i])
                if np.any(w[zero_pos[i]] != 0.0):
                    raise InvariantViolation(f"pruned weight of layer {i} became nonzero")
            self._apply("readout", "weights", self.net.readout, grads.readout, lr_scale)
            n = len(idx)
            tot_loss += grads.loss * n
            correct += int(np.sum(np.argmax(fwd.scores, axis=1) == batch.labels))
            seen += n
        self.finetune_epoch += 1
        tau = anneal_tau(self.schedule, self.schedule.total_steps) if cfg.mask.enabled else None
        return self._report("finetune", self.epochs_done, tot_loss / seen, None, correct / seen, tau, self.frozen_masks)

    def step(self):
        """Advance the state machine by one unit of work (an epoch or the prune)."""
        if self.phase == "search":
            if self.search_epoch < self.cfg.epochs_search:
                rep = self.search_epoch_step()
                self._maybe_checkpoint()
                if self.search_epoch == self.cfg.epochs_search:
                    self.save("search_done")
                return rep
            rep = self.prune()
            self.save("pruned")
            return rep
        if self.phase == "finetune":
            if self.finetune_epoch < self.finetune_epochs:
                rep = self.finetune_epoch_step()
                self._maybe_checkpoint()
                return rep
            self.phase = "done"
            self.save("final")
            return None
        raise StateError("run already finished")

    def run(self):
        while not self.done:
            self.step()
        return self.summary()

    # ------------------------------------------------------------------
    # persistence

    def _maybe_checkpoint(self):
        k = self.cfg.checkpoint_every
        if k and self.epochs_done % k == 0:
            self.save(f"epoch_{self.epochs_done:04d}")

    def state(self):
        tensors = {"readout": self.net.readout}
        for i, w in enumerate(self.net.layers):
            tensors[f"layer/{i}"] = w
            tensors[f"logits/{i}"] = self.logits[i].theta
            tensors[f"credits/{i}"] = self.credits[i].per_weight
            if self.last_samples is not None:
                tensors[f"last_samples/{i}"] = self.last_samples[i].astype(np.uint8)
            if self.frozen_masks is not None:
                tensors[f"masks/{i}"] = self.frozen_masks[i].astype(np.uint8)
        opt = self.optimizer.state()
        tensors.update(opt["arrays"])
        meta = {
            "phase": self.phase,
            "search_epoch": self.search_epoch,
            "finetune_epoch": self.finetune_epoch,
            "credit_steps": [c.step_count for c in self.credits],
            "has_last_samples": self.last_samples is not None,
            "has_masks": self.frozen_masks is not None,
            "sampler_rng": self.sampler_rng.bit_generator.state,
            "data_rng": self.data_rng.bit_generator.state,
            "optimizer": opt["meta"],
            "reports": self.reports,
            "config": self.cfg.to_dict(),
        }
        return meta, tensors

    def save(self, tag: str, path=None):
        if path is None:
            if self.output_dir is None:
                return None
            ckdir = self.output_dir / "checkpoints"
            ckdir.mkdir(parents=True, exist_ok=True)
            path = ckdir / f"{tag}.ckpt"
        meta, tensors = self.state()
        return save_checkpoint(path, self.cfg.config_hash(), meta, tensors)

    @classmethod
    def from_checkpoint(cls, path, train=None, test=None, output_dir=None) -> "Trainer":
        digest, meta, tensors = load_checkpoint(path)
        cfg = config_from_dict(meta["config"])
        if cfg.config_hash() != digest:
            raise ValueError(f"{path}: config hash mismatch")
        tr = cls(cfg, train, test, output_dir)
        tr.load_state(meta, tensors)
        return tr

    def load_state(self, meta, tensors):
        self.net.readout[...] = tensors["readout"]
        for i, w in enumerate(self.net.layers):
            w[...] = tensors[f"layer/{i}"]
            self.logits[i].theta[...] = tensors[f"logits/{i}"]
            self.credits[i] = EligibilityCredits(
                per_weight=tensors[f"credits/{i}"].copy(),
                ema_decay=self.cfg.credit_decay,
                step_count=meta["credit_steps"][i],
            )
        n = len(self.net.layers)
        self.last_samples = (
            [tensors[f"last_samples/{i}"].astype(float) for i in range(n)] if meta["has_last_samples"] else None
        )
        self.frozen_masks = [tensors[f"masks/{i}"].copy() for i in range(n)] if meta["has_masks"] else None
        self.sampler_rng = _rng_from_state(meta["sampler_rng"])
        self.data_rng = _rng_from_state(meta["data_rng"])
        self.optimizer.load(meta["optimizer"], tensors)
        self.phase = meta["phase"]
        self.search_epoch = meta["search_epoch"]
        self.finetune_epoch = meta["finetune_epoch"]
        self.reports = list(meta["reports"])

    # ------------------------------------------------------------------
    # outputs

    def summary(self) -> dict:
        masks = self.current_block_masks()
        dense = self.dense_masks(masks)
        acc, sops = self.evaluate(self.test, dense)
        snap = snapshot(self.net.layers, dense)
        snap.sops_millions = sops
        return {
            "config_hash": self.cfg.config_hash(),
            "seed": self.cfg.seed,
            "phase": self.phase,
            "n_keep": self.cfg.mask.n_keep,
            "block_size": self.cfg.mask.block_size,
            "mask_enabled": self.cfg.mask.enabled,
            "epochs_search": self.search_epoch,
            "epochs_finetune": self.finetune_epoch,
            "final_accuracy": acc,
            "sparsity": snap.to_dict(),
            "weights_sha256": _digest([*self.net.layers, self.net.readout]),
        }

    def mask_records(self) -> dict:
        if self.frozen_masks is None or not self.cfg.mask.enabled:
            raise StateError("masks are only exportable after the prune phase")
        return {
            f"layer{i}": (self.mask_cfg, lay, m)
            for i, (lay, m) in enumerate(zip(self.layouts, self.frozen_masks))
        }

    def export_masks(self, path) -> int:
        return export_masks(path, self.mask_records())

    def write_outputs(self, output_dir=None) -> dict:
        out = Path(output_dir or self.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "reports.csv").write_text(reports_csv(self.reports))
        (out / "reports.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in self.reports))
        summary = self.summary()
        (out / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
        return summary


def _digest(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()


def reports_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in reports:
        w.writerow(["" if r[c] is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Functional entry points
# ---------------------------------------------------------------------------


def search_phase(cfg: RunConfig, data=None, trainer: Trainer | None = None):
    """Run every search epoch. Returns (weights, logits, last_samples, reports)."""
    tr = trainer or Trainer(cfg, *(data or (None, None)))
    while tr.phase == "search" and tr.search_epoch < cfg.epochs_search:
        tr.search_epoch_step()
    return tr.net.layers, tr.logits, tr.last_samples, [r for r in tr.reports if r["phase"] == "search"]


def prune_phase(trainer: Trainer):
    """Returns (masked_weights, frozen_masks)."""
    trainer.prune()
    return trainer.net.layers, trainer.frozen_masks


def finetune_phase(trainer: Trainer):
    """Returns (weights, finetune reports)."""
    while trainer.finetune_epoch < trainer.finetune_epochs:
        trainer.finetune_epoch_step()
    return trainer.net.layers, [r for r in trainer.reports if r["phase"] == "finetune"]


def run(cfg: RunConfig, data=None, output_dir=None):
    """Full pipeline. Returns (trainer, summary)."""
    tr = Trainer(cfg, *(data or (None, None)), output_dir=output_dir)
    tr.run()
    summary = tr.write_outputs() if output_dir is not None else tr.summary()
    return tr, summary
