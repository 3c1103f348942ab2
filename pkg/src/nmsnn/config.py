"""Run configuration: nested dataclasses loaded from YAML with dotted overrides.

The schema is the dataclass tree below; ``schema()`` renders it as a flat
``dotted.key -> (type, default)`` table, which is what the README documents.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import SpikeDatasetSpec
from .errors import DomainError

__all__ = [
    "ConfigError",
    "MaskSection",
    "LIFSection",
    "AnnealSection",
    "OptimizerSection",
    "RunConfig",
    "load_config",
    "apply_overrides",
    "config_from_dict",
    "schema",
]


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


@dataclass
class MaskSection:
    enabled: bool = True
    n_keep: int = 2
    block_size: int = 4
    replacement: bool = True
    prune_from: str = "last_sample"  # or "argmax"


@dataclass
class LIFSection:
    leak_alpha: float = 0.5
    v_threshold: float = 1.0
    surrogate_width: float = 0.25
    readout_leak: float = 0.5


@dataclass
class AnnealSection:
    tau_max: float = 1.0
    tau_min: float = 0.1


@dataclass
class OptimizerSection:
    kind: str = "adam"
    lr: float = 1e-3
    logit_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9


@dataclass
class DatasetSection:
    kind: str = "synthetic_patterns"
    num_classes: int = 4
    input_dim: int = 32
    encoder: str = "rate"
    source_path: typing.Optional[str] = None
    num_samples: int = 512
    margin: float = 0.5
    base_rate: float = 0.1
    active_fraction: float = 0.25
    test_fraction: float = 0.2


@dataclass
class RunConfig:
    seed: int = 0
    time_steps: int = 6
    batch_size: int = 64
    hidden: list = field(default_factory=lambda: [64])
    epochs_search: int = 5
    epochs_finetune: int = 15
    total_epochs: typing.Optional[int] = None
    eid_lambda: float = 5.0
    tau_q: float = 1.0
    credit_decay: float = 0.9
    credit_normalize: bool = True
    checkpoint_every: int = 0
    mask: MaskSection = field(default_factory=MaskSection)
    lif: LIFSection = field(default_factory=LIFSection)
    anneal: AnnealSection = field(default_factory=AnnealSection)
    optimizer: OptimizerSection = field(default_factory=OptimizerSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def dataset_spec(self) -> SpikeDatasetSpec:
        d = self.dataset
        return SpikeDatasetSpec(
            kind=d.kind,
            num_classes=d.num_classes,
            time_steps=self.time_steps,
            input_dim=d.input_dim,
            encoder=d.encoder,
            source_path=d.source_path,
            num_samples=d.num_samples,
            margin=d.margin,
            base_rate=d.base_rate,
            active_fraction=d.active_fraction,
            test_fraction=d.test_fraction,
        )

    def validate(self):
        problems = []

        def need(cond, key, msg):
            if not cond:
                problems.append(f"{key}: {msg}")

        need(self.time_steps >= 1, "time_steps", "must be >= 1")
        need(self.batch_size >= 1, "batch_size", "must be >= 1")
        need(len(self.hidden) >= 1 and all(isinstance(h, int) and h > 0 for h in self.hidden),
             "hidden", "must be a non-empty list of positive integers")
        need(self.epochs_search >= 0, "epochs_search", "must be >= 0")
        need(self.epochs_finetune >= 0, "epochs_finetune", "must be >= 0")
        if self.total_epochs is not None:
            need(self.epochs_search + self.epochs_finetune == self.total_epochs, "total_epochs",
                 f"epochs_search + epochs_finetune = {self.epochs_search + self.epochs_finetune}, declared {self.total_epochs}")
        need(self.eid_lambda >= 0, "eid_lambda", "must be >= 0")
        need(self.tau_q > 0, "tau_q", "must be > 0")
        need(0 <= self.credit_decay < 1, "credit_decay", "must lie in [0, 1)")
        need(self.checkpoint_every >= 0, "checkpoint_every", "must be >= 0")
        m = self.mask
        need(1 <= m.n_keep <= m.block_size, "mask.n_keep", f"must lie in [1, mask.block_size={m.block_size}]")
        need(m.block_size >= 1, "mask.block_size", "must be >= 1")
        need(m.prune_from in ("last_sample", "argmax"), "mask.prune_from", "must be 'last_sample' or 'argmax'")
        lif = self.lif
        need(0 < lif.leak_alpha <= 1, "lif.leak_alpha", "must lie in (0, 1]")
        need(lif.v_threshold > 0, "lif.v_threshold", "must be > 0")
        need(lif.surrogate_width > 0, "lif.surrogate_width", "must be > 0")
        need(0 <= lif.readout_leak <= 1, "lif.readout_leak", "must lie in [0, 1]")
        a = self.anneal
        need(a.tau_max > 0, "anneal.tau_max", "must be > 0")
        need(a.tau_min > 0, "anneal.tau_min", "must be > 0")
        need(a.tau_min <= a.tau_max, "anneal.tau_min", "must not exceed anneal.tau_max")
        o = self.optimizer
        need(o.kind in ("adam", "sgd_momentum"), "optimizer.kind", "must be 'adam' or 'sgd_momentum'")
        need(o.lr > 0, "optimizer.lr", "must be > 0")
        need(o.logit_lr > 0, "optimizer.logit_lr", "must be > 0")
        try:
            self.dataset_spec()
        except DomainError as exc:
            problems.append(f"dataset: {exc}")
        if self.dataset.kind == "image_rate_coded":
            need(self.dataset.source_path is not None, "dataset.source_path", "required for image_rate_coded")
        if problems:
            raise ConfigError(problems)
        return self


def _coerce(value, tp, key, problems):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], key, problems)
    if tp is bool:
        if isinstance(value, bool):
            return value
        problems.append(f"{key}: expected a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        problems.append(f"{key}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            # YAML 1.1 reads exponents without a dot (1e-3) as strings
            try:
                return float(value)
            except ValueError:
                pass
        problems.append(f"{key}: expected a number, got {value!r}")
        return value
    if tp is str:
        if isinstance(value, str):
            return value
        problems.append(f"{key}: expected a string, got {value!r}")
        return value
    if tp is list:
        if isinstance(value, list):
            return value
        problems.append(f"{key}: expected a list, got {value!r}")
        return value
    return value


def _build(cls, data, prefix, problems):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    if not isinstance(data, dict):
        problems.append(f"{prefix.rstrip('.') or '<root>'}: expected a mapping")
        return cls()
    names = {f.name for f in dataclasses.fields(cls)}
    for k in data:
        if k not in names:
            problems.append(f"{prefix}{k}: unknown key")
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = _build(tp, data[f.name], f"{prefix}{f.name}.", problems)
        else:
            before = len(problems)
            value = _coerce(data[f.name], tp, prefix + f.name, problems)
            if len(problems) == before:
                # a mistyped value keeps its default so range checks still run
                kwargs[f.name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    problems: list[str] = []
    cfg = _build(RunConfig, data or {}, "", problems)
    try:
        cfg.validate()
    except ConfigError as exc:
        problems.extend(exc.problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def _parse_scalar(text: str):
    return yaml.safe_load(text) if text != "" else ""


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` strings (values parsed as YAML scalars)."""
    data = json.loads(json.dumps(data))
    problems = []
    for item in overrides:
        if "=" not in item:
            problems.append(f"{item}: override must look like dotted.key=value")
            continue
        key, raw = item.split("=", 1)
        key = key.strip().lstrip("-")
        parts = key.split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                problems.append(f"{key}: {p} is not a section")
                break
        else:
            node[parts[-1]] = _parse_scalar(raw)
    if problems:
        raise ConfigError(problems)
    return data


def load_config(path=None, overrides=()) -> RunConfig:
    data = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError([f"{path}: not valid YAML ({exc})"]) from exc
    if overrides:
        data = apply_overrides(data, list(overrides))
    return config_from_dict(data)


def schema() -> dict[str, tuple[str, object]]:
    """Flat table of every config key with its type name and default."""
    out = {}

    def walk(cls, prefix):
        hints = typing.get_type_hints(cls)
        inst = cls()
        for f in dataclasses.fields(cls):
            tp = hints[f.name]
            if dataclasses.is_dataclass(tp):
                walk(tp, prefix + f.name + ".")
            else:
                name = getattr(tp, "__name__", str(tp).replace("typing.", ""))
                out[prefix + f.name] = (name, getattr(inst, f.name))

    walk(RunConfig, "")
    return out
