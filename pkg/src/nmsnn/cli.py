"""Command-line entry point.

    nmsnn train   --config run.yaml [--seed S] [--output-dir D] [key.path=value ...]
    nmsnn resume  CHECKPOINT [--output-dir D]
    nmsnn eval    CHECKPOINT
    nmsnn export-mask CHECKPOINT [--out FILE]
    nmsnn verify  [SUITE ...]
    nmsnn report  CHECKPOINT

Overrides may be written ``mask.n_keep=3`` or ``--mask.n_keep=3``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import ConfigError, load_config
from .errors import DivergenceError, InvariantViolation, NumericError, StateError
from .masks import import_masks
from .pipeline import Trainer, reports_csv
from .verify import SUITES, format_table, run_suites

OUTPUT_DIR_ENV = "NMSNN_OUTPUT_DIR"

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DIVERGENCE = 4
EXIT_INVARIANT = 5
EXIT_ORACLE = 6
EXIT_STATE = 7

log = logging.getLogger("nmsnn")


def _default_output_dir() -> Path:
    return Path(os.environ.get(OUTPUT_DIR_ENV, "runs"))


def _split_overrides(extra: list[str]) -> list[str]:
    out = []
    for item in extra:
        if "=" not in item:
            raise ConfigError([f"{item}: expected a dotted.key=value override"])
        out.append(item[2:] if item.startswith("--") else item)
    return out


def _output_dir_for(args, checkpoint: Path | None = None) -> Path:
    if args.output_dir is not None:
        return Path(args.output_dir)
    if checkpoint is not None and checkpoint.parent.name == "checkpoints":
        return checkpoint.parent.parent
    return _default_output_dir()


def cmd_train(args, overrides) -> int:
    if args.seed is not None:
        overrides = [*overrides, f"seed={args.seed}"]
    cfg = load_config(args.config, overrides)
    out = _output_dir_for(args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n")
    tr = Trainer(cfg, output_dir=out)
    tr.run()
    summary = tr.write_outputs()
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_resume(args, overrides) -> int:
    if overrides:
        raise ConfigError(["resume takes no overrides; the checkpoint carries its config"])
    ck = Path(args.checkpoint)
    out = _output_dir_for(args, ck)
    tr = Trainer.from_checkpoint(ck, output_dir=out)
    if tr.done:
        raise StateError(f"{ck} is from a finished run")
    tr.run()
    summary = tr.write_outputs()
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args, overrides) -> int:
    tr = Trainer.from_checkpoint(Path(args.checkpoint))
    print(json.dumps(tr.summary(), sort_keys=True))
    return EXIT_OK


def cmd_export_mask(args, overrides) -> int:
    ck = Path(args.checkpoint)
    tr = Trainer.from_checkpoint(ck)
    path = Path(args.out) if args.out else _output_dir_for(args, ck) / "masks.nmm"
    path.parent.mkdir(parents=True, exist_ok=True)
    nbytes = tr.export_masks(path)
    hist = {}
    for name, (cfg, layout, bits) in import_masks(path).items():
        counts = bits.sum(axis=1)
        hist[name] = {int(k): int((counts == k).sum()) for k in range(cfg.n_keep + 1)}
    print(json.dumps({"path": str(path), "bytes": nbytes, "popcount_histogram": hist}, sort_keys=True))
    return EXIT_OK


def cmd_verify(args, overrides) -> int:
    rows = run_suites(args.suites, seed=args.seed or 0)
    print(format_table(rows))
    failed = sum(not r.passed for r in rows)
    print(f"{len(rows) - failed}/{len(rows)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_ORACLE


def cmd_report(args, overrides) -> int:
    tr = Trainer.from_checkpoint(Path(args.checkpoint))
    sys.stdout.write(reports_csv(tr.reports))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--threads", type=int, default=None, help="cap BLAS/OpenMP threads")
    common.add_argument("--output-dir", default=None,
                        help=f"artifact directory (default: ${OUTPUT_DIR_ENV} or ./runs)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="nmsnn", description="N:M sparse spiking network training")
    sub = p.add_subparsers(dest="verb", required=True)

    t = sub.add_parser("train", parents=[common], help="search, prune and finetune from a config")
    t.add_argument("--config", default=None, help="YAML run config (defaults apply when omitted)")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("resume", parents=[common], help="continue a run from a checkpoint")
    r.add_argument("checkpoint")
    r.set_defaults(func=cmd_resume)

    e = sub.add_parser("eval", parents=[common], help="print the summary record of a checkpoint")
    e.add_argument("checkpoint")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-mask", parents=[common], help="write the frozen masks of a pruned checkpoint")
    x.add_argument("checkpoint")
    x.add_argument("--out", default=None, help="mask file (default: <output-dir>/masks.nmm)")
    x.set_defaults(func=cmd_export_mask)

    v = sub.add_parser("verify", parents=[common], help="run oracle checks")
    v.add_argument("suites", nargs="*", metavar="SUITE", help=f"any of: all, {', '.join(SUITES)}")
    v.set_defaults(func=cmd_verify)

    rp = sub.add_parser("report", parents=[common], help="print the per-epoch CSV stored in a checkpoint")
    rp.add_argument("checkpoint")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        overrides = _split_overrides(extra)
        if args.verb == "verify" and args.suites:
            bad = [s for s in args.suites if s != "all" and s not in SUITES]
            if bad:
                parser.error(f"unknown suite(s): {', '.join(bad)}")
        with threadpool_limits(limits=args.threads):
            return args.func(args, overrides)
    except ConfigError as exc:
        print(f"config error:\n  " + "\n  ".join(exc.problems), file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NumericError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except StateError as exc:
        print(f"state error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
