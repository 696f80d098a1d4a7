"""Command-line entry point.

    selftrain-tta train-source --config run.json
    selftrain-tta make-splits  --config run.json
    selftrain-tta adapt        --config run.json --budgets 64,256 --seeds 0,1
    selftrain-tta report       runs/

Every RunConfig field can be set with a flag of the same name (``--pool-size``);
flags override the config file.  Lists are comma separated, ``--adaptation``
takes a JSON object.  Only the output directory may also come from the
environment (SELFTRAIN_TTA_OUTPUT_DIR).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from typing import get_type_hints

from . import checkpoint
from .checkpoint import CheckpointError
from .config import OUTPUT_ENV, ConfigError, RunConfig
from .data import ShardFormatError
from .experiment import ExperimentError, full_source_config, make_splits, manifest, run_sweep, split_label, \
    train_source_model
from .reporting import ReportError, append_rows, report

log = logging.getLogger("selftrain_tta")


def _parse_list(item):
    def parse(text: str):
        return [item(v) for v in text.split(",") if v.strip()]
    return parse


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config JSON; flags below override its values")
    hints = get_type_hints(RunConfig)
    for f in fields(RunConfig):
        hint = hints[f.name]
        origin = getattr(hint, "__origin__", hint)
        if origin is list:
            kind = _parse_list(hint.__args__[0])
        elif origin is dict:
            kind = json.loads
        else:
            kind = origin
        p.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=kind, default=None,
                       help=argparse.SUPPRESS if f.name == "checkpoint" else None)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    base = {}
    if args.config:
        base = RunConfig.load(args.config).to_dict()
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            base[f.name] = v
    return RunConfig.from_dict(base)


def cmd_train_source(cfg: RunConfig) -> int:
    cfg.out.mkdir(parents=True, exist_ok=True)
    model, prov = train_source_model(cfg, log_every=100)
    path = cfg.checkpoint_path
    checkpoint.save(model, path, prov)
    print(f"checkpoint,{path}")
    for k in sorted(prov):
        if k.startswith("train_"):
            print(f"{k},{prov[k]!r}")
    return 0


def cmd_make_splits(cfg: RunConfig, encoder_path: str | None) -> int:
    path = encoder_path or full_source_config(cfg).checkpoint_path
    encoder, _ = checkpoint.load(path)
    d = make_splits(cfg, encoder)
    print(f"splits,{d}")
    print(f"configuration,{split_label(cfg.k)}")
    print(f"histogram,{d / 'histogram.csv'}")
    return 0


def cmd_adapt(cfg: RunConfig) -> int:
    source, prov = checkpoint.load(cfg.checkpoint_path)
    cfg.out.mkdir(parents=True, exist_ok=True)
    rows, losses = run_sweep(cfg, source)
    append_rows(cfg.out / "results.csv", rows)
    append_rows(cfg.out / "losses.csv", losses)
    (cfg.out / "manifest.json").write_text(json.dumps(manifest(cfg, prov), indent=2, sort_keys=True) + "\n")
    print(f"results,{cfg.out / 'results.csv'},{len(rows)} rows")
    return 0


def cmd_report(results_dir) -> int:
    summary, plots = report(results_dir)
    sys.stdout.write(summary.read_text())
    for p in plots:
        print(f"# figure,{p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="selftrain-tta", description=__doc__.splitlines()[0] if __doc__ else None)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in (("train-source", "train the source model and write a checkpoint"),
                       ("make-splits", "write k-means cluster shards and the class histogram"),
                       ("adapt", "run every (method, budget, seed) and append result rows"),
                       ("show-config", "print the resolved run config as JSON")):
        sp = sub.add_parser(name, help=text)
        _add_config_flags(sp)
        if name == "make-splits":
            sp.add_argument("--encoder", help="checkpoint whose encoder embeds the images "
                                              "(default: the full-data source checkpoint)")
    rp = sub.add_parser("report", help="aggregate result CSVs into summary.csv and figures")
    rp.add_argument("results_dir", nargs="?", help=f"defaults to ${OUTPUT_ENV} or ./runs")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args.results_dir or RunConfig().out)
        cfg = resolve_config(args)
        if args.command == "show-config":
            print(cfg.dumps())
            return 0
        if args.command == "train-source":
            return cmd_train_source(cfg)
        if args.command == "make-splits":
            return cmd_make_splits(cfg, args.encoder)
        return cmd_adapt(cfg)
    except (ConfigError, CheckpointError, ShardFormatError, ExperimentError, ReportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
