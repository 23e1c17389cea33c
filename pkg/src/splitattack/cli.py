"""Command line entry point: ``splitattack {train,attack,probe,sweep,report}``.

Exit codes: 0 success, 2 configuration error, 3 data or IO error, 4 missing artifact.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment
from .checkpoint import CheckpointError
from .config import ALPHA_TABLE, ATTACKER_POOL_SIZES, PRESETS, RunConfig, load_config
from .data import FormatError
from .engine import ConfigurationError, InputError

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_MISSING = 4

log = logging.getLogger("splitattack")

# named grids accepted by ``sweep --values``
VALUE_SETS = {"alpha-table": list(ALPHA_TABLE), "pool-sizes": list(ATTACKER_POOL_SIZES)}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_set(items) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        out[key] = _parse_value(value)
    return out


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config, args.preset)
    overrides = _parse_set(args.set)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if overrides:
        cfg = cfg.replace(**overrides)
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    result = experiment.run_train(cfg, cfg.out)
    rep = experiment.read_report(cfg.out)["training"]
    print(f"trained {cfg.training.rounds} rounds -> {cfg.out}")
    print(f"clean_accuracy {rep['clean_accuracy']:.4f}  final_task_loss {result.losses[-1] if result.losses else float('nan'):.4f}")
    return 0


def cmd_attack(args) -> int:
    cfg = resolve_config(args)
    rep = experiment.run_attack(cfg, cfg.out)
    print(f"clean {rep.clean_accuracy:.4f}  adversarial {rep.adversarial_accuracy:.4f}  "
          f"drop {rep.accuracy_drop:.2f}  noise_drop {rep.random_noise_drop:.2f}  skipped {rep.skipped}")
    return 0


def cmd_probe(args) -> int:
    cfg = resolve_config(args)
    rep = experiment.run_probe(cfg, cfg.out)
    print("  ".join(f"{k} {v:.4f}" for k, v in rep.to_dict().items()))
    return 0


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    if args.values is None:
        values = VALUE_SETS["alpha-table"]
    elif args.values in VALUE_SETS:
        values = VALUE_SETS[args.values]
    else:
        values = [_parse_value(v) for v in args.values.split(",")]
    seeds = [int(s) for s in args.seeds.split(",")]

    def progress(row):
        log.info("%s=%s seed=%d drop=%s", args.param, row["value"], row["seed"], row.get("accuracy_drop"))

    rows = experiment.sweep(cfg, args.param, values, seeds, progress)
    summary = experiment.summarize(rows)
    experiment.write_sweep(cfg.out, rows, summary)
    print(experiment.format_table(summary))
    return 0


def cmd_report(args) -> int:
    path = Path(args.out or load_config(args.config, args.preset).out) / "report.json"
    if not path.is_file():
        raise experiment.MissingArtifactError(f"missing report {path}")
    report = json.loads(path.read_text())
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=True))
        return 0
    print(f"seed {report.get('seed')}")
    for section in ("training", "attack", "probes"):
        block = report.get(section)
        if not block:
            continue
        print(f"[{section}]")
        for k, v in block.items():
            if isinstance(v, list):
                v = f"{len(v)} values" if len(v) > 4 else v
            elif isinstance(v, float):
                v = f"{v:.4f}"
            print(f"  {k}: {v}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config overlaid on the preset")
    common.add_argument("--preset", choices=sorted(PRESETS), default=None, help="base preset (default paper-desk)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default=None, help="run directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. --set shadow.alpha=10")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="splitattack", description="Split-learning shadow attack bench.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="run split training, write checkpoints and metrics").set_defaults(func=cmd_train)
    sub.add_parser("attack", parents=[common], help="craft adversarial test inputs from a trained run").set_defaults(func=cmd_attack)
    sub.add_parser("probe", parents=[common], help="run the theory probes on a trained run").set_defaults(func=cmd_probe)
    sw = sub.add_parser("sweep", parents=[common], help="train and attack over a grid of one config field")
    sw.add_argument("--param", default="shadow.alpha", help="dotted config field to vary")
    sw.add_argument("--values", default=None, help="comma-separated values, or alpha-table (default) / pool-sizes")
    sw.add_argument("--seeds", default="0,1,2,3,4")
    sw.set_defaults(func=cmd_sweep)
    rp = sub.add_parser("report", parents=[common], help="print a run's report.json")
    rp.add_argument("--json", action="store_true", help="print raw JSON")
    rp.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except experiment.MissingArtifactError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigurationError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, InputError, CheckpointError, OSError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
