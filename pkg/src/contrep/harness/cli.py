"""Command line entry point: ``contrep {run,eval,figures,table,validate}``.

Exit codes: 0 success, 1 invalid configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from ..exceptions import ValidationError
from .config import apply_overrides, config_from_dict

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


def _raw_config(args) -> dict:
    raw: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ValidationError({"config": f"file not found: {path}"})
        try:
            raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ValidationError({"config": f"cannot parse {path}: {exc}"}) from None
    for flag in ("sequence", "objective", "strategy", "profile", "output_dir", "name"):
        value = getattr(args, flag, None)
        if value is not None:
            raw[flag] = value
    if getattr(args, "seeds", None):
        raw["seeds"] = list(args.seeds)
    return apply_overrides(raw, getattr(args, "set", None) or [])


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", nargs="?", help="YAML/JSON experiment config")
    p.add_argument("--sequence", help='e.g. "C100/5" or "C10->SVHN"')
    p.add_argument("--objective", choices=["sl", "sl_mlp", "trex", "supcon", "barlow", "simclr"])
    p.add_argument("--strategy", choices=["finetune", "lwf", "cassle", "pfr"])
    p.add_argument("--profile", choices=["full", "desk", "custom"])
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--output-dir", dest="output_dir")
    p.add_argument("--name")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any field, e.g. --set loop.epochs_first=5")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contrep", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="validate a config and print it with defaults filled")
    _add_config_args(p)

    p = sub.add_parser("run", help="train and evaluate every seed of an experiment")
    _add_config_args(p)
    p.add_argument("--no-resume", action="store_true", help="retrain boundaries that already have checkpoints")

    p = sub.add_parser("eval", help="evaluate a checkpoint, or compare two completed runs")
    p.add_argument("--checkpoint", help="checkpoint to evaluate (needs --config)")
    p.add_argument("--config", help="experiment config supplying data/eval options")
    p.add_argument("--run", help="manifest (or experiment directory) of run A")
    p.add_argument("--against", help="manifest (or experiment directory) of run B")
    p.add_argument("--probe", action="append", help="probe dataset(s)")
    p.add_argument("--kinds", nargs="+", default=["cka", "ft", "exc"], choices=["cka", "ft", "exc"])
    p.add_argument("--out", help="write the resulting report here (default: stdout)")

    p = sub.add_parser("figures", help="emit accumulation, spectra and NMC figures")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--out", default="figures")

    p = sub.add_parser("table", help="markdown method x strategy table")
    p.add_argument("manifests", nargs="+")
    p.add_argument("--columns", nargs="+", help="sequence columns (default: C100/5 C100/20 IN100/5)")
    p.add_argument("--metric", default="knn")
    p.add_argument("--out")
    return parser


def _cmd_validate(args) -> int:
    config = config_from_dict(_raw_config(args))
    sys.stdout.write(config.to_yaml())
    return EXIT_OK


def _cmd_run(args) -> int:
    from .runner import run

    config = config_from_dict(_raw_config(args))
    manifest = run(config, resume=not args.no_resume)
    print(manifest.path)
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .runner import RunManifest, compare_runs, evaluate_checkpoint

    if args.checkpoint:
        if not args.config:
            raise ValidationError({"--config": "required with --checkpoint"})
        config = config_from_dict(_raw_config(argparse.Namespace(config=args.config)))
        report = evaluate_checkpoint(args.checkpoint, config, args.probe)
    elif args.run and args.against:
        if not args.probe:
            raise ValidationError({"--probe": "required when comparing runs"})
        report = compare_runs(RunManifest.load(args.run), RunManifest.load(args.against), args.probe[0],
                              tuple(args.kinds))
    else:
        raise ValidationError({"eval": "give --checkpoint, or --run with --against"})
    if args.out:
        print(report.save(args.out))
    else:
        sys.stdout.write(report.to_json())
    return EXIT_OK


def _cmd_figures(args) -> int:
    from .figures import emit_figures
    from .runner import RunManifest

    for path in emit_figures([RunManifest.load(m) for m in args.manifests], args.out):
        print(path)
    return EXIT_OK


def _cmd_table(args) -> int:
    from .runner import RunManifest
    from .tables import MAIN_GRID, TableSchema, table_report

    schema = TableSchema(MAIN_GRID.rows, tuple(args.columns) if args.columns else MAIN_GRID.columns, args.metric)
    text = table_report([RunManifest.load(m) for m in args.manifests], schema)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {"validate": _cmd_validate, "run": _cmd_run, "eval": _cmd_eval, "figures": _cmd_figures,
            "table": _cmd_table}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print("invalid configuration:", file=sys.stderr)
        for field_name, message in exc.errors.items():
            print(f"  {field_name}: {message}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime exit code
        logging.getLogger("contrep").debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
