"""Command-line entry point.

    grdo generate --config task2_gender_class --out data/
    grdo train    --config task1_sites --set objective=wce --set max_epochs=20 --out runs/wce
    grdo sweep    --config task2_gender_class --out runs/sweep
    grdo compare  --config task2_gender_class --out runs/compare
    grdo evaluate --checkpoint runs/wce/seed0/checkpoint.bin --data data/val.jsonl --out eval/
    grdo report   --input runs/sweep/sweep.csv --out report/

Seed precedence is ``--seed`` > ``$GRDO_SEED`` > config.  Exit codes: 0 ok,
1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import data as data_mod
from .metrics import evaluate
from .model import load_checkpoint
from .trainer import (COMPARE_FIELDS, SWEEP_FIELDS, ConfigError, RunConfig, compare_objectives,
                      failure_message, load_datasets, run_id, run_single, sweep_alpha, write_csv)

log = logging.getLogger("grdo")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2
SUMMARY_METRICS = ("challenge_p", "worst_group_macro_f1", "minority_cell_f1", "max_gap")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; usage problems are config errors here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="grdo", description="Group-robust training on synthetic grouped volumes.")
    sub = parser.add_subparsers(dest="command", metavar="{generate,train,sweep,compare,evaluate,report}",
                                parser_class=_Parser)
    sub.required = True

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required,
                       help="JSON config path, or the name of a bundled preset")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted override, value parsed as JSON when possible (repeatable)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("generate", help="write train/val JSONL datasets"))
    common(sub.add_parser("train", help="train one model per seed"))
    p = sub.add_parser("sweep", help="gdro over the alpha grid")
    common(p)
    p.add_argument("--alphas", type=float, nargs="+", default=None)
    p = sub.add_parser("compare", help="wce, focal and gdro rows")
    common(p)
    p.add_argument("--alphas", type=float, nargs="+", default=None)
    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="JSONL dataset")
    p.add_argument("--grouping", default=None, help="attribute to group by (default: from data)")
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    p = sub.add_parser("report", help="per-alpha summary and long-format CSV from a sweep CSV")
    p.add_argument("--input", required=True, help="sweep.csv written by the sweep command")
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


# configuration ----------------------------------------------------------------

def resolve_config_path(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    stem = p.name[:-5] if p.name.endswith(".json") else p.name
    bundled = data_mod.preset_path(stem)
    if bundled.exists():
        return bundled
    raise ConfigError(f"config: no such file or preset {name!r}")


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {assignment!r} must look like key=value")
    node = cfg
    parts = key.split(".")
    for i, part in enumerate(parts[:-1]):
        if node.get(part) is None:
            node[part] = {}
        node = node[part]
        if not isinstance(node, dict):
            raise ConfigError(f"override {'.'.join(parts[:i + 1])} is not a section")
    node[parts[-1]] = parse_value(raw)


def env_seed() -> int | None:
    raw = os.environ.get("GRDO_SEED")
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"GRDO_SEED must be an integer, got {raw!r}") from None


def resolve_config(args) -> RunConfig:
    path = resolve_config_path(args.config)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: {path} is not valid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config: {path} must hold a JSON object")
    for assignment in args.overrides:
        apply_override(raw, assignment)
    seed = args.seed if args.seed is not None else env_seed()
    if seed is not None:
        if args.command == "generate":
            if not isinstance(raw.get("data"), dict):
                raise ConfigError("data: generate needs a data section")
            raw["data"]["seed"] = seed
        else:
            raw["seeds"] = [seed]
    return RunConfig.from_dict(raw)


def echo_config(config: RunConfig, out: Path) -> None:
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


# subcommands ------------------------------------------------------------------

def cmd_generate(config: RunConfig, args, out: Path) -> int:
    if config.data is None:
        raise ConfigError("data: generate needs a data section")
    train, val = data_mod.generate(config.data)
    data_mod.save(train, out / "train.jsonl")
    data_mod.save(val, out / "val.jsonl")
    print(f"wrote {len(train)} train and {len(val)} val samples to {out}")
    return EXIT_OK


def cmd_train(config: RunConfig, args, out: Path) -> int:
    datasets = load_datasets(config)
    for seed in config.seeds:
        try:
            row = run_single(config, seed, datasets, out / f"seed{seed}")
        except Exception as exc:
            print(failure_message(config, seed, exc), file=sys.stderr)
            return EXIT_RUNTIME
        print(f"run {run_id(config, seed)}: P={row['challenge_p']:.4f} "
              f"worst={row['worst_group_macro_f1']:.4f} minority={row['minority_cell_f1']:.4f}")
    return EXIT_OK


def cmd_sweep(config: RunConfig, args, out: Path) -> int:
    result = sweep_alpha(config, alphas=args.alphas, outdir=out / "runs")
    write_csv(out / "sweep.csv", result["rows"], SWEEP_FIELDS)
    summary = result["summary"]
    write_csv(out / "sweep_summary.csv", summary)
    for row in summary:
        print(f"alpha={row['alpha']}: P={row['challenge_p_mean']:.4f} "
              f"worst={row['worst_group_macro_f1_mean']:.4f}")
    return _report_errors(result["errors"], out, key="error")


def cmd_compare(config: RunConfig, args, out: Path) -> int:
    result = compare_objectives(config, alphas=args.alphas, outdir=out / "runs")
    write_csv(out / "compare.csv", result["rows"], COMPARE_FIELDS)
    for row in result["rows"]:
        label = row["objective"] + ("" if row["alpha"] is None else f"@{row['alpha']}")
        print(f"{label:10s} P={row['challenge_p_mean']:.4f} worst={row['worst_group_macro_f1_mean']:.4f} "
              f"minority={row['minority_cell_f1_mean']:.4f}")
    return _report_errors(result["errors"], out)


def _report_errors(errors: list, out: Path, key: str | None = None) -> int:
    if not errors:
        return EXIT_OK
    (out / "errors.json").write_text(json.dumps(errors, indent=2) + "\n")
    for e in errors:
        print(e[key] if key else e, file=sys.stderr)
    return EXIT_RUNTIME


def cmd_evaluate(args, out: Path) -> int:
    params, header = load_checkpoint(args.checkpoint)
    dataset = data_mod.load(args.data, "val")
    report = evaluate(params, dataset, args.grouping)
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    (out / "metrics.csv").write_text(report.to_csv())
    (out / "config.json").write_text(json.dumps(
        {"checkpoint": str(args.checkpoint), "data": str(args.data), "grouping": args.grouping,
         "model": header["model"], "seed": header.get("seed")}, indent=2, sort_keys=True) + "\n")
    print(f"P={report.challenge_p:.4f} worst={report.worst_group_macro_f1:.4f} gap={report.max_gap:.4f}")
    return EXIT_OK


def read_sweep_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(SWEEP_FIELDS) - set(reader.fieldnames or [])
        if missing:
            raise ConfigError(f"input: {path} lacks columns {sorted(missing)}")
        rows = []
        for r in reader:
            rows.append({"alpha": float(r["alpha"]), "seed": int(r["seed"]), "group": int(r["group"]),
                         **{k: float(r[k]) for k in SWEEP_FIELDS[3:]}})
    return rows


def long_format(rows: list[dict]) -> list[dict]:
    """One (alpha, seed, metric, group, value) row per measurement, ready for plotting."""
    out, seen = [], set()
    for r in rows:
        out.append({"alpha": r["alpha"], "seed": r["seed"], "metric": "group_macro_f1",
                    "group": r["group"], "value": r["group_macro_f1"]})
        if (r["alpha"], r["seed"]) in seen:
            continue
        seen.add((r["alpha"], r["seed"]))
        for m in SUMMARY_METRICS:
            out.append({"alpha": r["alpha"], "seed": r["seed"], "metric": m, "group": "", "value": r[m]})
    return out


def cmd_report(args, out: Path) -> int:
    from .trainer import summarize_sweep

    rows = read_sweep_csv(args.input)
    summary = summarize_sweep(rows)
    write_csv(out / "summary.csv", summary)
    write_csv(out / "long.csv", long_format(rows), ["alpha", "seed", "metric", "group", "value"])
    print(f"{len(summary)} alpha values, {len(rows)} rows -> {out}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "sweep": cmd_sweep, "compare": cmd_compare}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        if args.command == "evaluate":
            out.mkdir(parents=True, exist_ok=True)
            return cmd_evaluate(args, out)
        if args.command == "report":
            out.mkdir(parents=True, exist_ok=True)
            return cmd_report(args, out)
        config = resolve_config(args)
        out.mkdir(parents=True, exist_ok=True)
        echo_config(config, out)
        return COMMANDS[args.command](config, args, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (data_mod.DatasetFormatError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if args.command in ("evaluate", "report") else EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
