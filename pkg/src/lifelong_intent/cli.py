"""Command-line surface: prepare schedules, run experiments, sweep the
ablation grid, and render merged reports.

Exit codes: 0 success, 1 unexpected runtime failure, 2 user/config error.
All file outputs are JSON/CSV/text plus rendered figures; every run's report
embeds its full config so it can be reproduced exactly.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .data import (DATASET_PRESETS, SYNTH_DEFAULTS, BenchmarkSchedule,
                   DatasetError, ScheduleError, build_schedule, load_jsonl,
                   synthetic_schedule)
from .engine import (ABLATION_VARIANTS, Hyperparams, RunReport, Strategy,
                     run_benchmark, strategy_preset)

ABLATION_ORDER = ["MSR", "-CN", "-FKD", "-PKD", "-HKD", "-ICML", "-CN&HKD", "-MSR"]

HYPERPARAM_FLAGS = {
    "tau": "tau", "temp": "temp", "alpha": "alpha",
    "beta1": "beta1", "beta2": "beta2", "beta3": "beta3",
    "memory": "memory_budget", "epochs": "epochs", "batch": "batch_size",
    "lr": "lr", "momentum": "momentum", "d_emb": "d_emb", "d_feat": "d_feat",
    "min_freq": "min_freq",
}


class ConfigError(ValueError):
    pass


def _json_dump(obj, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _add_hyperparam_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("hyperparameters")
    for flag, field in HYPERPARAM_FLAGS.items():
        kind = int if field in ("memory_budget", "epochs", "batch_size",
                                "d_emb", "d_feat", "min_freq") else float
        group.add_argument(f"--{flag.replace('_', '-')}", dest=f"hp_{field}",
                           type=kind, default=None, metavar="V")
    group.add_argument("--memory-distance", dest="hp_memory_distance",
                       choices=["euclidean", "cosine"], default=None)
    group.add_argument("--icml-new-pairs", dest="hp_icml_include_new_pairs",
                       action="store_true", default=None,
                       help="also separate new-new embedding pairs")


def _add_toggle_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("strategy toggles")
    group.add_argument("--no-cn", action="store_true",
                       help="replace the cosine head with the dot-product head")
    group.add_argument("--no-fkd", action="store_true",
                       help="drop feature-level distillation")
    group.add_argument("--no-pkd", action="store_true",
                       help="drop prediction-level distillation")
    group.add_argument("--no-icml", action="store_true",
                       help="drop the inter-class margin loss")


def _load_config_file(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err.msg}")
    return raw.get("config", raw)  # accept a bare config or a full report


def _resolve_hyperparams(args, config: dict) -> Hyperparams:
    values = dict(config.get("hyperparams", {}))
    for field in list(values):
        if field not in {f.name for f in dataclasses.fields(Hyperparams)}:
            raise ConfigError(f"unknown hyperparameter {field!r} in config")
    for field in {f.name for f in dataclasses.fields(Hyperparams)}:
        override = getattr(args, f"hp_{field}", None)
        if override is not None:
            values[field] = override
    try:
        return Hyperparams(**values)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"bad hyperparameters: {err}")


def _resolve_strategy(args, config: dict) -> Strategy:
    spec = config.get("strategy")
    if getattr(args, "strategy", None):
        base = strategy_preset(args.strategy)
    elif isinstance(spec, dict):
        try:
            base = Strategy(**spec)
        except (TypeError, ValueError) as err:
            raise ConfigError(f"bad strategy in config: {err}")
    elif isinstance(spec, str):
        base = strategy_preset(spec)
    else:
        raise ConfigError("no strategy given: pass --strategy or a config file")
    changes = {}
    if getattr(args, "no_cn", False):
        changes["head"] = "dot"
    if getattr(args, "no_fkd", False):
        changes["use_fkd"] = False
    if getattr(args, "no_pkd", False):
        changes["use_pkd"] = False
    if getattr(args, "no_icml", False):
        changes["use_icml"] = False
    if changes:
        base = dataclasses.replace(base, **changes)
    return base


def _load_schedule(path: str) -> BenchmarkSchedule:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"schedule file not found: {path}")
    try:
        return BenchmarkSchedule.load(p)
    except (KeyError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot parse schedule {path}: {err}")


def _write_run_outputs(report: RunReport, out: Path, seed: int,
                       memories: list, tag: str | None = None) -> Path:
    tag = tag or f"{report.strategy}_seed{seed}"
    report_path = out / f"report_{tag}.json"
    _json_dump(report.to_json_dict(), report_path)
    _json_dump({"wall_clock_sec": report.wall_clock}, out / f"timing_{tag}.json")
    with open(out / f"curve_{tag}.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "classes_seen", "acc", "strategy", "seed"])
        for i in range(report.n_steps):
            writer.writerow([i + 1, report.classes_seen[i], report.step_accs[i],
                             report.strategy, seed])
    for step_idx, mem in memories:
        mem.save(out / f"memory_{tag}_step{step_idx + 1}.json")
    return report_path


# ------------------------------------------------------------------ prepare


def cmd_prepare(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.synthetic:
        sched = synthetic_schedule(
            seed=args.seed,
            n_classes=args.classes,
            classes_per_step=args.per_step or 2,
            samples_per_class=args.samples_per_class,
            vocab_per_class=args.vocab_per_class,
            overlap_fraction=args.overlap)
    elif args.data:
        data_path = Path(args.data)
        if not data_path.exists():
            raise ConfigError(f"dataset file not found: {args.data}")
        samples, _ = load_jsonl(data_path)
        top_k, per_step = args.top_k, args.per_step
        if args.preset:
            if args.preset not in DATASET_PRESETS:
                raise ConfigError(
                    f"unknown preset {args.preset!r}; valid: "
                    f"{', '.join(sorted(DATASET_PRESETS))}")
            preset = DATASET_PRESETS[args.preset]
            top_k = preset["top_k_classes"] if top_k is None else top_k
            per_step = preset["classes_per_step"] if per_step is None else per_step
        if per_step is None:
            raise ConfigError("pass --per-step or --preset to slice the classes")
        sched = build_schedule(samples, seed=args.seed, classes_per_step=per_step,
                               top_k_classes=top_k,
                               provenance={"source": str(args.data),
                                           "preset": args.preset,
                                           "seed": args.seed})
    else:
        raise ConfigError("pass --synthetic or --data PATH")

    sched.save(out / "schedule.json")
    _json_dump(sched.manifest(), out / "manifest.json")
    print(f"schedule: {sched.n_steps} steps, {sched.n_classes} classes "
          f"-> {out / 'schedule.json'}")
    for i, step in enumerate(sched.steps):
        print(f"  step {i + 1}: {', '.join(step.class_names)}")
    return 0


# ---------------------------------------------------------------------- run


def cmd_run(args) -> int:
    config = _load_config_file(args.config) if args.config else {}
    strategy = _resolve_strategy(args, config)
    hp = _resolve_hyperparams(args, config)
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    schedule_path = args.schedule or config.get("schedule_path")
    if not schedule_path:
        raise ConfigError("pass --schedule PATH (or a config file that names one)")
    sched = _load_schedule(schedule_path)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    memories = []
    callback = None
    if strategy.use_memory:
        callback = lambda i, model, mem, acc: memories.append(  # noqa: E731
            (i, type(mem)(budget=mem.budget,
                          per_class={k: list(v) for k, v in mem.per_class.items()})))
    report = run_benchmark(sched, strategy, hp, seed, step_callback=callback)
    report.config["schedule_path"] = str(schedule_path)
    path = _write_run_outputs(report, out, seed, memories)
    print(f"strategy={report.strategy} seed={seed} "
          f"AverageAcc {report.average_acc:.4f} WholeAcc {report.whole_acc:.4f}")
    print(f"report: {path}")
    return 0


# -------------------------------------------------------------------- ablate


def cmd_ablate(args) -> int:
    sched = _load_schedule(args.schedule)
    hp = _resolve_hyperparams(args, {})
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed or 0]
    if args.variants:
        wanted = [v.strip() for v in args.variants.split(",")]
        unknown = [v for v in wanted if v not in ABLATION_VARIANTS]
        if unknown:
            raise ConfigError(
                f"unknown variant(s) {', '.join(unknown)}; valid: "
                f"{', '.join(ABLATION_ORDER)}")
    else:
        wanted = list(ABLATION_ORDER)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for variant in wanted:
        strategy = ABLATION_VARIANTS[variant]
        slug = variant.lower().replace("-", "no_").replace("&", "_") \
            if variant != "MSR" else "msr"
        averages, wholes = [], []
        for seed in seeds:
            report = run_benchmark(sched, strategy, hp, seed)
            _write_run_outputs(report, out, seed, [], tag=f"{slug}_seed{seed}")
            averages.append(report.average_acc)
            wholes.append(report.whole_acc)
        rows.append({"variant": variant,
                     "average_acc": float(np.mean(averages)),
                     "whole_acc": float(np.mean(wholes)),
                     "n_seeds": len(seeds)})
        print(f"{variant:8s} AverageAcc {rows[-1]['average_acc']:.4f} "
              f"WholeAcc {rows[-1]['whole_acc']:.4f} ({len(seeds)} seed(s))")

    summary = out / "ablation_summary.csv"
    with open(summary, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["variant", "average_acc",
                                                "whole_acc", "n_seeds"])
        writer.writeheader()
        writer.writerows(rows)
    if not args.no_figure:
        from .plots import render_ablation_bars
        render_ablation_bars(rows, out / "ablation_summary.png")
    print(f"summary: {summary}")
    return 0


# -------------------------------------------------------------------- report


def cmd_report(args) -> int:
    reports, seeds = [], []
    for path in args.reports:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"report file not found: {path}")
        with open(p, encoding="utf-8") as fh:
            raw = json.load(fh)
        reports.append(RunReport.from_json_dict(raw))
        seeds.append(raw.get("config", {}).get("seed", "?"))

    lengths = {rep.n_steps for rep in reports}
    if len(lengths) > 1:
        raise ConfigError(
            f"reports cover different step counts {sorted(lengths)}; "
            "merge only runs of the same schedule")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    merged = out / "merged_curves.csv"
    with open(merged, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "seed", "step", "acc"])
        for rep, seed in zip(reports, seeds):
            for i, acc in enumerate(rep.step_accs):
                writer.writerow([rep.strategy, seed, i + 1, acc])

    n_steps = reports[0].n_steps
    header = ["strategy", "seed"] + [f"acc_{i + 1}" for i in range(n_steps)] \
        + ["average", "whole"]
    table_rows = [header]
    for rep, seed in zip(reports, seeds):
        table_rows.append([rep.strategy, str(seed)]
                          + [f"{a:.4f}" for a in rep.step_accs]
                          + [f"{rep.average_acc:.4f}", f"{rep.whole_acc:.4f}"])
    widths = [max(len(row[c]) for row in table_rows) for c in range(len(header))]
    lines = ["  ".join(cell.ljust(widths[c]) for c, cell in enumerate(row))
             for row in table_rows]
    table = "\n".join(lines)
    print(table)
    (out / "table.txt").write_text(table + "\n", encoding="utf-8")

    if not args.no_figure:
        from .plots import render_accuracy_curves
        figure = out / "accuracy_curves.png"
        render_accuracy_curves(reports, figure, seeds)
        print(f"figure: {figure}")
    print(f"merged: {merged}")
    return 0


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lifelong-intent",
        description="Class-incremental intent classification benchmark harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build a class-incremental schedule")
    p.add_argument("--data", help="JSONL dataset with text/label[/split] fields")
    p.add_argument("--preset", help=f"slicing preset: {', '.join(sorted(DATASET_PRESETS))}")
    p.add_argument("--synthetic", action="store_true", help="generate synthetic intents")
    p.add_argument("--classes", type=int, default=SYNTH_DEFAULTS["n_classes"])
    p.add_argument("--per-step", type=int, default=None, help="new classes per step")
    p.add_argument("--samples-per-class", type=int,
                   default=SYNTH_DEFAULTS["samples_per_class"])
    p.add_argument("--vocab-per-class", type=int,
                   default=SYNTH_DEFAULTS["vocab_per_class"])
    p.add_argument("--overlap", type=float, default=SYNTH_DEFAULTS["overlap_fraction"])
    p.add_argument("--top-k", type=int, default=None,
                   help="keep only the k most frequent classes")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("run", help="run one strategy over a prepared schedule")
    p.add_argument("--schedule", help="schedule.json from prepare")
    p.add_argument("--strategy",
                   help="finetune | lwf | emr | icarl | msr | upperbound")
    p.add_argument("--config", help="JSON config or a previous report to reproduce")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="out")
    _add_toggle_flags(p)
    _add_hyperparam_flags(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="run the ablation variant grid")
    p.add_argument("--schedule", required=True)
    p.add_argument("--seeds", help="comma-separated list, e.g. 1,2,3")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--variants", help=f"subset of: {','.join(ABLATION_ORDER)}")
    p.add_argument("--out", default="out/ablation")
    p.add_argument("--no-figure", action="store_true")
    _add_hyperparam_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="merge run reports into a table, CSV, and figure")
    p.add_argument("reports", nargs="+", help="report_*.json files")
    p.add_argument("--out", default="out/report")
    p.add_argument("--no-figure", action="store_true")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    import logging

    logging.basicConfig(level=logging.INFO, format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DatasetError, ScheduleError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - last-resort runtime failure
        print(f"runtime failure: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
