"""Command-line entry point: ``mtsh <verb> [flags]``.

Exit codes: 0 success, 1 invalid data found by ``validate-data``,
2 configuration error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .config import ConfigError, ExperimentConfig, apply_sections, load_config, preset
from .data import DatasetError, load_surreal_format, validate_dataset, write_dataset
from .metrics import MetricsReport
from .synthetic import SyntheticFigureParams, generate_synthetic
from .trainer import CheckpointError, TrainingAborted

EXIT_OK, EXIT_INVALID, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with [experiment] [dataset] [train] [model] [report] sections")
    p.add_argument("--preset", choices=["desk", "paper"], help="base settings applied before --config")
    p.add_argument("--tasks", help="task set(s), e.g. 2d+seg or '2d, 2d+seg+depth'")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--dataset", help="'synthetic' or a directory in the intermediate dataset format")
    p.add_argument("--jobs", type=int)
    p.add_argument("--max-steps", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mtsh", description="Multi-task stacked hourglass training and evaluation harness")
    sub = ap.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one task set and evaluate it on the test split")
    _common(p)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the test split")
    _common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("sweep", help="train several task sets and emit comparison tables")
    _common(p)
    p.add_argument("--paper-combos", choices=sorted(harness.PAPER_COMBOS), help="use a published column set")

    p = sub.add_parser("curves", help="success-rate curves from two runs' per-frame errors")
    _common(p)
    p.add_argument("--baseline", required=True, help="run directory of the baseline")
    p.add_argument("--candidate", required=True, help="run directory of the candidate")
    p.add_argument("--part", help="also emit curves for this part or joint")

    p = sub.add_parser("improve", help="per-part signed improvement of one report over another")
    p.add_argument("--baseline", required=True, help="report.json/.csv or run directory")
    p.add_argument("--candidate", required=True, help="report.json/.csv or run directory")
    p.add_argument("--out", required=True)

    p = sub.add_parser("validate-data", help="check mask, depth and joint consistency")
    _common(p)
    p.add_argument("-n", type=int, default=1000, help="number of synthetic samples to check")

    p = sub.add_parser("gen-synthetic", help="write synthetic samples in the intermediate dataset format")
    p.add_argument("--out", required=True)
    p.add_argument("-n", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--subjects", type=int, default=10)
    p.add_argument("--clip-size", type=int, default=100)
    return ap


def resolve_config(args) -> ExperimentConfig:
    cfg = preset(args.preset) if args.preset else ExperimentConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    exp = {}
    if args.tasks:
        exp["tasks"] = args.tasks
    for k in ("seed", "out", "jobs", "max_steps"):
        v = getattr(args, k, None)
        if v is not None:
            exp[k] = v
    sections = {"experiment": exp} if exp else {}
    if args.dataset:
        if args.dataset == "synthetic":
            sections["dataset"] = {"kind": "synthetic"}
        else:
            sections["dataset"] = {"kind": "surreal", "root": args.dataset}
    return apply_sections(cfg, sections)


def _load_report(path: str) -> MetricsReport:
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    text = p.read_text()
    return MetricsReport.from_csv(text) if p.suffix == ".csv" else MetricsReport.from_json(text)


def _single(cfg: ExperimentConfig):
    if len(cfg.tasks) != 1:
        raise ConfigError("this verb takes exactly one task set")
    return cfg.tasks[0]


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        verb = args.verb
        cfg = None if verb in ("improve", "gen-synthetic") else resolve_config(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if verb == "train":
            res = harness.run_one(cfg, _single(cfg))
            print(f"{res.tasks}: report written to {res.out_dir} (config {res.config_hash[:12]})")
        elif verb == "evaluate":
            out = Path(cfg.out)
            harness.evaluate_checkpoint(args.checkpoint, cfg, out)
            print(f"report written to {out}")
        elif verb == "sweep":
            if args.paper_combos:
                cfg = replace(cfg, tasks=harness.paper_combos(args.paper_combos))
                targets = (args.paper_combos,)
            else:
                targets = None
            harness.check_sweep(cfg.tasks, targets)
            res = harness.sweep(cfg, targets)
            print(f"tables for {', '.join(res['tables'])} written to {cfg.out}")
        elif verb == "curves":
            written = harness.write_curves(args.baseline, args.candidate, cfg.out, cfg.report, args.part)
            print(f"{len(written)} curve files written to {cfg.out}")
        elif verb == "improve":
            harness.write_improvement(_load_report(args.baseline), _load_report(args.candidate), args.out)
            print(f"improvement map written to {args.out}")
        elif verb == "validate-data":
            if cfg.dataset.kind == "surreal":
                samples = load_surreal_format(cfg.dataset.root, out_size=cfg.dataset.size)
            else:
                params = SyntheticFigureParams(seed=cfg.dataset.seed, size=cfg.dataset.size)
                samples = generate_synthetic(params, args.n)
            n, problems = validate_dataset(samples)
            for line in problems:
                print(line)
            print(f"{n} samples checked, {len(problems)} violations")
            return EXIT_INVALID if problems else EXIT_OK
        elif verb == "gen-synthetic":
            params = SyntheticFigureParams(seed=args.seed, size=args.size, n_subjects=args.subjects)
            manifest = write_dataset(generate_synthetic(params, args.n), args.out, args.clip_size, args.seed)
            print(f"{len(manifest.records)} samples written to {args.out}")
    except (ConfigError, harness.SweepError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, CheckpointError, DatasetError, KeyError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
