"""Experiment orchestration: runs, sweeps, comparison tables, curves and improvement maps."""

from __future__ import annotations

import csv
import io
import json
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, config_hash, dump_config
from .data import load_surreal_format, make_splits, read_manifest, synthetic_manifest
from .metrics import (
    METRIC_INFO,
    MetricsReport,
    frame_errors_from_csv,
    frame_errors_to_csv,
    improvement_map,
    success_rate_curve,
)
from .synthetic import SyntheticFigureParams, synthetic_sample
from .trainer import TrainState, evaluate, load_checkpoint, make_model, new_state, save_checkpoint, train
from .vocab import TaskKind, TaskSet, parse_task_set

TOKEN_TASK = {t.token: t for t in TaskKind}

# Column sets of the four published comparison tables, in their printed order.
PAPER_COMBOS: dict[str, tuple[str, ...]] = {
    "seg": ("seg", "seg+depth", "seg+3d", "2d+seg", "2d+seg+depth", "2d+seg+3d", "seg+depth+3d", "2d+seg+depth+3d"),
    "3d": ("3d", "2d+3d", "seg+3d", "depth+3d", "2d+seg+3d", "2d+depth+3d", "seg+depth+3d", "2d+seg+depth+3d"),
    "2d": ("2d", "2d+depth", "2d+3d", "2d+seg", "2d+seg+depth", "2d+seg+3d", "2d+depth+3d", "2d+seg+depth+3d"),
    "depth": ("depth", "2d+depth", "seg+depth", "depth+3d", "2d+seg+depth", "2d+depth+3d", "seg+depth+3d", "2d+seg+depth+3d"),
}

TABLE_HEADER = {"seg": "IOU", "2d": "PCKh", "depth": "RMSE", "3d": "MJD (mm)"}


class SweepError(ValueError):
    pass


def display_name(tasks: TaskSet) -> str:
    """Human-readable column title, e.g. ``2D/3D pose + seg. + depth``."""
    has2, has3 = TaskKind.POSE2D in tasks, TaskKind.POSE3D in tasks
    parts = []
    if has2 and has3:
        parts.append("2D/3D pose")
    elif has2:
        parts.append("2D pose")
    elif has3:
        parts.append("3D pose")
    if TaskKind.PARTSEG in tasks:
        parts.append("seg.")
    if TaskKind.DEPTH in tasks:
        parts.append("depth")
    return " + ".join(parts)


def paper_combos(task: str) -> tuple[TaskSet, ...]:
    if task not in PAPER_COMBOS:
        raise SweepError(f"no published column set for task {task!r}")
    return tuple(parse_task_set(s) for s in PAPER_COMBOS[task])


def job_seed(base_seed: int, tasks: TaskSet) -> int:
    """Per-job model seed: base seed xor a stable hash of the task set."""
    return (base_seed ^ zlib.crc32(str(tasks).encode())) & 0x7FFFFFFF


# ---------------------------------------------------------------- data


def _subject_of(i: int, n_subjects: int) -> str:
    return f"s{i % n_subjects:03d}"


def load_data(cfg: ExperimentConfig):
    """Return ``(train, test)`` sample lists with no subject in both."""
    d = cfg.dataset
    if d.kind == "surreal":
        manifest = read_manifest(d.root)
        if not any(r.split == "test" for r in manifest.records):
            manifest = make_splits(manifest, d.seed)
        train_s = list(load_surreal_format(d.root, manifest, d.size, split="train"))
        test_s = list(load_surreal_format(d.root, manifest, d.size, split="test"))
        if not train_s or not test_s:
            raise ValueError("dataset needs both train and test samples")
        return train_s, test_s
    params = SyntheticFigureParams(seed=d.seed, size=d.size, n_subjects=d.n_subjects)
    splits = make_splits(synthetic_manifest(d.n_subjects, d.n_subjects), d.seed)
    test_subjects = set(splits.subjects("test"))
    train_idx, test_idx, i = [], [], 0
    while len(train_idx) < d.n_train or len(test_idx) < d.n_test:
        bucket = test_idx if _subject_of(i, d.n_subjects) in test_subjects else train_idx
        want = d.n_test if bucket is test_idx else d.n_train
        if len(bucket) < want:
            bucket.append(i)
        i += 1
    return [synthetic_sample(params, j) for j in train_idx], [synthetic_sample(params, j) for j in test_idx]


# ---------------------------------------------------------------- single run


@dataclass
class RunResult:
    tasks: TaskSet
    report: MetricsReport
    checkpoint: Path
    config_hash: str
    out_dir: Path


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def write_report(report: MetricsReport, out_dir: Path) -> None:
    _write(out_dir / "report.csv", report.to_csv())
    _write(out_dir / "report.json", report.to_json())
    _write(out_dir / "frame_errors.csv", frame_errors_to_csv(report))


def run_dir(cfg: ExperimentConfig, tasks: TaskSet) -> Path:
    return Path(cfg.out) / str(tasks)


def run_one(cfg: ExperimentConfig, tasks: TaskSet, data=None, seed: int | None = None) -> RunResult:
    """Train one task set, evaluate on the test split and write its outputs."""
    torch.set_num_threads(1)
    train_s, test_s = data if data is not None else load_data(cfg)
    seed = cfg.seed if seed is None else seed
    out = run_dir(cfg, tasks)
    out.mkdir(parents=True, exist_ok=True)
    tc = replace(cfg.train, seed=seed)
    state = new_state(make_model(tasks, cfg.model, seed), tc)
    ckpt = out / "checkpoint.pt"
    train(state, train_s, max_steps=cfg.max_steps, on_epoch=lambda s: save_checkpoint(s, ckpt))
    save_checkpoint(state, ckpt)
    _write(out / "train_log.csv", "\n".join(["step, epoch, stack, task, loss, wallclock_ms", *state.log]) + "\n")
    report = evaluate(state.model, test_s)
    write_report(report, out)
    h = config_hash(replace(cfg, tasks=(tasks,), seed=seed))
    _write(out / "config.ini", dump_config(replace(cfg, tasks=(tasks,), seed=seed)))
    _write(out / "run.json", json.dumps({"tasks": str(tasks), "seed": seed, "config_hash": h}, indent=2) + "\n")
    return RunResult(tasks, report, ckpt, h, out)


def evaluate_checkpoint(path, cfg: ExperimentConfig, out_dir: Path, data=None) -> MetricsReport:
    torch.set_num_threads(1)
    state: TrainState = load_checkpoint(path, restore_rng=False)
    _, test_s = data if data is not None else load_data(cfg)
    report = evaluate(state.model, test_s)
    write_report(report, out_dir)
    return report


# ---------------------------------------------------------------- sweep


def check_sweep(task_sets, targets=None) -> tuple[str, ...]:
    """Validate a sweep and return the target task tokens that get tables."""
    seen = set()
    for t in task_sets:
        if t in seen:
            raise SweepError(f"duplicate task set {t}")
        seen.add(t)
    singles = {t.tasks[0].token for t in task_sets if len(t.tasks) == 1}
    if targets is None:
        targets = tuple(tok for tok in ("seg", "3d", "2d", "depth") if tok in singles)
        if not targets:
            raise SweepError("baseline absent: a sweep needs at least one single-task set")
    for tok in targets:
        if tok not in singles:
            raise SweepError(f"baseline absent: single-task set {tok!r} is required for its table")
    return tuple(targets)


def _sweep_job(args):
    cfg, tasks = args
    return run_one(cfg, tasks, seed=job_seed(cfg.seed, tasks))


def sweep(cfg: ExperimentConfig, targets=None) -> dict:
    """Train every task set under one data seed and emit the per-target tables."""
    targets = check_sweep(cfg.tasks, targets)
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_sweep_job, [(cfg, t) for t in cfg.tasks]))
    else:
        data = load_data(cfg)
        results = [run_one(cfg, t, data=data, seed=job_seed(cfg.seed, t)) for t in cfg.tasks]
    out = Path(cfg.out)
    tables = {}
    for tok in targets:
        cols = [(r.tasks, r.report) for r in results if TOKEN_TASK[tok] in r.tasks]
        table = comparison_table(tok, cols, cfg.report.include_background)
        _write(out / f"table_{tok}.csv", table_to_csv(table))
        _write(out / f"table_{tok}.json", json.dumps(table, indent=2) + "\n")
        tables[tok] = table
    summary = {
        "config_hash": config_hash(cfg),
        "runs": [
            {
                "tasks": str(r.tasks),
                "checkpoint": str(r.checkpoint.relative_to(out)),
                "report": str((r.out_dir / "report.json").relative_to(out)),
                "config_hash": r.config_hash,
            }
            for r in results
        ],
    }
    _write(out / "sweep.json", json.dumps(summary, indent=2) + "\n")
    return {"results": results, "tables": tables}


# ---------------------------------------------------------------- tables


def _summary_rows(task: str, include_background: bool) -> tuple[str, ...]:
    if task == "seg":
        return ("Mean",) if include_background else ("Mean (excl. background)",)
    if task == "depth":
        return ("Mean Body Parts", "Mean Full Body")
    return ("Mean",)


def best_flags(values, higher_is_better: bool) -> list[bool]:
    """Mark every finite cell equal to the row optimum."""
    finite = [v for v in values if v is not None and math.isfinite(v)]
    if not finite:
        return [False] * len(values)
    best = max(finite) if higher_is_better else min(finite)
    return [v is not None and math.isfinite(v) and v == best for v in values]


def build_table(task: str, columns: list[str], rows: list[tuple[str, list[float]]]) -> dict:
    """Wide table in the layout of the published comparisons, with per-row best flags."""
    hib = METRIC_INFO[task][2]
    out_rows = []
    for label, vals in rows:
        flags = best_flags(vals, hib)
        out_rows.append(
            {
                "label": label,
                "cells": [
                    {"column": c, "value": None if not math.isfinite(v) else v, "best": f}
                    for c, v, f in zip(columns, vals, flags)
                ],
            }
        )
    return {
        "task": task,
        "metric": METRIC_INFO[task][0],
        "unit": METRIC_INFO[task][1],
        "higher_is_better": hib,
        "header": TABLE_HEADER[task],
        "columns": columns,
        "rows": out_rows,
    }


def comparison_table(task: str, columns: list[tuple[TaskSet, MetricsReport]], include_background: bool = True) -> dict:
    if not columns:
        raise SweepError(f"no runs contain task {task!r}")
    secs = [rep.sections[task] for _, rep in columns]
    labels = list(secs[0].labels) + list(_summary_rows(task, include_background))
    rows = [(lab, [float(s.value(lab)) for s in secs]) for lab in labels]
    table = build_table(task, [str(t) for t, _ in columns], rows)
    table["column_titles"] = [display_name(t) for t, _ in columns]
    return table


def table_to_csv(table: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([table["header"], *table["columns"]])
    for row in table["rows"]:
        w.writerow([row["label"], *("nan" if c["value"] is None else repr(c["value"]) for c in row["cells"])])
    return buf.getvalue()


def table_from_csv(text: str, task: str) -> dict:
    recs = list(csv.reader(io.StringIO(text)))
    columns = recs[0][1:]
    rows = [(r[0], [float(x) for x in r[1:]]) for r in recs[1:]]
    return build_table(task, columns, rows)


# ---------------------------------------------------------------- curves and maps


def curve_series(
    baseline: dict, candidate: dict, task: str, thresholds, part: str | None = None
) -> dict[str, np.ndarray]:
    """Success-rate series for one task from two per-frame error tables."""
    out = {}
    for name, fe in (("baseline", baseline), ("candidate", candidate)):
        if task not in fe:
            raise KeyError(f"{name} has no per-frame errors for task {task!r}")
        out[name] = success_rate_curve(fe[task]["overall"], thresholds)
        if part:
            labels = list(fe[task]["labels"])
            if part not in labels:
                raise KeyError(f"unknown part or joint {part!r} for task {task!r}")
            out[f"{name}_{part}"] = success_rate_curve(fe[task]["per_label"][:, labels.index(part)], thresholds)
    return out


def curve_csv(thresholds, percent) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "percent"])
    for t, p in zip(thresholds, percent):
        w.writerow([repr(float(t)), repr(float(p))])
    return buf.getvalue()


def write_curves(baseline_dir, candidate_dir, out_dir, report_cfg, part: str | None = None) -> dict:
    base = frame_errors_from_csv((Path(baseline_dir) / "frame_errors.csv").read_text())
    cand = frame_errors_from_csv((Path(candidate_dir) / "frame_errors.csv").read_text())
    written = {}
    for task in ("2d", "seg", "depth", "3d"):
        if task not in base or task not in cand:
            continue
        grid = report_cfg.thresholds(task)
        p = part if part and part in base[task]["labels"] else None
        for name, series in curve_series(base, cand, task, grid, p).items():
            path = Path(out_dir) / f"curve_{task}_{name.replace(' ', '_').replace('.', '')}.csv"
            _write(path, curve_csv(grid, series))
            written[(task, name)] = path
    if not written:
        raise KeyError("the two runs share no task with per-frame errors")
    return written


def improvement_csv(deltas: dict[str, dict[str, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "part_or_joint", "delta"])
    for task, d in deltas.items():
        for label, v in d.items():
            w.writerow([task, label, repr(float(v))])
    return buf.getvalue()


def write_improvement(baseline: MetricsReport, candidate: MetricsReport, out_dir) -> dict:
    deltas = improvement_map(baseline, candidate)
    if not deltas:
        raise KeyError("the two reports share no task")
    _write(Path(out_dir) / "improvement.csv", improvement_csv(deltas))
    doc = {
        "baseline": baseline.task_combo,
        "candidate": candidate.task_combo,
        "positive_means": "candidate better",
        "tasks": {k: {lab: (None if math.isnan(v) else v) for lab, v in d.items()} for k, d in deltas.items()},
    }
    _write(Path(out_dir) / "improvement.json", json.dumps(doc, indent=2) + "\n")
    return deltas
