"""Evaluation metrics, report containers and aggregation.

Aggregation across frames: IOU and PCKh pool raw counts over every frame
(micro average); depth RMSE and MJD average per-frame values (macro). Means
use ``math.fsum`` so merging shards in any order gives bit-identical output.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .vocab import JOINT_INDEX, JOINTS, JOINTS_3D_TABLE, NUM_DEPTH_BINS, PARTS

HEAD_TOP = JOINT_INDEX["Head Top"]
UPPER_NECK = JOINT_INDEX["Upper Neck"]


# ---------------------------------------------------------------- primitives


def confusion_matrix(pred, gt, n_classes: int) -> np.ndarray:
    pred = np.asarray(pred).ravel().astype(np.int64)
    gt = np.asarray(gt).ravel().astype(np.int64)
    return np.bincount(gt * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def iou_from_confusion(cm: np.ndarray) -> np.ndarray:
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = 100.0 * inter / union
    return np.where(union > 0, iou, np.nan)


def iou_per_class(pred_labels, gt_labels, n_classes: int) -> np.ndarray:
    """Percent IOU per class; classes absent from both maps are ``nan``."""
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    if pred_labels.shape != gt_labels.shape:
        raise ValueError(f"shape mismatch: {pred_labels.shape} vs {gt_labels.shape}")
    return iou_from_confusion(confusion_matrix(pred_labels, gt_labels, n_classes))


def mean_iou(per_class, include_background: bool = True) -> float:
    v = np.asarray(per_class, dtype=np.float64)
    if not include_background:
        v = v[1:]
    v = v[np.isfinite(v)]
    if v.size == 0:
        return math.nan
    return math.fsum(v) / v.size


def head_length(gt_joints2d) -> float:
    gt = np.asarray(gt_joints2d, dtype=np.float64)
    return float(np.linalg.norm(gt[HEAD_TOP] - gt[UPPER_NECK]))


def pckh(pred_joints, gt_joints, head_len: float | None = None, alpha: float = 0.5) -> np.ndarray:
    """Per-joint correctness: error <= ``alpha * head_len`` (boundary inclusive)."""
    pred = np.asarray(pred_joints, dtype=np.float64)
    gt = np.asarray(gt_joints, dtype=np.float64)
    if head_len is None:
        head_len = head_length(gt)
    if not head_len > 0:
        raise ValueError(f"degenerate head length {head_len}")
    err = np.linalg.norm(pred - gt, axis=-1)
    return err <= alpha * head_len


def pckh_score(correct) -> float:
    c = np.asarray(correct, dtype=np.float64)
    return 100.0 * math.fsum(c.ravel()) / c.size


def mjd(pred_joints3d, gt_joints3d, joint_subset=None) -> np.ndarray:
    """Euclidean distance per joint in camera millimetres, without any alignment."""
    d = np.linalg.norm(np.asarray(pred_joints3d, float) - np.asarray(gt_joints3d, float), axis=-1)
    if joint_subset is not None:
        d = d[..., list(joint_subset)]
    return d


def depth_rmse(pred_bins, gt_bins, region_mask=None) -> float:
    """Root mean squared bin-index error inside ``region_mask`` (whole map if omitted)."""
    p = np.asarray(pred_bins, dtype=np.float64)
    g = np.asarray(gt_bins, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError("shape mismatch")
    if region_mask is not None:
        m = np.asarray(region_mask, dtype=bool)
        p, g = p[m], g[m]
    if p.size == 0:
        raise ValueError("empty region")
    return math.sqrt(math.fsum(((p - g) ** 2).ravel()) / p.size)


def success_rate_curve(errors, thresholds) -> np.ndarray:
    """Percent of frames whose error is strictly below each threshold."""
    e = np.asarray(errors, dtype=np.float64).ravel()
    e = e[np.isfinite(e)]
    t = np.asarray(thresholds, dtype=np.float64)
    if e.size == 0:
        return np.full(t.shape, np.nan)
    e = np.sort(e)
    return 100.0 * np.searchsorted(e, t, side="left") / e.size


# ---------------------------------------------------------------- reports

METRIC_INFO = {
    # task token -> (metric, unit, higher_is_better)
    "seg": ("IOU", "%", True),
    "2d": ("PCKh", "%", True),
    "depth": ("RMSE", "bins", False),
    "3d": ("MJD", "mm", False),
}


@dataclass
class MetricSection:
    task: str
    labels: tuple[str, ...]
    values: np.ndarray
    summary: dict[str, float] = field(default_factory=dict)

    @property
    def metric(self) -> str:
        return METRIC_INFO[self.task][0]

    @property
    def unit(self) -> str:
        return METRIC_INFO[self.task][1]

    @property
    def higher_is_better(self) -> bool:
        return METRIC_INFO[self.task][2]

    def rows(self) -> list[tuple[str, float]]:
        return list(zip(self.labels, map(float, self.values))) + list(self.summary.items())

    def value(self, label: str) -> float:
        for name, v in self.rows():
            if name == label:
                return v
        raise KeyError(label)


@dataclass
class MetricsReport:
    task_combo: str
    sections: dict[str, MetricSection] = field(default_factory=dict)
    n_samples: int = 0
    frame_errors: dict[str, dict] = field(default_factory=dict)

    def __contains__(self, task_token: str) -> bool:
        return task_token in self.sections

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task_combo", "metric", "part_or_joint", "value", "unit"])
        for token in _ordered(self.sections):
            sec = self.sections[token]
            for label, v in sec.rows():
                w.writerow([self.task_combo, sec.metric, label, repr(float(v)), sec.unit])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        by_metric = {info[0]: tok for tok, info in METRIC_INFO.items()}
        report = None
        rows: dict[str, list[tuple[str, float]]] = {}
        for rec in csv.DictReader(io.StringIO(text)):
            if report is None:
                report = cls(task_combo=rec["task_combo"])
            tok = by_metric[rec["metric"]]
            rows.setdefault(tok, []).append((rec["part_or_joint"], float(rec["value"])))
        if report is None:
            raise ValueError("empty report CSV")
        for tok, items in rows.items():
            n_labels = len(_default_labels(tok, [name for name, _ in items]))
            labels = tuple(name for name, _ in items[:n_labels])
            values = np.array([v for _, v in items[:n_labels]])
            summary = dict(items[n_labels:])
            report.sections[tok] = MetricSection(tok, labels, values, summary)
        return report

    def to_json_dict(self) -> dict:
        doc = {"task_combo": self.task_combo, "n_samples": self.n_samples, "sections": {}}
        for token in _ordered(self.sections):
            sec = self.sections[token]
            doc["sections"][token] = {
                "metric": sec.metric,
                "unit": sec.unit,
                "higher_is_better": sec.higher_is_better,
                "rows": [{"label": k, "value": _json_float(v)} for k, v in zip(sec.labels, sec.values)],
                "summary": {k: _json_float(v) for k, v in sec.summary.items()},
            }
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        doc = json.loads(text)
        rep = cls(task_combo=doc["task_combo"], n_samples=doc.get("n_samples", 0))
        for tok, sec in doc["sections"].items():
            labels = tuple(r["label"] for r in sec["rows"])
            values = np.array([_unjson_float(r["value"]) for r in sec["rows"]], dtype=np.float64)
            summary = {k: _unjson_float(v) for k, v in sec["summary"].items()}
            rep.sections[tok] = MetricSection(tok, labels, values, summary)
        return rep


def _ordered(sections) -> list[str]:
    order = ["2d", "seg", "depth", "3d"]
    return [t for t in order if t in sections]


def _default_labels(token: str, names: list[str]) -> tuple[str, ...]:
    # Everything before the first summary row is a per-label row.
    summaries = {"Mean", "Mean (excl. background)", "Mean Body Parts", "Mean Full Body"}
    out = []
    for n in names:
        if n in summaries:
            break
        out.append(n)
    return tuple(out)


def _json_float(v):
    v = float(v)
    return None if math.isnan(v) else v


def _unjson_float(v):
    return math.nan if v is None else float(v)


def improvement_map(baseline: MetricsReport, candidate: MetricsReport) -> dict[str, dict[str, float]]:
    """Signed improvement per label; positive means the candidate is better."""
    out = {}
    for token, base in baseline.sections.items():
        if token not in candidate.sections:
            continue
        cand = candidate.sections[token]
        cand_rows = dict(cand.rows())
        deltas = {}
        for label, b in base.rows():
            if label not in cand_rows:
                continue
            c = cand_rows[label]
            deltas[label] = (c - b) if base.higher_is_better else (b - c)
        out[token] = deltas
    return out


# ---------------------------------------------------------------- accumulation


def row_mean(values) -> float:
    """Mean over the finite entries, summed exactly so the order of rows is irrelevant."""
    v = [float(x) for x in values if math.isfinite(x)]
    return math.fsum(v) / len(v) if v else math.nan


_fmean = row_mean


@dataclass
class MetricAccumulator:
    """Streaming metric state for one model. Single writer; combine shards with ``merge``."""

    n_parts: int = len(PARTS)
    n_joints: int = len(JOINTS)
    n_bins: int = NUM_DEPTH_BINS
    mjd_joints: tuple[str, ...] = JOINTS_3D_TABLE
    confusion: np.ndarray | None = None
    pck_correct: np.ndarray | None = None
    pck_visible: np.ndarray | None = None
    frames: dict[str, dict[str, list]] = field(default_factory=dict)
    n_samples: int = 0

    def _frame(self, token: str, overall: float, per_label) -> None:
        f = self.frames.setdefault(token, {"overall": [], "per_label": []})
        f["overall"].append(float(overall))
        f["per_label"].append(np.asarray(per_label, dtype=np.float64))

    def add_pose2d(self, pred, gt, visible=None) -> None:
        pred = np.asarray(pred, dtype=np.float64)
        gt = np.asarray(gt, dtype=np.float64)
        vis = np.ones(len(gt), bool) if visible is None else np.asarray(visible, bool)
        hl = head_length(gt)
        correct = pckh(pred, gt, hl)
        if self.pck_correct is None:
            self.pck_correct = np.zeros(self.n_joints, np.int64)
            self.pck_visible = np.zeros(self.n_joints, np.int64)
        self.pck_correct += correct & vis
        self.pck_visible += vis
        norm = np.where(vis, np.linalg.norm(pred - gt, axis=-1) / hl, np.nan)
        self._frame("2d", _fmean(norm), norm)

    def add_parts(self, pred_labels, gt_labels) -> None:
        cm = confusion_matrix(pred_labels, gt_labels, self.n_parts)
        self.confusion = cm if self.confusion is None else self.confusion + cm
        iou = iou_from_confusion(cm)
        m = mean_iou(iou, include_background=False)
        self._frame("seg", 100.0 - m if math.isfinite(m) else math.nan, 100.0 - iou)

    def add_depth(self, pred_bins, gt_bins, gt_part_labels) -> None:
        gt_part_labels = np.asarray(gt_part_labels)
        per_part = np.full(self.n_parts, np.nan)
        for p in range(self.n_parts):
            region = gt_part_labels == p
            if region.any():
                per_part[p] = depth_rmse(pred_bins, gt_bins, region)
        self._frame("depth", depth_rmse(pred_bins, gt_bins), per_part)

    def add_pose3d(self, pred, gt, visible=None) -> None:
        d = mjd(pred, gt)
        if visible is not None:
            d = np.where(np.asarray(visible, bool), d, np.nan)
        idx = [JOINT_INDEX[j] for j in self.mjd_joints]
        self._frame("3d", _fmean(d[idx]), d)

    def count_sample(self) -> None:
        self.n_samples += 1

    def merge(self, other: "MetricAccumulator") -> "MetricAccumulator":
        out = MetricAccumulator(self.n_parts, self.n_joints, self.n_bins, self.mjd_joints)
        out.n_samples = self.n_samples + other.n_samples
        out.confusion = _add_opt(self.confusion, other.confusion)
        out.pck_correct = _add_opt(self.pck_correct, other.pck_correct)
        out.pck_visible = _add_opt(self.pck_visible, other.pck_visible)
        for src in (self, other):
            for tok, f in src.frames.items():
                dst = out.frames.setdefault(tok, {"overall": [], "per_label": []})
                dst["overall"].extend(f["overall"])
                dst["per_label"].extend(f["per_label"])
        return out

    def report(self, task_combo: str) -> MetricsReport:
        rep = MetricsReport(task_combo=task_combo, n_samples=self.n_samples)
        if self.pck_correct is not None:
            with np.errstate(invalid="ignore", divide="ignore"):
                vals = np.where(self.pck_visible > 0, 100.0 * self.pck_correct / self.pck_visible, np.nan)
            rep.sections["2d"] = MetricSection("2d", JOINTS, vals, {"Mean": _fmean(vals)})
        if self.confusion is not None:
            vals = iou_from_confusion(self.confusion)
            rep.sections["seg"] = MetricSection(
                "seg",
                PARTS,
                vals,
                {
                    "Mean": mean_iou(vals, include_background=True),
                    "Mean (excl. background)": mean_iou(vals, include_background=False),
                },
            )
        if "depth" in self.frames:
            per = np.vstack(self.frames["depth"]["per_label"])
            vals = np.array([_fmean(per[:, p]) for p in range(self.n_parts)])
            rep.sections["depth"] = MetricSection(
                "depth",
                PARTS,
                vals,
                {
                    "Mean Body Parts": _fmean(vals),
                    "Mean Full Body": _fmean(self.frames["depth"]["overall"]),
                },
            )
        if "3d" in self.frames:
            per = np.vstack(self.frames["3d"]["per_label"])
            idx = [JOINT_INDEX[j] for j in self.mjd_joints]
            vals = np.array([_fmean(per[:, i]) for i in idx])
            rep.sections["3d"] = MetricSection("3d", tuple(self.mjd_joints), vals, {"Mean": _fmean(vals)})
        for tok, f in self.frames.items():
            labels = JOINTS if tok in ("2d", "3d") else PARTS
            rep.frame_errors[tok] = {
                "labels": labels,
                "overall": np.asarray(f["overall"], dtype=np.float64),
                "per_label": np.vstack(f["per_label"]) if f["per_label"] else np.zeros((0, len(labels))),
            }
        return rep


def _add_opt(a, b):
    if a is None:
        return None if b is None else b.copy()
    if b is None:
        return a.copy()
    return a + b


def frame_errors_to_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "frame", "label", "error"])
    for tok in _ordered(report.frame_errors):
        fe = report.frame_errors[tok]
        for i, v in enumerate(fe["overall"]):
            w.writerow([tok, i, "overall", repr(float(v))])
        for i, row in enumerate(fe["per_label"]):
            for label, v in zip(fe["labels"], row):
                w.writerow([tok, i, label, repr(float(v))])
    return buf.getvalue()


def frame_errors_from_csv(text: str) -> dict[str, dict]:
    raw: dict[str, dict] = {}
    for rec in csv.DictReader(io.StringIO(text)):
        d = raw.setdefault(rec["task"], {"overall": {}, "per_label": {}, "labels": []})
        frame = int(rec["frame"])
        if rec["label"] == "overall":
            d["overall"][frame] = float(rec["error"])
        else:
            if rec["label"] not in d["labels"]:
                d["labels"].append(rec["label"])
            d["per_label"].setdefault(frame, {})[rec["label"]] = float(rec["error"])
    out = {}
    for tok, d in raw.items():
        frames = sorted(d["overall"])
        labels = tuple(d["labels"])
        out[tok] = {
            "labels": labels,
            "overall": np.array([d["overall"][i] for i in frames]),
            "per_label": np.array([[d["per_label"][i][lab] for lab in labels] for i in frames]).reshape(
                len(frames), len(labels)
            ),
        }
    return out


__all__ = [
    "MetricAccumulator",
    "MetricSection",
    "MetricsReport",
    "confusion_matrix",
    "depth_rmse",
    "frame_errors_from_csv",
    "frame_errors_to_csv",
    "head_length",
    "improvement_map",
    "iou_per_class",
    "mean_iou",
    "mjd",
    "pckh",
    "pckh_score",
    "row_mean",
    "success_rate_curve",
]
