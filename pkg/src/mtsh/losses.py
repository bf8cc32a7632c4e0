"""Per-task losses and the summed multi-task objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .vocab import TaskKind, TaskSet

HEATMAP_TASKS = (TaskKind.POSE2D, TaskKind.POSE3D)
LABEL_TASKS = (TaskKind.PARTSEG, TaskKind.DEPTH)


def _check_pair(pred: torch.Tensor, target: torch.Tensor) -> None:
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def heatmap_rmse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Square root of the mean squared error over the whole tensor.

    At exactly zero error the subgradient 0 is used instead of the
    unbounded derivative of ``sqrt``.
    """
    _check_pair(pred, target)
    if not (torch.isfinite(pred).all() and torch.isfinite(target).all()):
        raise ValueError("non-finite values in heatmap loss input")
    mse = torch.mean((pred - target) ** 2)
    tiny = torch.finfo(mse.dtype).tiny
    root = torch.sqrt(torch.clamp(mse, min=tiny))
    return torch.where(mse > 0, root, torch.zeros_like(mse))


def spatial_cross_entropy(
    logits: torch.Tensor,
    target_onehot: torch.Tensor,
    class_weights: torch.Tensor | None = None,
    dim: int = 1,
) -> torch.Tensor:
    """Per-pixel softmax cross-entropy averaged over every pixel.

    ``class_weights`` scales each pixel's term by the weight of its target class.
    """
    _check_pair(logits, target_onehot)
    t = target_onehot
    if not bool(((t == 0) | (t == 1)).all()) or not bool((t.sum(dim=dim) == 1).all()):
        raise ValueError("target must be one-hot along the class axis")
    nll = -(t * F.log_softmax(logits, dim=dim)).sum(dim=dim)
    if class_weights is not None:
        shape = [1] * t.dim()
        shape[dim] = -1
        w = (t * class_weights.to(t.dtype).reshape(shape)).sum(dim=dim)
        nll = nll * w
    return nll.mean()


def task_loss(task: TaskKind, pred: torch.Tensor, target: torch.Tensor, class_weights=None) -> torch.Tensor:
    if task in HEATMAP_TASKS:
        return heatmap_rmse_loss(pred, target)
    return spatial_cross_entropy(pred, target, class_weights)


@dataclass
class LossReport:
    """Loss per ``(stack, task)`` (stacks counted from 1) and their sum."""

    terms: dict[tuple[int, TaskKind], torch.Tensor] = field(default_factory=dict)
    total: torch.Tensor | None = None

    def lines(self, step: int) -> list[str]:
        return [f"{step}, {s}, {t.token}, {float(v.detach()):.8g}" for (s, t), v in sorted(
            self.terms.items(), key=lambda kv: (kv[0][0], kv[0][1].order))]

    def as_floats(self) -> dict[tuple[int, str], float]:
        return {(s, t.token): float(v.detach()) for (s, t), v in self.terms.items()}


def total_loss(
    outputs: list[dict[TaskKind, torch.Tensor]],
    targets: dict[TaskKind, torch.Tensor],
    tasks: TaskSet,
    weights: dict[TaskKind, float] | None = None,
    class_weights: dict[TaskKind, torch.Tensor] | None = None,
) -> LossReport:
    """Unweighted sum of every task's loss at every stack.

    ``weights`` defaults to 1.0 for every task; tasks outside ``tasks`` are ignored.
    """
    for task in tasks:
        if task not in targets:
            raise KeyError(f"missing target for active task {task.token!r}")
    report = LossReport()
    total = None
    for k, preds in enumerate(outputs, start=1):
        for task in tasks:
            if task not in preds:
                raise KeyError(f"stack {k} has no prediction for {task.token!r}")
            cw = None if class_weights is None else class_weights.get(task)
            term = task_loss(task, preds[task], targets[task], cw)
            report.terms[(k, task)] = term
            w = 1.0 if weights is None else weights.get(task, 1.0)
            contrib = term if w == 1.0 else term * w
            total = contrib if total is None else total + contrib
    report.total = total
    return report
