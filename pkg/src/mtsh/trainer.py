"""Training loop, evaluation and checkpoints."""

from __future__ import annotations

import io
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import codecs
from .codecs import HeatmapParams, TargetBundle, encode_sample
from .data import AugmentParams, augment
from .losses import LossReport, total_loss
from .metrics import MetricAccumulator, MetricsReport
from .network import HourglassConfig, MultiTaskModel, build_model, load_named_state, named_state
from .vocab import JOINTS_3D_TABLE, NUM_DEPTH_BINS, Sample, TaskKind, TaskSet, parse_task_set

CHECKPOINT_VERSION = 1
LOG_HEADER = "step, epoch, stack, task, loss, wallclock_ms"


class TrainingAborted(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 5
    learning_rate: float = 1e-3
    rms_alpha: float = 0.99
    rms_eps: float = 1e-8
    seed: int = 0
    device: str = "cpu"
    eval_every: int = 0
    checkpoint_dir: str | None = None
    augment: bool = True
    deterministic: bool = True
    sigma_xy: float = 1.0
    sigma_z: float = 1.0
    weight_decay: float = 0.0
    grad_clip: float | None = None
    scale_range: tuple[float, float] = (0.75, 1.25)
    rotation_deg: float = 30.0
    color_jitter: float = 0.2

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 < self.rms_alpha < 1:
            raise ValueError("rms_alpha must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        return cls(**d)

    @property
    def heatmap_params(self) -> HeatmapParams:
        return HeatmapParams(self.sigma_xy, self.sigma_z)


@dataclass
class TrainState:
    model: MultiTaskModel
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    step: int = 0
    epoch: int = 0
    best_metric: float | None = None
    log: list[str] = field(default_factory=list)

    @property
    def tasks(self) -> TaskSet:
        return self.model.tasks


def set_deterministic(flag: bool) -> None:
    torch.use_deterministic_algorithms(flag)


def make_model(tasks: TaskSet, config: HourglassConfig, seed: int) -> MultiTaskModel:
    torch.manual_seed(seed)
    return build_model(tasks, config)


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.Optimizer:
    # Plain (uncentred) RMSprop without momentum:
    # a <- rho a + (1 - rho) g^2 ; theta <- theta - lr g / (sqrt(a) + eps)
    return torch.optim.RMSprop(
        model.parameters(),
        lr=cfg.learning_rate,
        alpha=cfg.rms_alpha,
        eps=cfg.rms_eps,
        weight_decay=cfg.weight_decay,
        momentum=0.0,
        centered=False,
    )


def new_state(model: MultiTaskModel, cfg: TrainConfig) -> TrainState:
    return TrainState(model=model, optimizer=make_optimizer(model, cfg), config=cfg)


def _augment_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, epoch, index]).generate_state(1)[0])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, 7, epoch])).permutation(n)


def targets_to_tensors(bundles: Sequence[TargetBundle], tasks: TaskSet, dtype=torch.float32) -> dict:
    return {
        t: torch.from_numpy(np.stack([b[t] for b in bundles])).permute(0, 3, 1, 2).contiguous().to(dtype)
        for t in tasks
    }


def images_to_tensor(samples: Sequence[Sample], dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image for s in samples])).permute(0, 3, 1, 2).contiguous().to(dtype)


class _Encoder:
    """Produces ``(image, bundle)`` for a sample index at a given epoch; caches when nothing varies."""

    def __init__(self, samples, tasks, model_cfg: HourglassConfig, cfg: TrainConfig):
        self.samples = samples
        self.tasks = tasks
        self.res = model_cfg.resolution
        self.n_bins = model_cfg.n_bins
        self.cfg = cfg
        self.cache: dict[int, tuple[Sample, TargetBundle]] = {}

    def __call__(self, index: int, epoch: int) -> tuple[Sample, TargetBundle]:
        if not self.cfg.augment:
            if index not in self.cache:
                s = self.samples[index]
                self.cache[index] = (s, encode_sample(s, self.tasks, self.res, self.cfg.heatmap_params, self.n_bins))
            return self.cache[index]
        params = AugmentParams(
            scale=self.cfg.scale_range,
            rotation_deg=(-self.cfg.rotation_deg, self.cfg.rotation_deg),
            color_jitter=self.cfg.color_jitter,
            seed=_augment_seed(self.cfg.seed, epoch, index),
        )
        s = augment(self.samples[index], params)
        return s, encode_sample(s, self.tasks, self.res, self.cfg.heatmap_params, self.n_bins)


def _check_outputs(outputs, step: int) -> None:
    for k, preds in enumerate(outputs, start=1):
        for t, v in preds.items():
            if not torch.isfinite(v).all():
                raise TrainingAborted(f"non-finite prediction at step {step}: stack {k}, task {t.token}")


def train(
    state: TrainState,
    samples: Sequence[Sample],
    max_steps: int | None = None,
    on_step: Callable[[TrainState, LossReport], None] | None = None,
    on_epoch: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Run (or resume) optimisation until ``config.epochs`` or ``max_steps`` total steps.

    The batch order for epoch ``e`` is a permutation fixed by ``(seed, e)`` and
    augmentations by ``(seed, e, sample index)``, so resuming from a
    checkpoint reproduces the uninterrupted run step for step.
    """
    cfg = state.config
    model = state.model
    tasks = model.tasks
    n = len(samples)
    if n == 0:
        raise ValueError("empty training set")
    set_deterministic(cfg.deterministic)
    encoder = _Encoder(samples, tasks, model.config, cfg)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    if max_steps is not None:
        total_steps = min(total_steps, max_steps)
    t0 = time.perf_counter()
    model.train()
    while state.step < total_steps:
        epoch, pos = divmod(state.step, steps_per_epoch)
        state.epoch = epoch
        order = epoch_order(n, cfg.seed, epoch)
        idx = order[pos * cfg.batch_size : (pos + 1) * cfg.batch_size]
        pairs = [encoder(int(i), epoch) for i in idx]
        images = images_to_tensor([p[0] for p in pairs])
        targets = targets_to_tensors([p[1] for p in pairs], tasks)

        outputs = model(images)
        _check_outputs(outputs, state.step)
        report = total_loss(outputs, targets, tasks)
        for (k, t), v in report.terms.items():
            if not torch.isfinite(v):
                raise TrainingAborted(f"non-finite loss at step {state.step}: stack {k}, task {t.token}")
        state.optimizer.zero_grad(set_to_none=True)
        report.total.backward()
        for name, p in model.named_parameters():
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise TrainingAborted(f"non-finite gradient at step {state.step} in {name}")
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        state.optimizer.step()

        ms = (time.perf_counter() - t0) * 1000.0
        for (k, t), v in sorted(report.terms.items(), key=lambda kv: (kv[0][0], kv[0][1].order)):
            state.log.append(f"{state.step}, {epoch}, {k}, {t.token}, {float(v.detach()):.8g}, {ms:.1f}")
        state.step += 1
        if on_step is not None:
            on_step(state, report)
        if state.step % steps_per_epoch == 0:
            state.epoch = epoch + 1
            if on_epoch is not None:
                on_epoch(state)
    return state


# ---------------------------------------------------------------- evaluation


@torch.no_grad()
def predict(model: MultiTaskModel, samples: Sequence[Sample], batch_size: int = 8) -> list[dict[TaskKind, np.ndarray]]:
    """Final-stack predictions per sample as ``(R, R, C)`` arrays."""
    was_training = model.training
    model.eval()
    out = []
    try:
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            preds = model(images_to_tensor(chunk))[-1]
            arrays = {t: v.permute(0, 2, 3, 1).cpu().numpy() for t, v in preds.items()}
            for i in range(len(chunk)):
                out.append({t: a[i] for t, a in arrays.items()})
    finally:
        model.train(was_training)
    return out


def evaluate_predictions(
    tasks: TaskSet,
    predictions: Sequence[dict[TaskKind, np.ndarray]],
    samples: Sequence[Sample],
    n_bins: int = NUM_DEPTH_BINS,
    mjd_joints: tuple[str, ...] = JOINTS_3D_TABLE,
) -> MetricsReport:
    """Decode predictions and score them against the samples they came from.

    Depth quantizers are fitted per ground-truth sample, the same policy used
    to build the training targets.
    """
    if len(samples) == 0:
        raise ValueError("empty evaluation set")
    if len(predictions) != len(samples):
        raise ValueError("one prediction per sample is required")
    acc = MetricAccumulator(n_bins=n_bins, mjd_joints=mjd_joints)
    for pred, s in zip(predictions, samples):
        acc.count_sample()
        in_res = s.width
        if TaskKind.POSE2D in tasks:
            xy, _ = codecs.decode_pose2d(pred[TaskKind.POSE2D], in_res)
            acc.add_pose2d(xy, s.joints2d, s.visible)
        r = next(iter(pred.values())).shape[0]
        gt_labels = codecs.downsample_labels(s.part_mask, r)
        if TaskKind.PARTSEG in tasks:
            acc.add_parts(codecs.decode_parts(pred[TaskKind.PARTSEG]), gt_labels)
        if TaskKind.DEPTH in tasks:
            q = codecs.fit_depth_quantizer(s.depth, s.part_mask, n_bins)
            gt_bins = codecs.depth_bin_map(s.depth, s.part_mask, q, r)
            acc.add_depth(np.argmax(pred[TaskKind.DEPTH], axis=-1), gt_bins, gt_labels)
        if TaskKind.POSE3D in tasks:
            q3 = codecs.fit_pose3d_quantizer(s.depth, s.part_mask, s.joints3d, s.visible, n_bins)
            xyz = codecs.decode_pose3d(pred[TaskKind.POSE3D], s.intrinsics, q3, in_res)
            acc.add_pose3d(xyz, s.joints3d, s.visible)
    return acc.report(str(tasks))


def evaluate(
    model: MultiTaskModel,
    samples: Sequence[Sample],
    batch_size: int = 8,
    mjd_joints: tuple[str, ...] = JOINTS_3D_TABLE,
) -> MetricsReport:
    if len(samples) == 0:
        raise ValueError("empty evaluation set")
    preds = predict(model, samples, batch_size)
    return evaluate_predictions(model.tasks, preds, samples, model.config.n_bins, mjd_joints)


# ---------------------------------------------------------------- checkpoints


def _state_payload(state: TrainState) -> dict:
    # Only one metadata string plus uniquely named tensors, so the pickle
    # stream never depends on object identity and re-saves are byte-stable.
    opt = state.optimizer.state_dict()
    tensors = {f"model/{k}": v.detach().clone() for k, v in named_state(state.model).items()}
    opt_meta = {}
    for idx, entry in opt["state"].items():
        for key, val in entry.items():
            if torch.is_tensor(val):
                tensors[f"optimizer/{idx}/{key}"] = val.detach().clone()
            else:
                opt_meta.setdefault(str(idx), {})[key] = val
    tensors["rng/torch"] = torch.get_rng_state().clone()
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": state.model.config.to_dict(),
        "tasks": str(state.model.tasks),
        "train_config": state.config.to_dict(),
        "param_groups": opt["param_groups"],
        "optimizer_scalars": opt_meta,
        "step": state.step,
        "epoch": state.epoch,
        "best_metric": state.best_metric,
    }
    return {"meta": json.dumps(meta, sort_keys=True), "tensors": tensors}


def checkpoint_bytes(state: TrainState) -> bytes:
    buf = io.BytesIO()
    torch.save(_state_payload(state), buf)
    return buf.getvalue()


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(state))
    return path


def load_checkpoint(path, expected_tasks: TaskSet | None = None, restore_rng: bool = True) -> TrainState:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
        meta = json.loads(payload["meta"])
        tensors = payload["tensors"]
    except FileNotFoundError:
        raise
    except Exception as e:  # damaged archives surface as many exception types
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from e
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version mismatch: expected {CHECKPOINT_VERSION}, found {meta.get('format_version')}"
        )
    tasks = parse_task_set(meta["tasks"])
    if expected_tasks is not None and tasks != expected_tasks:
        raise CheckpointError(f"checkpoint trained for {tasks}, expected {expected_tasks}")
    model = build_model(tasks, HourglassConfig(**meta["config"]))
    load_named_state(model, {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")})
    cfg = TrainConfig.from_dict(meta["train_config"])
    opt = make_optimizer(model, cfg)
    opt_state: dict[int, dict] = {}
    for k, v in tensors.items():
        if k.startswith("optimizer/"):
            _, idx, key = k.split("/", 2)
            opt_state.setdefault(int(idx), {})[key] = v
    for idx, extra in meta["optimizer_scalars"].items():
        opt_state.setdefault(int(idx), {}).update(extra)
    opt.load_state_dict({"state": opt_state, "param_groups": meta["param_groups"]})
    if restore_rng:
        torch.set_rng_state(tensors["rng/torch"])
    return TrainState(
        model=model,
        optimizer=opt,
        config=cfg,
        step=meta["step"],
        epoch=meta["epoch"],
        best_metric=meta["best_metric"],
    )
