"""Multi-stream stacked hourglass.

One hourglass stream per task shares a common stem. Between consecutive
stacks the per-stream features are concatenated and every stream gets its
own two-residual fusion block that maps the joint features back to ``F``
channels. Tensors are NCHW.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .vocab import NUM_DEPTH_BINS, NUM_JOINTS, NUM_PARTS, TaskKind, TaskSet, output_channels

HEAD_GAIN = 0.01


@dataclass(frozen=True)
class HourglassConfig:
    num_stacks: int = 2
    features: int = 256
    depth: int = 4
    resolution: int = 64
    input_resolution: int = 256
    n_bins: int = NUM_DEPTH_BINS
    n_joints: int = NUM_JOINTS
    n_parts: int = NUM_PARTS

    def __post_init__(self):
        if self.num_stacks < 1:
            raise ValueError("num_stacks must be >= 1")
        if self.features < 2 or self.features % 2:
            raise ValueError("features must be an even number >= 2")
        if self.depth < 1:
            raise ValueError("hourglass depth must be >= 1")
        if self.resolution % (2**self.depth):
            raise ValueError(f"resolution {self.resolution} not divisible by 2**{self.depth}")
        if self.input_resolution != 4 * self.resolution:
            raise ValueError("input resolution must be 4x the heatmap resolution")

    def channels(self, task: TaskKind) -> int:
        return output_channels(task, self.n_bins, self.n_joints, self.n_parts)

    def to_dict(self) -> dict:
        return asdict(self)


def _init_conv(conv: nn.Conv2d, gain: float = 1.0) -> None:
    nn.init.kaiming_uniform_(conv.weight, nonlinearity="relu")
    if gain != 1.0:
        with torch.no_grad():
            conv.weight.mul_(gain)
    if conv.bias is not None:
        nn.init.zeros_(conv.bias)


def conv(cin: int, cout: int, k: int = 1, stride: int = 1, gain: float = 1.0) -> nn.Conv2d:
    c = nn.Conv2d(cin, cout, k, stride=stride, padding=k // 2)
    _init_conv(c, gain)
    return c


class Residual(nn.Module):
    """Pre-activation bottleneck: BN-ReLU-1x1, BN-ReLU-3x3, BN-ReLU-1x1."""

    def __init__(self, cin: int, cout: int):
        super().__init__()
        mid = max(cout // 2, 1)
        self.bn1 = nn.BatchNorm2d(cin)
        self.conv1 = conv(cin, mid, 1)
        self.bn2 = nn.BatchNorm2d(mid)
        self.conv2 = conv(mid, mid, 3)
        self.bn3 = nn.BatchNorm2d(mid)
        self.conv3 = conv(mid, cout, 1)
        self.skip = conv(cin, cout, 1) if cin != cout else None

    def forward(self, x):
        out = self.conv1(F.relu(self.bn1(x)))
        out = self.conv2(F.relu(self.bn2(out)))
        out = self.conv3(F.relu(self.bn3(out)))
        return out + (x if self.skip is None else self.skip(x))


class Stem(nn.Module):
    """7x7/2 conv, residual, 2x max-pool, two residuals: input -> (F, R, R)."""

    def __init__(self, features: int):
        super().__init__()
        c1 = max(features // 4, 1)
        c2 = max(features // 2, 1)
        self.conv = conv(3, c1, 7, stride=2)
        self.bn = nn.BatchNorm2d(c1)
        self.res1 = Residual(c1, c2)
        self.res2 = Residual(c2, c2)
        self.res3 = Residual(c2, features)

    def forward(self, x):
        x = F.relu(self.bn(self.conv(x)))
        x = self.res1(x)
        x = F.max_pool2d(x, 2)
        return self.res3(self.res2(x))


class Hourglass(nn.Module):
    def __init__(self, depth: int, features: int):
        super().__init__()
        self.depth = depth
        self.up1 = Residual(features, features)
        self.low1 = Residual(features, features)
        self.low2 = Hourglass(depth - 1, features) if depth > 1 else Residual(features, features)
        self.low3 = Residual(features, features)

    def forward(self, x):
        up1 = self.up1(x)
        low = self.low3(self.low2(self.low1(F.max_pool2d(x, 2))))
        return up1 + F.interpolate(low, scale_factor=2, mode="nearest")

    def resolutions(self, size: int) -> list[int]:
        """Spatial sizes visited by the encoder, from input down to the bottleneck."""
        return [size // 2**k for k in range(self.depth + 1)]


class Stack(nn.Module):
    """Hourglass plus feature layer and prediction head for one task."""

    def __init__(self, features: int, depth: int, out_channels: int, last: bool):
        super().__init__()
        self.hourglass = Hourglass(depth, features)
        self.res = Residual(features, features)
        self.lin = conv(features, features, 1)
        self.lin_bn = nn.BatchNorm2d(features)
        self.head = conv(features, out_channels, 1, gain=HEAD_GAIN)
        if last:
            self.remap_feat = None
            self.remap_pred = None
        else:
            self.remap_feat = conv(features, features, 1)
            self.remap_pred = conv(out_channels, features, 1)

    def features(self, x):
        y = self.res(self.hourglass(x))
        return F.relu(self.lin_bn(self.lin(y)))

    def next_input(self, x, feat, pred):
        return x + self.remap_feat(feat) + self.remap_pred(pred)


class Fusion(nn.Module):
    """Per-stream projection of the concatenated stream features back to ``F`` channels."""

    def __init__(self, n_streams: int, features: int):
        super().__init__()
        joint = n_streams * features
        self.mix = Residual(joint, joint)
        self.compress = Residual(joint, features)

    def forward(self, joint):
        return self.compress(self.mix(joint))


def fuse(stream_features: list[torch.Tensor], blocks) -> list[torch.Tensor]:
    """Concatenate stream features along channels and apply each stream's fusion block."""
    if len(stream_features) < 2:
        raise ValueError("fusion needs at least two streams")
    shape = stream_features[0].shape
    if any(f.shape != shape for f in stream_features):
        raise ValueError("all stream features must share one shape")
    if len(blocks) != len(stream_features):
        raise ValueError("one fusion block per stream is required")
    joint = torch.cat(stream_features, dim=1)
    return [block(joint) for block in blocks]


class StackedHourglass(nn.Module):
    """Plain single-task stacked hourglass, built in the same order as a one-stream model."""

    def __init__(self, config: HourglassConfig, out_channels: int):
        super().__init__()
        self.config = config
        self.stem = Stem(config.features)
        self.stacks = nn.ModuleList(
            Stack(config.features, config.depth, out_channels, last=(k == config.num_stacks - 1))
            for k in range(config.num_stacks)
        )

    def forward(self, images):
        x = self.stem(images)
        preds = []
        for stack in self.stacks:
            feat = stack.features(x)
            pred = stack.head(feat)
            preds.append(pred)
            if stack.remap_feat is not None:
                x = stack.next_input(x, feat, pred)
        return preds


class MultiTaskModel(nn.Module):
    def __init__(self, tasks: TaskSet, config: HourglassConfig):
        super().__init__()
        if not isinstance(tasks, TaskSet):
            raise TypeError("tasks must be a TaskSet")
        self.tasks = tasks
        self.config = config
        s = config.num_stacks
        self.stem = Stem(config.features)
        self.stream = nn.ModuleDict()
        for task in tasks:
            c = config.channels(task)
            self.stream[task.token] = nn.ModuleDict(
                {
                    f"stack{k + 1}": Stack(config.features, config.depth, c, last=(k == s - 1))
                    for k in range(s)
                }
            )
        self.fusion = nn.ModuleDict()
        if len(tasks) >= 2:
            for k in range(s - 1):
                self.fusion[f"fusion{k + 1}"] = nn.ModuleDict(
                    {task.token: Fusion(len(tasks), config.features) for task in tasks}
                )

    @property
    def num_fusion_blocks(self) -> int:
        return len(self.fusion)

    def forward(self, images) -> list[dict[TaskKind, torch.Tensor]]:
        """Predictions per stack, each a ``{task: (N, C_t, R, R)}`` mapping."""
        cfg = self.config
        if images.shape[-1] != cfg.input_resolution or images.shape[-2] != cfg.input_resolution:
            raise ValueError(
                f"expected {cfg.input_resolution}x{cfg.input_resolution} input, got {tuple(images.shape[-2:])}"
            )
        if not torch.isfinite(images).all():
            raise ValueError("non-finite input")
        shared = self.stem(images)
        xs = {t: shared for t in self.tasks}
        outputs = []
        for k in range(cfg.num_stacks):
            key = f"stack{k + 1}"
            feats, preds = {}, {}
            for t in self.tasks:
                stack = self.stream[t.token][key]
                feats[t] = stack.features(xs[t])
                preds[t] = stack.head(feats[t])
            outputs.append(preds)
            if k == cfg.num_stacks - 1:
                break
            if len(self.tasks) >= 2:
                blocks = self.fusion[f"fusion{k + 1}"]
                fused = fuse([feats[t] for t in self.tasks], [blocks[t.token] for t in self.tasks])
                feats = dict(zip(self.tasks, fused))
            xs = {t: self.stream[t.token][key].next_input(xs[t], feats[t], preds[t]) for t in self.tasks}
        return outputs

    def stack_parameters(self, task: TaskKind, stack: int):
        return self.stream[task.token][f"stack{stack}"].parameters()


def build_model(tasks: TaskSet, config: HourglassConfig = HourglassConfig()) -> MultiTaskModel:
    return MultiTaskModel(tasks, config)


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def checkpoint_name(torch_name: str) -> str:
    """Map a state-dict key onto ``stream/<task>/stack<k>/<layer>`` style names."""
    head, _, rest = torch_name.partition(".")
    if head == "stream":
        task, stack, layer = rest.split(".", 2)
        return f"stream/{task}/{stack}/{layer}"
    if head == "fusion":
        block, task, layer = rest.split(".", 2)
        return f"{block}/{task}/{layer}"
    return f"{head}/{rest}"


def torch_name(checkpoint_key: str) -> str:
    """Inverse of :func:`checkpoint_name`."""
    head = checkpoint_key.split("/", 1)[0]
    if head.startswith("fusion") and head[len("fusion"):].isdigit():
        return "fusion." + checkpoint_key.replace("/", ".")
    return checkpoint_key.replace("/", ".")


def named_state(model: MultiTaskModel) -> dict[str, torch.Tensor]:
    return {checkpoint_name(k): v.detach().clone() for k, v in model.state_dict().items()}


def load_named_state(model: MultiTaskModel, state: dict[str, torch.Tensor]) -> None:
    model.load_state_dict({torch_name(k): v for k, v in state.items()})


def latent_size(config: HourglassConfig) -> int:
    return config.resolution // 2**config.depth


__all__ = [
    "Fusion",
    "Hourglass",
    "HourglassConfig",
    "MultiTaskModel",
    "Residual",
    "Stack",
    "StackedHourglass",
    "Stem",
    "build_model",
    "checkpoint_name",
    "fuse",
    "latent_size",
    "load_named_state",
    "named_state",
    "parameter_count",
]
