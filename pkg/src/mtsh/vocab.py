"""Label vocabularies, task sets and the shared sample type."""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field

import numpy as np

JOINTS: tuple[str, ...] = (
    "R.Ankle",
    "R.Knee",
    "R.Hip",
    "L.Hip",
    "L.Knee",
    "L.Ankle",
    "Pelvis",
    "Thorax",
    "Upper Neck",
    "Head Top",
    "R.Wrist",
    "R.Elbow",
    "R.Shoulder",
    "L.Shoulder",
    "L.Elbow",
    "L.Wrist",
)

PARTS: tuple[str, ...] = (
    "Background",
    "Head",
    "Torso",
    "Upper R.Arm",
    "Lower R.Arm",
    "R.Hand",
    "Upper L.Arm",
    "Lower L.Arm",
    "L.Hand",
    "Upper R.Leg",
    "Lower R.Leg",
    "R.Feet",
    "Upper L.Leg",
    "Lower L.Leg",
    "L.Feet",
)

NUM_JOINTS = len(JOINTS)
NUM_PARTS = len(PARTS)
NUM_DEPTH_BINS = 19
BACKGROUND = 0

JOINT_INDEX = {name: i for i, name in enumerate(JOINTS)}
PART_INDEX = {name: i for i, name in enumerate(PARTS)}

# Joints reported for 3D pose in the reference tables (Pelvis is the root and omitted).
JOINTS_3D_TABLE: tuple[str, ...] = tuple(j for j in JOINTS if j != "Pelvis")


def joint_index(name: str) -> int:
    return JOINT_INDEX[name]


def part_index(name: str) -> int:
    return PART_INDEX[name]


class TaskKind(enum.Enum):
    POSE2D = "2d"
    PARTSEG = "seg"
    DEPTH = "depth"
    POSE3D = "3d"

    @property
    def token(self) -> str:
        return self.value

    @property
    def order(self) -> int:
        return _TASK_ORDER.index(self)


_TASK_ORDER = (TaskKind.POSE2D, TaskKind.PARTSEG, TaskKind.DEPTH, TaskKind.POSE3D)
_TOKENS = {t.token: t for t in _TASK_ORDER}


@dataclass(frozen=True)
class TaskSet:
    """Non-empty set of tasks, always held in canonical order."""

    tasks: tuple[TaskKind, ...]

    def __post_init__(self):
        if not self.tasks:
            raise ValueError("task set must not be empty")
        uniq = sorted(set(self.tasks), key=lambda t: t.order)
        object.__setattr__(self, "tasks", tuple(uniq))

    @classmethod
    def of(cls, *tasks: TaskKind) -> "TaskSet":
        return cls(tuple(tasks))

    def __iter__(self):
        return iter(self.tasks)

    def __len__(self):
        return len(self.tasks)

    def __contains__(self, task) -> bool:
        return task in self.tasks

    def __str__(self) -> str:
        return "+".join(t.token for t in self.tasks)

    @property
    def tokens(self) -> tuple[str, ...]:
        return tuple(t.token for t in self.tasks)

    def sort_key(self) -> tuple:
        return (len(self.tasks), tuple(t.order for t in self.tasks))


def parse_task_set(text: str) -> TaskSet:
    """Parse ``"2d+seg+depth"`` style strings; token order does not matter."""
    tokens = [tok.strip().lower() for tok in text.split("+")]
    tokens = [tok for tok in tokens if tok]
    if not tokens:
        raise ValueError(f"empty task set: {text!r}")
    tasks = []
    for tok in tokens:
        if tok not in _TOKENS:
            raise ValueError(f"unknown task token {tok!r} (expected one of {sorted(_TOKENS)})")
        tasks.append(_TOKENS[tok])
    return TaskSet(tuple(tasks))


def all_task_sets() -> list[TaskSet]:
    out = []
    for k in range(1, len(_TASK_ORDER) + 1):
        for combo in itertools.combinations(_TASK_ORDER, k):
            out.append(TaskSet(combo))
    return out


def output_channels(
    task: TaskKind,
    bins: int = NUM_DEPTH_BINS,
    joints: int = NUM_JOINTS,
    parts: int = NUM_PARTS,
) -> int:
    if task is TaskKind.POSE2D:
        return joints
    if task is TaskKind.PARTSEG:
        return parts
    if task is TaskKind.DEPTH:
        return bins + 1
    if task is TaskKind.POSE3D:
        return bins * joints
    raise ValueError(task)


def output_shape(
    task: TaskKind,
    resolution: int = 64,
    bins: int = NUM_DEPTH_BINS,
    joints: int = NUM_JOINTS,
    parts: int = NUM_PARTS,
) -> tuple[int, int, int]:
    """Target tensor shape (R, R, C) for ``task``."""
    for name, v in (("resolution", resolution), ("bins", bins), ("joints", joints), ("parts", parts)):
        if v <= 0:
            raise ValueError(f"{name} must be positive, got {v}")
    return (resolution, resolution, output_channels(task, bins, joints, parts))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def check_bounds(self, width: int, height: int) -> None:
        if not (0 <= self.cx < width and 0 <= self.cy < height):
            raise ValueError(f"principal point ({self.cx}, {self.cy}) outside {width}x{height} image")

    def project(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        z = points[..., 2]
        u = self.fx * points[..., 0] / z + self.cx
        v = self.fy * points[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1)

    def backproject(self, uv: np.ndarray, z: np.ndarray) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        x = (uv[..., 0] - self.cx) * z / self.fx
        y = (uv[..., 1] - self.cy) * z / self.fy
        return np.stack([x, y, z], axis=-1)

    def as_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy}


@dataclass
class Sample:
    """One annotated human crop.

    ``depth`` holds millimetres on the body and ``inf`` on background.
    ``visible`` flags joints that fall inside the crop.
    """

    image: np.ndarray
    joints2d: np.ndarray
    joints3d: np.ndarray
    part_mask: np.ndarray
    depth: np.ndarray
    intrinsics: CameraIntrinsics
    visible: np.ndarray = field(default=None)
    subject_id: str = "0"
    frame_id: str = "0"

    def __post_init__(self):
        if self.visible is None:
            self.visible = in_frame(self.joints2d, self.width, self.height)

    @property
    def height(self) -> int:
        return self.part_mask.shape[0]

    @property
    def width(self) -> int:
        return self.part_mask.shape[1]

    def copy(self) -> "Sample":
        return Sample(
            image=self.image.copy(),
            joints2d=self.joints2d.copy(),
            joints3d=self.joints3d.copy(),
            part_mask=self.part_mask.copy(),
            depth=self.depth.copy(),
            intrinsics=self.intrinsics,
            visible=self.visible.copy(),
            subject_id=self.subject_id,
            frame_id=self.frame_id,
        )


def in_frame(joints2d: np.ndarray, width: int, height: int) -> np.ndarray:
    j = np.asarray(joints2d)
    return (
        np.isfinite(j).all(axis=-1)
        & (j[..., 0] >= 0)
        & (j[..., 0] < width)
        & (j[..., 1] >= 0)
        & (j[..., 1] < height)
    )
