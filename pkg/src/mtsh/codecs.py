"""Encoders from ground truth to supervision tensors, and decoders back.

All tensors here are numpy arrays laid out ``(R, R, C)`` (row = y, col = x).
Every decoder breaks ties towards the smallest row-major flat index, which
is exactly what ``np.argmax`` does.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .vocab import (
    BACKGROUND,
    NUM_DEPTH_BINS,
    NUM_JOINTS,
    NUM_PARTS,
    CameraIntrinsics,
    Sample,
    TaskKind,
    TaskSet,
)

DEGENERATE_PAD_MM = 1.0


@dataclass(frozen=True)
class HeatmapParams:
    sigma_xy: float = 1.0  # heatmap cells
    sigma_z: float = 1.0  # depth bins

    def __post_init__(self):
        if not (self.sigma_xy > 0 and self.sigma_z > 0):
            raise ValueError("Gaussian widths must be positive")


@dataclass(frozen=True)
class DepthQuantizer:
    """Uniform binning of metric depth; bin ``n_bins`` is background."""

    d_min: float
    d_max: float
    n_bins: int = NUM_DEPTH_BINS

    def __post_init__(self):
        if not np.isfinite(self.d_min) or not np.isfinite(self.d_max):
            raise ValueError("quantizer range must be finite")
        if not self.d_min < self.d_max:
            raise ValueError(f"d_min ({self.d_min}) must be < d_max ({self.d_max})")
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")

    @property
    def background_bin(self) -> int:
        return self.n_bins

    @property
    def bin_width(self) -> float:
        return (self.d_max - self.d_min) / self.n_bins

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.d_min, self.d_max, self.n_bins + 1)

    def quantize(self, depth) -> np.ndarray:
        """Bin index per value; out-of-range values clamp, non-finite ones map to background."""
        d = np.asarray(depth, dtype=np.float64)
        finite = np.isfinite(d)
        safe = np.where(finite, d, self.d_min)
        b = np.floor((safe - self.d_min) / self.bin_width)
        b = np.clip(b, 0, self.n_bins - 1).astype(np.int64)
        return np.where(finite, b, self.n_bins)

    def dequantize(self, bins) -> np.ndarray:
        """Centre of each bin; the background bin decodes to ``inf``."""
        b = np.asarray(bins)
        centers = self.d_min + (b.astype(np.float64) + 0.5) * self.bin_width
        return np.where(b >= self.n_bins, np.inf, centers)

    def to_record(self) -> str:
        return f"d_min={self.d_min!r}\nd_max={self.d_max!r}\nn_bins={self.n_bins}\n"

    @classmethod
    def from_record(cls, text: str) -> "DepthQuantizer":
        fields = {}
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
        try:
            return cls(float(fields["d_min"]), float(fields["d_max"]), int(fields["n_bins"]))
        except KeyError as e:
            raise ValueError(f"quantizer record missing {e.args[0]!r}") from None


def fit_quantizer(values, n_bins: int = NUM_DEPTH_BINS) -> DepthQuantizer:
    v = np.asarray(values, dtype=np.float64).ravel()
    v = v[np.isfinite(v)]
    if v.size == 0:
        raise ValueError("cannot fit a depth quantizer without foreground values")
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        lo, hi = lo - DEGENERATE_PAD_MM, hi + DEGENERATE_PAD_MM
    return DepthQuantizer(lo, hi, n_bins)


def fit_depth_quantizer(depth, part_mask, n_bins: int = NUM_DEPTH_BINS) -> DepthQuantizer:
    """Fit uniform bins to the foreground depth of one sample."""
    fg = np.asarray(part_mask) != BACKGROUND
    if not fg.any():
        raise ValueError("no foreground pixels to fit a depth quantizer")
    return fit_quantizer(np.asarray(depth)[fg], n_bins)


def fit_pose3d_quantizer(depth, part_mask, joints3d, visible=None, n_bins: int = NUM_DEPTH_BINS) -> DepthQuantizer:
    # Range covers both the body surface and the joints, so no joint clamps.
    fg = np.asarray(part_mask) != BACKGROUND
    z = np.asarray(joints3d, dtype=np.float64)[:, 2]
    if visible is not None:
        z = z[np.asarray(visible, dtype=bool)]
    values = np.concatenate([np.asarray(depth, dtype=np.float64)[fg], z])
    return fit_quantizer(values, n_bins)


def _stride(input_resolution: int, resolution: int) -> int:
    if resolution <= 0 or input_resolution % resolution:
        raise ValueError(f"input resolution {input_resolution} not divisible by heatmap resolution {resolution}")
    return input_resolution // resolution


def _one_hot(labels: np.ndarray, n: int) -> np.ndarray:
    return np.eye(n, dtype=np.float32)[labels]


def encode_pose2d(
    joints2d,
    visible=None,
    resolution: int = 64,
    input_resolution: int = 256,
    params: HeatmapParams = HeatmapParams(),
) -> np.ndarray:
    """Peak-normalised Gaussian heatmaps, one channel per joint."""
    s = _stride(input_resolution, resolution)
    joints2d = np.asarray(joints2d, dtype=np.float64)
    n = joints2d.shape[0]
    if visible is None:
        visible = np.ones(n, dtype=bool)
    visible = np.asarray(visible, dtype=bool)
    out = np.zeros((resolution, resolution, n), dtype=np.float32)
    grid = np.arange(resolution, dtype=np.float64)
    for j in range(n):
        if not visible[j]:
            continue
        cx, cy = np.floor(joints2d[j] / s)
        if not (0 <= cx < resolution and 0 <= cy < resolution):
            continue
        gx = np.exp(-((grid - cx) ** 2) / (2 * params.sigma_xy**2))
        gy = np.exp(-((grid - cy) ** 2) / (2 * params.sigma_xy**2))
        out[:, :, j] = np.outer(gy, gx)
    return out


def decode_pose2d(heatmaps, input_resolution: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Argmax per channel -> ``(coords (..., C, 2) in input pixels, confidence (..., C))``."""
    hm = np.asarray(heatmaps)
    r = hm.shape[-3]
    s = _stride(input_resolution, r)
    lead = hm.shape[:-3]
    c = hm.shape[-1]
    flat = hm.reshape(lead + (r * r, c))
    idx = np.argmax(flat, axis=-2)
    conf = np.take_along_axis(flat, idx[..., None, :], axis=-2)[..., 0, :]
    y, x = np.divmod(idx, r)
    coords = np.stack([x * s + s / 2.0, y * s + s / 2.0], axis=-1)
    return coords, conf


def downsample_labels(labels, resolution: int) -> np.ndarray:
    """Nearest-neighbour sampling at the centre pixel of every output cell."""
    labels = np.asarray(labels)
    s = _stride(labels.shape[0], resolution)
    if labels.shape[1] != labels.shape[0]:
        raise ValueError("label map must be square")
    off = s // 2
    return labels[off::s, off::s]


def encode_parts(part_mask, resolution: int = 64, n_parts: int = NUM_PARTS) -> np.ndarray:
    mask = np.asarray(part_mask)
    if mask.size and (mask.min() < 0 or mask.max() >= n_parts):
        raise ValueError(f"part labels must lie in 0..{n_parts - 1}")
    return _one_hot(downsample_labels(mask, resolution).astype(np.int64), n_parts)


def decode_parts(logits) -> np.ndarray:
    return np.argmax(np.asarray(logits), axis=-1)


def depth_bin_map(depth, part_mask, q: DepthQuantizer, resolution: int) -> np.ndarray:
    """Per-cell bin labels at heatmap resolution (background = ``q.n_bins``)."""
    m = downsample_labels(part_mask, resolution)
    d = downsample_labels(depth, resolution)
    return np.where(m != BACKGROUND, q.quantize(d), q.background_bin)


def encode_depth(depth, part_mask, q: DepthQuantizer, resolution: int = 64) -> np.ndarray:
    return _one_hot(depth_bin_map(depth, part_mask, q, resolution), q.n_bins + 1)


def decode_depth(logits, q: DepthQuantizer) -> tuple[np.ndarray, np.ndarray]:
    """Returns ``(depth_mm, background_mask)``; background pixels carry ``inf``."""
    bins = np.argmax(np.asarray(logits), axis=-1)
    background = bins == q.background_bin
    return q.dequantize(bins), background


def encode_pose3d(
    joints3d,
    intrinsics: CameraIntrinsics,
    q: DepthQuantizer,
    visible=None,
    resolution: int = 64,
    input_resolution: int = 256,
    params: HeatmapParams = HeatmapParams(),
) -> np.ndarray:
    """Volumetric heatmaps, channel ``j * n_bins + b`` is z-slice ``b`` of joint ``j``."""
    s = _stride(input_resolution, resolution)
    joints3d = np.asarray(joints3d, dtype=np.float64)
    n = joints3d.shape[0]
    nb = q.n_bins
    if visible is None:
        visible = np.ones(n, dtype=bool)
    visible = np.asarray(visible, dtype=bool)
    out = np.zeros((resolution, resolution, n * nb), dtype=np.float32)
    grid = np.arange(resolution, dtype=np.float64)
    bins = np.arange(nb, dtype=np.float64)
    uv = intrinsics.project(joints3d)
    zb = q.quantize(joints3d[:, 2])
    for j in range(n):
        if not visible[j] or not joints3d[j, 2] > 0:
            continue
        cx, cy = np.floor(uv[j] / s)
        if not (0 <= cx < resolution and 0 <= cy < resolution):
            continue
        gx = np.exp(-((grid - cx) ** 2) / (2 * params.sigma_xy**2))
        gy = np.exp(-((grid - cy) ** 2) / (2 * params.sigma_xy**2))
        gz = np.exp(-((bins - zb[j]) ** 2) / (2 * params.sigma_z**2))
        out[:, :, j * nb : (j + 1) * nb] = gy[:, None, None] * gx[None, :, None] * gz[None, None, :]
    return out


def decode_pose3d(
    volume,
    intrinsics: CameraIntrinsics,
    q: DepthQuantizer,
    input_resolution: int = 256,
) -> np.ndarray:
    """Argmax voxel per joint block, back-projected to camera millimetres."""
    vol = np.asarray(volume)
    r = vol.shape[0]
    s = _stride(input_resolution, r)
    nb = q.n_bins
    if vol.shape[2] % nb:
        raise ValueError(f"channel count {vol.shape[2]} is not a multiple of {nb} bins")
    n = vol.shape[2] // nb
    blocks = vol.reshape(r, r, n, nb).transpose(2, 0, 1, 3).reshape(n, -1)
    idx = np.argmax(blocks, axis=1)
    y, rem = np.divmod(idx, r * nb)
    x, b = np.divmod(rem, nb)
    uv = np.stack([x * s + s / 2.0, y * s + s / 2.0], axis=-1)
    z = q.dequantize(b)
    return intrinsics.backproject(uv, z)


@dataclass
class TargetBundle:
    """Encoded supervision for one sample, keyed by task."""

    targets: dict[TaskKind, np.ndarray] = field(default_factory=dict)
    depth_quantizer: DepthQuantizer | None = None
    pose3d_quantizer: DepthQuantizer | None = None

    def __getitem__(self, task: TaskKind) -> np.ndarray:
        return self.targets[task]

    def __contains__(self, task) -> bool:
        return task in self.targets


def encode_sample(
    sample: Sample,
    tasks: TaskSet,
    resolution: int,
    params: HeatmapParams = HeatmapParams(),
    n_bins: int = NUM_DEPTH_BINS,
) -> TargetBundle:
    input_res = sample.width
    bundle = TargetBundle()
    if TaskKind.DEPTH in tasks or TaskKind.POSE3D in tasks:
        bundle.depth_quantizer = fit_depth_quantizer(sample.depth, sample.part_mask, n_bins)
        bundle.pose3d_quantizer = fit_pose3d_quantizer(
            sample.depth, sample.part_mask, sample.joints3d, sample.visible, n_bins
        )
    for task in tasks:
        if task is TaskKind.POSE2D:
            t = encode_pose2d(sample.joints2d, sample.visible, resolution, input_res, params)
        elif task is TaskKind.PARTSEG:
            t = encode_parts(sample.part_mask, resolution)
        elif task is TaskKind.DEPTH:
            t = encode_depth(sample.depth, sample.part_mask, bundle.depth_quantizer, resolution)
        else:
            t = encode_pose3d(
                sample.joints3d,
                sample.intrinsics,
                bundle.pose3d_quantizer,
                sample.visible,
                resolution,
                input_res,
                params,
            )
        bundle.targets[task] = t
    return bundle


__all__ = [
    "DepthQuantizer",
    "HeatmapParams",
    "TargetBundle",
    "decode_depth",
    "decode_parts",
    "decode_pose2d",
    "decode_pose3d",
    "depth_bin_map",
    "downsample_labels",
    "encode_depth",
    "encode_parts",
    "encode_pose2d",
    "encode_pose3d",
    "encode_sample",
    "fit_depth_quantizer",
    "fit_pose3d_quantizer",
    "fit_quantizer",
    "NUM_JOINTS",
]
