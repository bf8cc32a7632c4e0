"""Procedural articulated figures standing in for rendered humans.

Each figure is a 16-joint kinematic tree posed in 3D, projected through a
pinhole camera and rasterised as 14 capsules (one per body part). Depth along
a capsule is interpolated between its endpoint depths, and overlapping
capsules resolve by z-buffer. The result is 2.5D, not a mesh render, but every
modality is exact and mutually consistent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .vocab import JOINT_INDEX as J, NUM_JOINTS, PART_INDEX as P, CameraIntrinsics, Sample

# Nominal adult proportions in millimetres.
_LENGTHS = {
    "torso": 500.0,
    "neck": 120.0,
    "head": 200.0,
    "shoulder": 180.0,
    "hip": 100.0,
    "upper_arm": 300.0,
    "forearm": 260.0,
    "hand": 90.0,
    "thigh": 440.0,
    "shin": 420.0,
    "foot": 150.0,
}

# part -> (start point, end point, radius mm); "R.Hand tip"/"R.Toe" are extra end effectors.
_LIMBS = (
    ("Head", "Upper Neck", "Head Top", 75.0),
    ("Torso", "Pelvis", "Thorax", 150.0),
    ("Upper R.Arm", "R.Shoulder", "R.Elbow", 50.0),
    ("Lower R.Arm", "R.Elbow", "R.Wrist", 40.0),
    ("R.Hand", "R.Wrist", "R.Hand tip", 35.0),
    ("Upper L.Arm", "L.Shoulder", "L.Elbow", 50.0),
    ("Lower L.Arm", "L.Elbow", "L.Wrist", 40.0),
    ("L.Hand", "L.Wrist", "L.Hand tip", 35.0),
    ("Upper R.Leg", "R.Hip", "R.Knee", 75.0),
    ("Lower R.Leg", "R.Knee", "R.Ankle", 55.0),
    ("R.Feet", "R.Ankle", "R.Toe", 40.0),
    ("Upper L.Leg", "L.Hip", "L.Knee", 75.0),
    ("Lower L.Leg", "L.Knee", "L.Ankle", 55.0),
    ("L.Feet", "L.Ankle", "L.Toe", 40.0),
)

_EXTRA = {"R.Hand tip": 16, "L.Hand tip": 17, "R.Toe": 18, "L.Toe": 19}

# Base RGB per part label (index 0 unused); distinct hues so parts are separable.
_PALETTE = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.95, 0.80, 0.65],
        [0.20, 0.35, 0.80],
        [0.85, 0.20, 0.20],
        [0.95, 0.55, 0.15],
        [0.95, 0.90, 0.20],
        [0.20, 0.75, 0.30],
        [0.15, 0.80, 0.80],
        [0.55, 0.90, 0.55],
        [0.60, 0.25, 0.70],
        [0.90, 0.40, 0.70],
        [0.45, 0.30, 0.15],
        [0.35, 0.55, 0.95],
        [0.75, 0.75, 0.95],
        [0.30, 0.30, 0.30],
    ]
)


@dataclass(frozen=True)
class SyntheticFigureParams:
    seed: int = 0
    size: int = 256
    n_subjects: int = 10
    limb_scale: tuple[float, float] = (0.85, 1.15)
    width_scale: tuple[float, float] = (0.8, 1.2)
    yaw_deg: tuple[float, float] = (-40.0, 40.0)
    lean_deg: tuple[float, float] = (-12.0, 12.0)
    depth_mm: tuple[float, float] = (2500.0, 5000.0)
    intrinsics: CameraIntrinsics | None = None  # None: fit the camera so the figure fills the crop
    margin: float = 0.1
    background: str = "noise"  # noise | flat | gradient
    pixel_noise: float = 0.02
    max_attempts: int = 50

    def __post_init__(self):
        for name in ("limb_scale", "width_scale", "yaw_deg", "lean_deg", "depth_mm"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise ValueError(f"{name} range must satisfy lo < hi, got {(lo, hi)}")
        if self.depth_mm[0] <= 0:
            raise ValueError("figures must lie in front of the camera")
        if self.size < 8:
            raise ValueError("image size too small")
        if not 0 <= self.margin < 0.5:
            raise ValueError("margin must lie in [0, 0.5)")
        if self.background not in ("noise", "flat", "gradient"):
            raise ValueError(f"unknown background mode {self.background!r}")
        if self.n_subjects < 1:
            raise ValueError("need at least one subject")


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def _rot_y(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def _limb_dir(side: float, abduction: float, flexion: float) -> np.ndarray:
    # Hanging straight down is +y; abduction swings sideways, flexion swings towards the camera (-z).
    return np.array(
        [
            side * np.sin(abduction) * np.cos(flexion),
            np.cos(abduction) * np.cos(flexion),
            -np.sin(flexion),
        ]
    )


def _subject(params: SyntheticFigureParams, subject: int):
    rng = np.random.default_rng(np.random.SeedSequence([params.seed, 0, subject]))
    scale = rng.uniform(*params.limb_scale)
    lengths = {k: v * scale * rng.uniform(0.95, 1.05) for k, v in _LENGTHS.items()}
    width = rng.uniform(*params.width_scale)
    tint = rng.uniform(-0.1, 0.1, size=3)
    return lengths, width, tint


def _pose_body(rng, L) -> np.ndarray:
    """20 points (16 joints + hand tips + toes) in a body frame centred on the pelvis."""
    pts = np.zeros((NUM_JOINTS + 4, 3))
    up = np.array([0.0, -1.0, 0.0])
    spine = _rot_z(rng.uniform(-0.15, 0.15)) @ _rot_x(rng.uniform(-0.2, 0.2)) @ up
    pts[J["Pelvis"]] = 0.0
    pts[J["Thorax"]] = spine * L["torso"]
    head_dir = _rot_z(rng.uniform(-0.25, 0.25)) @ _rot_x(rng.uniform(-0.25, 0.25)) @ spine
    pts[J["Upper Neck"]] = pts[J["Thorax"]] + head_dir * L["neck"]
    pts[J["Head Top"]] = pts[J["Upper Neck"]] + head_dir * L["head"]
    across = np.array([1.0, 0.0, 0.0])
    for side, pre in ((-1.0, "R."), (1.0, "L.")):
        sh = pts[J["Thorax"]] + side * across * L["shoulder"]
        pts[J[pre + "Shoulder"]] = sh
        ua = _limb_dir(side, rng.uniform(0.1, 2.4), rng.uniform(-0.9, 0.9))
        pts[J[pre + "Elbow"]] = sh + ua * L["upper_arm"]
        fa = _limb_dir(side, rng.uniform(0.0, 2.8), rng.uniform(-1.2, 1.2))
        pts[J[pre + "Wrist"]] = pts[J[pre + "Elbow"]] + fa * L["forearm"]
        pts[_EXTRA[pre + "Hand tip"]] = pts[J[pre + "Wrist"]] + fa * L["hand"]

        hip = side * across * L["hip"]
        pts[J[pre + "Hip"]] = hip
        thigh_flex = rng.uniform(-0.5, 1.2)
        th = _limb_dir(side, rng.uniform(-0.15, 0.6), thigh_flex)
        pts[J[pre + "Knee"]] = hip + th * L["thigh"]
        sn = _limb_dir(side, rng.uniform(-0.1, 0.3), thigh_flex - rng.uniform(0.0, 1.6))
        pts[J[pre + "Ankle"]] = pts[J[pre + "Knee"]] + sn * L["shin"]
        foot = np.array([side * rng.uniform(0.0, 0.4), 0.35, -1.0])
        pts[_EXTRA[pre + "Toe"]] = pts[J[pre + "Ankle"]] + foot / np.linalg.norm(foot) * L["foot"]
    return pts


def _fit_camera(pts_cam: np.ndarray, size: int, margin: float) -> CameraIntrinsics:
    n = pts_cam[:, :2] / pts_cam[:, 2:3]
    lo, hi = n.min(axis=0), n.max(axis=0)
    extent = max(hi[0] - lo[0], hi[1] - lo[1])
    f = (1.0 - 2.0 * margin) * size / extent
    center = (lo + hi) / 2.0
    return CameraIntrinsics(float(f), float(f), float(size / 2.0 - f * center[0]), float(size / 2.0 - f * center[1]))


def _background(rng, size: int, mode: str) -> np.ndarray:
    if mode == "flat":
        return np.broadcast_to(rng.uniform(0.1, 0.9, size=3), (size, size, 3)).copy()
    if mode == "gradient":
        a, b = rng.uniform(0.1, 0.9, size=(2, 3))
        t = np.linspace(0.0, 1.0, size)[:, None, None]
        return np.broadcast_to(a + (b - a) * t, (size, size, 3)).copy()
    coarse = rng.uniform(0.1, 0.9, size=(8, 8, 3))
    reps = -(-size // 8)
    img = np.kron(coarse, np.ones((reps, reps, 1)))[:size, :size]
    return img


def rasterize(
    uv: np.ndarray,
    z: np.ndarray,
    radii_px: np.ndarray,
    size: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Z-buffered capsule rasteriser over pixel centres.

    ``uv``/``z`` hold the 20 projected points and their depths; returns
    ``(part_mask, depth)`` with ``inf`` depth on background.
    """
    mask = np.zeros((size, size), dtype=np.uint8)
    depth = np.full((size, size), np.inf)
    for k, (part, a, b, _) in enumerate(_LIMBS):
        ia = J.get(a, _EXTRA.get(a))
        ib = J.get(b, _EXTRA.get(b))
        p0, p1 = uv[ia], uv[ib]
        z0, z1 = z[ia], z[ib]
        r = radii_px[k]
        x0 = int(max(np.floor(min(p0[0], p1[0]) - r), 0))
        x1 = int(min(np.ceil(max(p0[0], p1[0]) + r) + 1, size))
        y0 = int(max(np.floor(min(p0[1], p1[1]) - r), 0))
        y1 = int(min(np.ceil(max(p0[1], p1[1]) + r) + 1, size))
        if x0 >= x1 or y0 >= y1:
            continue
        ys, xs = np.mgrid[y0:y1, x0:x1]
        px = xs + 0.5
        py = ys + 0.5
        d = p1 - p0
        dd = float(d @ d)
        if dd > 0:
            t = np.clip(((px - p0[0]) * d[0] + (py - p0[1]) * d[1]) / dd, 0.0, 1.0)
        else:
            t = np.zeros_like(px)
        dist2 = (px - p0[0] - t * d[0]) ** 2 + (py - p0[1] - t * d[1]) ** 2
        zz = z0 + t * (z1 - z0)
        win_d = depth[y0:y1, x0:x1]
        hit = (dist2 <= r * r) & (zz < win_d)
        win_d[hit] = zz[hit]
        mask[y0:y1, x0:x1][hit] = P[part]
    return mask, depth


def _shade(rng, mask, depth, tint, background, noise) -> np.ndarray:
    img = background.astype(np.float64)
    fg = mask > 0
    if fg.any():
        zmin, zmax = depth[fg].min(), depth[fg].max()
        shade = 1.0 - 0.3 * (depth[fg] - zmin) / max(zmax - zmin, 1e-6)
        colors = np.clip(_PALETTE[mask[fg]] + tint, 0.0, 1.0)
        img[fg] = colors * shade[:, None]
    if noise > 0:
        img = img + rng.normal(0.0, noise, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def joint_depth_in_range(joints3d, visible, depth, mask) -> bool:
    fg = mask > 0
    if not fg.any():
        return False
    z = np.asarray(joints3d)[np.asarray(visible, bool), 2]
    d = depth[fg]
    return bool(np.all((z >= d.min()) & (z <= d.max())))


def synthetic_figure(params: SyntheticFigureParams, index: int) -> tuple[Sample, np.ndarray]:
    """Sample ``index`` plus its 20 skeleton points (joints, hand tips, toes) in camera mm."""
    subject = index % params.n_subjects
    L, width, tint = _subject(params, subject)
    rng = np.random.default_rng(np.random.SeedSequence([params.seed, 1, index]))
    size = params.size
    for _ in range(params.max_attempts):
        body = _pose_body(rng, L)
        yaw = np.deg2rad(rng.uniform(*params.yaw_deg))
        lean = np.deg2rad(rng.uniform(*params.lean_deg))
        R = _rot_y(yaw) @ _rot_x(lean)
        offset = np.array(
            [rng.uniform(-100.0, 100.0), rng.uniform(-100.0, 100.0), rng.uniform(*params.depth_mm)]
        )
        pts = body @ R.T + offset
        if np.any(pts[:, 2] <= 0):
            continue
        cam = params.intrinsics or _fit_camera(pts, size, params.margin)
        if not (0 <= cam.cx < size and 0 <= cam.cy < size):
            continue
        uv = cam.project(pts)
        radii = np.array([lim[3] for lim in _LIMBS]) * width
        za = np.array([pts[J.get(a, _EXTRA.get(a)), 2] for _, a, _, _ in _LIMBS])
        zb = np.array([pts[J.get(b, _EXTRA.get(b)), 2] for _, _, b, _ in _LIMBS])
        radii_px = radii * cam.fx / ((za + zb) / 2.0)
        mask, depth = rasterize(uv, pts[:, 2], radii_px, size)
        joints3d = pts[:NUM_JOINTS].copy()
        joints2d = cam.project(joints3d)
        visible = (
            (joints2d[:, 0] >= 0) & (joints2d[:, 0] < size) & (joints2d[:, 1] >= 0) & (joints2d[:, 1] < size)
        )
        # Resample figures whose extreme joints end up hidden behind other limbs.
        if not joint_depth_in_range(joints3d, visible, depth, mask):
            continue
        image = _shade(rng, mask, depth, tint, _background(rng, size, params.background), params.pixel_noise)
        sample = Sample(
            image=image,
            joints2d=joints2d,
            joints3d=joints3d,
            part_mask=mask,
            depth=depth,
            intrinsics=cam,
            visible=visible,
            subject_id=f"s{subject:03d}",
            frame_id=f"{index:06d}",
        )
        return sample, pts
    raise RuntimeError(f"could not generate a consistent figure for index {index} in {params.max_attempts} attempts")


def synthetic_sample(params: SyntheticFigureParams, index: int) -> Sample:
    """Sample ``index`` of the stream defined by ``params``, independent of every other index."""
    return synthetic_figure(params, index)[0]


def limb_points() -> dict[int, tuple[int, int]]:
    """Part label -> indices of its two endpoints in the 20-point skeleton."""
    return {P[part]: (J.get(a, _EXTRA.get(a)), J.get(b, _EXTRA.get(b))) for part, a, b, _ in _LIMBS}


def generate_synthetic(params: SyntheticFigureParams, n: int, start: int = 0) -> list[Sample]:
    if n < 0:
        raise ValueError("n must be non-negative")
    return [synthetic_sample(params, i) for i in range(start, start + n)]

