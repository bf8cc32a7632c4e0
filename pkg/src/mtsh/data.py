"""Dataset plumbing: the on-disk intermediate format, manifests, splits,
cropping, augmentation and the modal-consistency check.

On-disk layout, one directory per clip::

    <root>/<clip_id>/frame_000000.png          RGB, 8 bit
    <root>/<clip_id>/frame_000000.parts.png    part labels, 8 bit
    <root>/<clip_id>/frame_000000.depth.f32    row-major float32 LE mm, NaN = background
    <root>/<clip_id>/frame_000000.joints.json  joints2d, joints3d, intrinsics, subject_id[, bbox]

Pixel ``(row i, col j)`` covers ``[j, j+1) x [i, i+1)`` in continuous image
coordinates, so its centre is ``(j + 0.5, i + 0.5)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from PIL import Image
from scipy import ndimage

from .vocab import NUM_JOINTS, NUM_PARTS, CameraIntrinsics, Sample, in_frame

CROP_MARGIN = 0.1
MANIFEST_NAME = "manifest.txt"


class DatasetError(Exception):
    pass


# ---------------------------------------------------------------- manifests


@dataclass(frozen=True)
class ManifestRecord:
    subject_id: str
    clip_id: str
    frame_path: str
    split: str = "train"


@dataclass
class DatasetManifest:
    source: str  # "surreal-format" or "synthetic"
    records: list[ManifestRecord] = field(default_factory=list)
    seed: int | None = None

    @property
    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.records:
            out[r.split] = out.get(r.split, 0) + 1
        return out

    def subjects(self, split: str | None = None) -> list[str]:
        return sorted({r.subject_id for r in self.records if split is None or r.split == split})

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def to_text(self) -> str:
        lines = [f"# source={self.source}" + ("" if self.seed is None else f" seed={self.seed}"),
                 "# subject_id, clip_id, frame_path, split"]
        lines += [f"{r.subject_id}, {r.clip_id}, {r.frame_path}, {r.split}" for r in self.records]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "DatasetManifest":
        source, seed, records = "surreal-format", None, []
        for n, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                for tok in line[1:].split():
                    key, _, val = tok.partition("=")
                    if key == "source":
                        source = val
                    elif key == "seed":
                        seed = int(val)
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 4:
                raise DatasetError(f"manifest line {n}: expected 4 fields, got {len(parts)}")
            records.append(ManifestRecord(*parts))
        return cls(source, records, seed)


def make_splits(manifest: DatasetManifest, seed: int, test_fraction: float = 0.2) -> DatasetManifest:
    """Assign whole subjects to train/test so that no subject straddles both."""
    if not 0.0 <= test_fraction < 1.0:
        raise ValueError("test_fraction must lie in [0, 1)")
    subjects = manifest.subjects()
    rng = np.random.default_rng(seed)
    order = [subjects[i] for i in rng.permutation(len(subjects))]
    n_test = int(round(test_fraction * len(subjects)))
    if test_fraction > 0 and len(subjects) >= 2:
        n_test = min(max(n_test, 1), len(subjects) - 1)
    test = set(order[:n_test])
    records = [replace(r, split="test" if r.subject_id in test else "train") for r in manifest.records]
    return DatasetManifest(manifest.source, records, seed)


def synthetic_manifest(n: int, n_subjects: int) -> DatasetManifest:
    records = [
        ManifestRecord(f"s{i % n_subjects:03d}", f"s{i % n_subjects:03d}", f"synthetic:{i}", "train")
        for i in range(n)
    ]
    return DatasetManifest("synthetic", records)


# ---------------------------------------------------------------- geometry


@dataclass(frozen=True)
class Affine:
    """``p_out = A @ p_in + t`` in continuous (x, y) image coordinates."""

    A: np.ndarray
    t: np.ndarray

    @classmethod
    def identity(cls) -> "Affine":
        return cls(np.eye(2), np.zeros(2))

    def apply(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.A.T + self.t

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.A, np.eye(2)) and not np.any(self.t))


def warp(array: np.ndarray, aff: Affine, out_size: tuple[int, int], order: int, cval: float) -> np.ndarray:
    """Resample ``array`` (H, W[, C]) under ``aff``; ``order`` 0 is nearest, 1 bilinear."""
    B = np.linalg.inv(aff.A)
    off_xy = B @ (0.5 - aff.t) - 0.5
    swap = np.array([[0, 1], [1, 0]])
    M = swap @ B @ swap
    offset = swap @ off_xy
    if array.ndim == 2:
        return ndimage.affine_transform(
            array, M, offset=offset, output_shape=out_size, order=order, mode="constant", cval=cval, prefilter=False
        )
    chans = [
        ndimage.affine_transform(
            array[..., c], M, offset=offset, output_shape=out_size, order=order, mode="constant", cval=cval,
            prefilter=False,
        )
        for c in range(array.shape[-1])
    ]
    return np.stack(chans, axis=-1)


def _warp_depth(depth: np.ndarray, aff: Affine, out_size) -> np.ndarray:
    # Nearest resampling with a finite sentinel so inf never enters the interpolator.
    src = np.where(np.isfinite(depth), depth, -1.0)
    out = warp(src, aff, out_size, order=0, cval=-1.0)
    return np.where(out >= 0, out, np.inf)


def transform_sample(sample: Sample, aff: Affine, out_size: int) -> Sample:
    """Apply one affine to every 2D modality; 3D joints keep depth and follow the image plane."""
    shape = (out_size, out_size)
    image = np.clip(warp(sample.image.astype(np.float64), aff, shape, order=1, cval=0.0), 0.0, 1.0)
    mask = warp(sample.part_mask, aff, shape, order=0, cval=0)
    depth = _warp_depth(sample.depth, aff, shape)
    joints2d = aff.apply(sample.joints2d)
    cam = sample.intrinsics
    joints3d = cam.backproject(joints2d, sample.joints3d[:, 2])
    visible = sample.visible & in_frame(joints2d, out_size, out_size)
    return Sample(
        image=image.astype(np.float32),
        joints2d=joints2d,
        joints3d=joints3d,
        part_mask=mask.astype(np.uint8),
        depth=depth,
        intrinsics=cam,
        visible=visible,
        subject_id=sample.subject_id,
        frame_id=sample.frame_id,
    )


def crop_affine(bbox, out_size: int, margin: float = CROP_MARGIN) -> Affine:
    """Square crop centred on ``bbox`` (x0, y0, x1, y1) with ``margin`` padding, resized to ``out_size``."""
    x0, y0, x1, y1 = map(float, bbox)
    side = max(x1 - x0, y1 - y0) * (1.0 + 2.0 * margin)
    if not side > 0:
        raise DatasetError(f"degenerate bounding box {bbox}")
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    k = out_size / side
    origin = np.array([cx - side / 2.0, cy - side / 2.0])
    return Affine(np.eye(2) * k, -k * origin)


def crop_sample(sample: Sample, bbox, out_size: int = 256, margin: float = CROP_MARGIN) -> Sample:
    aff = crop_affine(bbox, out_size, margin)
    k = aff.A[0, 0]
    cam = sample.intrinsics
    new_cam = CameraIntrinsics(cam.fx * k, cam.fy * k, cam.cx * k + aff.t[0], cam.cy * k + aff.t[1])
    shape = (out_size, out_size)
    joints2d = aff.apply(sample.joints2d)
    return Sample(
        image=np.clip(warp(sample.image.astype(np.float64), aff, shape, order=1, cval=0.0), 0, 1).astype(np.float32),
        joints2d=joints2d,
        joints3d=sample.joints3d.copy(),
        part_mask=warp(sample.part_mask, aff, shape, order=0, cval=0).astype(np.uint8),
        depth=_warp_depth(sample.depth, aff, shape),
        intrinsics=new_cam,
        visible=sample.visible & in_frame(joints2d, out_size, out_size),
        subject_id=sample.subject_id,
        frame_id=sample.frame_id,
    )


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentParams:
    scale: tuple[float, float] = (0.75, 1.25)
    rotation_deg: tuple[float, float] = (-30.0, 30.0)
    color_jitter: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not self.scale[0] <= 1.0 <= self.scale[1]:
            raise ValueError("scale range must contain 1")
        if not self.rotation_deg[0] <= 0.0 <= self.rotation_deg[1]:
            raise ValueError("rotation range must contain 0")
        if not 0.0 <= self.color_jitter < 1.0:
            raise ValueError("color jitter must lie in [0, 1)")

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentParams":
        return cls((1.0, 1.0), (0.0, 0.0), 0.0, seed)


def augment_affine(size: int, scale: float, angle_deg: float) -> Affine:
    """Rotation about the crop centre composed with isotropic scaling."""
    a = math.radians(angle_deg)
    R = np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]]) * scale
    c = np.array([size / 2.0, size / 2.0])
    return Affine(R, c - R @ c)


def augment(sample: Sample, params: AugmentParams) -> Sample:
    rng = np.random.default_rng(params.seed)
    scale = rng.uniform(*params.scale)
    angle = rng.uniform(*params.rotation_deg)
    gains = rng.uniform(1.0 - params.color_jitter, 1.0 + params.color_jitter, size=3)
    if scale == 1.0 and angle == 0.0:
        out = sample.copy()
    else:
        out = transform_sample(sample, augment_affine(sample.width, scale, angle), sample.width)
    if params.color_jitter > 0:
        out.image = np.clip(out.image * gains, 0.0, 1.0).astype(np.float32)
    return out


# ---------------------------------------------------------------- on-disk format


def _frame_stem(frame_path: str) -> str:
    return frame_path[:-4] if frame_path.endswith(".png") else frame_path


def save_sample(sample: Sample, root: Path, clip_id: str, frame: int, bbox=None) -> str:
    clip = Path(root) / clip_id
    clip.mkdir(parents=True, exist_ok=True)
    stem = f"frame_{frame:06d}"
    img = np.round(np.clip(sample.image, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(img).save(clip / f"{stem}.png")
    Image.fromarray(sample.part_mask.astype(np.uint8)).save(clip / f"{stem}.parts.png")
    depth = np.where(np.isfinite(sample.depth), sample.depth, np.nan).astype("<f4")
    (clip / f"{stem}.depth.f32").write_bytes(depth.tobytes(order="C"))
    meta = {
        "joints2d": np.asarray(sample.joints2d, float).tolist(),
        "joints3d": np.asarray(sample.joints3d, float).tolist(),
        "visible": np.asarray(sample.visible, bool).tolist(),
        "intrinsics": sample.intrinsics.as_dict(),
        "subject_id": sample.subject_id,
    }
    if bbox is not None:
        meta["bbox"] = [float(v) for v in bbox]
    (clip / f"{stem}.joints.json").write_text(json.dumps(meta, indent=1))
    return f"{clip_id}/{stem}"


def write_dataset(samples: Iterable[Sample], root, clip_size: int = 100, seed: int | None = None) -> DatasetManifest:
    """Write samples in the intermediate format; clips group frames of one subject."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    counters: dict[str, int] = {}
    for s in samples:
        n = counters.get(s.subject_id, 0)
        counters[s.subject_id] = n + 1
        clip_id = f"{s.subject_id}_c{n // clip_size:03d}"
        path = save_sample(s, root, clip_id, n % clip_size)
        records.append(ManifestRecord(s.subject_id, clip_id, path, "train"))
    manifest = DatasetManifest("surreal-format", records, seed)
    (root / MANIFEST_NAME).write_text(manifest.to_text())
    return manifest


def read_manifest(root) -> DatasetManifest:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise DatasetError(f"no {MANIFEST_NAME} in {root}")
    return DatasetManifest.from_text(path.read_text())


def load_record(root, record: ManifestRecord) -> tuple[Sample, list | None]:
    """Read one raw (uncropped) frame and its optional bounding box."""
    stem = Path(root) / _frame_stem(record.frame_path)
    files = {
        "rgb": stem.with_name(stem.name + ".png"),
        "parts": stem.with_name(stem.name + ".parts.png"),
        "depth": stem.with_name(stem.name + ".depth.f32"),
        "joints": stem.with_name(stem.name + ".joints.json"),
    }
    for modality, f in files.items():
        if not f.exists():
            raise DatasetError(f"record {record.frame_path}: missing {modality} file {f.name}")
    try:
        image = np.asarray(Image.open(files["rgb"]).convert("RGB"), dtype=np.float32) / 255.0
        parts = np.asarray(Image.open(files["parts"]), dtype=np.uint8)
        meta = json.loads(files["joints"].read_text())
    except (OSError, ValueError) as e:
        raise DatasetError(f"record {record.frame_path}: corrupt file ({e})") from e
    h, w = parts.shape[:2]
    raw = files["depth"].read_bytes()
    if len(raw) != 4 * h * w or image.shape[:2] != (h, w):
        raise DatasetError(f"record {record.frame_path}: corrupt depth or size mismatch")
    depth = np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float64)
    depth = np.where(np.isnan(depth), np.inf, depth)
    if "intrinsics" not in meta:
        raise DatasetError(f"record {record.frame_path}: intrinsics absent")
    try:
        cam = CameraIntrinsics(**{k: float(meta["intrinsics"][k]) for k in ("fx", "fy", "cx", "cy")})
        j2 = np.asarray(meta["joints2d"], dtype=np.float64).reshape(NUM_JOINTS, 2)
        j3 = np.asarray(meta["joints3d"], dtype=np.float64).reshape(NUM_JOINTS, 3)
    except (KeyError, ValueError, TypeError) as e:
        raise DatasetError(f"record {record.frame_path}: corrupt joints record ({e})") from e
    if parts.max(initial=0) >= NUM_PARTS:
        raise DatasetError(f"record {record.frame_path}: part label out of range")
    vis = np.asarray(meta.get("visible", [True] * NUM_JOINTS), dtype=bool) & in_frame(j2, w, h)
    sample = Sample(
        image=image,
        joints2d=j2,
        joints3d=j3,
        part_mask=parts,
        depth=depth,
        intrinsics=cam,
        visible=vis,
        subject_id=str(meta.get("subject_id", record.subject_id)),
        frame_id=record.frame_path,
    )
    return sample, meta.get("bbox")


def load_surreal_format(
    root, manifest: DatasetManifest | None = None, out_size: int = 256, split: str | None = None
) -> Iterator[Sample]:
    """Yield cropped, resized samples in manifest order.

    Without a stored bounding box the crop is fitted to the visible 2D joints.
    """
    if manifest is None:
        manifest = read_manifest(root)
    for rec in manifest.records:
        if split is not None and rec.split != split:
            continue
        sample, bbox = load_record(root, rec)
        if bbox is None:
            pts = sample.joints2d[sample.visible] if sample.visible.any() else sample.joints2d
            bbox = [*pts.min(axis=0), *pts.max(axis=0)]
        yield crop_sample(sample, bbox, out_size)


# ---------------------------------------------------------------- validation


def validate_sample(sample: Sample, tol_px: float = 0.5, tol_mm: float = 0.01) -> list[str]:
    """Modal-consistency violations of one sample (empty list means consistent).

    ``tol_mm`` absorbs float32 rounding of stored depth maps.
    """
    out = []
    fg = sample.part_mask != 0
    finite = np.isfinite(sample.depth)
    if not np.array_equal(fg, finite):
        out.append(f"{sample.frame_id}: {int((fg != finite).sum())} pixels where mask and depth disagree")
    vis = np.asarray(sample.visible, bool)
    if np.any(vis & ~in_frame(sample.joints2d, sample.width, sample.height)):
        out.append(f"{sample.frame_id}: visible joint outside the frame")
    proj = sample.intrinsics.project(sample.joints3d)
    err = np.linalg.norm(proj - sample.joints2d, axis=-1)
    bad = np.flatnonzero(vis & ~(err <= tol_px))
    if bad.size:
        out.append(f"{sample.frame_id}: joints {bad.tolist()} off their 3D projection by > {tol_px}px")
    if fg.any():
        d = sample.depth[fg]
        z = sample.joints3d[:, 2]
        bad = np.flatnonzero(vis & ~((z >= d.min() - tol_mm) & (z <= d.max() + tol_mm)))
        if bad.size:
            out.append(f"{sample.frame_id}: joints {bad.tolist()} outside foreground depth range")
    elif vis.any():
        out.append(f"{sample.frame_id}: visible joints but no foreground")
    return out


def validate_dataset(samples: Iterable[Sample]) -> tuple[int, list[str]]:
    n, problems = 0, []
    for s in samples:
        n += 1
        problems.extend(validate_sample(s))
    return n, problems
