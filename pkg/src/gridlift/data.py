"""Pose datasets: CSV storage, synthetic generation and normalization.

A dataset stores, per sample, 2D pixel joints, root-relative 3D joints in
millimetres (camera axes: x right, y down, z forward) and a pinhole camera
whose ``root_depth`` is the camera-space depth of the root joint.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from gridlift.sgt import SkeletonTopology, h36m_skeleton


class DatasetFormatError(ValueError):
    pass


class TopologyMismatchError(DatasetFormatError):
    """The file's joints do not match the expected skeleton."""


@dataclass(frozen=True)
class CameraModel:
    fx: float = 1145.0
    fy: float = 1145.0
    cx: float = 500.0
    cy: float = 500.0
    image_w: float = 1000.0
    image_h: float = 1000.0
    root_depth: float = 5000.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.root_depth <= 0:
            raise ValueError("root_depth must be positive")

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy, self.image_w, self.image_h, self.root_depth])


CAMERA_FIELDS = ("fx", "fy", "cx", "cy", "image_w", "image_h", "root_depth")


@dataclass
class PoseSample:
    pose2d: np.ndarray
    pose3d: np.ndarray
    camera: CameraModel | None = None


@dataclass
class Dataset:
    topology: SkeletonTopology
    pose2d: np.ndarray  # (N, J, 2) pixels
    pose3d: np.ndarray  # (N, J, 3) mm, root-relative
    cameras: np.ndarray | None = None  # (N, 7) in CAMERA_FIELDS order
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pose2d = np.asarray(self.pose2d, dtype=np.float64)
        self.pose3d = np.asarray(self.pose3d, dtype=np.float64)
        j = self.topology.num_joints
        if self.pose2d.ndim != 3 or self.pose2d.shape[1:] != (j, 2):
            raise ValueError(f"pose2d must be (N, {j}, 2), got {self.pose2d.shape}")
        if self.pose3d.shape != self.pose2d.shape[:2] + (3,):
            raise ValueError(f"pose3d must be (N, {j}, 3), got {self.pose3d.shape}")
        if self.cameras is not None:
            self.cameras = np.asarray(self.cameras, dtype=np.float64)
            if self.cameras.shape != (len(self), len(CAMERA_FIELDS)):
                raise ValueError("cameras must hold one row per sample")
        if not (np.all(np.isfinite(self.pose2d)) and np.all(np.isfinite(self.pose3d))):
            raise ValueError("poses must be finite")

    def __len__(self):
        return self.pose2d.shape[0]

    def __getitem__(self, i) -> PoseSample:
        cam = None if self.cameras is None else CameraModel(*self.cameras[i])
        return PoseSample(self.pose2d[i], self.pose3d[i], cam)

    def camera(self, i) -> CameraModel:
        if self.cameras is None:
            raise ValueError("dataset has no cameras")
        return CameraModel(*self.cameras[i])


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

# Bone vectors (mm) from parent to child in a planar rest pose facing the
# camera: x points to the image right, y points down.
REST_OFFSETS = {
    "right_hip": (-130.0, 0.0, 0.0),
    "right_knee": (0.0, 450.0, 0.0),
    "right_foot": (0.0, 440.0, 0.0),
    "left_hip": (130.0, 0.0, 0.0),
    "left_knee": (0.0, 450.0, 0.0),
    "left_foot": (0.0, 440.0, 0.0),
    "spine": (0.0, -230.0, 0.0),
    "thorax": (0.0, -250.0, 0.0),
    "neck": (0.0, -110.0, 0.0),
    "head": (0.0, -115.0, 0.0),
    "left_shoulder": (150.0, 0.0, 0.0),
    "left_elbow": (280.0, 0.0, 0.0),
    "left_wrist": (250.0, 0.0, 0.0),
    "right_shoulder": (-150.0, 0.0, 0.0),
    "right_elbow": (-280.0, 0.0, 0.0),
    "right_wrist": (-250.0, 0.0, 0.0),
}


def rest_offsets(topology: SkeletonTopology) -> np.ndarray:
    offsets = np.zeros((topology.num_joints, 3))
    for j, name in enumerate(topology.joint_names):
        if j == topology.root_index:
            continue
        if name not in REST_OFFSETS:
            raise ValueError(f"no rest-pose bone for joint {name!r}; synthetic data needs the 17-joint skeleton")
        offsets[j] = REST_OFFSETS[name]
    return offsets


def rotation_matrices(axes: np.ndarray, angles: np.ndarray) -> np.ndarray:
    """Rodrigues rotations for unit ``axes`` (..., 3) and ``angles`` (...)."""
    x, y, z = axes[..., 0], axes[..., 1], axes[..., 2]
    c, s = np.cos(angles), np.sin(angles)
    t = 1.0 - c
    R = np.empty(axes.shape[:-1] + (3, 3))
    R[..., 0, 0] = c + x * x * t
    R[..., 0, 1] = x * y * t - z * s
    R[..., 0, 2] = x * z * t + y * s
    R[..., 1, 0] = y * x * t + z * s
    R[..., 1, 1] = c + y * y * t
    R[..., 1, 2] = y * z * t - x * s
    R[..., 2, 0] = z * x * t - y * s
    R[..., 2, 1] = z * y * t + x * s
    R[..., 2, 2] = c + z * z * t
    return R


def forward_kinematics(topology: SkeletonTopology, offsets: np.ndarray, local_rot: np.ndarray) -> np.ndarray:
    """Joint positions relative to the root given per-joint local rotations (N, J, 3, 3).

    A joint's rotation turns every bone leading to its children, so bones
    sharing a parent (pelvis, shoulder girdle) move rigidly together and
    leaf rotations have no effect.
    """
    parents = topology.parents()
    order = _topological_order(parents)
    n = local_rot.shape[0]
    glob = np.empty_like(local_rot)
    pos = np.zeros((n, topology.num_joints, 3))
    for j in order:
        par = parents[j]
        if par < 0:
            glob[:, j] = local_rot[:, j]
            continue
        glob[:, j] = glob[:, par] @ local_rot[:, j]
        pos[:, j] = pos[:, par] + np.einsum("nab,b->na", glob[:, par], offsets[j])
    return pos


def _topological_order(parents):
    order, remaining = [], set(range(len(parents)))
    while remaining:
        for j in sorted(remaining):
            if parents[j] < 0 or parents[j] in order:
                order.append(j)
                remaining.discard(j)
                break
    return order


def project(points_cam: np.ndarray, cameras: np.ndarray) -> np.ndarray:
    """Pinhole projection of camera-space points (N, J, 3) with per-sample cameras (N, 7)."""
    fx, fy, cx, cy = (cameras[:, i, None] for i in range(4))
    X, Y, Z = points_cam[..., 0], points_cam[..., 1], points_cam[..., 2]
    return np.stack([fx * X / Z + cx, fy * Y / Z + cy], axis=-1)


def synth_generate(n: int, topology: SkeletonTopology | None = None, camera: CameraModel = CameraModel(),
                   rng: np.random.Generator | None = None, max_angle_deg: float = 60.0,
                   root_xy_range: float = 300.0, root_depth_range=(4000.0, 6000.0),
                   seed: int | None = None) -> Dataset:
    """Random articulated poses seen through a pinhole camera.

    Every joint (root included) gets a rotation of up to ``max_angle_deg``
    about a random axis, composed down the kinematic chains. The root is
    placed uniformly in a box in front of the camera.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    topology = topology or h36m_skeleton()
    if rng is None:
        from gridlift.engine import make_rng
        rng = make_rng(0 if seed is None else seed)
    j = topology.num_joints
    offsets = rest_offsets(topology)
    axes = rng.normal(size=(n, j, 3))
    axes /= np.linalg.norm(axes, axis=-1, keepdims=True)
    limit = np.deg2rad(max_angle_deg)
    angles = rng.uniform(-limit, limit, size=(n, j))
    rel = forward_kinematics(topology, offsets, rotation_matrices(axes, angles))
    root = np.stack([
        rng.uniform(-root_xy_range, root_xy_range, n),
        rng.uniform(-root_xy_range, root_xy_range, n),
        rng.uniform(root_depth_range[0], root_depth_range[1], n),
    ], axis=-1)
    cameras = np.tile(camera.as_array(), (n, 1))
    cameras[:, 6] = root[:, 2]
    pose2d = project(rel + root[:, None, :], cameras)
    rel[:, topology.root_index] = 0.0
    return Dataset(topology, pose2d, rel, cameras, {"source": "synthetic", "seed": seed})


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


def _image_size(cameras):
    if cameras is None:
        raise ValueError("normalization needs camera image sizes")
    return cameras[:, None, 4:6]


def normalize_2d(pose2d: np.ndarray, cameras: np.ndarray) -> np.ndarray:
    """Map pixels to [-1, 1] per axis: 0 -> -1, image size -> 1."""
    size = _image_size(cameras)
    return 2.0 * pose2d / size - 1.0


def denormalize_2d(norm2d: np.ndarray, cameras: np.ndarray) -> np.ndarray:
    size = _image_size(cameras)
    return (norm2d + 1.0) * size / 2.0


def normalize_standard(sample: PoseSample) -> PoseSample:
    if sample.camera is None:
        raise ValueError("normalization needs the camera image size")
    cams = sample.camera.as_array()[None]
    return PoseSample(normalize_2d(sample.pose2d[None], cams)[0], sample.pose3d / 1000.0, sample.camera)


def denormalize_standard(sample: PoseSample) -> PoseSample:
    cams = sample.camera.as_array()[None]
    return PoseSample(denormalize_2d(sample.pose2d[None], cams)[0], sample.pose3d * 1000.0, sample.camera)


def uvz_project(pred_uvz: np.ndarray, camera, root_index: int = 0) -> np.ndarray:
    """Back-project (u px, v px, root-relative depth mm) into root-relative camera mm.

    ``pred_uvz`` is (J, 3) with a CameraModel, or (N, J, 3) with an (N, 7)
    camera array.
    """
    single = pred_uvz.ndim == 2
    uvz = pred_uvz[None] if single else pred_uvz
    cams = camera.as_array()[None] if isinstance(camera, CameraModel) else np.asarray(camera)
    fx, fy, cx, cy = (cams[:, i, None] for i in range(4))
    Z = uvz[..., 2] + cams[:, 6, None]
    if np.any(Z <= 0):
        raise ValueError("a joint lies at or behind the camera plane (Z <= 0)")
    X = (uvz[..., 0] - cx) * Z / fx
    Y = (uvz[..., 1] - cy) * Z / fy
    pts = np.stack([X, Y, Z], axis=-1)
    out = pts - pts[:, root_index : root_index + 1]
    return out[0] if single else out


def normalized_arrays(ds: Dataset, mode: str = "standard"):
    """Network inputs (N, J, 2) and targets (N, J, 3) for a normalization mode."""
    X = normalize_2d(ds.pose2d, ds.cameras)
    if mode == "standard":
        Y = ds.pose3d / 1000.0
    elif mode == "uvz":
        Y = np.concatenate([X, ds.pose3d[..., 2:3] / 1000.0], axis=-1)
    else:
        raise ValueError(f"unknown normalization {mode!r}")
    return X, Y


def to_mm_function(ds: Dataset, mode: str = "standard"):
    """Callable mapping normalized predictions for ``ds`` to root-relative mm."""
    if mode == "standard":
        return lambda pred: pred * 1000.0
    cams = ds.cameras
    root = ds.topology.root_index

    def to_mm(pred):
        uv = denormalize_2d(pred[..., :2], cams)
        uvz = np.concatenate([uv, pred[..., 2:3] * 1000.0], axis=-1)
        return uvz_project(uvz, cams, root)

    return to_mm


# ---------------------------------------------------------------------------
# CSV storage
# ---------------------------------------------------------------------------

POSE_HEADER = ["sample_id", "joint_name", "u", "v", "x", "y", "z"]
CAMERA_HEADER = ["sample_id", *CAMERA_FIELDS]


def camera_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".camera.csv")


def _fmt(v) -> str:
    return repr(float(v))


def save_dataset(ds: Dataset, path):
    """Write the pose CSV and, when cameras exist, the ``<stem>.camera.csv`` sidecar."""
    path = Path(path)
    names = ds.topology.joint_names
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for key in ("source", "seed"):
            if ds.meta.get(key) is not None:
                fh.write(f"# {key}={ds.meta[key]}\n")
        w.writerow(POSE_HEADER)
        for i in range(len(ds)):
            for j, name in enumerate(names):
                u, v = ds.pose2d[i, j]
                x, y, z = ds.pose3d[i, j]
                w.writerow([i, name, _fmt(u), _fmt(v), _fmt(x), _fmt(y), _fmt(z)])
    if ds.cameras is not None:
        with open(camera_path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CAMERA_HEADER)
            for i, row in enumerate(ds.cameras):
                w.writerow([i, *(_fmt(v) for v in row)])


def _split_pose_file(path):
    """Return ``(meta, first data line number, data lines)``."""
    lines = Path(path).read_text().split("\n")
    meta = {}
    k = 0
    while k < len(lines) and (not lines[k] or lines[k].startswith("#")):
        if lines[k]:
            key, _, val = lines[k][1:].strip().partition("=")
            meta[key] = val
        k += 1
    if k == len(lines) or lines[k].split(",") != POSE_HEADER:
        raise DatasetFormatError(f"line {k + 1}: expected header {','.join(POSE_HEADER)}")
    body = lines[k + 1 :]
    while body and not body[-1]:
        body.pop()
    return meta, k + 2, body


def _locate_bad_line(body, first_lineno):
    for n, line in enumerate(body):
        parts = line.split(",")
        if len(parts) != len(POSE_HEADER):
            return DatasetFormatError(
                f"line {first_lineno + n}: expected {len(POSE_HEADER)} fields, got {len(parts)}")
        try:
            int(parts[0])
            [float(v) for v in parts[2:]]
        except ValueError:
            return DatasetFormatError(f"line {first_lineno + n}: non-numeric field")
    return DatasetFormatError("malformed pose rows")


def load_dataset(path, topology: SkeletonTopology | None = None) -> Dataset:
    """Read a pose CSV (plus camera sidecar if present) against ``topology``."""
    path = Path(path)
    topology = topology or h36m_skeleton()
    names = topology.joint_names
    j = len(names)
    meta, first, body = _split_pose_file(path)
    if not body:
        raise DatasetFormatError(f"{path}: no samples")
    fields = ",".join(body).split(",")
    if len(fields) != len(POSE_HEADER) * len(body) or "" in body:
        raise _locate_bad_line(body, first)
    try:
        table = np.loadtxt(body, delimiter=",", usecols=(0, 2, 3, 4, 5, 6), dtype=np.float64, ndmin=2)
    except ValueError:
        raise _locate_bad_line(body, first) from None
    ids = table[:, 0]
    if np.any(ids != np.round(ids)):
        raise _locate_bad_line(body, first)
    joint_col = fields[1 :: len(POSE_HEADER)]
    if len(body) % j:
        raise TopologyMismatchError(f"{path}: {len(body)} joint rows is not a multiple of {j} joints")
    if joint_col != list(names) * (len(body) // j):
        k = next(k for k in range(len(body)) if joint_col[k] != names[k % j])
        raise TopologyMismatchError(f"line {first + k}: expected joint {names[k % j]!r}, got {joint_col[k]!r}")
    arr = table[:, 1:].reshape(-1, j, 5)
    sample_ids = ids.astype(np.int64).reshape(-1, j)
    if not np.all(sample_ids == sample_ids[:, :1]):
        raise DatasetFormatError(f"{path}: joint rows of a sample must share one sample_id")
    cameras = None
    cpath = camera_path(path)
    if cpath.exists():
        cameras = _load_cameras(cpath, sample_ids[:, 0])
    if "seed" in meta and meta["seed"] not in ("", "None"):
        meta["seed"] = int(meta["seed"])
    return Dataset(topology, arr[..., :2], arr[..., 2:], cameras, meta)


def _load_cameras(path, sample_ids):
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, rec in enumerate(reader, 1):
            if lineno == 1:
                if rec != CAMERA_HEADER:
                    raise DatasetFormatError(f"{path} line 1: expected header {','.join(CAMERA_HEADER)}")
                continue
            if len(rec) != len(CAMERA_HEADER):
                raise DatasetFormatError(f"{path} line {lineno}: expected {len(CAMERA_HEADER)} fields")
            try:
                rows[int(rec[0])] = [float(v) for v in rec[1:]]
            except ValueError:
                raise DatasetFormatError(f"{path} line {lineno}: non-numeric field") from None
    missing = [int(s) for s in sample_ids if int(s) not in rows]
    if missing:
        raise DatasetFormatError(f"{path}: no camera for sample ids {missing[:5]}")
    return np.array([rows[int(s)] for s in sample_ids])


def subset(ds: Dataset, idx) -> Dataset:
    cams = None if ds.cameras is None else ds.cameras[idx]
    return replace(ds, pose2d=ds.pose2d[idx], pose3d=ds.pose3d[idx], cameras=cams, meta=dict(ds.meta))
