"""Colored point-cloud pipeline feeding the policy.

Per-camera clouds are mapped into the robot base frame, concatenated,
spatially cropped, reduced to a fixed size by farthest point sampling, and
normalized (coordinates to [-1, 1] against task-specific spatial limits,
colors to [0, 1]).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyCloud, NotFound
from .kinematics import FrameTransform

N_PCD_DEFAULT = 4096


@dataclass
class CameraCloud:
    """Points (N x 6: x, y, z in m; r, g, b in 0..255) in one camera frame."""

    points: np.ndarray
    camera_frame: str

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 6)
        if np.isnan(self.points[:, :3]).any():
            raise ValueError("camera cloud contains NaN coordinates")
        rgb = self.points[:, 3:]
        if rgb.size and (rgb.min() < 0 or rgb.max() > 255):
            raise ValueError("rgb values must lie in [0, 255]")


@dataclass
class EgoPointCloud:
    """Fused colored cloud in the base frame, with per-camera provenance."""

    points: np.ndarray
    source_counts: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 6)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class SpatialLimits:
    """Per-axis closed crop box [lo, hi] in meters."""

    x: tuple[float, float]
    y: tuple[float, float]
    z: tuple[float, float]

    def __post_init__(self):
        for lo, hi in (self.x, self.y, self.z):
            if not lo < hi:
                raise ValueError("spatial limits need lo < hi per axis")

    def lo(self) -> np.ndarray:
        return np.array([self.x[0], self.y[0], self.z[0]])

    def hi(self) -> np.ndarray:
        return np.array([self.x[1], self.y[1], self.z[1]])

    @staticmethod
    def from_dict(d) -> "SpatialLimits":
        return SpatialLimits(tuple(d["x"]), tuple(d["y"]), tuple(d["z"]))

    def to_dict(self) -> dict:
        return {"x": list(self.x), "y": list(self.y), "z": list(self.z)}


def fuse_clouds(clouds: list[CameraCloud],
                transforms: dict[str, FrameTransform]) -> EgoPointCloud:
    """Map every cloud into the base frame (x -> R x + t) and concatenate."""
    parts = []
    counts = {}
    for cloud in clouds:
        if cloud.camera_frame not in transforms:
            raise NotFound(f"no transform for camera frame {cloud.camera_frame!r}")
        t = transforms[cloud.camera_frame]
        mapped = cloud.points.copy()
        mapped[:, :3] = t.apply(cloud.points[:, :3])
        parts.append(mapped)
        counts[cloud.camera_frame] = counts.get(cloud.camera_frame, 0) + len(mapped)
    pts = np.concatenate(parts, axis=0) if parts else np.zeros((0, 6))
    return EgoPointCloud(pts, counts)


def crop(cloud: EgoPointCloud, limits: SpatialLimits) -> EgoPointCloud:
    """Keep exactly the points inside the closed crop box."""
    xyz = cloud.points[:, :3]
    keep = np.all((xyz >= limits.lo()) & (xyz <= limits.hi()), axis=1)
    if len(cloud) and not keep.any():
        warnings.warn("crop produced an empty cloud", stacklevel=2)
    return EgoPointCloud(cloud.points[keep], dict(cloud.source_counts))


def fps_indices(xyz: np.ndarray, n: int, seed_index: int = 0) -> np.ndarray:
    """Greedy farthest-point selection on xyz; ties broken by lowest index."""
    m = xyz.shape[0]
    if n >= m:
        return np.arange(m)
    chosen = np.empty(n, dtype=int)
    chosen[0] = seed_index
    d = np.linalg.norm(xyz - xyz[seed_index], axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(d))  # argmax returns the first (lowest-index) maximum
        chosen[i] = nxt
        d = np.minimum(d, np.linalg.norm(xyz - xyz[nxt], axis=1))
    return chosen


def fps_downsample(cloud: EgoPointCloud, n: int, seed_index: int = 0) -> EgoPointCloud:
    """Farthest-point downsample to ``n`` points (all points if fewer)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(cloud) == 0:
        return EgoPointCloud(cloud.points.copy(), dict(cloud.source_counts))
    idx = fps_indices(cloud.points[:, :3], n, seed_index)
    return EgoPointCloud(cloud.points[idx], dict(cloud.source_counts))


def normalize_for_policy(cloud: EgoPointCloud, limits: SpatialLimits,
                         n_points: int = N_PCD_DEFAULT,
                         symmetric_division: bool = False) -> np.ndarray:
    """Policy input array: exactly ``n_points`` rows, xyz in [-1, 1], rgb in [0, 1].

    The cloud must already be cropped to ``limits``.  Coordinates map
    affinely so the box becomes [-1, 1] per axis (or, with
    ``symmetric_division``, are divided by max(|lo|, |hi|)).  Undersized
    clouds are padded by repeating points round-robin.
    """
    if len(cloud) == 0:
        raise EmptyCloud("cannot normalize an empty cloud")
    pts = cloud.points
    lo, hi = limits.lo(), limits.hi()
    if (pts[:, :3] < lo - 1e-12).any() or (pts[:, :3] > hi + 1e-12).any():
        raise ValueError("cloud has points outside the spatial limits; crop first")
    if len(cloud) < n_points:
        warnings.warn(
            f"padding cloud of {len(cloud)} points to {n_points} by repetition",
            stacklevel=2)
        idx = np.arange(n_points) % len(cloud)
        pts = pts[idx]
    elif len(cloud) > n_points:
        pts = pts[fps_indices(pts[:, :3], n_points)]
    out = np.empty((n_points, 6))
    if symmetric_division:
        scale = np.maximum(np.abs(lo), np.abs(hi))
        out[:, :3] = pts[:, :3] / scale
    else:
        out[:, :3] = 2.0 * (pts[:, :3] - lo) / (hi - lo) - 1.0
    out[:, 3:] = pts[:, 3:] / 255.0
    assert_policy_cloud(out, n_points)
    return out


def assert_policy_cloud(arr: np.ndarray, n_points: int) -> None:
    """Range/shape contract checked on every policy cloud input."""
    if arr.shape != (n_points, 6):
        raise ValueError(f"policy cloud must be ({n_points}, 6), got {arr.shape}")
    if arr[:, :3].min() < -1.0 - 1e-9 or arr[:, :3].max() > 1.0 + 1e-9:
        raise ValueError("normalized coordinates out of [-1, 1]")
    if arr[:, 3:].min() < 0.0 or arr[:, 3:].max() > 1.0 + 1e-9:
        raise ValueError("normalized colors out of [0, 1]")


# --- snapshot file format: text header then one point per row ----------------

SNAPSHOT_MAGIC = "pointcloud-snapshot"


def save_snapshot(path, cloud: EgoPointCloud) -> None:
    with open(path, "w") as f:
        f.write(f"{SNAPSHOT_MAGIC} 1\n")
        f.write(f"count {len(cloud)}\n")
        f.write("fields x y z r g b\n")
        f.write("units m m m 8bit 8bit 8bit\n")
        if cloud.source_counts:
            pairs = " ".join(f"{k}={v}" for k, v in sorted(cloud.source_counts.items()))
            f.write(f"sources {pairs}\n")
        f.write("data\n")
        for row in cloud.points:
            f.write("%.9g %.9g %.9g %d %d %d\n" % (row[0], row[1], row[2],
                                                   row[3], row[4], row[5]))


def load_snapshot(path) -> EgoPointCloud:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith(SNAPSHOT_MAGIC):
        raise ValueError("not a point-cloud snapshot file")
    count = None
    sources: dict[str, int] = {}
    i = 1
    while i < len(lines) and lines[i] != "data":
        key, _, rest = lines[i].partition(" ")
        if key == "count":
            count = int(rest)
        elif key == "sources":
            sources = {k: int(v) for k, v in (p.split("=") for p in rest.split())}
        i += 1
    rows = [[float(v) for v in ln.split()] for ln in lines[i + 1:] if ln.strip()]
    pts = np.array(rows).reshape(-1, 6)
    if count is not None and len(pts) != count:
        raise ValueError(f"snapshot declares {count} points but has {len(pts)}")
    return EgoPointCloud(pts, sources)
