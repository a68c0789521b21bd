"""Rigid transforms and footprint projection.

Odometry poses are carried through the calibration chain

    foot-center -> camera,  base -> foot-center,  lidar -> base,  odom -> lidar

and then pinhole-projected into the image to form sparse prompt points.
Frames follow the OpenCV camera convention (x right, y down, z forward).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

_ORTHO_TOL = 1e-9


def _reorthonormalize(r: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


@dataclass(frozen=True)
class RigidTransform:
    """SE(3) element ``x -> rotation @ x + translation`` (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("rigid transform contains non-finite entries")
        if np.max(np.abs(r.T @ r - np.eye(3))) > _ORTHO_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise ValueError("rotation determinant is not +1")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=float)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_rpy(cls, roll: float, pitch: float, yaw: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        """Rotation ``Rz(yaw) @ Ry(pitch) @ Rx(roll)``, angles in radians."""
        cr, sr = np.cos(roll), np.sin(roll)
        cp, sp = np.cos(pitch), np.sin(pitch)
        cy, sy = np.cos(yaw), np.sin(yaw)
        rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
        ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
        rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
        return cls(rz @ ry @ rx, translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an ``(N, 3)`` (or ``(3,)``) array of points."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return the transform applying ``b`` first, then ``a``."""
    r = a.rotation @ b.rotation
    if np.max(np.abs(r.T @ r - np.eye(3))) > 1e-12:
        r = _reorthonormalize(r)
    t = a.rotation @ b.translation + a.translation
    return RigidTransform(r, t)


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass(frozen=True)
class OdometrySample:
    timestamp: float
    pose: RigidTransform


@dataclass(frozen=True)
class PixelPrompt:
    u: float
    v: float
    source_timestamp: float = 0.0


@dataclass(frozen=True)
class CalibrationChain:
    """Fixed extrinsics mapping a lidar-frame point into the camera frame.

    ``fc_to_cam`` maps foot-center coordinates to camera coordinates,
    ``base_to_fc`` base to foot-center, ``lidar_to_base`` lidar to base.
    """

    fc_to_cam: RigidTransform = field(default_factory=RigidTransform.identity)
    base_to_fc: RigidTransform = field(default_factory=RigidTransform.identity)
    lidar_to_base: RigidTransform = field(default_factory=RigidTransform.identity)

    def lidar_to_cam(self) -> RigidTransform:
        return compose(self.fc_to_cam, compose(self.base_to_fc, self.lidar_to_base))


@dataclass
class ProjectionResult:
    prompts: list[PixelPrompt]
    dropped_behind: int = 0
    dropped_outside: int = 0

    @property
    def dropped(self) -> int:
        return self.dropped_behind + self.dropped_outside


def select_valid_odometry(
    session: Sequence[OdometrySample],
    frame_pose: RigidTransform,
    d_max: float,
    frame_time: float | None = None,
    future_only: bool = True,
) -> list[OdometrySample]:
    """Odometry samples within ``d_max`` meters of the frame pose.

    With ``future_only`` (default) only samples stamped at or after
    ``frame_time`` are kept, since the robot annotates where it is about to
    walk. Input order is preserved.
    """
    if not d_max > 0:
        raise ValueError("d_max must be positive")
    if not session:
        return []
    pos = np.array([s.pose.translation for s in session])
    dist = np.linalg.norm(pos - frame_pose.translation, axis=1)
    keep = dist <= d_max
    if future_only and frame_time is not None:
        keep &= np.array([s.timestamp for s in session]) >= frame_time
    return [s for s, k in zip(session, keep) if k]


def project_footprints(
    points: Iterable[OdometrySample],
    chain: CalibrationChain,
    intrinsics: CameraIntrinsics,
    z_min: float = 0.05,
    odom_to_lidar: RigidTransform | None = None,
) -> ProjectionResult:
    """Project the foot-center origin of each odometry pose into the image.

    Each sample's translation is a point in the odometry frame. It is moved
    into the lidar frame by ``odom_to_lidar`` (the pose of the current frame,
    identity if omitted), then through ``chain`` into the camera frame.
    """
    pts = list(points)
    result = ProjectionResult(prompts=[])
    if not pts:
        return result
    full = chain.lidar_to_cam()
    if odom_to_lidar is not None:
        full = compose(full, odom_to_lidar)
    cam = full.apply(np.array([p.pose.translation for p in pts]))
    for sample, (x, y, z) in zip(pts, cam):
        if z <= z_min:
            result.dropped_behind += 1
            continue
        u = intrinsics.fx * x / z + intrinsics.cx
        v = intrinsics.fy * y / z + intrinsics.cy
        if not (0 <= u < intrinsics.width and 0 <= v < intrinsics.height):
            result.dropped_outside += 1
            continue
        result.prompts.append(PixelPrompt(float(u), float(v), sample.timestamp))
    return result


def load_odometry(path: str | Path) -> list[OdometrySample]:
    """Read ``timestamp r00..r22 tx ty tz`` lines (13 floats per line)."""
    samples = []
    last = -np.inf
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 13:
            raise ValueError(f"{path}:{lineno}: expected 13 fields, got {len(parts)}")
        vals = [float(p) for p in parts]
        if vals[0] <= last:
            raise ValueError(f"{path}:{lineno}: timestamps must be strictly increasing")
        last = vals[0]
        pose = RigidTransform(np.array(vals[1:10]).reshape(3, 3), vals[10:13])
        samples.append(OdometrySample(vals[0], pose))
    return samples


def save_odometry(path: str | Path, samples: Sequence[OdometrySample]) -> None:
    lines = []
    for s in samples:
        vals = [s.timestamp, *s.pose.rotation.ravel(), *s.pose.translation]
        lines.append(" ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")
