"""Pinhole camera model and rigid transforms.

Conventions
-----------
Poses are camera-from-world: ``x_cam = R @ x_world + t`` with ``R`` given as a
unit quaternion ``(qw, qx, qy, qz)``. The camera looks down its +z axis, +x is
image right and +y is image down.

Integer pixel coordinates name pixel *centers*: pixel ``(u, v)`` is column
``u``, row ``v``. Continuous coordinates stay unrounded; :func:`pixel_cell`
maps them to the integer cell whose center is nearest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

from .errors import ParseError

DEFAULT_Z_MIN = 0.05


def quaternion_to_rotation(q: Sequence[float]) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion. Normalizes the input."""
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_to_quaternion(R: np.ndarray) -> Tuple[float, float, float, float]:
    """Inverse of :func:`quaternion_to_rotation`, returned with ``w >= 0``."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = (0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s)
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = ((R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s)
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = ((R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s)
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = ((R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s)
    q = np.array(q)
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return tuple(float(c) for c in q)


@dataclass(frozen=True)
class CameraView:
    """One posed image: intrinsics, camera-from-world pose and image size."""

    view_id: str
    traversal_id: str
    image_path: str
    rotation: Tuple[float, float, float, float]
    translation: Tuple[float, float, float]
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    z_min: float = field(default=DEFAULT_Z_MIN, compare=False)

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if q.shape != (4,) or t.shape != (3,):
            raise ValueError("rotation must be a 4-quaternion and translation a 3-vector")
        norm = float(np.linalg.norm(q))
        if not np.all(np.isfinite(q)) or norm == 0.0:
            raise ValueError(f"view {self.view_id}: invalid quaternion {self.rotation}")
        if not np.all(np.isfinite(t)):
            raise ValueError(f"view {self.view_id}: non-finite translation")
        object.__setattr__(self, "rotation", tuple(float(c) for c in q / norm))
        object.__setattr__(self, "translation", tuple(float(c) for c in t))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"view {self.view_id}: image size must be positive")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"view {self.view_id}: focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(f"view {self.view_id}: principal point outside image")
        if not self.z_min > 0:
            raise ValueError("z_min must be positive")

    @cached_property
    def R(self) -> np.ndarray:
        R = quaternion_to_rotation(self.rotation)
        R.setflags(write=False)
        return R

    @cached_property
    def t(self) -> np.ndarray:
        t = np.array(self.translation)
        t.setflags(write=False)
        return t

    @cached_property
    def center(self) -> np.ndarray:
        c = -self.R.T @ self.t
        c.setflags(write=False)
        return c

    @classmethod
    def from_center(cls, view_id, traversal_id, R, center, fx, fy, cx, cy, width, height,
                    image_path="", **kw) -> "CameraView":
        """Build a view from a camera-from-world rotation and a world camera center."""
        R = np.asarray(R, dtype=np.float64)
        t = -R @ np.asarray(center, dtype=np.float64)
        return cls(view_id, traversal_id, image_path, rotation_to_quaternion(R), tuple(t),
                   fx, fy, cx, cy, width, height, **kw)


def world_to_camera(point, view: CameraView) -> np.ndarray:
    """``R @ x + t``. Accepts a single 3-vector or an (n, 3) array."""
    p = np.asarray(point, dtype=np.float64)
    return p @ view.R.T + view.t


def camera_center(view: CameraView) -> np.ndarray:
    return view.center.copy()


def project(point, view: CameraView) -> Optional[Tuple[np.ndarray, float]]:
    """Project one world point.

    Returns:
        ``(pixel, depth)`` or ``None`` when the point is at or in front of the
        near plane or lands outside ``[0, width) x [0, height)``.
    """
    uv, depth, ok = project_points(np.asarray(point, dtype=np.float64)[None, :], view)
    if not ok[0]:
        return None
    return uv[0], float(depth[0])


def project_points(points: np.ndarray, view: CameraView):
    """Vectorized :func:`project`.

    Returns:
        ``(uv, depth, valid)`` arrays of shapes (n, 2), (n,), (n,). Entries
        where ``valid`` is False carry unspecified values.
    """
    pc = world_to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3), view)
    z = pc[:, 2]
    in_front = z > view.z_min
    safe_z = np.where(in_front, z, 1.0)
    u = view.fx * pc[:, 0] / safe_z + view.cx
    v = view.fy * pc[:, 1] / safe_z + view.cy
    valid = in_front & (u >= 0) & (u < view.width) & (v >= 0) & (v < view.height)
    return np.stack([u, v], axis=1), z, valid


def unproject(pixel, depth, view: CameraView) -> np.ndarray:
    """World point at camera-frame depth ``depth`` behind ``pixel``.

    Vectorizes over (n, 2) pixels with (n,) depths.
    """
    uv = np.asarray(pixel, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(~(d > 0)):
        raise ValueError("depth must be positive")
    x = (uv[..., 0] - view.cx) / view.fx * d
    y = (uv[..., 1] - view.cy) / view.fy * d
    pc = np.stack([x, y, d * np.ones_like(x)], axis=-1)
    # R^T (pc - t)
    return (pc - view.t) @ view.R


def pixel_cell(uv: np.ndarray, width: int, height: int) -> np.ndarray:
    """Integer pixel whose center is nearest to each continuous coordinate.

    ``floor(coord + 0.5)`` clamped to the image, as an (n, 2) int64 array.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    cells = np.floor(uv + 0.5).astype(np.int64)
    cells[:, 0] = np.clip(cells[:, 0], 0, width - 1)
    cells[:, 1] = np.clip(cells[:, 1], 0, height - 1)
    return cells


# -- poses file ---------------------------------------------------------------

POSES_HEADER = (
    "# view_id traversal_id image_path qw qx qy qz tx ty tz fx fy cx cy width height\n"
)


def parse_poses(lines: Iterable[str], source=None) -> list:
    """Parse poses-file lines into CameraViews, keeping file order."""
    views = []
    seen = set()
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) != 16:
            raise ParseError(f"expected 16 fields, got {len(tok)}", lineno, source)
        try:
            nums = [float(x) for x in tok[3:14]]
            w, h = int(tok[14]), int(tok[15])
        except ValueError as exc:
            raise ParseError(str(exc), lineno, source) from None
        if tok[0] in seen:
            raise ParseError(f"duplicate view_id {tok[0]!r}", lineno, source)
        seen.add(tok[0])
        try:
            views.append(CameraView(tok[0], tok[1], tok[2], tuple(nums[0:4]), tuple(nums[4:7]),
                                    nums[7], nums[8], nums[9], nums[10], w, h))
        except ValueError as exc:
            raise ParseError(str(exc), lineno, source) from None
    return views


def read_poses(path) -> list:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        return parse_poses(fh, source=str(path))


def format_pose_line(view: CameraView) -> str:
    fields = [view.view_id, view.traversal_id, view.image_path or "-"]
    fields += [repr(float(c)) for c in view.rotation]
    fields += [repr(float(c)) for c in view.translation]
    fields += [repr(float(c)) for c in (view.fx, view.fy, view.cx, view.cy)]
    fields += [str(view.width), str(view.height)]
    return " ".join(fields) + "\n"


def write_poses(views: Iterable[CameraView], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(POSES_HEADER)
        for view in views:
            fh.write(format_pose_line(view))
