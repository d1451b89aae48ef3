"""Box parameterizations, pinhole projection, lifting and IoU.

Conventions:
  * World frame is z-up. A box heading rotates its footprint about the
    world z-axis, counter-clockwise seen from above.
  * Box3D.size is (width, length, height); width runs along the box's local
    x-axis, length along its local y-axis.
  * Camera frame is the usual computer-vision one: x right, y down,
    z forward along the optical axis. ``rotation``/``translation`` map world
    points into it: p_cam = R @ p_world + t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import (
    BadDimsError,
    BehindCameraError,
    DegenerateBoxError,
    NoSupportPointsError,
)

# Local corner sign pattern. Indices 0-3 are the bottom face, 4-7 the top face,
# each face counter-clockwise from above starting at (+x, +y).
_CORNER_SIGNS = np.array(
    [
        [1, 1, -1],
        [-1, 1, -1],
        [-1, -1, -1],
        [1, -1, -1],
        [1, 1, 1],
        [-1, 1, 1],
        [-1, -1, 1],
        [1, -1, 1],
    ],
    dtype=np.float64,
)


def normalize_heading(heading: float) -> float:
    """Wrap an angle into [-pi, pi). Values already in range are returned unchanged."""
    if -math.pi <= heading < math.pi:
        return float(heading)
    wrapped = (heading + math.pi) % (2.0 * math.pi) - math.pi
    # fmod rounding can land exactly on +pi
    if wrapped >= math.pi:
        wrapped -= 2.0 * math.pi
    return float(wrapped)


class Point3(NamedTuple):
    x: float
    y: float
    z: float


@dataclass(frozen=True)
class Box2D:
    """Axis-aligned image rectangle in pixels."""

    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        vals = (self.xmin, self.ymin, self.xmax, self.ymax)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"Box2D coordinates must be finite, got {vals}")
        if not self.xmin < self.xmax:
            raise ValueError(f"Box2D requires xmin < xmax, got {self.xmin} >= {self.xmax}")
        if not self.ymin < self.ymax:
            raise ValueError(f"Box2D requires ymin < ymax, got {self.ymin} >= {self.ymax}")

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    @property
    def center(self) -> tuple[float, float]:
        return 0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.xmin, self.ymin, self.xmax, self.ymax)


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box: center, (width, length, height) and heading about z."""

    center: Point3
    size: tuple[float, float, float]
    heading: float = 0.0

    def __post_init__(self):
        center = Point3(*(float(c) for c in self.center))
        size = tuple(float(s) for s in self.size)
        if len(size) != 3:
            raise ValueError(f"Box3D size needs 3 components, got {len(size)}")
        if not all(math.isfinite(v) for v in (*center, *size, self.heading)):
            raise ValueError("Box3D parameters must be finite")
        if not all(s > 0 for s in size):
            raise ValueError(f"Box3D size components must be > 0, got {size}")
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "heading", normalize_heading(float(self.heading)))

    @property
    def volume(self) -> float:
        w, l, h = self.size
        return w * l * h

    @property
    def zmin(self) -> float:
        return self.center.z - 0.5 * self.size[2]

    @property
    def zmax(self) -> float:
        return self.center.z + 0.5 * self.size[2]


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera with world-to-camera extrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    translation: tuple = (0.0, 0.0, 0.0)
    image_width: float = 640.0
    image_height: float = 480.0
    _R: np.ndarray = field(init=False, repr=False, compare=False)
    _t: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy", "image_width", "image_height"):
            object.__setattr__(self, name, float(getattr(self, name)))
        R = np.array(self.rotation, dtype=np.float64)
        t = np.array(self.translation, dtype=np.float64)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise ValueError("camera extrinsics must be finite")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise ValueError("rotation must be orthonormal (R^T R = I within 1e-9)")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be > 0, got fx={self.fx}, fy={self.fy}")
        if not (self.image_width > 0 and self.image_height > 0):
            raise ValueError("image size must be positive")
        object.__setattr__(self, "rotation", tuple(tuple(float(v) for v in row) for row in R))
        object.__setattr__(self, "translation", tuple(float(v) for v in t))
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "_R", R)
        object.__setattr__(self, "_t", t)

    @property
    def R(self) -> np.ndarray:
        return self._R

    @property
    def t(self) -> np.ndarray:
        return self._t

    @classmethod
    def look_at(cls, position, target, fx, fy, cx, cy, image_width, image_height):
        """Camera at ``position`` whose optical axis points at ``target`` (world z is up)."""
        position = np.asarray(position, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - position
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, [0.0, 0.0, 1.0])
        norm = np.linalg.norm(right)
        if norm < 1e-12:
            raise ValueError("look_at direction is parallel to the world up axis")
        right /= norm
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        return cls(fx, fy, cx, cy, rotation=R, translation=-R @ position,
                   image_width=image_width, image_height=image_height)


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


def project_points(cam: CameraModel, pts) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized pinhole projection.

    Args:
      cam: the camera.
      pts: array-like of shape [N, 3], world coordinates.

    Returns:
      (uv, depth): uv has shape [N, 2] and is only meaningful where depth > 0.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    pc = pts @ cam.R.T + cam.t
    depth = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * pc[:, 0] / depth + cam.cx
        v = cam.fy * pc[:, 1] / depth + cam.cy
    return np.stack([u, v], axis=1), depth


def project_point(cam: CameraModel, p) -> tuple[float, float, float]:
    """Project one world point; returns (u, v, depth). Raises BehindCameraError if depth <= 0."""
    pc = cam.R @ np.asarray(p, dtype=np.float64) + cam.t
    depth = float(pc[2])
    if not depth > 0:
        raise BehindCameraError(f"point {tuple(p)} has camera depth {depth}")
    return float(cam.fx * pc[0] / depth + cam.cx), float(cam.fy * pc[1] / depth + cam.cy), depth


def backproject(cam: CameraModel, u: float, v: float, depth: float) -> Point3:
    """Inverse of project_point: the world point at ``depth`` along pixel (u, v)'s ray."""
    pc = np.array([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth])
    return Point3(*(float(c) for c in cam.R.T @ (pc - cam.t)))


def box3d_corners(b: Box3D) -> np.ndarray:
    """The 8 corners of ``b`` as an [8, 3] array, ordered as documented in _CORNER_SIGNS."""
    half = 0.5 * np.asarray(b.size)
    local = _CORNER_SIGNS * half
    c, s = math.cos(b.heading), math.sin(b.heading)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return local @ rot.T + np.asarray(b.center)


def project_box3d(cam: CameraModel, b: Box3D) -> Box2D:
    """Axis-aligned image rectangle covering the visible projected corners of ``b``.

    Corners with depth <= 0 are dropped (not ray-clipped). The rectangle is
    clipped to the image bounds.

    Raises:
      BehindCameraError: fewer than two corners lie in front of the camera.
      DegenerateBoxError: the clipped rectangle has zero area.
    """
    uv, depth = project_points(cam, box3d_corners(b))
    front = depth > 0
    if np.count_nonzero(front) < 2:
        raise BehindCameraError("fewer than 2 box corners in front of the camera")
    uv = uv[front]
    xmin = min(max(float(uv[:, 0].min()), 0.0), cam.image_width)
    xmax = min(max(float(uv[:, 0].max()), 0.0), cam.image_width)
    ymin = min(max(float(uv[:, 1].min()), 0.0), cam.image_height)
    ymax = min(max(float(uv[:, 1].max()), 0.0), cam.image_height)
    if not (xmax > xmin and ymax > ymin):
        raise DegenerateBoxError("projected box has zero area after clipping to the image")
    return Box2D(xmin, ymin, xmax, ymax)


# ---------------------------------------------------------------------------
# IoU
# ---------------------------------------------------------------------------


def iou2d(a: Box2D, b: Box2D) -> float:
    iw = min(a.xmax, b.xmax) - max(a.xmin, b.xmin)
    ih = min(a.ymax, b.ymax) - max(a.ymin, b.ymin)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def bev_polygon(b: Box3D) -> list[tuple[float, float]]:
    """Footprint of ``b`` as 4 (x, y) vertices, counter-clockwise."""
    return [(float(x), float(y)) for x, y, _ in box3d_corners(b)[:4]]


def polygon_area(poly: Sequence[tuple[float, float]]) -> float:
    """Signed shoelace area; positive for counter-clockwise vertex order."""
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * acc


def clip_convex_polygon(subject, clip) -> list[tuple[float, float]]:
    """Sutherland-Hodgman clipping of ``subject`` by convex CCW polygon ``clip``."""
    output = list(subject)
    n = len(clip)
    for i in range(n):
        if not output:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp = output
        output = []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    output.append(_intersect(prev, cur, s_prev, s_cur))
                output.append(cur)
            elif s_prev >= 0:
                output.append(_intersect(prev, cur, s_prev, s_cur))
            prev, s_prev = cur, s_cur
    return output


def _intersect(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def bev_intersection_area(a: Box3D, b: Box3D) -> float:
    return max(polygon_area(clip_convex_polygon(bev_polygon(a), bev_polygon(b))), 0.0)


def iou3d(a: Box3D, b: Box3D) -> float:
    """Heading-aware 3D IoU: exact BEV polygon overlap times vertical overlap."""
    dz = min(a.zmax, b.zmax) - max(a.zmin, b.zmin)
    if dz <= 0:
        return 0.0
    # cheap reject on circumscribed circles
    ra = 0.5 * math.hypot(a.size[0], a.size[1])
    rb = 0.5 * math.hypot(b.size[0], b.size[1])
    if math.hypot(a.center.x - b.center.x, a.center.y - b.center.y) >= ra + rb:
        return 0.0
    inter = bev_intersection_area(a, b) * dz
    if inter <= 0:
        return 0.0
    union = a.volume + b.volume - inter
    return min(inter / union, 1.0)


# ---------------------------------------------------------------------------
# Lifting and encoding
# ---------------------------------------------------------------------------


def lift_box_center(cam: CameraModel, box: Box2D, cloud) -> Point3:
    """Lift a 2D box to 3D: the in-box cloud point of median depth.

    Points are "in-box" when they are in front of the camera and project
    inside the closed rectangle. For an even count the lower median is taken;
    equal depths keep cloud order.

    Raises:
      NoSupportPointsError: no cloud point projects inside ``box``.
    """
    cloud = np.asarray(cloud, dtype=np.float64).reshape(-1, 3)
    if cloud.shape[0] == 0:
        raise NoSupportPointsError("empty point cloud")
    uv, depth = project_points(cam, cloud)
    with np.errstate(invalid="ignore"):
        inside = (
            (depth > 0)
            & (uv[:, 0] >= box.xmin)
            & (uv[:, 0] <= box.xmax)
            & (uv[:, 1] >= box.ymin)
            & (uv[:, 1] <= box.ymax)
        )
    idx = np.flatnonzero(inside)
    if idx.size == 0:
        raise NoSupportPointsError(f"no cloud point projects inside {box.as_tuple()}")
    order = idx[np.argsort(depth[idx], kind="stable")]
    pick = order[(order.size - 1) // 2]
    return Point3(*(float(c) for c in cloud[pick]))


def fourier_encode(p, dims: int) -> np.ndarray:
    """Sinusoidal position encoding.

    Layout is coordinate-major: for x, then y, then z, and frequency bands
    k = 0 .. dims/6 - 1, emit (sin(2**k * c), cos(2**k * c)).
    """
    if dims <= 0 or dims % 6:
        raise BadDimsError(f"dims must be a positive multiple of 6, got {dims}")
    bands = dims // 6
    freqs = 2.0 ** np.arange(bands)
    angles = np.asarray(p, dtype=np.float64).reshape(3, 1) * freqs  # [3, bands]
    out = np.empty((3, bands, 2))
    out[..., 0] = np.sin(angles)
    out[..., 1] = np.cos(angles)
    return out.reshape(dims)


def points_in_box(b: Box3D, pts, margin: float = 0.0) -> np.ndarray:
    """Boolean mask of the points inside ``b`` grown by ``margin`` on every side."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    d = pts - np.asarray(b.center)
    c, s = math.cos(b.heading), math.sin(b.heading)
    lx = c * d[:, 0] + s * d[:, 1]
    ly = -s * d[:, 0] + c * d[:, 1]
    hw, hl, hh = (0.5 * x + margin for x in b.size)
    return (np.abs(lx) <= hw) & (np.abs(ly) <= hl) & (np.abs(d[:, 2]) <= hh)
