"""Rigid transforms on the ground plane and the pinhole camera model.

Poses are (x, y, z, yaw): translation plus rotation about +z only. That is
enough for vehicles on a plane and keeps inverses exact. All multi-frame
computations go through ``relative_pose`` (translation differenced before
rotation), so results depend only on relative geometry, not on where the
world origin happens to sit.

Camera convention: a camera pose's local +x is the optical axis, +y left,
+z up. Image coordinates are (u right, v down); optical right = -y_local,
optical down = -z_local.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

NEAR_EPS = 0.1


def normalize_angle(a: float) -> float:
    """Wrap into (-pi, pi]."""
    out = (a + math.pi) % (2.0 * math.pi) - math.pi
    if out == -math.pi:
        out = math.pi
    return out


@dataclass(frozen=True)
class Pose:
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))
        for f in ("x", "y", "z"):
            object.__setattr__(self, f, float(getattr(self, f)))

    @property
    def t(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


def compose(a: Pose, b: Pose) -> Pose:
    """Pose of b's frame seen from a's parent frame (apply b, then a)."""
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return Pose(
        a.x + c * b.x - s * b.y,
        a.y + s * b.x + c * b.y,
        a.z + b.z,
        a.yaw + b.yaw,
    )


def invert(p: Pose) -> Pose:
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    # R(-yaw) @ (-t)
    return Pose(-(c * p.x + s * p.y), -(-s * p.x + c * p.y), -p.z, -p.yaw)


def relative_pose(a: Pose, b: Pose) -> Pose:
    """b expressed in a's frame, differencing translations before rotating.

    Equivalent to compose(invert(a), b) but exact under shared-origin shifts:
    the world offset cancels in (b.t - a.t) before any rounding rotation.
    """
    dx, dy, dz = b.x - a.x, b.y - a.y, b.z - a.z
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return Pose(c * dx + s * dy, -s * dx + c * dy, dz, b.yaw - a.yaw)


def apply_pose(p: Pose, pts: np.ndarray) -> np.ndarray:
    """Map points from p's frame into its parent frame. pts: [..., 3]."""
    pts = np.asarray(pts, dtype=np.float64)
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    out = np.empty_like(pts)
    out[..., 0] = c * pts[..., 0] - s * pts[..., 1] + p.x
    out[..., 1] = s * pts[..., 0] + c * pts[..., 1] + p.y
    out[..., 2] = pts[..., 2] + p.z
    return out


def pose_matrix(p: Pose) -> np.ndarray:
    """Homogeneous 4x4 for oracle checks."""
    c, s = math.cos(p.yaw), math.sin(p.yaw)
    m = np.eye(4)
    m[0, 0], m[0, 1] = c, -s
    m[1, 0], m[1, 1] = s, c
    m[:3, 3] = [p.x, p.y, p.z]
    return m


def apply_pose_noise(p: Pose, sigma_xy: float, sigma_yaw: float,
                     rng: np.random.Generator) -> Pose:
    """Gaussian position/heading perturbation. Draw order is fixed (x, y, yaw)."""
    if sigma_xy < 0.0 or sigma_yaw < 0.0:
        raise ValueError("noise sigmas must be >= 0")
    dx = rng.normal(0.0, sigma_xy) if sigma_xy > 0 else 0.0
    dy = rng.normal(0.0, sigma_xy) if sigma_xy > 0 else 0.0
    dyaw = rng.normal(0.0, sigma_yaw) if sigma_yaw > 0 else 0.0
    if sigma_xy == 0.0 and sigma_yaw == 0.0:
        return p
    return replace(p, x=p.x + dx, y=p.y + dy, yaw=normalize_angle(p.yaw + dyaw))


# ---- camera ----


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    pix_w: int
    pix_h: int
    feat_w: int
    feat_h: int
    pose: Pose = Pose()   # camera in agent frame

    def __post_init__(self):
        if self.pix_w % self.feat_w or self.pix_h % self.feat_h:
            raise ValueError(
                f"feature stride must be integral: {self.pix_w}/{self.feat_w}, "
                f"{self.pix_h}/{self.feat_h}")
        if self.pix_w // self.feat_w != self.pix_h // self.feat_h:
            raise ValueError("horizontal and vertical strides differ")

    @property
    def stride(self) -> int:
        return self.pix_w // self.feat_w


def camera_in_frame(cam: CameraModel, agent_pose: Pose) -> Pose:
    """Camera pose in whatever frame ``agent_pose`` is expressed in."""
    return compose(agent_pose, cam.pose)


def project_points(pts: np.ndarray, cam: CameraModel, agent_pose: Pose,
                   near_eps: float = NEAR_EPS):
    """Project [N, 3] points (in agent_pose's parent frame) into feature coords.

    Returns (uv [N, 2], depth [N], valid [N]). A point is valid when its depth
    along the optical axis exceeds ``near_eps`` and (u, v) lies inside
    [0, feat_w) x [0, feat_h). Coordinates for invalid points are still
    returned (clamped-denominator mirror values) for diagnostics.
    """
    pts = np.asarray(pts, dtype=np.float64)
    cam_pose = camera_in_frame(cam, agent_pose)
    local = apply_pose(invert(cam_pose), pts)
    fwd = local[..., 0]
    right = -local[..., 1]
    down = -local[..., 2]
    safe = np.where(np.abs(fwd) < 1e-12, 1e-12, fwd)
    u = (cam.cx + cam.fx * right / safe) / cam.stride
    v = (cam.cy + cam.fy * down / safe) / cam.stride
    uv = np.stack([u, v], axis=-1)
    valid = (fwd > near_eps) & (u >= 0.0) & (u < cam.feat_w) & (v >= 0.0) & (v < cam.feat_h)
    return uv, fwd, valid


def project_to_view(pt, cam: CameraModel, agent_pose: Pose,
                    near_eps: float = NEAR_EPS):
    """Single-point projection: returns (u, v, valid) in feature-map coords."""
    uv, _, valid = project_points(np.asarray(pt, dtype=np.float64)[None, :],
                                  cam, agent_pose, near_eps)
    return float(uv[0, 0]), float(uv[0, 1]), bool(valid[0])


def unproject_feature_to_optical(cam: CameraModel, u: float, v: float,
                                 depth: float = 1.0) -> np.ndarray:
    """Lift feature coords to the optical-frame plane at ``depth``.

    Returns (right, down, forward); the inverse of the projection above.
    """
    right = (u * cam.stride - cam.cx) / cam.fx * depth
    down = (v * cam.stride - cam.cy) / cam.fy * depth
    return np.array([right, down, depth])


def optical_to_local(opt: np.ndarray) -> np.ndarray:
    """(right, down, forward) -> camera-local (x fwd, y left, z up)."""
    opt = np.asarray(opt, dtype=np.float64)
    return np.stack([opt[..., 2], -opt[..., 0], -opt[..., 1]], axis=-1)


# ---- planar rectangles and convex polygons (shared by scene + eval) ----


def rect_corners(cx: float, cy: float, w: float, l: float, yaw: float) -> np.ndarray:
    """BEV footprint corners, CCW. Length runs along the heading, width across."""
    c, s = math.cos(yaw), math.sin(yaw)
    hx, hy = l / 2.0, w / 2.0
    local = np.array([[hx, hy], [-hx, hy], [-hx, -hy], [hx, -hy]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def polygon_area(poly: np.ndarray) -> float:
    """Shoelace area; positive for CCW winding."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject: np.ndarray, clip: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman: clip ``subject`` by convex CCW polygon ``clip``."""
    out = [tuple(p) for p in subject]
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []
        prev = inp[-1]
        cp = ex * (prev[1] - ay) - ey * (prev[0] - ax)
        for cur in inp:
            cc = ex * (cur[1] - ay) - ey * (cur[0] - ax)
            if (cc >= 0.0) != (cp >= 0.0):
                s = cp / (cp - cc)
                out.append((prev[0] + s * (cur[0] - prev[0]),
                            prev[1] + s * (cur[1] - prev[1])))
            if cc >= 0.0:
                out.append(cur)
            prev, cp = cur, cc
    return np.array(out) if out else np.zeros((0, 2))


def rects_overlap(a: np.ndarray, b: np.ndarray) -> bool:
    """True when two convex CCW quads share interior area."""
    inter = clip_convex(a, b)
    return polygon_area(inter) > 1e-12
