"""Turning shared 2D instances into 3D object queries.

Each shared instance contributes an appearance term (global average pool of
its cropped features through an MLP) plus a geometry term: the 2D box
corners are lifted to the camera's unit-depth plane and, together with the
camera origin, describe the viewing cone that pins down where the object
can be. Both terms live in the receiver's ego frame. The union with a
learned query table forms the decoder's hybrid query set.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .geometry import (
    CameraModel,
    Pose,
    apply_pose,
    optical_to_local,
    unproject_feature_to_optical,
)
from .scene import Instance2D
from .tensor import Mlp, Tensor, as_tensor, concat


class PosEncoding(Enum):
    NONE = "none"
    LEARNED = "learned"
    CONE = "cone"


@dataclass(frozen=True)
class ConeDescriptor:
    """Two lifted box corners and the camera origin, all in the ego frame."""
    p1: np.ndarray
    p2: np.ndarray
    c: np.ndarray

    def __post_init__(self):
        for name, v in (("p1", self.p1), ("p2", self.p2), ("c", self.c)):
            if np.asarray(v).shape != (3,) or not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be a finite 3-vector")
        if np.array_equal(self.p1, self.p2):
            raise ValueError("cone corners coincide")

    def flat(self) -> np.ndarray:
        return np.concatenate([self.p1, self.p2, self.c])


def cone_descriptor(inst: Instance2D, cam: CameraModel,
                    cam_pose_in_ego: Pose) -> ConeDescriptor:
    """Lift the instance box corners to the z=1 m plane of the camera.

    The top-left and bottom-right feature-map corners are unprojected
    through the inverse intrinsics, mapped to the camera-local frame and
    then into the ego frame; ``c`` is the camera origin itself.
    """
    if not (inst.u_max > inst.u_min or inst.v_max > inst.v_min):
        raise ValueError(f"degenerate instance box "
                         f"({inst.u_min}, {inst.v_min})-({inst.u_max}, {inst.v_max})")
    corners = []
    for u, v in ((inst.u_min, inst.v_min), (inst.u_max, inst.v_max)):
        opt = unproject_feature_to_optical(cam, u, v, depth=1.0)
        corners.append(apply_pose(cam_pose_in_ego, optical_to_local(opt)))
    origin = np.array([cam_pose_in_ego.x, cam_pose_in_ego.y,
                       cam_pose_in_ego.z])
    return ConeDescriptor(p1=corners[0], p2=corners[1], c=origin)


def cone_encode(inst: Instance2D, cam: CameraModel, cam_pose_in_ego: Pose,
                mlp: Mlp) -> Tensor:
    """Embed the cone of an instance; input is the 9-value concatenation."""
    desc = cone_descriptor(inst, cam, cam_pose_in_ego)
    out = mlp(Tensor(desc.flat()[None, :]))
    return out.reshape(out.shape[1])


def ground_anchor(inst: Instance2D, cam: CameraModel,
                  cam_pose_in_ego: Pose) -> tuple[float, float] | None:
    """Ego-frame ground point under an instance, or None for skyward rays.

    The ray through the bottom-edge midpoint of the 2D box grazes the
    object's ground contact, so intersecting it with z = 0 localizes the
    object ahead of any learning. Grazing or climbing rays (the camera
    sees the box above its own horizon) have no usable intersection.
    """
    u_mid = 0.5 * (inst.u_min + inst.u_max)
    opt = unproject_feature_to_optical(cam, u_mid, inst.v_max, depth=1.0)
    p = apply_pose(cam_pose_in_ego, optical_to_local(opt))
    c = np.array([cam_pose_in_ego.x, cam_pose_in_ego.y, cam_pose_in_ego.z])
    d = p - c
    if d[2] >= -1e-9 or c[2] <= 0.0:
        return None
    t = -c[2] / d[2]
    return float(c[0] + t * d[0]), float(c[1] + t * d[1])


def instance_gap_encode(crop: Tensor, mlp: Mlp) -> Tensor:
    """Channel-wise global average pool of a crop, then an MLP projection."""
    crop = as_tensor(crop)
    if crop.ndim != 3:
        raise ValueError(f"crop must be [fC, h, w], got {crop.shape}")
    if crop.shape[1] < 1 or crop.shape[2] < 1:
        raise ValueError("empty crop cannot be pooled")
    pooled = crop.mean(axis=(1, 2))
    out = mlp(pooled.reshape(1, crop.shape[0]))
    return out.reshape(out.shape[1])


@dataclass
class HybridQueries:
    q: Tensor                         # [N_Q, C]
    n_instance: int                   # rows 0..n_instance are instance-derived
    anchors: np.ndarray | None = None  # [N_Q, 2] decoder reference seeds

    def __post_init__(self):
        if self.n_instance > self.q.shape[0]:
            raise ValueError("more instance rows than queries")
        if self.anchors is not None and (
                self.anchors.shape != (self.q.shape[0], 2)):
            raise ValueError("one 2d anchor per query row")


def build_hybrid_queries(encoded: list[tuple[Tensor, float]],
                         learned: Tensor,
                         instance_anchors: list | None = None,
                         learned_anchors: np.ndarray | None = None
                         ) -> HybridQueries:
    """Stack instance-derived queries ahead of the learned table.

    ``encoded`` pairs each query vector with the source confidence; if there
    are more instances than query slots the lowest-confidence ones are
    dropped. The unfilled tail keeps the corresponding learned rows. When
    ``learned_anchors`` is given, per-row decoder reference seeds are
    assembled the same way; an instance whose anchor is None falls back to
    its learned row's anchor.
    """
    learned = as_tensor(learned)
    n_q, c = learned.shape
    keep = list(range(len(encoded)))
    if len(keep) > n_q:
        keep = sorted(sorted(keep, key=lambda i: encoded[i][1],
                             reverse=True)[:n_q])
    n_i = len(keep)
    if n_i == 0:
        return HybridQueries(q=learned, n_instance=0,
                             anchors=learned_anchors)
    rows = [encoded[i][0].reshape(1, c) for i in keep]
    if n_i < n_q:
        rows.append(learned[n_i:])
    anchors = None
    if learned_anchors is not None:
        anchors = np.array(learned_anchors, dtype=np.float64)
        if instance_anchors is not None:
            for row, i in enumerate(keep):
                if instance_anchors[i] is not None:
                    anchors[row] = instance_anchors[i]
    return HybridQueries(q=concat(rows, axis=0), n_instance=n_i,
                         anchors=anchors)
