"""Synthetic multi-agent scenes and the camera-view feature renderer.

A scene is a handful of camera-ring agents plus ground-plane boxes in a
shared world frame. Rendering rasterizes each box's projected silhouette
onto the feature lattice with a per-box center-depth z-buffer, paints a
per-object random signature vector into the owned cells, adds pixel noise,
and (at the model boundary) pushes the result through a small learnable
pointwise encoder.

Occlusion is manufactured, not hoped for: a configurable fraction of boxes
is placed behind a taller occluder on the ego line of sight while staying
visible to a designated witness collaborator, and the construction is
verified against the z-buffer before a scene is accepted.

All randomness is keyed by the scene seed through tagged SeedSequences, so
identical seeds reproduce identical scenes, renders, and detector jitter.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .geometry import (
    NEAR_EPS, CameraModel, Pose, normalize_angle, project_points, rect_corners,
    rects_overlap,
)
from .tensor import Mlp, Tensor

TAG_PLACE = 1
TAG_SIGNATURE = 2
TAG_PIXEL_NOISE = 3
TAG_DETECTOR = 4

POS_SNAP = 2.0 ** -20
YAW_SNAP = 2.0 ** -30


class GenerationError(RuntimeError):
    """Scene constraints could not be satisfied within the retry budget."""


def _snap(v: float, grid: float = POS_SNAP) -> float:
    return round(v / grid) * grid


@dataclass
class SceneConfig:
    n_agents: int = 2
    n_cams: int = 4
    n_objects_min: int = 10
    n_objects_max: int = 16
    occluded_fraction: float = 0.5
    range_m: float = 16.0
    feat_c: int = 32
    feat_h: int = 20
    feat_w: int = 32
    stride: int = 10
    focal_px: float = 160.0
    cam_height: float = 1.4
    pixel_noise: float = 0.05
    det_jitter_cells: float = 0.35
    det_conf_jitter: float = 0.05
    missing_view_prob: float = 0.0
    occluded_max_vis: float = 0.12
    witness_min_vis: float = 0.25
    scene_retries: int = 20

    def validate(self) -> None:
        if not (1 <= self.n_agents <= 5):
            raise ValueError(f"n_agents must be in [1, 5], got {self.n_agents}")
        if not (1 <= self.n_objects_min <= self.n_objects_max <= 40):
            raise ValueError("object count range must satisfy 1 <= min <= max <= 40")
        if not (0.0 <= self.occluded_fraction <= 0.5):
            raise ValueError(
                "occluded_fraction must be in [0, 0.5]: each occluded box "
                "consumes a dedicated occluder box")
        if self.range_m <= 4.0:
            raise ValueError("range_m too small to place anything")
        if min(self.feat_c, self.feat_h, self.feat_w, self.stride, self.n_cams) < 1:
            raise ValueError("feature dims, stride and n_cams must be positive")
        if self.pixel_noise < 0 or self.det_jitter_cells < 0 or self.det_conf_jitter < 0:
            raise ValueError("noise magnitudes must be >= 0")
        if not (0.0 <= self.missing_view_prob < 1.0):
            raise ValueError("missing_view_prob must be in [0, 1)")

    @property
    def pix_w(self) -> int:
        return self.feat_w * self.stride

    @property
    def pix_h(self) -> int:
        return self.feat_h * self.stride


@dataclass
class GtBox:
    obj_id: int
    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    yaw: float
    cls: int = 0
    occluded: bool = False

    def corners_bev(self) -> np.ndarray:
        return rect_corners(self.x, self.y, self.w, self.l, self.yaw)

    def corners_3d(self) -> np.ndarray:
        bev = self.corners_bev()
        lo = self.z - self.h / 2.0
        hi = self.z + self.h / 2.0
        out = np.zeros((8, 3))
        out[:4, :2] = bev
        out[4:, :2] = bev
        out[:4, 2] = lo
        out[4:, 2] = hi
        return out


@dataclass
class AgentRig:
    pose: Pose
    cams: tuple[CameraModel, ...]
    view_valid: tuple[bool, ...]


@dataclass
class Scene:
    seed: int
    cfg: SceneConfig
    agents: list[AgentRig]
    boxes: list[GtBox]
    _rasters: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def ego(self) -> AgentRig:
        return self.agents[0]


def make_ring_rig(cfg: SceneConfig, pose: Pose,
                  view_valid: tuple[bool, ...] | None = None) -> AgentRig:
    """Four (or n_cams) outward cameras, evenly spun, colocated at the center."""
    cams = []
    for k in range(cfg.n_cams):
        yaw = normalize_angle(2.0 * math.pi * k / cfg.n_cams)
        cams.append(CameraModel(
            fx=cfg.focal_px, fy=cfg.focal_px,
            cx=cfg.pix_w / 2.0, cy=cfg.pix_h / 2.0,
            pix_w=cfg.pix_w, pix_h=cfg.pix_h,
            feat_w=cfg.feat_w, feat_h=cfg.feat_h,
            pose=Pose(0.0, 0.0, cfg.cam_height, yaw)))
    if view_valid is None:
        view_valid = tuple(True for _ in cams)
    return AgentRig(pose=pose, cams=tuple(cams), view_valid=tuple(view_valid))


def truncate_scene(scene: Scene, n_agents: int) -> Scene:
    """Same world, first ``n_agents`` rigs. Used by the agent-count sweep."""
    if not (1 <= n_agents <= len(scene.agents)):
        raise ValueError(f"cannot truncate to {n_agents} of {len(scene.agents)} agents")
    return Scene(seed=scene.seed, cfg=scene.cfg, agents=scene.agents[:n_agents],
                 boxes=scene.boxes)


# ---- rasterization ----


def convex_hull_2d(pts: np.ndarray) -> np.ndarray:
    """Monotone chain; returns CCW hull, tolerates collinear input."""
    pts = np.unique(np.asarray(pts, dtype=np.float64), axis=0)
    if len(pts) <= 2:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2:
                ox, oy = out[-2]
                ax, ay = out[-1]
                if (ax - ox) * (p[1] - oy) - (ay - oy) * (p[0] - ox) <= 0.0:
                    out.pop()
                else:
                    break
            out.append((p[0], p[1]))
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def _cells_in_hull(hull: np.ndarray, feat_w: int, feat_h: int) -> np.ndarray:
    """Boolean [feat_h, feat_w]: lattice points inside the CCW hull."""
    cover = np.zeros((feat_h, feat_w), dtype=bool)
    if len(hull) < 3:
        return cover
    u0 = max(0, int(math.ceil(hull[:, 0].min() - 1e-9)))
    u1 = min(feat_w - 1, int(math.floor(hull[:, 0].max() + 1e-9)))
    v0 = max(0, int(math.ceil(hull[:, 1].min() - 1e-9)))
    v1 = min(feat_h - 1, int(math.floor(hull[:, 1].max() + 1e-9)))
    if u1 < u0 or v1 < v0:
        return cover
    uu, vv = np.meshgrid(np.arange(u0, u1 + 1), np.arange(v0, v1 + 1))
    inside = np.ones(uu.shape, dtype=bool)
    n = len(hull)
    for i in range(n):
        ax, ay = hull[i]
        bx, by = hull[(i + 1) % n]
        inside &= (bx - ax) * (vv - ay) - (by - ay) * (uu - ax) >= -1e-9
    cover[v0:v1 + 1, u0:u1 + 1] = inside
    return cover


@dataclass
class BoxRaster:
    footprint: int
    visible: int
    bbox: tuple[float, float, float, float]   # (u_min, v_min, u_max, v_max), clipped
    depth: float


@dataclass
class ViewRaster:
    owner: np.ndarray                          # [feat_h, feat_w] box index or -1
    boxes: dict[int, BoxRaster]


def rasterize_view(scene: Scene, agent_idx: int, view_idx: int) -> ViewRaster:
    """Silhouette + center-depth z-buffer raster for one camera view. Cached."""
    key = (agent_idx, view_idx)
    hit = scene._rasters.get(key)
    if hit is not None:
        return hit
    cfg = scene.cfg
    rig = scene.agents[agent_idx]
    cam = rig.cams[view_idx]
    owner = np.full((cfg.feat_h, cfg.feat_w), -1, dtype=np.int16)
    depth_buf = np.full((cfg.feat_h, cfg.feat_w), np.inf)
    boxes: dict[int, BoxRaster] = {}
    if rig.view_valid[view_idx]:
        for bi, box in enumerate(scene.boxes):
            uv, depth, _ = project_points(box.corners_3d(), cam, rig.pose)
            if np.any(depth <= NEAR_EPS):
                continue   # straddles the focal plane; treat as not imaged
            hull = convex_hull_2d(uv)
            cover = _cells_in_hull(hull, cfg.feat_w, cfg.feat_h)
            n_cover = int(cover.sum())
            if n_cover == 0:
                continue
            center = np.array([[box.x, box.y, box.z]])
            _, cdepth, _ = project_points(center, cam, rig.pose)
            d = float(cdepth[0])
            bbox = (float(np.clip(uv[:, 0].min(), 0.0, cfg.feat_w)),
                    float(np.clip(uv[:, 1].min(), 0.0, cfg.feat_h)),
                    float(np.clip(uv[:, 0].max(), 0.0, cfg.feat_w)),
                    float(np.clip(uv[:, 1].max(), 0.0, cfg.feat_h)))
            boxes[box.obj_id] = BoxRaster(footprint=n_cover, visible=0, bbox=bbox, depth=d)
            takes = cover & (d < depth_buf)
            owner[takes] = bi
            depth_buf[takes] = d
        for bi, box in enumerate(scene.boxes):
            if box.obj_id in boxes:
                boxes[box.obj_id].visible = int((owner == bi).sum())
    raster = ViewRaster(owner=owner, boxes=boxes)
    scene._rasters[key] = raster
    return raster


def visible_fraction(scene: Scene, agent_idx: int, view_idx: int, obj_id: int) -> float:
    br = rasterize_view(scene, agent_idx, view_idx).boxes.get(obj_id)
    if br is None or br.footprint == 0:
        return 0.0
    return br.visible / br.footprint


def agent_visibility(scene: Scene, agent_idx: int, obj_id: int) -> float:
    """Visible / footprint cells pooled over the agent's valid views."""
    vis = 0
    foot = 0
    for k in range(len(scene.agents[agent_idx].cams)):
        br = rasterize_view(scene, agent_idx, k).boxes.get(obj_id)
        if br is not None:
            vis += br.visible
            foot += br.footprint
    return vis / foot if foot else 0.0


def ego_visibility(scene: Scene, obj_id: int) -> float:
    return agent_visibility(scene, 0, obj_id)


# ---- rendering ----


def object_signature(seed: int, obj_id: int, feat_c: int) -> np.ndarray:
    """Fixed random code for one object; identical from every view and agent."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, TAG_SIGNATURE, obj_id]))
    return rng.normal(0.0, 1.0, feat_c)


def render_raw(scene: Scene, agent_idx: int, view_idx: int) -> np.ndarray:
    """Pre-encoder signature map [feat_c, feat_h, feat_w]; zeros for invalid views.

    Cached on the scene: the map is a pure function of (scene, agent, view),
    noise included, so repeated training passes pay the raster cost once.
    """
    key = ("raw", agent_idx, view_idx)
    hit = scene._rasters.get(key)
    if hit is not None:
        return hit
    cfg = scene.cfg
    out = np.zeros((cfg.feat_c, cfg.feat_h, cfg.feat_w))
    if not scene.agents[agent_idx].view_valid[view_idx]:
        scene._rasters[key] = out
        return out
    raster = rasterize_view(scene, agent_idx, view_idx)
    lut = np.zeros((len(scene.boxes) + 1, cfg.feat_c))
    for bi, box in enumerate(scene.boxes):
        lut[bi + 1] = object_signature(scene.seed, box.obj_id, cfg.feat_c)
    out = lut[raster.owner + 1].transpose(2, 0, 1).copy()
    if cfg.pixel_noise > 0.0:
        rng = np.random.default_rng(
            np.random.SeedSequence([scene.seed, TAG_PIXEL_NOISE, agent_idx, view_idx]))
        out += rng.normal(0.0, cfg.pixel_noise, out.shape)
    scene._rasters[key] = out
    return out


@dataclass
class ViewFeatures:
    features: Tensor            # [feat_c, feat_h, feat_w], through the encoder
    valid: bool
    agent_id: int
    view_id: int


def render_view_features(scene: Scene, agent_idx: int, view_idx: int,
                         encoder: Mlp) -> ViewFeatures:
    """Raster -> signatures -> pixel noise -> pointwise encoder MLP."""
    cfg = scene.cfg
    valid = bool(scene.agents[agent_idx].view_valid[view_idx])
    raw = render_raw(scene, agent_idx, view_idx)
    cells = Tensor(raw.reshape(cfg.feat_c, cfg.feat_h * cfg.feat_w).T)
    enc = encoder(cells)
    fmap = enc.transpose().reshape(enc.shape[1], cfg.feat_h, cfg.feat_w)
    return ViewFeatures(features=fmap, valid=valid,
                        agent_id=agent_idx, view_id=view_idx)


# ---- instance detection ----


@dataclass
class Instance2D:
    u_min: float
    v_min: float
    u_max: float
    v_max: float
    confidence: float
    obj_id: int
    agent_id: int
    view_id: int


def detect_instances_2d(scene: Scene, agent_idx: int, view_idx: int,
                        mode: str = "train",
                        rng: np.random.Generator | None = None) -> list[Instance2D]:
    """Ground-truth-driven 2-D boxes with visible-area confidence.

    ``train`` returns exact projected boxes; ``infer`` jitters coordinates and
    confidence to mimic an imperfect detector. Objects with zero visible area
    are never reported.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown detector mode {mode!r}")
    cfg = scene.cfg
    if not scene.agents[agent_idx].view_valid[view_idx]:
        return []
    raster = rasterize_view(scene, agent_idx, view_idx)
    if mode == "infer" and rng is None:
        rng = np.random.default_rng(
            np.random.SeedSequence([scene.seed, TAG_DETECTOR, agent_idx, view_idx]))
    out: list[Instance2D] = []
    for box in scene.boxes:
        br = raster.boxes.get(box.obj_id)
        if br is None or br.visible == 0 or br.footprint == 0:
            continue
        conf = br.visible / br.footprint
        u0, v0, u1, v1 = br.bbox
        if mode == "infer":
            j = cfg.det_jitter_cells
            u0, v0, u1, v1 = (c + rng.normal(0.0, j) for c in (u0, v0, u1, v1))
            u0, u1 = sorted((float(np.clip(u0, 0.0, cfg.feat_w)),
                             float(np.clip(u1, 0.0, cfg.feat_w))))
            v0, v1 = sorted((float(np.clip(v0, 0.0, cfg.feat_h)),
                             float(np.clip(v1, 0.0, cfg.feat_h))))
            conf = float(np.clip(conf + rng.normal(0.0, cfg.det_conf_jitter), 0.0, 1.0))
            if u1 - u0 < 1e-6 or v1 - v0 < 1e-6:
                continue
        out.append(Instance2D(u_min=u0, v_min=v0, u_max=u1, v_max=v1,
                              confidence=conf, obj_id=box.obj_id,
                              agent_id=agent_idx, view_id=view_idx))
    return out


# ---- generation ----


CAR_W = (1.7, 2.1)
CAR_L = (3.9, 4.8)
CAR_H = (1.45, 1.75)
TRUCK_W = (2.2, 2.5)
TRUCK_L = (4.2, 6.0)
TRUCK_H = (2.5, 3.2)
AGENT_CLEAR_W = 2.8
AGENT_CLEAR_L = 5.6
CAR_RADIUS_MAX = math.hypot(CAR_W[1], CAR_L[1]) / 2.0


def _sample_box(rng, obj_id, x, y, yaw, kind) -> GtBox:
    w_rng, l_rng, h_rng = (CAR_W, CAR_L, CAR_H) if kind == "car" else (TRUCK_W, TRUCK_L, TRUCK_H)
    w = rng.uniform(*w_rng)
    l = rng.uniform(*l_rng)
    h = rng.uniform(*h_rng)
    return GtBox(obj_id=obj_id, x=_snap(x), y=_snap(y), z=h / 2.0, w=w, l=l, h=h,
                 yaw=_snap(normalize_angle(yaw), YAW_SNAP))


def _bearing_span(origin: np.ndarray, corners: np.ndarray, ref: float):
    rel = np.array([normalize_angle(math.atan2(c[1] - origin[1], c[0] - origin[0]) - ref)
                    for c in corners])
    return rel.min(), rel.max()


def _box_radius(b: GtBox) -> float:
    return math.hypot(b.w, b.l) / 2.0


def _blocks(origin: np.ndarray, blocker: GtBox, target: GtBox,
            min_overlap: float = 0.45) -> bool:
    """Approximate: does ``blocker`` shadow ``target`` seen from ``origin``?"""
    dt = math.hypot(target.x - origin[0], target.y - origin[1])
    db = math.hypot(blocker.x - origin[0], blocker.y - origin[1])
    if db >= dt or db < 1e-9:
        return False
    ref = math.atan2(target.y - origin[1], target.x - origin[0])
    rel_c = normalize_angle(
        math.atan2(blocker.y - origin[1], blocker.x - origin[0]) - ref)
    reach = (math.asin(min(1.0, _box_radius(target) / dt))
             + math.asin(min(1.0, _box_radius(blocker) / db)))
    if abs(rel_c) > reach:
        return False
    t_lo, t_hi = _bearing_span(origin, target.corners_bev(), ref)
    b_lo, b_hi = _bearing_span(origin, blocker.corners_bev(), ref)
    inter = min(t_hi, b_hi) - max(t_lo, b_lo)
    width = t_hi - t_lo
    return width > 0 and inter > min_overlap * width


def _covers_fully(origin: np.ndarray, occ: GtBox, tgt: GtBox, cam_h: float) -> bool:
    """Sufficient condition: occluder hides target from a camera at origin."""
    dt = math.hypot(tgt.x - origin[0], tgt.y - origin[1])
    do = math.hypot(occ.x - origin[0], occ.y - origin[1])
    if do >= dt:
        return False
    ref = math.atan2(tgt.y - origin[1], tgt.x - origin[0])
    t_lo, t_hi = _bearing_span(origin, tgt.corners_bev(), ref)
    o_lo, o_hi = _bearing_span(origin, occ.corners_bev(), ref)
    margin = 0.015
    if not (o_lo <= t_lo - margin and o_hi >= t_hi + margin):
        return False
    # ray over the occluder top must clear the target top
    need = cam_h + (tgt.h - cam_h) * (do / dt)
    return occ.h >= need * 1.05 + 0.05


def generate_scene(cfg: SceneConfig, seed: int) -> Scene:
    """Build a verified scene; raises GenerationError when constraints fail."""
    cfg.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, TAG_PLACE]))
    last_err = "no attempt"
    for _ in range(cfg.scene_retries):
        scene = _try_generate(cfg, seed, rng)
        if isinstance(scene, Scene):
            return scene
        last_err = scene
    raise GenerationError(f"scene {seed}: {last_err} after {cfg.scene_retries} attempts")


def _try_generate(cfg: SceneConfig, seed: int, rng: np.random.Generator):
    # agents: ego near the world center of a randomly offset frame
    ego_pose = Pose(_snap(rng.uniform(-4.0, 4.0)), _snap(rng.uniform(-4.0, 4.0)),
                    0.0, _snap(rng.uniform(-math.pi, math.pi), YAW_SNAP))
    agent_poses = [ego_pose]
    for _ in range(cfg.n_agents - 1):
        for _attempt in range(60):
            d = rng.uniform(5.0, 11.0)
            phi = rng.uniform(-math.pi, math.pi)
            pose = Pose(_snap(ego_pose.x + d * math.cos(phi)),
                        _snap(ego_pose.y + d * math.sin(phi)),
                        0.0, _snap(rng.uniform(-math.pi, math.pi), YAW_SNAP))
            rect = rect_corners(pose.x, pose.y, AGENT_CLEAR_W, AGENT_CLEAR_L, pose.yaw)
            if all(not rects_overlap(rect, rect_corners(p.x, p.y, AGENT_CLEAR_W,
                                                        AGENT_CLEAR_L, p.yaw))
                   for p in agent_poses):
                agent_poses.append(pose)
                break
        else:
            return "agent placement failed"

    agents = []
    for i, pose in enumerate(agent_poses):
        valid = tuple(True if i == 0 or cfg.missing_view_prob == 0.0
                      else bool(rng.uniform() >= cfg.missing_view_prob)
                      for _ in range(cfg.n_cams))
        if not any(valid):
            valid = (True,) + valid[1:]
        agents.append(make_ring_rig(cfg, pose, valid))

    ego_xy = np.array([ego_pose.x, ego_pose.y])
    collab_xy = [np.array([p.x, p.y]) for p in agent_poses[1:]]

    n_obj = int(rng.integers(cfg.n_objects_min, cfg.n_objects_max + 1))
    n_occluded = round(cfg.occluded_fraction * n_obj)
    if n_occluded > 0 and cfg.range_m - 1.5 <= 7.2:
        return "range too small for occlusion pairs"
    agent_rects = [rect_corners(p.x, p.y, AGENT_CLEAR_W, AGENT_CLEAR_L, p.yaw)
                   for p in agent_poses]
    agent_radius = math.hypot(AGENT_CLEAR_W, AGENT_CLEAR_L) / 2.0

    boxes: list[GtBox] = []
    protected: list[GtBox] = []
    # per protected target: collaborator indices with an unshadowed sight line
    clear_sets: list[list[int]] = []

    def clashes(box: GtBox) -> bool:
        rect = box.corners_bev()
        r = _box_radius(box)
        for p, arect in zip(agent_poses, agent_rects):
            if math.hypot(box.x - p.x, box.y - p.y) <= r + agent_radius and \
                    rects_overlap(rect, arect):
                return True
        return any(
            math.hypot(box.x - b.x, box.y - b.y) <= r + _box_radius(b)
            and rects_overlap(rect, b.corners_bev())
            for b in boxes)

    def facing_view_ok(c: int, bearing: float) -> bool:
        # ring cameras tile the circle without overlap, so a target is imaged
        # almost entirely by the camera whose sector holds its bearing
        rig = agents[c + 1]
        sector = 2.0 * math.pi / cfg.n_cams
        k = int(round(normalize_angle(bearing - rig.pose.yaw) / sector)) % cfg.n_cams
        return rig.view_valid[k]

    def witness_candidates(tgt: GtBox, extra: list[GtBox]) -> list[int]:
        out = []
        for c, cxy in enumerate(collab_xy):
            bearing = math.atan2(tgt.y - cxy[1], tgt.x - cxy[0])
            if not facing_view_ok(c, bearing):
                continue
            if any(_blocks(cxy, b, tgt) for b in boxes):
                continue
            if any(_blocks(cxy, e, tgt) for e in extra):
                continue
            out.append(c)
        return out

    def shrunk_clear_sets(extra: list[GtBox]):
        # None when some protected target would lose its last witness
        out = []
        for t, cs in zip(protected, clear_sets):
            kept = [c for c in cs
                    if not any(_blocks(collab_xy[c], e, t) for e in extra)]
            if collab_xy and not kept:
                return None
            out.append(kept)
        return out

    next_id = 0
    occluders: list[GtBox] = []
    placed_targets = 0
    for _t in range(n_occluded):
        need = n_occluded - placed_targets
        placed = False
        for _attempt in range(400):
            slots = n_obj - len(boxes)
            can_fresh = slots >= need + 1   # a fresh pair costs two box slots
            if not can_fresh and not occluders:
                break
            if occluders and (not can_fresh or rng.uniform() < 0.5):
                # hide another target behind an occluder already in place,
                # anywhere inside its angular shadow
                occ = occluders[int(rng.integers(len(occluders)))]
                d_o = math.hypot(occ.x - ego_pose.x, occ.y - ego_pose.y)
                lo = max(7.0, d_o / 0.62)
                hi = min(cfg.range_m - 1.5, d_o / 0.30)
                if lo >= hi:
                    continue
                dt = rng.uniform(lo, hi)
                bearing_o = math.atan2(occ.y - ego_pose.y, occ.x - ego_pose.x)
                o_lo, o_hi = _bearing_span(ego_xy, occ.corners_bev(), bearing_o)
                th = math.asin(min(1.0, (CAR_RADIUS_MAX + 0.1) / dt)) + 0.02
                if o_lo + th >= o_hi - th:
                    continue
                phi = bearing_o + rng.uniform(o_lo + th, o_hi - th)
                tgt = _sample_box(rng, next_id, ego_pose.x + dt * math.cos(phi),
                                  ego_pose.y + dt * math.sin(phi),
                                  rng.uniform(-math.pi, math.pi), "car")
                tgt.occluded = True
                if clashes(tgt) or not _covers_fully(ego_xy, occ, tgt, cfg.cam_height):
                    continue
                cs_new = witness_candidates(tgt, [])
                if collab_xy and not cs_new:
                    continue
                updated = shrunk_clear_sets([tgt])
                if updated is None:
                    continue
                boxes.append(tgt)
                protected.append(tgt)
                clear_sets[:] = updated
                clear_sets.append(cs_new)
                next_id += 1
                placed = True
                break
            phi = rng.uniform(-math.pi, math.pi)
            dt = rng.uniform(7.0, cfg.range_m - 1.5)
            tgt = _sample_box(rng, next_id + 1, ego_pose.x + dt * math.cos(phi),
                              ego_pose.y + dt * math.sin(phi),
                              rng.uniform(-math.pi, math.pi), "car")
            tgt.occluded = True
            do = dt * rng.uniform(0.30, 0.62)
            if do < 2.4:
                continue
            occ = _sample_box(rng, next_id, ego_pose.x + do * math.cos(phi),
                              ego_pose.y + do * math.sin(phi),
                              phi + math.pi / 2.0 + rng.uniform(-0.25, 0.25), "truck")
            if clashes(occ) or clashes(tgt) or rects_overlap(occ.corners_bev(),
                                                             tgt.corners_bev()):
                continue
            if not _covers_fully(ego_xy, occ, tgt, cfg.cam_height):
                continue
            cs_new = witness_candidates(tgt, [occ])
            if collab_xy and not cs_new:
                continue
            updated = shrunk_clear_sets([occ, tgt])
            if updated is None:
                continue
            boxes.extend([occ, tgt])
            occluders.append(occ)
            protected.append(tgt)
            clear_sets[:] = updated
            clear_sets.append(cs_new)
            next_id += 2
            placed = True
            break
        if placed:
            placed_targets += 1
    # tolerate a bounded shortfall: crowded draws may leave no legal spot
    if n_occluded > 0 and placed_targets < max(1, math.ceil(0.8 * n_occluded)):
        return "occlusion target placement failed"

    while len(boxes) < n_obj:
        for _attempt in range(300):
            phi = rng.uniform(-math.pi, math.pi)
            d = rng.uniform(3.0, cfg.range_m - 1.5)
            box = _sample_box(rng, next_id, ego_pose.x + d * math.cos(phi),
                              ego_pose.y + d * math.sin(phi),
                              rng.uniform(-math.pi, math.pi), "car")
            if clashes(box):
                continue
            updated = shrunk_clear_sets([box])
            if updated is None:
                continue
            boxes.append(box)
            clear_sets[:] = updated
            next_id += 1
            break
        else:
            return "free box placement failed"

    scene = Scene(seed=seed, cfg=cfg, agents=agents, boxes=boxes)
    for tgt in protected:
        if ego_visibility(scene, tgt.obj_id) > cfg.occluded_max_vis:
            return "constructed occlusion not confirmed by z-buffer"
        if collab_xy and max(agent_visibility(scene, c, tgt.obj_id)
                             for c in range(1, cfg.n_agents)) < cfg.witness_min_vis:
            return "witness visibility not confirmed by z-buffer"
    return scene


# ---- serialization ----

SCENE_FORMAT = "viewfuse-scene"
SCENE_VERSION = 1


def scene_to_dict(scene: Scene) -> dict:
    return {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "seed": scene.seed,
        "cfg": asdict(scene.cfg),
        "agents": [
            {
                "pose": [r.pose.x, r.pose.y, r.pose.z, r.pose.yaw],
                "view_valid": list(r.view_valid),
                "cams": [
                    {
                        "fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
                        "pix_w": c.pix_w, "pix_h": c.pix_h,
                        "feat_w": c.feat_w, "feat_h": c.feat_h,
                        "pose": [c.pose.x, c.pose.y, c.pose.z, c.pose.yaw],
                    }
                    for c in r.cams
                ],
            }
            for r in scene.agents
        ],
        "boxes": [
            {
                "obj_id": b.obj_id, "cls": b.cls, "occluded": b.occluded,
                "center": [b.x, b.y, b.z], "size": [b.w, b.l, b.h], "yaw": b.yaw,
            }
            for b in scene.boxes
        ],
    }


def scene_from_dict(d: dict) -> Scene:
    if d.get("format") != SCENE_FORMAT:
        raise ValueError(f"not a scene record: format={d.get('format')!r}")
    if d.get("version") != SCENE_VERSION:
        raise ValueError(f"unsupported scene version {d.get('version')!r}")
    cfg = SceneConfig(**d["cfg"])
    agents = []
    for a in d["agents"]:
        cams = tuple(CameraModel(fx=c["fx"], fy=c["fy"], cx=c["cx"], cy=c["cy"],
                                 pix_w=c["pix_w"], pix_h=c["pix_h"],
                                 feat_w=c["feat_w"], feat_h=c["feat_h"],
                                 pose=Pose(*c["pose"]))
                     for c in a["cams"])
        agents.append(AgentRig(pose=Pose(*a["pose"]), cams=cams,
                               view_valid=tuple(bool(v) for v in a["view_valid"])))
    boxes = [GtBox(obj_id=b["obj_id"], cls=b["cls"], occluded=b["occluded"],
                   x=b["center"][0], y=b["center"][1], z=b["center"][2],
                   w=b["size"][0], l=b["size"][1], h=b["size"][2], yaw=b["yaw"])
             for b in d["boxes"]]
    return Scene(seed=d["seed"], cfg=cfg, agents=agents, boxes=boxes)


def save_scene(scene: Scene, path) -> None:
    with open(path, "w") as f:
        json.dump(scene_to_dict(scene), f, indent=1, sort_keys=True)
        f.write("\n")


def load_scene(path) -> Scene:
    with open(path) as f:
        return scene_from_dict(json.load(f))
