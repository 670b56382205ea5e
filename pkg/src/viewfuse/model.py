"""End-to-end pipeline assembly.

Wires the synthetic renderer, the instance-sharing channel, the BEV
aggregation cascade and the query decoder into one trainable model, and
provides the training step plus checkpoint round-tripping.

Two data paths exist for collaborator features. Training multiplies the
sender's differentiable feature map by the foreground mask so gradients
reach the shared encoder; inference pushes real bytes through the wire
codec and reconstructs on the receiver side. Both derive crop bounds from
the same f32-quantized boxes, so the two paths select identical cells.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .cdqa import (HybridQueries, PosEncoding, build_hybrid_queries,
                   cone_encode, ground_anchor, instance_gap_encode)
from .comms import (CommLedger, InstanceMessage, crop_bounds, decode_message,
                    encode_message, foreground_mask, fullmap_message,
                    reconstruct_view, select_messages)
from .decoder import BoxCodec, DetrDecoder, LossWeights, Predictions, set_loss
from .geometry import (Pose, apply_pose, apply_pose_noise, camera_in_frame,
                       invert, normalize_angle, relative_pose)
from .ifa import BevGridSpec, BevState, BevView, IfaBlock, ifa_cascade
from .scene import (GtBox, Instance2D, Scene, agent_visibility,
                    detect_instances_2d, render_view_features)
from .tensor import Adam, Mlp, Tensor


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class FingerprintError(CheckpointError):
    """Checkpoint was trained under a different experiment configuration."""


CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture hyperparameters; scene and schedule knobs live elsewhere."""
    feat_c: int = 32          # raw signature channels from the renderer
    c: int = 32               # working channel width after the encoder
    enc_hidden: int = 32
    grid_h: int = 32
    grid_w: int = 32
    resolution: float = 1.0   # m per BEV cell
    n_ref: int = 4
    z_min: float = -1.0
    z_max: float = 3.0
    n_da: int = 4
    n_blocks: int = 2
    n_q: int = 64
    n_dec_layers: int = 3
    dec_n_da: int = 4
    pos_encoding: str = "cone"      # none | learned | cone
    c_thre: float = 0.2
    vis_min: float = 0.05           # GT kept if some agent sees this fraction
    w_cls: float = 1.0
    w_box: float = 2.5

    def validate(self) -> None:
        if min(self.feat_c, self.c, self.enc_hidden) < 1:
            raise ValueError("channel widths must be positive")
        if min(self.n_blocks, self.n_q, self.n_dec_layers,
               self.n_da, self.dec_n_da) < 1:
            raise ValueError("block, query and layer counts must be positive")
        PosEncoding(self.pos_encoding)
        if not (0.0 <= self.c_thre <= 1.0):
            raise ValueError("c_thre must be in [0, 1]")
        # grid fields are validated by the spec constructor
        self.grid_spec()

    def grid_spec(self) -> BevGridSpec:
        return BevGridSpec(grid_h=self.grid_h, grid_w=self.grid_w,
                           resolution=self.resolution, n_ref=self.n_ref,
                           z_min=self.z_min, z_max=self.z_max)


@dataclass(frozen=True)
class PipelineFlags:
    """Which collaboration components run; the ablation axes."""
    ifa: bool = True       # feature-level collaboration into the BEV grid
    cdqa: bool = True      # instance-derived hybrid queries
    mask: bool = True      # foreground-only sharing (off = full feature maps)
    late_fuse: bool = False

    def __post_init__(self):
        if self.cdqa and not self.ifa:
            raise ValueError("query adaptation needs shared instances; "
                             "enable ifa or disable cdqa")


FLAGS_FULL = PipelineFlags()
FLAGS_SOLO = PipelineFlags(ifa=False, cdqa=False, mask=True)


class PipelineModel:
    """All learnable state plus the fixed grid geometry."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.spec = cfg.grid_spec()
        self.codec = BoxCodec.from_grid(self.spec)
        self.weights = LossWeights(w_cls=cfg.w_cls, w_box=cfg.w_box)
        self.pos = PosEncoding(cfg.pos_encoding)
        self.enc = Mlp([cfg.feat_c, cfg.enc_hidden, cfg.c], rng, name="enc")
        self.q0 = Tensor(rng.normal(0.0, 0.1, (cfg.c, cfg.grid_h, cfg.grid_w)),
                         requires_grad=True)
        self.blocks = [IfaBlock(cfg.c, cfg.n_da, rng, name=f"ifa{i}")
                       for i in range(cfg.n_blocks)]
        self.gap = Mlp([cfg.c, cfg.c, cfg.c], rng, name="gap")
        self.cone = Mlp([9, cfg.c, cfg.c], rng, name="cone")
        self.pos_learned = Tensor(rng.normal(0.0, 0.1, cfg.c),
                                  requires_grad=True)
        self.qtable = Tensor(rng.normal(0.0, 0.1, (cfg.n_q, cfg.c)),
                             requires_grad=True)
        # fixed reference-point seeds: learned queries tile the field so
        # matching hands each object to a nearby query from step one
        side = math.ceil(math.sqrt(cfg.n_q))
        ticks = np.linspace(-0.8, 0.8, side)
        gy, gx = np.meshgrid(ticks, ticks, indexing="ij")
        self.anchor_grid = np.stack([gx.ravel(), gy.ravel()],
                                    axis=1)[:cfg.n_q]
        self.dec = DetrDecoder(cfg.c, n_layers=cfg.n_dec_layers,
                               n_da=cfg.dec_n_da, rng=rng, name="dec")

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for part in (self.enc.params(), self.gap.params(),
                     self.cone.params(), self.dec.params(),
                     *[b.params() for b in self.blocks]):
            for k, v in part.items():
                if k in out:
                    raise RuntimeError(f"duplicate parameter name {k}")
                out[k] = v
        out["q0"] = self.q0
        out["pos_learned"] = self.pos_learned
        out["qtable"] = self.qtable
        return out


@dataclass
class SharedInstance:
    """One instance that crossed (or, in training, virtually crossed) a link."""
    message: InstanceMessage
    cam: object
    agent_pose_in_ego: Pose
    crop: Tensor


@dataclass
class ForwardResult:
    preds: Predictions
    queries: HybridQueries
    fbev: Tensor
    ledger: CommLedger
    views: list[BevView]
    shared: list[SharedInstance]
    believed: list[Pose]      # per-agent poses as used (noise applied)


def _believed_poses(scene: Scene, noise_sigma: float,
                    noise_rng: np.random.Generator | None,
                    ego: int) -> list[Pose]:
    """True ego pose; collaborator poses perturbed by localization noise."""
    if noise_sigma > 0.0 and noise_rng is None:
        raise ValueError("pose noise needs an explicit rng for determinism")
    out = []
    for j, rig in enumerate(scene.agents):
        if j == ego or noise_sigma <= 0.0:
            out.append(rig.pose)
        else:
            out.append(apply_pose_noise(rig.pose, noise_sigma, 0.0, noise_rng))
    return out


def _collab_view(model: PipelineModel, scene: Scene, j: int, k: int,
                 pose_in_ego: Pose, flags: PipelineFlags, wire: bool,
                 detector_mode: str, ledger: CommLedger, c_thre: float,
                 receiver: int):
    """Render, detect, share and rebuild one collaborator view.

    Returns (BevView | None, shared instance records).
    """
    cfg = scene.cfg
    vf = render_view_features(scene, j, k, model.enc)
    if not vf.valid:
        return None, []
    cam = scene.agents[j].cams[k]
    insts = detect_instances_2d(scene, j, k, mode=detector_mode)
    msgs = select_messages(vf, insts, c_thre)
    for m in msgs:
        ledger.count_instance_message(m, receiver=receiver)
    dims = (model.cfg.c, cfg.feat_h, cfg.feat_w)

    if flags.mask:
        if not msgs:
            return None, []
        if wire:
            got = [decode_message(encode_message(m)) for m in msgs]
            rv = reconstruct_view(got, dims)
            feats = Tensor(rv.features)
            mask_arr = rv.mask
        else:
            got = msgs
            mask_arr = foreground_mask(msgs, cfg.feat_h, cfg.feat_w)
            keep = Tensor(mask_arr[None, :, :].astype(float))
            feats = vf.features * keep
    else:
        # unrestricted sharing: the whole map crosses the wire and the
        # instance stream rides along unchanged for query adaptation
        fm = fullmap_message(vf)
        ledger.count_instance_message(fm, receiver=receiver)
        if wire:
            got = [decode_message(encode_message(m)) for m in msgs]
            rv = reconstruct_view([decode_message(encode_message(fm))], dims)
            feats = Tensor(rv.features)
            mask_arr = rv.mask
        else:
            got = msgs
            feats = vf.features
            mask_arr = None

    shared = []
    for m in got:
        if wire:
            crop = Tensor(np.asarray(m.payload, dtype=np.float64))
        else:
            r0, r1, c0, c1 = crop_bounds(m.box, cfg.feat_w, cfg.feat_h)
            crop = vf.features[:, r0:r1, c0:c1]
        shared.append(SharedInstance(message=m, cam=cam,
                                     agent_pose_in_ego=pose_in_ego, crop=crop))
    view = BevView(features=feats, cam=cam, agent_pose_in_ego=pose_in_ego,
                   agent_id=j, view_id=k, valid=True, mask=mask_arr)
    return view, shared


def _adapt_queries(model: PipelineModel, shared: list[SharedInstance],
                   flags: PipelineFlags) -> HybridQueries:
    if not flags.cdqa or not shared:
        return HybridQueries(q=model.qtable, n_instance=0,
                             anchors=model.anchor_grid)
    codec = model.codec
    encoded = []
    inst_anchors: list = []
    for rec in shared:
        m = rec.message
        q = instance_gap_encode(rec.crop, model.gap)
        inst = Instance2D(u_min=m.box[0], v_min=m.box[1],
                          u_max=m.box[2], v_max=m.box[3],
                          confidence=m.confidence, obj_id=-1,
                          agent_id=m.agent_id, view_id=m.view_id)
        cam_pose = camera_in_frame(rec.cam, rec.agent_pose_in_ego)
        # the positional prior is part of the cone geometry, so only the
        # cone encoding gets to seed its reference point from it
        ga = None
        if model.pos is PosEncoding.CONE:
            q = q + cone_encode(inst, rec.cam, cam_pose, model.cone)
            ga = ground_anchor(inst, rec.cam, cam_pose)
        elif model.pos is PosEncoding.LEARNED:
            q = q + model.pos_learned
        if ga is None:
            inst_anchors.append(None)
        else:
            inst_anchors.append((
                float(np.clip(ga[0] / codec.x_scale, -1.0, 1.0)),
                float(np.clip(ga[1] / codec.y_scale, -1.0, 1.0))))
        encoded.append((q, float(m.confidence)))
    return build_hybrid_queries(encoded, model.qtable,
                                instance_anchors=inst_anchors,
                                learned_anchors=model.anchor_grid)


def model_forward(model: PipelineModel, scene: Scene,
                  flags: PipelineFlags = FLAGS_FULL, *, wire: bool,
                  noise_sigma: float = 0.0,
                  noise_rng: np.random.Generator | None = None,
                  detector_mode: str = "train",
                  c_thre: float | None = None,
                  ego: int = 0) -> ForwardResult:
    """One full pass: render, share, aggregate, decode.

    ``wire=False`` keeps collaborator features differentiable (training);
    ``wire=True`` round-trips them through the byte codec (inference and
    bandwidth accounting). ``ego`` selects the receiving agent; everything
    is expressed in its frame.
    """
    if scene.cfg.feat_c != model.cfg.feat_c:
        raise ValueError(
            f"scene renders {scene.cfg.feat_c} channels but the model "
            f"expects {model.cfg.feat_c}")
    if c_thre is None:
        c_thre = model.cfg.c_thre
    if not (0 <= ego < len(scene.agents)):
        raise ValueError(f"no agent {ego} in a {len(scene.agents)}-agent scene")
    ledger = CommLedger()
    believed = _believed_poses(scene, noise_sigma, noise_rng, ego)
    ego_rig = scene.agents[ego]
    views: list[BevView] = []
    shared: list[SharedInstance] = []
    for k in range(scene.cfg.n_cams):
        vf = render_view_features(scene, ego, k, model.enc)
        views.append(BevView(features=vf.features, cam=ego_rig.cams[k],
                             agent_pose_in_ego=Pose(0.0, 0.0, 0.0, 0.0),
                             agent_id=ego, view_id=k, valid=vf.valid,
                             mask=None))
    if flags.ifa:
        for j in range(len(scene.agents)):
            if j == ego:
                continue
            pose_in_ego = relative_pose(ego_rig.pose, believed[j])
            for k in range(scene.cfg.n_cams):
                view, recs = _collab_view(model, scene, j, k, pose_in_ego,
                                          flags, wire, detector_mode, ledger,
                                          c_thre, ego)
                if view is not None:
                    views.append(view)
                shared.extend(recs)
    queries = _adapt_queries(model, shared, flags)
    state0 = BevState(q=model.q0, spec=model.spec)
    fbev = ifa_cascade(state0, views, model.spec, model.blocks)
    preds = model.dec.forward(fbev, queries.q, model.spec,
                              anchors=queries.anchors)
    return ForwardResult(preds=preds, queries=queries, fbev=fbev,
                         ledger=ledger, views=views, shared=shared,
                         believed=believed)


def ego_frame_targets(scene: Scene, spec: BevGridSpec,
                      vis_min: float = 0.05,
                      agents: list[int] | None = None) -> list[GtBox]:
    """GT boxes inside the grid, seen by at least one listed agent.

    Boxes come back in the ego frame. ``agents`` defaults to every agent in
    the scene; sweeps that truncate the roster pass the full-roster targets
    explicitly so the task stays fixed across sweep points.
    """
    if agents is None:
        agents = list(range(len(scene.agents)))
    ego = scene.ego.pose
    w2e = invert(ego)
    half_x = spec.grid_w // 2 * spec.resolution
    half_y = spec.grid_h // 2 * spec.resolution
    out = []
    for b in scene.boxes:
        vis = max(agent_visibility(scene, a, b.obj_id) for a in agents)
        if vis < vis_min:
            continue
        p = apply_pose(w2e, np.array([[b.x, b.y, b.z]]))[0]
        if abs(p[0]) > half_x or abs(p[1]) > half_y:
            continue
        out.append(GtBox(obj_id=b.obj_id, x=float(p[0]), y=float(p[1]),
                         z=float(p[2]), w=b.w, l=b.l, h=b.h,
                         yaw=normalize_angle(b.yaw - ego.yaw),
                         cls=b.cls, occluded=b.occluded))
    return out


def train_step(scenes: list[Scene], model: PipelineModel, opt: Adam,
               flags: PipelineFlags = FLAGS_FULL, *,
               noise_sigma: float = 0.0,
               noise_rng: np.random.Generator | None = None,
               detector_mode: str = "train") -> float:
    """Forward, loss, backward, optimizer step over a scene batch."""
    if not scenes:
        raise ValueError("empty scene batch")
    opt.zero_grad()
    total = None
    for scene in scenes:
        fr = model_forward(model, scene, flags, wire=False,
                           noise_sigma=noise_sigma, noise_rng=noise_rng,
                           detector_mode=detector_mode)
        gts = ego_frame_targets(scene, model.spec, model.cfg.vis_min)
        loss = set_loss(fr.preds, gts, model.codec, model.weights)
        total = loss if total is None else total + loss
    total = total * (1.0 / len(scenes))
    value = float(total.data)
    if not np.isfinite(value):
        stats = {k: float(np.abs(t.data).max())
                 for k, t in sorted(model.params().items())}
        worst = sorted(stats, key=stats.get, reverse=True)[:5]
        raise TrainingError(
            "non-finite loss "
            f"{value} on batch of {len(scenes)} scene(s); largest parameter "
            "magnitudes: " + ", ".join(f"{k}={stats[k]:.3g}" for k in worst))
    total.backward()
    opt.step()
    return value


# ---- checkpointing ----


def save_checkpoint(path, model: PipelineModel, opt: Adam | None = None, *,
                    fingerprint: str = "", step: int = 0) -> None:
    """Versioned flat archive of named f64 parameter (and Adam) arrays."""
    arrays = {f"param.{k}": t.data for k, t in model.params().items()}
    if opt is not None:
        arrays.update({f"opt.{k}": a for k, a in opt.state_arrays().items()})
    meta = json.dumps({"version": CHECKPOINT_VERSION,
                       "fingerprint": fingerprint, "step": int(step)},
                      sort_keys=True)
    arrays["meta"] = np.frombuffer(meta.encode("utf-8"), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path, model: PipelineModel, opt: Adam | None = None,
                    expect_fingerprint: str | None = None) -> dict:
    """Restore parameters in place; returns the stored metadata."""
    with np.load(path) as z:
        if "meta" not in z:
            raise CheckpointError(f"{path} has no metadata record")
        meta = json.loads(bytes(z["meta"].tobytes()).decode("utf-8"))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {meta.get('version')} unsupported "
                f"(expected {CHECKPOINT_VERSION})")
        if (expect_fingerprint is not None
                and meta.get("fingerprint") != expect_fingerprint):
            raise FingerprintError(
                f"checkpoint fingerprint {meta.get('fingerprint')!r} does "
                f"not match config fingerprint {expect_fingerprint!r}")
        params = model.params()
        stored = {k[len("param."):] for k in z.files if k.startswith("param.")}
        missing = sorted(set(params) - stored)
        extra = sorted(stored - set(params))
        if missing or extra:
            raise CheckpointError(
                f"parameter set mismatch: missing {missing[:4]}, "
                f"unexpected {extra[:4]}")
        for k, t in params.items():
            arr = z[f"param.{k}"]
            if arr.shape != t.data.shape:
                raise CheckpointError(
                    f"shape of {k} is {arr.shape}, model wants {t.data.shape}")
            t.data = arr.astype(np.float64).copy()
        if opt is not None:
            keys = [k for k in z.files if k.startswith("opt.")]
            if not keys:
                raise CheckpointError("checkpoint carries no optimizer state")
            opt.load_state_arrays({k[len("opt."):]: z[k] for k in keys})
    return meta
