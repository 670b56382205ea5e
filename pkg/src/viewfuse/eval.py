"""Evaluation harness.

Rotated-IoU average precision, the no-collaboration and late-fusion
baselines, flagged pipeline runs, the ablation ladder, and the sweep
drivers (localization noise, agent count, share threshold, positional
encoding). Reports are line-oriented JSON: one record per scene plus an
aggregate summary.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .comms import CommLedger, DetectionMessage, decode_detection, encode_detection
from .decoder import decoded_rows
from .geometry import (Pose, clip_convex, normalize_angle, polygon_area,
                       rect_corners, relative_pose)
from .ifa import BevGridSpec
from .model import (FLAGS_SOLO, PipelineFlags, PipelineModel, ego_frame_targets,
                    model_forward)
from .scene import GtBox, Scene, truncate_scene

TAG_EVAL_NOISE = 5

WORKERS_ENV = "VIEWFUSE_WORKERS"

IOU_THRESHOLDS = (0.30, 0.50, 0.70)

NMS_IOU = 0.5


@dataclass
class Detection:
    """One decoded box with confidence, in some agent's frame."""
    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    yaw: float
    confidence: float

    def corners_bev(self) -> np.ndarray:
        return rect_corners(self.x, self.y, self.w, self.l, self.yaw)


def rows_to_detections(rows: np.ndarray) -> list[Detection]:
    """Decoded [N,8] rows (conf, x, y, z, w, l, h, yaw) to detections."""
    return [Detection(x=r[1], y=r[2], z=r[3], w=r[4], l=r[5], h=r[6],
                      yaw=r[7], confidence=r[0]) for r in np.asarray(rows)]


# ---- rotated IoU ----


def rotated_iou_bev(a, b) -> float:
    """IoU of two yaw-rotated rectangles in the ground plane.

    Accepts anything with x, y, w, l, yaw fields (detections or GT boxes).
    """
    if min(a.w, a.l, b.w, b.l) <= 0.0:
        raise ValueError("boxes need positive sizes")
    ca = rect_corners(a.x, a.y, a.w, a.l, a.yaw)
    cb = rect_corners(b.x, b.y, b.w, b.l, b.yaw)
    inter_poly = clip_convex(ca, cb)
    inter = polygon_area(inter_poly) if len(inter_poly) >= 3 else 0.0
    union = a.w * a.l + b.w * b.l - inter
    return inter / union if union > 0.0 else 0.0


def rotated_iou_3d(a, b) -> float:
    """BEV intersection times vertical overlap, over the 3-D union."""
    if min(a.w, a.l, a.h, b.w, b.l, b.h) <= 0.0:
        raise ValueError("boxes need positive sizes")
    ca = rect_corners(a.x, a.y, a.w, a.l, a.yaw)
    cb = rect_corners(b.x, b.y, b.w, b.l, b.yaw)
    inter_poly = clip_convex(ca, cb)
    inter_bev = polygon_area(inter_poly) if len(inter_poly) >= 3 else 0.0
    dz = min(a.z + a.h / 2, b.z + b.h / 2) - max(a.z - a.h / 2, b.z - b.h / 2)
    inter = inter_bev * max(0.0, dz)
    union = a.w * a.l * a.h + b.w * b.l * b.h - inter
    return inter / union if union > 0.0 else 0.0


# ---- AP ----


def match_detections(dets: list[Detection], gts: list[GtBox],
                     iou_thr: float, iou_fn=rotated_iou_bev) -> list[bool]:
    """Greedy confidence-descending matching; each GT claimed at most once.

    Returns a true/false flag per detection in the original order.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    taken = [False] * len(gts)
    flags = [False] * len(dets)
    for i in order:
        # highest-IoU free GT at or above the threshold; ties to the earliest
        best, best_iou = -1, -1.0
        for g, gt in enumerate(gts):
            if taken[g]:
                continue
            iou = iou_fn(dets[i], gt)
            if iou >= iou_thr and iou > best_iou:
                best, best_iou = g, iou
        if best >= 0:
            taken[best] = True
            flags[i] = True
    return flags


def average_precision(scored: list[tuple[float, bool]], n_gt: int) -> float:
    """All-point interpolated AP from (confidence, is_true_positive) pairs."""
    if n_gt == 0:
        return 0.0
    if not scored:
        return 0.0
    order = sorted(range(len(scored)), key=lambda i: (-scored[i][0], i))
    tp = np.cumsum([1.0 if scored[i][1] else 0.0 for i in order])
    fp = np.cumsum([0.0 if scored[i][1] else 1.0 for i in order])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1e-12)
    # precision envelope, then area under the stepwise curve
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    area = 0.0
    for r, p in zip(recall, env):
        area += (r - prev_r) * p
        prev_r = r
    return float(area)


def nms_rotated(dets: list[Detection], iou_thr: float = NMS_IOU) -> list[Detection]:
    """Confidence-descending greedy suppression with rotated IoU."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    keep: list[int] = []
    for i in order:
        if all(rotated_iou_bev(dets[i], dets[j]) <= iou_thr for j in keep):
            keep.append(i)
    return [dets[i] for i in sorted(keep)]


# ---- reports ----


@dataclass
class EvalReport:
    label: str
    ap: dict[float, float]
    comm_log2: float | None
    total_bytes: int
    n_scenes: int
    n_gt: int
    fingerprint: str
    seed: int
    per_scene: list[dict] = field(default_factory=list)

    def summary_dict(self) -> dict:
        return {
            "record": "summary",
            "label": self.label,
            "ap": {f"{t:.2f}": self.ap[t] for t in sorted(self.ap)},
            "comm_log2": self.comm_log2,
            "total_bytes": self.total_bytes,
            "n_scenes": self.n_scenes,
            "n_gt": self.n_gt,
            "fingerprint": self.fingerprint,
            "seed": self.seed,
        }

    def to_jsonl(self) -> str:
        lines = [json.dumps(rec, sort_keys=True) for rec in self.per_scene]
        lines.append(json.dumps(self.summary_dict(), sort_keys=True))
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_jsonl())


def _scene_record(scene_seed: int, dets: list[Detection], n_gt: int,
                  n_bytes: int) -> dict:
    return {
        "record": "scene",
        "scene": scene_seed,
        "n_detections": len(dets),
        "n_gt": n_gt,
        "bytes": n_bytes,
        "detections": [[round(v, 9) for v in
                        (d.confidence, d.x, d.y, d.z, d.w, d.l, d.h, d.yaw)]
                       for d in dets],
    }


# ---- single-scene evaluation ----


def detection_to_frame(det: Detection, t: Pose) -> Detection:
    """Re-express a detection given the sender-to-receiver transform."""
    c, s = math.cos(t.yaw), math.sin(t.yaw)
    x = c * det.x - s * det.y + t.x
    y = s * det.x + c * det.y + t.y
    return Detection(x=x, y=y, z=det.z + t.z, w=det.w, l=det.l, h=det.h,
                     yaw=normalize_angle(det.yaw + t.yaw),
                     confidence=det.confidence)


def _noise_rng(eval_seed: int, scene_seed: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([eval_seed, TAG_EVAL_NOISE, scene_seed]))


def evaluate_scene(model: PipelineModel, scene: Scene,
                   flags: PipelineFlags, *, noise_sigma: float = 0.0,
                   eval_seed: int = 0, c_thre: float | None = None,
                   det_thre: float | None = None
                   ) -> tuple[list[Detection], CommLedger]:
    """Detections in the ego frame plus the comm ledger for one scene."""
    rng = _noise_rng(eval_seed, scene.seed)
    fr = model_forward(model, scene, flags, wire=True,
                       noise_sigma=noise_sigma, noise_rng=rng,
                       detector_mode="infer", c_thre=c_thre)
    rows = decoded_rows(fr.preds, model.codec).data
    dets = rows_to_detections(rows)
    ledger = fr.ledger
    if flags.late_fuse and len(scene.agents) > 1:
        if det_thre is None:
            det_thre = model.cfg.c_thre
        # the forward already drew each collaborator's reported pose; the
        # detection transform must see the same noise realization
        believed = fr.believed
        for j in range(1, len(scene.agents)):
            solo = model_forward(model, scene, FLAGS_SOLO, wire=True,
                                 detector_mode="infer", ego=j)
            solo_rows = decoded_rows(solo.preds, model.codec).data
            t = relative_pose(scene.ego.pose, believed[j])
            for n, r in enumerate(solo_rows):
                if r[0] <= det_thre:
                    continue
                msg = DetectionMessage(agent_id=j, index=n,
                                       box=tuple(r[1:8]), confidence=r[0])
                msg = decode_detection(encode_detection(msg))
                ledger.count_detection_message(msg, receiver=0)
                d = Detection(x=msg.box[0], y=msg.box[1], z=msg.box[2],
                              w=msg.box[3], l=msg.box[4], h=msg.box[5],
                              yaw=msg.box[6], confidence=msg.confidence)
                dets.append(detection_to_frame(d, t))
        dets = nms_rotated(dets, NMS_IOU)
    return dets, ledger


# ---- worker-pool plumbing ----


_POOL_STATE: dict = {}


def _pool_init(model: PipelineModel, flags: PipelineFlags, kwargs: dict):
    _POOL_STATE["model"] = model
    _POOL_STATE["flags"] = flags
    _POOL_STATE["kwargs"] = kwargs


def _pool_eval(scene: Scene):
    dets, ledger = evaluate_scene(_POOL_STATE["model"], scene,
                                  _POOL_STATE["flags"],
                                  **_POOL_STATE["kwargs"])
    return scene.seed, dets, ledger


def n_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _eval_all(model, scenes, flags, kwargs) -> list[tuple[int, list, CommLedger]]:
    workers = n_workers()
    if workers == 1 or len(scenes) < 2:
        return [(s.seed, *evaluate_scene(model, s, flags, **kwargs))
                for s in scenes]
    with ProcessPoolExecutor(max_workers=workers, initializer=_pool_init,
                             initargs=(model, flags, kwargs)) as pool:
        return list(pool.map(_pool_eval, scenes))


# ---- full-set evaluation ----


def evaluate_scenes(model: PipelineModel, scenes: list[Scene],
                    flags: PipelineFlags, *, label: str,
                    noise_sigma: float = 0.0, eval_seed: int = 0,
                    c_thre: float | None = None,
                    det_thre: float | None = None,
                    fingerprint: str = "", vis_min: float | None = None,
                    targets: dict[int, list[GtBox]] | None = None,
                    thresholds: tuple[float, ...] = IOU_THRESHOLDS,
                    ) -> EvalReport:
    """Pooled AP over a scene set, reduced in input order.

    ``targets`` overrides per-scene GT (keyed by scene seed); sweeps that
    truncate the agent roster use it to keep the task fixed.
    """
    if vis_min is None:
        vis_min = model.cfg.vis_min
    results = _eval_all(model, scenes, flags,
                        dict(noise_sigma=noise_sigma, eval_seed=eval_seed,
                             c_thre=c_thre, det_thre=det_thre))
    scored: dict[float, list[tuple[float, bool]]] = {t: [] for t in thresholds}
    n_gt = 0
    ledgers = []
    per_scene = []
    for scene, (seed, dets, ledger) in zip(scenes, results):
        if targets is not None:
            gts = targets[seed]
        else:
            gts = ego_frame_targets(scene, model.spec, vis_min)
        n_gt += len(gts)
        ledgers.append(ledger)
        per_scene.append(_scene_record(seed, dets, len(gts),
                                       ledger.total_bytes))
        for t in thresholds:
            flags_tp = match_detections(dets, gts, t)
            scored[t].extend((d.confidence, tp)
                             for d, tp in zip(dets, flags_tp))
    merged = CommLedger.merge(ledgers)
    total = merged.total_bytes
    comm = math.log2(total) if total > 0 else None
    ap = {t: average_precision(scored[t], n_gt) for t in thresholds}
    return EvalReport(label=label, ap=ap, comm_log2=comm, total_bytes=total,
                      n_scenes=len(scenes), n_gt=n_gt,
                      fingerprint=fingerprint, seed=eval_seed,
                      per_scene=per_scene)


def run_no_collaboration(model, scenes, **kw) -> EvalReport:
    kw.setdefault("label", "no_collab")
    return evaluate_scenes(model, scenes, FLAGS_SOLO, **kw)


def run_late_fusion(model, scenes, **kw) -> EvalReport:
    kw.setdefault("label", "late")
    flags = PipelineFlags(ifa=False, cdqa=False, mask=True, late_fuse=True)
    return evaluate_scenes(model, scenes, flags, **kw)


def run_fusion(model, scenes, flags: PipelineFlags | None = None,
               **kw) -> EvalReport:
    kw.setdefault("label", "fused")
    if flags is None:
        flags = PipelineFlags()
    return evaluate_scenes(model, scenes, flags, **kw)


# ---- ablation ladder ----


LADDER = (
    ("late", PipelineFlags(ifa=False, cdqa=False, mask=True, late_fuse=True)),
    ("ifa", PipelineFlags(ifa=True, cdqa=False, mask=False)),
    ("ifa+cdqa", PipelineFlags(ifa=True, cdqa=True, mask=False)),
    ("ifa+cdqa+mask", PipelineFlags(ifa=True, cdqa=True, mask=True)),
)


def ablation_ladder(models: dict[str, PipelineModel], scenes: list[Scene],
                    **kw) -> list[EvalReport]:
    """The four-row component ladder; one trained model per row."""
    missing = [name for name, _ in LADDER if name not in models]
    if missing:
        raise ValueError(f"no model for ladder rows {missing}")
    out = []
    for name, flags in LADDER:
        r = evaluate_scenes(models[name], scenes, flags, label=name,
                            **{k: v for k, v in kw.items() if k != "label"})
        out.append(r)
    return out


# ---- sweeps ----


SWEEP_AXES = ("noise_sigma", "n_agents", "c_thre", "pos_encoding")


def sweep(axis: str, values, models, scenes: list[Scene],
          flags: PipelineFlags | None = None, **kw) -> list[EvalReport]:
    """One evaluation per value over a shared scene set.

    ``models`` is a single model for evaluation-only axes and a dict keyed
    by value for ``pos_encoding`` (trained separately per strategy).
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; one of {SWEEP_AXES}")
    if not values:
        raise ValueError("sweep needs at least one value")
    if flags is None:
        flags = PipelineFlags()
    out = []
    if axis == "pos_encoding":
        for v in values:
            if v not in models:
                raise ValueError(f"no model trained for pos_encoding={v!r}")
            out.append(evaluate_scenes(models[v], scenes, flags,
                                       label=f"pos_encoding={v}", **kw))
        return out
    model = models
    if axis == "n_agents":
        base_targets = {s.seed: ego_frame_targets(s, model.spec,
                                                  model.cfg.vis_min)
                        for s in scenes}
        for v in values:
            cut = [truncate_scene(s, int(v)) for s in scenes]
            out.append(evaluate_scenes(model, cut, flags,
                                       label=f"n_agents={int(v)}",
                                       targets=base_targets, **kw))
        return out
    for v in values:
        if axis == "noise_sigma":
            out.append(evaluate_scenes(model, scenes, flags,
                                       label=f"noise_sigma={v:g}",
                                       noise_sigma=float(v), **kw))
        else:
            out.append(evaluate_scenes(model, scenes, flags,
                                       label=f"c_thre={v:g}",
                                       c_thre=float(v), **kw))
    return out
