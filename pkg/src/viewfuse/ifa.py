"""Cascaded BEV aggregation over shared camera views.

A grid of bird's-eye-view queries attends to every available feature map
with a small deformable-attention step: each query emits a handful of
sampling offsets and weights, samples each view at its projected reference
points over several heights, and averages over the views that actually
observe the point. Blocks are residual and repeat; unobserved cells ride
through untouched.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraModel, Pose, project_points
from .tensor import (
    Mlp,
    Tensor,
    as_tensor,
    bilinear_sample,
    layer_norm,
    scatter_rows,
    softmax,
)


@dataclass(frozen=True)
class BevGridSpec:
    """Metric layout of the query grid, origin cell on the ego center."""
    grid_h: int = 32
    grid_w: int = 32
    resolution: float = 1.0      # metres per cell
    n_ref: int = 4
    z_min: float = -1.0
    z_max: float = 3.0

    def __post_init__(self):
        if self.grid_h % 2 or self.grid_w % 2:
            raise ValueError("grid dims must be even")
        if self.grid_h <= 0 or self.grid_w <= 0 or self.resolution <= 0:
            raise ValueError("grid dims and resolution must be positive")
        if self.n_ref < 1:
            raise ValueError("need at least one reference height")
        if not self.z_min < self.z_max and self.n_ref > 1:
            raise ValueError("height range must be increasing")

    def heights(self) -> np.ndarray:
        if self.n_ref == 1:
            return np.array([0.5 * (self.z_min + self.z_max)])
        return np.linspace(self.z_min, self.z_max, self.n_ref)

    def cell_xy(self) -> np.ndarray:
        """Ego-frame (x, y) of every cell, row-major [H*W, 2].

        Cell (H/2, W/2) sits exactly on the ego origin.
        """
        jj, ii = np.meshgrid(np.arange(self.grid_w), np.arange(self.grid_h))
        x = (jj - self.grid_w // 2) * self.resolution
        y = (ii - self.grid_h // 2) * self.resolution
        return np.stack([x.ravel(), y.ravel()], axis=1)

    def reference_points(self) -> np.ndarray:
        """[n_ref, H*W, 3] world points in the ego frame."""
        xy = self.cell_xy()
        out = np.empty((self.n_ref, xy.shape[0], 3))
        for h, z in enumerate(self.heights()):
            out[h, :, :2] = xy
            out[h, :, 2] = z
        return out


@dataclass
class BevState:
    q: Tensor                 # [C, H, W]
    spec: BevGridSpec


@dataclass
class BevView:
    """One feature map the BEV queries may attend to.

    ``mask`` marks cells that actually carry content (None means the whole
    map does); a reference point only counts as observed where its
    projection lands on a masked-in cell, so empty reconstructions do not
    dilute the average.
    """
    features: Tensor          # [C, fh, fw]
    cam: CameraModel
    agent_pose_in_ego: Pose
    agent_id: int
    view_id: int
    valid: bool = True
    mask: np.ndarray | None = None


def _ring_bias(n_da: int, radius: float = 1.0) -> np.ndarray:
    """Initial offsets fan out in a ring; weight logits start uniform."""
    bias = np.zeros(3 * n_da)
    for i in range(n_da):
        ang = 2.0 * math.pi * i / n_da
        bias[2 * i] = radius * math.cos(ang)
        bias[2 * i + 1] = radius * math.sin(ang)
    return bias


class IfaBlock:
    """One aggregation block: norm, deformable sampling, norm, FFN.

    Residual throughout; the offset head and FFN final layers start at zero
    so a fresh block is the identity on unobserved input.
    """

    def __init__(self, c: int, n_da: int, rng: np.random.Generator,
                 name: str = "ifa"):
        if n_da < 1:
            raise ValueError("need at least one sampling point")
        self.c = c
        self.n_da = n_da
        self.name = name
        self.off_mlp = Mlp([c, c, 3 * n_da], rng, name=f"{name}_off",
                           final_zero=True, final_bias=_ring_bias(n_da))
        self.ffn = Mlp([c, 2 * c, c], rng, name=f"{name}_ffn", final_zero=True)
        self.ln1_g = Tensor(np.ones(c), requires_grad=True)
        self.ln1_b = Tensor(np.zeros(c), requires_grad=True)
        self.ln2_g = Tensor(np.ones(c), requires_grad=True)
        self.ln2_b = Tensor(np.zeros(c), requires_grad=True)

    def params(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.off_mlp.params())
        out.update(self.ffn.params())
        out[f"{self.name}.ln1_g"] = self.ln1_g
        out[f"{self.name}.ln1_b"] = self.ln1_b
        out[f"{self.name}.ln2_g"] = self.ln2_g
        out[f"{self.name}.ln2_b"] = self.ln2_b
        return out

    def offsets_and_weights(self, queries: Tensor):
        """[N, C] queries -> offsets [N, n_da, 2] (cells), weights [N, n_da]."""
        raw = self.off_mlp(queries)
        n = queries.shape[0]
        off = raw[:, : 2 * self.n_da].reshape(n, self.n_da, 2)
        wts = softmax(raw[:, 2 * self.n_da:], axis=-1)
        return off, wts


def _view_features(view) -> Tensor:
    return as_tensor(view.features if hasattr(view, "features") else view)


def deformable_sample(block: IfaBlock, query_vec: Tensor, view,
                      p: tuple[float, float]) -> Tensor:
    """Weighted bilinear samples of one view around one projected point.

    Off-map sampling positions fade to zero under the padding rule of
    bilinear_sample; the result stays differentiable in the query (through
    offsets and weights) and in the view features.
    """
    fmap = _view_features(view)
    q = as_tensor(query_vec).reshape(1, block.c)
    off, wts = block.offsets_and_weights(q)
    base = np.asarray(p, dtype=np.float64)[None, None, :]
    pts = (off + base).reshape(block.n_da, 2)
    samp = bilinear_sample(fmap, pts)                      # [n_da, C]
    return (samp * wts.reshape(block.n_da, 1)).sum(axis=0)


def aggregate_reference_point(f_per_view: list[Tensor], flags) -> Tensor | None:
    """Mean over the observing views; None marks a point nobody sees."""
    flags = [bool(f) for f in flags]
    if len(flags) != len(f_per_view):
        raise ValueError("one flag per view required")
    chosen = [f for f, ok in zip(f_per_view, flags) if ok]
    if not chosen:
        return None
    total = chosen[0]
    for f in chosen[1:]:
        total = total + f
    return total * (1.0 / len(chosen))


def _observation_flags(view: BevView, uv: np.ndarray,
                       ok: np.ndarray) -> np.ndarray:
    """Geometric validity refined by the view's content mask."""
    if view.mask is None:
        return ok
    fh, fw = view.mask.shape
    cols = np.clip(np.rint(uv[:, 0]).astype(np.intp), 0, fw - 1)
    rows = np.clip(np.rint(uv[:, 1]).astype(np.intp), 0, fh - 1)
    return ok & view.mask[rows, cols]


def ifa_block_forward(block: IfaBlock, state: BevState,
                      views: list[BevView],
                      lattice: BevGridSpec | None = None) -> BevState:
    """Advance the BEV state through one aggregation block.

    Views are visited in sorted (agent, view) order so the mean is
    bit-stable under permutations of the input list. Per cell, heights
    observed by no view are skipped and cells observed at no height keep
    their query value through the residual path.
    """
    spec = lattice if lattice is not None else state.spec
    c, gh, gw = state.q.shape
    hw = gh * gw
    qf = state.q.reshape(c, hw).transpose()                # [HW, C]
    nq = layer_norm(qf, block.ln1_g, block.ln1_b)
    off, wts = block.offsets_and_weights(nq)
    refs = spec.reference_points()

    active = sorted((v for v in views if v.valid),
                    key=lambda v: (v.agent_id, v.view_id))
    h_sum = None
    h_cnt = np.zeros(hw)
    for h in range(spec.n_ref):
        v_sum = None
        v_cnt = np.zeros(hw)
        for view in active:
            uv, _, ok = project_points(refs[h], view.cam,
                                       view.agent_pose_in_ego)
            obs = _observation_flags(view, uv, ok)
            idx = np.nonzero(obs)[0]
            if idx.size == 0:
                continue
            m = idx.size
            base = uv[idx][:, None, :]                     # [M, 1, 2]
            pts = (off[idx] + base).reshape(m * block.n_da, 2)
            samp = bilinear_sample(view.features, pts)
            samp = samp.reshape(m, block.n_da, c)
            f = (samp * wts[idx].reshape(m, block.n_da, 1)).sum(axis=1)
            part = scatter_rows(f, idx, hw)
            v_sum = part if v_sum is None else v_sum + part
            v_cnt[idx] += 1
        if v_sum is None:
            continue
        seen = v_cnt > 0
        v_inv = np.where(seen, 1.0 / np.maximum(v_cnt, 1), 0.0)
        h_sum_part = v_sum * v_inv[:, None]
        h_sum = h_sum_part if h_sum is None else h_sum + h_sum_part
        h_cnt += seen

    if h_sum is not None:
        h_inv = np.where(h_cnt > 0, 1.0 / np.maximum(h_cnt, 1), 0.0)
        q1 = qf + h_sum * h_inv[:, None]
    else:
        q1 = qf
    q2 = q1 + block.ffn(layer_norm(q1, block.ln2_g, block.ln2_b))
    return BevState(q2.transpose().reshape(c, gh, gw), spec)


def ifa_cascade(state0: BevState, views: list[BevView],
                lattice: BevGridSpec, blocks: list[IfaBlock]) -> Tensor:
    """Run the blocks in sequence; each output feeds the next as queries."""
    if not blocks:
        raise ValueError("cascade needs at least one block")
    state = state0
    for block in blocks:
        state = ifa_block_forward(block, state, views, lattice)
    return state.q
