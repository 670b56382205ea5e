"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op builds a node holding numpy data plus a vector-Jacobian closure.
``backward`` walks the graph in reverse topological order and accumulates
gradients into ``.grad`` on every reachable tensor that requires them.
Gradient flow inside a single backward pass uses a scratch map, so calling
``backward`` twice on the same graph adds the same gradient twice (no
stale-state coupling between passes).

All arithmetic is float64 end to end; there is no dtype promotion to fight.
"""

from __future__ import annotations

import math

import numpy as np


class ShapeError(ValueError):
    """Raised for rank/shape/class-range violations."""


class NumericError(ArithmeticError):
    """Raised when an op receives or produces non-finite values it cannot accept."""


def _arr(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _arr(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    # ---- bookkeeping ----

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # ---- graph construction ----

    @staticmethod
    def _make(data: np.ndarray, parents: tuple, vjp) -> "Tensor":
        out = Tensor(data)
        if any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._vjp = vjp
        return out

    # ---- elementwise arithmetic (numpy broadcasting rules) ----

    def __add__(self, other):
        a, b = self, as_tensor(other)
        return Tensor._make(
            a.data + b.data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        a, b = self, as_tensor(other)
        return Tensor._make(
            a.data - b.data,
            (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        )

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        a, b = self, as_tensor(other)
        return Tensor._make(
            a.data * b.data,
            (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        a, b = self, as_tensor(other)
        return Tensor._make(
            a.data / b.data,
            (a, b),
            lambda g: (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
            ),
        )

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise ShapeError("pow exponent must be a python scalar")
        a = self
        out_data = a.data ** p
        return Tensor._make(out_data, (a,), lambda g: (g * p * a.data ** (p - 1),))

    def __matmul__(self, other):
        a, b = self, as_tensor(other)
        if a.ndim != 2 or b.ndim != 2:
            raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
        return Tensor._make(
            a.data @ b.data,
            (a, b),
            lambda g: (g @ b.data.T, a.data.T @ g),
        )

    # ---- elementwise functions ----

    def exp(self):
        out_data = np.exp(self.data)
        return Tensor._make(out_data, (self,), lambda g: (g * out_data,))

    def log(self):
        a = self
        return Tensor._make(np.log(a.data), (a,), lambda g: (g / a.data,))

    def sqrt(self):
        out_data = np.sqrt(self.data)
        return Tensor._make(out_data, (self,), lambda g: (g * 0.5 / out_data,))

    def abs(self):
        a = self
        # subgradient at 0 is 0 (sign(0) == 0)
        return Tensor._make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))

    def relu(self):
        a = self
        mask = a.data > 0.0
        return Tensor._make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))

    def sigmoid(self):
        # stable two-branch evaluation
        x = self.data
        out_data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                            np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return Tensor._make(out_data, (self,), lambda g: (g * out_data * (1.0 - out_data),))

    def softplus(self):
        x = self.data
        out_data = np.logaddexp(0.0, x)
        sig = 1.0 / (1.0 + np.exp(-np.clip(x, -500, 500)))
        return Tensor._make(out_data, (self,), lambda g: (g * sig,))

    # ---- reductions / reshaping ----

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            return (np.broadcast_to(gg, a.shape).copy(),)

        return Tensor._make(np.asarray(out_data, dtype=np.float64), (a,), vjp)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.size
        elif isinstance(axis, tuple):
            n = int(np.prod([self.shape[i] for i in axis]))
        else:
            n = self.shape[axis]
        if n == 0:
            raise ShapeError("mean over an empty axis")
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        return Tensor._make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))

    def transpose(self, axes=None):
        a = self
        out_data = np.transpose(a.data, axes)
        if axes is None:
            inv = None
        else:
            inv = tuple(np.argsort(axes))
        return Tensor._make(out_data, (a,), lambda g: (np.transpose(g, inv),))

    @property
    def T(self):
        return self.transpose()

    def __getitem__(self, key):
        a = self
        out_data = a.data[key]
        if isinstance(out_data, np.ndarray) and out_data.base is not None:
            out_data = out_data.copy()

        def vjp(g):
            z = np.zeros_like(a.data)
            z[key] = g
            return (z,)

        return Tensor._make(np.asarray(out_data, dtype=np.float64), (a,), vjp)

    # ---- backward ----

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into ``.grad`` over the whole graph.

        The root must be scalar (any shape with exactly one element).
        """
        if self.size != 1:
            raise ShapeError(f"backward root must be scalar, got shape {self.shape}")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        flow: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flow.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for p, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                k = id(p)
                if k in flow:
                    flow[k] = flow[k] + pg
                else:
                    flow[k] = pg


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; gradient splits back to the inputs."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty sequence")
    data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        outs = []
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            outs.append(g[tuple(sl)])
        return tuple(outs)

    return Tensor._make(data, tuple(ts), vjp)


def take_rows(x: Tensor, idx) -> Tensor:
    """Gather rows of ``x`` along axis 0; duplicate indices are fine."""
    idx = np.asarray(idx, dtype=np.intp)
    a = as_tensor(x)
    out_data = np.take(a.data, idx, axis=0)

    def vjp(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return Tensor._make(out_data, (a,), vjp)


def scatter_rows(x: Tensor, idx, n_rows: int) -> Tensor:
    """Scatter-add rows of ``x`` into a zero tensor with ``n_rows`` rows."""
    idx = np.asarray(idx, dtype=np.intp)
    a = as_tensor(x)
    if idx.shape[0] != a.shape[0]:
        raise ShapeError(f"scatter_rows: {idx.shape[0]} indices for {a.shape[0]} rows")
    out_data = np.zeros((n_rows,) + a.shape[1:])
    np.add.at(out_data, idx, a.data)
    return Tensor._make(out_data, (a,), lambda g: (g[idx],))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Shift-stabilized softmax along ``axis``. Non-finite input is an error."""
    a = as_tensor(x)
    if not np.all(np.isfinite(a.data)):
        raise NumericError("softmax received non-finite input")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        return ((g - dot) * out_data,)

    return Tensor._make(out_data, (a,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift.

    A constant row maps to ``beta`` (variance 0 is absorbed by ``eps``).
    """
    x = as_tensor(x)
    if x.shape[-1] == 0:
        raise ShapeError("layer_norm over an empty last axis")
    if eps <= 0.0:
        raise ShapeError("layer_norm eps must be > 0")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    y = xc / (var + eps).sqrt()
    return y * gamma + beta


def bilinear_sample(fmap: Tensor, pts) -> Tensor:
    """Bilinearly sample ``fmap`` ([C, H, W]) at points ``pts`` ([N, 2] of (u, v)).

    u indexes the W axis, v the H axis; values live at integer lattice points.
    Out-of-lattice neighbors contribute zero, so samples fade linearly to zero
    across the one-cell band outside [0, W-1] x [0, H-1] and are exactly zero
    beyond it. Differentiable in both the map and the points.
    """
    fmap = as_tensor(fmap)
    if fmap.ndim != 3:
        raise ShapeError(f"bilinear_sample expects [C, H, W] map, got {fmap.shape}")
    pts_t = pts if isinstance(pts, Tensor) else None
    p = pts.data if isinstance(pts, Tensor) else _arr(pts)
    if p.ndim != 2 or p.shape[1] != 2:
        raise ShapeError(f"bilinear_sample expects [N, 2] points, got {p.shape}")
    c, h, w = fmap.shape
    flat = fmap.data.reshape(c, h * w).T  # [H*W, C]

    u = p[:, 0]
    v = p[:, 1]
    u0 = np.floor(u).astype(np.intp)
    v0 = np.floor(v).astype(np.intp)
    fu = u - u0
    fv = v - v0

    corners = []
    for dv, du, wgt in (
        (0, 0, (1 - fu) * (1 - fv)),
        (0, 1, fu * (1 - fv)),
        (1, 0, (1 - fu) * fv),
        (1, 1, fu * fv),
    ):
        ui = u0 + du
        vi = v0 + dv
        ok = (ui >= 0) & (ui < w) & (vi >= 0) & (vi < h)
        lin = np.where(ok, vi * w + ui, 0)
        val = flat[lin] * ok[:, None]  # [N, C]
        corners.append((lin, ok, wgt, val))

    out_data = np.zeros((p.shape[0], c))
    for _, _, wgt, val in corners:
        out_data += wgt[:, None] * val

    parents = (fmap,) if pts_t is None else (fmap, pts_t)

    def vjp(g):
        gmap = None
        if fmap.requires_grad:
            gflat = np.zeros_like(flat)
            for lin, ok, wgt, _ in corners:
                np.add.at(gflat, lin[ok], (wgt[:, None] * g)[ok])
            gmap = gflat.T.reshape(c, h, w)
        if pts_t is None:
            return (gmap,)
        (_, _, _, v00), (_, _, _, v10), (_, _, _, v01), (_, _, _, v11) = corners
        du_val = (1 - fv)[:, None] * (v10 - v00) + fv[:, None] * (v11 - v01)
        dv_val = (1 - fu)[:, None] * (v01 - v00) + fu[:, None] * (v11 - v10)
        gp = np.stack([(g * du_val).sum(axis=1), (g * dv_val).sum(axis=1)], axis=1)
        return (gmap, gp)

    return Tensor._make(out_data, parents, vjp)


BACKGROUND = -1


def focal_loss(logits: Tensor, targets, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Sigmoid focal loss over [N, K] logits.

    ``targets`` holds one class id per row; ``BACKGROUND`` (-1) marks rows whose
    classes are all negatives. Summed over classes, averaged over rows.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"focal_loss expects [N, K] logits, got {logits.shape}")
    n, k = logits.shape
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (n,):
        raise ShapeError(f"focal_loss targets shape {t.shape} for {n} rows")
    if np.any(t >= k) or np.any(t < BACKGROUND):
        raise ShapeError(f"focal_loss class id out of range [0, {k})")
    if not (0.0 < alpha < 1.0) or gamma < 0.0:
        raise ShapeError("focal_loss requires alpha in (0, 1) and gamma >= 0")
    if n == 0:
        return Tensor(0.0)

    onehot = np.zeros((n, k))
    rows = np.nonzero(t >= 0)[0]
    onehot[rows, t[rows]] = 1.0
    onehot_t = Tensor(onehot)

    p = logits.sigmoid()
    log_p = -((-logits).softplus())       # log sigmoid(x)
    log_1mp = -(logits.softplus())        # log (1 - sigmoid(x))
    pos = ((1.0 - p) ** gamma) * log_p * (-alpha)
    neg = (p ** gamma) * log_1mp * (-(1.0 - alpha))
    per = onehot_t * pos + (1.0 - onehot_t) * neg
    return per.sum() / float(n)


def l1_loss(pred: Tensor, target) -> Tensor:
    """Mean absolute error; tie subgradient at 0 is 0."""
    pred = as_tensor(pred)
    tgt = as_tensor(target)
    if pred.shape != tgt.shape:
        raise ShapeError(f"l1_loss shape mismatch: {pred.shape} vs {tgt.shape}")
    return (pred - tgt).abs().mean()


# ---- parameterized blocks ----


class Mlp:
    """Fully connected stack with ReLU between layers, linear last layer."""

    def __init__(self, widths, rng: np.random.Generator, name: str = "mlp",
                 final_zero: bool = False, final_bias=None):
        if len(widths) < 2:
            raise ShapeError("Mlp needs at least input and output widths")
        if any(int(w) <= 0 for w in widths):
            raise ShapeError(f"Mlp widths must be positive, got {widths}")
        self.name = name
        self.widths = tuple(int(w) for w in widths)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        last = len(widths) - 2
        for i, (fi, fo) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            if i == last:
                std = 0.0 if final_zero else 1.0 / math.sqrt(fi)
            else:
                std = math.sqrt(2.0 / fi)
            w = rng.normal(0.0, std, (fi, fo)) if std > 0 else np.zeros((fi, fo))
            b = np.zeros(fo)
            if i == last and final_bias is not None:
                b = _arr(final_bias).copy()
                if b.shape != (fo,):
                    raise ShapeError(f"final_bias shape {b.shape} != ({fo},)")
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(b, requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        x = as_tensor(x)
        if x.shape[-1] != self.widths[0]:
            raise ShapeError(f"{self.name}: input width {x.shape[-1]} != {self.widths[0]}")
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w + b
            if i < n - 1:
                x = x.relu()
        return x

    def params(self) -> dict[str, Tensor]:
        out = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{self.name}.w{i}"] = w
            out[f"{self.name}.b{i}"] = b
        return out


def sgd_step(params, lr: float) -> None:
    """In-place vanilla SGD over an iterable of tensors."""
    for p in params:
        if p.grad is not None:
            p.data -= lr * p.grad


class Adam:
    """Adam over a name -> Tensor dict; update order is sorted by name."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = dict(params)
        self.lr = float(lr)
        self.b1, self.b2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([float(self.t)])}
        for name in sorted(self.params):
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(arrays["adam.t"][0])
        for name in sorted(self.params):
            self.m[name] = _arr(arrays[f"adam.m.{name}"]).reshape(self.m[name].shape).copy()
            self.v[name] = _arr(arrays[f"adam.v.{name}"]).reshape(self.v[name].shape).copy()


def adam_step(opt: Adam) -> None:
    opt.step()
