"""Dense tensor core with reverse-mode automatic differentiation.

Graphs are built eagerly; each op attaches a closure that scatters the
upstream gradient into its parents. Kernels are numpy-backed; convolutions
go through im2col + GEMM. Double precision is the default, single precision
is accepted for training speed.
"""
from __future__ import annotations

import json
import struct

import numpy as np

BCE_CLAMP = 1e-7
COSINE_EPS = 1e-8
NORM_EPS = 1e-5


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._prev = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar; repeated calls accumulate grads."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        self._accum(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._prev:
            stack.append((p, False))
    return order


def _make(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = tuple(parents)
        out._backward = backward
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise and scalar ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        def back(g):
            a._accum(g)
        return _make(a.data + b, (a,), back)
    _check_same_shape("add", a, b)

    def back(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g)

    return _make(a.data + b.data, (a, b), back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def back(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(-g)

    return _make(a.data - b.data, (a, b), back)


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, (int, float)):
        def back(g):
            a._accum(g * b)
        return _make(a.data * b, (a,), back)
    _check_same_shape("mul", a, b)

    def back(g):
        if a.requires_grad:
            a._accum(g * b.data)
        if b.requires_grad:
            b._accum(g * a.data)

    return _make(a.data * b.data, (a, b), back)


def mean(x: Tensor, axes=None, keepdims: bool = False) -> Tensor:
    y = np.mean(x.data, axis=axes, keepdims=keepdims)
    count = x.data.size if axes is None else np.prod([x.shape[a] for a in np.atleast_1d(axes)])

    def back(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, tuple(np.atleast_1d(axes)))
        x._accum(np.broadcast_to(g, x.shape) / count)

    return _make(y, (x,), back)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def stable_sigmoid(t: np.ndarray) -> np.ndarray:
    """Two-branch sigmoid; exact complement symmetry sigmoid(-t) == 1 - sigmoid(t)."""
    e = np.exp(-np.abs(t))
    base = 1.0 / (1.0 + e)
    return np.where(t >= 0, base, 1.0 - base)


def sigmoid_act(x: Tensor) -> Tensor:
    y = stable_sigmoid(x.data)

    def back(g):
        x._accum(g * y * (1.0 - y))

    return _make(y, (x,), back)


def tanh_act(x: Tensor) -> Tensor:
    y = np.tanh(x.data)

    def back(g):
        x._accum(g * (1.0 - y * y))

    return _make(y, (x,), back)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data >= 0
    y = np.where(pos, x.data, slope * x.data)

    def back(g):
        x._accum(np.where(pos, g, slope * g))

    return _make(y, (x,), back)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def back(g):
        x._accum(g.reshape(x.shape))

    return _make(x.data.reshape(shape), (x,), back)


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def back(g):
        x._accum(g.transpose(inv))

    return _make(x.data.transpose(axes), (x,), back)


def concat_channels(parts: list[Tensor], axis: int = 1) -> Tensor:
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accum(g[tuple(idx)])

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, back)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def back(g):
        buf = np.zeros_like(x.data)
        buf[idx] = g
        x._accum(buf)

    return _make(x.data[idx].copy(), (x,), back)


def tile_rows(x: Tensor, k: int) -> Tensor:
    """Stack k copies of a 2-D matrix vertically."""
    n = x.shape[0]

    def back(g):
        x._accum(g.reshape(k, n, -1).sum(axis=0).reshape(x.shape))

    return _make(np.tile(x.data, (k, 1)), (x,), back)


def repeat_rows(x: Tensor, k: int) -> Tensor:
    """Repeat each row of a 2-D matrix k consecutive times."""
    n = x.shape[0]

    def back(g):
        x._accum(g.reshape(n, k, -1).sum(axis=1).reshape(x.shape))

    return _make(np.repeat(x.data, k, axis=0), (x,), back)


def tile_hw(x: Tensor, h: int, w: int) -> Tensor:
    """Broadcast an (N, C, 1, 1) tensor over an h-by-w spatial grid."""
    if x.shape[2:] != (1, 1):
        raise ValueError(f"tile_hw: expected trailing (1, 1) dims, got {x.shape}")

    def back(g):
        x._accum(g.sum(axis=(2, 3), keepdims=True))

    return _make(np.tile(x.data, (1, 1, h, w)), (x,), back)


# ---------------------------------------------------------------------------
# reductions and similarity
# ---------------------------------------------------------------------------

def reduce_max(x: Tensor, axes) -> Tensor:
    """Max over an axis set; the subgradient routes to the first argmax."""
    axes = tuple(sorted(np.atleast_1d(axes).tolist()))
    kept = tuple(i for i in range(x.data.ndim) if i not in axes)
    moved = x.data.transpose(kept + axes)
    flat = moved.reshape(int(np.prod([x.shape[i] for i in kept], initial=1)), -1)
    arg = np.argmax(flat, axis=1)
    y = flat[np.arange(flat.shape[0]), arg].reshape([x.shape[i] for i in kept])

    def back(g):
        buf = np.zeros_like(flat)
        buf[np.arange(flat.shape[0]), arg] = g.reshape(-1)
        inv = tuple(np.argsort(kept + axes))
        x._accum(buf.reshape(moved.shape).transpose(inv))

    return _make(y, (x,), back)


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Row-wise cosine similarity of two (n, d) matrices, eps-floored norms."""
    _check_same_shape("cosine_rows", a, b)
    na = np.maximum(np.linalg.norm(a.data, axis=1), COSINE_EPS)
    nb = np.maximum(np.linalg.norm(b.data, axis=1), COSINE_EPS)
    dot = np.sum(a.data * b.data, axis=1)
    y = np.clip(dot / (na * nb), -1.0, 1.0)  # rounding guard for the cosine range

    def back(g):
        if a.requires_grad:
            live = (np.linalg.norm(a.data, axis=1) > COSINE_EPS).astype(a.data.dtype)
            da = b.data / (na * nb)[:, None] - (live * y / na**2)[:, None] * a.data
            a._accum(g[:, None] * da)
        if b.requires_grad:
            live = (np.linalg.norm(b.data, axis=1) > COSINE_EPS).astype(b.data.dtype)
            db = a.data / (na * nb)[:, None] - (live * y / nb**2)[:, None] * b.data
            b._accum(g[:, None] * db)

    return _make(y, (a, b), back)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def l2_loss(x: Tensor, target) -> Tensor:
    """Euclidean (Frobenius) norm of x - target."""
    target = as_tensor(target)
    _check_same_shape("l2_loss", x, target)
    d = x.data - target.data
    norm = float(np.sqrt(np.sum(d * d)))

    def back(g):
        scale = g / norm if norm > 0 else 0.0
        if x.requires_grad:
            x._accum(scale * d)
        if target.requires_grad:
            target._accum(-scale * d)

    return _make(np.asarray(norm, dtype=x.dtype), (x, target), back)


def bce_loss(p: Tensor, q) -> Tensor:
    """Mean binary cross entropy, prediction p clamped to [1e-7, 1 - 1e-7]."""
    q = as_tensor(q)
    _check_same_shape("bce_loss", p, q)
    pc = np.clip(p.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    inside = (p.data > BCE_CLAMP) & (p.data < 1.0 - BCE_CLAMP)
    n = p.data.size
    y = -np.mean(q.data * np.log(pc) + (1.0 - q.data) * np.log(1.0 - pc))

    def back(g):
        if p.requires_grad:
            dp = np.where(inside, -(q.data / pc - (1.0 - q.data) / (1.0 - pc)) / n, 0.0)
            p._accum(g * dp)
        if q.requires_grad:
            q._accum(g * (-(np.log(pc) - np.log(1.0 - pc)) / n))

    return _make(np.asarray(y, dtype=p.dtype), (p, q), back)


# ---------------------------------------------------------------------------
# convolutions (im2col + GEMM)
# ---------------------------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, c: int, kh: int, kw: int, s: int, h: int, w: int,
            p: int, ho: int, wo: int) -> np.ndarray:
    n = cols.shape[0]
    blocks = cols.reshape(n, c, kh, kw, ho, wo)
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + s * ho : s, j : j + s * wo : s] += blocks[:, :, i, j]
    return xp[:, :, p : p + h, p : p + w]


def _conv_geometry(h: int, w: int, kh: int, kw: int, s: int, p: int) -> tuple[int, int]:
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv2d: kernel ({kh},{kw}) too large for input ({h},{w})")
    return ho, wo


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1,
           pad: int = 0) -> Tensor:
    """2-D cross-correlation, x: (N,C,H,W), w: (O,C,kh,kw), zero padding."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: incompatible shapes x{x.shape} w{w.shape}")
    n, c, h, wi = x.shape
    o, _, kh, kw = w.shape
    ho, wo = _conv_geometry(h, wi, kh, kw, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    w2 = w.data.reshape(o, -1)
    y = np.matmul(w2, cols)
    if b is not None:
        y = y + b.data[None, :, None]
    out = y.reshape(n, o, ho, wo)
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        g2 = g.reshape(n, o, -1)
        if w.requires_grad:
            w._accum(np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            x._accum(_col2im(dcols, c, kh, kw, stride, h, wi, pad, ho, wo))
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(0, 2, 3)))

    return _make(out, parents, back)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2,
                     pad: int = 0, out_hw: tuple[int, int] | None = None) -> Tensor:
    """Exact adjoint of conv2d with the same geometry; w: (C_in, C_out, kh, kw)."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[0]:
        raise ValueError(f"conv_transpose2d: incompatible shapes x{x.shape} w{w.shape}")
    n, ci, hin, win = x.shape
    _, co, kh, kw = w.shape
    if out_hw is None:
        out_hw = ((hin - 1) * stride - 2 * pad + kh, (win - 1) * stride - 2 * pad + kw)
    h, wi = out_hw
    ho, wo = _conv_geometry(h, wi, kh, kw, stride, pad)
    if (ho, wo) != (hin, win):
        raise ValueError(
            f"conv_transpose2d: input {(hin, win)} not the conv image of out {out_hw}"
        )
    w2 = w.data.reshape(ci, -1)
    x2 = x.data.reshape(n, ci, -1)
    cols = np.matmul(w2.T, x2)
    y = _col2im(cols, co, kh, kw, stride, h, wi, pad, ho, wo)
    if b is not None:
        y = y + b.data[None, :, None, None]
    parents = (x, w) if b is None else (x, w, b)

    def back(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        gcols = _im2col(gp, kh, kw, stride, ho, wo)
        if x.requires_grad:
            x._accum(np.matmul(w2, gcols).reshape(x.shape))
        if w.requires_grad:
            w._accum(np.matmul(x2, gcols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(0, 2, 3)))

    return _make(y, parents, back)


def channel_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Per-sample, per-channel normalization over spatial dims with affine."""
    if x.data.ndim != 4 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ValueError(
            f"channel_norm: incompatible shapes x{x.shape} gamma{gamma.shape} beta{beta.shape}"
        )
    m = x.shape[2] * x.shape[3]
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def back(g):
        if beta.requires_grad:
            beta._accum(g.sum(axis=(0, 2, 3)))
        if gamma.requires_grad:
            gamma._accum((g * xhat).sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            s1 = dxhat.sum(axis=(2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(2, 3), keepdims=True)
            x._accum((dxhat - s1 / m - xhat * s2 / m) * inv)

    return _make(y, (x, gamma, beta), back)


# ---------------------------------------------------------------------------
# gradient checking and optimization
# ---------------------------------------------------------------------------

def grad_check(fn, inputs: list[Tensor], eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients."""
    for t in inputs:
        t.zero_grad()
    loss = fn(*inputs)
    loss.backward()
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad.copy() if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = float(fn(*inputs).data)
            flat[i] = orig - eps
            lo = float(fn(*inputs).data)
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


class AdamState:
    def __init__(self):
        self.step = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Standard Adam update with bias correction, in place."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise ValueError(f"diverged: non-finite gradient for {name!r} at step {t}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m += (1 - beta1) * (g - m)
        v += (1 - beta2) * (g * g - v)
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------
#
# Little-endian layout:
#   magic  b"BNZT" | version u32 | meta_len u32 | meta (UTF-8 JSON)
#   count  u32
#   per tensor: name_len u32 | name UTF-8 | rank u32 | dims u32*rank |
#               values float64
#
MAGIC = b"BNZT"
VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            nb = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype=np.float64)
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        version, meta_len = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        meta = json.loads(f.read(meta_len).decode("utf-8"))
        (count,) = struct.unpack("<I", f.read(4))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", f.read(4))
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", f.read(4))
            dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
            n = int(np.prod(dims, initial=1))
            tensors[name] = np.frombuffer(f.read(8 * n), dtype="<f8").reshape(dims).copy()
    return meta, tensors
