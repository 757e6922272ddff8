"""Left/right probability targets, audio-visual co-attention, consistency loss.

The audio-derived target comes from the signed magnitude difference between
the left and right spectrograms; the audio-visual probability comes from
cosine co-attention weighted by mirrored column-sigmoid maps. Targets are
plain arrays (never part of the gradient graph); the audio-visual side is a
Tensor so the loss can train the feature extractors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor,
    bce_loss,
    cosine_rows,
    mul,
    permute,
    reduce_max,
    repeat_rows,
    reshape,
    sigmoid_act,
    stable_sigmoid,
    sub,
    tile_rows,
)
from .dsp import ComplexSpectrogram, pool_magnitude

PROB_CLAMP = 1e-7
SILENCE_RANGE = 1e-8


@dataclass
class ProbMap:
    """Left-vs-right probability grid; entries strictly inside (0, 1)."""

    grid: np.ndarray

    def __post_init__(self) -> None:
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if not np.all((self.grid > 0.0) & (self.grid < 1.0)):
            raise ValueError("probability map entries must lie strictly in (0, 1)")


@dataclass(frozen=True)
class WeightParams:
    """Column-sigmoid slope and offset; q > 0, the left map uses slope -q."""

    q: float
    r: float

    def __post_init__(self) -> None:
        if self.q <= 0:
            raise ValueError("weight slope q must be positive")

    @staticmethod
    def centered(w: int) -> "WeightParams":
        q = 8.0 / w
        return WeightParams(q=q, r=-q * (w - 1) / 2.0)


def magnitude_diff(
    s_left: ComplexSpectrogram | np.ndarray,
    s_right: ComplexSpectrogram | np.ndarray,
    target: tuple[int, int] | None = None,
) -> np.ndarray:
    """Signed per-cell |left| - |right|, optionally block-pooled to ``target``.

    Accepts spectrogram objects or raw complex grids. Pooling is applied to
    each magnitude before subtraction (block means commute with it).
    """
    gl = s_left.grid if isinstance(s_left, ComplexSpectrogram) else np.asarray(s_left)
    gr = s_right.grid if isinstance(s_right, ComplexSpectrogram) else np.asarray(s_right)
    if gl.shape != gr.shape:
        raise ValueError(f"magnitude_diff: shape mismatch {gl.shape} vs {gr.shape}")
    ml, mr = np.abs(gl), np.abs(gr)
    if target is None:
        return ml - mr
    return pool_magnitude(ml, target) - pool_magnitude(mr, target)


def lr_prob_audio(diff: np.ndarray) -> ProbMap:
    """Sigmoid of the range-normalized difference; 0.5 everywhere on silence.

    The result is a constant training target; no gradient flows through it.
    """
    diff = np.asarray(diff, dtype=np.float64)
    if not np.all(np.isfinite(diff)):
        raise ValueError("lr_prob_audio: non-finite difference values")
    spread = float(diff.max() - diff.min())
    if spread < SILENCE_RANGE:
        return ProbMap(np.full(diff.shape, 0.5))
    p = stable_sigmoid(diff / spread)
    return ProbMap(np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP))


def coattention(v: Tensor, a: Tensor) -> Tensor:
    """Cosine similarity of every audio patch against every visual cell.

    v: (d, h, w) visual feature, a: (d, u, t) audio feature. Returns a
    (u*t, h, w) tensor; patch k is the C-order cell (u, t) index.
    """
    if v.data.ndim != 3 or a.data.ndim != 3 or v.shape[0] != a.shape[0]:
        raise ValueError(f"coattention: incompatible shapes v{v.shape} a{a.shape}")
    d, h, w = v.shape
    n = a.shape[1] * a.shape[2]
    rows_v = reshape(permute(v, (1, 2, 0)), (h * w, d))
    rows_a = reshape(permute(a, (1, 2, 0)), (n, d))
    sims = cosine_rows(repeat_rows(rows_a, h * w), tile_rows(rows_v, n))
    return reshape(sims, (n, h, w))


def weight_maps(w: int, h: int, q: float, r: float) -> tuple[np.ndarray, np.ndarray]:
    """Column-constant sigmoid weight maps (W_L, W_R), each h-by-w."""
    if q <= 0:
        raise ValueError("weight slope q must be positive")
    x = np.arange(w, dtype=np.float64)
    row_r = stable_sigmoid(q * x + r)
    row_l = stable_sigmoid(-(q * x + r))
    return np.tile(row_l, (h, 1)), np.tile(row_r, (h, 1))


def lr_prob_av(c: Tensor, w_l: np.ndarray, w_r: np.ndarray) -> Tensor:
    """Per-patch left/right probability from weighted co-attention maxima.

    Differentiable through the argmax cells. Under centered weight params the
    exact mirror law holds: lr_prob_av(flip_w(C)) == 1 - lr_prob_av(C).
    """
    if c.data.ndim != 3 or w_l.shape != c.shape[1:] or w_r.shape != c.shape[1:]:
        raise ValueError(
            f"lr_prob_av: shape mismatch C{c.shape} W_L{w_l.shape} W_R{w_r.shape}"
        )
    wl = Tensor(np.broadcast_to(w_l.astype(c.dtype), c.shape).copy())
    wr = Tensor(np.broadcast_to(w_r.astype(c.dtype), c.shape).copy())
    best_l = reduce_max(mul(c, wl), axes=(1, 2))
    best_r = reduce_max(mul(c, wr), axes=(1, 2))
    return sigmoid_act(sub(best_l, best_r))


def consistency_loss(p_av: Tensor, p_a: ProbMap | np.ndarray) -> Tensor:
    """Mean BCE with the audio-visual map as prediction, audio map as target."""
    target = p_a.grid if isinstance(p_a, ProbMap) else np.asarray(p_a, dtype=np.float64)
    if target.size != p_av.data.size:
        raise ValueError(
            f"consistency_loss: size mismatch {p_av.shape} vs {target.shape}"
        )
    return bce_loss(p_av, Tensor(target.reshape(p_av.shape)))
