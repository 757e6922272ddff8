"""Spatial audio synthesizer: spectrogram encoder-decoder with a visual
bottleneck and a small trainable visual encoder.

Frames are (H, W, 3) arrays in [0, 1] with column 0 at the physical left of
the scene. The synthesizer consumes the mono spectrogram as a 2-channel
real tensor (Re, Im) on a fixed grid, zero-padded along time, and emits two
complex masks through a bound-limited odd-sigmoid head plus the decoder
features used by the co-attention loss.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import (
    Tensor,
    channel_norm,
    concat_channels,
    conv2d,
    conv_transpose2d,
    leaky_relu,
    load_checkpoint,
    mean,
    mul,
    narrow,
    save_checkpoint,
    sigmoid_act,
    sub,
    tile_hw,
)
from .dsp import ComplexMask, ComplexSpectrogram, StftParams, Waveform, istft, stft_covering
from .dsp import BinauralWaveform, MASK_BOUND

SEGMENT_SECONDS = 0.63
TEST_HOP_SECONDS = 0.05
HEAD_BIAS = math.log(21.0 / 19.0)  # odd sigmoid of this is 0.05; times B gives 0.5


@dataclass(frozen=True)
class SynthesizerConfig:
    grid: tuple[int, int] = (256, 64)
    channels: tuple[int, ...] = (32, 64, 128, 256)
    visual_channels: tuple[int, ...] = (16, 32, 64, 64)
    visual_refine: int = 2
    frame_size: int = 128
    embed_dim: int = 64
    feature_layers: tuple[int, ...] = (1,)
    mask_bound: float = MASK_BOUND

    def __post_init__(self) -> None:
        s = len(self.channels)
        if self.grid[0] % (1 << s) or self.grid[1] % (1 << s):
            raise ValueError(f"grid {self.grid} not divisible by 2^{s}")
        if self.frame_size % (1 << len(self.visual_channels)):
            raise ValueError("frame_size not divisible by the visual stride")
        bad = [l for l in self.feature_layers if not 1 <= l <= s]
        if bad:
            raise ValueError(f"feature layers {bad} outside 1..{s}")

    @property
    def stages(self) -> int:
        return len(self.channels)

    @property
    def bottleneck(self) -> tuple[int, int]:
        s = self.stages
        return self.grid[0] >> s, self.grid[1] >> s

    @property
    def visual_grid(self) -> int:
        return self.frame_size >> len(self.visual_channels)

    def feature_grid(self, layer: int) -> tuple[int, int]:
        shift = self.stages - layer
        return self.grid[0] >> shift, self.grid[1] >> shift


def stft_params_for(config: SynthesizerConfig, sample_rate: int = 16000) -> StftParams:
    """Analysis parameters whose kept rows match the synthesizer grid."""
    return StftParams(sample_rate=sample_rate, kept_bins=config.grid[0])


def check_frame(frame: np.ndarray, size: int) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (size, size, 3):
        raise ValueError(f"frame shape {frame.shape} != ({size}, {size}, 3)")
    if frame.min() < 0.0 or frame.max() > 1.0:
        raise ValueError("frame values must lie in [0, 1]")
    return frame


class Synthesizer:
    """Holds all parameters; forward passes build fresh autodiff graphs."""

    def __init__(self, config: SynthesizerConfig | None = None, seed: int = 0,
                 dtype=np.float64):
        self.config = config or SynthesizerConfig()
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    # -- parameter construction -------------------------------------------
    def _conv_param(self, rng, name: str, shape, fan_in: int, zero: bool = False,
                    transpose: bool = False):
        w = np.zeros(shape) if zero else rng.normal(0.0, math.sqrt(2.0 / fan_in), shape)
        self.params[name + ".w"] = Tensor(w.astype(self.dtype), requires_grad=True)
        bias = np.zeros(shape[1] if transpose else shape[0])
        self.params[name + ".b"] = Tensor(bias.astype(self.dtype), requires_grad=True)

    def _norm_param(self, name: str, ch: int):
        self.params[name + ".g"] = Tensor(np.ones(ch, dtype=self.dtype), requires_grad=True)
        self.params[name + ".beta"] = Tensor(np.zeros(ch, dtype=self.dtype), requires_grad=True)

    def _init_params(self, rng) -> None:
        cfg = self.config
        ch_in = 2
        for i, ch in enumerate(cfg.channels, start=1):
            self._conv_param(rng, f"enc{i}", (ch, ch_in, 4, 4), ch_in * 16)
            self._norm_param(f"enc{i}.cn", ch)
            ch_in = ch
        # decoder: transpose convs with skip concatenation
        s = cfg.stages
        dec_in = cfg.channels[-1] + cfg.embed_dim
        for i in range(1, s + 1):
            out_ch = cfg.channels[s - 1 - i] if i < s else cfg.channels[0]
            self._conv_param(rng, f"dec{i}", (dec_in, out_ch, 4, 4), dec_in * 16 // 4,
                             transpose=True)
            self._norm_param(f"dec{i}.cn", out_ch)
            dec_in = 2 * out_ch
        self._conv_param(rng, "head", (4, cfg.channels[0], 1, 1), cfg.channels[0], zero=True)
        self.params["head.b"].data[:] = np.array(
            [HEAD_BIAS, 0.0, HEAD_BIAS, 0.0], dtype=self.dtype
        )
        ch_in = 3
        for i, ch in enumerate(cfg.visual_channels, start=1):
            self._conv_param(rng, f"venc{i}", (ch, ch_in, 4, 4), ch_in * 16)
            self._norm_param(f"venc{i}.cn", ch)
            ch_in = ch
        for i in range(1, cfg.visual_refine + 1):
            self._conv_param(rng, f"vref{i}", (ch_in, ch_in, 3, 3), ch_in * 9)
            self._norm_param(f"vref{i}.cn", ch_in)
        self._conv_param(rng, "vproj", (cfg.embed_dim, ch_in, 1, 1), ch_in)
        for l in cfg.feature_layers:
            src_ch = cfg.channels[cfg.stages - 1 - l] if l < cfg.stages else cfg.channels[0]
            self._conv_param(rng, f"feat{l}", (cfg.embed_dim, src_ch, 1, 1), src_ch)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def _block(self, x: Tensor, name: str, stride: int, pad: int,
               transpose: bool = False) -> Tensor:
        p = self.params
        if transpose:
            y = conv_transpose2d(x, p[name + ".w"], p[name + ".b"], stride=stride, pad=pad)
        else:
            y = conv2d(x, p[name + ".w"], p[name + ".b"], stride=stride, pad=pad)
        return leaky_relu(channel_norm(y, p[name + ".cn.g"], p[name + ".cn.beta"]))

    # -- forward passes ----------------------------------------------------
    def encode_visual(self, frames: np.ndarray | Tensor) -> Tensor:
        """(N, 3, H, W) batch to (N, d, g, g) visual features."""
        cfg = self.config
        x = frames if isinstance(frames, Tensor) else Tensor(frames.astype(self.dtype))
        if x.data.ndim != 4 or x.shape[1] != 3 or x.shape[2] != cfg.frame_size:
            raise ValueError(f"encode_visual: bad input shape {x.shape}")
        for i in range(1, len(cfg.visual_channels) + 1):
            x = self._block(x, f"venc{i}", stride=2, pad=1)
        for i in range(1, cfg.visual_refine + 1):
            x = self._block(x, f"vref{i}", stride=1, pad=1)
        return conv2d(x, self.params["vproj.w"], self.params["vproj.b"])

    def forward(self, spec_in: np.ndarray, visual: Tensor) -> tuple[Tensor, dict[int, Tensor]]:
        """Masks plus per-layer projected decoder features.

        spec_in: (N, 2, u, t) real view of the mono spectrogram (constant);
        visual: (N, d, g, g) features from encode_visual. Returns the mask
        tensor (N, 4, u, t) with channels (Re L, Im L, Re R, Im R).
        """
        cfg = self.config
        if spec_in.ndim != 4 or spec_in.shape[1:] != (2, *cfg.grid):
            raise ValueError(f"forward: bad spectrogram input shape {spec_in.shape}")
        if visual.shape[1] != cfg.embed_dim:
            raise ValueError(f"forward: visual dim {visual.shape} != {cfg.embed_dim}")
        x = Tensor(spec_in.astype(self.dtype))
        skips = []
        for i in range(1, cfg.stages + 1):
            x = self._block(x, f"enc{i}", stride=2, pad=1)
            skips.append(x)
        pooled = mean(visual, axes=(2, 3), keepdims=True)
        x = concat_channels([x, tile_hw(pooled, *cfg.bottleneck)])
        feats: dict[int, Tensor] = {}
        for i in range(1, cfg.stages + 1):
            x = self._block(x, f"dec{i}", stride=2, pad=1, transpose=True)
            if i in cfg.feature_layers:
                feats[i] = conv2d(x, self.params[f"feat{i}.w"], self.params[f"feat{i}.b"])
            if i < cfg.stages:
                x = concat_channels([x, skips[cfg.stages - 1 - i]])
        raw = conv2d(x, self.params["head.w"], self.params["head.b"])
        masks = mul(sigmoid_act(raw) * 2.0 + (-1.0), cfg.mask_bound)
        return masks, feats

    # -- checkpoints ---------------------------------------------------------
    def save(self, path) -> None:
        meta = {"config": asdict(self.config)}
        save_checkpoint(path, {k: v.data for k, v in self.params.items()}, meta)

    @classmethod
    def load(cls, path, dtype=np.float64) -> "Synthesizer":
        meta, tensors = load_checkpoint(path)
        raw = dict(meta["config"])
        for key in ("grid", "channels", "visual_channels", "feature_layers"):
            raw[key] = tuple(raw[key])
        model = cls(SynthesizerConfig(**raw), dtype=dtype)
        for name, p in model.params.items():
            if name not in tensors or tensors[name].shape != p.data.shape:
                raise ValueError(f"architecture mismatch for parameter {name!r}")
            p.data = tensors[name].astype(model.dtype)
        return model


# ---------------------------------------------------------------------------
# spectrogram <-> network tensors
# ---------------------------------------------------------------------------

def spec_to_input(spec: ComplexSpectrogram, t_frames: int) -> np.ndarray:
    """Stack Re/Im of the kept grid, zero-padding time to t_frames."""
    g = spec.grid
    if g.shape[1] > t_frames:
        raise ValueError(f"segment has {g.shape[1]} frames, grid allows {t_frames}")
    out = np.zeros((2, g.shape[0], t_frames))
    out[0, :, : g.shape[1]] = g.real
    out[1, :, : g.shape[1]] = g.imag
    return out


def masks_from_output(mask_values: np.ndarray, n_frames: int) -> tuple[ComplexMask, ComplexMask]:
    """(4, u, t) head output to left/right complex masks on real frames."""
    m = mask_values[:, :, :n_frames]
    return (
        ComplexMask(m[0] + 1j * m[1]),
        ComplexMask(m[2] + 1j * m[3]),
    )


def predicted_diff(masks: Tensor, spec_in: np.ndarray) -> Tensor:
    """Difference spectrogram (M_L - M_R) * S as a (N, 2, u, t) tensor."""
    sre = Tensor(np.ascontiguousarray(spec_in[:, 0:1]).astype(masks.dtype))
    sim = Tensor(np.ascontiguousarray(spec_in[:, 1:2]).astype(masks.dtype))
    dre = sub(narrow(masks, 1, 0, 1), narrow(masks, 1, 2, 1))
    dim = sub(narrow(masks, 1, 1, 1), narrow(masks, 1, 3, 1))
    out_re = sub(mul(dre, sre), mul(dim, sim))
    out_im = mul(dre, sim) + mul(dim, sre)
    return concat_channels([out_re, out_im])


# ---------------------------------------------------------------------------
# sliding-window inference
# ---------------------------------------------------------------------------

def segment_starts(n_samples: int, sample_rate: int) -> list[int]:
    seg = round(SEGMENT_SECONDS * sample_rate)
    if n_samples < seg:
        raise ValueError("input too short: need at least one 0.63 s segment")
    hop = round(TEST_HOP_SECONDS * sample_rate)
    return list(range(0, n_samples - seg + 1, hop))


def nearest_frame(frames: list[tuple[float, np.ndarray]], t_center: float) -> np.ndarray:
    if not frames:
        raise ValueError("no visual frames supplied")
    return min(frames, key=lambda tf: abs(tf[0] - t_center))[1]


def predict_binaural(model: Synthesizer, mono: Waveform,
                     frames: list[tuple[float, np.ndarray]],
                     stft_params: StftParams | None = None,
                     batch: int = 16) -> BinauralWaveform:
    """Spatialize a full waveform with 0.63 s windows at 0.05 s hop.

    Each window uses the visual frame nearest its temporal center; the
    overlapping per-window reconstructions are averaged with uniform
    weights. Samples past the last hop-aligned window stay zero, so the
    output length always equals the input length.
    """
    params = stft_params or stft_params_for(model.config, mono.sample_rate)
    cfg = model.config
    sr = mono.sample_rate
    seg = round(SEGMENT_SECONDS * sr)
    starts = segment_starts(len(mono), sr)
    specs = []
    frame_batch = []
    frame_cache: dict[int, np.ndarray] = {}
    feat_cache: dict[int, int] = {}
    for s in starts:
        piece = Waveform(mono.samples[s : s + seg], sr)
        specs.append(stft_covering(piece, params))
        img = nearest_frame(frames, (s + seg / 2) / sr)
        frame_cache.setdefault(id(img), check_frame(img, cfg.frame_size))
        feat_cache[s] = id(img)
        frame_batch.append(id(img))

    unique_ids = list(frame_cache)
    stacked = np.stack([frame_cache[i].transpose(2, 0, 1) for i in unique_ids])
    vfeat_all = model.encode_visual(stacked).data
    vfeat_of = {fid: vfeat_all[i] for i, fid in enumerate(unique_ids)}

    acc_l = np.zeros(len(mono))
    acc_r = np.zeros(len(mono))
    count = np.zeros(len(mono))
    for lo in range(0, len(starts), batch):
        chunk = list(range(lo, min(lo + batch, len(starts))))
        spec_in = np.stack([spec_to_input(specs[i], cfg.grid[1]) for i in chunk])
        vfeat = Tensor(np.stack([vfeat_of[frame_batch[i]] for i in chunk]).astype(model.dtype))
        masks, _ = model.forward(spec_in, vfeat)
        for pos, i in enumerate(chunk):
            spec = specs[i]
            m_l, m_r = masks_from_output(
                masks.data[pos].astype(np.float64), spec.frames
            )
            wav_l = istft(
                ComplexSpectrogram(m_l.grid * spec.grid, params, spec.residual),
                params, seg,
            )
            wav_r = istft(
                ComplexSpectrogram(m_r.grid * spec.grid, params, spec.residual),
                params, seg,
            )
            s = starts[i]
            acc_l[s : s + seg] += wav_l.samples
            acc_r[s : s + seg] += wav_r.samples
            count[s : s + seg] += 1.0
    covered = count > 0
    acc_l[covered] /= count[covered]
    acc_r[covered] /= count[covered]
    return BinauralWaveform(Waveform(acc_l, sr), Waveform(acc_r, sr))
