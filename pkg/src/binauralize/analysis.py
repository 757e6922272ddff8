"""Co-attention inspection for trained models.

Produces, for one audio window, the per-patch co-attention maps, both
left/right probability maps (audio-visual and audio-derived, the latter from
the model's own predictions), and an energy-weighted aggregate attention map
for visualization and localization checks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .consistency import (
    WeightParams,
    coattention,
    lr_prob_audio,
    lr_prob_av,
    magnitude_diff,
    weight_maps,
)
from .dsp import StftParams, Waveform, pool_magnitude, stft_covering
from .model import (
    SEGMENT_SECONDS,
    Synthesizer,
    check_frame,
    spec_to_input,
    stft_params_for,
)


@dataclass
class AttentionReport:
    layer: int
    coattn: np.ndarray  # (n_patches, h, w)
    p_av: np.ndarray  # (u', t')
    p_a: np.ndarray  # (u', t'), from the model's own predictions
    aggregate: np.ndarray  # (h, w), energy-weighted mean over patches
    patch_grid: tuple[int, int]
    weight_params: WeightParams


def coattention_report(
    model: Synthesizer,
    mono: Waveform,
    frame: np.ndarray,
    stft_params: StftParams | None = None,
    weight_params: WeightParams | None = None,
    segment_start: int = 0,
) -> dict[int, AttentionReport]:
    """Analyze one 0.63 s window (default: the first) of a mono waveform."""
    params = stft_params or stft_params_for(model.config, mono.sample_rate)
    cfg = model.config
    sr = mono.sample_rate
    seg = round(SEGMENT_SECONDS * sr)
    if segment_start < 0 or segment_start + seg > len(mono):
        raise ValueError("input too short: need at least one 0.63 s segment")
    piece = Waveform(mono.samples[segment_start : segment_start + seg], sr)
    spec = stft_covering(piece, params)
    spec_in = spec_to_input(spec, cfg.grid[1])[None]
    frame = check_frame(frame, cfg.frame_size)
    vfeat = model.encode_visual(frame.transpose(2, 0, 1)[None].astype(model.dtype))
    masks, feats = model.forward(spec_in, vfeat)

    g = cfg.visual_grid
    wp = weight_params or WeightParams.centered(g)
    w_l, w_r = weight_maps(g, g, wp.q, wp.r)
    v0 = Tensor(vfeat.data[0])
    mono_mag = np.abs(spec.grid)

    reports: dict[int, AttentionReport] = {}
    for layer, feat in feats.items():
        grid = cfg.feature_grid(layer)
        c = coattention(v0, Tensor(feat.data[0]))
        p_av = lr_prob_av(c, w_l, w_r).data.reshape(grid)
        mono_c = spec_in[0, 0] + 1j * spec_in[0, 1]
        m = masks.data[0].astype(np.float64)
        pred_l = (m[0] + 1j * m[1]) * mono_c
        pred_r = (m[2] + 1j * m[3]) * mono_c
        p_a = lr_prob_audio(magnitude_diff(pred_l, pred_r, target=grid)).grid
        weights = pool_magnitude(mono_mag, grid).reshape(-1)
        total = weights.sum()
        if total > 0:
            aggregate = np.tensordot(weights, c.data, axes=(0, 0)) / total
        else:
            aggregate = c.data.mean(axis=0)
        reports[layer] = AttentionReport(
            layer=layer,
            coattn=c.data,
            p_av=p_av,
            p_a=p_a,
            aggregate=aggregate,
            patch_grid=grid,
            weight_params=wp,
        )
    return reports
