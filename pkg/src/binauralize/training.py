"""Deterministic trainer and evaluator for the joint recovery + consistency
objective, covering supervised and semi-supervised protocols.

Per step, labeled scenes contribute the difference-spectrogram recovery term
plus the consistency term with targets from ground truth; unlabeled scenes
contribute only the consistency term with gradient-stopped targets computed
from their own predictions.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import AdamState, adam_step, add, concat_channels, l2_loss, mul, narrow, reshape
from .consistency import (
    WeightParams,
    coattention,
    consistency_loss,
    lr_prob_audio,
    lr_prob_av,
    magnitude_diff,
    weight_maps,
)
from .dsp import (
    BinauralWaveform,
    StftParams,
    Waveform,
    envelope,
    mix_to_mono,
    stft,
    stft_covering,
    stft_distance,
)
from .fileio import image_read, wav_read
from .model import (
    SEGMENT_SECONDS,
    Synthesizer,
    SynthesizerConfig,
    predict_binaural,
    predicted_diff,
    spec_to_input,
    stft_params_for,
)
from .scenes import DatasetManifest, ManifestRow, read_metadata


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 5
    batch_size: int = 8
    lr: float = 5e-4
    lambda_con: float = 1.0
    labeled_fraction: float | None = None  # None keeps the manifest flags
    segment_seconds: float = SEGMENT_SECONDS
    seed: int = 0
    feature_layers: tuple[int, ...] = (1,)
    weight_q: float | None = None  # None centers the maps for the visual grid
    weight_r: float | None = None
    checkpoint_every: int = 0  # epochs between checkpoints; 0 saves only at the end
    dtype: str = "float64"

    def __post_init__(self) -> None:
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ValueError("epochs and batch size must be positive")
        if self.lambda_con < 0:
            raise ValueError("lambda_con must be nonnegative")
        if self.labeled_fraction is not None and not 0.0 <= self.labeled_fraction <= 1.0:
            raise ValueError("labeled_fraction must be in [0, 1]")


@dataclass
class MetricsRow:
    epoch: int
    split: str
    d_stft: float | None
    d_env: float | None
    l_rec: float | None
    l_con: float | None
    wall_time: float

    def __post_init__(self) -> None:
        for v in (self.d_stft, self.d_env):
            if v is not None and v < 0:
                raise ValueError("distances must be nonnegative")


METRICS_FIELDS = ["epoch", "split", "d_stft", "d_env", "l_rec", "l_con", "wall_time"]


def write_metrics(path, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(METRICS_FIELDS)
        for r in rows:
            writer.writerow(
                [r.epoch, r.split]
                + ["" if v is None else f"{v:.10g}" for v in (r.d_stft, r.d_env, r.l_rec, r.l_con)]
                + [f"{r.wall_time:.3f}"]
            )


def read_metrics(path) -> list[MetricsRow]:
    rows = []
    with open(path, "r", newline="", encoding="utf-8") as f:
        for rec in csv.DictReader(f):
            rows.append(
                MetricsRow(
                    epoch=int(rec["epoch"]),
                    split=rec["split"],
                    d_stft=float(rec["d_stft"]) if rec["d_stft"] else None,
                    d_env=float(rec["d_env"]) if rec["d_env"] else None,
                    l_rec=float(rec["l_rec"]) if rec["l_rec"] else None,
                    l_con=float(rec["l_con"]) if rec["l_con"] else None,
                    wall_time=float(rec["wall_time"]),
                )
            )
    return rows


@dataclass
class LoadedScene:
    row: ManifestRow
    audio: BinauralWaveform
    frame: np.ndarray
    meta: dict


def load_scene(manifest: DatasetManifest, row: ManifestRow) -> LoadedScene:
    audio = wav_read(manifest.path(row.wav))
    if not isinstance(audio, BinauralWaveform):
        raise ValueError(f"{row.wav} is not stereo")
    frame = image_read(manifest.path(row.ppm))
    meta = read_metadata(manifest.path(row.meta))
    return LoadedScene(row=row, audio=audio, frame=frame, meta=meta)


def sample_segment(
    audio: BinauralWaveform,
    frames: list[tuple[float, np.ndarray]],
    rng: np.random.Generator,
    segment_seconds: float = SEGMENT_SECONDS,
) -> tuple[Waveform, BinauralWaveform, np.ndarray]:
    """Uniformly placed training window: mono mix, ground truth, mid frame."""
    sr = audio.sample_rate
    seg = round(segment_seconds * sr)
    if len(audio) < seg:
        raise ValueError(f"scene audio shorter than one {segment_seconds} s segment")
    start = int(rng.integers(0, len(audio) - seg + 1))
    gt = BinauralWaveform(
        Waveform(audio.left.samples[start : start + seg], sr),
        Waveform(audio.right.samples[start : start + seg], sr),
    )
    mid = (start + seg / 2) / sr
    frame = min(frames, key=lambda tf: abs(tf[0] - mid))[1]
    return mix_to_mono(gt), gt, frame


@dataclass
class StepRecord:
    step: int
    epoch: int
    n_labeled: int
    n_unlabeled: int
    l_rec: float
    l_con: float
    total: float


@dataclass
class TrainResult:
    model: Synthesizer
    metrics: list[MetricsRow]
    steps: list[StepRecord]


def resolve_weight_params(config: TrainConfig, grid_w: int) -> WeightParams:
    """Explicit (q, r) from the config, else the centered mirror-symmetric pair."""
    if config.weight_q is None:
        return WeightParams.centered(grid_w)
    if config.weight_r is None:
        return WeightParams(config.weight_q, -config.weight_q * (grid_w - 1) / 2.0)
    return WeightParams(config.weight_q, config.weight_r)


def _consistency_target(
    masks_np: np.ndarray,
    spec_in: np.ndarray,
    gt_grids: tuple[np.ndarray, np.ndarray] | None,
    grid: tuple[int, int],
) -> np.ndarray:
    """Pooled left/right probability target for one sample (plain array)."""
    if gt_grids is not None:
        diff = magnitude_diff(gt_grids[0], gt_grids[1], target=grid)
    else:
        mono = spec_in[0] + 1j * spec_in[1]
        pred_l = (masks_np[0] + 1j * masks_np[1]) * mono
        pred_r = (masks_np[2] + 1j * masks_np[3]) * mono
        diff = magnitude_diff(pred_l, pred_r, target=grid)
    return lr_prob_audio(diff).grid


def train(
    manifest: DatasetManifest,
    config: TrainConfig,
    model_config: SynthesizerConfig | None = None,
    out_path=None,
    stft_params: StftParams | None = None,
) -> TrainResult:
    """Run the optimization loop over the manifest's train split."""
    base = model_config or SynthesizerConfig()
    base = replace(base, feature_layers=tuple(config.feature_layers))
    params = stft_params or stft_params_for(base)
    dtype = np.float32 if config.dtype == "float32" else np.float64
    model = Synthesizer(base, seed=config.seed, dtype=dtype)
    rng = np.random.default_rng(config.seed)

    rows = manifest.split("train")
    if not rows:
        raise ValueError("manifest has no train scenes")
    scenes = [load_scene(manifest, r) for r in rows]
    if config.labeled_fraction is None:
        labeled_flags = [r.labeled for r in rows]
    else:
        k = int(round(config.labeled_fraction * len(rows)))
        chosen = set(rng.permutation(len(rows))[:k].tolist())
        labeled_flags = [i in chosen for i in range(len(rows))]
    if config.lambda_con == 0.0:
        # unlabeled scenes are inert without the consistency term
        keep = [i for i, lab in enumerate(labeled_flags) if lab]
        scenes = [scenes[i] for i in keep]
        labeled_flags = [True] * len(scenes)
        if not scenes:
            scenes, labeled_flags = [], []

    wp = resolve_weight_params(config, base.visual_grid)
    w_l, w_r = weight_maps(base.visual_grid, base.visual_grid, wp.q, wp.r)
    state = AdamState()
    metrics: list[MetricsRow] = []
    steps: list[StepRecord] = []
    step_idx = 0
    t_start = time.perf_counter()

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(scenes)) if scenes else np.array([], dtype=int)
        ep_rec, ep_con, ep_rec_n, ep_con_n = 0.0, 0.0, 0, 0
        for lo in range(0, len(order), config.batch_size):
            batch_ids = order[lo : lo + config.batch_size].tolist()
            batch_ids.sort(key=lambda i: not labeled_flags[i])  # labeled first
            samples = []
            for i in batch_ids:
                sc = scenes[i]
                dur = len(sc.audio) / sc.audio.sample_rate
                mono, gt, frame = sample_segment(
                    sc.audio, [(dur / 2, sc.frame)], rng, config.segment_seconds
                )
                mono_spec = stft_covering(mono, params)
                entry = {
                    "spec": spec_to_input(mono_spec, base.grid[1]),
                    "frame": frame.transpose(2, 0, 1),
                    "labeled": labeled_flags[i],
                    "gt_grids": None,
                }
                if labeled_flags[i]:
                    gl = stft_covering(gt.left, params)
                    gr = stft_covering(gt.right, params)
                    entry["gt_grids"] = (gl.grid, gr.grid)
                samples.append(entry)
            n_lab = sum(1 for s in samples if s["labeled"])

            spec_in = np.stack([s["spec"] for s in samples])
            frames_in = np.stack([s["frame"] for s in samples])
            model.zero_grad()
            vfeat = model.encode_visual(frames_in.astype(dtype))
            masks, feats = model.forward(spec_in, vfeat)

            loss_terms = []
            l_rec_val = None
            if n_lab:
                gt_diff = np.zeros((n_lab, 2, *base.grid))
                for j in range(n_lab):
                    gl, gr = samples[j]["gt_grids"]
                    d = gl - gr
                    gt_diff[j, 0, :, : d.shape[1]] = d.real
                    gt_diff[j, 1, :, : d.shape[1]] = d.imag
                pred_diff = predicted_diff(
                    narrow(masks, 0, 0, n_lab), spec_in[:n_lab]
                )
                per_sample = [
                    l2_loss(narrow(pred_diff, 0, j, 1), gt_diff[j : j + 1].astype(dtype))
                    for j in range(n_lab)
                ]
                rec = per_sample[0]
                for term in per_sample[1:]:
                    rec = add(rec, term)
                rec = mul(rec, 1.0 / n_lab)
                l_rec_val = float(rec.data)
                loss_terms.append(rec)
                ep_rec += l_rec_val
                ep_rec_n += 1

            l_con_val = None
            if config.lambda_con > 0.0:
                per_sample_con = []
                for j, s in enumerate(samples):
                    v_j = reshape(narrow(vfeat, 0, j, 1), vfeat.shape[1:])
                    p_av_parts, target_parts = [], []
                    for layer in base.feature_layers:
                        a_j = reshape(
                            narrow(feats[layer], 0, j, 1), feats[layer].shape[1:]
                        )
                        c = coattention(v_j, a_j)
                        p_av_parts.append(lr_prob_av(c, w_l, w_r))
                        target_parts.append(
                            _consistency_target(
                                masks.data[j].astype(np.float64),
                                spec_in[j],
                                s["gt_grids"],
                                base.feature_grid(layer),
                            ).reshape(-1)
                        )
                    if len(p_av_parts) == 1:
                        p_av, target = p_av_parts[0], target_parts[0]
                    else:
                        p_av = concat_channels(p_av_parts, axis=0)
                        target = np.concatenate(target_parts)
                    per_sample_con.append(consistency_loss(p_av, target))
                con = per_sample_con[0]
                for term in per_sample_con[1:]:
                    con = add(con, term)
                con = mul(con, 1.0 / len(per_sample_con))
                l_con_val = float(con.data)
                loss_terms.append(mul(con, config.lambda_con))
                ep_con += l_con_val
                ep_con_n += 1

            step_idx += 1
            total_val = (l_rec_val or 0.0) + config.lambda_con * (l_con_val or 0.0)
            if not np.isfinite(total_val):
                raise ValueError(f"non-finite loss at step {step_idx}")
            steps.append(
                StepRecord(
                    step=step_idx,
                    epoch=epoch,
                    n_labeled=n_lab,
                    n_unlabeled=len(samples) - n_lab,
                    l_rec=l_rec_val if l_rec_val is not None else 0.0,
                    l_con=l_con_val if l_con_val is not None else 0.0,
                    total=total_val,
                )
            )
            if not loss_terms:
                continue
            loss = loss_terms[0]
            for term in loss_terms[1:]:
                loss = add(loss, term)
            loss.backward()
            adam_step(
                model.params,
                {n: p.grad for n, p in model.params.items() if p.grad is not None},
                state,
                lr=config.lr,
            )

        metrics.append(
            MetricsRow(
                epoch=epoch,
                split="train",
                d_stft=None,
                d_env=None,
                l_rec=ep_rec / ep_rec_n if ep_rec_n else None,
                l_con=ep_con / ep_con_n if ep_con_n else None,
                wall_time=time.perf_counter() - t_start,
            )
        )
        if out_path and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            model.save(Path(str(out_path) + f".ep{epoch}"))

    if out_path:
        model.save(out_path)
    return TrainResult(model=model, metrics=metrics, steps=steps)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def binaural_distances(
    pred: BinauralWaveform, gt: BinauralWaveform, params: StftParams
) -> tuple[float, float]:
    """Eq. 9 on spectrograms of the waveforms, Eq. 10 on their envelopes."""
    d_stft = stft_distance(
        (stft(pred.left, params), stft(pred.right, params)),
        (stft(gt.left, params), stft(gt.right, params)),
    )
    d_env = float(
        np.linalg.norm(envelope(pred.left) - envelope(gt.left))
        + np.linalg.norm(envelope(pred.right) - envelope(gt.right))
    )
    return d_stft, d_env


def mono_baseline(mono: Waveform) -> BinauralWaveform:
    """Half the mono mixture duplicated on both channels."""
    half = Waveform(0.5 * mono.samples, mono.sample_rate)
    return BinauralWaveform(half, Waveform(half.samples.copy(), mono.sample_rate))


def evaluate(
    model: Synthesizer,
    manifest: DatasetManifest,
    split: str = "test",
    stft_params: StftParams | None = None,
    epoch: int = 0,
) -> tuple[list[MetricsRow], list[MetricsRow]]:
    """Full-sequence prediction metrics per scene, plus the Mono baseline."""
    params = stft_params or stft_params_for(model.config)
    rows_model, rows_mono = [], []
    t0 = time.perf_counter()
    for row in manifest.split(split):
        sc = load_scene(manifest, row)
        mono = mix_to_mono(sc.audio)
        dur = len(sc.audio) / sc.audio.sample_rate
        pred = predict_binaural(model, mono, [(dur / 2, sc.frame)], params)
        d_stft, d_env = binaural_distances(pred, sc.audio, params)
        rows_model.append(
            MetricsRow(epoch, split, d_stft, d_env, None, None,
                       time.perf_counter() - t0)
        )
        d_stft_m, d_env_m = binaural_distances(mono_baseline(mono), sc.audio, params)
        rows_mono.append(
            MetricsRow(epoch, f"{split}:mono", d_stft_m, d_env_m, None, None,
                       time.perf_counter() - t0)
        )
    return rows_model, rows_mono
