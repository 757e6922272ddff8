"""Synthetic audio-visual scene factory.

Scenes hold 1-4 point sources, each a sine, harmonic stack, or band of
noise, constant-power panned to an azimuth in [-1, 1] and drawn into a
single frame as a colored blob whose horizontal position encodes the
azimuth. Rendering is fully determined by the scene seed.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import BinauralWaveform, Waveform
from .fileio import image_write, wav_write

KINDS = ("sine", "harmonic_stack", "band_noise")
BLOB_COLORS = {
    "sine": (1.0, 0.3, 0.25),
    "harmonic_stack": (0.25, 1.0, 0.35),
    "band_noise": (0.3, 0.45, 1.0),
}
MAX_ITD_S = 0.0006
FRAME_SIZE = 128
BLOB_SIGMA = 9.0
MIN_DURATION = 0.63


@dataclass(frozen=True)
class SourceSpec:
    kind: str
    base_freq: float
    amplitude: float
    azimuth: float
    appearance_id: int = field(init=False)

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown source kind {self.kind!r}")
        if not 0.0 < self.amplitude <= 1.0:
            raise ValueError("amplitude must be in (0, 1]")
        if not -1.0 <= self.azimuth <= 1.0:
            raise ValueError("azimuth must be in [-1, 1]")
        object.__setattr__(self, "appearance_id", KINDS.index(self.kind))


@dataclass(frozen=True)
class Scene:
    sources: tuple[SourceSpec, ...]
    duration: float = 1.03
    seed: int = 0
    itd: bool = False
    sample_rate: int = 16000

    def __post_init__(self) -> None:
        if not 1 <= len(self.sources) <= 4:
            raise ValueError("scene needs 1-4 sources")
        if self.duration < MIN_DURATION:
            raise ValueError(f"duration must be at least {MIN_DURATION} s")
        for s in self.sources:
            if s.base_freq >= self.sample_rate / 2:
                raise ValueError("base_freq must stay below Nyquist")


def pan_gains(azimuth: float) -> tuple[float, float]:
    """Constant-power panning: gain_l^2 + gain_r^2 == 1."""
    return float(np.sqrt((1.0 - azimuth) / 2.0)), float(np.sqrt((1.0 + azimuth) / 2.0))


def _synth_source(src: SourceSpec, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    if src.kind == "sine":
        sig = np.sin(2 * np.pi * src.base_freq * t + rng.uniform(0, 2 * np.pi))
    elif src.kind == "harmonic_stack":
        sig = np.zeros(n)
        for k in range(1, 5):
            f = k * src.base_freq
            if f >= 0.45 * sr:
                break
            sig += np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) / k
    else:  # band_noise, one octave around base_freq
        white = rng.standard_normal(n)
        spec = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, 1.0 / sr)
        band = (freqs >= src.base_freq / np.sqrt(2)) & (freqs <= src.base_freq * np.sqrt(2))
        sig = np.fft.irfft(spec * band, n=n)
    peak = np.max(np.abs(sig))
    if peak > 0:
        sig *= src.amplitude / peak
    return sig


def _delay(sig: np.ndarray, samples: int) -> np.ndarray:
    if samples <= 0:
        return sig
    return np.concatenate([np.zeros(samples), sig[:-samples]])


def blob_center(azimuth: float, width: int = FRAME_SIZE) -> float:
    return (azimuth + 1.0) / 2.0 * (width - 1)


def render_scene(scene: Scene) -> tuple[BinauralWaveform, np.ndarray, dict]:
    """Render audio (panned, optionally ITD-delayed) and the matching frame.

    Returns (binaural, frame in [0,1] of shape (H, W, 3), metadata). The
    frame's column axis is the physical left-to-right axis of the scene.
    If summation would clip, all sources are rescaled uniformly and the
    factor is recorded in the metadata.
    """
    rng = np.random.default_rng(scene.seed)
    n = int(round(scene.duration * scene.sample_rate))
    left = np.zeros(n)
    right = np.zeros(n)
    frame = np.full((FRAME_SIZE, FRAME_SIZE, 3), 0.2)
    yy, xx = np.mgrid[0:FRAME_SIZE, 0:FRAME_SIZE]
    meta: dict = {
        "duration": scene.duration,
        "seed": scene.seed,
        "itd": int(scene.itd),
        "n_sources": len(scene.sources),
    }
    for i, src in enumerate(scene.sources):
        sig = _synth_source(src, n, scene.sample_rate, rng)
        gl, gr = pan_gains(src.azimuth)
        sig_l, sig_r = sig, sig
        if scene.itd:
            d = int(round(src.azimuth * MAX_ITD_S * scene.sample_rate))
            if d > 0:
                sig_l = _delay(sig, d)
            elif d < 0:
                sig_r = _delay(sig, -d)
        left += gl * sig_l
        right += gr * sig_r
        cx = blob_center(src.azimuth)
        cy = FRAME_SIZE / 2.0 + rng.uniform(-0.15, 0.15) * FRAME_SIZE
        bump = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * BLOB_SIGMA**2))
        for ch, col in enumerate(BLOB_COLORS[src.kind]):
            frame[:, :, ch] += col * bump
        meta.update(
            {
                f"src{i}_kind": src.kind,
                f"src{i}_freq": src.base_freq,
                f"src{i}_amplitude": src.amplitude,
                f"src{i}_azimuth": src.azimuth,
                f"src{i}_gain_l": gl,
                f"src{i}_gain_r": gr,
                f"src{i}_blob_cx": cx,
                f"src{i}_blob_cy": cy,
                f"src{i}_appearance": src.appearance_id,
            }
        )
    peak = max(np.max(np.abs(left)), np.max(np.abs(right)), 0.0)
    rescale = 1.0 if peak <= 1.0 else 1.0 / peak
    if rescale != 1.0:
        left *= rescale
        right *= rescale
    meta["rescale"] = rescale
    frame = np.clip(frame, 0.0, 1.0)
    sr = scene.sample_rate
    return BinauralWaveform(Waveform(left, sr), Waveform(right, sr)), frame, meta


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetConfig:
    n_scenes: int = 100
    labeled_frac: float = 1.0
    duration: float = 1.03
    min_sources: int = 1
    max_sources: int = 2
    freq_lo: float = 250.0
    freq_hi: float = 4000.0
    azimuth_lo: float = -1.0
    azimuth_hi: float = 1.0
    kinds: tuple[str, ...] = KINDS
    train_frac: float = 0.8
    val_frac: float = 0.0
    itd: bool = False

    def __post_init__(self) -> None:
        if not 0.0 <= self.labeled_frac <= 1.0:
            raise ValueError("labeled_frac must be in [0, 1]")
        if self.train_frac + self.val_frac > 1.0:
            raise ValueError("train_frac + val_frac must not exceed 1")


@dataclass
class ManifestRow:
    scene_id: str
    split: str
    labeled: bool
    wav: str
    ppm: str
    meta: str
    kinds: str
    azimuths: str
    scene_seed: int


@dataclass
class DatasetManifest:
    root: Path
    seed: int
    rows: list[ManifestRow]

    def split(self, name: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == name]

    def path(self, rel: str) -> Path:
        return self.root / rel


MANIFEST_FIELDS = [
    "scene_id", "split", "labeled", "wav", "ppm", "meta", "kinds", "azimuths",
    "scene_seed",
]


def random_scene(cfg: DatasetConfig, rng: np.random.Generator, seed: int) -> Scene:
    n_src = int(rng.integers(cfg.min_sources, cfg.max_sources + 1))
    sources = []
    for _ in range(n_src):
        kind = cfg.kinds[int(rng.integers(len(cfg.kinds)))]
        freq = float(np.exp(rng.uniform(np.log(cfg.freq_lo), np.log(cfg.freq_hi))))
        amp = float(rng.uniform(0.35, 0.9))
        az = float(rng.uniform(cfg.azimuth_lo, cfg.azimuth_hi))
        sources.append(SourceSpec(kind=kind, base_freq=freq, amplitude=amp, azimuth=az))
    return Scene(tuple(sources), duration=cfg.duration, seed=seed, itd=cfg.itd)


def make_dataset(out_dir, cfg: DatasetConfig, seed: int) -> DatasetManifest:
    """Render a seeded scene set to disk and write the CSV manifest.

    Splits are disjoint; labeled flags are assigned per split so each split
    carries the requested labeled fraction (rounded).
    """
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    scene_seeds = [int(s) for s in rng.integers(0, 2**31 - 1, size=cfg.n_scenes)]
    order = rng.permutation(cfg.n_scenes)
    n_train = int(round(cfg.train_frac * cfg.n_scenes))
    n_val = int(round(cfg.val_frac * cfg.n_scenes))
    split_of = {}
    for pos, idx in enumerate(order):
        split_of[int(idx)] = "train" if pos < n_train else (
            "val" if pos < n_train + n_val else "test"
        )
    by_split: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    for i in range(cfg.n_scenes):
        by_split[split_of[i]].append(i)
    labeled = set()
    for name, members in by_split.items():
        k = int(round(cfg.labeled_frac * len(members)))
        picks = rng.permutation(len(members))[:k]
        labeled.update(members[j] for j in picks)

    rows = []
    for i in range(cfg.n_scenes):
        scene = random_scene(cfg, np.random.default_rng(scene_seeds[i]), scene_seeds[i])
        audio, frame, meta = render_scene(scene)
        sid = f"scene_{i:05d}"
        wav_rel, ppm_rel, meta_rel = f"{sid}.wav", f"{sid}.ppm", f"{sid}.txt"
        wav_write(root / wav_rel, audio)
        image_write(root / ppm_rel, frame)
        write_metadata(root / meta_rel, meta)
        rows.append(
            ManifestRow(
                scene_id=sid,
                split=split_of[i],
                labeled=i in labeled,
                wav=wav_rel,
                ppm=ppm_rel,
                meta=meta_rel,
                kinds=";".join(s.kind for s in scene.sources),
                azimuths=";".join(f"{s.azimuth:.8f}" for s in scene.sources),
                scene_seed=scene_seeds[i],
            )
        )
    manifest = DatasetManifest(root=root, seed=seed, rows=rows)
    save_manifest(root / "manifest.csv", manifest)
    write_metadata(root / "dataset.txt", {"seed": seed, "n_scenes": cfg.n_scenes,
                                          "labeled_frac": cfg.labeled_frac,
                                          "duration": cfg.duration})
    return manifest


def write_metadata(path, meta: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for key, value in meta.items():
            if isinstance(value, float):
                value = f"{value:.12g}"
            f.write(f"{key}={value}\n")


def read_metadata(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                key, _, value = line.partition("=")
                out[key] = value
    return out


def save_manifest(path, manifest: DatasetManifest) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_FIELDS + ["global_seed"])
        for r in manifest.rows:
            writer.writerow(
                [r.scene_id, r.split, int(r.labeled), r.wav, r.ppm, r.meta,
                 r.kinds, r.azimuths, r.scene_seed, manifest.seed]
            )


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    rows, seed = [], 0
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        for rec in reader:
            seed = int(rec["global_seed"])
            rows.append(
                ManifestRow(
                    scene_id=rec["scene_id"],
                    split=rec["split"],
                    labeled=bool(int(rec["labeled"])),
                    wav=rec["wav"],
                    ppm=rec["ppm"],
                    meta=rec["meta"],
                    kinds=rec["kinds"],
                    azimuths=rec["azimuths"],
                    scene_seed=int(rec["scene_seed"]),
                )
            )
    return DatasetManifest(root=path.parent, seed=seed, rows=rows)
