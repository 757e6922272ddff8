"""Deterministic signal processing: STFT/iSTFT, complex masking, envelopes, metrics.

All functions are pure; inputs are never mutated.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

WINDOW_NORM_EPS = 1e-8


@dataclass(frozen=True)
class StftParams:
    """Analysis parameters: 16 kHz, 25 ms Hann window, 10 ms hop, FFT 512."""

    sample_rate: int = 16000
    window_len: int = 400
    hop: int = 160
    fft_size: int = 512
    kept_bins: int = 256

    def __post_init__(self) -> None:
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.window_len > self.fft_size:
            raise ValueError(
                f"window_len {self.window_len} exceeds fft_size {self.fft_size}"
            )
        if self.hop > self.window_len or self.hop <= 0:
            raise ValueError(f"hop {self.hop} must be in 1..window_len")
        if not 1 <= self.kept_bins <= self.fft_size // 2 + 1:
            raise ValueError(f"kept_bins {self.kept_bins} out of range")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def window(self) -> np.ndarray:
        return np.hanning(self.window_len)

    def num_frames(self, n_samples: int) -> int:
        if n_samples < self.window_len:
            raise ValueError("input too short")
        return 1 + (n_samples - self.window_len) // self.hop


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform samples must be 1-D")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class BinauralWaveform:
    left: Waveform
    right: Waveform

    def __post_init__(self) -> None:
        if len(self.left) != len(self.right):
            raise ValueError(
                f"channel length mismatch: {len(self.left)} vs {len(self.right)}"
            )
        if self.left.sample_rate != self.right.sample_rate:
            raise ValueError("channel sample rates differ")

    @property
    def sample_rate(self) -> int:
        return self.left.sample_rate

    def __len__(self) -> int:
        return len(self.left)


@dataclass
class ComplexSpectrogram:
    """Complex frequency-by-time grid.

    ``grid`` holds rows 0..kept_bins-1; ``residual`` holds the remaining rows
    up to fft_size/2 so the transform stays exactly invertible.
    """

    grid: np.ndarray
    params: StftParams
    residual: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.grid = np.asarray(self.grid, dtype=np.complex128)
        if self.grid.ndim != 2 or self.grid.shape[0] != self.params.kept_bins:
            raise ValueError(
                f"grid shape {self.grid.shape} inconsistent with params "
                f"(kept_bins={self.params.kept_bins})"
            )
        n_res = self.params.n_bins - self.params.kept_bins
        if self.residual is None:
            self.residual = np.zeros((n_res, self.grid.shape[1]), dtype=np.complex128)
        else:
            self.residual = np.asarray(self.residual, dtype=np.complex128)
        if self.residual.shape != (n_res, self.grid.shape[1]):
            raise ValueError(f"residual shape {self.residual.shape} inconsistent")
        if not (np.all(np.isfinite(self.grid)) and np.all(np.isfinite(self.residual))):
            raise ValueError("spectrogram contains non-finite entries")

    @property
    def frames(self) -> int:
        return self.grid.shape[1]

    def full(self) -> np.ndarray:
        """All fft_size/2+1 rows, grid stacked over residual."""
        return np.vstack([self.grid, self.residual])


@dataclass
class ComplexMask:
    """Complex multiplier grid, Re/Im each bounded by MASK_BOUND."""

    grid: np.ndarray

    def __post_init__(self) -> None:
        self.grid = np.asarray(self.grid, dtype=np.complex128)
        if self.grid.ndim != 2:
            raise ValueError("mask grid must be 2-D")
        if not np.all(np.isfinite(self.grid)):
            raise ValueError("mask contains non-finite entries")
        bound = MASK_BOUND + 1e-9
        if np.abs(self.grid.real).max(initial=0.0) > bound or np.abs(
            self.grid.imag
        ).max(initial=0.0) > bound:
            raise ValueError(f"mask entries exceed bound {MASK_BOUND}")


MASK_BOUND = 10.0


def stft(wave: Waveform, params: StftParams) -> ComplexSpectrogram:
    """Hann-windowed STFT; frames are hop-spaced and zero-padded to fft_size."""
    x = wave.samples
    n_frames = params.num_frames(len(x))
    win = params.window()
    idx = np.arange(params.window_len)[None, :] + params.hop * np.arange(n_frames)[:, None]
    frames = x[idx] * win[None, :]
    spec = np.fft.rfft(frames, n=params.fft_size, axis=1).T
    return ComplexSpectrogram(
        grid=spec[: params.kept_bins], params=params, residual=spec[params.kept_bins :]
    )


def stft_covering(wave: Waveform, params: StftParams) -> ComplexSpectrogram:
    """STFT with the tail zero-padded so every input sample sits under at
    least one analysis window; istft of the result restores the full length."""
    n = len(wave)
    if n < params.window_len:
        raise ValueError("input too short")
    n_frames = int(np.ceil((n - params.window_len) / params.hop)) + 1
    span = (n_frames - 1) * params.hop + params.window_len
    if span > n:
        wave = Waveform(
            np.concatenate([wave.samples, np.zeros(span - n)]), wave.sample_rate
        )
    return stft(wave, params)


def istft(spec: ComplexSpectrogram, params: StftParams, out_len: int) -> Waveform:
    """Least-squares overlap-add inverse of :func:`stft`.

    Each frame is inverse-transformed, re-windowed, accumulated, and divided
    by the accumulated squared-window sum where that sum is non-negligible.
    """
    if spec.params != params:
        raise ValueError("spectrogram params do not match requested params")
    full = spec.full()
    n_frames = full.shape[1]
    win = params.window()
    frames = np.fft.irfft(full.T, n=params.fft_size, axis=1)[:, : params.window_len]
    frames *= win[None, :]
    total = (n_frames - 1) * params.hop + params.window_len
    acc = np.zeros(total)
    norm = np.zeros(total)
    wsq = win * win
    for m in range(n_frames):
        lo = m * params.hop
        acc[lo : lo + params.window_len] += frames[m]
        norm[lo : lo + params.window_len] += wsq
    good = norm > WINDOW_NORM_EPS
    acc[good] /= norm[good]
    acc[~good] = 0.0
    if out_len <= total:
        out = acc[:out_len]
    else:
        out = np.concatenate([acc, np.zeros(out_len - total)])
    return Waveform(out, params.sample_rate)


def apply_mask(spec: ComplexSpectrogram, mask: ComplexMask) -> ComplexSpectrogram:
    """Element-wise complex product; the residual rows pass through unchanged."""
    if mask.grid.shape != spec.grid.shape:
        raise ValueError(
            f"shape mismatch: mask {mask.grid.shape} vs spectrogram {spec.grid.shape}"
        )
    return ComplexSpectrogram(
        grid=mask.grid * spec.grid, params=spec.params, residual=spec.residual.copy()
    )


def mix_to_mono(b: BinauralWaveform) -> Waveform:
    """Sum of the two channels, no rescaling."""
    return Waveform(b.left.samples + b.right.samples, b.sample_rate)


def envelope(wave: Waveform) -> np.ndarray:
    """Magnitude of the analytic signal (full-length FFT Hilbert transform)."""
    x = wave.samples
    n = len(x)
    if n == 0:
        raise ValueError("empty waveform")
    spec = np.fft.fft(x)
    h = np.zeros(n)
    h[0] = 1.0
    if n % 2 == 0:
        h[n // 2] = 1.0
        h[1 : n // 2] = 2.0
    else:
        h[1 : (n + 1) // 2] = 2.0
    return np.abs(np.fft.ifft(spec * h))


def stft_distance(
    pred: tuple[ComplexSpectrogram, ComplexSpectrogram],
    gt: tuple[ComplexSpectrogram, ComplexSpectrogram],
) -> float:
    """Sum of per-channel Frobenius distances between complex spectrograms."""
    total = 0.0
    for p, g in zip(pred, gt):
        pf, gf = p.full(), g.full()
        if pf.shape != gf.shape:
            raise ValueError(f"shape mismatch: {pf.shape} vs {gf.shape}")
        total += float(np.linalg.norm(pf - gf))
    return total


def env_distance(pred: BinauralWaveform, gt: BinauralWaveform) -> float:
    """Sum of per-channel Euclidean distances between signal envelopes."""
    if len(pred) != len(gt):
        raise ValueError(f"length mismatch: {len(pred)} vs {len(gt)}")
    d = float(np.linalg.norm(envelope(pred.left) - envelope(gt.left)))
    d += float(np.linalg.norm(envelope(pred.right) - envelope(gt.right)))
    return d


def pool_magnitude(spec_mag: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Non-overlapping block mean down to ``target`` shape.

    The time axis is padded by edge replication up to the next multiple of the
    target; the frequency axis must divide exactly.
    """
    mag = np.asarray(spec_mag, dtype=np.float64)
    u, t = mag.shape
    u2, t2 = target
    if u2 <= 0 or t2 <= 0 or u % u2 != 0:
        raise ValueError(f"cannot pool {mag.shape} to {target}")
    pad = (-t) % t2
    if pad:
        mag = np.concatenate([mag, np.repeat(mag[:, -1:], pad, axis=1)], axis=1)
        t += pad
    bu, bt = u // u2, t // t2
    out = np.empty((u2, t2))
    for i in range(u2):
        for j in range(t2):
            out[i, j] = mag[bu * i : bu * (i + 1), bt * j : bt * (j + 1)].mean()
    return out
