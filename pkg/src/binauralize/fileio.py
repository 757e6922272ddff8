"""Minimal WAV (PCM16) and netpbm (PPM/PGM) readers and writers.

Byte layouts are fixed so identical inputs produce identical files.
"""
from __future__ import annotations

import struct

import numpy as np

from .dsp import BinauralWaveform, Waveform

PCM_SCALE = 32767.0


def _quantize(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, -1.0, 1.0) * PCM_SCALE).astype("<i2")


def wav_write(path, audio: Waveform | BinauralWaveform) -> None:
    """Write mono or stereo 16-bit PCM RIFF/WAVE (channel 0 = left)."""
    if isinstance(audio, BinauralWaveform):
        data = np.empty(2 * len(audio), dtype="<i2")
        data[0::2] = _quantize(audio.left.samples)
        data[1::2] = _quantize(audio.right.samples)
        channels, rate = 2, audio.sample_rate
    else:
        data = _quantize(audio.samples)
        channels, rate = 1, audio.sample_rate
    payload = data.tobytes()
    block = 2 * channels
    with open(path, "wb") as f:
        f.write(b"RIFF")
        f.write(struct.pack("<I", 36 + len(payload)))
        f.write(b"WAVEfmt ")
        f.write(struct.pack("<IHHIIHH", 16, 1, channels, rate, rate * block, block, 16))
        f.write(b"data")
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)


def wav_read(path) -> Waveform | BinauralWaveform:
    """Read 16-bit PCM RIFF/WAVE; mono gives Waveform, stereo BinauralWaveform."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise ValueError(f"malformed WAV header in {path}")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(raw):
        cid = raw[pos : pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4 : pos + 8])
        body = raw[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            if size < 16:
                raise ValueError(f"malformed fmt chunk in {path}")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None or payload is None:
        raise ValueError(f"missing fmt or data chunk in {path}")
    audio_format, channels, rate, _, _, bits = fmt
    if audio_format != 1 or bits != 16:
        raise ValueError(f"unsupported codec in {path}: format={audio_format} bits={bits}")
    if channels not in (1, 2):
        raise ValueError(f"unsupported channel count {channels} in {path}")
    if len(payload) == 0:
        raise ValueError("empty audio")
    ints = np.frombuffer(payload, dtype="<i2")
    samples = ints.astype(np.float64) / PCM_SCALE
    if channels == 1:
        return Waveform(samples, rate)
    return BinauralWaveform(Waveform(samples[0::2], rate), Waveform(samples[1::2], rate))


def _to_bytes(values: np.ndarray) -> np.ndarray:
    # linear [0,1] -> 0..255, round half up so 0.5 maps to 128
    return np.clip(np.floor(values * 255.0 + 0.5), 0, 255).astype(np.uint8)


def image_write(path, image: np.ndarray) -> None:
    """Write [0,1] data as binary netpbm: (H,W,3) -> PPM P6, (H,W) -> PGM P5."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    elif image.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"image_write: unsupported shape {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(_to_bytes(image).tobytes())


def image_read(path) -> np.ndarray:
    """Read binary PPM (P6) or PGM (P5), maxval 255, to float [0,1]."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] not in (b"P5", b"P6"):
        raise ValueError(f"unsupported image format in {path}")
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval} in {path}")
    depth = 3 if raw[:2] == b"P6" else 1
    pixels = np.frombuffer(raw[pos : pos + w * h * depth], dtype=np.uint8)
    if pixels.size != w * h * depth:
        raise ValueError(f"truncated image data in {path}")
    data = pixels.astype(np.float64) / 255.0
    return data.reshape(h, w, 3) if depth == 3 else data.reshape(h, w)
