"""Scene generator and file I/O tests."""

import struct

import numpy as np
import pytest

from binauralize.dsp import BinauralWaveform, StftParams, Waveform, stft
from binauralize.fileio import image_read, image_write, wav_read, wav_write
from binauralize.scenes import (
    DatasetConfig,
    Scene,
    SourceSpec,
    blob_center,
    load_manifest,
    make_dataset,
    pan_gains,
    random_scene,
    render_scene,
)

P = StftParams()


def one_source_scene(azimuth, kind="sine", freq=1000.0, amp=0.8, seed=3, itd=False):
    src = SourceSpec(kind=kind, base_freq=freq, amplitude=amp, azimuth=azimuth)
    return Scene((src,), duration=1.03, seed=seed, itd=itd)


class TestPanning:
    def test_center_pan(self):
        audio, _, meta = render_scene(one_source_scene(0.0))
        assert np.array_equal(audio.left.samples, audio.right.samples)
        assert meta["src0_gain_l"] == pytest.approx(np.sqrt(0.5), abs=1e-12)
        assert meta["src0_gain_r"] == pytest.approx(np.sqrt(0.5), abs=1e-12)

    def test_hard_right_pan(self):
        audio, frame, meta = render_scene(one_source_scene(1.0))
        assert np.all(audio.left.samples == 0)
        assert meta["src0_gain_r"] == 1.0
        assert meta["src0_blob_cx"] == 127.0
        # the blob is visibly at the right edge
        col_energy = (frame - 0.2).sum(axis=(0, 2))
        assert np.argmax(col_energy) >= 120

    def test_half_right_gains_and_level_difference(self):
        audio, _, meta = render_scene(one_source_scene(0.5))
        assert meta["src0_gain_l"] == pytest.approx(0.5, abs=1e-12)
        assert meta["src0_gain_r"] == pytest.approx(np.sqrt(0.75), abs=1e-12)
        sl = np.abs(stft(audio.left, P).grid)
        sr = np.abs(stft(audio.right, P).grid)
        peak_bin = int(np.argmax(sl.sum(axis=1)))
        assert np.all(sl[peak_bin] - sr[peak_bin] < 0)

    def test_energy_law(self):
        for az in (-0.9, -0.3, 0.0, 0.6, 1.0):
            audio, _, _ = render_scene(one_source_scene(az, seed=11))
            gl, gr = pan_gains(az)
            src = audio.left.samples / gl if gl > 0 else audio.right.samples / gr
            lr = np.sum(audio.left.samples**2) + np.sum(audio.right.samples**2)
            mono = np.sum(src**2)
            assert abs(lr - mono) / mono < 1e-6

    def test_sign_law(self):
        for az in (0.2, 0.7):
            audio, _, _ = render_scene(one_source_scene(az, seed=5))
            sl = np.abs(stft(audio.left, P).grid).sum()
            sr = np.abs(stft(audio.right, P).grid).sum()
            assert sr > sl

    def test_pixel_law(self):
        centers = [blob_center(a) for a in np.linspace(-1, 1, 9)]
        assert all(b > a for a, b in zip(centers, centers[1:]))


class TestSources:
    def test_kinds_render_finite_and_peaked(self):
        for kind, freq in (("sine", 500.0), ("harmonic_stack", 300.0), ("band_noise", 900.0)):
            audio, _, _ = render_scene(one_source_scene(0.0, kind=kind, freq=freq, amp=0.7))
            mono = audio.left.samples + audio.right.samples
            assert np.all(np.isfinite(mono))
            assert np.max(np.abs(mono)) > 0.3

    def test_appearance_tied_to_kind(self):
        s = SourceSpec(kind="band_noise", base_freq=400.0, amplitude=0.5, azimuth=0.0)
        assert s.appearance_id == 2

    def test_validation(self):
        with pytest.raises(ValueError, match="kind"):
            SourceSpec(kind="square", base_freq=100.0, amplitude=0.5, azimuth=0.0)
        with pytest.raises(ValueError, match="azimuth"):
            SourceSpec(kind="sine", base_freq=100.0, amplitude=0.5, azimuth=1.5)
        with pytest.raises(ValueError, match="Nyquist"):
            Scene((SourceSpec("sine", 9000.0, 0.5, 0.0),))
        with pytest.raises(ValueError, match="duration"):
            Scene((SourceSpec("sine", 100.0, 0.5, 0.0),), duration=0.5)

    def test_itd_delays_far_ear(self):
        off, _, _ = render_scene(one_source_scene(0.5, seed=7))
        on, _, _ = render_scene(one_source_scene(0.5, seed=7, itd=True))
        d = int(round(0.5 * 0.0006 * 16000))
        assert np.all(on.left.samples[:d] == 0)
        assert np.allclose(on.left.samples[d:], off.left.samples[:-d])
        assert np.array_equal(on.right.samples, off.right.samples)

    def test_clipping_rescales_uniformly(self):
        sources = tuple(
            SourceSpec("sine", 400.0 * (i + 1), 1.0, 0.0) for i in range(4)
        )
        audio, _, meta = render_scene(Scene(sources, seed=2))
        assert meta["rescale"] < 1.0
        peak = max(np.max(np.abs(audio.left.samples)), np.max(np.abs(audio.right.samples)))
        assert peak <= 1.0 + 1e-12

    def test_render_deterministic(self):
        a1, f1, m1 = render_scene(one_source_scene(0.3, seed=21))
        a2, f2, m2 = render_scene(one_source_scene(0.3, seed=21))
        assert np.array_equal(a1.left.samples, a2.left.samples)
        assert np.array_equal(f1, f2)
        assert m1 == m2


class TestDataset:
    def test_labeled_count(self, tmp_path):
        cfg = DatasetConfig(n_scenes=10, labeled_frac=0.5, duration=0.7)
        manifest = make_dataset(tmp_path / "d", cfg, seed=1)
        assert sum(r.labeled for r in manifest.rows) == 5

    def test_splits_disjoint_and_sized(self, tmp_path):
        cfg = DatasetConfig(n_scenes=20, train_frac=0.8, duration=0.7)
        manifest = make_dataset(tmp_path / "d", cfg, seed=2)
        train = {r.scene_id for r in manifest.split("train")}
        test = {r.scene_id for r in manifest.split("test")}
        assert len(train) == 16 and len(test) == 4 and not (train & test)

    def test_byte_reproducible(self, tmp_path):
        cfg = DatasetConfig(n_scenes=4, duration=0.7)
        m1 = make_dataset(tmp_path / "a", cfg, seed=9)
        m2 = make_dataset(tmp_path / "b", cfg, seed=9)
        for r1, r2 in zip(m1.rows, m2.rows):
            for rel1, rel2 in ((r1.wav, r2.wav), (r1.ppm, r2.ppm), (r1.meta, r2.meta)):
                assert (m1.root / rel1).read_bytes() == (m2.root / rel2).read_bytes()
        assert (m1.root / "manifest.csv").read_text() == (m2.root / "manifest.csv").read_text()

    def test_manifest_round_trip(self, tmp_path):
        cfg = DatasetConfig(n_scenes=6, labeled_frac=0.5, duration=0.7)
        manifest = make_dataset(tmp_path / "d", cfg, seed=3)
        loaded = load_manifest(tmp_path / "d" / "manifest.csv")
        assert loaded.seed == 3
        assert [r.scene_id for r in loaded.rows] == [r.scene_id for r in manifest.rows]
        assert [r.labeled for r in loaded.rows] == [r.labeled for r in manifest.rows]
        assert all((loaded.root / r.wav).exists() for r in loaded.rows)

    def test_azimuth_distribution_uniform(self):
        cfg = DatasetConfig(n_scenes=1, min_sources=1, max_sources=1)
        rng = np.random.default_rng(123)
        azimuths = np.array(
            [random_scene(cfg, rng, 0).sources[0].azimuth for _ in range(10000)]
        )
        counts, _ = np.histogram(azimuths, bins=10, range=(-1, 1))
        expected = 1000.0
        sigma = np.sqrt(10000 * 0.1 * 0.9)
        assert np.all(np.abs(counts - expected) <= 3 * sigma)


class TestWavIO:
    def test_round_trip_quantization_bound(self, tmp_path):
        rng = np.random.default_rng(17)
        wave = Waveform(rng.uniform(-1, 1, 2000))
        path = tmp_path / "x.wav"
        wav_write(path, wave)
        back = wav_read(path)
        assert isinstance(back, Waveform)
        assert back.sample_rate == 16000
        assert np.max(np.abs(back.samples - wave.samples)) <= 2.0**-15

    def test_stereo_channel_order(self, tmp_path):
        left = np.array([0.5, 0.25, -0.5, 0.0, 0.125, -0.25, 1.0, -1.0])
        right = -left
        path = tmp_path / "s.wav"
        wav_write(path, BinauralWaveform(Waveform(left), Waveform(right)))
        # independent parse: frames are [L R] interleaved little-endian int16
        raw = path.read_bytes()
        ints = struct.unpack("<16h", raw[44:])
        want = np.round(left * 32767).astype(int)
        assert list(ints[0::2]) == list(want)
        back = wav_read(path)
        assert isinstance(back, BinauralWaveform)
        assert np.max(np.abs(back.left.samples - left)) <= 2.0**-15

    def test_empty_data_chunk(self, tmp_path):
        path = tmp_path / "e.wav"
        header = (
            b"RIFF" + struct.pack("<I", 36) + b"WAVEfmt "
            + struct.pack("<IHHIIHH", 16, 1, 1, 16000, 32000, 2, 16)
            + b"data" + struct.pack("<I", 0)
        )
        path.write_bytes(header)
        with pytest.raises(ValueError, match="empty audio"):
            wav_read(path)

    def test_malformed_header(self, tmp_path):
        path = tmp_path / "bad.wav"
        path.write_bytes(b"OGGS" + b"\x00" * 40)
        with pytest.raises(ValueError, match="malformed"):
            wav_read(path)

    def test_unsupported_codec(self, tmp_path):
        path = tmp_path / "f32.wav"
        payload = struct.pack("<4h", 0, 1, 2, 3)
        raw = (
            b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVEfmt "
            + struct.pack("<IHHIIHH", 16, 3, 1, 16000, 64000, 4, 32)
            + b"data" + struct.pack("<I", len(payload)) + payload
        )
        path.write_bytes(raw)
        with pytest.raises(ValueError, match="unsupported codec"):
            wav_read(path)


class TestImageIO:
    def test_half_gray_rounds_up(self, tmp_path):
        path = tmp_path / "h.pgm"
        image_write(path, np.full((3, 3), 0.5))
        body = path.read_bytes().split(b"\n", 3)[3]
        assert set(body) == {128}

    def test_2x2_pgm_exact_bytes(self, tmp_path):
        path = tmp_path / "t.pgm"
        image_write(path, np.array([[0.0, 1.0], [0.5, 0.2]]))
        assert path.read_bytes() == b"P5\n2 2\n255\n" + bytes([0, 255, 128, 51])

    def test_ppm_round_trip(self, tmp_path):
        rng = np.random.default_rng(31)
        img = np.round(rng.uniform(0, 1, (5, 4, 3)) * 255) / 255.0
        path = tmp_path / "x.ppm"
        image_write(path, img)
        back = image_read(path)
        assert back.shape == (5, 4, 3)
        assert np.allclose(back, img, atol=1e-12)

    def test_unwritable_path(self, tmp_path):
        with pytest.raises(OSError):
            image_write(tmp_path / "missing_dir" / "x.pgm", np.zeros((2, 2)))

    def test_bad_format(self, tmp_path):
        path = tmp_path / "x.ppm"
        path.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with pytest.raises(ValueError, match="unsupported image format"):
            image_read(path)


class TestGoldenFiles:
    """Byte-for-byte regression against checked-in fixtures."""

    def test_wav_golden(self, tmp_path, golden_dir):
        ref = golden_dir / "ref.wav"
        audio = wav_read(ref)
        out = tmp_path / "re.wav"
        wav_write(out, audio)
        assert out.read_bytes() == ref.read_bytes()

    def test_ppm_golden(self, tmp_path, golden_dir):
        ref = golden_dir / "ref.ppm"
        out = tmp_path / "re.ppm"
        image_write(out, image_read(ref))
        assert out.read_bytes() == ref.read_bytes()

    def test_pgm_golden(self, tmp_path, golden_dir):
        ref = golden_dir / "ref.pgm"
        out = tmp_path / "re.pgm"
        image_write(out, image_read(ref))
        assert out.read_bytes() == ref.read_bytes()
