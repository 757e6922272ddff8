"""Trainer and evaluator tests on small synthetic datasets."""

import numpy as np
import pytest

from binauralize.dsp import BinauralWaveform, StftParams, Waveform, mix_to_mono
from binauralize.model import Synthesizer, SynthesizerConfig
from binauralize.scenes import DatasetConfig, make_dataset
from binauralize.training import (
    MetricsRow,
    TrainConfig,
    binaural_distances,
    evaluate,
    mono_baseline,
    read_metrics,
    sample_segment,
    train,
    write_metrics,
)

TINY_MODEL = SynthesizerConfig(
    grid=(64, 64),
    channels=(4, 8, 8, 8),
    visual_channels=(4, 4, 8),
    visual_refine=1,
    frame_size=128,
    embed_dim=8,
)
TINY_STFT = StftParams(kept_bins=64)


def tiny_dataset(tmp_path, n=6, labeled_frac=1.0, seed=0, **kw):
    # frequencies low enough that harmonics stay inside the 64 kept bins
    cfg = DatasetConfig(
        n_scenes=n, labeled_frac=labeled_frac, duration=1.03,
        freq_lo=250.0, freq_hi=450.0, **kw,
    )
    return make_dataset(tmp_path / f"data{seed}_{n}_{labeled_frac}", cfg, seed=seed)


def tiny_train_cfg(**kw):
    base = dict(epochs=2, batch_size=4, lr=1e-3, seed=1, dtype="float64")
    base.update(kw)
    return TrainConfig(**base)


class TestSampleSegment:
    def test_exact_length_forces_start_zero(self):
        rng = np.random.default_rng(0)
        n = round(0.63 * 16000)
        audio = BinauralWaveform(
            Waveform(rng.uniform(-1, 1, n)), Waveform(rng.uniform(-1, 1, n))
        )
        frame = np.zeros((8, 8, 3))
        mono, gt, f = sample_segment(audio, [(0.3, frame)], rng)
        assert len(mono) == n
        assert np.array_equal(gt.left.samples, audio.left.samples)

    def test_reproducible_and_mono_is_sum(self):
        base = np.random.default_rng(1)
        n = 20000
        audio = BinauralWaveform(
            Waveform(base.uniform(-1, 1, n)), Waveform(base.uniform(-1, 1, n))
        )
        frame = np.zeros((8, 8, 3))
        m1, g1, _ = sample_segment(audio, [(0.5, frame)], np.random.default_rng(7))
        m2, g2, _ = sample_segment(audio, [(0.5, frame)], np.random.default_rng(7))
        assert np.array_equal(m1.samples, m2.samples)
        assert np.array_equal(m1.samples, g1.left.samples + g1.right.samples)

    def test_too_short(self):
        audio = BinauralWaveform(Waveform(np.zeros(100)), Waveform(np.zeros(100)))
        with pytest.raises(ValueError, match="shorter"):
            sample_segment(audio, [(0.0, np.zeros((8, 8, 3)))], np.random.default_rng(0))


class TestTrainLoop:
    def test_smoke_and_checkpoint(self, tmp_path):
        manifest = tiny_dataset(tmp_path, n=6)
        out = tmp_path / "m.ckpt"
        result = train(manifest, tiny_train_cfg(), model_config=TINY_MODEL,
                       out_path=out, stft_params=TINY_STFT)
        assert out.exists()
        assert len(result.metrics) == 2
        assert all(r.split == "train" for r in result.metrics)
        loaded = Synthesizer.load(out)
        assert loaded.config == result.model.config

    def test_lambda_zero_is_pure_recovery(self, tmp_path):
        manifest = tiny_dataset(tmp_path, n=6)
        result = train(manifest, tiny_train_cfg(lambda_con=0.0),
                       model_config=TINY_MODEL, stft_params=TINY_STFT)
        assert all(s.l_con == 0.0 for s in result.steps)
        assert all(s.n_unlabeled == 0 for s in result.steps)
        assert all(s.total == s.l_rec for s in result.steps)

    def test_frozen_without_labels_or_consistency(self, tmp_path):
        manifest = tiny_dataset(tmp_path, n=6)
        cfg = tiny_train_cfg(lambda_con=0.0, labeled_fraction=0.0, epochs=1)
        result = train(manifest, cfg, model_config=TINY_MODEL, stft_params=TINY_STFT)
        fresh = Synthesizer(result.model.config, seed=cfg.seed)
        for name, p in result.model.params.items():
            assert np.array_equal(p.data, fresh.params[name].data)

    def test_loss_decomposition(self, tmp_path):
        manifest = tiny_dataset(tmp_path, n=6, labeled_frac=0.5)
        result = train(manifest, tiny_train_cfg(lambda_con=0.7),
                       model_config=TINY_MODEL, stft_params=TINY_STFT)
        for s in result.steps:
            assert abs(s.total - (s.l_rec + 0.7 * s.l_con)) <= 1e-9

    def test_semi_supervised_mixes_predicted_targets(self, tmp_path):
        manifest = tiny_dataset(tmp_path, n=8, labeled_frac=0.5)
        result = train(manifest, tiny_train_cfg(epochs=1),
                       model_config=TINY_MODEL, stft_params=TINY_STFT)
        assert sum(s.n_unlabeled for s in result.steps) > 0
        assert all(np.isfinite(s.total) for s in result.steps)

    def test_labeled_fraction_override_monotone(self, tmp_path):
        manifest = tiny_dataset(tmp_path, n=10)
        counts = {}
        for rho in (0.2, 0.5, 0.9):
            result = train(
                manifest,
                tiny_train_cfg(lambda_con=0.0, labeled_fraction=rho, epochs=1),
                model_config=TINY_MODEL, stft_params=TINY_STFT,
            )
            counts[rho] = sum(s.n_labeled for s in result.steps)
            assert sum(s.n_unlabeled for s in result.steps) == 0
        assert counts[0.2] <= counts[0.5] <= counts[0.9]

    def test_reproducible_metrics(self, tmp_path):
        manifest = tiny_dataset(tmp_path, n=6)
        cfg = tiny_train_cfg()
        r1 = train(manifest, cfg, model_config=TINY_MODEL, stft_params=TINY_STFT)
        r2 = train(manifest, cfg, model_config=TINY_MODEL, stft_params=TINY_STFT)
        p1, p2 = tmp_path / "m1.csv", tmp_path / "m2.csv"
        write_metrics(p1, r1.metrics)
        write_metrics(p2, r2.metrics)
        strip = lambda p: [line.rsplit(",", 1)[0] for line in p.read_text().splitlines()]
        assert strip(p1) == strip(p2)  # identical up to wall time
        for n, p in r1.model.params.items():
            assert np.array_equal(p.data, r2.model.params[n].data)

    def test_overfit_single_scene(self, tmp_path):
        manifest = tiny_dataset(tmp_path, n=1, train_frac=1.0, max_sources=1)
        cfg = tiny_train_cfg(epochs=500, batch_size=1, lr=2e-3)
        result = train(manifest, cfg, model_config=TINY_MODEL, stft_params=TINY_STFT)
        first = result.steps[0].l_rec
        last = np.mean([s.l_rec for s in result.steps[-20:]])
        assert last <= 0.1 * first


class TestEvaluate:
    def test_ground_truth_against_itself_is_zero(self, tmp_path):
        manifest = tiny_dataset(tmp_path, n=2)
        from binauralize.training import load_scene

        sc = load_scene(manifest, manifest.rows[0])
        d_stft, d_env = binaural_distances(sc.audio, sc.audio, StftParams())
        assert d_stft == 0.0 and d_env == 0.0

    def test_mono_baseline_zero_on_center_panned(self, tmp_path):
        manifest = tiny_dataset(tmp_path, n=2, azimuth_lo=0.0, azimuth_hi=0.0)
        from binauralize.training import load_scene

        for row in manifest.rows:
            sc = load_scene(manifest, row)
            mono = mix_to_mono(sc.audio)
            d_stft, d_env = binaural_distances(mono_baseline(mono), sc.audio, StftParams())
            assert d_stft < 1e-9 and d_env < 1e-9

    def test_mono_baseline_positive_and_matches_oracle(self, tmp_path):
        manifest = tiny_dataset(tmp_path, n=3, seed=5)
        from binauralize.training import load_scene

        params = StftParams()
        for row in manifest.split("test") or manifest.rows[:1]:
            sc = load_scene(manifest, row)
            mono = mix_to_mono(sc.audio)
            pred = mono_baseline(mono)
            d_stft, d_env = binaural_distances(pred, sc.audio, params)
            assert d_stft > 0 and d_env > 0

            # independent oracle: frame the signals and DFT them directly
            def oracle_spec(x):
                win = np.hanning(400)
                frames = 1 + (len(x) - 400) // 160
                out = np.empty((257, frames), dtype=complex)
                for m in range(frames):
                    seg = np.zeros(512)
                    seg[:400] = x[m * 160 : m * 160 + 400] * win
                    out[:, m] = np.fft.rfft(seg)
                return out

            want = 0.0
            for p, g in ((pred.left, sc.audio.left), (pred.right, sc.audio.right)):
                want += np.sqrt(
                    np.sum(np.abs(oracle_spec(p.samples) - oracle_spec(g.samples)) ** 2)
                )
            assert abs(d_stft - want) / want < 1e-6

    def test_evaluate_rows_and_untrained_matches_mono(self, tmp_path):
        manifest = tiny_dataset(tmp_path, n=5, seed=3)
        model = Synthesizer(TINY_MODEL, seed=0)
        rows_model, rows_mono = evaluate(model, manifest, split="test",
                                         stft_params=TINY_STFT)
        assert len(rows_model) == len(manifest.split("test")) == len(rows_mono)
        for rm, rb in zip(rows_model, rows_mono):
            assert rm.split == "test" and rb.split == "test:mono"
            assert rm.d_stft >= 0 and rb.d_stft >= 0
            # untrained model emits half-mono, so it sits near the baseline
            assert rm.d_stft == pytest.approx(rb.d_stft, rel=0.15)


class TestMetricsCsv:
    def test_round_trip(self, tmp_path):
        rows = [
            MetricsRow(1, "train", None, None, 3.5, 0.69, 12.0),
            MetricsRow(2, "test", 1.25, 0.125, None, None, 30.0),
        ]
        path = tmp_path / "m.csv"
        write_metrics(path, rows)
        back = read_metrics(path)
        assert back[0].l_rec == 3.5 and back[0].d_stft is None
        assert back[1].d_stft == 1.25 and back[1].l_con is None

    def test_negative_distance_rejected(self):
        with pytest.raises(ValueError, match="nonnegative"):
            MetricsRow(1, "test", -1.0, 0.0, None, None, 0.0)
