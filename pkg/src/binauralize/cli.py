"""Command-line entry point: data generation, training, evaluation,
spatialization of user audio, attention dumps, and metric computation.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import configparser
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .analysis import coattention_report
from .dsp import BinauralWaveform, StftParams, Waveform, mix_to_mono
from .fileio import image_read, image_write, wav_read, wav_write
from .model import Synthesizer, SynthesizerConfig, predict_binaural, stft_params_for
from .scenes import DatasetConfig, load_manifest, make_dataset
from .training import (
    TrainConfig,
    binaural_distances,
    evaluate,
    train,
    write_metrics,
)


class CliError(Exception):
    """Runtime failure reported with exit code 2."""


class Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _tuple_of_ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.replace(" ", "").split(",") if p)


_MODEL_KEYS = {
    "grid_u": int, "grid_t": int, "channels": _tuple_of_ints,
    "visual_channels": _tuple_of_ints, "visual_refine": int, "frame_size": int,
    "embed_dim": int, "feature_layers": _tuple_of_ints, "mask_bound": float,
}
_TRAIN_KEYS = {
    "epochs": int, "batch_size": int, "lr": float, "lambda_con": float,
    "labeled_fraction": float, "segment_seconds": float,
    "feature_layers": _tuple_of_ints, "weight_q": float, "weight_r": float,
    "checkpoint_every": int, "dtype": str,
}


def parse_config(path) -> tuple[SynthesizerConfig, TrainConfig]:
    """Sectioned key = value file: [model] and [train] sections, both optional."""
    if not Path(path).is_file():
        raise CliError(f"config file not found: {path}")
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise CliError(f"config parse failure in {path}: {exc}") from exc
    unknown_sections = set(cp.sections()) - {"model", "train"}
    if unknown_sections:
        raise CliError(f"config parse failure: unknown sections {sorted(unknown_sections)}")

    model_kwargs = {}
    if cp.has_section("model"):
        for key, raw in cp.items("model"):
            if key not in _MODEL_KEYS:
                raise CliError(f"config parse failure: unknown [model] key {key!r}")
            if raw.strip():
                model_kwargs[key] = _MODEL_KEYS[key](raw)
    grid_u = model_kwargs.pop("grid_u", None)
    grid_t = model_kwargs.pop("grid_t", None)
    if grid_u or grid_t:
        base = SynthesizerConfig()
        model_kwargs["grid"] = (grid_u or base.grid[0], grid_t or base.grid[1])
    train_kwargs = {}
    if cp.has_section("train"):
        for key, raw in cp.items("train"):
            if key not in _TRAIN_KEYS:
                raise CliError(f"config parse failure: unknown [train] key {key!r}")
            if raw.strip():
                train_kwargs[key] = _TRAIN_KEYS[key](raw)
    try:
        model_cfg = SynthesizerConfig(**model_kwargs)
        train_cfg = TrainConfig(**train_kwargs)
    except (TypeError, ValueError) as exc:
        raise CliError(f"config parse failure: {exc}") from exc
    if "feature_layers" in model_kwargs and "feature_layers" not in train_kwargs:
        train_cfg = TrainConfig(
            **{**train_kwargs, "feature_layers": model_cfg.feature_layers}
        )
    return model_cfg, train_cfg


def _load_audio(path) -> Waveform | BinauralWaveform:
    if not Path(path).is_file():
        raise CliError(f"audio file not found: {path}")
    try:
        return wav_read(path)
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def _load_model(path, dtype) -> Synthesizer:
    if not Path(path).is_file():
        raise CliError(f"checkpoint not found: {path}")
    try:
        return Synthesizer.load(path, dtype=dtype)
    except ValueError as exc:
        raise CliError(str(exc)) from exc


def _load_frame(path) -> np.ndarray:
    if not Path(path).is_file():
        raise CliError(f"frame image not found: {path}")
    try:
        frame = image_read(path)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    if frame.ndim != 3:
        raise CliError(f"frame must be a color PPM image: {path}")
    return frame


def cmd_gen_data(args) -> int:
    cfg = DatasetConfig(
        n_scenes=args.scenes,
        labeled_frac=args.labeled_frac,
        duration=args.duration,
        min_sources=args.min_sources,
        max_sources=args.max_sources,
        train_frac=args.train_frac,
        itd=args.itd,
    )
    manifest = make_dataset(args.out, cfg, seed=args.seed)
    n_lab = sum(r.labeled for r in manifest.rows)
    print(f"wrote {len(manifest.rows)} scenes ({n_lab} labeled) to {args.out}")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = (SynthesizerConfig(), TrainConfig())
    if args.config:
        model_cfg, train_cfg = parse_config(args.config)
    train_cfg = TrainConfig(**{**_asdict(train_cfg), "seed": args.seed})
    manifest_path = Path(args.data) / "manifest.csv"
    if not manifest_path.is_file():
        raise CliError(f"manifest not found: {manifest_path}")
    manifest = load_manifest(manifest_path)
    result = train(manifest, train_cfg, model_config=model_cfg, out_path=args.out)
    write_metrics(str(args.out) + ".metrics.csv", result.metrics)
    last = result.metrics[-1]
    print(
        f"trained {train_cfg.epochs} epochs; final l_rec="
        f"{_fmt(last.l_rec)} l_con={_fmt(last.l_con)}; checkpoint {args.out}"
    )
    return 0


def _asdict(cfg: TrainConfig) -> dict:
    return {f.name: getattr(cfg, f.name) for f in fields(TrainConfig)}


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4f}"


def cmd_eval(args) -> int:
    model = _load_model(args.ckpt, np.float64)
    manifest_path = Path(args.data) / "manifest.csv"
    if not manifest_path.is_file():
        raise CliError(f"manifest not found: {manifest_path}")
    manifest = load_manifest(manifest_path)
    rows_model, rows_mono = evaluate(model, manifest, split=args.split)
    if not rows_model:
        raise CliError(f"split {args.split!r} has no scenes")
    write_metrics(args.report, rows_model + rows_mono)
    d_stft = float(np.mean([r.d_stft for r in rows_model]))
    d_env = float(np.mean([r.d_env for r in rows_model]))
    m_stft = float(np.mean([r.d_stft for r in rows_mono]))
    m_env = float(np.mean([r.d_env for r in rows_mono]))
    print(f"model  D_STFT {d_stft:.6f}  D_ENV {d_env:.6f}")
    print(f"mono   D_STFT {m_stft:.6f}  D_ENV {m_env:.6f}")
    return 0


def cmd_spatialize(args) -> int:
    model = _load_model(args.ckpt, np.float64)
    audio = _load_audio(args.mono)
    if isinstance(audio, BinauralWaveform):
        raise CliError(f"expected mono audio, got stereo: {args.mono}")
    params = stft_params_for(model.config)
    if audio.sample_rate != params.sample_rate:
        raise CliError(
            f"sample rate {audio.sample_rate} unsupported; expected "
            f"{params.sample_rate} (resampling out of scope)"
        )
    frame = _load_frame(args.frame)
    try:
        out = predict_binaural(model, audio, [(len(audio) / 2 / audio.sample_rate, frame)])
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    wav_write(args.out, out)
    print(f"wrote stereo {args.out} ({len(out)} samples at {out.sample_rate} Hz)")
    return 0


def cmd_attend(args) -> int:
    model = _load_model(args.ckpt, np.float64)
    audio = _load_audio(args.mono)
    if isinstance(audio, BinauralWaveform):
        audio = mix_to_mono(audio)
    params = stft_params_for(model.config)
    if audio.sample_rate != params.sample_rate:
        raise CliError(
            f"sample rate {audio.sample_rate} unsupported; expected {params.sample_rate}"
        )
    frame = _load_frame(args.frame)
    try:
        reports = coattention_report(model, audio, frame)
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for layer, rep in reports.items():
        prefix = out / f"layer{layer}"
        prefix.mkdir(exist_ok=True)
        for k in range(rep.coattn.shape[0]):
            image_write(prefix / f"att_{k:04d}.pgm", (rep.coattn[k] + 1.0) / 2.0)
        image_write(prefix / "aggregate.pgm", (rep.aggregate + 1.0) / 2.0)
        image_write(prefix / "p_av.pgm", rep.p_av)
        image_write(prefix / "p_a.pgm", rep.p_a)
        with open(prefix / "attend.csv", "w", encoding="utf-8") as f:
            f.write("record,k,row,col,value\n")
            n, h, w = rep.coattn.shape
            for k in range(n):
                for y in range(h):
                    for x in range(w):
                        f.write(f"coattention,{k},{y},{x},{rep.coattn[k, y, x]:.10g}\n")
            for name, grid in (("p_av", rep.p_av), ("p_a", rep.p_a)):
                for u in range(grid.shape[0]):
                    for t in range(grid.shape[1]):
                        f.write(f"{name},,{u},{t},{grid[u, t]:.10g}\n")
    print(f"wrote attention maps for layers {sorted(reports)} to {out}")
    return 0


def cmd_metrics(args) -> int:
    pred = _load_audio(args.pred)
    gt = _load_audio(args.gt)
    if isinstance(pred, Waveform) or isinstance(gt, Waveform):
        raise CliError("metrics expects stereo WAV files")
    if pred.sample_rate != gt.sample_rate:
        raise CliError(
            f"sample rate mismatch: {pred.sample_rate} vs {gt.sample_rate}"
        )
    if len(pred) != len(gt):
        raise CliError(f"length mismatch: {len(pred)} vs {len(gt)}")
    params = StftParams(sample_rate=pred.sample_rate)
    d_stft, d_env = binaural_distances(pred, gt, params)
    print(f"D_STFT {d_stft}")
    print(f"D_ENV {d_env}")
    return 0


def build_parser() -> Parser:
    parser = Parser(prog="binauralize", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=Parser)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", default=None)

    p = sub.add_parser("gen-data", help="render a synthetic scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=100)
    p.add_argument("--labeled-frac", type=float, default=1.0)
    p.add_argument("--duration", type=float, default=1.03)
    p.add_argument("--min-sources", type=int, default=1)
    p.add_argument("--max-sources", type=int, default=2)
    p.add_argument("--train-frac", type=float, default=0.8)
    p.add_argument("--itd", action="store_true")
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train a synthesizer on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--report", required=True)
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("spatialize", help="mono WAV + frame image -> stereo WAV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mono", required=True)
    p.add_argument("--frame", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_spatialize)

    p = sub.add_parser("attend", help="dump co-attention maps and probabilities")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mono", required=True)
    p.add_argument("--frame", required=True)
    p.add_argument("--out", required=True)
    common(p)
    p.set_defaults(fn=cmd_attend)

    p = sub.add_parser("metrics", help="distances between two stereo WAV files")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    common(p)
    p.set_defaults(fn=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "fn", None):
        parser.print_usage(sys.stderr)
        sys.stderr.write("binauralize: error: a subcommand is required\n")
        return 1
    try:
        return args.fn(args)
    except CliError as exc:
        sys.stderr.write(f"binauralize: error: {exc}\n")
        return 2
    except (OSError, ValueError) as exc:
        sys.stderr.write(f"binauralize: error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
