"""Calibration pilot for the acceptance training runs (not part of the suite)."""
import sys
import time
from pathlib import Path

import numpy as np

from binauralize.model import SynthesizerConfig
from binauralize.scenes import DatasetConfig, make_dataset
from binauralize.training import TrainConfig, evaluate, train

ROOT = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("/tmp/pilot")
EPOCHS = int(sys.argv[2]) if len(sys.argv) > 2 else 5
LR = float(sys.argv[3]) if len(sys.argv) > 3 else 1e-3
SEED = int(sys.argv[4]) if len(sys.argv) > 4 else 0

MODEL = SynthesizerConfig(
    channels=(16, 32, 64, 128), visual_channels=(8, 16, 32, 32), embed_dim=32,
)

ROOT.mkdir(parents=True, exist_ok=True)
data_dir = ROOT / "data"
if not (data_dir / "manifest.csv").exists():
    t0 = time.perf_counter()
    make_dataset(
        data_dir,
        DatasetConfig(n_scenes=550, train_frac=500 / 550, min_sources=1, max_sources=2),
        seed=100,
    )
    print(f"dataset: {time.perf_counter()-t0:.1f}s", flush=True)

from binauralize.scenes import load_manifest

manifest = load_manifest(data_dir / "manifest.csv")
print("train/test:", len(manifest.split("train")), len(manifest.split("test")), flush=True)

for lam in (1.0, 0.0):
    t0 = time.perf_counter()
    cfg = TrainConfig(epochs=EPOCHS, lr=LR, lambda_con=lam, seed=SEED, dtype="float32")
    result = train(manifest, cfg, model_config=MODEL)
    t_train = time.perf_counter() - t0
    rows_model, rows_mono = evaluate(result.model, manifest, split="test")
    t_eval = time.perf_counter() - t0 - t_train
    ds = float(np.mean([r.d_stft for r in rows_model]))
    de = float(np.mean([r.d_env for r in rows_model]))
    ms = float(np.mean([r.d_stft for r in rows_mono]))
    me = float(np.mean([r.d_env for r in rows_mono]))
    print(
        f"lam={lam} seed={SEED} ep={EPOCHS} lr={LR}: D_STFT {ds:.3f} (mono {ms:.3f}, "
        f"ratio {ds/ms:.3f}) D_ENV {de:.4f} (mono {me:.4f}, ratio {de/me:.3f}) "
        f"train {t_train:.0f}s eval {t_eval:.0f}s "
        f"l_rec {result.metrics[0].l_rec:.2f}->{result.metrics[-1].l_rec:.2f} "
        f"l_con {result.metrics[0].l_con or 0:.4f}->{result.metrics[-1].l_con or 0:.4f}",
        flush=True,
    )
