"""Longer calibration run with checkpoint-cadence evals."""
import sys
import time
from pathlib import Path

import numpy as np

from binauralize.model import Synthesizer, SynthesizerConfig
from binauralize.scenes import load_manifest
from binauralize.training import TrainConfig, evaluate, train

data = Path("/tmp/pilot/data")
manifest = load_manifest(data / "manifest.csv")
lam = float(sys.argv[1])
lr = float(sys.argv[2])
epochs = int(sys.argv[3])
seed = int(sys.argv[4]) if len(sys.argv) > 4 else 0
tag = f"lam{lam}_lr{lr}_s{seed}"

MODEL = SynthesizerConfig(channels=(16, 32, 64, 128), visual_channels=(8, 16, 32, 32), embed_dim=32)
cfg = TrainConfig(epochs=epochs, lr=lr, lambda_con=lam, seed=seed, dtype="float32",
                  checkpoint_every=5)
out = Path(f"/tmp/pilot/{tag}.ckpt")
t0 = time.perf_counter()
result = train(manifest, cfg, model_config=MODEL, out_path=out)
print(f"{tag}: trained {epochs} ep in {time.perf_counter()-t0:.0f}s", flush=True)
for ep in list(range(5, epochs, 5)) + [epochs]:
    path = Path(str(out) + f".ep{ep}") if ep < epochs else out
    if not path.exists():
        continue
    model = Synthesizer.load(path, dtype=np.float32)
    rows_model, rows_mono = evaluate(model, manifest, split="test")
    ds = float(np.mean([r.d_stft for r in rows_model]))
    ms = float(np.mean([r.d_stft for r in rows_mono]))
    de = float(np.mean([r.d_env for r in rows_model]))
    me = float(np.mean([r.d_env for r in rows_mono]))
    print(f"{tag} ep{ep}: STFT ratio {ds/ms:.3f} ({ds:.1f}/{ms:.1f}) "
          f"ENV ratio {de/me:.3f}", flush=True)
