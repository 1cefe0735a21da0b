"""End-to-end walkthrough at toy scale.

Synthesizes a handful of source images, builds a degradation manifest,
trains a small model for a few hundred iterations, and compares it against
plain bicubic upsampling on freshly degraded fixtures. Finishes in about a
minute on one CPU core. Run from the repo root:

    python3 demos/end_to_end_small.py
"""

import tempfile
from pathlib import Path

import numpy as np
import torch

from carsr.degradation import DegradeSpec, bicubic_upscale, build_manifest, degrade_testset
from carsr.fixtures import write_fixture_corpus
from carsr.metrics import evaluate_dataset, psnr_y
from carsr.model import ModelConfig, build_model, count_params
from carsr.training import TrainConfig, train_loop

torch.set_num_threads(1)

root = Path(tempfile.mkdtemp(prefix="carsr_demo_"))
src_dir = root / "sources"
run_dir = root / "run"
print(f"workspace: {root}")

# 1. a tiny corpus of synthetic photographs
write_fixture_corpus(src_dir, count=5, height=160, width=160, seed=0)

# 2. a manifest: each entry pins (source, crop, quality factor, transform)
spec = DegradeSpec(scale=4, qf_min=10, qf_max=60)
manifest = build_manifest(src_dir, spec, seed=1, count=24, patch=64)
print(f"manifest: {len(manifest.entries)} patch pairs, codec {manifest.codec}")

# 3. a small model and a short schedule
model_cfg = ModelConfig(n_f=16, num_rrdb=2)
train_cfg = TrainConfig(
    batch_size=4,
    hr_patch=64,
    lr_init=1e-3,
    total_iters=300,
    restart_period=150,
    checkpoint_interval=150,
    seed=1,
)
print(f"model: {count_params(build_model(model_cfg, seed=1)):,} parameters")

result = train_loop(manifest, model_cfg, train_cfg, run_dir, src_dir)
lines = result.log_path.read_text().strip().splitlines()
print(f"trained {len(lines)} iterations; final checkpoint {result.final_checkpoint.name}")

# 4. evaluate on fresh fixtures degraded at a fixed quality factor
test_dir = root / "testset"
write_fixture_corpus(test_dir, count=3, height=96, width=96, seed=77)
pairs, _ = degrade_testset(test_dir, qf=20, scale=4)

model = result.model
model.eval()
direct = evaluate_dataset(model, pairs)

bicubic = [psnr_y(bicubic_upscale(lr, 4), hr) for _, lr, hr in pairs]
print(f"bicubic baseline: {np.mean(bicubic):6.2f} dB")
print(f"model (300 iter): {direct.mean_psnr_y:6.2f} dB  ssim {direct.mean_ssim_y:.4f}")
print("(a real run wants far more iterations; see the desk preset in training.py)")
