"""Tour of the individual pieces: sub-pixel shuffle, the dihedral group,
the warm-restart schedule, loss composition, and self-ensembling.

    python3 demos/building_blocks.py
"""

import torch

from carsr.dihedral import NUM_TRANSFORMS, apply_dihedral, compose_dihedral
from carsr.metrics import self_ensemble
from carsr.model import ModelConfig, bilinear_upsample, build_model, pixel_shuffle
from carsr.training import TrainConfig, combined_loss, cosine_lr

torch.set_num_threads(1)

# --- pixel shuffle rearranges channel groups into spatial detail ----------
x = torch.arange(8.0).reshape(1, 4, 1, 2)  # 4 channels of a 1x2 map, s=2
print("pixel shuffle input (4ch, 1x2):")
print(x[0, :, 0])
print("output (1ch, 2x4):")
print(pixel_shuffle(x, 2)[0, 0])

# --- the eight square symmetries form a group ------------------------------
img = torch.arange(9.0).reshape(1, 3, 3)
t = compose_dihedral(5, 2)  # rotate twice, then flip+rotate
lhs = apply_dihedral(apply_dihedral(img, 2), 5)
rhs = apply_dihedral(img, t)
print(f"\ncompose(5, 2) = {t}; actions agree: {torch.equal(lhs, rhs)}")
inv = [next(j for j in range(NUM_TRANSFORMS) if compose_dihedral(j, k) == 0)
       for k in range(NUM_TRANSFORMS)]
print(f"inverse of each id: {inv}")

# --- cosine annealing with warm restarts -----------------------------------
cfg = TrainConfig()
T = cfg.restart_period
print(f"\nschedule over one period of {T} iterations:")
for t in (0, T // 4, T // 2, 3 * T // 4, T - 1, T):
    print(f"  lr({t:>7d}) = {cosine_lr(t, cfg):.3e}")

# --- the two-term objective -------------------------------------------------
sr, hr = torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16)
car, lr_clean = torch.rand(1, 3, 4, 4), torch.rand(1, 3, 4, 4)
for lam in (0.0, 1.0, 16.0):
    _, rep = combined_loss(sr, hr, car if lam else None, lr_clean if lam else None,
                           lambda_recon=lam)
    print(f"lambda={lam:>4g}: l_hr={rep.l_hr:.4f} l_lr={rep.l_lr:.4f} total={rep.total:.4f}")

# --- self-ensembling averages over all eight orientations ------------------
model = build_model(ModelConfig(scale=2, n_f=8, num_rrdb=1), seed=0)
model.eval()
patch = torch.rand(3, 12, 12)
single = model(patch).detach()
ens = self_ensemble(model, patch)
skip = bilinear_upsample(patch, 2)
print(f"\nresidual energy, single pass:   {(single - skip).pow(2).mean():.2e}")
print(f"residual energy, 8-way ensemble: {(ens - skip).pow(2).mean():.2e}")
print("(random weights: the ensemble averages away orientation-dependent noise)")
