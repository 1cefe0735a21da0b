"""Quality metrics and evaluation.

PSNR and SSIM are computed on the luma channel of the BT.601 YCbCr
transform (the convention used by the classical SR test protocol), after
shaving a border whose default width equals the upscaling factor.
Self-ensembling averages the model output over all eight symmetries of
the square.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .dihedral import NUM_TRANSFORMS, apply_dihedral, invert_dihedral
from .errors import DomainError, ShapeError
from .model import count_params
from .serialization import atomic_write_text, canonical_dumps

_SSIM_WIN = 11
_SSIM_SIGMA = 1.5
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_DYNAMIC_RANGE = 255.0


def rgb_to_y(img) -> np.ndarray:
    """BT.601 luma of an RGB image in [0, 1], returned on the 0..255 scale.

    y = 16 + 65.481 r + 128.553 g + 24.966 b
    """
    arr = img.detach().cpu().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ShapeError(f"expected a (3, H, W) RGB image, got shape {arr.shape}")
    arr = arr.astype(np.float64)
    return 16.0 + 65.481 * arr[0] + 128.553 * arr[1] + 24.966 * arr[2]


def _luma_plane(img) -> np.ndarray:
    """Accept (3, H, W) RGB or an already-extracted (H, W) luma plane."""
    arr = img.detach().cpu().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
    if arr.ndim == 2:
        return arr.astype(np.float64)
    return rgb_to_y(arr)


def _shaved_pair(a, b, shave: int) -> tuple[np.ndarray, np.ndarray]:
    ya, yb = _luma_plane(a), _luma_plane(b)
    if ya.shape != yb.shape:
        raise ShapeError(f"shape mismatch: {ya.shape} vs {yb.shape}")
    if shave < 0:
        raise DomainError(f"shave must be >= 0, got {shave}")
    h, w = ya.shape
    if h - 2 * shave < 1 or w - 2 * shave < 1:
        raise DomainError(f"shave {shave} leaves no pixels of a ({h}, {w}) image")
    if shave:
        ya = ya[shave:-shave, shave:-shave]
        yb = yb[shave:-shave, shave:-shave]
    return ya, yb


def psnr_y(a, b, shave: int = 4) -> float:
    """Luma PSNR in dB against a 255 peak; +inf when the planes match."""
    ya, yb = _shaved_pair(a, b, shave)
    mse = float(np.mean((ya - yb) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(_DYNAMIC_RANGE**2 / mse)


def _ssim_window() -> np.ndarray:
    half = (_SSIM_WIN - 1) / 2.0
    coords = np.arange(_SSIM_WIN) - half
    k = np.exp(-0.5 * (coords / _SSIM_SIGMA) ** 2)
    win = np.outer(k, k)
    return win / win.sum()


def ssim_y(a, b, shave: int = 4) -> float:
    """Mean luma SSIM over valid 11x11 Gaussian windows (sigma 1.5)."""
    ya, yb = _shaved_pair(a, b, shave)
    if min(ya.shape) < _SSIM_WIN:
        raise DomainError(
            f"image {ya.shape} smaller than the {_SSIM_WIN}x{_SSIM_WIN} SSIM window "
            f"after shave {shave}"
        )
    win = _ssim_window()
    pad = _SSIM_WIN // 2

    def smooth(x: np.ndarray) -> np.ndarray:
        return ndimage.correlate(x, win, mode="constant")[pad:-pad, pad:-pad]

    mu_a = smooth(ya)
    mu_b = smooth(yb)
    var_a = smooth(ya * ya) - mu_a * mu_a
    var_b = smooth(yb * yb) - mu_b * mu_b
    cov = smooth(ya * yb) - mu_a * mu_b
    c1 = (_SSIM_K1 * _DYNAMIC_RANGE) ** 2
    c2 = (_SSIM_K2 * _DYNAMIC_RANGE) ** 2
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def self_ensemble(model, lr: torch.Tensor) -> torch.Tensor:
    """Average the model over the eight dihedral transforms of the input.

    Each output is mapped back through the inverse transform before
    averaging, so the result lives in the original orientation.
    """
    out = None
    with torch.no_grad():
        for tid in range(NUM_TRANSFORMS):
            pred = invert_dihedral(model(apply_dihedral(lr, tid)), tid)
            out = pred if out is None else out + pred
    return out / NUM_TRANSFORMS


# ---------------------------------------------------------------------------
# dataset evaluation


def _json_float(v: float):
    if math.isfinite(v):
        return v
    if math.isnan(v):
        return "nan"
    return "inf" if v > 0 else "-inf"


@dataclass
class ImageResult:
    name: str
    psnr_y: float
    ssim_y: float
    runtime_s: float

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "psnr_y": _json_float(self.psnr_y),
            "ssim_y": _json_float(self.ssim_y),
            "runtime_s": self.runtime_s,
        }


@dataclass
class EvalResult:
    per_image: list[ImageResult]
    mean_psnr_y: float
    mean_ssim_y: float
    runtime_total_s: float
    model_params: int
    shave: int
    ensembled: bool
    psnr_cap: float
    failures: list[tuple[str, str]] = field(default_factory=list)

    @property
    def had_failures(self) -> bool:
        return bool(self.failures)

    def to_dict(self) -> dict:
        return {
            "per_image": [r.to_dict() for r in self.per_image],
            "mean_psnr_y": _json_float(self.mean_psnr_y),
            "mean_ssim_y": _json_float(self.mean_ssim_y),
            "runtime_total_s": self.runtime_total_s,
            "model_params": self.model_params,
            "shave": self.shave,
            "ensembled": self.ensembled,
            "psnr_cap": self.psnr_cap,
            "failures": [{"name": n, "error": e} for n, e in self.failures],
        }


def evaluate_dataset(
    model,
    pairs,
    ensembled: bool = False,
    shave: int = 4,
    psnr_cap: float = 100.0,
    exclude_inf: bool = False,
) -> EvalResult:
    """Run a model over (name, lr, hr) pairs and aggregate luma metrics.

    Per-image PSNR keeps the +inf sentinel for perfect reconstructions;
    for the mean, infinities are capped at ``psnr_cap`` dB, or dropped
    entirely when ``exclude_inf`` is set. Images that fail to evaluate are
    recorded and excluded rather than aborting the run.
    """
    rows: list[ImageResult] = []
    failures: list[tuple[str, str]] = []
    total = 0.0
    for name, lr, hr in pairs:
        try:
            lr_t = torch.from_numpy(np.ascontiguousarray(lr, dtype=np.float32))
            start = time.perf_counter()
            if ensembled:
                out = self_ensemble(model, lr_t)
            else:
                with torch.no_grad():
                    out = model(lr_t)
            elapsed = time.perf_counter() - start
            pred = np.clip(out.detach().cpu().numpy(), 0.0, 1.0)
            rows.append(
                ImageResult(
                    name=name,
                    psnr_y=psnr_y(pred, hr, shave=shave),
                    ssim_y=ssim_y(pred, hr, shave=shave),
                    runtime_s=elapsed,
                )
            )
            total += elapsed
        except Exception as exc:
            failures.append((name, f"{type(exc).__name__}: {exc}"))
    psnrs = [r.psnr_y for r in rows]
    if exclude_inf:
        psnrs = [p for p in psnrs if math.isfinite(p)]
    else:
        psnrs = [min(p, psnr_cap) for p in psnrs]
    mean_psnr = float(np.mean(psnrs)) if psnrs else float("nan")
    mean_ssim = float(np.mean([r.ssim_y for r in rows])) if rows else float("nan")
    params = count_params(model) if isinstance(model, torch.nn.Module) else 0
    return EvalResult(
        per_image=rows,
        mean_psnr_y=mean_psnr,
        mean_ssim_y=mean_ssim,
        runtime_total_s=total,
        model_params=params,
        shave=shave,
        ensembled=ensembled,
        psnr_cap=psnr_cap,
        failures=failures,
    )


def write_eval_report_json(result: EvalResult, path: Path, meta: dict) -> None:
    doc = {"meta": meta, "result": result.to_dict()}
    atomic_write_text(path, canonical_dumps(doc) + "\n")


def write_eval_report_csv(result: EvalResult, path: Path) -> None:
    path = Path(path)
    tmp = []
    for r in result.per_image:
        tmp.append([r.name, _json_float(r.psnr_y), _json_float(r.ssim_y), f"{r.runtime_s:.6f}"])
    tmp.append(
        ["mean", _json_float(result.mean_psnr_y), _json_float(result.mean_ssim_y),
         f"{result.runtime_total_s:.6f}"]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "psnr_y", "ssim_y", "runtime_s"])
        writer.writerows(tmp)
