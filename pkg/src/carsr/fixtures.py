"""Deterministic synthetic test images.

Real photographs cannot ship with the package, so tests and demos use
generated ones. The generator mixes a few low-frequency sinusoids with
soft rectangles and a touch of grain; the result is smooth enough that
JPEG quality behaves monotonically on it, which pure noise does not give
you (at low qf, noise compresses *toward* the mean and PSNR can improve).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .degradation import save_png


def synthetic_image(seed: int, height: int = 160, width: int = 160) -> np.ndarray:
    """A photo-like float32 (3, H, W) image in [0, 1], pure function of seed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF1D0]))
    yy, xx = np.meshgrid(
        np.arange(height) / height, np.arange(width) / width, indexing="ij"
    )
    img = np.empty((3, height, width), dtype=np.float64)
    for c in range(3):
        acc = np.full((height, width), 0.5)
        for _ in range(6):
            fy, fx = rng.uniform(0.5, 3.0, size=2)
            phase = rng.uniform(0.0, 2.0 * np.pi)
            amp = rng.uniform(0.08, 0.3)
            acc += amp * np.sin(2.0 * np.pi * (fy * yy + fx * xx) + phase)
        img[c] = acc
    for _ in range(4):
        y0, y1 = np.sort(rng.integers(0, height, size=2))
        x0, x1 = np.sort(rng.integers(0, width, size=2))
        color = rng.uniform(0.1, 0.9, size=3)
        alpha = rng.uniform(0.3, 0.7)
        region = img[:, y0 : y1 + 1, x0 : x1 + 1]
        img[:, y0 : y1 + 1, x0 : x1 + 1] = (
            (1.0 - alpha) * region + alpha * color[:, None, None]
        )
    img += rng.normal(0.0, 0.01, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def write_fixture_corpus(
    directory: Path, count: int, height: int = 160, width: int = 160, seed: int = 0
) -> list[Path]:
    """Write ``count`` synthetic PNGs into a directory and return the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        path = directory / f"fixture_{i:02d}.png"
        save_png(path, synthetic_image(seed + i, height, width))
        paths.append(path)
    return paths
