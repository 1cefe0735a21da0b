"""The eight symmetries of the square, applied to image-like arrays.

Transforms act on the last two axes, so (H, W), (C, H, W) and (N, C, H, W)
inputs all work, as numpy arrays or torch tensors. Ids 0..7 decompose as
``rot90^k . hflip^e`` with ``k = tid % 4`` and ``e = tid // 4``: the
horizontal flip (if any) is applied first, then k counter-clockwise
quarter turns.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import DomainError

NUM_TRANSFORMS = 8


def _check_tid(tid: int) -> None:
    if not isinstance(tid, (int, np.integer)) or not 0 <= tid < NUM_TRANSFORMS:
        raise DomainError(f"transform id must be an int in [0, 8), got {tid!r}")


def _rot90(x, k: int):
    if isinstance(x, torch.Tensor):
        return torch.rot90(x, k, dims=(-2, -1))
    return np.ascontiguousarray(np.rot90(x, k, axes=(-2, -1)))


def _hflip(x):
    if isinstance(x, torch.Tensor):
        return torch.flip(x, dims=(-1,))
    return np.ascontiguousarray(np.flip(x, axis=-1))


def apply_dihedral(x, tid: int):
    """Apply transform ``tid`` to the spatial axes of ``x``."""
    _check_tid(tid)
    if tid >= 4:
        x = _hflip(x)
    k = tid % 4
    if k:
        x = _rot90(x, k)
    return x


def invert_dihedral(x, tid: int):
    """Undo :func:`apply_dihedral`, so ``invert(apply(x, t), t) == x``."""
    _check_tid(tid)
    k = tid % 4
    if k:
        x = _rot90(x, -k)
    if tid >= 4:
        x = _hflip(x)
    return x


def compose_dihedral(second: int, first: int) -> int:
    """Id of the transform equal to applying ``first`` then ``second``.

    Uses the group relation ``hflip . rot90^k = rot90^(-k) . hflip``.
    """
    _check_tid(second)
    _check_tid(first)
    k1, e1 = first % 4, first // 4
    k2, e2 = second % 4, second // 4
    k = (k2 + (k1 if e2 == 0 else -k1)) % 4
    e = e1 ^ e2
    return 4 * e + k
