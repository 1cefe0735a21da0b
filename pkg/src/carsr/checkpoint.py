"""Self-describing binary checkpoints.

Layout (see docs/checkpoint_format.md for the byte-level contract):

    bytes 0..7    magic b"CARSRCK1"
    bytes 8..11   header length, uint32 little-endian
    header        canonical JSON (sorted keys, no whitespace), UTF-8
    blobs         concatenated raw tensors, C-order little-endian float32

The header carries the iteration counter, the full model config, a tensor
directory (name, shape, dtype, offset, nbytes) and optionally Adam state
metadata. Offsets are relative to the first blob byte. Two checkpoints of
identical state are byte-identical.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError
from .model import CARSRNet, ModelConfig
from .serialization import atomic_write_bytes, canonical_dumps

MAGIC = b"CARSRCK1"
FORMAT = "carsr-checkpoint"
VERSION = 1

_CKPT_RE = re.compile(r"ckpt_(\d{8})\.ckpt$")


@dataclass
class CheckpointData:
    iteration: int
    model_config: ModelConfig
    tensors: dict[str, np.ndarray]
    adam: dict | None  # {"beta1", "beta2", "eps", "steps": {param: int}}


def checkpoint_path(run_dir: Path, iteration: int) -> Path:
    return Path(run_dir) / f"ckpt_{iteration:08d}.ckpt"


def find_latest_checkpoint(run_dir: Path) -> Path | None:
    best, best_it = None, -1
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        return None
    for p in run_dir.iterdir():
        m = _CKPT_RE.fullmatch(p.name)
        if m and int(m.group(1)) > best_it:
            best, best_it = p, int(m.group(1))
    return best


def _as_blob(t: torch.Tensor) -> np.ndarray:
    return np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")


def save_checkpoint(
    path: Path,
    model: CARSRNet,
    iteration: int,
    optimizer: torch.optim.Adam | None = None,
) -> None:
    named: list[tuple[str, np.ndarray]] = [
        (f"model.{name}", _as_blob(p)) for name, p in model.named_parameters()
    ]
    adam_meta = None
    if optimizer is not None:
        steps: dict[str, int] = {}
        by_param = {id(p): name for name, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if not state:
                    continue  # params the optimizer has not stepped yet
                name = by_param[id(p)]
                named.append((f"optim.{name}.exp_avg", _as_blob(state["exp_avg"])))
                named.append((f"optim.{name}.exp_avg_sq", _as_blob(state["exp_avg_sq"])))
                step = state["step"]
                steps[name] = int(step.item() if isinstance(step, torch.Tensor) else step)
        beta1, beta2 = optimizer.param_groups[0]["betas"]
        adam_meta = {
            "algo": "adam",
            "beta1": beta1,
            "beta2": beta2,
            "eps": optimizer.param_groups[0]["eps"],
            "steps": steps,
        }
    directory = []
    offset = 0
    blobs = []
    for name, arr in named:
        directory.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "float32",
                "offset": offset,
                "nbytes": arr.nbytes,
            }
        )
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "format": FORMAT,
        "version": VERSION,
        "iteration": iteration,
        "model_config": model.cfg.to_dict(),
        "tensors": directory,
        "optimizer": adam_meta,
    }
    header_bytes = canonical_dumps(header).encode("utf-8")
    payload = MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + b"".join(blobs)
    atomic_write_bytes(path, payload)


def load_checkpoint(path: Path) -> CheckpointData:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ConfigError(f"{path} is not a checkpoint (bad magic)")
    (header_len,) = struct.unpack_from("<I", raw, len(MAGIC))
    header_start = len(MAGIC) + 4
    header = json.loads(raw[header_start : header_start + header_len])
    if header.get("format") != FORMAT or header.get("version") != VERSION:
        raise ConfigError(
            f"unsupported checkpoint format {header.get('format')!r} "
            f"v{header.get('version')!r}"
        )
    blob_start = header_start + header_len
    tensors: dict[str, np.ndarray] = {}
    for ent in header["tensors"]:
        if ent["dtype"] != "float32":
            raise ConfigError(f"unsupported tensor dtype {ent['dtype']!r}")
        start = blob_start + ent["offset"]
        flat = np.frombuffer(raw, dtype="<f4", count=ent["nbytes"] // 4, offset=start)
        tensors[ent["name"]] = flat.reshape(ent["shape"]).copy()
    return CheckpointData(
        iteration=int(header["iteration"]),
        model_config=ModelConfig.from_dict(header["model_config"]),
        tensors=tensors,
        adam=header.get("optimizer"),
    )


def restore_model(ckpt: CheckpointData) -> CARSRNet:
    """Rebuild the network a checkpoint describes and load its weights."""
    net = CARSRNet(ckpt.model_config)
    state = {}
    for name, p in net.named_parameters():
        key = f"model.{name}"
        if key not in ckpt.tensors:
            raise ConfigError(f"checkpoint incompatible with config: missing {key}")
        arr = ckpt.tensors[key]
        if tuple(arr.shape) != tuple(p.shape):
            raise ConfigError(
                f"checkpoint incompatible with config: {key} has shape "
                f"{tuple(arr.shape)}, model expects {tuple(p.shape)}"
            )
        state[name] = torch.from_numpy(arr)
    net.load_state_dict(state)
    return net


def restore_optimizer(
    ckpt: CheckpointData, model: CARSRNet, optimizer: torch.optim.Adam
) -> None:
    """Inject saved Adam moments into a freshly built optimizer."""
    if ckpt.adam is None:
        raise ConfigError("checkpoint has no optimizer state")
    steps = ckpt.adam["steps"]
    for name, p in model.named_parameters():
        key = f"optim.{name}.exp_avg"
        if key not in ckpt.tensors:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(steps[name])),
            "exp_avg": torch.from_numpy(ckpt.tensors[key].copy()),
            "exp_avg_sq": torch.from_numpy(ckpt.tensors[f"optim.{name}.exp_avg_sq"].copy()),
        }
