"""Losses, the cosine-restart schedule, and the training loop.

Training is deterministic end to end: parameters come from a seeded
build, every batch is a pure function of (seed, iteration), and Adam
state is checkpointed, so a run resumed from iteration k is bit-identical
to one that never stopped. Data loading is single-threaded on purpose;
batches must arrive in seed-determined order and the loader's LRU cache
makes repeated patch access cheap without touching that order.
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import (
    checkpoint_path,
    find_latest_checkpoint,
    load_checkpoint,
    restore_model,
    restore_optimizer,
    save_checkpoint,
)
from .degradation import DatasetManifest, materialize_entry
from .errors import ConfigError, DomainError, InputError, NumericError, ShapeError
from .model import CARSRNet, ModelConfig, build_model
from .serialization import canonical_dumps

LOSS_TYPES = ("L1", "MSE", "Charbonnier")
CHARBONNIER_EPS = 1e-3

# the desk-scale preset: small enough for a CPU run that still crosses a
# restart boundary and emits several checkpoints
DESK_TRAIN_OVERRIDES = {
    "total_iters": 2000,
    "restart_period": 1000,
    "batch_size": 8,
    "checkpoint_interval": 1000,
}
DESK_MODEL_OVERRIDES = {"n_f": 32, "num_rrdb": 4}

_BATCH_STREAM = 11  # namespaces the per-iteration batch RNG under the run seed


@dataclass
class TrainConfig:
    batch_size: int = 36
    hr_patch: int = 128
    lr_init: float = 2e-4
    lr_min: float = 1e-7
    restart_period: int = 250_000
    total_iters: int = 1_000_000
    loss_type: str = "L1"
    lambda_recon: float = 0.0
    seed: int = 0
    checkpoint_interval: int = 50_000
    cache_size: int = 256
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    desk_scale_overrides: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.hr_patch < 1:
            raise ConfigError(f"hr_patch must be >= 1, got {self.hr_patch}")
        if not 0 < self.lr_min < self.lr_init:
            raise ConfigError(
                f"need 0 < lr_min < lr_init, got ({self.lr_min}, {self.lr_init})"
            )
        if self.restart_period < 1:
            raise ConfigError(f"restart_period must be >= 1, got {self.restart_period}")
        if self.total_iters < 0:
            raise ConfigError(f"total_iters must be >= 0, got {self.total_iters}")
        if self.total_iters and self.restart_period > self.total_iters:
            raise ConfigError(
                f"restart_period {self.restart_period} exceeds total_iters "
                f"{self.total_iters}"
            )
        if self.loss_type not in LOSS_TYPES:
            raise ConfigError(
                f"unknown loss_type {self.loss_type!r}, expected one of {LOSS_TYPES}"
            )
        if self.lambda_recon < 0:
            raise ConfigError(f"lambda_recon must be >= 0, got {self.lambda_recon}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")
        if self.checkpoint_interval < 1:
            raise ConfigError(
                f"checkpoint_interval must be >= 1, got {self.checkpoint_interval}"
            )
        if self.cache_size < 1:
            raise ConfigError(f"cache_size must be >= 1, got {self.cache_size}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(float(b) for b in d["adam_betas"])
        cfg = cls(**d)
        cfg.validate()
        return cfg


def desk_preset(
    model_cfg: ModelConfig, train_cfg: TrainConfig
) -> tuple[ModelConfig, TrainConfig]:
    """Shrink a config pair to the desk-scale preset.

    TrainConfig.desk_scale_overrides wins over the built-in preset values,
    so a config file can tune the preset without abandoning it.
    """
    t = {**DESK_TRAIN_OVERRIDES, **train_cfg.desk_scale_overrides}
    unknown = set(t) - set(TrainConfig.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown desk_scale_overrides keys: {sorted(unknown)}")
    new_train = replace(train_cfg, **t)
    new_model = replace(model_cfg, **DESK_MODEL_OVERRIDES)
    new_train.validate()
    new_model.validate()
    return new_model, new_train


@dataclass
class LossReport:
    l_hr: float
    l_lr: float
    total: float
    iteration: int = -1
    lr_value: float = float("nan")

    def to_json_line(self) -> str:
        return canonical_dumps(
            {
                "iter": self.iteration,
                "l_hr": self.l_hr,
                "l_lr": self.l_lr,
                "total": self.total,
                "lr": self.lr_value,
            }
        )

    @classmethod
    def from_json_line(cls, line: str) -> "LossReport":
        d = json.loads(line)
        return cls(
            l_hr=d["l_hr"],
            l_lr=d["l_lr"],
            total=d["total"],
            iteration=d["iter"],
            lr_value=d["lr"],
        )


def pixel_loss(pred: torch.Tensor, gt: torch.Tensor, kind: str = "L1") -> torch.Tensor:
    """Mean-reduced reconstruction loss. Charbonnier uses
    sqrt(d^2 + eps^2) with eps = 1e-3, so its value at zero error is eps."""
    if pred.shape != gt.shape:
        raise ShapeError(f"loss shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if kind == "L1":
        return (pred - gt).abs().mean()
    if kind == "MSE":
        return ((pred - gt) ** 2).mean()
    if kind == "Charbonnier":
        return torch.sqrt((pred - gt) ** 2 + CHARBONNIER_EPS**2).mean()
    raise ConfigError(f"unknown loss kind {kind!r}, expected one of {LOSS_TYPES}")


def combined_loss(
    out_hr: torch.Tensor,
    gt_hr: torch.Tensor,
    out_lr: torch.Tensor | None = None,
    gt_lr: torch.Tensor | None = None,
    lambda_recon: float = 0.0,
    kind: str = "L1",
) -> tuple[torch.Tensor, LossReport]:
    """total = l_HR + lambda * l_LR.

    With lambda = 0 the LR branch is skipped entirely and l_LR is logged
    as the 0.0 sentinel. The report's components and total are float64, so
    recomputing total from the logged parts reproduces it exactly.
    """
    if lambda_recon < 0:
        raise ConfigError(f"lambda_recon must be >= 0, got {lambda_recon}")
    l_hr_t = pixel_loss(out_hr, gt_hr, kind)
    if lambda_recon > 0:
        if out_lr is None or gt_lr is None:
            raise ConfigError(
                "lambda_recon > 0 requires the intermediate LR prediction and "
                "its clean target"
            )
        l_lr_t = pixel_loss(out_lr, gt_lr, kind)
        loss = l_hr_t + lambda_recon * l_lr_t
        l_hr, l_lr = l_hr_t.detach().item(), l_lr_t.detach().item()
    else:
        loss = l_hr_t
        l_hr, l_lr = l_hr_t.detach().item(), 0.0
    return loss, LossReport(l_hr=l_hr, l_lr=l_lr, total=l_hr + lambda_recon * l_lr)


def cosine_lr(iteration: int, cfg: TrainConfig) -> float:
    """Cosine annealing with warm restarts every ``restart_period`` steps."""
    if not 0 <= iteration < cfg.total_iters:
        raise DomainError(
            f"iteration {iteration} outside [0, {cfg.total_iters})"
        )
    t = iteration % cfg.restart_period
    return cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (
        1.0 + math.cos(math.pi * t / cfg.restart_period)
    )


def batch_indices(seed: int, iteration: int, batch_size: int, n: int) -> np.ndarray:
    """Entry indices for one batch; a pure function of (seed, iteration)."""
    if n < 1:
        raise InputError("cannot sample from an empty dataset")
    rng = np.random.default_rng(np.random.SeedSequence([seed, _BATCH_STREAM, iteration]))
    return rng.integers(0, n, size=batch_size)


class ManifestLoader:
    """Materializes manifest entries on demand with an LRU cache."""

    def __init__(
        self,
        manifest: DatasetManifest,
        source_root: Path,
        need_clean: bool,
        cache_size: int = 256,
    ):
        if not manifest.entries:
            raise InputError("manifest has no entries")
        self.manifest = manifest
        self.source_root = Path(source_root)
        self.need_clean = need_clean
        self.cache_size = cache_size
        self._cache: OrderedDict[int, tuple] = OrderedDict()

    def __len__(self) -> int:
        return len(self.manifest.entries)

    def get(self, idx: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        if idx in self._cache:
            self._cache.move_to_end(idx)
            return self._cache[idx]
        item = materialize_entry(
            self.manifest.entries[idx],
            self.manifest.spec,
            self.manifest.patch,
            self.source_root,
        )
        self._cache[idx] = item
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return item

    def gather(self, indices: np.ndarray) -> dict:
        items = [self.get(int(i)) for i in indices]
        batch = {
            "lr": torch.from_numpy(np.stack([it[0] for it in items])),
            "hr": torch.from_numpy(np.stack([it[1] for it in items])),
            "indices": np.asarray(indices),
        }
        if self.need_clean:
            batch["lr_clean"] = torch.from_numpy(np.stack([it[2] for it in items]))
        return batch


def make_optimizer(model: CARSRNet, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        model.parameters(), lr=cfg.lr_init, betas=cfg.adam_betas, eps=cfg.adam_eps
    )


def train_step(
    model: CARSRNet,
    optimizer: torch.optim.Adam,
    cfg: TrainConfig,
    batch: dict,
    iteration: int,
) -> LossReport:
    """One Adam update at the scheduled learning rate."""
    lr_value = cosine_lr(iteration, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr_value
    lam = cfg.lambda_recon
    if lam > 0:
        if "lr_clean" not in batch:
            raise ConfigError(
                "lambda_recon > 0 needs clean LR targets in the batch"
            )
        out, car = model(batch["lr"], return_car=True)
        loss, report = combined_loss(
            out, batch["hr"], car, batch["lr_clean"], lam, cfg.loss_type
        )
    else:
        out = model(batch["lr"])
        loss, report = combined_loss(out, batch["hr"], lambda_recon=0.0, kind=cfg.loss_type)
    if not math.isfinite(report.total):
        indices = batch.get("indices")
        raise NumericError(
            f"non-finite loss {report.total} at iteration {iteration}, "
            f"batch indices {None if indices is None else indices.tolist()}"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return replace(report, iteration=iteration, lr_value=lr_value)


@dataclass
class TrainResult:
    final_checkpoint: Path
    checkpoints: list[Path]
    log_path: Path
    model: CARSRNet


def train_loop(
    manifest: DatasetManifest,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    run_dir: Path,
    source_root: Path,
    resume: bool = False,
    max_steps: int | None = None,
) -> TrainResult:
    """Run (or continue) a training run inside ``run_dir``.

    A fresh run writes an iteration-0 checkpoint before the first step;
    afterwards a checkpoint lands every ``checkpoint_interval`` iterations
    and at the end. Loss reports append to train_log.jsonl, one canonical
    JSON object per step.

    ``max_steps`` caps how many iterations this call performs without
    touching the schedule: the run stops early, checkpoints where it
    stands, and a later resume continues as if it never paused.
    """
    model_cfg.validate()
    cfg.validate()
    if cfg.lambda_recon > 0 and not model_cfg.with_car_head:
        raise ConfigError(
            "lambda_recon > 0 requires model.with_car_head=true (the "
            "intermediate artifact-reduction output is the supervised signal)"
        )
    if cfg.hr_patch != manifest.patch:
        raise ConfigError(
            f"train config hr_patch {cfg.hr_patch} does not match manifest "
            f"patch {manifest.patch}"
        )
    if manifest.patch % model_cfg.scale:
        raise ConfigError(
            f"manifest patch {manifest.patch} not divisible by model scale "
            f"{model_cfg.scale}"
        )
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    saved: list[Path] = []
    if resume:
        latest = find_latest_checkpoint(run_dir)
        if latest is None:
            raise ConfigError(f"resume requested but no checkpoint found in {run_dir}")
        ckpt = load_checkpoint(latest)
        if ckpt.model_config != model_cfg:
            raise ConfigError(
                "checkpoint model config does not match the requested one; "
                f"checkpoint has {ckpt.model_config}"
            )
        model = restore_model(ckpt)
        optimizer = make_optimizer(model, cfg)
        if ckpt.adam is not None:
            restore_optimizer(ckpt, model, optimizer)
        start = ckpt.iteration
    else:
        model = build_model(model_cfg, cfg.seed)
        optimizer = make_optimizer(model, cfg)
        start = 0
        init_path = checkpoint_path(run_dir, 0)
        save_checkpoint(init_path, model, 0, optimizer)
        saved.append(init_path)
    loader = ManifestLoader(
        manifest, source_root, need_clean=cfg.lambda_recon > 0, cache_size=cfg.cache_size
    )
    model.train()
    end = cfg.total_iters
    if max_steps is not None:
        if max_steps < 0:
            raise DomainError(f"max_steps must be >= 0, got {max_steps}")
        end = min(end, start + max_steps)
    log_path = run_dir / "train_log.jsonl"
    with open(log_path, "a") as log:
        for it in range(start, end):
            idx = batch_indices(cfg.seed, it, cfg.batch_size, len(loader))
            batch = loader.gather(idx)
            report = train_step(model, optimizer, cfg, batch, it)
            log.write(report.to_json_line() + "\n")
            done = it + 1
            if done % cfg.checkpoint_interval == 0 or done == end:
                log.flush()
                path = checkpoint_path(run_dir, done)
                save_checkpoint(path, model, done, optimizer)
                saved.append(path)
    final = saved[-1] if saved else find_latest_checkpoint(run_dir)
    return TrainResult(
        final_checkpoint=final, checkpoints=saved, log_path=log_path, model=model
    )
