"""Run configuration: one YAML file drives every CLI command.

Sections mirror the type names (model, train, degrade, paths, prepare,
eval, ablate, preprocess); unknown sections or keys are rejected rather
than silently ignored. ``--set section.key=value`` overrides individual
entries after the file is read. A config round-trips through
to_dict/from_dict losslessly and hashes to a stable id that reports embed.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml

from .degradation import DegradeSpec
from .errors import ConfigError
from .model import CONTEXT_VARIANTS, UPSAMPLE_VARIANTS, ModelConfig
from .serialization import canonical_dumps
from .training import TrainConfig

REPORT_FORMAT_VERSION = 1


def _reject_unknown(d: dict, cls, what: str) -> None:
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"unknown {what} config keys: {sorted(unknown)}")


@dataclass
class PathsConfig:
    source_dir: str | None = None  # HR images for training-set synthesis
    data_dir: str | None = None  # manifest and prepare summary live here
    run_dir: str | None = None  # checkpoints and training log
    checkpoint: str | None = None  # explicit checkpoint (default: latest in run_dir)
    test_dir: str | None = None  # evaluation images
    report_dir: str | None = None  # JSON/CSV reports
    input_dir: str | None = None  # preprocess input corpus
    output_dir: str | None = None  # preprocess outputs

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PathsConfig":
        _reject_unknown(d, cls, "paths")
        return cls(**d)


@dataclass
class PrepareConfig:
    count: int = 200

    def validate(self) -> None:
        if self.count < 0:
            raise ConfigError(f"prepare.count must be >= 0, got {self.count}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PrepareConfig":
        _reject_unknown(d, cls, "prepare")
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class EvalConfig:
    qfs: tuple[int, ...] = (10, 20, 40)
    ensemble: bool = False
    shave: int = 4
    psnr_cap: float = 100.0
    exclude_inf: bool = False

    def validate(self) -> None:
        if not self.qfs:
            raise ConfigError("eval.qfs must not be empty")
        for q in self.qfs:
            if not 1 <= q <= 100:
                raise ConfigError(f"eval.qfs entries must be in [1, 100], got {q}")
        if self.shave < 0:
            raise ConfigError(f"eval.shave must be >= 0, got {self.shave}")
        if self.psnr_cap <= 0:
            raise ConfigError(f"eval.psnr_cap must be > 0, got {self.psnr_cap}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["qfs"] = list(self.qfs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        _reject_unknown(d, cls, "eval")
        d = dict(d)
        if "qfs" in d:
            d["qfs"] = tuple(int(q) for q in d["qfs"])
        cfg = cls(**d)
        cfg.validate()
        return cfg


def _variant_names() -> list[str]:
    return [f"{c}+{u}" for c in CONTEXT_VARIANTS for u in UPSAMPLE_VARIANTS]


@dataclass
class AblateConfig:
    variants: tuple[str, ...] = tuple(_variant_names())
    lambdas: tuple[float, ...] = (0.0, 1.0, 16.0)
    qf: int = 40  # degradation applied to the validation fixtures
    iters: int | None = None  # None: keep the desk preset budget

    def validate(self) -> None:
        valid = _variant_names()
        for v in self.variants:
            if v not in valid:
                raise ConfigError(
                    f"unknown ablation variant {v!r}; valid names: {valid}"
                )
        for lam in self.lambdas:
            if lam < 0:
                raise ConfigError(f"ablate.lambdas must be >= 0, got {lam}")
        if not 1 <= self.qf <= 100:
            raise ConfigError(f"ablate.qf must be in [1, 100], got {self.qf}")
        if self.iters is not None and self.iters < 1:
            raise ConfigError(f"ablate.iters must be >= 1, got {self.iters}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variants"] = list(self.variants)
        d["lambdas"] = list(self.lambdas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AblateConfig":
        _reject_unknown(d, cls, "ablate")
        d = dict(d)
        if "variants" in d:
            d["variants"] = tuple(str(v) for v in d["variants"])
        if "lambdas" in d:
            d["lambdas"] = tuple(float(x) for x in d["lambdas"])
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class PreprocessConfig:
    downsample: bool = False

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessConfig":
        _reject_unknown(d, cls, "preprocess")
        return cls(**d)


_SECTIONS = {
    "model": (ModelConfig, "model"),
    "train": (TrainConfig, "train"),
    "degrade": (DegradeSpec, "degrade"),
    "paths": (PathsConfig, "paths"),
    "prepare": (PrepareConfig, "prepare"),
    "eval": (EvalConfig, "eval"),
    "ablate": (AblateConfig, "ablate"),
    "preprocess": (PreprocessConfig, "preprocess"),
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    degrade: DegradeSpec = field(default_factory=DegradeSpec)
    paths: PathsConfig = field(default_factory=PathsConfig)
    prepare: PrepareConfig = field(default_factory=PrepareConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)

    def validate(self) -> None:
        self.model.validate()
        self.train.validate()
        self.degrade.validate()
        self.prepare.validate()
        self.eval.validate()
        self.ablate.validate()

    def to_dict(self) -> dict:
        return {name: getattr(self, name).to_dict() for name in _SECTIONS}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, (section_cls, _) in _SECTIONS.items():
            if name in d:
                if not isinstance(d[name], dict):
                    raise ConfigError(f"config section {name!r} must be a mapping")
                kwargs[name] = section_cls.from_dict(d[name])
        return cls(**kwargs)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(canonical_dumps(self.to_dict()).encode()).hexdigest()[:16]

    def report_meta(self, command: str, codec: str) -> dict:
        return {
            "command": command,
            "config_hash": self.config_hash,
            "codec": codec,
            "shave": self.eval.shave,
            "format_version": REPORT_FORMAT_VERSION,
        }


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings onto a raw config mapping.

    Values are parsed as YAML scalars, so ``--set train.total_iters=50``
    and ``--set eval.qfs=[10,40]`` both do what they look like.
    """
    out = {k: dict(v) if isinstance(v, dict) else v for k, v in data.items()}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {key!r} must be section.key")
        section, name = parts
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r} in override {item!r}")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override value {raw!r}: {exc}") from exc
        if isinstance(value, str):
            # YAML leaves bare scientific notation like 1e-3 as a string
            try:
                value = float(value)
            except ValueError:
                pass
        out.setdefault(section, {})[name] = value
    return out


def load_config(path: Path, overrides: list[str] | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping of sections")
    data = apply_overrides(data, overrides or [])
    cfg = RunConfig.from_dict(data)
    cfg.validate()
    return cfg


def ablate_model_cfg(base: ModelConfig, variant: str) -> ModelConfig:
    """Model config for an architecture-ablation row like 'aspp+pixelshuffle'."""
    if "+" not in variant:
        raise ConfigError(
            f"unknown ablation variant {variant!r}; valid names: {_variant_names()}"
        )
    context, upsampler = variant.split("+", 1)
    if context not in CONTEXT_VARIANTS or upsampler not in UPSAMPLE_VARIANTS:
        raise ConfigError(
            f"unknown ablation variant {variant!r}; valid names: {_variant_names()}"
        )
    return replace(base, context_variant=context, upsample_variant=upsampler)
