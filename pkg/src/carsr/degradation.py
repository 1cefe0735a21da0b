"""Degradation pipeline and training-set synthesis.

Clean HR patches are turned into training inputs by antialiased bicubic
downscaling followed by a real JPEG encode/decode round trip, so the
network sees genuine codec artifacts rather than an approximation.
Datasets are described by a manifest that records, per patch, the source
image, crop position, quality factor and dihedral transform; rebuilding a
patch from its manifest entry is bit-exact.

Images are float32 arrays of shape (C, H, W) with values in [0, 1].
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import PIL
from PIL import Image, features

from .dihedral import apply_dihedral
from .errors import ConfigError, DomainError, InputError, ShapeError
from .serialization import atomic_write_text, canonical_dumps

# identifies the exact codec build; recorded in manifests and reports
CODEC_ID = f"pillow-{PIL.__version__}-libjpeg-{features.version('jpg')}"

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")

MANIFEST_FORMAT = "carsr-manifest"
MANIFEST_VERSION = 1


# ---------------------------------------------------------------------------
# image I/O and dtype conversions


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(C, H, W) float in [0, 1] -> (H, W, C) uint8, round-half-even."""
    if img.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) image, got shape {img.shape}")
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    return np.transpose(q, (1, 2, 0))


def from_uint8(arr: np.ndarray) -> np.ndarray:
    """(H, W, C) uint8 -> (C, H, W) float32 in [0, 1]."""
    if arr.ndim != 3:
        raise ShapeError(f"expected a (H, W, C) array, got shape {arr.shape}")
    return np.ascontiguousarray(np.transpose(arr, (2, 0, 1))).astype(np.float32) / 255.0


def load_image_chw(path: Path) -> np.ndarray:
    """Decode an image file to float32 (3, H, W) RGB in [0, 1]."""
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        return from_uint8(np.asarray(rgb))


def save_png(path: Path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


# ---------------------------------------------------------------------------
# bicubic resampling


def _cubic(x: np.ndarray) -> np.ndarray:
    """Keys cubic kernel with a = -0.5 (the classic bicubic)."""
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    out = np.where(
        ax <= 1.0,
        1.5 * ax3 - 2.5 * ax2 + 1.0,
        np.where(ax < 2.0, -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0, 0.0),
    )
    return out


def _resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) bicubic weight matrix for one axis.

    Half-pixel centers: output i samples source coordinate
    u = (i + 0.5) * (n_in / n_out) - 0.5. When shrinking, the kernel is
    widened by the shrink ratio (antialiasing). Out-of-range taps are
    folded onto the edge samples (replicate padding) and each row is
    normalized to sum to one.
    """
    ratio = n_in / n_out
    width = max(ratio, 1.0)
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    for i in range(n_out):
        u = (i + 0.5) * ratio - 0.5
        lo = int(np.ceil(u - 2.0 * width))
        hi = int(np.floor(u + 2.0 * width))
        taps = np.arange(lo, hi + 1)
        w = _cubic((taps - u) / width) / width
        w = w / w.sum()
        np.add.at(mat[i], np.clip(taps, 0, n_in - 1), w)
    return mat


def _resample(img: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    if img.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) image, got shape {img.shape}")
    _, h, w = img.shape
    wh = _resample_matrix(h, h_out)
    ww = _resample_matrix(w, w_out)
    out = np.einsum("ij,kl,cjl->cik", wh, ww, img.astype(np.float64), optimize=True)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def bicubic_downscale(img: np.ndarray, scale: int) -> np.ndarray:
    """Antialiased bicubic downscale by an integer factor.

    Requires both spatial dims to be divisible by ``scale``.
    """
    if scale < 1:
        raise DomainError(f"scale must be >= 1, got {scale}")
    if img.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) image, got shape {img.shape}")
    _, h, w = img.shape
    if h % scale or w % scale:
        raise ShapeError(f"image dims ({h}, {w}) not divisible by scale {scale}")
    return _resample(img, h // scale, w // scale)


def bicubic_upscale(img: np.ndarray, scale: int) -> np.ndarray:
    """Bicubic upscale by an integer factor (no kernel widening)."""
    if scale < 1:
        raise DomainError(f"scale must be >= 1, got {scale}")
    if img.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) image, got shape {img.shape}")
    _, h, w = img.shape
    return _resample(img, h * scale, w * scale)


# ---------------------------------------------------------------------------
# JPEG round trip


def jpeg_roundtrip(img: np.ndarray, qf: int) -> np.ndarray:
    """Encode to JPEG at quality ``qf`` with 4:2:0 chroma subsampling and
    decode back. Quantizes to uint8 on the way in, like any real save."""
    if not 1 <= qf <= 100:
        raise DomainError(f"JPEG quality must be in [1, 100], got {qf}")
    if img.ndim != 3 or img.shape[0] != 3:
        raise ShapeError(f"JPEG roundtrip expects a (3, H, W) image, got {img.shape}")
    buf = io.BytesIO()
    Image.fromarray(to_uint8(img)).save(buf, format="JPEG", quality=qf, subsampling=2)
    buf.seek(0)
    with Image.open(buf) as decoded:
        return from_uint8(np.asarray(decoded.convert("RGB")))


# ---------------------------------------------------------------------------
# degradation spec and patch synthesis


@dataclass(frozen=True)
class DegradeSpec:
    scale: int = 4
    qf_min: int = 10
    qf_max: int = 100
    fixed_qf: int | None = None
    kernel: str = "bicubic_antialiased"

    def validate(self) -> None:
        if self.scale < 1:
            raise ConfigError(f"scale must be >= 1, got {self.scale}")
        if not 1 <= self.qf_min <= self.qf_max <= 100:
            raise ConfigError(
                f"need 1 <= qf_min <= qf_max <= 100, got ({self.qf_min}, {self.qf_max})"
            )
        if self.fixed_qf is not None and not 1 <= self.fixed_qf <= 100:
            raise ConfigError(f"fixed_qf must be in [1, 100], got {self.fixed_qf}")
        if self.kernel != "bicubic_antialiased":
            raise ConfigError(f"unknown degradation kernel {self.kernel!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DegradeSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown degrade config keys: {sorted(unknown)}")
        spec = cls(**d)
        spec.validate()
        return spec


@dataclass
class PatchPair:
    lr: np.ndarray
    hr: np.ndarray
    qf: int
    transform_id: int


def _degrade_crop(hr: np.ndarray, spec: DegradeSpec, qf: int):
    lr_clean = bicubic_downscale(hr, spec.scale)
    return jpeg_roundtrip(lr_clean, qf), lr_clean


def synthesize_pair(
    hr_img: np.ndarray,
    spec: DegradeSpec,
    rng: np.random.Generator,
    patch: int = 128,
    transform_id: int | None = None,
) -> PatchPair:
    """Draw a random crop, dihedral transform and quality factor, then
    degrade. Draw order is crop y, crop x, qf, transform, so the same
    generator state always yields the same pair."""
    spec.validate()
    if hr_img.ndim != 3:
        raise ShapeError(f"expected a (C, H, W) image, got shape {hr_img.shape}")
    if patch % spec.scale:
        raise ShapeError(f"patch {patch} not divisible by scale {spec.scale}")
    _, h, w = hr_img.shape
    if h < patch or w < patch:
        raise DomainError(f"image ({h}, {w}) smaller than patch {patch}")
    y = int(rng.integers(0, h - patch + 1))
    x = int(rng.integers(0, w - patch + 1))
    if spec.fixed_qf is not None:
        qf = spec.fixed_qf
    else:
        qf = int(rng.integers(spec.qf_min, spec.qf_max + 1))
    tid = int(rng.integers(0, 8)) if transform_id is None else transform_id
    hr_t = apply_dihedral(hr_img[:, y : y + patch, x : x + patch], tid)
    hr_t = np.ascontiguousarray(hr_t, dtype=np.float32)
    lr, _ = _degrade_crop(hr_t, spec, qf)
    return PatchPair(lr=lr, hr=hr_t, qf=qf, transform_id=tid)


def augment_dihedral(pair: PatchPair, tid: int) -> PatchPair:
    """Apply the same square symmetry to both halves of a pair."""
    from .dihedral import compose_dihedral

    return PatchPair(
        lr=apply_dihedral(pair.lr, tid),
        hr=apply_dihedral(pair.hr, tid),
        qf=pair.qf,
        transform_id=compose_dihedral(tid, pair.transform_id),
    )


# ---------------------------------------------------------------------------
# dataset manifests


@dataclass
class ManifestEntry:
    source: str
    x: int
    y: int
    qf: int
    transform_id: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DatasetManifest:
    seed: int
    patch: int
    spec: DegradeSpec
    codec: str = CODEC_ID
    entries: list[ManifestEntry] = field(default_factory=list)

    def dumps(self) -> str:
        header = {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "seed": self.seed,
            "patch": self.patch,
            "codec": self.codec,
            "spec": self.spec.to_dict(),
        }
        lines = [canonical_dumps(header)]
        lines.extend(canonical_dumps(e.to_dict()) for e in self.entries)
        return "\n".join(lines) + "\n"

    def save(self, path: Path) -> None:
        atomic_write_text(path, self.dumps())

    @classmethod
    def loads(cls, text: str) -> "DatasetManifest":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise InputError("empty manifest")
        header = json.loads(lines[0])
        if header.get("format") != MANIFEST_FORMAT:
            raise ConfigError(f"not a dataset manifest: format={header.get('format')!r}")
        if header.get("version") != MANIFEST_VERSION:
            raise ConfigError(f"unsupported manifest version {header.get('version')!r}")
        entries = [ManifestEntry(**json.loads(ln)) for ln in lines[1:]]
        return cls(
            seed=int(header["seed"]),
            patch=int(header["patch"]),
            spec=DegradeSpec.from_dict(header["spec"]),
            codec=str(header["codec"]),
            entries=entries,
        )

    @classmethod
    def load(cls, path: Path) -> "DatasetManifest":
        return cls.loads(Path(path).read_text())


def list_image_files(directory: Path) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"not a directory: {directory}")
    return sorted(
        p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES
    )


def build_manifest(
    source_dir: Path,
    spec: DegradeSpec,
    seed: int,
    count: int,
    patch: int = 128,
) -> DatasetManifest:
    """Sample ``count`` patch descriptors over the images in a directory.

    Each entry gets its own generator seeded from (seed, index), so the
    manifest is a pure function of its arguments and any entry can be
    re-derived without the others.
    """
    spec.validate()
    if seed < 0:
        raise ConfigError(f"seed must be >= 0, got {seed}")
    if count < 0:
        raise DomainError(f"count must be >= 0, got {count}")
    if patch % spec.scale:
        raise ConfigError(f"patch {patch} not divisible by scale {spec.scale}")
    source_dir = Path(source_dir)
    sources: list[tuple[str, int, int]] = []  # (relative name, width, height)
    for p in list_image_files(source_dir):
        try:
            with Image.open(p) as im:
                w, h = im.size
        except OSError:
            continue
        if h >= patch and w >= patch:
            sources.append((p.name, w, h))
    if not sources:
        raise InputError(
            f"no usable source images (>= {patch}px on both sides) in {source_dir}"
        )
    entries = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        name, w, h = sources[int(rng.integers(0, len(sources)))]
        y = int(rng.integers(0, h - patch + 1))
        x = int(rng.integers(0, w - patch + 1))
        if spec.fixed_qf is not None:
            qf = spec.fixed_qf
        else:
            qf = int(rng.integers(spec.qf_min, spec.qf_max + 1))
        tid = int(rng.integers(0, 8))
        entries.append(ManifestEntry(source=name, x=x, y=y, qf=qf, transform_id=tid))
    return DatasetManifest(seed=seed, patch=patch, spec=spec, entries=entries)


def materialize_entry(
    entry: ManifestEntry,
    spec: DegradeSpec,
    patch: int,
    source_root: Path,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rebuild (lr, hr, lr_clean) for a manifest entry, bit-exactly."""
    img = load_image_chw(Path(source_root) / entry.source)
    crop = img[:, entry.y : entry.y + patch, entry.x : entry.x + patch]
    if crop.shape[-2:] != (patch, patch):
        raise ShapeError(
            f"source {entry.source} too small for crop at ({entry.y}, {entry.x})"
        )
    hr_t = np.ascontiguousarray(apply_dihedral(crop, entry.transform_id), dtype=np.float32)
    lr, lr_clean = _degrade_crop(hr_t, spec, entry.qf)
    return lr, hr_t, lr_clean


# ---------------------------------------------------------------------------
# evaluation sets


def degrade_testset(
    directory: Path, qf: int, scale: int = 4
) -> tuple[list[tuple[str, np.ndarray, np.ndarray]], list[tuple[str, str]]]:
    """Degrade every image in a directory at a fixed quality factor.

    Images are center-cropped to dimensions divisible by ``scale``.
    Returns (pairs, failures) where pairs are (name, lr, hr) and each
    failure records the file that could not be processed and why.
    """
    if not 1 <= qf <= 100:
        raise DomainError(f"JPEG quality must be in [1, 100], got {qf}")
    if scale < 1:
        raise DomainError(f"scale must be >= 1, got {scale}")
    files = list_image_files(directory)
    if not files:
        raise InputError(f"no images found in {directory}")
    pairs: list[tuple[str, np.ndarray, np.ndarray]] = []
    failures: list[tuple[str, str]] = []
    for path in files:
        try:
            img = load_image_chw(path)
            _, h, w = img.shape
            h2, w2 = h - h % scale, w - w % scale
            if h2 == 0 or w2 == 0:
                raise ShapeError(f"image ({h}, {w}) smaller than scale {scale}")
            top, left = (h - h2) // 2, (w - w2) // 2
            hr = np.ascontiguousarray(img[:, top : top + h2, left : left + w2])
            lr = jpeg_roundtrip(bicubic_downscale(hr, scale), qf)
            pairs.append((path.name, lr, hr))
        except Exception as exc:  # keep going; report the file
            failures.append((path.name, f"{type(exc).__name__}: {exc}"))
    return pairs, failures
