"""Single-stage network for joint compression-artifact reduction and 4x
super-resolution.

Layout: a first conv lifts the 3-channel input to ``n_f`` features, a
context module aggregates multi-scale information, a chain of
residual-in-residual dense blocks (RRDBs) does the heavy lifting, and an
upsampling head produces the residual that is added to a bilinear upscale
of the input. An optional artifact-reduction head taps the context
features and predicts a cleaned low-resolution image, which gives the
context module its own supervision signal during training.

All convolutions are 3x3 unless stated otherwise and the only
nonlinearity is leaky ReLU with slope 0.2. The forward pass never clamps;
callers clip to [0, 1] when they need displayable output.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ConfigError, DomainError, ShapeError

LRELU_SLOPE = 0.2

CONTEXT_VARIANTS = ("aspp", "nonlocal", "sequential_atrous")
UPSAMPLE_VARIANTS = ("pixelshuffle", "upconvolution")


@dataclass
class ModelConfig:
    scale: int = 4
    in_channels: int = 3
    n_f: int = 64
    num_rrdb: int = 20
    dilations: tuple[int, ...] = (1, 3, 4)
    context_variant: str = "aspp"
    upsample_variant: str = "pixelshuffle"
    growth_channels: int = 32
    residual_scale: float = 0.2
    with_car_head: bool = False

    def validate(self) -> None:
        if self.scale < 1:
            raise ConfigError(f"scale must be >= 1, got {self.scale}")
        if self.in_channels < 1:
            raise ConfigError(f"in_channels must be >= 1, got {self.in_channels}")
        if self.n_f < 2:
            raise ConfigError(f"n_f must be >= 2, got {self.n_f}")
        if self.num_rrdb < 0:
            raise ConfigError(f"num_rrdb must be >= 0, got {self.num_rrdb}")
        if self.growth_channels < 1:
            raise ConfigError(f"growth_channels must be >= 1, got {self.growth_channels}")
        if not self.residual_scale > 0:
            raise ConfigError(f"residual_scale must be > 0, got {self.residual_scale}")
        if not self.dilations:
            raise ConfigError("dilations must be a non-empty tuple")
        for d in self.dilations:
            if not isinstance(d, int) or d < 1:
                raise ConfigError(f"dilations must be positive ints, got {self.dilations}")
        if len(set(self.dilations)) != len(self.dilations):
            raise ConfigError(f"dilations must be distinct, got {self.dilations}")
        if self.context_variant not in CONTEXT_VARIANTS:
            raise ConfigError(
                f"unknown context_variant {self.context_variant!r}, "
                f"expected one of {CONTEXT_VARIANTS}"
            )
        if self.upsample_variant not in UPSAMPLE_VARIANTS:
            raise ConfigError(
                f"unknown upsample_variant {self.upsample_variant!r}, "
                f"expected one of {UPSAMPLE_VARIANTS}"
            )
        if self.upsample_variant == "upconvolution":
            if self.scale & (self.scale - 1):
                raise ConfigError(
                    f"upconvolution supports power-of-two scales, got {self.scale}"
                )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilations"] = list(self.dilations)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        d = dict(d)
        if "dilations" in d:
            d["dilations"] = tuple(int(x) for x in d["dilations"])
        cfg = cls(**d)
        cfg.validate()
        return cfg


def dilation_offsets(rate: int) -> set[tuple[int, int]]:
    """Sampling offsets of a 3x3 conv with the given dilation rate."""
    if rate < 1:
        raise DomainError(f"dilation rate must be >= 1, got {rate}")
    return {(dy * rate, dx * rate) for dy in (-1, 0, 1) for dx in (-1, 0, 1)}


def _as_batched(t: Tensor) -> tuple[Tensor, bool]:
    if t.dim() == 3:
        return t.unsqueeze(0), True
    if t.dim() == 4:
        return t, False
    raise ShapeError(f"expected a 3-d or 4-d tensor, got shape {tuple(t.shape)}")


def _expect_channels(t: Tensor, channels: int, where: str) -> None:
    if t.shape[-3] != channels:
        raise ShapeError(
            f"{where}: expected {channels} channels, got {t.shape[-3]} "
            f"(shape {tuple(t.shape)})"
        )


def pixel_shuffle(t: Tensor, scale: int) -> Tensor:
    """Rearrange ``c*s^2 x h x w`` into ``c x s*h x s*w``.

    Output pixel ``(c, y, x)`` reads input channel
    ``c*s^2 + s*(y % s) + (x % s)`` at position ``(y // s, x // s)``.
    """
    if scale < 1:
        raise DomainError(f"scale must be >= 1, got {scale}")
    t4, squeeze = _as_batched(t)
    if t4.shape[1] % (scale * scale):
        raise ShapeError(
            f"pixel_shuffle: {t4.shape[1]} channels not divisible by {scale}^2"
        )
    out = F.pixel_shuffle(t4, scale)
    return out.squeeze(0) if squeeze else out


def pixel_unshuffle(t: Tensor, scale: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    if scale < 1:
        raise DomainError(f"scale must be >= 1, got {scale}")
    t4, squeeze = _as_batched(t)
    if t4.shape[-1] % scale or t4.shape[-2] % scale:
        raise ShapeError(
            f"pixel_unshuffle: spatial dims {tuple(t4.shape[-2:])} not divisible "
            f"by {scale}"
        )
    out = F.pixel_unshuffle(t4, scale)
    return out.squeeze(0) if squeeze else out


def bilinear_upsample(t: Tensor, scale: int) -> Tensor:
    """Bilinear upscale by an integer factor, half-pixel aligned.

    Source coordinate for output index i is ``(i + 0.5) / scale - 0.5``,
    clamped at the borders (align_corners=False convention).
    """
    if scale < 1:
        raise DomainError(f"scale must be >= 1, got {scale}")
    t4, squeeze = _as_batched(t)
    if scale == 1:
        out = t4.clone()
    else:
        h, w = t4.shape[-2:]
        out = F.interpolate(
            t4, size=(h * scale, w * scale), mode="bilinear", align_corners=False
        )
    return out.squeeze(0) if squeeze else out


class DenseBlock(nn.Module):
    """Five densely connected convs; the last projects back to ``n_f``."""

    def __init__(self, n_f: int, growth: int, residual_scale: float):
        super().__init__()
        self.conv1 = nn.Conv2d(n_f, growth, 3, padding=1)
        self.conv2 = nn.Conv2d(n_f + growth, growth, 3, padding=1)
        self.conv3 = nn.Conv2d(n_f + 2 * growth, growth, 3, padding=1)
        self.conv4 = nn.Conv2d(n_f + 3 * growth, growth, 3, padding=1)
        self.conv5 = nn.Conv2d(n_f + 4 * growth, n_f, 3, padding=1)
        self.act = nn.LeakyReLU(LRELU_SLOPE, inplace=True)
        self.residual_scale = residual_scale

    def forward(self, x: Tensor) -> Tensor:
        c1 = self.act(self.conv1(x))
        c2 = self.act(self.conv2(torch.cat([x, c1], dim=-3)))
        c3 = self.act(self.conv3(torch.cat([x, c1, c2], dim=-3)))
        c4 = self.act(self.conv4(torch.cat([x, c1, c2, c3], dim=-3)))
        c5 = self.conv5(torch.cat([x, c1, c2, c3, c4], dim=-3))
        return x + self.residual_scale * c5


class RRDB(nn.Module):
    """Residual-in-residual dense block.

    The outer residual is written as ``x + s * (chain(x) - x)`` so that a
    block whose weights are all zero is exactly the identity.
    """

    def __init__(self, n_f: int, growth: int, residual_scale: float):
        super().__init__()
        self.block1 = DenseBlock(n_f, growth, residual_scale)
        self.block2 = DenseBlock(n_f, growth, residual_scale)
        self.block3 = DenseBlock(n_f, growth, residual_scale)
        self.residual_scale = residual_scale

    def forward(self, x: Tensor) -> Tensor:
        y = self.block3(self.block2(self.block1(x)))
        return x + self.residual_scale * (y - x)


class ASPPContext(nn.Module):
    """Parallel dilated 3x3 convs fused by a 1x1 conv.

    Purely linear: no activations inside, so constructed weights can make
    it an exact identity, and its receptive field is the union of the
    branch sampling grids.
    """

    def __init__(self, n_f: int, dilations: tuple[int, ...]):
        super().__init__()
        self.branches = nn.ModuleList(
            nn.Conv2d(n_f, n_f, 3, padding=d, dilation=d) for d in dilations
        )
        self.fuse = nn.Conv2d(n_f * len(dilations), n_f, 1)
        self.n_f = n_f

    def forward(self, f: Tensor) -> Tensor:
        _expect_channels(f, self.n_f, "aspp context")
        outs = [branch(f) for branch in self.branches]
        return self.fuse(torch.cat(outs, dim=-3))


class SequentialAtrousContext(nn.Module):
    """The same dilated convs applied in sequence instead of in parallel."""

    def __init__(self, n_f: int, dilations: tuple[int, ...]):
        super().__init__()
        self.convs = nn.ModuleList(
            nn.Conv2d(n_f, n_f, 3, padding=d, dilation=d) for d in dilations
        )
        self.project = nn.Conv2d(n_f, n_f, 1)
        self.act = nn.LeakyReLU(LRELU_SLOPE, inplace=True)
        self.n_f = n_f

    def forward(self, f: Tensor) -> Tensor:
        _expect_channels(f, self.n_f, "sequential atrous context")
        for conv in self.convs:
            f = self.act(conv(f))
        return self.project(f)


class NonLocalContext(nn.Module):
    """Self-attention over features downsampled by a strided conv.

    A stride-2 conv halves the spatial grid before the embedded-Gaussian
    attention (theta/phi/g are 3x3 convs to ``n_f // 2`` channels), the
    attended features rejoin the reduced map residually, and a bilinear
    resize plus a final conv restore the full-resolution feature map.
    """

    _CHUNK = 4096  # attention rows per matmul, bounds peak memory

    def __init__(self, n_f: int):
        super().__init__()
        inner = n_f // 2
        self.reduce = nn.Conv2d(n_f, n_f, 3, stride=2, padding=1)
        self.theta = nn.Conv2d(n_f, inner, 3, padding=1)
        self.phi = nn.Conv2d(n_f, inner, 3, padding=1)
        self.g = nn.Conv2d(n_f, inner, 3, padding=1)
        self.out_conv = nn.Conv2d(inner, n_f, 3, padding=1)
        self.expand = nn.Conv2d(n_f, n_f, 3, padding=1)
        self.act = nn.LeakyReLU(LRELU_SLOPE, inplace=True)
        self.n_f = n_f

    def forward(self, f: Tensor) -> Tensor:
        _expect_channels(f, self.n_f, "non-local context")
        f4, squeeze = _as_batched(f)
        h, w = f4.shape[-2:]
        d = self.act(self.reduce(f4))
        b, _, h2, w2 = d.shape
        m = h2 * w2
        t = self.theta(d).flatten(-2).transpose(-2, -1)  # (b, m, inner)
        p = self.phi(d).flatten(-2)  # (b, inner, m)
        v = self.g(d).flatten(-2).transpose(-2, -1)  # (b, m, inner)
        rows = []
        for start in range(0, m, self._CHUNK):
            logits = t[:, start : start + self._CHUNK] @ p
            rows.append(torch.softmax(logits, dim=-1) @ v)
        y = torch.cat(rows, dim=1).transpose(-2, -1).reshape(b, -1, h2, w2)
        z = d + self.out_conv(y)
        z = F.interpolate(z, size=(h, w), mode="bilinear", align_corners=False)
        out = self.expand(z)
        return out.squeeze(0) if squeeze else out


class PixelShuffleUpsampler(nn.Module):
    """Conv to ``c * s^2`` channels, pixel shuffle, then two enhancement convs."""

    def __init__(self, n_f: int, out_channels: int, scale: int):
        super().__init__()
        self.scale = scale
        self.n_f = n_f
        self.pre = nn.Conv2d(n_f, out_channels * scale * scale, 3, padding=1)
        self.enhance1 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.enhance2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.act = nn.LeakyReLU(LRELU_SLOPE, inplace=True)

    def forward(self, f: Tensor) -> Tensor:
        _expect_channels(f, self.n_f, "pixelshuffle upsampler")
        y = pixel_shuffle(self.pre(f), self.scale)
        return self.enhance2(self.act(self.enhance1(y)))


class UpconvUpsampler(nn.Module):
    """Nearest-neighbor x2 stages with convs, then the same enhancement tail."""

    def __init__(self, n_f: int, out_channels: int, scale: int):
        super().__init__()
        if scale & (scale - 1):
            raise ConfigError(f"upconvolution supports power-of-two scales, got {scale}")
        self.scale = scale
        self.n_f = n_f
        num_stages = scale.bit_length() - 1
        self.stages = nn.ModuleList(
            nn.Conv2d(n_f, n_f, 3, padding=1) for _ in range(num_stages)
        )
        self.to_image = nn.Conv2d(n_f, out_channels, 3, padding=1)
        self.enhance1 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.enhance2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.act = nn.LeakyReLU(LRELU_SLOPE, inplace=True)

    def forward(self, f: Tensor) -> Tensor:
        _expect_channels(f, self.n_f, "upconvolution upsampler")
        f4, squeeze = _as_batched(f)
        for conv in self.stages:
            f4 = self.act(conv(F.interpolate(f4, scale_factor=2, mode="nearest")))
        y = self.enhance2(self.act(self.enhance1(self.to_image(f4))))
        return y.squeeze(0) if squeeze else y


class CarHead(nn.Module):
    """Artifact-reduction head: one conv over context features plus an
    input skip, so it predicts a residual correction of the LR image."""

    def __init__(self, n_f: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv2d(n_f, out_channels, 3, padding=1)
        self.n_f = n_f
        self.out_channels = out_channels

    def forward(self, f: Tensor, lr: Tensor) -> Tensor:
        _expect_channels(f, self.n_f, "car head features")
        _expect_channels(lr, self.out_channels, "car head lr input")
        if f.shape[-2:] != lr.shape[-2:]:
            raise ShapeError(
                f"car head: feature grid {tuple(f.shape[-2:])} does not match "
                f"lr grid {tuple(lr.shape[-2:])}"
            )
        return self.conv(f) + lr


def _make_context(cfg: ModelConfig) -> nn.Module:
    if cfg.context_variant == "aspp":
        return ASPPContext(cfg.n_f, cfg.dilations)
    if cfg.context_variant == "nonlocal":
        return NonLocalContext(cfg.n_f)
    return SequentialAtrousContext(cfg.n_f, cfg.dilations)


def _make_upsampler(cfg: ModelConfig) -> nn.Module:
    if cfg.upsample_variant == "pixelshuffle":
        return PixelShuffleUpsampler(cfg.n_f, cfg.in_channels, cfg.scale)
    return UpconvUpsampler(cfg.n_f, cfg.in_channels, cfg.scale)


class CARSRNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.conv_first = nn.Conv2d(cfg.in_channels, cfg.n_f, 3, padding=1)
        self.act = nn.LeakyReLU(LRELU_SLOPE, inplace=True)
        self.context = _make_context(cfg)
        self.trunk = nn.Sequential(
            *(
                RRDB(cfg.n_f, cfg.growth_channels, cfg.residual_scale)
                for _ in range(cfg.num_rrdb)
            )
        )
        self.trunk_conv = nn.Conv2d(cfg.n_f, cfg.n_f, 3, padding=1)
        self.upsample = _make_upsampler(cfg)
        self.car_head = CarHead(cfg.n_f, cfg.in_channels) if cfg.with_car_head else None

    def context_features(self, x: Tensor) -> Tensor:
        _expect_channels(x, self.cfg.in_channels, "model input")
        return self.context(self.act(self.conv_first(x)))

    def forward(self, x: Tensor, return_car: bool = False):
        if return_car and self.car_head is None:
            raise ConfigError(
                "return_car requires with_car_head=True in the model config"
            )
        _expect_channels(x, self.cfg.in_channels, "model input")
        x4, squeeze = _as_batched(x)
        f_ctx = self.context(self.act(self.conv_first(x4)))
        g = self.trunk_conv(self.trunk(f_ctx))
        sr = self.upsample(g)
        out = bilinear_upsample(x4, self.cfg.scale) + sr
        if squeeze:
            out = out.squeeze(0)
        if not return_car:
            return out
        car = self.car_head(f_ctx, x4)
        if squeeze:
            car = car.squeeze(0)
        return out, car


def init_parameters(net: nn.Module, seed: int) -> None:
    """Deterministic Kaiming-normal init from a dedicated generator.

    Weights under ``trunk.`` are scaled by 0.1 (small residual starts),
    all biases start at zero. Two calls with the same seed produce
    bit-identical parameters because named_parameters() ordering follows
    module registration order.
    """
    gen = torch.Generator().manual_seed(seed)
    gain = math.sqrt(2.0 / (1.0 + LRELU_SLOPE**2))
    with torch.no_grad():
        for name, p in net.named_parameters():
            if p.dim() >= 2:
                fan_in = p[0].numel()
                p.normal_(0.0, gain / math.sqrt(fan_in), generator=gen)
                if name.startswith("trunk."):
                    p.mul_(0.1)
            else:
                p.zero_()


def build_model(cfg: ModelConfig, seed: int) -> CARSRNet:
    cfg.validate()
    net = CARSRNet(cfg)
    init_parameters(net, seed)
    return net


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def param_inventory(module: nn.Module) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, shape, count) for every parameter, in registration order."""
    return [(n, tuple(p.shape), p.numel()) for n, p in module.named_parameters()]
