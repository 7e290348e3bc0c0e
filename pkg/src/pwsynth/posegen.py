"""Pose-conditioned generator with spatially varying modulation, and the
pose-conditioned discriminator.

Dataflow: target IUV -> pose encoder -> style blocks. Source appearance ->
multiscale encoder -> warp each level to the target pose -> feature pyramid
fusion (with the target foreground mask) -> one affine-parameter network per
convolution producing per-pixel (alpha, beta).
"""
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .errors import ConfigError, NumericError, ValidationError
from .coordnet import complete_coords, predict_target_coords
from .uvgeom import bilinear_sample, coordinate_inputs, texel_coords

MODULATION_MODES = ("spatial", "nonspatial")
APPEARANCE_SOURCES = ("incomplete_uv", "complete_uv", "source_image")
NOISE_MODES = ("random", "fixed", "zero")
# ablation variants: appearance source x modulation mode
VARIANTS = {
    "A": ("incomplete_uv", "nonspatial"), "B": ("incomplete_uv", "spatial"),
    "C": ("complete_uv", "nonspatial"), "D": ("complete_uv", "spatial"),
    "E": ("source_image", "nonspatial"), "F": ("source_image", "spatial"),
}
EPS_NORM = 1e-8


@dataclass
class GeneratorConfig:
    output_resolution: int = 64
    part_count: int = 5
    levels: int = 4
    pose_channels: int = 128
    block_channels: Tuple[int, ...] = (128, 64, 32, 32)
    app_channels: Tuple[int, ...] = (64, 32, 32, 16)
    fpn_channels: int = 32
    apn_hidden: int = 32
    modulation_mode: str = "spatial"
    appearance_source: str = "source_image"
    noise_seed: int = 0
    disc_channels: Tuple[int, ...] = (32, 64, 128, 128)
    eps_norm: float = EPS_NORM

    def __post_init__(self):
        self.block_channels = tuple(int(c) for c in self.block_channels)
        self.app_channels = tuple(int(c) for c in self.app_channels)
        self.disc_channels = tuple(int(c) for c in self.disc_channels)
        if self.modulation_mode not in MODULATION_MODES:
            raise ConfigError(f"modulation_mode must be one of {MODULATION_MODES}")
        if self.appearance_source not in APPEARANCE_SOURCES:
            raise ConfigError(f"appearance_source must be one of {APPEARANCE_SOURCES}")
        if self.levels < 1 or self.output_resolution % (2 ** self.levels):
            raise ConfigError(
                f"output_resolution {self.output_resolution} is not divisible by 2**levels "
                f"({2 ** self.levels})")
        if len(self.block_channels) != self.levels or len(self.app_channels) != self.levels:
            raise ConfigError("block_channels and app_channels need one entry per level")
        if len(self.disc_channels) != self.levels:
            raise ConfigError("disc_channels needs one entry per level")

    @property
    def base_resolution(self):
        return self.output_resolution // 2 ** self.levels

    @property
    def level_resolutions(self):
        return [self.base_resolution * 2 ** (i + 1) for i in range(self.levels)]

    @property
    def pose_input_channels(self):
        return self.part_count + 3

    @classmethod
    def variant(cls, name, **kw):
        source, mode = VARIANTS[name]
        return cls(appearance_source=source, modulation_mode=mode, **kw)


def _lrelu(x):
    return F.leaky_relu(x, 0.2) * math.sqrt(2.0)


class EqualConv2d(nn.Conv2d):
    """Conv with unit-variance weights scaled by 1/sqrt(fan_in) at run time
    (equalized learning rate)."""

    def reset_parameters(self):
        nn.init.normal_(self.weight)
        if self.bias is not None:
            nn.init.zeros_(self.bias)

    def forward(self, x):
        w = self.weight * (1.0 / math.sqrt(self.weight[0].numel()))
        return self._conv_forward(x, w, self.bias)


class EqualLinear(nn.Linear):
    def reset_parameters(self):
        nn.init.normal_(self.weight)
        nn.init.zeros_(self.bias)

    def forward(self, x):
        return F.linear(x, self.weight * (1.0 / math.sqrt(self.in_features)), self.bias)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, down=True, conv=nn.Conv2d):
        super().__init__()
        self.down = down
        self.conv1 = conv(cin, cout, 3, padding=1)
        self.conv2 = conv(cout, cout, 3, padding=1)
        self.skip = conv(cin, cout, 1, bias=False)

    def forward(self, x):
        y = self.conv2(_lrelu(self.conv1(x)))
        s = self.skip(x)
        if self.down:
            y, s = F.avg_pool2d(y, 2), F.avg_pool2d(s, 2)
        return _lrelu((y + s) / math.sqrt(2.0))


class PoseEncoder(nn.Module):
    """Residual downsampling chain: IUV tensor -> base-resolution features."""

    def __init__(self, cfg):
        super().__init__()
        widths = [max(cfg.pose_channels // 2 ** (cfg.levels - i), 16) for i in range(cfg.levels)]
        widths.append(cfg.pose_channels)
        self.stem = nn.Conv2d(cfg.pose_input_channels, widths[0], 3, padding=1)
        self.blocks = nn.ModuleList(ResBlock(widths[i], widths[i + 1]) for i in range(cfg.levels))

    def forward(self, pose):
        x = _lrelu(self.stem(pose))
        for b in self.blocks:
            x = b(x)
        return x


class SourceEncoder(nn.Module):
    """Multiscale appearance features, returned coarsest to finest."""

    def __init__(self, cfg):
        super().__init__()
        ch = list(reversed(cfg.app_channels))  # finest first
        self.stem = nn.Conv2d(3, ch[0], 3, padding=1)
        self.blocks = nn.ModuleList(ResBlock(ch[i], ch[i + 1]) for i in range(cfg.levels - 1))

    def forward(self, image):
        x = _lrelu(self.stem(image))
        feats = [x]
        for b in self.blocks:
            x = b(x)
            feats.append(x)
        return feats[::-1]


class FeaturePyramid(nn.Module):
    """Top-down fusion of warped features concatenated with the pose mask."""

    def __init__(self, cfg):
        super().__init__()
        c = cfg.fpn_channels
        self.lateral = nn.ModuleList(nn.Conv2d(ci + 1, c, 1) for ci in cfg.app_channels)
        self.smooth = nn.ModuleList(nn.Conv2d(c, c, 3, padding=1) for _ in cfg.app_channels)

    def forward(self, warped, masks):
        out, prev = [], None
        for lat, smooth, f, m in zip(self.lateral, self.smooth, warped, masks):
            p = lat(torch.cat([f, m], dim=1))
            if prev is not None:
                p = p + F.interpolate(prev, size=p.shape[-2:], mode="nearest")
            prev = p
            out.append(smooth(p))
        return out


class AffineParams(nn.Module):
    """Two 1x1 convolutions with a ReLU between them, one stack per parameter.

    The last layer of each stack starts at zero weight so that alpha == 1 and
    beta == 0 at initialization.
    """

    def __init__(self, cin, cout, hidden):
        super().__init__()
        self.alpha = nn.Sequential(nn.Conv2d(cin, hidden, 1), nn.ReLU(), nn.Conv2d(hidden, cout, 1))
        self.beta = nn.Sequential(nn.Conv2d(cin, hidden, 1), nn.ReLU(), nn.Conv2d(hidden, cout, 1))
        for head, offset in ((self.alpha, 1.0), (self.beta, 0.0)):
            nn.init.zeros_(head[2].weight)
            nn.init.constant_(head[2].bias, offset)

    def forward(self, f):
        return self.alpha(f), self.beta(f)


def normalize_per_sample(y, eps=EPS_NORM):
    """Zero mean / unit std over (C, H, W) for each sample."""
    mean = y.mean(dim=(1, 2, 3), keepdim=True)
    var = y.var(dim=(1, 2, 3), keepdim=True, unbiased=False)
    return (y - mean) / torch.sqrt(var + eps)


def modulated_conv(x, style, weight, demodulate=True):
    """Per-sample weight (de)modulation as a grouped convolution."""
    N, C, H, W = x.shape
    w = weight[None] * style[:, None, :, None, None]
    if demodulate:
        w = w * torch.rsqrt(w.pow(2).sum(dim=(2, 3, 4), keepdim=True) + 1e-8)
    cout = weight.shape[0]
    y = F.conv2d(x.reshape(1, N * C, H, W), w.reshape(N * cout, C, *weight.shape[2:]),
                 padding=weight.shape[-1] // 2, groups=N)
    return y.reshape(N, cout, H, W)


class StyleConv(nn.Module):
    """3x3 style-block convolution; spatial or weight modulation."""

    def __init__(self, cin, cout, resolution, mode, noise_seed, eps=EPS_NORM):
        super().__init__()
        self.mode = mode
        self.eps = eps
        self.weight = nn.Parameter(torch.randn(cout, cin, 3, 3) / math.sqrt(cin * 9))
        self.bias = nn.Parameter(torch.zeros(cout))
        self.noise_strength = nn.Parameter(torch.zeros(()))
        g = torch.Generator().manual_seed(noise_seed)
        self.register_buffer("fixed_noise", torch.randn(1, 1, resolution, resolution, generator=g))

    def normalized(self, x, alpha, beta):
        y = F.conv2d(alpha * x + beta, self.weight, padding=1)
        return normalize_per_sample(y, self.eps)

    def noise(self, x, mode, generator=None):
        if mode == "zero":
            return torch.zeros_like(x[:, :1])
        if mode == "fixed":
            return self.fixed_noise.to(x.dtype).expand(x.shape[0], 1, *x.shape[2:])
        if mode == "random":
            return torch.randn(x.shape[0], 1, *x.shape[2:], generator=generator, dtype=x.dtype)
        raise ValidationError(f"noise mode must be one of {NOISE_MODES}")

    def finish(self, y, noise_mode, generator=None):
        y = y + self.noise_strength * self.noise(y, noise_mode, generator) + self.bias[None, :, None, None]
        return _lrelu(y)

    def unmodulated(self, x, noise_mode="zero", generator=None):
        """Same convolution, normalization and noise with no modulation at all."""
        y = normalize_per_sample(F.conv2d(x, self.weight, padding=1), self.eps)
        return self.finish(y, noise_mode, generator)

    def forward(self, x, mod, noise_mode="zero", generator=None):
        if self.mode == "spatial":
            alpha, beta = mod
            y = self.normalized(x, alpha, beta)
        else:
            y = modulated_conv(x, mod, self.weight)
        return self.finish(y, noise_mode, generator)


def spatial_modulate_conv(x, alpha, beta, block, noise_mode="zero", generator=None):
    """alpha * x + beta -> 3x3 conv -> per-sample normalization -> noise, bias."""
    return block.finish(block.normalized(x, alpha, beta), noise_mode, generator)


def nonspatial_modulate_conv(x, style, block, noise_mode="zero", generator=None):
    return block.finish(modulated_conv(x, style, block.weight), noise_mode, generator)


class StyleAffine(nn.Module):
    """Global-average-pooled appearance -> style vector (bias starts at 1)."""

    def __init__(self, cin, cout):
        super().__init__()
        self.fc = nn.Linear(cin, cout)
        nn.init.normal_(self.fc.weight, std=1.0 / math.sqrt(cin))
        nn.init.ones_(self.fc.bias)

    def forward(self, f):
        return self.fc(f.mean(dim=(2, 3)))


def downsample_coords(coords, mask, factor):
    """Mask-weighted block mean of coordinates; a coarse cell is valid when any
    of its fine pixels is."""
    if factor == 1:
        return coords, mask
    m = mask[:, None]
    c = coords.permute(0, 3, 1, 2)
    num = F.avg_pool2d(c * m, factor)
    den = F.avg_pool2d(m, factor)
    ok = den > 0
    out = torch.where(ok, num / torch.where(ok, den, torch.ones_like(den)), torch.full_like(num, -2.0))
    return out.permute(0, 2, 3, 1), ok[:, 0].to(mask.dtype)


def resize_mask(mask, size):
    return F.interpolate(mask, size=size, mode="nearest")


class Generator(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        self.pose_encoder = PoseEncoder(cfg)
        self.source_encoder = SourceEncoder(cfg)
        self.pyramid = FeaturePyramid(cfg)
        cins = [cfg.pose_channels] + list(cfg.block_channels[:-1])
        self.convs = nn.ModuleList()
        self.mods = nn.ModuleList()
        self.to_rgb = nn.ModuleList()
        seed = cfg.noise_seed
        for i, (cin, cout, res) in enumerate(zip(cins, cfg.block_channels, cfg.level_resolutions)):
            for j, ci in enumerate((cin, cout)):
                self.convs.append(StyleConv(ci, cout, res, cfg.modulation_mode, seed * 1000 + 2 * i + j,
                                            cfg.eps_norm))
                if cfg.modulation_mode == "spatial":
                    self.mods.append(AffineParams(cfg.fpn_channels, ci, cfg.apn_hidden))
                else:
                    self.mods.append(StyleAffine(cfg.fpn_channels, ci))
            self.to_rgb.append(nn.Conv2d(cout, 3, 1))

    def encode_pose(self, pose):
        return self.pose_encoder(pose)

    def encode_source(self, appearance):
        res = self.cfg.output_resolution
        if appearance.shape[-2:] != (res, res):
            appearance = F.interpolate(appearance, size=(res, res), mode="bilinear", align_corners=False)
        return self.source_encoder(appearance)

    def warp(self, pyramid, coords, mask):
        out = []
        full = coords.shape[1]
        for f in pyramid:
            c, m = downsample_coords(coords, mask, full // f.shape[-1])
            out.append(bilinear_sample(f, c, m))
        return out

    def fuse(self, warped, M_Ptrg):
        masks = [resize_mask(M_Ptrg, f.shape[-2:]) for f in warped]
        return self.pyramid(warped, masks)

    def modulation(self, fused):
        """Per-convolution modulation inputs: (alpha, beta) pairs or style vectors."""
        return [mod(fused[k // 2]) for k, mod in enumerate(self.mods)]

    def synthesize(self, pose_features, fused, noise_mode="zero", generator=None):
        x = pose_features
        rgb = None
        mods = self.modulation(fused)
        for i in range(self.cfg.levels):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            for j in (0, 1):
                k = 2 * i + j
                x = self.convs[k](x, mods[k], noise_mode, generator)
                if not torch.isfinite(x).all():
                    raise NumericError(f"non-finite activation after style block {i} conv {j}")
            y = self.to_rgb[i](x)
            rgb = y if rgb is None else y + F.interpolate(rgb, scale_factor=2, mode="bilinear",
                                                           align_corners=False)
        return torch.tanh(rgb)

    def forward(self, pose, appearance, coords, coord_mask, M_Ptrg, noise_mode="zero", generator=None):
        if noise_mode not in NOISE_MODES:
            raise ValidationError(f"noise mode must be one of {NOISE_MODES}")
        warped = self.warp(self.encode_source(appearance), coords, coord_mask)
        fused = self.fuse(warped, M_Ptrg)
        return self.synthesize(self.encode_pose(pose), fused, noise_mode, generator)


class Discriminator(nn.Module):
    """Residual discriminator on image ++ rendered pose (part/255, u, v)."""

    def __init__(self, cfg):
        super().__init__()
        ch = list(cfg.disc_channels)
        self.from_rgb = EqualConv2d(6, ch[0], 1)
        self.blocks = nn.ModuleList(
            ResBlock(ch[i], ch[min(i + 1, len(ch) - 1)], conv=EqualConv2d) for i in range(cfg.levels))
        self.final_conv = EqualConv2d(ch[-1], ch[-1], 3, padding=1)
        base = cfg.base_resolution
        self.fc = EqualLinear(ch[-1] * base * base, ch[-1])
        self.out = EqualLinear(ch[-1], 1)

    def forward(self, image, pose3):
        x = _lrelu(self.from_rgb(torch.cat([image, pose3], dim=1)))
        for b in self.blocks:
            x = b(x)
        x = _lrelu(self.final_conv(x)).flatten(1)
        return self.out(_lrelu(self.fc(x)))[:, 0]


# -- input preparation ---------------------------------------------------------

def pose_tensor(iuv, part_count):
    """One-hot part channels (including background) plus u and v."""
    onehot = np.eye(part_count + 1)[iuv.part]
    return torch.from_numpy(np.concatenate([onehot, iuv.u[..., None], iuv.v[..., None]], axis=-1)
                            ).permute(2, 0, 1).float()


def pose3_tensor(iuv):
    return torch.from_numpy(np.stack([iuv.part / 255.0, iuv.u, iuv.v])).float()


@dataclass(eq=False)
class GeneratorInputs:
    pose: torch.Tensor
    pose3: torch.Tensor
    appearance: torch.Tensor
    coords: torch.Tensor
    coord_mask: torch.Tensor
    M_Ptrg: torch.Tensor

    def as_args(self):
        return self.pose, self.appearance, self.coords, self.coord_mask, self.M_Ptrg

    @staticmethod
    def stack(items):
        return GeneratorInputs(*(torch.stack([getattr(it, f) for it in items]) for f in
                                 ("pose", "pose3", "appearance", "coords", "coord_mask", "M_Ptrg")))


def _t(a):
    return torch.from_numpy(np.ascontiguousarray(a)).float()


def generator_inputs(I_src, iuv_src, iuv_trg, atlas, cfg, coordnet=None, T_coord=None):
    """Unbatched generator inputs for one source image and target pose.

    ``source_image`` warps the source image features with T_coord (computed
    with the frozen coordnet unless supplied). The UV variants encode a UV
    texture of the source and warp it with the target's texel coordinates.
    """
    if cfg.appearance_source == "source_image":
        if T_coord is None:
            T_coord = predict_target_coords(coordnet, iuv_src, iuv_trg, atlas)
        appearance = I_src
        coords, cmask = T_coord.coords, T_coord.mask
    else:
        ci = coordinate_inputs(iuv_src, atlas)
        if cfg.appearance_source == "complete_uv":
            if coordnet is None:
                raise ConfigError("the complete_uv appearance source needs a coordnet")
            C_uv = complete_coords(ci.combined, ci.combined_mask, coordnet)
        else:
            C_uv = ci.base
        appearance = bilinear_sample(I_src, C_uv)
        tc = texel_coords(iuv_trg, atlas)
        coords, cmask = tc.coords, tc.mask
    return GeneratorInputs(
        pose=pose_tensor(iuv_trg, cfg.part_count),
        pose3=pose3_tensor(iuv_trg),
        appearance=_t(np.moveaxis(appearance, -1, 0)),
        coords=_t(coords),
        coord_mask=_t(cmask),
        M_Ptrg=_t(iuv_trg.foreground_mask()[None]),
    )


def generate(generator, inputs, noise_mode="zero", rng=None):
    """Batched forward pass. ``inputs`` is a (stacked) GeneratorInputs."""
    return generator(*inputs.as_args(), noise_mode=noise_mode, generator=rng)


def discriminate(discriminator, image, pose3):
    return discriminator(image, pose3)


def save_generator(path, generator, discriminator=None, extra=None):
    modules = {"generator": generator}
    if discriminator is not None:
        modules["discriminator"] = discriminator
    checkpoint.save(path, "generator", generator.cfg, modules, extra)


def load_generator(path):
    payload = checkpoint.load(path, "generator")
    cfg = GeneratorConfig(**payload["config"])
    G = Generator(cfg)
    G.load_state_dict(payload["state"]["generator"])
    D = None
    if "discriminator" in payload["state"]:
        D = Discriminator(cfg)
        D.load_state_dict(payload["state"]["discriminator"])
    return G, D
