"""Coordinate completion: a gated-convolution U-Net that inpaints the
UV-space field of source-image coordinates, and its two training losses."""
from dataclasses import dataclass
from typing import List, NamedTuple, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint
from .errors import NumericError, ValidationError
from .uvgeom import (CoordField, IUVMap, bilinear_sample, check_binary, coordinate_inputs,
                     uv_to_image, uv_to_image_torch)


@dataclass
class CoordNetConfig:
    uv_resolution: Tuple[int, int]
    base_channels: int = 32
    depth: int = 4
    max_channels: int = 256
    gated: bool = True
    lambda_mirrored: float = 0.5
    lr: float = 1e-4
    betas: Tuple[float, float] = (0.5, 0.999)
    in_channels: int = 3

    def __post_init__(self):
        self.uv_resolution = tuple(int(x) for x in self.uv_resolution)
        self.betas = tuple(float(b) for b in self.betas)
        if self.depth < 2:
            raise ValidationError("coordnet depth must be >= 2")
        if self.in_channels != 3:
            raise ValidationError("coordnet takes exactly 3 input channels (x, y, mask)")

    def channels(self):
        return [min(self.base_channels * 2 ** i, self.max_channels) for i in range(self.depth + 1)]


_ATANH_LIMIT = 0.999


class GatedConv2d(nn.Module):
    """act(feature) * sigmoid(gate), both from one convolution."""

    def __init__(self, cin, cout, stride=1, gated=True):
        super().__init__()
        self.gated = gated
        self.conv = nn.Conv2d(cin, cout * (2 if gated else 1), 3, stride=stride, padding=1)

    def forward(self, x):
        y = self.conv(x)
        if not self.gated:
            return F.elu(y)
        feat, gate = y.chunk(2, dim=1)
        return F.elu(feat) * torch.sigmoid(gate)


class CoordNet(nn.Module):
    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels()
        g = cfg.gated
        self.stem = GatedConv2d(cfg.in_channels, ch[0], gated=g)
        self.down = nn.ModuleList(
            nn.Sequential(GatedConv2d(ch[i], ch[i + 1], stride=2, gated=g),
                          GatedConv2d(ch[i + 1], ch[i + 1], gated=g))
            for i in range(cfg.depth))
        self.up = nn.ModuleList(
            GatedConv2d(ch[i + 1] + ch[i], ch[i], gated=g) for i in reversed(range(cfg.depth)))
        # the head also sees the raw input, and predicts a pre-tanh offset
        # from the known coordinates, so valid texels start near identity
        self.head = nn.Conv2d(ch[0] + cfg.in_channels, 2, 1)

    def forward(self, coords, mask):
        """coords (N, 2, H, W) with invalid entries zeroed, mask (N, 1, H, W)."""
        H, W = coords.shape[-2:]
        if (H, W) != self.cfg.uv_resolution:
            raise ValidationError(
                f"coordnet configured for {self.cfg.uv_resolution}, got {(H, W)}")
        m = 2 ** self.cfg.depth
        ph, pw = (-H) % m, (-W) % m
        x = F.pad(torch.cat([coords, mask], dim=1), (0, pw, 0, ph))
        skips = [self.stem(x)]
        for block in self.down:
            skips.append(block(skips[-1]))
        y = skips.pop()
        for block in self.up:
            skip = skips.pop()
            y = F.interpolate(y, size=skip.shape[-2:], mode="nearest")
            y = block(torch.cat([y, skip], dim=1))
        prior = torch.atanh(x[:, :2].clamp(-_ATANH_LIMIT, _ATANH_LIMIT)) * x[:, 2:]
        return torch.tanh(self.head(torch.cat([y, x], dim=1)) + prior)[..., :H, :W]


def complete_coords(C_in, M_in, model):
    """Dense completed UV coordinate field from one combined input."""
    if C_in.shape != model.cfg.uv_resolution:
        raise ValidationError("C_in does not match the configured atlas resolution")
    check_binary(M_in, "M_in")
    param = next(model.parameters())
    c = torch.from_numpy(np.moveaxis(C_in.coords * M_in[..., None], -1, 0).copy()).to(param.dtype)[None]
    m = torch.from_numpy(np.asarray(M_in, dtype=np.float64)).to(param.dtype)[None, None]
    with torch.no_grad():
        out = model(c, m)[0]
    coords = np.moveaxis(out.double().numpy(), 0, -1)
    return CoordField(np.clip(coords, -1, 1), np.ones(C_in.shape))


def loss_coord(C_out, C_base, M_base, C_mirrored, M_mirrored, lam=0.5):
    """Masked L1 to base and (weighted) mirrored coordinates, mean over all elements."""
    if bool((M_base * M_mirrored != 0).any()):
        raise ValidationError("M_base and M_mirrored overlap; combine them with combine_symmetry first")
    n = C_out.numel()
    base = (C_out * M_base - C_base * M_base).abs().sum() / n
    mirrored = (C_out * M_mirrored - C_mirrored * M_mirrored).abs().sum() / n
    return base + lam * mirrored


@dataclass(eq=False)
class CoordBatch:
    C_in: torch.Tensor
    M_in: torch.Tensor
    C_base: torch.Tensor
    M_base: torch.Tensor
    C_mirrored: torch.Tensor
    M_mirrored: torch.Tensor
    iuv_src: List[IUVMap]
    iuv_trg: List[IUVMap]
    I_src: torch.Tensor
    I_trg: torch.Tensor
    M_Psrc: torch.Tensor
    M_Ptrg: torch.Tensor

    def net_input(self):
        return self.C_in * self.M_in, self.M_in


def _field(cf, dtype):
    return torch.from_numpy(np.moveaxis(cf.coords, -1, 0).copy()).to(dtype)


def _img(a, dtype):
    return torch.from_numpy(np.moveaxis(np.asarray(a), -1, 0).copy()).to(dtype)


def _mask(m, dtype):
    return torch.from_numpy(np.asarray(m, dtype=np.float64))[None].to(dtype)


def make_coord_batch(samples, atlas, use_symmetry=True, dtype=torch.float32):
    """Stack PairSamples into a CoordBatch. M_mirrored holds the mirrored
    texels the base does not already cover."""
    cols = {k: [] for k in ("C_in", "M_in", "C_base", "M_base", "C_mirrored", "M_mirrored",
                            "I_src", "I_trg", "M_Psrc", "M_Ptrg")}
    for s in samples:
        ci = coordinate_inputs(s.iuv_src, atlas, use_symmetry=use_symmetry)
        cols["C_in"].append(_field(ci.combined, dtype))
        cols["M_in"].append(_mask(ci.combined_mask, dtype))
        cols["C_base"].append(_field(ci.base, dtype))
        cols["M_base"].append(_mask(ci.base_mask, dtype))
        cols["C_mirrored"].append(_field(ci.mirrored, dtype))
        cols["M_mirrored"].append(_mask(ci.mirrored_exclusive, dtype))
        cols["I_src"].append(_img(s.I_src, dtype))
        cols["I_trg"].append(_img(s.I_trg, dtype))
        cols["M_Psrc"].append(_mask(s.iuv_src.foreground_mask(), dtype))
        cols["M_Ptrg"].append(_mask(s.iuv_trg.foreground_mask(), dtype))
    stacked = {k: torch.stack(v) for k, v in cols.items()}
    return CoordBatch(iuv_src=[s.iuv_src for s in samples], iuv_trg=[s.iuv_trg for s in samples],
                      **stacked)


def warp_to_pose(C_out, iuv, atlas):
    """(N, 2, Huv, Wuv) dense coordinates -> (N, H, W, 2) coords, (N, H, W) mask."""
    coords, masks = zip(*(uv_to_image_torch(C_out[n], iuv[n], atlas) for n in range(C_out.shape[0])))
    return torch.stack(coords), torch.stack(masks)


def loss_rgb(C_out, batch, atlas):
    """L1 between source pixels warped to the source / target poses and the
    ground truth, on the respective pose foregrounds."""
    S, S_mask = warp_to_pose(C_out, batch.iuv_src, atlas)
    T, T_mask = warp_to_pose(C_out, batch.iuv_trg, atlas)
    n = batch.I_src.numel()
    src_term = (bilinear_sample(batch.I_src, S, S_mask) * batch.M_Psrc
                - batch.I_src * batch.M_Psrc).abs().sum() / n
    trg_term = (bilinear_sample(batch.I_src, T, T_mask) * batch.M_Ptrg
                - batch.I_trg * batch.M_Ptrg).abs().sum() / batch.I_trg.numel()
    return src_term + trg_term


class StepLosses(NamedTuple):
    coord: float
    rgb: float
    total: float


def make_optimizer(model, cfg):
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.betas)


def coordnet_train_step(model, batch, optimizer, atlas):
    cfg = model.cfg
    model.train()
    optimizer.zero_grad(set_to_none=True)
    C_out = model(*batch.net_input())
    l_coord = loss_coord(C_out, batch.C_base, batch.M_base, batch.C_mirrored, batch.M_mirrored,
                         cfg.lambda_mirrored)
    l_rgb = loss_rgb(C_out, batch, atlas)
    total = l_coord + l_rgb
    if not torch.isfinite(total):
        raise NumericError(f"coordnet loss is non-finite (L_coord={l_coord.item()}, L_rgb={l_rgb.item()})")
    total.backward()
    optimizer.step()
    return StepLosses(l_coord.item(), l_rgb.item(), total.item())


def freeze(model):
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def predict_target_coords(model, iuv_src, iuv_trg, atlas, use_symmetry=True):
    """T_coord for a pose pair: combine, complete (if a model is given), gather."""
    ci = coordinate_inputs(iuv_src, atlas, use_symmetry=use_symmetry)
    C = ci.combined if model is None else complete_coords(ci.combined, ci.combined_mask, model)
    return uv_to_image(C, iuv_trg, atlas)


def save_coordnet(path, model, extra=None):
    checkpoint.save(path, "coordnet", model.cfg, {"model": model}, extra)


def load_coordnet(path):
    payload = checkpoint.load(path, "coordnet")
    model = CoordNet(CoordNetConfig(**payload["config"]))
    model.load_state_dict(payload["state"]["model"])
    return freeze(model)
