"""Image-space <-> UV-space coordinate geometry.

Conventions used throughout the package:

* Normalized coordinates are ``(x, y)`` pairs in ``[-1, 1]`` with the
  align-corners-false pixel-centre convention, i.e. pixel ``j`` of a row of
  width ``W`` sits at ``(2j + 1) / W - 1``.
* Invalid coordinates hold the sentinel ``(-2, -2)`` and are never sampled.
* A part's ``(u, v)`` in ``[0, 1]`` addresses its rectangular chart with the
  same pixel-centre convention: texel ``k`` of a chart of width ``w`` sits at
  ``u = (k + 0.5) / w``.
"""
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Tuple

import numpy as np
import torch

from .errors import CapacityError, DecodeError, ValidationError

SENTINEL = -2.0
TAU_VIS = 1e-4
MIN_CHART = 8

# u, v are snapped to this dyadic lattice so that u -> 1 - u is exact in
# floating point and mirroring is an exact involution.
_UV_LATTICE = float(2 ** 24)

MIRROR_RULES = ("identity", "hflip")

# DensePose part indices (1-based): 1/2 torso, 3/4 hands, 5/6 feet,
# 7-14 legs, 15-22 arms, 23/24 head.
DENSEPOSE_PAIRS = {3: 4, 5: 6, 7: 8, 9: 10, 11: 12, 13: 14,
                   15: 16, 17: 18, 19: 20, 21: 22}
DENSEPOSE_MIDLINE = (1, 2, 23, 24)

GARMENT_LABELS = {0: "background", 1: "top", 2: "bottom", 3: "skin",
                  4: "head", 5: "hands", 6: "feet"}
DENSEPOSE_PART_LABELS = {
    1: 1, 2: 1, 15: 1, 16: 1, 17: 1, 18: 1,
    7: 2, 8: 2, 9: 2, 10: 2, 11: 2, 12: 2, 13: 2, 14: 2,
    19: 3, 20: 3, 21: 3, 22: 3,
    23: 4, 24: 4, 3: 5, 4: 5, 5: 6, 6: 6,
}


def _is_binary(mask):
    if isinstance(mask, torch.Tensor):
        return bool(((mask == 0) | (mask == 1)).all())
    return bool(np.isin(np.asarray(mask), (0, 1)).all())


def check_binary(mask, name="mask"):
    if not _is_binary(mask):
        raise ValidationError(f"{name} must be binary (values in {{0, 1}})")


@dataclass(eq=False)
class IUVMap:
    part: np.ndarray
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        part = np.asarray(self.part)
        u = np.asarray(self.u, dtype=np.float64)
        v = np.asarray(self.v, dtype=np.float64)
        if part.ndim != 2 or u.shape != part.shape or v.shape != part.shape:
            raise ValidationError(
                f"IUV planes must share one 2-D shape, got {part.shape}, {u.shape}, {v.shape}")
        if np.issubdtype(part.dtype, np.floating) and not np.all(part == np.round(part)):
            raise ValidationError("IUV part channel must hold integers")
        part = part.astype(np.int64)
        if part.min(initial=0) < 0:
            raise ValidationError("IUV part index must be >= 0")
        fg = part > 0
        if not (np.isfinite(u).all() and np.isfinite(v).all()):
            raise ValidationError("IUV u/v must be finite")
        if (u[fg] < 0).any() or (u[fg] > 1).any() or (v[fg] < 0).any() or (v[fg] > 1).any():
            raise ValidationError("IUV u/v must lie in [0, 1] on the foreground")
        u = np.where(fg, np.round(u * _UV_LATTICE) / _UV_LATTICE, 0.0)
        v = np.where(fg, np.round(v * _UV_LATTICE) / _UV_LATTICE, 0.0)
        self.part, self.u, self.v = part, u, v

    @property
    def shape(self):
        return self.part.shape

    def foreground_mask(self):
        return (self.part > 0).astype(np.float64)

    def __eq__(self, other):
        if not isinstance(other, IUVMap):
            return NotImplemented
        return (np.array_equal(self.part, other.part) and np.array_equal(self.u, other.u)
                and np.array_equal(self.v, other.v))

    @classmethod
    def background(cls, height, width):
        z = np.zeros((height, width))
        return cls(z.astype(np.int64), z, z)


@dataclass(frozen=True)
class Chart:
    row: int
    col: int
    height: int
    width: int

    def contains(self, r, c):
        return (self.row <= r < self.row + self.height) and (self.col <= c < self.col + self.width)


@dataclass(eq=False)
class MappingAtlas:
    uv_resolution: Tuple[int, int]
    part_count: int
    uv_to_part: np.ndarray
    part_uv_charts: Tuple[Chart, ...]
    symmetry_pairs: np.ndarray
    intra_part_mirror: Tuple[str, ...]

    def __post_init__(self):
        self.uv_resolution = tuple(int(x) for x in self.uv_resolution)
        self.uv_to_part = np.asarray(self.uv_to_part, dtype=np.int64)
        self.symmetry_pairs = np.asarray(self.symmetry_pairs, dtype=np.int64)
        self.part_uv_charts = tuple(self.part_uv_charts)
        self.intra_part_mirror = tuple(self.intra_part_mirror)
        self.validate()

    def validate(self):
        P = self.part_count
        if self.uv_to_part.shape != self.uv_resolution:
            raise ValidationError("uv_to_part shape does not match uv_resolution")
        if len(self.part_uv_charts) != P or len(self.intra_part_mirror) != P:
            raise ValidationError("one chart and one mirror rule per part required")
        if self.symmetry_pairs.shape != (P + 1,) or self.symmetry_pairs[0] != 0:
            raise ValidationError("symmetry_pairs must have length P + 1 with entry 0 == 0")
        pairs = self.symmetry_pairs
        if pairs.min() < 0 or pairs.max() > P or not np.array_equal(pairs[pairs], np.arange(P + 1)):
            raise ValidationError("symmetry_pairs is not an involution on part indices")
        for rule in self.intra_part_mirror:
            if rule not in MIRROR_RULES:
                raise ValidationError(f"unknown intra-part mirror rule {rule!r}")
        cover = np.zeros(self.uv_resolution, dtype=np.int64)
        H, W = self.uv_resolution
        for ch in self.part_uv_charts:
            if ch.row < 0 or ch.col < 0 or ch.row + ch.height > H or ch.col + ch.width > W:
                raise ValidationError(f"chart {ch} exceeds the atlas")
            if ch.height < 1 or ch.width < 1:
                raise ValidationError(f"chart {ch} is empty")
            cover[ch.row:ch.row + ch.height, ch.col:ch.col + ch.width] += 1
        if cover.max(initial=0) > 1:
            raise ValidationError("atlas charts overlap")
        for k, ch in enumerate(self.part_uv_charts, start=1):
            rr, cc = np.nonzero(self.uv_to_part == k)
            inside = ((rr >= ch.row) & (rr < ch.row + ch.height)
                      & (cc >= ch.col) & (cc < ch.col + ch.width))
            if not inside.all():
                raise ValidationError(f"texels of part {k} fall outside its chart")

    def chart_table(self):
        """(P, 4) int array of (row, col, height, width); row k-1 is part k."""
        return np.array([[c.row, c.col, c.height, c.width] for c in self.part_uv_charts],
                        dtype=np.int64).reshape(-1, 4)

    def mirror_uv(self, part, u, v):
        """Apply each pixel's own part mirror rule. Background entries pass through."""
        part = np.asarray(part)
        u2 = np.array(u, dtype=np.float64, copy=True)
        v2 = np.array(v, dtype=np.float64, copy=True)
        for k, rule in enumerate(self.intra_part_mirror, start=1):
            if rule == "hflip":
                sel = part == k
                u2[sel] = 1.0 - u2[sel]
        return u2, v2


@dataclass(eq=False)
class CoordField:
    coords: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        coords = np.array(self.coords, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=np.float64)
        if coords.ndim != 3 or coords.shape[-1] != 2 or mask.shape != coords.shape[:2]:
            raise ValidationError(
                f"CoordField needs coords HxWx2 and mask HxW, got {coords.shape} / {mask.shape}")
        check_binary(mask, "CoordField mask")
        valid = mask > 0
        if (np.abs(coords[valid]) > 1.0).any():
            raise ValidationError("valid CoordField coordinates must lie in [-1, 1]")
        coords[~valid] = SENTINEL
        self.coords, self.mask = coords, mask

    @property
    def shape(self):
        return self.mask.shape

    @classmethod
    def invalid(cls, height, width):
        return cls(np.full((height, width, 2), SENTINEL), np.zeros((height, width)))


@dataclass(eq=False)
class UVSegmentation:
    labels: np.ndarray
    names: Mapping[int, str] = field(default_factory=lambda: dict(GARMENT_LABELS))

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2 or self.labels.min(initial=0) < 0:
            raise ValidationError("UV segmentation must be a 2-D non-negative label grid")


# -- normalized coordinate helpers -------------------------------------------

def pixel_to_norm(index, size):
    return (2.0 * np.asarray(index, dtype=np.float64) + 1.0) / size - 1.0


def norm_to_pixel(coord, size):
    return ((np.asarray(coord, dtype=np.float64) + 1.0) * size - 1.0) / 2.0


def meshgrid(height, width):
    """Identity CoordField: every pixel holds its own normalized centre."""
    xs = pixel_to_norm(np.arange(width), width)
    ys = pixel_to_norm(np.arange(height), height)
    gx, gy = np.meshgrid(xs, ys)
    return CoordField(np.stack([gx, gy], axis=-1), np.ones((height, width)))


# -- atlas construction -------------------------------------------------------

def _grid_layout(part_count, uv_resolution):
    if part_count == 24:
        return 4, 6
    cols = math.ceil(math.sqrt(part_count))
    return math.ceil(part_count / cols), cols


def build_synthetic_atlas(part_count, uv_resolution, midline_parts=None):
    """Pack ``part_count`` equal rectangular charts in a grid.

    Parts are paired ``1<->2, 3<->4, ...``; with an odd count the last part is
    a self-paired midline part. ``part_count == 24`` uses a 4x6 grid and the
    DensePose left/right pairing.
    """
    if part_count < 2:
        raise ValidationError("part_count must be >= 2")
    H, W = (int(x) for x in uv_resolution)
    rows, cols = _grid_layout(part_count, (H, W))
    ch_h, ch_w = H // rows, W // cols
    if ch_h < MIN_CHART or ch_w < MIN_CHART:
        raise CapacityError(
            f"{part_count} charts need at least {rows * MIN_CHART}x{cols * MIN_CHART} texels, "
            f"atlas is {H}x{W}")
    charts = []
    uv_to_part = np.zeros((H, W), dtype=np.int64)
    for k in range(part_count):
        r, c = divmod(k, cols)
        chart = Chart(r * ch_h, c * ch_w, ch_h, ch_w)
        charts.append(chart)
        uv_to_part[chart.row:chart.row + ch_h, chart.col:chart.col + ch_w] = k + 1

    pairs = np.arange(part_count + 1)
    if midline_parts is not None:
        midline = set(midline_parts)
        others = [k for k in range(1, part_count + 1) if k not in midline]
        if len(others) % 2:
            raise ValidationError("non-midline parts must come in left/right pairs")
        for a, b in zip(others[0::2], others[1::2]):
            pairs[a], pairs[b] = b, a
    elif part_count == 24:
        for a, b in DENSEPOSE_PAIRS.items():
            pairs[a], pairs[b] = b, a
    else:
        for a in range(1, part_count, 2):
            pairs[a], pairs[a + 1] = a + 1, a
    return MappingAtlas((H, W), part_count, uv_to_part, tuple(charts), pairs,
                        ("hflip",) * part_count)


def segment_uv(atlas, part_labels, names=None):
    """UV segmentation assigning ``part_labels[k]`` to every texel of part ``k``."""
    labels = np.zeros(atlas.uv_resolution, dtype=np.int64)
    for k in range(1, atlas.part_count + 1):
        if k not in part_labels:
            raise ValidationError(f"part {k} has no segmentation label")
        labels[atlas.uv_to_part == k] = int(part_labels[k])
    return UVSegmentation(labels, dict(names or GARMENT_LABELS))


# -- texel addressing ---------------------------------------------------------

@dataclass(frozen=True)
class TexelPlan:
    """Bilinear stencil linking foreground pixels to atlas texels.

    Row ``i`` says pixel ``pixel_index[i]`` (flat, image grid) touches texels
    ``texel_index[i, :]`` (flat, atlas grid) with weights ``weight[i, :]``.
    Stencils never leave the pixel's own chart.
    """
    image_shape: Tuple[int, int]
    uv_shape: Tuple[int, int]
    pixel_index: np.ndarray
    texel_index: np.ndarray
    weight: np.ndarray

    def gather(self, values, mask):
        """Mask-normalized bilinear gather. values: (C, Huv, Wuv) numpy or torch."""
        Hu, Wu = self.uv_shape
        H, W = self.image_shape
        if isinstance(values, torch.Tensor):
            flat = values.reshape(values.shape[0], Hu * Wu)
            m = mask.reshape(Hu * Wu).to(flat.dtype)
            idx = torch.from_numpy(self.texel_index)
            w = torch.from_numpy(self.weight).to(flat.dtype) * m[idx]
            den = w.sum(dim=1)
            ok = den > TAU_VIS
            num = (flat[:, idx] * w).sum(dim=2)
            vals = num / torch.where(ok, den, torch.ones_like(den))
            out = torch.full((values.shape[0], H * W), SENTINEL, dtype=flat.dtype)
            pix = torch.from_numpy(self.pixel_index)
            out[:, pix[ok]] = vals[:, ok]
            out_mask = torch.zeros(H * W, dtype=flat.dtype)
            out_mask[pix[ok]] = 1.0
            return out.reshape(-1, H, W), out_mask.reshape(H, W)
        flat = np.asarray(values, dtype=np.float64).reshape(values.shape[0], Hu * Wu)
        m = np.asarray(mask, dtype=np.float64).reshape(Hu * Wu)
        w = self.weight * m[self.texel_index]
        den = w.sum(axis=1)
        ok = den > TAU_VIS
        num = (flat[:, self.texel_index] * w).sum(axis=2)
        out = np.full((flat.shape[0], H * W), SENTINEL)
        out[:, self.pixel_index[ok]] = num[:, ok] / den[ok]
        out_mask = np.zeros(H * W)
        out_mask[self.pixel_index[ok]] = 1.0
        return out.reshape(-1, H, W), out_mask.reshape(H, W)

    def scatter(self, values, valid):
        """Weighted-average splat. values: (C, H, W) numpy; valid: (H, W)."""
        Hu, Wu = self.uv_shape
        flat = np.asarray(values, dtype=np.float64).reshape(values.shape[0], -1)
        pv = np.asarray(valid, dtype=np.float64).reshape(-1)[self.pixel_index]
        w = self.weight * pv[:, None]
        idx = self.texel_index.ravel()
        wsum = np.bincount(idx, weights=w.ravel(), minlength=Hu * Wu)
        acc = np.stack([
            np.bincount(idx, weights=(w * flat[c, self.pixel_index][:, None]).ravel(),
                        minlength=Hu * Wu)
            for c in range(flat.shape[0])])
        ok = wsum > TAU_VIS
        out = np.zeros_like(acc)
        out[:, ok] = acc[:, ok] / wsum[ok]
        return out.reshape(-1, Hu, Wu), ok.reshape(Hu, Wu).astype(np.float64)


def _chart_arrays(atlas):
    # Index 0 is a dummy chart for background so part values index directly.
    tab = np.vstack([np.zeros((1, 4), dtype=np.int64), atlas.chart_table()])
    return tab[:, 0], tab[:, 1], tab[:, 2], tab[:, 3]


def _check_parts(iuv, atlas):
    if iuv.part.max(initial=0) > atlas.part_count:
        raise ValidationError(
            f"IUV part index {iuv.part.max()} exceeds atlas part count {atlas.part_count}")


def texel_positions(iuv, atlas):
    """Continuous, chart-clamped texel positions of every foreground pixel.

    Returns (pixel_index, row, col, part) for the flat foreground pixels.
    """
    _check_parts(iuv, atlas)
    part = iuv.part.ravel()
    pix = np.nonzero(part > 0)[0]
    k = part[pix]
    r0, c0, hh, ww = _chart_arrays(atlas)
    lr = np.clip(iuv.v.ravel()[pix] * hh[k] - 0.5, 0.0, hh[k] - 1)
    lc = np.clip(iuv.u.ravel()[pix] * ww[k] - 0.5, 0.0, ww[k] - 1)
    return pix, r0[k] + lr, c0[k] + lc, k


def texel_plan(iuv, atlas):
    pix, rr, cc, k = texel_positions(iuv, atlas)
    r0, c0, hh, ww = _chart_arrays(atlas)
    Hu, Wu = atlas.uv_resolution
    ra = np.floor(rr).astype(np.int64)
    ca = np.floor(cc).astype(np.int64)
    fr, fc = rr - ra, cc - ca
    rb = np.minimum(ra + 1, r0[k] + hh[k] - 1)
    cb = np.minimum(ca + 1, c0[k] + ww[k] - 1)
    texel = np.stack([ra * Wu + ca, ra * Wu + cb, rb * Wu + ca, rb * Wu + cb], axis=1)
    weight = np.stack([(1 - fr) * (1 - fc), (1 - fr) * fc, fr * (1 - fc), fr * fc], axis=1)
    return TexelPlan(iuv.shape, (Hu, Wu), pix, texel, weight)


def texel_coords(iuv, atlas):
    """CoordField of normalized atlas coordinates of each pixel's texel position."""
    pix, rr, cc, _ = texel_positions(iuv, atlas)
    Hu, Wu = atlas.uv_resolution
    H, W = iuv.shape
    coords = np.full((H * W, 2), SENTINEL)
    coords[pix, 0] = pixel_to_norm(cc, Wu)
    coords[pix, 1] = pixel_to_norm(rr, Hu)
    mask = np.zeros(H * W)
    mask[pix] = 1.0
    return CoordField(coords.reshape(H, W, 2), mask.reshape(H, W))


# -- operations ---------------------------------------------------------------

def image_to_uv(iuv, atlas, payload):
    """Splat a per-pixel payload into the atlas.

    ``payload`` is a CoordField (only its valid pixels contribute) or an
    HxWxC array. Returns ``(uv_payload, uv_mask)``; uv_payload is a CoordField
    for CoordField payloads and an Huv x Wuv x C array otherwise.
    """
    plan = texel_plan(iuv, atlas)
    if isinstance(payload, CoordField):
        if payload.shape != iuv.shape:
            raise ValidationError("payload is not aligned with the IUV map")
        vals, mask = plan.scatter(np.moveaxis(payload.coords, -1, 0), payload.mask)
        coords = np.moveaxis(vals, 0, -1)
        return CoordField(np.clip(coords, -1.0, 1.0), mask), mask
    arr = np.asarray(payload, dtype=np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[..., None]
    if arr.shape[:2] != iuv.shape:
        raise ValidationError("payload is not aligned with the IUV map")
    vals, mask = plan.scatter(np.moveaxis(arr, -1, 0), np.ones(iuv.shape))
    out = np.moveaxis(vals, 0, -1)
    return (out[..., 0] if squeeze else out), mask


def uv_to_image(C_uv, iuv_target, atlas):
    """Gather UV-space coordinates onto the target pixel grid."""
    if C_uv.shape != atlas.uv_resolution:
        raise ValidationError("UV coordinate field does not match the atlas resolution")
    plan = texel_plan(iuv_target, atlas)
    vals, mask = plan.gather(np.moveaxis(C_uv.coords, -1, 0), C_uv.mask)
    return CoordField(np.clip(np.moveaxis(vals, 0, -1), -1.0, 1.0) * mask[..., None]
                      + SENTINEL * (1 - mask[..., None]), mask)


def uv_to_image_torch(C_uv, iuv_target, atlas, mask=None):
    """Differentiable gather. C_uv: (2, Huv, Wuv) tensor; returns
    ((H, W, 2) coords, (H, W) mask) tensors with gradients flowing into C_uv.
    """
    plan = texel_plan(iuv_target, atlas)
    if mask is None:
        mask = torch.ones(C_uv.shape[1:], dtype=C_uv.dtype)
    vals, out_mask = plan.gather(C_uv, mask)
    return vals.permute(1, 2, 0), out_mask


def mirror_iuv(iuv, atlas):
    """Left-right mirror: flip the grid, swap paired parts, mirror (u, v)."""
    _check_parts(iuv, atlas)
    part = iuv.part[:, ::-1]
    u, v = atlas.mirror_uv(part, iuv.u[:, ::-1], iuv.v[:, ::-1])
    return IUVMap(atlas.symmetry_pairs[part], u, v)


def exclusive_mirrored_mask(M_base, M_mirrored):
    check_binary(M_base, "M_base")
    check_binary(M_mirrored, "M_mirrored")
    return M_mirrored - M_base * M_mirrored


def combine_symmetry(C_base, M_base, C_mirrored, M_mirrored):
    """Merge base and mirrored UV coordinates; base wins where both exist.

    Returns ``(C_in, M_in)``. The mirrored mask restricted to texels the base
    does not cover is available from :func:`exclusive_mirrored_mask`.
    """
    cb = C_base.coords if isinstance(C_base, CoordField) else np.asarray(C_base, dtype=np.float64)
    cm = C_mirrored.coords if isinstance(C_mirrored, CoordField) else np.asarray(C_mirrored, dtype=np.float64)
    M_base = np.asarray(M_base, dtype=np.float64)
    M_mirrored = np.asarray(M_mirrored, dtype=np.float64)
    if not (cb.shape == cm.shape and cb.shape[:2] == M_base.shape == M_mirrored.shape):
        raise ValidationError("combine_symmetry inputs must share one resolution")
    M_excl = exclusive_mirrored_mask(M_base, M_mirrored)
    M_in = M_base + M_excl
    C_in = cb * M_base[..., None] + cm * M_excl[..., None]
    C_in[M_in == 0] = SENTINEL
    return CoordField(C_in, M_in), M_in


def bilinear_sample(source, coords, mask=None):
    """Zero-padded bilinear sampling at normalized coordinates.

    Torch form: ``source`` (N, C, H, W), ``coords`` (N, H', W', 2), optional
    ``mask`` (N, H', W'); returns (N, C, H', W') and is differentiable in both
    ``source`` and ``coords``. Numpy form: ``source`` HxWxC and ``coords`` a
    CoordField; returns an H'xW'xC array.
    """
    if not isinstance(source, torch.Tensor):
        arr = np.asarray(source, dtype=np.float64)
        squeeze = arr.ndim == 2
        if squeeze:
            arr = arr[..., None]
        src = torch.from_numpy(np.ascontiguousarray(np.moveaxis(arr, -1, 0)))[None]
        grid = torch.from_numpy(coords.coords)[None]
        m = torch.from_numpy(coords.mask)[None]
        out = bilinear_sample(src, grid, m)[0].numpy()
        out = np.moveaxis(out, 0, -1)
        return out[..., 0] if squeeze else out

    N, C, H, W = source.shape
    Ho, Wo = coords.shape[1:3]
    x = ((coords[..., 0] + 1.0) * W - 1.0) / 2.0
    y = ((coords[..., 1] + 1.0) * H - 1.0) / 2.0
    x0 = torch.floor(x).detach()
    y0 = torch.floor(y).detach()
    fx, fy = x - x0, y - y0
    x0, y0 = x0.long(), y0.long()
    valid = torch.ones_like(fx) if mask is None else mask.to(fx.dtype)
    flat = source.reshape(N, C, H * W)
    out = source.new_zeros(N, C, Ho * Wo)
    for dy, dx, w in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                      (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        xi, yi = x0 + dx, y0 + dy
        inb = ((xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)).to(fx.dtype) * valid
        idx = (yi.clamp(0, H - 1) * W + xi.clamp(0, W - 1)).reshape(N, 1, Ho * Wo)
        vals = torch.gather(flat, 2, idx.expand(N, C, Ho * Wo))
        out = out + vals * (w * inb).reshape(N, 1, Ho * Wo)
    return out.reshape(N, C, Ho, Wo)


def map_segmentation(S_uv, iuv_target, atlas):
    """Nearest-texel label lookup for every target pixel; background is 0."""
    if S_uv.labels.shape != atlas.uv_resolution:
        raise ValidationError("UV segmentation does not match the atlas resolution")
    _check_parts(iuv_target, atlas)
    part = iuv_target.part.ravel()
    pix = np.nonzero(part > 0)[0]
    k = part[pix]
    r0, c0, hh, ww = _chart_arrays(atlas)
    lr = np.clip(np.floor(iuv_target.v.ravel()[pix] * hh[k]), 0, hh[k] - 1).astype(np.int64)
    lc = np.clip(np.floor(iuv_target.u.ravel()[pix] * ww[k]), 0, ww[k] - 1).astype(np.int64)
    out = np.zeros(part.shape, dtype=np.int64)
    out[pix] = S_uv.labels[r0[k] + lr, c0[k] + lc]
    return out.reshape(iuv_target.shape)


class CoordInputs(NamedTuple):
    base: CoordField
    base_mask: np.ndarray
    mirrored: CoordField
    mirrored_mask: np.ndarray
    mirrored_exclusive: np.ndarray
    combined: CoordField
    combined_mask: np.ndarray


def coordinate_inputs(iuv_src, atlas, use_symmetry=True):
    """Base, mirrored and combined UV-space source coordinates for one pose."""
    grid = meshgrid(*iuv_src.shape)
    C_base, M_base = image_to_uv(iuv_src, atlas, grid)
    if use_symmetry:
        flipped = CoordField(grid.coords[:, ::-1], grid.mask)
        C_mir, M_mir = image_to_uv(mirror_iuv(iuv_src, atlas), atlas, flipped)
    else:
        C_mir = CoordField.invalid(*atlas.uv_resolution)
        M_mir = C_mir.mask.copy()
    C_in, M_in = combine_symmetry(C_base, M_base, C_mir, M_mir)
    return CoordInputs(C_base, M_base, C_mir, M_mir,
                       exclusive_mirrored_mask(M_base, M_mir), C_in, M_in)


# -- file formats -------------------------------------------------------------

ATLAS_MAGIC = b"PWSATLAS v1\n"
IUV_MAGIC = b"PWSIUV v1"


def save_atlas(atlas, path):
    buf = io.BytesIO()
    np.savez(buf, uv_resolution=np.array(atlas.uv_resolution), part_count=np.array(atlas.part_count),
             uv_to_part=atlas.uv_to_part, charts=atlas.chart_table(),
             symmetry_pairs=atlas.symmetry_pairs,
             mirror_rules=np.array([MIRROR_RULES.index(r) for r in atlas.intra_part_mirror]))
    with open(path, "wb") as fh:
        fh.write(ATLAS_MAGIC)
        fh.write(buf.getvalue())


def load_atlas(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(ATLAS_MAGIC):
        raise DecodeError(f"{path}: not a PWSATLAS v1 file")
    try:
        z = np.load(io.BytesIO(data[len(ATLAS_MAGIC):]), allow_pickle=False)
        charts = tuple(Chart(*map(int, row)) for row in z["charts"])
        rules = tuple(MIRROR_RULES[int(i)] for i in z["mirror_rules"])
        return MappingAtlas(tuple(z["uv_resolution"]), int(z["part_count"]), z["uv_to_part"],
                            charts, z["symmetry_pairs"], rules)
    except (KeyError, ValueError, IndexError, OSError) as exc:
        raise DecodeError(f"{path}: corrupt atlas payload ({exc})") from exc


def save_iuv(iuv, path):
    if iuv.part.max(initial=0) > 255:
        raise ValidationError("IUV files store part indices as 8-bit integers")
    H, W = iuv.shape
    u = np.round(iuv.u * 65535).astype("<u2")
    v = np.round(iuv.v * 65535).astype("<u2")
    with open(path, "wb") as fh:
        fh.write(IUV_MAGIC + f" {H} {W}\n".encode())
        fh.write(iuv.part.astype(np.uint8).tobytes())
        fh.write(u.tobytes())
        fh.write(v.tobytes())


def load_iuv(path):
    with open(path, "rb") as fh:
        data = fh.read()
    nl = data.find(b"\n")
    header = data[:nl].split() if nl > 0 else []
    if len(header) != 4 or b" ".join(header[:2]) != IUV_MAGIC:
        raise DecodeError(f"{path}: bad IUV header")
    try:
        H, W = int(header[2]), int(header[3])
    except ValueError:
        raise DecodeError(f"{path}: bad IUV dimensions") from None
    body = data[nl + 1:]
    if H <= 0 or W <= 0 or len(body) != 5 * H * W:
        raise DecodeError(f"{path}: IUV payload size does not match {H}x{W}")
    part = np.frombuffer(body[:H * W], dtype=np.uint8).reshape(H, W)
    u = np.frombuffer(body[H * W:3 * H * W], dtype="<u2").reshape(H, W) / 65535.0
    v = np.frombuffer(body[3 * H * W:], dtype="<u2").reshape(H, W) / 65535.0
    try:
        return IUVMap(part.astype(np.int64), u, v)
    except ValidationError as exc:
        raise DecodeError(f"{path}: {exc}") from exc
