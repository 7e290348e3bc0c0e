"""Paired-sample ingestion, synthetic fixtures and image/manifest files.

The synthetic figure is a five-part cut-out figure (two arms, two legs, torso)
whose parts are axis-aligned rectangles. Every part rectangle has exactly the
size of its atlas chart, so each pixel lands on one texel centre and the
correspondence between any two poses is known in closed form.
"""
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DecodeError, ValidationError
from .uvgeom import (CoordField, IUVMap, build_synthetic_atlas, check_binary,
                     load_iuv, pixel_to_norm, save_atlas, save_iuv, SENTINEL)

FIXTURE_SIZE = 64
FIXTURE_UV = (48, 36)
LEFT_ARM, RIGHT_ARM, LEFT_LEG, RIGHT_LEG, TORSO = 1, 2, 3, 4, 5
# Row/col of each part's top-left corner in the rest pose (index = part - 1).
REST_POSE = np.array([[12, 13], [12, 39], [36, 20], [36, 32], [12, 26]])
Z_ORDER = (LEFT_LEG, RIGHT_LEG, LEFT_ARM, RIGHT_ARM, TORSO)
# garment labels for the fixture body: arms + torso are "top", legs "bottom"
FIXTURE_PART_LABELS = {LEFT_ARM: 1, RIGHT_ARM: 1, TORSO: 1, LEFT_LEG: 2, RIGHT_LEG: 2}


def fixture_atlas():
    return build_synthetic_atlas(5, FIXTURE_UV)


@dataclass(eq=False)
class SyntheticScene:
    image: np.ndarray
    iuv: IUVMap
    fg_mask: np.ndarray
    pose: np.ndarray
    texture: np.ndarray = field(repr=False)


def _quantize(x):
    # PNG-exact values: k/255 mapped to [-1, 1]
    return np.round((np.clip(x, -1, 1) + 1) * 127.5) / 127.5 - 1


def fixture_texture(seed, atlas=None):
    """UV texture (Huv, Wuv, 3) that is left/right mirror-consistent.

    Paired parts satisfy ``T_right[:, ::-1] == T_left``; the torso is itself
    mirror-symmetric.
    """
    atlas = atlas or fixture_atlas()
    rng = np.random.default_rng([seed, 7])
    tex = np.zeros(atlas.uv_resolution + (3,))

    def chart_texture(h, w):
        base = rng.uniform(-0.7, 0.7, size=3)
        freq = rng.uniform(1.5, 4.0)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.15, 0.3, size=3)
        rows = np.arange(h)[:, None, None] / h
        cols = np.arange(w)[None, :, None] / w
        t = base + amp * np.sin(2 * np.pi * freq * rows + phase) + 0.25 * (cols - 0.5)
        return _quantize(t)

    done = set()
    for k in range(1, atlas.part_count + 1):
        if k in done:
            continue
        ch = atlas.part_uv_charts[k - 1]
        t = chart_texture(ch.height, ch.width)
        pair = int(atlas.symmetry_pairs[k])
        if pair == k:
            half = (ch.width + 1) // 2
            t[:, ch.width - half:] = t[:, :half][:, ::-1]
        tex[ch.row:ch.row + ch.height, ch.col:ch.col + ch.width] = t
        if pair != k:
            cp = atlas.part_uv_charts[pair - 1]
            tex[cp.row:cp.row + cp.height, cp.col:cp.col + cp.width] = t[:, ::-1]
        done.update((k, pair))
    return tex


def render_scene(pose, texture, atlas=None, size=FIXTURE_SIZE):
    """Rasterize the figure. ``pose`` holds per-part (row, col) offsets from rest."""
    atlas = atlas or fixture_atlas()
    pose = np.asarray(pose, dtype=np.int64).reshape(atlas.part_count, 2)
    image = np.full((size, size, 3), _quantize(0.0))  # mid grey, on the 8-bit grid
    part = np.zeros((size, size), dtype=np.int64)
    u = np.zeros((size, size))
    v = np.zeros((size, size))
    for k in Z_ORDER:
        ch = atlas.part_uv_charts[k - 1]
        r0, c0 = REST_POSE[k - 1] + pose[k - 1]
        ii, jj = np.mgrid[0:ch.height, 0:ch.width]
        rr, cc = r0 + ii, c0 + jj
        ok = (rr >= 0) & (rr < size) & (cc >= 0) & (cc < size)
        rr, cc, ii, jj = rr[ok], cc[ok], ii[ok], jj[ok]
        part[rr, cc] = k
        u[rr, cc] = (jj + 0.5) / ch.width
        v[rr, cc] = (ii + 0.5) / ch.height
        image[rr, cc] = texture[ch.row + ii, ch.col + jj]
    iuv = IUVMap(part, u, v)
    return SyntheticScene(image, iuv, iuv.foreground_mask(), pose, texture)


def analytic_correspondence(src, trg, atlas=None):
    """Exact target -> source pixel correspondence (base visibility only)."""
    atlas = atlas or fixture_atlas()
    H, W = trg.iuv.shape
    coords = np.full((H, W, 2), SENTINEL)
    mask = np.zeros((H, W))
    for k in range(1, atlas.part_count + 1):
        ch = atlas.part_uv_charts[k - 1]
        rr, cc = np.nonzero(trg.iuv.part == k)
        ii = np.floor(trg.iuv.v[rr, cc] * ch.height).astype(np.int64)
        jj = np.floor(trg.iuv.u[rr, cc] * ch.width).astype(np.int64)
        sr, sc = REST_POSE[k - 1] + src.pose[k - 1]
        sr, sc = sr + ii, sc + jj
        inside = (sr >= 0) & (sr < H) & (sc >= 0) & (sc < W)
        vis = np.zeros_like(inside)
        vis[inside] = src.iuv.part[sr[inside], sc[inside]] == k
        coords[rr[vis], cc[vis], 0] = pixel_to_norm(sc[vis], W)
        coords[rr[vis], cc[vis], 1] = pixel_to_norm(sr[vis], H)
        mask[rr[vis], cc[vis]] = 1.0
    return CoordField(coords, mask)


def make_fixture(seed, difficulty=0.0, atlas=None):
    """Deterministic (source, target, analytic T_coord) triple.

    ``difficulty`` in [0, 1] is the fraction of the source's left arm slid
    under the torso. The target pose has no self-occlusion.
    """
    if not 0.0 <= difficulty <= 1.0:
        raise ValidationError("difficulty must lie in [0, 1]")
    atlas = atlas or fixture_atlas()
    rng = np.random.default_rng([seed, 11])
    tex = fixture_texture(seed, atlas)
    arm_w = atlas.part_uv_charts[LEFT_ARM - 1].width

    src_pose = np.zeros((5, 2), dtype=np.int64)
    src_pose[[LEFT_ARM - 1, RIGHT_ARM - 1], 0] = rng.integers(-3, 1, size=2)
    src_pose[LEFT_ARM - 1, 1] = 1 + int(round(difficulty * arm_w)) if difficulty > 0 else 0
    src_pose[RIGHT_ARM - 1, 1] = rng.integers(-1, 3)
    src_pose[[LEFT_LEG - 1, RIGHT_LEG - 1], 0] = rng.integers(0, 4, size=2)

    trg_pose = np.zeros((5, 2), dtype=np.int64)
    trg_pose[[LEFT_ARM - 1, RIGHT_ARM - 1], 0] = rng.integers(-4, 1, size=2)
    trg_pose[LEFT_ARM - 1, 1] = rng.integers(-3, 2)
    trg_pose[RIGHT_ARM - 1, 1] = rng.integers(-1, 4)
    trg_pose[[LEFT_LEG - 1, RIGHT_LEG - 1], 0] = rng.integers(0, 5, size=2)
    trg_pose[LEFT_LEG - 1, 1] = rng.integers(-3, 1)
    trg_pose[RIGHT_LEG - 1, 1] = rng.integers(0, 4)
    trg_pose[TORSO - 1, 0] = rng.integers(-2, 1)

    src = render_scene(src_pose, tex, atlas)
    trg = render_scene(trg_pose, tex, atlas)
    return src, trg, analytic_correspondence(src, trg, atlas)


# -- images, masks and manifests ------------------------------------------------

def save_image(image, path):
    """Save an HxWx3 image in [-1, 1] as 8-bit PNG."""
    arr = np.round((np.clip(image, -1, 1) + 1) * 127.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DecodeError(f"{path}: cannot decode image ({exc})") from exc
    return arr / 127.5 - 1.0


def save_mask(mask, path):
    check_binary(mask, "mask")
    Image.fromarray((np.asarray(mask) * 255).astype(np.uint8)).save(path)


def load_mask(path):
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise DecodeError(f"{path}: cannot decode mask ({exc})") from exc
    if not np.isin(arr, (0, 255)).all():
        raise DecodeError(f"{path}: mask is not binary")
    return arr / 255.0


@dataclass(frozen=True)
class PairRecord:
    src_image: str
    trg_image: str
    src_iuv: str
    trg_iuv: str
    trg_fg_mask: str
    split: str = "train"


@dataclass(eq=False)
class PairSample:
    I_src: np.ndarray
    I_trg: np.ndarray
    iuv_src: IUVMap
    iuv_trg: IUVMap
    M_trg: np.ndarray

    def __post_init__(self):
        shape = self.iuv_trg.shape
        for name, arr in (("I_src", self.I_src), ("I_trg", self.I_trg)):
            if arr.shape != shape + (3,):
                raise ValidationError(f"{name} has shape {arr.shape}, expected {shape + (3,)}")
            if np.abs(arr).max() > 1.0:
                raise ValidationError(f"{name} must lie in [-1, 1]")
        if self.iuv_src.shape != shape or self.M_trg.shape != shape:
            raise ValidationError("pair resolution mismatch")
        check_binary(self.M_trg, "M_trg")

    @property
    def M_src(self):
        return self.iuv_src.foreground_mask()

    @classmethod
    def from_scenes(cls, src, trg):
        return cls(src.image, trg.image, src.iuv, trg.iuv, trg.fg_mask)


def read_manifest(path):
    """One record per line: five tab-separated paths then a split tag.

    Relative paths resolve against the manifest's directory; ``#`` starts a
    comment line.
    """
    base = Path(path).parent
    records = []
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            cols = line.split("\t")
            if len(cols) != 6:
                raise DecodeError(f"{path}:{n}: expected 6 tab-separated fields, got {len(cols)}")
            paths = [c if os.path.isabs(c) else str(base / c) for c in cols[:5]]
            records.append(PairRecord(*paths, split=cols[5]))
    return records


def write_manifest(records, path):
    with open(path, "w") as fh:
        fh.write("# src_image\ttrg_image\tsrc_iuv\ttrg_iuv\ttrg_fg_mask\tsplit\n")
        for r in records:
            fh.write("\t".join([r.src_image, r.trg_image, r.src_iuv, r.trg_iuv,
                                r.trg_fg_mask, r.split]) + "\n")


def load_pair(record, resolution=None):
    for p in (record.src_image, record.trg_image, record.src_iuv, record.trg_iuv, record.trg_fg_mask):
        if not os.path.exists(p):
            raise DecodeError(f"{p}: file not found")
    sample = PairSample(load_image(record.src_image), load_image(record.trg_image),
                        load_iuv(record.src_iuv), load_iuv(record.trg_iuv),
                        load_mask(record.trg_fg_mask))
    if resolution is not None and sample.iuv_trg.shape != tuple(resolution):
        raise ValidationError(f"pair resolution {sample.iuv_trg.shape} != configured {tuple(resolution)}")
    return sample


def write_fixture_dataset(out_dir, count, seed=0, difficulty=0.5, test_fraction=0.25):
    """Write atlas, fixture pairs and ``manifest.tsv`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    atlas = fixture_atlas()
    save_atlas(atlas, out / "atlas.pws")
    records = []
    n_test = int(round(count * test_fraction))
    for i in range(count):
        src, trg, _ = make_fixture(seed + i, difficulty, atlas)
        stem = f"pair{i:04d}"
        names = [f"{stem}_src.png", f"{stem}_trg.png", f"{stem}_src.iuv",
                 f"{stem}_trg.iuv", f"{stem}_trg_mask.png"]
        save_image(src.image, out / names[0])
        save_image(trg.image, out / names[1])
        save_iuv(src.iuv, out / names[2])
        save_iuv(trg.iuv, out / names[3])
        save_mask(trg.fg_mask, out / names[4])
        records.append(PairRecord(*names, split="test" if i >= count - n_test else "train"))
    write_manifest(records, out / "manifest.tsv")
    return out / "manifest.tsv"
