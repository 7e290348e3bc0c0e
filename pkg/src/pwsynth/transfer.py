"""Garment transfer: composite warped appearance features from several
sources under the target's mapped UV segmentation, then generate."""
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ValidationError
from .posegen import NOISE_MODES, generator_inputs
from .uvgeom import IUVMap, UVSegmentation, map_segmentation


@dataclass(eq=False)
class Source:
    image: np.ndarray  # H x W x 3 in [-1, 1]
    iuv: IUVMap


@dataclass(eq=False)
class TransferSpec:
    """``person`` keeps every label not claimed by a garment source."""
    person: Source
    garments: List = field(default_factory=list)  # (Source, label set) pairs
    target_iuv: Optional[IUVMap] = None
    segmentation: Optional[UVSegmentation] = None

    def __post_init__(self):
        if self.target_iuv is None or self.segmentation is None:
            raise ValidationError("a transfer needs a target IUV and a UV segmentation")
        space = set(int(k) for k in np.unique(self.segmentation.labels)) - {0}
        claimed = set()
        norm = []
        for src, labels in self.garments:
            labels = frozenset(self._label_id(l) for l in labels)
            if not labels:
                raise ValidationError("a garment source must claim at least one label")
            unknown = labels - space
            if unknown:
                raise ValidationError(f"garment labels {sorted(unknown)} are not in the segmentation")
            overlap = claimed & labels
            if overlap:
                raise ValidationError(f"labels {sorted(overlap)} claimed by more than one garment source")
            claimed |= labels
            norm.append((src, labels))
        self.garments = norm
        self.person_labels = frozenset(space - claimed)
        shapes = {s.image.shape for s, _ in self.garments} | {self.person.image.shape}
        if len(shapes) != 1:
            raise ValidationError("all transfer sources must share one resolution")

    def _label_id(self, label):
        if isinstance(label, str):
            ids = [k for k, v in self.segmentation.names.items() if v == label]
            if not ids:
                raise ValidationError(f"unknown garment label {label!r}")
            return int(ids[0])
        return int(label)

    def sources(self):
        """(Source, label set) for every source; the person comes first."""
        return [(self.person, self.person_labels)] + list(self.garments)


def label_masks(labels, label_sets, size):
    """One (1, 1, h, w) selection mask per source at a pyramid level, from
    the nearest-neighbour resized label map."""
    lab = torch.from_numpy(labels.astype(np.float64))[None, None]
    lab = F.interpolate(lab, size=size, mode="nearest")[0, 0].long().numpy()
    return [torch.from_numpy(np.isin(lab, sorted(s)).astype(np.float32))[None, None] for s in label_sets]


def transfer_features(spec, generator, atlas, coordnet=None):
    """Warped per-level features of the composite (before fusion), the target
    label map, and the target generator inputs."""
    cfg = generator.cfg
    labels = map_segmentation(spec.segmentation, spec.target_iuv, atlas)
    pyramids, label_sets, target_inputs = [], [], None
    for src, labset in spec.sources():
        inp = generator_inputs(src.image, src.iuv, spec.target_iuv, atlas, cfg, coordnet=coordnet)
        if target_inputs is None:
            target_inputs = inp
        with torch.no_grad():
            pyr = generator.warp(generator.encode_source(inp.appearance[None]), inp.coords[None],
                                 inp.coord_mask[None])
        pyramids.append(pyr)
        label_sets.append(labset)
    composite = []
    for level in range(len(pyramids[0])):
        feats = [p[level] for p in pyramids]
        masks = label_masks(labels, label_sets, feats[0].shape[-2:])
        out = feats[0]  # person features also fill the background
        for f, m in zip(feats[1:], masks[1:]):
            out = torch.where(m.bool(), f, out)
        composite.append(out)
    return composite, labels, target_inputs


def tryon(spec, generator, atlas, coordnet=None, noise_mode="zero", rng=None):
    """Full generation from the composited features; returns (1, 3, H, W)."""
    if noise_mode not in NOISE_MODES:
        raise ValidationError(f"noise mode must be one of {NOISE_MODES}")
    generator.eval()
    composite, _, inp = transfer_features(spec, generator, atlas, coordnet)
    with torch.no_grad():
        fused = generator.fuse(composite, inp.M_Ptrg[None])
        return generator.synthesize(generator.encode_pose(inp.pose[None]), fused, noise_mode, rng)
