"""Generator training losses and their pluggable pretrained-network backends."""
import math
from dataclasses import dataclass, field
from typing import Callable, List

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, NumericError

VGG_LAYERS = [1, 6, 11, 20, 29]
VGG_WEIGHTS = [1.0 / 32, 1.0 / 16, 1.0 / 8, 1.0 / 4, 1.0]
FACE_EPS = 1e-8
FACE_EPS_LITERAL = math.exp(-8)
R1_GAMMA = 1.0

_VGG19_LAYOUT = [1, 1, "M", 2, 2, "M", 4, 4, 4, 4, "M", 8, 8, 8, 8, "M", 8, 8, 8, 8, "M"]
_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


def vgg19_features(base_width=64, depth=None):
    """``nn.Sequential`` with torchvision's vgg19.features indexing, so ReLU
    outputs sit at indices 1, 6, 11, 20, 29 whatever the width."""
    layers, cin = [], 3
    for item in _VGG19_LAYOUT:
        if item == "M":
            layers.append(nn.MaxPool2d(2, 2))
        else:
            cout = item * base_width
            layers += [nn.Conv2d(cin, cout, 3, padding=1), nn.ReLU(inplace=False)]
            cin = cout
    if depth is not None:
        layers = layers[:depth]
    return nn.Sequential(*layers)


class FeatureExtractor(nn.Module):
    """Frozen network exposing activations at numbered layers."""

    def __init__(self, features, normalize_imagenet=True):
        super().__init__()
        self.features = features
        self.normalize_imagenet = normalize_imagenet
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    @property
    def layer_count(self):
        return len(self.features)

    def forward(self, x, layer_ids):
        x = (x + 1) / 2
        if self.normalize_imagenet:
            x = (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        want = set(layer_ids)
        out = {}
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in want:
                out[i] = x
            if len(out) == len(want):
                break
        return [out[i] for i in layer_ids]


def random_vgg(seed=64, base_width=8, depth=30):
    g = torch.Generator().manual_seed(seed)
    net = vgg19_features(base_width, depth)
    for m in net:
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels * 9
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=g) * math.sqrt(2.0 / fan_in))
                m.bias.zero_()
    return FeatureExtractor(net)


def load_backend(spec):
    """``random64`` or ``external:<path>`` (a vgg19.features state dict)."""
    if spec == "random64":
        return random_vgg()
    if spec.startswith("external:"):
        path = spec[len("external:"):]
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise ConfigError(f"cannot load perceptual backend {path}: {exc}") from exc
        state = {k.removeprefix("features."): v for k, v in state.items()}
        net = vgg19_features(64)
        net.load_state_dict(state, strict=False)
        return FeatureExtractor(net)
    raise ConfigError(f"unknown perceptual backend {spec!r}")


@dataclass
class PerceptualConfig:
    layer_ids: List[int] = field(default_factory=lambda: list(VGG_LAYERS))
    layer_weights: List[float] = field(default_factory=lambda: list(VGG_WEIGHTS))
    backend: str = "random64"

    def __post_init__(self):
        if len(self.layer_ids) != len(self.layer_weights):
            raise ConfigError("layer_ids and layer_weights must have equal length")


def _masked(x, m):
    return x * m


def l1_foreground(I_hat, I_trg, M_trg):
    return (_masked(I_hat, M_trg) - _masked(I_trg, M_trg)).abs().mean()


def perceptual(I_hat, I_trg, M_trg, cfg, backend):
    """Weighted feature L1; masking happens in pixel space before extraction."""
    for i in cfg.layer_ids:
        if not 0 <= i < backend.layer_count:
            raise ConfigError(f"perceptual layer {i} not available (backend has {backend.layer_count})")
    fa = backend(_masked(I_hat, M_trg), cfg.layer_ids)
    fb = backend(_masked(I_trg, M_trg), cfg.layer_ids)
    return sum(w * (a - b).abs().mean() for w, a, b in zip(cfg.layer_weights, fa, fb))


class CenterCropDetector:
    """Reports a face when a fixed box holds enough non-background signal."""

    def __init__(self, box=(0.0, 0.3, 0.3, 0.4), threshold=0.05, size=32):
        self.box = box  # top, left, height, width as fractions
        self.threshold = threshold
        self.size = size

    def __call__(self, image):
        """image (3, H, W) -> aligned crop (3, size, size) or None."""
        H, W = image.shape[-2:]
        t, l, h, w = self.box
        r0, c0 = int(round(t * H)), int(round(l * W))
        r1, c1 = max(r0 + 1, int(round((t + h) * H))), max(c0 + 1, int(round((l + w) * W)))
        crop = image[:, r0:r1, c0:c1]
        if float(crop.detach().abs().mean()) <= self.threshold:
            return None
        return F.interpolate(crop[None], size=(self.size, self.size), mode="bilinear",
                             align_corners=False)[0]


class RandomFaceEmbedder(nn.Module):
    def __init__(self, seed=11, dim=64):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.net = nn.Sequential(nn.Conv2d(3, 16, 3, 2, 1), nn.ReLU(), nn.Conv2d(16, 32, 3, 2, 1),
                                 nn.ReLU(), nn.AdaptiveAvgPool2d(2), nn.Flatten(), nn.Linear(128, dim))
        with torch.no_grad():
            for p in self.net.parameters():
                p.copy_(torch.randn(p.shape, generator=g) * 0.2)
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        return self.net(x.to(next(self.parameters()).dtype))


@dataclass
class FaceLossConfig:
    detector: Callable = field(default_factory=CenterCropDetector)
    embedder: Callable = field(default_factory=RandomFaceEmbedder)
    epsilon: float = FACE_EPS
    enabled: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError("face loss epsilon must be > 0")


def cosine_distance(a, b, eps=FACE_EPS):
    """1 - a.b / max(|a||b|, eps), clamped to [0, 2] against rounding."""
    denom = torch.clamp(a.norm(dim=-1) * b.norm(dim=-1), min=eps)
    return (1 - (a * b).sum(dim=-1) / denom).clamp(0.0, 2.0)


def face_identity(I_hat, I_trg, cfg):
    """Mean identity loss over samples where both images show a face; None
    (skip) when no sample qualifies or the loss is disabled."""
    if not cfg.enabled:
        return None
    pa, pb = [], []
    for x, y in zip(I_hat, I_trg):
        ca, cb = cfg.detector(x), cfg.detector(y)
        if ca is None or cb is None:
            continue
        pa.append(ca)
        pb.append(cb)
    if not pa:
        return None
    ea, eb = cfg.embedder(torch.stack(pa)), cfg.embedder(torch.stack(pb))
    return cosine_distance(ea, eb, cfg.epsilon).mean()


def adversarial_g(fake_logits):
    return F.softplus(-fake_logits).mean()


def adversarial_d(real_logits, fake_logits):
    return F.softplus(fake_logits).mean() + F.softplus(-real_logits).mean()


def r1_penalty(D, real, *cond, gamma=R1_GAMMA):
    """(gamma / 2) * E ||grad_x D(x)||^2 on real samples."""
    real = real.detach().requires_grad_(True)
    out = D(real, *cond)
    (grad,) = torch.autograd.grad(out.sum(), real, create_graph=True)
    if not torch.isfinite(grad).all():
        raise NumericError("non-finite discriminator gradient in R1 penalty")
    return 0.5 * gamma * grad.pow(2).flatten(1).sum(dim=1).mean()


def total_generator_loss(parts):
    """Unweighted sum; parts that were skipped (None) contribute nothing."""
    terms = [v for v in parts.values() if v is not None]
    if not terms:
        return torch.zeros(())
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total
