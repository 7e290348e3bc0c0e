import math

import numpy as np
import pytest
import torch
import torch.nn as nn

import oracles
from pwsynth.errors import ConfigError
from pwsynth.losses import (FACE_EPS, FACE_EPS_LITERAL, VGG_LAYERS, VGG_WEIGHTS, CenterCropDetector,
                            FaceLossConfig, FeatureExtractor, PerceptualConfig, adversarial_d, adversarial_g,
                            cosine_distance, face_identity, l1_foreground, load_backend, perceptual,
                            r1_penalty, random_vgg, total_generator_loss, vgg19_features)
from pwsynth.posegen import Discriminator, GeneratorConfig

TINY_D = GeneratorConfig(output_resolution=8, levels=1, block_channels=(8,), app_channels=(8,),
                         disc_channels=(8,), pose_channels=8)


def local_backend():
    """Two 3x3 convs: a receptive field of 5 pixels."""
    torch.manual_seed(3)
    net = nn.Sequential(nn.Conv2d(3, 4, 3, padding=1), nn.ReLU(), nn.Conv2d(4, 4, 3, padding=1), nn.ReLU())
    return FeatureExtractor(net.double(), normalize_imagenet=False)


def _fd_check(loss_fn, x, tol=1e-3):
    xt = torch.from_numpy(x.copy()).requires_grad_(True)
    (g,) = torch.autograd.grad(loss_fn(xt), xt)
    num = oracles.central_difference(lambda a: loss_fn(torch.from_numpy(a)).item(), x.copy())
    err = np.linalg.norm(g.numpy() - num) / max(np.linalg.norm(num), 1e-12)
    assert err < tol, err


def test_defaults():
    cfg = PerceptualConfig()
    assert cfg.layer_ids == [1, 6, 11, 20, 29] == VGG_LAYERS
    assert cfg.layer_weights == [1 / 32, 1 / 16, 1 / 8, 1 / 4, 1.0] == VGG_WEIGHTS
    assert FACE_EPS == 1e-8 and FACE_EPS_LITERAL == math.exp(-8)
    with pytest.raises(ConfigError):
        PerceptualConfig(layer_ids=[1, 6], layer_weights=[1.0])
    with pytest.raises(ConfigError):
        FaceLossConfig(epsilon=0)


def test_vgg_layout_relu_indices():
    net = vgg19_features(1)
    for i in VGG_LAYERS:
        assert isinstance(net[i], nn.ReLU)
    assert len(random_vgg().features) == 30


def test_backend_plugin(tmp_path):
    assert isinstance(load_backend("random64"), FeatureExtractor)
    state = vgg19_features(64).state_dict()
    p = tmp_path / "vgg.pt"
    torch.save(state, p)
    ext = load_backend(f"external:{p}")
    assert torch.equal(ext.features[0].weight, state["0.weight"])
    with pytest.raises(ConfigError):
        load_backend("imagenet")
    with pytest.raises(ConfigError):
        load_backend(f"external:{tmp_path / 'missing.pt'}")


def test_losses_zero_at_fixed_point():
    torch.manual_seed(0)
    x = torch.rand(2, 3, 32, 32) * 2 - 1
    m = (torch.rand(2, 1, 32, 32) > 0.3).float()
    assert l1_foreground(x, x, m) == 0
    assert perceptual(x, x, m, PerceptualConfig(), random_vgg()) == 0
    # outside the mask nothing counts
    y = x + (1 - m) * 0.7
    assert l1_foreground(y, x, m) == 0


def test_l1_value():
    a = torch.zeros(1, 3, 2, 2)
    b = torch.ones(1, 3, 2, 2)
    m = torch.tensor([[[[1.0, 0.0], [0.0, 0.0]]]])
    assert l1_foreground(a, b, m).item() == pytest.approx(3 / 12)


def test_perceptual_invariant_outside_mask_with_local_backend():
    torch.manual_seed(0)
    x = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    t = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    m = torch.zeros(1, 1, 16, 16, dtype=torch.float64)
    m[..., 4:12, 4:12] = 1
    cfg = PerceptualConfig(layer_ids=[1, 3], layer_weights=[0.5, 1.0])
    be = local_backend()
    base = perceptual(x, t, m, cfg, be)
    x2 = x + (1 - m) * torch.rand_like(x)
    assert perceptual(x2, t, m, cfg, be).item() == base.item()


def test_perceptual_rejects_unknown_layer():
    with pytest.raises(ConfigError):
        perceptual(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 8), torch.ones(1, 1, 8, 8),
                   PerceptualConfig(layer_ids=[40], layer_weights=[1.0]), local_backend())


def test_face_range_and_skip():
    torch.manual_seed(0)
    cfg = FaceLossConfig()
    blank = torch.zeros(2, 3, 32, 32)
    assert face_identity(blank, blank, cfg) is None
    assert face_identity(torch.rand(2, 3, 32, 32), blank, cfg) is None
    for _ in range(20):
        a = torch.rand(2, 3, 32, 32) * 2 - 1
        b = torch.rand(2, 3, 32, 32) * 2 - 1
        v = face_identity(a, b, cfg).item()
        assert 0 <= v <= 2
    assert face_identity(a, a, cfg).item() == pytest.approx(0, abs=1e-6)
    assert face_identity(a, a, FaceLossConfig(enabled=False)) is None


def test_cosine_distance_bounds():
    a = torch.tensor([[1.0, 0.0], [0.0, 0.0]])
    b = torch.tensor([[-1.0, 0.0], [1.0, 0.0]])
    d = cosine_distance(a, b)
    assert d.tolist() == [2.0, 1.0]


def test_total_skips_none():
    parts = {"l1": torch.tensor(1.0), "vgg": torch.tensor(2.0), "face": None, "adv": torch.tensor(3.0)}
    assert total_generator_loss(parts).item() == 6.0
    parts["face"] = torch.tensor(0.5)
    assert total_generator_loss(parts).item() == 6.5


def test_adversarial_values():
    z = torch.zeros(4)
    assert adversarial_g(z).item() == pytest.approx(math.log(2))
    assert adversarial_d(z, z).item() == pytest.approx(2 * math.log(2))
    assert adversarial_d(torch.full((4,), 20.0), torch.full((4,), -20.0)).item() < 1e-8


def test_r1_matches_manual_gradient_norm():
    torch.manual_seed(0)
    D = Discriminator(TINY_D).double()
    x = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    pose = torch.rand(2, 3, 8, 8, dtype=torch.float64)
    xr = x.clone().requires_grad_(True)
    (g,) = torch.autograd.grad(D(xr, pose).sum(), xr)
    expect = 0.5 * 10.0 * g.pow(2).sum(dim=(1, 2, 3)).mean()
    assert r1_penalty(D, x, pose, gamma=10.0).item() == pytest.approx(expect.item(), rel=1e-12)


# -- finite-difference checks w.r.t. the generated image -------------------------------------

@pytest.fixture
def images():
    rng = np.random.default_rng(0)
    return (rng.uniform(-1, 1, (1, 3, 8, 8)), torch.from_numpy(rng.uniform(-1, 1, (1, 3, 8, 8))),
            torch.from_numpy((rng.random((1, 1, 8, 8)) > 0.3).astype(np.float64)))


def test_grad_l1(images):
    x, t, m = images
    _fd_check(lambda a: l1_foreground(a, t, m), x)


def test_grad_perceptual(images):
    x, t, m = images
    cfg = PerceptualConfig(layer_ids=[1, 3], layer_weights=[0.5, 1.0])
    be = local_backend()
    _fd_check(lambda a: perceptual(a, t, m, cfg, be), x)


def test_grad_face(images):
    x, t, _ = images
    cfg = FaceLossConfig(detector=CenterCropDetector(threshold=0.0, size=16))
    cfg.embedder.double()
    _fd_check(lambda a: face_identity(a, t, cfg), x)


def test_grad_adversarial(images):
    x, _, _ = images
    torch.manual_seed(0)
    D = Discriminator(TINY_D).double()
    pose = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    _fd_check(lambda a: adversarial_g(D(a, pose)), x)
