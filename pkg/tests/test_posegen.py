import numpy as np
import pytest
import torch

from pwsynth.errors import ConfigError, ValidationError
from pwsynth.posegen import (VARIANTS, AffineParams, Discriminator, Generator, GeneratorConfig, GeneratorInputs,
                             StyleConv, downsample_coords, generate, generator_inputs, load_generator,
                             nonspatial_modulate_conv, pose_tensor, save_generator, spatial_modulate_conv)
from pwsynth.uvgeom import IUVMap

SMALL = dict(output_resolution=32, levels=3, pose_channels=32, block_channels=(32, 16, 16),
             app_channels=(16, 16, 8), fpn_channels=8, apn_hidden=8, disc_channels=(16, 16, 16))


def _inputs(fixture_pair, fixture_atlas, cfg):
    src, trg, T = fixture_pair
    return GeneratorInputs.stack([generator_inputs(src.image, src.iuv, trg.iuv, fixture_atlas, cfg,
                                                   T_coord=T)])


def test_config_validation():
    with pytest.raises(ConfigError):
        GeneratorConfig(output_resolution=60)
    with pytest.raises(ConfigError):
        GeneratorConfig(modulation_mode="bogus")
    with pytest.raises(ConfigError):
        GeneratorConfig(block_channels=(8, 8))
    cfg = GeneratorConfig()
    assert cfg.level_resolutions == [8, 16, 32, 64]
    assert cfg.base_resolution == 4


def test_paper_scale_config_expressible():
    cfg = GeneratorConfig(output_resolution=512, levels=5, pose_channels=512,
                          block_channels=(512,) * 5, app_channels=(256,) * 5, disc_channels=(512,) * 5)
    assert cfg.base_resolution == 16


def test_all_variants_constructible():
    for name, (source, mode) in VARIANTS.items():
        cfg = GeneratorConfig.variant(name, **SMALL)
        assert cfg.appearance_source == source
        assert cfg.modulation_mode == ("spatial" if name in "BDF" else "nonspatial")
        Generator(cfg)


def test_pose_encoder_shape_determinism_and_sensitivity(fixture_pair):
    torch.manual_seed(0)
    cfg = GeneratorConfig()
    G = Generator(cfg)
    _, trg, _ = fixture_pair
    p = pose_tensor(trg.iuv, cfg.part_count)[None]
    a, b = G.encode_pose(p), G.encode_pose(p)
    assert a.shape == (1, 128, 4, 4) and torch.equal(a, b)
    bg = pose_tensor(IUVMap.background(64, 64), cfg.part_count)[None]
    assert (G.encode_pose(bg) - a).norm() > 0


def test_source_encoder_levels():
    torch.manual_seed(0)
    G = Generator(GeneratorConfig())
    feats = G.encode_source(torch.rand(1, 3, 64, 64) * 2 - 1)
    assert [f.shape[-1] for f in feats] == [8, 16, 32, 64]
    assert [f.shape[1] for f in feats] == list(G.cfg.app_channels)


def test_affine_params_start_neutral():
    ap = AffineParams(8, 5, 4)
    a, b = ap(torch.randn(2, 8, 6, 6))
    assert torch.equal(a, torch.ones_like(a)) and torch.equal(b, torch.zeros_like(b))


def test_normalization_statistics():
    torch.manual_seed(0)
    block = StyleConv(6, 10, 8, "spatial", 0).double()
    for _ in range(20):
        x = torch.randn(3, 6, 8, 8, dtype=torch.float64) * 5 + 2
        a = torch.rand(3, 6, 8, 8, dtype=torch.float64) * 3
        b = torch.randn(3, 6, 8, 8, dtype=torch.float64)
        y = block.normalized(x, a, b)
        assert y.mean(dim=(1, 2, 3)).abs().max() < 1e-5
        assert (y.std(dim=(1, 2, 3), unbiased=False) - 1).abs().max() < 1e-4


def test_neutral_modulation_equals_unmodulated():
    torch.manual_seed(0)
    block = StyleConv(4, 6, 8, "spatial", 3)
    with torch.no_grad():
        block.noise_strength.fill_(0.3)
        block.bias.normal_()
    x = torch.randn(2, 4, 8, 8)
    for mode in ("zero", "fixed"):
        got = spatial_modulate_conv(x, torch.ones_like(x), torch.zeros_like(x), block, mode)
        assert torch.equal(got, block.unmodulated(x, mode))
    g1, g2 = torch.Generator().manual_seed(5), torch.Generator().manual_seed(5)
    got = spatial_modulate_conv(x, torch.ones_like(x), torch.zeros_like(x), block, "random", g1)
    assert torch.equal(got, block.unmodulated(x, "random", g2))


def test_nonspatial_unit_style_matches_demodulated_conv():
    torch.manual_seed(0)
    block = StyleConv(4, 6, 8, "nonspatial", 0).double()
    x = torch.randn(2, 4, 8, 8, dtype=torch.float64)
    w = block.weight
    wd = w * torch.rsqrt(w.pow(2).sum(dim=(1, 2, 3), keepdim=True) + 1e-8)
    ref = block.finish(torch.nn.functional.conv2d(x, wd, padding=1), "zero")
    got = nonspatial_modulate_conv(x, torch.ones(2, 4, dtype=torch.float64), block)
    assert torch.allclose(got, ref, atol=1e-12)


def test_noise_modes():
    block = StyleConv(2, 2, 4, "spatial", 7)
    x = torch.zeros(1, 2, 4, 4)
    assert not block.noise(x, "zero").any()
    assert torch.equal(block.noise(x, "fixed"), block.noise(x, "fixed"))
    with pytest.raises(ValidationError):
        block.noise(x, "loud")


def test_warp_equivariance_horizontal_shift():
    # coordinates shifted by s pixels read the source shifted by s
    torch.manual_seed(0)
    G = Generator(GeneratorConfig(**SMALL))
    feats = [torch.randn(1, 4, r, r) for r in (8, 16, 32)]
    s = 4
    n = 32
    xs = (2 * (torch.arange(n) + s) + 1) / n - 1
    ys = (2 * torch.arange(n) + 1) / n - 1
    coords = torch.stack(torch.meshgrid(xs, ys, indexing="xy"), dim=-1)[None]
    mask = torch.ones(1, n, n)
    warped = G.warp(feats, coords, mask)
    fine = warped[-1]
    assert torch.allclose(fine[..., :, : n - s], feats[-1][..., :, s:], atol=1e-6)
    mid = warped[1]
    assert torch.allclose(mid[..., :, : 16 - 2], feats[1][..., :, 2:], atol=1e-6)


def test_downsample_coords_masks():
    coords = torch.zeros(1, 4, 4, 2)
    coords[0, :2, :2] = 0.5
    mask = torch.zeros(1, 4, 4)
    mask[0, 0, 0] = 1
    c, m = downsample_coords(coords, mask, 2)
    assert m.tolist() == [[[1.0, 0.0], [0.0, 0.0]]]
    assert torch.allclose(c[0, 0, 0], torch.tensor([0.5, 0.5]))
    assert (c[0, 1, 1] == -2).all()


def test_generator_forward_variants(fixture_pair, fixture_atlas):
    from pwsynth.coordnet import CoordNet, CoordNetConfig
    torch.manual_seed(0)
    net = CoordNet(CoordNetConfig(fixture_atlas.uv_resolution, base_channels=8))
    src, trg, T = fixture_pair
    for name in VARIANTS:
        cfg = GeneratorConfig.variant(name)
        G, D = Generator(cfg), Discriminator(cfg)
        inp = GeneratorInputs.stack([generator_inputs(src.image, src.iuv, trg.iuv, fixture_atlas, cfg,
                                                      coordnet=net)])
        out = generate(G, inp)
        assert out.shape == (1, 3, 64, 64) and out.abs().max() <= 1
        assert torch.equal(out, generate(G, inp))
        assert D(out, inp.pose3).shape == (1,)


def test_complete_uv_requires_coordnet(fixture_pair, fixture_atlas):
    src, trg, _ = fixture_pair
    with pytest.raises(ConfigError):
        generator_inputs(src.image, src.iuv, trg.iuv, fixture_atlas, GeneratorConfig.variant("D"))


def test_discriminator_r1_path_and_pose_sensitivity(fixture_pair, fixture_atlas):
    torch.manual_seed(0)
    cfg = GeneratorConfig()
    D = Discriminator(cfg)
    inp = _inputs(fixture_pair, fixture_atlas, cfg)
    img = torch.rand(1, 3, 64, 64, requires_grad=True)
    (g,) = torch.autograd.grad(D(img, inp.pose3).sum(), img, create_graph=True)
    assert g.requires_grad
    assert D(img, inp.pose3).item() != D(img, torch.zeros_like(inp.pose3)).item()


def test_generator_checkpoint_roundtrip(tmp_path, fixture_pair, fixture_atlas):
    torch.manual_seed(0)
    cfg = GeneratorConfig()
    G, D = Generator(cfg), Discriminator(cfg)
    p = tmp_path / "g.pt"
    save_generator(p, G, D)
    G2, D2 = load_generator(p)
    inp = _inputs(fixture_pair, fixture_atlas, cfg)
    assert torch.equal(generate(G, inp, "fixed"), generate(G2, inp, "fixed"))
    assert G2.cfg == cfg


def test_pose_tensor_channels():
    iuv = IUVMap(np.array([[0, 2]]), np.array([[0, 0.5]]), np.array([[0, 0.25]]))
    p = pose_tensor(iuv, 3)
    assert p.shape == (6, 1, 2)
    assert p[:4, 0, 1].tolist() == [0, 0, 1, 0]
    assert p[4:, 0, 1].tolist() == [0.5, 0.25]
