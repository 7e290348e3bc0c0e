import numpy as np
import pytest
import torch

from conftest import random_iuv
from pwsynth.coordnet import (CoordNet, CoordNetConfig, complete_coords, coordnet_train_step, load_coordnet,
                              loss_coord, loss_rgb, make_coord_batch, make_optimizer, predict_target_coords,
                              save_coordnet)
from pwsynth.data_io import PairSample
from pwsynth.errors import ValidationError
from pwsynth.uvgeom import build_synthetic_atlas, coordinate_inputs, uv_to_image


def _tiny_batch(rng, atlas, n=1, size=8, dtype=torch.float64):
    samples = []
    for _ in range(n):
        a = random_iuv(rng, (size, size), atlas.part_count, fg=0.8)
        b = random_iuv(rng, (size, size), atlas.part_count, fg=0.8)
        samples.append(PairSample(rng.uniform(-1, 1, (size, size, 3)), rng.uniform(-1, 1, (size, size, 3)),
                                  a, b, b.foreground_mask()))
    return make_coord_batch(samples, atlas, dtype=dtype)


def test_config_validation():
    with pytest.raises(ValidationError):
        CoordNetConfig((16, 16), depth=1)
    assert CoordNetConfig((16, 16)).channels() == [32, 64, 128, 256, 256]


def test_forward_shape_and_bounds(fixture_atlas):
    cfg = CoordNetConfig(fixture_atlas.uv_resolution, base_channels=8)
    net = CoordNet(cfg)
    H, W = cfg.uv_resolution
    out = net(torch.rand(2, 2, H, W) * 2 - 1, torch.ones(2, 1, H, W))
    assert out.shape == (2, 2, H, W)
    assert out.abs().max() < 1
    with pytest.raises(ValidationError):
        net(torch.zeros(1, 2, 16, 16), torch.zeros(1, 1, 16, 16))


def test_known_coordinates_start_near_identity(fixture_atlas, fixture_pair):
    torch.manual_seed(0)
    net = CoordNet(CoordNetConfig(fixture_atlas.uv_resolution))
    src, _, _ = fixture_pair
    ci = coordinate_inputs(src.iuv, fixture_atlas)
    out = complete_coords(ci.combined, ci.combined_mask, net)
    ok = ci.combined_mask > 0
    # untrained head only perturbs the known coordinates
    assert np.abs(out.coords[ok] - ci.combined.coords[ok]).mean() < 0.5
    assert out.mask.all()


def test_loss_coord_fixed_point_and_value():
    C = torch.rand(1, 2, 4, 4) * 2 - 1
    Mb = torch.zeros(1, 1, 4, 4)
    Mb[..., :2] = 1
    Mm = torch.zeros(1, 1, 4, 4)
    Mm[..., 2:3] = 1
    assert loss_coord(C, C, Mb, C, Mm) == 0
    C2 = C + 0.1
    expect = (0.1 * 16 + 0.5 * 0.1 * 8) / 32
    assert abs(loss_coord(C2, C, Mb, C, Mm).item() - expect) < 1e-6
    with pytest.raises(ValidationError):
        loss_coord(C, C, Mb, C, Mb)


def test_loss_rgb_zero_on_exact_coordinates():
    # a source that maps to itself: identity pose pair, full visibility
    from pwsynth.data_io import fixture_atlas, make_fixture
    atlas = fixture_atlas()
    src, _, _ = make_fixture(0, 0.0)
    b = make_coord_batch([PairSample(src.image, src.image, src.iuv, src.iuv, src.fg_mask)], atlas,
                         dtype=torch.float64)
    # residual comes from the 2^-24 u, v lattice only
    assert loss_rgb(b.C_base, b, atlas).item() < 1e-6


def test_train_step_total_is_sum_and_loss_trends_down(rng):
    torch.manual_seed(0)
    atlas = build_synthetic_atlas(2, (16, 32))
    b = _tiny_batch(rng, atlas, size=16, dtype=torch.float32)
    cfg = CoordNetConfig(atlas.uv_resolution, base_channels=8, depth=2)
    net = CoordNet(cfg)
    opt = make_optimizer(net, cfg)
    hist = []
    for _ in range(60):
        s = coordnet_train_step(net, b, opt, atlas)
        assert np.float32(s.coord) + np.float32(s.rgb) == np.float32(s.total)
        hist.append(s.total)
    assert np.mean(hist[-10:]) < np.mean(hist[:10])


def test_optimizer_settings():
    cfg = CoordNetConfig((16, 16))
    opt = make_optimizer(CoordNet(cfg), cfg)
    g = opt.param_groups[0]
    assert g["lr"] == 1e-4 and g["betas"] == (0.5, 0.999)


def test_predict_without_model_is_geometry_pipeline(fixture_atlas, fixture_pair):
    src, trg, _ = fixture_pair
    ci = coordinate_inputs(src.iuv, fixture_atlas)
    ref = uv_to_image(ci.combined, trg.iuv, fixture_atlas)
    got = predict_target_coords(None, src.iuv, trg.iuv, fixture_atlas)
    assert np.array_equal(got.coords, ref.coords) and np.array_equal(got.mask, ref.mask)


def test_checkpoint_roundtrip(tmp_path, fixture_atlas):
    torch.manual_seed(0)
    net = CoordNet(CoordNetConfig(fixture_atlas.uv_resolution, base_channels=8))
    p = tmp_path / "c.pt"
    save_coordnet(p, net)
    back = load_coordnet(p)
    for a, b in zip(net.state_dict().values(), back.state_dict().values()):
        assert torch.equal(a, b)
    assert not any(p.requires_grad for p in back.parameters())
