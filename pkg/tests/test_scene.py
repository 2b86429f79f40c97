import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from distill3d import scene as S
from distill3d.errors import ConfigError


def test_pose_center_and_extrinsics():
    p = S.CameraPose(0.0, 0.0, 2.5)
    np.testing.assert_allclose(p.center(), [2.5, 0, 0], atol=1e-15)
    R, t = p.world_to_camera()
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)
    np.testing.assert_allclose(R @ p.center() + t, 0, atol=1e-12)
    # the origin sits straight ahead on -z
    np.testing.assert_allclose(t, [0, 0, -2.5], atol=1e-12)


@pytest.mark.parametrize("kw", [dict(width=0), dict(fov=0.0), dict(fov=180.0), dict(distance=0.0),
                                dict(elevation=90.0)])
def test_pose_validation(kw):
    base = dict(elevation=0.0, azimuth=0.0, distance=2.5)
    base.update(kw)
    with pytest.raises(ConfigError):
        S.CameraPose(**base)


def test_phase_ranges_match_documented_settings():
    r1, r2 = S.PHASE1_RANGES, S.PHASE2_RANGES
    assert (r1.elevation, r1.azimuth, r1.distance, r1.fov) == ((-45, 45), (-180, 180), (2.5, 2.5),
                                                               (40, 40))
    assert (r2.elevation, r2.azimuth, r2.distance, r2.fov) == ((-10, 45), (-135, 225), (1.5, 2.0),
                                                               (30, 45))
    assert S.PHASE3_RANGES == r1


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=50, deadline=None)
def test_sample_camera_within_ranges(seed):
    rng = np.random.default_rng(seed)
    p1 = S.sample_camera(S.PHASE1_RANGES, rng)
    assert -45 <= p1.elevation <= 45 and -180 <= p1.azimuth < 180
    assert p1.distance == 2.5 and p1.fov == 40.0
    p2 = S.sample_camera(S.PHASE2_RANGES, rng)
    assert -10 <= p2.elevation <= 45 and 1.5 <= p2.distance <= 2.0 and 30 <= p2.fov <= 45
    assert -180 <= p2.azimuth < 180


def test_sample_camera_deterministic_and_degenerate_interval():
    ranges = S.CameraRanges((10.0, 10.0), (33.0, 33.0), (2.0, 2.0), (35.0, 35.0))
    p = S.sample_camera(ranges, np.random.default_rng(0))
    assert (p.elevation, p.azimuth, p.distance, p.fov) == (10.0, 33.0, 2.0, 35.0)
    a = S.sample_camera(S.PHASE2_RANGES, np.random.default_rng(7))
    b = S.sample_camera(S.PHASE2_RANGES, np.random.default_rng(7))
    assert a == b


@pytest.mark.parametrize("bad", [dict(elevation=(10.0, -10.0)), dict(distance=(-1.0, 1.0)),
                                 dict(fov=(10.0, 190.0)), dict(azimuth=(0.0, float("nan")))])
def test_camera_ranges_reject_invalid(bad):
    with pytest.raises(ConfigError):
        S.CameraRanges(**bad)


def test_wrap_azimuth():
    assert S.wrap_azimuth(200.0) == -160.0
    assert S.wrap_azimuth(225.0) == -135.0
    assert S.wrap_azimuth(-180.0) == -180.0
    assert S.wrap_azimuth(180.0) == -180.0
    assert S.wrap_azimuth(12.5) == 12.5


def test_single_pixel_ray_is_optical_axis():
    p = S.CameraPose(20.0, 50.0, 2.5, 40.0, 1, 1)
    rays = S.generate_rays(p)
    assert len(rays) == 1
    expected = -p.center() / np.linalg.norm(p.center())
    np.testing.assert_allclose(rays.directions[0].numpy(), expected, atol=1e-12)
    # the ray passes through the origin
    o, d = rays.origins[0].numpy(), rays.directions[0].numpy()
    np.testing.assert_allclose(o + 2.5 * d, 0, atol=1e-12)


@pytest.mark.parametrize("n", [2, 8, 33])
def test_corner_pixel_angle_closed_form(n):
    p = S.CameraPose(0.0, 0.0, 2.5, 40.0, n, n)
    d = S.pixel_directions(p)
    fwd = -p.center() / 2.5
    angle = math.acos(float(np.clip(d[0] @ fwd, -1, 1)))
    expected = math.atan(math.tan(math.radians(20.0)) * math.sqrt(2.0) * (1 - 1 / n))
    assert angle == pytest.approx(expected, abs=1e-12)


def test_rays_are_unit_and_one_per_pixel():
    rays = S.generate_rays(S.CameraPose(10.0, -30.0, 2.0, 45.0, 7, 5))
    assert len(rays) == 35
    np.testing.assert_allclose(rays.directions.norm(dim=1).numpy(), 1.0, atol=1e-12)
    assert rays.pixels.shape == (35, 2)


def test_query_field_vertex_edge_and_outside():
    dens = np.zeros((3, 3, 3))
    dens[0, 0, 0], dens[1, 0, 0] = 2.0, 4.0
    f = S.VoxelRadianceField.from_grids(dens)
    d, _ = S.query_field(f, [-1.0, -1.0, -1.0])
    assert d == 2.0
    d, _ = S.query_field(f, [-0.5, -1.0, -1.0])
    assert d == 3.0
    d, c = S.query_field(f, [1.5, 0.0, 0.0])
    assert d == 0.0
    np.testing.assert_array_equal(c, [1.0, 1.0, 1.0])


@given(st.floats(0.0, 1.0), st.floats(-1.0, 1.0), st.floats(-1.0, 1.0))
@settings(max_examples=50, deadline=None)
def test_trilinear_reproduces_affine_fields(s, y, z):
    a = np.array([0.7, -1.3, 2.1])
    f = S.VoxelRadianceField.from_functions(lambda P: 5.0 + P @ a, resolution=4, bbox=1.0)
    x = -1.0 + 2.0 * s
    p = torch.tensor([[x, y, z]], dtype=torch.float64)
    val, grad = f.density_and_gradient(p)
    assert float(val[0].detach()) == pytest.approx(5.0 + np.dot(a, [x, y, z]), abs=1e-12)
    np.testing.assert_allclose(grad[0].detach().numpy(), a, atol=1e-10)


def test_activations_keep_field_in_range():
    f = S.VoxelRadianceField(4)
    with torch.no_grad():
        f.density_raw.normal_(0, 5)
        f.color_raw.normal_(0, 5)
    assert float(f.density_grid().detach().min()) >= 0
    cg = f.color_grid().detach()
    assert float(cg.min()) >= 0 and float(cg.max()) <= 1


def _axis_rays(n=1):
    o = torch.tensor([[-0.5, 0.0, 0.0]] * n, dtype=torch.float64)
    d = torch.tensor([[1.0, 0.0, 0.0]] * n, dtype=torch.float64)
    return S.RayBatch(o, d, torch.zeros((n, 2), dtype=torch.int64), 1, n)


def test_empty_scene_renders_background():
    f = S.VoxelRadianceField.from_grids(np.zeros((4, 4, 4)))
    r = S.render_field(f, S.CameraPose(10, 20, 2.5, 40, 6, 6), 16)
    assert float(r.alpha.detach().abs().max()) == 0.0
    assert torch.equal(r.rgb.detach(), torch.ones_like(r.rgb))
    assert float(r.weights.detach().sum()) == 0.0


@pytest.mark.parametrize("n_samples", [2, 16, 1024])
def test_constant_medium_matches_beer_lambert(n_samples):
    f = S.VoxelRadianceField.from_grids(np.full((4, 4, 4), 1.0))
    r = S.render_volume(f, _axis_rays(), n_samples, near=0.0, far=1.0)
    assert float(r.alpha.detach()[0, 0]) == pytest.approx(1.0 - math.exp(-1.0), abs=1e-12)
    assert float(r.alpha.detach()[0, 0]) == pytest.approx(0.6321, abs=1e-3)


def test_render_invariants_on_random_field():
    g = np.random.default_rng(3)
    f = S.VoxelRadianceField(5, 1.0)
    with torch.no_grad():
        f.density_raw.copy_(torch.from_numpy(g.normal(0.2, 0.3, (5, 5, 5))))
    r = S.render_field(f, S.CameraPose(25, 60, 2.5, 40, 8, 8), 32, np.random.default_rng(0))
    acc = r.weights.detach().sum(dim=1)
    assert float(r.weights.detach().min()) >= 0
    assert float(acc.max()) <= 1 + 1e-6
    np.testing.assert_allclose(acc.detach().numpy(), r.alpha.detach().reshape(-1).numpy(), atol=1e-12)
    r2 = S.render_field(f, S.CameraPose(25, 60, 2.5, 40, 8, 8), 32, np.random.default_rng(0))
    assert torch.equal(r.rgb, r2.rgb)


def test_render_rejects_bad_sampling():
    f = S.VoxelRadianceField(2)
    with pytest.raises(ConfigError):
        S.render_volume(f, _axis_rays(), 1, 0.0, 1.0)
    with pytest.raises(ConfigError):
        S.render_volume(f, _axis_rays(), 8, 1.0, 1.0)


def _render_from_weights(w, z):
    w = torch.tensor(w, dtype=torch.float64)
    z = torch.tensor(z, dtype=torch.float64)
    return S.RenderOutput(None, None, None, w, z, 1.0)


def test_depth_is_weighted_mean():
    w = torch.tensor([[0.3, 0.3]], dtype=torch.float64)
    z = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    dz = (w * z).sum(1) / w.sum(1)
    assert float(dz[0]) == 0.5


def test_nz_loss_examples():
    assert float(S.nz_loss(_render_from_weights([[0.0, 0.9, 0.0]], [[0.0, 1.0, 2.0]]))) == 0.0
    assert float(S.z_variance(torch.tensor([[0.4, 0.4]]), torch.tensor([[0.0, 1.0]]))[0]) == \
        pytest.approx(0.25)
    assert float(S.nz_loss(_render_from_weights([[0.4, 0.4]], [[0.0, 1.0]]))) == pytest.approx(0.25)
    assert float(S.nz_loss(_render_from_weights([[0.2, 0.2]], [[0.0, 1.0]]))) == 0.0
    assert float(S.nz_loss(_render_from_weights([[0.0, 0.0]], [[0.0, 1.0]]))) == 0.0
    # mean over all rays: one foreground ray of two
    two = _render_from_weights([[0.4, 0.4], [0.1, 0.1]], [[0.0, 1.0], [0.0, 1.0]])
    assert float(S.nz_loss(two)) == pytest.approx(0.125)


def test_render_gradient_matches_finite_differences():
    from distill3d.gradcheck import finite_diff_check, micro_field
    f = micro_field(4)
    pose = S.CameraPose(20, 30, 2.5, 40, 2, 2)
    tgt = torch.rand(2, 2, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    res = finite_diff_check(lambda: ((S.render_field(f, pose, 16).rgb - tgt) ** 2).sum(),
                            {"d": f.density_raw, "c": f.color_raw})
    assert res.max_rel_err < 1e-3
