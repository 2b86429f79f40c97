import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from distill3d import scene as S
from distill3d.errors import ConfigError, DenoiserUnavailable, DomainError
from distill3d.priors import (ConstantDenoiser, EmbeddingCondition, GaussianMixture,
                              GaussianMixtureDenoiser, IdentityCodec, MultiviewOracleDenoiser,
                              NoiseSchedule, ToySphere, ViewCondition, gm_denoise,
                              relative_transform, ring_views)


class FixedSigma(NoiseSchedule):
    """Schedule stub pinning sigma(t) = t for closed-form checks."""

    def sigma(self, t):
        return float(t)


def test_schedule_endpoints_and_monotone():
    s = NoiseSchedule()
    assert (s.sigma_min, s.sigma_max, s.n_steps) == (0.05, 5.0, 50)
    assert s.sigma(0.0) == pytest.approx(0.05)
    assert s.sigma(1.0) == pytest.approx(5.0)
    sig = [s.sigma(t) for t in s.grid()]
    assert all(b > a for a, b in zip(sig, sig[1:]))
    with pytest.raises(DomainError):
        s.sigma(1.5)
    with pytest.raises(ConfigError):
        NoiseSchedule(1.0, 0.5)


@given(st.integers(0, 2 ** 31))
@settings(max_examples=50, deadline=None)
def test_adjacent_timesteps_on_grid(seed):
    s = NoiseSchedule()
    t1, t2 = s.sample_adjacent(np.random.default_rng(seed))
    assert 0.02 <= t2 < t1 <= 0.98
    assert round(t1 * 50) - round(t2 * 50) == 1
    assert s.sigma(t2) < s.sigma(t1)


def test_gm_trivial_limits():
    mix = GaussianMixture([1.0], [0.3], [0.0])
    z = torch.tensor([[1.7, -2.0]], dtype=torch.float64)
    np.testing.assert_allclose(gm_denoise(mix, z, 0.5).numpy(), 0.3, atol=1e-15)
    wide = GaussianMixture([1.0], [0.3], [1.0])
    d = GaussianMixtureDenoiser(wide, schedule=FixedSigma())
    np.testing.assert_allclose(d.denoise(z, 1e-7, None).numpy(), z.numpy(), atol=1e-12)


def test_gm_closed_form_example():
    d = GaussianMixtureDenoiser(GaussianMixture([1.0], [0.0], [1.0]), FixedSigma())
    assert float(d.denoise(torch.tensor([2.0], dtype=torch.float64), 1.0, None)) == 1.0


def test_gm_matches_monte_carlo_posterior_mean():
    mu, s, sig, z = 0.4, 0.8, 0.6, 1.3
    g = np.random.default_rng(12345)
    z0 = g.normal(mu, s, 10 ** 6)
    w = np.exp(-0.5 * ((z - z0) / sig) ** 2)
    est = (w * z0).sum() / w.sum()
    # self-normalised importance sampling standard error
    wn = w / w.sum()
    se = math.sqrt(((wn * (z0 - est)) ** 2).sum())
    d = GaussianMixtureDenoiser(GaussianMixture([1.0], [mu], [s]), FixedSigma())
    exact = float(d.denoise(torch.tensor([z], dtype=torch.float64), sig, None))
    assert exact == pytest.approx((s * s * z + sig * sig * mu) / (s * s + sig * sig), abs=1e-14)
    assert abs(exact - est) < 3 * se


def test_gm_mixture_is_pure_and_between_means():
    d = GaussianMixtureDenoiser(GaussianMixture([0.5, 0.5], [-1.0, 1.0], [0.1, 0.1]))
    z = torch.linspace(-2, 2, 9, dtype=torch.float64)
    a, b = d.denoise(z, 0.3, None), d.denoise(z.clone(), 0.3, None)
    assert torch.equal(a, b)
    assert float(a.min()) >= -1.0 - 1e-9 and float(a.max()) <= 1.0 + 1e-9


@pytest.mark.parametrize("bad", [dict(weights=[0.5], means=[0.0], stds=[1.0]),
                                 dict(weights=[1.0], means=[0.0], stds=[-1.0]),
                                 dict(weights=[], means=[], stds=[])])
def test_gm_validation(bad):
    with pytest.raises(ConfigError):
        GaussianMixture(**bad)


def test_identity_codec_roundtrip():
    c = IdentityCodec()
    x = torch.rand(4, 5, 3, dtype=torch.float64)
    z = c.encode(x)
    assert z.shape == (3, 4, 5)
    assert torch.equal(c.decode(z), x)


def test_constant_denoiser():
    d = ConstantDenoiser(0.5)
    assert torch.equal(d(torch.zeros(3, 2, 2), 0.5, None), torch.full((3, 2, 2), 0.5,
                                                                      dtype=torch.float64))


def test_condition_validation():
    with pytest.raises(ConfigError):
        EmbeddingCondition(np.ones(3))
    with pytest.raises(ConfigError):
        ViewCondition(np.zeros((2, 2, 3)), -np.eye(3), np.zeros(3), S.CameraPose(0, 0, 2.5), 40.0)


def test_relative_transform_recovers_target_pose():
    ref = S.CameraPose(15.0, 0.0, 2.5, 40.0, 8, 8)
    pose = S.CameraPose(30.0, 100.0, 2.0, 40.0, 8, 8)
    R, T = relative_transform(ref, pose)
    vc = ViewCondition(np.zeros((8, 8, 3)), R, T, ref, 40.0)
    back = vc.target_pose(8, 8)
    assert back.elevation == pytest.approx(30.0)
    assert back.azimuth == pytest.approx(100.0)
    assert back.distance == pytest.approx(2.0)


def _oracle(n=12):
    return MultiviewOracleDenoiser(ToySphere(0.4), ring_views(n, 15.0))


def _embed_cond(pose):
    return EmbeddingCondition(np.eye(1, 4)[0], pose)


def test_oracle_returns_stored_render_and_nearest_view():
    o = _oracle()
    pose = S.CameraPose(15.0, 30.0, 2.5, 40.0, 8, 8)
    z = torch.zeros(3, 8, 8, dtype=torch.float64)
    out = o.denoise(z, 0.5, _embed_cond(pose))
    img, _ = ToySphere(0.4).render(pose)
    assert torch.equal(out, torch.from_numpy(img).permute(2, 0, 1))
    # 40 deg lies between stored 30 and 60; 44 is nearer 30, 46 nearer 60
    assert o.views[o.nearest_view(pose.replace(azimuth=44.0))] == (15.0, 30.0)
    assert o.views[o.nearest_view(pose.replace(azimuth=46.0))] == (15.0, 60.0)


def test_oracle_view_condition_and_errors():
    o = _oracle()
    ref = S.CameraPose(15.0, 0.0, 2.5, 40.0, 8, 8)
    pose = ref.replace(azimuth=90.0)
    R, T = relative_transform(ref, pose)
    out = o.denoise(torch.zeros(3, 8, 8), 0.3, ViewCondition(np.zeros((8, 8, 3)), R, T, ref, 40))
    expected = o.denoise(torch.zeros(3, 8, 8), 0.3, _embed_cond(pose))
    assert torch.equal(out, expected)
    with pytest.raises(DenoiserUnavailable):
        MultiviewOracleDenoiser(ToySphere(), []).denoise(torch.zeros(3, 2, 2), 0.5,
                                                          _embed_cond(ref))
    with pytest.raises(DenoiserUnavailable):
        o.denoise(torch.zeros(3, 8, 8), 0.5, None)


def test_sphere_render_kinds():
    pose = S.CameraPose(0.0, 0.0, 2.5, 40.0, 9, 9)
    img, mask = ToySphere(0.4).render(pose, "normal")
    np.testing.assert_allclose(img[4, 4], [0.5, 0.5, 1.0], atol=1e-12)
    assert mask[4, 4] == 1.0 and mask[0, 0] == 0.0
    m, _ = ToySphere(0.4).render(pose, "mask")
    np.testing.assert_array_equal(m[..., 0], mask)


def test_oracle_distillation_reduces_error():
    from distill3d import losses as L
    from distill3d.optim import Optimizer
    o = _oracle()
    f = S.VoxelRadianceField(12, 0.6)
    f.init_blob(10.0, 0.5)
    opt = Optimizer("adam", {"d": f.density_raw, "c": f.color_raw}, lr=0.05)
    rng = np.random.default_rng(0)
    codec = IdentityCodec()
    errs = []
    for _ in range(50):
        pose = S.sample_camera(S.CameraRanges((15, 15), (-180, 180), (2.5, 2.5), (40, 40)), rng,
                               16, 16)
        r = S.render_field(f, pose, 24, rng)
        cond = _embed_cond(pose)
        eps = L.gaussian_eps(rng, (3, 16, 16))
        loss = L.sds_loss(o, codec, r.rgb, 0.3, cond, eps)
        target = o.denoise(torch.zeros(3, 16, 16), 0.3, cond).permute(1, 2, 0)
        errs.append(float(((r.rgb.detach() - target) ** 2).mean()))
        opt.zero_grad()
        loss.backward()
        opt.step_from_autograd()
    ma = np.convolve(errs, np.ones(10) / 10, mode="valid")
    assert ma[-1] < 0.5 * ma[0]
    assert (np.diff(ma[::10]) < 0).all()
