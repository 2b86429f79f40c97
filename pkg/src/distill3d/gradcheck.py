"""Central-difference verification of every loss gradient on micro scenes."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np
import torch

from . import encoders as E
from . import losses as L
from . import mesh as M
from . import scene as S
from .priors import (GaussianMixture, GaussianMixtureDenoiser, MultiviewOracleDenoiser,
                     ToySphere, ring_views)
from .priors.base import Denoiser, IdentityCodec

TOLERANCE = 1e-3


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    per_param: Dict[str, float]
    n_checked: int
    seconds: float = 0.0

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.max_rel_err < tol


def finite_diff_check(loss_fn: Callable[[], torch.Tensor], params: Dict[str, torch.Tensor],
                      step: float = 1e-4, masks: Optional[Dict[str, np.ndarray]] = None,
                      name: str = "loss") -> CheckResult:
    """Compare autograd with central differences for every (unmasked) parameter entry.

    Relative error is |a - n| / max(|a|, |n|, floor), floor = 1e-6 * max|n|, so
    entries whose true gradient is numerically zero do not dominate the report.
    """
    t0 = time.perf_counter()
    names = list(params)
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    analytic, numeric = {}, {}
    for n, g in zip(names, grads):
        p = params[n]
        a = np.zeros(p.numel()) if g is None else g.detach().reshape(-1).numpy().copy()
        sel = np.arange(p.numel())
        if masks is not None and n in masks:
            sel = sel[np.asarray(masks[n]).reshape(-1)]
        num = np.zeros(len(sel))
        flat = p.data.view(-1)
        for j, i in enumerate(sel):
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + step
                fp = float(loss_fn())
                flat[i] = orig - step
                fm = float(loss_fn())
                flat[i] = orig
            num[j] = (fp - fm) / (2.0 * step)
        analytic[n], numeric[n] = a[sel], num
    scale = max((np.abs(v).max() for v in numeric.values() if v.size), default=0.0)
    floor = max(1e-6 * scale, 1e-12)
    per = {}
    for n in names:
        a, v = analytic[n], numeric[n]
        if a.size == 0:
            per[n] = 0.0
            continue
        per[n] = float((np.abs(a - v) / np.maximum(np.maximum(np.abs(a), np.abs(v)), floor)).max())
    total = sum(len(v) for v in numeric.values())
    return CheckResult(name, max(per.values(), default=0.0), per, total,
                       time.perf_counter() - t0)


class FrozenCalls(Denoiser):
    """Wraps a prior and replays stored outputs for the listed call positions.

    Stop-gradient branches must stay fixed while finite differences perturb the
    parameters; ``reset`` marks the start of each loss evaluation.
    """

    def __init__(self, inner, frozen=(0,)):
        super().__init__(inner.schedule)
        self.inner = inner
        self.frozen = set(frozen)
        self.differentiable = inner.differentiable
        self._cache: dict = {}
        self._k = 0

    def reset(self):
        self._k = 0

    def denoise(self, z_t, t, cond):
        k = self._k
        self._k += 1
        if k in self.frozen:
            if k not in self._cache:
                self._cache[k] = self.inner.denoise(z_t.detach(), t, cond).detach()
            return self._cache[k]
        return self.inner.denoise(z_t, t, cond)


# -- micro scenes ------------------------------------------------------------------

def micro_field(res: int = 4, seed: int = 0) -> S.VoxelRadianceField:
    rng = np.random.default_rng(seed)
    f = S.VoxelRadianceField(res, 1.0)
    with torch.no_grad():
        f.density_raw.copy_(torch.from_numpy(0.3 + 0.1 * rng.standard_normal((res,) * 3)))
        f.color_raw.copy_(torch.from_numpy(0.3 * rng.standard_normal((res,) * 3 + (3,))))
    return f


def micro_mesh_scene(seed: int = 0) -> M.TetScene:
    rng = np.random.default_rng(seed)
    pos, tets = M.tet_grid(2, 1.0)
    sdf = 0.55 - np.linalg.norm(pos, axis=1) + 0.05 * rng.standard_normal(len(pos))
    sc = M.TetScene(pos, tets, sdf, 1.0)
    with torch.no_grad():
        sc.offset_raw.copy_(torch.from_numpy(0.3 * rng.standard_normal(pos.shape)))
    return sc


def _pose(res: int, el: float = 20.0, az: float = 30.0) -> S.CameraPose:
    return S.CameraPose(el, az, 2.5, 40.0, res, res)


def _field_params(f):
    return {"density_raw": f.density_raw, "color_raw": f.color_raw}


def _render(f, pose, n_samples=16):
    return S.render_field(f, pose, n_samples)


def _gm_prior():
    mix = GaussianMixture([0.6, 0.4], [0.3, 0.7], [0.2, 0.1])
    return GaussianMixtureDenoiser(mix)


def build_checks(scale: str = "micro") -> Dict[str, Callable[[], CheckResult]]:
    res = {"micro": 4, "small": 6}[scale]
    img_res = max(res, 8)
    codec = IdentityCodec()
    W = L.LossWeights()
    rng = np.random.default_rng(1)
    eps = rng.standard_normal((3, res, res))
    target = rng.random((res, res, 3))
    checks = {}

    def quadratic():
        theta = torch.from_numpy(rng.standard_normal(10)).requires_grad_(True)
        return finite_diff_check(lambda: 0.5 * (theta ** 2).sum(), {"theta": theta},
                                 name="quadratic")

    def render_rgb():
        f = micro_field(res)
        tgt = torch.from_numpy(target)
        return finite_diff_check(lambda: ((_render(f, _pose(res)).rgb - tgt) ** 2).sum(),
                                 _field_params(f), name="render_rgb")

    def ms_loss():
        f = micro_field(res)
        enc = E.ToyEncoder()
        spec = E.AugmentationSpec(jitter=0.0, crop_area=(1.0, 1.0), mean=(0.0,) * 3,
                                  std=(1.0,) * 3)
        C = E.normalize_embedding(torch.from_numpy(np.random.default_rng(2).standard_normal(64)))
        fn = lambda: E.ms_loss(C, [_render(f, _pose(img_res)).rgb], enc, spec,
                               np.random.default_rng(3))
        return finite_diff_check(fn, _field_params(f), name="ms_loss")

    def aug_sds():
        f = micro_field(res)
        prior = FrozenCalls(_gm_prior(), frozen=(0,))

        def fn():
            prior.reset()
            r = _render(f, _pose(res))
            return L.aug_sds_loss(prior, codec, r.rgb, 0.4, None, eps, W, render=r)
        return finite_diff_check(fn, _field_params(f), name="aug_sds")

    def nz():
        f = micro_field(res)
        return finite_diff_check(lambda: S.nz_loss(_render(f, _pose(res))), _field_params(f),
                                 name="nz")

    def cds():
        f = micro_field(res)
        prior = FrozenCalls(_gm_prior(), frozen=(1,))

        def fn():
            prior.reset()
            return L.cds_loss(prior, codec, _render(f, _pose(res)).rgb, 0.5, 0.48, None, eps, W)
        return finite_diff_check(fn, _field_params(f), name="cds")

    sphere = ToySphere(0.4)
    ref_pose = _pose(res, 15.0, 0.0)
    ref_img, ref_mask = sphere.render(ref_pose)
    ref = L.ReferenceView(ref_img, ref_mask, ref_pose)

    def sds3d():
        f = micro_field(res)
        oracle = MultiviewOracleDenoiser(sphere, ring_views(12, 15.0))
        pose = _pose(res, 15.0, 90.0)
        fn = lambda: L.sds3d_loss(oracle, codec, _render(f, pose).rgb, 0.3, ref, pose, eps, W)
        return finite_diff_check(fn, _field_params(f), name="sds3d")

    def ref_term():
        f = micro_field(res)

        def fn():
            r = _render(f, ref_pose)
            return L.ref_loss(r.rgb, r.alpha, ref, W)
        return finite_diff_check(fn, _field_params(f), name="ref")

    def nv():
        f = micro_field(res)
        g = np.random.default_rng(4)
        pts = torch.from_numpy(g.uniform(-0.6, 0.6, size=(16, 3)))
        off = torch.from_numpy(g.normal(size=(16, 3)) * 0.1)
        return finite_diff_check(lambda: M.normal_smoothness_loss(f, pts, offsets=off),
                                 {"density_raw": f.density_raw}, name="nv")

    def nc():
        sc = micro_mesh_scene()
        return finite_diff_check(lambda: M.normal_consistency_loss(M.marching_tets(sc)),
                                 sc.parameters(), name="nc")

    def ls():
        sc = micro_mesh_scene()
        return finite_diff_check(lambda: M.laplacian_loss(M.marching_tets(sc)),
                                 sc.parameters(), name="ls")

    def mesh_render():
        sc = micro_mesh_scene()
        pose = _pose(img_res)
        with torch.no_grad():
            face = M.render_mesh(M.marching_tets(sc), pose, "normal").face
        keep = torch.from_numpy((~M.silhouette_band(face)).astype(np.float64))[..., None]
        tgt = torch.from_numpy(np.random.default_rng(5).random((img_res, img_res, 3)))
        fn = lambda: (keep * (M.render_mesh(M.marching_tets(sc), pose, "normal").image - tgt)
                      ** 2).sum()
        return finite_diff_check(fn, sc.parameters(), name="mesh_render")

    for fn in (quadratic, render_rgb, ms_loss, aug_sds, nz, cds, sds3d, ref_term, nv, nc, ls,
               mesh_render):
        checks["ref" if fn is ref_term else fn.__name__] = fn
    return checks


def run_checks(ops=None, scale: str = "micro") -> list:
    checks = build_checks(scale)
    names = list(checks) if not ops else list(ops)
    unknown = [n for n in names if n not in checks]
    if unknown:
        raise KeyError(f"unknown gradcheck op(s) {unknown}; available: {sorted(checks)}")
    return [checks[n]() for n in names]


def format_table(results, tol: float = TOLERANCE) -> str:
    lines = [f"{'op':<12} {'entries':>8} {'max rel err':>12} {'time s':>7}  status"]
    for r in results:
        lines.append(f"{r.name:<12} {r.n_checked:>8d} {r.max_rel_err:>12.3e} {r.seconds:>7.2f}  "
                     f"{'ok' if r.passed(tol) else 'FAIL'}")
    return "\n".join(lines)
