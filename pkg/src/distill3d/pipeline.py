"""Three-phase optimization: radiance field, tet-grid geometry, then texture."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np
import torch

from . import checkpoint as ckpt
from . import losses as L
from . import mesh as M
from . import scene as S
from .encoders import AugmentationSpec, ms_loss
from .errors import ConfigError, ConversionError, PhaseAbort
from .optim import Optimizer
from .priors.base import IdentityCodec

log = logging.getLogger(__name__)

PHASE_LOSSES = {
    1: frozenset({"ms", "sds", "nz", "sds3d", "ref", "nv"}),
    2: frozenset({"ms", "cds", "sds3d", "ref", "nc", "ls"}),
    3: frozenset({"ms", "sds", "sds3d", "ref"}),
}
STEREO_TERMS = frozenset({"sds3d", "ref"})
FROZEN = {1: (), 2: ("color",), 3: ("sdf", "offsets")}
_DEFAULTS = {
    1: dict(iterations=400, resolution=64, ranges=S.PHASE1_RANGES, optimizer="adam", lr=0.01),
    2: dict(iterations=200, resolution=128, ranges=S.PHASE2_RANGES, optimizer="adan", lr=0.01),
    3: dict(iterations=200, resolution=128, ranges=S.PHASE3_RANGES, optimizer="adam", lr=0.001),
}


@dataclass
class PhaseConfig:
    phase: int
    iterations: int
    resolution: int
    ranges: S.CameraRanges
    optimizer: str
    lr: float
    n_samples: int = 64
    views: int = 1
    stereo: bool = True
    checkpoint_every: int = 100
    nv_points: int = 256

    def __post_init__(self):
        if self.phase not in PHASE_LOSSES:
            raise ConfigError(f"phase must be 1, 2 or 3, got {self.phase}")
        if self.iterations < 0 or self.resolution < 8 or self.views < 1:
            raise ConfigError("phase needs iterations >= 0, resolution >= 8 and views >= 1")
        if self.optimizer not in Optimizer.rules:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    @property
    def losses(self) -> frozenset:
        active = PHASE_LOSSES[self.phase]
        return active if self.stereo else active - STEREO_TERMS

    @property
    def frozen(self) -> tuple:
        return FROZEN[self.phase]

    @property
    def image_kind(self) -> str:
        return "normal" if self.phase == 2 else "rgb"


def default_phase(phase: int, **overrides) -> PhaseConfig:
    if phase not in _DEFAULTS:
        raise ConfigError(f"phase: expected 1, 2 or 3, got {phase!r}")
    kw = dict(_DEFAULTS[phase])
    kw.update(overrides)
    return PhaseConfig(phase=phase, **kw)


@dataclass
class Engine:
    """Priors, encoder, prompt, reference view and weights shared by all phases."""

    prior2d: object
    encoder: object
    prompt: torch.Tensor
    prior3d: Optional[object] = None
    reference: Optional[L.ReferenceView] = None
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    augment: AugmentationSpec = field(default_factory=AugmentationSpec)
    codec: object = field(default_factory=IdentityCodec)
    threshold: float = 10.0
    tet_resolution: int = 16
    t_range: tuple = (0.02, 0.98)


@dataclass
class PipelineState:
    field: S.VoxelRadianceField
    rng: np.random.Generator
    phase: int = 1
    iteration: int = 0
    tets: Optional[M.TetScene] = None
    optimizer: Optional[Optimizer] = None
    skipped: int = 0
    records: List[dict] = field(default_factory=list)
    _surface: Optional[M.SurfaceMesh] = field(default=None, repr=False)


# -- conversion -----------------------------------------------------------------------

def convert_nerf_to_dmtet(field: S.VoxelRadianceField, threshold: float = 10.0,
                          resolution: int = 16) -> M.TetScene:
    """Tet scene at the density isosurface; vertex colors keep reading ``field``."""
    tets = M.field_to_sdf(field, threshold, resolution)
    with torch.no_grad():
        surf = M.marching_tets(tets, with_colors=False)
    if surf.n_faces == 0:
        peak = float(field.density_grid().detach().max())
        raise ConversionError(f"no surface at density threshold {threshold} (field peak {peak:.3g}); "
                              "lower the threshold or train the field longer")
    return tets


# -- per-phase loss assembly ---------------------------------------------------------------

def _condition(engine: Engine, pose, kind: str):
    return L.embedding_condition(engine.prompt, pose, kind)


def _foreground_points(render: S.RenderOutput, rays: S.RayBatch, rng, n: int) -> torch.Tensor:
    fg = render.foreground
    idx = torch.nonzero(fg).reshape(-1).numpy()
    if idx.size > n:
        idx = np.sort(rng.choice(idx, size=n, replace=False))
    depth = render.depth.reshape(-1).detach()[idx]
    pts = rays.origins[idx] + depth[:, None] * rays.directions[idx]
    return pts


def _phase1_view(engine: Engine, state: PipelineState, cfg: PhaseConfig, parts: dict):
    rng, W, fld = state.rng, engine.weights, state.field
    pose = S.sample_camera(cfg.ranges, rng, cfg.resolution)
    rays = S.generate_rays(pose)
    near, far = S.near_far(pose, fld.bbox)
    render = S.render_volume(fld, rays, cfg.n_samples, near, far, rng)
    x = render.rgb
    ms = ms_loss(engine.prompt, [x], engine.encoder, engine.augment, rng)
    parts["ms"] = L.scalar(ms)
    L.fire("ms")
    t = float(rng.uniform(*engine.t_range))
    eps = L.gaussian_eps(rng, engine.codec.encode(x).shape)
    total = L.planar_loss("S", W, ms, sds=lambda: L.aug_sds_loss(
        engine.prior2d, engine.codec, x, t, _condition(engine, pose, "rgb"), eps, W, render, parts))
    total = total + _stereo(engine, state, cfg, x, pose, parts,
                            lambda: _field_ref(engine, fld, cfg.n_samples))
    pts = _foreground_points(render, rays, rng, cfg.nv_points)
    L.fire("nv")
    nv = M.normal_smoothness_loss(fld, pts, rng)
    parts["reg"] = parts.get("reg", 0.0) + L.scalar(nv)
    return total + W.nv * nv


def _field_ref(engine: Engine, fld: S.VoxelRadianceField, n_samples: int):
    r = S.render_field(fld, engine.reference.pose, n_samples)
    return r.rgb, r.alpha


def _stereo(engine, state, cfg, x, pose, parts, ref_render: Callable):
    if not cfg.stereo or engine.prior3d is None or engine.reference is None:
        return torch.zeros((), dtype=S.DTYPE)
    rng, W = state.rng, engine.weights
    t = float(rng.uniform(*engine.t_range))
    eps = L.gaussian_eps(rng, engine.codec.encode(x).shape)

    def s3():
        v = L.sds3d_loss(engine.prior3d, engine.codec, x, t, engine.reference, pose, eps, W,
                         cfg.image_kind)
        parts["sds3d"] = L.scalar(v)
        return v

    def rf():
        img, alpha = ref_render()
        v = L.ref_loss(img, alpha, engine.reference, W)
        parts["ref"] = L.scalar(v)
        return v

    return L.stereo_loss(W, s3, rf)


def _mesh_ref(engine: Engine, surface: M.SurfaceMesh):
    r = M.render_mesh(surface, engine.reference.pose, "color")
    return r.image, r.mask


def _phase2_view(engine: Engine, state: PipelineState, cfg: PhaseConfig, parts: dict):
    rng, W = state.rng, engine.weights
    surface = M.marching_tets(state.tets)
    if surface.n_faces == 0:
        return None
    pose = S.sample_camera(cfg.ranges, rng, cfg.resolution)
    x = M.render_mesh(surface, pose, "normal").image
    ms = ms_loss(engine.prompt, [x], engine.encoder, engine.augment, rng)
    parts["ms"] = L.scalar(ms)
    L.fire("ms")
    t1, t2 = engine.prior2d.schedule.sample_adjacent(rng, engine.t_range)
    eps = L.gaussian_eps(rng, engine.codec.encode(x).shape)

    def cds():
        v = L.cds_loss(engine.prior2d, engine.codec, x, t1, t2, _condition(engine, pose, "normal"),
                       eps, W)
        parts["cds"] = L.scalar(v)
        return v

    total = L.planar_loss("C", W, ms, cds=cds)
    total = total + _stereo(engine, state, cfg, x, pose, parts, lambda: _mesh_ref(engine, surface))
    L.fire("nc")
    L.fire("ls")
    nc = M.normal_consistency_loss(surface)
    ls = M.laplacian_loss(surface)
    parts["reg"] = parts.get("reg", 0.0) + L.scalar(nc) + L.scalar(ls)
    return total + W.nc * nc + W.ls * ls


def _frozen_surface(state: PipelineState) -> M.SurfaceMesh:
    if state._surface is None:
        with torch.no_grad():
            state._surface = M.marching_tets(state.tets, with_colors=False).detach()
    return state._surface


def _phase3_view(engine: Engine, state: PipelineState, cfg: PhaseConfig, parts: dict):
    rng, W = state.rng, engine.weights
    geo = _frozen_surface(state)
    if geo.n_faces == 0:
        return None
    surface = M.SurfaceMesh(geo.vertices, geo.faces, state.field.query_color(geo.vertices))
    pose = S.sample_camera(cfg.ranges, rng, cfg.resolution)
    x = M.render_mesh(surface, pose, "color").image
    ms = ms_loss(engine.prompt, [x], engine.encoder, engine.augment, rng)
    parts["ms"] = L.scalar(ms)
    L.fire("ms")
    t = float(rng.uniform(*engine.t_range))
    eps = L.gaussian_eps(rng, engine.codec.encode(x).shape)
    total = L.planar_loss("S", W, ms, sds=lambda: L.aug_sds_loss(
        engine.prior2d, engine.codec, x, t, _condition(engine, pose, "rgb"), eps, W, None, parts))
    return total + _stereo(engine, state, cfg, x, pose, parts, lambda: _mesh_ref(engine, surface))


_VIEW_LOSS = {1: _phase1_view, 2: _phase2_view, 3: _phase3_view}


def phase_parameters(state: PipelineState, phase: int) -> dict:
    if phase == 1:
        return {"density_raw": state.field.density_raw, "color_raw": state.field.color_raw}
    if phase == 2:
        return state.tets.parameters()
    return {"color_raw": state.field.color_raw}


def _all_tensors(state: PipelineState):
    ts = [state.field.density_raw, state.field.color_raw]
    if state.tets is not None:
        ts += [state.tets.sdf, state.tets.offset_raw]
    return ts


def iteration_loss(engine: Engine, state: PipelineState, cfg: PhaseConfig):
    """Mean loss over ``cfg.views`` camera draws and the summed per-term breakdown."""
    parts: dict = {}
    total = None
    for _ in range(cfg.views):
        v = _VIEW_LOSS[cfg.phase](engine, state, cfg, parts)
        if v is None:
            return None, parts
        total = v if total is None else total + v
    return total / cfg.views, parts


# -- scheduler ------------------------------------------------------------------------------

def start_phase(state: PipelineState, cfg: PhaseConfig) -> None:
    if cfg.phase > 1 and state.tets is None:
        raise ConfigError(f"phase {cfg.phase} needs a converted tet scene")
    state.phase = cfg.phase
    state.iteration = 0
    state.skipped = 0
    state._surface = None
    state.optimizer = Optimizer(cfg.optimizer, phase_parameters(state, cfg.phase), cfg.lr)


def snapshot(state: PipelineState, config_hash: str = "") -> ckpt.Checkpoint:
    params = {"field/density_raw": state.field.density_raw.detach().numpy().copy(),
              "field/color_raw": state.field.color_raw.detach().numpy().copy()}
    if state.tets is not None:
        params["tets/sdf"] = state.tets.sdf.detach().numpy().copy()
        params["tets/offset_raw"] = state.tets.offset_raw.detach().numpy().copy()
    opt = state.optimizer
    meta = {"skipped": state.skipped, "optimizer_kind": opt.kind if opt else None,
            "optimizer_lr": opt.lr if opt else None}
    if state.tets is not None:
        meta["tet_resolution"] = int(round(2.0 * state.field.bbox / state.tets.edge_length))
    return ckpt.Checkpoint(state.phase, state.iteration, params,
                           ckpt.optim_arrays(opt.state if opt else None),
                           opt.state.step if opt else 0,
                           state.rng.bit_generator.state, config_hash, meta)


def restore(state: PipelineState, ck: ckpt.Checkpoint) -> None:
    """Load a checkpoint into ``state`` (field geometry must already match)."""
    with torch.no_grad():
        state.field.density_raw.copy_(torch.from_numpy(ck.params["field/density_raw"]))
        state.field.color_raw.copy_(torch.from_numpy(ck.params["field/color_raw"]))
    if "tets/sdf" in ck.params:
        n = int(ck.meta["tet_resolution"])
        pos, tets = M.tet_grid(n, state.field.bbox)
        state.tets = M.TetScene(pos, tets, ck.params["tets/sdf"], 2.0 * state.field.bbox / n,
                                color_field=state.field)
        with torch.no_grad():
            state.tets.offset_raw.copy_(torch.from_numpy(ck.params["tets/offset_raw"]))
    state.phase, state.iteration = ck.phase, ck.iteration
    state.skipped = int(ck.meta.get("skipped", 0))
    state._surface = None
    state.optimizer = None
    if ck.meta.get("optimizer_kind"):
        state.optimizer = Optimizer(ck.meta["optimizer_kind"], phase_parameters(state, ck.phase),
                                    ck.meta["optimizer_lr"])
        ckpt.restore_optim(state.optimizer.state, ck.optimizer, ck.optimizer_step)
    state.rng.bit_generator.state = ck.rng_state


def _save(state, out: Optional[Path], config_hash: str):
    if out is None:
        return
    out.mkdir(parents=True, exist_ok=True)
    ckpt.save(out / f"phase{state.phase}_iter{state.iteration:05d}.x3d", snapshot(state, config_hash))


def run_phase(cfg: PhaseConfig, state: PipelineState, engine: Engine,
              checkpoint_dir=None, config_hash: str = "", resume: bool = False,
              stop_at: Optional[int] = None) -> PipelineState:
    """Run (or continue, with ``resume``) one phase; ``stop_at`` halts early for tests."""
    if not resume or state.optimizer is None or state.phase != cfg.phase:
        start_phase(state, cfg)
    out = Path(checkpoint_dir) if checkpoint_dir is not None else None
    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    limit = 0.05 * cfg.iterations
    while state.iteration < end:
        for t in _all_tensors(state):
            t.grad = None
        total, parts = iteration_loss(engine, state, cfg)
        ok = total is not None and bool(torch.isfinite(total))
        if ok:
            total.backward()
            ok = state.optimizer.step_from_autograd()
        else:
            log.warning("phase %d iteration %d: non-finite or empty loss, skipped",
                        cfg.phase, state.iteration)
        if not ok:
            state.skipped += 1
            if state.skipped > limit:
                raise PhaseAbort(cfg.phase, state.iteration,
                                 f"{state.skipped} of {cfg.iterations} iterations skipped")
        parts["total"] = L.scalar(total) if total is not None else None
        state.records.append(L.breakdown_record(state.iteration, cfg.phase, parts))
        state.iteration += 1
        log.debug("phase %d iter %d total %s", cfg.phase, state.iteration, parts["total"])
        if cfg.checkpoint_every and state.iteration % cfg.checkpoint_every == 0 \
                and state.iteration < cfg.iterations:
            _save(state, out, config_hash)
    for t in _all_tensors(state):
        t.grad = None
    if state.iteration >= cfg.iterations:
        _save(state, out, config_hash)
    return state


def final_mesh(state: PipelineState) -> M.SurfaceMesh:
    with torch.no_grad():
        if state.tets is None:
            raise ConfigError("no tet scene to extract a mesh from")
        return M.marching_tets(state.tets).detach()


def run_pipeline(engine: Engine, phases, state: PipelineState, checkpoint_dir=None,
                 config_hash: str = "", phase1_only: bool = False) -> Optional[M.SurfaceMesh]:
    """Phase 1 -> conversion -> phase 2 -> phase 3 -> surface mesh (None if ``phase1_only``)."""
    phases = {p.phase: p for p in phases}
    run_phase(phases[1], state, engine, checkpoint_dir, config_hash)
    if phase1_only:
        return None
    try:
        state.tets = convert_nerf_to_dmtet(state.field, engine.threshold, engine.tet_resolution)
    except ConversionError as exc:
        raise PhaseAbort(1, state.iteration, str(exc)) from exc
    run_phase(phases[2], state, engine, checkpoint_dir, config_hash)
    run_phase(phases[3], state, engine, checkpoint_dir, config_hash)
    return final_mesh(state)


def chamfer_to_sphere(mesh: M.SurfaceMesh, radius: float, n: int = 4000, seed: int = 0) -> float:
    """Symmetric Chamfer distance between the mesh surface and an analytic sphere."""
    from .metrics import chamfer_distance, sample_sphere, sample_surface
    rng = np.random.default_rng(seed)
    return chamfer_distance(sample_surface(mesh, n, rng), sample_sphere(radius, n, rng))


__all__ = ["PHASE_LOSSES", "PhaseConfig", "default_phase", "Engine", "PipelineState",
           "convert_nerf_to_dmtet", "run_phase", "run_pipeline", "final_mesh", "snapshot",
           "restore", "iteration_loss", "chamfer_to_sphere"]
