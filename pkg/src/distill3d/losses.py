"""Distillation losses and their planar, stereo and hybrid compositions.

Every score-distillation term is written as a surrogate objective
``0.5 * ||z - sg(z_hat)||^2`` so that its value is reportable and its gradient
with respect to ``z`` is the residual ``z - z_hat``. All norms are plain sums
over elements.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import torch

from . import scene
from .errors import ConfigError, DomainError
from .priors.base import EmbeddingCondition, ViewCondition, relative_transform
from .scene import DTYPE, CameraPose


def scalar(v) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def _unit_weight(t: float) -> float:
    return 1.0


@dataclass
class LossWeights:
    ms: float = 1.0
    cds: float = 1.0
    star: float = 1.0
    img: float = 0.1
    nz: float = 0.5
    sds3d: float = 1.0
    rgb: float = 5.0
    mask: float = 0.5
    nv: float = 1.0
    nc: float = 1.0
    ls: float = 1.0
    lam: Callable[[float], float] = field(default=_unit_weight, repr=False, compare=False)

    def __post_init__(self):
        for k, v in self.scalars().items():
            if not (math.isfinite(v) and v >= 0):
                raise ConfigError(f"loss weight {k} must be a finite nonnegative number, got {v}")

    def scalars(self) -> dict:
        return {k: float(getattr(self, k)) for k in
                ("ms", "cds", "star", "img", "nz", "sds3d", "rgb", "mask", "nv", "nc", "ls")}


@dataclass
class ReferenceView:
    image: np.ndarray      # (H, W, 3) in [0, 1]
    mask: np.ndarray       # (H, W) in {0, 1}
    pose: CameraPose

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ConfigError("reference image must be (H, W, 3)")
        if self.mask.shape != self.image.shape[:2]:
            raise ConfigError("reference mask must match the image height and width")
        if (self.pose.height, self.pose.width) != self.mask.shape:
            raise ConfigError("reference pose resolution must match the reference image")


# -- instrumentation ----------------------------------------------------------------

class LossProbe:
    """Counts how often each loss term is evaluated while active."""

    def __init__(self):
        self.counts: Counter = Counter()

    def fired(self) -> set:
        return {k for k, v in self.counts.items() if v > 0}


_PROBES: list = []


@contextmanager
def probe():
    p = LossProbe()
    _PROBES.append(p)
    try:
        yield p
    finally:
        _PROBES.remove(p)


def fire(name: str) -> None:
    for p in _PROBES:
        p.counts[name] += 1


# -- 2D score distillation ------------------------------------------------------------

def _noisy_latent(codec, x, sigma, eps):
    z = codec.encode(x)
    eps = torch.as_tensor(eps, dtype=DTYPE).reshape(z.shape)
    return z, z + sigma * eps


def sds_grad(prior, codec, x, t: float, cond, eps, weights: Optional[LossWeights] = None):
    """Latent residual lambda(t) * (z - z_hat); the SDS gradient with respect to z."""
    weights = weights or LossWeights()
    z, z_t = _noisy_latent(codec, x, prior.schedule.sigma(t), eps)
    with torch.no_grad():
        z_hat = prior.denoise(z_t.detach(), t, cond)
    return weights.lam(t) * (z.detach() - z_hat)


def sds_loss(prior, codec, x, t: float, cond, eps, weights: Optional[LossWeights] = None,
             img_weight: float = 0.0) -> torch.Tensor:
    """Surrogate lambda(t) * (0.5||z - sg z_hat||^2 + img_weight * 0.5||x - sg x_hat||^2)."""
    weights = weights or LossWeights()
    z, z_t = _noisy_latent(codec, x, prior.schedule.sigma(t), eps)
    with torch.no_grad():
        z_hat = prior.denoise(z_t.detach(), t, cond)
    loss = 0.5 * ((z - z_hat) ** 2).sum()
    if img_weight:
        x_hat = codec.decode(z_hat)
        loss = loss + img_weight * 0.5 * ((x - x_hat) ** 2).sum()
    return weights.lam(t) * loss


def aug_sds_loss(prior, codec, x, t: float, cond, eps, weights: Optional[LossWeights] = None,
                 render: Optional[scene.RenderOutput] = None,
                 parts: Optional[dict] = None) -> torch.Tensor:
    """omega* times the latent+image SDS surrogate, plus omega_nz * L_nz for field renders.

    The depth-variance term is added only when ``render`` (a radiance-field
    render) is supplied; mesh phases pass ``None``.
    """
    weights = weights or LossWeights()
    fire("sds")
    sds = weights.star * sds_loss(prior, codec, x, t, cond, eps, weights, img_weight=weights.img)
    total = sds
    if parts is not None:
        parts["sds"] = scalar(sds)
    if render is not None:
        fire("nz")
        nz = scene.nz_loss(render)
        total = total + weights.nz * nz
        if parts is not None:
            parts["nz"] = scalar(nz)
    return total


def cds_loss(prior, codec, x, t1: float, t2: float, cond, eps,
             weights: Optional[LossWeights] = None) -> torch.Tensor:
    """lambda(t2) * ||D(z_t1, t1) - sg D(z_hat_t2, t2)||^2 with one Euler step to t2.

    With a prior that does not carry autograd history the first branch passes
    gradients straight through to ``z_t1``.
    """
    weights = weights or LossWeights()
    if t1 < t2:
        raise DomainError(f"consistency step needs t1 >= t2, got t1={t1}, t2={t2}")
    fire("cds")
    s1, s2 = prior.schedule.sigma(t1), prior.schedule.sigma(t2)
    _, z1 = _noisy_latent(codec, x, s1, eps)
    if getattr(prior, "differentiable", False):
        d1 = prior.denoise(z1, t1, cond)
    else:
        with torch.no_grad():
            d1_val = prior.denoise(z1.detach(), t1, cond)
        # value exactly D1, gradient passed through to z_t1
        d1 = d1_val + (z1 - z1.detach())
    with torch.no_grad():
        z2 = z1 + ((s2 - s1) / s1) * (z1 - d1)
        d2 = prior.denoise(z2, t2, cond)
    return weights.lam(t2) * ((d1 - d2) ** 2).sum()


# -- view-conditioned distillation --------------------------------------------------

def view_condition(ref: ReferenceView, pose: CameraPose, image_kind: str = "rgb") -> ViewCondition:
    R, T = relative_transform(ref.pose, pose)
    return ViewCondition(ref.image, R, T, ref.pose, pose.fov, image_kind)


def sds3d_grad(prior3d, codec, x, t: float, ref: ReferenceView, pose: CameraPose, eps,
               weights: Optional[LossWeights] = None, image_kind: str = "rgb"):
    return sds_grad(prior3d, codec, x, t, view_condition(ref, pose, image_kind), eps, weights)


def sds3d_loss(prior3d, codec, x, t: float, ref: ReferenceView, pose: CameraPose, eps,
               weights: Optional[LossWeights] = None, image_kind: str = "rgb") -> torch.Tensor:
    """Unweighted 3D-aware SDS surrogate; ``stereo_loss`` applies omega_3d."""
    fire("sds3d")
    return sds_loss(prior3d, codec, x, t, view_condition(ref, pose, image_kind), eps, weights)


def ref_loss(render_at_ref, mask_pred, ref: ReferenceView,
             weights: Optional[LossWeights] = None) -> torch.Tensor:
    """omega_rgb ||m * (x_r - x_hat)||^2 + omega_mask ||m - clamp(alpha)||^2."""
    weights = weights or LossWeights()
    fire("ref")
    x = torch.as_tensor(render_at_ref, dtype=DTYPE)
    a = torch.as_tensor(mask_pred, dtype=DTYPE)
    if x.shape != ref.image.shape or a.shape != ref.mask.shape:
        raise ConfigError("reference render and mask must match the reference view")
    m = torch.from_numpy(ref.mask)
    rgb = ((m[..., None] * (torch.from_numpy(ref.image) - x)) ** 2).sum()
    msk = ((m - a.clamp(0.0, 1.0)) ** 2).sum()
    return weights.rgb * rgb + weights.mask * msk


# -- compositions ------------------------------------------------------------------------

Term = Union[torch.Tensor, Callable[[], torch.Tensor], None]


def _value(term: Term):
    return term() if callable(term) else term


def planar_loss(branch: str, weights: LossWeights, ms: Term, sds: Term = None,
                cds: Term = None) -> torch.Tensor:
    """omega_ms * L_MS plus either the augmented SDS (branch "S") or omega_cds * L_CDS ("C").

    Terms may be passed as zero-argument callables; only the selected branch is
    evaluated.
    """
    if branch not in ("S", "C"):
        raise ConfigError(f"planar branch must be 'S' or 'C', got {branch!r}")
    if sds is not None and cds is not None:
        raise ConfigError("planar supervision uses exactly one of the SDS and CDS branches")
    if branch == "S":
        if sds is None:
            raise ConfigError("branch 'S' needs an augmented SDS term")
        return weights.ms * _value(ms) + _value(sds)
    if cds is None:
        raise ConfigError("branch 'C' needs a CDS term")
    return weights.ms * _value(ms) + weights.cds * _value(cds)


def stereo_loss(weights: LossWeights, sds3d: Term, ref: Term) -> torch.Tensor:
    return weights.sds3d * _value(sds3d) + _value(ref)


def hybrid_loss(planar: Term, stereo: Term = None) -> torch.Tensor:
    p = _value(planar)
    return p if stereo is None else p + _value(stereo)


# -- logging ----------------------------------------------------------------------------

LOG_KEYS = ("ms", "sds", "cds", "sds3d", "ref", "nz", "reg", "total")


def breakdown_record(iteration: int, phase: int, parts: dict) -> dict:
    rec = {"iter": int(iteration), "phase": int(phase)}
    for k in LOG_KEYS:
        v = parts.get(k)
        rec[k] = None if v is None else scalar(v)
    return rec


def append_jsonl(path, records) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=False, allow_nan=True) + "\n")


def gaussian_eps(rng: np.random.Generator, shape) -> torch.Tensor:
    """Fixed Gaussian noise for one (iteration, view) drawn from the run RNG."""
    return torch.from_numpy(rng.standard_normal(size=shape))


def embedding_condition(C_m, pose: Optional[CameraPose] = None, image_kind: str = "rgb"):
    c = C_m.detach().numpy() if isinstance(C_m, torch.Tensor) else np.asarray(C_m)
    return EmbeddingCondition(c, pose, image_kind)
