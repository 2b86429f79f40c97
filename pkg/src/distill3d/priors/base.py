"""Denoiser contract, conditions, latent codec and the analytic Gaussian-mixture prior."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from ..errors import ConfigError, DenoiserUnavailable
from ..scene import DTYPE, CameraPose
from .schedule import NoiseSchedule


@dataclass
class EmbeddingCondition:
    """Modality-embedding condition for the 2D prior.

    ``pose`` and ``image_kind`` describe how the noisy image was rendered. Learned
    priors ignore them; view-aware test oracles use them to pick a target.
    """

    embedding: np.ndarray
    pose: Optional[CameraPose] = None
    image_kind: str = "rgb"

    def __post_init__(self):
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        n = float(np.linalg.norm(self.embedding))
        if abs(n - 1.0) > 1e-6:
            raise ConfigError(f"condition embedding must be unit norm, got {n}")


@dataclass
class ViewCondition:
    """Reference view plus relative extrinsics (R, T) of the desired view."""

    reference_image: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    reference_pose: CameraPose
    fov: float
    image_kind: str = "rgb"

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-8) or np.linalg.det(R) < 0:
            raise ConfigError("relative rotation must be orthonormal with det +1")

    def target_pose(self, width: int, height: int) -> CameraPose:
        R_ref, t_ref = self.reference_pose.world_to_camera()
        R = self.rotation @ R_ref
        t = self.translation + self.rotation @ t_ref
        c = -R.T @ t
        dist = float(np.linalg.norm(c))
        el = math.degrees(math.asin(max(-1.0, min(1.0, c[2] / dist))))
        az = math.degrees(math.atan2(c[1], c[0]))
        return CameraPose(el, az, dist, self.fov, width, height)


def relative_transform(ref_pose: CameraPose, pose: CameraPose):
    """(R, T) mapping reference-camera coordinates to ``pose`` camera coordinates."""
    R_r, t_r = ref_pose.world_to_camera()
    R_p, t_p = pose.world_to_camera()
    R = R_p @ R_r.T
    return R, t_p - R @ t_r


class IdentityCodec:
    """Latent space equals image space; images (H, W, 3) map to latents (3, H, W)."""

    name = "identity"

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        return image.permute(2, 0, 1)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        return latent.permute(1, 2, 0)


class Denoiser:
    """x0-predicting denoiser D(z_t, t, cond).

    Subclasses must be pure functions of their inputs. ``differentiable`` marks
    priors whose output carries autograd history with respect to ``z_t``.
    """

    differentiable = False
    name = "denoiser"

    def __init__(self, schedule: Optional[NoiseSchedule] = None):
        self.schedule = schedule or NoiseSchedule()

    def denoise(self, z_t: torch.Tensor, t: float, cond) -> torch.Tensor:
        raise NotImplementedError

    def __call__(self, z_t, t, cond):
        return self.denoise(z_t, t, cond)


class ConstantDenoiser(Denoiser):
    """Returns a stored target regardless of its input."""

    name = "constant"

    def __init__(self, target, schedule: Optional[NoiseSchedule] = None):
        super().__init__(schedule)
        self.target = torch.as_tensor(np.asarray(target, dtype=np.float64))

    def denoise(self, z_t, t, cond):
        return self.target.expand_as(z_t).clone()


@dataclass
class GaussianMixture:
    weights: Sequence[float]
    means: Sequence  # scalars or arrays broadcastable to the latent shape
    stds: Sequence[float]
    _means: list = field(init=False, repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if len(w) == 0 or not (len(w) == len(self.means) == len(self.stds)):
            raise ConfigError("mixture weights, means and stds must have equal nonzero length")
        if abs(w.sum() - 1.0) > 1e-9 or (w < 0).any():
            raise ConfigError("mixture weights must be nonnegative and sum to 1")
        if any(s < 0 for s in self.stds):
            raise ConfigError("mixture stds must be nonnegative")
        self._means = [torch.as_tensor(np.asarray(m, dtype=np.float64)) for m in self.means]


def gm_posterior_mean(mixture: GaussianMixture, z: torch.Tensor, sigma: float) -> torch.Tensor:
    """E[z0 | z_t = z] for z0 ~ sum_k pi_k N(mu_k, s_k^2 I) and z = z0 + sigma * eps."""
    d = z.numel()
    var_noise = sigma * sigma
    logits, parts = [], []
    for pi, mu, s in zip(mixture.weights, mixture._means, mixture.stds):
        mu = mu.expand_as(z)
        tot = s * s + var_noise
        if pi <= 0:
            continue
        logits.append(math.log(pi) - 0.5 * ((z - mu) ** 2).sum() / tot - 0.5 * d * math.log(tot))
        parts.append((s * s * z + var_noise * mu) / tot)
    r = torch.softmax(torch.stack(logits), dim=0)
    out = r[0] * parts[0]
    for k in range(1, len(parts)):
        out = out + r[k] * parts[k]
    return out


class GaussianMixtureDenoiser(Denoiser):
    """Exact posterior-mean denoiser for a Gaussian-mixture data distribution."""

    differentiable = True
    name = "gm"

    def __init__(self, mixture: GaussianMixture, schedule: Optional[NoiseSchedule] = None):
        super().__init__(schedule)
        self.mixture = mixture

    def denoise(self, z_t, t, cond=None):
        return gm_posterior_mean(self.mixture, z_t, self.schedule.sigma(t))


def gm_denoise(mixture: GaussianMixture, z_t: torch.Tensor, t: float,
               schedule: Optional[NoiseSchedule] = None) -> torch.Tensor:
    return gm_posterior_mean(mixture, z_t, (schedule or NoiseSchedule()).sigma(t))


def require(obj, what: str):
    if obj is None:
        raise DenoiserUnavailable(f"{what} is not configured")
    return obj
