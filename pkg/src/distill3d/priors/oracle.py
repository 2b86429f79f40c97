"""Known toy object and a view-conditioned oracle prior that returns its renders."""
from __future__ import annotations

import math
from typing import Optional, Sequence, Tuple

import numpy as np
import torch

from ..errors import DenoiserUnavailable
from ..scene import CameraPose, pixel_directions
from .base import Denoiser, EmbeddingCondition, IdentityCodec, ViewCondition
from .schedule import NoiseSchedule


class ToySphere:
    """Sphere at the origin with a smooth position-dependent color."""

    def __init__(self, radius: float = 0.4, colored: bool = True,
                 background: Sequence[float] = (1.0, 1.0, 1.0)):
        self.radius = float(radius)
        self.colored = colored
        self.background = np.asarray(background, dtype=np.float64)

    def color(self, p: np.ndarray) -> np.ndarray:
        if not self.colored:
            return np.full(p.shape, 0.7)
        return np.clip(0.5 + 0.4 * p / self.radius, 0.0, 1.0)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        return self.radius - np.linalg.norm(p, axis=-1)

    def render(self, pose: CameraPose, kind: str = "rgb") -> Tuple[np.ndarray, np.ndarray]:
        """Exact ray-cast image (H, W, 3) and mask (H, W)."""
        d = pixel_directions(pose)
        o = pose.center()
        b = d @ o
        c = o @ o - self.radius ** 2
        disc = b * b - c
        hit = disc >= 0
        t = -b - np.sqrt(np.where(hit, disc, 0.0))
        hit &= t > 0
        p = o[None, :] + t[:, None] * d
        img = np.broadcast_to(self.background, d.shape).copy()
        if kind == "rgb":
            img[hit] = self.color(p[hit])
        elif kind == "normal":
            R, _ = pose.world_to_camera()
            n = p[hit] / self.radius
            img[hit] = 0.5 * (n @ R.T + 1.0)
        elif kind == "mask":
            img[:] = 0.0
            img[hit] = 1.0
        else:
            raise ValueError(f"unknown render kind {kind!r}")
        H, W = pose.height, pose.width
        return img.reshape(H, W, 3), hit.reshape(H, W).astype(np.float64)


def ring_views(n: int = 12, elevation: float = 15.0) -> list:
    return [(elevation, -180.0 + 360.0 * k / n) for k in range(n)]


def _direction(el: float, az: float) -> np.ndarray:
    e, a = math.radians(el), math.radians(az)
    return np.array([math.cos(e) * math.cos(a), math.cos(e) * math.sin(a), math.sin(e)])


class MultiviewOracleDenoiser(Denoiser):
    """Returns the encoded render of a toy object from the stored view nearest the query.

    The query view comes from a ``ViewCondition`` (reference pose composed with the
    relative extrinsics) or from the render pose attached to an
    ``EmbeddingCondition``. Nearest means smallest angle between view directions;
    distance, fov and resolution follow the query.
    """

    name = "multiview_oracle"

    def __init__(self, obj, views: Sequence[Tuple[float, float]], codec=None,
                 schedule: Optional[NoiseSchedule] = None):
        super().__init__(schedule)
        self.obj = obj
        self.views = [tuple(map(float, v)) for v in views]
        self.codec = codec or IdentityCodec()
        self._dirs = np.array([_direction(*v) for v in self.views]).reshape(-1, 3)
        self._cache = {}

    def nearest_view(self, pose: CameraPose) -> int:
        if not self.views:
            raise DenoiserUnavailable("multiview oracle holds no stored views")
        cos = self._dirs @ _direction(pose.elevation, pose.azimuth)
        return int(np.argmax(cos))

    def target(self, pose: CameraPose, kind: str = "rgb") -> np.ndarray:
        k = self.nearest_view(pose)
        el, az = self.views[k]
        key = (k, round(pose.distance, 12), round(pose.fov, 12), pose.width, pose.height, kind)
        if key not in self._cache:
            stored = CameraPose(el, az, pose.distance, pose.fov, pose.width, pose.height)
            self._cache[key] = self.obj.render(stored, kind)[0]
        return self._cache[key]

    def denoise(self, z_t, t, cond):
        if not self.views:
            raise DenoiserUnavailable("multiview oracle holds no stored views")
        h, w = int(z_t.shape[1]), int(z_t.shape[2])
        if isinstance(cond, ViewCondition):
            pose = cond.target_pose(w, h)
        elif isinstance(cond, EmbeddingCondition) and cond.pose is not None:
            pose = cond.pose
        else:
            raise DenoiserUnavailable("multiview oracle needs a view condition or a render pose")
        img = torch.from_numpy(self.target(pose, cond.image_kind))
        return self.codec.encode(img).clone()
