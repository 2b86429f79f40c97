"""Camera model, voxel radiance field and emission-absorption volume rendering."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError

DTYPE = torch.float64
Interval = Tuple[float, float]


@dataclass(frozen=True)
class CameraPose:
    """Orbit camera looking at the origin, +z up. Angles in degrees."""

    elevation: float
    azimuth: float
    distance: float
    fov: float = 40.0
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ConfigError(f"image size must be positive, got {self.width}x{self.height}")
        if not 0.0 < self.fov < 180.0:
            raise ConfigError(f"fov must lie in (0, 180), got {self.fov}")
        if self.distance <= 0.0:
            raise ConfigError(f"camera distance must be positive, got {self.distance}")
        if abs(self.elevation) >= 90.0:
            raise ConfigError(f"elevation must lie in (-90, 90), got {self.elevation}")

    def center(self) -> np.ndarray:
        el, az = math.radians(self.elevation), math.radians(self.azimuth)
        return self.distance * np.array(
            [math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)]
        )

    def frame(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Return (center, right, up, forward) in world coordinates."""
        c = self.center()
        forward = -c / np.linalg.norm(c)
        right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
        right /= np.linalg.norm(right)
        up = np.cross(right, forward)
        return c, right, up, forward

    def world_to_camera(self) -> Tuple[np.ndarray, np.ndarray]:
        """Extrinsics (R, t) with x_cam = R @ x_world + t; camera looks down -z."""
        c, right, up, forward = self.frame()
        R = np.stack([right, up, -forward])
        return R, -R @ c

    def tan_half_fov(self) -> Tuple[float, float]:
        ty = math.tan(math.radians(self.fov) / 2.0)
        return ty * self.width / self.height, ty

    def replace(self, **kw) -> "CameraPose":
        d = dict(self.__dict__)
        d.update(kw)
        return CameraPose(**d)


@dataclass(frozen=True)
class CameraRanges:
    """Sampling intervals for one optimization phase."""

    elevation: Interval = (-45.0, 45.0)
    azimuth: Interval = (-180.0, 180.0)
    distance: Interval = (2.5, 2.5)
    fov: Interval = (40.0, 40.0)

    def __post_init__(self):
        for name in ("elevation", "azimuth", "distance", "fov"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ConfigError(f"camera {name} interval [{lo}, {hi}] is empty or inverted")
        if self.elevation[0] <= -90.0 or self.elevation[1] >= 90.0:
            raise ConfigError("elevation interval must stay inside (-90, 90)")
        if self.distance[0] <= 0.0:
            raise ConfigError("distance interval must be positive")
        if self.fov[0] <= 0.0 or self.fov[1] >= 180.0:
            raise ConfigError("fov interval must stay inside (0, 180)")


# Coarse NeRF and texture phases share one camera setting; geometry refinement another.
PHASE1_RANGES = CameraRanges((-45.0, 45.0), (-180.0, 180.0), (2.5, 2.5), (40.0, 40.0))
PHASE2_RANGES = CameraRanges((-10.0, 45.0), (-135.0, 225.0), (1.5, 2.0), (30.0, 45.0))
PHASE3_RANGES = PHASE1_RANGES


def wrap_azimuth(az: float) -> float:
    if -180.0 <= az < 180.0:
        return az
    return (az + 180.0) % 360.0 - 180.0


def sample_camera(ranges: CameraRanges, rng: np.random.Generator, width: int = 64,
                  height: Optional[int] = None) -> CameraPose:
    """Draw a pose uniformly from ``ranges``; azimuth is wrapped into [-180, 180)."""
    height = width if height is None else height
    el = rng.uniform(*ranges.elevation)
    az = rng.uniform(*ranges.azimuth)
    dist = rng.uniform(*ranges.distance)
    fov = rng.uniform(*ranges.fov)
    return CameraPose(float(el), wrap_azimuth(float(az)), float(dist), float(fov), width, height)


@dataclass
class RayBatch:
    origins: torch.Tensor      # (N, 3)
    directions: torch.Tensor   # (N, 3), unit length
    pixels: torch.Tensor       # (N, 2) integer (row, col)
    height: int
    width: int

    def __len__(self):
        return self.origins.shape[0]


def pixel_directions(pose: CameraPose) -> np.ndarray:
    """Unit ray directions through pixel centers, row-major, shape (H*W, 3)."""
    _, right, up, forward = pose.frame()
    tx, ty = pose.tan_half_fov()
    cols = (np.arange(pose.width) + 0.5) / pose.width * 2.0 - 1.0
    rows = 1.0 - (np.arange(pose.height) + 0.5) / pose.height * 2.0
    x = (cols * tx)[None, :, None]
    y = (rows * ty)[:, None, None]
    d = forward[None, None, :] + x * right[None, None, :] + y * up[None, None, :]
    d = d.reshape(-1, 3)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def generate_rays(pose: CameraPose) -> RayBatch:
    d = pixel_directions(pose)
    o = np.broadcast_to(pose.center(), d.shape).copy()
    rr, cc = np.meshgrid(np.arange(pose.height), np.arange(pose.width), indexing="ij")
    pix = np.stack([rr.ravel(), cc.ravel()], axis=1)
    return RayBatch(torch.from_numpy(o), torch.from_numpy(d), torch.from_numpy(pix),
                    pose.height, pose.width)


def trilinear(grid: torch.Tensor, idx: torch.Tensor, with_grad: bool = False):
    """Trilinear interpolation of ``grid`` (R0, R1, R2, C) at index-space points (N, 3).

    Points outside ``[0, R-1]`` on any axis yield zeros. With ``with_grad`` the
    spatial derivative in index units, shape (N, 3, C), is returned as well; it is
    built from differentiable ops so it can itself be backpropagated.
    """
    R = grid.shape[:3]
    C = grid.shape[3]
    upper = torch.tensor([r - 1 for r in R], dtype=idx.dtype)
    inside = ((idx >= 0) & (idx <= upper)).all(dim=-1)
    base = torch.floor(idx.detach()).long()
    base = torch.minimum(base.clamp(min=0), torch.tensor([max(r - 2, 0) for r in R]))
    f = idx - base.to(idx.dtype)
    flat = grid.reshape(-1, C)
    i, j, k = base.unbind(-1)

    def at(di, dj, dk):
        return flat[((i + di) * R[1] + (j + dj)) * R[2] + (k + dk)]

    fx, fy, fz = f[:, 0:1], f[:, 1:2], f[:, 2:3]
    c000, c100, c010, c110 = at(0, 0, 0), at(1, 0, 0), at(0, 1, 0), at(1, 1, 0)
    c001, c101, c011, c111 = at(0, 0, 1), at(1, 0, 1), at(0, 1, 1), at(1, 1, 1)
    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    val = c0 * (1 - fz) + c1 * fz
    mask = inside.to(val.dtype)[:, None]
    val = val * mask
    if not with_grad:
        return val
    gx = ((c100 - c000) * (1 - fy) + (c110 - c010) * fy) * (1 - fz) + \
         ((c101 - c001) * (1 - fy) + (c111 - c011) * fy) * fz
    gy = (c10 - c00) * (1 - fz) + (c11 - c01) * fz
    gz = c1 - c0
    grad = torch.stack([gx, gy, gz], dim=1) * mask[:, None, :]
    return val, grad


class VoxelRadianceField:
    """Density and color stored on the vertices of a dense cubic grid.

    density = softplus(density_gain * raw), color = sigmoid(color_gain * raw).
    The gains put grid parameters in the step-size regime that a 0.01 Adam
    learning rate expects.
    """

    def __init__(self, resolution: int = 32, bbox: float = 1.0, *,
                 density_activation: str = "softplus", density_gain: float = 10.0,
                 color_gain: float = 5.0, background: Sequence[float] = (1.0, 1.0, 1.0)):
        if resolution < 2:
            raise ConfigError("field resolution must be at least 2")
        if density_activation not in ("softplus", "relu"):
            raise ConfigError(f"unknown density activation {density_activation!r}")
        self.resolution = int(resolution)
        self.bbox = float(bbox)
        self.density_activation = density_activation
        self.density_gain = float(density_gain)
        self.color_gain = float(color_gain)
        self.background = torch.tensor(background, dtype=DTYPE)
        R = self.resolution
        self.density_raw = torch.zeros((R, R, R), dtype=DTYPE, requires_grad=True)
        self.color_raw = torch.zeros((R, R, R, 3), dtype=DTYPE, requires_grad=True)

    @property
    def spacing(self) -> float:
        return 2.0 * self.bbox / (self.resolution - 1)

    def vertex_positions(self) -> torch.Tensor:
        ax = torch.linspace(-self.bbox, self.bbox, self.resolution, dtype=DTYPE)
        g = torch.stack(torch.meshgrid(ax, ax, ax, indexing="ij"), dim=-1)
        return g

    def parameters(self):
        return {"density_raw": self.density_raw, "color_raw": self.color_raw}

    def density_grid(self) -> torch.Tensor:
        if self.density_activation == "relu":
            return torch.relu(self.density_raw)
        return F.softplus(self.density_gain * self.density_raw)

    def color_grid(self) -> torch.Tensor:
        if self.density_activation == "relu":
            return self.color_raw.clamp(0.0, 1.0)
        return torch.sigmoid(self.color_gain * self.color_raw)

    def to_index(self, points: torch.Tensor) -> torch.Tensor:
        return (points + self.bbox) / self.spacing

    def query(self, points: torch.Tensor):
        """Density (N,) and color (N, 3) at world points (N, 3)."""
        idx = self.to_index(points)
        grid = torch.cat([self.density_grid()[..., None], self.color_grid()], dim=-1)
        upper = self.resolution - 1
        inside = ((idx.detach() >= 0) & (idx.detach() <= upper)).all(dim=-1)
        # outside points interpolate to exact zeros, so only the inside ones are looked up
        sel = torch.nonzero(inside).reshape(-1)
        val = torch.zeros((idx.shape[0], 4), dtype=grid.dtype)
        if sel.numel():
            val = val.index_put((sel,), trilinear(grid, idx[sel]))
        color = torch.where(inside[:, None], val[:, 1:], self.background.expand_as(val[:, 1:]))
        return val[:, 0], color

    def query_color(self, points: torch.Tensor) -> torch.Tensor:
        return self.query(points)[1]

    def density_and_gradient(self, points: torch.Tensor):
        """Density (N,) and its world-space gradient (N, 3), both differentiable."""
        idx = self.to_index(points)
        val, g = trilinear(self.density_grid()[..., None], idx, with_grad=True)
        return val[:, 0], g[:, :, 0] / self.spacing

    # -- construction helpers -------------------------------------------------
    @classmethod
    def from_grids(cls, density: np.ndarray, color: Optional[np.ndarray] = None,
                   bbox: float = 1.0, **kw) -> "VoxelRadianceField":
        """Exact-valued field: density and color are stored as given (relu/clamp)."""
        density = np.asarray(density, dtype=np.float64)
        R = density.shape[0]
        field = cls(R, bbox, density_activation="relu", **kw)
        with torch.no_grad():
            field.density_raw.copy_(torch.from_numpy(density))
            if color is not None:
                field.color_raw.copy_(torch.from_numpy(np.asarray(color, dtype=np.float64)))
            else:
                field.color_raw.fill_(0.5)
        return field

    @classmethod
    def from_functions(cls, density_fn, color_fn=None, resolution: int = 16, bbox: float = 1.0,
                       **kw) -> "VoxelRadianceField":
        """Sample callables of (R, R, R, 3) vertex positions onto an exact-valued grid."""
        ax = np.linspace(-bbox, bbox, resolution)
        P = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1)
        density = density_fn(P)
        color = None if color_fn is None else color_fn(P)
        return cls.from_grids(density, color, bbox, **kw)

    def init_blob(self, density: float = 40.0, radius: float = 0.6) -> None:
        """Initialise with a centred density blob peaking at ``density``."""
        P = self.vertex_positions()
        r = P.norm(dim=-1)
        target = (density * (1.0 - r / radius)).clamp(min=1e-3)
        # inverse softplus of the target, divided by the gain
        raw = (target + torch.log(-torch.expm1(-target))) / self.density_gain
        with torch.no_grad():
            self.density_raw.copy_(raw)


def query_field(field: VoxelRadianceField, point) -> Tuple[float, np.ndarray]:
    p = torch.as_tensor(np.asarray(point, dtype=np.float64).reshape(1, 3))
    with torch.no_grad():
        d, c = field.query(p)
    return float(d[0]), c[0].numpy()


@dataclass
class RenderOutput:
    rgb: torch.Tensor       # (H, W, 3)
    alpha: torch.Tensor     # (H, W)
    depth: torch.Tensor     # (H, W)
    weights: torch.Tensor   # (N, S)
    z: torch.Tensor         # (N, S)
    delta: float

    @property
    def foreground(self) -> torch.Tensor:
        """Rays whose weight mass exceeds one half, flattened (N,)."""
        return self.weights.sum(dim=1) > 0.5


def near_far(pose: CameraPose, bbox: float) -> Tuple[float, float]:
    r = math.sqrt(3.0) * bbox
    return max(pose.distance - r, 1e-3), pose.distance + r


def render_volume(field: VoxelRadianceField, rays: RayBatch, n_samples: int = 64,
                  near: float = 1.0, far: float = 4.0,
                  rng: Optional[np.random.Generator] = None) -> RenderOutput:
    """Stratified emission-absorption compositing of ``field`` along ``rays``.

    Each sample sits in a bin of width ``delta = (far - near) / n_samples`` with
    optional jitter drawn from ``rng``; the bin width is used as the sample
    spacing so that a constant medium integrates exactly.
    """
    if n_samples < 2:
        raise ConfigError("n_samples must be at least 2")
    if not near < far:
        raise ConfigError(f"near ({near}) must be smaller than far ({far})")
    N = len(rays)
    S = int(n_samples)
    delta = (far - near) / S
    if rng is None:
        u = torch.full((N, S), 0.5, dtype=DTYPE)
    else:
        u = torch.from_numpy(rng.random((N, S)))
    z = near + (torch.arange(S, dtype=DTYPE)[None, :] + u) * delta
    pts = rays.origins[:, None, :] + z[..., None] * rays.directions[:, None, :]
    sigma, color = field.query(pts.reshape(-1, 3))
    sigma = sigma.reshape(N, S)
    color = color.reshape(N, S, 3)
    tau = sigma * delta
    alpha = -torch.expm1(-tau)
    tau_before = torch.cumsum(tau, dim=1) - tau
    w = alpha * torch.exp(-tau_before)
    acc = w.sum(dim=1)
    rgb = (w[..., None] * color).sum(dim=1) + (1.0 - acc)[:, None] * field.background
    safe = torch.where(acc > 0, acc, torch.ones_like(acc))
    depth = torch.where(acc > 0, (w * z).sum(dim=1) / safe, torch.zeros_like(acc))
    H, W = rays.height, rays.width
    return RenderOutput(rgb.reshape(H, W, 3), acc.reshape(H, W), depth.reshape(H, W), w, z, delta)


def render_field(field: VoxelRadianceField, pose: CameraPose, n_samples: int = 64,
                 rng: Optional[np.random.Generator] = None) -> RenderOutput:
    near, far = near_far(pose, field.bbox)
    return render_volume(field, generate_rays(pose), n_samples, near, far, rng)


def z_variance(weights: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Per-ray weighted variance of sample depths; zero where the weights vanish."""
    acc = weights.sum(dim=1, keepdim=True)
    safe = torch.where(acc > 0, acc, torch.ones_like(acc))
    wn = weights / safe
    dz = (wn * z).sum(dim=1, keepdim=True)
    return (wn * (z - dz) ** 2).sum(dim=1)


def nz_loss(render: RenderOutput) -> torch.Tensor:
    """Mean over rays of the depth variance, counting only rays with weight mass > 0.5."""
    var = z_variance(render.weights, render.z)
    fg = (render.weights.sum(dim=1) > 0.5).to(var.dtype)
    return (fg * var).mean()
