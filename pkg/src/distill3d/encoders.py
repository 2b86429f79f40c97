"""Aligned image/modality encoders, image augmentations, InfoNCE and the MS loss."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, EmbeddingError
from .scene import DTYPE

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)


def _as_image(image) -> torch.Tensor:
    x = torch.as_tensor(image)
    if x.dtype != DTYPE:
        x = x.to(DTYPE)
    if x.ndim != 3 or x.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {tuple(x.shape)}")
    return x


def normalize_embedding(v) -> torch.Tensor:
    v = torch.as_tensor(v, dtype=DTYPE)
    n = v.norm()
    if not torch.isfinite(n) or n < 1e-12:
        raise EmbeddingError("feature vector is degenerate and cannot be normalised")
    return v / n


class ToyEncoder:
    """Deterministic differentiable featurizer standing in for an aligned encoder.

    An image is area-downsampled to 8x8, split into a centred grayscale channel
    and two opponent-color channels, projected by a seeded Gaussian matrix and
    normalised.
    """

    name = "toy"
    differentiable = True

    def __init__(self, dim: int = 64, seed: int = 0):
        self.dim = int(dim)
        self.seed = int(seed)
        rng = np.random.default_rng(seed)
        self.proj = torch.from_numpy(rng.normal(size=(self.dim, 192)) / math.sqrt(192.0))

    def features(self, image) -> torch.Tensor:
        x = _as_image(image)
        if x.shape[0] < 8 or x.shape[1] < 8:
            raise ValueError("encoder input must be at least 8x8 pixels")
        pooled = F.adaptive_avg_pool2d(x.permute(2, 0, 1)[None], 8)[0]
        r, g, b = pooled[0], pooled[1], pooled[2]
        gray = (r + g + b) / 3.0 - 0.5
        rg = r - g
        yb = 0.5 * (r + g) - b
        return torch.cat([gray.reshape(-1), rg.reshape(-1), yb.reshape(-1)])

    def embed_image(self, image) -> torch.Tensor:
        return normalize_embedding(self.proj @ self.features(image))

    def embed_modality(self, token) -> torch.Tensor:
        t = torch.as_tensor(np.asarray(token) if not isinstance(token, torch.Tensor) else token)
        if t.ndim == 3:
            return self.embed_image(t)
        if t.numel() != self.dim:
            raise ValueError(f"modality embedding has {t.numel()} values, encoder dim is {self.dim}")
        return normalize_embedding(t.reshape(-1))


class RemoteEncoder:
    """Image embedder served over the remote-prior wire protocol (``embed`` op)."""

    name = "remote"
    differentiable = False

    def __init__(self, host: str, port: int, dim: int = 64, timeout: float = 30.0):
        from .priors.remote import RemoteClient
        self.client = RemoteClient(host, port, timeout)
        self.dim = int(dim)

    def embed_image(self, image) -> torch.Tensor:
        import json
        from .priors.remote import PROTOCOL_VERSION, decode_response, encode_floats
        x = _as_image(image).detach().permute(2, 0, 1).numpy()
        msg = {"v": PROTOCOL_VERSION, "op": "embed", "shape": list(x.shape), "image": encode_floats(x)}
        line = self.client.roundtrip((json.dumps(msg, separators=(",", ":")) + "\n").encode())
        out = decode_response(line, (self.dim,), key="embedding")
        return normalize_embedding(out.astype(np.float64))

    def embed_modality(self, token) -> torch.Tensor:
        t = torch.as_tensor(np.asarray(token))
        if t.ndim == 3:
            return self.embed_image(t)
        return normalize_embedding(t.reshape(-1))


def embed_image(encoder, image) -> torch.Tensor:
    e = encoder.embed_image(image)
    assert abs(float(e.norm()) - 1.0) < 1e-6
    return e


def embed_modality(encoder, token) -> torch.Tensor:
    e = encoder.embed_modality(token)
    assert abs(float(e.norm()) - 1.0) < 1e-6
    return e


# -- augmentations --------------------------------------------------------------

@dataclass
class AugmentationSpec:
    n: int = 4
    weights: Optional[Sequence[float]] = None
    jitter: float = 0.15
    crop_area: Tuple[float, float] = (0.5, 0.9)
    mean: Tuple[float, float, float] = CLIP_MEAN
    std: Tuple[float, float, float] = CLIP_STD
    omega_g: float = 1.0
    omega_l: float = 1.0
    omega_z: float = 1.0
    _w: list = field(init=False, repr=False)

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("augmentation count n must be at least 1")
        w = [1.0 / self.n] * self.n if self.weights is None else [float(x) for x in self.weights]
        if len(w) != self.n or any(x < 0 for x in w):
            raise ConfigError("augmentation weights must be n nonnegative values")
        if not 0.0 <= self.jitter < 0.5:
            raise ConfigError("perspective jitter must lie in [0, 0.5)")
        lo, hi = self.crop_area
        if not 0.0 < lo <= hi <= 1.0:
            raise ConfigError("crop area range must satisfy 0 < lo <= hi <= 1")
        if any(s <= 0 for s in self.std):
            raise ConfigError("normalisation std must be positive")
        self._w = w

    @property
    def W(self) -> list:
        return self._w


def homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """3x3 H with dst ~ H @ [src, 1] for four point pairs."""
    A, b = [], []
    for (x, y), (u, v) in zip(src, dst):
        A.append([x, y, 1, 0, 0, 0, -u * x, -u * y])
        A.append([0, 0, 0, x, y, 1, -v * x, -v * y])
        b.extend([u, v])
    h = np.linalg.solve(np.array(A, dtype=np.float64), np.array(b, dtype=np.float64))
    return np.append(h, 1.0).reshape(3, 3)


def sample_bilinear(img: torch.Tensor, xs: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup at continuous pixel coordinates (pixel i spans [i, i+1]); border clamp."""
    H, W = img.shape[:2]
    fx = (xs - 0.5).clamp(0.0, W - 1.0)
    fy = (ys - 0.5).clamp(0.0, H - 1.0)
    x0 = torch.floor(fx).long().clamp(0, max(W - 2, 0))
    y0 = torch.floor(fy).long().clamp(0, max(H - 2, 0))
    wx = (fx - x0.to(fx.dtype))[..., None]
    wy = (fy - y0.to(fy.dtype))[..., None]
    x1 = (x0 + 1).clamp(max=W - 1)
    y1 = (y0 + 1).clamp(max=H - 1)
    top = img[y0, x0] * (1 - wx) + img[y0, x1] * wx
    bot = img[y1, x0] * (1 - wx) + img[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def _warp(img: torch.Tensor, Hm: np.ndarray, crop=None) -> torch.Tensor:
    """Resample ``img``: output pixel centre -> Hm -> (optional crop box) -> source."""
    H, W = img.shape[:2]
    ys, xs = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    pts = np.stack([xs, ys, np.ones_like(xs)], axis=-1) @ Hm.T
    sx, sy = pts[..., 0] / pts[..., 2], pts[..., 1] / pts[..., 2]
    if crop is not None:
        cx, cy, cw, ch = crop
        sx = cx + sx * (cw / W)
        sy = cy + sy * (ch / H)
    return sample_bilinear(img, torch.from_numpy(sx), torch.from_numpy(sy))


def sample_params(kind: str, spec: AugmentationSpec, rng: np.random.Generator, height: int,
                  width: int) -> dict:
    if kind == "Z":
        return {}
    if kind not in ("G", "L"):
        raise ConfigError(f"unknown augmentation kind {kind!r}")
    params = {}
    if kind == "L":
        area = rng.uniform(*spec.crop_area)
        side = math.sqrt(area)
        cw = max(4.0, min(width, side * width))
        ch = max(4.0, min(height, side * height))
        cx = rng.uniform(0.0, width - cw) if width > cw else 0.0
        cy = rng.uniform(0.0, height - ch) if height > ch else 0.0
        params["crop"] = (cx, cy, cw, ch)
    params["offsets"] = rng.uniform(-spec.jitter, spec.jitter, size=(4, 2)) * np.array([width, height])
    return params


def apply_augmentation(image, kind: str, params: dict, spec: AugmentationSpec) -> torch.Tensor:
    x = _as_image(image)
    if kind == "Z":
        mean = torch.tensor(spec.mean, dtype=DTYPE)
        std = torch.tensor(spec.std, dtype=DTYPE)
        return (x - mean) / std
    H, W = x.shape[:2]
    off = params["offsets"]
    if np.all(off == 0):
        Hm = np.eye(3)
    else:
        corners = np.array([[0.0, 0.0], [W, 0.0], [W, H], [0.0, H]])
        Hm = homography(corners, corners + off)
    crop = params.get("crop")
    if crop is None and Hm is not None and np.array_equal(Hm, np.eye(3)):
        return x
    return _warp(x, Hm, crop)


def augment(image, kind: str, spec: AugmentationSpec, rng: np.random.Generator) -> torch.Tensor:
    """G: perspective warp; L: random crop resized back, then warp; Z: per-channel normalisation."""
    x = _as_image(image)
    return apply_augmentation(x, kind, sample_params(kind, spec, rng, x.shape[0], x.shape[1]), spec)


def denormalize(image, spec: AugmentationSpec) -> torch.Tensor:
    x = _as_image(image)
    return x * torch.tensor(spec.std, dtype=DTYPE) + torch.tensor(spec.mean, dtype=DTYPE)


# -- losses -----------------------------------------------------------------------

def infonce(x, positive_index: int, all_y, temperature: float = 0.07) -> torch.Tensor:
    """-log softmax of the positive pair among ``all_y`` at temperature ``temperature``."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    x = torch.as_tensor(x, dtype=DTYPE)
    Y = torch.as_tensor(all_y, dtype=DTYPE).reshape(-1, x.numel())
    if not 0 <= positive_index < Y.shape[0]:
        raise IndexError("positive index out of range")
    logits = Y @ x / temperature
    return torch.logsumexp(logits, dim=0) - logits[positive_index]


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a * b).sum() / (a.norm() * b.norm())


def ms_loss(C_m, images, encoder, spec: Optional[AugmentationSpec] = None,
            rng: Optional[np.random.Generator] = None, parts: Optional[dict] = None) -> torch.Tensor:
    """Negated weighted cosine alignment between ``C_m`` and augmented renders.

    Each of the ``n`` augmentations of a given kind draws one parameter set that
    is applied to every image, so the result does not depend on image order.
    Per-kind similarity sums are written to ``parts`` when given.
    """
    spec = spec or AugmentationSpec()
    rng = rng if rng is not None else np.random.default_rng(0)
    C = torch.as_tensor(np.asarray(C_m) if not isinstance(C_m, torch.Tensor) else C_m, dtype=DTYPE)
    imgs = [_as_image(x) for x in images]
    if not imgs:
        raise ValueError("ms_loss needs at least one rendered image")
    H, W = imgs[0].shape[:2]
    total = torch.zeros((), dtype=DTYPE)
    for kind, omega in (("G", spec.omega_g), ("L", spec.omega_l), ("Z", spec.omega_z)):
        part = torch.zeros((), dtype=DTYPE)
        if kind == "Z":
            sims = [cosine(C, encoder.embed_image(apply_augmentation(x, "Z", {}, spec))) for x in imgs]
            part = sum(spec.W) * torch.stack(sims).mean()
        else:
            for i in range(spec.n):
                p = sample_params(kind, spec, rng, H, W)
                sims = [cosine(C, encoder.embed_image(apply_augmentation(x, kind, p, spec))) for x in imgs]
                part = part + spec.W[i] * torch.stack(sims).mean()
        if parts is not None:
            parts[kind] = float(part)
        total = total + omega * part
    return -total
