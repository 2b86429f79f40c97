"""Turntable renders, embedding-consistency metrics and geometric error measures."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree

from .mesh import SurfaceMesh, render_mesh
from .scene import CameraPose

log = logging.getLogger(__name__)

N_FRAMES = 120
AZIMUTH_STEP = 3.0

# Figures reported for the full-scale system with pretrained encoders; kept for
# context and never compared against toy runs.
REPORTED = {"clip_r": 0.8050, "clip_i": 0.8554, "arcc": 0.4860, "clip_r_text": 0.8167}


@dataclass
class Turntable:
    frames: List[np.ndarray]
    poses: List[CameraPose]

    def __len__(self):
        return len(self.frames)


def turntable_poses(elevation: float = 15.0, distance: float = 2.5, fov: float = 40.0,
                    resolution: int = 64, n: int = N_FRAMES) -> List[CameraPose]:
    return [CameraPose(elevation, k * (360.0 / n), distance, fov, resolution, resolution)
            for k in range(n)]


def _renderer(obj) -> Callable[[CameraPose], np.ndarray]:
    if isinstance(obj, SurfaceMesh):
        def fn(pose):
            with torch.no_grad():
                return render_mesh(obj, pose, "color").image.numpy()
        return fn
    if hasattr(obj, "render"):
        return lambda pose: obj.render(pose)[0]
    if callable(obj):
        return obj
    raise TypeError(f"cannot render object of type {type(obj).__name__}")


def render_turntable(obj, elevation: float = 15.0, distance: float = 2.5, fov: float = 40.0,
                     resolution: int = 64) -> Turntable:
    """120 frames at azimuths 0, 3, ..., 357 degrees around ``obj``.

    ``obj`` is a ``SurfaceMesh``, anything with ``render(pose) -> (image, mask)``,
    or a plain callable ``pose -> image``.
    """
    fn = _renderer(obj)
    poses = turntable_poses(elevation, distance, fov, resolution)
    return Turntable([np.asarray(fn(p), dtype=np.float64) for p in poses], poses)


def _embed_all(encoder, frames) -> np.ndarray:
    with torch.no_grad():
        return np.stack([encoder.embed_image(torch.as_tensor(f)).numpy() for f in frames])


def _unit(v) -> np.ndarray:
    v = v.detach().numpy() if isinstance(v, torch.Tensor) else np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def arcc(audio_embedding, turntable: Turntable, encoder) -> float:
    """Mean cosine between a modality embedding and every frame embedding."""
    e = _unit(audio_embedding)
    F = _unit(_embed_all(encoder, turntable.frames))
    return float(np.mean(F @ e))


def clip_i(reference_image, turntable: Turntable, encoder) -> float:
    with torch.no_grad():
        r = _unit(encoder.embed_image(torch.as_tensor(np.asarray(reference_image))))
    F = _unit(_embed_all(encoder, turntable.frames))
    return float(np.mean(F @ r))


def clip_r(prompts, turntables: Sequence[Turntable], encoder, true_index: Optional[Sequence[int]] = None,
           per_object_best: bool = False) -> float:
    """Top-1 retrieval precision of each object's own prompt among ``prompts``.

    By default every frame retrieves independently and precision is averaged
    over frames, then objects. With ``per_object_best`` each prompt is scored by
    its best frame and one retrieval is made per object. Ties go to the lower
    prompt index.
    """
    P = _unit(np.asarray(prompts, dtype=np.float64))
    if len(np.unique(P.round(12), axis=0)) < len(P):
        log.info("duplicate prompt embeddings; ties resolve to the lower index")
    true_index = list(range(len(turntables))) if true_index is None else list(true_index)
    scores = []
    for tt, k in zip(turntables, true_index):
        sims = _unit(_embed_all(encoder, tt.frames)) @ P.T          # (frames, prompts)
        if per_object_best:
            scores.append(float(np.argmax(sims.max(axis=0)) == k))
        else:
            scores.append(float(np.mean(np.argmax(sims, axis=1) == k)))
    return float(np.mean(scores))


def metrics_record(clip_r_value: float, clip_i_value: float, arcc_value: float,
                   n_frames: int, encoder_name: str) -> dict:
    return {"clip_r": clip_r_value, "clip_i": clip_i_value, "arcc": arcc_value,
            "n_frames": int(n_frames), "encoder": encoder_name}


# -- geometry -----------------------------------------------------------------------------

def sample_surface(mesh: SurfaceMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-weighted uniform samples on the mesh surface."""
    v = mesh.vertices.detach().numpy()
    f = mesh.faces.numpy()
    if len(f) == 0:
        return np.zeros((0, 3))
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    idx = rng.choice(len(f), size=n, p=area / area.sum())
    u, w = rng.random(n), rng.random(n)
    flip = u + w > 1
    u[flip], w[flip] = 1 - u[flip], 1 - w[flip]
    return a[idx] + u[:, None] * (b[idx] - a[idx]) + w[:, None] * (c[idx] - a[idx])


def sample_sphere(radius: float, n: int, rng: np.random.Generator) -> np.ndarray:
    p = rng.normal(size=(n, 3))
    return radius * p / np.linalg.norm(p, axis=1, keepdims=True)


def chamfer_distance(A: np.ndarray, B: np.ndarray) -> float:
    """Mean of the two one-sided mean nearest-neighbour distances."""
    if len(A) == 0 or len(B) == 0:
        return float("inf")
    da, _ = cKDTree(B).query(A)
    db, _ = cKDTree(A).query(B)
    return 0.5 * (float(da.mean()) + float(db.mean()))


def turntable_pixel_error(turntable: Turntable, oracle) -> float:
    """Mean absolute pixel difference between turntable frames and oracle renders."""
    fn = _renderer(oracle)
    errs = [np.abs(f - fn(p)).mean() for f, p in zip(turntable.frames, turntable.poses)]
    return float(np.mean(errs))
