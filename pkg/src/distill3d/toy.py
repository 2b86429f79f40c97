"""Fixture writer for the toy sphere scene used by tests, docs and smoke runs."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .config import write_embedding
from .encoders import ToyEncoder
from .imageio import write_ppm
from .priors import ToySphere
from .scene import CameraPose

REFERENCE_POSE = {"elevation": 15.0, "azimuth": 0.0, "distance": 2.5, "fov": 40.0}


def toy_config(**overrides) -> dict:
    cfg = {
        "seed": 0,
        "output_dir": "out",
        "prior2d": {"type": "multiview_oracle", "object": {"radius": 0.4}, "views": 12,
                    "view_elevation": 15.0},
        "prior3d": {"type": "multiview_oracle", "object": {"radius": 0.4}, "views": 12,
                    "view_elevation": 15.0},
        "encoder": {"type": "toy", "dim": 64, "seed": 0},
        "prompt": {"kind": "embedding", "path": "prompt.f32"},
        "reference": {"image": "reference.ppm", "mask": "mask.ppm", "pose": dict(REFERENCE_POSE)},
        "field": {"resolution": 32, "bbox": 0.6},
        "tets": {"resolution": 16, "threshold": 10.0},
        "metrics": {"distractors": 7},
    }
    cfg.update(overrides)
    return cfg


def write_toy_fixtures(directory, resolution: int = 64, **overrides) -> Path:
    """Write reference view, mask, prompt embedding and ``toy.json`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    sphere = ToySphere(0.4)
    pose = CameraPose(width=resolution, height=resolution, **REFERENCE_POSE)
    img, mask = sphere.render(pose)
    write_ppm(d / "reference.ppm", img)
    write_ppm(d / "mask.ppm", np.repeat(mask[..., None], 3, axis=2))
    with torch.no_grad():
        emb = ToyEncoder().embed_image(torch.from_numpy(img)).numpy()
    write_embedding(d / "prompt.f32", emb)
    path = d / "toy.json"
    path.write_text(json.dumps(toy_config(**overrides), indent=2) + "\n")
    return path
