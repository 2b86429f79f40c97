"""JSON run configuration: validation, path resolution and object construction."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import jsonschema
import numpy as np
import torch

from . import pipeline as P
from . import scene as S
from .checkpoint import config_hash
from .encoders import AugmentationSpec, RemoteEncoder, ToyEncoder, normalize_embedding
from .errors import ConfigError
from .imageio import read_ppm
from .losses import LossWeights, ReferenceView
from .priors import (GaussianMixture, GaussianMixtureDenoiser, MultiviewOracleDenoiser,
                     NoiseSchedule, RemotePrior, ToySphere, ring_views)

DEFAULT_POSE = {"distance": 2.5, "fov": 40.0}
_RANGE_KEYS = ("elevation", "azimuth", "distance", "fov")


def schema() -> dict:
    text = resources.files("distill3d").joinpath("config.schema.json").read_text()
    return json.loads(text)


def read_embedding(path) -> np.ndarray:
    """Little-endian float32 vector file, returned unit-normalised as float64."""
    raw = Path(path).read_bytes()
    if not raw or len(raw) % 4:
        raise ConfigError(f"{path}: embedding file must hold a whole number of float32 values")
    v = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return normalize_embedding(v).numpy()


def write_embedding(path, v) -> None:
    Path(path).write_bytes(np.asarray(v, dtype="<f4").tobytes())


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path
    seed: int = 0
    output_dir: Path = field(default_factory=lambda: Path("out"))

    def section(self, name: str) -> dict:
        return self.raw.get(name) or {}

    @property
    def stereo(self) -> bool:
        return bool(self.raw.get("stereo", True)) and self.raw.get("prior3d") is not None

    @property
    def hash(self) -> str:
        return config_hash(dict(self.raw, seed=self.seed))

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.base_dir / p


def _check_paths(cfg: RunConfig) -> None:
    checks = [("prompt.path", cfg.section("prompt").get("path"))]
    ref = cfg.section("reference")
    checks += [("reference.image", ref.get("image")), ("reference.mask", ref.get("mask"))]
    for name, rel in checks:
        if rel is not None and not cfg.path(rel).is_file():
            raise ConfigError(f"{name}: file not found: {cfg.path(rel)}")


def validate(raw: dict) -> None:
    try:
        jsonschema.validate(raw, schema())
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None
    for role in ("prior2d", "prior3d"):
        spec = raw.get(role)
        if spec and spec["type"] == "remote" and "address" not in spec:
            raise ConfigError(f"{role}.address: required for a remote prior")
    enc = raw["encoder"]
    if enc["type"] == "remote" and "address" not in enc:
        raise ConfigError("encoder.address: required for a remote encoder")


def from_dict(raw: dict, base_dir=".", seed: Optional[int] = None, out=None) -> RunConfig:
    raw = copy.deepcopy(raw)
    validate(raw)
    base = Path(base_dir)
    cfg = RunConfig(raw, base, int(raw.get("seed", 0) if seed is None else seed))
    out_rel = out if out is not None else raw.get("output_dir", "out")
    cfg.output_dir = Path(out_rel) if out is not None or Path(out_rel).is_absolute() \
        else base / out_rel
    _check_paths(cfg)
    return cfg


def load(path, seed: Optional[int] = None, out=None) -> RunConfig:
    p = Path(path)
    try:
        raw = json.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{p}: top level must be an object")
    return from_dict(raw, p.parent, seed, out)


# -- construction --------------------------------------------------------------------

def build_schedule(cfg: RunConfig) -> NoiseSchedule:
    s = cfg.section("schedule")
    return NoiseSchedule(s.get("sigma_min", 0.05), s.get("sigma_max", 5.0), s.get("n_steps", 50))


def _address(spec: dict):
    host, port = spec["address"].rsplit(":", 1)
    return host, int(port)


def build_prior(spec: dict, schedule: NoiseSchedule):
    kind = spec["type"]
    if kind == "gm":
        mean = spec.get("mean", 0.5)
        return GaussianMixtureDenoiser(GaussianMixture([1.0], [mean], [spec.get("std", 0.0)]),
                                       schedule)
    if kind == "multiview_oracle":
        o = spec.get("object", {})
        obj = ToySphere(o.get("radius", 0.4), o.get("colored", True))
        views = ring_views(spec.get("views", 12), spec.get("view_elevation", 15.0))
        return MultiviewOracleDenoiser(obj, views, schedule=schedule)
    host, port = _address(spec)
    return RemotePrior(host, port, spec.get("timeout", 30.0), schedule)


def build_encoder(cfg: RunConfig):
    e = cfg.section("encoder")
    if e["type"] == "toy":
        return ToyEncoder(e.get("dim", 64), e.get("seed", 0))
    host, port = _address(e)
    return RemoteEncoder(host, port, e.get("dim", 64), e.get("timeout", 30.0))


def build_prompt(cfg: RunConfig, encoder) -> torch.Tensor:
    p = cfg.section("prompt")
    path = cfg.path(p["path"])
    if p["kind"] == "image":
        with torch.no_grad():
            return encoder.embed_image(torch.from_numpy(read_ppm(path))).detach()
    v = read_embedding(path)
    return encoder.embed_modality(v).detach()


def build_reference(cfg: RunConfig) -> Optional[ReferenceView]:
    ref = cfg.raw.get("reference")
    if ref is None:
        return None
    img = read_ppm(cfg.path(ref["image"]))
    if "mask" in ref:
        mask = (read_ppm(cfg.path(ref["mask"])).mean(axis=2) > 0.5).astype(np.float64)
    else:
        mask = (np.abs(img - 1.0).max(axis=2) > 1.5 / 255.0).astype(np.float64)
    pose = dict(DEFAULT_POSE, **ref["pose"])
    H, W = img.shape[:2]
    return ReferenceView(img, mask, S.CameraPose(pose["elevation"], pose["azimuth"],
                                                 pose["distance"], pose["fov"], W, H))


def build_weights(cfg: RunConfig) -> LossWeights:
    return LossWeights(**cfg.section("weights"))


def build_augment(cfg: RunConfig) -> AugmentationSpec:
    a = dict(cfg.section("augment"))
    for k in ("crop_area", "mean", "std"):
        if k in a:
            a[k] = tuple(a[k])
    return AugmentationSpec(**a)


def build_phases(cfg: RunConfig) -> list:
    phases = []
    defaults = {1: S.PHASE1_RANGES, 2: S.PHASE2_RANGES, 3: S.PHASE3_RANGES}
    for k in (1, 2, 3):
        over = dict(cfg.section("phases").get(str(k), {}))
        base = defaults[k]
        ranges = S.CameraRanges(*(tuple(over.pop(n, getattr(base, n))) for n in _RANGE_KEYS))
        phases.append(P.default_phase(k, ranges=ranges, stereo=cfg.stereo, **over))
    return phases


def build_field(cfg: RunConfig) -> S.VoxelRadianceField:
    f = cfg.section("field")
    bbox = f.get("bbox", 1.0)
    fld = S.VoxelRadianceField(f.get("resolution", 32), bbox)
    fld.init_blob(f.get("init_density", 40.0), f.get("init_radius", bbox))
    return fld


def build_engine(cfg: RunConfig, encoder=None) -> P.Engine:
    schedule = build_schedule(cfg)
    encoder = encoder or build_encoder(cfg)
    prior3d = cfg.raw.get("prior3d")
    t = cfg.section("tets")
    return P.Engine(
        prior2d=build_prior(cfg.raw["prior2d"], schedule),
        encoder=encoder,
        prompt=build_prompt(cfg, encoder),
        prior3d=build_prior(prior3d, schedule) if cfg.stereo else None,
        reference=build_reference(cfg),
        weights=build_weights(cfg),
        augment=build_augment(cfg),
        threshold=t.get("threshold", 10.0),
        tet_resolution=t.get("resolution", 16),
        t_range=tuple(cfg.section("schedule").get("t_range", (0.02, 0.98))),
    )


def build_state(cfg: RunConfig) -> P.PipelineState:
    return P.PipelineState(build_field(cfg), np.random.default_rng(cfg.seed))
