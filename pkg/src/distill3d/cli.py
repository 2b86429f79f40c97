"""Command line: ``distill3d generate | eval | gradcheck``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import checkpoint as ckpt
from . import config as C
from . import gradcheck as G
from . import metrics as Me
from . import pipeline as P
from .errors import ConfigError, ConversionError, DenoiserUnavailable, PhaseAbort
from .imageio import write_ppm
from .losses import append_jsonl
from .mesh import SurfaceMesh, export_obj, marching_tets, parse_obj

log = logging.getLogger("distill3d")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def setup_logging() -> None:
    level = {"debug": logging.DEBUG, "info": logging.INFO}.get(
        os.environ.get("X3D_LOG", "").lower(), logging.WARNING)
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    log.setLevel(level)


def prompt_set(cfg: C.RunConfig, prompt: torch.Tensor) -> np.ndarray:
    """The run prompt followed by seeded random distractor embeddings."""
    m = cfg.section("metrics")
    n = m.get("distractors", 7)
    rng = np.random.default_rng(m.get("distractor_seed", 0))
    d = rng.standard_normal((n, prompt.numel()))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.vstack([prompt.detach().numpy()[None], d])


def evaluate(cfg: C.RunConfig, mesh: SurfaceMesh, engine: P.Engine):
    m = cfg.section("metrics")
    if mesh.n_faces == 0:
        log.warning("mesh is empty; metrics are computed over background-only frames")
    tt = Me.render_turntable(mesh, m.get("elevation", 15.0), m.get("distance", 2.5),
                             m.get("fov", 40.0), m.get("resolution", 64))
    enc = engine.encoder
    ref_img = engine.reference.image if engine.reference is not None else tt.frames[0]
    record = Me.metrics_record(
        Me.clip_r(prompt_set(cfg, engine.prompt), [tt], enc,
                  per_object_best=m.get("per_object_best", False)),
        Me.clip_i(ref_img, tt, enc),
        Me.arcc(engine.prompt, tt, enc),
        len(tt), getattr(enc, "name", type(enc).__name__))
    return record, tt


def write_outputs(out: Path, record: dict, tt: Me.Turntable) -> None:
    frames = out / "turntable"
    frames.mkdir(parents=True, exist_ok=True)
    for k, f in enumerate(tt.frames):
        write_ppm(frames / f"frame_{k:03d}.ppm", f)
    (out / "metrics.json").write_text(json.dumps(record, indent=2) + "\n")


def cmd_generate(args) -> int:
    cfg = C.load(args.config, args.seed, args.out)
    engine = C.build_engine(cfg)
    phases = C.build_phases(cfg)
    state = C.build_state(cfg)
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    losses_path = out / "losses.jsonl"
    losses_path.write_text("")
    phase1_only = args.phase == "1-only"
    try:
        mesh = P.run_pipeline(engine, phases, state, out / "checkpoints", cfg.hash, phase1_only)
    finally:
        append_jsonl(losses_path, state.records)
    if mesh is None:
        log.info("stopped after phase 1 as requested")
        return EXIT_OK
    obj = export_obj(mesh)
    (out / "mesh.obj").write_bytes(obj)
    # metrics come from the written file so that eval reproduces them exactly
    record, tt = evaluate(cfg, parse_obj(obj), engine)
    write_outputs(out, record, tt)
    log.info("metrics %s", record)
    return EXIT_OK


def load_artifact(path: Path, cfg: C.RunConfig) -> SurfaceMesh:
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read artifact {path}: {exc}") from None
    if data[:4] == ckpt.MAGIC:
        state = C.build_state(cfg)
        P.restore(state, ckpt.from_bytes(data))
        if state.tets is None:
            t = cfg.section("tets")
            state.tets = P.convert_nerf_to_dmtet(state.field, t.get("threshold", 10.0),
                                                 t.get("resolution", 16))
        with torch.no_grad():
            return marching_tets(state.tets).detach()
    try:
        return parse_obj(data)
    except (ValueError, IndexError, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: not a mesh or checkpoint ({exc})") from None


def cmd_eval(args) -> int:
    cfg = C.load(args.config, args.seed, args.out)
    art = Path(args.artifact)
    if not art.is_file():
        raise ConfigError(f"artifact not found: {art}")
    engine = C.build_engine(cfg)
    mesh = load_artifact(art, cfg)
    record, tt = evaluate(cfg, mesh, engine)
    out = cfg.output_dir
    prev = out / "metrics.json"
    if prev.is_file():
        old = json.loads(prev.read_text())
        if old != record:
            log.info("metrics differ from %s (encoder %s -> %s)", prev, old.get("encoder"),
                     record["encoder"])
    write_outputs(out, record, tt)
    print(json.dumps(record))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    try:
        results = G.run_checks([args.op] if args.op else None, args.scale)
    except KeyError as exc:
        print(exc.args[0], file=sys.stderr)
        return EXIT_CONFIG
    print(G.format_table(results))
    return EXIT_OK if all(r.passed() for r in results) else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", default=None, help="override the output directory")
    p = argparse.ArgumentParser(prog="distill3d", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("generate", parents=[common], help="run the three-phase pipeline")
    g.add_argument("config")
    g.add_argument("--phase", choices=["all", "1-only"], default="all")
    g.set_defaults(func=cmd_generate)
    e = sub.add_parser("eval", parents=[common], help="recompute turntable and metrics")
    e.add_argument("config")
    e.add_argument("artifact", help="mesh.obj or checkpoint file")
    e.set_defaults(func=cmd_eval)
    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    c.add_argument("--op", default=None)
    c.add_argument("--scale", choices=["micro", "small"], default="micro")
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[list] = None) -> int:
    setup_logging()
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PhaseAbort as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConversionError, DenoiserUnavailable) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
