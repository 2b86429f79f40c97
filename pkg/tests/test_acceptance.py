"""End-to-end acceptance criteria; each test prints one PASS/FAIL line."""
import math
import socket
import threading
import time

import numpy as np
import pytest
import torch

from distill3d import cli
from distill3d import config as C
from distill3d import gradcheck as G
from distill3d import losses as L
from distill3d import mesh as M
from distill3d import metrics as Me
from distill3d import pipeline as P
from distill3d import scene as S
from distill3d.encoders import ToyEncoder
from distill3d.errors import DenoiserTimeout, MalformedResponse
from distill3d.priors import GaussianMixture, GaussianMixtureDenoiser, ToySphere
from distill3d.priors import remote as R
from distill3d.toy import toy_config, write_toy_fixtures

# pinned tolerances
GRAD_TOL, GRAD_BUDGET_S = 1e-3, 60.0
SDS_TOL, SDS_ITERS, SDS_BUDGET_S = 0.02, 300, 120.0
CHAMFER_TOL, PIXEL_TOL, E2E_BUDGET_S = 0.05, 0.08, 15 * 60.0
OBJ_TOL = 1e-5


@pytest.fixture
def report(capsys):
    def emit(n, name, ok, detail=""):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {name} {detail}".rstrip())
        assert ok, f"criterion {n} failed: {detail}"
    return emit


def test_c1_gradient_suite(report):
    t = time.perf_counter()
    results = G.run_checks()
    dt = time.perf_counter() - t
    worst = max(r.max_rel_err for r in results)
    ok = all(r.max_rel_err < GRAD_TOL for r in results) and dt < GRAD_BUDGET_S
    report(1, "gradient suite", ok, f"ops={len(results)} max_rel_err={worst:.2e} time={dt:.1f}s")


def test_c2_analytic_prior_distillation(report):
    torch.manual_seed(0)
    field = S.VoxelRadianceField(16, 1.2)
    mix = GaussianMixture([1.0], [np.full((3, 32, 32), 0.5)], [0.0])
    prompt = torch.zeros(64, dtype=torch.float64)
    prompt[0] = 1.0
    engine = P.Engine(GaussianMixtureDenoiser(mix), ToyEncoder(), prompt,
                      weights=L.LossWeights(ms=0.0))
    cfg = P.default_phase(1, iterations=SDS_ITERS, resolution=32, stereo=False, n_samples=32)
    state = P.PipelineState(field, np.random.default_rng(0))
    t = time.perf_counter()
    P.run_phase(cfg, state, engine)
    dt = time.perf_counter() - t
    errs = []
    with torch.no_grad():
        for el, az in ((0, 0), (30, 90), (-40, 200), (15, -60)):
            r = S.render_field(field, S.CameraPose(el, az, 2.5, 40, 32, 32), 32)
            errs.append(float((r.rgb - 0.5).abs().mean()))
    err = max(errs)
    report(2, "analytic-prior distillation", err < SDS_TOL and dt < SDS_BUDGET_S,
           f"max_view_err={err:.4f} time={dt:.1f}s")


@pytest.fixture(scope="session")
def toy_runs(tmp_path_factory):
    """Two full toy pipeline runs with the same seed."""
    runs = []
    for name in ("run_a", "run_b"):
        d = tmp_path_factory.mktemp(name)
        path = write_toy_fixtures(d)
        t = time.perf_counter()
        code = cli.main(["generate", str(path), "--seed", "0"])
        runs.append((code, d / "out", time.perf_counter() - t))
    return runs


def test_c3_end_to_end_toy_recovery(report, toy_runs):
    code, out, dt = toy_runs[0]
    assert code == 0
    mesh = M.parse_obj((out / "mesh.obj").read_bytes())
    chamfer = P.chamfer_to_sphere(mesh, 0.4)
    sphere = ToySphere(0.4)
    pix = Me.turntable_pixel_error(Me.render_turntable(mesh), sphere)
    ok = chamfer < CHAMFER_TOL and pix < PIXEL_TOL and dt < E2E_BUDGET_S
    report(3, "end-to-end toy recovery", ok,
           f"chamfer={chamfer:.4f} pixel_err={pix:.4f} time={dt:.0f}s (1 core)")


def test_c4_scheduler_conformance(report, tmp_path):
    over = dict(field={"resolution": 8, "bbox": 0.6}, tets={"resolution": 6},
                phases={str(k): {"iterations": 3, "resolution": 16, "n_samples": 8,
                                 "checkpoint_every": 0} for k in (1, 2, 3)},
                augment={"n": 1})
    cfg = C.load(write_toy_fixtures(tmp_path, resolution=16, **over))
    engine, phases, state = C.build_engine(cfg), C.build_phases(cfg), C.build_state(cfg)
    fired = []
    with L.probe() as p:
        P.run_phase(phases[0], state, engine)
    fired.append((p.fired(), p.counts["sds"]))
    state.tets = P.convert_nerf_to_dmtet(state.field, engine.threshold, engine.tet_resolution)
    with L.probe() as p:
        P.run_phase(phases[1], state, engine)
    fired.append((p.fired(), p.counts["sds"]))
    geo = [t.detach().numpy().tobytes() for t in (state.tets.sdf, state.tets.offset_raw)]
    with L.probe() as p:
        P.run_phase(phases[2], state, engine)
    fired.append((p.fired(), p.counts["nz"]))
    frozen = geo == [t.detach().numpy().tobytes() for t in (state.tets.sdf, state.tets.offset_raw)]
    ok = (fired[0][0] == {"ms", "sds", "nz", "sds3d", "ref", "nv"}
          and fired[1][0] == {"ms", "cds", "sds3d", "ref", "nc", "ls"} and fired[1][1] == 0
          and fired[2][0] == {"ms", "sds", "sds3d", "ref"} and fired[2][1] == 0 and frozen)
    report(4, "scheduler conformance", ok,
           " ".join(f"p{k + 1}={sorted(f)}" for k, (f, _) in enumerate(fired)) + f" frozen={frozen}")


def test_c5_mesh_suite(report):
    tets = M.TetScene.from_function(lambda X: 0.5 - np.linalg.norm(X, axis=-1), n=16)
    mesh = M.marching_tets(tets).detach()
    chi = M.euler_characteristic(mesh)
    tight = M.is_watertight(mesh)
    back = M.parse_obj(M.export_obj(mesh))
    obj_err = float((back.vertices - mesh.vertices).abs().max())
    same_faces = torch.equal(back.faces, mesh.faces)
    thr = P.Engine(None, None, None).threshold
    ok = tight and chi == 2 and obj_err < OBJ_TOL and same_faces and thr == 10.0
    report(5, "mesh suite", ok, f"watertight={tight} chi={chi} obj_err={obj_err:.1e} threshold={thr}")


class _Const:
    def __init__(self, v):
        self.v = torch.as_tensor(np.asarray(v, dtype=np.float64))

    def embed_image(self, image):
        return self.v


def test_c6_metric_suite(report, tmp_path):
    blank = np.full((8, 8, 3), 0.5)
    tt = Me.Turntable([blank] * 4, Me.turntable_poses(resolution=8, n=4))
    e = np.array([1.0, 0.0])
    checks = {
        "arcc+1": Me.arcc(e, tt, _Const(e)) == 1.0,
        "arcc0": Me.arcc(e, tt, _Const([0.0, 1.0])) == 0.0,
        "arcc-1": Me.arcc(e, tt, _Const(-e)) == -1.0,
        "clip_i": Me.clip_i(blank, tt, _Const([0.6, 0.8])) == pytest.approx(1.0, abs=1e-15),
        "clip_r": Me.clip_r(np.eye(2), [tt], _Const(e), [0]) == 1.0,
        "clip_r_miss": Me.clip_r(np.eye(2), [tt], _Const([0.0, 1.0]), [0]) == 0.0,
        "clip_r_tie": Me.clip_r(np.eye(2), [tt], _Const([1.0, 1.0]), [0]) == 1.0,
    }
    write_toy_fixtures(tmp_path, resolution=16)
    p1, p2, _ = C.build_phases(C.from_dict(toy_config(), tmp_path))
    poses = Me.turntable_poses()
    checks["phase1_cam"] = (p1.ranges.elevation, p1.ranges.azimuth, p1.ranges.distance,
                            p1.ranges.fov) == ((-45, 45), (-180, 180), (2.5, 2.5), (40, 40))
    checks["phase2_cam"] = (p2.ranges.elevation, p2.ranges.azimuth, p2.ranges.distance,
                            p2.ranges.fov) == ((-10, 45), (-135, 225), (1.5, 2.0), (30, 45))
    checks["turntable"] = (len(poses) == 120 and poses[1].azimuth == 3.0
                           and poses[0].distance == 2.5 and poses[0].fov == 40.0)
    bad = [k for k, v in checks.items() if not v]
    report(6, "metric suite", not bad, f"checks={len(checks)} failed={bad}")


def test_c7_determinism(report, toy_runs):
    (ca, a, _), (cb, b, _) = toy_runs
    same_obj = (a / "mesh.obj").read_bytes() == (b / "mesh.obj").read_bytes()
    same_metrics = (a / "metrics.json").read_bytes() == (b / "metrics.json").read_bytes()
    report(7, "determinism", ca == cb == 0 and same_obj and same_metrics,
           f"obj_identical={same_obj} metrics_identical={same_metrics}")


def test_c8_remote_prior(report):
    rng = np.random.default_rng(0)
    payload = rng.standard_normal((3, 8, 8)).astype(np.float32)
    payload.flat[:4] = [np.float32(math.pi), np.float32(-0.0), np.float32(1e-38), np.float32(3e38)]
    srv = R.echo_server().start()
    try:
        client = R.RemotePrior(*srv.address, timeout=2.0)
        cond = L.embedding_condition(np.eye(4)[0])
        out = client.denoise(torch.from_numpy(payload.astype(np.float64)), 0.5, cond)
        bit_exact = out.numpy().astype(np.float32).tobytes() == payload.tobytes()
    finally:
        srv.stop()

    typed = {}
    def serve(reply, delay=None):
        s = socket.socket()
        s.bind(("127.0.0.1", 0))
        s.listen(1)

        def run():
            conn, _ = s.accept()
            conn.makefile("rb").readline()
            if delay is None:
                conn.sendall(reply)
            else:
                time.sleep(delay)
            conn.close()
            s.close()
        threading.Thread(target=run, daemon=True).start()
        return s.getsockname()

    z = torch.zeros(3, 8, 8, dtype=torch.float64)
    for label, exc, kw in (("timeout", DenoiserTimeout, dict(reply=b"", delay=1.0)),
                           ("malformed", MalformedResponse, dict(reply=b"{not json\n"))):
        host, port = serve(**kw)
        try:
            R.RemotePrior(host, port, timeout=0.2).denoise(z, 0.5, cond)
            typed[label] = False
        except exc:
            typed[label] = True
    ok = bit_exact and all(typed.values())
    report(8, "remote prior", ok, f"bit_exact={bit_exact} typed_errors={typed}")
