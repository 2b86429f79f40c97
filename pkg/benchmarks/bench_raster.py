"""Compare the compiled and numpy visibility kernels on sphere meshes.

    python benchmarks/bench_raster.py [--repeat 5]
"""
import argparse
import time

import numpy as np

from distill3d import raster
from distill3d.mesh import TetScene, marching_tets
from distill3d.scene import CameraPose, pixel_directions


def sphere_mesh(n):
    tets = TetScene.from_function(lambda X: 0.5 - np.linalg.norm(X, axis=-1), n=n)
    m = marching_tets(tets).detach()
    return m.vertices.numpy(), m.faces.numpy()


def bench(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = ["numpy"] + (["cython"] if raster._native is not None else [])
    print(f"default backend: {raster.BACKEND}")
    print(f"{'grid':>5} {'faces':>7} {'px':>5} " + " ".join(f"{b:>10}" for b in backends)
          + "   speedup  identical")
    for n, res in ((8, 64), (16, 64), (16, 128), (24, 128)):
        verts, faces = sphere_mesh(n)
        pose = CameraPose(20.0, 30.0, 2.5, 40.0, res, res)
        dirs = pixel_directions(pose)
        times, outs = [], []
        for b in backends:
            dt, out = bench(lambda: raster.closest_hits(pose, dirs, verts, faces, backend=b),
                            args.repeat)
            times.append(dt)
            outs.append(out)
        same = all(np.array_equal(o[0], outs[0][0]) and np.array_equal(o[1], outs[0][1])
                   for o in outs)
        speed = f"{times[0] / times[-1]:8.1f}x" if len(times) > 1 else "       -"
        print(f"{n:>5} {len(faces):>7} {res:>5} " + " ".join(f"{t * 1e3:8.2f}ms" for t in times)
              + f"  {speed}  {same}")


if __name__ == "__main__":
    main()
