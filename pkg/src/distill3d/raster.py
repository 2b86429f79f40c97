"""Visibility kernel: nearest triangle hit per pixel of a pinhole camera.

The compiled ``_raster`` extension is used when it is importable; otherwise a
vectorised numpy implementation with the same arithmetic takes over. Set
``DISTILL3D_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

import numpy as np

DET_EPS = 1e-12
T_EPS = 1e-9
_MAX_PAIRS = 1 << 21

_native = None
if os.environ.get("DISTILL3D_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _raster as _native  # type: ignore[attr-defined]
    except ImportError:  # pragma: no cover - depends on build
        _native = None

BACKEND = "cython" if _native is not None else "numpy"


def _face_bounds(center, right, up, forward, tx, ty, width, height, verts, faces):
    rel = verts[faces] - center                      # (F, 3, 3)
    zc = rel[..., 0] * forward[0] + rel[..., 1] * forward[1] + rel[..., 2] * forward[2]
    behind = (zc <= 1e-9).any(axis=1)
    zs = np.where(zc <= 1e-9, 1.0, zc)
    ndcx = (rel[..., 0] * right[0] + rel[..., 1] * right[1] + rel[..., 2] * right[2]) / zs / tx
    ndcy = (rel[..., 0] * up[0] + rel[..., 1] * up[1] + rel[..., 2] * up[2]) / zs / ty
    fc = (ndcx + 1.0) * 0.5 * width - 0.5
    fr = (1.0 - ndcy) * 0.5 * height - 0.5
    cmin, cmax = fc.min(axis=1), fc.max(axis=1)
    rmin, rmax = fr.min(axis=1), fr.max(axis=1)
    off = (cmax < -2.0) | (rmax < -2.0) | (cmin > width + 1.0) | (rmin > height + 1.0)
    with np.errstate(invalid="ignore"):
        c0 = np.clip(np.floor(np.clip(cmin, -4.0, width + 4.0)) - 1, 0, width - 1).astype(np.int64)
        c1 = np.clip(np.ceil(np.clip(cmax, -4.0, width + 4.0)) + 1, -1, width - 1).astype(np.int64)
        r0 = np.clip(np.floor(np.clip(rmin, -4.0, height + 4.0)) - 1, 0, height - 1).astype(np.int64)
        r1 = np.clip(np.ceil(np.clip(rmax, -4.0, height + 4.0)) + 1, -1, height - 1).astype(np.int64)
    c0 = np.where(behind, 0, c0)
    c1 = np.where(behind, width - 1, c1)
    r0 = np.where(behind, 0, r0)
    r1 = np.where(behind, height - 1, r1)
    off = off & ~behind
    c1 = np.where(off, -1, c1)
    return c0, c1, r0, r1


def _closest_hits_numpy(center, right, up, forward, tx, ty, width, height, dirs, verts, faces):
    n_pix = dirs.shape[0]
    best_face = np.full(n_pix, -1, dtype=np.int64)
    best_t = np.full(n_pix, np.inf)
    if len(faces) == 0:
        return best_face, best_t
    c0, c1, r0, r1 = _face_bounds(center, right, up, forward, tx, ty, width, height, verts, faces)
    w = np.maximum(c1 - c0 + 1, 0)
    h = np.maximum(r1 - r0 + 1, 0)
    counts = w * h
    a, b, c = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    e1 = b - a
    e2 = c - a
    s = center[None, :] - a
    q = np.stack([s[:, 1] * e1[:, 2] - s[:, 2] * e1[:, 1],
                  s[:, 2] * e1[:, 0] - s[:, 0] * e1[:, 2],
                  s[:, 0] * e1[:, 1] - s[:, 1] * e1[:, 0]], axis=1)
    csum = np.cumsum(counts)
    start = 0
    F = len(faces)
    while start < F:
        base = csum[start - 1] if start > 0 else 0
        stop = int(np.searchsorted(csum, base + _MAX_PAIRS, side="right"))
        stop = max(stop, start + 1)
        fidx = np.arange(start, stop)
        cnt = counts[fidx]
        total = int(cnt.sum())
        start = stop
        if total == 0:
            continue
        pf = np.repeat(fidx, cnt)
        offsets = np.repeat(np.cumsum(cnt) - cnt, cnt)
        local = np.arange(total) - offsets
        row = r0[pf] + local // w[pf]
        col = c0[pf] + local % w[pf]
        pix = row * width + col
        d = dirs[pix]
        E1, E2, S, Q = e1[pf], e2[pf], s[pf], q[pf]
        px = d[:, 1] * E2[:, 2] - d[:, 2] * E2[:, 1]
        py = d[:, 2] * E2[:, 0] - d[:, 0] * E2[:, 2]
        pz = d[:, 0] * E2[:, 1] - d[:, 1] * E2[:, 0]
        det = E1[:, 0] * px + E1[:, 1] * py + E1[:, 2] * pz
        ok = np.abs(det) >= DET_EPS
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        u = (S[:, 0] * px + S[:, 1] * py + S[:, 2] * pz) * inv
        v = (d[:, 0] * Q[:, 0] + d[:, 1] * Q[:, 1] + d[:, 2] * Q[:, 2]) * inv
        t = (E2[:, 0] * Q[:, 0] + E2[:, 1] * Q[:, 1] + E2[:, 2] * Q[:, 2]) * inv
        ok &= (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (u + v <= 1.0) & (t > T_EPS)
        if not ok.any():
            continue
        pix, t, pf = pix[ok], t[ok], pf[ok]
        order = np.lexsort((pf, t, pix))
        pix, t, pf = pix[order], t[order], pf[order]
        first = np.ones(len(pix), dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        pix, t, pf = pix[first], t[first], pf[first]
        better = t < best_t[pix]  # earlier chunks hold lower face indices
        best_t[pix[better]] = t[better]
        best_face[pix[better]] = pf[better]
    return best_face, best_t


def closest_hits(pose, dirs: np.ndarray, verts: np.ndarray, faces: np.ndarray, backend=None):
    """Face index (-1 for a miss) and ray distance of the nearest hit per pixel.

    ``dirs`` are the pose's pixel directions (row-major). Ties in distance go to
    the lower face index.
    """
    center, right, up, forward = pose.frame()
    tx, ty = pose.tan_half_fov()
    args = (np.ascontiguousarray(center, dtype=np.float64),
            np.ascontiguousarray(right, dtype=np.float64),
            np.ascontiguousarray(up, dtype=np.float64),
            np.ascontiguousarray(forward, dtype=np.float64),
            float(tx), float(ty), int(pose.width), int(pose.height),
            np.ascontiguousarray(dirs, dtype=np.float64),
            np.ascontiguousarray(verts, dtype=np.float64),
            np.ascontiguousarray(faces, dtype=np.int64))
    backend = backend or BACKEND
    if backend == "cython":
        if _native is None:
            raise RuntimeError("compiled raster kernel is not available")
        return _native.closest_hits(*args)
    return _closest_hits_numpy(*args)
