# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Closest ray-triangle hits for a pinhole camera, with screen-space bbox culling.

Arithmetic mirrors ``distill3d.raster._closest_hits_numpy`` operation for
operation; both backends must return identical face indices.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, ceil, fabs

cnp.import_array()

cdef double DET_EPS = 1e-12
cdef double T_EPS = 1e-9


def closest_hits(double[::1] center, double[::1] right, double[::1] up, double[::1] forward,
                 double tx, double ty, int width, int height,
                 double[:, ::1] dirs, double[:, ::1] verts, long long[:, ::1] faces):
    cdef Py_ssize_t n_faces = faces.shape[0]
    cdef Py_ssize_t n_pix = dirs.shape[0]
    best_face_np = np.full(n_pix, -1, dtype=np.int64)
    best_t_np = np.full(n_pix, np.inf, dtype=np.float64)
    cdef long long[::1] best_face = best_face_np
    cdef double[::1] best_t = best_t_np
    cdef Py_ssize_t f, k, row, col, p
    cdef long long a, b, c
    cdef double e1x, e1y, e1z, e2x, e2y, e2z
    cdef double px, py, pz, qx, qy, qz, sx, sy, sz
    cdef double dx, dy, dz, det, inv, u, v, t
    cdef double relx, rely, relz, zc, ndcx, ndcy, fc, fr
    cdef double cmin, cmax, rmin, rmax
    cdef int c0, c1, r0, r1, behind
    cdef long long idx[3]
    for f in range(n_faces):
        a = faces[f, 0]
        b = faces[f, 1]
        c = faces[f, 2]
        idx[0] = a
        idx[1] = b
        idx[2] = c
        behind = 0
        cmin = 1e300
        cmax = -1e300
        rmin = 1e300
        rmax = -1e300
        for k in range(3):
            relx = verts[idx[k], 0] - center[0]
            rely = verts[idx[k], 1] - center[1]
            relz = verts[idx[k], 2] - center[2]
            zc = relx * forward[0] + rely * forward[1] + relz * forward[2]
            if zc <= 1e-9:
                behind = 1
                break
            ndcx = (relx * right[0] + rely * right[1] + relz * right[2]) / zc / tx
            ndcy = (relx * up[0] + rely * up[1] + relz * up[2]) / zc / ty
            fc = (ndcx + 1.0) * 0.5 * width - 0.5
            fr = (1.0 - ndcy) * 0.5 * height - 0.5
            if fc < cmin:
                cmin = fc
            if fc > cmax:
                cmax = fc
            if fr < rmin:
                rmin = fr
            if fr > rmax:
                rmax = fr
        if behind:
            c0 = 0
            c1 = width - 1
            r0 = 0
            r1 = height - 1
        else:
            if cmax < -2.0 or rmax < -2.0 or cmin > width + 1.0 or rmin > height + 1.0:
                continue
            if cmin < -4.0:
                cmin = -4.0
            if rmin < -4.0:
                rmin = -4.0
            if cmax > width + 4.0:
                cmax = width + 4.0
            if rmax > height + 4.0:
                rmax = height + 4.0
            c0 = <int>floor(cmin) - 1
            c1 = <int>ceil(cmax) + 1
            r0 = <int>floor(rmin) - 1
            r1 = <int>ceil(rmax) + 1
            if c0 < 0:
                c0 = 0
            if r0 < 0:
                r0 = 0
            if c1 > width - 1:
                c1 = width - 1
            if r1 > height - 1:
                r1 = height - 1
        e1x = verts[b, 0] - verts[a, 0]
        e1y = verts[b, 1] - verts[a, 1]
        e1z = verts[b, 2] - verts[a, 2]
        e2x = verts[c, 0] - verts[a, 0]
        e2y = verts[c, 1] - verts[a, 1]
        e2z = verts[c, 2] - verts[a, 2]
        sx = center[0] - verts[a, 0]
        sy = center[1] - verts[a, 1]
        sz = center[2] - verts[a, 2]
        qx = sy * e1z - sz * e1y
        qy = sz * e1x - sx * e1z
        qz = sx * e1y - sy * e1x
        for row in range(r0, r1 + 1):
            for col in range(c0, c1 + 1):
                p = row * width + col
                dx = dirs[p, 0]
                dy = dirs[p, 1]
                dz = dirs[p, 2]
                px = dy * e2z - dz * e2y
                py = dz * e2x - dx * e2z
                pz = dx * e2y - dy * e2x
                det = e1x * px + e1y * py + e1z * pz
                if fabs(det) < DET_EPS:
                    continue
                inv = 1.0 / det
                u = (sx * px + sy * py + sz * pz) * inv
                if u < 0.0 or u > 1.0:
                    continue
                v = (dx * qx + dy * qy + dz * qz) * inv
                if v < 0.0 or u + v > 1.0:
                    continue
                t = (e2x * qx + e2y * qy + e2z * qz) * inv
                if t <= T_EPS:
                    continue
                if t < best_t[p]:
                    best_t[p] = t
                    best_face[p] = f
    return best_face_np, best_t_np
