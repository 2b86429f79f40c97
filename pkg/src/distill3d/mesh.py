"""Tetrahedral SDF scenes, marching tetrahedra, mesh rendering and mesh regularizers."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from . import raster
from .errors import ConfigError
from .scene import DTYPE, CameraPose, VoxelRadianceField, pixel_directions

TET_EDGES = ((0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3))
_EDGE_ID = {e: i for i, e in enumerate(TET_EDGES)}


def _edge(a: int, b: int) -> int:
    return _EDGE_ID[(min(a, b), max(a, b))]


def _build_case_table():
    """Triangles (as local edge ids) for each of the 16 inside/outside patterns."""
    table = np.full((16, 2, 3), -1, dtype=np.int64)
    counts = np.zeros(16, dtype=np.int64)
    for code in range(16):
        inside = [v for v in range(4) if code >> v & 1]
        outside = [v for v in range(4) if not code >> v & 1]
        if len(inside) in (1, 3):
            lone = inside[0] if len(inside) == 1 else outside[0]
            others = [v for v in range(4) if v != lone]
            table[code, 0] = [_edge(lone, o) for o in others]
            counts[code] = 1
        elif len(inside) == 2:
            a, b = inside
            c, d = outside
            ac, ad, bd, bc = _edge(a, c), _edge(a, d), _edge(b, d), _edge(b, c)
            table[code, 0] = [ac, ad, bd]
            table[code, 1] = [ac, bd, bc]
            counts[code] = 2
    return table, counts


CASE_TABLE, CASE_COUNTS = _build_case_table()


def tet_grid(n: int, bbox: float = 1.0):
    """Regular lattice of n^3 cubes over [-bbox, bbox]^3, six tetrahedra per cube.

    Returns vertex positions ((n+1)^3, 3) and positively oriented tets (6 n^3, 4).
    """
    if n < 1:
        raise ConfigError("tet grid resolution must be at least 1")
    m = n + 1
    ax = np.linspace(-bbox, bbox, m)
    pos = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    ii, jj, kk = np.meshgrid(np.arange(n), np.arange(n), np.arange(n), indexing="ij")
    base = np.stack([ii.ravel(), jj.ravel(), kk.ravel()], axis=1)

    def vid(c):
        return (c[:, 0] * m + c[:, 1]) * m + c[:, 2]

    tets = []
    eye = np.eye(3, dtype=np.int64)
    for perm in itertools.permutations(range(3)):
        c0 = base
        c1 = c0 + eye[perm[0]]
        c2 = c1 + eye[perm[1]]
        c3 = c2 + eye[perm[2]]
        tets.append(np.stack([vid(c0), vid(c1), vid(c2), vid(c3)], axis=1))
    tets = np.concatenate(tets, axis=0)
    p = pos[tets]
    vol = np.einsum("ij,ij->i", np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), p[:, 3] - p[:, 0])
    flip = vol < 0
    tets[flip, 1], tets[flip, 2] = tets[flip, 2].copy(), tets[flip, 1].copy()
    return pos, tets


class TetScene:
    """Deformable tetrahedral grid with a learnable SDF (interior > 0) and vertex offsets.

    Vertex colors are read from ``color_field`` at the deformed surface positions,
    so texture refinement updates that field's color grid in place.
    """

    def __init__(self, positions, tets, sdf, edge_length: float,
                 color_field: Optional[VoxelRadianceField] = None, freeze_offsets: bool = False):
        self.positions = torch.as_tensor(np.asarray(positions), dtype=DTYPE)
        self.tets = torch.as_tensor(np.asarray(tets), dtype=torch.int64)
        self.sdf = torch.as_tensor(np.asarray(sdf, dtype=np.float64)).clone().requires_grad_(True)
        self.offset_raw = torch.zeros_like(self.positions).requires_grad_(not freeze_offsets)
        self.edge_length = float(edge_length)
        self.color_field = color_field
        self.freeze_offsets = freeze_offsets

    @classmethod
    def from_grid(cls, sdf, n: int, bbox: float = 1.0, **kw) -> "TetScene":
        pos, tets = tet_grid(n, bbox)
        return cls(pos, tets, sdf, 2.0 * bbox / n, **kw)

    @classmethod
    def from_function(cls, sdf_fn, n: int = 16, bbox: float = 1.0, **kw) -> "TetScene":
        pos, tets = tet_grid(n, bbox)
        return cls(pos, tets, sdf_fn(pos), 2.0 * bbox / n, **kw)

    def parameters(self):
        params = {"sdf": self.sdf}
        if not self.freeze_offsets:
            params["offset_raw"] = self.offset_raw
        return params

    def offsets(self) -> torch.Tensor:
        # norm stays below half the lattice edge
        return (0.5 * self.edge_length / math.sqrt(3.0)) * torch.tanh(self.offset_raw)

    def deformed_positions(self) -> torch.Tensor:
        return self.positions + self.offsets()


def field_to_sdf(field: VoxelRadianceField, threshold: float = 10.0, resolution: int = 16,
                 freeze_offsets: bool = False) -> TetScene:
    """Tet scene whose SDF is the field density minus ``threshold`` at each grid vertex."""
    if not threshold > 0:
        raise ConfigError("isosurface threshold must be positive")
    pos, tets = tet_grid(resolution, field.bbox)
    with torch.no_grad():
        dens, _ = field.query(torch.from_numpy(pos))
    sdf = dens.numpy() - threshold
    return TetScene(pos, tets, sdf, 2.0 * field.bbox / resolution,
                    color_field=field, freeze_offsets=freeze_offsets)


@dataclass
class SurfaceMesh:
    vertices: torch.Tensor             # (V, 3)
    faces: torch.Tensor                # (F, 3) int64
    colors: Optional[torch.Tensor] = None  # (V, 3)

    @property
    def n_vertices(self) -> int:
        return int(self.vertices.shape[0])

    @property
    def n_faces(self) -> int:
        return int(self.faces.shape[0])

    def face_normals(self, normalize: bool = True) -> torch.Tensor:
        v = self.vertices[self.faces]
        n = torch.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0], dim=1)
        if normalize:
            n = n / n.norm(dim=1, keepdim=True).clamp(min=1e-20)
        return n

    def vertex_normals(self) -> torch.Tensor:
        fn = self.face_normals(normalize=False)
        vn = torch.zeros_like(self.vertices)
        for k in range(3):
            vn = vn.index_add(0, self.faces[:, k], fn)
        return vn / vn.norm(dim=1, keepdim=True).clamp(min=1e-20)

    def detach(self) -> "SurfaceMesh":
        return SurfaceMesh(self.vertices.detach(), self.faces,
                           None if self.colors is None else self.colors.detach())


def marching_tets(scene: TetScene, with_colors: bool = True) -> SurfaceMesh:
    """Extract the zero level set of ``scene.sdf`` as a triangle mesh.

    Crossing points are linear interpolants along sign-change edges, so vertex
    positions stay differentiable in both SDF values and vertex offsets. Faces
    are wound with normals pointing toward negative SDF.
    """
    pos = scene.deformed_positions()
    sdf = scene.sdf
    V = pos.shape[0]
    occ = (sdf.detach() > 0)
    occ_t = occ[scene.tets]
    n_in = occ_t.sum(dim=1)
    valid = (n_in > 0) & (n_in < 4)
    tets = scene.tets[valid]
    if tets.shape[0] == 0:
        empty = SurfaceMesh(torch.zeros((0, 3), dtype=DTYPE), torch.zeros((0, 3), dtype=torch.int64),
                            torch.zeros((0, 3), dtype=DTYPE))
        return empty
    ed = torch.tensor(TET_EDGES, dtype=torch.int64)
    ev = tets[:, ed]                                   # (T, 6, 2)
    ev_sorted, _ = ev.sort(dim=-1)
    keys = ev_sorted[..., 0] * V + ev_sorted[..., 1]
    ukeys, inverse = torch.unique(keys.reshape(-1), return_inverse=True)
    inverse = inverse.reshape(-1, 6)
    ua, ub = ukeys // V, ukeys % V
    crossing = occ[ua] != occ[ub]
    cross_ids = torch.full((ukeys.shape[0],), -1, dtype=torch.int64)
    cross_ids[crossing] = torch.arange(int(crossing.sum()))
    a, b = ua[crossing], ub[crossing]
    sa, sb = sdf[a][:, None], sdf[b][:, None]
    verts = (sb * pos[a] - sa * pos[b]) / (sb - sa)

    code = (occ_t[valid].to(torch.int64) * torch.tensor([1, 2, 4, 8])).sum(dim=1)
    table = torch.from_numpy(CASE_TABLE)[code]          # (T, 2, 3)
    counts = torch.from_numpy(CASE_COUNTS)[code]
    tet_idx = torch.arange(tets.shape[0])
    tris, owners = [], []
    for slot in range(2):
        sel = counts > slot
        local = table[sel, slot]                         # (k, 3) local edge ids
        glob = torch.gather(inverse[sel], 1, local)      # unique edge ids
        tris.append(cross_ids[glob])
        owners.append(tet_idx[sel])
    faces = torch.cat(tris, dim=0)
    owner = torch.cat(owners, dim=0)
    # owners interleave slots; sort by (tet, slot) for a stable order
    order = torch.argsort(owner * 2 + torch.cat([torch.zeros(len(tris[0]), dtype=torch.int64),
                                                 torch.ones(len(tris[1]), dtype=torch.int64)]),
                          stable=True)
    faces, owner = faces[order], owner[order]

    with torch.no_grad():
        vd = verts.detach()
        fv = vd[faces]
        n = torch.cross(fv[:, 1] - fv[:, 0], fv[:, 2] - fv[:, 0], dim=1)
        tp = pos.detach()[tets[owner]]                   # (F, 4, 3)
        w_in = occ_t[valid][owner].to(DTYPE)[..., None]
        c_in = (tp * w_in).sum(1) / w_in.sum(1)
        c_out = (tp * (1 - w_in)).sum(1) / (1 - w_in).sum(1)
        flip = (n * (c_out - c_in)).sum(dim=1) < 0
    faces = torch.where(flip[:, None], faces[:, [0, 2, 1]], faces)
    colors = None
    if with_colors and scene.color_field is not None:
        colors = scene.color_field.query_color(verts)
    return SurfaceMesh(verts, faces, colors)


# -- topology helpers -----------------------------------------------------------

def mesh_edges(faces: torch.Tensor):
    """Unique undirected edges (E, 2) and, per edge, the number of incident faces."""
    f = faces.reshape(-1, 3)
    e = torch.cat([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], dim=0)
    e, _ = e.sort(dim=1)
    uniq, counts = torch.unique(e, dim=0, return_counts=True)
    return uniq, counts


def euler_characteristic(mesh: SurfaceMesh) -> int:
    edges, _ = mesh_edges(mesh.faces)
    used = torch.unique(mesh.faces).numel()
    return int(used - edges.shape[0] + mesh.n_faces)


def is_watertight(mesh: SurfaceMesh) -> bool:
    if mesh.n_faces == 0:
        return False
    _, counts = mesh_edges(mesh.faces)
    return bool((counts == 2).all())


def _adjacent_face_pairs(faces: torch.Tensor) -> torch.Tensor:
    F = faces.shape[0]
    e = torch.cat([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]], dim=0)
    e, _ = e.sort(dim=1)
    fid = torch.arange(F).repeat(3)
    nv = int(faces.max()) + 1 if F else 1
    key = e[:, 0] * nv + e[:, 1]
    order = torch.argsort(key, stable=True)
    key, fid = key[order], fid[order]
    same = key[1:] == key[:-1]
    return torch.stack([fid[:-1][same], fid[1:][same]], dim=1)


def normal_consistency_loss(mesh: SurfaceMesh) -> torch.Tensor:
    """Mean of (1 - n_i . n_j) over face pairs sharing an edge."""
    if mesh.n_faces < 2:
        return torch.zeros((), dtype=DTYPE)
    pairs = _adjacent_face_pairs(mesh.faces)
    if pairs.shape[0] == 0:
        return torch.zeros((), dtype=DTYPE)
    n = mesh.face_normals()
    return (1.0 - (n[pairs[:, 0]] * n[pairs[:, 1]]).sum(dim=1)).mean()


def laplacian_residuals(mesh: SurfaceMesh) -> torch.Tensor:
    """v - mean(one-ring) per vertex; zero for isolated vertices."""
    v = mesh.vertices
    if mesh.n_faces == 0:
        return torch.zeros_like(v)
    edges, _ = mesh_edges(mesh.faces)
    i, j = edges[:, 0], edges[:, 1]
    nsum = torch.zeros_like(v).index_add(0, i, v[j]).index_add(0, j, v[i])
    deg = torch.zeros(v.shape[0], dtype=DTYPE).index_add(
        0, i, torch.ones(len(i), dtype=DTYPE)).index_add(0, j, torch.ones(len(j), dtype=DTYPE))
    has = deg > 0
    mean = nsum / deg.clamp(min=1.0)[:, None]
    return torch.where(has[:, None], v - mean, torch.zeros_like(v))


def laplacian_loss(mesh: SurfaceMesh) -> torch.Tensor:
    """Mean over vertices of the squared uniform-Laplacian residual."""
    if mesh.n_vertices == 0:
        return torch.zeros((), dtype=DTYPE)
    r = laplacian_residuals(mesh)
    return (r * r).sum(dim=1).mean()


def normal_smoothness_loss(field: VoxelRadianceField, points: torch.Tensor,
                           rng: Optional[np.random.Generator] = None, jitter: float = 0.5,
                           offsets: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean ||n(p) - n(p + d)||^2 with n the normalised negative density gradient.

    ``d`` has length ``jitter`` voxels in a random direction unless ``offsets``
    is given explicitly. Points with a vanishing gradient at either end are skipped.
    """
    points = torch.as_tensor(points, dtype=DTYPE).detach()
    if points.shape[0] == 0:
        return torch.zeros((), dtype=DTYPE)
    if offsets is None:
        if rng is None:
            rng = np.random.default_rng(0)
        d = rng.normal(size=points.shape)
        d /= np.linalg.norm(d, axis=1, keepdims=True).clip(min=1e-12)
        offsets = torch.from_numpy(d * jitter * field.spacing)
    else:
        offsets = torch.as_tensor(offsets, dtype=DTYPE)
    _, g0 = field.density_and_gradient(points)
    _, g1 = field.density_and_gradient(points + offsets)
    m0, m1 = g0.norm(dim=1), g1.norm(dim=1)
    keep = (m0.detach() > 1e-12) & (m1.detach() > 1e-12)
    if not keep.any():
        return torch.zeros((), dtype=DTYPE)
    n0 = -g0[keep] / m0[keep, None]
    n1 = -g1[keep] / m1[keep, None]
    return ((n0 - n1) ** 2).sum(dim=1).mean()


# -- rendering ------------------------------------------------------------------

@dataclass
class MeshRender:
    image: torch.Tensor       # (H, W, 3)
    mask: torch.Tensor        # (H, W) float, 1 where a face was hit
    face: np.ndarray          # (H, W) hit face index, -1 on miss


def barycentric_hits(v0, v1, v2, origin, dirs):
    """Differentiable Moller-Trumbore barycentrics (u, v) for rays known to hit."""
    e1 = v1 - v0
    e2 = v2 - v0
    p = torch.cross(dirs, e2, dim=1)
    det = (e1 * p).sum(dim=1)
    s = origin[None, :] - v0
    u = (s * p).sum(dim=1) / det
    q = torch.cross(s, e1, dim=1)
    v = (dirs * q).sum(dim=1) / det
    return u, v


def render_mesh(mesh: SurfaceMesh, pose: CameraPose, mode: str = "color",
                background: Sequence[float] = (1.0, 1.0, 1.0), backend: Optional[str] = None
                ) -> MeshRender:
    """Nearest-hit surface render in ``normal`` | ``color`` | ``mask`` mode.

    Visibility is decided by the raster kernel on detached geometry; shading is
    then recomputed with torch so pixels are differentiable in vertex positions
    and colors. Silhouette pixels carry no visibility derivative.
    """
    if mode not in ("normal", "color", "mask"):
        raise ConfigError(f"unknown render mode {mode!r}")
    H, W = pose.height, pose.width
    dirs_np = pixel_directions(pose)
    bg = torch.as_tensor(background, dtype=DTYPE)
    if mesh.n_faces == 0:
        img = bg.expand(H, W, 3).clone() if mode != "mask" else torch.zeros((H, W, 3), dtype=DTYPE)
        return MeshRender(img, torch.zeros((H, W), dtype=DTYPE), np.full((H, W), -1))
    face_np, _ = raster.closest_hits(pose, dirs_np, mesh.vertices.detach().numpy(),
                                     mesh.faces.numpy(), backend=backend)
    hit = np.nonzero(face_np >= 0)[0]
    mask = torch.zeros(H * W, dtype=DTYPE)
    mask[torch.from_numpy(hit)] = 1.0
    if mode == "mask":
        return MeshRender(mask.reshape(H, W, 1).expand(H, W, 3).clone(), mask.reshape(H, W),
                          face_np.reshape(H, W))
    hit_t = torch.from_numpy(hit)
    fidx = torch.from_numpy(face_np[hit])
    tri = mesh.faces[fidx]
    origin = torch.from_numpy(pose.center())
    dirs = torch.from_numpy(dirs_np[hit])
    u, v = barycentric_hits(mesh.vertices[tri[:, 0]], mesh.vertices[tri[:, 1]],
                            mesh.vertices[tri[:, 2]], origin, dirs)
    b = torch.stack([1.0 - u - v, u, v], dim=1)[..., None]       # (K, 3, 1)
    if mode == "color":
        if mesh.colors is None:
            attr = torch.full((mesh.n_vertices, 3), 0.5, dtype=DTYPE)
        else:
            attr = mesh.colors
        val = (b * attr[tri]).sum(dim=1)
    else:
        n = (b * mesh.vertex_normals()[tri]).sum(dim=1)
        n = n / n.norm(dim=1, keepdim=True).clamp(min=1e-20)
        R, _ = pose.world_to_camera()
        n_cam = n @ torch.from_numpy(R).T
        val = 0.5 * (n_cam + 1.0)
    flat = bg.expand(H * W, 3).clone()
    flat = flat.index_put((hit_t,), val)
    return MeshRender(flat.reshape(H, W, 3), mask.reshape(H, W), face_np.reshape(H, W))


def silhouette_band(face: np.ndarray, radius: int = 1) -> np.ndarray:
    """Pixels within ``radius`` of a hit/miss transition."""
    hit = face >= 0
    band = np.zeros_like(hit)
    H, W = hit.shape
    padded = np.pad(hit, radius, mode="edge")
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            shifted = padded[radius + dr:radius + dr + H, radius + dc:radius + dc + W]
            band |= shifted != hit
    return band


# -- OBJ ------------------------------------------------------------------------

OBJ_HEADER = b"# distill3d mesh\n"


def export_obj(mesh: SurfaceMesh) -> bytes:
    """ASCII Wavefront OBJ with ``v x y z r g b`` vertex colors and 1-based faces."""
    lines = [OBJ_HEADER.decode("ascii")]
    v = mesh.vertices.detach().numpy()
    c = None if mesh.colors is None else mesh.colors.detach().numpy()
    for i in range(len(v)):
        if c is None:
            lines.append("v %.6f %.6f %.6f\n" % tuple(v[i]))
        else:
            lines.append("v %.6f %.6f %.6f %.6f %.6f %.6f\n" % (*v[i], *c[i]))
    for f in mesh.faces.numpy():
        lines.append("f %d %d %d\n" % (f[0] + 1, f[1] + 1, f[2] + 1))
    return "".join(lines).encode("ascii")


def parse_obj(data: bytes) -> SurfaceMesh:
    verts, colors, faces = [], [], []
    for raw in data.decode("ascii").splitlines():
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "v":
            vals = [float(x) for x in parts[1:]]
            verts.append(vals[:3])
            if len(vals) >= 6:
                colors.append(vals[3:6])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    V = torch.tensor(verts, dtype=DTYPE).reshape(-1, 3)
    Fc = torch.tensor(faces, dtype=torch.int64).reshape(-1, 3)
    if len(Fc) and (int(Fc.min()) < 0 or int(Fc.max()) >= len(V)):
        raise IndexError(f"face index out of range for {len(V)} vertices")
    C = torch.tensor(colors, dtype=DTYPE).reshape(-1, 3) if colors and len(colors) == len(verts) else None
    return SurfaceMesh(V, Fc, C)
