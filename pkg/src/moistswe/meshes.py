"""Triangular meshes: icosahedral spheres and doubly periodic planes.

Sphere meshes keep flat (chordal) cells; every refinement step bisects edges
and projects the new vertices back to the sphere radius. Cells are oriented
counterclockwise seen from outside (planar: from +z), so contravariant Piola
maps built on them are orientation preserving.

Facet convention: the "+" side is the adjacent cell with the lower index.
Geometry is always derived from per-cell vertex coordinates (``cell_coords``),
which carry minimal-image copies on periodic meshes.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from moistswe.errors import MeshQualityError, ResourceLimitError

__all__ = [
    "Mesh",
    "GeometryTables",
    "build_icosahedral_sphere",
    "build_planar_periodic",
    "compute_geometry",
    "lonlat_of",
    "mesh_hash",
    "write_mesh_text",
    "read_mesh_text",
]

EARTH_RADIUS = 6371220.0

# golden-ratio icosahedron, vertices on circumscribed sphere
_PHI = (1.0 + np.sqrt(5.0)) / 2.0
_ICO_VERTS = np.array(
    [
        [-1, _PHI, 0], [1, _PHI, 0], [-1, -_PHI, 0], [1, -_PHI, 0],
        [0, -1, _PHI], [0, 1, _PHI], [0, -1, -_PHI], [0, 1, -_PHI],
        [_PHI, 0, -1], [_PHI, 0, 1], [-_PHI, 0, -1], [-_PHI, 0, 1],
    ],
    dtype=float,
)
_ICO_FACES = np.array(
    [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ],
    dtype=np.int64,
)


@dataclass
class Mesh:
    """Immutable triangulation with interior-only facets.

    facets rows are (cell_plus, local_edge_plus, cell_minus, local_edge_minus);
    local edge k of a cell joins its local vertices (k+1)%3 and (k+2)%3.
    """

    vertices: np.ndarray          # (nv, 3)
    cells: np.ndarray             # (nc, 3) vertex ids, CCW from outside
    facets: np.ndarray            # (nf, 4)
    cell_coords: np.ndarray       # (nc, 3, 3) minimal-image vertex positions
    kind: str                     # "sphere" | "planar"
    radius: float = 0.0           # sphere only
    extents: tuple = (0.0, 0.0)   # planar only (Lx, Ly)
    level: int = -1               # sphere refinement level, -1 otherwise
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_vertices(self):
        return self.vertices.shape[0]

    @property
    def num_cells(self):
        return self.cells.shape[0]

    @property
    def num_facets(self):
        return self.facets.shape[0]


def _extract_facets(cells, num_vertices):
    """Pair up cell edges into interior facets, '+' side = lower cell index."""
    nc = cells.shape[0]
    locals_ = np.stack(
        [cells[:, [1, 2]], cells[:, [2, 0]], cells[:, [0, 1]]], axis=1
    )  # (nc, 3, 2)
    lo = locals_.min(axis=2).ravel()
    hi = locals_.max(axis=2).ravel()
    key = lo.astype(np.int64) * num_vertices + hi.astype(np.int64)
    order = np.argsort(key, kind="stable")
    sk = key[order]
    if sk.shape[0] % 2 or np.any(sk[0::2] != sk[1::2]):
        raise MeshQualityError("mesh is not closed: unpaired cell edges found")
    first, second = order[0::2], order[1::2]
    c1, k1 = first // 3, first % 3
    c2, k2 = second // 3, second % 3
    swap = c1 > c2
    c1s = np.where(swap, c2, c1)
    k1s = np.where(swap, k2, k1)
    c2s = np.where(swap, c1, c2)
    k2s = np.where(swap, k1, k2)
    if np.any(c1s == c2s):
        raise MeshQualityError("degenerate facet: both sides on the same cell")
    return np.column_stack([c1s, k1s, c2s, k2s]).astype(np.int64)


def _orient_ccw(cells, coords, outward):
    """Swap two vertices of any cell whose normal opposes `outward` (nc, 3)."""
    e1 = coords[:, 1] - coords[:, 0]
    e2 = coords[:, 2] - coords[:, 0]
    n = np.cross(e1, e2)
    flip = np.einsum("ci,ci->c", n, outward) < 0.0
    cells = cells.copy()
    cells[flip, 1], cells[flip, 2] = cells[flip, 2].copy(), cells[flip, 1].copy()
    return cells


def build_icosahedral_sphere(level, radius=EARTH_RADIUS, max_level=8):
    """Icosahedral sphere mesh with 20 * 4**level cells.

    Midpoint refinement with projection to the sphere after every step.
    Deterministic: identical inputs give bitwise identical arrays.
    """
    if level < 0:
        raise ValueError(f"level must be nonnegative, got {level}")
    if level > max_level:
        raise ResourceLimitError(
            f"refinement level {level} exceeds maximum {max_level}"
        )
    if radius <= 0.0:
        raise ValueError(f"radius must be positive, got {radius}")

    verts = [v / np.linalg.norm(v) for v in _ICO_VERTS]
    faces = _ICO_FACES.copy()
    for _ in range(level):
        midpoint = {}

        def mid(i, j):
            ij = (i, j) if i < j else (j, i)
            m = midpoint.get(ij)
            if m is None:
                p = verts[i] + verts[j]
                verts.append(p / np.linalg.norm(p))
                m = len(verts) - 1
                midpoint[ij] = m
            return m

        new_faces = np.empty((4 * faces.shape[0], 3), dtype=np.int64)
        for f, (a, b, c) in enumerate(faces):
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new_faces[4 * f + 0] = (a, ab, ca)
            new_faces[4 * f + 1] = (b, bc, ab)
            new_faces[4 * f + 2] = (c, ca, bc)
            new_faces[4 * f + 3] = (ab, bc, ca)
        faces = new_faces

    vertices = np.asarray(verts) * radius
    coords = vertices[faces]
    centroids = coords.mean(axis=1)
    cells = _orient_ccw(faces, coords, centroids)
    cell_coords = vertices[cells]
    facets = _extract_facets(cells, vertices.shape[0])
    return Mesh(
        vertices=vertices,
        cells=cells,
        facets=facets,
        cell_coords=cell_coords,
        kind="sphere",
        radius=float(radius),
        level=level,
    )


def build_planar_periodic(nx, ny, Lx, Ly):
    """Doubly periodic triangulated rectangle, 2*nx*ny cells, all facets interior."""
    if nx < 2 or ny < 2:
        raise ValueError(f"need nx, ny >= 2 for a valid periodic mesh, got {nx}, {ny}")
    if Lx <= 0.0 or Ly <= 0.0:
        raise ValueError(f"extents must be positive, got {Lx}, {Ly}")
    dx, dy = Lx / nx, Ly / ny
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    vid = lambda i, j: (j % ny) * nx + (i % nx)
    vertices = np.zeros((nx * ny, 3))
    vertices[vid(ii, jj).ravel(), 0] = (ii * dx).ravel()
    vertices[vid(ii, jj).ravel(), 1] = (jj * dy).ravel()

    cells = []
    coords = []
    for j in range(ny):
        for i in range(nx):
            # square corner (i, j); coordinates unwrapped, ids wrapped
            p00 = np.array([i * dx, j * dy, 0.0])
            p10 = np.array([(i + 1) * dx, j * dy, 0.0])
            p01 = np.array([i * dx, (j + 1) * dy, 0.0])
            p11 = np.array([(i + 1) * dx, (j + 1) * dy, 0.0])
            v00, v10 = vid(i, j), vid(i + 1, j)
            v01, v11 = vid(i, j + 1), vid(i + 1, j + 1)
            cells.append((v00, v10, v11))
            coords.append((p00, p10, p11))
            cells.append((v00, v11, v01))
            coords.append((p00, p11, p01))
    cells = np.asarray(cells, dtype=np.int64)
    cell_coords = np.asarray(coords)
    facets = _extract_facets(cells, nx * ny)
    return Mesh(
        vertices=vertices,
        cells=cells,
        facets=facets,
        cell_coords=cell_coords,
        kind="planar",
        extents=(float(Lx), float(Ly)),
    )


@dataclass
class GeometryTables:
    """Per-cell affine data and per-facet frames, derived from cell_coords."""

    # cells
    E: np.ndarray            # (nc, 3, 2) columns: v1-v0, v2-v0
    detJ: np.ndarray         # (nc,) = 2 * area, positive
    area: np.ndarray         # (nc,)
    khat: np.ndarray         # (nc, 3) unit cell-plane normal (outward / +z)
    metric: np.ndarray       # (nc, 2, 2) E^T E
    centroid: np.ndarray     # (nc, 3)
    edge_len: np.ndarray     # (nc, 3) physical length of local edge k
    min_edge: np.ndarray     # (nc,)
    # facets
    length: np.ndarray          # (nf,)
    normal: np.ndarray          # (nf, 2, 3) shared facet frame, normal[f,1] = -normal[f,0]
    inplane_normal: np.ndarray  # (nf, 2, 3) each side's in-plane outward normal
    tangent_ccw: np.ndarray     # (nf, 2, 3) each side's CCW edge direction (unit)
    khat_side: np.ndarray       # (nf, 2, 3)
    midpoint: np.ndarray        # (nf, 3)
    flip: np.ndarray            # (nf, 2) +1 if the side's local edge runs in the
                                # global (low->high vertex id) direction, else -1

    @property
    def total_area(self):
        return float(self.area.sum())


def compute_geometry(mesh):
    """Build (and cache on the mesh) affine maps, frames, and facet tables."""
    cached = mesh._cache.get("geometry")
    if cached is not None:
        return cached

    coords = mesh.cell_coords
    e1 = coords[:, 1] - coords[:, 0]
    e2 = coords[:, 2] - coords[:, 0]
    cr = np.cross(e1, e2)
    detJ = np.linalg.norm(cr, axis=1)
    area = 0.5 * detJ
    mean_area = area.mean()
    bad = np.nonzero(area < 1e-12 * mean_area)[0]
    if bad.size:
        raise MeshQualityError(f"degenerate cell(s), first: {bad[0]}")
    khat = cr / detJ[:, None]
    if mesh.kind == "sphere":
        centroid = coords.mean(axis=1)
        if np.any(np.einsum("ci,ci->c", khat, centroid) <= 0.0):
            raise MeshQualityError("cell orientation is not outward")
    E = np.stack([e1, e2], axis=2)
    metric = np.einsum("cia,cib->cab", E, E)
    centroid = coords.mean(axis=1)

    # local edge k joins local vertices (k+1)%3, (k+2)%3
    edge_vec = np.stack(
        [coords[:, 2] - coords[:, 1], coords[:, 0] - coords[:, 2],
         coords[:, 1] - coords[:, 0]],
        axis=1,
    )  # (nc, 3, 3) CCW directions
    edge_len = np.linalg.norm(edge_vec, axis=2)
    min_edge = edge_len.min(axis=1)

    f = mesh.facets
    cp, kp, cm, km = f[:, 0], f[:, 1], f[:, 2], f[:, 3]
    nf = f.shape[0]
    sides_c = np.stack([cp, cm], axis=1)
    sides_k = np.stack([kp, km], axis=1)

    dvec = edge_vec[sides_c, sides_k]                  # (nf, 2, 3) CCW per side
    dlen = edge_len[sides_c, sides_k]                  # (nf, 2)
    if np.max(np.abs(dlen[:, 0] - dlen[:, 1])) > 1e-9 * dlen.mean():
        raise MeshQualityError("facet length disagrees between adjacent cells")
    length = 0.5 * (dlen[:, 0] + dlen[:, 1])
    tangent_ccw = dvec / dlen[:, :, None]
    khat_side = khat[sides_c]
    inplane_normal = np.cross(tangent_ccw, khat_side)  # outward for CCW cells

    # orientation of the local edge vs the global (low->high vertex id) direction
    local_a = mesh.cells[sides_c, (sides_k + 1) % 3]
    local_b = mesh.cells[sides_c, (sides_k + 2) % 3]
    flip = np.where(local_a < local_b, 1, -1).astype(np.int64)

    # shared facet frame: normal to the edge and to the mid-edge vertical,
    # oriented out of the '+' cell; exactly opposite on the two sides
    mid_plus = coords[cp, (kp.astype(int) + 1) % 3] + 0.5 * edge_vec[cp, kp]
    if mesh.kind == "sphere":
        up = mid_plus / np.linalg.norm(mid_plus, axis=1)[:, None]
    elif mesh.kind == "planar":
        up = np.tile(np.array([0.0, 0.0, 1.0]), (nf, 1))
    else:
        raise ValueError(f"unknown mesh kind {mesh.kind!r}")
    tg = dvec[:, 0] * flip[:, 0, None]  # global-direction tangent from '+'
    nshared = np.cross(tg, up)
    nshared /= np.linalg.norm(nshared, axis=1)[:, None]
    outward = np.einsum("fi,fi->f", nshared, mid_plus - centroid[cp])
    nshared[outward < 0.0] *= -1.0
    normal = np.stack([nshared, -nshared], axis=1)

    geo = GeometryTables(
        E=E, detJ=detJ, area=area, khat=khat, metric=metric, centroid=centroid,
        edge_len=edge_len, min_edge=min_edge, length=length, normal=normal,
        inplane_normal=inplane_normal, tangent_ccw=tangent_ccw,
        khat_side=khat_side, midpoint=mid_plus, flip=flip,
    )
    mesh._cache["geometry"] = geo
    return geo


def lonlat_of(points):
    """Longitude in (-pi, pi] and latitude of 3D points; poles get lon = 0."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    r = np.linalg.norm(points, axis=1)
    if np.any(r == 0.0):
        raise ValueError("cannot assign coordinates to the origin")
    lat = np.arcsin(np.clip(points[:, 2] / r, -1.0, 1.0))
    lon = np.arctan2(points[:, 1], points[:, 0])
    at_pole = np.hypot(points[:, 0], points[:, 1]) < 1e-12 * r
    lon = np.where(at_pole, 0.0, lon)
    # atan2 returns -pi for points on the dateline approached from below
    lon = np.where(lon <= -np.pi, np.pi, lon)
    return lon, lat


def mesh_hash(mesh):
    """Stable content hash of the mesh connectivity and coordinates."""
    h = hashlib.sha256()
    h.update(mesh.kind.encode())
    h.update(np.ascontiguousarray(mesh.vertices).tobytes())
    h.update(np.ascontiguousarray(mesh.cells).tobytes())
    return h.hexdigest()


def write_mesh_text(mesh, path):
    """Plain-text dump: VERTICES n / CELLS m sections, one entity per line."""
    with open(path, "w") as fh:
        fh.write(f"VERTICES {mesh.num_vertices}\n")
        for v in mesh.vertices:
            fh.write(f"{float(v[0])!r} {float(v[1])!r} {float(v[2])!r}\n")
        fh.write(f"CELLS {mesh.num_cells}\n")
        for c in mesh.cells:
            fh.write(f"{c[0]} {c[1]} {c[2]}\n")


def read_mesh_text(path):
    """Read a write_mesh_text dump; returns (vertices, cells)."""
    with open(path) as fh:
        tok = fh.readline().split()
        if len(tok) != 2 or tok[0] != "VERTICES":
            raise ValueError(f"malformed mesh file {path}: expected VERTICES header")
        nv = int(tok[1])
        vertices = np.array(
            [[float(x) for x in fh.readline().split()] for _ in range(nv)]
        )
        tok = fh.readline().split()
        if len(tok) != 2 or tok[0] != "CELLS":
            raise ValueError(f"malformed mesh file {path}: expected CELLS header")
        nc = int(tok[1])
        cells = np.array(
            [[int(x) for x in fh.readline().split()] for _ in range(nc)],
            dtype=np.int64,
        )
    return vertices, cells
