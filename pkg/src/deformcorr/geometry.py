"""Non-differentiable geometry: isosurfaces, mesh metrics, geodesics and occupancy grids."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph
from scipy.spatial import cKDTree

DEGENERATE_AREA = 1e-12


class InvalidInputError(ValueError):
    pass


class UnreachableError(ValueError):
    def __init__(self, src, dst, comp_src, comp_dst):
        super().__init__(f"vertex {dst} (component {comp_dst}) is unreachable from vertex {src} (component {comp_src})")
        self.components = (comp_src, comp_dst)


@dataclass
class TriMesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise InvalidInputError("triangle index out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def triangle_areas(self):
        v = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def area(self) -> float:
        return float(self.triangle_areas().sum())

    def edges(self):
        """Unique undirected edges as sorted index pairs."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def euler_characteristic(self) -> int:
        used = np.unique(self.triangles)
        return int(len(used) - len(self.edges()) + len(self.triangles))

    def components(self):
        """(count, label per vertex) over the edge graph; isolated vertices are their own component."""
        n = self.n_vertices
        e = self.edges()
        g = sparse.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
        return csgraph.connected_components(g, directed=False)

    def n_components(self) -> int:
        """Components among vertices that belong to at least one triangle."""
        if self.n_triangles == 0:
            return 0
        _, labels = self.components()
        return int(len(np.unique(labels[np.unique(self.triangles)])))

    def vertex_normals(self):
        v = self.vertices[self.triangles]
        fn = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.triangles[:, k], fn)
        nrm = np.linalg.norm(vn, axis=1, keepdims=True)
        return vn / np.where(nrm > 0, nrm, 1.0)

    def sample_surface(self, n, seed=0):
        """Area-uniform random surface points."""
        if self.n_triangles == 0:
            raise InvalidInputError("cannot sample an empty mesh")
        rng = np.random.default_rng(seed)
        a = self.triangle_areas()
        tri = rng.choice(self.n_triangles, size=n, p=a / a.sum())
        r1 = np.sqrt(rng.random(n))
        r2 = rng.random(n)
        v = self.vertices[self.triangles[tri]]
        return (1 - r1)[:, None] * v[:, 0] + (r1 * (1 - r2))[:, None] * v[:, 1] + (r1 * r2)[:, None] * v[:, 2]


def grid_points(bounds, resolution):
    lo, hi = _bounds(bounds)
    res = _resolution(resolution)
    axes = [np.linspace(lo[k], hi[k], res[k]) for k in range(3)]
    spacing = (hi - lo) / (res - 1)
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return g, spacing, lo


def _bounds(bounds):
    b = np.asarray(bounds, dtype=np.float64)
    if b.shape == (2,):
        lo, hi = np.full(3, b[0]), np.full(3, b[1])
    else:
        lo, hi = b[0], b[1]
    if np.any(hi <= lo):
        raise InvalidInputError("bounds must have positive extent")
    return lo, hi


def _resolution(resolution):
    r = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (3,)).copy()
    return r


def evaluate_grid(field, bounds, resolution, chunk=65536):
    """Field values on a regular grid, evaluated in fixed-order slabs."""
    g, spacing, lo = grid_points(bounds, resolution)
    flat = g.reshape(-1, 3)
    vals = np.concatenate([np.asarray(field(flat[i:i + chunk]), dtype=np.float64).reshape(-1)
                           for i in range(0, len(flat), chunk)])
    if not np.all(np.isfinite(vals)):
        raise InvalidInputError("field is not finite on the grid")
    return vals.reshape(g.shape[:3]), spacing, lo


def marching_cubes(field, bounds=(-1.0, 1.0), resolution=64) -> TriMesh:
    """Zero level set of ``field`` (negative inside) as a triangle mesh with outward normals."""
    from skimage import measure

    if np.any(_resolution(resolution) < 8):
        raise InvalidInputError("resolution must be at least 8 per axis")
    vol, spacing, lo = evaluate_grid(field, bounds, resolution)
    if vol.min() > 0 or vol.max() < 0:
        return TriMesh()
    verts, faces, _, _ = measure.marching_cubes(vol, level=0.0, spacing=tuple(spacing), allow_degenerate=False)
    verts = verts + lo
    # skimage's winding already gives normals along increasing field values, which is
    # outward for negative-inside SDFs.
    return clean_mesh(TriMesh(verts, faces))


def clean_mesh(mesh: TriMesh) -> TriMesh:
    """Merge coincident vertices, drop triangles of area <= 1e-12 and unused vertices."""
    if mesh.n_triangles == 0:
        return TriMesh()
    key = np.round(mesh.vertices / 1e-10).astype(np.int64)
    _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
    verts = mesh.vertices[first]
    tris = inv.reshape(-1)[mesh.triangles]
    m = TriMesh(verts, tris)
    keep = (m.triangle_areas() > DEGENERATE_AREA) & (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 0] != tris[:, 2])
    tris = tris[keep]
    used, remap = np.unique(tris, return_inverse=True)
    return TriMesh(verts[used], remap.reshape(-1, 3))


def chamfer(a, b) -> float:
    """Symmetric mean of squared nearest-neighbour distances (not scaled by 1000)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise InvalidInputError("chamfer distance needs two non-empty point sets")
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(np.mean(da ** 2) + np.mean(db ** 2))


def nearest(points, queries):
    """Index and distance of the nearest point for each query."""
    d, i = cKDTree(np.asarray(points, dtype=np.float64)).query(np.asarray(queries, dtype=np.float64))
    return i, d


@dataclass
class OccupancyGrid:
    resolution: tuple
    origin: np.ndarray
    spacing: np.ndarray
    bits: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.spacing) <= 0):
            raise InvalidInputError("grid spacing must be positive")
        if self.bits.size != int(np.prod(self.resolution)):
            raise InvalidInputError("occupancy size does not match the resolution")


def occupancy(field, bounds=(-1.0, 1.0), resolution=64) -> OccupancyGrid:
    vol, spacing, lo = evaluate_grid(field, bounds, resolution)
    return OccupancyGrid(tuple(vol.shape), lo, spacing, vol < 0)


def iou(field_a, field_b, bounds=(-1.0, 1.0), resolution=64) -> float:
    """Volumetric IoU of the negative regions; two empty fields count as identical (1.0)."""
    if np.any(_resolution(resolution) < 32):
        raise InvalidInputError("IoU needs resolution of at least 32 per axis")
    a = occupancy(field_a, bounds, resolution).bits
    b = occupancy(field_b, bounds, resolution).bits
    return iou_bits(a, b)


def iou_bits(a, b) -> float:
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(a & b) / union)


def _edge_graph(mesh: TriMesh):
    e = mesh.edges()
    w = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    n = mesh.n_vertices
    return sparse.coo_matrix((w, (e[:, 0], e[:, 1])), shape=(n, n)).tocsr()


def geodesic_from(mesh: TriMesh, sources):
    """Edge-graph shortest-path lengths from each source vertex to every vertex (inf if unreachable)."""
    return csgraph.dijkstra(_edge_graph(mesh), directed=False, indices=np.atleast_1d(sources))


def geodesic(mesh: TriMesh, src: int, dst: int) -> float:
    """Edge-graph Dijkstra distance; an upper bound on the surface geodesic."""
    if src == dst:
        return 0.0
    d = geodesic_from(mesh, [src])[0, dst]
    if not np.isfinite(d):
        _, labels = mesh.components()
        raise UnreachableError(src, dst, int(labels[src]), int(labels[dst]))
    return float(d)


def icosphere(level: int = 4, radius: float = 1.0) -> TriMesh:
    """Subdivided icosahedron with vertices projected onto the sphere."""
    t = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
                  [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=np.float64)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
                  [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
                  [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]], dtype=np.int64)
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(level):
        cache = {}
        verts = list(v)

        def mid(i, j):
            k = (min(i, j), max(i, j))
            if k not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[k] = len(verts) - 1
            return cache[k]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        v = np.array(verts)
        f = np.array(nf, dtype=np.int64)
    return TriMesh(v * radius, f)


def write_obj(path, vertices, triangles=None, colors=None) -> Path:
    """OBJ with 9-significant-digit coordinates; optional per-vertex RGB in [0, 1]."""
    path = Path(path)
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    lines = []
    for k, p in enumerate(v):
        s = "v {:.9g} {:.9g} {:.9g}".format(*p)
        if colors is not None:
            s += " {:.6g} {:.6g} {:.6g}".format(*np.asarray(colors[k], dtype=np.float64))
        lines.append(s)
    if triangles is not None:
        for t in np.asarray(triangles, dtype=np.int64).reshape(-1, 3):
            lines.append(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}")
    path.write_text("\n".join(lines) + "\n")
    return path


def read_obj(path):
    """(vertices, triangles, colors or None) from an OBJ written by :func:`write_obj`."""
    verts, cols, tris = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
            if len(parts) >= 7:
                cols.append([float(x) for x in parts[4:7]])
        elif parts[0] == "f":
            tris.append([int(x.split("/")[0]) - 1 for x in parts[1:4]])
    colors = np.array(cols) if cols and len(cols) == len(verts) else None
    return np.array(verts).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3), colors


def save_mesh(mesh: TriMesh, path, colors=None) -> Path:
    return write_obj(path, mesh.vertices, mesh.triangles, colors)
