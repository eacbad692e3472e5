import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from deformcorr import geometry as G


def sphere(r=1.0, c=(0, 0, 0)):
    c = np.asarray(c, dtype=float)
    return lambda p: np.linalg.norm(p - c, axis=1) - r


def box(h=0.5):
    def f(p):
        q = np.abs(p) - h
        return np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0)
    return f


@pytest.fixture(scope="module")
def sphere_mesh():
    return G.marching_cubes(sphere(), (-1.5, 1.5), 64)


def test_sphere_area_and_topology(sphere_mesh):
    assert abs(sphere_mesh.area() / (4 * np.pi) - 1) < 0.02
    assert sphere_mesh.euler_characteristic() == 2
    assert sphere_mesh.n_components() == 1


def test_marching_cubes_vertices_near_surface(sphere_mesh):
    spacing = 3.0 / 63
    res = np.abs(sphere()(sphere_mesh.vertices))
    assert res.max() < spacing
    assert np.percentile(res, 99) < spacing


def test_marching_cubes_normals_outward(sphere_mesh):
    v = sphere_mesh.vertices[sphere_mesh.triangles]
    fn = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    centre = v.mean(axis=1)
    assert np.all(np.sum(fn * centre, axis=1) > 0)


def test_marching_cubes_cube_is_closed_genus_zero():
    m = G.marching_cubes(box(), (-1, 1), 40)
    assert m.euler_characteristic() == 2
    assert m.n_components() == 1
    # Watertight: every edge shared by exactly two triangles.
    t = m.triangles
    e = np.sort(np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    assert np.all(counts == 2)


def test_marching_cubes_empty_and_errors():
    m = G.marching_cubes(lambda p: np.ones(len(p)), (-1, 1), 16)
    assert m.n_vertices == 0 and m.n_triangles == 0
    with pytest.raises(G.InvalidInputError):
        G.marching_cubes(sphere(), (-1, 1), 4)


def test_no_degenerate_triangles(sphere_mesh):
    assert sphere_mesh.triangle_areas().min() > 1e-12


def test_trimesh_index_validation():
    with pytest.raises(G.InvalidInputError):
        G.TriMesh(np.zeros((3, 3)), [[0, 1, 3]])


def brute_chamfer(a, b):
    d = np.sum((a[:, None] - b[None]) ** 2, axis=-1)
    return d.min(axis=1).mean() + d.min(axis=0).mean()


def test_chamfer_examples():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(500, 3))
    b = rng.normal(size=(500, 3))
    assert G.chamfer(a, a) == 0.0
    assert abs(G.chamfer(a, b) - brute_chamfer(a, b)) < 1e-12
    iso = np.arange(10)[:, None] * np.array([[1.0, 0, 0]])
    eps = 1e-3
    assert G.chamfer(iso, iso + [eps, 0, 0]) == pytest.approx(2 * eps ** 2, rel=1e-9)
    with pytest.raises(G.InvalidInputError):
        G.chamfer(a, np.zeros((0, 3)))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (20, 3), elements=st.floats(-1, 1)), arrays(np.float64, (15, 3), elements=st.floats(-1, 1)))
def test_chamfer_symmetric_and_brute_force(a, b):
    assert G.chamfer(a, b) == pytest.approx(G.chamfer(b, a), abs=1e-15)
    assert abs(G.chamfer(a, b) - brute_chamfer(a, b)) < 1e-12


def test_iou_examples():
    assert G.iou(sphere(0.5), sphere(0.5), (-1, 1), 32) == 1.0
    assert G.iou(sphere(0.3, (-0.5, 0, 0)), sphere(0.3, (0.5, 0, 0)), (-1, 1), 32) == 0.0
    assert abs(G.iou(sphere(1.0), sphere(0.5), (-1.2, 1.2), 96) - 0.125) < 0.01
    empty = lambda p: np.ones(len(p))
    assert G.iou(empty, empty, (-1, 1), 32) == 1.0
    with pytest.raises(G.InvalidInputError):
        G.iou(empty, empty, (-1, 1), 16)


def test_iou_symmetric():
    a, b = sphere(0.4, (0.1, 0, 0)), box(0.35)
    assert G.iou(a, b, (-1, 1), 32) == G.iou(b, a, (-1, 1), 32)


def test_occupancy_grid_invariants():
    g = G.occupancy(sphere(0.5), (-1, 1), 32)
    assert g.bits.size == 32 ** 3 and np.all(g.spacing > 0)
    with pytest.raises(G.InvalidInputError):
        G.OccupancyGrid((2, 2, 2), np.zeros(3), np.zeros(3), np.zeros(8, bool))


def test_geodesic_examples():
    m = G.icosphere(4, 1.0)
    assert G.geodesic(m, 0, 0) == 0.0
    e = m.edges()[0]
    assert G.geodesic(m, int(e[0]), int(e[1])) == pytest.approx(np.linalg.norm(m.vertices[e[0]] - m.vertices[e[1]]))
    anti = int(np.argmin(m.vertices @ m.vertices[0]))
    d = G.geodesic(m, 0, anti)
    assert d >= np.pi * (1 - 1e-9)  # edge paths over-estimate
    assert d / np.pi - 1 < 0.08
    assert G.geodesic(m, anti, 0) == pytest.approx(d)


def test_geodesic_unreachable():
    a = G.icosphere(1, 0.5)
    both = G.TriMesh(np.vstack([a.vertices, a.vertices + 3]), np.vstack([a.triangles, a.triangles + a.n_vertices]))
    assert both.n_components() == 2
    with pytest.raises(G.UnreachableError) as err:
        G.geodesic(both, 0, a.n_vertices)
    assert err.value.components == (0, 1)


def test_sample_surface_lies_on_mesh(sphere_mesh):
    pts = sphere_mesh.sample_surface(2000)
    assert np.abs(np.linalg.norm(pts, axis=1) - 1).max() < 0.01


def test_obj_roundtrip(tmp_path):
    m = G.icosphere(1, 0.7)
    path = G.save_mesh(m, tmp_path / "m.obj", colors=np.full((m.n_vertices, 3), 0.5))
    v, t = G.read_obj(path)[:2]
    np.testing.assert_allclose(v, m.vertices, rtol=1e-8)
    np.testing.assert_array_equal(t, m.triangles)
