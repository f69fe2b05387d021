import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mvfuse.errors import BehindCamera, EmptyCloud, NonWatertight
from mvfuse.geometry import (Camera, MeshSurface, PointCloud, SignedDistanceField, SimilarityTransform, VoxelGrid,
                             apply_transform, box_mesh, chamfer_distance, exposed_faces, project_point,
                             rotvec_to_matrix, uv_sphere_mesh, voxel_surface_mesh, voxel_surface_points,
                             voxelize_mesh)

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)
vec3 = arrays(np.float64, 3, elements=finite)
rotvecs = arrays(np.float64, 3, elements=st.floats(-3, 3, allow_nan=False))
transforms = st.builds(SimilarityTransform, st.floats(0.1, 10.0), rotvecs, vec3)


# --------------------------------------------------------------------------
# transforms


def test_apply_identity():
    assert np.array_equal(apply_transform(SimilarityTransform.identity(), [1.0, 2.0, 3.0]), [1.0, 2.0, 3.0])


def test_apply_scale_translate():
    xf = SimilarityTransform(2.0, np.zeros(3), [0.0, 0.0, 1.0])
    assert np.allclose(apply_transform(xf, [1.0, 0.0, 0.0]), [2.0, 0.0, 1.0], atol=0, rtol=0)


def test_apply_quarter_turn():
    xf = SimilarityTransform(1.0, [0.0, 0.0, np.pi / 2], np.zeros(3))
    assert np.allclose(apply_transform(xf, [1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)


def test_invalid_scale():
    with pytest.raises(ValueError):
        SimilarityTransform(0.0)


def test_rotvec_canonical():
    xf = SimilarityTransform(1.0, [0.0, 0.0, 3 * np.pi], np.zeros(3))
    assert np.linalg.norm(xf.rotvec) < 2 * np.pi
    assert np.allclose(xf.rotation, rotvec_to_matrix([0.0, 0.0, np.pi]), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(transforms, vec3)
def test_transform_round_trip(xf, p):
    assert np.allclose(xf.inverse().apply(xf.apply(p)), p, atol=1e-9)
    assert np.allclose(xf.apply_inverse(xf.apply(p)), p, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(rotvecs)
def test_rotation_orthonormal(r):
    R = rotvec_to_matrix(r)
    assert np.linalg.norm(R.T @ R - np.eye(3)) < 1e-9
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(transforms, transforms, vec3)
def test_compose(a, b, p):
    assert np.allclose(a.compose(b).apply(p), a.apply(b.apply(p)), atol=1e-8)


@settings(max_examples=100, deadline=None)
@given(transforms)
def test_params_round_trip(xf):
    back = SimilarityTransform.from_params(xf.params())
    assert np.allclose(back.rotation, xf.rotation, atol=1e-12)
    assert back.scale == pytest.approx(xf.scale, rel=1e-12)
    assert SimilarityTransform.from_dict(xf.to_dict()).params() == pytest.approx(xf.params())


# --------------------------------------------------------------------------
# chamfer


def test_chamfer_examples():
    a = np.random.default_rng(0).normal(size=(50, 3))
    assert chamfer_distance(a, a) == 0.0
    assert chamfer_distance([[0, 0, 0]], [[3, 4, 0]]) == pytest.approx(5.0, abs=1e-15)
    assert chamfer_distance([[0, 0, 0], [1, 0, 0]], [[0, 0, 0]]) == pytest.approx(0.25, abs=1e-15)


def _brute_chamfer(a, b):
    d = np.linalg.norm(a[:, None] - b[None], axis=2)
    return 0.5 * d.min(axis=1).mean() + 0.5 * d.min(axis=0).mean()


def test_chamfer_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(10):
        a, b = rng.normal(size=(rng.integers(1, 40), 3)), rng.normal(size=(rng.integers(1, 40), 3))
        assert chamfer_distance(PointCloud(a), PointCloud(b)) == pytest.approx(_brute_chamfer(a, b), abs=1e-12)


def test_chamfer_empty():
    with pytest.raises(EmptyCloud):
        chamfer_distance(np.zeros((0, 3)), [[0, 0, 0]])


clouds = arrays(np.float64, st.tuples(st.integers(1, 20), st.just(3)), elements=st.floats(-10, 10))


@settings(max_examples=100, deadline=None)
@given(clouds, clouds, vec3)
def test_chamfer_symmetry_and_translation(a, b, t):
    assert chamfer_distance(a, b) == pytest.approx(chamfer_distance(b, a), abs=1e-12)
    assert chamfer_distance(a + t, b + t) == pytest.approx(chamfer_distance(a, b), abs=1e-9)


# --------------------------------------------------------------------------
# camera


def _axis_camera(**kw):
    return Camera(np.eye(3), np.zeros(3), **kw)


def test_project_on_axis():
    cam = _axis_camera()
    u, v, d = project_point(cam, [0.0, 0.0, 3.0])
    assert (u, v, d) == (cam.cx, cam.cy, 3.0)


def test_project_example():
    cam = _axis_camera(fx=100.0, fy=100.0, cx=50.0, cy=50.0)
    assert project_point(cam, [1.0, 0.0, 2.0]) == pytest.approx((100.0, 50.0, 2.0))


def test_behind_camera():
    with pytest.raises(BehindCamera):
        project_point(_axis_camera(), [0.0, 0.0, -1.0])


def test_camera_look_at_and_round_trip():
    cam = Camera.look_at([3.0, 0.0, 0.0], [0.0, 0.0, 0.0])
    assert np.allclose(cam.center, [3.0, 0.0, 0.0])
    u, v, d = project_point(cam, [0.0, 0.0, 0.0])
    assert (u, v) == pytest.approx((cam.cx, cam.cy))
    assert d == pytest.approx(3.0)
    back = Camera.from_dict(cam.to_dict())
    assert np.allclose(back.rotation, cam.rotation) and np.allclose(back.translation, cam.translation)


def test_camera_rejects_bad_rotation():
    with pytest.raises(ValueError):
        Camera(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


# --------------------------------------------------------------------------
# voxelization


def _parity_oracle(mesh, centers):
    """Independent center-inside test: count +x crossings with every triangle (Moller-Trumbore)."""
    V, F = mesh.vertices, mesh.faces
    inside = []
    d = np.array([1.0, 1e-7, 2e-7])
    for o in centers:
        hits = 0
        for f in F:
            a, b, c = V[f]
            e1, e2 = b - a, c - a
            h = np.cross(d, e2)
            det = e1 @ h
            if abs(det) < 1e-14:
                continue
            s = o - a
            u = (s @ h) / det
            q = np.cross(s, e1)
            v = (d @ q) / det
            t = (e2 @ q) / det
            hits += (0 < u < 1) and (v > 0) and (u + v < 1) and t > 0
        inside.append(hits % 2 == 1)
    return np.array(inside)


def test_voxelize_unit_cube():
    grid = voxelize_mesh(box_mesh([-0.5] * 3, [0.5] * 3), 4, ([-1.0] * 3, [1.0] * 3))
    expected = np.zeros((4, 4, 4))
    expected[1:3, 1:3, 1:3] = 1
    assert np.array_equal(grid.occupancy, expected)
    assert np.array_equal(grid.binary().ravel(), _parity_oracle(box_mesh([-0.5] * 3, [0.5] * 3), grid.centers(
        np.argwhere(np.ones((4, 4, 4))))))


def test_voxelize_matches_oracle_on_sphere():
    mesh = uv_sphere_mesh(radius=0.7, n_lat=8, n_lon=12)
    grid = voxelize_mesh(mesh, 6, ([-1.0] * 3, [1.0] * 3))
    centers = grid.centers(np.argwhere(np.ones((6, 6, 6))))
    assert np.array_equal(grid.binary().ravel(), _parity_oracle(mesh, centers))


def test_voxelize_empty():
    grid = voxelize_mesh(MeshSurface(np.zeros((0, 3)), np.zeros((0, 3))), 4, ([0.0] * 3, [1.0] * 3))
    assert not grid.occupancy.any()


def test_voxelize_sphere_volume():
    grid = voxelize_mesh(uv_sphere_mesh(radius=0.5), 32, ([-1.0] * 3, [1.0] * 3))
    frac = grid.binary().mean()
    analytic = (4.0 / 3.0) * np.pi * 0.5 ** 3 / 8.0
    assert abs(frac - analytic) / analytic < 0.05


def test_voxelize_open_mesh():
    m = box_mesh([-0.5] * 3, [0.5] * 3)
    open_mesh = MeshSurface(m.vertices, m.faces[2:])
    with pytest.raises(NonWatertight):
        voxelize_mesh(open_mesh, 16, ([-1.0] * 3, [1.0] * 3))


# --------------------------------------------------------------------------
# voxel grids and surfaces


def test_voxel_grid_validation():
    with pytest.raises(ValueError):
        VoxelGrid(4, np.zeros(3), 0.0, np.zeros((4, 4, 4)))
    with pytest.raises(ValueError):
        VoxelGrid(4, np.zeros(3), 1.0, np.full((4, 4, 4), 1.5))


def test_lookup_and_centers():
    occ = np.zeros((4, 4, 4))
    occ[1, 2, 3] = 1
    g = VoxelGrid(4, [-2.0, -2.0, -2.0], 1.0, occ)
    c = g.centers([[1, 2, 3]])
    assert np.allclose(c, [[-0.5, 0.5, 1.5]])
    assert g.lookup(c)[0] and not g.lookup(c + 1.0)[0]
    assert not g.lookup([[100.0, 0.0, 0.0]])[0]


def test_exposed_faces_single_voxel():
    occ = np.zeros((3, 3, 3), dtype=bool)
    occ[1, 1, 1] = True
    idx, dirs = exposed_faces(occ)
    assert len(idx) == 6
    occ[1, 1, 2] = True
    assert len(exposed_faces(occ)[0]) == 10


def test_surface_mesh_area_matches_faces():
    occ = np.zeros((4, 4, 4))
    occ[1:3, 1:3, 1:2] = 1
    g = VoxelGrid(4, np.zeros(3), 0.5, occ)
    mesh = voxel_surface_mesh(g)
    # 2 x 2 x 1 block: 16 unit faces of area 0.25
    assert mesh.areas.sum() == pytest.approx(16 * 0.25)
    pts = voxel_surface_points(g, per_axis=2)
    assert len(pts) == 16 * 4


def test_sdf_exact_at_voxel_centers():
    occ = np.zeros((8, 8, 8))
    occ[2:6, 2:6, 2:6] = 1
    g = VoxelGrid(8, np.zeros(3), 0.25, occ)
    sdf = SignedDistanceField(g)
    idx = np.argwhere(np.ones((8, 8, 8)))
    assert np.allclose(sdf(g.centers(idx)), sdf.values[tuple(idx.T)], atol=1e-9)
    # sign convention: negative inside, positive outside
    assert sdf(g.centers([[3, 3, 3]]))[0] < 0 < sdf(g.centers([[0, 0, 0]]))[0]


def test_sdf_gradient_matches_fd():
    rng = np.random.default_rng(0)
    occ = (rng.random((8, 8, 8)) < 0.4).astype(float)
    g = VoxelGrid(8, np.zeros(3), 0.2, occ)
    sdf = SignedDistanceField(g)
    pts = rng.uniform(-0.3, 1.9, size=(50, 3))
    _, grad = sdf(pts, grad=True)
    h = 1e-6
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        fd = (sdf(pts + e) - sdf(pts - e)) / (2 * h)
        assert np.allclose(fd, grad[:, a], atol=1e-5)


def test_mesh_drops_degenerate_triangles():
    v = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [0, 1, 0]], dtype=float)
    m = MeshSurface(v, [[0, 1, 2], [0, 1, 3]])
    assert len(m.faces) == 1
    with pytest.raises(ValueError):
        MeshSurface(v, [[0, 1, 9]])


def test_mesh_sampling_on_surface():
    m = box_mesh([0.0] * 3, [1.0, 2.0, 3.0])
    pts, tri = m.sample(500, np.random.default_rng(0))
    on_face = np.isclose(pts, 0.0) | np.isclose(pts, [1.0, 2.0, 3.0])
    assert on_face.any(axis=1).all()
    assert len(tri) == 500
