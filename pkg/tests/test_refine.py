import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvfuse.errors import EmptyReference, NonFinite
from mvfuse.geometry import PointCloud, SimilarityTransform, VoxelGrid, box_mesh, voxel_surface_mesh
from mvfuse.refine import (RefineConfig, SceneGraph, SceneObject, collision_rate, collision_rate_bruteforce,
                           interaction_pairs, penetration_volumes, prepare, refine, total_loss)
from mvfuse.scenes import synth_scene


def _box_grid(D, lo, hi):
    occ = np.zeros((D, D, D))
    occ[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = 1.0
    return VoxelGrid.cube_bounds(D, 0.5, occ)


def _exact_object(mesh, pose, cfg, k=0):
    """An object whose reference cloud is exactly its own transformed samples."""
    probe = prepare(SceneGraph([SceneObject(mesh, pose, PointCloud(np.zeros((1, 3))))] * (k + 1)), cfg)[k]
    return SceneObject(mesh, pose, PointCloud(pose.apply(probe.samples)))


def _two_cubes_side_by_side(seed=0, spacing=0.55):
    """The overlapping-cube scene with references placed side by side."""
    sc = synth_scene("two_cubes_overlap", seed)
    return SceneGraph([SceneObject(o.grid, o.pose, PointCloud(o.reference.points + [spacing * i, 0.0, 0.0]))
                       for i, o in enumerate(sc.objects)])


# --------------------------------------------------------------------------
# config


def test_config_validation():
    with pytest.raises(ValueError):
        RefineConfig(iterations=0)
    with pytest.raises(ValueError):
        RefineConfig(lambda_col=-1.0)
    assert RefineConfig().to_dict()["lambda_con"] == 50.0


# --------------------------------------------------------------------------
# total loss


def test_align_zero_at_reference():
    cfg = RefineConfig(n_samples=500)
    pose = SimilarityTransform(1.1, [0.1, -0.2, 0.3], [0.2, 0.0, -0.1])
    obj = _exact_object(box_mesh([-0.3, -0.2, -0.4], [0.3, 0.2, 0.4]), pose, cfg)
    lb = total_loss(SceneGraph([obj]), cfg)
    assert lb.align == pytest.approx(0.0, abs=1e-12)
    assert np.max(np.abs(lb.gradient)) < 1e-9


def test_far_apart_objects_have_no_physics_terms():
    cfg = RefineConfig(n_samples=300)
    mesh = box_mesh([-0.2] * 3, [0.2] * 3)
    objs = [_exact_object(mesh, SimilarityTransform(1.0, np.zeros(3), [x, 0.0, 0.0]), cfg) for x in (0.0, 1.0)]
    scene = SceneGraph(objs)
    assert interaction_pairs(scene, prepare(scene, cfg), cfg.tau) == []
    lb = total_loss(scene, cfg)
    assert lb.collision == 0.0 and lb.contact == 0.0


def test_loss_non_negative_and_reg_zero_at_init():
    rng = np.random.default_rng(0)
    for seed in range(3):
        scene = _two_cubes_side_by_side(seed)
        lb = total_loss(scene, RefineConfig(n_samples=500))
        assert lb.reg == 0.0
        assert min(lb.total, lb.align, lb.collision, lb.contact) >= 0.0
        x = np.concatenate([o.pose.params() for o in scene.objects]) + rng.normal(size=14) * 0.1
        lb = total_loss(scene, RefineConfig(n_samples=500), x)
        assert min(lb.total, lb.align, lb.collision, lb.contact, lb.reg) >= 0.0


@pytest.mark.parametrize("seed", range(20))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    objs = []
    for k in range(2):
        mesh = box_mesh(-rng.uniform(0.3, 0.6, 3), rng.uniform(0.3, 0.6, 3))
        pose = SimilarityTransform(rng.uniform(0.8, 1.2), rng.normal(size=3) * 0.2,
                                   np.array([0.9 * k, 0.0, 0.0]) + rng.normal(size=3) * 0.05)
        pts, _ = mesh.sample(300, rng)
        gt = SimilarityTransform(pose.scale, pose.rotvec + 0.05, pose.translation + 0.05)
        objs.append(SceneObject(mesh, pose, PointCloud(gt.apply(pts))))
    scene = SceneGraph(objs, pairs=[(0, 1)])
    cfg = RefineConfig(n_samples=200, tau=0.3)
    prep = prepare(scene, cfg)
    x0 = np.concatenate([o.pose.params() for o in objs]) + rng.normal(size=14) * 0.02
    g = total_loss(scene, cfg, x0, prep).gradient
    # nearest-neighbour assignments make the loss piecewise smooth; a small
    # step keeps both evaluations inside one smooth piece
    h = 1e-7
    for m in range(len(x0)):
        e = np.zeros_like(x0)
        e[m] = h
        fd = (total_loss(scene, cfg, x0 + e, prep).total - total_loss(scene, cfg, x0 - e, prep).total) / (2 * h)
        assert fd == pytest.approx(g[m], rel=1e-3, abs=1e-7)


def test_empty_reference():
    mesh = box_mesh([-0.2] * 3, [0.2] * 3)
    with pytest.raises(EmptyReference):
        total_loss(SceneGraph([SceneObject(mesh, SimilarityTransform(), PointCloud(np.zeros((0, 3))))]))


def test_missing_reference_warns_and_skips():
    cfg = RefineConfig(n_samples=100)
    mesh = box_mesh([-0.2] * 3, [0.2] * 3)
    with pytest.warns(RuntimeWarning):
        lb = total_loss(SceneGraph([SceneObject(mesh, SimilarityTransform())]), cfg)
    assert lb.align == 0.0


def test_scene_needs_objects():
    with pytest.raises(ValueError):
        SceneGraph([])


# --------------------------------------------------------------------------
# optimizer


def test_two_cubes_separate():
    scene = _two_cubes_side_by_side()
    res = refine(scene, RefineConfig())
    assert collision_rate(scene) == 100.0
    assert res.report["collision_rate"] == 0.0
    assert collision_rate(scene, transforms=res.transforms) == 0.0
    assert res.trace[-1]["total"] <= res.trace[0]["total"]
    assert len(res.trace) == 101


def test_optimal_scene_does_not_move():
    cfg = RefineConfig(n_samples=500)
    pose = SimilarityTransform(0.9, [0.2, 0.1, -0.1], [0.1, 0.2, 0.3])
    obj = _exact_object(box_mesh([-0.3, -0.2, -0.4], [0.3, 0.2, 0.4]), pose, cfg)
    res = refine(SceneGraph([obj]), cfg)
    assert np.max(np.abs(res.params - pose.params())) < 1e-4


def test_translation_recovered():
    sc = synth_scene("single_align", 0)
    o = sc.objects[0]
    init = SimilarityTransform(o.pose.scale, o.pose.rotvec, o.pose.translation + [0.1, 0.0, 0.0])
    # a full-surface reference, independent of the optimizer's own samples
    ref = PointCloud(o.pose.apply(voxel_surface_mesh(o.grid).sample(4096, np.random.default_rng(1000))[0]))
    res = refine(SceneGraph([SceneObject(o.grid, init, ref)]), RefineConfig(lambda_reg=0.0))
    assert np.linalg.norm(res.transforms[0].translation - o.pose.translation) < 1e-3


def test_final_loss_not_above_initial():
    for seed in range(3):
        res = refine(_two_cubes_side_by_side(seed, spacing=0.5 + 0.05 * seed), RefineConfig(n_samples=1000))
        assert res.trace[-1]["total"] <= res.trace[0]["total"]


def test_non_finite_aborts():
    mesh = box_mesh([-0.2] * 3, [0.2] * 3)
    ref = PointCloud(np.full((10, 3), 1e308))
    with pytest.raises(NonFinite) as info:
        refine(SceneGraph([SceneObject(mesh, SimilarityTransform(), ref)]), RefineConfig(n_samples=50))
    assert "iteration 0" in str(info.value)


def test_refine_deterministic():
    a = refine(_two_cubes_side_by_side(), RefineConfig(n_samples=500, iterations=20))
    b = refine(_two_cubes_side_by_side(), RefineConfig(n_samples=500, iterations=20))
    assert np.array_equal(a.params, b.params) and a.trace == b.trace


# --------------------------------------------------------------------------
# rigid invariance


def _moved(scene, G):
    return SceneGraph([SceneObject(o.geometry, G.compose(o.pose), PointCloud(G.apply(o.reference.points)))
                       for o in scene.objects], scene.pairs)


def _relative(transforms):
    return transforms[0].inverse().compose(transforms[1]).params()


def test_translation_invariance():
    scene = _two_cubes_side_by_side()
    cfg = RefineConfig(n_samples=1000)
    base = _relative(refine(scene, cfg).transforms)
    for t in ([0.4, 1.0, -0.3], [-2.0, 0.5, 3.0]):
        moved = _relative(refine(_moved(scene, SimilarityTransform(1.0, np.zeros(3), t)), cfg).transforms)
        assert np.max(np.abs(moved - base)) < 1e-6


def test_objective_rotation_invariance():
    """Data terms are unchanged when the whole scene and the poses rotate together."""
    scene = _two_cubes_side_by_side()
    cfg = RefineConfig(n_samples=1000)
    G = SimilarityTransform(1.0, [0.3, -0.2, 0.5], [0.4, 1.0, -0.3])
    rng = np.random.default_rng(0)
    x = np.concatenate([o.pose.params() for o in scene.objects]) + rng.normal(size=14) * 0.05
    xg = np.concatenate([G.compose(SimilarityTransform.from_params(p)).params() for p in x.reshape(2, 7)])
    a, b = total_loss(scene, cfg, x), total_loss(_moved(scene, G), cfg, xg)
    for term in ("align", "collision", "contact"):
        assert getattr(a, term) == pytest.approx(getattr(b, term), rel=1e-9, abs=1e-12)


@pytest.mark.xfail(strict=True, reason="Adam rescales each pose coordinate separately and the regulariser acts "
                                       "on raw rotation vectors, so the optimizer path is not rotation-equivariant")
def test_rotation_invariance_of_refined_poses():
    scene = _two_cubes_side_by_side()
    cfg = RefineConfig(n_samples=1000)
    base = _relative(refine(scene, cfg).transforms)
    G = SimilarityTransform(1.0, [0.3, -0.2, 0.5], [0.4, 1.0, -0.3])
    moved = _relative(refine(_moved(scene, G), cfg).transforms)
    assert np.max(np.abs(moved - base)) < 1e-6


# --------------------------------------------------------------------------
# collision rate


def test_collision_rate_examples():
    D = 8
    a = _box_grid(D, (0, 0, 0), (4, 4, 4))
    far = SimilarityTransform(1.0, np.zeros(3), [2.0, 0.0, 0.0])
    assert collision_rate([(a, SimilarityTransform()), (a, far)]) == 0.0
    near = SimilarityTransform(1.0, np.zeros(3), [0.1, 0.0, 0.0])
    # pairs (0,1) overlap, (0,2) and (1,2) are apart: one of three
    assert collision_rate([(a, SimilarityTransform()), (a, near), (a, far)]) == pytest.approx(100 / 3)
    with pytest.raises(ValueError):
        collision_rate([(a, SimilarityTransform())])


def test_collision_rate_half_of_two_pairs():
    D = 8
    a = _box_grid(D, (0, 0, 0), (4, 4, 4))
    objs = [(a, SimilarityTransform()), (a, SimilarityTransform(1.0, np.zeros(3), [0.1, 0.0, 0.0]))]
    vols = penetration_volumes(objs)
    assert list(vols) == [(0, 1)] and vols[(0, 1)] > 0


@settings(max_examples=8, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_collision_rate_matches_bruteforce(seed):
    rng = np.random.default_rng(seed)
    D = 6
    objs = []
    for _ in range(3):
        occ = (rng.random((D, D, D)) < 0.5).astype(float)
        pose = SimilarityTransform(rng.uniform(0.5, 1.0), rng.normal(size=3) * 0.5, rng.normal(size=3) * 0.3)
        objs.append((VoxelGrid.cube_bounds(D, 0.5, occ), pose))
    assert collision_rate(objs) == collision_rate_bruteforce(objs)
