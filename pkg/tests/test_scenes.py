import numpy as np
import pytest

from mvfuse.errors import SpecInvalid
from mvfuse.geometry import SimilarityTransform
from mvfuse.refine import penetration_volumes
from mvfuse.scenes import SCENES, synth_scene
from mvfuse.visibility import dda_visibility


def _views_of(obj):
    return dda_visibility(obj.grid, [v.camera for v in obj.views])


@pytest.mark.parametrize("name", sorted(SCENES))
def test_deterministic(name):
    a, b = synth_scene(name, 3), synth_scene(name, 3)
    assert a.summary() == b.summary()
    for oa, ob in zip(a.objects, b.objects):
        assert np.array_equal(oa.grid.occupancy, ob.grid.occupancy)
        assert np.array_equal(oa.grid.features, ob.grid.features)
        assert np.array_equal(oa.reference.points, ob.reference.points)
        for va, vb in zip(oa.views, ob.views):
            assert np.array_equal(va.target.occupancy, vb.target.occupancy)
            assert np.array_equal(va.pose_estimate.params(), vb.pose_estimate.params())


def test_seeds_differ():
    a, b = synth_scene("collision_pairs", 0), synth_scene("collision_pairs", 1)
    assert not np.array_equal(a.objects[1].pose.params(), b.objects[1].pose.params())


def test_two_cubes_overlap_half_volume():
    sc = synth_scene("two_cubes_overlap", 0)
    assert len(sc.objects) == 2
    objs = [(o.grid, o.pose) for o in sc.objects]
    # oracle: count voxels of cube 0 whose centres fall in occupied voxels of cube 1
    (ga, pa), (gb, pb) = objs
    world = pa.apply(ga.centers(np.argwhere(ga.binary())))
    u = np.floor((pb.apply_inverse(world) - gb.origin) / gb.voxel_size).astype(int)
    ok = np.all((u >= 0) & (u < gb.resolution), axis=1)
    exact = gb.binary()[tuple(u[ok].T)].sum() * ga.voxel_size ** 3
    assert exact == pytest.approx(0.5, abs=1e-12)
    # the 64^3 world lattice spans both grids' bounds; allow one lattice cell per face
    lo, hi = np.array([-1.0, -1.0, -1.0]), np.array([1.5, 1.0, 1.0])
    cell = (hi - lo) / 64
    vol = penetration_volumes(objs, resolution=64)[(0, 1)]
    assert vol == pytest.approx(0.5, abs=2 * (cell[0] * 1.0 + cell[1] * 0.5 + cell[2] * 0.5))
    occ = [o.grid.binary().sum() * o.grid.voxel_size ** 3 for o in sc.objects]
    assert occ == pytest.approx([1.0, 1.0])


def test_plush_rig_and_marker():
    sc = synth_scene("plush_6view", 0)
    obj = sc.objects[0]
    assert len(obj.views) == 6 and sc.minority_views == [5]
    # five cameras within the frontal arc, one behind
    yaw = obj.pose.rotvec[2]
    front = np.array([np.cos(yaw), np.sin(yaw)])
    dirs = np.array([c.center[:2] - obj.pose.translation[:2] for c in sc.cameras])
    facing = dirs @ front
    assert np.sum(facing > 0) == 5 and facing[5] < 0
    V = _views_of(obj)
    marker = obj.marker[tuple(V.point_indices.T)]
    assert marker.any()
    seen = V.bits[:, marker]
    assert seen[5].any() and not seen[:5].any()


def test_disputed_region_is_minority_only():
    for seed in range(3):
        obj = synth_scene("plush_6view", seed).objects[0]
        V = _views_of(obj)
        only_rear = (V.bits[5] == 1) & ~V.bits[:5].any(axis=0)
        expect = np.zeros_like(obj.disputed)
        expect[tuple(V.point_indices[only_rear].T)] = True
        assert np.array_equal(obj.disputed, expect)
        assert obj.disputed.any()


def test_every_object_marker_visible_somewhere():
    for name in ("plush_6view", "skewed_6view", "views"):
        for obj in synth_scene(name, 0).objects:
            if obj.marker.any():
                V = _views_of(obj)
                assert V.bits[:, obj.marker[tuple(V.point_indices.T)]].any()


def test_collision_scene_is_biased_into_contact():
    sc = synth_scene("collision_pairs", 0)
    assert len(sc.objects) == 2
    gt = penetration_volumes([(o.grid, o.pose) for o in sc.objects])
    assert gt[(0, 1)] == 0.0
    est = sc.objects[1].views[0].pose_estimate
    assert est.translation[0] < sc.objects[1].pose.translation[0]


def test_reference_cloud_near_surface():
    from mvfuse.metrics import surface_samples, within
    for name in ("single_align", "plush_6view"):
        obj = synth_scene(name, 0).objects[0]
        assert len(obj.reference) > 100
        gt = surface_samples(obj.grid, obj.pose)
        # samples sit on exposed faces up to the sensor noise (sigma 0.004)
        assert within(obj.reference.points, gt, 0.03) == 100.0


def test_spec_errors():
    with pytest.raises(SpecInvalid):
        synth_scene("no_such_scene")
    with pytest.raises(SpecInvalid):
        synth_scene({"resolution": 16})
    with pytest.raises(SpecInvalid):
        synth_scene({"name": "plush_6view", "resolution": 2})
    with pytest.raises(SpecInvalid):
        synth_scene({"name": "collision_pairs", "n_objects": 1})


def test_spec_overrides():
    sc = synth_scene({"name": "views", "n_views": 2}, 0)
    assert len(sc.objects[0].views) == 2
    sc = synth_scene({"name": "collision_pairs", "n_objects": 3}, 0)
    assert len(sc.objects) == 3
