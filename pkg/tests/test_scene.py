import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import direct_render
from viewplan.errors import OracleFailure
from viewplan.geometry import CameraIntrinsics, CameraPose, project_points, ring_poses
from viewplan.scene import (GroundTruth, ReconstructionOracle, SceneSpec, generate_scene, occluded,
                            occluded_bruteforce, render_ground_truth)
from viewplan.splats import SplatModel


def test_empty_scene():
    assert len(generate_scene(SceneSpec(n_primitives=0))) == 0


@pytest.mark.parametrize("gen", ["clustered", "shell", "indoor-box"])
def test_generation_is_deterministic_and_inside_bbox(gen):
    spec = SceneSpec(seed=7, generator=gen, n_primitives=500, bbox=((-1, -2, 0), (2, 1, 1.5)))
    a, b = generate_scene(spec), generate_scene(spec)
    for f in ("means", "quats", "scales", "opacities", "colors"):
        assert np.array_equal(getattr(a, f), getattr(b, f))
    lo, hi = np.array(spec.bbox)
    assert np.all(a.means >= lo) and np.all(a.means <= hi)
    assert np.all((a.opacities >= 0.5) & (a.opacities <= 1))
    assert np.all((a.scales >= 0.01) & (a.scales <= 0.04))


def test_shell_radius():
    spec = SceneSpec(seed=1, generator="shell", n_primitives=300)
    m = generate_scene(spec)
    r = np.linalg.norm(m.means - spec.center, axis=1)
    assert np.allclose(r, spec.shell_radius, atol=0.04)


def test_indoor_box_points_on_faces():
    spec = SceneSpec(seed=1, generator="indoor-box", n_primitives=300)
    m = generate_scene(spec)
    lo, hi = np.array(spec.bbox)
    on_face = np.any(np.isclose(m.means, lo) | np.isclose(m.means, hi), axis=1)
    assert on_face.all()


def test_spec_validation():
    with pytest.raises(ValueError):
        SceneSpec(generator="torus")
    with pytest.raises(ValueError):
        SceneSpec(bbox=((0, 0, 0), (0, 1, 1)))


@pytest.fixture(scope="module")
def scene():
    return generate_scene(SceneSpec(seed=3, n_primitives=400))


@pytest.fixture(scope="module")
def intr():
    return CameraIntrinsics.from_fov(32, 32, 60.0)


def test_single_view_cannot_triangulate(scene, intr):
    oracle = ReconstructionOracle(scene, intr)
    with pytest.raises(OracleFailure):
        oracle.reconstruct([ring_poses(1, 3.0, 0.0)[0]])


def test_duplicate_view_counts_twice(scene, intr):
    oracle = ReconstructionOracle(scene, intr)
    v = ring_poses(1, 3.0, 0.0)[0]
    pc = oracle.reconstruct([v, v])
    assert len(pc) == int(oracle.visibility(v).sum())


def test_occlusion_off_wide_views_recover_everything(scene):
    wide = CameraIntrinsics.from_fov(32, 32, 120.0)
    oracle = ReconstructionOracle(scene, wide, occlusion=False)
    views = [CameraPose.look_at((0, 0, 4), (0, 0, 0)), CameraPose.look_at((0, 0.5, 4), (0, 0, 0))]
    # brute force frustum check
    expect = np.ones(len(scene), dtype=bool)
    for v in views:
        expect &= project_points(v, wide, scene.means)[2]
    assert expect.all()
    pc = oracle.reconstruct(views)
    assert np.array_equal(pc.positions, scene.means)


def test_vectorised_occlusion_matches_scalar_reference(scene, intr):
    rng = np.random.default_rng(0)
    for _ in range(3):
        d = rng.normal(size=3)
        pose = CameraPose.look_at(2.5 * d / np.linalg.norm(d), (0, 0, 0))
        _, depth, vis = project_points(pose, intr, scene.means)
        occ = occluded(pose, scene, depth, vis, chunk=37)
        for i in np.flatnonzero(vis):
            assert occ[i] == occluded_bruteforce(pose, scene, i)


def test_dropout_is_seeded_by_pose(scene, intr):
    oracle = ReconstructionOracle(scene, intr, dropout=0.3, seed=5)
    v = ring_poses(3, 3.0, 0.0)
    a = oracle.reconstruct(v)
    fresh = ReconstructionOracle(scene, intr, dropout=0.3, seed=5)
    assert a == fresh.reconstruct(v)
    assert len(a) < len(ReconstructionOracle(scene, intr).reconstruct(v))


@settings(max_examples=20, deadline=None)
@given(st.data())
def test_reconstruction_is_monotone_union(scene, intr, data):
    oracle = ReconstructionOracle(scene, intr)
    poses = ring_poses(10, 2.5, 0.5)
    a = data.draw(st.sets(st.integers(0, 9), min_size=1))
    b = data.draw(st.sets(st.integers(0, 9), min_size=1))

    def ids(views):
        try:
            pc = oracle.reconstruct([poses[i] for i in sorted(views)])
        except OracleFailure:
            return set()
        return {tuple(p) for p in pc.positions}

    assert ids(a) | ids(b) <= ids(a | b)
    truth = {tuple(p) for p in scene.means}
    assert ids(a | b) <= truth


def test_provenance_counts_observers(scene, intr):
    oracle = ReconstructionOracle(scene, intr, min_observing_views=3)
    pc = oracle.reconstruct(ring_poses(6, 3.0, 0.2))
    assert all(len(p) >= 3 for p in pc.provenance)


def test_ground_truth_images(intr):
    assert np.all(render_ground_truth(SplatModel.empty((0.2, 0.3, 0.4)), ring_poses(1, 3, 0)[0], intr)
                  == np.array([0.2, 0.3, 0.4]))
    one = SplatModel([[0, 0, 0]], [[1, 0, 0, 0]], [[0.1, 0.1, 0.1]], [1.0], [[1, 1, 1]])
    pose = CameraPose.look_at((0, 0, -3), (0, 0, 0))
    odd = CameraIntrinsics(30.0, 30.0, (16.0, 16.0), 33, 33)
    img = render_ground_truth(one, pose, odd)
    assert np.unravel_index(np.argmax(img[..., 0]), img.shape[:2]) == (16, 16)
    scene = generate_scene(SceneSpec(seed=9, n_primitives=40))
    gt = GroundTruth(scene, CameraIntrinsics.from_fov(12, 12, 60.0))
    img = gt.image(pose)
    assert gt.image(pose) is img
    assert np.max(np.abs(img - direct_render(scene, pose, gt.intrinsics))) <= 1e-6
