import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spa3d import synthlab as sl
from spa3d.trackio import nearest_pixel


def sphere(oid, pos, vel=(0.0, 0.0, 0.0), r=0.2):
    return sl.ObjectSpec(oid, "sphere", (r, r, r), pos, vel)


def ray_box_hit(origin, target, center, half):
    """Slab test: does the open segment origin->target cross the box?"""
    d = target - origin
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (center - half - origin) / d
        t2 = (center + half - origin) / d
    lo = np.nanmax(np.minimum(t1, t2))
    hi = np.nanmin(np.maximum(t1, t2))
    return hi >= max(lo, 0.0) and lo < 1.0


# -- kinematics ---------------------------------------------------------------

def test_zero_gravity_zero_velocity_is_static():
    spec = sl.SceneSpec(seed=0, frames=12, gravity=0.0,
                        objects=(sphere(1, (0.0, 1.0, 6.0)), sl.ObjectSpec(2, "box", (0.2, 0.3, 0.2), (1.0, 0.3, 7.0), (0, 0, 0))))
    scene = sl.simulate(spec)
    np.testing.assert_array_equal(scene.positions, np.repeat(scene.positions[:, :1], 12, axis=1))


def test_free_fall_matches_closed_form():
    spec = sl.SceneSpec(seed=0, frames=24, objects=(sphere(1, (0.0, 20.0, 6.0)),))
    r = sl.integrate(spec)
    t = np.arange(24) / spec.fps
    drop = r.centers[0, 0, 1] - r.centers[:, 0, 1]
    late = t >= 0.55
    exact = 0.5 * 9.8 * t[late] ** 2
    assert np.all(np.abs(drop[late] - exact) <= 0.02 * exact)


def test_bounce_heights_non_increasing():
    spec = sl.SceneSpec(seed=0, frames=144, objects=(sphere(1, (0.0, 2.0, 6.0)),))
    r = sl.integrate(spec)
    y = r.centers[:, 0, 1]
    peaks = [y[i] for i in range(1, len(y) - 1) if y[i] >= y[i - 1] and y[i] > y[i + 1]]
    assert len(peaks) >= 2
    for a, b in zip(peaks, peaks[1:]):
        assert b <= a * 1.02


def test_point_behind_occluder_for_frames_5_to_9():
    spec = sl.SceneSpec(seed=1, frames=16, gravity=0.0,
                        objects=(sphere(1, (-0.7, 1.0, 6.0), (2.4, 0.0, 0.0)),),
                        occluders=(sl.OccluderSpec(100, (0.0, 1.5, 3.5), (0.14, 1.5, 0.1)),))
    r = sl.integrate(spec)
    scene = sl.render(r)
    cam = sl.Camera(spec.intrinsics, spec.pose)
    world, _ = r.world_points()
    j = int(np.argmin(cam.world_to_camera(world[:16, 0])[:, 2]))  # front-most sphere point
    occ = spec.occluders[0]
    oracle = [ray_box_hit(cam.origin, world[j, t], np.array(occ.center), np.array(occ.half_extents))
              for t in range(16)]
    assert np.flatnonzero(oracle).tolist() == [5, 6, 7, 8, 9]
    assert np.flatnonzero(scene.occluded[j]).tolist() == [5, 6, 7, 8, 9]


def test_rendered_occlusion_matches_analytic_visibility():
    """Disagreements only where a hidden point shares a pixel with a farther visible one."""
    total = bad = 0
    for seed in range(100):
        scene = sl.generate_scene(seed)
        r = sl.rollout_of(scene)
        vis = sl.analytic_visibility(r)
        pos = scene.positions.astype(np.float64)
        k = scene.intrinsics
        col, row, _ = nearest_pixel(pos[..., 0], pos[..., 1], k.width, k.height)
        diff = scene.occluded == vis
        total += diff.size
        for j, t in zip(*np.nonzero(diff)):
            same = (col[:, t] == col[j, t]) & (row[:, t] == row[j, t]) & vis[:, t]
            explained = (not vis[j, t]) and bool(np.any(same & (pos[:, t, 2] > pos[j, t, 2])))
            assert explained, (seed, j, t)
            bad += 1
    assert bad / total < 0.01


# -- spec validation and rejection -----------------------------------------------

def test_spec_validation():
    with pytest.raises(ValueError):
        sl.SceneSpec(seed=0, frames=7).validate()
    with pytest.raises(ValueError):
        sl.SceneSpec(seed=0, objects=(sphere(1, (0, 1, 6), r=-0.1),)).validate()
    with pytest.raises(ValueError, match="overlap"):
        sl.SceneSpec(seed=0, objects=(sphere(1, (0, 1, 6)), sphere(2, (0.1, 1, 6)))).validate()
    with pytest.raises(ValueError):
        sl.ViolationKind("gravity", 3)


def test_object_leaving_frustum_is_rejected():
    spec = sl.SceneSpec(seed=0, frames=12, gravity=0.0, objects=(sphere(1, (0.0, 1.0, 6.0), (30.0, 0, 0)),))
    with pytest.raises(sl.SceneRejected):
        sl.simulate(spec)


def test_spec_json_round_trip():
    spec = sl.random_spec(3).with_events(sl.Jitter(5, 11), sl.ViolationKind("continuity", 6, 0.5, 1))
    assert sl.SceneSpec.from_json(spec.to_json()) == spec


def test_simulation_is_deterministic():
    a, b = sl.generate_scene(42), sl.generate_scene(42)
    np.testing.assert_array_equal(a.positions, b.positions)
    np.testing.assert_array_equal(a.depth, b.depth)
    np.testing.assert_array_equal(a.occluded, b.occluded)


# -- violations -----------------------------------------------------------------

def falling_scene():
    spec = sl.SceneSpec(seed=0, frames=24, objects=(sphere(1, (0.0, 1.2, 6.0), (0.3, 0.0, 0.0)),))
    return sl.simulate(spec)


def test_continuity_zero_magnitude_is_identity():
    scene = falling_scene()
    out = sl.apply_violation(scene, sl.ViolationKind("continuity", 8, 0.0, 1), seed=0)
    np.testing.assert_array_equal(out.positions, scene.positions)
    np.testing.assert_array_equal(out.occluded, scene.occluded)


def test_continuity_jump_appears_at_onset():
    scene = falling_scene()
    out = sl.apply_violation(scene, sl.ViolationKind("continuity", 8, 0.5, 1), seed=0)
    r = sl.rollout_of(out)
    base = sl.rollout_of(scene)
    extra = np.diff(r.centers[:, 0], axis=0) - np.diff(base.centers[:, 0], axis=0)
    np.testing.assert_allclose(np.linalg.norm(extra, axis=-1)[7], 0.5, atol=1e-9)
    assert np.abs(extra[:7]).max() == 0.0
    disp = sl.max_interframe_displacement(out)
    assert disp[7] >= 0.5 and int(np.argmax(disp)) == 7
    d = sl.max_interframe_displacement(out) - sl.max_interframe_displacement(scene)
    assert int(np.argmax(d)) == 7


def test_solidity_penetrates_ground():
    scene = falling_scene()
    out = sl.apply_violation(scene, sl.ViolationKind("solidity", 6, 1.0, 1), seed=0)
    r = sl.rollout_of(out)
    y = r.centers[6:, 0, 1] - r.spec.ground_height
    assert y.min() < -0.2
    assert sl.rollout_of(scene).centers[:, 0, 1].min() >= 0.2 - 1e-9


def test_permanence_hides_target_for_good():
    scene = falling_scene()
    out = sl.apply_violation(scene, sl.ViolationKind("permanence", 8, 1.0, 1), seed=0)
    owners = sl.track_owners(out)
    assert out.occluded[owners == 1, 8:].all()
    assert not out.occluded[owners == 1, :8].all()


def test_immutability_scales_object():
    scene = falling_scene()
    out = sl.apply_violation(scene, sl.ViolationKind("immutability", 8, 1.5, 1), seed=0)
    r = sl.rollout_of(out)
    assert r.scale[-1, 0] == pytest.approx(1.5)
    assert np.all(r.scale[:8] == 1.0)


def test_violation_target_absent():
    scene = falling_scene()
    with pytest.raises(sl.ViolationTargetError):
        sl.apply_violation(scene, sl.ViolationKind("continuity", 8, 0.5, 99), seed=0)
    bare = scene.replace(meta={})
    with pytest.raises(sl.ViolationTargetError):
        sl.apply_violation(bare, sl.ViolationKind("continuity", 8, 0.5), seed=0)


@pytest.mark.parametrize("onset", [0, 23])
def test_onset_must_be_interior(onset):
    with pytest.raises(ValueError):
        sl.apply_violation(falling_scene(), sl.ViolationKind("continuity", onset, 0.5, 1), seed=0)


@settings(max_examples=12, deadline=None)
@given(st.integers(0, 2000), st.sampled_from(sl.VIOLATION_KINDS), st.integers(3, 18))
def test_violation_preserves_prefix(seed, kind, onset):
    scene = sl.generate_scene(seed)
    try:
        out = sl.apply_violation(scene, sl.ViolationKind(kind, onset, sl.default_magnitude(kind)), seed)
    except sl.ViolationTargetError:
        return
    np.testing.assert_array_equal(out.positions[:, :onset], scene.positions[:, :onset])
    np.testing.assert_array_equal(out.occluded[:, :onset], scene.occluded[:, :onset])
    np.testing.assert_array_equal(out.depth[:onset], scene.depth[:onset])


# -- corpora --------------------------------------------------------------------

def test_quadruplet_structure():
    q = sl.generate_quadruplet(5)
    assert q.kinds[0] != q.kinds[1]
    assert [m[0] for m in q.members] == ["possible", "possible", "impossible", "impossible"]
    ref = q.possible[0]
    for _, _, s in q.members:
        np.testing.assert_array_equal(s.positions[:, :q.prefix], ref.positions[:, :q.prefix])
        assert s.positions.shape == ref.positions.shape
    assert not np.array_equal(q.possible[0].positions, q.possible[1].positions)
    assert {q.impossible[0].meta["violation"], q.impossible[1].meta["violation"]} == set(q.kinds)


def test_quadruplet_rejects_duplicate_kinds():
    with pytest.raises(ValueError):
        sl.make_quadruplet(sl.random_spec(0), 0, kinds=("continuity", "continuity"))


def test_quadruplet_corpus_regenerates_bitwise():
    def corpus():
        return [sl.generate_quadruplet(1000 + i, kinds=sl.quadruplet_kinds(i)) for i in range(64)]
    for qa, qb in zip(corpus(), corpus()):
        for (_, _, a), (_, _, b) in zip(qa.members, qb.members):
            assert a.positions.tobytes() == b.positions.tobytes()
            assert a.occluded.tobytes() == b.occluded.tobytes()
            assert a.depth.tobytes() == b.depth.tobytes()


def test_quadruplet_kinds_are_balanced():
    counts = {k: 0 for k in sl.VIOLATION_KINDS}
    for i in range(8):
        for k in sl.quadruplet_kinds(i):
            counts[k] += 1
    assert set(counts.values()) == {4}


def test_graded_corruption_levels():
    scene = sl.generate_scene(7)
    levels = sl.graded_corruption(scene, levels=5, seed=3)
    assert len(levels) == 5
    np.testing.assert_array_equal(levels[0].positions, scene.positions)
    jumps = [sl.max_interframe_displacement(s).max() for s in levels]
    assert all(b > a for a, b in zip(jumps, jumps[1:]))
    again = sl.graded_corruption(scene, levels=5, seed=3)
    for a, b in zip(levels, again):
        assert a.positions.tobytes() == b.positions.tobytes()
    assert [s.meta["level"] for s in levels] == ["0", "1", "2", "3", "4"]


def test_feature_provider_is_deterministic():
    scene = sl.generate_scene(2)
    a = sl.SynthFeatureProvider()(scene)
    b = sl.SynthFeatureProvider()(scene)
    assert a.dim == 32
    np.testing.assert_array_equal(a.grid, b.grid)
