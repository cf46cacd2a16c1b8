import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from spa3d.trackio import (
    BadMagicError,
    CameraIntrinsics,
    CorruptFileError,
    InvalidSceneError,
    OutOfBoundsWarning,
    SceneFormatError,
    SceneTracks,
    SemanticFeatureField,
    TruncatedFileError,
    VersionMismatchError,
    derive_occlusion_flags,
    describe_scene,
    lift_to_3d,
    load_ratings,
    load_scene,
    sample_features,
    save_scene,
    scene_from_bytes,
    scene_to_bytes,
    stub_featurizer,
    write_ratings,
)


def random_scene(seed, n=5, t=6, full=True):
    rng = np.random.default_rng(seed)
    pos = np.concatenate([rng.uniform(0, 1, (n, t, 2)), rng.uniform(0.5, 9, (n, t, 1))], -1)
    occ = rng.random((n, t)) < 0.3
    kw = {}
    if full:
        kw = dict(depth=rng.uniform(0.5, 10, (t, 8, 8)),
                  intrinsics=CameraIntrinsics(50.0, 51.0, 4.0, 4.5, 8, 8),
                  features=SemanticFeatureField(rng.normal(size=(t, 3, 4, 5))),
                  meta={"prompt": "a ball rolls", "rating": "3.5", "source": "unit-test ü"})
    return SceneTracks(pos, occ, **kw)


# -- occlusion ------------------------------------------------------------------------

def _one_point(z, d):
    pos = np.array([[[0.5, 0.5, z]]])
    depth = np.full((1, 4, 4), d)
    return derive_occlusion_flags(pos, depth)[0, 0]


def test_occlusion_boundary_is_visible():
    assert not _one_point(1.0, 1.0)


def test_occlusion_beyond_tolerance():
    assert _one_point(1.001, 1.0)


def brute_force_flags(positions, depth, eps=1e-4):
    T, H, W = depth.shape
    out = np.zeros(positions.shape[:2], dtype=bool)
    for j in range(positions.shape[0]):
        for t in range(T):
            x, y, z = (float(v) for v in positions[j, t])
            col, row = int(np.floor(x * W)), int(np.floor(y * H))
            if not (0 <= col < W and 0 <= row < H):
                out[j, t] = True
            else:
                out[j, t] = z > float(depth[t, row, col]) + eps
    return out


def test_wall_depth_matches_brute_force():
    # wall at 2 m covering the left half, floor far away elsewhere
    depth = np.full((3, 16, 16), 8.0, dtype=np.float32)
    depth[:, :, :8] = 2.0
    xs = np.linspace(0.05, 0.95, 7)
    pos = np.array([[[x, 0.5, z] for _ in range(3)] for x in xs for z in (1.0, 2.0, 2.00005, 3.0, 9.0)])
    np.testing.assert_array_equal(derive_occlusion_flags(pos, depth), brute_force_flags(pos, depth))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_flags_equal_brute_force_random(seed):
    rng = np.random.default_rng(seed)
    depth = rng.uniform(1, 5, (4, 6, 7)).astype(np.float32)
    pos = np.concatenate([rng.uniform(-0.1, 1.1, (5, 4, 2)), rng.uniform(0.5, 6, (5, 4, 1))], -1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", OutOfBoundsWarning)
        got = derive_occlusion_flags(pos, depth)
    np.testing.assert_array_equal(got, brute_force_flags(pos, depth))


def test_out_of_bounds_marked_occluded_with_warning():
    pos = np.array([[[1.2, 0.5, 1.0], [0.5, 0.5, 1.0]]])
    with pytest.warns(OutOfBoundsWarning):
        flags = derive_occlusion_flags(pos, np.full((2, 4, 4), 5.0))
    assert flags.tolist() == [[True, False]]


# -- lifting ---------------------------------------------------------------------------

K = CameraIntrinsics(fx=100.0, fy=100.0, cx=50.0, cy=50.0, width=200, height=100)


def test_lift_principal_ray():
    tr = lift_to_3d(np.array([[50.0, 50.0], [50.0, 50.0]]), np.full((2, 100, 200), 2.0), K)
    np.testing.assert_allclose(K.normalized_to_camera(tr.positions), [[0, 0, 2]] * 2, atol=1e-6)


def test_lift_hand_example():
    tr = lift_to_3d(np.array([[150.0, 50.0], [150.0, 50.0]]), np.full((2, 100, 200), 2.0), K)
    np.testing.assert_allclose(K.normalized_to_camera(tr.positions)[0], [2.0, 0.0, 2.0], atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(-0.6, 0.6), st.floats(1.0, 6.0))
def test_project_lift_round_trip(X, Y, Z):
    p = np.array([X, Y, Z])
    uv = K.project(p)
    if not (0 <= uv[0] < K.width and 0 <= uv[1] < K.height):
        return
    depth = np.full((2, 100, 200), Z)
    tr = lift_to_3d(np.stack([uv, uv]), depth, K)
    back = K.normalized_to_camera(tr.positions.astype(np.float64))[0]
    np.testing.assert_allclose(back, p, atol=1e-5 * max(1.0, Z))
    np.testing.assert_allclose(K.project(K.unproject(uv, Z)), uv, atol=1e-9)


def test_lift_rejects_nonfinite_depth():
    depth = np.full((2, 100, 200), 2.0)
    depth[1] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        lift_to_3d(np.array([[10.0, 10.0], [10.0, 10.0]]), depth, K)


def test_intrinsics_validation():
    with pytest.raises(InvalidSceneError):
        CameraIntrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(InvalidSceneError):
        CameraIntrinsics(1.0, 1.0, 4.0, 1.0, 4, 4)


# -- features --------------------------------------------------------------------------

def field_fixture():
    return SemanticFeatureField(np.random.default_rng(3).normal(size=(2, 4, 5, 3)))


def test_features_on_grid_node():
    f = field_fixture()
    np.testing.assert_allclose(sample_features(f, 2 / 4, 1 / 3, 1), f.grid[1, 1, 2], rtol=1e-6)


def test_features_midpoint_is_mean():
    f = field_fixture()
    got = sample_features(f, 0.5 / 4, 0.0, 0)
    np.testing.assert_allclose(got, 0.5 * (f.grid[0, 0, 0] + f.grid[0, 0, 1]), rtol=1e-6)


def test_features_random_point_matches_hand_bilinear():
    f = field_fixture()
    g = f.grid.astype(np.float64)
    x, y = 0.37, 0.81
    fx, fy = x * 4, y * 3
    x0, y0 = int(fx), int(fy)
    a, b = fx - x0, fy - y0
    want = ((1 - a) * (1 - b) * g[1, y0, x0] + a * (1 - b) * g[1, y0, x0 + 1]
            + (1 - a) * b * g[1, y0 + 1, x0] + a * b * g[1, y0 + 1, x0 + 1])
    np.testing.assert_allclose(sample_features(f, x, y, 1), want, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_features_continuous(x, y):
    f = field_fixture()
    g = f.grid.astype(np.float64)
    lip = (np.abs(np.diff(g, axis=1)).max() * 3 + np.abs(np.diff(g, axis=2)).max() * 4)
    d = np.abs(sample_features(f, x, y, 0) - sample_features(f, min(x + 1e-4, 1), min(y + 1e-4, 1), 0))
    assert d.max() <= lip * 1e-4 + 1e-9


def test_stub_featurizer_contract():
    ids = np.zeros((3, 4, 4), dtype=np.int64)
    ids[0, :2, :2] = 7
    ids[2, 2:, 2:] = 7
    ids[1, 0, 0] = 9
    a = stub_featurizer(ids, 16, seed=5)
    b = stub_featurizer(ids, 16, seed=5)
    np.testing.assert_array_equal(a.grid, b.grid)
    np.testing.assert_array_equal(a.grid[0, 0, 0], a.grid[2, 3, 3])  # same object, two frames
    assert np.any(a.grid[0, 0, 0] != a.grid[1, 0, 0])  # distinct ids differ
    assert np.any(a.grid[0, 0, 0] != a.grid[0, 3, 3])


def test_stub_features_distinct_over_many_ids():
    ids = np.arange(-1, 300).reshape(1, 1, -1)
    vecs = stub_featurizer(ids, 32, seed=0).grid[0, 0]
    assert len({v.tobytes() for v in vecs}) == vecs.shape[0]


# -- files -----------------------------------------------------------------------------

@pytest.mark.parametrize("full", [True, False])
def test_round_trip_bit_identical(tmp_path, full):
    s = random_scene(11, full=full)
    save_scene(s, tmp_path / "a.spa3d")
    r = load_scene(tmp_path / "a.spa3d")
    assert scene_to_bytes(r) == scene_to_bytes(s)
    np.testing.assert_array_equal(r.positions, s.positions)
    np.testing.assert_array_equal(r.occluded, s.occluded)
    assert r.meta == s.meta and r.intrinsics == s.intrinsics
    if full:
        np.testing.assert_array_equal(r.depth, s.depth)
        np.testing.assert_array_equal(r.features.grid, s.features.grid)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 9), st.integers(2, 9))
def test_round_trip_property(seed, n, t):
    s = random_scene(seed, n, t)
    assert scene_to_bytes(scene_from_bytes(scene_to_bytes(s))) == scene_to_bytes(s)


def test_too_few_frames_rejected():
    with pytest.raises(InvalidSceneError, match="frames must be ≥ 2"):
        SceneTracks(np.zeros((3, 0, 3)), np.zeros((3, 0), dtype=bool))


def test_distinct_error_codes():
    buf = scene_to_bytes(random_scene(1))
    with pytest.raises(BadMagicError):
        scene_from_bytes(b"XXXXXX" + buf[6:])
    with pytest.raises(VersionMismatchError):
        scene_from_bytes(buf[:6] + struct.pack("<H", 99) + buf[8:])
    with pytest.raises(TruncatedFileError):
        scene_from_bytes(buf[:-10])
    with pytest.raises(CorruptFileError):
        scene_from_bytes(buf + b"\0")
    codes = {BadMagicError.code, VersionMismatchError.code, TruncatedFileError.code, CorruptFileError.code}
    assert len(codes) == 4


def test_corrupted_length_headers_never_load():
    buf = bytearray(scene_to_bytes(random_scene(2)))
    rng = np.random.default_rng(0)
    # the T/N header fields, then every u64 section length
    offsets = [8, 12]
    pos = 8 + 12 + 5 * 6 * 12 + (5 * 6 + 7) // 8
    while pos < len(buf):
        offsets.append(pos)
        (length,) = struct.unpack_from("<Q", buf, pos)
        pos += 8 + length
    for off in offsets:
        for _ in range(20):
            bad = bytearray(buf)
            width = 8 if off >= 20 else 4
            bad[off:off + width] = int(rng.integers(0, 2**31)).to_bytes(width, "little")
            if bytes(bad) == bytes(buf):
                continue
            with pytest.raises((SceneFormatError, InvalidSceneError)):
                scene_from_bytes(bytes(bad))
        huge = bytearray(buf)
        huge[off:off + (8 if off >= 20 else 4)] = b"\xff" * (8 if off >= 20 else 4)
        with pytest.raises(SceneFormatError):
            scene_from_bytes(bytes(huge))


def test_ratings_csv_round_trip(tmp_path):
    write_ratings({"b": 2.0, "a": 1.5}, tmp_path / "r.csv")
    assert load_ratings(tmp_path / "r.csv") == {"a": 1.5, "b": 2.0}


def test_describe_mentions_core_fields():
    text = describe_scene(random_scene(4))
    assert "frames=6 tracks=5" in text and "intrinsics" in text and "meta prompt=" in text
