"""Scene data model, binary scene files, occlusion flags, 3D lifting and semantic features.

Coordinate convention: x, y are normalized image coordinates in [0, 1]
(pixel u = x * width, pixel centers at i + 0.5), z is camera-space depth in
meters.
"""

from __future__ import annotations

import csv
import io
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

MAGIC = b"SPA3D\x00"
FORMAT_VERSION = 1

FLAG_DEPTH = 1
FLAG_INTRINSICS = 2
FLAG_FEATURES = 4
FLAG_META = 8


class SceneFormatError(ValueError):
    code = "E_FORMAT"

    def __init__(self, message: str):
        super().__init__(f"[{self.code}] {message}")


class BadMagicError(SceneFormatError):
    code = "E_MAGIC"


class VersionMismatchError(SceneFormatError):
    code = "E_VERSION"


class TruncatedFileError(SceneFormatError):
    code = "E_TRUNCATED"


class CorruptFileError(SceneFormatError):
    code = "E_CORRUPT"


class InvalidSceneError(ValueError):
    code = "E_INVALID"


class OutOfBoundsWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidSceneError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidSceneError("principal point outside the image")

    def project(self, xyz: np.ndarray) -> np.ndarray:
        """Camera-space points [..., 3] -> pixel coordinates [..., 2]."""
        xyz = np.asarray(xyz, dtype=np.float64)
        z = xyz[..., 2]
        u = self.fx * xyz[..., 0] / z + self.cx
        v = self.fy * xyz[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1)

    def unproject(self, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """Pixel coordinates [..., 2] plus depth [...] -> camera-space points [..., 3]."""
        uv = np.asarray(uv, dtype=np.float64)
        d = np.asarray(depth, dtype=np.float64)
        x = (uv[..., 0] - self.cx) / self.fx * d
        y = (uv[..., 1] - self.cy) / self.fy * d
        return np.stack([x, y, d], axis=-1)

    def normalized_to_camera(self, positions: np.ndarray) -> np.ndarray:
        """Track positions (x, y normalized, z meters) -> camera-space XYZ."""
        p = np.asarray(positions, dtype=np.float64)
        uv = np.stack([p[..., 0] * self.width, p[..., 1] * self.height], axis=-1)
        return self.unproject(uv, p[..., 2])


@dataclass(frozen=True)
class QueryPoint:
    x: float
    y: float
    z: float
    t: int


@dataclass
class PointTrack3D:
    positions: np.ndarray  # [T, 3]
    occluded: np.ndarray  # [T] bool

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float32)
        self.occluded = np.asarray(self.occluded, dtype=bool)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3:
            raise InvalidSceneError(f"positions must be [T, 3], got {self.positions.shape}")
        if self.occluded.shape != self.positions.shape[:1]:
            raise InvalidSceneError("occlusion flags and positions differ in length")


@dataclass
class SemanticFeatureField:
    grid: np.ndarray  # [T, H', W', F]

    def __post_init__(self):
        self.grid = np.ascontiguousarray(self.grid, dtype=np.float32)
        if self.grid.ndim != 4:
            raise InvalidSceneError(f"feature grid must be [T, H, W, F], got {self.grid.shape}")
        if not np.all(np.isfinite(self.grid)):
            raise InvalidSceneError("feature grid has non-finite values")

    @property
    def dim(self) -> int:
        return self.grid.shape[-1]


@dataclass
class SceneTracks:
    positions: np.ndarray  # [N, T, 3] float32
    occluded: np.ndarray  # [N, T] bool
    depth: np.ndarray | None = None  # [T, H, W] float32, meters
    intrinsics: CameraIntrinsics | None = None
    features: SemanticFeatureField | None = None
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float32)
        self.occluded = np.ascontiguousarray(self.occluded, dtype=bool)
        if self.positions.ndim != 3 or self.positions.shape[2] != 3:
            raise InvalidSceneError(f"positions must be [N, T, 3], got {self.positions.shape}")
        n, t = self.positions.shape[:2]
        if t < 2:
            raise InvalidSceneError("frames must be ≥ 2")
        if self.occluded.shape != (n, t):
            raise InvalidSceneError(f"occlusion shape {self.occluded.shape} != {(n, t)}")
        if not np.all(np.isfinite(self.positions)):
            raise InvalidSceneError("positions contain NaN or Inf")
        if np.any(self.positions[..., 2] < 0):
            raise InvalidSceneError("negative depth in positions")
        if self.depth is not None:
            self.depth = np.ascontiguousarray(self.depth, dtype=np.float32)
            if self.depth.ndim != 3 or self.depth.shape[0] != t:
                raise InvalidSceneError(f"depth must be [T={t}, H, W], got {self.depth.shape}")
            if not (np.all(np.isfinite(self.depth)) and np.all(self.depth > 0)):
                raise InvalidSceneError("depth values must be finite and > 0")
        if self.features is not None and self.features.grid.shape[0] != t:
            raise InvalidSceneError("feature field frame count differs from scene")
        self.meta = {str(k): str(v) for k, v in self.meta.items()}

    @property
    def frames(self) -> int:
        return self.positions.shape[1]

    @property
    def num_tracks(self) -> int:
        return self.positions.shape[0]

    @property
    def tracks(self) -> list[PointTrack3D]:
        return [self.track(j) for j in range(self.num_tracks)]

    def track(self, j: int) -> PointTrack3D:
        return PointTrack3D(self.positions[j], self.occluded[j])

    def replace(self, **changes) -> "SceneTracks":
        kw = dict(positions=self.positions, occluded=self.occluded, depth=self.depth,
                  intrinsics=self.intrinsics, features=self.features, meta=dict(self.meta))
        kw.update(changes)
        return SceneTracks(**kw)

    def subset(self, indices) -> "SceneTracks":
        idx = np.asarray(indices, dtype=np.intp)
        return self.replace(positions=self.positions[idx], occluded=self.occluded[idx])


# ---------------------------------------------------------------------------
# Occlusion and lifting
# ---------------------------------------------------------------------------

def nearest_pixel(x: np.ndarray, y: np.ndarray, width: int, height: int):
    """Nearest pixel index for normalized coordinates; returns (col, row, in_bounds)."""
    u = np.asarray(x, dtype=np.float64) * width
    v = np.asarray(y, dtype=np.float64) * height
    col = np.floor(u).astype(np.int64)
    row = np.floor(v).astype(np.int64)
    inb = (col >= 0) & (col < width) & (row >= 0) & (row < height)
    return col, row, inb


def derive_occlusion_flags(positions: np.ndarray, depth: np.ndarray, eps: float = 1e-4,
                           warn: bool = True) -> np.ndarray:
    """o_t = 1 iff z_t > D_t(x_t, y_t) + eps, with D sampled at the nearest pixel.

    positions: [..., T, 3]; depth: [T, H, W]. Points projecting outside the
    depth grid are marked occluded.
    """
    pos = np.asarray(positions, dtype=np.float64)
    depth = np.asarray(depth)
    T, H, W = depth.shape
    if pos.shape[-2] != T:
        raise ValueError(f"positions have {pos.shape[-2]} frames, depth has {T}")
    col, row, inb = nearest_pixel(pos[..., 0], pos[..., 1], W, H)
    t_idx = np.broadcast_to(np.arange(T), inb.shape)
    d = depth[t_idx, np.clip(row, 0, H - 1), np.clip(col, 0, W - 1)].astype(np.float64)
    flags = (pos[..., 2] > d + eps) | ~inb
    n_oob = int((~inb).sum())
    if n_oob and warn:
        warnings.warn(f"{n_oob} point(s) project outside the depth map; marked occluded",
                      OutOfBoundsWarning, stacklevel=2)
    return flags


def bilinear_depth(depth_t: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Bilinear depth at continuous pixel coordinates (centers at i + 0.5), clamped."""
    H, W = depth_t.shape
    fu = np.clip(np.asarray(u, dtype=np.float64) - 0.5, 0.0, W - 1)
    fv = np.clip(np.asarray(v, dtype=np.float64) - 0.5, 0.0, H - 1)
    u0 = np.minimum(np.floor(fu).astype(np.int64), W - 2) if W > 1 else np.zeros_like(fu, dtype=np.int64)
    v0 = np.minimum(np.floor(fv).astype(np.int64), H - 2) if H > 1 else np.zeros_like(fv, dtype=np.int64)
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    a = fu - u0
    b = fv - v0
    d = depth_t.astype(np.float64)
    return ((1 - a) * (1 - b) * d[v0, u0] + a * (1 - b) * d[v0, u1]
            + (1 - a) * b * d[v1, u0] + a * b * d[v1, u1])


def lift_to_3d(uv: np.ndarray, depth: np.ndarray, intrinsics: CameraIntrinsics,
               occluded: np.ndarray | None = None) -> PointTrack3D:
    """Lift a 2D pixel track [T, 2] to 3D using per-frame metric depth [T, H, W].

    The stored track keeps x, y normalized by the image extent and z = depth
    sampled bilinearly at the pixel; ``intrinsics.normalized_to_camera`` recovers
    camera-space XYZ.
    """
    uv = np.asarray(uv, dtype=np.float64)
    depth = np.asarray(depth)
    T = uv.shape[0]
    if depth.shape[0] != T:
        raise ValueError(f"track has {T} frames, depth has {depth.shape[0]}")
    H, W = depth.shape[1:]
    d = np.array([bilinear_depth(depth[t], uv[t, 0], uv[t, 1]) for t in range(T)])
    if not np.all(np.isfinite(d)):
        bad = int(np.flatnonzero(~np.isfinite(d))[0])
        raise ValueError(f"non-finite depth at frame {bad}, pixel {tuple(uv[bad])}")
    inb = ((uv[:, 0] >= 0) & (uv[:, 0] < intrinsics.width)
           & (uv[:, 1] >= 0) & (uv[:, 1] < intrinsics.height))
    occ = np.zeros(T, dtype=bool) if occluded is None else np.asarray(occluded, dtype=bool)
    pos = np.stack([uv[:, 0] / intrinsics.width, uv[:, 1] / intrinsics.height, d], axis=-1)
    return PointTrack3D(pos, occ | ~inb)


# ---------------------------------------------------------------------------
# Semantic features
# ---------------------------------------------------------------------------

def sample_features(field: SemanticFeatureField, x, y, t) -> np.ndarray:
    """Bilinear lookup of the frame-t grid at (x (W'-1), y (H'-1)); clamped at borders.

    x, y, t broadcast together; result has shape broadcast(x, y, t) + (F,).
    """
    grid = field.grid
    _, Hg, Wg, _ = grid.shape
    x, y, t = np.broadcast_arrays(np.asarray(x, dtype=np.float64),
                                  np.asarray(y, dtype=np.float64), np.asarray(t))
    fx = np.clip(x, 0.0, 1.0) * (Wg - 1)
    fy = np.clip(y, 0.0, 1.0) * (Hg - 1)
    x0 = np.minimum(np.floor(fx).astype(np.int64), max(Wg - 2, 0))
    y0 = np.minimum(np.floor(fy).astype(np.int64), max(Hg - 2, 0))
    x1 = np.minimum(x0 + 1, Wg - 1)
    y1 = np.minimum(y0 + 1, Hg - 1)
    a = (fx - x0)[..., None]
    b = (fy - y0)[..., None]
    t = t.astype(np.int64)
    g = grid.astype(np.float64)
    out = ((1 - a) * (1 - b) * g[t, y0, x0] + a * (1 - b) * g[t, y0, x1]
           + (1 - a) * b * g[t, y1, x0] + a * b * g[t, y1, x1])
    return out


def track_features(field: SemanticFeatureField, positions: np.ndarray) -> np.ndarray:
    """Per-track, per-frame features for positions [N, T, 3] -> [N, T, F]."""
    T = positions.shape[1]
    t = np.broadcast_to(np.arange(T), positions.shape[:2])
    return sample_features(field, positions[..., 0], positions[..., 1], t)


def object_feature_vector(object_id: int, dim: int, seed: int) -> np.ndarray:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(object_id) + (1 << 20)])
    return np.random.default_rng(ss).normal(0.0, 1.0, size=dim).astype(np.float32)


def stub_featurizer(id_maps: np.ndarray, feature_dim: int = 32, seed: int = 0) -> SemanticFeatureField:
    """Deterministic stand-in for a frozen image featurizer.

    ``id_maps`` [T, H', W'] holds the integer id of the surface seen at each
    grid node (object ids, ground, sky). Every id is painted with its own
    seeded random vector, so features are constant over an object and
    distinct across objects.
    """
    id_maps = np.asarray(id_maps, dtype=np.int64)
    ids = np.unique(id_maps)
    table = np.stack([object_feature_vector(i, feature_dim, seed) for i in ids])
    lookup = np.searchsorted(ids, id_maps)
    return SemanticFeatureField(table[lookup])


FeatureProvider = Callable[[SceneTracks], "SemanticFeatureField | None"]


def stored_features(scene: SceneTracks) -> SemanticFeatureField | None:
    """Feature provider that uses whatever field the scene file carries."""
    return scene.features


# ---------------------------------------------------------------------------
# Binary scene files
# ---------------------------------------------------------------------------

class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def remaining(self) -> int:
        return len(self.buf) - self.pos

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or n > self.remaining():
            raise TruncatedFileError(f"{what}: need {n} bytes, {self.remaining()} left")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))

    def array(self, count: int, dtype: str, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        if count < 0 or count * itemsize > self.remaining():
            raise TruncatedFileError(f"{what}: {count} items exceed the file size")
        return np.frombuffer(self.take(count * itemsize, what), dtype=dtype).copy()


def scene_to_bytes(scene: SceneTracks) -> bytes:
    n, t = scene.num_tracks, scene.frames
    flags = 0
    sections: list[bytes] = []
    if scene.depth is not None:
        flags |= FLAG_DEPTH
        h, w = scene.depth.shape[1:]
        sections.append(struct.pack("<II", h, w) + scene.depth.astype("<f4").tobytes())
    if scene.intrinsics is not None:
        flags |= FLAG_INTRINSICS
        k = scene.intrinsics
        sections.append(struct.pack("<ddddII", k.fx, k.fy, k.cx, k.cy, k.width, k.height))
    if scene.features is not None:
        flags |= FLAG_FEATURES
        _, hg, wg, f = scene.features.grid.shape
        sections.append(struct.pack("<III", hg, wg, f) + scene.features.grid.astype("<f4").tobytes())
    if scene.meta:
        flags |= FLAG_META
        parts = [struct.pack("<I", len(scene.meta))]
        for key, value in scene.meta.items():
            kb, vb = key.encode("utf-8"), value.encode("utf-8")
            parts += [struct.pack("<I", len(kb)), kb, struct.pack("<I", len(vb)), vb]
        sections.append(b"".join(parts))
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<HIII", FORMAT_VERSION, t, n, flags))
    out.write(scene.positions.astype("<f4").tobytes())
    out.write(np.packbits(scene.occluded.reshape(-1), bitorder="little").tobytes())
    for sec in sections:
        out.write(struct.pack("<Q", len(sec)))
        out.write(sec)
    return out.getvalue()


def scene_from_bytes(buf: bytes) -> SceneTracks:
    r = _Reader(buf)
    if r.remaining() < len(MAGIC) or r.take(len(MAGIC), "magic") != MAGIC:
        raise BadMagicError("not a scene file (magic mismatch)")
    (version,) = r.unpack("H", "version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"file version {version}, reader supports {FORMAT_VERSION}")
    t, n, flags = r.unpack("III", "header")
    if flags & ~(FLAG_DEPTH | FLAG_INTRINSICS | FLAG_FEATURES | FLAG_META):
        raise CorruptFileError(f"unknown section flags {flags:#x}")
    positions = r.array(n * t * 3, "<f4", "positions").reshape(n, t, 3)
    nbytes = (n * t + 7) // 8
    bits = np.frombuffer(r.take(nbytes, "occlusion bits"), dtype=np.uint8)
    occluded = np.unpackbits(bits, count=n * t, bitorder="little").astype(bool).reshape(n, t)

    def section(what: str) -> _Reader:
        (length,) = r.unpack("Q", f"{what} length")
        return _Reader(r.take(length, what))

    depth = intr = feats = None
    meta: dict[str, str] = {}
    if flags & FLAG_DEPTH:
        s = section("depth")
        h, w = s.unpack("II", "depth dims")
        depth = s.array(t * h * w, "<f4", "depth").reshape(t, h, w)
        _expect_consumed(s, "depth")
    if flags & FLAG_INTRINSICS:
        s = section("intrinsics")
        fx, fy, cx, cy, w, h = s.unpack("ddddII", "intrinsics")
        _expect_consumed(s, "intrinsics")
        intr = CameraIntrinsics(fx, fy, cx, cy, w, h)
    if flags & FLAG_FEATURES:
        s = section("features")
        hg, wg, f = s.unpack("III", "feature dims")
        grid = s.array(t * hg * wg * f, "<f4", "features").reshape(t, hg, wg, f)
        _expect_consumed(s, "features")
        feats = SemanticFeatureField(grid)
    if flags & FLAG_META:
        s = section("meta")
        (count,) = s.unpack("I", "meta count")
        for _ in range(count):
            (kl,) = s.unpack("I", "meta key length")
            kb = s.take(kl, "meta key")
            (vl,) = s.unpack("I", "meta value length")
            vb = s.take(vl, "meta value")
            try:
                meta[kb.decode("utf-8")] = vb.decode("utf-8")
            except UnicodeDecodeError:
                raise CorruptFileError("meta entry is not valid UTF-8") from None
        _expect_consumed(s, "meta")
    if r.remaining():
        raise CorruptFileError(f"{r.remaining()} trailing bytes")
    return SceneTracks(positions, occluded, depth=depth, intrinsics=intr, features=feats, meta=meta)


def _expect_consumed(s: _Reader, what: str) -> None:
    if s.remaining():
        raise CorruptFileError(f"{what} section has {s.remaining()} unexpected bytes")


def save_scene(scene: SceneTracks, path) -> None:
    Path(path).write_bytes(scene_to_bytes(scene))


def load_scene(path) -> SceneTracks:
    return scene_from_bytes(Path(path).read_bytes())


def describe_scene(scene: SceneTracks) -> str:
    """Human-readable summary used by the dump tool."""
    lines = [
        f"frames={scene.frames} tracks={scene.num_tracks}",
        f"occluded_fraction={scene.occluded.mean():.4f}" if scene.occluded.size else "occluded_fraction=n/a",
    ]
    if scene.num_tracks:
        lo = scene.positions.reshape(-1, 3).min(axis=0)
        hi = scene.positions.reshape(-1, 3).max(axis=0)
        lines.append("bounds x=[%.4f, %.4f] y=[%.4f, %.4f] z=[%.4f, %.4f]"
                     % (lo[0], hi[0], lo[1], hi[1], lo[2], hi[2]))
    if scene.depth is not None:
        lines.append(f"depth {scene.depth.shape[1]}x{scene.depth.shape[2]} "
                     f"range=[{scene.depth.min():.4f}, {scene.depth.max():.4f}]")
    if scene.intrinsics is not None:
        k = scene.intrinsics
        lines.append(f"intrinsics fx={k.fx} fy={k.fy} cx={k.cx} cy={k.cy} size={k.width}x{k.height}")
    if scene.features is not None:
        lines.append("features grid=%dx%d dim=%d" % scene.features.grid.shape[1:])
    for key in sorted(scene.meta):
        value = scene.meta[key]
        lines.append(f"meta {key}={value if len(value) <= 60 else value[:57] + '...'}")
    return "\n".join(lines)


def load_ratings(path) -> dict[str, float]:
    """Read a ``scene_id,rating`` CSV."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"scene_id", "rating"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected columns scene_id, rating")
        return {row["scene_id"]: float(row["rating"]) for row in reader}


def write_ratings(ratings: Mapping[str, float], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["scene_id", "rating"])
        for key in sorted(ratings):
            w.writerow([key, repr(float(ratings[key]))])
