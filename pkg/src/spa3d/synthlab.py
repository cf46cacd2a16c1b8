"""Deterministic synthetic physics scenes with ground-truth 3D tracks.

World frame: X right, Y up, Z away from the camera; the ground is the plane
Y = ground_height. Objects are spheres and axis-aligned boxes that translate
under gravity and bounce off the ground. A fixed pinhole camera renders a
depth map by ray casting, and occlusion flags come from that depth map.

Every generated scene stores its full recipe (the spec plus any continuation
events) in ``meta["synth.spec"]`` so that violations and features can be
re-derived from the file alone.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from .trackio import (
    CameraIntrinsics,
    SceneTracks,
    SemanticFeatureField,
    derive_occlusion_flags,
    nearest_pixel,
    stub_featurizer,
)

VIOLATION_KINDS = ("permanence", "immutability", "continuity", "solidity")
GROUND_ID = 0
SKY_ID = -1
FAR_DEPTH = 100.0
DEFAULT_TELEPORT = 0.5
DEFAULT_MORPH = 1.5
MORPH_RAMP_FRAMES = 4
REST_SPEED = 0.15
FACING_CAP_DEG = 70.0  # tracked sphere points lie within this angle of the view direction


class SceneRejected(RuntimeError):
    """Raised when a spec produces an unusable scene; regenerate with a new seed."""


class ViolationTargetError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObjectSpec:
    object_id: int
    shape: str  # "sphere" | "box"
    size: tuple[float, float, float]  # sphere: (r, r, r); box: half extents
    position: tuple[float, float, float]
    velocity: tuple[float, float, float]

    @property
    def half_height(self) -> float:
        return self.size[1]


@dataclass(frozen=True)
class OccluderSpec:
    object_id: int
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]


@dataclass(frozen=True)
class CameraPose:
    height: float = 2.0
    pitch_deg: float = 20.0


@dataclass(frozen=True)
class Jitter:
    onset: int
    seed: int
    scale: float = 0.4


@dataclass(frozen=True)
class ViolationKind:
    kind: str
    onset: int
    magnitude: float = 0.0
    target: int | None = None

    def __post_init__(self):
        if self.kind not in VIOLATION_KINDS:
            raise ValueError(f"unknown violation kind {self.kind!r}")


def default_magnitude(kind: str) -> float:
    return {"continuity": DEFAULT_TELEPORT, "immutability": DEFAULT_MORPH}.get(kind, 1.0)


def default_intrinsics(size: int = 64, fov_deg: float = 60.0) -> CameraIntrinsics:
    f = (size / 2) / math.tan(math.radians(fov_deg) / 2)
    return CameraIntrinsics(fx=f, fy=f, cx=size / 2, cy=size / 2, width=size, height=size)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    frames: int = 24
    objects: tuple[ObjectSpec, ...] = ()
    gravity: float = 9.8
    ground_height: float = 0.0
    occluders: tuple[OccluderSpec, ...] = ()
    intrinsics: CameraIntrinsics = field(default_factory=default_intrinsics)
    pose: CameraPose = field(default_factory=CameraPose)
    fps: int = 24
    substeps: int = 4
    restitution: float = 0.8
    points_per_object: int = 16
    background_points: int = 16
    events: tuple = ()

    def validate(self) -> None:
        if self.frames < 8:
            raise ValueError("SceneSpec needs at least 8 frames")
        for o in self.objects:
            if o.shape not in ("sphere", "box"):
                raise ValueError(f"unknown shape {o.shape!r}")
            if min(o.size) <= 0:
                raise ValueError(f"object {o.object_id}: extents must be positive")
        for occ in self.occluders:
            if min(occ.half_extents) <= 0:
                raise ValueError(f"occluder {occ.object_id}: extents must be positive")
        ids = [o.object_id for o in self.objects] + [o.object_id for o in self.occluders]
        if len(set(ids)) != len(ids) or any(i in (GROUND_ID, SKY_ID) for i in ids):
            raise ValueError("object ids must be unique and differ from ground/sky ids")
        for i, a in enumerate(self.objects):
            for b in self.objects[i + 1:]:
                gap = np.linalg.norm(np.subtract(a.position, b.position))
                if gap <= max(a.size) + max(b.size):
                    raise ValueError(f"objects {a.object_id} and {b.object_id} overlap at t=0")

    def with_events(self, *events) -> "SceneSpec":
        return replace(self, events=tuple(self.events) + tuple(events))

    # JSON round trip; floats survive exactly through repr.
    def to_json(self) -> str:
        d = asdict(self)
        d["events"] = [{"type": type(e).__name__, **asdict(e)} for e in self.events]
        return json.dumps(d, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "SceneSpec":
        d = json.loads(text)
        objects = tuple(ObjectSpec(o["object_id"], o["shape"], tuple(o["size"]), tuple(o["position"]),
                                   tuple(o["velocity"])) for o in d["objects"])
        occluders = tuple(OccluderSpec(o["object_id"], tuple(o["center"]), tuple(o["half_extents"]))
                          for o in d["occluders"])
        events = []
        for e in d["events"]:
            kind = e.pop("type")
            events.append(Jitter(**e) if kind == "Jitter" else ViolationKind(**e))
        return SceneSpec(
            seed=d["seed"], frames=d["frames"], objects=objects, gravity=d["gravity"],
            ground_height=d["ground_height"], occluders=occluders,
            intrinsics=CameraIntrinsics(**d["intrinsics"]), pose=CameraPose(**d["pose"]),
            fps=d["fps"], substeps=d["substeps"], restitution=d["restitution"],
            points_per_object=d["points_per_object"], background_points=d["background_points"],
            events=tuple(events),
        )


def random_spec(seed: int, frames: int = 24, n_objects: int | tuple[int, int] = (1, 3),
                occluder_prob: float = 0.5) -> SceneSpec:
    """Draw a scene: objects in separate depth lanes, optional occluder in front."""
    rng = np.random.default_rng(seed)
    if isinstance(n_objects, int):
        n = n_objects
    else:
        n = int(rng.integers(n_objects[0], n_objects[1] + 1))
    lanes = rng.permutation([5.0, 6.5, 8.0])[:n]
    objects = []
    for i, lane_z in enumerate(lanes):
        shape = "sphere" if rng.random() < 0.5 else "box"
        if shape == "sphere":
            r = float(rng.uniform(0.2, 0.4))
            size = (r, r, r)
        else:
            size = tuple(float(s) for s in rng.uniform(0.15, 0.35, size=3))
        pos = (float(rng.uniform(-1.5, 1.5)), float(rng.uniform(size[1] + 0.05, 1.8)),
               float(lane_z + rng.uniform(-0.2, 0.2)))
        vel = (float(rng.uniform(-1.5, 1.5)), float(rng.uniform(-1.0, 1.5)),
               float(rng.uniform(-0.3, 0.3)))
        objects.append(ObjectSpec(i + 1, shape, size, pos, vel))
    occluders = []
    if rng.random() < occluder_prob:
        hx, hy = float(rng.uniform(0.3, 0.6)), float(rng.uniform(0.3, 0.6))
        occluders.append(OccluderSpec(100, (float(rng.uniform(-1.0, 1.0)), hy, 3.5), (hx, hy, 0.1)))
    return SceneSpec(seed=seed, frames=frames, objects=tuple(objects), occluders=tuple(occluders))


# ---------------------------------------------------------------------------
# Camera and ray casting
# ---------------------------------------------------------------------------

class Camera:
    def __init__(self, intrinsics: CameraIntrinsics, pose: CameraPose):
        self.k = intrinsics
        th = math.radians(pose.pitch_deg)
        self.origin = np.array([0.0, pose.height, 0.0])
        self.right = np.array([1.0, 0.0, 0.0])
        self.down = np.array([0.0, -math.cos(th), -math.sin(th)])
        self.forward = np.array([0.0, -math.sin(th), math.cos(th)])

    def world_to_camera(self, p: np.ndarray) -> np.ndarray:
        d = np.asarray(p, dtype=np.float64) - self.origin
        return np.stack([d @ self.right, d @ self.down, d @ self.forward], axis=-1)

    def to_track(self, p: np.ndarray) -> np.ndarray:
        """World points [..., 3] -> (x, y normalized, z meters)."""
        c = self.world_to_camera(p)
        uv = self.k.project(c)
        return np.stack([uv[..., 0] / self.k.width, uv[..., 1] / self.k.height, c[..., 2]], axis=-1)

    def rays(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """World directions scaled so that the ray parameter equals camera depth."""
        u = np.asarray(x, dtype=np.float64) * self.k.width
        v = np.asarray(y, dtype=np.float64) * self.k.height
        a = (u - self.k.cx) / self.k.fx
        b = (v - self.k.cy) / self.k.fy
        return (a[..., None] * self.right + b[..., None] * self.down + self.forward)


@dataclass
class Primitive:
    object_id: int
    shape: str  # "sphere" | "box" | "plane"
    center: np.ndarray
    size: np.ndarray  # radius triple or half extents; plane: unused


def _hit_depth(prim: Primitive, origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """First positive ray parameter per ray, inf when missed."""
    if prim.shape == "plane":
        dy = dirs[..., 1]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (prim.center[1] - origin[1]) / dy
        return np.where((dy < 0) & (s > 0), s, np.inf)
    if prim.shape == "sphere":
        r = prim.size[0]
        oc = origin - prim.center
        a = np.einsum("...i,...i->...", dirs, dirs)
        b = dirs @ oc
        c = oc @ oc - r * r
        disc = b * b - a * c
        with np.errstate(invalid="ignore"):
            sq = np.sqrt(np.maximum(disc, 0.0))
        near = (-b - sq) / a
        far = (-b + sq) / a
        s = np.where(near > 0, near, far)
        return np.where((disc >= 0) & (s > 0), s, np.inf)
    lo = prim.center - prim.size
    hi = prim.center + prim.size
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / dirs
        t2 = (hi - origin) / dirs
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    tnear = tmin.max(axis=-1)
    tfar = tmax.min(axis=-1)
    s = np.where(tnear > 0, tnear, tfar)
    return np.where((tnear <= tfar) & (tfar > 0) & (s > 0), s, np.inf)


def raycast(camera: Camera, prims: Sequence[Primitive], x: np.ndarray, y: np.ndarray):
    """Cast rays through normalized image points; returns (depth, hit id)."""
    dirs = camera.rays(x, y)
    depth = np.full(dirs.shape[:-1], np.inf)
    ids = np.full(dirs.shape[:-1], SKY_ID, dtype=np.int64)
    for prim in prims:
        s = _hit_depth(prim, camera.origin, dirs)
        closer = s < depth
        depth = np.where(closer, s, depth)
        ids = np.where(closer, prim.object_id, ids)
    return depth, ids


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------

@dataclass
class Rollout:
    spec: SceneSpec
    centers: np.ndarray  # [T, n_obj, 3]
    scale: np.ndarray  # [T, n_obj]
    present: np.ndarray  # [T, n_obj] bool
    contact: np.ndarray  # [T, n_obj] bool, ground contact during the step into frame t
    offsets: list[np.ndarray]  # per object [K, 3] surface offsets at unit scale
    background: np.ndarray  # [B, 3] world points on the ground

    def primitives(self, t: int) -> list[Primitive]:
        spec = self.spec
        prims = [Primitive(GROUND_ID, "plane", np.array([0.0, spec.ground_height, 0.0]), np.zeros(3))]
        for occ in spec.occluders:
            prims.append(Primitive(occ.object_id, "box", np.array(occ.center), np.array(occ.half_extents)))
        for i, o in enumerate(spec.objects):
            if self.present[t, i]:
                prims.append(Primitive(o.object_id, o.shape, self.centers[t, i],
                                       np.array(o.size) * self.scale[t, i]))
        return prims

    def world_points(self) -> tuple[np.ndarray, np.ndarray]:
        """Tracked world points [N, T, 3] and the owning object id per track."""
        T = self.spec.frames
        pts, owners = [], []
        for i, o in enumerate(self.spec.objects):
            p = self.centers[:, i][:, None, :] + self.scale[:, i][:, None, None] * self.offsets[i][None]
            pts.append(np.transpose(p, (1, 0, 2)))
            owners += [o.object_id] * len(self.offsets[i])
        pts.append(np.broadcast_to(self.background[:, None, :], (len(self.background), T, 3)))
        owners += [GROUND_ID] * len(self.background)
        return np.concatenate(pts, axis=0), np.array(owners, dtype=np.int64)


def _facing_frame(view: np.ndarray) -> np.ndarray:
    """Rows e1, e2, view: an orthonormal frame whose third axis points at the camera."""
    helper = np.array([1.0, 0.0, 0.0]) if abs(view[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(helper, view)
    e1 /= np.linalg.norm(e1)
    return np.stack([e1, np.cross(view, e1), view])


def _sphere_offsets(r: float, k: int, view: np.ndarray) -> np.ndarray:
    """Fibonacci points on the spherical cap facing ``view``."""
    i = np.arange(k) + 0.5
    cos_cap = math.cos(math.radians(FACING_CAP_DEG))
    phi = np.arccos(1 - (1 - cos_cap) * i / k)
    theta = math.pi * (1 + 5 ** 0.5) * i
    local = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=-1)
    return r * local @ _facing_frame(view)


def _box_offsets(half: np.ndarray, k: int, rng: np.random.Generator, view: np.ndarray) -> np.ndarray:
    """Points on the faces turned towards ``view``, spread by projected area."""
    normals = np.array([[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]], dtype=np.float64)
    areas = np.array([half[1] * half[2], half[1] * half[2], half[0] * half[2],
                      half[0] * half[2], half[0] * half[1], half[0] * half[1]])
    weight = areas * np.maximum(normals @ view, 0.0)
    faces = rng.choice(6, size=k, p=weight / weight.sum())
    pts = rng.uniform(-1.0, 1.0, size=(k, 3))
    axis = faces // 2
    pts[np.arange(k), axis] = np.where(faces % 2 == 0, -1.0, 1.0)
    return pts * half


def _surface_offsets(spec: SceneSpec) -> list[np.ndarray]:
    """Tracked points per object, on the side facing the camera at the first frame.

    A point tracker only starts tracks on visible pixels, so points that the
    camera never sees are not sampled.
    """
    origin = Camera(spec.intrinsics, spec.pose).origin
    out = []
    for o in spec.objects:
        rng = np.random.default_rng([spec.seed & 0xFFFFFFFF, 7, o.object_id])
        view = origin - np.asarray(o.position, dtype=np.float64)
        view /= np.linalg.norm(view)
        if o.shape == "sphere":
            out.append(_sphere_offsets(o.size[0], spec.points_per_object, view))
        else:
            out.append(_box_offsets(np.array(o.size), spec.points_per_object, rng, view))
    return out


def _background_points(spec: SceneSpec, camera: Camera) -> np.ndarray:
    rng = np.random.default_rng([spec.seed & 0xFFFFFFFF, 11])
    xs = rng.uniform(0.05, 0.95, size=spec.background_points)
    ys = rng.uniform(0.6, 0.95, size=spec.background_points)
    dirs = camera.rays(xs, ys)
    s = (spec.ground_height - camera.origin[1]) / dirs[:, 1]
    return camera.origin + s[:, None] * dirs


def integrate(spec: SceneSpec) -> Rollout:
    """Semi-implicit Euler with ground bounces; events apply at their onset frame."""
    spec.validate()
    T, n = spec.frames, len(spec.objects)
    dt = 1.0 / (spec.fps * spec.substeps)
    pos = np.array([o.position for o in spec.objects], dtype=np.float64).reshape(n, 3)
    vel = np.array([o.velocity for o in spec.objects], dtype=np.float64).reshape(n, 3)
    half_h = np.array([o.half_height for o in spec.objects], dtype=np.float64)
    ids = [o.object_id for o in spec.objects]
    centers = np.zeros((T, n, 3))
    scale = np.ones((T, n))
    present = np.ones((T, n), dtype=bool)
    contact = np.zeros((T, n), dtype=bool)
    collide = np.ones(n, dtype=bool)

    jitters = [e for e in spec.events if isinstance(e, Jitter)]
    violations = [e for e in spec.events if isinstance(e, ViolationKind)]
    for v in violations:
        if v.target not in ids:
            raise ViolationTargetError(f"violation target {v.target} absent from scene")
        if not 0 < v.onset < T - 1:
            raise ValueError(f"onset {v.onset} outside (0, {T - 1})")

    def scale_at(t: int) -> np.ndarray:
        s = np.ones(n)
        for v in violations:
            if v.kind == "immutability" and t >= v.onset:
                ramp = min(1.0, (t - v.onset + 1) / MORPH_RAMP_FRAMES)
                s[ids.index(v.target)] *= 1.0 + (v.magnitude - 1.0) * ramp
        return s

    centers[0] = pos
    for t in range(1, T):
        s_now = scale_at(t)
        for v in violations:
            if v.kind == "solidity" and t >= v.onset:
                collide[ids.index(v.target)] = False
        for _ in range(spec.substeps):
            vel[:, 1] -= spec.gravity * dt
            pos += vel * dt
            bottom = pos[:, 1] - half_h * s_now
            hit = collide & (bottom < spec.ground_height)
            if hit.any():
                contact[t] |= hit
                pos[hit, 1] = spec.ground_height + half_h[hit] * s_now[hit]
                down = hit & (vel[:, 1] < 0)
                vel[down, 1] = -spec.restitution * vel[down, 1]
                slow = hit & (np.abs(vel[:, 1]) < REST_SPEED)
                vel[slow, 1] = 0.0
        for j in jitters:
            if t == j.onset:
                rng = np.random.default_rng([j.seed & 0xFFFFFFFF, 3])
                kick = rng.normal(0.0, j.scale, size=(n, 3))
                kick[:, 2] *= 0.25
                vel += kick
        for v in violations:
            if v.kind == "continuity" and t == v.onset:
                i = ids.index(v.target)
                direction = math.copysign(1.0, vel[i, 0]) if vel[i, 0] != 0 else 1.0
                pos[i, 0] += direction * v.magnitude
        centers[t] = pos
        scale[t] = s_now
    for v in violations:
        if v.kind == "permanence":
            present[v.onset:, ids.index(v.target)] = False
    camera = Camera(spec.intrinsics, spec.pose)
    return Rollout(spec, centers, scale, present, contact, _surface_offsets(spec),
                   _background_points(spec, camera))


def _first_hit_along(camera: Camera, prims: Sequence[Primitive], world_pts: np.ndarray) -> np.ndarray:
    """Depth of the first surface on the ray through each world point."""
    cam = camera.world_to_camera(world_pts)
    dirs = (world_pts - camera.origin) / cam[..., 2:3]
    best = np.full(world_pts.shape[:-1], np.inf)
    for prim in prims:
        best = np.minimum(best, _hit_depth(prim, camera.origin, dirs))
    return best


def analytic_visibility(rollout: Rollout, rel_tol: float = 1e-6) -> np.ndarray:
    """Exact visibility [N, T]: nothing intersects the camera ray before the point,
    and the point lies inside the image."""
    spec = rollout.spec
    camera = Camera(spec.intrinsics, spec.pose)
    world, owners = rollout.world_points()
    N, T = world.shape[:2]
    vis = np.zeros((N, T), dtype=bool)
    obj_index = {o.object_id: i for i, o in enumerate(spec.objects)}
    for t in range(T):
        prims = rollout.primitives(t)
        p = world[:, t]
        z = camera.world_to_camera(p)[:, 2]
        front = z > 1e-3
        hit = _first_hit_along(camera, prims, p)
        trk = camera.to_track(p)
        _, _, inb = nearest_pixel(trk[:, 0], trk[:, 1], spec.intrinsics.width, spec.intrinsics.height)
        vis[:, t] = front & inb & (hit >= z * (1 - rel_tol))
        for j, owner in enumerate(owners):
            if owner in obj_index and not rollout.present[t, obj_index[owner]]:
                vis[j, t] = False
    return vis


def render_depth(rollout: Rollout, size: int | None = None) -> np.ndarray:
    """Ray-cast z-buffer [T, H, W] (pixel centers), far plane for sky."""
    spec = rollout.spec
    camera = Camera(spec.intrinsics, spec.pose)
    W = size or spec.intrinsics.width
    H = size or spec.intrinsics.height
    xs = (np.arange(W) + 0.5) / W
    ys = (np.arange(H) + 0.5) / H
    gx, gy = np.meshgrid(xs, ys)
    out = np.empty((spec.frames, H, W), dtype=np.float64)
    for t in range(spec.frames):
        d, _ = raycast(camera, rollout.primitives(t), gx, gy)
        out[t] = np.minimum(d, FAR_DEPTH)
    return out


def render_ids(rollout: Rollout, grid: int = 32) -> np.ndarray:
    """Surface id seen at each node of a grid spanning [0, 1]^2 (corners included)."""
    spec = rollout.spec
    camera = Camera(spec.intrinsics, spec.pose)
    g = np.linspace(0.0, 1.0, grid)
    gx, gy = np.meshgrid(g, g)
    return np.stack([raycast(camera, rollout.primitives(t), gx, gy)[1] for t in range(spec.frames)])


def render(rollout: Rollout) -> SceneTracks:
    spec = rollout.spec
    camera = Camera(spec.intrinsics, spec.pose)
    world, owners = rollout.world_points()
    positions = camera.to_track(world).astype(np.float32)
    if np.any(positions[..., 2] <= 0):
        raise SceneRejected("tracked point behind the camera")
    vis = analytic_visibility(rollout)
    depth = render_depth(rollout)
    # Rasterize tracked points into the z-buffer at their own depth so a
    # visible surface point is never hidden by the pixel-center ray hitting
    # the same curved surface slightly closer.
    H, W = depth.shape[1:]
    pos64 = positions.astype(np.float64)
    col, row, inb = nearest_pixel(pos64[..., 0], pos64[..., 1], W, H)
    T = spec.frames
    for t in range(T):
        prims = rollout.primitives(t)
        hits = _first_hit_along(camera, prims, world[:, t])
        for j in np.flatnonzero(inb[:, t] & ~vis[:, t]):
            z = pos64[j, t, 2]
            depth[t, row[j, t], col[j, t]] = min(depth[t, row[j, t], col[j, t]], hits[j], z - 1e-3)
        for j in np.flatnonzero(inb[:, t] & vis[:, t]):
            depth[t, row[j, t], col[j, t]] = max(depth[t, row[j, t], col[j, t]], pos64[j, t, 2])
    depth = np.maximum(depth, 1e-3).astype(np.float32)
    occluded = derive_occlusion_flags(positions, depth, warn=False)
    obj_index = {o.object_id: i for i, o in enumerate(spec.objects)}
    for j, owner in enumerate(owners):
        if owner in obj_index:
            occluded[j] |= ~rollout.present[:, obj_index[owner]]
    meta = {
        "synth.spec": spec.to_json(),
        "synth.track_object": ",".join(str(int(o)) for o in owners),
        "source": "synthlab",
    }
    return SceneTracks(positions, occluded, depth=depth, intrinsics=spec.intrinsics, meta=meta)


def _frustum_check(rollout: Rollout) -> None:
    spec = rollout.spec
    camera = Camera(spec.intrinsics, spec.pose)
    for i, o in enumerate(spec.objects):
        trk = camera.to_track(rollout.centers[:, i])
        inside = (trk[:, 0] >= 0) & (trk[:, 0] < 1) & (trk[:, 1] >= 0) & (trk[:, 1] < 1) & (trk[:, 2] > 0)
        if (~inside).mean() > 0.5:
            raise SceneRejected(f"object {o.object_id} outside the frustum for most frames")


def simulate(spec: SceneSpec, check_frustum: bool = True) -> SceneTracks:
    rollout = integrate(spec)
    if check_frustum:
        _frustum_check(rollout)
    return render(rollout)


def spec_of(scene: SceneTracks) -> SceneSpec:
    if "synth.spec" not in scene.meta:
        raise ViolationTargetError("scene carries no synthetic recipe; violation target absent")
    return SceneSpec.from_json(scene.meta["synth.spec"])


def rollout_of(scene: SceneTracks) -> Rollout:
    return integrate(spec_of(scene))


def track_owners(scene: SceneTracks) -> np.ndarray:
    return np.array([int(s) for s in scene.meta["synth.track_object"].split(",")], dtype=np.int64)


# ---------------------------------------------------------------------------
# Violations and corpora
# ---------------------------------------------------------------------------

def eligible_targets(scene: SceneTracks, kind: str, onset: int) -> list[int]:
    spec = spec_of(scene)
    rollout = integrate(spec)
    owners = track_owners(scene)
    out = []
    for i, o in enumerate(spec.objects):
        visible_now = bool((~scene.occluded[owners == o.object_id, onset]).any())
        if kind == "solidity":
            ok = bool(rollout.contact[onset + 1:, i].any())
        elif kind == "permanence":
            ok = visible_now
        else:
            ok = visible_now or bool((~scene.occluded[owners == o.object_id, onset:]).any())
        if ok:
            out.append(o.object_id)
    return out


def apply_violation(scene: SceneTracks, v: ViolationKind, seed: int) -> SceneTracks:
    """Re-simulate ``scene`` with a physical violation starting at ``v.onset``.

    Frames before the onset are bit-identical to the input.
    """
    spec = spec_of(scene)
    if not 0 < v.onset < spec.frames - 1:
        raise ValueError(f"onset {v.onset} outside (0, {spec.frames - 1})")
    if v.target is None:
        choices = eligible_targets(scene, v.kind, v.onset)
        if not choices:
            raise ViolationTargetError(f"no eligible target for {v.kind} at frame {v.onset}")
        rng = np.random.default_rng([seed & 0xFFFFFFFF, 5])
        v = replace(v, target=int(choices[rng.integers(len(choices))]))
    elif v.target not in [o.object_id for o in spec.objects]:
        raise ViolationTargetError(f"violation target {v.target} absent from scene")
    out = render(integrate(spec.with_events(v)))
    out.meta.update({k: val for k, val in scene.meta.items() if not k.startswith("synth.")})
    out.meta.update({"label": "impossible", "violation": v.kind, "violation.target": str(v.target)})
    return out


@dataclass
class Quadruplet:
    possible: tuple[SceneTracks, SceneTracks]
    impossible: tuple[SceneTracks, SceneTracks]
    kinds: tuple[str, str]
    prefix: int

    @property
    def members(self) -> list[tuple[str, str | None, SceneTracks]]:
        return [("possible", None, self.possible[0]), ("possible", None, self.possible[1]),
                ("impossible", self.kinds[0], self.impossible[0]),
                ("impossible", self.kinds[1], self.impossible[1])]


def make_quadruplet(spec: SceneSpec, seed: int, kinds: tuple[str, str] | None = None,
                    onset: int | None = None) -> Quadruplet:
    """Two jittered continuations plus two violated continuations of one prefix."""
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 13])
    t_star = spec.frames // 2 if onset is None else onset
    if kinds is None:
        pick = rng.choice(len(VIOLATION_KINDS), size=2, replace=False)
        kinds = (VIOLATION_KINDS[pick[0]], VIOLATION_KINDS[pick[1]])
    if kinds[0] == kinds[1]:
        raise ValueError("the two impossible members need distinct violation kinds")
    seeds = rng.integers(0, 2**31 - 1, size=4)
    possible = []
    for s in seeds[:2]:
        scene = simulate(spec.with_events(Jitter(t_star, int(s))))
        scene.meta["label"] = "possible"
        possible.append(scene)
    impossible = []
    for base, kind, s in zip(possible, kinds, seeds[2:]):
        v = ViolationKind(kind, t_star, default_magnitude(kind))
        impossible.append(apply_violation(base, v, int(s)))
    return Quadruplet(tuple(possible), tuple(impossible), tuple(kinds), t_star)


def graded_corruption(scene: SceneTracks, levels: int = 5, step: float = DEFAULT_TELEPORT,
                      fraction: float = 0.5, seed: int = 0, onset: int | None = None) -> list[SceneTracks]:
    """Level k teleports a fixed subset of objects by k * step meters; level 0 is the input.

    The default step makes level 1 the standard continuity violation.
    """
    spec = spec_of(scene)
    t_star = spec.frames // 2 if onset is None else onset
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 17])
    ids = [o.object_id for o in spec.objects]
    k = max(1, int(math.ceil(fraction * len(ids))))
    targets = sorted(int(i) for i in rng.choice(ids, size=k, replace=False))
    out = [scene]
    for level in range(1, levels):
        events = [ViolationKind("continuity", t_star, level * step, tid) for tid in targets]
        s = render(integrate(spec.with_events(*events)))
        s.meta.update({k2: v for k2, v in scene.meta.items() if not k2.startswith("synth.")})
        s.meta.update({"label": "corrupted", "level": str(level)})
        out.append(s)
    out[0] = scene.replace(meta={**scene.meta, "level": "0"})
    return out


def generate_scene(seed: int, frames: int = 24, max_tries: int = 50, **kwargs) -> SceneTracks:
    """Random possible scene; rejected draws are retried with derived seeds."""
    for attempt in range(max_tries):
        s = seed if attempt == 0 else int(np.random.default_rng([seed, attempt]).integers(2**31 - 1))
        try:
            scene = simulate(random_spec(s, frames=frames, **kwargs))
        except (SceneRejected, ValueError):
            continue
        scene.meta["label"] = "possible"
        return scene
    raise SceneRejected(f"no valid scene after {max_tries} draws from seed {seed}")


def generate_quadruplet(seed: int, kinds: tuple[str, str] | None = None, frames: int = 24,
                        max_tries: int = 50, **kwargs) -> Quadruplet:
    for attempt in range(max_tries):
        s = seed if attempt == 0 else int(np.random.default_rng([seed, attempt]).integers(2**31 - 1))
        try:
            return make_quadruplet(random_spec(s, frames=frames, **kwargs), s, kinds=kinds)
        except (SceneRejected, ViolationTargetError, ValueError):
            continue
    raise SceneRejected(f"no valid quadruplet after {max_tries} draws from seed {seed}")


def quadruplet_kinds(index: int) -> tuple[str, str]:
    """Balanced kind assignment: every kind appears equally often over 4 consecutive quads."""
    return VIOLATION_KINDS[index % 4], VIOLATION_KINDS[(index + 1) % 4]


class SynthFeatureProvider:
    """Semantic features for synthetic scenes, painted from re-rendered object ids."""

    def __init__(self, dim: int = 32, grid: int = 32, seed: int = 0):
        self.dim, self.grid, self.seed = dim, grid, seed

    def __call__(self, scene: SceneTracks) -> SemanticFeatureField | None:
        if "synth.spec" not in scene.meta:
            return scene.features
        return stub_featurizer(render_ids(rollout_of(scene), self.grid), self.dim, self.seed)


def max_interframe_displacement(scene: SceneTracks) -> np.ndarray:
    """Per-frame max displacement [T-1] between consecutive frames, in camera space."""
    k = scene.intrinsics
    xyz = k.normalized_to_camera(scene.positions) if k is not None else scene.positions.astype(np.float64)
    return np.linalg.norm(np.diff(xyz, axis=1), axis=-1).max(axis=0)
