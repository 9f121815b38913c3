"""Synthetic run segments with analytically known motion.

A SceneSpec describes rigid objects on closed-form trajectories (body-frame
velocity + constant yaw rate), a world-static ground patch and clutter, and
the ego vehicle's own trajectory. generate() renders it into timestamped
frames of AV-frame points with tracked box labels; oracle_flow() computes the
exact per-point secant velocity straight from the continuous trajectories,
independent of the box-based annotator it is used to check.

Scene configs are flat "key = value" text with one repeated [object] section
per object; see parse_scene_config for the accepted keys.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import geom
from .errors import ConfigError
from .geom import Box3, Transform3

CLASS_IDS = {"background": 0, "vehicle": 1, "pedestrian": 2, "cyclist": 3}
CLASS_NAMES = {v: k for k, v in CLASS_IDS.items()}

# Surface samples sit this far inside the box faces so that float32
# serialization of points and boxes can never round an exact-boundary point
# outside margin-0 membership.
SURFACE_INSET = 1e-3

# Clutter points (poles, walls, parked junk) occupy this height band above
# the ground plane.
_CLUTTER_Z_BAND = (0.1, 2.8)

# Static world points are rejected from every object's swept box volume with
# this margin: a LiDAR cannot return from inside a solid object, and a static
# point inside a label box would (correctly) be annotated as moving while the
# oracle knows it is stationary.
_STATIC_CLEARANCE = 0.05


@dataclass(frozen=True)
class ObjectSpec:
    class_id: int
    dims: tuple[float, float, float]
    center: tuple[float, float, float]
    heading: float
    velocity: tuple[float, float, float]  # body frame, m/s
    yaw_rate: float
    spawn: int
    despawn: int  # exclusive
    points: int

    def __post_init__(self):
        if self.class_id not in (1, 2, 3):
            raise ConfigError(f"object class_id must be 1..3, got {self.class_id}")
        if min(self.dims) <= 2 * SURFACE_INSET:
            raise ConfigError("object dims must exceed twice the surface inset")
        if self.despawn <= self.spawn:
            raise ConfigError("despawn frame must be greater than spawn frame")
        if self.spawn < 0 or self.points < 0:
            raise ConfigError("spawn and points must be >= 0")


@dataclass(frozen=True)
class EgoSpec:
    start: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)  # x y z heading
    velocity: tuple[float, float, float] = (0.0, 0.0, 0.0)
    yaw_rate: float = 0.0


@dataclass(frozen=True)
class GroundSpec:
    extent: float = 0.0   # side length of the square patch, 0 disables
    density: float = 0.0  # points per m^2
    z: float = 0.0


@dataclass(frozen=True)
class ClutterSpec:
    count: int = 0
    extent: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    duration_frames: int
    objects: tuple[ObjectSpec, ...] = ()
    ego: EgoSpec = field(default_factory=EgoSpec)
    ground: GroundSpec = field(default_factory=GroundSpec)
    clutter: ClutterSpec = field(default_factory=ClutterSpec)
    frame_period_us: int = 100_000
    seed: int = 0
    # Rigid transform (x, y, z, heading) applied to all world content:
    # object trajectories, ground, clutter, and the ego trajectory alike.
    world_transform: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.duration_frames < 1:
            raise ConfigError("duration_frames must be >= 1")
        if self.frame_period_us <= 0:
            raise ConfigError("frame_period_us must be > 0")
        if self.ground.extent < 0 or self.ground.density < 0:
            raise ConfigError("ground extent/density must be >= 0")
        if self.clutter.count < 0 or self.clutter.extent < 0:
            raise ConfigError("clutter count/extent must be >= 0")


@dataclass(frozen=True)
class ObjectLabel:
    track_id: int
    class_id: int
    box: Box3


@dataclass(frozen=True)
class Frame:
    timestamp_us: int
    ego_pose: Transform3          # AV frame -> world frame
    points: np.ndarray            # (N, 5) float64: x, y, z, f0, f1, AV frame
    labels: tuple[ObjectLabel, ...]

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 5)
        object.__setattr__(self, "points", p)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class RunSegment:
    frames: tuple[Frame, ...]
    meta: dict | None = None  # generator seed + spec hash; not serialized

    def __post_init__(self):
        if len(self.frames) == 0:
            raise ValueError("a run segment needs at least one frame")
        ts = [f.timestamp_us for f in self.frames]
        if len(ts) > 1:
            periods = np.diff(ts)
            if (periods <= 0).any() or len(set(periods.tolist())) > 1:
                raise ValueError("frame timestamps must increase by a constant period")


# ---------------------------------------------------------------------------
# Trajectories


def rigid_pose_at(
    start_xyz, start_heading: float, velocity_body, yaw_rate: float, t: float
) -> Transform3:
    """World pose at time t for constant body-frame velocity + yaw rate.

    Closed-form arc motion: heading(t) = h0 + w*t and the center is the
    integral of R(heading(s)) @ v over s in [0, t]. z advances linearly.
    """
    h0 = float(start_heading)
    w = float(yaw_rate)
    vx, vy, vz = (float(v) for v in velocity_body)
    ht = h0 + w * t
    if w == 0.0:
        c, s = np.cos(h0), np.sin(h0)
        dx = (c * vx - s * vy) * t
        dy = (s * vx + c * vy) * t
    else:
        sin0, cos0 = np.sin(h0), np.cos(h0)
        sint, cost = np.sin(ht), np.cos(ht)
        dx = (vx * (sint - sin0) + vy * (cost - cos0)) / w
        dy = (-vx * (cost - cos0) + vy * (sint - sin0)) / w
    x0, y0, z0 = (float(c) for c in start_xyz)
    return geom.pose(x0 + dx, y0 + dy, z0 + vz * t, ht)


def ego_pose_at(spec: SceneSpec, t: float) -> Transform3:
    base = rigid_pose_at(spec.ego.start[:3], spec.ego.start[3], spec.ego.velocity, spec.ego.yaw_rate, t)
    return geom.compose(_world_xform(spec), base)


def object_pose_at(spec: SceneSpec, obj: ObjectSpec, t: float) -> Transform3:
    base = rigid_pose_at(obj.center, obj.heading, obj.velocity, obj.yaw_rate, t)
    return geom.compose(_world_xform(spec), base)


def _world_xform(spec: SceneSpec) -> Transform3:
    x, y, z, h = spec.world_transform
    return geom.pose(x, y, z, h)


# ---------------------------------------------------------------------------
# Deterministic scene content (RNG streams keyed by role, never by ego state)


@dataclass(frozen=True)
class SceneContent:
    """Deterministic world-frame content shared by generate() and the oracle."""

    ground_world: np.ndarray            # (G, 5) world-static
    clutter_world: np.ndarray           # (C, 5) world-static
    object_samples: tuple[np.ndarray, ...]  # per object: (P, 5) body frame

    @property
    def n_static(self) -> int:
        return self.ground_world.shape[0] + self.clutter_world.shape[0]


def _rng(spec: SceneSpec, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(spec.seed) & 0x7FFFFFFF, *key]))


def _sample_box_surface(rng: np.random.Generator, dims, count: int) -> np.ndarray:
    """Uniform area-weighted samples over the top and four side faces."""
    l, w, h = (float(d) / 2.0 - SURFACE_INSET for d in dims)
    areas = np.array([4 * l * w, 4 * w * h, 4 * w * h, 4 * l * h, 4 * l * h])
    face = rng.choice(5, size=count, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=count)
    v = rng.uniform(-1.0, 1.0, size=count)
    pts = np.empty((count, 3))
    top = face == 0
    pts[top] = np.stack([u[top] * l, v[top] * w, np.full(top.sum(), h)], axis=1)
    for f, (sx, axis) in enumerate([(+1, 0), (-1, 0), (+1, 1), (-1, 1)], start=1):
        m = face == f
        fixed = np.full(m.sum(), sx * (l if axis == 0 else w))
        free1 = u[m] * (w if axis == 0 else l)
        free2 = v[m] * h
        if axis == 0:
            pts[m] = np.stack([fixed, free1, free2], axis=1)
        else:
            pts[m] = np.stack([free1, fixed, free2], axis=1)
    feats = rng.uniform(0.0, 1.0, size=(count, 2))
    return np.concatenate([pts, feats], axis=1)


def _reject_swept(spec: SceneSpec, points_world: np.ndarray) -> np.ndarray:
    """Keep-mask for static points outside every object's swept box volume."""
    keep = np.ones(points_world.shape[0], dtype=bool)
    period_s = spec.frame_period_us * 1e-6
    for obj in spec.objects:
        half = np.asarray(obj.dims) / 2.0 + _STATIC_CLEARANCE
        for i in range(obj.spawn, min(obj.despawn, spec.duration_frames)):
            pose_w = object_pose_at(spec, obj, i * period_s)
            local = geom.invert(pose_w).apply(points_world)
            keep &= ~(np.abs(local) <= half).all(axis=1)
    return keep


def scene_content(spec: SceneSpec) -> SceneContent:
    g = spec.ground
    n_ground = int(round(g.density * g.extent * g.extent)) if g.extent > 0 else 0
    rng = _rng(spec, 0)
    ground = np.empty((n_ground, 5))
    ground[:, 0:2] = rng.uniform(-g.extent / 2, g.extent / 2, size=(n_ground, 2))
    ground[:, 2] = g.z
    ground[:, 3:5] = rng.uniform(0.0, 1.0, size=(n_ground, 2))

    c = spec.clutter
    rng = _rng(spec, 1)
    clutter = np.empty((c.count, 5))
    clutter[:, 0:2] = rng.uniform(-c.extent / 2, c.extent / 2, size=(c.count, 2))
    clutter[:, 2] = spec.ground.z + rng.uniform(*_CLUTTER_Z_BAND, size=c.count)
    clutter[:, 3:5] = rng.uniform(0.0, 1.0, size=(c.count, 2))

    xf = _world_xform(spec)
    if n_ground:
        ground[:, :3] = xf.apply(ground[:, :3])
        ground = ground[_reject_swept(spec, ground[:, :3])]
    if c.count:
        clutter[:, :3] = xf.apply(clutter[:, :3])
        clutter = clutter[_reject_swept(spec, clutter[:, :3])]

    samples = tuple(
        _sample_box_surface(_rng(spec, 2, i), obj.dims, obj.points)
        for i, obj in enumerate(spec.objects)
    )
    return SceneContent(ground, clutter, samples)


def _live(obj: ObjectSpec, frame_index: int) -> bool:
    return obj.spawn <= frame_index < obj.despawn


# ---------------------------------------------------------------------------
# Generation and the flow oracle


def generate(spec: SceneSpec) -> RunSegment:
    """Render a SceneSpec into a run segment (deterministic per spec)."""
    content = scene_content(spec)
    period_s = spec.frame_period_us * 1e-6
    frames = []
    for i in range(spec.duration_frames):
        t = i * period_s
        ego = ego_pose_at(spec, t)
        ego_inv = geom.invert(ego)
        chunks = []
        if content.ground_world.shape[0]:
            chunks.append(_to_av(content.ground_world, ego_inv))
        if content.clutter_world.shape[0]:
            chunks.append(_to_av(content.clutter_world, ego_inv))
        labels = []
        for k, obj in enumerate(spec.objects):
            if not _live(obj, i):
                continue
            pose_w = object_pose_at(spec, obj, t)
            body = content.object_samples[k]
            world = pose_w.apply(body[:, :3])
            pts = np.concatenate([ego_inv.apply(world), body[:, 3:5]], axis=1)
            chunks.append(pts)
            box_pose_av = geom.compose(ego_inv, pose_w)
            labels.append(
                ObjectLabel(
                    track_id=k + 1,
                    class_id=obj.class_id,
                    box=Box3(box_pose_av.translation, np.asarray(obj.dims), geom.heading_of(box_pose_av)),
                )
            )
        points = np.concatenate(chunks, axis=0) if chunks else np.empty((0, 5))
        frames.append(Frame(i * spec.frame_period_us, ego, points, tuple(labels)))
    meta = {"seed": spec.seed, "spec_sha256": spec_hash(spec)}
    return RunSegment(tuple(frames), meta)


def _to_av(world_points: np.ndarray, ego_inv: Transform3) -> np.ndarray:
    out = world_points.copy()
    out[:, :3] = ego_inv.apply(world_points[:, :3])
    return out


def oracle_flow(spec: SceneSpec, frame_index: int, content: SceneContent | None = None):
    """Exact flow for every point of frame `frame_index`, from trajectories.

    Returns (flow (N, 3) m/s in the current AV frame, class_id (N,), valid
    (N,)). World-static points get exactly zero; points of objects first
    live at this frame are flagged invalid. Row order matches generate().
    """
    if frame_index < 1:
        raise ValueError("oracle_flow needs a previous frame (frame_index >= 1)")
    if frame_index >= spec.duration_frames:
        raise ValueError("frame_index beyond the segment duration")
    if content is None:
        content = scene_content(spec)
    period_s = spec.frame_period_us * 1e-6
    t0 = frame_index * period_s
    t_prev = (frame_index - 1) * period_s
    rot_inv = geom.invert(ego_pose_at(spec, t0)).rotation

    n_static = content.ground_world.shape[0] + content.clutter_world.shape[0]
    flows = [np.zeros((n_static, 3))]
    classes = [np.zeros(n_static, dtype=np.int64)]
    valid = [np.ones(n_static, dtype=bool)]
    for k, obj in enumerate(spec.objects):
        if not _live(obj, frame_index):
            continue
        body = content.object_samples[k][:, :3]
        p0 = object_pose_at(spec, obj, t0).apply(body)
        p_prev = object_pose_at(spec, obj, t_prev).apply(body)
        flows.append(((p0 - p_prev) / (t0 - t_prev)) @ rot_inv.T)
        classes.append(np.full(body.shape[0], obj.class_id, dtype=np.int64))
        valid.append(np.full(body.shape[0], _live(obj, frame_index - 1)))
    return np.concatenate(flows), np.concatenate(classes), np.concatenate(valid)


def oracle_flow_segment(spec: SceneSpec):
    """oracle_flow for every annotatable frame; list indexed by frame-1."""
    content = scene_content(spec)
    return [oracle_flow(spec, i, content) for i in range(1, spec.duration_frames)]


def subsample_segments(segments: list, k: int, seed: int) -> list:
    """Uniform without-replacement sample of whole segments, order-preserving.

    Whole segments, never individual frames: frames within one segment are
    heavily correlated, so mixing frames would not reduce the dataset.
    """
    if k > len(segments):
        raise ValueError(f"cannot sample {k} of {len(segments)} segments")
    if k < 0:
        raise ValueError("k must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0x7FFFFFFF, 3]))
    idx = rng.choice(len(segments), size=k, replace=False)
    return [segments[i] for i in sorted(idx.tolist())]


# ---------------------------------------------------------------------------
# Scene config text format

_SCALAR_KEYS = {
    "duration_frames": int,
    "frame_period_us": int,
    "seed": int,
}
_EGO_KEYS = {"ego.start": 4, "ego.velocity": 3, "ego.yaw_rate": 1}
_GROUND_KEYS = {"ground.extent": 1, "ground.density": 1, "ground.z": 1}
_CLUTTER_KEYS = {"clutter.count": 1, "clutter.extent": 1}
_WORLD_KEYS = {"world.transform": 4}
_OBJECT_KEYS = {
    "class": None,
    "dims": 3,
    "center": 3,
    "heading": 1,
    "velocity": 3,
    "yaw_rate": 1,
    "spawn": 1,
    "despawn": 1,
    "points": 1,
}


def _parse_floats(key: str, value: str, n: int):
    parts = value.split()
    if len(parts) != n:
        raise ConfigError(f"{key}: expected {n} value(s), got {len(parts)}")
    try:
        vals = [float(p) for p in parts]
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from None
    return vals[0] if n == 1 else tuple(vals)


def parse_scene_config(text: str) -> SceneSpec:
    """Parse the flat key/value + repeated-[object]-section scene syntax."""
    top: dict = {}
    objects: list[dict] = []
    current: dict | None = None  # None = top level
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line == "[object]":
            current = {}
            objects.append(current)
            continue
        if line.startswith("["):
            raise ConfigError(f"line {lineno}: unknown section {line!r}")
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        target = top if current is None else current
        if key in target:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        allowed = _OBJECT_KEYS if current is not None else {
            **_SCALAR_KEYS, **_EGO_KEYS, **_GROUND_KEYS, **_CLUTTER_KEYS, **_WORLD_KEYS,
        }
        if key not in allowed:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        target[key] = value

    def pop_top(key, n, default):
        if key not in top:
            return default
        return _parse_floats(key, top.pop(key), n)

    try:
        duration = int(top.pop("duration_frames"))
    except KeyError:
        raise ConfigError("duration_frames is required") from None
    period = int(top.pop("frame_period_us", 100_000))
    seed = int(top.pop("seed", 0))
    ego = EgoSpec(
        start=pop_top("ego.start", 4, (0.0, 0.0, 0.0, 0.0)),
        velocity=pop_top("ego.velocity", 3, (0.0, 0.0, 0.0)),
        yaw_rate=pop_top("ego.yaw_rate", 1, 0.0),
    )
    ground = GroundSpec(
        extent=pop_top("ground.extent", 1, 0.0),
        density=pop_top("ground.density", 1, 0.0),
        z=pop_top("ground.z", 1, 0.0),
    )
    clutter = ClutterSpec(
        count=int(pop_top("clutter.count", 1, 0)),
        extent=pop_top("clutter.extent", 1, 0.0),
    )
    world = pop_top("world.transform", 4, (0.0, 0.0, 0.0, 0.0))

    parsed_objects = []
    for i, obj in enumerate(objects):
        try:
            cls = obj.pop("class")
        except KeyError:
            raise ConfigError(f"object {i}: 'class' is required") from None
        if cls in CLASS_IDS and cls != "background":
            class_id = CLASS_IDS[cls]
        else:
            try:
                class_id = int(cls)
            except ValueError:
                raise ConfigError(f"object {i}: unknown class {cls!r}") from None
        missing = [k for k in ("dims", "center") if k not in obj]
        if missing:
            raise ConfigError(f"object {i}: missing key(s) {missing}")
        parsed_objects.append(
            ObjectSpec(
                class_id=class_id,
                dims=_parse_floats("dims", obj.pop("dims"), 3),
                center=_parse_floats("center", obj.pop("center"), 3),
                heading=_parse_floats("heading", obj.pop("heading", "0"), 1),
                velocity=_parse_floats("velocity", obj.pop("velocity", "0 0 0"), 3),
                yaw_rate=_parse_floats("yaw_rate", obj.pop("yaw_rate", "0"), 1),
                spawn=int(obj.pop("spawn", 0)),
                despawn=int(obj.pop("despawn", duration)),
                points=int(_parse_floats("points", obj.pop("points", "50"), 1)),
            )
        )
        if obj:
            raise ConfigError(f"object {i}: unknown key(s) {sorted(obj)}")

    return SceneSpec(
        duration_frames=duration,
        objects=tuple(parsed_objects),
        ego=ego,
        ground=ground,
        clutter=clutter,
        frame_period_us=period,
        seed=seed,
        world_transform=world,
    )


def load_scene_config(path) -> SceneSpec:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_scene_config(fh.read())


def spec_to_text(spec: SceneSpec) -> str:
    """Canonical config text for a spec (also the hash input)."""
    lines = [
        f"duration_frames = {spec.duration_frames}",
        f"frame_period_us = {spec.frame_period_us}",
        f"seed = {spec.seed}",
        "ego.start = " + _fmt(spec.ego.start),
        "ego.velocity = " + _fmt(spec.ego.velocity),
        f"ego.yaw_rate = {spec.ego.yaw_rate!r}",
        f"ground.extent = {spec.ground.extent!r}",
        f"ground.density = {spec.ground.density!r}",
        f"ground.z = {spec.ground.z!r}",
        f"clutter.count = {spec.clutter.count}",
        f"clutter.extent = {spec.clutter.extent!r}",
        "world.transform = " + _fmt(spec.world_transform),
    ]
    for obj in spec.objects:
        lines += [
            "",
            "[object]",
            f"class = {obj.class_id}",
            "dims = " + _fmt(obj.dims),
            "center = " + _fmt(obj.center),
            f"heading = {obj.heading!r}",
            "velocity = " + _fmt(obj.velocity),
            f"yaw_rate = {obj.yaw_rate!r}",
            f"spawn = {obj.spawn}",
            f"despawn = {obj.despawn}",
            f"points = {obj.points}",
        ]
    return "\n".join(lines) + "\n"


def _fmt(vals) -> str:
    return " ".join(repr(float(v)) for v in vals)


def spec_hash(spec: SceneSpec) -> str:
    return hashlib.sha256(spec_to_text(spec).encode("utf-8")).hexdigest()
