"""Bootstrapping per-point flow annotations from tracked boxes.

For every current-frame point inside a labeled box, flow is the secant-line
velocity (p0 - p_prev) / dt where p_prev is the point's inferred position one
frame earlier, obtained from the object's rigid pose delta with the ego's own
motion compensated away. Points outside every box are stationary background;
points of objects with no previous-frame label are flagged invalid and
excluded from losses and metrics.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import geom
from .errors import ConfigError
from .geom import Transform3
from .scene import Frame, ObjectLabel

BACKGROUND = 0


@dataclass(frozen=True)
class FlowAnnotation:
    """Per-point supervision: flow (N, 3) m/s, class id (N,), validity (N,).

    Invalid points carry the class of their object but zero flow; they are
    excluded from every aggregate.
    """

    flow: np.ndarray
    class_id: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "flow", np.asarray(self.flow, dtype=np.float64).reshape(-1, 3))
        object.__setattr__(self, "class_id", np.asarray(self.class_id, dtype=np.int64).reshape(-1))
        object.__setattr__(self, "valid", np.asarray(self.valid, dtype=bool).reshape(-1))
        n = self.flow.shape[0]
        if self.class_id.shape[0] != n or self.valid.shape[0] != n:
            raise ValueError("flow, class_id and valid must have equal length")
        if not np.isfinite(self.flow[self.valid]).all():
            raise ValueError("valid points must carry finite flow")

    @property
    def n_points(self) -> int:
        return self.flow.shape[0]

    def speeds(self) -> np.ndarray:
        return np.linalg.norm(self.flow, axis=1)


@dataclass(frozen=True)
class AnnotationConfig:
    compensate_ego: bool = True
    box_margin: float = 0.0
    stationary_stat_threshold: float = 0.1  # m/s, dataset statistics only
    ground_removal_z: float | None = None   # meters above ground level; None = off

    def __post_init__(self):
        if self.box_margin < 0 or self.stationary_stat_threshold < 0:
            raise ConfigError("annotation thresholds must be >= 0")


def ego_compensate(prev: Frame, curr: Frame) -> np.ndarray:
    """Previous-frame points re-expressed in the current AV frame, (N, 3)."""
    xform = geom.compose(geom.invert(curr.ego_pose), prev.ego_pose)
    return xform.apply(prev.points[:, :3])


def object_delta_transform(
    label_prev: ObjectLabel,
    label_curr: ObjectLabel,
    ego_prev: Transform3,
    ego_curr: Transform3,
    compensate_ego: bool = True,
) -> Transform3:
    """Transform mapping a current point of the object to its previous position.

    The previous box pose is first re-expressed in the current AV frame
    (unless ego compensation is disabled), then composed with the inverse of
    the current pose: a point rides the box backwards by one frame.
    """
    if label_prev.track_id != label_curr.track_id:
        raise ValueError("labels refer to different tracks")
    pose_prev = geom.box_pose(label_prev.box)
    if compensate_ego:
        pose_prev = geom.compose(geom.compose(geom.invert(ego_curr), ego_prev), pose_prev)
    return geom.compose(pose_prev, geom.invert(geom.box_pose(label_curr.box)))


def _assign_boxes(points: np.ndarray, labels, margin: float) -> np.ndarray:
    """Index into labels per point, -1 for background.

    A point inside several boxes goes to the box with the nearest center;
    ties break toward the smaller track id.
    """
    n = points.shape[0]
    owner = np.full(n, -1, dtype=np.int64)
    best = np.full(n, np.inf)
    order = sorted(range(len(labels)), key=lambda i: labels[i].track_id, reverse=True)
    for i in order:
        box = labels[i].box
        inside = geom.contains(box, points, margin)
        if not inside.any():
            continue
        d = np.linalg.norm(points[inside] - box.center, axis=1)
        better = np.zeros(n, dtype=bool)
        better[inside] = d <= best[inside]
        owner[better] = i
        best[better] = np.linalg.norm(points[better] - box.center, axis=1)
    return owner


def annotate_frame(prev: Frame, curr: Frame, cfg: AnnotationConfig | None = None) -> FlowAnnotation:
    """Flow annotation for every point of `curr` given the previous frame."""
    cfg = cfg or AnnotationConfig()
    if curr.timestamp_us <= prev.timestamp_us:
        raise ValueError("frames must have strictly increasing timestamps")
    dt = (curr.timestamp_us - prev.timestamp_us) * 1e-6

    pts = curr.points[:, :3]
    n = pts.shape[0]
    flow = np.zeros((n, 3))
    class_id = np.zeros(n, dtype=np.int64)
    valid = np.ones(n, dtype=bool)

    prev_by_track = {lab.track_id: lab for lab in prev.labels}
    owner = _assign_boxes(pts, curr.labels, cfg.box_margin)
    for i, lab in enumerate(curr.labels):
        sel = owner == i
        if not sel.any():
            continue
        class_id[sel] = lab.class_id
        lab_prev = prev_by_track.get(lab.track_id)
        if lab_prev is None:
            valid[sel] = False
            continue
        delta = object_delta_transform(
            lab_prev, lab, prev.ego_pose, curr.ego_pose, cfg.compensate_ego
        )
        flow[sel] = (pts[sel] - delta.apply(pts[sel])) / dt
    return FlowAnnotation(flow, class_id, valid)


def ablate_labels(ann: FlowAnnotation, classes, mode: str) -> FlowAnnotation:
    """Remove a class's supervision: relabel as background or mask from loss.

    mode "stationary": matching points become zero-flow valid background.
    mode "ignored": matching points keep class/flow but turn invalid.
    """
    classes = set(int(c) for c in classes)
    if BACKGROUND in classes:
        raise ConfigError("cannot ablate the background class")
    if not classes <= {1, 2, 3}:
        raise ConfigError(f"unknown class ids in {sorted(classes)}")
    if mode not in ("stationary", "ignored"):
        raise ConfigError(f"unknown ablation mode {mode!r}")
    sel = np.isin(ann.class_id, list(classes))
    flow = ann.flow.copy()
    class_id = ann.class_id.copy()
    valid = ann.valid.copy()
    if mode == "stationary":
        flow[sel] = 0.0
        class_id[sel] = BACKGROUND
        valid[sel] = True
    else:
        valid[sel] = False
    return FlowAnnotation(flow, class_id, valid)


def remove_ground(frame: Frame, z_threshold: float, ground_level: float = 0.0):
    """Drop points at or below ground_level + z_threshold (strict > retained).

    Returns (frame, kept_indices).
    """
    keep = np.nonzero(frame.points[:, 2] > ground_level + z_threshold)[0]
    return replace(frame, points=frame.points[keep]), keep


def downsample_points(frame: Frame, fraction: float, seed: int):
    """Keep a uniform round(fraction*N) subset of points, original order.

    Returns (frame, kept_indices); labels are unchanged.
    """
    if not 0.0 < fraction <= 1.0:
        raise ConfigError("fraction must be in (0, 1]")
    n = frame.n_points
    k = int(round(fraction * n))
    if k >= n:
        return frame, np.arange(n)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0x7FFFFFFF, 4]))
    keep = np.sort(rng.choice(n, size=k, replace=False))
    return replace(frame, points=frame.points[keep]), keep


def annotate_segment(frames, cfg: AnnotationConfig | None = None, jobs: int = 1):
    """Annotations for frames[1:]; element i annotates frames[i+1].

    Frames annotate independently, so the per-frame work may fan out across
    a thread pool; results are assembled in frame order regardless of jobs.
    """
    pairs = list(zip(frames[:-1], frames[1:]))
    if jobs > 1 and len(pairs) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(lambda pc: annotate_frame(pc[0], pc[1], cfg), pairs))
    return [annotate_frame(p, c, cfg) for p, c in pairs]
