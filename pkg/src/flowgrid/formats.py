"""Bit-exact binary formats: run segments (SFRS), flow labels (SFFL), export (SFEX).

All formats are little-endian with a 4-byte magic, a u32 version and a u32
frame count. Geometry is float64 for ego poses and float32 for bulk point
payloads. Writers refuse non-finite data; readers validate magic, version,
payload length, and finiteness, raising a distinct error for each failure.
"""

from __future__ import annotations

import numpy as np

from .annotate import FlowAnnotation
from .errors import (
    BadMagicError,
    NonFiniteDataError,
    TruncatedPayloadError,
    VersionMismatchError,
)
from .geom import Box3, Transform3
from .scene import Frame, ObjectLabel, RunSegment

SEGMENT_MAGIC = b"SFRS"
LABELS_MAGIC = b"SFFL"
EXPORT_MAGIC = b"SFEX"
FORMAT_VERSION = 1

INVALID_CLASS_SENTINEL = 255

_U32 = np.dtype("<u4")
_I64 = np.dtype("<i8")
_U64 = np.dtype("<u8")
_F32 = np.dtype("<f4")
_F64 = np.dtype("<f8")
_LABEL_DT = np.dtype([("track_id", "<u8"), ("class_id", "u1"), ("box", "<f4", 7)])
_FLOW_DT = np.dtype([("flow", "<f4", 3), ("class_id", "u1"), ("valid", "u1")])


class _Reader:
    def __init__(self, buf: bytes, magic: bytes):
        self.buf = buf
        self.off = 0
        got = self.take(4)
        if got != magic:
            raise BadMagicError(f"expected magic {magic!r}, found {bytes(got)!r}")
        version = int(self.scalar(_U32))
        if version != FORMAT_VERSION:
            raise VersionMismatchError(f"unsupported {magic.decode()} version {version}")

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise TruncatedPayloadError(
                f"file ends at byte {len(self.buf)}, needed {self.off + n}"
            )
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def scalar(self, dt: np.dtype):
        return np.frombuffer(self.take(dt.itemsize), dtype=dt)[0]

    def array(self, dt: np.dtype, count: int) -> np.ndarray:
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt, count=count)

    def done(self):
        if self.off != len(self.buf):
            raise TruncatedPayloadError(
                f"{len(self.buf) - self.off} trailing byte(s) after payload"
            )


def _require_finite(arr: np.ndarray, what: str):
    if not np.isfinite(arr).all():
        raise NonFiniteDataError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# SFRS: run segments


def write_segment(segment: RunSegment, path) -> None:
    out = bytearray()
    out += SEGMENT_MAGIC
    out += np.uint32(FORMAT_VERSION).tobytes()
    out += np.uint32(len(segment.frames)).tobytes()
    for frame in segment.frames:
        _require_finite(frame.points, "frame points")
        pose = frame.ego_pose.matrix4()
        _require_finite(pose, "ego pose")
        out += np.int64(frame.timestamp_us).tobytes()
        out += pose.astype(_F64).tobytes()
        out += np.uint32(frame.n_points).tobytes()
        out += np.ascontiguousarray(frame.points, dtype=_F32).tobytes()
        out += np.uint32(len(frame.labels)).tobytes()
        for lab in frame.labels:
            rec = np.zeros(1, dtype=_LABEL_DT)
            rec["track_id"] = lab.track_id
            rec["class_id"] = lab.class_id
            box7 = np.concatenate([lab.box.center, lab.box.dims, [lab.box.heading]])
            _require_finite(box7, "label box")
            rec["box"] = box7.astype(_F32)
            out += rec.tobytes()
    with open(path, "wb") as fh:
        fh.write(out)


def read_segment(path) -> RunSegment:
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf, SEGMENT_MAGIC)
    n_frames = int(r.scalar(_U32))
    frames = []
    for _ in range(n_frames):
        ts = int(r.scalar(_I64))
        pose = r.array(_F64, 16).reshape(4, 4)
        _require_finite(pose, "ego pose")
        n_pts = int(r.scalar(_U32))
        pts = r.array(_F32, n_pts * 5).reshape(n_pts, 5).astype(np.float64)
        _require_finite(pts, "frame points")
        n_labels = int(r.scalar(_U32))
        labels = []
        for _ in range(n_labels):
            rec = r.array(_LABEL_DT, 1)[0]
            box7 = rec["box"].astype(np.float64)
            _require_finite(box7, "label box")
            labels.append(
                ObjectLabel(
                    track_id=int(rec["track_id"]),
                    class_id=int(rec["class_id"]),
                    box=Box3(box7[0:3], box7[3:6], float(box7[6])),
                )
            )
        frames.append(Frame(ts, Transform3.from_matrix4(pose), pts, tuple(labels)))
    r.done()
    return RunSegment(tuple(frames))


# ---------------------------------------------------------------------------
# SFFL: flow labels. One record stream per frame, row-aligned with the
# segment's points. Frame 0 has no previous frame; by convention it is
# stored with every point invalid.


def write_flow_labels(frames, path) -> None:
    """frames: sequence of (timestamp_us, FlowAnnotation)."""
    out = bytearray()
    out += LABELS_MAGIC
    out += np.uint32(FORMAT_VERSION).tobytes()
    out += np.uint32(len(frames)).tobytes()
    for ts, ann in frames:
        _require_finite(ann.flow, "flow labels")
        rec = np.zeros(ann.n_points, dtype=_FLOW_DT)
        rec["flow"] = ann.flow.astype(_F32)
        rec["class_id"] = ann.class_id.astype(np.uint8)
        rec["valid"] = ann.valid.astype(np.uint8)
        out += np.int64(ts).tobytes()
        out += np.uint32(ann.n_points).tobytes()
        out += rec.tobytes()
    with open(path, "wb") as fh:
        fh.write(out)


def read_flow_labels(path):
    """Returns a list of (timestamp_us, FlowAnnotation)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf, LABELS_MAGIC)
    n_frames = int(r.scalar(_U32))
    frames = []
    for _ in range(n_frames):
        ts = int(r.scalar(_I64))
        n = int(r.scalar(_U32))
        rec = r.array(_FLOW_DT, n)
        flow = rec["flow"].astype(np.float64)
        _require_finite(flow, "flow labels")
        frames.append((ts, FlowAnnotation(flow, rec["class_id"].astype(np.int64), rec["valid"] != 0)))
    r.done()
    return frames


def placeholder_annotation(n_points: int) -> FlowAnnotation:
    """All-invalid annotation used for a segment's first frame."""
    return FlowAnnotation(
        np.zeros((n_points, 3)), np.zeros(n_points, dtype=np.int64), np.zeros(n_points, dtype=bool)
    )


# ---------------------------------------------------------------------------
# SFEX: per-point (vx, vy, vz, class) float32 quadruples, the point-list
# analogue of a flow range image. Invalid points carry class 255; their
# original class is intentionally not recoverable.


def write_flow_export(frames, path) -> None:
    """frames: sequence of (timestamp_us, FlowAnnotation); timestamps dropped."""
    out = bytearray()
    out += EXPORT_MAGIC
    out += np.uint32(FORMAT_VERSION).tobytes()
    out += np.uint32(len(frames)).tobytes()
    for _, ann in frames:
        _require_finite(ann.flow, "flow export")
        quad = np.empty((ann.n_points, 4), dtype=_F32)
        quad[:, 0:3] = ann.flow.astype(_F32)
        cls = ann.class_id.astype(np.float32)
        cls[~ann.valid] = INVALID_CLASS_SENTINEL
        quad[:, 3] = cls
        out += np.uint32(ann.n_points).tobytes()
        out += quad.tobytes()
    with open(path, "wb") as fh:
        fh.write(out)


def read_flow_export(path):
    """Reimport an export; returns a list of FlowAnnotation.

    Validity is decoded from the class sentinel; invalid points come back
    with class 0 and zeroed flow.
    """
    with open(path, "rb") as fh:
        buf = fh.read()
    r = _Reader(buf, EXPORT_MAGIC)
    n_frames = int(r.scalar(_U32))
    frames = []
    for _ in range(n_frames):
        n = int(r.scalar(_U32))
        quad = r.array(_F32, n * 4).reshape(n, 4).astype(np.float64)
        _require_finite(quad, "flow export")
        valid = quad[:, 3] != INVALID_CLASS_SENTINEL
        cls = np.where(valid, quad[:, 3], 0).astype(np.int64)
        flow = quad[:, 0:3].copy()
        flow[~valid] = 0.0
        frames.append(FlowAnnotation(flow, cls, valid))
    r.done()
    return frames
