"""Class-aware scene flow evaluation.

Errors are pointwise L2 distances between predicted and annotated flow.
Reports break out vehicle/pedestrian/cyclist into all/moving/stationary
buckets (moving: annotated speed >= the 0.5 m/s threshold); background is a
single bucket. Only points that are annotation-valid and carry a prediction
are scored; the count of valid-but-unpredicted points is reported separately.

Two thresholds coexist on purpose and must not be conflated: 0.1 m/s
separates stationary from moving in dataset statistics, 0.5 m/s defines the
binary moving/stationary classification task.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .annotate import FlowAnnotation
from .scene import CLASS_NAMES

EVAL_CLASSES = (1, 2, 3)  # vehicle, pedestrian, cyclist
BUCKETS = ("all", "moving", "stationary")


@dataclass(frozen=True)
class MetricsConfig:
    moving_threshold: float = 0.5      # m/s, moving/stationary buckets + binary task
    stat_threshold: float = 0.1        # m/s, dataset statistics
    error_thresholds: tuple = (0.1, 1.0)
    hist_bin_width: float = 0.25       # m/s
    hist_max_speed: float = 20.0       # m/s

    def __post_init__(self):
        if self.moving_threshold < 0 or self.stat_threshold < 0:
            raise ValueError("thresholds must be >= 0")
        if any(t < 0 for t in self.error_thresholds):
            raise ValueError("error thresholds must be >= 0")


@dataclass(frozen=True)
class BucketStats:
    count: int
    mean_error: float | None                  # m/s; None when count == 0
    frac_below: tuple                          # aligned with cfg.error_thresholds


@dataclass(frozen=True)
class MetricsReport:
    cfg: MetricsConfig
    rows: dict                                  # (class_name, bucket) -> BucketStats
    precision: float | None                     # overall moving classification
    recall: float | None
    per_class_pr: dict                          # class_name -> (precision|None, recall|None)
    n_scored: int
    n_unscored: int                             # annotation-valid but no prediction


def _bucket_stats(err: np.ndarray, thresholds) -> BucketStats:
    n = err.shape[0]
    if n == 0:
        return BucketStats(0, None, tuple(None for _ in thresholds))
    return BucketStats(
        count=n,
        mean_error=float(err.mean()),
        frac_below=tuple(float((err <= t).mean()) for t in thresholds),
    )


def _pr(gt_moving: np.ndarray, pred_moving: np.ndarray):
    tp = int((gt_moving & pred_moving).sum())
    fp = int((~gt_moving & pred_moving).sum())
    fn = int((gt_moving & ~pred_moving).sum())
    precision = tp / (tp + fp) if (tp + fp) > 0 else None
    recall = tp / (tp + fn) if (tp + fn) > 0 else None
    return precision, recall


def evaluate(
    pred: np.ndarray,
    pred_valid: np.ndarray,
    ann: FlowAnnotation,
    cfg: MetricsConfig | None = None,
) -> MetricsReport:
    cfg = cfg or MetricsConfig()
    pred = np.asarray(pred, dtype=np.float64)
    pred_valid = np.asarray(pred_valid, dtype=bool)
    if pred.shape[0] != ann.n_points or pred_valid.shape[0] != ann.n_points:
        raise ValueError("prediction arrays must be row-aligned with the annotation")
    scored = ann.valid & pred_valid
    if not scored.any():
        raise ValueError("no scorable points (annotation-valid with predictions)")

    err = np.linalg.norm(pred - ann.flow, axis=1)
    gt_speed = ann.speeds()
    pred_speed = np.linalg.norm(pred, axis=1)
    moving = gt_speed >= cfg.moving_threshold

    rows = {}
    per_class_pr = {}
    for cid in EVAL_CLASSES:
        name = CLASS_NAMES[cid]
        sel = scored & (ann.class_id == cid)
        rows[(name, "all")] = _bucket_stats(err[sel], cfg.error_thresholds)
        rows[(name, "moving")] = _bucket_stats(err[sel & moving], cfg.error_thresholds)
        rows[(name, "stationary")] = _bucket_stats(err[sel & ~moving], cfg.error_thresholds)
        per_class_pr[name] = _pr(moving[sel], pred_speed[sel] >= cfg.moving_threshold)
    rows[("background", "all")] = _bucket_stats(err[scored & (ann.class_id == 0)], cfg.error_thresholds)

    precision, recall = _pr(moving[scored], pred_speed[scored] >= cfg.moving_threshold)
    return MetricsReport(
        cfg=cfg,
        rows=rows,
        precision=precision,
        recall=recall,
        per_class_pr=per_class_pr,
        n_scored=int(scored.sum()),
        n_unscored=int((ann.valid & ~pred_valid).sum()),
    )


def binary_moving_pr(
    pred: np.ndarray,
    ann: FlowAnnotation,
    cfg: MetricsConfig | None = None,
    mask: np.ndarray | None = None,
):
    """(precision, recall) for moving classification; None where undefined.

    Ground truth: annotated speed >= threshold. Prediction: predicted speed
    >= threshold. `mask` restricts scoring (defaults to annotation-valid).
    """
    cfg = cfg or MetricsConfig()
    pred = np.asarray(pred, dtype=np.float64)
    sel = ann.valid if mask is None else (ann.valid & np.asarray(mask, dtype=bool))
    gt = ann.speeds()[sel] >= cfg.moving_threshold
    pd = np.linalg.norm(pred[sel], axis=1) >= cfg.moving_threshold
    return _pr(gt, pd)


# ---------------------------------------------------------------------------
# Dataset statistics


@dataclass(frozen=True)
class ClassStats:
    count: int
    moving_fraction: float | None      # speed >= stat_threshold
    stationary_fraction: float | None
    moving_speed_mean: float | None
    histogram: np.ndarray              # counts of moving speeds, fixed bins


@dataclass(frozen=True)
class DatasetStats:
    cfg: MetricsConfig
    per_class: dict                    # class_name -> ClassStats
    bin_edges: np.ndarray


def dataset_stats(annotations, cfg: MetricsConfig | None = None) -> DatasetStats:
    """Moving/stationary composition and moving-speed histograms per class.

    `annotations` is an iterable of FlowAnnotation; only valid points count.
    Speeds at or above the histogram cap land in the final bin.
    """
    cfg = cfg or MetricsConfig()
    anns = list(annotations)
    speeds = np.concatenate([a.speeds()[a.valid] for a in anns]) if anns else np.empty(0)
    classes = np.concatenate([a.class_id[a.valid] for a in anns]) if anns else np.empty(0, np.int64)
    if speeds.shape[0] == 0:
        raise ValueError("dataset statistics need at least one valid point")

    edges = np.arange(0.0, cfg.hist_max_speed + cfg.hist_bin_width, cfg.hist_bin_width)
    per_class = {}
    for cid in (0,) + EVAL_CLASSES:
        sel = classes == cid
        n = int(sel.sum())
        if n == 0:
            per_class[CLASS_NAMES[cid]] = ClassStats(0, None, None, None, np.zeros(len(edges) - 1, np.int64))
            continue
        s = speeds[sel]
        moving = s >= cfg.stat_threshold
        mv = s[moving]
        hist, _ = np.histogram(np.minimum(mv, cfg.hist_max_speed - 1e-9), bins=edges)
        per_class[CLASS_NAMES[cid]] = ClassStats(
            count=n,
            moving_fraction=float(moving.mean()),
            stationary_fraction=float((~moving).mean()),
            moving_speed_mean=float(mv.mean()) if mv.size else None,
            histogram=hist.astype(np.int64),
        )
    return DatasetStats(cfg, per_class, edges)


# ---------------------------------------------------------------------------
# Rendering


def _num(x) -> str:
    return "" if x is None else f"{x:.9g}"


def report_to_csv(report: MetricsReport) -> str:
    heads = ["class", "bucket", "count", "mean_l2_mps"]
    heads += [f"frac_le_{t:g}" for t in report.cfg.error_thresholds]
    heads += ["precision", "recall"]
    lines = [",".join(heads)]
    for cid in EVAL_CLASSES:
        name = CLASS_NAMES[cid]
        for bucket in BUCKETS:
            st = report.rows[(name, bucket)]
            pr = report.per_class_pr[name] if bucket == "all" else (None, None)
            lines.append(",".join(
                [name, bucket, str(st.count), _num(st.mean_error)]
                + [_num(f) for f in st.frac_below] + [_num(pr[0]), _num(pr[1])]
            ))
    st = report.rows[("background", "all")]
    lines.append(",".join(
        ["background", "all", str(st.count), _num(st.mean_error)]
        + [_num(f) for f in st.frac_below] + ["", ""]
    ))
    lines.append(",".join(
        ["overall", "scored", str(report.n_scored), ""]
        + ["" for _ in report.cfg.error_thresholds]
        + [_num(report.precision), _num(report.recall)]
    ))
    lines.append(",".join(
        ["overall", "unscored", str(report.n_unscored), ""]
        + ["" for _ in report.cfg.error_thresholds] + ["", ""]
    ))
    return "\n".join(lines) + "\n"


def report_to_text(report: MetricsReport) -> str:
    """Fixed-width summary mirroring the per-class/bucket table layout."""
    def cell(x, pct=False):
        if x is None:
            return "--"
        return f"{100 * x:.1f}%" if pct else f"{x:.2f}"

    cols = []
    for cid in EVAL_CLASSES:
        for bucket in BUCKETS:
            cols.append((CLASS_NAMES[cid], bucket))
    cols.append(("background", "all"))

    header1 = ["metric".ljust(14)]
    header2 = ["".ljust(14)]
    for name, bucket in cols:
        header1.append((name if bucket == "all" else "").rjust(11))
        header2.append(bucket.rjust(11))
    out = ["".join(header1), "".join(header2)]

    def row(label, get, pct):
        cells = [label.ljust(14)]
        for key in cols:
            cells.append(cell(get(report.rows[key]), pct).rjust(11))
        out.append("".join(cells))

    row("mean (m/s)", lambda s: s.mean_error, pct=False)
    for i, t in enumerate(report.cfg.error_thresholds):
        row(f"<= {t:g} m/s", lambda s, i=i: s.frac_below[i], pct=True)
    out.append("")
    out.append(f"scored points: {report.n_scored}   without prediction: {report.n_unscored}")
    p = "--" if report.precision is None else f"{report.precision:.3f}"
    r = "--" if report.recall is None else f"{report.recall:.3f}"
    out.append(f"moving classification (>= {report.cfg.moving_threshold:g} m/s): precision {p}  recall {r}")
    return "\n".join(out) + "\n"


def stats_to_csv(stats: DatasetStats) -> str:
    nbins = len(stats.bin_edges) - 1
    heads = ["class", "count", "moving_fraction", "stationary_fraction", "moving_speed_mean"]
    heads += [f"hist_{stats.bin_edges[i]:g}" for i in range(nbins)]
    lines = [",".join(heads)]
    for name, st in stats.per_class.items():
        lines.append(",".join(
            [name, str(st.count), _num(st.moving_fraction), _num(st.stationary_fraction),
             _num(st.moving_speed_mean)] + [str(int(c)) for c in st.histogram]
        ))
    return "\n".join(lines) + "\n"
