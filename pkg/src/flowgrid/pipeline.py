"""Dataset plumbing: segments + flow labels -> training samples / evaluations.

A dataset element is one run segment paired with its flow-label file; frame
i >= 1 of the segment forms a (prev, curr, annotation) training pair. The
model input for the previous cloud is ego-compensated into the current AV
frame unless the net config's compensate_input is off (the ego-motion
ablation), in which case the raw previous cloud is fed; targets are always
the ego-compensated annotations.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .annotate import FlowAnnotation, ego_compensate
from .metrics import MetricsConfig, MetricsReport, evaluate
from .net.model import FlowNetModel, NetConfig, forward
from .net.train import TrainSample, make_sample
from .pillars import pillar_index
from .scene import Frame, RunSegment


def pair_segment_labels(segment: RunSegment, labels) -> list:
    """Row-aligned (prev, curr, annotation) triples for frames 1..F-1.

    `labels` is the SFFL content: (timestamp, FlowAnnotation) per frame,
    frame 0 being the all-invalid placeholder.
    """
    if len(labels) != len(segment.frames):
        raise ValueError(
            f"label file has {len(labels)} frames, segment has {len(segment.frames)}"
        )
    triples = []
    for i in range(1, len(segment.frames)):
        ts, ann = labels[i]
        frame = segment.frames[i]
        if ts != frame.timestamp_us:
            raise ValueError(f"label/segment timestamp mismatch at frame {i}")
        if ann.n_points != frame.n_points:
            raise ValueError(f"label/segment point count mismatch at frame {i}")
        triples.append((segment.frames[i - 1], frame, ann))
    return triples


def model_prev_points(prev: Frame, curr: Frame, compensate: bool) -> np.ndarray:
    if not compensate:
        return prev.points
    out = prev.points.copy()
    out[:, :3] = ego_compensate(prev, curr)
    return out


def build_train_samples(datasets, cfg: NetConfig) -> list[TrainSample]:
    """datasets: iterable of (RunSegment, labels) pairs."""
    samples = []
    for segment, labels in datasets:
        for prev, curr, ann in pair_segment_labels(segment, labels):
            prev_pts = model_prev_points(prev, curr, cfg.compensate_input)
            samples.append(make_sample(prev_pts, curr.points, ann, cfg))
    return samples


def _concat_annotations(anns) -> FlowAnnotation:
    return FlowAnnotation(
        np.concatenate([a.flow for a in anns]),
        np.concatenate([a.class_id for a in anns]),
        np.concatenate([a.valid for a in anns]),
    )


def predict_datasets(model: FlowNetModel, datasets, jobs: int = 1):
    """Pooled (pred, pred_valid, annotation) over all annotatable frames."""
    triples = []
    for segment, labels in datasets:
        triples.extend(pair_segment_labels(segment, labels))

    def run(triple):
        prev, curr, _ = triple
        prev_pts = model_prev_points(prev, curr, model.cfg.compensate_input)
        return forward(model, prev_pts, curr.points)

    if jobs > 1 and len(triples) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, triples))
    else:
        results = [run(t) for t in triples]

    pred = np.concatenate([r[0] for r in results]).astype(np.float64)
    pred_valid = np.concatenate([r[1] for r in results])
    ann = _concat_annotations([t[2] for t in triples])
    return pred, pred_valid, ann


def zero_baseline(datasets, cfg: NetConfig):
    """The zero-flow predictor, restricted to the same in-grid scorable set."""
    preds, valids, anns = [], [], []
    for segment, labels in datasets:
        for _, curr, ann in pair_segment_labels(segment, labels):
            _, _, in_range = pillar_index(curr.points[:, :3], cfg.grid)
            preds.append(np.zeros((curr.n_points, 3)))
            valids.append(in_range)
            anns.append(ann)
    return np.concatenate(preds), np.concatenate(valids), _concat_annotations(anns)


def evaluate_model(
    model: FlowNetModel,
    datasets,
    mcfg: MetricsConfig | None = None,
    jobs: int = 1,
) -> MetricsReport:
    pred, pred_valid, ann = predict_datasets(model, datasets, jobs=jobs)
    return evaluate(pred, pred_valid, ann, mcfg)
