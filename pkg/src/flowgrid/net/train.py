"""Loss, Adam training loop, and the finite-difference gradient check."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..annotate import FlowAnnotation
from ..errors import NumericError
from ..pillars import PillarAssignment, encode_points
from . import tape as T
from .model import BatchEncoding, FlowNetModel, NetConfig, batch_encode, forward_graph


def point_weights(class_id: np.ndarray, background_weight: float) -> np.ndarray:
    return np.where(class_id == 0, background_weight, 1.0)


def loss(pred: np.ndarray, pred_valid: np.ndarray, ann: FlowAnnotation, cfg: NetConfig) -> float:
    """Mean over scorable points of w_i * e_i.

    e_i is the L2 error norm (or its square for loss_form "squared"); w_i is
    background_weight for background points, 1 otherwise. Points that are
    annotation-invalid or carry no prediction contribute nothing.
    """
    mask = ann.valid & np.asarray(pred_valid, dtype=bool)
    if not mask.any():
        raise ValueError("no valid, predicted points to compute a loss over")
    diff = np.asarray(pred, dtype=np.float64)[mask] - ann.flow[mask]
    e = np.linalg.norm(diff, axis=1)
    if cfg.loss_form == "squared":
        e = e * e
    w = point_weights(ann.class_id[mask], cfg.background_weight)
    return float((w * e).sum() / mask.sum())


# ---------------------------------------------------------------------------
# Training samples: encodings plus targets aligned to the canonical rows of
# the current frame's assignment.


@dataclass
class TrainSample:
    prev_assign: PillarAssignment
    curr_assign: PillarAssignment
    target: np.ndarray   # (M, 3) flow for in-grid current points, canonical order
    weight: np.ndarray   # (M,)
    valid: np.ndarray    # (M,) bool


def make_sample(
    prev_points: np.ndarray,
    curr_points: np.ndarray,
    ann: FlowAnnotation,
    cfg: NetConfig,
) -> TrainSample:
    """prev_points must already be in the frame the model should see."""
    pa = encode_points(prev_points, cfg.grid)
    ca = encode_points(curr_points, cfg.grid)
    rows = ca.order
    return TrainSample(
        prev_assign=pa,
        curr_assign=ca,
        target=ann.flow[rows].astype(np.float32),
        weight=point_weights(ann.class_id[rows], cfg.background_weight).astype(np.float32),
        valid=ann.valid[rows],
    )


class Adam:
    def __init__(self, cfg: NetConfig, params: dict[str, np.ndarray], names: list[str]):
        self.cfg = cfg
        self.names = names
        self.m = {n: np.zeros_like(params[n]) for n in names}
        self.v = {n: np.zeros_like(params[n]) for n in names}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        c = self.cfg
        self.t += 1
        b1t = 1.0 - c.adam_beta1 ** self.t
        b2t = 1.0 - c.adam_beta2 ** self.t
        for name in self.names:
            g = grads.get(name)
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - c.adam_beta1) * (g - m)
            v += (1.0 - c.adam_beta2) * (g * g - v)
            params[name] -= c.learning_rate * (m / b1t) / (np.sqrt(v / b2t) + c.adam_epsilon)


def _batch_loss(model: FlowNetModel, batch_samples: list[TrainSample], training: bool, record: bool | None = None):
    """Forward + loss over one batch; returns (tape, loss Var, pvars, n_pts)."""
    cfg = model.cfg
    enc = batch_encode([(s.prev_assign, s.curr_assign) for s in batch_samples])
    target = np.concatenate([s.target for s in batch_samples]).astype(model.dtype)
    weight = np.concatenate([s.weight for s in batch_samples]).astype(model.dtype)
    valid = np.concatenate([s.valid for s in batch_samples])
    vidx = np.nonzero(valid)[0]
    if vidx.size == 0:
        return None, None, None, 0
    tp = T.Tape(grad=training if record is None else record)
    pred, pvars = forward_graph(model, tp, enc, training=training)
    lvar = T.flow_loss(tp, T.take_rows(tp, pred, vidx), target[vidx], weight[vidx], cfg.loss_form)
    return tp, lvar, pvars, int(vidx.size)


def train(model: FlowNetModel, samples: list[TrainSample], log=None):
    """Adam training over the sample list; returns per-epoch mean loss.

    Deterministic given the model config's seed: the per-epoch shuffle and
    every reduction order are fixed. A non-finite loss aborts with a
    diagnostic rather than continuing to diverge.
    """
    if not samples:
        raise ValueError("training needs a non-empty dataset")
    cfg = model.cfg
    adam = Adam(cfg, model.params, model.trainable_names())
    trace = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed & 0x7FFFFFFF, 6, epoch]))
        perm = rng.permutation(len(samples))
        total = 0.0
        count = 0
        for lo in range(0, len(perm), cfg.batch_size):
            chunk = [samples[i] for i in perm[lo : lo + cfg.batch_size]]
            tp, lvar, pvars, n = _batch_loss(model, chunk, training=True)
            if n == 0:
                continue
            lval = float(lvar.value)
            if not np.isfinite(lval):
                raise NumericError(
                    f"non-finite training loss at epoch {epoch}, step {lo // cfg.batch_size}"
                )
            tp.backward(lvar)
            adam.step(model.params, {k: v.grad for k, v in pvars.items()})
            total += lval * n
            count += n
        mean = total / count if count else float("nan")
        trace.append(mean)
        if log is not None:
            log(epoch, mean)
    return trace


# ---------------------------------------------------------------------------
# Gradient checking


def gradcheck_sample(cfg: NetConfig, n_points: int = 256, seed: int = 0) -> TrainSample:
    """Random in-grid frame pair with random finite targets and mixed weights."""
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFF, 8]))
    g = cfg.grid

    def cloud(n):
        pts = np.empty((n, 5))
        pts[:, 0:2] = rng.uniform(-0.45 * g.extent, 0.45 * g.extent, size=(n, 2))
        pts[:, 2] = rng.uniform(g.z_min + 0.1, g.z_max - 0.1, size=n)
        pts[:, 3:5] = rng.uniform(0.0, 1.0, size=(n, 2))
        return pts

    curr = cloud(n_points)
    ann = FlowAnnotation(
        rng.normal(0.0, 1.0, size=(n_points, 3)),
        rng.integers(0, 4, size=n_points),
        rng.uniform(size=n_points) > 0.1,
    )
    return make_sample(cloud(n_points), curr, ann, cfg)


def relu_margin(model: FlowNetModel, sample: TrainSample) -> float:
    """Smallest |pre-activation| feeding any ReLU for this sample."""
    mins: list[float] = []
    enc = batch_encode([(sample.prev_assign, sample.curr_assign)])
    forward_graph(model, T.Tape(grad=False), enc, training=True, relu_preact_mins=mins)
    return min(mins) if mins else float("inf")


def grad_check(
    model: FlowNetModel,
    sample: TrainSample,
    epsilon: float = 1e-5,
    n_params: int = 200,
    seed: int = 0,
) -> float:
    """Max relative error between tape and central finite-difference gradients.

    The model must be built in float64. Relative error per parameter is
    |a - b| / max(|a|, |b|, 1e-3): the floor keeps near-zero gradients from
    amplifying finite-difference noise into a meaningless ratio.
    """
    if model.dtype != np.float64:
        raise ValueError("grad_check requires a float64 model")

    def loss_value():
        # Same function as the analytic pass (batch-norm in training mode),
        # just without recording; moving-stat side effects don't feed back
        # into the training-mode loss.
        _, lvar, _, n = _batch_loss(model, [sample], training=True, record=False)
        if n == 0:
            raise ValueError("grad-check sample has no valid points")
        return float(lvar.value)

    tp, lvar, pvars, n = _batch_loss(model, [sample], training=True)
    if n == 0:
        raise ValueError("grad-check sample has no valid points")
    tp.backward(lvar)
    grads = {k: v.grad for k, v in pvars.items()}

    names = model.trainable_names()
    sizes = np.array([model.params[n_].size for n_ in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0x7FFFFFFF, 9]))
    flat_choice = rng.choice(total, size=min(n_params, total), replace=False)

    worst = 0.0
    for flat in sorted(flat_choice.tolist()):
        li = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[li]
        idx = flat - offsets[li]
        arr = model.params[name]
        orig = arr.flat[idx]
        arr.flat[idx] = orig + epsilon
        lp = loss_value()
        arr.flat[idx] = orig - epsilon
        lm = loss_value()
        arr.flat[idx] = orig
        fd = (lp - lm) / (2.0 * epsilon)
        g = grads[name].flat[idx] if grads.get(name) is not None else 0.0
        rel = abs(fd - g) / max(abs(fd), abs(g), 1e-3)
        worst = max(worst, rel)
    return worst
