"""Minimal reverse-mode gradient tape over the fixed op set the network needs.

Ops: linear, batch-norm, conv2d (3x3/1x1, stride 1/2, SAME), relu, bilinear
2x upsample, concat (plus the two-frame depth concat), scatter-sum, gather,
row selection, and the weighted flow-loss reduction.

Inputs may be Vars (tracked) or plain ndarrays (constants); gradients are
accumulated only into Vars. A Tape built with grad=False records nothing and
serves as the inference mode: forward math is identical, closures are
dropped so large intermediates are freed eagerly.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Var:
    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value)
        self.grad = None

    @property
    def shape(self):
        return self.value.shape


class Tape:
    def __init__(self, grad: bool = True):
        self.grad_enabled = grad
        self._steps: list[tuple[Var, object]] = []

    def record(self, out: Var, backward) -> Var:
        if self.grad_enabled:
            self._steps.append((out, backward))
        return out

    def backward(self, loss: Var) -> None:
        """Propagate d(loss)/d(var) into every Var touched by the forward."""
        if not self.grad_enabled:
            raise RuntimeError("tape was built with grad=False")
        loss.grad = np.ones_like(loss.value)
        for out, fn in reversed(self._steps):
            if out.grad is not None:
                fn(out.grad)
        self._steps.clear()


def _val(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else x


def _acc(x, g) -> None:
    if isinstance(x, Var):
        x.grad = g if x.grad is None else x.grad + g


# ---------------------------------------------------------------------------


def linear(tape: Tape, x, w, b=None) -> Var:
    xv, wv = _val(x), _val(w)
    y = xv @ wv
    if b is not None:
        y = y + _val(b)
    out = Var(y)

    def backward(g):
        _acc(x, g @ wv.T)
        _acc(w, xv.T @ g)
        if b is not None:
            _acc(b, g.sum(axis=0))

    return tape.record(out, backward)


def relu(tape: Tape, x) -> Var:
    xv = _val(x)
    mask = xv > 0
    out = Var(np.where(mask, xv, xv.dtype.type(0)))

    def backward(g):
        _acc(x, g * mask)

    return tape.record(out, backward)


def concat(tape: Tape, xs, axis: int = -1) -> Var:
    vals = [_val(x) for x in xs]
    out = Var(np.concatenate(vals, axis=axis))
    sizes = [v.shape[axis] for v in vals]

    def backward(g):
        offset = 0
        for x, size in zip(xs, sizes):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(offset, offset + size)
            _acc(x, g[tuple(idx)])
            offset += size

    return tape.record(out, backward)


def pair_depth_concat(tape: Tape, x) -> Var:
    """(2B, H, W, C) -> (B, H, W, 2C): pair i is (frame i, frame B+i)."""
    xv = _val(x)
    b2 = xv.shape[0]
    if b2 % 2:
        raise ValueError("batch must hold an even number of frame grids")
    b = b2 // 2
    out = Var(np.concatenate([xv[:b], xv[b:]], axis=-1))
    c = xv.shape[-1]

    def backward(g):
        _acc(x, np.concatenate([g[..., :c], g[..., c:]], axis=0))

    return tape.record(out, backward)


# ---------------------------------------------------------------------------
# Batch norm (normalizes over all axes but the last)


def batch_norm(tape, x, gamma, beta, moving_mean, moving_var, *, training, momentum, eps) -> Var:
    xv = _val(x)
    axes = tuple(range(xv.ndim - 1))
    if training:
        mean = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        # Side effect: moving statistics track the batch statistics. They are
        # plain arrays owned by the model, never differentiated through.
        moving_mean *= momentum
        moving_mean += (1.0 - momentum) * mean
        moving_var *= momentum
        moving_var += (1.0 - momentum) * var
    else:
        mean = moving_mean.astype(xv.dtype)
        var = moving_var.astype(xv.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mean) * inv_std
    out = Var(xhat * _val(gamma) + _val(beta))
    n = int(np.prod([xv.shape[a] for a in axes])) if axes else 1

    def backward(g):
        _acc(beta, g.sum(axis=axes))
        _acc(gamma, (g * xhat).sum(axis=axes))
        if isinstance(x, Var):
            gv = _val(gamma)
            if training:
                dxhat = g * gv
                mean_dxhat = dxhat.mean(axis=axes)
                mean_dxhat_xhat = (dxhat * xhat).mean(axis=axes)
                _acc(x, inv_std * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat))
            else:
                _acc(x, g * (gv * inv_std))

    return tape.record(out, backward)


# ---------------------------------------------------------------------------
# Convolution: NHWC input, (kh, kw, Cin, Cout) kernel, SAME padding


def _same_pad(size: int, k: int, stride: int):
    out = -(-size // stride)
    pad = max((out - 1) * stride + k - size, 0)
    return out, pad // 2, pad - pad // 2


def conv2d(tape: Tape, x, w, stride: int = 1) -> Var:
    xv, wv = _val(x), _val(w)
    b, h, wd, ci = xv.shape
    kh, kw, ci2, co = wv.shape
    if ci != ci2:
        raise ValueError(f"conv input depth {ci} does not match kernel {ci2}")
    ho, pt, pb = _same_pad(h, kh, stride)
    wo, pl, pr = _same_pad(wd, kw, stride)
    xp = np.pad(xv, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # (B, Ho, Wo, Ci, kh, kw) -> (B*Ho*Wo, kh*kw*Ci)
    patches = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
        b * ho * wo, kh * kw * ci
    )
    w2 = wv.reshape(kh * kw * ci, co)
    out = Var((patches @ w2).reshape(b, ho, wo, co))

    def backward(g):
        g2 = g.reshape(b * ho * wo, co)
        _acc(w, (patches.T @ g2).reshape(wv.shape))
        if isinstance(x, Var):
            dpatch = (g2 @ w2.T).reshape(b, ho, wo, kh, kw, ci)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, i : i + (ho - 1) * stride + 1 : stride,
                        j : j + (wo - 1) * stride + 1 : stride] += dpatch[:, :, :, i, j]
            _acc(x, dxp[:, pt : pt + h, pl : pl + wd])

    return tape.record(out, backward)


# ---------------------------------------------------------------------------
# Bilinear 2x upsampling (half-pixel alignment), as dense per-axis matrices

_interp_cache: dict = {}


def _interp_matrix(n_in: int, dtype) -> np.ndarray:
    key = (n_in, np.dtype(dtype).str)
    m = _interp_cache.get(key)
    if m is None:
        n_out = 2 * n_in
        src = (np.arange(n_out) + 0.5) / 2.0 - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        i0 = np.floor(src).astype(np.int64)
        i1 = np.minimum(i0 + 1, n_in - 1)
        w1 = src - i0
        m = np.zeros((n_out, n_in))
        np.add.at(m, (np.arange(n_out), i0), 1.0 - w1)
        np.add.at(m, (np.arange(n_out), i1), w1)
        m = m.astype(dtype)
        _interp_cache[key] = m
    return m


def upsample2x(tape: Tape, x) -> Var:
    xv = _val(x)
    mh = _interp_matrix(xv.shape[1], xv.dtype)
    mw = _interp_matrix(xv.shape[2], xv.dtype)
    y = np.einsum("oh,bhwc->bowc", mh, xv, optimize=True)
    y = np.einsum("ow,bhwc->bhoc", mw, y, optimize=True)
    out = Var(y)

    def backward(g):
        if isinstance(x, Var):
            dx = np.einsum("ow,bhoc->bhwc", mw, g, optimize=True)
            dx = np.einsum("oh,bowc->bhwc", mh, dx, optimize=True)
            _acc(x, dx)

    return tape.record(out, backward)


# ---------------------------------------------------------------------------
# Point <-> grid movement


def scatter_sum(tape: Tape, feats, order, starts, unique_flat, point_flat, grid_shape) -> Var:
    """Sum point features (N, D) into flattened grids; canonical order.

    order/starts/unique_flat come from the pillar assignment (composed with
    batch offsets); order None means rows are already canonical. point_flat
    holds each row's flat cell id (-1 where unassigned) and drives the
    backward gather.
    """
    fv = _val(feats)
    d = fv.shape[1]
    flat = np.zeros((int(np.prod(grid_shape)), d), dtype=fv.dtype)
    rows = fv if order is None else fv[order]
    if starts.size:
        flat[unique_flat] = np.add.reduceat(rows, starts, axis=0)
    out = Var(flat.reshape(*grid_shape, d))

    def backward(g):
        if isinstance(feats, Var):
            gf = g.reshape(-1, d)
            df = np.zeros_like(fv)
            assigned = point_flat >= 0
            df[assigned] = gf[point_flat[assigned]]
            _acc(feats, df)

    return tape.record(out, backward)


def gather_cells(tape: Tape, grid, flat_ids) -> Var:
    """Rows (M, D) from flattened grids at flat cell ids."""
    gv = _val(grid)
    d = gv.shape[-1]
    flat = gv.reshape(-1, d)
    out = Var(flat[flat_ids])

    def backward(g):
        if isinstance(grid, Var):
            dflat = np.zeros_like(flat)
            np.add.at(dflat, flat_ids, g)
            _acc(grid, dflat.reshape(gv.shape))

    return tape.record(out, backward)


def take_rows(tape: Tape, x, idx) -> Var:
    xv = _val(x)
    out = Var(xv[idx])

    def backward(g):
        if isinstance(x, Var):
            dx = np.zeros_like(xv)
            dx[idx] = g
            _acc(x, dx)

    return tape.record(out, backward)


# ---------------------------------------------------------------------------
# Loss reduction: mean over points of w_i * e_i, where e_i is the L2 error
# norm (or its square). The mean divides by the point count, not sum(w).


def flow_loss(tape: Tape, pred, target, weights, form: str = "euclidean-norm") -> Var:
    pv = _val(pred)
    n = pv.shape[0]
    if n == 0:
        raise ValueError("flow loss needs at least one contributing point")
    diff = pv - target
    if form == "euclidean-norm":
        e = np.linalg.norm(diff, axis=1)
        out = Var(np.asarray((weights * e).sum() / n, dtype=pv.dtype))

        def backward(g):
            if isinstance(pred, Var):
                safe = np.where(e > 0, e, 1.0)
                scale = np.where(e > 0, weights / (n * safe), 0.0)
                _acc(pred, g * diff * scale[:, None])

    elif form == "squared":
        e2 = (diff * diff).sum(axis=1)
        out = Var(np.asarray((weights * e2).sum() / n, dtype=pv.dtype))

        def backward(g):
            if isinstance(pred, Var):
                _acc(pred, g * diff * (2.0 * weights / n)[:, None])

    else:
        raise ValueError(f"unknown loss form {form!r}")
    return tape.record(out, backward)
