"""The pillar-grid scene flow network.

Stages: a per-point featurizer (input batch-norm + bias-free linear + ReLU),
a snap-to-grid scatter sum, a weight-shared convolutional encoder run on both
frames, a U-Net style decoder over the depth-concatenated frame embeddings
built from Upsample-Skip blocks (1x1 bottlenecks, bilinear 2x upsample,
concat, two 3x3 convs, no norm or nonlinearity), and an unpillar head that
gathers each current point's grid embedding, concatenates its point feature
and raw encoding, and regresses flow through two linear layers.

Layer names A..Z follow the architecture roster; parameter counts at
channel_scale 1.0 reproduce the published table exactly (batch norm accounts
4 parameters per channel: scale, offset, moving mean, moving variance; convs
carry no bias).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from ..errors import BadMagicError, ConfigError, TruncatedPayloadError, VersionMismatchError
from ..pillars import GridConfig, PillarAssignment, encode_points
from . import tape as T

CHECKPOINT_MAGIC = b"SFCK"
CHECKPOINT_VERSION = 1

ENCODING_DIM = 8


@dataclass(frozen=True)
class NetConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    channel_scale: float = 1.0
    bn_epsilon: float = 1e-3
    bn_momentum: float = 0.99
    background_weight: float = 0.1
    learning_rate: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 64
    epochs: int = 19
    loss_form: str = "euclidean-norm"
    init: str = "xavier-glorot"
    seed: int = 0
    compensate_input: bool = True

    def __post_init__(self):
        if self.channel_scale <= 0:
            raise ConfigError("channel_scale must be > 0")
        if self.grid.cells % 8 != 0:
            raise ConfigError("grid cells must be divisible by 8 (three stride-2 stages)")
        if self.loss_form not in ("euclidean-norm", "squared"):
            raise ConfigError(f"unknown loss_form {self.loss_form!r}")
        if self.init != "xavier-glorot":
            raise ConfigError("only xavier-glorot initialization is supported")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")


PRESETS = {
    "paper": NetConfig(),
    "small": NetConfig(grid=GridConfig(cells=128), channel_scale=0.5),
    "tiny": NetConfig(grid=GridConfig(extent=40.0, cells=64), channel_scale=0.25),
}


def preset(name: str, **overrides) -> NetConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r} (have {sorted(PRESETS)})") from None
    return replace(cfg, **overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# Architecture table


def _scaled(width: int, scale: float) -> int:
    return max(1, round(width * scale))


@dataclass(frozen=True)
class _Widths:
    a: int      # point feature depth (A, and snap-to-grid B)
    c1: int     # C..F
    c2: int     # G..L
    c3: int     # M..R
    s_d: int
    s_db: int
    t_d: int
    t_db: int
    u_d: int
    u_db: int
    v: int
    y: int

    @staticmethod
    def make(scale: float) -> "_Widths":
        s = lambda w: _scaled(w, scale)
        return _Widths(
            a=s(64), c1=s(64), c2=s(128), c3=s(256),
            s_d=s(128), s_db=s(128), t_d=s(128), t_db=s(64),
            u_d=s(64), u_db=s(64), v=s(64), y=s(32),
        )


# (name, stride, in_width attr, out_width attr) for the conv stack C..R
_CONV_STACK = [
    ("C", 2, "a", "c1"), ("D", 1, "c1", "c1"), ("E", 1, "c1", "c1"), ("F", 1, "c1", "c1"),
    ("G", 2, "c1", "c2"), ("H", 1, "c2", "c2"), ("I", 1, "c2", "c2"), ("J", 1, "c2", "c2"),
    ("K", 1, "c2", "c2"), ("L", 1, "c2", "c2"),
    ("M", 2, "c2", "c3"), ("N", 1, "c3", "c3"), ("O", 1, "c3", "c3"), ("P", 1, "c3", "c3"),
    ("Q", 1, "c3", "c3"), ("R", 1, "c3", "c3"),
]

CONV_LAYERS = tuple(name for name, *_ in _CONV_STACK)
UPSAMPLE_LAYERS = ("S", "T", "U", "V")
LAYERS = ("A", "B") + CONV_LAYERS + UPSAMPLE_LAYERS + ("W", "X", "Y", "Z")


class FlowNetModel:
    """Parameter store plus the forward graph. Parameters are keyed by
    layer name; moving batch-norm statistics live in the store (and count
    toward parameter totals) but are not trainable."""

    def __init__(self, cfg: NetConfig, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.widths = _Widths.make(cfg.channel_scale)
        self.params: dict[str, np.ndarray] = {}
        self._build_params()

    # -- parameter construction ------------------------------------------

    def _add_bn(self, layer: str, channels: int):
        self.params[f"{layer}/bn/gamma"] = np.ones(channels, dtype=self.dtype)
        self.params[f"{layer}/bn/beta"] = np.zeros(channels, dtype=self.dtype)
        self.params[f"{layer}/bn/mean"] = np.zeros(channels, dtype=self.dtype)
        self.params[f"{layer}/bn/var"] = np.ones(channels, dtype=self.dtype)

    def _build_params(self):
        w = self.widths
        rng = np.random.default_rng(np.random.SeedSequence([self.cfg.seed & 0x7FFFFFFF, 5]))

        def xavier(shape, fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=shape).astype(self.dtype)

        def conv_w(kh, kw, ci, co):
            return xavier((kh, kw, ci, co), kh * kw * ci, kh * kw * co)

        self._add_bn("A", ENCODING_DIM)
        self.params["A/w"] = xavier((ENCODING_DIM, w.a), ENCODING_DIM, w.a)
        for name, _stride, win, wout in _CONV_STACK:
            ci, co = getattr(w, win), getattr(w, wout)
            self.params[f"{name}/w"] = conv_w(3, 3, ci, co)
            self._add_bn(name, co)
        for name, a_in, b_in, d, db in self._upsample_specs():
            self.params[f"{name}/u1_w"] = conv_w(1, 1, a_in, db)
            self.params[f"{name}/u3_w"] = conv_w(1, 1, b_in, db)
            self.params[f"{name}/u5_w"] = conv_w(3, 3, 2 * db, d)
            self.params[f"{name}/u6_w"] = conv_w(3, 3, d, d)
        self.params["V/w"] = conv_w(3, 3, w.u_d, w.v)
        head_in = w.v + w.a + ENCODING_DIM
        self.params["Y/w"] = xavier((head_in, w.y), head_in, w.y)
        self.params["Y/b"] = np.zeros(w.y, dtype=self.dtype)
        self.params["Z/w"] = xavier((w.y, 3), w.y, 3)
        self.params["Z/b"] = np.zeros(3, dtype=self.dtype)

    def _upsample_specs(self):
        w = self.widths
        return [
            # (name, alpha depth, beta depth, d, d_bottleneck)
            ("S", 2 * w.c3, 2 * w.c2, w.s_d, w.s_db),
            ("T", w.s_d, 2 * w.c1, w.t_d, w.t_db),
            ("U", w.t_d, 2 * w.a, w.u_d, w.u_db),
        ]

    # -- accounting -------------------------------------------------------

    def layer_param_count(self, layer: str) -> int:
        prefix = layer + "/"
        return sum(int(p.size) for name, p in self.params.items() if name.startswith(prefix))

    def param_count(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def trainable_names(self) -> list[str]:
        return [n for n in sorted(self.params) if "/bn/mean" not in n and "/bn/var" not in n]

    def astype(self, dtype) -> "FlowNetModel":
        other = FlowNetModel.__new__(FlowNetModel)
        other.cfg = self.cfg
        other.dtype = np.dtype(dtype)
        other.widths = self.widths
        other.params = {k: v.astype(dtype) for k, v in self.params.items()}
        return other


def build(cfg: NetConfig, dtype=np.float32) -> FlowNetModel:
    return FlowNetModel(cfg, dtype)


def param_count_report(model: FlowNetModel) -> dict[str, int]:
    report = {layer: model.layer_param_count(layer) for layer in LAYERS}
    report["conv_total"] = sum(model.layer_param_count(n) for n in CONV_LAYERS)
    report["upsample_total"] = sum(model.layer_param_count(n) for n in UPSAMPLE_LAYERS)
    report["total"] = model.param_count()
    return report


# ---------------------------------------------------------------------------
# Batched encodings: both frames of every pair folded into one point stream
# (previous frames first, then current frames) so the shared encoder runs as
# a single batched call.


@dataclass
class BatchEncoding:
    n_pairs: int
    cells: int
    enc: np.ndarray             # (Ntot, 8) canonical order per frame
    starts: np.ndarray          # scatter run starts into enc rows
    unique_flat: np.ndarray     # flat cell ids over (2B, R, C)
    point_flat: np.ndarray      # per enc row: flat cell id
    curr_offset: int            # first row of the current-frame block
    gather_flat: np.ndarray     # (Mc,) flat ids over (B, R, C) for curr points
    curr_orig_idx: list         # per pair: original point indices (canonical order)
    curr_n_points: list         # per pair: total current points (incl. out of grid)


def batch_encode(pairs: list[tuple[PillarAssignment, PillarAssignment]]) -> BatchEncoding:
    if not pairs:
        raise ValueError("empty batch")
    cells = pairs[0][0].grid.cells
    grid_area = cells * cells
    b = len(pairs)

    enc_chunks, starts_chunks, unique_chunks, pflat_chunks = [], [], [], []
    row_offset = 0
    ordered = [a for a, _ in pairs] + [c for _, c in pairs]
    for slot, a in enumerate(ordered):
        if a.grid.cells != cells:
            raise ValueError("mixed grid sizes in one batch")
        enc_chunks.append(a.encoding[a.order])
        starts_chunks.append(a.starts + row_offset)
        unique_chunks.append(a.cells_unique + slot * grid_area)
        pflat_chunks.append(a.cell[a.order] + slot * grid_area)
        row_offset += a.n_assigned

    curr_offset = sum(a.n_assigned for a, _ in pairs)
    gather_chunks, curr_orig, curr_npts = [], [], []
    for pair_idx, (_, c) in enumerate(pairs):
        gather_chunks.append(c.cell[c.order] + pair_idx * grid_area)
        curr_orig.append(c.order)
        curr_npts.append(c.n_points)

    return BatchEncoding(
        n_pairs=b,
        cells=cells,
        enc=np.concatenate(enc_chunks) if enc_chunks else np.empty((0, ENCODING_DIM), np.float32),
        starts=np.concatenate(starts_chunks),
        unique_flat=np.concatenate(unique_chunks),
        point_flat=np.concatenate(pflat_chunks),
        curr_offset=curr_offset,
        gather_flat=np.concatenate(gather_chunks),
        curr_orig_idx=curr_orig,
        curr_n_points=curr_npts,
    )


# ---------------------------------------------------------------------------
# Forward graph


def _param_vars(model: FlowNetModel, tp: T.Tape) -> dict[str, T.Var]:
    return {name: T.Var(arr) for name, arr in model.params.items()}


def forward_graph(
    model: FlowNetModel,
    tp: T.Tape,
    batch: BatchEncoding,
    training: bool,
    pvars: dict[str, T.Var] | None = None,
    relu_preact_mins: list | None = None,
):
    """Build the graph; returns (pred Var (Mc, 3), pvars)."""
    cfg = model.cfg
    if batch.gather_flat.size == 0:
        raise ValueError("no in-grid current points in the batch")
    pv = pvars if pvars is not None else _param_vars(model, tp)

    def bn(name, x):
        return T.batch_norm(
            tp, x, pv[f"{name}/bn/gamma"], pv[f"{name}/bn/beta"],
            model.params[f"{name}/bn/mean"], model.params[f"{name}/bn/var"],
            training=training, momentum=cfg.bn_momentum, eps=cfg.bn_epsilon,
        )

    def track_relu(x):
        if relu_preact_mins is not None and x.value.size:
            relu_preact_mins.append(float(np.min(np.abs(x.value))))
        return T.relu(tp, x)

    enc = batch.enc.astype(model.dtype, copy=False)

    # A: featurize every point (input BN over the 8 encoding channels,
    # bias-free linear, ReLU); shared across frames.
    a_feat = track_relu(T.linear(tp, bn("A", enc), pv["A/w"]))

    # B: snap to grid.
    n_grids = 2 * batch.n_pairs
    h = T.scatter_sum(
        tp, a_feat, None, batch.starts, batch.unique_flat, batch.point_flat,
        (n_grids, batch.cells, batch.cells),
    )
    taps = {"B": h}
    for name, stride, _win, _wout in _CONV_STACK:
        h = track_relu(bn(name, T.conv2d(tp, h, pv[f"{name}/w"], stride)))
        if name in ("F", "L", "R"):
            taps[name] = h

    # Decoder consumes both frames' embeddings concatenated in depth.
    skips = {k: T.pair_depth_concat(tp, v) for k, v in taps.items()}

    def upsample_skip(name, alpha, beta):
        u1 = T.conv2d(tp, alpha, pv[f"{name}/u1_w"], 1)
        u2 = T.upsample2x(tp, u1)
        u3 = T.conv2d(tp, beta, pv[f"{name}/u3_w"], 1)
        u4 = T.concat(tp, [u2, u3])
        u5 = T.conv2d(tp, u4, pv[f"{name}/u5_w"], 1)
        return T.conv2d(tp, u5, pv[f"{name}/u6_w"], 1)

    s = upsample_skip("S", skips["R"], skips["L"])
    t = upsample_skip("T", s, skips["F"])
    u = upsample_skip("U", t, skips["B"])
    v = T.conv2d(tp, u, pv["V/w"], 1)

    # Unpillar: per current point, grid embedding + point feature + encoding.
    w_rows = T.gather_cells(tp, v, batch.gather_flat)
    curr_rows = np.arange(batch.curr_offset, batch.enc.shape[0])
    a_curr = T.take_rows(tp, a_feat, curr_rows)
    x = T.concat(tp, [w_rows, a_curr, enc[batch.curr_offset :]])
    y = T.linear(tp, x, pv["Y/w"], pv["Y/b"])
    pred = T.linear(tp, y, pv["Z/w"], pv["Z/b"])
    return pred, pv


def encode_frame_pair(model: FlowNetModel, prev_points: np.ndarray, curr_points: np.ndarray):
    """Pillar assignments for one (already co-registered) frame pair."""
    return encode_points(prev_points, model.cfg.grid), encode_points(curr_points, model.cfg.grid)


def forward(model: FlowNetModel, prev_points: np.ndarray, curr_points: np.ndarray):
    """Inference: flow (N, 3) for the current cloud plus a validity mask.

    prev_points must already be expressed in the current AV frame (or not,
    for the no-compensation ablation; the model sees whatever it is given).
    Out-of-grid current points are flagged invalid and left zero.
    """
    curr_points = np.asarray(curr_points)
    if curr_points.shape[0] == 0:
        raise ValueError("current point cloud is empty")
    pa, ca = encode_frame_pair(model, prev_points, curr_points)
    out = np.zeros((curr_points.shape[0], 3), dtype=model.dtype)
    if ca.n_assigned == 0:
        return out, np.zeros(curr_points.shape[0], dtype=bool)
    batch = batch_encode([(pa, ca)])
    tp = T.Tape(grad=False)
    pred, _ = forward_graph(model, tp, batch, training=False)
    out[batch.curr_orig_idx[0]] = pred.value
    return out, ca.mask.copy()


# ---------------------------------------------------------------------------
# Checkpoints (SFCK): config echo + per-layer float32 payloads, byte-stable.

_U16 = np.dtype("<u2")
_U32 = np.dtype("<u4")

_CONFIG_FIELDS = [
    ("grid.extent", float), ("grid.cells", int), ("grid.z_min", float), ("grid.z_max", float),
    ("channel_scale", float), ("bn_epsilon", float), ("bn_momentum", float),
    ("background_weight", float), ("learning_rate", float),
    ("adam_beta1", float), ("adam_beta2", float), ("adam_epsilon", float),
    ("batch_size", int), ("epochs", int), ("loss_form", str), ("init", str),
    ("seed", int), ("compensate_input", bool),
]


def net_config_to_text(cfg: NetConfig) -> str:
    values = {
        "grid.extent": cfg.grid.extent, "grid.cells": cfg.grid.cells,
        "grid.z_min": cfg.grid.z_min, "grid.z_max": cfg.grid.z_max,
        "channel_scale": cfg.channel_scale, "bn_epsilon": cfg.bn_epsilon,
        "bn_momentum": cfg.bn_momentum, "background_weight": cfg.background_weight,
        "learning_rate": cfg.learning_rate, "adam_beta1": cfg.adam_beta1,
        "adam_beta2": cfg.adam_beta2, "adam_epsilon": cfg.adam_epsilon,
        "batch_size": cfg.batch_size, "epochs": cfg.epochs, "loss_form": cfg.loss_form,
        "init": cfg.init, "seed": cfg.seed, "compensate_input": cfg.compensate_input,
    }
    lines = []
    for key, kind in _CONFIG_FIELDS:
        v = values[key]
        if kind is float:
            lines.append(f"{key} = {float(v)!r}")
        elif kind is bool:
            lines.append(f"{key} = {'true' if v else 'false'}")
        else:
            lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def net_config_from_items(items: dict[str, str], base: NetConfig | None = None) -> NetConfig:
    """Build a NetConfig from key/value strings; unknown keys are rejected.

    A `preset` key selects a base config; remaining keys override it.
    """
    items = dict(items)
    if base is None:
        base = preset(items.pop("preset", "paper"))
    known = {k: kind for k, kind in _CONFIG_FIELDS}
    grid_kwargs = {}
    kwargs = {}
    for key, raw in items.items():
        if key not in known:
            raise ConfigError(f"unknown net config key {key!r}")
        kind = known[key]
        try:
            if kind is bool:
                if raw.lower() not in ("true", "false", "0", "1"):
                    raise ValueError(f"expected boolean, got {raw!r}")
                val = raw.lower() in ("true", "1")
            else:
                val = kind(raw)
        except ValueError as e:
            raise ConfigError(f"{key}: {e}") from None
        if key.startswith("grid."):
            grid_kwargs[key.split(".", 1)[1]] = val
        else:
            kwargs[key] = val
    grid = base.grid
    if grid_kwargs:
        grid = GridConfig(
            extent=grid_kwargs.get("extent", grid.extent),
            cells=grid_kwargs.get("cells", grid.cells),
            z_min=grid_kwargs.get("z_min", grid.z_min),
            z_max=grid_kwargs.get("z_max", grid.z_max),
        )
    return replace(base, grid=grid, **kwargs)


def parse_net_config_text(text: str, base: NetConfig | None = None) -> NetConfig:
    items = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"net config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in items:
            raise ConfigError(f"net config line {lineno}: duplicate key {key!r}")
        items[key] = value
    return net_config_from_items(items, base)


def save_checkpoint(model: FlowNetModel, path) -> None:
    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += np.uint32(CHECKPOINT_VERSION).tobytes()
    cfg_bytes = net_config_to_text(model.cfg).encode("utf-8")
    out += np.uint32(len(cfg_bytes)).tobytes()
    out += cfg_bytes
    names = sorted(model.params)
    out += np.uint32(len(names)).tobytes()
    for name in names:
        arr = np.ascontiguousarray(model.params[name], dtype=np.float32)
        nb = name.encode("utf-8")
        out += np.uint16(len(nb)).tobytes()
        out += nb
        out += np.uint8(arr.ndim).tobytes()
        for dim in arr.shape:
            out += np.uint32(dim).tobytes()
        out += arr.tobytes()
    with open(path, "wb") as fh:
        fh.write(out)


def load_checkpoint(path) -> FlowNetModel:
    with open(path, "rb") as fh:
        buf = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(buf):
            raise TruncatedPayloadError("checkpoint ends mid-record")
        chunk = buf[off : off + n]
        off += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise BadMagicError("not a checkpoint file")
    version = int(np.frombuffer(take(4), _U32)[0])
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"unsupported checkpoint version {version}")
    cfg_len = int(np.frombuffer(take(4), _U32)[0])
    cfg = parse_net_config_text(take(cfg_len).decode("utf-8"))
    model = FlowNetModel(cfg)
    n_params = int(np.frombuffer(take(4), _U32)[0])
    seen = set()
    for _ in range(n_params):
        name_len = int(np.frombuffer(take(2), _U16)[0])
        name = take(name_len).decode("utf-8")
        ndim = int(np.frombuffer(take(1), np.uint8)[0])
        shape = tuple(int(np.frombuffer(take(4), _U32)[0]) for _ in range(ndim))
        data = np.frombuffer(take(4 * int(np.prod(shape, dtype=np.int64))), "<f4")
        if name not in model.params:
            raise TruncatedPayloadError(f"checkpoint has unexpected parameter {name!r}")
        if model.params[name].shape != shape:
            raise TruncatedPayloadError(
                f"checkpoint parameter {name!r} has shape {shape}, expected {model.params[name].shape}"
            )
        model.params[name] = data.reshape(shape).astype(np.float32)
        seen.add(name)
    if off != len(buf):
        raise TruncatedPayloadError("trailing bytes after checkpoint payload")
    if seen != set(model.params):
        raise TruncatedPayloadError("checkpoint is missing parameters")
    return model
