"""Command-line pipeline: generate | annotate | stats | train | eval | bench | export.

Every run is fully determined by (config, seed) and prints a resolved-config
echo; outputs are byte-identical across reruns and across --jobs settings
(bench's measured latencies excepted: wall-clock time is not reproducible).

Exit codes: 0 success, 2 config error, 3 I/O or file-format error, 4 numeric
failure (non-finite loss).
"""

from __future__ import annotations

import argparse
import sys
from importlib import resources

import numpy as np

from . import bench as bench_mod
from . import formats, pipeline, scene
from .annotate import AnnotationConfig, ablate_labels, annotate_frame, downsample_points, remove_ground
from .errors import ConfigError, FlowgridError, FormatError, NumericError
from .metrics import MetricsConfig, dataset_stats, report_to_csv, report_to_text, stats_to_csv
from .net import model as net_model
from .net import train as net_train
from .scene import CLASS_IDS

_BUILTIN_SPECS = ("static_world", "urban_mix")


def _echo(section: str, items: dict) -> None:
    print(f"resolved-config: {section}")
    for key in sorted(items):
        print(f"  {key} = {items[key]}")


def _read_kv(path) -> dict:
    items = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in items:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        items[key] = value
    return items


def _merge(config_items: dict, allowed: dict, flag_values: dict) -> dict:
    """Config file values overridden by explicitly passed flags."""
    for key in config_items:
        if key not in allowed:
            raise ConfigError(f"unknown config key {key!r}")
    out = {}
    for key, cast in allowed.items():
        if flag_values.get(key) is not None:
            out[key] = flag_values[key]
        elif key in config_items:
            raw = config_items[key]
            try:
                if cast is bool:
                    if raw.lower() not in ("true", "false", "0", "1"):
                        raise ValueError(f"expected boolean, got {raw!r}")
                    out[key] = raw.lower() in ("true", "1")
                else:
                    out[key] = cast(raw)
            except ValueError as e:
                raise ConfigError(f"{key}: {e}") from None
    return out


def _resolve_spec_path(name_or_path: str):
    if name_or_path in _BUILTIN_SPECS:
        return resources.files("flowgrid").joinpath("specs", f"{name_or_path}.cfg")
    return name_or_path


# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    path = _resolve_spec_path(args.config)
    try:
        text = path.read_text(encoding="utf-8") if hasattr(path, "read_text") else open(path).read()
    except OSError as e:
        raise ConfigError(f"cannot read scene spec: {e}") from None
    spec = scene.parse_scene_config(text)
    if args.seed is not None:
        from dataclasses import replace

        spec = replace(spec, seed=args.seed)
    _echo("generate", {"out": args.out, "spec_sha256": scene.spec_hash(spec), "seed": spec.seed})
    segment = scene.generate(spec)
    formats.write_segment(segment, args.out)
    print(f"wrote {args.out}: {len(segment.frames)} frames, "
          f"{sum(f.n_points for f in segment.frames)} points")
    return 0


_ANNOTATE_KEYS = {
    "compensate_ego": bool,
    "margin": float,
    "remove_ground": float,
    "ground_level": float,
    "downsample": float,
    "ablate": str,
    "seed": int,
    "jobs": int,
}


def _parse_ablate(spec_str: str):
    jobs = []
    for part in spec_str.split(","):
        part = part.strip()
        if not part:
            continue
        if ":" not in part:
            raise ConfigError(f"--ablate expects class:mode, got {part!r}")
        cls, mode = (s.strip() for s in part.split(":", 1))
        if cls not in CLASS_IDS or cls == "background":
            raise ConfigError(f"cannot ablate class {cls!r}")
        if mode not in ("stationary", "ignored"):
            raise ConfigError(f"unknown ablation mode {mode!r}")
        jobs.append((CLASS_IDS[cls], mode))
    return jobs


def cmd_annotate(args) -> int:
    config_items = _read_kv(args.config) if args.config else {}
    flags = {
        "compensate_ego": (False if args.no_ego_compensation else None),
        "margin": args.margin,
        "remove_ground": args.remove_ground,
        "ground_level": args.ground_level,
        "downsample": args.downsample,
        "ablate": ",".join(args.ablate) if args.ablate else None,
        "seed": args.seed,
        "jobs": args.jobs,
    }
    opt = _merge(config_items, _ANNOTATE_KEYS, flags)
    compensate = opt.get("compensate_ego", True)
    margin = opt.get("margin", 0.0)
    ground_z = opt.get("remove_ground")
    ground_level = opt.get("ground_level", 0.0)
    fraction = opt.get("downsample")
    ablations = _parse_ablate(opt.get("ablate", ""))
    seed = opt.get("seed", 0)
    jobs = opt.get("jobs", 1)

    modifies_points = ground_z is not None or fraction is not None
    if modifies_points and not args.out_segment:
        raise ConfigError(
            "--remove-ground/--downsample change the point list; pass --out-segment "
            "so labels stay row-aligned with a segment file"
        )

    segment = formats.read_segment(args.segment)
    frames = list(segment.frames)
    # Fixed processing order: ground removal -> downsample -> annotate -> ablate.
    if ground_z is not None:
        frames = [remove_ground(f, ground_z, ground_level)[0] for f in frames]
    if fraction is not None:
        frames = [
            downsample_points(f, fraction, (seed * 1_000_003 + i) & 0x7FFFFFFF)[0]
            for i, f in enumerate(frames)
        ]

    _echo("annotate", {
        "segment": args.segment, "out": args.out, "out_segment": args.out_segment,
        "compensate_ego": compensate, "margin": margin, "remove_ground": ground_z,
        "ground_level": ground_level, "downsample": fraction,
        "ablate": opt.get("ablate", ""), "seed": seed, "jobs": jobs,
    })

    acfg = AnnotationConfig(compensate_ego=compensate, box_margin=margin)
    from .annotate import annotate_segment

    anns = annotate_segment(frames, acfg, jobs=jobs)
    for class_id, mode in ablations:
        anns = [ablate_labels(a, {class_id}, mode) for a in anns]

    records = [(frames[0].timestamp_us, formats.placeholder_annotation(frames[0].n_points))]
    records += [(frames[i + 1].timestamp_us, ann) for i, ann in enumerate(anns)]
    formats.write_flow_labels(records, args.out)
    if args.out_segment:
        formats.write_segment(scene.RunSegment(tuple(frames)), args.out_segment)
    print(f"wrote {args.out}: {len(records)} frames")
    return 0


_STATS_KEYS = {"stat_threshold": float, "moving_threshold": float,
               "hist_bin_width": float, "hist_max_speed": float}


def cmd_stats(args) -> int:
    config_items = _read_kv(args.config) if args.config else {}
    opt = _merge(config_items, _STATS_KEYS, {})
    mcfg = MetricsConfig(
        moving_threshold=opt.get("moving_threshold", 0.5),
        stat_threshold=opt.get("stat_threshold", 0.1),
        hist_bin_width=opt.get("hist_bin_width", 0.25),
        hist_max_speed=opt.get("hist_max_speed", 20.0),
    )
    _echo("stats", {"labels": " ".join(args.labels), "out": args.out,
                    "stat_threshold": mcfg.stat_threshold})
    anns = []
    for path in args.labels:
        anns.extend(ann for _, ann in formats.read_flow_labels(path))
    stats = dataset_stats(anns, mcfg)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(stats_to_csv(stats))
    print(f"wrote {args.out}")
    return 0


def _load_datasets(data_args):
    datasets = []
    for entry in data_args:
        if "=" not in entry:
            raise ConfigError(f"--data expects SEGMENT.sfrs=LABELS.sffl, got {entry!r}")
        seg_path, lab_path = entry.split("=", 1)
        datasets.append((formats.read_segment(seg_path), formats.read_flow_labels(lab_path)))
    return datasets


def cmd_train(args) -> int:
    items = _read_kv(args.config)
    cfg = net_model.net_config_from_items(items)
    if args.seed is not None:
        from dataclasses import replace

        cfg = replace(cfg, seed=args.seed)
    _echo("train", {"config": args.config, "out": args.out, "data": " ".join(args.data),
                    **{k.strip(): v for k, v in
                       (line.split("=") for line in net_model.net_config_to_text(cfg).strip().splitlines())}})
    datasets = _load_datasets(args.data)
    samples = pipeline.build_train_samples(datasets, cfg)
    model = net_model.build(cfg)
    trace = net_train.train(model, samples, log=lambda e, l: print(f"epoch {e}: mean loss {l:.6f}"))
    net_model.save_checkpoint(model, args.out)
    print(f"wrote {args.out} ({model.param_count()} parameters, {len(trace)} epochs)")
    return 0


_EVAL_KEYS = {"moving_threshold": float, "stat_threshold": float, "error_thresholds": str}


def cmd_eval(args) -> int:
    config_items = _read_kv(args.config) if args.config else {}
    opt = _merge(config_items, _EVAL_KEYS, {})
    thresholds = tuple(
        float(t) for t in opt.get("error_thresholds", "0.1,1.0").split(",") if t.strip()
    )
    mcfg = MetricsConfig(
        moving_threshold=opt.get("moving_threshold", 0.5),
        stat_threshold=opt.get("stat_threshold", 0.1),
        error_thresholds=thresholds,
    )
    model = net_model.load_checkpoint(args.checkpoint)
    _echo("eval", {"checkpoint": args.checkpoint, "out": args.out,
                   "data": " ".join(args.data), "jobs": args.jobs or 1,
                   "compensate_input": model.cfg.compensate_input,
                   "moving_threshold": mcfg.moving_threshold})
    datasets = _load_datasets(args.data)
    report = pipeline.evaluate_model(model, datasets, mcfg, jobs=args.jobs or 1)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(report_to_csv(report))
    if args.summary:
        with open(args.summary, "w", encoding="utf-8") as fh:
            fh.write(report_to_text(report))
    print(f"wrote {args.out}")
    return 0


_BENCH_KEYS = {"sizes": str, "warmup": int, "iters": int, "seed": int}


def cmd_bench(args) -> int:
    config_items = _read_kv(args.config) if args.config else {}
    flags = {"sizes": args.sizes, "warmup": args.warmup, "iters": args.iters, "seed": args.seed}
    opt = _merge(config_items, _BENCH_KEYS, flags)
    sizes = [int(s) for s in str(opt.get("sizes", "32000,100000,255000,1000000")).split(",")]
    warmup = opt.get("warmup", 10)
    iters = opt.get("iters", 90)
    seed = opt.get("seed", 0)
    if args.checkpoint:
        model = net_model.load_checkpoint(args.checkpoint)
        source = args.checkpoint
    else:
        model = net_model.build(net_model.preset(args.preset or "small"))
        source = f"preset:{args.preset or 'small'}"
    _echo("bench", {"model": source, "sizes": ",".join(map(str, sizes)),
                    "warmup": warmup, "iters": iters, "seed": seed, "out": args.out})
    result = bench_mod.run_latency(model, sizes, warmup=warmup, iters=iters, seed=seed)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(bench_mod.to_csv(result))
    if args.svg:
        with open(args.svg, "w", encoding="utf-8") as fh:
            fh.write(bench_mod.to_svg(result))
    if len(sizes) > 1:
        summary = bench_mod.scaling_summary(result)
        print(f"latency ratio {summary['ratio']:.2f}, "
              f"marginal cost {summary['slope_ns_per_point']:.1f} ns/point")
    print(f"wrote {args.out}")
    return 0


def cmd_export(args) -> int:
    _echo("export", {"labels": args.labels, "out": args.out})
    records = formats.read_flow_labels(args.labels)
    formats.write_flow_export(records, args.out)
    print(f"wrote {args.out}: {len(records)} frames")
    return 0


# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowgrid",
        description="Pillar-grid scene flow pipeline on synthetic run segments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a scene spec into an SFRS segment")
    p.add_argument("--config", required=True,
                   help=f"scene spec path or builtin name {_BUILTIN_SPECS}")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("annotate", help="bootstrap flow labels from tracked boxes")
    p.add_argument("--segment", required=True)
    p.add_argument("--out", required=True, help="SFFL output path")
    p.add_argument("--out-segment", default=None,
                   help="write the transformed segment (required with point-modifying flags)")
    p.add_argument("--no-ego-compensation", action="store_true")
    p.add_argument("--ablate", action="append", default=None, metavar="CLASS:MODE",
                   help="stationary|ignored; repeatable")
    p.add_argument("--remove-ground", type=float, default=None, metavar="Z")
    p.add_argument("--ground-level", type=float, default=None, metavar="Z")
    p.add_argument("--downsample", type=float, default=None, metavar="FRACTION")
    p.add_argument("--margin", type=float, default=None, help="box membership margin (m)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("stats", help="dataset statistics from flow labels")
    p.add_argument("--labels", action="append", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train the flow network")
    p.add_argument("--config", required=True, help="net/training config file")
    p.add_argument("--data", action="append", required=True, metavar="SEG=LAB")
    p.add_argument("--out", required=True, help="SFCK checkpoint path")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", action="append", required=True, metavar="SEG=LAB")
    p.add_argument("--out", required=True, help="metrics CSV path")
    p.add_argument("--summary", default=None, help="plain-text table path")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="latency scaling over point-cloud size")
    p.add_argument("--preset", choices=sorted(net_model.PRESETS), default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--sizes", default=None, help="comma-separated point counts")
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--svg", default=None, help="optional SVG plot path")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export", help="re-emit labels as (vx, vy, vz, class) quadruples")
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except FlowgridError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
