"""Command-line front end.

Exit codes: 0 success, 1 configuration/input error, 2 runtime or detector error.
Rotation ranges, steps and radii are given in degrees; shifting in meters.
"""

import sys
import json
import math
import time
import shlex
import logging
import argparse
from pathlib import Path
from typing import Optional, Sequence

from pydantic import ValidationError

from fusioncert.certify import certify_detection, certify_iou, empirical_attack, vanilla_value
from fusioncert.config import RunConfig, env_log_level
from fusioncert.defaults import (
    DENSE_CELL_COUNT,
    MODALITIES,
    PARTITION_BIG_INTERVAL_DEG,
    PARTITION_BIG_INTERVAL_SHIFT,
    PARTITION_SIZES_DEG,
    PARTITION_SIZES_SHIFT,
    ROTATION_CELL_WIDTH,
    ROTATION_RADII_DEG,
    ROTATION_RANGE_DEG,
    SHIFTING_CELL_WIDTH,
    SHIFTING_RADII,
    SHIFTING_RANGE,
    SIGMA_BY_KIND,
)
from fusioncert.detector import BuiltinDetector, close_detector, open_detector
from fusioncert.errors import DetectorError, FusionCertError, InputError, SamplingError, SceneFormatError
from fusioncert.report import ReportRow, fmt, metric_name, metric_threshold, write_report
from fusioncert.scene import Scene, SceneSpec, generate, load, save, scene_id
from fusioncert.transforms import ParamSpace, TransformKind, cells_for_width, check_partition, split

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(FusionCertError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run config; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--threads", type=int)
    p.add_argument("--log-level", default=None)
    p.add_argument("--quiet", action="store_true")


def _add_run(p: argparse.ArgumentParser) -> None:
    _add_common(p)
    p.add_argument("--scene")
    p.add_argument("--transform", choices=[k.value for k in TransformKind])
    p.add_argument("--range", dest="ranges", help="lo:hi, or lo:hi,lo:hi for rotation_shifting")
    p.add_argument("--grid", help="cell count per axis, comma separated")
    p.add_argument("--anchor", choices=["lower", "random"])
    p.add_argument("--samples", type=int)
    p.add_argument("--sigma-x", type=float)
    p.add_argument("--sigma-p", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--detector-cmd", help="external detector command line")
    p.add_argument("--timeout", type=float)
    p.add_argument("--pool-size", type=int)
    p.add_argument("--timing", action="store_true", default=None)
    p.add_argument("--modality", choices=list(MODALITIES), help="builtin detector inputs")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fusioncert", description="Certify multi-modal detectors under rotation and shifting.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    gen = sub.add_parser("gen-scene", help="write a synthetic scene")
    _add_common(gen)
    gen.add_argument("--vehicle-points", type=int)
    gen.add_argument("--background-points", type=int)
    gen.add_argument("--clutter", type=int)
    gen.add_argument("--x", type=float)
    gen.add_argument("--z", type=float)
    gen.add_argument("--heading", type=float, help="vehicle heading in degrees")

    det = sub.add_parser("certify-detection", help="certify smoothed detection confidence")
    _add_run(det)
    det.add_argument("--eta", type=float, nargs="+")
    det.add_argument("--attack-step", type=float)
    det.add_argument("--vanilla", action="store_true", default=None, help="also attack without smoothing")

    iou = sub.add_parser("certify-iou", help="certify smoothed box IoU")
    _add_run(iou)
    iou.add_argument("--iou-threshold", type=float, nargs="+")
    iou.add_argument("--attack-step", type=float)
    iou.add_argument("--vanilla", action="store_true", default=None, help="also attack without smoothing")

    attack = sub.add_parser("attack", help="worst smoothed value on a parameter sweep")
    _add_run(attack)
    attack.add_argument("--step", dest="attack_step", type=float)
    attack.add_argument("--metric", choices=["confidence", "iou"], default="confidence")
    attack.add_argument("--vanilla", action="store_true", default=None, help="also attack without smoothing")
    attack.add_argument("--eta", type=float, nargs="+")
    attack.add_argument("--iou-threshold", type=float, nargs="+")

    check = sub.add_parser("check-partition", help="empirical check of endpoint distance bounds")
    _add_run(check)
    check.add_argument("--sizes", type=float, nargs="+")
    check.add_argument("--tau", type=float)
    check.add_argument("--pairs", type=int, default=100)
    check.add_argument("--intervals", type=int, default=10)

    bench = sub.add_parser("benchmark", help="certify over several radii and scenes")
    _add_run(bench)
    bench.add_argument("--scenes", nargs="+")
    bench.add_argument("--radii", type=float, nargs="+")
    bench.add_argument("--strategy", choices=["sparse", "dense"])
    bench.add_argument("--modalities", nargs="+", choices=list(MODALITIES))
    bench.add_argument("--metric", choices=["detection", "iou", "both"], default="detection")
    bench.add_argument("--eta", type=float, nargs="+")
    bench.add_argument("--iou-threshold", type=float, nargs="+")
    bench.add_argument("--attack-step", type=float)
    bench.add_argument("--vanilla", action="store_true", default=None, help="also attack without smoothing")
    return parser


def _join_negative_values(argv: Sequence[str]) -> list[str]:
    """Let ``--range -30:30`` through argparse, which reads '-30:30' as a flag."""
    out, it = [], iter(argv)
    for token in it:
        if token == "--range":
            value = next(it, None)
            out.append(token if value is None else f"--range={value}")
        else:
            out.append(token)
    return out


def _parse_ranges(text: str) -> list[tuple[float, float]]:
    ranges = []
    for part in text.split(","):
        lo, sep, hi = part.partition(":")
        if not sep:
            raise InputError(f"range: expected lo:hi, got {part!r}")
        try:
            ranges.append((float(lo), float(hi)))
        except ValueError:
            raise InputError(f"range: expected numbers, got {part!r}") from None
    return ranges


def _parse_counts(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise InputError(f"grid: expected integers, got {text!r}") from None


def build_config(args: argparse.Namespace) -> RunConfig:
    data = {}
    if getattr(args, "config", None):
        try:
            data.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise InputError(f"config: invalid JSON at line {exc.lineno}, column {exc.colno}") from exc
    flags = {
        "scene": getattr(args, "scene", None),
        "transform": getattr(args, "transform", None),
        "ranges": _parse_ranges(args.ranges) if getattr(args, "ranges", None) else None,
        "grid": _parse_counts(args.grid) if getattr(args, "grid", None) else None,
        "anchor": getattr(args, "anchor", None),
        "samples": getattr(args, "samples", None),
        "sigma_x": getattr(args, "sigma_x", None),
        "sigma_p": getattr(args, "sigma_p", None),
        "alpha": getattr(args, "alpha", None),
        "seed": getattr(args, "seed", None),
        "eta": getattr(args, "eta", None),
        "iou_threshold": getattr(args, "iou_threshold", None),
        "radii": getattr(args, "radii", None),
        "strategy": getattr(args, "strategy", None),
        "attack_step": getattr(args, "attack_step", None),
        "vanilla": getattr(args, "vanilla", None),
        "modalities": getattr(args, "modalities", None),
        "out": getattr(args, "out", None),
        "threads": getattr(args, "threads", None),
        "timing": getattr(args, "timing", None),
    }
    data.update({k: v for k, v in flags.items() if v is not None})

    detector = dict(data.get("detector") or {})
    if getattr(args, "detector_cmd", None):
        detector.update(kind="external", command=shlex.split(args.detector_cmd))
    if getattr(args, "timeout", None) is not None:
        detector["timeout"] = args.timeout
    if getattr(args, "pool_size", None) is not None:
        detector["pool_size"] = args.pool_size
    if detector:
        data["detector"] = detector
    if getattr(args, "modality", None):
        data["builtin"] = {**(data.get("builtin") or {}), "modality": args.modality}
    return RunConfig.model_validate(data)


def _to_internal(kind: TransformKind, ranges: Sequence[tuple[float, float]]) -> ParamSpace:
    dims = []
    for axis, (lo, hi) in enumerate(ranges):
        if kind is TransformKind.ROTATION or (kind is TransformKind.ROTATION_SHIFTING and axis == 0):
            dims.append((math.radians(lo), math.radians(hi)))
        else:
            dims.append((lo, hi))
    return ParamSpace(tuple(dims))


def _default_ranges(kind: TransformKind) -> list[tuple[float, float]]:
    if kind is TransformKind.ROTATION:
        return [ROTATION_RANGE_DEG]
    if kind is TransformKind.SHIFTING:
        return [SHIFTING_RANGE]
    return [ROTATION_RANGE_DEG, SHIFTING_RANGE]


def _cell_widths(kind: TransformKind) -> tuple[float, ...]:
    if kind is TransformKind.ROTATION:
        return (ROTATION_CELL_WIDTH,)
    if kind is TransformKind.SHIFTING:
        return (SHIFTING_CELL_WIDTH,)
    return (ROTATION_CELL_WIDTH, SHIFTING_CELL_WIDTH)


def internal_steps(kind: TransformKind, step: float) -> tuple[float, ...]:
    if kind is TransformKind.ROTATION:
        return (math.radians(step),)
    if kind is TransformKind.SHIFTING:
        return (step,)
    return (math.radians(step), step)


def radius_label(ranges: Sequence[tuple[float, float]]) -> str:
    return "/".join(fmt(max(abs(lo), abs(hi))) for lo, hi in ranges)


def space_and_grid(cfg: RunConfig, kind: TransformKind, ranges=None, strategy: Optional[str] = None):
    ranges = ranges or cfg.ranges or _default_ranges(kind)
    if len(ranges) != kind.dims:
        raise InputError(f"ranges: {kind.value} needs {kind.dims} range(s), got {len(ranges)}")
    space = _to_internal(kind, ranges)
    if cfg.grid and strategy is None:
        counts = cfg.grid
    elif strategy == "dense":
        counts = (DENSE_CELL_COUNT,) * kind.dims
    else:
        counts = cells_for_width(space, _cell_widths(kind))
    return ranges, space, split(space, counts, anchor=cfg.anchor, seed=cfg.seed)


def _require_scene(cfg: RunConfig) -> str:
    if not cfg.scene:
        raise InputError("scene: required")
    return cfg.scene


def _emit(rows: list[ReportRow], cfg: RunConfig) -> None:
    if cfg.out:
        write_report(rows, cfg.out)
    else:
        header = ",".join(rows[0].as_dict().keys())
        print(header)
        for row in rows:
            print(",".join(row.cells_text()))


class _Clock:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.start = time.perf_counter()

    def elapsed(self) -> float:
        return time.perf_counter() - self.start if self.enabled else 0.0


def certify_rows(cfg: RunConfig, scene: Scene, name: str, detector, metric_kind: str, quiet: bool = True,
                 ranges=None, strategy: Optional[str] = None, modality: Optional[str] = None) -> list[ReportRow]:
    """Certify one scene (and optionally attack it); one row per threshold.

    With ``cfg.vanilla`` the attack is repeated without smoothing and each
    threshold gets a second, uncertified ``Vanilla`` row.
    """
    kind = TransformKind.parse(cfg.transform)
    if cfg.vanilla and cfg.attack_step is None:
        raise InputError("vanilla: needs an attack step")
    ranges, space, grid = space_and_grid(cfg, kind, ranges, strategy)
    smoothing = cfg.smoothing(SIGMA_BY_KIND[kind.value])
    clock = _Clock(cfg.timing)
    radius = radius_label(ranges)
    attack_metric = "confidence" if metric_kind == "detection" else "iou"

    if metric_kind == "detection":
        cert = certify_detection(detector, scene, kind, grid, smoothing, cfg.eta[0], cfg.threads, not quiet)
        certified, clean, thresholds = cert.certified_lo, cert.median_clean, cfg.eta
    else:
        cert = certify_iou(detector, scene, kind, grid, smoothing, None, cfg.threads, not quiet)
        certified, clean, thresholds = cert.certified_iou, cert.clean_iou, cfg.iou_threshold
    empirical = None
    if cfg.attack_step is not None:
        attack = empirical_attack(
            detector, scene, kind, space, internal_steps(kind, cfg.attack_step), smoothing,
            attack_metric, None, cfg.threads, not quiet,
        )
        empirical = attack.worst_value
    runtime = clock.elapsed()
    rows = [
        ReportRow(name, kind.value, radius, metric_name(metric_kind, t, modality=modality), certified, empirical,
                  clean, runtime, len(grid), smoothing.n, smoothing.alpha)
        for t in thresholds
    ]
    if cfg.vanilla:
        clock = _Clock(cfg.timing)
        attack = empirical_attack(detector, scene, kind, space, internal_steps(kind, cfg.attack_step), smoothing,
                                  attack_metric, None, cfg.threads, not quiet, smoothed=False)
        clean = vanilla_value(detector, scene, attack_metric)
        rows.extend(vanilla_rows(name, kind, radius, metric_kind, thresholds, attack, clean, clock.elapsed(),
                                 modality))
    return rows


def vanilla_rows(name: str, kind: TransformKind, radius: str, metric_kind: str, thresholds, attack,
                 clean: Optional[float], runtime: float, modality: Optional[str] = None) -> list[ReportRow]:
    """Uncertified rows for an unsmoothed attack: one detector call per parameter, no failure budget."""
    return [
        ReportRow(name, kind.value, radius, metric_name(metric_kind, t, vanilla=True, modality=modality), None,
                  attack.worst_value, clean, runtime, len(attack.params), 1, 0.0)
        for t in thresholds
    ]


def _cmd_gen_scene(args, cfg: RunConfig) -> int:
    if not cfg.out:
        raise InputError("out: required")
    fields = {"seed": cfg.seed}
    for flag, key in (("vehicle_points", "vehicle_points"), ("background_points", "background_points"),
                      ("clutter", "clutter_objects"), ("x", "x"), ("z", "z")):
        value = getattr(args, flag, None)
        if value is not None:
            fields[key] = value
    if args.heading is not None:
        fields["r"] = math.radians(args.heading)
    scene = generate(SceneSpec(**fields))
    save(scene, cfg.out)
    logger.info("wrote scene %s (%d points)", cfg.out, scene.points.shape[0])
    return EXIT_OK


def modality_label(cfg: RunConfig) -> Optional[str]:
    """Builtin modality for the metric label; None for fusion and external detectors."""
    if cfg.detector.kind == "builtin" and cfg.builtin.modality != "fusion":
        return cfg.builtin.modality
    return None


def _cmd_attack(args, cfg: RunConfig, detector, quiet: bool) -> int:
    scene_path = _require_scene(cfg)
    if cfg.attack_step is None:
        raise InputError("step: required")
    kind = TransformKind.parse(cfg.transform)
    scene = load(scene_path)
    ranges, space, _ = space_and_grid(cfg, kind)
    smoothing = cfg.smoothing(SIGMA_BY_KIND[kind.value])
    modality = modality_label(cfg)
    metric_kind = "detection" if args.metric == "confidence" else "iou"
    thresholds = cfg.eta if metric_kind == "detection" else cfg.iou_threshold
    name, radius = scene_id(scene_path), radius_label(ranges)
    steps = internal_steps(kind, cfg.attack_step)

    clock = _Clock(cfg.timing)
    result = empirical_attack(detector, scene, kind, space, steps, smoothing, args.metric, None, cfg.threads, not quiet)
    rows = [
        ReportRow(name, kind.value, radius, metric_name(metric_kind, t, modality=modality),
                  None, result.worst_value, None, clock.elapsed(), len(result.params), smoothing.n, smoothing.alpha)
        for t in thresholds
    ]
    if cfg.vanilla:
        clock = _Clock(cfg.timing)
        result = empirical_attack(detector, scene, kind, space, steps, smoothing, args.metric, None, cfg.threads,
                                  not quiet, smoothed=False)
        clean = vanilla_value(detector, scene, args.metric)
        rows.extend(vanilla_rows(name, kind, radius, metric_kind, thresholds, result, clean, clock.elapsed(),
                                 modality))
    _emit(rows, cfg)
    return EXIT_OK


def _cmd_check_partition(args, cfg: RunConfig) -> int:
    kind = TransformKind.parse(cfg.transform)
    if kind is TransformKind.ROTATION_SHIFTING:
        raise InputError("transform: check-partition takes a one-dimensional transform")
    scene = load(_require_scene(cfg))
    ranges = cfg.ranges or _default_ranges(kind)
    space = _to_internal(kind, ranges)
    if kind is TransformKind.ROTATION:
        sizes = [math.radians(s) for s in (args.sizes or PARTITION_SIZES_DEG)]
        tau = math.radians(args.tau if args.tau is not None else PARTITION_BIG_INTERVAL_DEG)
    else:
        sizes = list(args.sizes or PARTITION_SIZES_SHIFT)
        tau = args.tau if args.tau is not None else PARTITION_BIG_INTERVAL_SHIFT
    report = check_partition(kind, scene, space, tau, sizes, args.pairs, cfg.seed, args.intervals)
    text = json.dumps(
        {"transform": kind.value, "tau": report.tau, "sizes": [s.as_dict() for s in report.sizes]},
        indent=2,
    )
    if cfg.out:
        Path(cfg.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return EXIT_OK


def _aggregate_rows(rows: list[ReportRow]) -> list[ReportRow]:
    """Per (transform, radius, metric): fraction of scenes meeting the metric's threshold."""
    grouped: dict[tuple[str, str, str], list[ReportRow]] = {}
    for row in rows:
        grouped.setdefault((row.transform, row.radius, row.metric), []).append(row)
    out = []
    for (transform, radius, metric), group in grouped.items():
        threshold = metric_threshold(metric)

        def rate(values):
            if any(v is None for v in values):
                return None
            return sum(1 for v in values if v >= threshold) / len(values)

        first = group[0]
        out.append(ReportRow(
            "ALL", transform, radius, metric,
            rate([r.certified for r in group]),
            rate([r.empirical for r in group]),
            rate([r.clean for r in group]),
            sum(r.runtime_s for r in group), first.cells, first.n, first.alpha,
        ))
    return out


def _cmd_benchmark(args, cfg: RunConfig, detector, quiet: bool) -> int:
    """Certify every scene at every radius; ``cfg.modalities`` repeats the sweep per builtin modality."""
    scenes = list(args.scenes or ([cfg.scene] if cfg.scene else []))
    if not scenes:
        raise InputError("scenes: required")
    kind = TransformKind.parse(cfg.transform)
    if kind is TransformKind.ROTATION_SHIFTING:
        raise InputError("transform: benchmark sweeps one-dimensional transforms")
    if cfg.modalities and cfg.detector.kind != "builtin":
        raise InputError("modalities: only the builtin detector has modalities")
    if cfg.radii:
        radii = cfg.radii
    else:
        radii = ROTATION_RADII_DEG if kind is TransformKind.ROTATION else SHIFTING_RADII
    metrics = ["detection", "iou"] if args.metric == "both" else [args.metric]
    if cfg.modalities:
        runs = [(BuiltinDetector(cfg.builtin.model_copy(update={"modality": m})), m) for m in cfg.modalities]
    else:
        runs = [(detector, modality_label(cfg))]

    rows = []
    for path in scenes:
        scene, name = load(path), scene_id(path)
        for run_detector, modality in runs:
            for metric in metrics:
                for radius in radii:
                    ranges = [(-radius, radius)] if kind is TransformKind.ROTATION else [(SHIFTING_RANGE[0], radius)]
                    rows.extend(certify_rows(cfg, scene, name, run_detector, metric, quiet, ranges, cfg.strategy,
                                             modality))
    rows.extend(_aggregate_rows(rows))
    _emit(rows, cfg)
    return EXIT_OK


def _configure_logging(level: Optional[str]) -> None:
    level = (level or env_log_level()).upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _describe_validation(exc: ValidationError) -> str:
    error = exc.errors()[0]
    where = ".".join(str(p) for p in error["loc"]) or "config"
    message = "required" if error["type"] == "missing" else error["msg"]
    return f"{where}: {message}"


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = _join_negative_values(list(sys.argv[1:] if argv is None else argv))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required")
        _configure_logging(args.log_level)
        cfg = build_config(args)
    except (UsageError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValidationError as exc:
        print(f"error: {_describe_validation(exc)}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    detector = None
    try:
        if args.command == "gen-scene":
            return _cmd_gen_scene(args, cfg)
        if args.command == "check-partition":
            return _cmd_check_partition(args, cfg)
        if args.command in ("certify-detection", "certify-iou"):
            scene_path = _require_scene(cfg)
            detector = open_detector(cfg.detector, cfg.builtin)
            metric = "detection" if args.command == "certify-detection" else "iou"
            rows = certify_rows(cfg, load(scene_path), scene_id(scene_path), detector, metric, args.quiet,
                                modality=modality_label(cfg))
            _emit(rows, cfg)
            return EXIT_OK
        if args.command == "attack":
            _require_scene(cfg)
            detector = open_detector(cfg.detector, cfg.builtin)
            return _cmd_attack(args, cfg, detector, args.quiet)
        if args.command == "benchmark":
            detector = open_detector(cfg.detector, cfg.builtin)
            return _cmd_benchmark(args, cfg, detector, args.quiet)
        raise UsageError(f"unknown command {args.command!r}")
    except (UsageError, InputError, SceneFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValidationError as exc:
        print(f"error: {_describe_validation(exc)}", file=sys.stderr)
        return EXIT_CONFIG
    except (SamplingError, DetectorError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if detector is not None:
            close_detector(detector)


def main() -> None:
    sys.exit(run())
