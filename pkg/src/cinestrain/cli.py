"""Command-line pipeline: phantom, align, upsample, register, strain,
evaluate, stats, and the end-to-end pipeline command.

Every run writes a RunManifest JSON next to its outputs.  Configuration
comes from an optional flat JSON file (keys prefixed phantom_/align_/reg_)
with command-line flags taking precedence.  Exit codes: 0 success, 1 usage,
2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import scipy

from . import __version__
from .align import AlignConfig, align_stack, apply_translations, write_shifts_csv
from .dataset import load_viewset, save_viewset
from .errors import CinestrainError, DataError, NumericalError
from .geometry import CineSeries, NormalizedFrame, ViewSet, grid_world_coords
from .kernels import BACKEND
from .metrics import kruskal_wallis, report_for_pair, write_metrics_csv
from .phantom import PhantomConfig, ground_truth_record, make_phantom
from .plots import line_chart
from .registration import RegConfig
from .strain import curves_from_results, peak_strain, write_peaks_csv, write_strain_csv
from .upsample import UpsampleSpec, upsample_mask, upsample_through_plane


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _parse_int_tuple(s: str) -> tuple:
    return tuple(int(p) for p in s.split(","))


def _parse_float_tuple(s: str) -> tuple:
    return tuple(float(p) for p in s.split(","))


def _field_type(default):
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        return _parse_int_tuple if all(isinstance(v, int) for v in default) \
            else _parse_float_tuple
    return str


def _add_config_flags(parser, cls, flag_prefix="", skip=("seed",)):
    """One optional flag per dataclass field, defaulting to None (= unset)."""
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        default = f.default
        if default is dataclasses.MISSING:
            continue
        shown = ",".join(str(v) for v in default) if isinstance(default, tuple) else default
        parser.add_argument(
            f"--{flag_prefix}{f.name.replace('_', '-')}",
            type=_field_type(default if default is not None else 0),
            default=None,
            help=f"{cls.__name__}.{f.name} (default: {shown})",
        )


def _build_config(cls, args, file_cfg, file_prefix, flag_prefix="", seed=None):
    """Defaults <- config-file values <- command-line flags <- --seed."""
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = file_prefix + f.name
        if key in file_cfg:
            val = file_cfg[key]
            kwargs[f.name] = tuple(val) if isinstance(val, list) else val
        flag_dest = (flag_prefix + f.name).replace("-", "_")
        val = getattr(args, flag_dest, None)
        if val is not None:
            kwargs[f.name] = val
    if seed is not None and "seed" in {f.name for f in dataclasses.fields(cls)}:
        kwargs["seed"] = seed
    return cls(**kwargs)


def _load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="ascii") as f:
            cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise DataError("config file must hold a flat JSON object")
    return cfg


def _snapshot(cfg) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v)
            for k, v in vars(cfg).items()}


def _resolve_out(args) -> str:
    out = getattr(args, "out", None) or os.environ.get("CINESTRAIN_OUT") or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write_manifest(outdir, subcommand, payload, status, wall_time) -> None:
    manifest = {
        "subcommand": subcommand,
        "exit_status": status,
        "wall_time_s": round(wall_time, 3),
        "versions": {
            "cinestrain": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
            "kernels": BACKEND,
        },
    }
    manifest.update(payload)
    path = os.path.join(outdir, f"manifest_{subcommand}.json")
    with open(path, "w", encoding="ascii") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


# ---------------------------------------------------------------- handlers


def _apply_series(series: CineSeries, trans) -> CineSeries:
    frames = tuple(
        (apply_translations(vol, trans),
         apply_translations(mask, trans) if mask is not None else None)
        for vol, mask in series.frames)
    return CineSeries(frames, series.ed_index, series.es_index)


def _upsample_series(series: CineSeries, spec: UpsampleSpec) -> CineSeries:
    frames = tuple(
        (upsample_through_plane(vol, spec),
         upsample_mask(mask, spec) if mask is not None else None)
        for vol, mask in series.frames)
    return CineSeries(frames, series.ed_index, series.es_index)


def _align_views(views: ViewSet, acfg: AlignConfig):
    res = align_stack(views, acfg)
    sax = _apply_series(views.sax, res.translations)
    return ViewSet(sax, views.ch4, views.ch2), res


def _upsample_views(views: ViewSet, factor: int) -> ViewSet:
    spec = UpsampleSpec(factor=factor)
    return ViewSet(_upsample_series(views.sax, spec), views.ch4, views.ch2)


def _pair_task(task):
    from .registration import register_pair
    return register_pair(**task)


def _register_views(views: ViewSet, rcfg: RegConfig, jobs: int = 1):
    from .registration import register_pair, register_sequence
    if rcfg.warm_start or jobs <= 1:
        return register_sequence(views, rcfg)
    ed = views.ed_index
    fixed_sax, fixed_mask = views.sax.frames[ed]
    frame = NormalizedFrame.from_volume(fixed_sax)
    tasks = []
    for i in range(ed):
        tasks.append(dict(
            fixed_sax=fixed_sax, fixed_sax_mask=fixed_mask,
            moving_sax=views.sax.volume(i), cfg=rcfg,
            fixed_4ch=views.ch4.volume(ed) if rcfg.use_4ch else None,
            fixed_4ch_mask=views.ch4.mask(ed) if rcfg.use_4ch else None,
            moving_4ch=views.ch4.volume(i) if rcfg.use_4ch else None,
            frame=frame, pair_tag=i, fixed_index=ed))
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_pair_task, tasks))


def _save_results(results, outdir) -> list:
    from .registration import save_result
    paths = []
    for res in results:
        p = os.path.join(outdir, f"reg_t{res.moving_index:03d}.params")
        save_result(res, p)
        paths.append(p)
    with open(os.path.join(outdir, "reg_summary.csv"), "w", encoding="ascii") as f:
        f.write("moving_index,fixed_index,iterations,final_loss\n")
        for res in results:
            f.write(f"{res.moving_index},{res.fixed_index},"
                    f"{len(res.loss_trace)},{res.loss_trace[-1]:.9g}\n")
    if results:
        line_chart([(f"t{r.moving_index}", np.arange(len(r.loss_trace)), r.loss_trace)
                    for r in results],
                   os.path.join(outdir, "reg_loss.svg"),
                   title="registration loss", xlabel="iteration", ylabel="loss")
    return paths


def _load_results(params_dir) -> list:
    from .registration import load_result
    paths = sorted(glob.glob(os.path.join(params_dir, "reg_t*.params")))
    if not paths:
        raise DataError(f"no reg_t*.params files in {params_dir}")
    return sorted((load_result(p) for p in paths), key=lambda r: r.moving_index)


def _strain_outputs(results, views: ViewSet, outdir, kind: str):
    ed = views.ed_index
    curves = curves_from_results(results, views.sax.mask(ed), ed, views.n_times, kind=kind)
    peaks = [peak_strain(c) for c in curves]
    curves_csv = os.path.join(outdir, "strain_curves.csv")
    peaks_csv = os.path.join(outdir, "strain_peaks.csv")
    write_strain_csv(curves, curves_csv)
    write_peaks_csv(peaks, peaks_csv)
    svgs = []
    for structure in sorted({c.structure for c in curves}):
        for comp in sorted({c.component for c in curves if c.structure == structure}):
            sel = [c for c in curves if c.structure == structure and c.component == comp]
            path = os.path.join(outdir, f"strain_{structure.lower()}_{comp}.svg")
            line_chart([(c.segment, c.times, c.values) for c in sel], path,
                       title=f"{structure} {comp} strain",
                       xlabel="time index", ylabel="strain")
            svgs.append(path)
    return curves, peaks, [curves_csv, peaks_csv] + svgs


def _evaluate_pair(views: ViewSet, results, t: int, outdir):
    from .registration import jac_det_grid, warp_mask
    ed = views.ed_index
    if t == ed:
        raise DataError(f"time {t} is the reference phase; nothing to evaluate")
    by_moving = {r.moving_index: r for r in results}
    if t not in by_moving:
        raise DataError(f"no trained parameters for moving phase {t}")
    res = by_moving[t]
    fixed_mask = views.sax.mask(ed)
    warped = warp_mask(views.sax.mask(t), res.params, res.frame, fixed_mask)
    dets = jac_det_grid(res.params, res.frame, grid_world_coords(fixed_mask))
    fixed_4ch = warped_4ch = None
    if views.ch4.mask(ed) is not None and views.ch4.mask(t) is not None:
        fixed_4ch = views.ch4.mask(ed)
        warped_4ch = warp_mask(views.ch4.mask(t), res.params, res.frame, fixed_4ch)
    report = report_for_pair(fixed_mask, warped, fixed_4ch, warped_4ch, dets)
    csv_path = os.path.join(outdir, "metrics.csv")
    write_metrics_csv(report, csv_path)
    return report, csv_path


def cmd_phantom(args, outdir, file_cfg):
    pcfg = _build_config(PhantomConfig, args, file_cfg, "phantom_", seed=args.seed)
    views, gt = make_phantom(pcfg)
    save_viewset(views, outdir)
    gt_path = os.path.join(outdir, "ground_truth.json")
    with open(gt_path, "w", encoding="ascii") as f:
        json.dump(ground_truth_record(gt), f, indent=1, sort_keys=True)
    print(f"phantom: {views.n_times} phases -> {outdir}")
    return {"config": {"phantom": _snapshot(pcfg)}, "outputs": [outdir]}


def cmd_align(args, outdir, file_cfg):
    views = load_viewset(args.indir)
    acfg = _build_config(AlignConfig, args, file_cfg, "align_", seed=args.seed)
    aligned, res = _align_views(views, acfg)
    save_viewset(aligned, outdir)
    shifts_csv = os.path.join(outdir, "shifts.csv")
    write_shifts_csv(res.translations, shifts_csv)
    line_chart([("loss", np.arange(len(res.loss_trace)), res.loss_trace)],
               os.path.join(outdir, "align_loss.svg"),
               title="slice alignment loss", xlabel="iteration", ylabel="loss")
    mean_shift = float(np.abs(res.translations.shifts).mean())
    print(f"align: mean |shift| = {mean_shift:.3f} mm -> {outdir}")
    return {"config": {"align": _snapshot(acfg)},
            "inputs": [args.indir], "outputs": [outdir, shifts_csv]}


def cmd_upsample(args, outdir, file_cfg):
    views = load_viewset(args.indir)
    factor = args.factor if args.factor is not None else int(file_cfg.get("factor", 6))
    up = _upsample_views(views, factor)
    save_viewset(up, outdir)
    print(f"upsample: {views.sax.volume(0).dims[2]} -> "
          f"{up.sax.volume(0).dims[2]} slices (k={factor}) -> {outdir}")
    return {"config": {"factor": factor}, "inputs": [args.indir], "outputs": [outdir]}


def cmd_register(args, outdir, file_cfg):
    views = load_viewset(args.indir)
    rcfg = _build_config(RegConfig, args, file_cfg, "reg_", seed=args.seed)
    jobs = 1 if getattr(args, "deterministic", False) else (args.jobs or 1)
    results = _register_views(views, rcfg, jobs)
    paths = _save_results(results, outdir)
    total = sum(r.wall_time for r in results)
    print(f"register: {len(results)} pairs in {total:.1f} s -> {outdir}")
    return {"config": {"registration": _snapshot(rcfg)},
            "inputs": [args.indir], "outputs": paths}


def cmd_strain(args, outdir, file_cfg):
    views = load_viewset(args.indir)
    results = _load_results(args.params)
    kind = args.kind or file_cfg.get("strain_kind", "green")
    curves, peaks, outputs = _strain_outputs(results, views, outdir, kind)
    for p in peaks:
        if p.segment == "global":
            print(f"strain: {p.structure} {p.component} peak "
                  f"{p.value:+.4f} at t={p.time_index}")
    return {"config": {"strain_kind": kind},
            "inputs": [args.indir, args.params], "outputs": outputs}


def cmd_evaluate(args, outdir, file_cfg):
    views = load_viewset(args.indir)
    results = _load_results(args.params)
    t = args.time if args.time is not None else views.es_index
    report, csv_path = _evaluate_pair(views, results, t, outdir)
    for s in report.structures:
        extra = f" dsc_4ch={report.dsc_4ch[s]:.3f}" if s in report.dsc_4ch else ""
        print(f"evaluate t={t}: {s} dsc_sax={report.dsc_sax[s]:.3f}"
              f" jac={report.jac_abs_dev.get(s, float('nan')):.4f}"
              f" hd={report.hd_mm.get(s, float('nan')):.2f}mm{extra}")
    return {"config": {"time": t}, "inputs": [args.indir, args.params],
            "outputs": [csv_path]}


def _read_csv_column(path, column):
    import csv

    with open(path, "r", encoding="ascii", newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows or column not in rows[0]:
        raise DataError(f"column {column!r} not found in {path}")
    try:
        return [float(r[column]) for r in rows]
    except ValueError as exc:
        raise DataError(f"non-numeric value in {path}:{column}: {exc}") from exc


def cmd_stats(args, outdir, file_cfg):
    groups = [_read_csv_column(p, args.column) for p in args.groups]
    h, p = kruskal_wallis(groups)
    print(f"kruskal-wallis: H = {h:.6g}, p = {p:.6g}")
    stats_csv = os.path.join(outdir, "stats.csv")
    with open(stats_csv, "w", encoding="ascii") as f:
        f.write("statistic,value\n")
        f.write(f"H,{h:.9g}\n")
        f.write(f"p,{p:.9g}\n")
    return {"config": {"column": args.column, "groups": list(args.groups)},
            "outputs": [stats_csv]}


def cmd_pipeline(args, outdir, file_cfg):
    seed = args.seed
    stages = {}
    if args.indir:
        views = load_viewset(args.indir)
        inputs = [args.indir]
    else:
        pcfg = _build_config(PhantomConfig, args, file_cfg, "phantom_",
                             flag_prefix="phantom-", seed=seed)
        views, gt = make_phantom(pcfg)
        phantom_dir = os.path.join(outdir, "phantom")
        save_viewset(views, phantom_dir)
        with open(os.path.join(phantom_dir, "ground_truth.json"), "w",
                  encoding="ascii") as f:
            json.dump(ground_truth_record(gt), f, indent=1, sort_keys=True)
        stages["phantom"] = _snapshot(pcfg)
        inputs = [phantom_dir]

    if not args.skip_align:
        acfg = _build_config(AlignConfig, args, file_cfg, "align_",
                             flag_prefix="align-", seed=seed)
        views, ares = _align_views(views, acfg)
        write_shifts_csv(ares.translations, os.path.join(outdir, "shifts.csv"))
        stages["align"] = _snapshot(acfg)

    if not args.skip_upsample:
        factor = args.factor if args.factor is not None else int(file_cfg.get("factor", 6))
        views = _upsample_views(views, factor)
        stages["factor"] = factor

    work_dir = os.path.join(outdir, "working")
    save_viewset(views, work_dir)

    rcfg = _build_config(RegConfig, args, file_cfg, "reg_",
                         flag_prefix="reg-", seed=seed)
    jobs = 1 if args.deterministic else (args.jobs or 1)
    results = _register_views(views, rcfg, jobs)
    reg_dir = os.path.join(outdir, "reg")
    os.makedirs(reg_dir, exist_ok=True)
    _save_results(results, reg_dir)
    stages["registration"] = _snapshot(rcfg)

    _strain_outputs(results, views, outdir, args.kind or "green")
    t = args.time if args.time is not None else views.es_index
    report, _ = _evaluate_pair(views, results, t, outdir)
    for s in report.structures:
        print(f"pipeline: {s} dsc_sax={report.dsc_sax[s]:.3f} "
              f"jac={report.jac_abs_dev.get(s, float('nan')):.4f}")
    return {"config": stages, "inputs": inputs, "outputs": [outdir]}


# ---------------------------------------------------------------- parser


def _common_flags(p, needs_in=True, out_required=False):
    if needs_in:
        p.add_argument("--in", dest="indir", required=True, metavar="DIR",
                       help="input view-set directory")
    p.add_argument("--out", default=None, metavar="DIR", required=out_required,
                   help="output directory (default: $CINESTRAIN_OUT or .)")
    p.add_argument("--config", default=None, metavar="JSON",
                   help="flat JSON config file; flags override its values")
    p.add_argument("--seed", type=int, default=None,
                   help="seed applied to every stage config (default: per-config)")


def build_parser() -> _Parser:
    parser = _Parser(prog="cinestrain",
                     description="INR-based cine MR registration and strain")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")
    sub.required = True

    p = sub.add_parser("phantom", parents=[], help="generate the synthetic cine study")
    _common_flags(p, needs_in=False)
    _add_config_flags(p, PhantomConfig)
    p.set_defaults(handler=cmd_phantom)

    p = sub.add_parser("align", help="optimize per-slice SAX shifts against the LAX views")
    _common_flags(p)
    _add_config_flags(p, AlignConfig)
    p.set_defaults(handler=cmd_align)

    p = sub.add_parser("upsample", help="linear through-plane upsampling of the SAX stack")
    _common_flags(p)
    p.add_argument("--factor", type=int, default=None,
                   help="through-plane upsampling factor (default: 6)")
    p.set_defaults(handler=cmd_upsample)

    p = sub.add_parser("register", help="train pairwise displacement networks")
    _common_flags(p)
    _add_config_flags(p, RegConfig)
    p.add_argument("--jobs", type=int, default=None,
                   help="parallel pairs, cold starts only (default: 1)")
    p.add_argument("--deterministic", action="store_true",
                   help="force serial execution and ordered reductions")
    p.set_defaults(handler=cmd_register)

    p = sub.add_parser("strain", help="radial/circumferential strain from trained networks")
    _common_flags(p)
    p.add_argument("--params", required=True, metavar="DIR",
                   help="directory with reg_t*.params files")
    p.add_argument("--kind", choices=("green", "engineering"), default=None,
                   help="strain tensor (default: green)")
    p.set_defaults(handler=cmd_strain)

    p = sub.add_parser("evaluate", help="overlap/Jacobian metrics for one phase pair")
    _common_flags(p)
    p.add_argument("--params", required=True, metavar="DIR")
    p.add_argument("--time", type=int, default=None,
                   help="moving phase index (default: end-systole)")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("stats", help="Kruskal-Wallis test over CSV columns")
    p.add_argument("--groups", nargs="+", required=True, metavar="CSV",
                   help="one CSV file per group")
    p.add_argument("--column", required=True, help="numeric column to compare")
    p.add_argument("--out", default=None, metavar="DIR")
    p.add_argument("--config", default=None, help=argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=None, help=argparse.SUPPRESS)
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("pipeline",
                       help="align + upsample + register + strain + evaluate")
    p.add_argument("--in", dest="indir", default=None, metavar="DIR",
                   help="input view-set directory (default: generate a phantom)")
    p.add_argument("--out", default=None, metavar="DIR")
    p.add_argument("--config", default=None, metavar="JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true",
                   help="byte-identical CSV outputs for a fixed seed")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--factor", type=int, default=None,
                   help="through-plane upsampling factor (default: 6)")
    p.add_argument("--time", type=int, default=None,
                   help="evaluation phase (default: end-systole)")
    p.add_argument("--kind", choices=("green", "engineering"), default=None)
    p.add_argument("--skip-align", action="store_true",
                   help="ablation: skip slice alignment")
    p.add_argument("--skip-upsample", action="store_true",
                   help="ablation: skip through-plane upsampling")
    _add_config_flags(p, PhantomConfig, flag_prefix="phantom-")
    _add_config_flags(p, AlignConfig, flag_prefix="align-")
    _add_config_flags(p, RegConfig, flag_prefix="reg-")
    p.set_defaults(handler=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    t0 = time.perf_counter()
    try:
        outdir = _resolve_out(args)
        file_cfg = _load_config_file(getattr(args, "config", None))
        payload = args.handler(args, outdir, file_cfg)
        payload.setdefault("seed", getattr(args, "seed", None))
        _write_manifest(outdir, args.subcommand, payload, 0,
                        time.perf_counter() - t0)
        return 0
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        _try_manifest(args, exc, 2, t0)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        _try_manifest(args, exc, 3, t0)
        return 3
    except CinestrainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        _try_manifest(args, exc, 2, t0)
        return 2


def _try_manifest(args, exc, status, t0):
    try:
        outdir = getattr(args, "out", None) or os.environ.get("CINESTRAIN_OUT") or "."
        if os.path.isdir(outdir):
            _write_manifest(outdir, args.subcommand, {"error": str(exc)},
                            status, time.perf_counter() - t0)
    except OSError:
        pass


if __name__ == "__main__":
    sys.exit(main())
