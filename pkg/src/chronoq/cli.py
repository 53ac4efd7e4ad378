"""Command-line interface: `chronoq predict | simulate | analyze`.

Exit codes: 0 success, 2 usage/config error, 3 runtime failure.  Output files
are written atomically (write-then-rename); a manifest with per-output SHA-256
checksums is emitted last on successful simulate runs.  The environment
variable ``CHRONOQ_THREADS`` caps the campaign worker count.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys

import numpy as np

from . import __version__, analytic, cascade, metrics, tagio
from .config import config_to_dict, load_config
from .coincidence import measure_delay, summary_row, write_summary_csv
from .errors import ChronoqError, ConfigError

SEED_SCHEME = "PCG64(SeedSequence((seed, interval_index, segment_index)))"


def _say(args, msg):
    if not args.quiet:
        print(msg, file=sys.stderr)


def _atomic(write_fn, data, path):
    tmp = f"{path}.tmp{os.getpid()}"
    write_fn(data, tmp)
    os.replace(tmp, path)


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _fmt(x: float, digits: int = 10) -> str:
    return f"{x:.{digits}g}"


# ---------------------------------------------------------------- predict

_PLOT_SNIPPET = """\
# Companion plotting commands for {csv_name} (not executed by chronoq).
# Run with any Python that has matplotlib:
#
#   python {script_name}
#
import csv
from collections import defaultdict

import matplotlib.pyplot as plt

series = defaultdict(list)
with open("{csv_name}") as fh:
    for row in csv.DictReader(fh):
        series[row["{group}"]].append((float(row["{x}"]), float(row["sd_ps"])))
for label, pts in sorted(series.items()):
    pts.sort()
    plt.plot([p[0] for p in pts], [p[1] for p in pts], label="{group}=" + label)
plt.xlabel("{x}")
plt.ylabel("offset SD [ps]")
plt.yscale("log")
plt.legend()
plt.savefig("{csv_name}.png", dpi=150)
"""


def _write_plot_script(out_dir, csv_name, group, x):
    script_name = csv_name.replace(".csv", ".plot.py")
    text = _PLOT_SNIPPET.format(csv_name=csv_name, script_name=script_name,
                                group=group, x=x)
    tagio.atomic_write_text(os.path.join(out_dir, script_name), text)
    return script_name


def cmd_predict(args) -> int:
    cfg = load_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    spec = cfg.predict
    wrote = []
    want = args.sweep
    if want in ("distance", "both") and spec.distance is not None:
        rows = analytic.sweep_distance(spec.distance.n_list, cfg.budgets[0],
                                       spec.distance.km_grid)
        path = os.path.join(args.out, "distance_sweep.csv")
        _atomic(analytic.write_distance_sweep_csv, rows, path)
        wrote.append(path)
        wrote.append(_write_plot_script(args.out, "distance_sweep.csv",
                                        "n_segments", "total_km"))
    if want in ("skew", "both") and spec.skew is not None:
        rows = analytic.sweep_skew(spec.skew.segments, spec.skew.grid,
                                   spec.skew.interval_s, degrade_car=args.degrade_car)
        path = os.path.join(args.out, "skew_sweep.csv")
        _atomic(analytic.write_skew_sweep_csv, rows, path)
        wrote.append(path)
        wrote.append(_write_plot_script(args.out, "skew_sweep.csv",
                                        "segment", "skew"))
    if want != "both" and not wrote:
        raise ConfigError(f"config has no predict.{want} sweep specification")
    for p in wrote:
        _say(args, f"wrote {p}")
    return 0


# ---------------------------------------------------------------- simulate

def _tag_path(tag_dir, interval_index, fmt):
    ext = "qtt" if fmt == "binary" else "csv"
    return os.path.join(tag_dir, f"interval_{interval_index:05d}.{ext}")


def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be >= 0")
        cfg = _replace_cfg(cfg, seed=args.seed)
    if args.scenario is not None:
        cfg = _replace_cfg(cfg, scenario=args.scenario)
    os.makedirs(args.out, exist_ok=True)
    outputs = []

    tag_sink = None
    if cfg.outputs.save_tags:
        tag_dir = os.path.join(args.out, "tags")
        os.makedirs(tag_dir, exist_ok=True)
        writer = (tagio.write_tags_binary if cfg.outputs.tag_format == "binary"
                  else tagio.write_tags_csv)

        def tag_sink(interval_index, streams):
            path = _tag_path(tag_dir, interval_index, cfg.outputs.tag_format)
            writer(streams, path)
            outputs.append(path)

    result = cascade.run_campaign(
        cfg.scenario, cfg.topology(), cfg.duration_s, cfg.interval_s, cfg.seed,
        controller=cfg.controller, epoch_intervals=cfg.epoch_intervals,
        engine=cfg.engine, threads=args.threads, tag_sink=tag_sink)

    campaign_path = os.path.join(args.out, "campaign.csv")
    _atomic(cascade.write_campaign_csv, result, campaign_path)
    outputs.append(campaign_path)
    directions_path = os.path.join(args.out, "directions.csv")
    _atomic(cascade.write_directions_csv, result, directions_path)
    outputs.append(directions_path)
    if result.controller_log:
        controller_path = os.path.join(args.out, "controller.csv")
        _atomic(cascade.write_controller_csv, result, controller_path)
        outputs.append(controller_path)

    manifest = {
        "tool": "chronoq",
        "version": __version__,
        "seed": cfg.seed,
        "scenario": cfg.scenario,
        "seed_scheme": SEED_SCHEME,
        "config": config_to_dict(cfg),
        "outputs": {os.path.relpath(p, args.out): _sha256(p) for p in outputs},
    }
    tagio.atomic_write_text(os.path.join(args.out, "manifest.json"),
                            json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    clean = result.clean()
    if clean:
        totals = np.array([r.total_offset_ps for r in clean])
        sd = float(np.std(totals, ddof=1)) if len(totals) > 1 else 0.0
        _say(args, f"{len(result.records)} intervals ({len(result.records) - len(clean)}"
                   f" flagged); total-offset SD {sd:.4g} ps")
    _say(args, f"wrote {campaign_path}")
    return 0


def _replace_cfg(cfg, **kw):
    from dataclasses import replace
    return replace(cfg, **kw)


# ---------------------------------------------------------------- analyze

def _series_from_campaign(table, name):
    if name == "total":
        return table["total_offset_ps"]
    if name.startswith("seg"):
        k = int(name[3:])
        return table["segment_offsets_ps"][:, k]
    raise ConfigError(f"unknown series {name!r}; use 'total' or 'segN'")


def _analyze_campaign(args) -> int:
    table = cascade.read_campaign_csv(args.campaign)
    os.makedirs(args.out, exist_ok=True)
    clean = np.array([not f for f in table["flag"]], dtype=bool)
    n_seg = table["segment_offsets_ps"].shape[1]
    names = [f"seg{k}" for k in range(n_seg)] + ["total"]

    stats_buf = io.StringIO()
    w = csv.writer(stats_buf, lineterminator="\n")
    w.writerow(["series", "n_used", "mean_ps", "sd_ps"])
    for name in names:
        v = _series_from_campaign(table, name)[clean]
        sd = metrics.sample_sd(v) if len(v) > 1 else math.nan
        w.writerow([name, len(v), _fmt(float(np.mean(v)) if len(v) else math.nan),
                    _fmt(sd, 9)])
    tagio.atomic_write_text(os.path.join(args.out, "stats.csv"), stats_buf.getvalue())

    # TDEV and drift of the requested series, clean rows only
    v = _series_from_campaign(table, args.series)[clean]
    t = table["t_s"][clean]
    tau0 = float(np.median(np.diff(t))) if len(t) > 1 else 1.0
    series = metrics.OffsetSeries(tau0_s=tau0, values_ps=v)
    if len(v) >= 4:
        points = metrics.tdev(series)
        _atomic(metrics.write_tdev_csv, points, os.path.join(args.out, "tdev.csv"))

    drift_buf = io.StringIO()
    w = csv.writer(drift_buf, lineterminator="\n")
    w.writerow(["series", "intercept_ps", "slope_ps_per_s",
                "curvature_ps_per_s2", "skew_estimate"])
    if len(v) > args.drift_degree + 1:
        coeffs = metrics.fit_drift((t, v), args.drift_degree)
        c2 = coeffs[2] if len(coeffs) > 2 else 0.0
        w.writerow([args.series, _fmt(coeffs[0]), _fmt(coeffs[1], 9),
                    _fmt(c2, 9), _fmt(coeffs[1] * 1e-12, 9)])
    tagio.atomic_write_text(os.path.join(args.out, "drift.csv"), drift_buf.getvalue())

    # Offsets pass-through, optionally de-meaned over clean rows
    off_buf = io.StringIO()
    w = csv.writer(off_buf, lineterminator="\n")
    header = cascade.campaign_header(n_seg)
    w.writerow(header)
    seg_off = table["segment_offsets_ps"].copy()
    tot_off = table["total_offset_ps"].copy()
    if args.demean and clean.any():
        for k in range(n_seg):
            seg_off[:, k] -= np.mean(seg_off[clean, k])
        tot_off -= np.mean(tot_off[clean])
    for i in range(len(table["interval_index"])):
        row = [table["interval_index"][i], _fmt(table["t_s"][i])]
        row += [_fmt(seg_off[i, k]) for k in range(n_seg)]
        row += [_fmt(tot_off[i]), _fmt(table["total_sd_ps"][i], 9), table["flag"][i]]
        w.writerow(row)
    tagio.atomic_write_text(os.path.join(args.out, "offsets.csv"), off_buf.getvalue())
    _say(args, f"wrote {args.out}/stats.csv, tdev.csv, drift.csv, offsets.csv")
    return 0


def _analyze_tags(args) -> int:
    if args.config is None:
        raise ConfigError("--tags analysis needs --config for engine settings")
    cfg = load_config(args.config)
    os.makedirs(args.out, exist_ok=True)
    paths = []
    for p in args.tags:
        if os.path.isdir(p):
            paths.extend(sorted(
                os.path.join(p, f) for f in os.listdir(p)
                if f.startswith("interval_") and f.split(".")[-1] in ("qtt", "csv")))
        else:
            paths.append(p)
    if not paths:
        raise ChronoqError("no tag files found to analyze")

    engines = cascade.engines_for_topology(cfg.topology(), cfg.engine)
    rows = []
    for path in paths:
        base = os.path.basename(path)
        stem = base.split(".")[0]
        try:
            interval_index = int(stem.split("_")[-1])
        except ValueError:
            interval_index = len(rows)
        chans = tagio.read_tags(path)
        for s in range(len(cfg.budgets)):
            names = {0: "fwd-local", 1: "fwd-remote", 2: "bwd-local", 3: "bwd-remote"}
            missing = [4 * s + r for r in names if 4 * s + r not in chans]
            if missing:
                raise ChronoqError(f"{path}: missing channel(s) {missing}")
            fwd = measure_delay(chans[4 * s + 0], chans[4 * s + 1], engines[s])
            bwd = measure_delay(chans[4 * s + 2], chans[4 * s + 3], engines[s])
            rows.append(summary_row(interval_index, f"seg{s}:fwd", fwd))
            rows.append(summary_row(interval_index, f"seg{s}:bwd", bwd))
    out_path = os.path.join(args.out, "directions.csv")
    _atomic(write_summary_csv, rows, out_path)
    _say(args, f"wrote {out_path}")
    return 0


def cmd_analyze(args) -> int:
    if (args.campaign is None) == (not args.tags):
        raise ConfigError("analyze needs exactly one of --campaign or --tags")
    if args.campaign is not None:
        return _analyze_campaign(args)
    return _analyze_tags(args)


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chronoq",
        description="Cascaded two-way optical time transfer: predictions, "
                    "Monte Carlo campaigns, and offset-series analysis.")
    parser.add_argument("--version", action="version", version=f"chronoq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="experiment config (YAML)")
    common.add_argument("--out", metavar="DIR", default=".", help="output directory")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    p = sub.add_parser("predict", parents=[common],
                       help="closed-form distance / skew sweep tables")
    p.add_argument("--sweep", choices=("distance", "skew", "both"), default="both")
    p.add_argument("--degrade-car", action="store_true",
                   help="also degrade CAR with skew broadening in the skew sweep")
    p.set_defaults(func=cmd_predict, needs_config=True)

    p = sub.add_parser("simulate", parents=[common],
                       help="run a Monte Carlo campaign")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--scenario", choices=("crc", "irc", "irc-fc"), default=None)
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker cap (default: ${cascade.THREADS_ENV} or 1)")
    p.set_defaults(func=cmd_simulate, needs_config=True)

    p = sub.add_parser("analyze", parents=[common],
                       help="statistics of stored campaigns or tag files")
    p.add_argument("--campaign", metavar="CSV", default=None)
    p.add_argument("--tags", metavar="PATH", nargs="*", default=[],
                   help="tag files or a directory of interval_*.qtt|csv")
    p.add_argument("--series", default="total", help="series for TDEV/drift (total|segN)")
    p.add_argument("--demean", action="store_true",
                   help="remove the mean offset in offsets.csv")
    p.add_argument("--drift-degree", type=int, choices=(1, 2), default=1)
    p.set_defaults(func=cmd_analyze, needs_config=False)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 2
    try:
        if getattr(args, "needs_config", False) and args.config is None:
            raise ConfigError(f"{args.command} requires --config PATH")
        return args.func(args)
    except ConfigError as e:
        print(f"chronoq: config error: {e}", file=sys.stderr)
        return 2
    except (ChronoqError, OSError, ValueError) as e:
        print(f"chronoq: error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
