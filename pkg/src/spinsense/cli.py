"""Command line entry point: ``spinsense {run,sweep,calibrate,analyze,validate}``.

Exit codes: 0 success, 2 invalid configuration, 3 runtime failure.
Every output file is written to a temporary name and moved into place.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import analysis
from .channel import CHANNEL_LOG_COLUMNS, read_channel_log
from .simengine import (
    ESTIMATE_COLUMNS,
    TRUTH_COLUMNS,
    ConfigError,
    load_scenario,
    run_scenario,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
SUMMARY_SCHEMA = 1

log = logging.getLogger("spinsense")


# ---------------------------------------------------------------- file output

def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        # mkstemp creates 0600; give the final file ordinary permissions
        os.fchmod(fd, 0o666 & ~_umask())
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    return repr(float(v))


def write_run(run_log, out_dir) -> dict:
    """Write truth.csv, estimates.csv, channel.csv and summary.json; return the summary."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tr = run_log.truth
    truth_rows = (
        (int(t), int(r), _fmt(x), _fmt(y), _fmt(z), _fmt(p), _fmt(w))
        for t, r, x, y, z, p, w in zip(tr["time_ns"], tr["robot"], tr["x"], tr["y"], tr["z"], tr["phase"], tr["omega"])
    )
    atomic_write(out / "truth.csv", _csv_text(TRUTH_COLUMNS, truth_rows))
    est_rows = ((t, r, v, _fmt(x), _fmt(y), _fmt(z), _fmt(s), _fmt(w), n) for t, r, v, x, y, z, s, w, n in run_log.estimates)
    atomic_write(out / "estimates.csv", _csv_text(ESTIMATE_COLUMNS, est_rows))
    atomic_write(out / "channel.csv", _csv_text(CHANNEL_LOG_COLUMNS, run_log.channel_rows))
    summary = analysis.summarize_run(run_log)
    summary["schema_version"] = SUMMARY_SCHEMA
    summary["tx_stats"] = {
        "transmitted": {str(k): v for k, v in run_log.tx_stats["transmitted"].items()},
        "led_on_ns": {str(k): v for k, v in run_log.tx_stats["led_on_ns"].items()},
        "per_receiver": run_log.tx_stats["per_receiver"],
    }
    atomic_write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True))
    return summary


def read_estimates(path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for col in ESTIMATE_COLUMNS:
        vals = [r[col] for r in rows]
        if col == "variant":
            out[col] = np.array(vals, dtype=object)
        elif col in ("time_ns", "robot", "n_neighbors"):
            out[col] = np.array(vals, dtype=np.int64)
        else:
            out[col] = np.array(vals, dtype=float)
    return out


def read_truth(path) -> dict:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    out = {c: data[:, i] for i, c in enumerate(TRUTH_COLUMNS)}
    out["time_ns"] = out["time_ns"].astype(np.int64)
    out["robot"] = out["robot"].astype(np.int64)
    return out


def _select(cols: dict, sel) -> dict:
    return {k: v[sel] for k, v in cols.items()}


# ---------------------------------------------------------------- subcommands

def _load(args):
    cfg = load_scenario(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "ideal_channel", False):
        cfg = replace(cfg, ideal_channel=True)
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    run_log = run_scenario(cfg)
    summary = write_run(run_log, args.out)
    if not args.quiet:
        for key, entry in summary["estimates"].items():
            if "rmse_mm" in entry:
                print(f"{key}: RMSE mm {entry['rmse_mm']}, std mm {entry['std_mm']}")
        print(f"wrote {args.out}")
    return EXIT_OK


def _run_replicate(cfg, out_dir):
    return write_run(run_scenario(cfg), out_dir), run_scenario_pairs(out_dir, cfg)


def run_scenario_pairs(out_dir, cfg) -> dict:
    """Paired comparisons between the primary solver and each extra variant of a drone."""
    est = read_estimates(Path(out_dir) / "estimates.csv")
    truth = read_truth(Path(out_dir) / "truth.csv")
    pairs = {}
    for r in cfg.robots:
        if r.role != "drone" or len(r.variants) < 2:
            continue
        tr = _select(truth, truth["robot"] == r.id)
        base = _select(est, (est["robot"] == r.id) & (est["variant"] == r.variants[0].name))
        for v in r.variants[1:]:
            other = _select(est, (est["robot"] == r.id) & (est["variant"] == v.name))
            common, ia, ib = np.intersect1d(base["time_ns"], other["time_ns"], return_indices=True)
            late = common >= cfg.warmup * 1e9
            ia, ib = ia[late], ib[late]
            common = common[late]
            entry = {"revolutions_compared": int(len(common))}
            if len(common):
                entry["fraction_sigma_lower"] = float(np.mean(base["sigma_xy"][ia] < other["sigma_xy"][ib]))
            try:
                sa = analysis.error_series(base, tr, cfg.warmup)
                sb = analysis.error_series(other, tr, cfg.warmup)
                ra, rb = analysis.rmse(sa), analysis.rmse(sb)
                entry["rmse_with_mm"] = (1000 * ra).tolist()
                entry["rmse_without_mm"] = (1000 * rb).tolist()
                entry["rmse_ratio"] = (ra / rb).tolist()
                entry["hf_reduction_db"] = analysis.hf_reduction_db(analysis.error_spectrum(sa), analysis.error_spectrum(sb)).tolist()
            except analysis.AnalysisError as exc:
                entry["error"] = str(exc)
            pairs[f"{r.id}:{r.variants[0].name}/{v.name}"] = entry
    return pairs


def _mean_std(values) -> dict:
    a = np.asarray(values, dtype=float)
    return {"mean": a.mean(axis=0).tolist(), "std": a.std(axis=0).tolist()}


def cmd_sweep(args) -> int:
    if args.replicates < 1:
        raise ConfigError("replicates must be >= 1")
    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg.with_seed(cfg.seed + k), out / f"replicate_{k:03d}") for k in range(args.replicates)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_run_replicate, *zip(*jobs)))
    else:
        results = [_run_replicate(c, d) for c, d in jobs]
    agg: dict = {"schema_version": SUMMARY_SCHEMA, "scenario": cfg.name, "replicates": args.replicates,
                 "seeds": [c.seed for c, _ in jobs], "estimates": {}, "pairs": {}}
    keys = sorted({k for s, _ in results for k in s["estimates"]})
    for k in keys:
        entries = [s["estimates"][k] for s, _ in results if "rmse_mm" in s["estimates"].get(k, {})]
        if entries:
            agg["estimates"][k] = {
                "rmse_mm": _mean_std([e["rmse_mm"] for e in entries]),
                "std_mm": _mean_std([e["std_mm"] for e in entries]),
            }
            if all("max_excursion_mm" in e for e in entries):
                agg["estimates"][k]["max_excursion_mm"] = _mean_std([e["max_excursion_mm"] for e in entries])
    for k in sorted({k for _, p in results for k in p}):
        entries = [p[k] for _, p in results if k in p and "rmse_ratio" in p[k]]
        if entries:
            agg["pairs"][k] = {
                "rmse_with_mm": _mean_std([e["rmse_with_mm"] for e in entries]),
                "rmse_without_mm": _mean_std([e["rmse_without_mm"] for e in entries]),
                "rmse_ratio": _mean_std([e["rmse_ratio"] for e in entries]),
                "hf_reduction_db": _mean_std([e["hf_reduction_db"] for e in entries]),
                "fraction_sigma_lower": _mean_std([e["fraction_sigma_lower"] for e in entries]),
                "per_replicate": entries,
            }
    agg["channel"] = {key: _mean_std([s["channel"][key] for s, _ in results]) for key in ("duty_cycle", "bytes_per_revolution", "collision_rate")}
    agg["hardware_reference"] = results[0][0]["hardware_reference"]
    atomic_write(out / "sweep_summary.json", json.dumps(agg, indent=2, sort_keys=True))
    if not args.quiet:
        print(f"wrote {out / 'sweep_summary.json'}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    from .sensing import SweepConfig, calibrate

    sweep = SweepConfig(ideal=args.ideal_channel, seed=args.seed or 0)
    if args.config:
        try:
            d = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg}", exc.lineno) from None
        allowed = {"r_values", "alpha_values_deg", "revolutions", "omega", "max_residual_r"}
        unknown = sorted(set(d) - allowed)
        if unknown:
            raise ConfigError(f"unknown calibration key {unknown[0]!r}")
        d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        sweep = replace(sweep, **d)
    table, report = calibrate(sweep)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "calibration.json", table.to_json())
    rows = zip(report["r_true"], np.degrees(report["alpha_true"]), report["r_hat_mean"], report["r_std"],
               np.degrees(report["alpha_hat_mean"]), np.degrees(report["alpha_std"]))
    atomic_write(out / "calibration_residuals.csv",
                 _csv_text(("r_m", "alpha_deg", "r_hat_mean_m", "r_std_m", "alpha_hat_mean_deg", "alpha_std_deg"),
                           ([_fmt(v) for v in row] for row in rows)))
    if not args.quiet:
        print(table.to_json())
    return EXIT_OK


def cmd_analyze(args) -> int:
    run_dir = Path(args.out)
    est = read_estimates(run_dir / "estimates.csv")
    truth = read_truth(run_dir / "truth.csv")
    warmup = args.warmup
    if args.config:
        warmup = load_scenario(args.config).warmup
    spec_rows, hist_rows = [], []
    for robot, variant in sorted({(int(r), str(v)) for r, v in zip(est["robot"], est["variant"])}):
        e = _select(est, (est["robot"] == robot) & (est["variant"] == variant))
        series = analysis.error_series(e, _select(truth, truth["robot"] == robot), warmup)
        try:
            spec = analysis.error_spectrum(series)
        except analysis.SeriesTooShort:
            log.warning("robot %s/%s: series too short for a spectrum", robot, variant)
        else:
            spec_rows += [[robot, variant, f"{f:.6g}"] + [f"{v:.9g}" for v in d] for f, d in zip(spec.freqs, spec.density)]
        edges, counts = analysis.histogram(series)
        hist_rows += [[robot, variant, f"{lo:.6g}", f"{hi:.6g}"] + c.tolist() for lo, hi, c in zip(edges[:-1], edges[1:], counts)]
    atomic_write(run_dir / "spectrum.csv", _csv_text(("robot", "variant", "freq_hz", "rms_density_x", "rms_density_y", "rms_density_z"), spec_rows))
    atomic_write(run_dir / "histogram.csv", _csv_text(("robot", "variant", "bin_low_m", "bin_high_m", "count_x", "count_y", "count_z"), hist_rows))
    if (run_dir / "channel.csv").exists() and not args.quiet:
        stats = analysis.channel_stats(read_channel_log(run_dir / "channel.csv"), 25.0, float(truth["time_ns"].max() + 1e6) * 1e-9)
        print(json.dumps({k: stats[k] for k in ("collision_rate", "packets_per_pass")}))
    if not args.quiet:
        print(f"wrote {run_dir / 'spectrum.csv'} and {run_dir / 'histogram.csv'}")
    return EXIT_OK


def cmd_validate(args) -> int:
    cfg = _load(args)
    print(json.dumps(cfg.to_dict(), indent=2))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spinsense", description="Spinning-receiver optical localization simulator")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True, out_required=True):
        sp.add_argument("--config", required=config_required, help="scenario JSON (calibration: sweep JSON)")
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        sp.add_argument("--quiet", action="store_true")
        return sp

    run = common(sub.add_parser("run", help="run one scenario"))
    run.add_argument("--ideal-channel", action="store_true", help="geometric timing and exact messages")
    run.set_defaults(func=cmd_run)
    sweep = common(sub.add_parser("sweep", help="run seeds seed..seed+N-1 and aggregate"))
    sweep.add_argument("--replicates", type=int, default=6)
    sweep.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    sweep.add_argument("--ideal-channel", action="store_true")
    sweep.set_defaults(func=cmd_sweep)
    cal = common(sub.add_parser("calibrate", help="fit the timing-to-geometry maps"), config_required=False)
    cal.add_argument("--ideal-channel", action="store_true", help="zero-width FOV and continuous timing")
    cal.set_defaults(func=cmd_calibrate)
    ana = common(sub.add_parser("analyze", help="spectra and histograms of a run directory (--out)"), config_required=False)
    ana.add_argument("--warmup", type=float, default=2.0, help="seconds excluded at the start")
    ana.set_defaults(func=cmd_analyze)
    val = common(sub.add_parser("validate", help="check a scenario and print the effective config"), out_required=False)
    val.add_argument("--ideal-channel", action="store_true")
    val.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "replicates", 1) is not None and getattr(args, "replicates", 1) < 1:
        print("error: --replicates must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None and args.seed < 0:
        print("error: --seed must be non-negative", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        where = f"{args.config}:" if args.config else ""
        print(f"error: {where}{exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if args.config and not Path(args.config).exists() else EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - exit-code contract
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
