"""Error statistics, error spectra and channel statistics over run logs.

Spectra: each axis of the error is linearly resampled at 100 Hz, cut into
non-overlapping 5 s chunks (no window, no detrending), and transformed with a
real FFT. The one-sided power of bin ``k`` is scaled so that the bins of one
chunk sum to its mean square; the reported RMS density is the square root of
that power averaged over chunks.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

HISTOGRAM_SCHEMA = 1
SPECTRUM_SCHEMA = 1
HARDWARE_HOLD_RMSE_MM = (17.6, 22.5, 12.7)
HARDWARE_HOLD_STD_MM = (2.4, 2.0, 3.6)
HARDWARE_HOLD_EXCURSION_MM = 30.0
AXES = ("x", "y", "z")


class AnalysisError(ValueError):
    pass


class EmptySeries(AnalysisError):
    pass


class SeriesTooShort(AnalysisError):
    pass


@dataclass(frozen=True)
class ErrorSeries:
    """Estimate minus ground truth; ``t`` in seconds, ``err`` shape (n, 3) in meters."""

    t: np.ndarray
    err: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        err = np.asarray(self.err, dtype=float)
        err = err.reshape(len(t), -1) if len(t) else err.reshape(0, err.shape[-1] if err.ndim > 1 else 3)
        if len(t) > 1 and not np.all(np.diff(t) > 0):
            raise AnalysisError("timestamps must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "err", err)

    def __len__(self):
        return len(self.t)


def error_series(estimates: dict, truth: dict, warmup: float = 0.0) -> ErrorSeries:
    """Align an estimate log with the truth log of the same robot.

    Truth is linearly interpolated at the estimate timestamps; estimates
    earlier than ``warmup`` seconds are dropped.
    """
    te = np.asarray(estimates["time_ns"], dtype=float)
    tt = np.asarray(truth["time_ns"], dtype=float)
    keep = te >= warmup * 1e9
    te = te[keep]
    err = np.column_stack([
        np.asarray(estimates[f"s_{ax}"], dtype=float)[keep] - np.interp(te, tt, np.asarray(truth[ax], dtype=float))
        for ax in AXES
    ])
    return ErrorSeries(te * 1e-9, err)


def rmse(series: ErrorSeries) -> np.ndarray:
    if len(series) == 0:
        raise EmptySeries("no samples")
    return np.sqrt(np.mean(series.err ** 2, axis=0))


def error_std(series: ErrorSeries) -> np.ndarray:
    if len(series) == 0:
        raise EmptySeries("no samples")
    return np.std(series.err, axis=0)


@dataclass(frozen=True)
class SpectrumReport:
    freqs: np.ndarray
    density: np.ndarray
    n_chunks: int
    parseval_ratio: np.ndarray

    def band_mean_db(self, f_min: float, f_max: float = np.inf) -> np.ndarray:
        sel = (self.freqs > f_min) & (self.freqs <= f_max)
        return 20.0 * np.log10(self.density[sel]).mean(axis=0)


def error_spectrum(series: ErrorSeries, fs: float = 100.0, chunk_s: float = 5.0) -> SpectrumReport:
    if len(series) < 2 or series.t[-1] - series.t[0] < chunk_s:
        raise SeriesTooShort(f"series spans less than {chunk_s} s")
    n = int(round(fs * chunk_s))
    grid = series.t[0] + np.arange(int(math.floor((series.t[-1] - series.t[0]) * fs + 1e-6)) + 1) / fs
    x = np.column_stack([np.interp(grid, series.t, series.err[:, k]) for k in range(series.err.shape[1])])
    n_chunks = len(grid) // n
    chunks = x[: n_chunks * n].reshape(n_chunks, n, -1)
    X = np.fft.rfft(chunks, axis=1)
    power = np.abs(X) ** 2 / n ** 2
    power[:, 1:(n + 1) // 2] *= 2.0
    density = np.sqrt(power.mean(axis=0))
    mean_square = np.mean(chunks ** 2, axis=(0, 1))
    ratio = (density ** 2).sum(axis=0) / np.where(mean_square > 0, mean_square, 1.0)
    return SpectrumReport(np.fft.rfftfreq(n, 1.0 / fs), density, n_chunks, ratio)


def hf_reduction_db(with_spec: SpectrumReport, without_spec: SpectrumReport, f_min: float = 2.0) -> np.ndarray:
    """Mean per-bin reduction (dB) above ``f_min``; positive when ``with_spec`` is lower."""
    sel = with_spec.freqs > f_min
    return (20.0 * np.log10(without_spec.density[sel] / with_spec.density[sel])).mean(axis=0)


def histogram(series: ErrorSeries, bin_width: float = 0.001, limit: float | None = None):
    """Per-axis counts over shared, symmetric bins. Returns ``(edges, counts)``."""
    if len(series) == 0:
        raise EmptySeries("no samples")
    lim = limit if limit is not None else max(bin_width, float(np.abs(series.err).max()))
    nb = int(math.ceil(lim / bin_width))
    edges = np.arange(-nb, nb + 1) * bin_width
    counts = np.stack([np.histogram(series.err[:, k], bins=edges)[0] for k in range(series.err.shape[1])], axis=1)
    return edges, counts


def excursion(truth: dict, center, warmup: float = 0.0):
    """Horizontal distance of the ground-truth path from ``center``: ``(max, fraction within 30 mm)``."""
    t = np.asarray(truth["time_ns"]) * 1e-9
    keep = t >= warmup
    d = np.hypot(np.asarray(truth["x"])[keep] - center[0], np.asarray(truth["y"])[keep] - center[1])
    if not len(d):
        return 0.0, 1.0
    return float(d.max()), float(np.mean(d <= HARDWARE_HOLD_EXCURSION_MM / 1000.0))


def _passes(times: np.ndarray, gap_ns: float) -> np.ndarray:
    if not len(times):
        return np.empty(0, dtype=np.int64)
    starts = np.concatenate(([0], np.flatnonzero(np.diff(times) > gap_ns) + 1, [len(times)]))
    return np.diff(starts)


def channel_stats(log: dict, spin_hz: float, duration: float, tx_stats: dict | None = None) -> dict:
    """Duty cycle, delivered bytes per revolution, collision rate and packets per pass.

    ``log`` holds channel-log columns. Bytes per revolution count each decoded
    packet once per receiving robot, however many of its receivers caught it,
    averaged over receiving robots.
    """
    out = {"duty_cycle": 0.0, "bytes_per_revolution": 0.0, "collision_rate": 0.0, "packets_per_pass": 0.0,
           "decoded": 0, "collisions": 0, "decode_errors": 0, "random_losses": 0}
    if tx_stats:
        on = [v for v in tx_stats.get("led_on_ns", {}).values() if v > 0]
        if on:
            out["duty_cycle"] = float(np.mean(on)) / (duration * 1e9)
    outcome = np.asarray(log.get("outcome", []), dtype=object)
    if not len(outcome):
        return out
    cause = np.asarray(log["cause"], dtype=object)
    dec = outcome == "decoded"
    col = cause == "Collision"
    derr = cause == "DecodeError"
    out["decoded"] = int(dec.sum())
    out["collisions"] = int(col.sum())
    out["decode_errors"] = int(derr.sum())
    out["random_losses"] = int((cause == "RandomLoss").sum())
    attempted = dec.sum() + col.sum() + derr.sum()
    out["collision_rate"] = float(col.sum() / attempted) if attempted else 0.0
    t = np.asarray(log["time_ns"])[dec]
    rxr = np.asarray(log["rx_robot"])[dec]
    txr = np.asarray(log["tx_robot"])[dec]
    rx_id = np.asarray(log["rx_id"], dtype=object)[dec]
    receivers = np.unique(rxr)
    n_revs = duration * spin_hz
    if len(receivers) and n_revs > 0:
        unique_packets = len({(int(a), int(b), int(c)) for a, b, c in zip(rxr, txr, t)})
        out["bytes_per_revolution"] = 2.0 * unique_packets / len(receivers) / n_revs
    counts = []
    for key in sorted({(int(a), str(b), int(c)) for a, b, c in zip(rxr, rx_id, txr)}):
        sel = (rxr == key[0]) & (rx_id == key[1]) & (txr == key[2])
        counts.append(_passes(np.sort(t[sel]), 5e6))
    if counts:
        out["packets_per_pass"] = float(np.concatenate(counts).mean())
    return out


# ---------------------------------------------------------------- CSV outputs

def write_spectrum_csv(path, report: SpectrumReport) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["schema_version", SPECTRUM_SCHEMA, "n_chunks", report.n_chunks])
        w.writerow(["freq_hz"] + [f"rms_density_{ax}" for ax in AXES[: report.density.shape[1]]])
        for f, row in zip(report.freqs, report.density):
            w.writerow([f"{f:.6g}"] + [f"{v:.9g}" for v in row])


def write_histogram_csv(path, edges, counts) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["schema_version", HISTOGRAM_SCHEMA])
        w.writerow(["bin_low_m", "bin_high_m"] + [f"count_{ax}" for ax in AXES[: counts.shape[1]]])
        for lo, hi, row in zip(edges[:-1], edges[1:], counts):
            w.writerow([f"{lo:.6g}", f"{hi:.6g}"] + [int(v) for v in row])


# ---------------------------------------------------------------- run summary

def summarize(estimates_by_key: dict, truth_by_robot: dict, targets: dict, channel_log: dict, tx_stats: dict | None,
              spin_hz: float, duration: float, warmup: float) -> dict:
    """Summary of one run.

    ``estimates_by_key`` maps ``(robot, variant)`` to estimate columns,
    ``truth_by_robot`` maps robot to truth columns and ``targets`` maps robot
    to its hold position.
    """
    per = {}
    for (robot, variant), est in sorted(estimates_by_key.items()):
        entry = {"n_estimates": int(len(est["time_ns"]))}
        try:
            series = error_series(est, truth_by_robot[robot], warmup)
            entry["rmse_mm"] = (1000 * rmse(series)).round(4).tolist()
            entry["std_mm"] = (1000 * error_std(series)).round(4).tolist()
            entry["mean_sigma_xy_mm"] = round(1000 * float(np.mean(est["sigma_xy"])), 4)
        except AnalysisError:
            pass
        if variant == "primary" and robot in targets:
            mx, frac = excursion(truth_by_robot[robot], targets[robot], warmup)
            entry["max_excursion_mm"] = round(1000 * mx, 3)
            entry["fraction_within_30mm"] = round(frac, 4)
        per[f"{robot}:{variant}"] = entry
    stats = channel_stats(channel_log, spin_hz, duration, tx_stats)
    return {
        "estimates": per,
        "channel": {k: (round(v, 6) if isinstance(v, float) else v) for k, v in stats.items()},
        "hardware_reference": {
            "hold_rmse_mm": list(HARDWARE_HOLD_RMSE_MM),
            "hold_std_mm": list(HARDWARE_HOLD_STD_MM),
            "hold_excursion_mm": HARDWARE_HOLD_EXCURSION_MM,
        },
    }


def summarize_run(log) -> dict:
    """Summary of an in-memory :class:`~spinsense.simengine.RunLog`."""
    from .channel import rows_to_columns

    cfg = log.config
    est = {}
    for r in cfg.robots:
        if r.role != "drone":
            continue
        for v in r.variants:
            est[(r.id, v.name)] = log.estimates_of(r.id, v.name)
    truth = {r.id: log.truth_of(r.id) for r in cfg.robots}
    targets = {r.id: r.position for r in cfg.robots if r.role == "drone" and not r.waypoints}
    out = summarize(est, truth, targets, rows_to_columns(log.channel_rows), log.tx_stats, cfg.spin_hz, cfg.duration, cfg.warmup)
    for t, robot, variant, _ in getattr(log, "dropouts", []):
        entry = out["estimates"].setdefault(f"{robot}:{variant}", {"n_estimates": 0})
        if t >= cfg.warmup * 1e9:
            entry["dropouts_after_warmup"] = entry.get("dropouts_after_warmup", 0) + 1
    out["scenario"] = cfg.name
    out["seed"] = cfg.seed
    out["counts"] = dict(log.counts)
    return out
