"""Relayed positions: a drone uses another drone as a moving beacon.

Drone 12 hears two beacons and drone 11, which localizes itself from three
other beacons and broadcasts its estimate with its uncertainty. Drone 12
runs two solvers side by side, one with and one without drone 11.
"""

from dataclasses import replace

import numpy as np

from spinsense.analysis import error_series, error_spectrum, hf_reduction_db, rmse
from spinsense.simengine import run_scenario, shipped_scenario

cfg = replace(shipped_scenario("p2p"), duration=20.0)
log = run_scenario(cfg)
truth = log.truth_of(12)
with_peer = log.estimates_of(12, "primary")
without = log.estimates_of(12, "no_peer")

a = error_series(with_peer, truth, cfg.warmup)
b = error_series(without, truth, cfg.warmup)
print(f"RMSE with peer    {np.round(1000 * rmse(a), 2)} mm")
print(f"RMSE without peer {np.round(1000 * rmse(b), 2)} mm")
print(f"error above 2 Hz lower by {np.round(hf_reduction_db(error_spectrum(a), error_spectrum(b)), 2)} dB")
common, ia, ib = np.intersect1d(with_peer["time_ns"], without["time_ns"], return_indices=True)
late = common >= cfg.warmup * 1e9
lower = with_peer["sigma_xy"][ia][late] < without["sigma_xy"][ib][late]
print(f"reported sigma lower with the peer in {100 * lower.mean():.2f}% of revolutions")
