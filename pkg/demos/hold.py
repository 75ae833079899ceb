"""A drone holds position inside a ring of three beacons.

Runs the bundled hold scenario for 20 s and prints per-axis error and the
flight envelope next to the hardware figures.
"""

from dataclasses import replace

from spinsense.analysis import summarize_run
from spinsense.simengine import run_scenario, shipped_scenario

cfg = replace(shipped_scenario("hold"), duration=20.0)
summary = summarize_run(run_scenario(cfg))
entry = summary["estimates"]["10:primary"]
hardware = summary["hardware_reference"]
print(f"{entry['n_estimates']} estimates over {cfg.duration:.0f} s")
print(f"RMSE x/y/z  {entry['rmse_mm']} mm   (hardware {hardware['hold_rmse_mm']})")
print(f"std  x/y/z  {entry['std_mm']} mm   (hardware {hardware['hold_std_mm']})")
print(f"max horizontal excursion {entry['max_excursion_mm']:.1f} mm, "
      f"{100 * entry['fraction_within_30mm']:.1f}% of the time within 30 mm")
print(f"channel: {summary['channel']}")
