"""Range and elevation from one spinning receiver and one beacon.

A beacon sits 0.3 m away. The drone's three receivers each start hearing
its packets as their wedges sweep over it; the left/right spread gives the
range and the tilted middle receiver gives the elevation.
"""

import math

import numpy as np

from spinsense.channel import ChannelConfig
from spinsense.geometry import default_geometry, elevation_of
from spinsense.sensing import NeighborInfo, simulate_timing_records, to_measurement
from spinsense.simengine import default_calibration

omega = 50.0 * math.pi
geometry = default_geometry()
table = default_calibration()
beacon = np.array([0.3, 0.0, 0.05])

records, _ = simulate_timing_records(geometry, ChannelConfig(), omega, beacon, 200, seed=1)
rec = records[0]
print(f"first visit: t_L={rec.t_L:.0f} ns  t_M={rec.t_M:.0f} ns  t_R={rec.t_R:.0f} ns  ({rec.origin.name} LEDs)")

ms = [to_measurement(r, table, omega, NeighborInfo(beacon, r.last_time), geometry) for r in records]
r = np.array([m.r for m in ms])
alpha = np.degrees([m.alpha for m in ms if m.alpha is not None])
led = beacon + [0.0, 0.0, geometry.transmitter(rec.origin).z_offset]
print(f"range     mean {1000 * r.mean():.1f} mm, spread {1000 * r.std():.1f} mm, table sigma {1000 * ms[0].sigma_r:.1f} mm")
print(f"elevation mean {alpha.mean():.2f} deg (LED at {math.degrees(elevation_of(np.zeros(3), led)):.2f} deg), "
      f"spread {alpha.std():.2f} deg")
