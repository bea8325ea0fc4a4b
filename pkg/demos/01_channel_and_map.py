"""Channel model and the two exact MAP detectors.

Run from the repository root:  python3 demos/01_channel_and_map.py
"""

import numpy as np

from fedrec import channel as ch
from fedrec import detectors as dt
from fedrec.channel import RayleighFixed
from fedrec.rng import stream

# 16QAM scaled so that the average energy per bit is rho (dB) over unit noise
c = ch.Constellation.for_snr(10.0)
print("labels of the first row:", c.bit_labels[:4])
print("mean symbol energy:", round(c.mean_energy, 3))

# one batch of faded, noisy symbols; the receiver knows the phase only
rng = stream(0, "test", 0)
m = rng.integers(0, 16, 20_000)
d = ch.draw_fading(rng, RayleighFixed(1.0), size=m.size)
r = ch.apply_channel(c.points[m], d, rng)
f = ch.derotate_features(r, d.phase)

# closed form over the Rayleigh amplitude vs generic quadrature
lam = dt.rayleigh_map_metric(f, c, 1.0)
num = dt.numeric_map_metric(f, c, RayleighFixed(1.0))
print("max |closed - quadrature| after removing a per-row constant:",
      float(np.ptp(lam - num, axis=1).max()))

hat = dt.map_detect(lam)
print("symbol error rate:", np.mean(hat != m))
print("bit error rate   :", c.bit_errors(m, hat) / (m.size * c.bits_per_symbol))

# a coherent receiver (knows alpha too) does much better
coh = dt.min_distance_detect(r, d, c)
print("coherent BER     :", c.bit_errors(m, coh) / (m.size * c.bits_per_symbol))
