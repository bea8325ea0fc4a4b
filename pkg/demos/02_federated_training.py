"""Train the 48-parameter detector three ways and compare on held-out data.

Run from the repository root:  python3 demos/02_federated_training.py
"""

import numpy as np

from fedrec import channel as ch
from fedrec import fed, nn
from fedrec.rng import stream

seed, U, snr = 0, 5, 10.0
c = ch.Constellation.for_snr(snr)

# every user sees its own Rayleigh scale (the non-iid case)
scales = ch.draw_user_scales(U, stream(seed, "scales"))
print("user scales:", np.round(scales, 3))
data = [ch.gen_dataset(u, float(scales[u]), 4000, c, stream(seed, "data", u), stream(seed, "noise", u))
        for u in range(U)]

cfg = fed.FedConfig(U=U)
res = fed.fedrec_train(data, cfg, seed)
cl = fed.centralized_train(data, cfg.train, seed)
nl = fed.noncollab_train(data, cfg.train, seed)

# per-round telemetry: each user's loss before and after its local epochs
for rec in res.telemetry[:U]:
    print(f"round {rec.round} user {rec.user}: {rec.local_loss_before:.3f} -> {rec.local_loss_after:.3f}")

# held-out symbols from the same users, so each NL model is tested on its own scale;
# the sweep instead scores every model on one common stream with fresh scales
test = [ch.gen_dataset(u, float(scales[u]), 20_000, c, stream(seed, "test", u)) for u in range(U)]


def ber(models):
    errs = sum(c.bit_errors(t.msgs, nn.predict(p, t.features())) for p, t in zip(models, test))
    return errs / (U * 20_000 * c.bits_per_symbol)


print("FedRec BER:", ber([res.params] * U))
print("CL     BER:", ber([cl] * U))
print("NL     BER:", ber(nl))

# what each scheme costs on the uplink and downlink, in parameter words
for scheme in ("CL", "FedRec", "NL"):
    print(scheme, fed.comm_overhead(scheme, U, nn.param_count((2, 16)), cfg.rounds, 20_000))
