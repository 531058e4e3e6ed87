"""Dev scratch: acceptance-scale trend measurement (background)."""
import json
import time

import numpy as np

from sheom.spectroscopy import weak_spectroscopy_experiment

t0 = time.time()
res = weak_spectroscopy_experiment(
    gammas=[50.0, 20.0, 10.0, 5.0], lam=0.05, beta=0.05,
    n_traj=2000, master_seed=20260810, threads=2,
)
out = {
    "elapsed": time.time() - t0,
    "table": res.table,
    "verdicts": res.verdicts,
}
with open("scratch_trends.json", "w") as fh:
    json.dump(out, fh, indent=1)
print(json.dumps(out, indent=1))
