"""Calibration round 3: spiral ratio gate at the full 2000 iterations.

Reuses /tmp/quick2_o1.ckpt (3000-iter estimator; the real desk one is 20k
iters, so this underestimates the penalty target quality).  Delete me.
"""
import time

import numpy as np

from ndoflow.harness import build_experiment, load_config, run_cell
from ndoflow.ndo import NdoModel

T0 = time.time()


def say(msg):
    print(f"[{(time.time()-T0)/60:5.1f}m] {msg}", flush=True)


model = NdoModel.load("/tmp/quick2_o1.ckpt")
say("loaded cached quick estimator")

cfg = load_config("spiral.json", profile="desk")
es = build_experiment(cfg, "/tmp/quick_run3")
res = {}
for method in ("node", "ndo-node"):
    ins, exs = [], []
    for seed in es.seeds:
        row, wall, curve, pred = run_cell(es, model, method, 0.0, seed)
        ins.append(row[3]); exs.append(row[4])
        say(f"  spiral {method} seed={seed}: in={row[3]:.5f} ex={row[4]:.5f} "
            f"({wall:.0f}s, final train mse {curve[-1][1]:.5f})")
    res[method] = (np.mean(ins), np.mean(exs))
say(f"RATIOS: in {res['ndo-node'][0]/res['node'][0]:.3f} (need <=1.2) "
    f"ex {res['ndo-node'][1]/res['node'][1]:.3f} (need <=0.5)")
say("done")
