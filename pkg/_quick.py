"""Calibration round 2: trig-50 / poly-3 main library.  Delete me.

1. 3000-iteration estimator (desk arch, P=50 Q=3) -> /tmp/quick2_o1.ckpt
2. derivative-estimate quality on spiral / oscillator / stiff1 data
3. spiral ratio gate (node vs ndo-node, 3 seeds, 1000 iters) with it
"""
import os
import time

import numpy as np

from ndoflow import dynamics, noderun
from ndoflow.funclib import LibraryConfig, make_dataset
from ndoflow.harness import (_build_node_model, _train_spec, build_experiment,
                             load_config, make_observations, run_cell)
from ndoflow.ndo import NdoConfig, NdoModel, NdoTrainConfig, estimate, train_ndo

T0 = time.time()


def say(msg):
    print(f"[{(time.time()-T0)/60:5.1f}m] {msg}", flush=True)


if os.path.exists("/tmp/quick2_o1.ckpt"):
    model = NdoModel.load("/tmp/quick2_o1.ckpt")
    say("loaded cached quick estimator")
else:
    lib = LibraryConfig(P=50, Q=3, C=10.0, n_functions=2000, n_points=100,
                        seed=0, sparse=True)
    cfg = NdoConfig(order=1, lstm_units=(64, 64), head=(64, 32, 16),
                    dtype="float32", seed=0)
    tcfg = NdoTrainConfig(iterations=3000, batch_size=64, lr=3e-3,
                          eval_every=500, seed=0)
    say("training quick estimator (3000 iters, P=50 Q=3)")
    model, curve = train_ndo(make_dataset(lib, order=1), cfg, tcfg)
    model.library = lib
    model.save("/tmp/quick2_o1.ckpt")
    say(f"trained; val curve tail {curve[-1]}")

say("estimate quality:")
for name in ("spiral", "oscillator", "stiff1"):
    spec = dynamics.SystemSpec.default(name)
    rng = np.random.default_rng(0)
    tr = dynamics.make_truth(spec, "train", rng=rng)
    f = dynamics.make_field(spec)
    truth = np.stack([f(t, x) for t, x in zip(tr.times, tr.states)])
    for rescale in (False, True):
        D = estimate(model, tr.states, tr.times, rescale=rescale)
        mse = float(np.mean((D - truth) ** 2))
        rel = mse / float(np.mean(truth ** 2))
        say(f"  {name:10s} rescale={rescale}: mse={mse:.5f} rel={rel:.5f}")

cfg = load_config("spiral.json", profile="desk")
cfg["train"]["iterations"] = 1000
es = build_experiment(cfg, "/tmp/quick_run")
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
