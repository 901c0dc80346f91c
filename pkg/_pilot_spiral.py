"""Pilot: spiral sigma=0 ratio gate with exact derivatives standing in for
the estimator (best case), plus a reduced-iteration sweep.  Delete me."""
import sys
import time

import numpy as np

from ndoflow import dynamics, noderun
from ndoflow.harness import (_build_node_model, _train_spec, build_experiment,
                             load_config, make_observations)
from ndoflow.noderun import evaluate
from ndoflow.odeint import Trajectory, integrate_batch


def exact_estimate(mdl, X, T):
    # spiral field applied to the observed states
    f = dynamics.make_field(SYS)
    return np.stack([f(t, x) for t, x in zip(T, X)])


noderun.estimate = lambda mdl, X, T, d1=None, rescale=False: exact_estimate(mdl, X, T)

cfg = load_config("spiral.json", profile="desk")
for iters in (1000, 2000):
    cfg["train"]["iterations"] = iters
    es = build_experiment(cfg, "/tmp/pilot_spiral")
    SYS = es.system
    for method in ("node", "ndo-node"):
        for seed in es.seeds:
            t0 = time.time()
            trajs = make_observations(es, 0.0, seed)
            ts = _train_spec(es, method, 0.0, seed,
                             final_gap=float(trajs[0].times[-1] - trajs[0].times[-2]))
            model = _build_node_model(es, seed)
            model, curve = noderun.train(model, trajs, ts,
                                         ndo="exact" if method == "ndo-node" else None)
            tg = dynamics.test_grid(SYS)
            pred = integrate_batch(model.field, trajs[0].states[0], 0.0, tg, ts.solver)
            truth = dynamics.make_truth(SYS, "test")
            i, e = evaluate(Trajectory(times=tg, states=pred[:, 0, :]), truth,
                            SYS.train_end)
            print(f"it={iters} {method} seed={seed} in={i:.6f} ex={e:.6f} "
                  f"train_mse={curve[-1][1]:.5f} {time.time()-t0:.0f}s",
                  flush=True)
