"""Scratch calibration run: iteration budgets for the estimator trainings.

Trains desk-profile estimators on sparse libraries and prints probe MSEs
every 500 iterations so acceptance budgets can be pinned. Not part of the
package; delete before committing.
"""
import time

import numpy as np

from ndoflow import autodiff as ad
from ndoflow.dynamics import SystemSpec, closed_form
from ndoflow.funclib import LibraryConfig, dataset_arrays, make_dataset
from ndoflow.ndo import NdoConfig, NdoModel, estimate
from ndoflow.nn import mse
from ndoflow.optim import Adam, CosineAnnealingLR

TOTAL = 6000
STEP = 500
BATCH = 64

# probe for the library-complexity sweep
pt = np.linspace(0.0, 1.0, 100)
pz = np.sin(3 * pt) / 3 + np.sin(15 * pt) / 15 + np.sin(30 * pt) / 30
pdz = np.cos(3 * pt) + np.cos(15 * pt) + np.cos(30 * pt)

# benchmark-trajectory probes for the main library
sp = SystemSpec.default("spiral")
sT = np.linspace(0.0, 5.0, 100)
sX = closed_form(sp, sT)
A = np.array([[sp.params["a"], sp.params["b"]], [sp.params["c"], sp.params["d"]]])
sD = sX @ A.T

op = SystemSpec.default("oscillator")
oT = np.linspace(0.0, 10.0, 100)
oX = closed_form(op, oT)
g, w = op.params["gamma"], op.params["omega"]
oD = np.stack([oX[:, 1], -(w * w + g * g) * oX[:, 0] - 2 * g * oX[:, 1]], axis=1)

fp = SystemSpec.default("stiff1")
fT = np.linspace(0.0, 15.0, 120)
fX = closed_form(fp, fT)
fD = (-1000.0 * fX[:, 0] + 3000.0 - 2000.0 * np.exp(-fT)).reshape(-1, 1)


def probe_mse(model, X, T, D):
    est = estimate(model, X, T, rescale=True)
    return float(np.mean((np.asarray(est).reshape(D.shape) - D) ** 2))


def run(tag, lib, probes):
    cfg = NdoConfig(seed=0)
    model = NdoModel(cfg, rng=np.random.default_rng(cfg.seed))
    data = make_dataset(lib, order=1)
    inp, lab = dataset_arrays(data)
    inp = inp.astype(np.float32)
    lab = lab.astype(np.float32)
    n = len(inp)
    params = model.params()
    opt = Adam(params, lr=3e-3)
    sched = CosineAnnealingLR(3e-3, TOTAL)
    rng = np.random.default_rng(1)
    order = rng.permutation(n)
    cur = 0
    t0 = time.time()
    for it in range(1, TOTAL + 1):
        if cur + BATCH > n:
            order = rng.permutation(n)
            cur = 0
        idx = order[cur:cur + BATCH]
        cur += BATCH
        opt.lr = sched(it - 1)
        with ad.tape():
            pred = model.forward_tensor(ad.Tensor(inp[idx]))
            loss = mse(pred, lab[idx])
            opt.zero_grad()
            loss.backward()
        opt.step()
        if it % STEP == 0:
            msg = " ".join(f"{name}={probe_mse(model, X, T, D):.5f}"
                           for name, X, T, D in probes)
            print(f"{tag} it={it:5d} train={float(loss.data):.5f} {msg} "
                  f"elapsed={(time.time() - t0) / 60:.1f}min", flush=True)
    return model


run("ablP50", LibraryConfig(P=50, Q=3, C=10.0, n_functions=2000, seed=0, sparse=True),
    [("probe", pz, pt, pdz.reshape(-1, 1))])
run("ablP0", LibraryConfig(P=0, Q=3, C=10.0, n_functions=2000, seed=0, sparse=True),
    [("probe", pz, pt, pdz.reshape(-1, 1))])
run("main", LibraryConfig(P=3, Q=50, C=10.0, n_functions=2000, seed=0, sparse=True),
    [("spiral", sX, sT, sD), ("osc", oX, oT, oD), ("stiff1", fX[:, 0], fT, fD)])
