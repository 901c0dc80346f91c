"""Command line front end.

    ndoflow run <config.json>            train/evaluate an experiment grid
    ndoflow ablate <kind> <config.json>  lambda_sweep or library_complexity
    ndoflow ndo train <config.json>      pre-train a derivative estimator
    ndoflow ndo eval <checkpoint>        probe a saved estimator
    ndoflow estimate <traj.csv> --ndo X  estimate derivatives of a CSV path

Shared flags: --out (artifact directory), --profile (config profile name,
e.g. desk or paper), --seeds (comma-separated override). Any failure exits
non-zero with a message on stderr.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import harness
from .harness import HarnessError, ablation_probe, load_config
from .ndo import NdoModel, estimate, estimate_chain, segment_estimate


def _parse_seeds(raw):
    if raw is None:
        return None
    try:
        return tuple(int(s) for s in raw.split(",") if s.strip() != "")
    except ValueError:
        raise HarnessError(f"bad --seeds value: {raw!r}") from None


def _out_dir(args, cfg) -> Path:
    if args.out is not None:
        return Path(args.out)
    return Path("runs") / cfg.get("name", "experiment")


def _cmd_run(args) -> int:
    cfg = load_config(args.config, profile=args.profile)
    rows = harness.run_experiment(cfg, _out_dir(args, cfg),
                                  seeds=_parse_seeds(args.seeds))
    if not rows:
        raise HarnessError("every cell failed")
    print(f"wrote {len(rows)} metric rows under {_out_dir(args, cfg)}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = load_config(args.config, profile=args.profile)
    rows = harness.run_ablation(args.kind, cfg, _out_dir(args, cfg),
                                seeds=_parse_seeds(args.seeds))
    print(f"wrote {len(rows)} ablation rows under {_out_dir(args, cfg)}")
    return 0


def _ndo_block(cfg: dict, order: int) -> dict:
    if "ndo" in cfg:
        block = cfg["ndo"].get(f"order{order}")
        if block is None:
            raise HarnessError(f"config has no ndo.order{order} block")
        return dict(block)
    if "library" in cfg:  # bare estimator config
        return dict(cfg)
    raise HarnessError("config carries neither an ndo table nor a library")


def _cmd_ndo_train(args) -> int:
    cfg = load_config(args.config, profile=args.profile)
    out = _out_dir(args, cfg)
    block = _ndo_block(cfg, args.order)
    block.setdefault("checkpoint", f"ndo/order{args.order}.ckpt")
    model = harness._ndo_from_block(block, args.order, out)
    path = Path(block["checkpoint"])
    if not path.is_absolute():
        path = out / path
    print(f"estimator ready: {path}")
    n = sum(p.data.size for p in model.params())
    print(f"order {model.cfg.order}, {n} parameters")
    return 0


def _cmd_ndo_eval(args) -> int:
    model = NdoModel.load(args.checkpoint)
    if model.cfg.order != 1:
        raise HarnessError("the probe evaluation needs an order-1 estimator")
    z = ablation_probe()
    T = np.linspace(0.0, 1.0, args.points)
    D = estimate(model, z(T), T, rescale=not args.raw)
    mse = float(np.mean((np.asarray(D).reshape(-1) - z.derivative(1)(T)) ** 2))
    print(f"probe_mse {mse:.10g}")
    return 0


def _read_traj_csv(path):
    first = open(path).readline()
    has_header = any(c.isalpha() for c in first)
    data = np.loadtxt(path, delimiter=",", skiprows=1 if has_header else 0,
                      ndmin=2)
    if data.shape[1] < 2:
        raise HarnessError("trajectory CSV needs a time column plus states")
    return data[:, 0], data[:, 1:]


def _cmd_estimate(args) -> int:
    T, X = _read_traj_csv(args.traj)
    m1 = NdoModel.load(args.ndo)
    rescale = not args.raw
    if args.segment is not None:
        D1 = segment_estimate(m1, X, T, args.segment, rescale=rescale)
        D2 = None
        if args.ndo2 is not None:
            m2 = NdoModel.load(args.ndo2)
            D2 = segment_estimate(m2, X, T, args.segment, d1=D1,
                                  rescale=rescale)
    elif args.ndo2 is not None:
        m2 = NdoModel.load(args.ndo2)
        D1, D2 = estimate_chain(m1, m2, X, T, rescale=rescale)
    else:
        D1, D2 = estimate(m1, X, T, rescale=rescale), None

    D1 = np.asarray(D1).reshape(len(T), -1)
    cols = [T[:, None], D1]
    header = ["t"] + [f"d1_x{i + 1}" for i in range(D1.shape[1])]
    if D2 is not None:
        D2 = np.asarray(D2).reshape(len(T), -1)
        cols.append(D2)
        header += [f"d2_x{i + 1}" for i in range(D2.shape[1])]
    body = "\n".join(",".join(f"{v:.17g}" for v in row)
                     for row in np.hstack(cols))
    text = ",".join(header) + "\n" + body + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
        print(f"wrote {args.out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ndoflow", description=__doc__,
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seeds=True):
        p.add_argument("--out", default=None, help="artifact directory")
        p.add_argument("--profile", default=None,
                       help="profile overlay from the config (desk, paper)")
        if seeds:
            p.add_argument("--seeds", default=None,
                           help="comma-separated seed override")

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("config")
    common(p)
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("ablate", help="run an ablation sweep")
    p.add_argument("kind", choices=["lambda_sweep", "library_complexity"])
    p.add_argument("config")
    common(p)
    p.set_defaults(fn=_cmd_ablate)

    p = sub.add_parser("ndo", help="estimator utilities")
    nsub = p.add_subparsers(dest="ndo_command", required=True)

    q = nsub.add_parser("train", help="pre-train and checkpoint an estimator")
    q.add_argument("config")
    q.add_argument("--order", type=int, default=1, choices=[1, 2])
    common(q, seeds=False)
    q.set_defaults(fn=_cmd_ndo_train)

    q = nsub.add_parser("eval", help="probe MSE of a saved estimator")
    q.add_argument("checkpoint")
    q.add_argument("--points", type=int, default=100)
    q.add_argument("--raw", action="store_true",
                   help="skip the amplitude rescale before estimating")
    q.set_defaults(fn=_cmd_ndo_eval)

    p = sub.add_parser("estimate", help="estimate derivatives of a CSV path")
    p.add_argument("traj", help="CSV with columns t,x1[,x2,...]")
    p.add_argument("--ndo", required=True, help="order-1 checkpoint")
    p.add_argument("--ndo2", default=None, help="optional order-2 checkpoint")
    p.add_argument("--segment", type=int, default=None,
                   help="standardize in fixed-length chunks")
    p.add_argument("--raw", action="store_true",
                   help="skip the amplitude rescale before estimating")
    p.add_argument("--out", default=None, help="output CSV (default stdout)")
    p.set_defaults(fn=_cmd_estimate)
    return ap


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"ndoflow: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
