"""Initial value problem solvers: classic RK4 and adaptive Dormand-Prince 5(4).

Both run in two modes. The plain mode takes numpy states and is used for
ground-truth generation and prediction. The tape mode takes Tensor states
so a loss on the solution differentiates back to the field parameters and
the initial state (discretize-then-optimize: gradients of the discrete
steps actually taken). The step-size controller itself stays on the tape,
so gradients also account for how parameter changes move the accepted step
sizes; the discrete accept/reject decisions are the only frozen part.

Dense output inside an accepted step is the standard Dormand-Prince
4th-order interpolant: a quartic Hermite-Birkhoff polynomial over the seven
stages that matches y0, y1 and the endpoint derivatives (identities checked
in the tests), evaluated for every query time the step passed over. Fields
are callables ``f(t, x)`` returning ``dx/dt`` with the same type and shape
as ``x``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

State = Union[np.ndarray, Tensor]
Field = Callable[[State, State], State]


class SolverError(RuntimeError):
    """Step budget exhausted, step underflow, or non-finite field output."""


@dataclass
class Trajectory:
    """Sampled path: times (N,), states (N, D). Times strictly increase."""
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        if self.times.ndim != 1 or self.states.shape[0] != self.times.shape[0]:
            raise ValueError("trajectory needs times (N,) and states (N, D)")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory times must strictly increase")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("trajectory states must be finite")

    @property
    def dim(self) -> int:
        return self.states.shape[1]


def trajectory_to_csv(traj: Trajectory, path: str) -> None:
    """Header t,x1,...,xD; 17 significant digits so float64 round-trips."""
    d = traj.dim
    header = "t," + ",".join(f"x{i + 1}" for i in range(d))
    with open(path, "w", encoding="utf-8") as f:
        f.write(header + "\n")
        for t, row in zip(traj.times, traj.states):
            f.write(",".join(repr(float(v)) for v in (t, *row)) + "\n")


def trajectory_from_csv(path: str) -> Trajectory:
    with open(path, "r", encoding="utf-8") as f:
        header = f.readline().strip().split(",")
        if not header or header[0] != "t" or len(header) < 2:
            raise ValueError(f"{path}: expected header t,x1,...,xD")
        rows = []
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
    data = np.asarray(rows, dtype=np.float64)
    if data.size == 0:
        raise ValueError(f"{path}: no data rows")
    t = data[:, 0]
    bad = np.nonzero(np.diff(t) <= 0)[0]
    if bad.size:
        raise ValueError(f"{path}:{int(bad[0]) + 3}: time stamps must strictly increase")
    return Trajectory(times=t, states=data[:, 1:])


@dataclass
class SolverConfig:
    method: str = "dopri5"
    rtol: float = 1e-6
    atol: float = 1e-8
    initial_step: Optional[float] = None  # dopri5: startup heuristic when None;
                                          # rk4: required, the fixed step size
    max_steps: int = 200_000
    safety: float = 0.9
    min_factor: float = 0.2
    max_factor: float = 5.0

    def __post_init__(self):
        if self.method not in ("rk4", "dopri5"):
            raise ValueError(f"unknown solver method '{self.method}'")
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("rtol and atol must be positive")
        if self.max_steps <= 0:
            raise ValueError("max_steps must be positive")
        if self.method == "rk4" and self.initial_step is None:
            raise ValueError("rk4 needs a fixed step size (initial_step)")


# Dormand-Prince 5(4) tableau. E is b5 - b4: dotting it with the stages
# gives the embedded error estimate directly.
_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0)
_DP_A = (
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
)
_DP_B = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84)
_DP_E = (71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40)
# Dense-output matrix: y(theta) = y0 + h * sum_i k_i * (P_i . [theta..theta^4]).
# Row sums equal _DP_B (+0 for k7) and the first column is e1, so the
# interpolant reproduces y1 at theta=1 and f0/f1 at the step ends.
_DP_P = (
    (1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432),
    (0.0, 0.0, 0.0, 0.0),
    (0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799),
    (0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072),
    (0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632),
    (0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844),
    (0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423),
)


def _is_tensor(x) -> bool:
    return isinstance(x, Tensor)


def _np_err_norm(err, y0, y1, rtol, atol) -> float:
    scale = atol + rtol * np.maximum(np.abs(y0), np.abs(y1))
    with np.errstate(invalid="ignore", over="ignore"):
        return float(np.sqrt(np.mean(np.square(err / scale))))


def _tensor_err_norm(err: Tensor, y0: Tensor, y1: Tensor, rtol, atol) -> Tensor:
    scale = ad.maximum(ad.absolute(y0), ad.absolute(y1)) * rtol + atol
    return ad.sqrt(ad.tmean(ad.square(err / scale)))


def _dense_eval(y0, k, h, theta):
    """Dormand-Prince dense output at fraction theta of the accepted step.
    Works for float or Tensor theta/h (Horner in theta per stage)."""
    acc = None
    for ki, row in zip(k, _DP_P):
        if row[0] == 0.0 and row[1] == 0.0 and row[2] == 0.0 and row[3] == 0.0:
            continue
        w = row[3]
        for p in (row[2], row[1], row[0]):
            w = w * theta + p
        w = w * theta
        if isinstance(w, (int, float)) and w == 0.0:
            continue
        term = ki * w
        acc = term if acc is None else acc + term
    return y0 + acc * h


def _initial_step(f0, x0_np, t0: float, rtol: float, atol: float,
                  f_np: Callable) -> float:
    """Hairer-style startup heuristic, computed in plain numpy."""
    if not np.all(np.isfinite(f0)):
        raise SolverError(f"non-finite field output near t={t0:g}")
    scale = atol + rtol * np.abs(x0_np)
    d0 = float(np.sqrt(np.mean(np.square(x0_np / scale))))
    d1 = float(np.sqrt(np.mean(np.square(f0 / scale))))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    y1 = x0_np + h0 * f0
    f1 = np.asarray(f_np(t0 + h0, y1), dtype=np.float64)
    d2 = float(np.sqrt(np.mean(np.square((f1 - f0) / scale)))) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1)


def _as_float(x) -> float:
    return float(x.data) if _is_tensor(x) else float(x)


def _dopri5(field: Field, x0: State, times: np.ndarray, cfg: SolverConfig) -> list:
    tape_mode = _is_tensor(x0)
    t_end = float(times[-1])

    def f_np(t, y):
        if tape_mode:
            with ad.no_grad():
                return field(Tensor(np.asarray(t)), Tensor(np.asarray(y))).data
        return field(t, y)

    x0_np = x0.data if tape_mode else np.asarray(x0, dtype=np.float64)
    t = Tensor(times[0]) if tape_mode else float(times[0])
    y = x0
    f_now = field(t, y)
    if cfg.initial_step is not None:
        h_f = float(cfg.initial_step)
    else:
        h_f = _initial_step(np.asarray(f_now.data if tape_mode else f_now, dtype=np.float64),
                            x0_np, float(times[0]), cfg.rtol, cfg.atol, f_np)
    h_f = min(h_f, t_end - float(times[0]))
    h = Tensor(h_f) if tape_mode else h_f

    out = [y]
    qi = 1  # next query index to fill
    nsteps = 0
    while qi < len(times):
        t_f = _as_float(t)
        if nsteps >= cfg.max_steps:
            raise SolverError(f"dopri5 exceeded max_steps={cfg.max_steps} at t={t_f:g}")
        if t_f + h_f <= t_f:
            raise SolverError(f"dopri5 step size underflow at t={t_f:g}")
        if t_f + h_f > t_end:
            h = t_end - t if tape_mode else t_end - t_f
            h_f = t_end - t_f

        try:
            k = [f_now]
            for row, c in zip(_DP_A, _DP_C[1:]):
                acc = k[0] * row[0]
                for a, kj in zip(row[1:], k[1:]):
                    if a != 0.0:
                        acc = acc + kj * a
                k.append(field(t + h * c, y + acc * h))
            acc_b = k[0] * _DP_B[0]
            for b, kj in zip(_DP_B[1:], k[1:]):
                if b != 0.0:
                    acc_b = acc_b + kj * b
            y1 = y + acc_b * h
            f_new = field(t + h, y1)  # FSAL stage, reused as k1 after acceptance
            k.append(f_new)
        except ad.NonFiniteError as e:
            raise SolverError(f"non-finite field output near t={t_f:g}") from e
        acc_e = k[0] * _DP_E[0]
        for e_c, kj in zip(_DP_E[1:], k[1:]):
            if e_c != 0.0:
                acc_e = acc_e + kj * e_c
        err = acc_e * h

        if tape_mode:
            en_t = _tensor_err_norm(err, y, y1, cfg.rtol, cfg.atol)
            en = float(en_t.data)
        else:
            en = _np_err_norm(err, y, y1, cfg.rtol, cfg.atol)
            if not math.isfinite(en):
                raise SolverError(f"non-finite field output near t={t_f:g}")
        nsteps += 1

        if en <= 1.0:  # accept
            t_new = t + h
            t_new_f = _as_float(t_new)
            tol_t = 1e-14 * max(1.0, abs(t_new_f))
            while qi < len(times) and times[qi] <= t_new_f + tol_t:
                tq = times[qi]
                if abs(tq - t_new_f) <= tol_t:
                    out.append(y1)
                else:
                    theta = (tq - t) / h if tape_mode else (tq - t_f) / h_f
                    out.append(_dense_eval(y, k, h, theta))
                qi += 1
            y, t, f_now = y1, t_new, f_new

        # controller update (gradient flows through the factor in tape mode)
        if en <= 1e-200:
            h = h * cfg.max_factor
        else:
            if tape_mode:
                factor_t = ad.clip(ad.power(en_t, -0.2) * cfg.safety,
                                   cfg.min_factor, cfg.max_factor)
                if en > 1.0:
                    factor_t = ad.clip(factor_t, 0.0, 1.0)
                h = h * factor_t
            else:
                factor = min(max(cfg.safety * en ** -0.2, cfg.min_factor), cfg.max_factor)
                if en > 1.0:
                    factor = min(factor, 1.0)
                h = h * factor
        h_f = _as_float(h)
    return out


def _rk4(field: Field, x0: State, times: np.ndarray, cfg: SolverConfig) -> list:
    """Fixed-step RK4. Each gap between consecutive query times is split
    into equal substeps no longer than cfg.initial_step."""
    tape_mode = _is_tensor(x0)
    y = x0
    out = [y]
    total = 0
    for i in range(len(times) - 1):
        gap = float(times[i + 1] - times[i])
        n_sub = max(1, math.ceil(gap / cfg.initial_step - 1e-12))
        h = gap / n_sub
        total += n_sub
        if total > cfg.max_steps:
            raise SolverError(f"rk4 exceeded max_steps={cfg.max_steps} at t={times[i]:g}")
        try:
            for j in range(n_sub):
                t_f = float(times[i]) + j * h
                t = Tensor(t_f) if tape_mode else t_f
                k1 = field(t, y)
                k2 = field(t + h / 2, y + k1 * (h / 2))
                k3 = field(t + h / 2, y + k2 * (h / 2))
                k4 = field(t + h, y + k3 * h)
                y = y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
        except ad.NonFiniteError as e:
            raise SolverError(f"non-finite field output near t={times[i]:g}") from e
        if not tape_mode and not np.all(np.isfinite(np.asarray(y))):
            raise SolverError(f"non-finite field output near t={times[i]:g}")
        out.append(y)
    return out


def _prep_times(t0: float, query_times) -> tuple[np.ndarray, bool]:
    """Full integration grid starting at t0; flag says t0 was prepended."""
    q = np.asarray(query_times, dtype=np.float64)
    if q.ndim != 1 or len(q) == 0:
        raise ValueError("query_times must be a non-empty 1-D array")
    if np.any(np.diff(q) <= 0):
        raise ValueError("query_times must strictly increase")
    if q[0] < t0:
        raise ValueError(f"query_times start before t0={t0:g}")
    if q[0] == t0:
        return q, False
    return np.concatenate([[t0], q]), True


def _solve(field: Field, x0: State, t0: float, query_times, cfg: SolverConfig) -> list:
    times, prepended = _prep_times(float(t0), query_times)
    if len(times) == 1:  # query is exactly [t0]
        return [x0]
    stepper = _rk4 if cfg.method == "rk4" else _dopri5
    states = stepper(field, x0, times, cfg)
    return states[1:] if prepended else states


def integrate(field: Field, x0: np.ndarray, t0: float, query_times,
              cfg: SolverConfig) -> Trajectory:
    """Plain-numpy solve; states returned at exactly the query times."""
    x0 = np.asarray(x0, dtype=np.float64)
    with ad.no_grad():
        states = _solve(field, x0, t0, query_times, cfg)
    flat = [np.asarray(s, dtype=np.float64).reshape(-1) for s in states]
    return Trajectory(times=np.asarray(query_times, dtype=np.float64),
                      states=np.stack(flat))


def integrate_batch(field: Field, x0: np.ndarray, t0: float, query_times,
                    cfg: SolverConfig) -> np.ndarray:
    """As integrate but keeps the state shape (for batched (B, D) states);
    returns an array (N, *x0.shape)."""
    x0 = np.asarray(x0, dtype=np.float64)
    with ad.no_grad():
        states = _solve(field, x0, t0, query_times, cfg)
    return np.stack([np.asarray(s, dtype=np.float64) for s in states])


def integrate_with_grad(field: Field, x0: Tensor, t0: float, query_times,
                        cfg: SolverConfig) -> Tensor:
    """Tape-mode solve; returns states stacked as a Tensor (N, *x0.shape),
    differentiable w.r.t. the field parameters and x0."""
    if not _is_tensor(x0):
        raise TypeError("integrate_with_grad needs a Tensor initial state")
    states = _solve(field, x0, t0, query_times, cfg)
    return ad.stack(states, axis=0)


def reference_solve(field: Field, x0: np.ndarray, t0: float, query_times,
                    rtol: float = 1e-10, atol: float = 1e-12) -> Trajectory:
    """Tight-tolerance generator for ground truth and test oracles."""
    cfg = SolverConfig(method="dopri5", rtol=rtol, atol=atol, max_steps=5_000_000)
    return integrate(field, x0, t0, query_times, cfg)
