"""Neural ODE training on observed trajectories.

A NodeModel wraps a small fully connected field f(t, x) whose forward pass
runs on the autodiff tape, so trajectories solved with ``integrate_with_grad``
backpropagate into the field weights. ``train`` fits the field to one or
more trajectories by descending the trajectory mismatch, optionally with a
regularizer: a supervised penalty against externally estimated derivatives,
a kinetic penalty on the field norm, or randomized end-time resampling.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ndo import NdoModel, estimate, estimate_chain
from .nn import MLP
from .odeint import (SolverConfig, SolverError, Trajectory, integrate,
                     integrate_with_grad)
from .optim import SGD, Adam, ExponentialLR, RMSprop

__all__ = [
    "NodeError", "NodeModel", "OptimSpec", "TrainSpec", "threebody_features",
    "loss", "train", "predict", "evaluate",
]

REGULARIZERS = ("none", "ndo", "rnode", "steer")
_OPTIMIZERS = ("adam", "rmsprop", "sgd")


class NodeError(ValueError):
    """Bad training setup or data that does not match the model."""


# body pairs for the three-body input map, 0-indexed
_PAIRS = ((0, 1), (0, 2), (1, 2))


def threebody_features(x: Tensor) -> Tensor:
    """45-dim input map for a three-body acceleration field.

    Columns, in order: the 9 raw position coordinates, then for each
    unordered body pair (1,2), (1,3), (2,3) the difference vector
    r_i - r_j scaled by |r_i - r_j|**-k for k = 0, 1, 2, 3, giving twelve
    numbers per pair. Velocities are not part of the map.
    """
    cols = [x[:, :9]]
    for i, j in _PAIRS:
        d = x[:, 3 * i:3 * i + 3] - x[:, 3 * j:3 * j + 3]
        q = ad.tsum(ad.square(d), axis=1) + 1e-12
        inv = ad.reshape(ad.power(q, -0.5), (-1, 1))
        s1 = d * inv
        s2 = s1 * inv
        cols += [d, s1, s2, s2 * inv]
    return ad.concat(cols, axis=1)


class NodeModel:
    """State-space field for a neural ODE.

    ``state_dim`` is the full ODE state dimension. With ``second_order``
    the state is read as [position, velocity] halves and the network
    predicts accelerations, so the field returns [velocity, a(x)]. A
    ``features`` hook (built from autodiff ops, stateless) replaces the raw
    state as network input; ``time_input`` appends t as an extra column for
    non-autonomous systems.
    """

    def __init__(self, state_dim: int, hidden: Sequence[int] = (20,),
                 activation: str = "elu", seed: int = 0,
                 second_order: bool = False, time_input: bool = False,
                 features: Optional[Callable[[Tensor], Tensor]] = None,
                 feature_dim: Optional[int] = None):
        if state_dim < 1:
            raise NodeError("state_dim must be at least 1")
        if second_order and state_dim % 2:
            raise NodeError("a second order state needs [x, v] halves")
        if (features is None) != (feature_dim is None):
            raise NodeError("features and feature_dim go together")
        self.state_dim = int(state_dim)
        self.second_order = bool(second_order)
        self.time_input = bool(time_input)
        self.features = features
        in_dim = int(feature_dim) if features is not None else self.state_dim
        if time_input:
            in_dim += 1
        out_dim = self.state_dim // 2 if second_order else self.state_dim
        self.net = MLP([in_dim, *hidden, out_dim], activation=activation,
                       rng=np.random.default_rng(seed))
        # unobserved initial state components fitted by train(), (B, m)
        self.aux_x0: Optional[np.ndarray] = None

    def params(self) -> list[Tensor]:
        return self.net.params()

    def rates(self, x: Tensor, t) -> Tensor:
        """Field output for a batch of states x (B, state_dim). t is a
        scalar or a length-B vector and is only read under time_input."""
        inp = self.features(x) if self.features is not None else x
        if self.time_input:
            tt = t.reshape(-1, 1) if isinstance(t, np.ndarray) else t
            inp = ad.concat([inp, x[:, :1] * 0.0 + tt], axis=1)
        out = self.net(inp)
        if self.second_order:
            out = ad.concat([x[:, self.state_dim // 2:], out], axis=1)
        return out

    def field(self, t, x):
        """Solver-facing f(t, x); accepts Tensors on the tape or plain
        arrays, batched (B, D) or flat (D,)."""
        if isinstance(x, Tensor):
            return self._field_tensor(t, x)
        with ad.no_grad():
            out = self._field_tensor(t, Tensor(np.asarray(x, dtype=np.float64)))
        return out.data

    def _field_tensor(self, t, x: Tensor) -> Tensor:
        if x.data.ndim == 1:
            return ad.reshape(self.rates(ad.reshape(x, (1, -1)), t), (-1,))
        return self.rates(x, t)

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.net.layers):
            out[f"net{i}.w"] = layer.w.data.copy()
            out[f"net{i}.b"] = layer.b.data.copy()
        if self.aux_x0 is not None:
            out["aux_x0"] = self.aux_x0.copy()
        return out

    def load_state(self, arrays: dict) -> None:
        for i, layer in enumerate(self.net.layers):
            for name, p in ((f"net{i}.w", layer.w), (f"net{i}.b", layer.b)):
                a = np.asarray(arrays[name])
                if a.shape != p.data.shape:
                    raise NodeError(f"shape mismatch for {name}")
                p.data = a.astype(p.data.dtype)
        if "aux_x0" in arrays:
            self.aux_x0 = np.asarray(arrays["aux_x0"], dtype=np.float64)


@dataclass(frozen=True)
class OptimSpec:
    """Optimizer choice with a per-iteration exponential lr decay."""
    kind: str = "adam"
    lr: float = 0.1
    gamma: float = 1.0

    def __post_init__(self):
        if self.kind not in _OPTIMIZERS:
            raise NodeError(f"unknown optimizer '{self.kind}'")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise NodeError("lr must be positive")
        if not (0 < self.gamma <= 1):
            raise NodeError("gamma must lie in (0, 1]")

    def build(self, params: list) -> tuple:
        cls = {"adam": Adam, "rmsprop": RMSprop, "sgd": SGD}[self.kind]
        return cls(params, lr=self.lr), ExponentialLR(self.lr, self.gamma)


@dataclass(frozen=True)
class TrainSpec:
    """Everything train() needs besides the data and the model."""
    regularizer: str = "none"
    lam: float = 0.0
    steer_b: float = 0.0
    iterations: int = 2000
    optimizer: OptimSpec = field(default_factory=OptimSpec)
    solver: SolverConfig = field(default_factory=SolverConfig)
    seed: int = 0
    ndo_rescale: bool = False  # rescale trajectories before estimating

    def __post_init__(self):
        if self.regularizer not in REGULARIZERS:
            raise NodeError(f"unknown regularizer '{self.regularizer}'")
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise NodeError("lam must be finite and non-negative")
        if not (self.steer_b >= 0 and math.isfinite(self.steer_b)):
            raise NodeError("steer_b must be finite and non-negative")
        if self.iterations < 0:
            raise NodeError("iterations must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainSpec":
        d = dict(d)
        if isinstance(d.get("optimizer"), dict):
            d["optimizer"] = OptimSpec(**d["optimizer"])
        if isinstance(d.get("solver"), dict):
            d["solver"] = SolverConfig(**d["solver"])
        return cls(**d)


class _Setup:
    """Precomputed constants shared by every loss evaluation of a run."""
    __slots__ = ("t0", "query_times", "x0_obs", "target", "n_steps", "batch",
                 "m_obs", "positions_only", "v0", "pen_x", "pen_t",
                 "pen_target", "rnode", "d1")


def _as_trajectories(trajectories) -> list:
    if isinstance(trajectories, Trajectory):
        return [trajectories]
    trajs = list(trajectories)
    if not trajs:
        raise NodeError("no trajectories given")
    T = trajs[0].times
    for tr in trajs[1:]:
        if not np.array_equal(tr.times, T):
            raise NodeError("trajectories must share one time grid")
        if tr.dim != trajs[0].dim:
            raise NodeError("trajectories must share a state dimension")
    return trajs


def _prepare(model: NodeModel, trajectories, spec: TrainSpec, ndo) -> _Setup:
    trajs = _as_trajectories(trajectories)
    T = trajs[0].times
    if len(T) < 2:
        raise NodeError("need at least two sample times")
    X = np.stack([tr.states for tr in trajs])  # (B, N+1, d_obs)
    B, _, d_obs = X.shape
    m = model.state_dim // 2
    positions_only = model.second_order and d_obs == m
    if not positions_only and d_obs != model.state_dim:
        raise NodeError(f"trajectory dimension {d_obs} does not match "
                        f"state_dim {model.state_dim}")
    if spec.regularizer == "ndo" and ndo is None:
        raise NodeError("the ndo regime needs derivative estimators")
    if spec.regularizer == "steer" and spec.steer_b > 0:
        if spec.steer_b >= float(T[-1] - T[-2]):
            raise NodeError("steer_b must stay below the final sample gap")

    s = _Setup()
    s.t0 = float(T[0])
    s.query_times = T[1:].copy()
    s.n_steps = len(T) - 1
    s.batch = B
    s.m_obs = d_obs
    s.positions_only = positions_only
    s.x0_obs = X[:, 0, :]
    s.target = Tensor(X[:, 1:, :].transpose(1, 0, 2))  # (N, B, d_obs)
    s.v0 = None
    s.pen_x = s.pen_t = s.pen_target = s.d1 = None
    s.rnode = spec.regularizer == "rnode" and spec.lam > 0

    ndo_active = spec.regularizer == "ndo" and spec.lam > 0
    if ndo_active:
        if positions_only:
            if not isinstance(ndo, (tuple, list)) or len(ndo) != 2:
                raise NodeError("position-only states need an "
                                "(order-1, order-2) estimator pair")
            m1, m2 = ndo
            pairs = [estimate_chain(m1, m2, X[b], T, rescale=spec.ndo_rescale)
                     for b in range(B)]
            d1 = np.stack([p[0] for p in pairs]).astype(np.float64)
            d2 = np.stack([p[1] for p in pairs]).astype(np.float64)
            s.d1 = d1
            lifted = np.concatenate([X, d1], axis=2)  # (B, N+1, 2m)
            pen_target = np.concatenate([d1, d2], axis=2)
        else:
            mdl = ndo[0] if isinstance(ndo, (tuple, list)) else ndo
            if not isinstance(mdl, NdoModel):
                raise NodeError("ndo must be an estimator model")
            pen_target = np.stack([estimate(mdl, X[b], T,
                                            rescale=spec.ndo_rescale)
                                   for b in range(B)])
            pen_target = pen_target.astype(np.float64).reshape(X.shape)
            lifted = X
        s.pen_x = Tensor(lifted.reshape(-1, model.state_dim))
        s.pen_t = np.tile(T, B)
        s.pen_target = Tensor(pen_target.reshape(-1, model.state_dim))
    elif s.rnode:
        if positions_only:
            raise NodeError("the rnode regime needs the full state observed")
        s.pen_x = Tensor(X.reshape(-1, model.state_dim))
        s.pen_t = np.tile(T, B)

    if positions_only:
        if ndo_active:
            v0_init = s.d1[:, 0, :]
        else:
            v0_init = (X[:, 1, :] - X[:, 0, :]) / float(T[1] - T[0])
        s.v0 = ad.parameter(v0_init.astype(np.float64))
    return s


def _tape_loss(model: NodeModel, s: _Setup, spec: TrainSpec,
               end_time: Optional[float]) -> tuple[Tensor, Tensor]:
    times_q = s.query_times
    if end_time is not None:
        times_q = np.concatenate([times_q[:-1], [float(end_time)]])
    if s.v0 is not None:
        x0 = ad.concat([Tensor(s.x0_obs), s.v0], axis=1)
    else:
        x0 = Tensor(s.x0_obs)
    xp = integrate_with_grad(model.field, x0, s.t0, times_q, spec.solver)
    pred = xp[:, :, :s.m_obs] if s.positions_only else xp
    data = ad.tsum(ad.square(pred - s.target)) * (1.0 / (s.n_steps * s.batch))
    total = data
    if s.pen_target is not None:
        r = model.rates(s.pen_x, s.pen_t)
        total = data + ad.tsum(ad.square(r - s.pen_target)) * (spec.lam / s.batch)
    elif s.rnode:
        r = model.rates(s.pen_x, s.pen_t)
        total = data + ad.tsum(ad.square(r)) * (spec.lam / s.batch)
    return data, total


def loss(model: NodeModel, trajectories, spec: TrainSpec, ndo=None,
         end_time: Optional[float] = None) -> tuple[Tensor, Tensor]:
    """One tape evaluation of the training objective.

    Returns (trajectory term, total) as Tensors. The trajectory term is the
    mean over query times (and trajectories) of the squared state mismatch;
    the total adds the active penalty. end_time overrides the final query
    time, which the steer regime resamples each iteration.
    """
    s = _prepare(model, trajectories, spec, ndo)
    return _tape_loss(model, s, spec, end_time)


def train(model: NodeModel, trajectories, spec: TrainSpec, ndo=None,
          ) -> tuple[NodeModel, list[tuple[int, float, float]]]:
    """Fit the field to observed trajectories.

    trajectories is a Trajectory or a sequence sharing one time grid (the
    batch integrates as one stacked system). ndo supplies derivative
    estimators for the ndo regime: one order-1 model when the full state is
    observed, or an (order-1, order-2) pair when only positions are
    observed, in which case the unobserved velocities are lifted from the
    chain estimates and the initial velocity becomes a trainable parameter.
    Derivatives are estimated once, before the first iteration.

    Returns (model, curve); curve rows are (iteration, trajectory mse,
    total loss). An iteration whose solve fails is skipped and logged as
    NaN; the run aborts once failures pass 10% of the schedule.
    """
    s = _prepare(model, trajectories, spec, ndo)
    params = model.params() + ([s.v0] if s.v0 is not None else [])
    opt, sched = spec.optimizer.build(params)
    rng = np.random.default_rng(spec.seed)
    steer = spec.regularizer == "steer" and spec.steer_b > 0
    t_last = s.query_times[-1]

    curve: list[tuple[int, float, float]] = []
    skipped = 0
    for it in range(spec.iterations):
        end_time = None
        if steer:
            end_time = rng.uniform(t_last - spec.steer_b, t_last + spec.steer_b)
        opt.lr = sched(it)
        try:
            with ad.tape():
                data, total = _tape_loss(model, s, spec, end_time)
                opt.zero_grad()
                total.backward()
            opt.step()
        except (SolverError, ad.AutodiffError):
            skipped += 1
            curve.append((it, math.nan, math.nan))
            if skipped > 0.1 * spec.iterations:
                raise NodeError(f"solver failed on {skipped} of {it + 1} "
                                "iterations") from None
            continue
        curve.append((it, float(data.data), float(total.data)))

    if s.v0 is not None:
        model.aux_x0 = s.v0.data.copy()
    return model, curve


def predict(model: NodeModel, x0, t0: float, query_times,
            cfg: Optional[SolverConfig] = None) -> Trajectory:
    """Integrate the trained field from x0 without touching the tape.

    x0 is the full state; query times of exactly [t0] return x0."""
    cfg = SolverConfig() if cfg is None else cfg
    x0 = np.asarray(x0, dtype=np.float64).reshape(-1)
    if x0.shape[0] != model.state_dim:
        raise NodeError(f"x0 has dimension {x0.shape[0]}, "
                        f"expected {model.state_dim}")
    return integrate(model.field, x0, t0, query_times, cfg)


def evaluate(pred: Trajectory, truth: Trajectory, split_time: float,
             dims: Optional[Sequence[int]] = None) -> tuple[float, float]:
    """Interpolation and extrapolation MSE split at split_time.

    Grids must match exactly. dims restricts scoring to the listed state
    components of both trajectories (position-only systems score dim 0).
    Each side is the mean over its time points and scored dimensions.
    """
    if not np.array_equal(pred.times, truth.times):
        raise NodeError("prediction and truth grids differ")
    a, b = pred.states, truth.states
    if dims is not None:
        idx = list(dims)
        a, b = a[:, idx], b[:, idx]
    if a.shape != b.shape:
        raise NodeError("state dimensions differ")
    inside = pred.times <= split_time
    if not inside.any() or inside.all():
        raise NodeError("split_time must fall inside the time grid")
    sq = (a - b) ** 2
    return float(sq[inside].mean()), float(sq[~inside].mean())
