"""Derivative estimation from sampled trajectories.

A bidirectional recurrent model is pre-trained on the symbolic function
library to map (states, times, gaps) sequences to derivative values,
then reused as a frozen estimator on arbitrary trajectories. Estimation
standardizes the time window to [0, 1] (shift the first time to zero,
divide by the window length, scale the output back by the chain rule),
so a model trained on unit windows serves any window length. The bound
machinery at the bottom decomposes the estimator's error on symbolic
probes and checks the observed error against the decomposition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import funclib, nn
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .funclib import LibraryConfig, SymbolicFunction
from .optim import Adam, CosineAnnealingLR


class NdoError(ValueError):
    pass


_DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class NdoConfig:
    """Estimator architecture. order 1 consumes (X, T, dT) per channel and
    predicts first derivatives; order 2 consumes (X', X, T, dT) and
    predicts second derivatives."""
    order: int = 1
    channels: int = 1
    lstm_units: tuple = (64, 64)
    head: tuple = (64, 32, 16)
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if self.order not in (1, 2):
            raise NdoError("order must be 1 or 2")
        if self.channels < 1:
            raise NdoError("channels must be >= 1")
        if not self.lstm_units or any(u < 1 for u in self.lstm_units):
            raise NdoError("lstm_units must be positive")
        if any(w < 1 for w in self.head):
            raise NdoError("head widths must be positive")
        if self.dtype not in _DTYPES:
            raise NdoError(f"dtype must be one of {sorted(_DTYPES)}")
        object.__setattr__(self, "lstm_units", tuple(int(u) for u in self.lstm_units))
        object.__setattr__(self, "head", tuple(int(w) for w in self.head))

    @property
    def in_features(self) -> int:
        extra = self.channels if self.order == 2 else 0
        return self.channels + extra + 2

    def to_dict(self) -> dict:
        return {"order": self.order, "channels": self.channels,
                "lstm_units": list(self.lstm_units), "head": list(self.head),
                "dtype": self.dtype, "seed": self.seed}

    @staticmethod
    def from_dict(d: dict) -> "NdoConfig":
        d = dict(d)
        for k in ("lstm_units", "head"):
            if k in d:
                d[k] = tuple(d[k])
        return NdoConfig(**d)


@dataclass(frozen=True)
class NdoTrainConfig:
    iterations: int = 20_000
    batch_size: int = 64
    lr: float = 3e-3
    val_fraction: float = 0.05
    eval_every: int = 500
    val_stop: float = 0.0      # stop once val MSE falls below; 0 disables
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1 or self.lr <= 0:
            raise NdoError("bad training settings")
        if not 0.0 <= self.val_fraction < 1.0:
            raise NdoError("val_fraction must be in [0, 1)")
        if self.eval_every < 1:
            raise NdoError("eval_every must be >= 1")

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "batch_size": self.batch_size,
                "lr": self.lr, "val_fraction": self.val_fraction,
                "eval_every": self.eval_every, "val_stop": self.val_stop,
                "seed": self.seed}

    @staticmethod
    def from_dict(d: dict) -> "NdoTrainConfig":
        return NdoTrainConfig(**d)


class NdoModel:
    """Stacked bidirectional LSTM backbone with a pointwise ReLU head.

    The model is pure: no state persists between calls, so identical
    input sequences give identical outputs and one instance may serve
    concurrent readers.
    """

    def __init__(self, cfg: NdoConfig, rng: Optional[np.random.Generator] = None,
                 library: Optional[LibraryConfig] = None):
        self.cfg = cfg
        self.library = library
        self.np_dtype = _DTYPES[cfg.dtype]
        if rng is None:
            rng = np.random.default_rng(cfg.seed)
        self.lstms = []
        feats = cfg.in_features
        for units in cfg.lstm_units:
            self.lstms.append(nn.LSTM(feats, units, rng, dtype=self.np_dtype))
            feats = 2 * units
        self.head = nn.MLP([feats, *cfg.head, cfg.channels],
                           activation="relu", rng=rng, dtype=self.np_dtype)

    def params(self) -> list[Tensor]:
        ps = [p for layer in self.lstms for p in layer.params()]
        return ps + self.head.params()

    def forward_tensor(self, x: Tensor) -> Tensor:
        B, N, F = x.data.shape
        if F != self.cfg.in_features:
            raise NdoError(f"expected {self.cfg.in_features} features, got {F}")
        seq = x
        for layer in self.lstms:
            seq = layer(seq)
        flat = ad.reshape(seq, (B * N, seq.data.shape[2]))
        out = self.head(flat)
        return ad.reshape(out, (B, N, self.cfg.channels))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        with ad.no_grad():
            out = self.forward_tensor(Tensor(np.asarray(x, dtype=self.np_dtype)))
        return out.data

    # checkpoint layout: one array per weight, keyed by layer position
    def _state(self) -> dict:
        arrays = {}
        for k, layer in enumerate(self.lstms):
            arrays[f"lstm{k}.w_ih"] = layer.w_ih.data
            arrays[f"lstm{k}.w_hh"] = layer.w_hh.data
            arrays[f"lstm{k}.bias"] = layer.bias.data
        for k, lin in enumerate(self.head.layers):
            arrays[f"head{k}.w"] = lin.w.data
            arrays[f"head{k}.b"] = lin.b.data
        return arrays

    def _load_state(self, arrays: dict) -> None:
        for name, p in self._named_params():
            if name not in arrays:
                raise NdoError(f"checkpoint missing array '{name}'")
            arr = arrays[name]
            if arr.shape != p.data.shape:
                raise NdoError(f"shape mismatch for '{name}': "
                               f"{arr.shape} vs {p.data.shape}")
            p.data = arr.astype(self.np_dtype)

    def _named_params(self):
        out = []
        for k, layer in enumerate(self.lstms):
            out += [(f"lstm{k}.w_ih", layer.w_ih), (f"lstm{k}.w_hh", layer.w_hh),
                    (f"lstm{k}.bias", layer.bias)]
        for k, lin in enumerate(self.head.layers):
            out += [(f"head{k}.w", lin.w), (f"head{k}.b", lin.b)]
        return out

    def save(self, path, extra_meta: Optional[dict] = None) -> None:
        meta = {"kind": "ndo-model", "config": self.cfg.to_dict(),
                "library": self.library.to_dict() if self.library else None}
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, self._state(), meta)

    @classmethod
    def load(cls, path) -> "NdoModel":
        arrays, meta = load_checkpoint(path)
        if meta.get("kind") != "ndo-model":
            raise NdoError(f"not an estimator checkpoint: {path}")
        cfg = NdoConfig.from_dict(meta["config"])
        lib = LibraryConfig.from_dict(meta["library"]) if meta.get("library") else None
        model = cls(cfg, library=lib)
        model._load_state(arrays)
        return model


def train_ndo(examples, cfg: NdoConfig, train: NdoTrainConfig
              ) -> tuple[NdoModel, list]:
    """Fit an estimator to library examples by minibatch L2 regression.

    Returns the model and a loss curve of (iteration, train MSE since the
    previous row, validation MSE) rows. Training stops early once the
    validation MSE drops below ``train.val_stop`` (if set). A non-finite
    loss or gradient aborts the run and restores the weights saved at the
    most recent evaluation point.
    """
    model = NdoModel(cfg)
    if train.iterations == 0:
        return model, []
    X, Y = funclib.dataset_arrays(examples)
    X = X.astype(model.np_dtype)
    Y = Y.astype(model.np_dtype)
    if X.shape[2] != cfg.in_features or Y.shape[2] != cfg.channels:
        raise NdoError("dataset shape does not match the model order/channels")

    n = len(X)
    rng = np.random.default_rng(train.seed)
    n_val = min(int(round(n * train.val_fraction)), n - 1) if n > 1 else 0
    perm = rng.permutation(n)
    val_idx, tr_idx = perm[:n_val], perm[n_val:]

    params = model.params()
    opt = Adam(params, lr=train.lr)
    sched = CosineAnnealingLR(train.lr, train.iterations)

    def val_mse() -> float:
        if n_val == 0:
            return float("nan")
        total = 0.0
        for a in range(0, n_val, train.batch_size):
            idx = val_idx[a:a + train.batch_size]
            pred = model(X[idx])
            total += float(np.sum((pred - Y[idx].astype(np.float64)) ** 2))
        return total / (n_val * X.shape[1] * cfg.channels)

    curve = []
    snapshot = [p.data.copy() for p in params]
    running, n_running = 0.0, 0
    order = rng.permutation(tr_idx)
    cursor = 0
    it = 0
    while it < train.iterations:
        if cursor >= len(order):
            order = rng.permutation(tr_idx)
            cursor = 0
        idx = order[cursor:cursor + train.batch_size]
        cursor += train.batch_size
        opt.lr = sched(it)
        try:
            with ad.tape() as tp:
                pred = model.forward_tensor(Tensor(X[idx]))
                loss = nn.mse(pred, Y[idx])
                opt.zero_grad()
                tp.backward(loss)
            opt.step()
            loss_val = float(loss.data)
        except ad.AutodiffError:
            loss_val = float("nan")
        if not np.isfinite(loss_val):
            for p, saved in zip(params, snapshot):
                p.data = saved
            curve.append((it, float("nan"), val_mse()))
            break
        running += loss_val
        n_running += 1
        it += 1
        if it % train.eval_every == 0 or it == train.iterations:
            v = val_mse()
            curve.append((it, running / n_running, v))
            running, n_running = 0.0, 0
            if np.isfinite(v) or n_val == 0:
                snapshot = [p.data.copy() for p in params]
            if train.val_stop > 0 and np.isfinite(v) and v <= train.val_stop:
                break
    return model, curve


def _check_times(T: np.ndarray) -> None:
    if T.ndim != 1 or len(T) < 2:
        raise NdoError("need at least two samples")
    if not np.all(np.isfinite(T)):
        raise NdoError("times must be finite")
    if np.any(np.diff(T) <= 0):
        raise NdoError("times must be strictly increasing")


def estimate(model: NdoModel, X, T, d1=None, rescale: bool = False) -> np.ndarray:
    """Estimate derivatives of a sampled trajectory.

    X is (N,) or (N, dims); times T are shifted to start at 0 and scaled
    to a unit window before the model sees them, and the output is scaled
    back (divided by the window length once per derivative order). An
    order-2 model additionally needs d1, the first-derivative channel.
    A single-channel model handles multi-dimensional X by estimating each
    dimension independently in one batched call. ``rescale`` maps the
    amplitude into the trained coefficient range and undoes the factor on
    the way out (differentiation is linear), for out-of-range data.
    """
    T = np.asarray(T, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    _check_times(T)
    squeeze = X.ndim == 1
    Xm = X[:, None] if squeeze else X
    if Xm.ndim != 2 or Xm.shape[0] != len(T):
        raise NdoError("states must be (N,) or (N, dims) matching times")
    if not np.all(np.isfinite(Xm)):
        raise NdoError("states must be finite")

    cfg = model.cfg
    if cfg.order == 2:
        if d1 is None:
            raise NdoError("order-2 estimation needs the first-derivative channel")
        D1 = np.asarray(d1, dtype=np.float64)
        D1 = D1[:, None] if D1.ndim == 1 else D1
        if D1.shape != Xm.shape:
            raise NdoError("first-derivative channel must match the states' shape")
    elif d1 is not None:
        raise NdoError("order-1 model takes no derivative channel")

    dims = Xm.shape[1]
    if cfg.channels == dims:
        batch, chans = 1, dims
    elif cfg.channels == 1:
        batch, chans = dims, 1
    else:
        raise NdoError(f"model expects {cfg.channels} channels, got {dims}")

    s = T[-1] - T[0]
    tau = (T - T[0]) / s
    dtau = np.concatenate([[0.0], np.diff(tau)])
    k = 1.0
    if rescale:
        amp = float(np.max(np.abs(Xm)))
        bound = model.library.C if model.library is not None else 10.0
        if amp > 0:
            k = bound / amp

    n = len(T)
    inp = np.empty((batch, n, cfg.in_features), dtype=np.float64)
    for b in range(batch):
        cols = slice(b, b + chans) if cfg.channels == 1 else slice(0, chans)
        j = 0
        if cfg.order == 2:
            inp[b, :, j:j + chans] = k * s * D1[:, cols]
            j += chans
        inp[b, :, j:j + chans] = k * Xm[:, cols]
        j += chans
        inp[b, :, j] = tau
        inp[b, :, j + 1] = dtau

    out = model(inp).astype(np.float64)          # (batch, N, chans)
    if batch == 1:
        D = out[0]
    else:
        D = out[:, :, 0].T
    D = D / (k * s ** cfg.order)
    return D[:, 0] if squeeze else D


def estimate_chain(model1: NdoModel, model2: NdoModel, X, T,
                   rescale: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """First and second derivatives from a pair of estimators: the order-1
    model reads the states, the order-2 model reads states plus the
    estimated first derivatives."""
    if model1.cfg.order != 1:
        raise NdoError("model1 must be an order-1 estimator")
    if model2.cfg.order != 2:
        raise NdoError("model2 must be an order-2 estimator")
    if model1.cfg.channels != model2.cfg.channels:
        raise NdoError("chained models must share a channel count")
    D1 = estimate(model1, X, T, rescale=rescale)
    D2 = estimate(model2, X, T, d1=D1, rescale=rescale)
    return D1, D2


def segment_estimate(model: NdoModel, X, T, segment_len: int,
                     d1=None, rescale: bool = False) -> np.ndarray:
    """Estimate a long trajectory in fixed-length chunks, each standardized
    on its own window; the final chunk may be shorter but needs >= 2 points."""
    if segment_len < 2:
        raise NdoError("segment_len must be >= 2")
    T = np.asarray(T, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    _check_times(T)
    n = len(T)
    if n % segment_len == 1:
        raise NdoError("last segment would have a single point")
    parts = []
    for a in range(0, n, segment_len):
        b = min(a + segment_len, n)
        seg_d1 = None if d1 is None else np.asarray(d1, dtype=np.float64)[a:b]
        parts.append(estimate(model, X[a:b], T[a:b], d1=seg_d1, rescale=rescale))
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------------------
# error-bound machinery


def _rho(a: np.ndarray, b: np.ndarray) -> float:
    # unnormalized grid distance: sum_i |a_i - b_i|
    return float(np.sum(np.abs(np.asarray(a) - np.asarray(b))))


def _simpson_abs(fn, t0: float, t1: float, panels: int) -> float:
    """Composite Simpson of |fn| on a uniform grid with an even panel count."""
    if panels % 2:
        panels += 1
    ts = np.linspace(t0, t1, panels + 1)
    v = np.abs(fn(ts))
    h = (t1 - t0) / panels
    return float(h / 3.0 * (v[0] + v[-1] + 4.0 * v[1:-1:2].sum() + 2.0 * v[2:-2:2].sum()))


@dataclass(frozen=True)
class BoundReport:
    """Error decomposition for one (h, z) probe pair.

    total is the four terms summed in field order; observed is the actual
    grid distance between the estimated and true derivatives of h.
    """
    term_lipschitz: float
    term_derivative_gap: float
    term_discretization: float
    term_train_residual: float
    total: float
    observed: float
    lipschitz: float

    @property
    def holds(self) -> bool:
        return self.observed <= self.total


def empirical_lipschitz(model: NdoModel,
                        pairs: Sequence[tuple[SymbolicFunction, SymbolicFunction]],
                        N: int = 100, interval=(0.0, 1.0)) -> float:
    """Largest observed ratio of output distance to input distance over the
    probe pairs; pairs with coincident grid values are skipped. This is an
    empirical stand-in for the operator's true smoothness constant and can
    only underestimate it."""
    t0, t1 = interval
    times = np.linspace(t0, t1, N)
    best = 0.0
    for h, z in pairs:
        den = _rho(h(times), z(times))
        if den == 0.0:
            continue
        num = _rho(estimate(model, h(times), times),
                   estimate(model, z(times), times))
        best = max(best, num / den)
    return best


def verify_bound(model: NdoModel, h: SymbolicFunction, z: SymbolicFunction,
                 N: int = 100, interval=(0.0, 1.0),
                 probes: Sequence = (), lipschitz: float = 0.0) -> BoundReport:
    """Check the estimator's error decomposition on a symbolic pair.

    z plays the trained-function role, h the arbitrary function. Integrals
    use composite Simpson at 10x the grid density; curvature maxima come
    from exact symbolic derivatives of (z - h) with the absolute value
    applied afterward (an upper bound away from sign crossings, which are
    measure-zero for symbolic probes). The smoothness constant is the max
    of ``lipschitz``, the given probe pairs, and the (h, z) pair itself.
    """
    t0, t1 = interval
    if not t1 > t0 or N < 2:
        raise NdoError("need t1 > t0 and N >= 2")
    times = np.linspace(t0, t1, N)
    L = max(float(lipschitz),
            empirical_lipschitz(model, [*probes, (h, z)], N, interval))

    diff = z + h.scale(-1.0)
    panels = 10 * (N - 1)
    term_lip = L * _simpson_abs(diff, t0, t1, panels)
    term_gap = _simpson_abs(diff.derivative(1), t0, t1, panels)
    dense = np.linspace(t0, t1, panels + 1)
    d2 = diff.derivative(2)
    d3 = d2.derivative(1)
    M = L * float(np.max(np.abs(d2(dense)))) + float(np.max(np.abs(d3(dense))))
    term_disc = abs(t1 - t0) ** 3 / (12.0 * N * N) * M
    term_res = _rho(estimate(model, z(times), times), z.derivative(1)(times))
    total = term_lip + term_gap + term_disc + term_res
    observed = _rho(estimate(model, h(times), times), h.derivative(1)(times))
    return BoundReport(term_lip, term_gap, term_disc, term_res,
                       total, observed, L)


def trapezoid_error_check(g: SymbolicFunction, N: int,
                          interval=(0.0, 1.0)) -> tuple[float, float]:
    """Composite trapezoid error against its classical bound.

    lhs is |exact integral - N-panel trapezoid| with the exact value from
    the symbolic antiderivative; rhs is (t1-t0)^3 max|g''| / (12 N^2) with
    the maximum taken on a dense grid. Raises if the bound is violated.
    """
    if N < 1:
        raise NdoError("need at least one panel")
    t0, t1 = interval
    ts = np.linspace(t0, t1, N + 1)
    trap = float(np.trapezoid(g(ts), ts))
    exact = g.integral(t0, t1)
    dense = np.linspace(t0, t1, 4001)
    rhs = abs(t1 - t0) ** 3 * float(np.max(np.abs(g.derivative(2)(dense)))) / (12.0 * N * N)
    lhs = abs(exact - trap)
    if lhs > rhs:
        raise ArithmeticError(f"trapezoid bound violated: {lhs} > {rhs}")
    return lhs, rhs
