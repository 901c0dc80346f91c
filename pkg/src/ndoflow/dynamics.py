"""Benchmark dynamical systems: exact vector fields, closed-form solutions
where they exist, ground-truth grid generation and observation noise.

Kinds and state layouts:
  spiral      (2,)  linear field a,b,c,d
  oscillator  (2,)  damped harmonic motion [position, velocity]
  three_body  (18,) planar-perturbed gravitational triple,
              [p1 p2 p3 v1 v2 v3] with 3-vectors each
  stiff1      (1,)  fast/slow relaxation with exponential forcing
  stiff2      (1,)  stiff1 plus a sinusoidal drive
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import funclib, odeint
from .odeint import Trajectory

KINDS = ("spiral", "oscillator", "three_body", "stiff1", "stiff2")

_STATE_DIM = {"spiral": 2, "oscillator": 2, "three_body": 18, "stiff1": 1, "stiff2": 1}

# bounded non-periodic default: the planar figure-eight triple with a small
# documented position perturbation on the third body
_FIG8_R1 = (0.97000436, -0.24308753, 0.0)
_FIG8_V3 = (-0.93240737, -0.86473146, 0.0)
_THREE_BODY_X0 = np.array([
    *_FIG8_R1,
    *(-np.asarray(_FIG8_R1)),
    0.01, 0.0, 0.0,
    *(-0.5 * np.asarray(_FIG8_V3)),
    *(-0.5 * np.asarray(_FIG8_V3)),
    *_FIG8_V3,
])

_DEFAULTS = {
    "spiral": dict(params={"a": -0.1, "b": 2.0, "c": -2.0, "d": -0.1},
                   x0=(2.0, 0.0), train_end=5.0, test_end=10.0, n_train=100),
    "oscillator": dict(params={"gamma": 0.1, "omega": 1.0},
                       x0=(1.0, -0.1), train_end=10.0, test_end=20.0, n_train=100),
    "three_body": dict(params={"G": 1.0, "masses": (1.0, 1.0, 1.0)},
                       x0=tuple(_THREE_BODY_X0), train_end=1.0, test_end=2.0,
                       n_train=100),
    "stiff1": dict(params={}, x0=(0.0,), train_end=15.0, test_end=25.0, n_train=120),
    "stiff2": dict(params={}, x0=(0.0,), train_end=15.0, test_end=25.0, n_train=120),
}


@dataclass(frozen=True)
class SystemSpec:
    kind: str
    params: dict = field(default_factory=dict)
    x0: tuple = ()
    train_end: float = 0.0
    test_end: float = 0.0
    n_train: int = 100
    n_test: int = 1000
    sigma: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown system kind '{self.kind}'")
        if len(self.x0) != _STATE_DIM[self.kind]:
            raise ValueError(f"{self.kind} needs a {_STATE_DIM[self.kind]}-dim initial state")
        if not 0 < self.train_end < self.test_end:
            raise ValueError("need 0 < train_end < test_end")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    @property
    def dim(self) -> int:
        return _STATE_DIM[self.kind]

    @staticmethod
    def default(kind: str, **overrides) -> "SystemSpec":
        if kind not in _DEFAULTS:
            raise ValueError(f"unknown system kind '{kind}'")
        base = dict(_DEFAULTS[kind])
        base.update(overrides)
        return SystemSpec(kind=kind, **base)

    def with_sigma(self, sigma: float) -> "SystemSpec":
        return replace(self, sigma=sigma)


def _spiral_matrix(params) -> np.ndarray:
    return np.array([[params["a"], params["b"]], [params["c"], params["d"]]])


def _osc_matrix(params) -> np.ndarray:
    g, w = params["gamma"], params["omega"]
    return np.array([[0.0, 1.0], [-(w * w + g * g), -2.0 * g]])


def _three_body_rhs(params, x: np.ndarray) -> np.ndarray:
    G = params["G"]
    m = np.asarray(params["masses"], dtype=np.float64)
    batched = x.ndim == 2
    xb = x if batched else x[None]
    pos = xb[:, :9].reshape(-1, 3, 3)
    vel = xb[:, 9:].reshape(-1, 3, 3)
    acc = np.zeros_like(pos)
    for i in range(3):
        for j in range(3):
            if i == j:
                continue
            d = pos[:, j] - pos[:, i]
            r = np.sqrt(np.sum(d * d, axis=1))
            if np.any(r == 0.0):
                raise ValueError("three_body singularity: coincident bodies")
            acc[:, i] += G * m[j] * d / (r ** 3)[:, None]
    out = np.concatenate([vel.reshape(-1, 9), acc.reshape(-1, 9)], axis=1)
    return out if batched else out[0]


def make_field(spec: SystemSpec):
    """Exact right-hand side as an f(t, x) callable over numpy states of
    shape (D,) or (B, D)."""
    kind, params = spec.kind, spec.params
    if kind == "spiral":
        A_T = _spiral_matrix(params).T

        def f(t, x):
            return x @ A_T
    elif kind == "oscillator":
        A_T = _osc_matrix(params).T

        def f(t, x):
            return x @ A_T
    elif kind == "three_body":
        def f(t, x):
            return _three_body_rhs(params, np.asarray(x))
    elif kind == "stiff1":
        def f(t, x):
            return -1000.0 * x + 3000.0 - 2000.0 * np.exp(-t)
    else:  # stiff2
        def f(t, x):
            return -1000.0 * x + 3000.0 - 2000.0 * np.exp(-t) + 1000.0 * np.sin(t)
    return f


def has_closed_form(kind: str) -> bool:
    return kind in ("spiral", "oscillator", "stiff1", "stiff2")


def closed_form(spec: SystemSpec, times, x0=None) -> np.ndarray:
    """Analytic solution states. times (N,); x0 defaults to spec.x0 and may
    be batched (B, D), giving output (N, B, D) instead of (N, D)."""
    t = np.asarray(times, dtype=np.float64)
    x0 = np.asarray(spec.x0 if x0 is None else x0, dtype=np.float64)
    batched = x0.ndim == 2
    xb = x0 if batched else x0[None]
    kind, params = spec.kind, spec.params

    if kind == "spiral":
        a, b = params["a"], params["b"]
        c, d = params["c"], params["d"]
        if not (a == d and b == -c):
            raise ValueError("spiral closed form needs a rotation-plus-decay matrix")
        w = b
        decay = np.exp(a * t)[:, None, None]
        cos, sin = np.cos(w * t), np.sin(w * t)
        rot = np.stack([np.stack([cos, sin], -1), np.stack([-sin, cos], -1)], -2)
        out = decay * np.einsum("tij,bj->tbi", rot, xb)
    elif kind == "oscillator":
        g, w = params["gamma"], params["omega"]
        A = xb[:, 0]
        B = (xb[:, 1] + g * xb[:, 0]) / w
        decay = np.exp(-g * t)[:, None]
        cos, sin = np.cos(w * t)[:, None], np.sin(w * t)[:, None]
        x = decay * (A * cos + B * sin)
        v = decay * ((-g * A + w * B) * cos + (-g * B - w * A) * sin)
        out = np.stack([x, v], axis=-1)
    elif kind == "stiff1":
        y = (3.0 - (2000.0 / 999.0) * np.exp(-t)
             - (997.0 / 999.0) * np.exp(-1000.0 * t))
        if np.any(xb != 0.0):
            raise ValueError("stiff1 closed form is tabulated for y(0)=0")
        out = np.broadcast_to(y[:, None, None], (len(t), len(xb), 1)).copy()
    elif kind == "stiff2":
        asin = 1e6 / 1000001.0
        bcos = -1000.0 / 1000001.0
        k = 1000.0 / 1000001.0 - 997.0 / 999.0
        y = (3.0 - (2000.0 / 999.0) * np.exp(-t) + asin * np.sin(t)
             + bcos * np.cos(t) + k * np.exp(-1000.0 * t))
        if np.any(xb != 0.0):
            raise ValueError("stiff2 closed form is tabulated for y(0)=0")
        out = np.broadcast_to(y[:, None, None], (len(t), len(xb), 1)).copy()
    else:
        raise ValueError(f"{kind} has no closed form")
    return out if batched else out[:, 0, :]


def train_grid(spec: SystemSpec, rng: np.random.Generator) -> np.ndarray:
    """Observation times on [0, train_end]: irregular (sorted uniform with
    pinned endpoints) except for the stiff systems, which use the equal
    spacing their protocol calls for."""
    if spec.kind in ("stiff1", "stiff2"):
        return np.linspace(0.0, spec.train_end, spec.n_train)
    return funclib.sample_times(spec.n_train, 0.0, spec.train_end, rng)


def test_grid(spec: SystemSpec) -> np.ndarray:
    """Uniform evaluation grid over the full [0, test_end] range."""
    return np.linspace(0.0, spec.test_end, spec.n_test)


def make_truth(spec: SystemSpec, grid: str, rng=None, x0=None):
    """Ground-truth trajectory on the requested grid kind.

    grid: 'train' (irregular observation grid, needs rng) or 'test'
    (uniform). Closed forms are used when available, a tight-tolerance
    solve otherwise. Batched x0 (B, D) returns raw states (N, B, D)
    instead of a Trajectory.
    """
    if grid == "train":
        if rng is None:
            raise ValueError("train grid needs an rng")
        times = train_grid(spec, rng)
    elif grid == "test":
        times = test_grid(spec)
    else:
        raise ValueError("grid must be 'train' or 'test'")
    x0_arr = np.asarray(spec.x0 if x0 is None else x0, dtype=np.float64)
    if has_closed_form(spec.kind):
        states = closed_form(spec, times, x0_arr)
    else:
        tail = odeint.reference_solve(make_field(spec), x0_arr, 0.0, times[times > 0])
        head = np.broadcast_to(x0_arr, (int(np.sum(times == 0.0)), *x0_arr.shape))
        states = np.concatenate([head, tail.states.reshape(-1, *x0_arr.shape)])
    if x0_arr.ndim == 2:
        return times, states
    return Trajectory(times=times, states=states)


def add_noise(traj: Trajectory, sigma: float, rng: np.random.Generator) -> Trajectory:
    """Gaussian N(0, sigma^2) added i.i.d. to every state component; sigma
    is the standard deviation."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return Trajectory(times=traj.times.copy(), states=traj.states.copy())
    noisy = traj.states + rng.normal(0.0, sigma, size=traj.states.shape)
    return Trajectory(times=traj.times.copy(), states=noisy)


def total_energy(spec: SystemSpec, x: np.ndarray) -> float:
    """Conserved energy of the three-body configuration (diagnostics)."""
    if spec.kind != "three_body":
        raise ValueError("energy check is defined for three_body")
    G = spec.params["G"]
    m = np.asarray(spec.params["masses"])
    pos = np.asarray(x[:9]).reshape(3, 3)
    vel = np.asarray(x[9:]).reshape(3, 3)
    kinetic = 0.5 * float(np.sum(m * np.sum(vel * vel, axis=1)))
    potential = 0.0
    for i in range(3):
        for j in range(i + 1, 3):
            r = float(np.linalg.norm(pos[j] - pos[i]))
            potential -= G * m[i] * m[j] / r
    return kinetic + potential
