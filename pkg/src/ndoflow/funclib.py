"""Random symbolic function library used to pre-train the derivative
estimator: linear combinations of sin(it), cos(it) and t^i with bounded
coefficients. Differentiation and integration are exact term rewrites, so
training labels never touch numerical differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class SymbolicFunction:
    """sum_i a_i sin(i t) + b_i cos(i t)  +  sum_j c_j t^j.

    trig holds (frequency >= 1, a, b) tuples; poly holds (degree >= 0, c)
    tuples. Term lists are kept sorted and unique per frequency/degree.
    """
    trig: tuple = ()
    poly: tuple = ()

    def __post_init__(self):
        trig = tuple(sorted((int(f), float(a), float(b)) for f, a, b in self.trig))
        poly = tuple(sorted((int(d), float(c)) for d, c in self.poly))
        if any(f < 1 for f, _, _ in trig):
            raise ValueError("trig frequencies start at 1")
        if any(d < 0 for d, _ in poly):
            raise ValueError("poly degrees are non-negative")
        if len({f for f, _, _ in trig}) != len(trig) or len({d for d, _ in poly}) != len(poly):
            raise ValueError("duplicate frequency or degree")
        object.__setattr__(self, "trig", trig)
        object.__setattr__(self, "poly", poly)

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        out = np.zeros_like(t)
        for f, a, b in self.trig:
            if a != 0.0:
                out = out + a * np.sin(f * t)
            if b != 0.0:
                out = out + b * np.cos(f * t)
        if self.poly:
            deg = max(d for d, _ in self.poly)
            coef = np.zeros(deg + 1)
            for d, c in self.poly:
                coef[d] = c
            acc = np.zeros_like(t)
            for c in coef[::-1]:  # Horner, highest degree first
                acc = acc * t + c
            out = out + acc
        return out

    def derivative(self, order: int = 1) -> "SymbolicFunction":
        if order == 0:
            return self
        if order not in (1, 2):
            raise ValueError("derivative order must be 0, 1 or 2")
        trig = tuple((f, -b * f, a * f) for f, a, b in self.trig)
        poly = tuple((d - 1, c * d) for d, c in self.poly if d >= 1)
        out = SymbolicFunction(trig=trig, poly=poly)
        return out.derivative(order - 1) if order == 2 else out

    def antiderivative(self) -> "SymbolicFunction":
        """Term-wise primitive with zero integration constant."""
        trig = tuple((f, b / f, -a / f) for f, a, b in self.trig)
        poly = tuple((d + 1, c / (d + 1)) for d, c in self.poly)
        return SymbolicFunction(trig=trig, poly=poly)

    def integral(self, t0: float, t1: float) -> float:
        anti = self.antiderivative()
        return float(anti(np.asarray(t1)) - anti(np.asarray(t0)))

    def __add__(self, other: "SymbolicFunction") -> "SymbolicFunction":
        trig: dict[int, list[float]] = {}
        for f, a, b in self.trig + other.trig:
            cur = trig.setdefault(f, [0.0, 0.0])
            cur[0] += a
            cur[1] += b
        poly: dict[int, float] = {}
        for d, c in self.poly + other.poly:
            poly[d] = poly.get(d, 0.0) + c
        return SymbolicFunction(
            trig=tuple((f, ab[0], ab[1]) for f, ab in trig.items()),
            poly=tuple(poly.items()))

    def scale(self, s: float) -> "SymbolicFunction":
        return SymbolicFunction(trig=tuple((f, a * s, b * s) for f, a, b in self.trig),
                                poly=tuple((d, c * s) for d, c in self.poly))


@dataclass(frozen=True)
class LibraryConfig:
    """Sampling recipe for the function library.

    P bounds the trig frequency, Q the polynomial degree, C the coefficient
    magnitude. The dense draw includes every basis term up to (P, Q) with
    coefficients uniform on (-C, C); sparse mode instead keeps each term
    with probability 1/2 (coefficients drawn the same way).
    """
    P: int = 3
    Q: int = 50
    C: float = 10.0
    n_functions: int = 10_000
    n_points: int = 100
    t0: float = 0.0
    t1: float = 1.0
    seed: int = 0
    sparse: bool = False

    def __post_init__(self):
        if self.P < 0 or self.Q < 0:
            raise ValueError("P and Q must be >= 0")
        if self.C <= 0:
            raise ValueError("C must be positive")
        if self.n_points < 2:
            raise ValueError("n_points must be >= 2")
        if not self.t0 < self.t1:
            raise ValueError("need t0 < t1")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("P", "Q", "C", "n_functions", "n_points", "t0", "t1", "seed", "sparse")}

    @staticmethod
    def from_dict(d: dict) -> "LibraryConfig":
        return LibraryConfig(**d)

    def with_seed(self, seed: int) -> "LibraryConfig":
        return replace(self, seed=seed)


# sparse mode keeps each basis term with probability 3/n_family, so a
# typical draw mixes about three terms per family; dense mode keeps all.
# Sums of many +-C coefficients swamp the small-amplitude regime, which is
# where trained estimators are actually applied.
_SPARSE_TERMS = 3.0


def sample_function(cfg: LibraryConfig, rng: np.random.Generator) -> SymbolicFunction:
    """Draw one library member. Draw order is fixed (trig by ascending
    frequency, then poly by ascending degree) so streams are reproducible;
    coefficients are drawn before the keep/drop decision for the same
    reason."""
    p_trig = min(1.0, _SPARSE_TERMS / cfg.P) if cfg.P else 0.0
    p_poly = min(1.0, _SPARSE_TERMS / (cfg.Q + 1))
    trig = []
    for f in range(1, cfg.P + 1):
        a = rng.uniform(-cfg.C, cfg.C)
        b = rng.uniform(-cfg.C, cfg.C)
        if cfg.sparse and rng.uniform() >= p_trig:
            continue
        trig.append((f, a, b))
    poly = []
    for d in range(0, cfg.Q + 1):
        c = rng.uniform(-cfg.C, cfg.C)
        if cfg.sparse and rng.uniform() >= p_poly:
            continue
        poly.append((d, c))
    return SymbolicFunction(trig=tuple(trig), poly=tuple(poly))


def sample_times(n_points: int, t0: float, t1: float,
                 rng: np.random.Generator) -> np.ndarray:
    """Sorted grid with both endpoints pinned; interior points are i.i.d.
    uniform draws, resampled on (measure-zero) collisions."""
    if n_points < 2:
        raise ValueError("need at least 2 time points")
    if n_points == 2:
        return np.array([t0, t1], dtype=np.float64)
    interior = rng.uniform(t0, t1, size=n_points - 2)
    times = np.sort(np.concatenate([[t0], interior, [t1]]))
    while np.any(np.diff(times) <= 0):
        dup = np.nonzero(np.diff(times) <= 0)[0] + 1
        times[dup] = rng.uniform(t0, t1, size=len(dup))
        times = np.sort(times)
    return times


def _example_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(seed ^ index)


def make_dataset(cfg: LibraryConfig, order: int = 1,
                 channels: int = 1) -> list[tuple[np.ndarray, np.ndarray]]:
    """Training examples for the derivative estimator.

    order 1: inputs (N, channels+2) = [X_1..X_c, T, dT], labels first
    derivatives (N, channels). order 2 (single channel): inputs (N, 4) =
    [X', X, T, dT], labels second derivatives (N, 1). dT[0] = 0. Each
    example owns its rng stream (seed xor example index) so generation is
    order-independent and reproducible.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if order == 2 and channels != 1:
        raise ValueError("order-2 datasets are single channel")
    examples = []
    for i in range(cfg.n_functions):
        rng = _example_rng(cfg.seed, i)
        times = sample_times(cfg.n_points, cfg.t0, cfg.t1, rng)
        dts = np.concatenate([[0.0], np.diff(times)])
        fs = [sample_function(cfg, rng) for _ in range(channels)]
        xs = [f(times) for f in fs]
        if order == 1:
            inp = np.stack(xs + [times, dts], axis=1)
            lab = np.stack([f.derivative(1)(times) for f in fs], axis=1)
        else:
            f = fs[0]
            inp = np.stack([f.derivative(1)(times), xs[0], times, dts], axis=1)
            lab = f.derivative(2)(times)[:, None]
        examples.append((inp, lab))
    return examples


def dataset_arrays(examples: list[tuple[np.ndarray, np.ndarray]]
                   ) -> tuple[np.ndarray, np.ndarray]:
    """Stack equal-length examples into (n, N, F) and (n, N, L)."""
    return (np.stack([e[0] for e in examples]),
            np.stack([e[1] for e in examples]))
