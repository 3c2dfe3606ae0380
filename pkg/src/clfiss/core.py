"""Shared state-space types: systems, sampling schedules, signals, trajectories.

Everything here is immutable after construction and safe to share across
parallel workers; there is no hidden mutable state anywhere in the library.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

Vector = np.ndarray

DEFAULT_ESCAPE_RADIUS = 1e9

# Trajectory status kinds.
COMPLETED = "completed"
BLOWUP = "blowup"
LEFT_DOMAIN = "left_domain"
NUMERICAL_FAILURE = "numerical_failure"


def as_vector(x, n: int | None = None) -> Vector:
    v = np.atleast_1d(np.asarray(x, dtype=float))
    if n is not None and v.shape != (n,):
        raise ValueError(f"expected vector of length {n}, got shape {v.shape}")
    return v


@dataclass(frozen=True, eq=False)
class ControlAffineSystem:
    """Input-affine dynamics dx/dt = f(x) + G(x) u with an equilibrium at 0.

    f maps R^n to R^n, G maps R^n to an n-by-m matrix whose columns are the
    input vector fields.
    """

    n: int
    m: int
    f: Callable[[Vector], Vector]
    G: Callable[[Vector], np.ndarray]

    def __post_init__(self):
        origin = np.zeros(self.n)
        f0 = as_vector(self.f(origin), self.n)
        if np.any(f0 != 0.0):
            raise ValueError("drift must vanish exactly at the origin")
        G0 = np.asarray(self.G(origin), dtype=float)
        if G0.shape != (self.n, self.m):
            raise ValueError(f"G(0) must have shape ({self.n}, {self.m}), got {G0.shape}")


@dataclass(frozen=True, eq=False)
class FullyNonlinearSystem:
    """General dynamics dx/dt = f(x, u) with f(0, 0) = 0."""

    n: int
    m: int
    f: Callable[[Vector, Vector], Vector]

    def __post_init__(self):
        f0 = as_vector(self.f(np.zeros(self.n), np.zeros(self.m)), self.n)
        if np.any(f0 != 0.0):
            raise ValueError("f(0, 0) must be exactly zero")


@dataclass(frozen=True, eq=False)
class Partition:
    """Finite sampling schedule t_0 = 0 < t_1 < ... < t_K over [0, horizon]."""

    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("a partition needs at least two sample times")
        if t[0] != 0.0:
            raise ValueError("partition must start at t = 0")
        if np.any(np.diff(t) <= 0.0):
            raise ValueError("partition times must be strictly increasing")
        object.__setattr__(self, "times", t)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def intervals(self) -> int:
        return self.times.size - 1


def upper_diameter(p: Partition) -> float:
    """Largest gap between consecutive sample times."""
    return float(np.max(np.diff(p.times)))


def lower_diameter(p: Partition) -> float:
    """Smallest gap between consecutive sample times."""
    return float(np.min(np.diff(p.times)))


def make_partition(kind: str, horizon: float, step: float,
                   jitter_fraction: float = 0.0, seed: int = 0) -> Partition:
    """Build a sampling schedule whose last time reaches or passes the horizon.

    kind "uniform": equal gaps of size step.
    kind "jitter": gaps drawn uniformly from
        [step (1 - jitter_fraction), step (1 + jitter_fraction)],
    deterministic for a fixed seed.
    """
    if step <= 0.0:
        raise ValueError("step must be positive")
    if not 0.0 <= jitter_fraction < 1.0:
        raise ValueError("jitter_fraction must lie in [0, 1)")
    if horizon < step:
        raise ValueError("horizon must be at least one step")
    if kind == "uniform":
        count = int(np.ceil(horizon / step - 1e-12))
        times = step * np.arange(count + 1, dtype=float)
    elif kind == "jitter":
        rng = np.random.default_rng(seed)
        times = [0.0]
        while times[-1] < horizon:
            gap = step * (1.0 + jitter_fraction * rng.uniform(-1.0, 1.0))
            times.append(times[-1] + gap)
        times = np.asarray(times)
    else:
        raise ValueError(f"unknown partition kind {kind!r}")
    return Partition(times)


@dataclass(frozen=True, eq=False)
class Signal:
    """Bounded time signal: a callable t -> R^dim with a declared sup-norm bound.

    Measurability is replaced by evaluability at any t; the declared bound is
    what admissibility guards and envelope checks consume.
    """

    dim: int
    bound: float
    eval: Callable[[float], Vector]
    label: str = ""

    def __post_init__(self):
        if self.bound < 0.0:
            raise ValueError("signal bound must be nonnegative")


def check_signal(sig: Signal, horizon: float, points: int = 1024,
                 slack: float = 1e-9) -> float:
    """Grid check of the declared bound on [0, horizon]; returns the observed sup.

    Raises ValueError if any grid evaluation exceeds the bound beyond slack.
    """
    worst = 0.0
    worst_t = 0.0
    for t in np.linspace(0.0, horizon, points):
        v = float(np.linalg.norm(as_vector(sig.eval(t), sig.dim)))
        if v > worst:
            worst, worst_t = v, float(t)
    if worst > sig.bound * (1.0 + slack) + slack * 1e-3:
        raise ValueError(
            f"signal exceeds declared bound {sig.bound:g} at t={worst_t:g} (|value|={worst:g})")
    return worst


def checked_signal(dim: int, bound: float, fn: Callable[[float], Vector],
                   horizon: float, points: int = 1024, label: str = "") -> Signal:
    """Construct a Signal and reject it if the bound fails on a dense grid."""
    sig = Signal(dim, bound, fn, label)
    check_signal(sig, horizon, points)
    return sig


def zero_signal(dim: int) -> Signal:
    zero = np.zeros(dim)
    return Signal(dim, 0.0, lambda t: zero, "zero")


def constant_signal(value) -> Signal:
    v = as_vector(value)
    return Signal(v.size, float(np.linalg.norm(v)), lambda t: v, "constant")


def sine_signal(direction, amplitude: float, frequency: float,
                phase: float = 0.0) -> Signal:
    """Sinusoid along a fixed direction: amplitude * sin(2 pi f t + phase) * unit(dir)."""
    d = as_vector(direction)
    nd = np.linalg.norm(d)
    if nd == 0.0:
        raise ValueError("direction must be nonzero")
    unit = d / nd
    w = 2.0 * np.pi * frequency

    def f(t):
        return amplitude * np.sin(w * t + phase) * unit

    return Signal(d.size, abs(amplitude), f, "sine")


def piecewise_constant_signal(times, values, bound: float | None = None) -> Signal:
    """Hold values[k] on [times[k], times[k+1]); the last value extends beyond.

    times must be increasing with len(values) == len(times); bound defaults to
    the largest row norm and is validated against every row.
    """
    t = np.asarray(times, dtype=float)
    v = np.atleast_2d(np.asarray(values, dtype=float))
    if v.shape[0] != t.size:
        raise ValueError("need one value row per time")
    norms = np.linalg.norm(v, axis=1)
    top = float(np.max(norms)) if norms.size else 0.0
    if bound is None:
        bound = top
    elif top > bound * (1.0 + 1e-12):
        raise ValueError(f"piecewise value norm {top:g} exceeds declared bound {bound:g}")

    def f(s):
        k = int(np.searchsorted(t, s, side="right")) - 1
        return v[min(max(k, 0), v.shape[0] - 1)]

    return Signal(v.shape[1], float(bound), f, "piecewise")


@dataclass(frozen=True)
class Status:
    """Terminal disposition of a run.

    kind is one of COMPLETED, BLOWUP, LEFT_DOMAIN, NUMERICAL_FAILURE; time
    carries the escape/exit instant when applicable.
    """

    kind: str
    time: float | None = None
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.kind == COMPLETED

    def to_dict(self) -> dict:
        return {"kind": self.kind, "time": self.time, "detail": self.detail}


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Closed-loop run: per-interval held controls plus the dense integration path.

    sample_states[i] is the state at sample_times[i] and is bit-identical to the
    matching dense row. interval_index labels each dense row with the interval
    whose dynamics produced it.
    """

    partition: Partition
    sample_times: np.ndarray
    sample_states: np.ndarray
    dense_times: np.ndarray
    dense_states: np.ndarray
    held_controls: np.ndarray
    interval_index: np.ndarray
    status: Status

    @property
    def n(self) -> int:
        return self.dense_states.shape[1]

    @property
    def final_time(self) -> float:
        return float(self.dense_times[-1])

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.dense_states, axis=1)

    def state_at(self, t) -> np.ndarray:
        """Linear interpolation of the dense path (per coordinate)."""
        t = np.asarray(t, dtype=float)
        out = np.empty(t.shape + (self.n,))
        for j in range(self.n):
            out[..., j] = np.interp(t, self.dense_times, self.dense_states[:, j])
        return out


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """CSV dump: t,x1..xn,k1..km,interval_index with 17 significant digits."""
    n = traj.dense_states.shape[1]
    m = traj.held_controls.shape[1] if traj.held_controls.size else 0
    header = (["t"] + [f"x{i + 1}" for i in range(n)]
              + [f"k{j + 1}" for j in range(m)] + ["interval_index"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r, t in enumerate(traj.dense_times):
            i = int(traj.interval_index[r])
            held = traj.held_controls[min(i, traj.held_controls.shape[0] - 1)]
            row = ([f"{t:.17g}"] + [f"{v:.17g}" for v in traj.dense_states[r]]
                   + [f"{v:.17g}" for v in held] + [str(i)])
            w.writerow(row)


def read_trajectory_csv(path) -> dict:
    """Parse a trajectory CSV back into arrays keyed t, states, controls, interval_index."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, data = rows[0], rows[1:]
    n = sum(1 for h in header if h.startswith("x"))
    m = sum(1 for h in header if h.startswith("k"))
    t = np.array([float(r[0]) for r in data])
    states = np.array([[float(v) for v in r[1:1 + n]] for r in data])
    controls = np.array([[float(v) for v in r[1 + n:1 + n + m]] for r in data])
    idx = np.array([int(r[-1]) for r in data])
    return {"t": t, "states": states, "controls": controls, "interval_index": idx}
