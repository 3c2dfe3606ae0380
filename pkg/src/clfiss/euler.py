"""Euler solutions as refinement limits of sampled runs.

A refinement schedule shrinks the partition diameter while the observation
noise shrinks faster than the lower diameter; the study certifies convergence
only as a Cauchy property of the computed sequence over the finite horizon.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .clf import IssEnvelope
from .core import (BLOWUP, NUMERICAL_FAILURE, Signal, Trajectory,
                   as_vector, constant_signal, lower_diameter, make_partition,
                   upper_diameter, zero_signal)
from .sampler import ClosedLoop, sample_solve


@dataclass(frozen=True, eq=False)
class RefinementSchedule:
    """Shrinking partitions with noise vanishing faster than the lower diameter.

    inputs may be one shared disturbance or one per level; in the per-level
    (generalized) case every level's sup bound must not exceed the reference
    disturbance's bound.
    """

    partitions: list
    errors: list
    inputs: Signal | list
    reference_input: Signal | None = None

    def __post_init__(self):
        if len(self.partitions) != len(self.errors):
            raise ValueError("need one error signal per partition")
        dbars = [upper_diameter(p) for p in self.partitions]
        for a, b in zip(dbars, dbars[1:]):
            if b >= a:
                raise ValueError("upper diameters must strictly decrease")
        ratios = self.noise_ratios()
        for a, b in zip(ratios, ratios[1:]):
            if b > a + 1e-12:
                raise ValueError("noise-to-lower-diameter ratios must not increase")
        if isinstance(self.inputs, list):
            if len(self.inputs) != len(self.partitions):
                raise ValueError("need one input per level")
            ref = self.reference_input
            if ref is None:
                raise ValueError("per-level inputs require a reference input")
            for k, sig in enumerate(self.inputs):
                if sig.bound > ref.bound + 1e-12:
                    raise ValueError(f"level {k} input bound exceeds the reference bound")

    @property
    def levels(self) -> int:
        return len(self.partitions)

    def noise_ratios(self) -> list:
        return [e.bound / lower_diameter(p)
                for p, e in zip(self.partitions, self.errors)]

    def input_at(self, r: int) -> Signal:
        if isinstance(self.inputs, list):
            return self.inputs[r]
        return self.inputs


def geometric_schedule(base_step: float, levels: int, horizon: float,
                       input_signal: Signal | None = None, dim_e: int = 1,
                       error_exponent: float | None = 2.0, error_direction=None,
                       seed: int = 0, dim_u: int = 1) -> RefinementSchedule:
    """Uniform partitions with steps base_step * 2^-r and noise sup = step^exponent.

    error_exponent None produces noise-free levels. dim_u sizes the default
    zero disturbance when no input signal is given.
    """
    rng = np.random.default_rng(seed)
    if error_direction is None:
        error_direction = rng.normal(size=dim_e)
    d = as_vector(error_direction)
    d = d / np.linalg.norm(d)
    parts, errs = [], []
    for r in range(levels):
        step = base_step * 2.0 ** (-r)
        parts.append(make_partition("uniform", horizon, step))
        mag = 0.0 if error_exponent is None else step ** error_exponent
        errs.append(constant_signal(mag * d) if mag > 0 else zero_signal(d.size))
    u = input_signal if input_signal is not None else zero_signal(dim_u)
    return RefinementSchedule(parts, errs, u)


@dataclass(frozen=True, eq=False)
class EulerStudy:
    levels: list                   # per-level dicts
    verdict: bool
    divergent_level: int | None
    divergent_time: float | None
    limit: Trajectory | None
    grid_times: np.ndarray | None
    limit_states: np.ndarray | None

    def to_dict(self, worst_env_margin: float | None = None) -> dict:
        return {
            "levels": self.levels,
            "verdict": self.verdict,
            "divergent_level": self.divergent_level,
            "divergent_time": self.divergent_time,
            "worst_env_margin": worst_env_margin,
        }


def euler_study(loop: ClosedLoop, schedule: RefinementSchedule, x0,
                grid_points: int = 4096, cauchy_ratio: float = 0.8,
                sustain: int = 3) -> EulerStudy:
    """Run every refinement level and measure sup-distances between neighbours.

    Trajectories are linearly interpolated onto a shared grid before comparing.
    The verdict is true when the trailing distance ratios stay at or below
    cauchy_ratio; a blow-up at any level is reported as a divergent level and
    the study stops there.
    """
    horizon = min(p.horizon for p in schedule.partitions)
    grid = np.linspace(0.0, horizon, grid_points)
    rows = []
    prev_states = None
    distances = []
    divergent_level = None
    divergent_time = None
    finest = None
    finest_states = None
    for r in range(schedule.levels):
        part = schedule.partitions[r]
        traj = sample_solve(loop, part, x0, schedule.input_at(r), schedule.errors[r])
        row = {
            "delta_bar": upper_diameter(part),
            "delta_lower": lower_diameter(part),
            "sup_e": schedule.errors[r].bound,
            "distance_to_prev": None,
        }
        if traj.status.kind in (BLOWUP, NUMERICAL_FAILURE):
            divergent_level = r
            divergent_time = traj.status.time
            rows.append(row)
            break
        states = traj.state_at(grid)
        if prev_states is not None:
            dist = float(np.max(np.linalg.norm(states - prev_states, axis=1)))
            row["distance_to_prev"] = dist
            distances.append(dist)
        prev_states = states
        finest, finest_states = traj, states
        rows.append(row)

    verdict = False
    if divergent_level is None and len(distances) >= 2:
        ratios = []
        for a, b in zip(distances, distances[1:]):
            if a <= 0.0:
                ratios.append(0.0 if b <= 0.0 else np.inf)
            else:
                ratios.append(b / a)
        tail = ratios[-sustain:] if len(ratios) >= sustain else ratios
        verdict = all(q <= cauchy_ratio for q in tail)
    elif divergent_level is None and len(distances) <= 1:
        # degenerate schedules (identical runs) converge trivially
        verdict = all(d == 0.0 for d in distances) if distances else True

    return EulerStudy(rows, verdict, divergent_level, divergent_time,
                      finest, grid if finest is not None else None, finest_states)


@dataclass(frozen=True, eq=False)
class IssCheck:
    worst_margin: float
    first_violation_t: float | None
    violations: int
    checked: int

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        return {"worst_margin": self.worst_margin,
                "first_violation_t": self.first_violation_t,
                "violations": self.violations, "checked": self.checked}


def check_iss_euler(traj: Trajectory, env: IssEnvelope, x0,
                    u_bound: float) -> IssCheck:
    """Pointwise additive envelope check |x(t)| <= beta(|x0|, t) + gamma(N) + overflow."""
    x0n = float(np.linalg.norm(as_vector(x0)))
    t = traj.dense_times
    bound = env.beta(x0n, t) + env.gamma(u_bound) + env.overflow
    margins = bound - traj.norms()
    bad = np.nonzero(margins < 0.0)[0]
    first = float(t[bad[0]]) if bad.size else None
    return IssCheck(float(np.min(margins)), first, int(bad.size), int(t.size))
