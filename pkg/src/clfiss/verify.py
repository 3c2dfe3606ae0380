"""End-to-end ISS verification campaigns.

A campaign fixes a closed loop, an envelope, and a rate guard, then sweeps
cases (initial state, disturbance, observation noise, partition). Each
asserted case must be admissible for the guard; deliberately inadmissible
cases are carried as tagged negative tests whose envelope is reported but not
asserted. Cases are independent and pure, so they may be evaluated in any
order or concurrently; the report is a deterministic fold in case order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .clf import IssEnvelope
from .core import (BLOWUP, NUMERICAL_FAILURE, Partition, Signal,
                   Trajectory, as_vector, constant_signal, lower_diameter,
                   make_partition, piecewise_constant_signal, sine_signal,
                   zero_signal)
from .sampler import (ClosedLoop, RateGuard, admissible, decrease_check,
                      sample_solve)


@dataclass(frozen=True, eq=False)
class CampaignCase:
    x0: np.ndarray
    u: Signal
    e: Signal
    partition: Partition
    label: str = ""
    assert_envelope: bool = True

    def __post_init__(self):
        object.__setattr__(self, "x0", as_vector(self.x0))


@dataclass(frozen=True, eq=False)
class Campaign:
    """Case sweep bound to one loop, envelope and guard.

    M bounds the initial-state norms, N the disturbance sup norms; both are
    validated case by case at construction, as is guard admissibility for
    every asserted case.
    """

    loop: ClosedLoop
    envelope: IssEnvelope
    guard: RateGuard
    cases: list
    M: float
    N: float
    clf: object = None
    check_decrease: bool = False
    s_level: float = 0.0
    decrease_rel_tol: float = 1e-4

    def __post_init__(self):
        for k, case in enumerate(self.cases):
            if float(np.linalg.norm(case.x0)) > self.M * (1 + 1e-12):
                raise ValueError(f"case {k}: |x0| exceeds M")
            if case.u.bound > self.N * (1 + 1e-12):
                raise ValueError(f"case {k}: disturbance bound exceeds N")
            if case.assert_envelope and not admissible(self.guard, case.partition, case.e):
                raise ValueError(
                    f"case {k}: not admissible for the guard; tag it assert_envelope=False")


def _case_margins(traj: Trajectory, env: IssEnvelope, x0_norm: float,
                  M: float, N: float):
    t = traj.dense_times
    norms = traj.norms()
    add_bound = env.additive_bound(x0_norm, N, t)
    max_bound = env.bound(M, N, t)
    add_margins = add_bound - norms
    max_margins = max_bound - norms

    # refined grid: interval midpoints with linearly interpolated states
    tm = 0.5 * (t[:-1] + t[1:])
    nm = 0.5 * (norms[:-1] + norms[1:])
    fine_add = float(np.min(np.concatenate(
        [add_margins, env.additive_bound(x0_norm, N, tm) - nm]))) if tm.size else float(np.min(add_margins))

    first = None
    bad = np.nonzero(add_margins < 0.0)[0]
    worse = np.nonzero(max_margins < 0.0)[0]
    if bad.size or worse.size:
        cands = []
        if bad.size:
            cands.append(t[bad[0]])
        if worse.size:
            cands.append(t[worse[0]])
        first = float(min(cands))
    return (float(np.min(add_margins)), float(np.min(max_margins)), fine_add, first)


@dataclass(frozen=True, eq=False)
class CampaignReport:
    rows: list
    summary: dict

    @property
    def all_passed(self) -> bool:
        return self.summary["failed"] == 0

    def to_json(self, path=None) -> dict:
        doc = {"cases": self.rows, "summary": self.summary}
        if path is not None:
            with open(path, "w") as fh:
                json.dump(doc, fh, indent=2)
        return doc


def run_campaign(c: Campaign) -> CampaignReport:
    """Simulate every case and check both envelope forms pointwise.

    The additive form beta(|x0|, t) + gamma(N) + overflow is the primary
    assertion; the max form max(beta(M, t) + gamma(N), overflow) is checked
    alongside. A blow-up or numerical failure in an asserted case fails it.
    """
    rows = []
    failed = 0
    asserted = 0
    worst = math.inf
    for k, case in enumerate(c.cases):
        traj = sample_solve(c.loop, case.partition, case.x0, case.u, case.e)
        x0n = float(np.linalg.norm(case.x0))
        add_m, max_m, fine_m, first = _case_margins(traj, c.envelope, x0n, c.M, c.N)
        row = {
            "id": k,
            "label": case.label,
            "status": traj.status.kind,
            "asserted": bool(case.assert_envelope),
            "worst_margin": min(add_m, max_m),
            "margin_additive": add_m,
            "margin_maxform": max_m,
            "margin_additive_fine": fine_m,
            "first_violation_t": first,
        }
        if case.assert_envelope:
            asserted += 1
            ok = (traj.status.kind not in (BLOWUP, NUMERICAL_FAILURE)
                  and add_m >= 0.0 and max_m >= 0.0)
            row["pass"] = bool(ok)
            if not ok:
                failed += 1
            worst = min(worst, add_m)
        else:
            row["pass"] = None
        if c.check_decrease and c.clf is not None:
            rep = decrease_check(traj, c.clf, c.guard, c.s_level,
                                 c.decrease_rel_tol)
            row["decrease"] = {"checked": rep.checked, "excluded": rep.excluded,
                               "violations": len(rep.violations)}
        rows.append(row)
    summary = {
        "total": len(c.cases),
        "asserted": asserted,
        "failed": failed,
        "worst_margin": (None if worst is math.inf else worst),
    }
    return CampaignReport(rows, summary)


def random_disturbance(kind: str, dim: int, bound: float, partition: Partition,
                       rng) -> Signal:
    """Disturbance families used by campaigns and the adversarial search."""
    if bound == 0.0:
        return zero_signal(dim)
    if kind == "piecewise":
        count = partition.intervals
        if dim == 1:
            vals = bound * rng.choice([-1.0, 1.0], size=(count, 1))
        else:
            vals = rng.normal(size=(count, dim))
            vals *= bound / np.linalg.norm(vals, axis=1, keepdims=True)
        return piecewise_constant_signal(partition.times[:-1], vals, bound)
    if kind == "constant":
        d = rng.normal(size=dim)
        return constant_signal(bound * d / np.linalg.norm(d))
    if kind == "sine":
        d = rng.normal(size=dim)
        return sine_signal(d, bound, rng.uniform(0.1, 2.0), rng.uniform(0, 2 * np.pi))
    raise ValueError(f"unknown disturbance kind {kind!r}")


def random_noise(dim: int, bound: float, rng) -> Signal:
    if bound == 0.0:
        return zero_signal(dim)
    d = rng.normal(size=dim)
    return constant_signal(bound * d / np.linalg.norm(d))


def make_cases(loop: ClosedLoop, guard: RateGuard, M: float, N: float,
               count: int, horizon: float, seed: int = 0,
               step_fraction: float = 0.9,
               disturbance_kinds=("piecewise", "constant", "sine")) -> list:
    """Admissible random cases: |x0| <= M, sup u <= N, noise within the guard."""
    rng = np.random.default_rng(seed)
    step = step_fraction * guard.delta
    cases = []
    for k in range(count):
        d = rng.normal(size=loop.n)
        x0 = rng.uniform(0.1, 1.0) * M * d / np.linalg.norm(d)
        part = make_partition("uniform", horizon, step)
        kind = disturbance_kinds[k % len(disturbance_kinds)]
        u = random_disturbance(kind, loop.m, N, part, rng)
        e_bound = 0.99 * guard.kappa * lower_diameter(part) * rng.uniform(0.0, 1.0)
        e = random_noise(loop.n, e_bound, rng)
        cases.append(CampaignCase(x0, u, e, part, label=f"{kind}-{k}"))
    return cases


def adversarial_search(c: Campaign, budget: int, seed: int = 0,
                       horizon: float | None = None) -> dict:
    """Randomized search for the largest envelope violation over admissible cases.

    Returns the worst case found with its violation margin; a negative margin
    means no violation was found. Blow-ups count as unbounded violations.
    """
    if budget < 1:
        raise ValueError("budget must be at least 1")
    rng = np.random.default_rng(seed)
    if horizon is None:
        horizon = max(case.partition.horizon for case in c.cases) if c.cases else 1.0
    worst = {"violation_margin": -math.inf, "case": None, "status": None}
    for k in range(budget):
        d = rng.normal(size=c.loop.n)
        x0 = rng.uniform(0.05, 1.0) * c.M * d / np.linalg.norm(d)
        step = rng.uniform(0.3, 0.9) * c.guard.delta
        part = make_partition("uniform", horizon, step)
        kind = ("piecewise", "constant", "sine")[k % 3]
        u = random_disturbance(kind, c.loop.m, c.N, part, rng)
        e = random_noise(c.loop.n,
                         0.99 * c.guard.kappa * lower_diameter(part) * rng.uniform(0, 1),
                         rng)
        traj = sample_solve(c.loop, part, x0, u, e)
        x0n = float(np.linalg.norm(x0))
        if traj.status.kind in (BLOWUP, NUMERICAL_FAILURE):
            viol = math.inf
        else:
            add_m, _, _, _ = _case_margins(traj, c.envelope, x0n, c.M, c.N)
            viol = -add_m
        if viol > worst["violation_margin"]:
            worst = {
                "violation_margin": viol,
                "case": {"x0": x0.tolist(), "step": step, "disturbance": kind,
                         "e_bound": e.bound, "index": k},
                "status": traj.status.kind,
            }
    return worst
