"""Benchmark systems and certificates.

The nonholonomic integrator (three states, two inputs, no drift) has no
continuous stabilizer, which makes it the canonical target for discontinuous
feedback. This module packages it with two nonsmooth CLFs and the matching
explicit feedback, the shopping-cart coordinate change that produces it, and a
scalar system that defeats continuous ISS feedback but becomes stabilizable
once the disturbance is routed through a state-dependent gain.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .clf import Clf
from .core import (ControlAffineSystem, FullyNonlinearSystem, Vector,
                   as_vector)
from .feedback import Feedback, k2, synthesize_k1
from .sampler import ClosedLoop, nonlinear_loop


# ---------------------------------------------------------------------------
# Nonholonomic integrator
# ---------------------------------------------------------------------------

class IntegratorRegion(Enum):
    ORIGIN = "origin"
    AXIS = "axis"              # x3 axis minus the origin
    POLAR = "polar"            # |x3| >= 2 r(x) > 0, around the axis
    EQUATORIAL = "equatorial"  # |x3| < 2 r(x)


def planar_radius(x) -> float:
    x = as_vector(x, 3)
    return float(math.hypot(x[0], x[1]))


def cone_margin(x) -> float:
    """x3^2 - 4 r(x)^2; zero exactly on the nonsmooth cone of the max CLF."""
    x = as_vector(x, 3)
    return float(x[2] * x[2] - 4.0 * (x[0] * x[0] + x[1] * x[1]))


def classify_region(x) -> IntegratorRegion:
    """Total classification: every point gets exactly one region tag."""
    x = as_vector(x, 3)
    r = planar_radius(x)
    if r == 0.0:
        return IntegratorRegion.ORIGIN if x[2] == 0.0 else IntegratorRegion.AXIS
    if x[2] * x[2] >= 4.0 * r * r:
        return IntegratorRegion.POLAR
    return IntegratorRegion.EQUATORIAL


def integrator_system() -> ControlAffineSystem:
    """dx1 = u1, dx2 = u2, dx3 = x1 u2 - x2 u1 (driftless)."""

    def f(x):
        return np.zeros(3)

    def G(x):
        return np.array([[1.0, 0.0],
                         [0.0, 1.0],
                         [-x[1], x[0]]])

    return ControlAffineSystem(3, 2, f, G)


def cart_to_integrator(state, controls):
    """Map cart coordinates (x1, x2, heading) and (drive, steer) commands.

    Returns the transformed state (z1, z2, z3) and controls (u1, u2) in
    integrator form: z1 = heading, z2/z3 the body-frame position components,
    u1 = steer, u2 = drive - steer * z3.
    """
    x1, x2, theta = (float(v) for v in as_vector(state, 3))
    v1, v2 = (float(v) for v in as_vector(controls, 2))
    z = np.array([
        theta,
        x1 * math.cos(theta) + x2 * math.sin(theta),
        x1 * math.sin(theta) - x2 * math.cos(theta),
    ])
    u = np.array([v2, v1 - v2 * z[2]])
    return z, u


def integrator_b(x) -> Vector:
    """Casewise channel derivatives <subgrad, g_j> for the max CLF selection."""
    x = as_vector(x, 3)
    region = classify_region(x)
    r = planar_radius(x)
    s3 = float(np.sign(x[2]))
    if region is IntegratorRegion.ORIGIN:
        return np.zeros(2)
    if region is IntegratorRegion.AXIS:
        return np.array([0.0, -1.0])
    if region is IntegratorRegion.POLAR:
        return np.array([-x[1] * s3 - x[0] / r, x[0] * s3 - x[1] / r])
    return np.array([x[0] / r, x[1] / r])


def integrator_max_clf() -> Clf:
    """Max-form CLF max(r, |x3| - r) with its casewise subgradient selection.

    Semiconcave away from the cone x3^2 = 4 r^2, so the estimate region
    excludes that cone; runs that cross it are flagged by the sampler.
    """

    def V(x):
        x = as_vector(x, 3)
        r = planar_radius(x)
        return max(r, abs(float(x[2])) - r)

    def subgrad(x):
        x = as_vector(x, 3)
        region = classify_region(x)
        r = planar_radius(x)
        s3 = float(np.sign(x[2]))
        if region is IntegratorRegion.ORIGIN:
            return np.zeros(3)
        if region is IntegratorRegion.AXIS:
            return np.array([0.0, -1.0, s3])
        if region is IntegratorRegion.POLAR:
            return np.array([-x[0] / r, -x[1] / r, s3])
        return np.array([x[0] / r, x[1] / r, 0.0])

    def domain(x):
        return cone_margin(x) != 0.0

    return Clf(3, V, subgrad, lambda s: s, domain, name="integrator_max")


def integrator_k1_k2(x):
    """Explicit casewise feedback pieces for the integrator with the max CLF."""
    x = as_vector(x, 3)
    region = classify_region(x)
    r = planar_radius(x)
    a3 = abs(float(x[2]))
    s3 = float(np.sign(x[2]))
    if region is IntegratorRegion.ORIGIN:
        return np.zeros(2), np.zeros(2)
    if region is IntegratorRegion.AXIS:
        return np.array([0.0, a3]), np.array([0.0, a3])
    if region is IntegratorRegion.POLAR:
        mu1 = (r - a3) / (r * r + 1.0)
        k1 = mu1 * np.array([-x[1] * s3 - x[0] / r, x[0] * s3 - x[1] / r])

        def mu2(a, b):
            return (a3 - r) * float(np.sign(b * r * s3 - a))

        k2v = -np.array([mu2(x[0], -x[1]), mu2(x[1], x[0])])
        return k1, k2v
    k1 = -np.array([x[0], x[1]])
    k2v = -r * np.sign(np.array([x[0], x[1]]))
    return k1, k2v


def integrator_feedback(component: str = "combined") -> Feedback:
    """Explicit closed-form feedback; component selects k1, k2, or their sum."""
    if component not in ("combined", "k1", "k2"):
        raise ValueError("component must be combined, k1 or k2")

    def ev(x):
        k1v, k2v = integrator_k1_k2(x)
        if component == "k1":
            return k1v
        if component == "k2":
            return k2v
        return k1v + k2v

    return Feedback(3, 2, ev, "explicit", f"integrator:{component}")


def integrator_squared_clf() -> Clf:
    """Squared-gap CLF (r - |x3|)^2 + x3^2, semiconcave away from the origin.

    The subgradient selection uses one-sided limits on the nonsmooth loci:
    approaching the x3 = 0 plane from x3 > 0, and approaching the axis along
    the first planar coordinate direction.
    """

    def V(x):
        x = as_vector(x, 3)
        r = planar_radius(x)
        gap = r - abs(float(x[2]))
        return gap * gap + float(x[2]) * float(x[2])

    def subgrad(x):
        x = as_vector(x, 3)
        r = planar_radius(x)
        a3 = abs(float(x[2]))
        s3 = float(np.sign(x[2]))
        if r == 0.0 and a3 == 0.0:
            return np.zeros(3)
        if r == 0.0:
            return np.array([-2.0 * a3, 0.0, 4.0 * x[2]])
        if a3 == 0.0:
            return np.array([2.0 * x[0], 2.0 * x[1], -2.0 * r])
        gap = r - a3
        return np.array([2.0 * gap * x[0] / r,
                         2.0 * gap * x[1] / r,
                         2.0 * x[2] - 2.0 * gap * s3])

    def domain(x):
        return bool(np.any(as_vector(x, 3)))

    return Clf(3, V, subgrad, lambda s: max(s, 1.0), domain,
               name="integrator_squared")


def integrator_feedback_crosscheck(count: int = 10000, seed: int = 0) -> dict:
    """Agreement report between the explicit formulas and the general recipe.

    Checks that the explicit first piece equals -b V / |b|^2, that the explicit
    damping piece matches the signed-damping formula, that the synthesized ball
    minimizer is parallel to the explicit first piece, and that the channel
    derivative norm satisfies 1 <= |b|^2 <= r^2 + 1.
    """
    rng = np.random.default_rng(seed)
    sys = integrator_system()
    clf = integrator_max_clf()
    worst_k1 = 0.0
    worst_k2 = 0.0
    worst_dir = 0.0
    worst_b_low = np.inf
    worst_b_high = -np.inf
    pts = []
    for _ in range(count):
        kind = rng.integers(0, 4)
        if kind == 0:
            x = np.array([0.0, 0.0, rng.uniform(-5, 5)])        # axis
        elif kind == 1:
            r = rng.uniform(0.05, 3.0)
            th = rng.uniform(0, 2 * np.pi)
            z = rng.uniform(2.05 * r, 6.0 * r) * rng.choice([-1.0, 1.0])
            x = np.array([r * np.cos(th), r * np.sin(th), z])   # polar
        else:
            r = rng.uniform(0.05, 5.0)
            th = rng.uniform(0, 2 * np.pi)
            z = rng.uniform(0.0, 1.9 * r) * rng.choice([-1.0, 1.0])
            x = np.array([r * np.cos(th), r * np.sin(th), z])   # equatorial
        if not np.any(x):
            continue
        pts.append(x)
        b = integrator_b(x)
        bn2 = float(b @ b)
        r2 = planar_radius(x) ** 2
        worst_b_low = min(worst_b_low, bn2)
        worst_b_high = max(worst_b_high, bn2 - (r2 + 1.0))
        v = clf.V(x)
        k1_formula = -b * v / bn2
        k1_explicit, k2_explicit = integrator_k1_k2(x)
        scale = max(np.linalg.norm(k1_formula), 1e-30)
        worst_k1 = max(worst_k1, float(np.linalg.norm(k1_explicit - k1_formula)) / scale)
        k2_general = k2(sys, clf, x)
        worst_k2 = max(worst_k2, float(np.linalg.norm(k2_explicit - k2_general)))
        k1_syn = synthesize_k1(sys, clf, x)
        ns = np.linalg.norm(k1_syn)
        ne = np.linalg.norm(k1_explicit)
        if ns > 0 and ne > 0:
            worst_dir = max(worst_dir, float(np.linalg.norm(k1_syn / ns - k1_explicit / ne)))
    return {
        "points": len(pts),
        "k1_rel_error": worst_k1,
        "k2_abs_error": worst_k2,
        "k1_direction_error": worst_dir,
        "b_norm_min_sq": worst_b_low,
        "b_norm_excess": worst_b_high,
    }


# ---------------------------------------------------------------------------
# Scalar systems
# ---------------------------------------------------------------------------

def scalar_integrator_system() -> ControlAffineSystem:
    """dx = u on the line."""
    return ControlAffineSystem(1, 1, lambda x: np.zeros(1),
                               lambda x: np.ones((1, 1)))


def scalar_abs_clf() -> Clf:
    """V = |x| with the sign selection; admissible control norm |x|."""
    return Clf(1,
               lambda x: abs(float(as_vector(x, 1)[0])),
               lambda x: np.sign(as_vector(x, 1)),
               lambda s: s,
               name="scalar_abs")


def scalar_square_clf() -> Clf:
    """Smooth V = x^2 with gradient 2x."""
    return Clf(1,
               lambda x: float(as_vector(x, 1)[0]) ** 2,
               lambda x: 2.0 * as_vector(x, 1),
               lambda s: s,
               name="scalar_square")


def counterexample_system() -> FullyNonlinearSystem:
    """dx = -x + u^2 x^2: open-loop stable, yet no continuous feedback makes
    the disturbed loop bounded; inputs of size one blow it up from x = 4."""

    def f(x, u):
        xv = float(as_vector(x, 1)[0])
        uv = float(as_vector(u, 1)[0])
        return np.array([-xv + uv * uv * xv * xv])

    return FullyNonlinearSystem(1, 1, f)


# ---------------------------------------------------------------------------
# Weak-ISS certificate for fully nonlinear loops
# ---------------------------------------------------------------------------

class BandInfeasible(RuntimeError):
    def __init__(self, band):
        self.band = band
        super().__init__(f"no positive disturbance radius keeps decay negative on band {band}")


def _sphere_dirs(dim: int, probes: int, rng) -> list:
    """Axis extremes plus random unit vectors; on the line just the two signs."""
    if dim == 1:
        return [np.array([1.0]), np.array([-1.0])]
    out = []
    for i in range(dim):
        e = np.zeros(dim)
        e[i] = 1.0
        out += [e, -e]
    for _ in range(probes):
        d = rng.normal(size=dim)
        out.append(d / np.linalg.norm(d))
    return out


def estimate_decay_margin(sys: FullyNonlinearSystem, clf: Clf, k1_eval,
                          s: float, r: float, probes: int = 64,
                          seed: int = 0) -> float:
    """Worst decay margin sup <subgrad(x), f(x, k1(x) + p)> + V(x)/2 over
    |x| = s, |p| = r, by Monte Carlo plus axis extremes."""
    if s < 0 or r < 0:
        raise ValueError("radii must be nonnegative")
    rng = np.random.default_rng(seed)
    pds = _sphere_dirs(sys.m, probes, rng)
    best = -np.inf
    for dx in _sphere_dirs(sys.n, probes, rng):
        x = s * dx
        z = as_vector(clf.subgrad(x), sys.n)
        base = as_vector(k1_eval(x), sys.m)
        v_half = 0.5 * float(clf.V(x))
        for dp in pds:
            val = float(z @ as_vector(sys.f(x, base + r * dp), sys.n)) + v_half
            best = max(best, val)
    return best


@dataclass(frozen=True, eq=False)
class WeakIssCertificate:
    """Disturbance-radius staircase plus the smooth gain that realizes it.

    r_seq[i] is the admissible disturbance radius on the state-norm band
    [i+1, i+2); r_prime_seq[i] covers the reciprocal band down toward zero,
    interleaved so the full sequence decreases strictly. g is the monotone C^1
    gain profile (1 near the origin, below rho(s)/s beyond s = 2) and alpha4
    the tabulated input-to-radius threshold used in the envelope.
    """

    k1: Feedback
    decay_margin: Callable[[float, float], float]
    r_seq: np.ndarray
    r_prime_seq: np.ndarray
    i_max: int
    alpha4_grid: np.ndarray
    alpha4_values: np.ndarray

    def rho(self, s: float) -> float:
        """Piecewise-constant admissible disturbance radius at state norm s."""
        if s <= 0.0:
            return 0.0
        if s >= 1.0:
            k = min(int(math.floor(s)), self.i_max)
            return float(self.r_seq[k - 1])
        k = min(max(int(math.ceil(1.0 / s)) - 1, 1), self.i_max)
        return float(self.r_prime_seq[k - 1])

    def _level(self, k: int) -> float:
        # bridge target on [k, k+1]: the band minimum of rho(s)/s
        if k <= 1:
            return 1.0
        rk = float(self.r_seq[min(k, self.i_max) - 1])
        return min(1.0, rk / (k + 1.0))

    def g(self, s: float) -> float:
        """Smooth monotone gain: 1 on [0, 1], then bridged down staircase levels."""
        if s <= 1.0:
            return 1.0
        k = int(math.floor(s))
        tau = s - k
        lo, hi = self._level(k), self._level(k + 1)
        step = tau * tau * (3.0 - 2.0 * tau)
        return lo + (hi - lo) * step

    def G_matrix(self, x) -> np.ndarray:
        x = as_vector(x)
        return self.g(float(np.linalg.norm(x))) * np.eye(self.k1.m)

    def alpha4(self, s: float) -> float:
        """Tabulated threshold radius, at least the identity, nondecreasing."""
        if s <= 0.0:
            return 0.0
        v = float(np.interp(s, self.alpha4_grid, self.alpha4_values))
        if s > self.alpha4_grid[-1]:
            v = float(self.alpha4_values[-1])
        return max(v, float(s))

    def bands(self) -> list:
        out = []
        for i in range(1, self.i_max + 1):
            out.append({"lo": float(i), "hi": float(i + 1),
                        "radius": float(self.r_seq[i - 1])})
        for i in range(1, self.i_max + 1):
            out.append({"lo": 1.0 / (i + 1), "hi": 1.0 / i,
                        "radius": float(self.r_prime_seq[i - 1])})
        return out

    def to_json(self, path=None) -> dict:
        knots = [[float(k), self._level(k)] for k in range(1, self.i_max + 2)]
        doc = {
            "bands": self.bands(),
            "g_knots": knots,
            "alpha4_table": [[float(a), float(b)] for a, b in
                             zip(self.alpha4_grid, self.alpha4_values)],
        }
        if path is not None:
            with open(path, "w") as fh:
                json.dump(doc, fh, indent=2)
        return doc


def _band_radius(margin_fn, lo: float, hi: float, band_grid: int,
                 iters: int = 40, cap: float = 64.0) -> float:
    """Largest b with negative decay margin for every s in the band and every
    disturbance magnitude up to b (scanned on sub-grids, bisected on b)."""
    s_grid = np.linspace(lo, hi, band_grid)

    def worst(b):
        out = -np.inf
        for frac in np.linspace(0.0, 1.0, 9):
            for s in s_grid:
                out = max(out, margin_fn(float(s), float(b * frac)))
        return out

    tiny = 1e-9
    if worst(tiny) >= 0.0:
        return 0.0
    hi_b = 1.0
    while worst(hi_b) < 0.0 and hi_b < cap:
        hi_b *= 2.0
    if hi_b >= cap:
        return cap
    lo_b = hi_b / 2.0 if hi_b > 1.0 else tiny
    for _ in range(iters):
        mid = 0.5 * (lo_b + hi_b)
        if worst(mid) < 0.0:
            lo_b = mid
        else:
            hi_b = mid
    return lo_b


def build_weak_iss_certificate(sys: FullyNonlinearSystem, clf: Clf,
                               k1: Feedback, i_max: int = 8,
                               safety: float = 0.9, band_grid: int = 17,
                               probes: int = 64, seed: int = 0,
                               alpha4_max: float = 2.0,
                               alpha4_points: int = 41) -> WeakIssCertificate:
    """Build the staircase / gain / threshold certificate for a nonlinear loop.

    Per band, a bisection finds the largest disturbance magnitude keeping the
    estimated decay margin negative; radii are deflated by the safety factor
    and clamped so the interleaved sequence decreases strictly. The gain g
    bridges the per-band minima of rho(s)/s with a clamped smoothstep, and
    alpha4 is tabulated by scanning state-norm shells for the largest one where
    the closed decay inequality still fails under inputs up to each magnitude.
    """
    if i_max < 1:
        raise ValueError("need at least one band")

    def margin(s, r):
        return estimate_decay_margin(sys, clf, k1.eval, s, r, probes, seed)

    raw_r = []
    for i in range(1, i_max + 1):
        b = _band_radius(margin, float(i), float(i + 1), band_grid)
        if b <= 0.0:
            raise BandInfeasible((i, i + 1))
        raw_r.append(safety * b)
    raw_rp = []
    for i in range(1, i_max + 1):
        b = _band_radius(margin, 1.0 / (i + 1), 1.0 / i, band_grid)
        if b <= 0.0:
            raise BandInfeasible((1.0 / (i + 1), 1.0 / i))
        raw_rp.append(safety * b)

    # interleave r_1 > r'_1 > r_2 > r'_2 > ... strictly
    shrink = 1.0 - 1e-6
    r_seq = np.empty(i_max)
    rp_seq = np.empty(i_max)
    prev = np.inf
    for i in range(i_max):
        r_seq[i] = min(raw_r[i], prev * shrink)
        rp_seq[i] = min(raw_rp[i], r_seq[i] * shrink)
        prev = rp_seq[i]

    cert = WeakIssCertificate(k1, margin, r_seq, rp_seq, i_max,
                              np.array([0.0, 1.0]), np.array([0.0, 1.0]))

    # tabulate alpha4 against the installed gain
    n_grid = np.linspace(0.0, alpha4_max, alpha4_points)
    shell_grid = np.linspace(1e-3, float(i_max + 1), 16 * (i_max + 1) + 1)
    rng = np.random.default_rng(seed + 1)
    scan_probes = max(probes // 4, 8)
    u_dirs = _sphere_dirs(sys.m, scan_probes, rng)
    x_dirs = _sphere_dirs(sys.n, scan_probes, rng)

    spacing = shell_grid[1] - shell_grid[0]
    a4 = np.zeros(alpha4_points)
    for ni, nv in enumerate(n_grid):
        worst_s = 0.0
        for s in shell_grid:
            gval = cert.g(float(s))
            hit = False
            for dx in x_dirs:
                x = s * dx
                z = as_vector(clf.subgrad(x), sys.n)
                base = as_vector(k1.eval(x), sys.m)
                v_half = 0.5 * float(clf.V(x))
                for du in u_dirs:
                    val = float(z @ as_vector(sys.f(x, base + gval * nv * du), sys.n)) + v_half
                    if val > 0.0:
                        hit = True
                        break
                if hit:
                    break
            if hit:
                worst_s = s
        a4[ni] = worst_s + spacing if worst_s > 0.0 else 0.0
    a4 = np.maximum.accumulate(a4)
    a4 = np.maximum(a4, n_grid)

    return WeakIssCertificate(k1, margin, r_seq, rp_seq, i_max, n_grid, a4)


def validate_certificate(cert: WeakIssCertificate, sys: FullyNonlinearSystem,
                         clf: Clf, samples: int = 200, seed: int = 0) -> dict:
    """Spot-check the certificate's defining inequalities; returns a report."""
    rng = np.random.default_rng(seed)
    report = {"interleaved": True, "g_conditions": True, "bands_negative": True,
              "decay_holds": True, "worst_band_margin": -np.inf}
    seq = []
    for a, b in zip(cert.r_seq, cert.r_prime_seq):
        seq += [float(a), float(b)]
    report["interleaved"] = all(x > y > 0 for x, y in zip(seq, seq[1:]))
    for s in np.linspace(0.0, 1.0, 33):
        if cert.g(float(s)) != 1.0:
            report["g_conditions"] = False
    for s in np.linspace(2.0, float(cert.i_max + 3), 200):
        gs = cert.g(float(s))
        if gs > 1.0 + 1e-12 or gs * s > cert.rho(float(s)) + 1e-9:
            report["g_conditions"] = False
    for band in cert.bands():
        for _ in range(max(samples // (2 * cert.i_max), 4)):
            s = rng.uniform(band["lo"], band["hi"])
            b = rng.uniform(0.0, band["radius"])
            mval = cert.decay_margin(float(s), float(b))
            report["worst_band_margin"] = max(report["worst_band_margin"], mval)
            if mval >= 0.0:
                report["bands_negative"] = False
    for _ in range(samples):
        nv = rng.uniform(0.0, cert.alpha4_grid[-1])
        lo = cert.alpha4(nv) + 1e-6
        hi = float(cert.i_max + 1)
        if lo >= hi:
            continue
        s = rng.uniform(lo, hi)
        d = rng.normal(size=sys.n)
        x = s * d / np.linalg.norm(d)
        z = as_vector(clf.subgrad(x), sys.n)
        base = as_vector(cert.k1.eval(x), sys.m)
        du = rng.normal(size=sys.m)
        du *= nv / max(np.linalg.norm(du), 1e-30)
        val = float(z @ as_vector(sys.f(x, base + cert.G_matrix(x) @ du), sys.n))
        if val > -0.5 * float(clf.V(x)) + 1e-9:
            report["decay_holds"] = False
    return report


def weak_iss_loop(sys: FullyNonlinearSystem, k1: Feedback,
                  cert: WeakIssCertificate, substeps: int = 16,
                  escape_radius: float = 1e9) -> ClosedLoop:
    """Closed loop dx/dt = f(x, held + G(x) u) with the certificate's gain."""
    return nonlinear_loop(sys, k1, cert.G_matrix, substeps, escape_radius)
