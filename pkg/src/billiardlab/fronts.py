"""Convex fronts carried by the billiard flow in the plane.

A front is a curve of phase points moving orthogonally to itself; in two
dimensions its shape operator is a single curvature B >= 0 (positive for
diverging fronts). Free flight spreads it, dispersing reflections sharpen
it, and the per-flight factors delta_j = 1/(1 + d_j l_j) multiply to the
inverse of the tangent expansion along the trajectory.

The finite-difference and residual oracles trace trajectories in
arbitrary precision (see :mod:`billiardlab.mptrace`) so that expansions of
order 1e10 can be resolved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import mpmath
import numpy as np
from mpmath import mp, mpf

from . import mptrace
from .dynamics import TIME_TOL, PhasePoint, Reflection, Trajectory
from .errors import (InconsistentCurvature, ItineraryChanged, PreconditionError, TangentHit)
from .geometry import TANGENCY_TOL, BoundaryPoint, ConvexObstacle, ObstacleConfiguration

CURVATURE_TOL = 1e-10
FD_STEP = mpf("1e-20")
FD_DPS = 50


def _perp(v) -> np.ndarray:
    return np.array([-v[1], v[0]], dtype=float)


@dataclass(frozen=True)
class FrontState:
    """A planar front through ``base`` with curvature B and tangent e."""

    base: PhasePoint
    B: float
    e: np.ndarray = None

    def __post_init__(self):
        if not np.isfinite(self.B) or self.B < 0:
            raise PreconditionError("front curvature must be finite and non-negative")
        e = _perp(self.base.v) if self.e is None else np.asarray(self.e, dtype=float)
        if abs(np.linalg.norm(e) - 1.0) > 1e-9 or abs(float(e @ self.base.v)) > 1e-9:
            raise PreconditionError("front tangent must be a unit vector orthogonal to the velocity")
        object.__setattr__(self, "e", e)

    @classmethod
    def flat(cls, base: PhasePoint) -> "FrontState":
        return cls(base, 0.0)


def propagate_free(front: FrontState, t: float) -> FrontState:
    """Advance the front by a free flight of length t (no reflection inside)."""
    if t < 0:
        raise PreconditionError("free flight time must be non-negative")
    base = PhasePoint(front.base.q + t * front.base.v, front.base.v)
    return FrontState(base, front.B / (1.0 + t * front.B), front.e)


def reflect_front(front: FrontState, curvature: float, cos_phi: float, normal=None) -> FrontState:
    """Front right after a dispersing reflection: B+ = B- + 2K/cos(phi).

    With ``normal`` given, the base velocity and tangent are mirrored too.
    """
    if cos_phi < TANGENCY_TOL:
        raise TangentHit("front reflects too close to tangentially")
    if curvature < 0:
        raise PreconditionError("boundary curvature must be non-negative for dispersing reflections")
    base, e = front.base, front.e
    if normal is not None:
        nu = np.asarray(normal, dtype=float)
        v = base.v - 2.0 * float(base.v @ nu) * nu
        e = e - 2.0 * float(e @ nu) * nu
        base = PhasePoint(base.q, v / np.linalg.norm(v))
        e = e / np.linalg.norm(e)
    return FrontState(base, front.B + 2.0 * curvature / cos_phi, e)


def delta_factor(d: float, k: float, normBe: float):
    """(l_j, delta_j) from the flight length and the front curvature data.

    l solves (1 + d l)^2 = 1 + 2 d k + d^2 |B e|^2.
    """
    if d < 0:
        raise PreconditionError("flight length must be non-negative")
    if k < -CURVATURE_TOL or k > normBe + CURVATURE_TOL:
        raise InconsistentCurvature(f"need 0 <= k <= |Be|, got k={k!r}, |Be|={normBe!r}")
    if d == 0:
        return float(normBe), 1.0
    root = math.sqrt(1.0 + 2.0 * d * k + d * d * normBe * normBe)
    ell = (root - 1.0) / d
    return ell, 1.0 / root


@dataclass
class ExpansionRecord:
    j: int
    d: float
    k: float
    normBe: float
    ell: float
    delta: float
    cum_log_expansion: float


@dataclass
class ExpansionResult:
    records: List[ExpansionRecord]
    product: float
    log_product: float
    fronts: List[FrontState] = field(default_factory=list)

    @property
    def expansion(self) -> float:
        return math.exp(-self.log_product)

    def rows(self):
        return [(r.j, r.d, r.k, r.normBe, r.ell, r.delta, r.cum_log_expansion) for r in self.records]


EXPANSION_HEADER = ("j", "d_j", "k_j", "normBe_j", "ell_j", "delta_j", "cum_log_expansion")


def _bounce_schedule(traj: Trajectory, count: int) -> List[Reflection]:
    """First ``count`` reflections strictly after time 0, unrolling closed orbits."""
    later = [r for r in traj.reflections if r.time > TIME_TOL]
    if len(later) >= count:
        return later[:count]
    closed = traj.end_time is not None and traj.reflections and traj.reflections[0].time <= TIME_TOL \
        and traj.word is not None and len(traj.reflections) == len(traj.word)
    if not closed:
        raise PreconditionError(f"trajectory has {len(later)} reflections, {count} requested")
    period = traj.end_time
    base = list(traj.reflections)
    out = []
    k = 1
    while len(out) < count:
        for r in base:
            out.append(Reflection(r.point, r.time + k * period, r.direction, r.cos_angle))
        k += 1
    return (later + out)[:count]


def expansion_along_trajectory(traj: Trajectory, config: ObstacleConfiguration, front: Optional[FrontState] = None,
                               m: Optional[int] = None, tail: float = 0.0) -> ExpansionResult:
    """delta_0 ... delta_m along traj; their product is the inverse expansion.

    The front starts at traj.start (after any reflection recorded at time
    0). Flights 0..m-1 run between consecutive reflections; the last one
    has length ``tail`` and ends strictly before reflection m+1.
    """
    if m is None:
        m = len([r for r in traj.reflections if r.time > TIME_TOL])
    if m < 0 or tail < 0:
        raise PreconditionError("bounce count and tail must be non-negative")
    if front is None:
        front = FrontState.flat(traj.start)
    bounces = _bounce_schedule(traj, m)
    if tail > 0:
        try:
            nxt = _bounce_schedule(traj, m + 1)[m]
        except PreconditionError:
            nxt = None  # the trajectory does not record the next reflection
        t_m = bounces[-1].time if m else 0.0
        if nxt is not None and t_m + tail >= nxt.time - TIME_TOL:
            raise PreconditionError("tail flight reaches the next reflection")
    records, fronts = [], [front]
    t_prev, log_prod = 0.0, 0.0
    for j in range(m + 1):
        d = (bounces[j].time - t_prev) if j < m else tail
        ell, delta = delta_factor(d, front.B, front.B)
        log_prod += math.log(delta)
        records.append(ExpansionRecord(j, d, front.B, front.B, ell, delta, -log_prod))
        if j == m:
            break
        r = bounces[j]
        front = propagate_free(front, d)
        obs = config[r.obstacle]
        nu = obs.normal(r.point.param)
        front = FrontState(PhasePoint(r.point.position, front.base.v), front.B, front.e)
        front = reflect_front(front, float(obs.curvature(r.point.param)), r.cos_angle, nu)
        fronts.append(front)
        t_prev = r.time
    return ExpansionResult(records, math.exp(log_prod), log_prod, fronts)


def periodic_unstable_curvature(traj: Trajectory, config: ObstacleConfiguration, tol: float = 1e-15,
                                max_periods: int = 200) -> float:
    """Invariant post-reflection front curvature at the start of a closed orbit."""
    if traj.end_time is None or traj.word is None:
        raise PreconditionError("a closed orbit is required")
    p = len(traj.word)
    refl = list(traj.reflections[1:]) + [traj.reflections[0]]
    flights = traj.free_paths
    Ks = [float(config[r.obstacle].curvature(r.point.param)) for r in refl]
    B = 0.0
    for _ in range(max_periods):
        B_old = B
        for j in range(p):
            B = B / (1.0 + flights[j] * B) + 2.0 * Ks[j] / refl[j].cos_angle
        if abs(B - B_old) <= tol * max(1.0, B):
            return B
    return B


def period_expansion(traj: Trajectory, config: ObstacleConfiguration) -> float:
    """Unstable expansion of a closed orbit over one period, via fronts."""
    B = periodic_unstable_curvature(traj, config)
    res = expansion_along_trajectory(traj, config, FrontState(traj.start, B), m=len(traj.word))
    return res.expansion


# ---------------------------------------------------------------------------
# finite-difference oracle


@dataclass
class FDResult:
    expansion: float
    raw: tuple  # (R(s), R(s/2))
    s: float
    base: Trajectory
    tail: float
    m: int


def _mp_front_point(q0, v0, e0, B, s):
    """Point and velocity at arclength s along the initial front."""
    if B > 0:
        rad = 1 / B
        a = s * B
        ca, sa = mpmath.cos(a), mpmath.sin(a)
        cx, cy = q0[0] - rad * v0[0], q0[1] - rad * v0[1]
        vx, vy = ca * v0[0] + sa * e0[0], ca * v0[1] + sa * e0[1]
        return (cx + rad * vx, cy + rad * vy), (vx, vy)
    return (q0[0] + s * e0[0], q0[1] + s * e0[1]), v0


def _to_float_trajectory(config, start, events, exclude, start_cos) -> Trajectory:
    q0 = np.array([float(start[0][0]), float(start[0][1])])
    v0 = np.array([float(start[1][0]), float(start[1][1])])
    v0 /= np.linalg.norm(v0)
    refl = []
    if exclude is not None:
        obs = config[exclude]
        refl.append(Reflection(BoundaryPoint(exclude, q0, obs.param_of(q0)), 0.0, v0, start_cos))
    for ev in events:
        q = np.array([float(ev.x), float(ev.y)])
        v = np.array([float(ev.dx), float(ev.dy)])
        obs = config[ev.obstacle]
        refl.append(Reflection(BoundaryPoint(ev.obstacle, q, obs.param_of(q)), float(ev.time), v / np.linalg.norm(v),
                               float(ev.cos_phi)))
    return Trajectory(start=PhasePoint(q0, v0), reflections=refl)


def finite_difference_expansion(traj: Trajectory, config: ObstacleConfiguration, m: int, B0: float = 0.0,
                                tail: Optional[float] = None, s=None, dps: int = FD_DPS) -> FDResult:
    """Expansion of the front from time 0 to t_m + tail by finite differences.

    Two neighbours at arclength s and s/2 along the initial front (of
    curvature B0 through traj.start) are traced next to the base point in
    ``dps``-digit arithmetic; the ratios of endpoint to start separations
    are Richardson-extrapolated. The returned ``base`` trajectory is the
    high-precision base orbit rounded to floats, so that the front product
    can be evaluated along exactly the same path.
    """
    if m < 0:
        raise PreconditionError("bounce count must be non-negative")
    with mp.workdps(dps):
        s = FD_STEP if s is None else mpf(s)
        if s == 0:
            raise PreconditionError("perturbation size must be non-zero")
        obstacles = [mptrace.MPObstacle.of(o) for o in config.obstacles]
        exclude = None
        start_cos = 1.0
        if traj.reflections and traj.reflections[0].time <= TIME_TOL:
            exclude = traj.reflections[0].obstacle
            start_cos = traj.reflections[0].cos_angle
        q0 = (mpf(float(traj.start.q[0])), mpf(float(traj.start.q[1])))
        vx, vy = mpf(float(traj.start.v[0])), mpf(float(traj.start.v[1]))
        nv = mpmath.sqrt(vx * vx + vy * vy)
        v0 = (vx / nv, vy / nv)
        e0 = (-v0[1], v0[0])
        B = mpf(B0)
        events = mptrace.trace_reflections(obstacles, q0[0], q0[1], v0[0], v0[1], m + 1, exclude)
        t_m = events[m - 1].time if m else mpf(0)
        nxt = events[m].time - t_m
        if tail is None:
            tail_mp = nxt / 2
        else:
            tail_mp = mpf(tail)
            if tail_mp >= nxt or tail_mp < 0:
                raise PreconditionError("tail flight must end before the next reflection")
        T = t_m + tail_mp
        if m:
            ev = events[m - 1]
            p0 = (ev.x + tail_mp * ev.dx, ev.y + tail_mp * ev.dy)
        else:
            p0 = (q0[0] + tail_mp * v0[0], q0[1] + tail_mp * v0[1])
        want = [ev.obstacle for ev in events[:m]]

        def ratio(h):
            q, v = _mp_front_point(q0, v0, e0, B, h)
            (x, y, _, _), evs = mptrace.trace_to_time(obstacles, q[0], q[1], v[0], v[1], T, exclude)
            if [e.obstacle for e in evs] != want:
                raise ItineraryChanged(f"perturbation {mpmath.nstr(h, 3)} changes the itinerary")
            return mptrace.dist((x, y), p0) / mptrace.dist(q, q0)

        r1, r2 = ratio(s), ratio(s / 2)
        est = 2 * r2 - r1
        base = _to_float_trajectory(config, (q0, v0), events[:m + 1], exclude, start_cos)
        return FDResult(float(est), (float(r1), float(r2)), float(s), base, float(tail_mp), m)


# ---------------------------------------------------------------------------
# quadratic residual of the one-step expansion estimate


@dataclass
class ResidualCurve:
    s: np.ndarray
    displacement: np.ndarray  # |eta(s) - eta(0)|
    residual: np.ndarray
    linear_coefficient: float  # 1 + tau l_0
    slope: float
    C: float
    tau: float
    reflected: bool


def _mp_curve_point(Y: ConvexObstacle, theta):
    ob = mptrace.MPObstacle.of(Y)
    x, y = ob.point(theta)
    nx, ny = ob.normal_at(x, y)
    return ob, (x, y), (nx, ny)


def linear_law_residual(Y: ConvexObstacle, Z: ConvexObstacle, theta0: float, s_values: Sequence[float] = None,
                    dps: int = 40, phi_max: float = 1.45) -> ResidualCurve:
    """Residual of the linear expansion law for a front leaving Y along its normals.

    eta(s) is the point of Y at parameter theta0 + s; each trajectory leaves
    along the outward normal of Y and is flowed for the time tau at which the
    s = 0 trajectory reaches Z. Reports the log-log slope of the residual
    against the displacement and the constant C = max r / |d eta|^2.
    """
    if s_values is None:
        s_values = np.logspace(-5, -2, 13)
    s_values = np.asarray(s_values, dtype=float)
    if np.any(s_values <= 0):
        raise PreconditionError("sweep values must be positive")
    with mp.workdps(dps):
        obY, q0, n0 = _mp_curve_point(Y, mpf(theta0))
        obZ = mptrace.MPObstacle.of(Z)
        tau = obZ.hit(q0[0], q0[1], n0[0], n0[1], mptrace._tmin())
        if tau is None:
            raise PreconditionError("base trajectory misses the target obstacle")
        hx, hy = q0[0] + tau * n0[0], q0[1] + tau * n0[1]
        zx, zy = obZ.normal_at(hx, hy)
        cphi = -(n0[0] * zx + n0[1] * zy)
        if cphi < mpmath.cos(phi_max):
            raise TangentHit("reflection angle exceeds the admissible bound")
        k0 = float(Y.curvature(theta0))
        coef = 1.0 + float(tau) * k0  # perfect square: l_0 = k_0 in the plane
        obs = [obY, obZ]
        p0 = (hx, hy)
        disp, res = [], []
        for s in s_values:
            _, q, n = _mp_curve_point(Y, mpf(theta0) + mpf(float(s)))
            (x, y, _, _), _evs = mptrace.trace_to_time(obs, q[0], q[1], n[0], n[1], tau, exclude=0)
            dq = mptrace.dist(q, q0)
            dp = mptrace.dist((x, y), p0)
            disp.append(float(dq))
            res.append(float(abs(dp - mpf(coef) * dq)))
    disp, res = np.array(disp), np.array(res)
    good = res > 0
    if good.sum() < 2:
        raise PreconditionError("residual vanishes identically on the sweep")
    slope = float(np.polyfit(np.log(disp[good]), np.log(res[good]), 1)[0])
    C = float(np.max(res / disp ** 2))
    return ResidualCurve(s_values, disp, res, coef, slope, C, float(tau), True)


def random_residual_instance(rng: np.random.Generator, max_tries: int = 1000):
    """A random (Y, Z, theta0) with a transversal hit of Z along Y's normal."""
    for _ in range(max_tries):
        a, b = rng.uniform(0.5, 1.5, size=2)
        Y = ConvexObstacle.ellipse((0.0, 0.0), a, b, rng.uniform(0, math.pi))
        dist = rng.uniform(3.0, 6.0)
        ang = rng.uniform(0, 2 * math.pi)
        za, zb = rng.uniform(0.5, 1.5, size=2)
        Z = ConvexObstacle.ellipse((dist * math.cos(ang), dist * math.sin(ang)), za, zb, rng.uniform(0, math.pi))
        theta0 = float(Y.param_of_normal(np.array([math.cos(ang), math.sin(ang)])) + rng.uniform(-0.2, 0.2))
        q, n = Y.point(theta0), Y.normal(theta0)
        t = Z.ray_hit(q, n, 1e-9)
        if t is None:
            continue
        hit = q + t * n
        cphi = -float(n @ Z.normal(Z.param_of(hit)))
        if cphi > math.cos(1.2):
            return Y, Z, theta0
    raise PreconditionError("no admissible random instance found")
