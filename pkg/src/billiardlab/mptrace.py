"""Arbitrary-precision ray tracing, used by the finite-difference oracles.

Kept separate from the float64 tracer on purpose: the oracles must not
share code with the paths they check.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import mpmath
from mpmath import mp, mpf

from .errors import Escape, TangentHit


@dataclass
class MPObstacle:
    cx: mpf
    cy: mpf
    a: mpf
    b: mpf
    ca: mpf  # cos(angle)
    sa: mpf

    @classmethod
    def of(cls, obs) -> "MPObstacle":
        a, b = obs.semi_axes
        return cls(mpf(obs.center[0]), mpf(obs.center[1]), mpf(a), mpf(b), mpmath.cos(mpf(obs.angle)),
                   mpmath.sin(mpf(obs.angle)))

    def to_local(self, x, y):
        dx, dy = x - self.cx, y - self.cy
        return self.ca * dx + self.sa * dy, -self.sa * dx + self.ca * dy

    def vec_to_local(self, x, y):
        return self.ca * x + self.sa * y, -self.sa * x + self.ca * y

    def vec_to_world(self, x, y):
        return self.ca * x - self.sa * y, self.sa * x + self.ca * y

    def point(self, theta):
        lx, ly = self.a * mpmath.cos(theta), self.b * mpmath.sin(theta)
        wx, wy = self.vec_to_world(lx, ly)
        return self.cx + wx, self.cy + wy

    def normal_at(self, x, y):
        lx, ly = self.to_local(x, y)
        gx, gy = lx / self.a ** 2, ly / self.b ** 2
        nrm = mpmath.sqrt(gx * gx + gy * gy)
        return self.vec_to_world(gx / nrm, gy / nrm)

    def hit(self, ox, oy, dx, dy, tmin):
        lox, loy = self.to_local(ox, oy)
        ldx, ldy = self.vec_to_local(dx, dy)
        px, py, qx, qy = lox / self.a, loy / self.b, ldx / self.a, ldy / self.b
        A = qx * qx + qy * qy
        B = 2 * (px * qx + py * qy)
        C = px * px + py * py - 1
        disc = B * B - 4 * A * C
        if disc < 0:
            return None
        sq = mpmath.sqrt(disc)
        q = -(B + (sq if B >= 0 else -sq)) / 2
        roots = sorted(r for r in ((q / A) if A != 0 else None, (C / q) if q != 0 else None) if r is not None)
        for t in roots:
            if t > tmin:
                return t
        return None


@dataclass
class MPEvent:
    obstacle: int
    x: mpf
    y: mpf
    time: mpf
    dx: mpf
    dy: mpf
    cos_phi: mpf


def _next_hit(obstacles, x, y, dx, dy, tmin, exclude=None):
    best, bi = None, -1
    for i, ob in enumerate(obstacles):
        if i == exclude:
            continue
        t = ob.hit(x, y, dx, dy, tmin)
        if t is not None and (best is None or t < best):
            best, bi = t, i
    return best, bi


def _bounce(ob, x, y, dx, dy):
    nx, ny = ob.normal_at(x, y)
    c = dx * nx + dy * ny
    if c > -mpf("1e-9"):
        raise TangentHit("tangential hit in high-precision trace")
    dx, dy = dx - 2 * c * nx, dy - 2 * c * ny
    nrm = mpmath.sqrt(dx * dx + dy * dy)
    return dx / nrm, dy / nrm, -c


def _tmin():
    return mpf(10) ** (-(mp.dps // 2))


def trace_to_time(obstacles: List[MPObstacle], x, y, dx, dy, t_end, exclude=None, max_events=10_000):
    """Flow (x, y, dx, dy) for time t_end; returns end state and reflection events.

    ``exclude`` is skipped for the first flight only (the obstacle the
    trajectory is leaving).
    """
    tmin = _tmin()
    elapsed = mpf(0)
    events: List[MPEvent] = []
    for _ in range(max_events):
        best, bi = _next_hit(obstacles, x, y, dx, dy, tmin, exclude if not events else None)
        if best is None or elapsed + best >= t_end:
            rem = t_end - elapsed
            return (x + rem * dx, y + rem * dy, dx, dy), events
        x, y = x + best * dx, y + best * dy
        elapsed += best
        dx, dy, c = _bounce(obstacles[bi], x, y, dx, dy)
        events.append(MPEvent(bi, x, y, elapsed, dx, dy, c))
    raise Escape("too many reflections")


def trace_reflections(obstacles: List[MPObstacle], x, y, dx, dy, n: int, exclude=None) -> List[MPEvent]:
    """The next n reflection events of (x, y, dx, dy)."""
    tmin = _tmin()
    elapsed = mpf(0)
    out: List[MPEvent] = []
    for _ in range(n):
        best, bi = _next_hit(obstacles, x, y, dx, dy, tmin, exclude if not out else None)
        if best is None:
            raise Escape("ray escapes in high-precision trace")
        x, y = x + best * dx, y + best * dy
        elapsed += best
        dx, dy, c = _bounce(obstacles[bi], x, y, dx, dy)
        out.append(MPEvent(bi, x, y, elapsed, dx, dy, c))
    return out


def dist(p: Tuple, q: Tuple):
    return mpmath.sqrt((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2)


# ---------------------------------------------------------------------------
# closed orbits refined to high precision


def _derivs(ob: MPObstacle, theta):
    c, s = mpmath.cos(theta), mpmath.sin(theta)
    X = ob.vec_to_world(ob.a * c, ob.b * s)
    X1 = ob.vec_to_world(-ob.a * s, ob.b * c)
    X2 = ob.vec_to_world(-ob.a * c, -ob.b * s)
    return (ob.cx + X[0], ob.cy + X[1]), X1, X2


def _dot(u, v):
    return u[0] * v[0] + u[1] * v[1]


def _cyclic_tridiagonal_solve(a, b, c, alpha, beta, r):
    """Solve the cyclic tridiagonal system (sub a, diag b, super c, corners alpha/beta)."""
    n = len(b)
    if n == 2:
        # two unknowns: the corners add onto the off-diagonals
        m = mpmath.matrix([[b[0], c[0] + beta], [a[1] + alpha, b[1]]])
        x = mpmath.lu_solve(m, mpmath.matrix(r))
        return [x[0], x[1]]
    gamma = -b[0]
    bb = list(b)
    bb[0] = b[0] - gamma
    bb[n - 1] = b[n - 1] - alpha * beta / gamma

    def tri(rhs):
        cp = [mpf(0)] * n
        dp = [mpf(0)] * n
        cp[0] = c[0] / bb[0]
        dp[0] = rhs[0] / bb[0]
        for i in range(1, n):
            den = bb[i] - a[i] * cp[i - 1]
            cp[i] = c[i] / den if i < n - 1 else mpf(0)
            dp[i] = (rhs[i] - a[i] * dp[i - 1]) / den
        x = [mpf(0)] * n
        x[n - 1] = dp[n - 1]
        for i in range(n - 2, -1, -1):
            x[i] = dp[i] - cp[i] * x[i + 1]
        return x

    x = tri(r)
    u = [mpf(0)] * n
    u[0] = gamma
    u[n - 1] = alpha
    z = tri(u)
    fact = (x[0] + beta * x[n - 1] / gamma) / (1 + z[0] + beta * z[n - 1] / gamma)
    return [x[i] - fact * z[i] for i in range(n)]


@dataclass
class MPCycle:
    word: Tuple[int, ...]
    thetas: list
    points: list  # (x, y) per collision
    tau: list  # flight leaving collision j
    cos_phi: list
    curvature: list


def refine_cycle(obstacles: List[MPObstacle], word, thetas, max_iter: int = 20) -> MPCycle:
    """Newton refinement of a closed orbit at the working precision.

    ``thetas`` should already be accurate to double precision; each
    iteration then roughly doubles the number of correct digits.
    """
    word = tuple(int(s) for s in word)
    p = len(word)
    th = [mpf(float(t)) for t in thetas]
    tol = mpf(10) ** (-(mp.dps - 8))
    for _ in range(max_iter):
        D = [_derivs(obstacles[s], t) for s, t in zip(word, th)]
        X = [d[0] for d in D]
        X1 = [d[1] for d in D]
        X2 = [d[2] for d in D]
        ell, E = [], []
        for j in range(p):
            k = (j + 1) % p
            sx, sy = X[k][0] - X[j][0], X[k][1] - X[j][1]
            L = mpmath.sqrt(sx * sx + sy * sy)
            ell.append(L)
            E.append((sx / L, sy / L))
        grad, diag, off = [], [], []
        for j in range(p):
            k = (j + 1) % p
            i = (j - 1) % p
            grad.append(-_dot(E[j], X1[j]) + _dot(E[i], X1[j]))
            h_start = (_dot(X1[j], X1[j]) - _dot(E[j], X1[j]) ** 2) / ell[j] - _dot(E[j], X2[j])
            h_end = (_dot(X1[j], X1[j]) - _dot(E[i], X1[j]) ** 2) / ell[i] + _dot(E[i], X2[j])
            diag.append(h_start + h_end)
            off.append((-_dot(X1[j], X1[k]) + _dot(E[j], X1[j]) * _dot(E[j], X1[k])) / ell[j])
        if max(abs(g) for g in grad) < tol:
            break
        # H[j, j+1] = off[j], H[j, j-1] = off[j-1]; corners H[0, p-1] = off[p-1] = H[p-1, 0]
        sub = [off[(j - 1) % p] for j in range(p)]
        sup = [off[j] for j in range(p)]
        step = _cyclic_tridiagonal_solve(sub, diag, sup, off[p - 1], off[p - 1], [-g for g in grad])
        th = [t + d for t, d in zip(th, step)]
    else:
        from .errors import MinimizationStalled
        raise MinimizationStalled("high-precision refinement did not converge")
    cos_phi, curv = [], []
    for j in range(p):
        ob = obstacles[word[j]]
        nx, ny = ob.normal_at(X[j][0], X[j][1])
        cos_phi.append(E[j][0] * nx + E[j][1] * ny)
        c, s = mpmath.cos(th[j]), mpmath.sin(th[j])
        curv.append(ob.a * ob.b / (ob.a ** 2 * s * s + ob.b ** 2 * c * c) ** mpf(1.5))
    return MPCycle(word, th, X, ell, cos_phi, curv)


def map_derivative_mp(tau, K0, K1, c0, c1):
    """Planar billiard map derivative as a nested list, same formula as the float version."""
    f = -1 / c1
    return [[f * (tau * K0 + c0), f * tau], [f * (tau * K0 * K1 + K1 * c0 + K0 * c1), f * (tau * K1 + c1)]]
