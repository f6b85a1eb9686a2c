"""Billiard flow, collision map and periodic orbits coded by symbol words."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import brentq, minimize_scalar

from .errors import (Escape, MinimizationStalled, NonAdmissibleWord, PreconditionError,
                     ReflectionAtBoundaryTime, TangentHit)
from .geometry import TANGENCY_TOL, BoundaryPoint, ObstacleConfiguration, ray_intersect

TIME_TOL = 1e-10
GRAD_TOL = 1e-12
MAX_NEWTON = 200
DENSE_LIMIT = 64


@dataclass(frozen=True)
class PhasePoint:
    q: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if abs(np.linalg.norm(v) - 1.0) > 1e-12 * 10:
            raise PreconditionError("phase point direction must be a unit vector")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "v", v)


@dataclass(frozen=True)
class Reflection:
    point: BoundaryPoint
    time: float
    direction: np.ndarray  # post-reflection
    cos_angle: float

    @property
    def obstacle(self) -> int:
        return self.point.obstacle

    @property
    def angle(self) -> float:
        return math.acos(min(1.0, self.cos_angle))


@dataclass
class Trajectory:
    """A start phase point followed by its reflections in time order.

    For orbits built from words the start lies on the first reflection
    point, recorded as ``reflections[0]`` with time 0; ``end_time`` then
    marks the closing time of the period.
    """

    start: PhasePoint
    reflections: List[Reflection] = field(default_factory=list)
    end_time: Optional[float] = None
    word: Optional[Tuple[int, ...]] = None

    @property
    def times(self) -> np.ndarray:
        return np.array([r.time for r in self.reflections])

    @property
    def free_paths(self) -> np.ndarray:
        """d_j = t_{j+1} - t_j; includes the closing flight for periodic orbits."""
        t = list(self.times)
        if self.end_time is not None:
            t.append(self.end_time)
        return np.diff(np.array(t))

    @property
    def points(self) -> np.ndarray:
        return np.array([r.point.position for r in self.reflections])

    @property
    def cos_angles(self) -> np.ndarray:
        return np.array([r.cos_angle for r in self.reflections])

    @property
    def length(self) -> float:
        return self.end_time if self.end_time is not None else self.reflections[-1].time


def reflect(v, nu) -> np.ndarray:
    """Specular reflection of an incoming direction at a boundary with normal nu."""
    v = np.asarray(v, dtype=float)
    nu = np.asarray(nu, dtype=float)
    c = float(v @ nu)
    if c > -TANGENCY_TOL:
        raise TangentHit("incidence is tangential or outgoing")
    w = v - 2.0 * c * nu
    return w / np.linalg.norm(w)


def billiard_step(x: PhasePoint, config: ObstacleConfiguration, t_min: Optional[float] = None):
    """Advance to the next reflection: (x', flight length, angle, obstacle)."""
    hit = ray_intersect(x.q, x.v, config, t_min=t_min)
    if hit is None:
        raise Escape("ray misses every obstacle")
    t, bp = hit
    nu = config[bp.obstacle].normal(bp.param)
    w = reflect(x.v, nu)
    cphi = float(w @ nu)
    if cphi < TANGENCY_TOL:
        raise TangentHit("reflection too close to tangential")
    return PhasePoint(bp.position, w), t, math.acos(min(1.0, cphi)), bp.obstacle


def trace(x: PhasePoint, config: ObstacleConfiguration, n_reflections: int) -> Trajectory:
    """Trajectory of x through its next n reflections."""
    traj = Trajectory(start=x)
    t = 0.0
    for _ in range(n_reflections):
        x, d, phi, i = billiard_step(x, config)
        t += d
        theta = config[i].param_of(x.q)
        traj.reflections.append(Reflection(BoundaryPoint(i, x.q, theta), t, x.v, math.cos(phi)))
    return traj


def flow_to_time(x: PhasePoint, t: float, config: ObstacleConfiguration):
    """Flow x for time t; returns the endpoint and the recorded reflections."""
    if t < 0:
        raise PreconditionError("only forward flow is supported")
    traj = Trajectory(start=x)
    elapsed = 0.0
    cur = x
    while True:
        hit = ray_intersect(cur.q, cur.v, config)
        if hit is None or elapsed + hit[0] > t + TIME_TOL:
            if hit is not None and abs(elapsed + hit[0] - t) <= TIME_TOL:
                raise ReflectionAtBoundaryTime("flow time coincides with a reflection")
            end = PhasePoint(cur.q + (t - elapsed) * cur.v, cur.v)
            traj.end_time = t
            return end, traj
        if abs(elapsed + hit[0] - t) <= TIME_TOL:
            raise ReflectionAtBoundaryTime("flow time coincides with a reflection")
        nxt, d, phi, i = billiard_step(cur, config)
        elapsed += d
        theta = config[i].param_of(nxt.q)
        traj.reflections.append(Reflection(BoundaryPoint(i, nxt.q, theta), elapsed, nxt.v, math.cos(phi)))
        cur = nxt


def itinerary(traj: Trajectory) -> Tuple[int, ...]:
    return tuple(r.obstacle for r in traj.reflections)


def check_word(word: Sequence[int], k0: int, cyclic: bool = False) -> Tuple[int, ...]:
    w = tuple(int(s) for s in word)
    if not w:
        raise NonAdmissibleWord("empty word")
    if any(s < 0 or s >= k0 for s in w):
        raise NonAdmissibleWord(f"symbols must lie in [0, {k0})")
    if any(a == b for a, b in zip(w, w[1:])):
        raise NonAdmissibleWord("adjacent symbols must differ")
    if cyclic and (len(w) < 2 or w[0] == w[-1]):
        raise NonAdmissibleWord("periodic word must have distinct first and last symbols")
    return w


def periodic_extension(word: Sequence[int], k0: int) -> Tuple[int, ...]:
    """Cyclically admissible word whose first len(word) symbols equal word.

    A connector symbol is appended when the first and last symbols agree.
    """
    w = check_word(word, k0)
    if len(w) == 1:
        return w + (min(s for s in range(k0) if s != w[0]),)
    if w[0] != w[-1]:
        return w
    return w + (min(s for s in range(k0) if s not in (w[0], w[-1])),)


# ---------------------------------------------------------------------------
# orbit length minimization


def _eval_boundary(config: ObstacleConfiguration, words: np.ndarray, thetas: np.ndarray):
    shape = words.shape
    X = np.empty(shape + (2,))
    X1 = np.empty(shape + (2,))
    X2 = np.empty(shape + (2,))
    for i, obs in enumerate(config.obstacles):
        m = words == i
        if not m.any():
            continue
        th = thetas[m]
        X[m] = obs.point(th)
        X1[m] = obs.dpoint(th)
        X2[m] = obs.ddpoint(th)
    return X, X1, X2


def _initial_thetas(config: ObstacleConfiguration, words: np.ndarray) -> np.ndarray:
    C = np.array([o.center for o in config.obstacles])
    prev = np.roll(words, 1, axis=1)
    nxt = np.roll(words, -1, axis=1)
    a = C[prev] - C[words]
    b = C[nxt] - C[words]
    u = a / np.linalg.norm(a, axis=-1, keepdims=True) + b / np.linalg.norm(b, axis=-1, keepdims=True)
    small = np.linalg.norm(u, axis=-1) < 1e-8
    u[small] = b[small]
    th = np.empty(words.shape)
    for i, obs in enumerate(config.obstacles):
        m = words == i
        if not m.any():
            continue
        loc = u[m] @ obs.rotation
        a_, b_ = obs.semi_axes
        th[m] = np.arctan2(loc[:, 1] / a_, loc[:, 0] / b_)
    return th


def _length_terms(config, words, thetas):
    """Total length, gradient, Hessian diagonal and cyclic off-diagonal."""
    X, X1, X2 = _eval_boundary(config, words, thetas)
    S = np.roll(X, -1, axis=1) - X  # segment j: point j -> point j+1
    ell = np.linalg.norm(S, axis=-1)
    E = S / ell[..., None]
    X1n = np.roll(X1, -1, axis=1)
    # derivative of segment j w.r.t. its end (j+1) and its start (j)
    g_end = np.einsum("bpk,bpk->bp", E, X1n)
    g_start = -np.einsum("bpk,bpk->bp", E, X1)
    grad = g_start + np.roll(g_end, 1, axis=1)

    def quad(a, b):
        return np.einsum("bpk,bpk->bp", a, b)

    h_start = (quad(X1, X1) - quad(E, X1) ** 2) / ell - quad(E, X2)
    X2n = np.roll(X2, -1, axis=1)
    h_end = (quad(X1n, X1n) - quad(E, X1n) ** 2) / ell + quad(E, X2n)
    diag = h_start + np.roll(h_end, 1, axis=1)
    off = (-quad(X1, X1n) + quad(E, X1) * quad(E, X1n)) / ell  # couples j and j+1
    return ell.sum(axis=1), grad, diag, off


def _dense_hessian(diag, off):
    B, p = diag.shape
    H = np.zeros((B, p, p))
    idx = np.arange(p)
    H[:, idx, idx] = diag
    nxt = (idx + 1) % p
    for j in range(p):
        H[:, j, nxt[j]] += off[:, j]
        H[:, nxt[j], j] += off[:, j]
    return H


def _newton_step(diag, off, grad):
    B, p = diag.shape
    if p <= DENSE_LIMIT:
        H = _dense_hessian(diag, off)
        try:
            return -np.linalg.solve(H, grad[..., None])[..., 0]
        except np.linalg.LinAlgError:
            return -grad
    steps = np.empty_like(grad)
    idx = np.arange(p)
    nxt = (idx + 1) % p
    for b in range(B):
        H = sp.coo_matrix((np.concatenate([diag[b], off[b], off[b]]),
                           (np.concatenate([idx, idx, nxt]), np.concatenate([idx, nxt, idx]))),
                          shape=(p, p)).tocsc()
        steps[b] = -spla.spsolve(H, grad[b])
    return steps


def solve_cycles(config: ObstacleConfiguration, words: np.ndarray, thetas: Optional[np.ndarray] = None,
                 tol: float = GRAD_TOL, max_iter: int = MAX_NEWTON) -> np.ndarray:
    """Boundary parameters of the closed orbits coded by each row of ``words``.

    Damped Newton on the total polygon length, vectorized over rows.
    """
    words = np.atleast_2d(np.asarray(words, dtype=np.int64))
    if words.shape[1] < 2:
        raise NonAdmissibleWord("periodic words need at least two symbols")
    if np.any(words == np.roll(words, -1, axis=1)):
        raise NonAdmissibleWord("cyclic word has equal neighbouring symbols")
    th = _initial_thetas(config, words) if thetas is None else np.array(thetas, dtype=float)
    gtol = tol * config.scale
    L, g, dg, off = _length_terms(config, words, th)
    active = np.ones(len(words), dtype=bool)
    for _ in range(max_iter):
        gnorm = np.max(np.abs(g), axis=1)
        active = gnorm > gtol
        if not active.any():
            return th
        a = np.flatnonzero(active)
        step = _newton_step(dg[a], off[a], g[a])
        # descent safeguard: fall back to the gradient when Newton points uphill
        uphill = np.einsum("bp,bp->b", step, g[a]) >= 0
        step[uphill] = -g[a][uphill]
        big = np.max(np.abs(step), axis=1)
        step *= np.minimum(1.0, 0.5 / big)[:, None]
        alpha = np.ones(len(a))
        todo = np.ones(len(a), dtype=bool)
        new_th = th[a].copy()
        newL, newg, newd, newo = L[a].copy(), g[a].copy(), dg[a].copy(), off[a].copy()
        for _ in range(40):
            if not todo.any():
                break
            t = np.flatnonzero(todo)
            cand = th[a][t] + alpha[t, None] * step[t]
            cL, cg, cd, co = _length_terms(config, words[a][t], cand)
            # Armijo on the length, with a gradient test to absorb roundoff near the optimum
            armijo = cL <= L[a][t] + 1e-4 * alpha[t] * np.einsum("bp,bp->b", step[t], g[a][t])
            ok = armijo | ((np.max(np.abs(cg), axis=1) < np.max(np.abs(g[a][t]), axis=1))
                           & (cL <= L[a][t] + 1e-13 * np.abs(L[a][t])))
            acc = t[ok]
            new_th[acc] = cand[ok]
            newL[acc], newg[acc], newd[acc], newo[acc] = cL[ok], cg[ok], cd[ok], co[ok]
            todo[acc] = False
            alpha[t[~ok]] *= 0.5
        if todo.all():
            break
        th[a], L[a], g[a], dg[a], off[a] = new_th, newL, newg, newd, newo
    gnorm = np.max(np.abs(g), axis=1)
    if np.any(gnorm > gtol):
        bad = int(np.argmax(gnorm))
        raise MinimizationStalled(
            f"gradient {gnorm[bad]:.3e} > {gtol:.1e} for word {tuple(words[bad])}")
    return th


def cycle_trajectory(config: ObstacleConfiguration, word: Sequence[int], thetas) -> Trajectory:
    word = tuple(int(s) for s in word)
    p = len(word)
    pts = np.array([config[s].point(t) for s, t in zip(word, thetas)])
    seg = np.roll(pts, -1, axis=0) - pts
    ell = np.linalg.norm(seg, axis=1)
    dirs = seg / ell[:, None]
    times = np.concatenate([[0.0], np.cumsum(ell)])
    refl = []
    for j in range(p):
        nu = config[word[j]].normal(thetas[j])
        refl.append(Reflection(BoundaryPoint(word[j], pts[j], float(thetas[j])), float(times[j]), dirs[j],
                               float(dirs[j] @ nu)))
    return Trajectory(start=PhasePoint(pts[0], dirs[0]), reflections=refl, end_time=float(times[p]),
                      word=word)


def find_orbit_for_word(word: Sequence[int], config: ObstacleConfiguration, periodic: bool = True) -> Trajectory:
    """Billiard orbit coded by ``word``.

    periodic=True: the closed orbit of the cyclic word (first and last
    symbols must differ). periodic=False: the segment of len(word)
    reflections of the closed orbit for the periodic extension of word.
    """
    if periodic:
        w = check_word(word, config.k0, cyclic=True)
        th = solve_cycles(config, np.array([w]))[0]
        return cycle_trajectory(config, w, th)
    w = check_word(word, config.k0)
    ext = periodic_extension(w, config.k0)
    th = solve_cycles(config, np.array([ext]))[0]
    full = cycle_trajectory(config, ext, th)
    n = len(w)
    end = full.reflections[n].time if n < len(ext) else full.end_time
    return Trajectory(start=full.start, reflections=full.reflections[:n], end_time=end, word=w)


def orbits_for_words(words: Sequence[Sequence[int]], config: ObstacleConfiguration) -> List[Trajectory]:
    """Closed orbits for many cyclic words, batching equal lengths."""
    words = [check_word(w, config.k0, cyclic=True) for w in words]
    out: List[Optional[Trajectory]] = [None] * len(words)
    by_len = {}
    for k, w in enumerate(words):
        by_len.setdefault(len(w), []).append(k)
    for p, ks in by_len.items():
        arr = np.array([words[k] for k in ks])
        for start in range(0, len(ks), 4096):
            chunk = arr[start:start + 4096]
            th = solve_cycles(config, chunk)
            for r, k in enumerate(ks[start:start + 4096]):
                out[k] = cycle_trajectory(config, words[k], th[r])
    return out


def orbit_rows(traj: Trajectory):
    """Rows (j, obstacle, q_x, q_y, t_j, d_j, phi_j) for the orbit CSV dump."""
    d = traj.free_paths
    rows = []
    for j, r in enumerate(traj.reflections):
        dj = float(d[j]) if j < len(d) else float("nan")
        rows.append((j, r.obstacle, float(r.point.position[0]), float(r.point.position[1]), r.time, dj,
                     r.angle))
    return rows


def _near_interval(obstacle, q, v, d: float, eps: float):
    """Sub-interval of [0, d] where q + t v is within eps of the obstacle (distance is convex in t)."""
    g = lambda t: obstacle.distance(q + t * v) - eps  # noqa: E731
    res = minimize_scalar(g, bounds=(0.0, d), method="bounded", options={"xatol": 1e-12})
    cands = [(0.0, g(0.0)), (d, g(d)), (float(res.x), float(res.fun))]
    t_min, g_min = min(cands, key=lambda c: c[1])
    if g_min > 0:
        return None
    lo = 0.0 if g(0.0) <= 0 else brentq(g, 0.0, t_min, xtol=1e-13)
    hi = d if g(d) <= 0 else brentq(g, t_min, d, xtol=1e-13)
    return lo, hi


def boundary_layer_fraction(traj: Trajectory, config: ObstacleConfiguration, eps: Optional[float] = None) -> float:
    """Fraction of the flight time spent within eps of the obstacles (default eps = d0/10).

    The complement is the time the orbit spends in the eps-interior part
    of phase space; flights between consecutive reflections are used,
    plus the closing flight of periodic orbits.
    """
    eps = config.d0 / 10 if eps is None else float(eps)
    if eps < 0:
        raise PreconditionError("boundary distance must be non-negative")
    d = traj.free_paths
    if len(d) == 0:
        raise PreconditionError("trajectory has no complete flight")
    near = 0.0
    for j, dj in enumerate(d):
        r = traj.reflections[j]
        q, v = r.point.position, r.direction
        spans = sorted(iv for iv in (_near_interval(o, q, v, float(dj), eps) for o in config.obstacles) if iv)
        end = -math.inf
        for lo, hi in spans:
            lo = max(lo, end)
            if hi > lo:
                near += hi - lo
            end = max(end, hi)
    return near / float(d.sum())


def format_word(word: Sequence[int]) -> str:
    return ",".join(str(int(s)) for s in word)


def parse_word(text: str) -> Tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.replace(" ", "").split(",") if s != "")
    except ValueError as exc:
        raise NonAdmissibleWord(f"cannot parse word {text!r}") from exc
