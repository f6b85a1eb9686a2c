"""Derivative cocycle of the billiard map and finite-time Oseledets data.

Collision coordinates are (r, phi): r is arclength along the obstacle
boundary, increasing counterclockwise; phi is the signed angle from the
outward normal to the outgoing direction, positive toward the
counterclockwise tangent.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import DegenerateCocycle, PreconditionError, WindowTooShort
from .geometry import TANGENCY_TOL, ObstacleConfiguration

CLUSTER_TOL = 1e-3


@dataclass
class CollisionSequence:
    """Per-collision data along an orbit: n+1 collisions and n flights."""

    obstacle: np.ndarray
    curvature: np.ndarray
    cos_phi: np.ndarray
    sin_phi: np.ndarray
    tau: np.ndarray

    def __len__(self):
        return len(self.tau)

    @classmethod
    def from_trajectory(cls, traj, config: ObstacleConfiguration, cycles: int = 1) -> "CollisionSequence":
        """Collision data of a trajectory; closed orbits may be unrolled ``cycles`` times."""
        refl = list(traj.reflections)
        paths = list(traj.free_paths)
        if traj.end_time is not None and len(paths) == len(refl):
            refl = refl * cycles + refl[:1]
            paths = paths * cycles
        elif cycles != 1:
            raise PreconditionError("only closed orbits can be unrolled")
        else:
            paths = paths[:len(refl) - 1]
        obst = np.array([r.obstacle for r in refl])
        K = np.array([float(config[r.obstacle].curvature(r.point.param)) for r in refl])
        cphi = np.array([r.cos_angle for r in refl])
        sphi = np.array([_signed_sin(r, config) for r in refl])
        return cls(obst, K, cphi, sphi, np.asarray(paths, dtype=float))

    def matrices(self) -> np.ndarray:
        return map_derivative(self.tau, self.curvature[:-1], self.curvature[1:], self.cos_phi[:-1],
                              self.cos_phi[1:])


def _signed_sin(refl, config) -> float:
    obs = config[refl.obstacle]
    T = obs.dpoint(refl.point.param)
    T = T / np.linalg.norm(T)
    return float(refl.direction @ T)


def map_derivative(tau, K0, K1, c0, c1) -> np.ndarray:
    """Derivative of the planar billiard map in (r, phi) coordinates.

    Arguments broadcast; the result has shape broadcast_shape + (2, 2).
    """
    tau, K0, K1, c0, c1 = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (tau, K0, K1, c0, c1)))
    if np.any(c0 < TANGENCY_TOL) or np.any(c1 < TANGENCY_TOL):
        from .errors import TangentHit
        raise TangentHit("collision too close to tangential")
    out = np.empty(tau.shape + (2, 2))
    f = -1.0 / c1
    out[..., 0, 0] = f * (tau * K0 + c0)
    out[..., 0, 1] = f * tau
    out[..., 1, 0] = f * (tau * K0 * K1 + K1 * c0 + K0 * c1)
    out[..., 1, 1] = f * (tau * K1 + c1)
    return out


class CocycleProduct:
    """Stabilized running product A_{n-1} ... A_0 V.

    Stored as Q diag(exp(s)) U with Q orthonormal, U unit upper
    triangular and s the log of the triangular diagonal, refactored after
    every multiplication. V is an orthonormal initial frame (identity by
    default), so restricted products are handled by the same machinery.
    """

    def __init__(self, dim: int, frame: Optional[np.ndarray] = None):
        if frame is None:
            frame = np.eye(dim)
        frame = np.asarray(frame, dtype=float)
        if frame.ndim != 2 or frame.shape[0] != dim or frame.shape[1] < 1:
            raise PreconditionError("frame must be a dim x m matrix with m >= 1")
        q, r = np.linalg.qr(frame)
        sg = np.sign(np.diag(r))
        sg[sg == 0] = 1.0
        self.Q = q * sg
        r = r * sg[:, None]
        d = np.abs(np.diag(r))
        self.s = np.log(d)
        self.U = r / d[:, None]
        self.n = 0
        self.dim = dim
        self.frame0 = frame

    @property
    def rank(self) -> int:
        return self.Q.shape[1]

    def push(self, A: np.ndarray) -> None:
        C = np.asarray(A, dtype=float) @ self.Q
        q, r = np.linalg.qr(C)
        dg = np.diag(r)
        if np.any(dg == 0) or not np.all(np.isfinite(dg)):
            raise DegenerateCocycle("singular cocycle factor")
        sg = np.sign(dg)
        q = q * sg
        r = r * sg[:, None]
        d = np.diag(r)
        # (D^-1 R D) U with D = diag(exp(s)); entries below underflow harmlessly
        scale = np.exp(np.clip(self.s[None, :] - self.s[:, None], -745.0, 700.0))
        T = np.triu(r * scale)
        self.U = (T / d[:, None]) @ self.U
        self.s = self.s + np.log(d)
        self.Q = q
        self.n += 1

    def extend(self, mats) -> "CocycleProduct":
        for A in mats:
            self.push(A)
        return self

    def _compound_log_norm(self, i: int) -> float:
        m = self.rank
        if i == m:
            return float(np.sum(self.s))  # det U = 1
        rows = list(itertools.combinations(range(m), i))
        logs = np.array([self.s[list(I)].sum() for I in rows])
        top = logs.max()
        C = np.empty((len(rows), len(rows)))
        for a, I in enumerate(rows):
            sub = self.U[list(I), :]
            for b, J in enumerate(rows):
                C[a, b] = np.linalg.det(sub[:, list(J)])
        C *= np.exp(logs - top)[:, None]
        return float(top + math.log(np.linalg.norm(C, 2)))

    def log_singular_values(self) -> np.ndarray:
        """log t_i of the product (restricted to the frame), descending."""
        m = self.rank
        if m == 1:
            return self.s.copy()
        if m == 2:
            s1, s2 = self.s
            u = self.U[0, 1]
            if s1 >= s2:
                g = math.exp(s2 - s1)
                F = 1.0 + u * u + g * g
                big = 0.5 * (F + math.sqrt(max(F * F - 4.0 * g * g, 0.0)))
                l1 = s1 + 0.5 * math.log(big)
            else:
                g = math.exp(s1 - s2)
                # rows scaled by (g, 1): [[g, g u], [0, 1]]
                F = g * g * (1.0 + u * u) + 1.0
                big = 0.5 * (F + math.sqrt(max(F * F - 4.0 * g * g, 0.0)))
                l1 = s2 + 0.5 * math.log(big)
            return np.array([l1, s1 + s2 - l1])
        norms = [0.0] + [self._compound_log_norm(i) for i in range(1, m + 1)]
        return np.diff(norms)

    def right_singular_frame(self) -> np.ndarray:
        """Right singular vectors (columns, descending) in the source space."""
        top = self.s.max()
        M = np.exp(self.s - top)[:, None] * self.U
        _, _, vt = np.linalg.svd(M)
        return self.frame0 @ vt.T

    def log_norm(self) -> float:
        return float(self.log_singular_values()[0])


def cocycle_product(mats: Sequence[np.ndarray], frame: Optional[np.ndarray] = None) -> CocycleProduct:
    mats = np.asarray(mats, dtype=float)
    if mats.ndim != 3:
        raise PreconditionError("expected a stack of square matrices")
    prod = CocycleProduct(mats.shape[1], frame)
    return prod.extend(mats)


@dataclass
class FiniteTimeSpectrum:
    n: int
    log_singular_values: np.ndarray
    exponents: np.ndarray
    frame: np.ndarray
    clusters: List[List[int]]

    @property
    def subspaces(self) -> List[np.ndarray]:
        """Orthonormal bases of E_i^(n), one per multiplicity cluster."""
        return [self.frame[:, c] for c in self.clusters]


def cluster_exponents(exponents: np.ndarray, tol: float = CLUSTER_TOL) -> List[List[int]]:
    clusters = [[0]]
    for i in range(1, len(exponents)):
        if abs(exponents[i] - exponents[clusters[-1][-1]]) <= tol:
            clusters[-1].append(i)
        else:
            clusters.append([i])
    return clusters


def singular_spectrum(product: CocycleProduct, n: Optional[int] = None, tol: float = CLUSTER_TOL) -> FiniteTimeSpectrum:
    n = product.n if n is None else n
    if n < 1:
        raise PreconditionError("spectrum needs at least one step")
    ls = product.log_singular_values()
    lam = ls / n
    return FiniteTimeSpectrum(n, ls, lam, product.right_singular_frame(), cluster_exponents(lam, tol))


def grassmann_distance(U, V) -> float:
    """max |<u, w>| over unit u in U and unit w in V^perp (sine of the largest principal angle)."""
    U = np.atleast_2d(np.asarray(U, dtype=float).T).T if np.ndim(U) == 1 else np.asarray(U, dtype=float)
    V = np.atleast_2d(np.asarray(V, dtype=float).T).T if np.ndim(V) == 1 else np.asarray(V, dtype=float)
    if U.shape != V.shape:
        raise PreconditionError("subspaces must have equal dimension")
    qu, _ = np.linalg.qr(U)
    qv, _ = np.linalg.qr(V)
    resid = qu - qv @ (qv.T @ qu)
    return float(min(1.0, np.linalg.norm(resid, 2)))


def vector_subspace_distance(u, E) -> float:
    """Distance from a unit vector to a subspace."""
    u = np.asarray(u, dtype=float)
    u = u / np.linalg.norm(u)
    E = np.asarray(E, dtype=float)
    if E.ndim == 1:
        E = E[:, None]
    q, _ = np.linalg.qr(E)
    return float(np.linalg.norm(u - q @ (q.T @ u)))


def exterior_log_norm(product: CocycleProduct, i: int) -> float:
    """log ||Lambda^i A^n|| = sum of the top-i log singular values."""
    if not 1 <= i <= product.rank:
        raise PreconditionError("exterior degree out of range")
    return float(np.sum(product.log_singular_values()[:i]))


def restricted_norm(mats: Sequence[np.ndarray], E) -> float:
    """gamma_n = log ||A^n restricted to E||."""
    E = np.asarray(E, dtype=float)
    if E.ndim == 1:
        E = E[:, None]
    if E.size == 0 or E.shape[1] == 0:
        raise PreconditionError("subspace must be nonzero")
    q, _ = np.linalg.qr(E)
    return cocycle_product(mats, frame=q).log_norm()


def transport(mats: Sequence[np.ndarray], E) -> np.ndarray:
    """Orthonormal basis of A^n E."""
    E = np.asarray(E, dtype=float)
    if E.ndim == 1:
        E = E[:, None]
    q, _ = np.linalg.qr(E)
    for A in mats:
        q, _ = np.linalg.qr(np.asarray(A) @ q)
    return q


def _intersect(U: np.ndarray, V: np.ndarray, dim: int) -> np.ndarray:
    """Orthonormal basis of the dim-dimensional (approximate) intersection."""
    qu, _ = np.linalg.qr(U)
    qv, _ = np.linalg.qr(V)
    # principal vectors with cosines closest to one
    w, s, zt = np.linalg.svd(qu.T @ qv)
    return qu @ w[:, :dim]


@dataclass
class OseledetsEstimate:
    exponents: np.ndarray
    multiplicities: List[int]
    subspaces: List[np.ndarray]
    flags: List[np.ndarray]
    windows: List[int]
    cauchy: List[float]
    invariant: Optional[List[np.ndarray]] = None
    splitting_gap: Optional[List[float]] = None
    spectra: List[FiniteTimeSpectrum] = field(default_factory=list)


def oseledets_subspaces(mats: Sequence[np.ndarray], windows: Optional[Sequence[int]] = None,
                        tol: Optional[float] = None, backward: Optional[Sequence[np.ndarray]] = None,
                        cluster_tol: float = CLUSTER_TOL) -> OseledetsEstimate:
    """Oseledets data at the base point of ``mats``.

    ``mats[j]`` is A(f^j x). E_i is the singular subspace of the longest
    window; ``cauchy[i]`` is the sup over windows n' in [n/2, n] of the
    Grassmann distance to it. With ``backward`` (A(f^{-1} x),
    A(f^{-2} x), ...) the dynamically invariant splitting is also built
    by intersecting forward slow flags with backward slow flags.
    """
    mats = np.asarray(mats, dtype=float)
    n_max = len(mats)
    if windows is None:
        windows = sorted({max(1, n_max // 2 ** k) for k in range(6)})
    windows = sorted(int(w) for w in windows)
    if windows[-1] > n_max or windows[0] < 1:
        raise WindowTooShort(f"orbit of length {n_max} shorter than window {windows[-1]}")
    prod = CocycleProduct(mats.shape[1])
    spectra = {}
    for j, A in enumerate(mats[:windows[-1]], start=1):
        prod.push(A)
        if j in windows:
            spectra[j] = singular_spectrum(prod, tol=cluster_tol)
    final = spectra[windows[-1]]
    clusters = final.clusters
    lam = np.array([final.exponents[c].mean() for c in clusters])
    subspaces = [final.frame[:, c] for c in clusters]
    cauchy = []
    for c, E in zip(clusters, subspaces):
        worst = 0.0
        for w in windows:
            if w >= windows[-1] / 2:
                worst = max(worst, grassmann_distance(spectra[w].frame[:, c], E))
        cauchy.append(worst)
    if tol is not None and max(cauchy) > tol:
        raise WindowTooShort(f"Cauchy diagnostic {max(cauchy):.3e} exceeds {tol:.1e}")
    flags = [final.frame[:, :c[-1] + 1] for c in clusters]
    est = OseledetsEstimate(lam, [len(c) for c in clusters], subspaces, flags, windows, cauchy,
                            spectra=[spectra[w] for w in windows])
    if backward is not None:
        back = np.asarray(backward, dtype=float)
        bprod = CocycleProduct(mats.shape[1])
        for A in back[:windows[-1]]:
            bprod.push(np.linalg.inv(A))
        bframe = bprod.right_singular_frame()
        D = mats.shape[1]
        inv = []
        for c in clusters:
            lo, hi = c[0], c[-1] + 1
            fwd_slow = final.frame[:, lo:]      # exponents <= lambda_i forward
            bwd_slow = bframe[:, D - hi:]       # backward exponents <= -lambda_i
            inv.append(_intersect(fwd_slow, bwd_slow, hi - lo))
        est.invariant = inv
        est.splitting_gap = [grassmann_distance(a, b) for a, b in zip(inv, subspaces)]
    return est


def unstable_stable_directions(mats: np.ndarray, burn: int):
    """Invariant unstable/stable unit vectors along a planar orbit.

    ``mats`` covers collisions 0..N; directions and one-step log
    stretches are returned for positions burn..N-burn-1, obtained by
    pushing a vector forward from position 0 and backward from N.
    """
    mats = np.asarray(mats, dtype=float)
    N = len(mats)
    eu = np.empty((N + 1, 2))
    es = np.empty((N + 1, 2))
    v = np.array([1.0, 0.3])
    v /= np.linalg.norm(v)
    eu[0] = v
    for j in range(N):
        w = mats[j] @ eu[j]
        eu[j + 1] = w / np.linalg.norm(w)
    v = np.array([0.3, 1.0])
    es[N] = v / np.linalg.norm(v)
    for j in range(N - 1, -1, -1):
        w = np.linalg.solve(mats[j], es[j + 1])
        es[j] = w / np.linalg.norm(w)
    sl = slice(burn, N - burn)
    au = np.log(np.linalg.norm(np.einsum("nij,nj->ni", mats[sl], eu[sl]), axis=1))
    as_ = np.log(np.linalg.norm(np.einsum("nij,nj->ni", mats[sl], es[sl]), axis=1))
    return eu[sl], es[sl], au, as_
