"""Strictly convex planar obstacles and configurations of them.

Every obstacle is an ellipse (a disc being the special case of equal
semi-axes) parametrized by the angle ``theta`` of its local unit circle:

    x(theta) = center + R(angle) @ (a cos theta, b sin theta)

Normals, curvatures and ray hits all have closed forms in this family.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import InvalidConfiguration, PreconditionError, TangentHit

TANGENCY_TOL = 1e-9
UNIT_TOL = 1e-9


def _rot(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True)
class ConvexObstacle:
    """A disc or an ellipse in the plane.

    ``semi_axes`` are (a, b) along the rotated local x and y axes; a disc
    has ``a == b == radius`` and ``angle == 0``.
    """

    kind: str
    center: tuple
    semi_axes: tuple
    angle: float = 0.0

    def __post_init__(self):
        if self.kind not in ("disc", "ellipse"):
            raise InvalidConfiguration(f"unsupported obstacle kind {self.kind!r}")
        a, b = self.semi_axes
        if not (a > 0 and b > 0 and math.isfinite(a) and math.isfinite(b)):
            raise InvalidConfiguration("semi-axes must be positive and finite")
        if self.kind == "disc" and a != b:
            raise InvalidConfiguration("disc needs equal semi-axes")
        if len(self.center) != 2:
            raise InvalidConfiguration("only planar obstacles are supported")

    @classmethod
    def disc(cls, center: Sequence[float], radius: float) -> "ConvexObstacle":
        return cls("disc", (float(center[0]), float(center[1])), (float(radius), float(radius)))

    @classmethod
    def ellipse(cls, center: Sequence[float], a: float, b: float, angle: float = 0.0) -> "ConvexObstacle":
        return cls("ellipse", (float(center[0]), float(center[1])), (float(a), float(b)), float(angle))

    @property
    def c(self) -> np.ndarray:
        return np.asarray(self.center, dtype=float)

    @property
    def radius(self) -> float:
        if self.kind != "disc":
            raise AttributeError("radius is only defined for discs")
        return self.semi_axes[0]

    @property
    def scale(self) -> float:
        return max(self.semi_axes)

    @property
    def rotation(self) -> np.ndarray:
        return _rot(self.angle)

    # -- parametrization (vectorized over theta) --------------------------

    def _local(self, theta, order: int) -> np.ndarray:
        a, b = self.semi_axes
        theta = np.asarray(theta, dtype=float)
        c, s = np.cos(theta), np.sin(theta)
        if order == 0:
            loc = np.stack([a * c, b * s], axis=-1)
        elif order == 1:
            loc = np.stack([-a * s, b * c], axis=-1)
        else:
            loc = np.stack([-a * c, -b * s], axis=-1)
        return loc @ self.rotation.T

    def point(self, theta) -> np.ndarray:
        return self.c + self._local(theta, 0)

    def dpoint(self, theta) -> np.ndarray:
        return self._local(theta, 1)

    def ddpoint(self, theta) -> np.ndarray:
        return self._local(theta, 2)

    def normal(self, theta) -> np.ndarray:
        a, b = self.semi_axes
        theta = np.asarray(theta, dtype=float)
        loc = np.stack([b * np.cos(theta), a * np.sin(theta)], axis=-1)
        loc = loc / np.linalg.norm(loc, axis=-1, keepdims=True)
        return loc @ self.rotation.T

    def curvature(self, theta):
        a, b = self.semi_axes
        if a == b:
            return np.full(np.shape(theta), 1.0 / a) if np.ndim(theta) else 1.0 / a
        theta = np.asarray(theta, dtype=float)
        k = a * b / (a * a * np.sin(theta) ** 2 + b * b * np.cos(theta) ** 2) ** 1.5
        return k if k.ndim else float(k)

    def param_of(self, q) -> float:
        a, b = self.semi_axes
        loc = self.rotation.T @ (np.asarray(q, dtype=float) - self.c)
        return math.atan2(loc[1] / b, loc[0] / a)

    def param_of_normal(self, n) -> float:
        """Boundary parameter whose outward normal points along ``n``."""
        a, b = self.semi_axes
        loc = self.rotation.T @ np.asarray(n, dtype=float)
        return math.atan2(loc[1] / a, loc[0] / b)

    def level(self, q) -> float:
        """Implicit boundary function, zero on the boundary, negative inside."""
        a, b = self.semi_axes
        loc = self.rotation.T @ (np.asarray(q, dtype=float) - self.c)
        return (loc[0] / a) ** 2 + (loc[1] / b) ** 2 - 1.0

    def support(self, u) -> float:
        a, b = self.semi_axes
        loc = self.rotation.T @ np.asarray(u, dtype=float)
        return float(self.c @ np.asarray(u, dtype=float) + math.hypot(a * loc[0], b * loc[1]))

    def distance(self, p) -> float:
        """Euclidean distance from p to the obstacle (0 inside)."""
        p = np.asarray(p, dtype=float)
        if self.level(p) <= 0:
            return 0.0
        if self.kind == "disc":
            return float(np.linalg.norm(p - self.c)) - self.radius

        # dist(p, K) = max_u [u.p - h_K(u)] for p outside K
        def gap(psi):
            u = np.array([math.cos(psi), math.sin(psi)])
            return float(u @ p) - self.support(u)

        d = p - self.c
        psi0 = math.atan2(d[1], d[0])
        res = minimize_scalar(lambda s: -gap(s), bounds=(psi0 - math.pi / 2, psi0 + math.pi / 2), method="bounded",
                              options={"xatol": 1e-13})
        return float(max(-res.fun, gap(psi0), 0.0))

    def ray_hit(self, origin, direction, t_min: float) -> Optional[float]:
        """Smallest t > t_min with origin + t*direction on the boundary."""
        a, b = self.semi_axes
        rt = self.rotation.T
        o = rt @ (np.asarray(origin, dtype=float) - self.c)
        d = rt @ np.asarray(direction, dtype=float)
        ox, oy, dx, dy = o[0] / a, o[1] / b, d[0] / a, d[1] / b
        qa = dx * dx + dy * dy
        qb = 2.0 * (ox * dx + oy * dy)
        qc = ox * ox + oy * oy - 1.0
        disc = qb * qb - 4.0 * qa * qc
        if disc < 0.0:
            return None
        sq = math.sqrt(disc)
        q = -0.5 * (qb + math.copysign(sq, qb))
        roots = sorted(r for r in ((q / qa) if qa else math.inf, (qc / q) if q else math.inf) if math.isfinite(r))
        for t in roots:
            if t > t_min:
                return t
        return None

    def to_dict(self) -> dict:
        if self.kind == "disc":
            return {"kind": "disc", "center": list(self.center), "radius": self.semi_axes[0]}
        return {"kind": "ellipse", "center": list(self.center), "semi_axes": list(self.semi_axes),
                "angle": self.angle}

    @classmethod
    def from_dict(cls, d: dict) -> "ConvexObstacle":
        try:
            if d["kind"] == "disc":
                return cls.disc(d["center"], d["radius"])
            if d["kind"] == "ellipse":
                a, b = d["semi_axes"]
                return cls.ellipse(d["center"], a, b, d.get("angle", 0.0))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidConfiguration(f"malformed obstacle entry {d!r}") from exc
        raise InvalidConfiguration(f"unsupported obstacle kind {d.get('kind')!r}")

    def moved(self, rotation_angle: float, shift) -> "ConvexObstacle":
        c = _rot(rotation_angle) @ self.c + np.asarray(shift, dtype=float)
        angle = self.angle + rotation_angle if self.kind == "ellipse" else 0.0
        return ConvexObstacle(self.kind, (float(c[0]), float(c[1])), self.semi_axes, angle)


@dataclass(frozen=True)
class BoundaryPoint:
    obstacle: int
    position: np.ndarray
    param: float


def _pair_distance(p: ConvexObstacle, q: ConvexObstacle) -> float:
    if p.kind == "disc" and q.kind == "disc":
        return float(np.linalg.norm(p.c - q.c)) - p.radius - q.radius

    # dist(P, Q) = max_u [ -h_Q(-u) - h_P(u) ]  (separation by support functions)
    def gap(psi):
        u = np.array([math.cos(psi), math.sin(psi)])
        return -q.support(-u) - p.support(u)

    grid = np.linspace(0.0, 2 * math.pi, 721)
    vals = np.array([gap(s) for s in grid])
    k = int(np.argmax(vals))
    res = minimize_scalar(lambda s: -gap(s), bounds=(grid[max(k - 1, 0)], grid[min(k + 1, 720)]),
                          method="bounded", options={"xatol": 1e-13})
    return float(max(-res.fun, vals[k]))


def _hull_misses(ki: ConvexObstacle, kj: ConvexObstacle, kl: ConvexObstacle) -> bool:
    """True iff conv(ki U kj) and kl are disjoint."""
    if ki.kind == kj.kind == kl.kind == "disc":
        # conv of two discs = union of discs with linearly interpolated center/radius
        ci, cj, cl = ki.c, kj.c, kl.c
        ri, rj, rl = ki.radius, kj.radius, kl.radius

        def f(t):
            return float(np.linalg.norm(cl - ((1 - t) * ci + t * cj))) - ((1 - t) * ri + t * rj)

        res = minimize_scalar(f, bounds=(0.0, 1.0), method="bounded", options={"xatol": 1e-12})
        best = min(res.fun, f(0.0), f(1.0))
        return best > rl

    # separating direction u: max(h_i(u), h_j(u)) + h_l(-u) < 0
    def sep(psi):
        u = np.array([math.cos(psi), math.sin(psi)])
        return max(ki.support(u), kj.support(u)) + kl.support(-u)

    grid = np.linspace(0.0, 2 * math.pi, 3601)
    vals = np.array([sep(s) for s in grid])
    k = int(np.argmin(vals))
    res = minimize_scalar(sep, bounds=(grid[max(k - 1, 0)], grid[min(k + 1, 3600)]),
                          method="bounded", options={"xatol": 1e-12})
    return min(res.fun, vals[k]) < -1e-10


class ObstacleConfiguration:
    """An ordered family of k0 >= 3 pairwise disjoint convex obstacles.

    Construction validates the family and caches the minimal separation
    ``d0`` and the no-eclipse verdict (with a violating triple if any).
    """

    dimension = 2

    def __init__(self, obstacles: Sequence[ConvexObstacle]):
        self.obstacles = tuple(obstacles)
        if len(self.obstacles) < 3:
            raise InvalidConfiguration("at least three obstacles are required")
        dists = {}
        for i, j in itertools.combinations(range(len(self.obstacles)), 2):
            dij = _pair_distance(self.obstacles[i], self.obstacles[j])
            if not dij > 0:
                raise InvalidConfiguration(f"obstacles {i} and {j} overlap or touch")
            dists[i, j] = dij
        self.pair_distances = dists
        self.d0 = min(dists.values())
        self.no_eclipse, self.eclipse_witness = _no_eclipse(self.obstacles)

    @property
    def k0(self) -> int:
        return len(self.obstacles)

    @property
    def scale(self) -> float:
        pts = np.array([o.center for o in self.obstacles])
        extent = float(np.max(np.ptp(pts, axis=0))) if len(pts) > 1 else 0.0
        return max(extent, max(o.scale for o in self.obstacles))

    def __len__(self):
        return len(self.obstacles)

    def __getitem__(self, i) -> ConvexObstacle:
        return self.obstacles[i]

    def __eq__(self, other):
        return isinstance(other, ObstacleConfiguration) and self.obstacles == other.obstacles

    def __hash__(self):
        return hash(self.obstacles)

    def __repr__(self):
        return f"ObstacleConfiguration(k0={self.k0}, d0={self.d0:.6g}, no_eclipse={self.no_eclipse})"

    @property
    def all_discs(self) -> bool:
        return all(o.kind == "disc" for o in self.obstacles)

    def boundary_distance(self, p) -> float:
        """Distance from p to the nearest obstacle."""
        return min(o.distance(p) for o in self.obstacles)

    def boundary_point(self, i: int, theta: float) -> BoundaryPoint:
        return BoundaryPoint(i, self.obstacles[i].point(theta), float(theta))

    def moved(self, rotation_angle: float, shift) -> "ObstacleConfiguration":
        return ObstacleConfiguration([o.moved(rotation_angle, shift) for o in self.obstacles])

    def to_dict(self) -> dict:
        return {"dimension": 2, "obstacles": [o.to_dict() for o in self.obstacles]}

    @classmethod
    def from_dict(cls, d: dict) -> "ObstacleConfiguration":
        if d.get("dimension", 2) != 2:
            raise InvalidConfiguration("only dimension 2 is supported")
        if "obstacles" not in d:
            raise InvalidConfiguration("missing 'obstacles'")
        return cls([ConvexObstacle.from_dict(o) for o in d["obstacles"]])

    @classmethod
    def load(cls, path) -> "ObstacleConfiguration":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InvalidConfiguration(f"cannot read configuration {path}: {exc}") from exc
        return cls.from_dict(data)


def _no_eclipse(obstacles):
    n = len(obstacles)
    for i, j in itertools.combinations(range(n), 2):
        for l in range(n):
            if l in (i, j):
                continue
            if not _hull_misses(obstacles[i], obstacles[j], obstacles[l]):
                return False, (i, j, l)
    return True, None


def reference_configuration(side: float = 6.0, radius: float = 1.0) -> ObstacleConfiguration:
    """Three equal discs at the vertices of an equilateral triangle."""
    centers = [(0.0, 0.0), (side, 0.0), (side / 2, side * math.sqrt(3) / 2)]
    return ObstacleConfiguration([ConvexObstacle.disc(c, radius) for c in centers])


def outward_normal_and_shape(config: ObstacleConfiguration, bp: BoundaryPoint, u):
    """Outward normal, shape operator image L_x u and normal curvature at bp.

    ``u`` must be a unit tangent vector at ``bp``.
    """
    obs = config[bp.obstacle]
    u = np.asarray(u, dtype=float)
    nu = obs.normal(bp.param)
    if abs(np.linalg.norm(u) - 1.0) > UNIT_TOL:
        raise PreconditionError("tangent direction must be a unit vector")
    if abs(float(u @ nu)) > UNIT_TOL:
        raise PreconditionError("direction is not tangent to the boundary")
    k = float(obs.curvature(bp.param))
    # in the plane L_x acts on the one-dimensional tangent line as multiplication by k
    return nu, k * u, k


def ray_intersect(origin, direction, config: ObstacleConfiguration, t_min: Optional[float] = None,
                  exclude: Optional[int] = None):
    """First boundary hit of the ray, or None when it escapes.

    Raises TangentHit when the hit is within TANGENCY_TOL of tangential.
    """
    direction = np.asarray(direction, dtype=float)
    if abs(np.linalg.norm(direction) - 1.0) > UNIT_TOL:
        raise PreconditionError("direction must be a unit vector")
    if t_min is None:
        t_min = 1e-10 * config.scale
    best_t, best_i = math.inf, -1
    for i, obs in enumerate(config.obstacles):
        if i == exclude:
            continue
        t = obs.ray_hit(origin, direction, t_min)
        if t is not None and t < best_t:
            best_t, best_i = t, i
    if best_i < 0:
        return None
    obs = config[best_i]
    q = np.asarray(origin, dtype=float) + best_t * direction
    theta = obs.param_of(q)
    nu = obs.normal(theta)
    if abs(float(direction @ nu)) < TANGENCY_TOL:
        raise TangentHit(f"tangential hit on obstacle {best_i}")
    return best_t, BoundaryPoint(best_i, obs.point(theta), theta)


def check_no_eclipse(config: ObstacleConfiguration):
    """Return (verdict, witness) of the no-eclipse condition.

    The witness is the first triple (i, j, l) with conv(K_i U K_j)
    meeting K_l, or None.
    """
    return config.no_eclipse, config.eclipse_witness


def min_separation(config: ObstacleConfiguration) -> float:
    return config.d0
