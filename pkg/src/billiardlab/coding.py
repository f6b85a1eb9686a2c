"""Collision data of coded orbits from finite symbol windows.

Exponential shadowing makes the collision at position j of the orbit
coded by a long sequence depend on the symbols near j only up to an error
of order rho**r. The window table stores, for every admissible window of
2r+1 symbols, the collision data (curvature, cos phi) at the centre of the
closed orbit of that window, and for every window of 2r+2 symbols the
free path leaving the centre. Cocycles of sampled sequences are then pure
table lookups.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from .cocycle import map_derivative
from .dynamics import cycle_trajectory, periodic_extension, solve_cycles
from .errors import PreconditionError, WindowTooShort
from .geometry import ObstacleConfiguration
from .symbolic import Shift, encode_words

DEFAULT_RADIUS = 6
_BATCH = 4096


@dataclass(frozen=True)
class WindowTable:
    k0: int
    radius: int
    curvature: np.ndarray  # per (2r+1)-window
    cos_phi: np.ndarray  # per (2r+1)-window
    tau: np.ndarray  # per (2r+2)-window

    @property
    def margin(self) -> int:
        """Extra symbols needed around n flights: a sequence of n + margin symbols gives n matrices."""
        return 2 * self.radius + 1


def _orbit_data(config: ObstacleConfiguration, words: np.ndarray, pos: int):
    """(curvature, cos phi, free path) at position pos of each word's closed orbit."""
    exts = [periodic_extension(w, config.k0) for w in words]
    K = np.empty(len(exts))
    C = np.empty(len(exts))
    T = np.empty(len(exts))
    groups: Dict[int, list] = {}
    for k, e in enumerate(exts):
        groups.setdefault(len(e), []).append(k)
    for p, ks in sorted(groups.items()):
        for start in range(0, len(ks), _BATCH):
            chunk = ks[start:start + _BATCH]
            arr = np.array([exts[k] for k in chunk])
            th = solve_cycles(config, arr)
            for row, k in enumerate(chunk):
                traj = cycle_trajectory(config, exts[k], th[row])
                r = traj.reflections[pos]
                K[k] = float(config[r.obstacle].curvature(r.point.param))
                C[k] = r.cos_angle
                T[k] = float(traj.free_paths[pos])
    return K, C, T


_CACHE: Dict[Tuple[ObstacleConfiguration, int], WindowTable] = {}
_LOCK = threading.Lock()


def build_window_table(config: ObstacleConfiguration, radius: int = DEFAULT_RADIUS) -> WindowTable:
    """Window table of the configuration, cached per (config, radius)."""
    if radius < 1:
        raise PreconditionError("window radius must be at least 1")
    key = (config, radius)
    with _LOCK:
        if key in _CACHE:
            return _CACHE[key]
    shift = Shift(config.k0)
    K, C, _ = _orbit_data(config, shift.words(2 * radius + 1), radius)
    _, _, T = _orbit_data(config, shift.words(2 * radius + 2), radius)
    table = WindowTable(config.k0, radius, K, C, T)
    with _LOCK:
        _CACHE[key] = table
    return table


def window_indices(seqs: np.ndarray, length: int, k0: int) -> np.ndarray:
    """Indices of all windows of the given length, shape (B, L - length + 1)."""
    seqs = np.asarray(seqs, dtype=np.int64)
    if seqs.ndim == 1:
        seqs = seqs[None, :]
    L = seqs.shape[1]
    n = L - length + 1
    if n < 1:
        raise WindowTooShort(f"sequence of {L} symbols is shorter than a window of {length}")
    codes = (np.diff(seqs, axis=1) % k0) - 1
    if np.any(codes < 0):
        raise PreconditionError("sequence contains a repeated symbol")
    idx = seqs[:, :n].copy()
    for i in range(length - 1):
        idx = idx * (k0 - 1) + codes[:, i:i + n]
    return idx


def sequence_data(table: WindowTable, seqs: np.ndarray):
    """(tau, curvature, cos phi) along sequences of n + margin symbols.

    Returns arrays of shapes (B, n), (B, n+1), (B, n+1) for the collisions
    at positions r .. r+n.
    """
    seqs = np.atleast_2d(seqs)
    r = table.radius
    n = seqs.shape[1] - table.margin
    if n < 1:
        raise WindowTooShort(f"need at least {table.margin + 1} symbols")
    ci = window_indices(seqs, 2 * r + 1, table.k0)[:, :n + 1]
    ti = window_indices(seqs, 2 * r + 2, table.k0)[:, :n]
    return table.tau[ti], table.curvature[ci], table.cos_phi[ci]


def sequence_matrices(table: WindowTable, seq) -> np.ndarray:
    """Map derivatives (n, 2, 2) along one sequence of n + margin symbols."""
    tau, K, c = sequence_data(table, np.asarray(seq)[None, :])
    return map_derivative(tau[0], K[0, :-1], K[0, 1:], c[0, :-1], c[0, 1:])


def exact_sequence_data(config: ObstacleConfiguration, seq):
    """Collision data of the closed orbit of the (extended) sequence itself."""
    seq = tuple(int(s) for s in seq)
    ext = periodic_extension(seq, config.k0)
    th = solve_cycles(config, np.array([ext]))[0]
    traj = cycle_trajectory(config, ext, th)
    K = np.array([float(config[r.obstacle].curvature(r.point.param)) for r in traj.reflections])
    C = traj.cos_angles
    T = traj.free_paths
    return T, K, C


def _batched_product(B: int, n: int, step) -> np.ndarray:
    """log singular values (B, 2) of A_{n-1} ... A_0 with A_t = step(t), shape (B, 2, 2).

    The running product is kept as Q R with Q a rotation and
    R = [[e^s1, e^s1 u], [0, sg2 e^s2]], so nothing overflows however
    long the product.
    """
    q11, q21 = np.ones(B), np.zeros(B)
    q12, q22 = np.zeros(B), np.ones(B)
    s1, s2 = np.zeros(B), np.zeros(B)
    sg2 = np.ones(B)
    u = np.zeros(B)
    for t in range(n):
        A = step(t)
        m11 = A[:, 0, 0] * q11 + A[:, 0, 1] * q21
        m21 = A[:, 1, 0] * q11 + A[:, 1, 1] * q21
        m12 = A[:, 0, 0] * q12 + A[:, 0, 1] * q22
        m22 = A[:, 1, 0] * q12 + A[:, 1, 1] * q22
        r11 = np.hypot(m11, m21)
        a1, a2 = m11 / r11, m21 / r11
        r12 = a1 * m12 + a2 * m22
        r22 = -a2 * m12 + a1 * m22
        u = u + (r12 / r11) * sg2 * np.exp(s2 - s1)
        s1 = s1 + np.log(r11)
        s2 = s2 + np.log(np.abs(r22))
        sg2 = sg2 * np.sign(r22)
        q11, q21, q12, q22 = a1, a2, -a2, a1
    return _triangular_log_svals(s1, s2, u)


def _triangular_log_svals(s1, s2, u) -> np.ndarray:
    lo = s2 <= s1
    g = np.exp(np.where(lo, s2 - s1, s1 - s2))
    # normalized triangular factor: [[1, u], [0, g]] or [[g, g u], [0, 1]]
    F = np.where(lo, 1.0 + u * u + g * g, g * g * (1.0 + u * u) + 1.0)
    big = 0.5 * (F + np.sqrt(np.maximum(F * F - 4.0 * g * g, 0.0)))
    l1 = np.where(lo, s1, s2) + 0.5 * np.log(big)
    return np.stack([l1, s1 + s2 - l1], axis=1)


def batched_log_singular_values(tau, K, c) -> np.ndarray:
    """log singular values (B, 2) of the billiard cocycle along each row of collision data."""
    tau, K, c = (np.asarray(a, dtype=float) for a in (tau, K, c))
    B, n = tau.shape
    return _batched_product(B, n, lambda t: map_derivative(tau[:, t], K[:, t], K[:, t + 1], c[:, t], c[:, t + 1]))


def batched_log_singular_values_of(mats: np.ndarray) -> np.ndarray:
    """Same for explicit matrices of shape (B, n, 2, 2)."""
    mats = np.asarray(mats, dtype=float)
    B, n = mats.shape[:2]
    return _batched_product(B, n, lambda t: mats[:, t])


def log_expansion_bound(table: WindowTable) -> float:
    """max |log cos phi| over the table (controls the exponent-sum defect)."""
    return float(np.max(np.abs(np.log(table.cos_phi))))


def mean_free_path(table: WindowTable, seqs) -> float:
    tau, _, _ = sequence_data(table, seqs)
    return float(tau.mean())


__all__ = ["WindowTable", "build_window_table", "window_indices", "sequence_data", "sequence_matrices",
           "exact_sequence_data", "batched_log_singular_values", "batched_log_singular_values_of",
           "log_expansion_bound", "mean_free_path", "DEFAULT_RADIUS"]
