"""The coding subshift, finite-memory potentials and their Gibbs chains.

Symbols are 0..k0-1 and a symbol may not follow itself. A potential of
memory m assigns a value to every admissible word of length m+1; its
Gibbs measure is then exactly a stationary Markov chain on words of
length m.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import PreconditionError
from .geometry import ObstacleConfiguration

PERRON_TOL = 1e-14
MAX_POWER_ITER = 200_000
DENSE_LIMIT = 2048


@dataclass(frozen=True)
class Shift:
    """Full shift on k0 symbols with immediate repeats forbidden."""

    k0: int

    def __post_init__(self):
        if self.k0 < 3:
            raise PreconditionError("the coding needs at least three symbols")

    @property
    def adjacency(self) -> np.ndarray:
        return 1 - np.eye(self.k0, dtype=int)

    def n_words(self, length: int) -> int:
        return self.k0 * (self.k0 - 1) ** (length - 1)

    def words(self, length: int) -> np.ndarray:
        """All admissible words of the given length, rows ordered by index."""
        return decode_words(np.arange(self.n_words(length)), length, self.k0)

    def index(self, words) -> np.ndarray:
        return encode_words(np.atleast_2d(words), self.k0)

    def successors(self, length: int) -> np.ndarray:
        """(S, k0-1) table: index of w[1:] + b for each state w and successor slot."""
        W = self.words(length)
        nxt = (W[:, -1:] + 1 + np.arange(self.k0 - 1)[None, :]) % self.k0
        out = np.empty((len(W), self.k0 - 1), dtype=np.int64)
        for j in range(self.k0 - 1):
            out[:, j] = self.index(np.concatenate([W[:, 1:], nxt[:, j:j + 1]], axis=1))
        return out


def encode_words(words: np.ndarray, k0: int) -> np.ndarray:
    """Index of admissible words: first symbol, then step codes (b - a) mod k0 - 1."""
    words = np.asarray(words, dtype=np.int64)
    L = words.shape[-1]
    codes = (np.diff(words, axis=-1) % k0) - 1
    if np.any(codes < 0):
        raise PreconditionError("word contains a repeated symbol")
    idx = words[..., 0].copy()
    for i in range(L - 1):
        idx = idx * (k0 - 1) + codes[..., i]
    return idx


def decode_words(idx: np.ndarray, length: int, k0: int) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.int64).copy()
    codes = np.empty(idx.shape + (length - 1,), dtype=np.int64)
    for i in range(length - 2, -1, -1):
        codes[..., i] = idx % (k0 - 1)
        idx //= (k0 - 1)
    out = np.empty(idx.shape + (length,), dtype=np.int64)
    out[..., 0] = idx
    for i in range(length - 1):
        out[..., i + 1] = (out[..., i] + codes[..., i] + 1) % k0
    return out


def word_key(word: Sequence[int]) -> str:
    return ",".join(str(int(s)) for s in word)


@dataclass
class Potential:
    """Locally constant potential: one value per admissible (m+1)-word."""

    k0: int
    m: int
    values: np.ndarray  # indexed like Shift(k0).words(m + 1)
    provenance: str = "explicit"
    var_m: Optional[float] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.m < 1:
            raise PreconditionError("potential memory must be at least 1")
        if self.values.shape != (Shift(self.k0).n_words(self.m + 1),):
            raise PreconditionError("potential table has the wrong size")
        if not np.all(np.isfinite(self.values)):
            raise PreconditionError("potential values must be finite")

    @classmethod
    def zero(cls, k0: int, m: int = 1) -> "Potential":
        return cls(k0, m, np.zeros(Shift(k0).n_words(m + 1)))

    @classmethod
    def from_table(cls, table: Dict[str, float], k0: int) -> "Potential":
        keys = list(table)
        if not keys:
            raise PreconditionError("empty potential table")
        L = len(keys[0].split(","))
        shift = Shift(k0)
        vals = np.full(shift.n_words(L), np.nan)
        for k, v in table.items():
            w = [int(s) for s in k.split(",")]
            if len(w) != L:
                raise PreconditionError("potential words must share one length")
            vals[shift.index(w)[0]] = float(v)
        if np.any(np.isnan(vals)):
            raise PreconditionError("potential table misses admissible words")
        return cls(k0, L - 1, vals)

    def table(self) -> Dict[str, float]:
        W = Shift(self.k0).words(self.m + 1)
        return {word_key(w): float(v) for w, v in zip(W, self.values)}

    def shifted(self, c: float) -> "Potential":
        return Potential(self.k0, self.m, self.values + c, self.provenance, self.var_m)

    def scaled(self, t: float) -> "Potential":
        return Potential(self.k0, self.m, t * self.values, self.provenance, self.var_m)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.table(), fh, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path, k0: int) -> "Potential":
        with open(path) as fh:
            return cls.from_table(json.load(fh), k0)

    def birkhoff(self, sequences: np.ndarray) -> np.ndarray:
        """Sum of potential values over all (m+1)-subwords of each row."""
        seq = np.asarray(sequences)
        L = self.m + 1
        win = np.lib.stride_tricks.sliding_window_view(seq, L, axis=-1)
        return self.values[encode_words(win, self.k0)].sum(axis=-1)


def _transfer_matrix(pot: Potential):
    shift = Shift(pot.k0)
    succ = shift.successors(pot.m)
    S = succ.shape[0]
    # edge (w, slot) corresponds to the (m+1)-word w + b
    W = shift.words(pot.m)
    nxt = (W[:, -1:] + 1 + np.arange(pot.k0 - 1)[None, :]) % pot.k0
    edge_words = np.concatenate([np.repeat(W[:, None, :], pot.k0 - 1, axis=1), nxt[:, :, None]], axis=2)
    weights = np.exp(pot.values[encode_words(edge_words, pot.k0)])
    M = sp.csr_matrix((weights.ravel(), (np.repeat(np.arange(S), pot.k0 - 1), succ.ravel())), shape=(S, S))
    return M, succ, weights


def _perron(M, tol: float = PERRON_TOL):
    """Perron root and positive vector of a nonnegative irreducible matrix.

    Small matrices go through a dense eigensolver; large ones use shifted
    power iteration on the sparse matrix.
    """
    S = M.shape[0]
    if S <= DENSE_LIMIT:
        w, V = np.linalg.eig(M.toarray())
        k = int(np.argmax(w.real))
        x = np.abs(V[:, k].real)
        if np.any(x <= 0):
            raise PreconditionError("transfer matrix is reducible")
        return float(w[k].real), x / x.sum()
    shift = float(M.sum(axis=1).mean())
    x = np.full(S, 1.0 / S)
    for _ in range(MAX_POWER_ITER):
        y = M @ x + shift * x
        s = y.sum()
        y /= s
        if np.max(np.abs(y - x)) <= tol * np.max(y):
            x = y
            break
        x = y
    else:
        raise PreconditionError("power iteration did not converge")
    # Rayleigh-type quotient for the root; the vector is positive so the ratio is well defined
    root = float((M @ x).sum() / x.sum())
    if np.any(x <= 0):
        raise PreconditionError("transfer matrix is reducible")
    return root, x


@dataclass
class PerronData:
    pressure: float
    root: float
    right: np.ndarray
    left: np.ndarray


def transfer_pressure(pot: Potential) -> PerronData:
    """Pressure log(Perron root) of the potential's transfer matrix on m-word states."""
    M, _, weights = _transfer_matrix(pot)
    # factor out the largest weight so large potentials do not overflow
    top = float(weights.max())
    M = M / top
    root, h = _perron(M)
    _, l = _perron(M.T.tocsr())
    return PerronData(math.log(root) + math.log(top), root * top, h / h.sum(), l / l.sum())


@dataclass
class GibbsChain:
    """Stationary Markov realization of the Gibbs measure of a finite-memory potential."""

    k0: int
    m: int
    successors: np.ndarray  # (S, k0-1)
    probs: np.ndarray  # (S, k0-1) transition probabilities per successor slot
    stationary: np.ndarray
    pressure: float
    var_m: Optional[float] = None
    _cum: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self._cum = np.cumsum(self.probs, axis=1)
        self._cum[:, -1] = 1.0
        self._cum_pi = np.cumsum(self.stationary)
        self._cum_pi[-1] = 1.0

    @property
    def n_states(self) -> int:
        return len(self.stationary)

    def transition_matrix(self) -> np.ndarray:
        S = self.n_states
        P = np.zeros((S, S))
        np.add.at(P, (np.repeat(np.arange(S), self.k0 - 1), self.successors.ravel()), self.probs.ravel())
        return P

    def summary(self) -> dict:
        return {"pressure": self.pressure, "k0": self.k0, "m": self.m, "var_m": self.var_m}

    def cylinder_measure(self, word: Sequence[int]) -> float:
        """mu([word]) for any admissible word."""
        w = np.asarray(word, dtype=np.int64)
        shift = Shift(self.k0)
        if len(w) < self.m:
            # marginalize over extensions to length m
            ext = shift.words(self.m)
            mask = np.all(ext[:, :len(w)] == w, axis=1)
            return float(self.stationary[mask].sum())
        s = int(shift.index(w[:self.m])[0])
        p = float(self.stationary[s])
        for b in w[self.m:]:
            slot = (int(b) - int(shift.words(self.m)[s][-1])) % self.k0 - 1
            if slot < 0:
                return 0.0
            p *= self.probs[s, slot]
            s = int(self.successors[s, slot])
        return p

    def sample_states(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return np.searchsorted(self._cum_pi, rng.random(size), side="right").clip(0, self.n_states - 1)

    def sample_batch(self, rng: np.random.Generator, size: int, n: int, start_states=None) -> np.ndarray:
        """``size`` stationary sequences of n symbols each, shape (size, n)."""
        if n < 1:
            raise PreconditionError("sequence length must be positive")
        shift = Shift(self.k0)
        states = self.sample_states(rng, size) if start_states is None else np.asarray(start_states)
        head = shift.words(self.m)[states]
        if n <= self.m:
            return head[:, :n].copy()
        out = np.empty((size, n), dtype=np.int8 if self.k0 < 128 else np.int64)
        out[:, :self.m] = head
        last = head[:, -1].copy()
        u = rng.random((size, n - self.m))
        for t in range(n - self.m):
            slot = (u[:, t:t + 1] >= self._cum[states]).sum(axis=1)
            slot = np.minimum(slot, self.k0 - 2)
            last = (last + slot + 1) % self.k0
            out[:, self.m + t] = last
            states = self.successors[states, slot]
        return out

    def reversed(self) -> "GibbsChain":
        """Time reversal: the chain of reversed windows, with the same stationary law.

        P*(rev w' -> rev w) = pi(w) P(w -> w') / pi(w').
        """
        shift = Shift(self.k0)
        W = shift.words(self.m)
        rev = shift.index(W[:, ::-1])  # reversal is an involution on indices
        P = self.transition_matrix()
        Pr = (P.T * self.stationary[None, :]) / self.stationary[:, None]
        succ = self.successors
        probs = Pr[rev[:, None], rev[succ]]
        probs /= probs.sum(axis=1, keepdims=True)
        return GibbsChain(self.k0, self.m, succ.copy(), probs, self.stationary[rev], self.pressure, self.var_m)


def stationary_chain(pot: Potential, perron: Optional[PerronData] = None) -> GibbsChain:
    """Gibbs chain with P(w -> w') = M[w, w'] h(w') / (root h(w))."""
    perron = perron or transfer_pressure(pot)
    M, succ, weights = _transfer_matrix(pot)
    h, l = perron.right, perron.left
    probs = weights * h[succ] / (perron.root * h[:, None])
    probs /= probs.sum(axis=1, keepdims=True)
    pi = l * h
    pi /= pi.sum()
    return GibbsChain(pot.k0, pot.m, succ, probs, pi, perron.pressure, pot.var_m)


def max_entropy_chain(k0: int) -> GibbsChain:
    return stationary_chain(Potential.zero(k0, 1))


def sample_sequence(chain: GibbsChain, n: int, seed) -> np.ndarray:
    """One stationary admissible sequence of n symbols, determined by the seed."""
    rng = np.random.default_rng(seed)
    return chain.sample_batch(rng, 1, n)[0].astype(np.int64)


def gibbs_ratio_bound(chain: GibbsChain, pot: Potential, max_extra: int = 5) -> float:
    """Smallest C with C^-1 <= mu([w]) / exp(S_w phi - (|w|-m) P) <= C over words of length <= m + max_extra."""
    shift = Shift(pot.k0)
    lo, hi = math.inf, 0.0
    for L in range(pot.m + 1, pot.m + max_extra + 1):
        W = shift.words(L)
        for w in W:
            mu = chain.cylinder_measure(w)
            ref = math.exp(float(pot.birkhoff(w[None, :])[0]) - (L - pot.m) * chain.pressure)
            r = mu / ref
            lo, hi = min(lo, r), max(hi, r)
    return max(hi, 1.0 / lo)


# ---------------------------------------------------------------------------
# potentials induced by billiard observables

Observable = Callable[..., float]


def free_path_observable(traj, j: int, config: ObstacleConfiguration) -> float:
    """Free path from collision j to collision j+1."""
    return float(traj.free_paths[j])


def log_expansion_observable(traj, j: int, config: ObstacleConfiguration) -> float:
    """log(1 + d_j B_j): unstable expansion of the flight leaving collision j."""
    from .fronts import FrontState, expansion_along_trajectory, periodic_unstable_curvature

    B = periodic_unstable_curvature(traj, config)
    res = expansion_along_trajectory(traj, config, FrontState(traj.start, B), m=j + 1)
    return -math.log(res.records[j].delta)


def _periodic_orbits(words: np.ndarray, config: ObstacleConfiguration):
    from .dynamics import cycle_trajectory, periodic_extension, solve_cycles

    exts = [periodic_extension(w, config.k0) for w in words]
    out = [None] * len(exts)
    groups: Dict[int, list] = {}
    for k, e in enumerate(exts):
        groups.setdefault(len(e), []).append(k)
    for p, ks in groups.items():
        arr = np.array([exts[k] for k in ks])
        th = solve_cycles(config, arr)
        for r, k in enumerate(ks):
            out[k] = cycle_trajectory(config, exts[k], th[r])
    return out


def induce_potential(observable: Observable, m: int, config: ObstacleConfiguration, scale: float = 1.0) -> Potential:
    """Tabulate scale * observable at the central collision of each (m+1)-word's periodic orbit.

    var_m is the largest change of the tabled value when the word is
    extended by one symbol on each side (same central collision).
    """
    shift = Shift(config.k0)
    W = shift.words(m + 1)
    c = m // 2
    orbits = _periodic_orbits(W, config)
    vals = np.array([scale * observable(o, c, config) for o in orbits])
    # two-sided one-symbol extensions
    k0 = config.k0
    ext_words, parent = [], []
    for i, w in enumerate(W):
        for a in range(k0):
            if a == w[0]:
                continue
            for b in range(k0):
                if b == w[-1]:
                    continue
                ext_words.append(np.concatenate([[a], w, [b]]))
                parent.append(i)
    ext_orbits = _periodic_orbits(np.array(ext_words), config)
    ext_vals = np.array([scale * observable(o, c + 1, config) for o in ext_orbits])
    var = float(np.max(np.abs(ext_vals - vals[np.array(parent)]))) if len(ext_vals) else 0.0
    return Potential(k0, m, vals, provenance="induced-from-observable", var_m=var)
