"""Empirical estimators for exponent tails, regularity, Pesin excursions and subspace continuity.

All Monte-Carlo work is split into fixed-size chunks, each with its own
seed stream derived from (master seed, n, chunk index). Results are
integer counters, so the outcome does not depend on the number of
worker threads or on completion order.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import mpmath
import numpy as np
from mpmath import mp, mpf
from scipy.ndimage import maximum_filter1d

from . import mptrace
from .cocycle import CocycleProduct, map_derivative
from .coding import WindowTable, batched_log_singular_values, batched_log_singular_values_of, sequence_data
from .dynamics import periodic_extension, solve_cycles
from .errors import InsufficientData, PreconditionError, WindowTooShort
from .geometry import ObstacleConfiguration
from .symbolic import GibbsChain, Shift

MIN_EXCEEDANCES = 10
DEFAULT_CHUNK = 10_000
LOG_R_TOL = 1e-10


# ---------------------------------------------------------------------------
# rate fitting


@dataclass
class RateFit:
    logC: float
    c: float
    r2: float
    n_min: int
    n_max: int
    points: int


def fit_exponential_rate(n, p, counts=None, min_count: int = MIN_EXCEEDANCES) -> RateFit:
    """Least squares of log p_n on n; p_n ~ C exp(-c n).

    Points with p_n = 0, or with fewer than ``min_count`` exceedances when
    counts are given, are left out.
    """
    n = np.asarray(n, dtype=float)
    p = np.asarray(p, dtype=float)
    ok = p > 0
    if counts is not None:
        ok &= np.asarray(counts) >= min_count
    if ok.sum() < 4:
        raise InsufficientData(f"need at least 4 uncensored points, have {int(ok.sum())}")
    x, y = n[ok], np.log(p[ok])
    slope, icept = np.polyfit(x, y, 1)
    resid = y - (icept + slope * x)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return RateFit(float(icept), float(-slope), r2, int(x.min()), int(x.max()), int(ok.sum()))


@dataclass
class TailCurve:
    epsilon: float
    i: int
    side: str  # "upper", "lower" or "two-sided"
    samples: int
    n: np.ndarray
    exceedances: np.ndarray
    fit: Optional[RateFit] = None
    fit_error: Optional[str] = None

    @property
    def p(self) -> np.ndarray:
        return self.exceedances / float(self.samples)

    @property
    def censored(self) -> np.ndarray:
        return self.exceedances < MIN_EXCEEDANCES

    def refit(self) -> "TailCurve":
        try:
            self.fit = fit_exponential_rate(self.n, self.p, self.exceedances)
            self.fit_error = None
        except InsufficientData as exc:
            self.fit, self.fit_error = None, str(exc)
        return self

    def rows(self):
        return [(int(n), self.samples, int(k), float(k) / self.samples, bool(k < MIN_EXCEEDANCES))
                for n, k in zip(self.n, self.exceedances)]

    def fit_json(self, seed) -> dict:
        f = self.fit
        return {"epsilon": self.epsilon, "i": self.i, "side": self.side,
                "logC": None if f is None else f.logC, "c": None if f is None else f.c,
                "r2": None if f is None else f.r2, "n_min": None if f is None else f.n_min,
                "n_max": None if f is None else f.n_max, "seed": seed, "error": self.fit_error}


TAIL_HEADER = ("n", "samples", "exceedances", "p_n", "censored")


# ---------------------------------------------------------------------------
# seeded chunked Monte Carlo


def chunk_rng(seed: int, n: int, k: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(n), int(k))))


def run_chunks(fn: Callable, n_grid: Sequence[int], samples: int, seed: int, threads: int = 1,
               chunk: int = DEFAULT_CHUNK) -> List[np.ndarray]:
    """Sum fn(rng, n, size) (integer arrays) over fixed chunks, one list entry per n."""
    tasks = []
    for n in n_grid:
        for k, start in enumerate(range(0, samples, chunk)):
            tasks.append((int(n), k, min(chunk, samples - start)))

    def work(t):
        n, k, size = t
        return fn(chunk_rng(seed, n, k), n, size)

    if threads <= 1:
        results = [work(t) for t in tasks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(work, tasks))
    out, pos = [], 0
    for n in n_grid:
        acc = None
        while pos < len(tasks) and tasks[pos][0] == int(n):
            r = np.asarray(results[pos], dtype=np.int64)
            acc = r if acc is None else acc + r
            pos += 1
        out.append(acc)
    return out


# ---------------------------------------------------------------------------
# cocycle samplers


class BilliardSampler:
    """Billiard-map cocycles along stationary sequences of a Gibbs chain."""

    def __init__(self, table: WindowTable, chain: GibbsChain):
        if table.k0 != chain.k0:
            raise PreconditionError("table and chain use different alphabets")
        self.table = table
        self.chain = chain
        self.dim = 2

    def sequences(self, rng, size: int, n: int) -> np.ndarray:
        return self.chain.sample_batch(rng, size, n + self.table.margin)

    def matrices(self, rng, size: int, n: int) -> np.ndarray:
        tau, K, c = sequence_data(self.table, self.sequences(rng, size, n))
        return map_derivative(tau, K[:, :-1], K[:, 1:], c[:, :-1], c[:, 1:])

    def log_svals(self, rng, size: int, n: int) -> np.ndarray:
        tau, K, c = sequence_data(self.table, self.sequences(rng, size, n))
        return batched_log_singular_values(tau, K, c)


class MatrixSampler:
    """Synthetic cocycles: ``fn(rng, size, n)`` returns matrices of shape (size, n, D, D)."""

    def __init__(self, fn: Callable, dim: int = 2):
        self.fn = fn
        self.dim = dim

    def matrices(self, rng, size: int, n: int) -> np.ndarray:
        return np.asarray(self.fn(rng, size, n), dtype=float)

    def log_svals(self, rng, size: int, n: int) -> np.ndarray:
        mats = self.matrices(rng, size, n)
        if self.dim == 2:
            return batched_log_singular_values_of(mats)
        return np.array([CocycleProduct(self.dim).extend(m).log_singular_values() for m in mats])


# ---------------------------------------------------------------------------
# reference exponents


@dataclass
class LongRun:
    exponents: np.ndarray
    n: int
    cauchy: float  # max |lambda(n) - lambda(n/2)|
    mean_free_path: Optional[float] = None


def reference_exponents(sampler, n: int = 100_000, seed: int = 0) -> LongRun:
    """Exponents from one long orbit, with the Cauchy residual between n/2 and n."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0, 0xFFFF)))
    mfp = None
    if isinstance(sampler, BilliardSampler):
        tau, K, c = sequence_data(sampler.table, sampler.sequences(rng, 1, n))
        mats = map_derivative(tau[0], K[0, :-1], K[0, 1:], c[0, :-1], c[0, 1:])
        mfp = float(tau.mean())
    else:
        mats = sampler.matrices(rng, 1, n)[0]
    prod = CocycleProduct(mats.shape[1])
    half = n // 2
    prod.extend(mats[:half])
    first = prod.log_singular_values() / half
    prod.extend(mats[half:])
    lam = prod.log_singular_values() / n
    return LongRun(lam, n, float(np.max(np.abs(lam - first))), mfp)


# ---------------------------------------------------------------------------
# exponent tails


def exponent_exceedances(sampler, i: int, lam: float, eps_values: Sequence[float], n_grid, samples: int,
                         seed: int, threads: int = 1, chunk: int = DEFAULT_CHUNK) -> np.ndarray:
    """Counts (len(n_grid), len(eps), 2): [upper, lower] tail events on one sample set per n."""
    eps_values = np.asarray(eps_values, dtype=float)
    if np.any(eps_values <= 0):
        raise PreconditionError("epsilon must be positive")
    if i < 1 or i > sampler.dim:
        raise PreconditionError("exponent index out of range")

    def fn(rng, n, size):
        lv = sampler.log_svals(rng, size, n)[:, i - 1] / n
        up = (lv[:, None] >= lam + eps_values[None, :]).sum(axis=0)
        lo = (lv[:, None] <= lam - eps_values[None, :]).sum(axis=0)
        return np.stack([up, lo], axis=1)

    return np.array(run_chunks(fn, n_grid, samples, seed, threads, chunk))


def exponent_tail(sampler, i: int, eps: float, n_grid, samples: int, seed: int, lam: float, threads: int = 1,
                  chunk: int = DEFAULT_CHUNK) -> Tuple[TailCurve, TailCurve]:
    """Upper {lambda_i^(n) >= lambda_i + eps} and lower {<= lambda_i - eps} tail curves."""
    counts = exponent_exceedances(sampler, i, lam, [eps], n_grid, samples, seed, threads, chunk)
    n = np.asarray(n_grid)
    upper = TailCurve(eps, i, "upper", samples, n, counts[:, 0, 0]).refit()
    lower = TailCurve(eps, i, "lower", samples, n, counts[:, 0, 1]).refit()
    return upper, lower


def exterior_tail(sampler, i: int, eps: float, n_grid, samples: int, seed: int, chi_sum: float,
                  threads: int = 1, chunk: int = DEFAULT_CHUNK) -> TailCurve:
    """Two-sided tail of (1/n) log ||Lambda^i A^n|| around chi_1 + ... + chi_i."""
    if eps <= 0:
        raise PreconditionError("epsilon must be positive")

    def fn(rng, n, size):
        stat = sampler.log_svals(rng, size, n)[:, :i].sum(axis=1) / n
        return np.array([(np.abs(stat - chi_sum) >= eps).sum()])

    counts = np.array(run_chunks(fn, n_grid, samples, seed, threads, chunk))[:, 0]
    return TailCurve(eps, i, "two-sided", samples, np.asarray(n_grid), counts).refit()


# ---------------------------------------------------------------------------
# regularity and Pesin excursions


@dataclass
class PesinParameters:
    epsilon: float
    C_P: float
    delta: float
    N: int = 50

    def __post_init__(self):
        if self.epsilon <= 0:
            raise PreconditionError("epsilon must be positive")
        if not 0 < self.delta:
            raise PreconditionError("delta must be positive")
        if self.N < 1:
            raise PreconditionError("window must be at least 1")


@dataclass
class RegularityEstimate:
    value: float  # R_eps^(N)(x), raw truncated maximum
    tempered: float  # smallest e^eps-tempered function above the raw values, at x
    defects: np.ndarray  # per exponent log defect
    argmax_n: int
    N: int


def invariant_directions(mats: np.ndarray, burn: int = 0):
    """Unstable/stable unit vectors and one-step log stretches along batched planar orbits.

    ``mats`` has shape (B, L, 2, 2). The unstable direction is pushed
    forward from the first step, the stable one backward from the last;
    returned arrays cover steps burn .. L-burn-1.
    """
    mats = np.asarray(mats, dtype=float)
    if mats.ndim == 3:
        mats = mats[None]
    B, L = mats.shape[:2]
    if L <= 2 * burn:
        raise WindowTooShort("orbit shorter than twice the burn-in")
    v = np.tile(np.array([1.0, 0.3]) / math.hypot(1.0, 0.3), (B, 1))
    eu = np.empty((B, L, 2))
    au = np.empty((B, L))
    for j in range(L):
        eu[:, j] = v
        w = np.einsum("bij,bj->bi", mats[:, j], v)
        nw = np.linalg.norm(w, axis=1)
        au[:, j] = np.log(nw)
        v = w / nw[:, None]
    inv = np.linalg.inv(mats)
    v = np.tile(np.array([0.3, 1.0]) / math.hypot(1.0, 0.3), (B, 1))
    es = np.empty((B, L, 2))
    as_ = np.empty((B, L))
    for j in range(L - 1, -1, -1):
        w = np.einsum("bij,bj->bi", inv[:, j], v)
        nw = np.linalg.norm(w, axis=1)
        v = w / nw[:, None]
        es[:, j] = v
        as_[:, j] = -np.log(nw)
    sl = slice(burn, L - burn)
    return eu[:, sl], es[:, sl], au[:, sl], as_[:, sl]


def _window_max(G: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """out[m] = max G[m+lo .. m+hi] along the last axis (missing entries ignored)."""
    size = hi - lo + 1
    origin = -lo - size // 2
    return maximum_filter1d(G, size, axis=-1, origin=origin, mode="constant", cval=-np.inf)


def raw_log_regularity(stretches: Sequence[np.ndarray], lams: Sequence[float], eps: float, N: int):
    """log R^(N) along orbits from per-step log stretches of one-dimensional invariant directions.

    For a direction with stretches a_j and exponent l, H(j) = sum_{t<j}(a_t - l)
    and log R(m) = max over |k| <= N of |H(m+k) - H(m)| - |k| eps (k = 0 gives 0).
    Returns (logR, per-exponent defects, argmax k); entries whose windows
    leave the orbit use only the available part.
    """
    best = None
    defects = []
    arg = None
    for a, lam in zip(stretches, lams):
        a = np.atleast_2d(a)
        H = np.concatenate([np.zeros((a.shape[0], 1)), np.cumsum(a - lam, axis=1)], axis=1)
        j = np.arange(H.shape[1])
        Gm, Gp = H - j * eps, H + j * eps
        fwd = np.maximum(_window_max(Gm, 0, N) + j * eps - H, _window_max(-H - j * eps, 0, N) + j * eps + H)
        bwd = np.maximum(_window_max(Gp, -N, 0) - j * eps - H, _window_max(-H + j * eps, -N, 0) - j * eps + H)
        r = np.maximum(fwd, bwd)
        defects.append(r)
        best = r if best is None else np.maximum(best, r)
    return best, defects


def tempered_envelope(logR: np.ndarray, eps: float) -> np.ndarray:
    """max_j (logR(j) - |j - m| eps): the smallest eps-tempered majorant."""
    out = np.array(logR, dtype=float, copy=True)
    L = out.shape[-1]
    for m in range(1, L):
        np.maximum(out[..., m], out[..., m - 1] - eps, out=out[..., m])
    for m in range(L - 2, -1, -1):
        np.maximum(out[..., m], out[..., m + 1] - eps, out=out[..., m])
    return out


def tempering_violation_rate(logR: np.ndarray, eps: float, tol: float = 1e-12) -> float:
    """Fraction of steps with |log R(f x) - log R(x)| > eps."""
    d = np.abs(np.diff(logR, axis=-1))
    return float(np.mean(d > eps + tol))


def regularity_profile(mats: np.ndarray, lam: float, eps: float, N: int, burn: int = 20):
    """Raw and tempered log R along orbits (B, L, 2, 2); valid region excludes N + burn at each end."""
    eu, es, au, as_ = invariant_directions(mats, burn)
    raw, defects = raw_log_regularity([au, as_], [lam, -lam], eps, N)
    raw = raw[:, :-1]  # last entry has no outgoing step
    tempered = tempered_envelope(raw, eps)
    return raw, tempered, [d[:, :-1] for d in defects]


def regularity_estimate(mats: np.ndarray, lam: float, params: PesinParameters, burn: int = 20) -> RegularityEstimate:
    """Regularity of the point at the centre of a planar orbit segment."""
    mats = np.asarray(mats, dtype=float)
    L = mats.shape[-3]
    need = 2 * (params.N + burn) + 1
    if L < need:
        raise WindowTooShort(f"orbit of {L} steps, need {need} for window {params.N}")
    mats = mats.reshape(1, L, 2, 2)
    _, _, au, as_ = invariant_directions(mats, burn)
    raw, defects = raw_log_regularity([au, as_], [lam, -lam], params.epsilon, params.N)
    raw = raw[:, :-1]
    tempered = tempered_envelope(raw, params.epsilon)
    c = raw.shape[1] // 2
    # which time offset realises the maximum at the centre
    best_k, best = 0, 0.0
    for a, l in ((au[0], lam), (as_[0], -lam)):
        H = np.concatenate([[0.0], np.cumsum(a - l)])
        for k in range(max(-params.N, -c), min(params.N, len(H) - 1 - c) + 1):
            v = abs(H[c + k] - H[c]) - abs(k) * params.epsilon
            if v > best:
                best, best_k = v, k
    return RegularityEstimate(float(math.exp(raw[0, c])), float(math.exp(tempered[0, c])),
                              np.array([float(d[0, c]) for d in defects]), best_k, params.N)


def pesin_excursion_counts(sampler: BilliardSampler, rng, size: int, n: int, lam: float, params: PesinParameters,
                           burn: int = 20) -> np.ndarray:
    """Number of steps m < n with tempered R(f^m x) > C_P, per sample."""
    pad = params.N + burn
    mats = sampler.matrices(rng, size, n + 2 * pad)
    _, tempered, _ = regularity_profile(mats, lam, params.epsilon, params.N, burn)
    # the profile starts at step burn; step m of the window is column N + m
    seg = tempered[:, params.N:params.N + n]
    # log R is a maximum of cumulative sums; differences at rounding level are not excursions
    return (seg > math.log(params.C_P) + LOG_R_TOL).sum(axis=1)


def calibrate_pesin_threshold(sampler: BilliardSampler, lam: float, eps: float, N: int, samples: int, seed: int,
                              quantile: float = 0.9, burn: int = 20) -> float:
    """C_P as the quantile of the tempered regularity function under the measure."""
    rng = np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0, 0xCA11)))
    pad = N + burn
    mats = sampler.matrices(rng, samples, 1 + 2 * pad)
    _, tempered, _ = regularity_profile(mats, lam, eps, N, burn)
    return float(math.exp(np.quantile(tempered[:, N], quantile)))


def pesin_tail(sampler: BilliardSampler, params: PesinParameters, n_grid, samples: int, seed: int, lam: float,
               threads: int = 1, chunk: int = DEFAULT_CHUNK, burn: int = 20) -> TailCurve:
    """Frequency of {#excursions from P among n steps >= delta n}."""

    def fn(rng, n, size):
        cnt = pesin_excursion_counts(sampler, rng, size, n, lam, params, burn)
        return np.array([(cnt >= params.delta * n).sum()])

    counts = np.array(run_chunks(fn, n_grid, samples, seed, threads, chunk))[:, 0]
    return TailCurve(params.epsilon, 0, "pesin", samples, np.asarray(n_grid), counts).refit()


# ---------------------------------------------------------------------------
# subadditivity


def subadditivity_check(mats: np.ndarray, E, n_max: int = 50, s_max: int = 50) -> float:
    """max over n, s of gamma_{n+s}(x) - gamma_n(f^s x) - gamma_s(x).

    gamma is the log norm of the product restricted to the subspace E
    transported along the orbit (A^s E at f^s x).
    """
    mats = np.asarray(mats, dtype=float)
    E = np.asarray(E, dtype=float)
    if E.ndim == 1:
        E = E[:, None]
    if len(mats) < n_max + s_max:
        raise WindowTooShort("orbit too short for the requested grid")
    D = mats.shape[1]
    if E.shape[1] == 1:
        return _subadditivity_line(mats, E[:, 0], n_max, s_max)
    # general subspaces: stabilized restricted products
    frames = [np.linalg.qr(E)[0]]
    for s in range(s_max):
        frames.append(np.linalg.qr(mats[s] @ frames[-1])[0])
    gam = np.full((s_max + 1, n_max + s_max + 1), np.nan)
    for s in range(s_max + 1):
        prod = CocycleProduct(D, frames[s])
        gam[s, 0] = 0.0
        top = n_max + (s_max if s == 0 else 0)
        for n in range(1, top + 1):
            prod.push(mats[s + n - 1])
            gam[s, n] = prod.log_norm()
    worst = -np.inf
    for s in range(1, s_max + 1):
        for n in range(1, n_max + 1):
            worst = max(worst, gam[0, n + s] - gam[s, n] - gam[0, s])
    return float(worst)


def _subadditivity_line(mats, u, n_max, s_max):
    # log |A^n(f^s x) u_s| for all s <= s_max, n <= n_max + s_max, with u_s the transported unit vector
    total = n_max + s_max
    u = u / np.linalg.norm(u)
    starts = [u]
    for s in range(s_max):
        w = mats[s] @ starts[-1]
        starts.append(w / np.linalg.norm(w))
    V = np.array(starts)  # (s_max+1, 2)
    gam = np.zeros((s_max + 1, total + 1))
    for n in range(1, total + 1):
        idx = np.arange(s_max + 1) + n - 1
        ok = idx < len(mats)
        W = np.einsum("sij,sj->si", mats[np.minimum(idx, len(mats) - 1)], V)
        nw = np.linalg.norm(W, axis=1)
        gam[:, n] = gam[:, n - 1] + np.where(ok, np.log(nw), np.nan)
        V = W / nw[:, None]
    worst = -np.inf
    for s in range(1, s_max + 1):
        n = np.arange(1, n_max + 1)
        worst = max(worst, float(np.max(gam[0, n + s] - gam[s, n] - gam[0, s])))
    return worst


# ---------------------------------------------------------------------------
# semicontinuity of the leading subspace and hyperbolicity rates


@dataclass
class SemicontinuityProbe:
    depths: np.ndarray
    gaps: np.ndarray  # (targets, depths, samples): |sin| between E_1 of probe and target
    distances: np.ndarray  # same shape: distance of the centre collision points
    g: np.ndarray  # (targets, depths): max over samples
    median_g: np.ndarray  # (depths,)
    slope: float  # fitted d log(median g)/d n
    r2: float


@dataclass
class HyperbolicityEstimates:
    rho: float
    alpha: float
    rho_r2: float


def _conditioned_sequence(chain: GibbsChain, rev: GibbsChain, rng, core: np.ndarray, left: int, right: int):
    """A sequence core extended by ``left`` symbols in the past and ``right`` in the future, chain-conditioned."""
    shift = Shift(chain.k0)
    m = chain.m
    out = [core]
    if right > 0:
        st = shift.index(core[-m:])
        fw = chain.sample_batch(rng, 1, right + m, start_states=st)[0, m:]
        out.append(fw)
    if left > 0:
        st = shift.index(core[:m][::-1])
        bw = rev.sample_batch(rng, 1, left + m, start_states=st)[0, m:][::-1]
        out.insert(0, bw)
    return np.concatenate(out).astype(np.int64)


def _mp_stable_line(cyc: mptrace.MPCycle, centre: int, stop: int):
    """Stable direction at collision ``centre`` by backward push from collision ``stop``."""
    v = [mpf("0.3"), mpf(1)]
    p = len(cyc.word)
    for j in range(stop - 1, centre - 1, -1):
        k = (j + 1) % p
        A = mptrace.map_derivative_mp(cyc.tau[j], cyc.curvature[j], cyc.curvature[k], cyc.cos_phi[j], cyc.cos_phi[k])
        det = A[0][0] * A[1][1] - A[0][1] * A[1][0]
        w = [(A[1][1] * v[0] - A[0][1] * v[1]) / det, (-A[1][0] * v[0] + A[0][0] * v[1]) / det]
        nrm = mpmath.sqrt(w[0] ** 2 + w[1] ** 2)
        v = [w[0] / nrm, w[1] / nrm]
    return v


def _mp_cycle(config, obstacles, seq):
    word = periodic_extension(seq, config.k0)
    th = solve_cycles(config, np.array([word]))[0]
    return mptrace.refine_cycle(obstacles, word, th)


def semicontinuity_probe(config: ObstacleConfiguration, chain: GibbsChain, depths=range(2, 21), targets: int = 5,
                         samples: int = 4, seed: int = 0, margin: int = 30, dps: int = 60) -> SemicontinuityProbe:
    """Gaps between the leading singular-limit subspace at x and at points sharing 2n central symbols.

    The leading subspace of forward products converges to the orthogonal
    complement of the stable direction, so the gap is the sine of the
    angle between stable directions. Orbits are refined to ``dps`` digits
    because the gaps fall far below double precision.
    """
    depths = np.asarray(list(depths), dtype=int)
    if np.any(np.diff(depths) <= 0) or depths[0] < 1:
        raise PreconditionError("depths must be positive and increasing")
    M = int(depths.max()) + margin  # symbols on each side of the centre
    rev = chain.reversed()
    gaps = np.zeros((targets, len(depths), samples))
    dist = np.zeros_like(gaps)
    with mp.workdps(dps):
        obstacles = [mptrace.MPObstacle.of(o) for o in config.obstacles]
        for t in range(targets):
            rng = chunk_rng(seed, 0, t)
            x = chain.sample_batch(rng, 1, 2 * M)[0].astype(np.int64)
            cx = _mp_cycle(config, obstacles, x)
            es_x = _mp_stable_line(cx, M, 2 * M - 1)
            for a, n in enumerate(depths):
                core = x[M - n:M + n]
                for b in range(samples):
                    y = _conditioned_sequence(chain, rev, chunk_rng(seed, int(n), t * samples + b), core, M - n, M - n)
                    cy = _mp_cycle(config, obstacles, y)
                    es_y = _mp_stable_line(cy, M, 2 * M - 1)
                    cross = es_x[0] * es_y[1] - es_x[1] * es_y[0]
                    gaps[t, a, b] = float(abs(cross))
                    dist[t, a, b] = float(mptrace.dist(cx.points[M], cy.points[M]))
    g = gaps.max(axis=2)
    med = np.median(g, axis=0)
    ok = med > 0
    if ok.sum() >= 2:
        slope, icept = np.polyfit(depths[ok], np.log(med[ok]), 1)
        y = np.log(med[ok])
        res = y - (icept + slope * depths[ok])
        r2 = 1.0 - float(np.sum(res ** 2)) / float(np.sum((y - y.mean()) ** 2))
    else:
        slope, r2 = 0.0, 0.0
    return SemicontinuityProbe(depths, gaps, dist, g, med, float(slope), float(r2))


def hyperbolicity_estimates(probe: SemicontinuityProbe) -> HyperbolicityEstimates:
    """rho from the decay of centre-point distances in the depth; alpha = gap slope / log rho."""
    d = np.median(probe.distances.max(axis=2), axis=0)
    ok = d > 0
    if ok.sum() < 2:
        raise InsufficientData("no positive shadowing distances")
    x = probe.depths[ok]
    y = np.log(d[ok])
    slope, icept = np.polyfit(x, y, 1)
    res = y - (icept + slope * x)
    r2 = 1.0 - float(np.sum(res ** 2)) / float(np.sum((y - y.mean()) ** 2))
    rho = math.exp(slope)
    alpha = float(probe.slope / slope)
    return HyperbolicityEstimates(rho, alpha, r2)


# ---------------------------------------------------------------------------
# growth along stable cylinders


def stable_growth_comparison(sampler: BilliardSampler, T: int, pairs: int, seed: int, past: int = 30) -> np.ndarray:
    """|(1/T) log growth(p) - (1/T) log growth(r)| for pairs sharing T future symbols.

    Both orbits get independent pasts; growth is measured on the leading
    (unstable) direction of each from collision 0 to T.
    """
    table, chain = sampler.table, sampler.chain
    rev = chain.reversed()
    r = table.radius
    out = np.empty(pairs)
    for k in range(pairs):
        rng = chunk_rng(seed, T, k)
        fut = chain.sample_batch(rng, 1, T + r + 2)[0].astype(np.int64)
        seqs = [_conditioned_sequence(chain, rev, rng, fut, past + r, 0) for _ in range(2)]
        out[k] = abs(future_growth(table, seqs[0], past, T) - future_growth(table, seqs[1], past, T))
    return out


def future_growth(table: WindowTable, seq: np.ndarray, past: int, T: int) -> float:
    """(1/T) log growth of the unstable direction over collisions past .. past+T of a coded sequence."""
    tau, K, c = sequence_data(table, np.asarray(seq)[None, :])
    mats = map_derivative(tau[0], K[0, :-1], K[0, 1:], c[0, :-1], c[0, 1:])
    _, _, au, _ = invariant_directions(mats[None], 0)
    if au.shape[1] < past + T:
        raise WindowTooShort("sequence too short for the requested horizon")
    return float(au[0, past:past + T].sum() / T)
