"""Score functions: neighbor-probability-ratio fields over the cube.

A score function maps (state, forward time) to the d-vector of neighbor
probability ratios r_i ~= p_t(x ^ e_i) / p_t(x). The reverse sampler consumes
these as jump rates, the losses consume them as predictions. Concrete
implementations here: exact ratios of an evolved dense law, bucketed lookup
tables, constants, deterministic multiplicative perturbations, and rate caps.

`compile_score` flattens a wrapper stack into a plain payload dict that both
sampling backends (compiled and pure Python) interpret identically; score
functions that cannot be flattened still work through the generic
pure-Python path.
"""

from __future__ import annotations

import math

import numpy as np

from .hypercube import (
    DenseDistribution,
    ZeroMassError,
    evolve_exact,
    exact_score,
    exact_score_all,
    score_envelope,
)

# Deterministic-perturbation tables hold (buckets, 2**d, d) floats.
MAX_PERTURB_DIM = 12


class ScoreFunction:
    """Base class: a field of neighbor-ratio vectors over (state, time)."""

    def __init__(self, d: int):
        if d < 1:
            raise ValueError("d must be positive")
        self.d = d

    def ratios(self, x: int, t: float) -> np.ndarray:
        raise NotImplementedError

    def ratios_all(self, t: float) -> np.ndarray:
        """All states at once, shape (2**d, d). Default: loop over states."""
        out = np.empty((1 << self.d, self.d))
        for x in range(1 << self.d):
            out[x] = self.ratios(x, t)
        return out

    def __call__(self, x: int, t: float) -> np.ndarray:
        return self.ratios(x, t)


class ExactScore(ScoreFunction):
    """True ratios of the forward law started from a known dense p0."""

    def __init__(self, p0: DenseDistribution):
        super().__init__(p0.dim)
        self.p0 = p0

    def ratios(self, x: int, t: float) -> np.ndarray:
        return exact_score(evolve_exact(self.p0, t), x)

    def ratios_all(self, t: float) -> np.ndarray:
        return exact_score_all(evolve_exact(self.p0, t))


class ConstantScore(ScoreFunction):
    """Time- and state-independent ratio vector (1s = the uniform law's score)."""

    def __init__(self, d: int, values=1.0):
        super().__init__(d)
        vec = np.broadcast_to(np.asarray(values, dtype=np.float64), (d,)).copy()
        if not np.all(np.isfinite(vec)) or vec.min() < 0:
            raise ValueError("constant score values must be finite and nonnegative")
        vec.flags.writeable = False
        self.values = vec

    def ratios(self, x: int, t: float) -> np.ndarray:
        return self.values.copy()

    def ratios_all(self, t: float) -> np.ndarray:
        return np.tile(self.values, (1 << self.d, 1))


class TableScore(ScoreFunction):
    """Ratios stored per (time bucket, state, coordinate).

    Buckets are the half-open cells [edges[b], edges[b+1]) of a strictly
    increasing edge vector; the last cell is closed. Queries are accepted
    within a relative tolerance outside [edges[0], edges[-1]] to absorb
    floating-point wobble at the ends and are clamped to the nearest cell.
    """

    _EDGE_RTOL = 1e-9

    def __init__(self, edges, ratios):
        edges = np.array(edges, dtype=np.float64, copy=True)
        ratios = np.array(ratios, dtype=np.float64, copy=True)
        if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
            raise ValueError("edges must be strictly increasing with >= 2 entries")
        if ratios.ndim != 3 or ratios.shape[0] != edges.size - 1:
            raise ValueError("ratios must have shape (n_buckets, 2**d, d)")
        n, d = ratios.shape[1], ratios.shape[2]
        if n != (1 << d):
            raise ValueError("ratios second axis must be 2**d")
        if not np.all(np.isfinite(ratios)) or ratios.min() < 0:
            raise ValueError("table ratios must be finite and nonnegative")
        super().__init__(d)
        edges.flags.writeable = False
        ratios.flags.writeable = False
        self.edges = edges
        self.table = np.ascontiguousarray(ratios)

    @property
    def n_buckets(self) -> int:
        return self.edges.size - 1

    def bucket_of(self, t: float) -> int:
        lo, hi = self.edges[0], self.edges[-1]
        slack = self._EDGE_RTOL * max(1.0, abs(lo), abs(hi))
        if t < lo - slack or t > hi + slack:
            raise ValueError(f"time {t!r} outside table domain [{lo!r}, {hi!r}]")
        b = int(np.searchsorted(self.edges, t, side="right")) - 1
        return min(max(b, 0), self.n_buckets - 1)

    def ratios(self, x: int, t: float) -> np.ndarray:
        return self.table[self.bucket_of(t), x].copy()

    def ratios_all(self, t: float) -> np.ndarray:
        return self.table[self.bucket_of(t)].copy()


def geometric_edges(lo: float, hi: float, n_buckets: int) -> np.ndarray:
    """Geometrically spaced bucket edges on [lo, hi]."""
    if not 0 < lo < hi:
        raise ValueError("need 0 < lo < hi")
    if n_buckets < 1:
        raise ValueError("n_buckets must be positive")
    edges = np.geomspace(lo, hi, n_buckets + 1)
    edges[0], edges[-1] = lo, hi  # pin the ends exactly
    return edges


# ---------------------------------------------------------------------------
# Deterministic multiplicative perturbation
# ---------------------------------------------------------------------------

_GOLD = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix64(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, vectorized over uint64 arrays (wraparound)."""
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _hash_normals(d: int, n_buckets: int, seed: int) -> np.ndarray:
    """Standard normals keyed by (bucket, state, coordinate, seed).

    A counter-style hash followed by Box-Muller: the value at a cell is a
    pure function of its key, so the perturbed score is a fixed function of
    (state, time bucket), not a fresh noise draw per query.
    """
    n = 1 << d
    b = np.arange(n_buckets, dtype=np.uint64)[:, None, None]
    x = np.arange(n, dtype=np.uint64)[None, :, None]
    i = np.arange(d, dtype=np.uint64)[None, None, :]
    with np.errstate(over="ignore"):
        h = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ _GOLD)
        h = _mix64(h ^ ((b + np.uint64(1)) * _GOLD))
        h = _mix64(h ^ ((x + np.uint64(1)) * _MIX1))
        h = _mix64(h ^ ((i + np.uint64(1)) * _MIX2))
    u1 = ((_mix64(h ^ np.uint64(1)) >> np.uint64(11)) + np.uint64(1)).astype(np.float64)
    u2 = (_mix64(h ^ np.uint64(2)) >> np.uint64(11)).astype(np.float64)
    u1 *= 2.0**-53  # in (0, 1]
    u2 *= 2.0**-53  # in [0, 1)
    z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
    return np.broadcast_to(z, (n_buckets, n, d)).copy()


class PerturbedScore(ScoreFunction):
    """Base score times deterministic lognormal factors exp(sigma * z).

    z is hashed from (state, coordinate, time bucket, seed), so repeated
    queries — and both sampling backends, and the dense oracle — see the
    identical factor table.
    """

    def __init__(self, base: ScoreFunction, noise_level: float, seed: int, edges):
        if noise_level < 0:
            raise ValueError("noise_level must be nonnegative")
        if base.d > MAX_PERTURB_DIM:
            raise ValueError(f"perturbation tables support d <= {MAX_PERTURB_DIM}")
        super().__init__(base.d)
        edges = np.array(edges, dtype=np.float64, copy=True)
        if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
            raise ValueError("edges must be strictly increasing with >= 2 entries")
        edges.flags.writeable = False
        self.base = base
        self.noise_level = float(noise_level)
        self.seed = int(seed)
        self.edges = edges
        z = _hash_normals(base.d, edges.size - 1, self.seed)
        factors = np.exp(self.noise_level * z)
        factors.flags.writeable = False
        self.factors = np.ascontiguousarray(factors)

    def _bucket(self, t: float) -> int:
        b = int(np.searchsorted(self.edges, t, side="right")) - 1
        return min(max(b, 0), self.edges.size - 2)

    def ratios(self, x: int, t: float) -> np.ndarray:
        return self.base.ratios(x, t) * self.factors[self._bucket(t), x]

    def ratios_all(self, t: float) -> np.ndarray:
        return self.base.ratios_all(t) * self.factors[self._bucket(t)]


class ClampedScore(ScoreFunction):
    """Base score rescaled so the total jump rate never exceeds a time cap.

    The cap is d * envelope(t): exact scores already satisfy it, so clamping
    is the identity on them; approximate scores get pulled back inside the
    rate budget the sampler's schedule was built for.
    """

    def __init__(self, base: ScoreFunction, mode: str = "general", L: float | None = None):
        if mode not in ("general", "bounded"):
            raise ValueError(f"unknown clamp mode {mode!r}")
        if mode == "bounded" and (L is None or L < 1.0):
            raise ValueError("bounded mode requires a ratio bound L >= 1")
        super().__init__(base.d)
        self.base = base
        self.mode = mode
        self.L = None if L is None else float(L)

    def cap(self, t: float) -> float:
        return self.d * score_envelope(t, self.mode, self.L)

    def ratios(self, x: int, t: float) -> np.ndarray:
        r = np.asarray(self.base.ratios(x, t), dtype=np.float64)
        # np.cumsum accumulates left to right, the same order as the
        # backends' running-total loops; np.sum's pairwise order would not be.
        total = float(np.cumsum(r)[-1])
        cap = self.cap(t)
        if total > cap:
            r = r * (cap / total)
        return r

    def ratios_all(self, t: float) -> np.ndarray:
        r = np.asarray(self.base.ratios_all(t), dtype=np.float64)
        totals = np.cumsum(r, axis=1)[:, -1]
        cap = self.cap(t)
        scale = np.where(totals > cap, cap / np.maximum(totals, 1e-300), 1.0)
        return r * scale[:, None]


class CallableScore(ScoreFunction):
    """Adapter for a bare function (state, time) -> ratio vector."""

    def __init__(self, fn, d: int):
        super().__init__(d)
        self.fn = fn

    def ratios(self, x: int, t: float) -> np.ndarray:
        r = np.asarray(self.fn(x, t), dtype=np.float64).reshape(-1)
        if r.shape[0] != self.d:
            raise ValueError(f"score callable returned {r.shape[0]} ratios, expected {self.d}")
        return r


def as_score_function(obj, d: int | None = None) -> ScoreFunction:
    """Coerce a ScoreFunction, DenseDistribution (exact), or callable."""
    if isinstance(obj, ScoreFunction):
        if d is not None and obj.d != d:
            raise ValueError(f"score has d={obj.d}, expected {d}")
        return obj
    if isinstance(obj, DenseDistribution):
        return ExactScore(obj)
    if callable(obj):
        if d is None:
            raise ValueError("wrapping a bare callable requires d")
        return CallableScore(obj, d)
    raise TypeError(f"cannot interpret {type(obj).__name__} as a score function")


# ---------------------------------------------------------------------------
# Backend payload
# ---------------------------------------------------------------------------

BASE_EXACT, BASE_TABLE, BASE_CONST = 0, 1, 2
CLAMP_NONE, CLAMP_GENERAL, CLAMP_BOUNDED = 0, 1, 2


def compile_score(score: ScoreFunction) -> dict | None:
    """Flatten [Clamped [Perturbed]] {Exact | Table | Const} into a payload.

    Both sampling backends interpret the payload with the same arithmetic, so
    a compilable score gives bit-identical trajectories on either. Returns
    None when the stack contains anything else (e.g. a CallableScore), in
    which case only the generic pure-Python path applies.
    """
    clamp_mode, clamp_L = CLAMP_NONE, 0.0
    node = score
    if isinstance(node, ClampedScore):
        clamp_mode = CLAMP_GENERAL if node.mode == "general" else CLAMP_BOUNDED
        clamp_L = 0.0 if node.L is None else node.L
        node = node.base

    perturb_edges = perturb_factors = None
    if isinstance(node, PerturbedScore):
        perturb_edges = node.edges
        perturb_factors = node.factors
        node = node.base

    if isinstance(node, ExactScore):
        base = (BASE_EXACT, np.ascontiguousarray(node.p0.mass), None)
    elif isinstance(node, TableScore):
        base = (BASE_TABLE, np.ascontiguousarray(node.edges), node.table)
    elif isinstance(node, ConstantScore):
        base = (BASE_CONST, np.ascontiguousarray(node.values), None)
    else:
        return None

    return {
        "d": score.d,
        "base_kind": base[0],
        "base_a": base[1],
        "base_b": base[2],
        "perturb_edges": perturb_edges,
        "perturb_factors": perturb_factors,
        "clamp_mode": clamp_mode,
        "clamp_L": clamp_L,
    }
