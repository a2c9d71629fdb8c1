"""Brute-force reference machinery for small continuous-time chains.

Everything here works on dense generator matrices over an explicit state
enumeration and is deliberately independent of the tensorized closed forms in
`hypercube`: the matrix exponential comes from scipy's Pade
scaling-and-squaring, the forward equation is integrated with a hand-rolled
fixed-step RK4, and the generic uniformization sampler simulates any bounded
generator directly. Agreements between these routes and the fast package
paths are what the test suite leans on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .hypercube import DenseDistribution

# Dense n x n work stops being brute-force-cheap past this.
MAX_ORACLE_STATES = 1 << 12

_ROW_ATOL = 1e-9


class RateBoundViolation(RuntimeError):
    """The uniformization rate bound was exceeded at a visited state/time."""


@dataclass(frozen=True)
class GeneratorMatrix:
    """Dense generator of a continuous-time chain on n states.

    Off-diagonal entries are jump rates (nonnegative); each row sums to zero.
    """

    rates: np.ndarray

    def __post_init__(self):
        arr = np.array(self.rates, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"generator must be square, got shape {arr.shape}")
        n = arr.shape[0]
        if n > MAX_ORACLE_STATES:
            raise ValueError(f"{n} states exceeds oracle limit {MAX_ORACLE_STATES}")
        offdiag = arr.copy()
        np.fill_diagonal(offdiag, 0.0)
        if offdiag.min() < 0:
            raise ValueError("off-diagonal rates must be nonnegative")
        rowsums = arr.sum(axis=1)
        if np.abs(rowsums).max() > _ROW_ATOL:
            raise ValueError(f"rows must sum to zero, worst {np.abs(rowsums).max():.3e}")
        arr.flags.writeable = False
        object.__setattr__(self, "rates", arr)

    @property
    def n_states(self) -> int:
        return self.rates.shape[0]

    def max_exit_rate(self) -> float:
        return float(np.max(-np.diag(self.rates)))


def _as_rate_fn(Q_of_t):
    """Normalize generator inputs to a callable t -> (n, n) rate array."""
    if isinstance(Q_of_t, GeneratorMatrix):
        rates = Q_of_t.rates
        return (lambda t: rates), Q_of_t.n_states
    if isinstance(Q_of_t, np.ndarray):
        gm = GeneratorMatrix(Q_of_t)
        rates = gm.rates
        return (lambda t: rates), gm.n_states
    if callable(Q_of_t):
        probe = np.asarray(Q_of_t(0.0), dtype=np.float64)
        if probe.ndim != 2 or probe.shape[0] != probe.shape[1]:
            raise ValueError("generator callable must return a square matrix")
        return (lambda t: np.asarray(Q_of_t(t), dtype=np.float64)), probe.shape[0]
    raise TypeError("expected GeneratorMatrix, square ndarray, or callable of t")


def _as_prob_vector(p0, n: int):
    """Return (vector, was_dense_distribution)."""
    if isinstance(p0, DenseDistribution):
        if p0.n_states != n:
            raise ValueError(f"distribution has {p0.n_states} states, generator has {n}")
        return p0.mass.copy(), p0.dim
    vec = np.array(p0, dtype=np.float64, copy=True).reshape(-1)
    if vec.shape[0] != n:
        raise ValueError(f"p0 has {vec.shape[0]} entries, generator has {n}")
    if vec.min() < 0 or abs(vec.sum() - 1.0) > 1e-9:
        raise ValueError("p0 must be a probability vector")
    return vec, None


def expm(Q, t: float) -> np.ndarray:
    """Transition matrix e^{tQ} of a homogeneous chain, row-stochastic.

    Backed by scipy's scaling-and-squaring Pade approximant; rows are
    checked to be stochastic within 1e-9 and negative rounding dust is
    clipped before returning.
    """
    if t < 0:
        raise ValueError("time must be nonnegative")
    if isinstance(Q, GeneratorMatrix):
        rates = Q.rates
    else:
        rates = GeneratorMatrix(np.asarray(Q)).rates
    P = scipy.linalg.expm(t * rates)
    if P.min() < -1e-9:
        raise ArithmeticError(f"matrix exponential produced entry {P.min():.3e}")
    np.clip(P, 0.0, None, out=P)
    rowsums = P.sum(axis=1)
    if np.abs(rowsums - 1.0).max() > _ROW_ATOL:
        raise ArithmeticError("matrix exponential rows are not stochastic")
    return P


@dataclass(frozen=True)
class IntegrationInfo:
    """Diagnostics from integrate_forward: drift is reported, never hidden."""

    steps: int
    mass_drift: float  # |sum - 1| before the final explicit renormalize
    min_mass: float  # most negative component seen in the final state


def integrate_forward(Q_of_t, p0, t0: float, t1: float, steps: int, *, return_info: bool = False):
    """Integrate dp/dt = p Q(t) from t0 to t1 with fixed-step RK4.

    Returns the evolved law as the same kind of object as p0 (a
    DenseDistribution in, a DenseDistribution out; plain vectors otherwise).
    The final vector is renormalized once, explicitly, with the drift
    available via return_info=True; any component below -1e-8 aborts, since
    that signals a step size too coarse for the stiffness at hand.
    """
    if t1 < t0:
        raise ValueError("t1 must be >= t0")
    if steps < 1:
        raise ValueError("steps must be positive")
    rate_fn, n = _as_rate_fn(Q_of_t)
    vec, dim = _as_prob_vector(p0, n)
    h = (t1 - t0) / steps
    for k in range(steps):
        t = t0 + k * h
        k1 = vec @ rate_fn(t)
        k2 = (vec + 0.5 * h * k1) @ rate_fn(t + 0.5 * h)
        k3 = (vec + 0.5 * h * k2) @ rate_fn(t + 0.5 * h)
        k4 = (vec + h * k3) @ rate_fn(t + h)
        vec = vec + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    min_mass = float(vec.min())
    if min_mass < -1e-8:
        raise ArithmeticError(
            f"integration produced mass {min_mass:.3e}; decrease the step size"
        )
    drift = abs(float(vec.sum()) - 1.0)
    np.clip(vec, 0.0, None, out=vec)
    vec /= vec.sum()
    result = DenseDistribution(dim, vec) if dim is not None else vec
    if return_info:
        return result, IntegrationInfo(steps=steps, mass_drift=drift, min_mass=min_mass)
    return result


def uniformize_generic(
    Q_of_t,
    lambda_bound: float,
    p0,
    T: float,
    rng: np.random.Generator,
    *,
    n_samples: int | None = None,
    vectorized_rates: bool = False,
):
    """Exact simulation of a bounded-generator chain over [0, T].

    Event times arrive as a Poisson process of rate lambda_bound; at each
    event the state moves by the row of I + Q(t)/lambda_bound, whose diagonal
    surplus realizes the required self-loops. Any visited (state, time) with
    exit rate above lambda_bound raises RateBoundViolation: the bound is part
    of the method's correctness contract, not a tuning knob.

    With n_samples=None a single terminal state (int) is returned, else an
    int64 array of that many terminal states. `vectorized_rates` promises
    that Q_of_t maps a time array of shape (m,) to rates of shape (m, n, n),
    which lets the batch path evaluate rounds of events in one call.
    """
    if lambda_bound <= 0:
        raise ValueError("lambda_bound must be positive")
    if T < 0:
        raise ValueError("T must be nonnegative")
    single = n_samples is None
    ns = 1 if single else int(n_samples)
    if ns < 1:
        raise ValueError("n_samples must be positive")

    rate_fn, n = _as_rate_fn(Q_of_t)
    vec, _ = _as_prob_vector(p0, n)

    states = rng.choice(n, size=ns, p=vec).astype(np.int64)
    counts = rng.poisson(lambda_bound * T, size=ns)
    total = int(counts.sum())
    if total:
        owner = np.repeat(np.arange(ns), counts)
        times = rng.random(total) * T
        order = np.lexsort((times, owner))
        times = times[order]
    offsets = np.zeros(ns + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])

    max_rounds = int(counts.max()) if ns else 0
    for j in range(max_rounds):
        active = np.nonzero(counts > j)[0]
        t_j = times[offsets[active] + j]
        x_j = states[active]
        if vectorized_rates:
            rates_batch = np.asarray(Q_of_t(t_j), dtype=np.float64)
            rows = rates_batch[np.arange(active.size), x_j, :]
        else:
            rows = np.empty((active.size, n))
            for k in range(active.size):
                rows[k] = rate_fn(float(t_j[k]))[x_j[k]]
        exit_rates = -rows[np.arange(active.size), x_j]
        bad = exit_rates > lambda_bound * (1.0 + 1e-12)
        if np.any(bad):
            b = int(np.argmax(bad))
            raise RateBoundViolation(
                f"exit rate {exit_rates[b]:.6g} at state {int(x_j[b])}, "
                f"time {float(t_j[b]):.6g} exceeds bound {lambda_bound:.6g}"
            )
        kernel_rows = rows / lambda_bound
        kernel_rows[np.arange(active.size), x_j] += 1.0
        cum = np.cumsum(kernel_rows, axis=1)
        u = rng.random(active.size)
        nxt = (u[:, None] >= cum).sum(axis=1)
        np.minimum(nxt, n - 1, out=nxt)
        states[active] = nxt

    if single:
        return int(states[0])
    return states


# ---------------------------------------------------------------------------
# Builders for the chains this package cares about
# ---------------------------------------------------------------------------


def hypercube_generator(d: int) -> GeneratorMatrix:
    """Dense generator of the independent-flip dynamic on {0,1}^d."""
    if not 1 <= d <= 12:
        raise ValueError("dense hypercube generator supports d in [1, 12]")
    n = 1 << d
    rates = np.zeros((n, n))
    idx = np.arange(n)
    for i in range(d):
        rates[idx, idx ^ (1 << i)] = 1.0
    rates[idx, idx] = -float(d)
    return GeneratorMatrix(rates)


def reverse_generator(score_fn, T: float, d: int):
    """Dense generator of the score-driven sampling dynamic, in reverse time.

    At reverse time t the chain jumps x -> x ^ e_i at rate equal to the
    neighbor ratio of the forward law at forward time T - t. Returns a
    callable suitable for integrate_forward over [0, T - delta]; accepts a
    time array and then returns a stacked (m, n, n) batch, so it also feeds
    the vectorized uniformization path.
    """
    if not 1 <= d <= 12:
        raise ValueError("dense reverse generator supports d in [1, 12]")
    from .scores import as_score_function

    score = as_score_function(score_fn, d)
    n = 1 << d
    idx = np.arange(n)

    def q_of_t(t_rev):
        t_arr = np.atleast_1d(np.asarray(t_rev, dtype=np.float64))
        out = np.zeros((t_arr.shape[0], n, n))
        for m, t in enumerate(t_arr):
            ratios = score.ratios_all(T - float(t))
            for i in range(d):
                out[m, idx, idx ^ (1 << i)] = ratios[:, i]
            out[m, idx, idx] = -ratios.sum(axis=1)
        if np.isscalar(t_rev) or np.asarray(t_rev).ndim == 0:
            return out[0]
        return out

    return q_of_t
