"""Pure-Python reference backend for the reverse-sampling event loop.

PARITY CONTRACT
---------------
This module and the compiled kernel (_kernels.pyx) implement the same draw
sequence and the same floating-point arithmetic in the same order, so a
trajectory keyed by (seed, index) produces bit-identical results on either
backend. The contract, mirrored line for line in the kernel:

  * per-trajectory generator: Philox keyed by the uint64 pair (seed, index);
  * initial state: one raw 64-bit draw masked to d bits (a full-range
    ``integers`` call consumes exactly one ``next_uint64``);
  * per interval k: one Poisson draw with mean lambda_k * width, then that
    many uniforms mapped as ``t_k + width * u`` and sorted ascending;
  * per event at reverse time tau (forward time T - tau): evaluate ratios,
    accumulate totals strictly left to right, optionally rescale by
    cap/total, check total <= lambda * (1 + rate_tol), then draw one uniform
    u and flip the first coordinate i with u < sum_{j<=i} r_j / lambda;
  * scalar transcendentals via libm (math.exp here, C exp there); vector
    arithmetic restricted to elementwise ops with matching operand order;
  * the per-event heat propagation for exact scores runs coordinate passes
    in bit order 0..d-1 with operand order (1-q)*self + q*partner.

Any change here must be mirrored in _kernels.pyx and vice versa.
"""

from __future__ import annotations

import math

import numpy as np

from .scores import BASE_CONST, BASE_EXACT, BASE_TABLE, CLAMP_BOUNDED, CLAMP_NONE

_U64_FULL = (1 << 64) - 1


class RateBoundError(RuntimeError):
    """Total jump rate exceeded the interval's uniformization rate."""

    def __init__(self, state: int, time: float, interval: int, total: float, lam: float):
        self.state = state
        self.time = time
        self.interval = interval
        self.total = total
        self.lam = lam
        super().__init__(
            f"score total {total:.6g} exceeds rate {lam:.6g} at state {state}, "
            f"forward time {time:.6g}, interval {interval}"
        )


def _trajectory_generator(seed: int, index: int) -> np.random.Generator:
    key = np.array([seed, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _make_evaluator(payload: dict):
    """Build eval(y, t_fwd) -> ratio array from a compiled score payload.

    The returned array may be a view into payload tables; callers treat it
    as read-only.
    """
    d = payload["d"]

    if "generic" in payload:
        score = payload["generic"]

        def eval_generic(y: int, t_fwd: float) -> np.ndarray:
            r = np.asarray(score.ratios(y, t_fwd), dtype=np.float64)
            if not np.all(np.isfinite(r)) or r.min() < 0:
                raise ValueError(
                    f"score returned invalid ratios at state {y}, time {t_fwd!r}"
                )
            return r

        return eval_generic

    kind = payload["base_kind"]
    if kind == BASE_EXACT:
        p0 = payload["base_a"]
        flip_idx = [np.arange(1 << d, dtype=np.intp) ^ (1 << i) for i in range(d)]
        bits = [1 << i for i in range(d)]

        def eval_exact(y: int, t_fwd: float) -> np.ndarray:
            q = 0.5 * (1.0 - math.exp(-2.0 * t_fwd))
            work = p0
            for i in range(d):
                work = (1.0 - q) * work + q * work[flip_idx[i]]
            py = work[y]
            out = np.empty(d)
            for i in range(d):
                out[i] = work[y ^ bits[i]] / py
            return out

        return eval_exact

    if kind == BASE_TABLE:
        edges = payload["base_a"]
        table = payload["base_b"]

        def eval_table(y: int, t_fwd: float) -> np.ndarray:
            return table[_bucket_index(edges, t_fwd), y]

        return eval_table

    if kind == BASE_CONST:
        values = payload["base_a"]
        return lambda y, t_fwd: values

    raise ValueError(f"unknown base kind {kind!r}")


def _bucket_index(edges: np.ndarray, t: float) -> int:
    """Left-closed bucket lookup, clamped to the end cells.

    Mirrors the kernel's linear scan: advance while t >= next edge.
    """
    b = 0
    last = edges.shape[0] - 2
    while b < last and t >= edges[b + 1]:
        b += 1
    return b


def _rate_cap(d: int, t_fwd: float, clamp_mode: int, L: float) -> float:
    e = math.exp(-2.0 * t_fwd)
    if clamp_mode == CLAMP_BOUNDED:
        if e >= 1.0:
            env = L
        else:
            env = (1.0 + e) / (1.0 - e)
            if env > L:
                env = L
    else:
        if e >= 1.0:
            return math.inf
        env = (1.0 + e) / (1.0 - e)
    return d * env


def _event_step(y, t_fwd, lam, k, d, evaluate, perturb_edges, perturb_factors,
                clamp_mode, clamp_L, rate_tol, u):
    """One thinning decision; returns the next state or raises RateBoundError."""
    r = evaluate(y, t_fwd)
    if perturb_factors is not None:
        r = r * perturb_factors[_bucket_index(perturb_edges, t_fwd), y]

    total = 0.0
    for i in range(d):
        total += r[i]
    if clamp_mode != CLAMP_NONE and total > _rate_cap(d, t_fwd, clamp_mode, clamp_L):
        scale = _rate_cap(d, t_fwd, clamp_mode, clamp_L) / total
        r = r * scale
        total = 0.0
        for i in range(d):
            total += r[i]
    if total > lam * (1.0 + rate_tol):
        raise RateBoundError(y, t_fwd, k, total, lam)

    acc = 0.0
    for i in range(d):
        acc += r[i] / lam
        if u < acc:
            return y ^ (1 << i)
    return y


def _run_trajectory_impl(d, T, knots, lambdas, gen, evaluate, perturb_edges,
                         perturb_factors, clamp_mode, clamp_L, rate_tol, per_interval):
    """One full trajectory; accumulates event counts into per_interval."""
    mask = (1 << d) - 1
    y = int(gen.integers(0, _U64_FULL, endpoint=True, dtype=np.uint64)) & mask
    events = 0
    flips = 0
    n_int = lambdas.shape[0]
    for k in range(n_int):
        t_lo = knots[k]
        width = knots[k + 1] - knots[k]
        lam = lambdas[k]
        m = int(gen.poisson(lam * width))
        if m == 0:
            continue
        taus = np.sort(t_lo + width * gen.random(m))
        per_interval[k] += m
        events += m
        for idx in range(m):
            t_fwd = T - float(taus[idx])
            u = float(gen.random())
            y_next = _event_step(
                y, t_fwd, lam, k, d, evaluate, perturb_edges, perturb_factors,
                clamp_mode, clamp_L, rate_tol, u,
            )
            if y_next != y:
                flips += 1
                y = y_next
    return y, events, flips


def run_single_trajectory(d, T, knots, lambdas, payload, gen, rate_tol=1e-9):
    """Run one trajectory with a caller-provided generator.

    Returns (state, n_events, n_flips, per_interval_events). The draw
    sequence is identical to one batch trajectory, so seeding `gen` by
    (seed, index) reproduces batch entry `index` exactly.
    """
    knots = np.ascontiguousarray(knots, dtype=np.float64)
    lambdas = np.ascontiguousarray(lambdas, dtype=np.float64)
    per_interval = np.zeros(lambdas.shape[0], dtype=np.int64)
    evaluate = _make_evaluator(payload)
    y, events, flips = _run_trajectory_impl(
        d, T, knots, lambdas, gen, evaluate, payload.get("perturb_edges"),
        payload.get("perturb_factors"), payload.get("clamp_mode", CLAMP_NONE),
        payload.get("clamp_L", 0.0), rate_tol, per_interval,
    )
    return y, events, flips, per_interval


def sample_reverse_batch(d, T, knots, lambdas, payload, seed, idx_start, idx_stop,
                         rate_tol=1e-9):
    """Run trajectories [idx_start, idx_stop) of the reverse sampler.

    Returns (states, n_events, n_flips, per_interval_events); the first three
    are int64 arrays of one entry per trajectory, the last is the int64 event
    count per partition interval summed over the batch.
    """
    knots = np.ascontiguousarray(knots, dtype=np.float64)
    lambdas = np.ascontiguousarray(lambdas, dtype=np.float64)
    n_traj = idx_stop - idx_start
    states = np.empty(n_traj, dtype=np.int64)
    n_events = np.zeros(n_traj, dtype=np.int64)
    n_flips = np.zeros(n_traj, dtype=np.int64)
    per_interval = np.zeros(lambdas.shape[0], dtype=np.int64)

    evaluate = _make_evaluator(payload)
    perturb_edges = payload.get("perturb_edges")
    perturb_factors = payload.get("perturb_factors")
    clamp_mode = payload.get("clamp_mode", CLAMP_NONE)
    clamp_L = payload.get("clamp_L", 0.0)

    for j in range(n_traj):
        gen = _trajectory_generator(seed, idx_start + j)
        y, events, flips = _run_trajectory_impl(
            d, T, knots, lambdas, gen, evaluate, perturb_edges, perturb_factors,
            clamp_mode, clamp_L, rate_tol, per_interval,
        )
        states[j] = y
        n_events[j] = events
        n_flips[j] = flips
    return states, n_events, n_flips, per_interval


def trajectory_fixed_times(d, T, times, lams, payload, y0, gen, rate_tol=1e-9):
    """Run the thinning decisions along a FIXED event-time sequence.

    `times` are reverse-time event epochs, `lams` the uniformization rate in
    force at each epoch. Used to validate that, conditioned on event times,
    the chain composes the per-event kernels exactly; fresh uniforms come
    from `gen`.
    """
    evaluate = _make_evaluator(payload)
    perturb_edges = payload.get("perturb_edges")
    perturb_factors = payload.get("perturb_factors")
    clamp_mode = payload.get("clamp_mode", CLAMP_NONE)
    clamp_L = payload.get("clamp_L", 0.0)
    y = int(y0)
    for k, (tau, lam) in enumerate(zip(times, lams)):
        u = float(gen.random())
        y = _event_step(
            y, T - float(tau), float(lam), k, d, evaluate, perturb_edges,
            perturb_factors, clamp_mode, clamp_L, rate_tol, u,
        )
    return y
