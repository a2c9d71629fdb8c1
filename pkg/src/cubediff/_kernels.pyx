# cython: language_level=3
# cython: boundscheck=False
# cython: wraparound=False
# cython: cdivision=True
# cython: initializedcheck=False
"""Compiled twin of the pure-Python sampling kernel.

This module implements exactly the draw sequence and floating-point
arithmetic documented in the PARITY CONTRACT at the top of _kernels_py.py:
per-trajectory Philox streams driven through numpy's C interface, libm
scalars, strictly left-to-right accumulation, and identical coordinate-pass
order for the per-event heat propagation. Any change to either module must
be mirrored in the other.

Only compiled score payloads are supported here; payloads carrying an
arbitrary Python score object ("generic") must run on the pure backend.
"""

import numpy as np

cimport numpy as cnp
from cpython.pycapsule cimport PyCapsule_GetPointer
from libc.math cimport INFINITY, exp
from libc.stdlib cimport free, malloc, qsort, realloc
from libc.string cimport memcpy
from numpy.random cimport bitgen_t
from numpy.random.c_distributions cimport random_poisson, random_standard_uniform

from ._kernels_py import RateBoundError
from .scores import (
    BASE_CONST,
    BASE_EXACT,
    BASE_TABLE,
    CLAMP_BOUNDED,
    CLAMP_GENERAL,
    CLAMP_NONE,
)

cnp.import_array()

cdef enum:
    BASE_EXACT_C = 0
    BASE_TABLE_C = 1
    BASE_CONST_C = 2

cdef enum:
    CLAMP_NONE_C = 0
    CLAMP_GENERAL_C = 1
    CLAMP_BOUNDED_C = 2

# The enum values are the wire format shared with scores.compile_score.
assert (BASE_EXACT, BASE_TABLE, BASE_CONST) == (BASE_EXACT_C, BASE_TABLE_C, BASE_CONST_C)
assert (CLAMP_NONE, CLAMP_GENERAL, CLAMP_BOUNDED) == (
    CLAMP_NONE_C, CLAMP_GENERAL_C, CLAMP_BOUNDED_C)


cdef struct EvalParams:
    int d
    int base_kind
    long long n_states          # exact base: table length 1 << d (else 0)
    const double *base_a        # exact: p0 | table: bucket edges | const: values
    const double *base_b        # table: (n_buckets, 2**d, d) ratios, flattened
    long long n_base_edges
    long long n_table_states
    int has_perturb
    const double *perturb_edges
    const double *perturb_factors
    long long n_perturb_edges
    long long n_perturb_states
    int clamp_mode
    double clamp_L
    double *work                # scratch, length n_states (exact base only)
    double *r                   # scratch, length d


cdef struct ErrInfo:
    int code                    # 0 ok, 1 rate bound violated, 2 out of memory
    unsigned long long state
    double time
    long long interval
    double total
    double lam


cdef int _cmp_double(const void *a, const void *b) noexcept nogil:
    cdef double x = (<const double *> a)[0]
    cdef double y = (<const double *> b)[0]
    if x < y:
        return -1
    if x > y:
        return 1
    return 0


cdef inline long long _bucket_index(const double *edges, long long n_edges,
                                    double t) noexcept nogil:
    # Mirrors _kernels_py._bucket_index: left-closed cells, clamped to the
    # end cells by construction of the scan.
    cdef long long b = 0
    cdef long long last = n_edges - 2
    while b < last and t >= edges[b + 1]:
        b += 1
    return b


cdef inline double _rate_cap(int d, double t_fwd, int clamp_mode,
                             double L) noexcept nogil:
    # Mirrors _kernels_py._rate_cap.
    cdef double e = exp(-2.0 * t_fwd)
    cdef double env
    if clamp_mode == CLAMP_BOUNDED_C:
        if e >= 1.0:
            env = L
        else:
            env = (1.0 + e) / (1.0 - e)
            if env > L:
                env = L
    else:
        if e >= 1.0:
            return INFINITY
        env = (1.0 + e) / (1.0 - e)
    return d * env


cdef inline void _evaluate(EvalParams *ep, unsigned long long y,
                           double t_fwd) noexcept nogil:
    # Mirrors the closures built by _kernels_py._make_evaluator; writes the
    # ratio vector into ep.r.
    cdef long long n, base, off, b
    cdef int i, bit
    cdef double q, q1, a, bb, py_mass
    cdef const double *row
    if ep.base_kind == BASE_EXACT_C:
        n = ep.n_states
        memcpy(ep.work, ep.base_a, n * sizeof(double))
        q = 0.5 * (1.0 - exp(-2.0 * t_fwd))
        q1 = 1.0 - q
        for i in range(ep.d):
            # One coordinate pass, bit order 0..d-1, operand order
            # (1-q)*self + q*partner — identical to the vectorized
            # (1-q)*work + q*work[flip] pass on the reference backend.
            bit = 1 << i
            base = 0
            while base < n:
                for off in range(base, base + bit):
                    a = ep.work[off]
                    bb = ep.work[off + bit]
                    ep.work[off] = q1 * a + q * bb
                    ep.work[off + bit] = q1 * bb + q * a
                base += bit << 1
        py_mass = ep.work[y]
        for i in range(ep.d):
            ep.r[i] = ep.work[y ^ ((<unsigned long long> 1) << i)] / py_mass
    elif ep.base_kind == BASE_TABLE_C:
        b = _bucket_index(ep.base_a, ep.n_base_edges, t_fwd)
        row = ep.base_b + (b * ep.n_table_states + <long long> y) * ep.d
        for i in range(ep.d):
            ep.r[i] = row[i]
    else:  # BASE_CONST_C
        for i in range(ep.d):
            ep.r[i] = ep.base_a[i]


cdef int _event_step(EvalParams *ep, unsigned long long *y_io, double t_fwd,
                     double lam, long long k, double rate_tol, double u,
                     ErrInfo *err) noexcept nogil:
    # Mirrors _kernels_py._event_step.
    cdef unsigned long long y = y_io[0]
    cdef int i
    cdef double total, cap, scale, acc
    cdef const double *fac
    _evaluate(ep, y, t_fwd)
    if ep.has_perturb:
        fac = ep.perturb_factors + (
            _bucket_index(ep.perturb_edges, ep.n_perturb_edges, t_fwd)
            * ep.n_perturb_states + <long long> y) * ep.d
        for i in range(ep.d):
            ep.r[i] = ep.r[i] * fac[i]

    total = 0.0
    for i in range(ep.d):
        total += ep.r[i]
    if ep.clamp_mode != CLAMP_NONE_C:
        cap = _rate_cap(ep.d, t_fwd, ep.clamp_mode, ep.clamp_L)
        if total > cap:
            scale = cap / total
            for i in range(ep.d):
                ep.r[i] = ep.r[i] * scale
            total = 0.0
            for i in range(ep.d):
                total += ep.r[i]
    if total > lam * (1.0 + rate_tol):
        err.code = 1
        err.state = y
        err.time = t_fwd
        err.interval = k
        err.total = total
        err.lam = lam
        return 1

    acc = 0.0
    for i in range(ep.d):
        acc += ep.r[i] / lam
        if u < acc:
            y_io[0] = y ^ ((<unsigned long long> 1) << i)
            return 0
    return 0


cdef int _ensure_capacity(double **buf, long long *cap,
                          long long need) noexcept nogil:
    cdef long long newcap
    cdef double *p
    if need <= cap[0]:
        return 0
    newcap = cap[0] * 2
    if newcap < need:
        newcap = need
    p = <double *> realloc(buf[0], newcap * sizeof(double))
    if p == NULL:
        return 1
    buf[0] = p
    cap[0] = newcap
    return 0


cdef int _run_trajectory(bitgen_t *rng, EvalParams *ep, double T,
                         const double *knots, const double *lambdas,
                         long long n_int, double rate_tol,
                         cnp.int64_t *per_interval, double **taus_buf,
                         long long *taus_cap, unsigned long long *y_out,
                         cnp.int64_t *events_out, cnp.int64_t *flips_out,
                         ErrInfo *err) noexcept nogil:
    # Mirrors _kernels_py._run_trajectory_impl.
    cdef unsigned long long mask, y, y_prev
    cdef cnp.int64_t events = 0, flips = 0
    cdef long long k, m, idx
    cdef double t_lo, width, lam, t_fwd, u
    cdef double *taus
    mask = (((<unsigned long long> 1) << (ep.d - 1)) << 1) - 1
    y = rng.next_uint64(rng.state) & mask
    for k in range(n_int):
        t_lo = knots[k]
        width = knots[k + 1] - knots[k]
        lam = lambdas[k]
        m = random_poisson(rng, lam * width)
        if m == 0:
            continue
        if _ensure_capacity(taus_buf, taus_cap, m):
            err.code = 2
            return 2
        taus = taus_buf[0]
        for idx in range(m):
            taus[idx] = t_lo + width * random_standard_uniform(rng)
        qsort(taus, <size_t> m, sizeof(double), _cmp_double)
        per_interval[k] += m
        events += m
        for idx in range(m):
            t_fwd = T - taus[idx]
            u = random_standard_uniform(rng)
            y_prev = y
            if _event_step(ep, &y, t_fwd, lam, k, rate_tol, u, err):
                return 1
            if y != y_prev:
                flips += 1
    y_out[0] = y
    events_out[0] = events
    flips_out[0] = flips
    return 0


def sample_reverse_batch(d, T, knots, lambdas, payload, seed, idx_start,
                         idx_stop, rate_tol=1e-9):
    """Compiled batch runner; bit-compatible with the pure-Python version.

    Accepts the same arguments and returns the same
    (states, n_events, n_flips, per_interval_events) tuple as
    _kernels_py.sample_reverse_batch.
    """
    if "generic" in payload:
        raise ValueError("compiled backend requires a compiled score payload")

    cdef int d_c = int(d)
    if not 1 <= d_c <= 63:
        raise ValueError("d must be in [1, 63]")
    cdef double T_c = float(T)
    cdef double rtol = float(rate_tol)

    knots_arr = np.ascontiguousarray(knots, dtype=np.float64)
    lambdas_arr = np.ascontiguousarray(lambdas, dtype=np.float64)
    cdef const double[::1] knots_mv = knots_arr
    cdef const double[::1] lambdas_mv = lambdas_arr
    cdef long long n_int = lambdas_mv.shape[0]
    if n_int < 1 or knots_mv.shape[0] != n_int + 1:
        raise ValueError("knots must have one more entry than lambdas (>= 1 interval)")

    cdef long long start = int(idx_start), stop = int(idx_stop)
    cdef long long n_traj = stop - start
    if n_traj < 0:
        raise ValueError("idx_stop must be >= idx_start")

    states = np.empty(n_traj, dtype=np.int64)
    n_events = np.zeros(n_traj, dtype=np.int64)
    n_flips = np.zeros(n_traj, dtype=np.int64)
    per_interval = np.zeros(n_int, dtype=np.int64)
    cdef cnp.int64_t[::1] states_mv = states
    cdef cnp.int64_t[::1] n_events_mv = n_events
    cdef cnp.int64_t[::1] n_flips_mv = n_flips
    cdef cnp.int64_t[::1] per_interval_mv = per_interval

    # --- unpack the payload into C-visible form -----------------------------
    cdef EvalParams ep
    ep.d = d_c
    ep.base_kind = int(payload["base_kind"])
    ep.n_states = 0
    ep.base_b = NULL
    ep.n_base_edges = 0
    ep.n_table_states = 0
    ep.work = NULL
    ep.r = NULL

    base_a_arr = np.ascontiguousarray(payload["base_a"], dtype=np.float64)
    cdef const double[::1] base_a_mv = base_a_arr
    ep.base_a = &base_a_mv[0]

    base_b_arr = None
    cdef const double[:, :, ::1] base_b_mv
    if ep.base_kind == BASE_EXACT_C:
        if d_c > 30 or base_a_arr.shape[0] != (1 << d_c):
            raise ValueError("exact payload requires a 2**d probability table")
        ep.n_states = 1 << d_c
    elif ep.base_kind == BASE_TABLE_C:
        base_b_arr = np.ascontiguousarray(payload["base_b"], dtype=np.float64)
        if base_b_arr.ndim != 3 or base_b_arr.shape[0] != base_a_arr.shape[0] - 1:
            raise ValueError("table payload shape mismatch with bucket edges")
        if d_c > 30 or base_b_arr.shape[1] != (1 << d_c) or base_b_arr.shape[2] != d_c:
            raise ValueError("table payload must have shape (n_buckets, 2**d, d)")
        base_b_mv = base_b_arr
        ep.base_b = &base_b_mv[0, 0, 0]
        ep.n_base_edges = base_a_arr.shape[0]
        ep.n_table_states = base_b_arr.shape[1]
    elif ep.base_kind == BASE_CONST_C:
        if base_a_arr.shape[0] != d_c:
            raise ValueError("constant payload must have d values")
    else:
        raise ValueError(f"unknown base kind {ep.base_kind}")

    ep.has_perturb = 0
    ep.perturb_edges = NULL
    ep.perturb_factors = NULL
    ep.n_perturb_edges = 0
    ep.n_perturb_states = 0
    perturb_edges_arr = payload.get("perturb_edges")
    perturb_factors_arr = payload.get("perturb_factors")
    cdef const double[::1] pe_mv
    cdef const double[:, :, ::1] pf_mv
    if perturb_factors_arr is not None:
        perturb_edges_arr = np.ascontiguousarray(perturb_edges_arr, dtype=np.float64)
        perturb_factors_arr = np.ascontiguousarray(perturb_factors_arr, dtype=np.float64)
        if (perturb_factors_arr.ndim != 3
                or perturb_factors_arr.shape[0] != perturb_edges_arr.shape[0] - 1
                or d_c > 30
                or perturb_factors_arr.shape[1] != (1 << d_c)
                or perturb_factors_arr.shape[2] != d_c):
            raise ValueError("perturbation payload must have shape (n_buckets, 2**d, d)")
        pe_mv = perturb_edges_arr
        pf_mv = perturb_factors_arr
        ep.has_perturb = 1
        ep.perturb_edges = &pe_mv[0]
        ep.perturb_factors = &pf_mv[0, 0, 0]
        ep.n_perturb_edges = perturb_edges_arr.shape[0]
        ep.n_perturb_states = perturb_factors_arr.shape[1]

    ep.clamp_mode = int(payload.get("clamp_mode", CLAMP_NONE))
    ep.clamp_L = float(payload.get("clamp_L", 0.0))

    # --- scratch buffers -----------------------------------------------------
    cdef double *taus_buf = NULL
    cdef long long taus_cap = 256
    cdef bitgen_t *rng
    cdef ErrInfo err
    cdef unsigned long long y_fin = 0
    cdef cnp.int64_t ev_fin = 0, fl_fin = 0
    cdef long long j
    cdef int rc
    err.code = 0

    ep.r = <double *> malloc(d_c * sizeof(double))
    taus_buf = <double *> malloc(taus_cap * sizeof(double))
    if ep.base_kind == BASE_EXACT_C:
        ep.work = <double *> malloc(ep.n_states * sizeof(double))
    try:
        if ep.r == NULL or taus_buf == NULL or (
                ep.base_kind == BASE_EXACT_C and ep.work == NULL):
            raise MemoryError("failed to allocate sampler scratch buffers")

        philox = np.random.Philox
        for j in range(n_traj):
            bg = philox(key=np.array([seed, start + j], dtype=np.uint64))
            rng = <bitgen_t *> PyCapsule_GetPointer(bg.capsule, b"BitGenerator")
            with nogil:
                rc = _run_trajectory(rng, &ep, T_c, &knots_mv[0], &lambdas_mv[0],
                                     n_int, rtol, &per_interval_mv[0],
                                     &taus_buf, &taus_cap, &y_fin, &ev_fin,
                                     &fl_fin, &err)
            if rc == 1:
                raise RateBoundError(int(err.state), err.time, int(err.interval),
                                     err.total, err.lam)
            if rc == 2:
                raise MemoryError("failed to grow the event-time buffer")
            states_mv[j] = <cnp.int64_t> y_fin
            n_events_mv[j] = ev_fin
            n_flips_mv[j] = fl_fin
    finally:
        free(ep.r)
        free(ep.work)
        free(taus_buf)

    return states, n_events, n_flips, per_interval
