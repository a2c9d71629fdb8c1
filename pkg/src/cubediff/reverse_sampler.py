"""Exact reverse-time sampling on the hypercube via uniformization.

The sampling dynamic starts from the uniform law and jumps x -> x ^ e_i at a
rate given by the score at the corresponding forward time. Simulation is
exact: on each cell of an adaptive time partition the jump rates are
dominated by a constant lambda_k, events arrive as a Poisson(lambda_k *
width) batch of sorted uniform times, and each event flips coordinate i with
probability ratio_i / lambda_k (staying put with the leftover probability).
No discretization of the dynamics is involved; the only approximation in the
pipeline is the score itself.

The partition keeps cell widths proportional to the remaining horizon, so
per-cell event budgets stay balanced while the rates blow up like 1/s near
the data end; total expected events scale like d * (T + log(1/delta)).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _backend, _kernels_py
from .hypercube import HypercubeState, DenseDistribution, flip_probability, score_envelope
from ._kernels_py import RateBoundError  # re-exported: raised by both backends
from .scores import ClampedScore, as_score_function, compile_score

__all__ = [
    "SamplerConfig",
    "TimePartition",
    "LambdaSchedule",
    "TrajectoryStats",
    "BatchResult",
    "RateBoundError",
    "build_partition",
    "build_lambda_schedule",
    "clamp_score",
    "sample_reverse",
    "sample_reverse_batch",
    "sample_forward_conditional",
    "sample_forward_conditional_batch",
    "sample_forward_path",
]

_PARTITION_ATOL = 1e-9


@dataclass(frozen=True)
class SamplerConfig:
    """Run parameters for the reverse sampler.

    delta is the early-stopping offset: trajectories run over reverse time
    [0, T - delta]. delta = 0 is allowed only in bounded mode, where the
    data's neighbor-ratio bound L keeps rates finite all the way down.
    """

    d: int
    T: float
    delta: float
    c: float = 1.0
    C: float = 2.0
    mode: str = "general"
    L: float | None = None
    seed: int = 0
    n_samples: int = 1

    def __post_init__(self):
        if not 1 <= self.d <= 63:
            raise ValueError(f"d must be in [1, 63], got {self.d}")
        if self.mode not in ("general", "bounded"):
            raise ValueError(f"mode must be 'general' or 'bounded', got {self.mode!r}")
        if self.delta < 0:
            raise ValueError("delta must be nonnegative")
        if self.T <= self.delta:
            raise ValueError(f"T={self.T} must exceed delta={self.delta}")
        if self.mode == "general" and self.delta == 0:
            raise ValueError("delta = 0 requires bounded mode (rates are unbounded otherwise)")
        if self.mode == "bounded" and (self.L is None or self.L < 1.0):
            raise ValueError("bounded mode requires a neighbor-ratio bound L >= 1")
        if self.c <= 0:
            raise ValueError("c must be positive")
        if self.C < 1:
            raise ValueError("C must be >= 1")
        if not 0 <= self.seed < (1 << 64):
            raise ValueError("seed must fit in an unsigned 64-bit word")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")


@dataclass(frozen=True)
class TimePartition:
    """Reverse-time grid 0 = t_0 < ... < t_N = T - delta.

    Cells satisfy t_{k+1} - t_k <= c * (T - t_{k+1}): each cell's width is at
    most c times the horizon remaining after it, which is what keeps the
    per-cell expected event count bounded as rates grow. In bounded mode with
    delta below 1/L the last cell is appended past that recurrence and is
    exempt from the inequality (its rate is capped by the data's ratio bound
    instead); `final_interval_exempt` records this.
    """

    times: np.ndarray
    c: float
    T: float
    delta: float
    final_interval_exempt: bool = False

    def __post_init__(self):
        times = np.ascontiguousarray(self.times, dtype=np.float64)
        times.flags.writeable = False
        object.__setattr__(self, "times", times)
        if times.ndim != 1 or times.size < 2:
            raise ValueError("partition needs at least two knots")
        if times[0] != 0.0:
            raise ValueError("partition must start at reverse time 0")
        widths = np.diff(times)
        if np.any(widths <= 0):
            raise ValueError("partition times must be strictly increasing")
        if abs(times[-1] - (self.T - self.delta)) > _PARTITION_ATOL:
            raise ValueError("partition must end at T - delta")
        remaining = self.T - times[1:]
        bound = self.c * remaining + _PARTITION_ATOL
        check = widths <= bound
        if self.final_interval_exempt:
            check = check[:-1]
        if not np.all(check):
            k = int(np.argmin(check))
            raise ValueError(
                f"cell {k} of width {widths[k]:.6g} violates the partition "
                f"inequality (limit {bound[k]:.6g})"
            )

    @property
    def n_intervals(self) -> int:
        return self.times.size - 1

    def widths(self) -> np.ndarray:
        return np.diff(self.times)


@dataclass(frozen=True)
class LambdaSchedule:
    """Per-cell uniformization rates and their time integral."""

    lambdas: np.ndarray
    total_mass: float

    def __post_init__(self):
        lambdas = np.ascontiguousarray(self.lambdas, dtype=np.float64)
        lambdas.flags.writeable = False
        object.__setattr__(self, "lambdas", lambdas)
        if lambdas.ndim != 1 or lambdas.size < 1:
            raise ValueError("schedule needs at least one rate")
        if np.any(lambdas <= 0) or not np.all(np.isfinite(lambdas)):
            raise ValueError("rates must be positive and finite")
        if not math.isfinite(self.total_mass) or self.total_mass <= 0:
            raise ValueError("total_mass must be positive and finite")


@dataclass(frozen=True)
class TrajectoryStats:
    """Event bookkeeping for one trajectory."""

    n_events: int
    n_flips: int
    per_interval_events: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.n_flips > self.n_events:
            raise ValueError("flips cannot exceed events")


@dataclass(frozen=True)
class BatchResult:
    """Outcome of a trajectory batch; arrays are ordered by trajectory index."""

    states: np.ndarray
    n_events: np.ndarray
    n_flips: np.ndarray
    per_interval_events: np.ndarray
    config: SamplerConfig
    partition: TimePartition
    schedule: LambdaSchedule
    backend: str

    @property
    def n_samples(self) -> int:
        return self.states.size

    def empirical(self) -> DenseDistribution:
        """Empirical law of the final states (requires dense-scale d)."""
        counts = np.bincount(self.states, minlength=1 << self.config.d)
        return DenseDistribution(self.config.d, counts / self.states.size)


def build_partition(config: SamplerConfig) -> TimePartition:
    """Geometric-in-remaining-horizon grid for the reverse run.

    With s := T - t the remaining horizon, knots follow s_{k+1} =
    max(s_floor, s_k / (1 + c)) down to s_floor, which is delta in general
    mode and max(delta, 1/L) in bounded mode; bounded runs whose delta lies
    below 1/L get one extra cell from s = 1/L down to s = delta (rates there
    are capped by the ratio bound, not by the horizon).
    """
    s_floor = config.delta
    exempt = False
    if config.mode == "bounded":
        s_floor = max(config.delta, 1.0 / config.L)
    s_values = [config.T]
    s = config.T
    while s > s_floor:
        s = max(s_floor, s / (1.0 + config.c))
        s_values.append(s)
    if config.mode == "bounded" and config.delta < s_floor:
        s_values.append(config.delta)
        exempt = True
    times = config.T - np.array(s_values, dtype=np.float64)
    times[0] = 0.0
    return TimePartition(
        times=times, c=config.c, T=config.T, delta=config.delta,
        final_interval_exempt=exempt,
    )


def build_lambda_schedule(partition: TimePartition, config: SamplerConfig) -> LambdaSchedule:
    """Dominating rate per cell: d times the ratio envelope at the cell's end.

    The envelope is increasing in reverse time, so its value at the right
    knot dominates the whole cell. The appended bounded-mode cell instead
    gets C * d * L, which dominates the capped rates there with the safety
    factor C.
    """
    times = partition.times
    lambdas = np.empty(partition.n_intervals)
    for k in range(partition.n_intervals):
        s_right = config.T - times[k + 1]
        if partition.final_interval_exempt and k == partition.n_intervals - 1:
            lambdas[k] = config.C * config.d * config.L
        else:
            lambdas[k] = config.d * score_envelope(s_right, config.mode, config.L)
    total_mass = float(np.sum(lambdas * partition.widths()))
    return LambdaSchedule(lambdas=lambdas, total_mass=total_mass)


def clamp_score(score_fn, config: SamplerConfig) -> ClampedScore:
    """Wrap a score so its per-state total respects the schedule's envelope.

    Exact scores pass through unchanged (the envelope is a true bound); for
    anything learned or perturbed this is what guarantees valid transition
    rows on every cell.
    """
    base = as_score_function(score_fn, config.d)
    return ClampedScore(base, mode=config.mode, L=config.L)


def _payload_for(score_fn, config: SamplerConfig) -> dict:
    score = as_score_function(score_fn, config.d)
    payload = compile_score(score)
    if payload is None:
        payload = {"d": config.d, "generic": score}
    return payload


def sample_reverse(config: SamplerConfig, score_fn, rng: np.random.Generator | None = None):
    """Run one trajectory; returns (HypercubeState, TrajectoryStats).

    With rng=None the trajectory uses the stream keyed by (config.seed, 0)
    and matches trajectory 0 of sample_reverse_batch bit for bit. Single
    trajectories always run on the pure-Python backend.
    """
    payload = _payload_for(score_fn, config)
    partition = build_partition(config)
    schedule = build_lambda_schedule(partition, config)
    if rng is None:
        rng = _kernels_py._trajectory_generator(config.seed, 0)
    y, events, flips, per_interval = _kernels_py.run_single_trajectory(
        config.d, config.T, partition.times, schedule.lambdas, payload, rng
    )
    stats = TrajectoryStats(
        n_events=int(events), n_flips=int(flips),
        per_interval_events=[int(v) for v in per_interval],
    )
    return HypercubeState(int(y), config.d), stats


def sample_reverse_batch(
    config: SamplerConfig,
    score_fn,
    *,
    n_samples: int | None = None,
    workers: int = 1,
    backend: str | None = None,
    rate_tol: float = 1e-9,
) -> BatchResult:
    """Run a trajectory batch; deterministic in (seed, config) alone.

    Trajectory i draws from a Philox stream keyed by (config.seed, i), so
    results are independent of worker count and chunking; workers > 1 only
    parallelizes.
    """
    n = config.n_samples if n_samples is None else int(n_samples)
    if n < 1:
        raise ValueError("n_samples must be positive")
    payload = _payload_for(score_fn, config)
    partition = build_partition(config)
    schedule = build_lambda_schedule(partition, config)
    chosen = _backend.resolve_backend(backend, payload)

    args = (config.d, config.T, partition.times, schedule.lambdas, payload, config.seed)
    if workers <= 1 or n < 256:
        states, events, flips, per_interval = _backend.run_batch(
            chosen, *args[:5], args[5], 0, n, rate_tol
        )
    else:
        n_chunks = min(4 * workers, max(1, n // 64))
        bounds = np.linspace(0, n, n_chunks + 1, dtype=np.int64)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(
                    _backend.run_batch, chosen, *args[:5], args[5],
                    int(lo), int(hi), rate_tol,
                )
                for lo, hi in zip(bounds[:-1], bounds[1:])
                if hi > lo
            ]
            parts = [f.result() for f in futures]
        states = np.concatenate([p[0] for p in parts])
        events = np.concatenate([p[1] for p in parts])
        flips = np.concatenate([p[2] for p in parts])
        per_interval = np.sum([p[3] for p in parts], axis=0)

    return BatchResult(
        states=states, n_events=events, n_flips=flips,
        per_interval_events=per_interval, config=config,
        partition=partition, schedule=schedule, backend=chosen,
    )


# ---------------------------------------------------------------------------
# Forward samplers (training-pair generation and ground-truth checks)
# ---------------------------------------------------------------------------


def sample_forward_conditional(x0: HypercubeState, t: float, rng: np.random.Generator) -> HypercubeState:
    """Draw X_t | X_0 = x0 under the flip dynamic (each coordinate independent)."""
    q = flip_probability(t)
    word = 0
    draws = rng.random(x0.dim)
    for i in range(x0.dim):
        if draws[i] < q:
            word |= 1 << i
    return HypercubeState(x0.bits ^ word, x0.dim)


def sample_forward_conditional_batch(x0s, ts, d: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorized X_t | X_0 over aligned arrays of start states and times."""
    x0s = np.asarray(x0s, dtype=np.int64)
    ts = np.asarray(ts, dtype=np.float64)
    if x0s.shape != ts.shape:
        raise ValueError("x0s and ts must align")
    q = 0.5 * (1.0 - np.exp(-2.0 * ts))
    flips = rng.random((x0s.size, d)) < q[:, None]
    words = flips @ (np.int64(1) << np.arange(d, dtype=np.int64))
    return x0s ^ words


def sample_forward_path(x0: HypercubeState, t_max: float, rng: np.random.Generator):
    """Simulate the forward CTMC itself, returning its event list.

    Events are (time, coordinate) pairs in increasing time: the total flip
    rate is d, and the flipped coordinate is uniform. Folding the events into
    x0 reproduces the trajectory.
    """
    if t_max < 0:
        raise ValueError("t_max must be nonnegative")
    events = []
    t = 0.0
    while True:
        t += rng.exponential(1.0 / x0.dim)
        if t > t_max:
            return events
        events.append((t, int(rng.integers(0, x0.dim))))
