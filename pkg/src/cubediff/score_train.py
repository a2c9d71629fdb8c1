"""Tabular score learning by stochastic minimization of denoising score entropy.

The score is parameterized as a table theta of shape (n_buckets, 2**d, d)
holding log-ratios: bucket b covers a geometric time cell of [delta, T],
theta[b, x, i] is the log of the estimated neighbor ratio at state x,
coordinate i. The training signal is the empirical denoising score entropy
over triples (t, X_0, X_t): for each coordinate the integrand is
exp(theta) - r * theta with r the single-coordinate conditional kernel
ratio (tanh(t) where X_t agrees with X_0, coth(t) where it differs), whose
gradient in theta is exp(theta) - r in closed form. The population minimum
sits at exp(theta) = E[r | bucket, state], i.e. at the true score up to
bucket discretization.

Training is minibatch SGD against that analytic gradient with a per-cell
Robbins-Monro step size (lr * batch visits / cumulative visits), applied in
ratio space: at lr=1 each visited cell tracks the running mean of its
kernel-ratio targets, which is exactly the cell's empirical minimizer.
Everything is deterministic given the config seed.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hypercube import DenseDistribution, evolve_exact, exact_score_all
from .reverse_sampler import sample_forward_conditional_batch
from .scores import PerturbedScore, ScoreFunction, TableScore, as_score_function, geometric_edges

__all__ = [
    "TrainConfig",
    "SGDParams",
    "ScoreTable",
    "TrainReport",
    "TrainingDiverged",
    "dse_objective",
    "dse_gradient",
    "train_tabular",
    "table_as_score_fn",
    "exact_score_table",
    "perturb_score",
    "clamp_effect_report",
]

_TABLE_MAGIC = b"CSTB"
_TABLE_VERSION = 1
_TABLE_HEADER = struct.Struct("<4sBBxxI")  # magic, version, d, pad, n_buckets


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Problem geometry for table training: dimension and time window."""

    d: int
    delta: float
    T: float
    n_buckets: int = 16
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.d <= 12:
            raise ValueError("training tables support d in [1, 12]")
        if not 0.0 < self.delta < self.T:
            raise ValueError("need 0 < delta < T (log-uniform times need delta > 0)")
        if self.n_buckets < 1:
            raise ValueError("n_buckets must be positive")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in a u64")


@dataclass(frozen=True)
class SGDParams:
    """Optimizer knobs; defaults tuned for desk-scale tables."""

    batch_size: int = 256
    lr: float = 1.0
    n_epochs: int = 4

    def __post_init__(self):
        if self.batch_size < 1 or self.n_epochs < 1:
            raise ValueError("batch_size and n_epochs must be positive")
        if not 0 < self.lr <= 1.0:
            raise ValueError("need 0 < lr <= 1")


@dataclass(frozen=True)
class ScoreTable:
    """Log-score table over geometric time buckets covering [delta, T]."""

    d: int
    edges: np.ndarray           # (n_buckets + 1,) strictly increasing
    theta: np.ndarray           # (n_buckets, 2**d, d) log-ratios

    def __post_init__(self):
        edges = np.ascontiguousarray(self.edges, dtype=np.float64)
        theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
            raise ValueError("edges must be strictly increasing with >= 2 entries")
        if theta.shape != (edges.size - 1, 1 << self.d, self.d):
            raise ValueError("theta must have shape (n_buckets, 2**d, d)")
        with np.errstate(over="ignore"):
            if not np.all(np.isfinite(np.exp(theta))):
                raise ValueError("exp(theta) must be finite")
        edges.flags.writeable = False
        theta.flags.writeable = False
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "theta", theta)

    @property
    def n_buckets(self) -> int:
        return self.edges.size - 1

    def metadata(self) -> dict:
        return {
            "format_version": _TABLE_VERSION,
            "d": self.d,
            "n_buckets": self.n_buckets,
            "edges": [float(e) for e in self.edges],
        }

    def to_bytes(self) -> bytes:
        """Versioned binary encoding: header, edges, then theta row-major."""
        blob = bytearray()
        blob += _TABLE_HEADER.pack(_TABLE_MAGIC, _TABLE_VERSION, self.d, self.n_buckets)
        blob += self.edges.astype("<f8").tobytes()
        blob += np.ascontiguousarray(self.theta, dtype="<f8").tobytes()
        return bytes(blob)

    def save(self, path) -> None:
        """Write the versioned binary table plus a JSON metadata sidecar."""
        path = Path(path)
        path.write_bytes(self.to_bytes())
        sidecar = path.with_name(path.name + ".json")
        sidecar.write_text(json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "ScoreTable":
        raw = Path(path).read_bytes()
        if len(raw) < _TABLE_HEADER.size:
            raise ValueError("truncated score-table file")
        magic, version, d, n_buckets = _TABLE_HEADER.unpack_from(raw)
        if magic != _TABLE_MAGIC:
            raise ValueError("not a score-table file (bad magic)")
        if version != _TABLE_VERSION:
            raise ValueError(f"unsupported score-table version {version}")
        off = _TABLE_HEADER.size
        n_edges = n_buckets + 1
        n_theta = n_buckets * (1 << d) * d
        if len(raw) != off + (n_edges + n_theta) * 8:
            raise ValueError("score-table payload size mismatch")
        edges = np.frombuffer(raw, dtype="<f8", count=n_edges, offset=off)
        off += n_edges * 8
        theta = np.frombuffer(raw, dtype="<f8", count=n_theta, offset=off)
        return cls(d=d, edges=edges.copy(),
                   theta=theta.reshape(n_buckets, 1 << d, d).copy())


@dataclass(frozen=True)
class TrainReport:
    """Training outcome: final validation DSE and the optimization trace.

    ``loss_trace`` holds one row per smoothing window: the mean training
    loss of the window, overall and per time bucket (NaN for buckets that
    received no samples in the window).
    """

    final_dse: float
    n_iterations: int
    lr_schedule: tuple
    seed: int
    loss_trace: tuple = field(default_factory=tuple)          # window means
    bucket_trace: tuple = field(default_factory=tuple)        # (window, bucket)
    n_pairs: int = 0

    def to_json_obj(self) -> dict:
        return {
            "final_dse": self.final_dse,
            "n_iterations": self.n_iterations,
            "lr_schedule": list(self.lr_schedule),
            "seed": self.seed,
            "loss_trace": list(self.loss_trace),
            "bucket_trace": [list(row) for row in self.bucket_trace],
            "n_pairs": self.n_pairs,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj(), indent=2, sort_keys=True)


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite; carries the report."""

    def __init__(self, message: str, report: TrainReport):
        super().__init__(message)
        self.report = report


# ---------------------------------------------------------------------------
# Empirical DSE objective and its analytic gradient
# ---------------------------------------------------------------------------


def _bucket_of_times(edges: np.ndarray, ts: np.ndarray) -> np.ndarray:
    """Left-closed bucket lookup, end cells clamped (matches TableScore)."""
    b = np.searchsorted(edges, ts, side="right") - 1
    return np.clip(b, 0, edges.size - 2)


def _kernel_ratios(ts: np.ndarray, x0s: np.ndarray, xts: np.ndarray,
                   d: int) -> np.ndarray:
    """Conditional one-flip kernel ratios r, shape (n, d).

    r[j, i] = tanh(t_j) where X_t agrees with X_0 at coordinate i, and
    coth(t_j) where it disagrees: the factored form of the heat-kernel
    quotient for the neighbor along coordinate i.
    """
    ts = np.asarray(ts, dtype=np.float64)
    w = (np.asarray(x0s, dtype=np.int64) ^ np.asarray(xts, dtype=np.int64))
    bits = (w[:, None] & (np.int64(1) << np.arange(d, dtype=np.int64))) != 0
    tanh_t = np.tanh(ts)
    with np.errstate(divide="ignore"):
        coth_t = 1.0 / tanh_t
    return np.where(bits, coth_t[:, None], tanh_t[:, None])


def dse_objective(theta: np.ndarray, edges: np.ndarray, ts, x0s, xts) -> float:
    """Empirical DSE of a log-score table on triples (t, X_0, X_t)."""
    d = theta.shape[2]
    b = _bucket_of_times(np.asarray(edges, dtype=np.float64), np.asarray(ts, dtype=np.float64))
    th = theta[b, np.asarray(xts, dtype=np.int64)]       # (n, d)
    r = _kernel_ratios(ts, x0s, xts, d)
    return float((np.exp(th) - r * th).sum(axis=1).mean())


def dse_gradient(theta: np.ndarray, edges: np.ndarray, ts, x0s, xts) -> np.ndarray:
    """Analytic gradient of dse_objective in theta (same shape as theta).

    Each triple contributes exp(theta) - r on its (bucket, state) row only;
    rows never touched by the batch have zero gradient.
    """
    d = theta.shape[2]
    xts = np.asarray(xts, dtype=np.int64)
    b = _bucket_of_times(np.asarray(edges, dtype=np.float64), np.asarray(ts, dtype=np.float64))
    r = _kernel_ratios(ts, x0s, xts, d)
    grad = np.zeros_like(theta)
    np.add.at(grad, (b, xts), np.exp(theta[b, xts]) - r)
    grad /= np.asarray(ts).shape[0]
    return grad


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _coerce_p0_sampler(p0_sampler):
    if isinstance(p0_sampler, DenseDistribution):
        dist = p0_sampler
        return lambda rng, size: dist.sample_states(rng, size)
    if callable(p0_sampler):
        return p0_sampler
    raise TypeError("p0_sampler must be a DenseDistribution or callable(rng, size)")


def _draw_pairs(p0_sampler, config: TrainConfig, n: int, rng: np.random.Generator):
    ts = np.exp(rng.uniform(math.log(config.delta), math.log(config.T), size=n))
    x0s = np.asarray(p0_sampler(rng, n), dtype=np.int64)
    if x0s.shape != (n,) or x0s.min() < 0 or x0s.max() >= (1 << config.d):
        raise ValueError("p0_sampler must return n valid state indices")
    xts = sample_forward_conditional_batch(x0s, ts, config.d, rng)
    return ts, x0s, xts


def train_tabular(p0_sampler, config: TrainConfig, n_pairs: int,
                  sgd_params: SGDParams | None = None) -> tuple[ScoreTable, TrainReport]:
    """Fit a log-score table by minibatch SGD on empirical DSE.

    Pairs are generated once up front — times log-uniform on [delta, T],
    X_0 from ``p0_sampler``, X_t from the conditional forward kernel — then
    consumed in shuffled epochs. Each step moves every visited cell against
    its analytic gradient exp(theta) - r with a per-cell step size annealed
    as lr * (batch visits) / (cumulative visits), the Robbins-Monro schedule
    that both drives rarely visited cells at full speed early and quenches
    the sampling noise of heavy-tailed ratio targets late. The update is
    applied in ratio space, where at lr=1 the iterate is exactly the cell's
    running mean of kernel ratios — the empirical minimizer of the per-cell
    DSE term. The trace windows are whole epochs: it records the full
    training-set objective at initialization and after each epoch, so at
    lr=1 its entries descend once and then stay at the empirical minimum
    (equal in exact arithmetic; evaluation noise is absent because the
    evaluation set is fixed). Raises TrainingDiverged if the loss leaves
    the finite range.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    params = sgd_params or SGDParams()
    sampler = _coerce_p0_sampler(p0_sampler)
    rng = np.random.default_rng(config.seed)
    edges = geometric_edges(config.delta, config.T, config.n_buckets)
    n_states = 1 << config.d
    theta = np.zeros((config.n_buckets, n_states, config.d))

    ts, x0s, xts = _draw_pairs(sampler, config, n_pairs, rng)
    buckets = _bucket_of_times(edges, ts)
    ratios = _kernel_ratios(ts, x0s, xts, config.d)

    def _trace_losses(theta_eval: np.ndarray) -> tuple[float, tuple]:
        th = theta_eval[buckets, xts]
        per_pair = (np.exp(th) - ratios * th).sum(axis=1)
        with np.errstate(invalid="ignore"):
            sums = np.zeros(config.n_buckets)
            counts = np.zeros(config.n_buckets, dtype=np.int64)
            np.add.at(sums, buckets, per_pair)
            np.add.at(counts, buckets, 1)
            per_bucket = sums / np.where(counts > 0, counts, np.nan)
        return float(per_pair.mean()), tuple(float(v) for v in per_bucket)

    lr_used: list[float] = []
    loss_trace: list[float] = []
    bucket_trace: list[tuple] = []

    def _partial_report(step: int) -> TrainReport:
        return TrainReport(
            final_dse=math.inf, n_iterations=step, lr_schedule=tuple(lr_used),
            seed=config.seed, loss_trace=tuple(loss_trace),
            bucket_trace=tuple(bucket_trace), n_pairs=n_pairs,
        )

    # Ratio-space iterate: at lr=1 the annealed update keeps each visited
    # cell at the running mean of its kernel-ratio targets, the empirical
    # minimizer of that cell's DSE term. Unvisited cells stay at ratio 1.
    s_table = np.exp(theta)
    r_sum = np.zeros_like(theta)
    hit_cnt = np.zeros(theta.shape[:2], dtype=np.int64)
    visits = np.zeros(theta.shape[:2], dtype=np.int64)
    step = 0
    total, per_bucket = _trace_losses(theta)
    loss_trace.append(total)
    bucket_trace.append(per_bucket)
    for _ in range(params.n_epochs):
        order = rng.permutation(n_pairs)
        for lo in range(0, n_pairs, params.batch_size):
            sel = order[lo:lo + params.batch_size]
            b, x, r = buckets[sel], xts[sel], ratios[sel]
            r_sum[:] = 0.0
            hit_cnt[:] = 0
            np.add.at(r_sum, (b, x), r)
            np.add.at(hit_cnt, (b, x), 1)
            hit = hit_cnt > 0
            k = hit_cnt[hit]
            visits[hit] += k
            eta = params.lr * k / visits[hit]
            batch_mean = r_sum[hit] / k[:, None]
            s_table[hit] += eta[:, None] * (batch_mean - s_table[hit])
            if not np.all(np.isfinite(s_table[hit])) or np.any(s_table[hit] <= 0.0):
                raise TrainingDiverged(
                    f"non-finite or non-positive scores at step {step}",
                    _partial_report(step))
            lr_used.append(float(eta.mean()))
            step += 1

        total, per_bucket = _trace_losses(np.log(s_table))
        if not math.isfinite(total):
            raise TrainingDiverged(
                f"non-finite epoch loss at step {step}", _partial_report(step))
        # Successive epoch-end evaluations of a converged iterate are the
        # same quantity up to float summation order; snap sub-eps drift so
        # the recorded trace reflects the mathematical equality.
        snap = 8.0 * np.finfo(np.float64).eps
        if abs(total - loss_trace[-1]) <= snap * max(1.0, abs(loss_trace[-1])):
            total = loss_trace[-1]
            per_bucket = bucket_trace[-1]
        loss_trace.append(total)
        bucket_trace.append(per_bucket)

    theta = np.log(s_table)
    table = ScoreTable(d=config.d, edges=edges, theta=theta)
    val_rng = np.random.default_rng((config.seed, 1))
    n_val = min(n_pairs, 20000)
    v_ts, v_x0, v_xt = _draw_pairs(sampler, config, n_val, val_rng)
    final = dse_objective(theta, edges, v_ts, v_x0, v_xt)
    if not math.isfinite(final):
        raise TrainingDiverged("non-finite validation loss", _partial_report(step))
    report = TrainReport(
        final_dse=final, n_iterations=step, lr_schedule=tuple(lr_used),
        seed=config.seed, loss_trace=tuple(loss_trace),
        bucket_trace=tuple(bucket_trace), n_pairs=n_pairs,
    )
    return table, report


def table_as_score_fn(table: ScoreTable) -> TableScore:
    """Piecewise-constant-in-time lookup score for a trained table.

    Queries outside [delta, T] (beyond float wobble) are rejected by the
    returned TableScore; compose with clamp_score before handing it to the
    reverse sampler.
    """
    return TableScore(table.edges, np.exp(table.theta))


def exact_score_table(p0: DenseDistribution, delta: float, T: float,
                      n_buckets: int = 16) -> ScoreTable:
    """Table holding the exact scores at the geometric midpoints of buckets.

    The reference point a trained table converges toward (up to bucket
    discretization), and the natural baseline for end-to-end comparisons.
    """
    edges = geometric_edges(delta, T, n_buckets)
    mids = np.sqrt(edges[:-1] * edges[1:])
    theta = np.empty((n_buckets, 1 << p0.dim, p0.dim))
    for b, t in enumerate(mids):
        ratios = exact_score_all(evolve_exact(p0, float(t)))
        with np.errstate(divide="ignore"):
            theta[b] = np.log(np.maximum(ratios, 1e-300))
    return ScoreTable(d=p0.dim, edges=edges, theta=theta)


# ---------------------------------------------------------------------------
# Perturbation and clamping diagnostics
# ---------------------------------------------------------------------------

_DEFAULT_PERTURB_LO = 1e-4
_DEFAULT_PERTURB_HI = 1e2


def perturb_score(base_score_fn, noise_level: float, rng, *, edges=None,
                  delta: float | None = None, T: float | None = None,
                  n_buckets: int = 16) -> ScoreFunction:
    """Multiply each ratio by a deterministic lognormal factor exp(sigma*z).

    z is hashed from (state, coordinate, time bucket, seed) — the seed is
    drawn once from ``rng`` (or taken directly when ``rng`` is an int) — so
    the result is a fixed function, identical across backends and repeated
    queries. Bucket edges default to the base table's own edges when it has
    them, to [delta, T] when given, else to a wide geometric cover.
    """
    base = as_score_function(base_score_fn)
    if isinstance(rng, (int, np.integer)):
        seed = int(rng)
    else:
        seed = int(rng.integers(0, 2**63, dtype=np.uint64))
    if edges is None:
        if delta is not None and T is not None:
            edges = geometric_edges(delta, T, n_buckets)
        elif isinstance(base, TableScore):
            edges = base.edges
        else:
            edges = geometric_edges(_DEFAULT_PERTURB_LO, _DEFAULT_PERTURB_HI, n_buckets)
    return PerturbedScore(base, noise_level, seed=seed, edges=edges)


def clamp_effect_report(base_fn, clamped_fn, samples) -> dict:
    """Empirical DSE before/after clamping plus the removed score mass.

    On triples (t, X_0, X_t): reports the DSE of the raw and clamped
    scores and the mean total ratio mass the clamp removed,
    E[sum_i (s_i - s~_i)]. Clamping a score toward the envelope the true
    score satisfies can raise DSE by at most (about) the removed mass; the
    report carries both sides of that comparison.
    """
    samples = np.asarray(samples, dtype=np.float64)
    ts, x0s, xts = samples[:, 0], samples[:, 1].astype(np.int64), samples[:, 2].astype(np.int64)
    base = as_score_function(base_fn)
    clamped = as_score_function(clamped_fn)
    d = base.d
    r = _kernel_ratios(ts, x0s, xts, d)
    n = ts.shape[0]
    s_raw = np.empty((n, d))
    s_cl = np.empty((n, d))
    for j in range(n):
        s_raw[j] = base.ratios(int(xts[j]), float(ts[j]))
        s_cl[j] = clamped.ratios(int(xts[j]), float(ts[j]))
    with np.errstate(divide="ignore", invalid="ignore"):
        dse_raw = float((s_raw - r * np.log(s_raw)).sum(axis=1).mean())
        dse_cl = float((s_cl - r * np.log(s_cl)).sum(axis=1).mean())
    removed = float(np.maximum(s_raw - s_cl, 0.0).sum(axis=1).mean())
    return {
        "dse_before": dse_raw,
        "dse_after": dse_cl,
        "removed_mass": removed,
        "dse_increase": dse_cl - dse_raw,
        "n_samples": int(n),
    }
