"""Hypercube state space, independent-flip dynamics, and distribution utilities.

States of {0,1}^d are encoded as d-bit integers: bit i of the word is
coordinate i. A dense distribution over the cube is a float64 vector of
length 2**d indexed by that encoding; every module in the package shares the
convention.

The forward dynamic flips each coordinate independently at rate 1, so the
chain mixes toward the uniform distribution. The transition kernel
factorizes over coordinates, which yields closed forms for the kernel, for
exact distribution evolution in O(d * 2**d) work, and for the envelope that
bounds neighbor probability ratios at a given time.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

# Dense vectors of 2**d entries stop being a desk-scale object past this.
MAX_DENSE_DIM = 24
# States are stored in int64 words, one bit per coordinate.
MAX_STATE_DIM = 63
# Tolerance on |sum(mass) - 1| accepted at construction.
MASS_ATOL = 1e-12

_DIST_MAGIC = b"CDDF"
_DIST_FORMAT_VERSION = 1


class ZeroMassError(ValueError):
    """A neighbor-ratio query hit a state of zero probability."""


class InfiniteRateError(ValueError):
    """A rate envelope was requested where it is unbounded (time zero)."""


class DimensionError(ValueError):
    """Dimension out of the supported range for the requested operation."""


@dataclass(frozen=True)
class HypercubeState:
    """A vertex of {0,1}^d held as a d-bit integer word."""

    bits: int
    dim: int

    def __post_init__(self):
        if not 1 <= self.dim <= MAX_STATE_DIM:
            raise DimensionError(f"dim must be in [1, {MAX_STATE_DIM}], got {self.dim}")
        if not 0 <= self.bits < (1 << self.dim):
            raise ValueError(f"bits {self.bits} out of range for dim {self.dim}")

    def coordinate(self, i: int) -> int:
        self._check_coord(i)
        return (self.bits >> i) & 1

    def flip(self, i: int) -> "HypercubeState":
        """Return the neighbor with coordinate i flipped."""
        self._check_coord(i)
        return HypercubeState(self.bits ^ (1 << i), self.dim)

    def hamming(self, other: "HypercubeState") -> int:
        if other.dim != self.dim:
            raise DimensionError("states live on different cubes")
        return (self.bits ^ other.bits).bit_count()

    def to_array(self) -> np.ndarray:
        return np.array([(self.bits >> i) & 1 for i in range(self.dim)], dtype=np.int8)

    def _check_coord(self, i: int) -> None:
        if not 0 <= i < self.dim:
            raise ValueError(f"coordinate {i} out of range for dim {self.dim}")

    def __repr__(self):
        return f"HypercubeState({self.bits:#0{self.dim + 2}b}, dim={self.dim})"


def _as_state_index(x, dim: int) -> int:
    """Accept a HypercubeState or a bare integer word; return the index."""
    if isinstance(x, HypercubeState):
        if x.dim != dim:
            raise DimensionError(f"state has dim {x.dim}, expected {dim}")
        return x.bits
    xi = int(x)
    if not 0 <= xi < (1 << dim):
        raise ValueError(f"state index {xi} out of range for dim {dim}")
    return xi


class DenseDistribution:
    """Probability vector over all 2**d states, indexed by the bit encoding.

    Mass entries must be nonnegative and sum to 1 within MASS_ATOL. The array
    is frozen after construction; normalization drift is never fixed
    silently — pass renormalize=True to rescale (and clip negative dust) once,
    explicitly, at construction.
    """

    __slots__ = ("dim", "_mass")

    def __init__(self, dim: int, mass, *, renormalize: bool = False):
        if not 1 <= dim <= MAX_DENSE_DIM:
            raise DimensionError(
                f"dense distributions support dim in [1, {MAX_DENSE_DIM}], got {dim}"
            )
        arr = np.array(mass, dtype=np.float64, copy=True).reshape(-1)
        if arr.shape[0] != (1 << dim):
            raise ValueError(f"mass has {arr.shape[0]} entries, expected {1 << dim}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("mass entries must be finite")
        if renormalize:
            if arr.min() < -1e-8:
                raise ValueError(f"mass entry {arr.min():g} is negative beyond tolerance")
            np.clip(arr, 0.0, None, out=arr)
            total = arr.sum()
            if total <= 0:
                raise ValueError("total mass is not positive")
            arr /= total
        if arr.min() < 0:
            raise ValueError(f"mass entry {arr.min():g} is negative")
        total = float(arr.sum())
        if abs(total - 1.0) > MASS_ATOL:
            raise ValueError(
                f"mass sums to {total!r}, off by {total - 1.0:.3e} (> {MASS_ATOL:g}); "
                "pass renormalize=True to rescale explicitly"
            )
        arr.flags.writeable = False
        object.__setattr__(self, "dim", dim)
        object.__setattr__(self, "_mass", arr)

    def __setattr__(self, name, value):
        raise AttributeError("DenseDistribution is immutable")

    @property
    def mass(self) -> np.ndarray:
        """Read-only probability vector of length 2**dim."""
        return self._mass

    @property
    def n_states(self) -> int:
        return 1 << self.dim

    def prob(self, x) -> float:
        return float(self._mass[_as_state_index(x, self.dim)])

    @classmethod
    def uniform(cls, dim: int) -> "DenseDistribution":
        n = 1 << dim
        return cls(dim, np.full(n, 1.0 / n))

    @classmethod
    def point_mass(cls, dim: int, x) -> "DenseDistribution":
        mass = np.zeros(1 << dim)
        mass[_as_state_index(x, dim)] = 1.0
        return cls(dim, mass)

    def sample_states(self, rng: np.random.Generator, size: int) -> np.ndarray:
        """Draw state indices i.i.d. from this distribution."""
        return rng.choice(self.n_states, size=size, p=self._mass).astype(np.int64)

    # -- serialization ------------------------------------------------------
    # Binary layout (little-endian): 4-byte magic "CDDF", uint8 format
    # version, uint8 dim, two zero pad bytes, then 2**dim float64 values.

    def to_bytes(self) -> bytes:
        header = _DIST_MAGIC + struct.pack("<BBxx", _DIST_FORMAT_VERSION, self.dim)
        return header + self._mass.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "DenseDistribution":
        if len(blob) < 8 or blob[:4] != _DIST_MAGIC:
            raise ValueError("not a dense-distribution blob (bad magic)")
        version, dim = struct.unpack("<BBxx", blob[4:8])
        if version != _DIST_FORMAT_VERSION:
            raise ValueError(f"unsupported format version {version}")
        n = 1 << dim
        body = blob[8:]
        if len(body) != 8 * n:
            raise ValueError(f"payload has {len(body)} bytes, expected {8 * n}")
        mass = np.frombuffer(body, dtype="<f8").astype(np.float64)
        return cls(dim, mass)

    def to_json_obj(self) -> dict:
        return {
            "format_version": _DIST_FORMAT_VERSION,
            "d": self.dim,
            "mass": self._mass.tolist(),
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "DenseDistribution":
        if obj.get("format_version") != _DIST_FORMAT_VERSION:
            raise ValueError(f"unsupported format version {obj.get('format_version')!r}")
        return cls(int(obj["d"]), obj["mass"])

    def to_json(self) -> str:
        return json.dumps(self.to_json_obj())

    @classmethod
    def from_json(cls, text: str) -> "DenseDistribution":
        return cls.from_json_obj(json.loads(text))

    def __repr__(self):
        return f"DenseDistribution(dim={self.dim})"


# ---------------------------------------------------------------------------
# Closed-form forward machinery
# ---------------------------------------------------------------------------


def flip_probability(elapsed: float) -> float:
    """Probability that one coordinate differs after running for `elapsed`.

    Each coordinate is an independent two-state chain with flip rate 1, so
    P(flip) = (1 - e^{-2 elapsed}) / 2, increasing from 0 to 1/2.
    """
    if elapsed < 0:
        raise ValueError("elapsed time must be nonnegative")
    return 0.5 * (1.0 - math.exp(-2.0 * elapsed))


def heat_kernel(w, t: float, *, dim: int | None = None) -> float:
    """Transition probability to a fixed offset word w after time t.

    By coordinate independence the kernel depends only on the Hamming weight
    of the offset: 2^{-d} (1+eta)^{d-|w|} (1-eta)^{|w|} with eta = e^{-2t}.
    """
    if isinstance(w, HypercubeState):
        d = w.dim
        word = w.bits
    else:
        if dim is None:
            raise ValueError("dim is required when w is a bare integer")
        d = dim
        word = _as_state_index(w, d)
    if t < 0:
        raise ValueError("time must be nonnegative")
    eta = math.exp(-2.0 * t)
    k = word.bit_count()
    return (0.5**d) * (1.0 + eta) ** (d - k) * (1.0 - eta) ** k


def evolve_exact(p0: DenseDistribution, t: float) -> DenseDistribution:
    """Evolve a dense distribution through the flip dynamic for time t.

    One mixing pass per coordinate against the flipped view:
    p <- (1-q) p + q p∘flip_i, with q = flip_probability(t). Passes run in
    bit order 0..d-1; the compiled sampling kernel repeats the same order and
    operand placement so both produce identical floats.
    """
    if t < 0:
        raise ValueError("time must be nonnegative")
    d = p0.dim
    q = flip_probability(t)
    if q == 0.0:
        return p0
    work = p0.mass.reshape([2] * d)  # axis j corresponds to bit d-1-j
    for axis in range(d - 1, -1, -1):  # bit 0 first, matching the kernel
        work = (1.0 - q) * work + q * np.flip(work, axis=axis)
    return DenseDistribution(d, work.reshape(-1))


def stationary_distribution(dim: int) -> DenseDistribution:
    """The flip dynamic's invariant law: uniform over the cube."""
    return DenseDistribution.uniform(dim)


def exact_score(p: DenseDistribution, x) -> np.ndarray:
    """Neighbor probability ratios p(x ^ e_i) / p(x) for all coordinates.

    Raises ZeroMassError at a zero-probability state, where the ratios are
    undefined.
    """
    xi = _as_state_index(x, p.dim)
    px = p.mass[xi]
    if px <= 0.0:
        raise ZeroMassError(f"state {xi} has zero mass; ratios undefined")
    out = np.empty(p.dim)
    for i in range(p.dim):
        out[i] = p.mass[xi ^ (1 << i)] / px
    return out


def exact_score_all(p: DenseDistribution) -> np.ndarray:
    """Matrix of neighbor ratios, shape (2**d, d); rows at zero mass are inf.

    Vectorized companion of exact_score for oracle builders and loss
    quadrature. Entries where both neighbor masses vanish are set to 0
    (no mass flows anywhere near such states).
    """
    d = p.dim
    mass = p.mass
    idx = np.arange(1 << d, dtype=np.int64)
    out = np.empty((1 << d, d))
    with np.errstate(divide="ignore", invalid="ignore"):
        for i in range(d):
            out[:, i] = mass[idx ^ (1 << i)] / mass
    out[np.isnan(out)] = 0.0
    return out


def score_envelope(s_forward: float, mode: str = "general", L: float | None = None) -> float:
    """Per-coordinate upper bound on neighbor ratios at forward time s.

    general: coth(s) = (1+e^{-2s})/(1-e^{-2s}); valid for any initial law,
    diverges as s -> 0 (InfiniteRateError at s = 0).
    bounded:  min(coth(s), L) when the initial law has neighbor ratios <= L;
    finite down to s = 0.
    """
    if s_forward < 0:
        raise ValueError("forward time must be nonnegative")
    if mode == "general":
        if s_forward == 0.0:
            raise InfiniteRateError("ratio envelope diverges at forward time zero")
        e = math.exp(-2.0 * s_forward)
        return (1.0 + e) / (1.0 - e)
    if mode == "bounded":
        if L is None or L < 1.0:
            raise ValueError("bounded mode requires a ratio bound L >= 1")
        if s_forward == 0.0:
            return float(L)
        e = math.exp(-2.0 * s_forward)
        return min((1.0 + e) / (1.0 - e), float(L))
    raise ValueError(f"unknown envelope mode {mode!r}")


def max_neighbor_ratio(p: DenseDistribution) -> float:
    """sup over edges (x, x^e_i) with p(x) > 0 of p(x^e_i)/p(x).

    Infinite if some zero-mass state neighbors a positive-mass state.
    """
    d = p.dim
    mass = p.mass
    idx = np.arange(1 << d, dtype=np.int64)
    worst = 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        for i in range(d):
            ratio = mass[idx ^ (1 << i)] / mass
            ratio = ratio[mass > 0]
            if ratio.size:
                worst = max(worst, float(ratio.max()))
    return worst


# ---------------------------------------------------------------------------
# Divergences
# ---------------------------------------------------------------------------


def kl(p: DenseDistribution, q: DenseDistribution) -> float:
    """KL(p || q) in nats; +inf if p puts mass where q does not."""
    if p.dim != q.dim:
        raise DimensionError("distributions live on different cubes")
    pm, qm = p.mass, q.mass
    support = pm > 0
    if np.any(qm[support] == 0):
        return math.inf
    return float(np.sum(pm[support] * np.log(pm[support] / qm[support])))


def tv(p: DenseDistribution, q: DenseDistribution) -> float:
    """Total variation distance, half the L1 gap; in [0, 1]."""
    if p.dim != q.dim:
        raise DimensionError("distributions live on different cubes")
    return 0.5 * float(np.abs(p.mass - q.mass).sum())


def entropy(p: DenseDistribution) -> float:
    """Shannon entropy in nats."""
    pm = p.mass[p.mass > 0]
    return -float(np.sum(pm * np.log(pm)))
