"""Backend selection for the reverse-sampling event loop.

The compiled kernel is preferred when it imported cleanly and the score
compiled to a flat payload; the pure-Python reference backend covers
everything else (and is always available for cross-checking). Selection is
an explicit function argument — no environment variables.
"""

from __future__ import annotations

from . import _kernels_py

try:
    from . import _kernels  # compiled extension; optional at runtime
except ImportError:  # pragma: no cover - depends on build environment
    _kernels = None

COMPILED_AVAILABLE = _kernels is not None


def available_backends() -> tuple[str, ...]:
    return ("compiled", "python") if COMPILED_AVAILABLE else ("python",)


def resolve_backend(name: str | None, payload: dict) -> str:
    """Map a requested backend name to a concrete one for this payload."""
    if name in (None, "auto"):
        if COMPILED_AVAILABLE and "generic" not in payload:
            return "compiled"
        return "python"
    if name == "compiled":
        if not COMPILED_AVAILABLE:
            raise RuntimeError("compiled backend requested but the extension is not built")
        if "generic" in payload:
            raise ValueError(
                "compiled backend supports exact/table/constant score payloads only; "
                "this score requires backend='python'"
            )
        return "compiled"
    if name == "python":
        return "python"
    raise ValueError(f"unknown backend {name!r}; expected auto, compiled, or python")


def run_batch(backend, d, T, knots, lambdas, payload, seed, idx_start, idx_stop, rate_tol):
    if backend == "compiled":
        return _kernels.sample_reverse_batch(
            d, T, knots, lambdas, payload, seed, idx_start, idx_stop, rate_tol
        )
    return _kernels_py.sample_reverse_batch(
        d, T, knots, lambdas, payload, seed, idx_start, idx_stop, rate_tol
    )
