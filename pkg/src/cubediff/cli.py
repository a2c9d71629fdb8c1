"""Command-line front end: config parsing, experiment commands, verification.

Every command reads one YAML config file, applies the CLI overrides
(--seed, --out, --workers), and emits its artifacts plus a manifest into
the output directory. Outputs are deterministic functions of the resolved
config: a rerun with the same config and seed is byte-identical, worker
count included. Wall-clock timing lives in a separate ``timing.json`` so
it never perturbs the deterministic artifact set.

The only environment variable honored is ``CUBEDIFF_OUT`` (default output
directory when --out and the config's ``out`` are absent); all other
behavior comes from the config file and flags.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from . import __version__
from ._backend import COMPILED_AVAILABLE
from .hypercube import (
    DenseDistribution,
    entropy,
    evolve_exact,
    kl,
    max_neighbor_ratio,
    stationary_distribution,
    tv,
)
from .losses import measure_score_error, path_kl
from .oracle import expm, hypercube_generator, integrate_forward, reverse_generator
from .reverse_sampler import (
    SamplerConfig,
    clamp_score,
    sample_reverse_batch,
)
from .score_train import (
    SGDParams,
    ScoreTable,
    TrainConfig,
    perturb_score,
    table_as_score_fn,
    train_tabular,
)
from .scores import ExactScore
from . import verify as verify_mod

CSV_SCHEMA_VERSION = 1
_PRESETS = ("point-mass", "product-bernoulli", "random-dirichlet", "two-mode")
_SCORE_SOURCES = ("exact", "table-file", "perturbed")

_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "schema_version": {"type": "integer", "enum": [1]},
        "seed": {"type": "integer", "minimum": 0, "maximum": (1 << 64) - 1},
        "out": {"type": "string"},
        "workers": {"type": "integer", "minimum": 1},
        "sampler": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "d": {"type": "integer", "minimum": 1, "maximum": 63},
                "T": {"type": "number", "exclusiveMinimum": 0},
                "delta": {"type": "number", "minimum": 0},
                "c": {"type": "number", "exclusiveMinimum": 0},
                "C": {"type": "number", "minimum": 1},
                "mode": {"type": "string", "enum": ["general", "bounded"]},
                "L": {"type": ["number", "null"], "minimum": 1},
                "n_samples": {"type": "integer", "minimum": 1},
                "backend": {"type": "string",
                            "enum": ["auto", "compiled", "python"]},
            },
            "required": ["d", "T", "delta"],
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "preset": {"type": "string", "enum": list(_PRESETS)},
                "x0": {"type": "integer", "minimum": 0},
                "q": {"type": "number", "exclusiveMinimum": 0,
                      "exclusiveMaximum": 1},
                "alpha": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer", "minimum": 0},
                "mode_weight": {"type": "number", "exclusiveMinimum": 0,
                                "exclusiveMaximum": 0.5},
            },
            "required": ["preset"],
        },
        "score": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "source": {"type": "string", "enum": list(_SCORE_SOURCES)},
                "path": {"type": "string"},
                "noise_level": {"type": "number", "minimum": 0},
                "seed": {"type": "integer", "minimum": 0},
            },
            "required": ["source"],
        },
        "evolve": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "times": {
                    "type": "array", "minItems": 1,
                    "items": {"type": "number", "minimum": 0},
                },
                "write_marginals": {"type": "boolean"},
            },
            "required": ["times"],
        },
        "loss": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_quad": {"type": "integer", "minimum": 5},
                "n_grid": {"type": "integer", "minimum": 3},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_pairs": {"type": "integer", "minimum": 1},
                "n_buckets": {"type": "integer", "minimum": 1},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "n_epochs": {"type": "integer", "minimum": 1},
            },
        },
        "oracle": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "check": {"type": "boolean"},
                "ode_steps": {"type": "integer", "minimum": 10},
            },
        },
        "verify": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "criteria": {
                    "type": "array", "minItems": 1,
                    "items": {"type": "integer", "minimum": 1, "maximum": 12},
                },
            },
        },
    },
}


class ConfigError(ValueError):
    """Configuration file violates the schema or a command's requirements."""


def load_config(path: str | Path) -> dict:
    """Parse and schema-validate a YAML config file."""
    path = Path(path)
    try:
        raw = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        cfg = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML in {path}: {exc}") from exc
    if cfg is None:
        cfg = {}
    if not isinstance(cfg, dict):
        raise ConfigError(f"config root must be a mapping, got {type(cfg).__name__}")
    try:
        jsonschema.validate(cfg, _CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {path}: {exc.message} (at {loc})") from exc
    return cfg


def _require(cfg: dict, command: str, *blocks: str) -> None:
    missing = [b for b in blocks if b not in cfg]
    if missing:
        raise ConfigError(
            f"command '{command}' needs config block(s): {', '.join(missing)}")


def _resolve(cfg: dict, args) -> dict:
    """Overlay CLI flags; fill defaults; return the run's effective config."""
    out = dict(cfg)
    if args.seed is not None:
        out["seed"] = args.seed
    out.setdefault("seed", 0)
    if args.out is not None:
        out["out"] = args.out
    elif "out" not in out:
        out["out"] = os.environ.get("CUBEDIFF_OUT", "out")
    if args.workers is not None:
        out["workers"] = args.workers
    out.setdefault("workers", 1)
    out.setdefault("schema_version", 1)
    return out


def build_preset_distribution(data_cfg: dict, d: int,
                              fallback_seed: int) -> DenseDistribution:
    """Construct the configured initial data distribution."""
    preset = data_cfg["preset"]
    n = 1 << d
    if preset == "point-mass":
        x0 = data_cfg.get("x0", 0)
        if not 0 <= x0 < n:
            raise ConfigError(f"point-mass x0={x0} outside [0, 2^{d})")
        return DenseDistribution.point_mass(d, x0)
    if preset == "product-bernoulli":
        q = data_cfg.get("q", 0.3)
        states = np.arange(n, dtype=np.uint64)
        mass = np.ones(n)
        for i in range(d):
            bit = (states >> np.uint64(i)) & np.uint64(1)
            mass *= np.where(bit == 1, q, 1.0 - q)
        return DenseDistribution(d, mass)
    if preset == "random-dirichlet":
        alpha = data_cfg.get("alpha", 1.0)
        rng = np.random.default_rng(data_cfg.get("seed", fallback_seed))
        return DenseDistribution(d, rng.dirichlet(np.full(n, alpha)))
    if preset == "two-mode":
        w = data_cfg.get("mode_weight", 0.45)
        mass = np.full(n, (1.0 - 2.0 * w) / n)
        mass[0] += w
        mass[n - 1] += w
        return DenseDistribution(d, mass)
    raise ConfigError(f"unknown preset {preset!r}")


def _sampler_config(cfg: dict) -> SamplerConfig:
    s = cfg["sampler"]
    return SamplerConfig(
        d=s["d"], T=s["T"], delta=s["delta"], c=s.get("c", 1.0),
        C=s.get("C", 2.0), mode=s.get("mode", "general"), L=s.get("L"),
        seed=cfg["seed"], n_samples=s.get("n_samples", 1),
    )


def build_score_function(cfg: dict, p0: DenseDistribution,
                         sampler: SamplerConfig, *, for_sampling: bool):
    """Construct the configured score source.

    Learned and perturbed scores are composed with clamp_score when they
    feed the sampler — the envelope is the sampler's correctness
    precondition, and exact scores already satisfy it.
    """
    sc = cfg["score"]
    source = sc["source"]
    if source == "exact":
        return ExactScore(p0)
    if source == "table-file":
        if "path" not in sc:
            raise ConfigError("score.source=table-file requires score.path")
        table = ScoreTable.load(sc["path"])
        if table.d != sampler.d:
            raise ConfigError(
                f"score table dimension {table.d} != sampler d {sampler.d}")
        fn = table_as_score_fn(table)
        return clamp_score(fn, sampler) if for_sampling else fn
    if source == "perturbed":
        sigma = sc.get("noise_level", 0.1)
        lo = max(sampler.delta, 1e-4)
        fn = perturb_score(ExactScore(p0), sigma, sc.get("seed", cfg["seed"]),
                           delta=lo, T=sampler.T)
        return clamp_score(fn, sampler) if for_sampling else fn
    raise ConfigError(f"unknown score source {source!r}")


# ---------------------------------------------------------------------------
# Deterministic artifact emission
# ---------------------------------------------------------------------------


def _fmt(x) -> str:
    """Full round-trip precision for floats; plain text otherwise."""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _csv_bytes(header: list[str], rows) -> bytes:
    lines = [f"# csv_schema_version={CSV_SCHEMA_VERSION}", ",".join(header)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    return ("\n".join(lines) + "\n").encode()


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def _config_digest(resolved: dict) -> str:
    return hashlib.sha256(
        json.dumps(resolved, sort_keys=True, separators=(",", ":")).encode()
    ).hexdigest()


def _manifest(resolved: dict, command: str, extras: dict) -> dict:
    # The output directory and worker count steer execution, not the
    # experiment: results are deterministic without them, so they stay out
    # of the manifest and its hash.
    identity = {k: v for k, v in resolved.items() if k not in ("out", "workers")}
    return {
        "command": command,
        "config": identity,
        "config_sha256": _config_digest(identity),
        "seed": resolved["seed"],
        "versions": {
            "cubediff": __version__,
            "numpy": np.__version__,
            "python": ".".join(map(str, sys.version_info[:3])),
            "compiled_backend": COMPILED_AVAILABLE,
        },
        **extras,
    }


def _emit(out_dir: Path, artifacts: dict[str, bytes], wall_s: float) -> None:
    """Write all artifacts, removing partial output if any write fails."""
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    try:
        for rel, payload in artifacts.items():
            target = out_dir / rel
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_bytes(payload)
            written.append(target)
        (out_dir / "timing.json").write_bytes(
            _json_bytes({"wall_time_s": wall_s}))
    except OSError:
        for path in written:
            path.unlink(missing_ok=True)
        raise


# ---------------------------------------------------------------------------
# Commands: each returns {relative path: bytes}
# ---------------------------------------------------------------------------


def cmd_evolve(resolved: dict) -> dict[str, bytes]:
    _require(resolved, "evolve", "sampler", "data", "evolve")
    s = resolved["sampler"]
    d = s["d"]
    p0 = build_preset_distribution(resolved["data"], d, resolved["seed"])
    times = sorted(float(t) for t in resolved["evolve"]["times"])
    gamma = stationary_distribution(d)
    oracle_cfg = resolved.get("oracle", {})
    check = oracle_cfg.get("check", False)
    if check and d > 10:
        raise ConfigError("oracle.check for evolve supports d <= 10")

    sweep_rows = []
    marginal_rows = []
    oracle_max_err = 0.0
    for t in times:
        pt = evolve_exact(p0, t)
        sweep_rows.append((t, kl(pt, gamma), entropy(pt), max_neighbor_ratio(pt)))
        if resolved["evolve"].get("write_marginals", False):
            marginal_rows.extend((t, x, float(m)) for x, m in enumerate(pt.mass))
        if check:
            P = expm(hypercube_generator(d).rates, t)
            oracle_max_err = max(
                oracle_max_err, float(np.abs(pt.mass - p0.mass @ P).max()))

    artifacts = {
        "sweep.csv": _csv_bytes(
            ["time", "kl_to_stationary", "entropy", "max_neighbor_ratio"],
            sweep_rows),
    }
    if marginal_rows:
        artifacts["marginals.csv"] = _csv_bytes(
            ["time", "state", "mass"], marginal_rows)
    extras = {"times": times}
    if check:
        extras["oracle_max_abs_error"] = oracle_max_err
    artifacts["manifest.json"] = _json_bytes(
        _manifest(resolved, "evolve", extras))
    return artifacts


def cmd_sample(resolved: dict) -> dict[str, bytes]:
    _require(resolved, "sample", "sampler", "data", "score")
    sampler = _sampler_config(resolved)
    p0 = build_preset_distribution(resolved["data"], sampler.d, resolved["seed"])
    score_fn = build_score_function(resolved, p0, sampler, for_sampling=True)
    batch = sample_reverse_batch(
        sampler, score_fn, workers=resolved["workers"],
        backend=resolved["sampler"].get("backend"),
    )

    rows = zip(batch.states.tolist(), batch.n_events.tolist(),
               batch.n_flips.tolist())
    extras = {
        "backend": batch.backend,
        "schedule": {
            "knots": [float(t) for t in batch.partition.times],
            "lambdas": [float(v) for v in batch.schedule.lambdas],
            "total_mass": batch.schedule.total_mass,
        },
        "mean_events": float(batch.n_events.mean()),
    }
    oracle_cfg = resolved.get("oracle", {})
    if oracle_cfg.get("check", False):
        if sampler.d > 10:
            raise ConfigError("oracle.check for sample supports d <= 10")
        steps = oracle_cfg.get("ode_steps", 4000)
        q_of_t = reverse_generator(score_fn, sampler.T, sampler.d)
        marginal = integrate_forward(
            q_of_t, stationary_distribution(sampler.d).mass,
            0.0, sampler.T - sampler.delta, steps)
        marginal = np.clip(marginal, 0.0, None)
        oracle_dist = DenseDistribution(sampler.d, marginal, renormalize=True)
        extras["tv_to_oracle"] = tv(batch.empirical(), oracle_dist)

    return {
        "samples.csv": _csv_bytes(["state", "n_events", "n_flips"], rows),
        "manifest.json": _json_bytes(_manifest(resolved, "sample", extras)),
    }


def cmd_train(resolved: dict) -> dict[str, bytes]:
    _require(resolved, "train", "sampler", "data")
    s = resolved["sampler"]
    if s["delta"] <= 0:
        raise ConfigError("train requires sampler.delta > 0")
    tr = resolved.get("train", {})
    config = TrainConfig(
        d=s["d"], delta=s["delta"], T=s["T"],
        n_buckets=tr.get("n_buckets", 16), seed=resolved["seed"],
    )
    params = SGDParams(
        batch_size=tr.get("batch_size", 256), lr=tr.get("lr", 1.0),
        n_epochs=tr.get("n_epochs", 4),
    )
    p0 = build_preset_distribution(resolved["data"], s["d"], resolved["seed"])
    table, report = train_tabular(
        p0, config, n_pairs=tr.get("n_pairs", 100_000), sgd_params=params)

    payload = table.to_bytes()
    meta = table.metadata()
    return {
        "table.bin": payload,
        "table.bin.json": _json_bytes(meta),
        "train_report.json": report.to_json().encode() + b"\n",
        "manifest.json": _json_bytes(_manifest(resolved, "train", {
            "n_pairs": tr.get("n_pairs", 100_000),
            "final_dse": report.final_dse,
        })),
    }


def cmd_loss(resolved: dict) -> dict[str, bytes]:
    _require(resolved, "loss", "sampler", "data", "score")
    sampler = _sampler_config(resolved)
    if sampler.delta <= 0:
        raise ConfigError("loss requires sampler.delta > 0")
    p0 = build_preset_distribution(resolved["data"], sampler.d, resolved["seed"])
    score_fn = build_score_function(resolved, p0, sampler, for_sampling=False)
    loss_cfg = resolved.get("loss", {})
    n_quad = loss_cfg.get("n_quad", 129)
    n_grid = loss_cfg.get("n_grid", 65)
    gamma = stationary_distribution(sampler.d)

    report = path_kl(p0, score_fn, sampler.T, sampler.delta, gamma,
                     n_quad=n_quad)
    eps_sup = measure_score_error(p0, score_fn, sampler.delta, sampler.T,
                                  n_grid=n_grid, weighting="sup")
    eps_mean = measure_score_error(p0, score_fn, sampler.delta, sampler.T,
                                   n_grid=n_grid, weighting="mean")
    kl_T = kl(evolve_exact(p0, sampler.T), gamma)
    body = {
        "path_kl": json.loads(report.to_json()),
        "kl_pT_to_stationary": kl_T,
        "epsilon_sup": eps_sup,
        "epsilon_mean": eps_mean,
    }
    return {
        "loss_report.json": _json_bytes(body),
        "manifest.json": _json_bytes(_manifest(resolved, "loss", {
            "path_kl_value": report.value,
        })),
    }


def cmd_verify(resolved: dict, profile: str) -> tuple[dict[str, bytes], bool]:
    ids = resolved.get("verify", {}).get("criteria")
    results = verify_mod.run_all(profile, ids)
    all_passed = all(r.passed for r in results)
    width = max(len(r.name) for r in results)
    print(f"acceptance criteria — profile {profile}")
    for r in results:
        print(f"  {r.criterion_id:2d}  {r.status:4s}  {r.name:<{width}}  "
              f"{r.details}")
    n_pass = sum(r.passed for r in results)
    print(f"{n_pass}/{len(results)} criteria passed")
    body = {
        "profile": profile,
        "all_passed": all_passed,
        "results": [
            {
                "criterion_id": r.criterion_id,
                "name": r.name,
                "passed": r.passed,
                "details": r.details,
                "metrics": _jsonable(r.metrics),
                "wall_time_s": r.wall_time_s,
            }
            for r in results
        ],
    }
    return {
        "verify_report.json": _json_bytes(body),
        "manifest.json": _json_bytes(_manifest(resolved, "verify", {
            "profile": profile, "all_passed": all_passed,
        })),
    }, all_passed


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cubediff",
        description="Hypercube diffusion experiments: exact forward marginals,"
                    " score-entropy losses, exact reverse sampling, tabular"
                    " score training, and the acceptance-criteria suite.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, blurb in (
        ("evolve", "tabulate forward marginals and summary statistics"),
        ("sample", "draw reverse-sampler trajectories to samples.csv"),
        ("train", "fit a tabular score by DSE minimization"),
        ("loss", "evaluate path-KL and score-error measures"),
        ("verify", "run the acceptance-criteria suite"),
    ):
        p = sub.add_parser(name, help=blurb)
        p.add_argument("--config", required=(name != "verify"),
                       help="YAML experiment config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed (u64)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--workers", type=int, default=None,
                       help="trajectory worker threads")
        if name == "verify":
            p.add_argument("--profile", choices=list(verify_mod.PROFILES),
                           default="full", help="suite size (default: full)")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else {}
        resolved = _resolve(cfg, args)
        if args.seed is not None and not 0 <= args.seed < (1 << 64):
            raise ConfigError("--seed must fit in an unsigned 64-bit word")
        out_dir = Path(resolved["out"])
        start = time.perf_counter()
        ok = True
        if args.command == "evolve":
            artifacts = cmd_evolve(resolved)
        elif args.command == "sample":
            artifacts = cmd_sample(resolved)
        elif args.command == "train":
            artifacts = cmd_train(resolved)
        elif args.command == "loss":
            artifacts = cmd_loss(resolved)
        else:
            artifacts, ok = cmd_verify(resolved, args.profile)
        _emit(out_dir, artifacts, time.perf_counter() - start)
        print(f"wrote {', '.join(sorted(artifacts))} to {out_dir}")
        return 0 if ok else 1
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
