"""Tabular score training: objective, gradient, convergence, persistence."""

from __future__ import annotations

import json
import math

import numpy as np
import pytest

from cubediff import (
    DenseDistribution,
    SGDParams,
    ScoreTable,
    TableScore,
    TrainConfig,
    TrainingDiverged,
    TrainReport,
    clamp_effect_report,
    clamp_score,
    dse_gradient,
    dse_objective,
    exact_score_table,
    geometric_edges,
    perturb_score,
    sample_forward_conditional_batch,
    table_as_score_fn,
    train_tabular,
)
from cubediff import SamplerConfig
from cubediff.scores import PerturbedScore
from conftest import random_distribution


def replay_training_pairs(p0, config, n_pairs):
    """Regenerate the training triples exactly as train_tabular draws them."""
    gen = np.random.default_rng(config.seed)
    ts = np.exp(gen.uniform(math.log(config.delta), math.log(config.T),
                            size=n_pairs))
    x0s = np.asarray(p0.sample_states(gen, n_pairs), dtype=np.int64)
    xts = sample_forward_conditional_batch(x0s, ts, config.d, gen)
    return ts, x0s, xts


def kernel_ratios(ts, x0s, xts, d):
    disagree = ((np.asarray(x0s) ^ np.asarray(xts))[:, None]
                & (np.int64(1) << np.arange(d, dtype=np.int64))) != 0
    tanh_t = np.tanh(np.asarray(ts, dtype=float))
    return np.where(disagree, (1.0 / tanh_t)[:, None], tanh_t[:, None])


class TestValidation:
    @pytest.mark.parametrize("kwargs", [
        dict(d=0, delta=0.1, T=1.0),
        dict(d=13, delta=0.1, T=1.0),
        dict(d=2, delta=0.0, T=1.0),
        dict(d=2, delta=1.0, T=1.0),
        dict(d=2, delta=0.1, T=1.0, n_buckets=0),
        dict(d=2, delta=0.1, T=1.0, seed=-1),
    ])
    def test_train_config_rejects(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)

    @pytest.mark.parametrize("kwargs", [
        dict(batch_size=0),
        dict(n_epochs=0),
        dict(lr=0.0),
        dict(lr=1.5),
    ])
    def test_sgd_params_rejects(self, kwargs):
        with pytest.raises(ValueError):
            SGDParams(**kwargs)

    def test_train_tabular_rejects_bad_inputs(self):
        config = TrainConfig(d=2, delta=0.1, T=1.0)
        p0 = DenseDistribution.uniform(2)
        with pytest.raises(ValueError, match="n_pairs"):
            train_tabular(p0, config, 0)
        with pytest.raises(TypeError, match="p0_sampler"):
            train_tabular("nope", config, 10)
        with pytest.raises(ValueError, match="state indices"):
            train_tabular(lambda rng, size: np.full(size, 99), config, 10)

    def test_score_table_rejects_bad_shapes(self):
        edges = geometric_edges(0.1, 1.0, 2)
        with pytest.raises(ValueError, match="edges"):
            ScoreTable(d=2, edges=np.array([1.0, 0.5, 2.0]),
                       theta=np.zeros((2, 4, 2)))
        with pytest.raises(ValueError, match="shape"):
            ScoreTable(d=2, edges=edges, theta=np.zeros((2, 4, 3)))
        with pytest.raises(ValueError, match="finite"):
            ScoreTable(d=2, edges=edges, theta=np.full((2, 4, 2), 1e4))


class TestObjectiveAndGradient:
    def test_objective_hand_value(self):
        # One triple at t=0.7 with X_t disagreeing from X_0 on the single
        # coordinate, table pinned at log 2: exp(theta) - r*theta with
        # r = coth(t).
        edges = geometric_edges(0.1, 1.0, 2)
        theta = np.full((2, 2, 1), math.log(2.0))
        got = dse_objective(theta, edges, [0.7], [0], [1])
        want = 2.0 - (1.0 / math.tanh(0.7)) * math.log(2.0)
        assert got == pytest.approx(want, abs=1e-12)

    def test_objective_averages_over_triples(self):
        edges = geometric_edges(0.1, 1.0, 2)
        theta = np.zeros((2, 4, 2))
        gen = np.random.default_rng(0)
        ts = gen.uniform(0.1, 1.0, 50)
        x0s = gen.integers(0, 4, 50)
        xts = gen.integers(0, 4, 50)
        vals = [dse_objective(theta, edges, [t], [a], [b])
                for t, a, b in zip(ts, x0s, xts)]
        assert dse_objective(theta, edges, ts, x0s, xts) == pytest.approx(
            np.mean(vals), rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        d, n_buckets = 2, 3
        edges = geometric_edges(0.2, 2.0, n_buckets)
        gen = np.random.default_rng(1)
        theta = gen.normal(0.0, 0.3, size=(n_buckets, 1 << d, d))
        ts = gen.uniform(0.2, 2.0, 30)
        x0s = gen.integers(0, 1 << d, 30)
        xts = gen.integers(0, 1 << d, 30)
        grad = dse_gradient(theta, edges, ts, x0s, xts)
        h = 1e-6
        cells = [tuple(gen.integers(0, s) for s in theta.shape)
                 for _ in range(10)]
        for cell in cells:
            up, down = theta.copy(), theta.copy()
            up[cell] += h
            down[cell] -= h
            fd = (dse_objective(up, edges, ts, x0s, xts)
                  - dse_objective(down, edges, ts, x0s, xts)) / (2 * h)
            assert grad[cell] == pytest.approx(fd, abs=1e-6)

    def test_gradient_zero_on_untouched_cells(self):
        edges = geometric_edges(0.1, 1.0, 4)
        theta = np.zeros((4, 4, 2))
        grad = dse_gradient(theta, edges, [0.15], [0], [1])
        touched = np.abs(grad) > 0
        assert touched[0, 1].any()
        assert np.count_nonzero(touched.any(axis=2)) == 1


class TestTraining:
    UNIFORM_CONFIG = TrainConfig(d=3, delta=0.5, T=3.0, seed=4)

    def test_uniform_data_learns_unit_scores(self):
        # The exact score of the uniform law is 1 at every (t, x, i); with
        # 1e5 pairs every table cell lands within 0.1 (unvisited cells stay
        # at exactly 1).
        p0 = DenseDistribution.uniform(3)
        table, report = train_tabular(p0, self.UNIFORM_CONFIG, 100_000)
        ratios = np.exp(table.theta)
        assert np.max(np.abs(ratios - 1.0)) < 0.1
        assert report.n_pairs == 100_000
        assert math.isfinite(report.final_dse)

    def test_loss_trace_descends_once_then_holds(self):
        p0 = DenseDistribution.uniform(3)
        params = SGDParams(n_epochs=4)
        _, report = train_tabular(p0, self.UNIFORM_CONFIG, 20_000, params)
        trace = report.loss_trace
        assert len(trace) == params.n_epochs + 1
        assert all(b <= a for a, b in zip(trace, trace[1:]))
        assert trace[-1] < trace[0]
        assert report.n_iterations == len(report.lr_schedule)

    def test_iterate_is_the_per_cell_empirical_minimizer(self):
        # At lr=1 the annealed ratio-space update is algebraically the
        # running mean of each visited cell's kernel-ratio targets, so the
        # final table must reproduce the per-cell sample means.
        config = TrainConfig(d=2, delta=0.3, T=2.5, seed=11)
        p0 = DenseDistribution.point_mass(2, 0)
        n_pairs = 30_000
        table, _ = train_tabular(p0, config, n_pairs)
        ts, x0s, xts = replay_training_pairs(p0, config, n_pairs)
        buckets = np.clip(
            np.searchsorted(table.edges, ts, side="right") - 1,
            0, table.n_buckets - 1)
        ratios = kernel_ratios(ts, x0s, xts, config.d)
        got = np.exp(table.theta)
        for b in range(table.n_buckets):
            for x in range(1 << config.d):
                sel = (buckets == b) & (xts == x)
                if not sel.any():
                    np.testing.assert_array_equal(got[b, x], 1.0)
                else:
                    np.testing.assert_allclose(
                        got[b, x], ratios[sel].mean(axis=0), atol=1e-10)

    def test_point_mass_table_tracks_exact_scores(self):
        # Heavily visited cells should sit near the exact score at the
        # bucket midpoint; the gap is bucket discretization plus sampling
        # noise, so the tolerance is loose.
        config = TrainConfig(d=2, delta=0.3, T=2.5, seed=11)
        p0 = DenseDistribution.point_mass(2, 0)
        n_pairs = 30_000
        table, _ = train_tabular(p0, config, n_pairs)
        reference = exact_score_table(p0, 0.3, 2.5, table.n_buckets)
        ts, _, xts = replay_training_pairs(p0, config, n_pairs)
        buckets = np.clip(
            np.searchsorted(table.edges, ts, side="right") - 1,
            0, table.n_buckets - 1)
        got, want = np.exp(table.theta), np.exp(reference.theta)
        checked = 0
        for b in range(table.n_buckets):
            for x in range(1 << config.d):
                if np.count_nonzero((buckets == b) & (xts == x)) >= 500:
                    np.testing.assert_allclose(got[b, x], want[b, x],
                                               rtol=0.3)
                    checked += 1
        assert checked > 10

    def test_training_is_deterministic(self):
        p0 = random_distribution(30, 3)
        table_a, report_a = train_tabular(p0, self.UNIFORM_CONFIG, 5000)
        table_b, report_b = train_tabular(p0, self.UNIFORM_CONFIG, 5000)
        assert table_a.to_bytes() == table_b.to_bytes()
        assert report_a.final_dse == report_b.final_dse
        assert report_a.loss_trace == report_b.loss_trace

    def test_seed_changes_the_table(self):
        p0 = random_distribution(30, 3)
        table_a, _ = train_tabular(
            p0, TrainConfig(d=3, delta=0.5, T=3.0, seed=1), 5000)
        table_b, _ = train_tabular(
            p0, TrainConfig(d=3, delta=0.5, T=3.0, seed=2), 5000)
        assert table_a.to_bytes() != table_b.to_bytes()

    def test_callable_sampler_supported(self):
        config = TrainConfig(d=2, delta=0.3, T=2.0, seed=0)
        table, _ = train_tabular(
            lambda rng, size: rng.integers(0, 4, size), config, 2000)
        assert table.n_buckets == config.n_buckets

    def test_report_round_trips_through_json(self):
        p0 = DenseDistribution.uniform(2)
        _, report = train_tabular(
            p0, TrainConfig(d=2, delta=0.3, T=2.0, seed=0), 1000)
        obj = json.loads(report.to_json())
        assert obj["n_pairs"] == 1000
        assert len(obj["loss_trace"]) == len(report.loss_trace)
        assert obj["final_dse"] == report.final_dse

    def test_training_diverged_carries_report(self):
        report = TrainReport(final_dse=math.inf, n_iterations=3,
                             lr_schedule=(1.0,), seed=0)
        err = TrainingDiverged("boom", report)
        assert err.report is report
        assert "boom" in str(err)


class TestScoreTablePersistence:
    def make_table(self):
        gen = np.random.default_rng(5)
        return ScoreTable(
            d=3, edges=geometric_edges(0.1, 2.0, 4),
            theta=gen.normal(0.0, 0.4, size=(4, 8, 3)))

    def test_round_trip(self, tmp_path):
        table = self.make_table()
        path = tmp_path / "table.bin"
        table.save(path)
        loaded = ScoreTable.load(path)
        assert loaded.d == table.d
        np.testing.assert_array_equal(loaded.edges, table.edges)
        np.testing.assert_array_equal(loaded.theta, table.theta)

    def test_sidecar_metadata(self, tmp_path):
        table = self.make_table()
        path = tmp_path / "table.bin"
        table.save(path)
        sidecar = json.loads((tmp_path / "table.bin.json").read_text())
        assert sidecar == json.loads(json.dumps(table.metadata()))

    def test_corruption_detected(self, tmp_path):
        table = self.make_table()
        blob = table.to_bytes()
        path = tmp_path / "table.bin"

        path.write_bytes(b"XXXX" + blob[4:])
        with pytest.raises(ValueError, match="magic"):
            ScoreTable.load(path)

        path.write_bytes(blob[:4] + bytes([99]) + blob[5:])
        with pytest.raises(ValueError, match="version"):
            ScoreTable.load(path)

        path.write_bytes(blob[:-8])
        with pytest.raises(ValueError, match="size mismatch"):
            ScoreTable.load(path)

        path.write_bytes(blob[:4])
        with pytest.raises(ValueError, match="truncated"):
            ScoreTable.load(path)


class TestExactTableAndLookup:
    def test_exact_table_holds_midpoint_scores(self):
        from cubediff import evolve_exact, exact_score_all
        p0 = random_distribution(31, 3)
        table = exact_score_table(p0, 0.1, 2.0, n_buckets=8)
        mids = np.sqrt(table.edges[:-1] * table.edges[1:])
        for b, t in enumerate(mids):
            want = exact_score_all(evolve_exact(p0, float(t)))
            np.testing.assert_allclose(np.exp(table.theta[b]), want,
                                       rtol=1e-12)

    def test_table_as_score_fn_lookup(self):
        table = self.make_trained_like_table()
        fn = table_as_score_fn(table)
        assert isinstance(fn, TableScore)
        mid = math.sqrt(table.edges[2] * table.edges[3])
        np.testing.assert_allclose(fn.ratios(1, mid),
                                   np.exp(table.theta[2, 1]), rtol=1e-15)
        with pytest.raises(ValueError, match="outside table domain"):
            fn.ratios(0, table.edges[0] * 0.5)

    def make_trained_like_table(self):
        gen = np.random.default_rng(6)
        return ScoreTable(d=2, edges=geometric_edges(0.2, 2.0, 5),
                          theta=gen.normal(0.0, 0.2, size=(5, 4, 2)))


class TestPerturbScore:
    def test_zero_noise_is_identity(self):
        base = table_as_score_fn(exact_score_table(
            random_distribution(32, 2), 0.1, 1.0, 4))
        fn = perturb_score(base, 0.0, 3)
        for t in (0.15, 0.5):
            np.testing.assert_array_equal(fn.ratios_all(t),
                                          base.ratios_all(t))

    def test_integer_seed_is_direct(self):
        base = table_as_score_fn(exact_score_table(
            random_distribution(32, 2), 0.1, 1.0, 4))
        a = perturb_score(base, 0.3, 7)
        b = perturb_score(base, 0.3, 7)
        np.testing.assert_array_equal(a.factors, b.factors)

    def test_generator_seed_is_reproducible(self):
        base = table_as_score_fn(exact_score_table(
            random_distribution(32, 2), 0.1, 1.0, 4))
        a = perturb_score(base, 0.3, np.random.default_rng(5))
        b = perturb_score(base, 0.3, np.random.default_rng(5))
        np.testing.assert_array_equal(a.factors, b.factors)

    def test_edges_default_to_base_table(self):
        base = table_as_score_fn(exact_score_table(
            random_distribution(32, 2), 0.1, 1.0, 4))
        fn = perturb_score(base, 0.2, 1)
        assert isinstance(fn, PerturbedScore)
        np.testing.assert_array_equal(fn.edges, base.edges)

    def test_edges_from_window(self):
        from cubediff import ExactScore
        fn = perturb_score(ExactScore(random_distribution(32, 2)), 0.2, 1,
                           delta=0.05, T=2.0, n_buckets=8)
        np.testing.assert_allclose(
            fn.edges, geometric_edges(0.05, 2.0, 8), rtol=1e-12)


class TestClampEffectReport:
    def forward_samples(self, p0, delta, T, n, seed):
        gen = np.random.default_rng(seed)
        ts = np.exp(gen.uniform(math.log(delta), math.log(T), n))
        x0s = p0.sample_states(gen, n)
        xts = sample_forward_conditional_batch(x0s, ts, p0.dim, gen)
        return np.column_stack([ts, x0s, xts])

    def test_exact_score_clamp_is_a_no_op(self):
        from cubediff import ExactScore
        p0 = random_distribution(33, 3)
        base = ExactScore(p0)
        clamped = clamp_score(base, SamplerConfig(d=3, T=2.0, delta=0.1))
        samples = self.forward_samples(p0, 0.1, 2.0, 500, seed=1)
        rep = clamp_effect_report(base, clamped, samples)
        assert rep["removed_mass"] == 0.0
        assert rep["dse_increase"] == 0.0
        assert rep["dse_before"] == rep["dse_after"]
        assert rep["n_samples"] == 500

    def test_trained_table_clamp_increase_below_removed_mass(self):
        # For a trained table (mild envelope violations only) the DSE paid
        # for clamping is dominated by the score mass the clamp removed.
        config = TrainConfig(d=3, delta=0.5, T=3.0, seed=9)
        p0 = DenseDistribution.uniform(3)
        table, _ = train_tabular(p0, config, 4000)
        base = table_as_score_fn(table)
        clamped = clamp_score(
            base, SamplerConfig(d=3, T=3.0, delta=0.5))
        samples = self.forward_samples(p0, 0.5, 3.0, 2000, seed=2)
        rep = clamp_effect_report(base, clamped, samples)
        assert rep["removed_mass"] >= 0.0
        assert rep["dse_increase"] <= rep["removed_mass"] + 1e-12
