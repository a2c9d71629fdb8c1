"""Score-function types: lookup, perturbation, clamping, payload compilation."""

from __future__ import annotations

import numpy as np
import pytest

from cubediff import (
    CallableScore,
    ClampedScore,
    ConstantScore,
    DenseDistribution,
    ExactScore,
    PerturbedScore,
    TableScore,
    as_score_function,
    evolve_exact,
    exact_score_all,
    geometric_edges,
    score_envelope,
)
from cubediff.scores import (
    BASE_CONST,
    BASE_EXACT,
    BASE_TABLE,
    CLAMP_BOUNDED,
    CLAMP_GENERAL,
    CLAMP_NONE,
    compile_score,
)
from conftest import random_distribution


def small_table(d=2, n_buckets=4, lo=0.1, hi=2.0, seed=0):
    edges = geometric_edges(lo, hi, n_buckets)
    gen = np.random.default_rng(seed)
    ratios = gen.uniform(0.2, 1.5, size=(n_buckets, 1 << d, d))
    return TableScore(edges, ratios)


class TestGeometricEdges:
    def test_pins_endpoints_exactly(self):
        edges = geometric_edges(0.05, 6.0, 16)
        assert edges[0] == 0.05 and edges[-1] == 6.0
        assert edges.size == 17
        assert np.all(np.diff(edges) > 0)
        ratios = edges[1:] / edges[:-1]
        np.testing.assert_allclose(ratios, ratios[0], rtol=1e-9)

    def test_validation(self):
        with pytest.raises(ValueError):
            geometric_edges(0.0, 1.0, 4)
        with pytest.raises(ValueError):
            geometric_edges(2.0, 1.0, 4)
        with pytest.raises(ValueError):
            geometric_edges(0.1, 1.0, 0)


class TestExactScoreFunction:
    def test_matches_evolved_ratios(self):
        p0 = random_distribution(1, 3)
        fn = ExactScore(p0)
        for t in (0.05, 0.8):
            want = exact_score_all(evolve_exact(p0, t))
            np.testing.assert_array_equal(fn.ratios_all(t), want)
            np.testing.assert_array_equal(fn.ratios(5, t), want[5])
            np.testing.assert_array_equal(fn(5, t), want[5])


class TestConstantScore:
    def test_broadcast_and_values(self):
        fn = ConstantScore(3, 1.0)
        np.testing.assert_array_equal(fn.ratios(0, 0.5), np.ones(3))
        fn2 = ConstantScore(2, [0.5, 2.0])
        np.testing.assert_array_equal(fn2.ratios_all(1.0),
                                      np.tile([0.5, 2.0], (4, 1)))

    def test_validation(self):
        with pytest.raises(ValueError):
            ConstantScore(2, -1.0)
        with pytest.raises(ValueError):
            ConstantScore(2, np.inf)


class TestTableScore:
    def test_left_closed_buckets(self):
        table = small_table()
        edges = table.edges
        # A query exactly on an interior edge belongs to the cell it opens.
        assert table.bucket_of(float(edges[1])) == 1
        assert table.bucket_of(float(edges[1]) - 1e-12) == 0
        assert table.bucket_of(float(edges[0])) == 0
        assert table.bucket_of(float(edges[-1])) == table.n_buckets - 1

    def test_rejects_queries_outside_domain(self):
        table = small_table(lo=0.1, hi=2.0)
        with pytest.raises(ValueError, match="outside table domain"):
            table.ratios(0, 0.01)
        with pytest.raises(ValueError, match="outside table domain"):
            table.ratios(0, 2.5)
        # Floating-point wobble just past the ends clamps to the end cells.
        assert table.bucket_of(0.1 - 1e-12) == 0
        assert table.bucket_of(2.0 + 1e-12) == table.n_buckets - 1

    def test_lookup_returns_copies(self):
        table = small_table()
        row = table.ratios(1, 0.5)
        row[:] = -1.0
        assert table.ratios(1, 0.5).min() > 0

    def test_validation(self):
        edges = geometric_edges(0.1, 1.0, 2)
        with pytest.raises(ValueError):
            TableScore(edges, np.ones((2, 4, 3)))  # 2**d mismatch
        with pytest.raises(ValueError):
            TableScore(edges, -np.ones((2, 4, 2)))
        with pytest.raises(ValueError):
            TableScore([1.0, 1.0], np.ones((1, 4, 2)))


class TestPerturbedScore:
    def test_zero_noise_is_identity(self):
        base = ExactScore(random_distribution(2, 3))
        fn = PerturbedScore(base, 0.0, seed=9, edges=geometric_edges(0.1, 2, 4))
        for t in (0.1, 0.7, 2.0):
            np.testing.assert_array_equal(fn.ratios_all(t), base.ratios_all(t))

    def test_fixed_function_of_seed(self):
        base = ConstantScore(3, 1.0)
        edges = geometric_edges(0.1, 2, 4)
        a = PerturbedScore(base, 0.4, seed=7, edges=edges)
        b = PerturbedScore(base, 0.4, seed=7, edges=edges)
        c = PerturbedScore(base, 0.4, seed=8, edges=edges)
        np.testing.assert_array_equal(a.factors, b.factors)
        assert not np.array_equal(a.factors, c.factors)
        # Repeated queries see the identical factor table.
        np.testing.assert_array_equal(a.ratios(3, 0.5), a.ratios(3, 0.5))

    def test_factors_vary_per_cell_with_unit_median(self):
        fn = PerturbedScore(ConstantScore(3, 1.0), 0.3, seed=1,
                            edges=geometric_edges(0.05, 4, 8))
        flat = fn.factors.reshape(-1)
        assert flat.std() > 0.1
        assert np.abs(np.log(flat).mean()) < 0.05  # lognormal, median ~1

    def test_rowwise_matches_full_table(self):
        fn = PerturbedScore(ExactScore(random_distribution(4, 3)), 0.2,
                            seed=3, edges=geometric_edges(0.1, 2, 4))
        full = fn.ratios_all(0.9)
        for x in range(8):
            np.testing.assert_array_equal(fn.ratios(x, 0.9), full[x])

    def test_validation(self):
        with pytest.raises(ValueError):
            PerturbedScore(ConstantScore(2, 1.0), -0.1, seed=0,
                           edges=[0.1, 1.0])
        with pytest.raises(ValueError):
            PerturbedScore(ConstantScore(2, 1.0), 0.1, seed=0, edges=[1.0])


class TestClampedScore:
    def test_exact_score_passes_through(self):
        p0 = random_distribution(6, 4)
        base = ExactScore(p0)
        clamped = ClampedScore(base)
        for t in (0.02, 0.3, 1.5):
            np.testing.assert_array_equal(
                clamped.ratios_all(t), base.ratios_all(t))

    def test_oversized_score_hits_the_cap(self):
        d = 3
        fn = ClampedScore(ConstantScore(d, 1e6))
        for t in (0.1, 1.0):
            total = fn.ratios(0, t).sum()
            assert total == pytest.approx(d * score_envelope(t), rel=1e-12)

    def test_clamp_preserves_direction(self):
        base = ConstantScore(3, [4.0, 2.0, 2.0])
        r = ClampedScore(base).ratios(0, 2.0)
        np.testing.assert_allclose(r / r[1], [2.0, 1.0, 1.0], rtol=1e-12)

    def test_bounded_mode_cap(self):
        fn = ClampedScore(ConstantScore(2, 100.0), mode="bounded", L=3.0)
        assert fn.ratios(0, 0.0).sum() == pytest.approx(2 * 3.0, rel=1e-12)

    def test_rowwise_matches_full_table(self):
        fn = ClampedScore(PerturbedScore(
            ExactScore(random_distribution(8, 3)), 0.5, seed=2,
            edges=geometric_edges(0.05, 3, 6)))
        full = fn.ratios_all(0.4)
        for x in range(8):
            np.testing.assert_allclose(fn.ratios(x, 0.4), full[x], rtol=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            ClampedScore(ConstantScore(2, 1.0), mode="bounded")
        with pytest.raises(ValueError):
            ClampedScore(ConstantScore(2, 1.0), mode="weird")


class TestAsScoreFunction:
    def test_passthrough_and_coercions(self):
        fn = ConstantScore(2, 1.0)
        assert as_score_function(fn) is fn
        assert isinstance(as_score_function(DenseDistribution.uniform(2)),
                          ExactScore)
        wrapped = as_score_function(lambda x, t: np.ones(2), d=2)
        assert isinstance(wrapped, CallableScore)
        np.testing.assert_array_equal(wrapped.ratios(1, 0.5), np.ones(2))

    def test_dimension_check(self):
        with pytest.raises(ValueError):
            as_score_function(ConstantScore(2, 1.0), d=3)
        with pytest.raises(ValueError):
            as_score_function(lambda x, t: np.ones(2))  # callable needs d
        with pytest.raises(TypeError):
            as_score_function(42)

    def test_callable_arity_checked_at_query(self):
        wrapped = as_score_function(lambda x, t: np.ones(3), d=2)
        with pytest.raises(ValueError, match="returned 3 ratios"):
            wrapped.ratios(0, 0.5)


class TestCompileScore:
    def test_exact_payload(self):
        p0 = random_distribution(10, 3)
        payload = compile_score(ExactScore(p0))
        assert payload["base_kind"] == BASE_EXACT
        assert payload["clamp_mode"] == CLAMP_NONE
        assert payload["perturb_factors"] is None
        np.testing.assert_array_equal(payload["base_a"], p0.mass)

    def test_table_and_const_payloads(self):
        table = small_table()
        pt = compile_score(table)
        assert pt["base_kind"] == BASE_TABLE
        np.testing.assert_array_equal(pt["base_b"], table.table)
        pc = compile_score(ConstantScore(2, [1.0, 0.5]))
        assert pc["base_kind"] == BASE_CONST

    def test_wrapper_stack_flattens(self):
        base = ExactScore(random_distribution(11, 3))
        pert = PerturbedScore(base, 0.3, seed=4,
                              edges=geometric_edges(0.1, 2, 4))
        general = compile_score(ClampedScore(pert))
        assert general["clamp_mode"] == CLAMP_GENERAL
        assert general["perturb_factors"] is not None
        bounded = compile_score(ClampedScore(base, mode="bounded", L=3.0))
        assert bounded["clamp_mode"] == CLAMP_BOUNDED
        assert bounded["clamp_L"] == 3.0

    def test_generic_scores_do_not_compile(self):
        assert compile_score(CallableScore(lambda x, t: np.ones(2), 2)) is None
        wrapped = ClampedScore(CallableScore(lambda x, t: np.ones(2), 2))
        assert compile_score(wrapped) is None
