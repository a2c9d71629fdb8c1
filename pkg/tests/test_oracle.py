"""Dense brute-force machinery: expm, forward ODE, generic uniformization."""

from __future__ import annotations

import math

import numpy as np
import pytest

from cubediff import (
    DenseDistribution,
    ExactScore,
    GeneratorMatrix,
    RateBoundViolation,
    evolve_exact,
    expm,
    hypercube_generator,
    integrate_forward,
    reverse_generator,
    stationary_distribution,
    uniformize_generic,
)
from conftest import random_distribution


def two_state_generator(a: float, b: float) -> GeneratorMatrix:
    return GeneratorMatrix(np.array([[-a, a], [b, -b]]))


def three_state_time_varying(t):
    """Bounded 3-state generator with genuinely time-dependent rates."""
    r01 = 1.0 + 0.5 * math.sin(t)
    r12 = 0.7 + 0.3 * math.cos(2.0 * t)
    r20 = 1.2
    r02 = 0.4
    return np.array([
        [-(r01 + r02), r01, r02],
        [0.0, -r12, r12],
        [r20, 0.0, -r20],
    ])


class TestGeneratorMatrix:
    def test_validation(self):
        with pytest.raises(ValueError, match="square"):
            GeneratorMatrix(np.zeros((2, 3)))
        with pytest.raises(ValueError, match="nonnegative"):
            GeneratorMatrix(np.array([[-1.0, 1.0], [-0.5, 0.5]]))
        with pytest.raises(ValueError, match="sum to zero"):
            GeneratorMatrix(np.array([[-1.0, 2.0], [1.0, -1.0]]))

    def test_exit_rate(self):
        q = hypercube_generator(3)
        assert q.n_states == 8
        assert q.max_exit_rate() == 3.0

    def test_hypercube_structure(self):
        q = hypercube_generator(2).rates
        np.testing.assert_array_equal(
            q, [[-2, 1, 1, 0], [1, -2, 0, 1], [1, 0, -2, 1], [0, 1, 1, -2]])


class TestExpm:
    def test_identity_at_time_zero(self):
        q = two_state_generator(1.3, 0.4)
        np.testing.assert_allclose(expm(q, 0.0), np.eye(2), atol=1e-14)

    def test_one_dim_closed_form(self):
        # Rate-1 flips on one coordinate: eigenvalues 0 and -2.
        P = expm(hypercube_generator(1), 0.8)
        e = math.exp(-1.6)
        expected = 0.5 * np.array([[1 + e, 1 - e], [1 - e, 1 + e]])
        np.testing.assert_allclose(P, expected, atol=1e-12)

    def test_rows_stochastic(self):
        P = expm(hypercube_generator(4), 2.5)
        assert P.min() >= 0.0
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-10)

    def test_agrees_with_tensorized_evolution(self):
        p0 = random_distribution(40, 6)
        P = expm(hypercube_generator(6), 0.7)
        assert np.abs(p0.mass @ P - evolve_exact(p0, 0.7).mass).max() < 1e-10

    def test_rejects_negative_time(self):
        with pytest.raises(ValueError):
            expm(hypercube_generator(1), -0.1)


class TestIntegrateForward:
    def test_constant_generator_matches_expm(self):
        q = GeneratorMatrix(three_state_time_varying(0.0))
        p0 = np.array([0.6, 0.3, 0.1])
        got = integrate_forward(q, p0, 0.0, 2.0, 1000)
        want = p0 @ expm(q, 2.0)
        assert np.abs(got - want).max() < 1e-8

    def test_fourth_order_convergence(self):
        # Halving the step should shrink the error by about 2**4.
        def q_of_t(t):
            return three_state_time_varying(t)

        p0 = np.array([1.0, 0.0, 0.0])
        ref = integrate_forward(q_of_t, p0, 0.0, 1.5, 8192)
        err = [np.abs(integrate_forward(q_of_t, p0, 0.0, 1.5, n) - ref).max()
               for n in (16, 32, 64)]
        for coarse, fine in zip(err, err[1:]):
            assert 8.0 < coarse / fine < 32.0

    def test_mass_conservation_reported(self):
        q = GeneratorMatrix(three_state_time_varying(0.3))
        _, info = integrate_forward(
            q, np.array([0.2, 0.5, 0.3]), 0.0, 1.0, 500, return_info=True)
        assert info.steps == 500
        assert info.mass_drift < 1e-9
        assert info.min_mass > -1e-12

    def test_distribution_type_preserved(self):
        p0 = random_distribution(3, 3)
        out = integrate_forward(hypercube_generator(3), p0, 0.0, 0.5, 200)
        assert isinstance(out, DenseDistribution)
        assert np.abs(out.mass - evolve_exact(p0, 0.5).mass).max() < 1e-8
        out_vec = integrate_forward(
            hypercube_generator(3), p0.mass.copy(), 0.0, 0.5, 200)
        assert isinstance(out_vec, np.ndarray)

    def test_input_validation(self):
        q = hypercube_generator(2)
        p0 = np.full(4, 0.25)
        with pytest.raises(ValueError):
            integrate_forward(q, p0, 1.0, 0.5, 10)
        with pytest.raises(ValueError):
            integrate_forward(q, p0, 0.0, 1.0, 0)
        with pytest.raises(ValueError):
            integrate_forward(q, np.array([0.5, 0.5]), 0.0, 1.0, 10)

    def test_reverse_flow_recovers_early_marginal(self):
        # Driving the reverse dynamic with the exact score from p(T) must
        # land on p(delta).
        p0 = random_distribution(8, 4)
        T, delta = 4.0, 0.1
        q_rev = reverse_generator(ExactScore(p0), T, 4)
        out = integrate_forward(
            q_rev, evolve_exact(p0, T), 0.0, T - delta, 8000)
        assert np.abs(out.mass - evolve_exact(p0, delta).mass).max() < 1e-6


class TestReverseGenerator:
    def test_rows_sum_to_zero(self):
        q_of_t = reverse_generator(ExactScore(random_distribution(2, 3)), 3.0, 3)
        for t in (0.0, 1.0, 2.9):
            rates = q_of_t(t)
            assert np.abs(rates.sum(axis=1)).max() < 1e-9
            off = rates.copy()
            np.fill_diagonal(off, 0.0)
            assert off.min() >= 0.0

    def test_vectorized_shape(self):
        q_of_t = reverse_generator(ExactScore(random_distribution(2, 2)), 2.0, 2)
        batch = q_of_t(np.array([0.1, 0.7, 1.5]))
        assert batch.shape == (3, 4, 4)
        np.testing.assert_array_equal(batch[1], q_of_t(0.7))


class TestUniformizeGeneric:
    def test_homogeneous_two_state_matches_expm(self, rng):
        q = two_state_generator(1.0, 2.0)
        p0 = np.array([1.0, 0.0])
        states = uniformize_generic(q, 3.5, p0, 1.2, rng, n_samples=60_000)
        emp = np.bincount(states, minlength=2) / states.size
        want = expm(q, 1.2)[0]
        assert 0.5 * np.abs(emp - want).sum() < 0.01

    def test_time_varying_matches_ode(self, rng):
        p0 = np.array([0.5, 0.3, 0.2])
        T = 2.0
        states = uniformize_generic(
            three_state_time_varying, 2.0, p0, T, rng, n_samples=100_000)
        emp = np.bincount(states, minlength=3) / states.size
        ode = integrate_forward(three_state_time_varying, p0, 0.0, T, 4000)
        assert 0.5 * np.abs(emp - ode).sum() < 0.01

    def test_law_invariant_to_rate_bound(self):
        p0 = np.array([0.5, 0.3, 0.2])
        T = 2.0
        laws = []
        for lam, seed in ((2.0, 10), (20.0, 11)):
            states = uniformize_generic(
                three_state_time_varying, lam, p0, T,
                np.random.default_rng(seed), n_samples=100_000)
            laws.append(np.bincount(states, minlength=3) / states.size)
        assert 0.5 * np.abs(laws[0] - laws[1]).sum() < 0.01

    def test_single_sample_form(self, rng):
        q = two_state_generator(1.0, 1.0)
        out = uniformize_generic(q, 2.0, np.array([1.0, 0.0]), 0.5, rng)
        assert isinstance(out, int) and out in (0, 1)

    def test_bound_violation_raises(self, rng):
        q = two_state_generator(5.0, 0.1)
        with pytest.raises(RateBoundViolation, match="exceeds bound"):
            uniformize_generic(q, 1.0, np.array([1.0, 0.0]), 5.0, rng,
                               n_samples=500)

    def test_vectorized_rates_path_matches(self):
        p0 = np.array([0.5, 0.3, 0.2])

        def q_batch(ts):
            arr = np.atleast_1d(np.asarray(ts, dtype=float))
            out = np.stack([three_state_time_varying(float(t)) for t in arr])
            return out if np.asarray(ts).ndim else out[0]

        a = uniformize_generic(
            three_state_time_varying, 2.5, p0, 1.0,
            np.random.default_rng(5), n_samples=30_000)
        b = uniformize_generic(
            q_batch, 2.5, p0, 1.0,
            np.random.default_rng(5), n_samples=30_000, vectorized_rates=True)
        np.testing.assert_array_equal(a, b)

    def test_input_validation(self, rng):
        q = two_state_generator(1.0, 1.0)
        with pytest.raises(ValueError):
            uniformize_generic(q, 0.0, np.array([1.0, 0.0]), 1.0, rng)
        with pytest.raises(ValueError):
            uniformize_generic(q, 2.0, np.array([1.0, 0.0]), -1.0, rng)
        with pytest.raises(ValueError):
            uniformize_generic(q, 2.0, np.array([0.9, 0.0]), 1.0, rng)
