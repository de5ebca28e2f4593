import numpy as np
import pytest

from lqmfpg import rng
from lqmfpg.analytic import truncated_cost
from lqmfpg.errors import AdmissibilityError, ModelValidationError
from lqmfpg.finite_agent import build_stacked, phi_from_theta, truncated_social_cost
from lqmfpg.model import ControlParams, NoiseSpec
from lqmfpg.simulators import (
    PopulationConfig,
    draw_q_variations,
    mkv_costs,
    mkv_rollout,
    pop_costs,
    pop_rollout,
    population_noise_moments,
    population_noise_targets,
)

from conftest import random_model, scalar_model


def keys(n, *path):
    return rng.derive_keys(31, *path, count=n)


def full(n, x):
    return np.full((n, 1, 1), x)


class TestMkvRollout:
    def test_deterministic_closed_form(self):
        c = 0.7
        m = scalar_model(a=0.6, abar=0.2, b=1.0, bbar=0.5, q=1.0, qbar=0.5, r=2.0, rbar=1.0,
                         gamma=0.9, init0=NoiseSpec.degenerate([c]))
        th = ControlParams([[0.3]], [[0.1]])
        fz = 0.8 - 1.5 * 0.1
        gz = 1.5 + 0.1 * 3.0 * 0.1
        T = 40
        ref = sum(0.9**t * gz * (fz**t * c) ** 2 for t in range(T))
        assert mkv_rollout(m, th, T, 5).value == pytest.approx(ref, rel=1e-13)

    def test_horizon_one(self, table1):
        th = ControlParams([[0.2]], [[0.3]])
        key = rng.derive_key(0, "one")
        y0 = table1.noise.eps1_init.sample(key, 1, first_slot=1)[0, 0]
        z0 = table1.noise.eps0_init.sample(key, 1, first_slot=0)[0, 0]
        ref = (0.5 + 0.5 * 0.04) * y0**2 + (1.0 + 1.0 * 0.09) * z0**2
        assert mkv_rollout(table1, th, 1, key).value == pytest.approx(ref, rel=1e-14)

    def test_empty_horizon(self, table1):
        with pytest.raises(ValueError, match="empty horizon"):
            mkv_rollout(table1, ControlParams.zeros(table1), 0, 1)

    def test_inadmissible(self, table1):
        with pytest.raises(AdmissibilityError):
            mkv_rollout(table1, ControlParams([[0]], [[-1]]), 5, 1)

    def test_mean_matches_truncated_cost(self, table1):
        n = 10**5
        c = mkv_costs(table1, full(n, 0.0), full(n, 0.0), 50, keys(n, "mkvmean"))
        ref = truncated_cost(table1, ControlParams.zeros(table1), 50).total
        assert abs(c.mean() - ref) <= 3 * c.std(ddof=1) / np.sqrt(n)
        assert np.all(c >= 0)

    def test_reproducible_and_thread_independent(self, table1):
        k = keys(500, "rep")
        Ks = 0.2 + 0.1 * np.random.default_rng(0).standard_normal((500, 1, 1))
        a = mkv_costs(table1, Ks, Ks, 50, k)
        b = mkv_costs(table1, Ks, Ks, 50, k, num_threads=4)
        c = np.concatenate([mkv_costs(table1, Ks[250:], Ks[250:], 50, k[250:]),
                            mkv_costs(table1, Ks[:250], Ks[:250], 50, k[:250])])
        assert np.array_equal(a, b)
        assert np.array_equal(a, np.concatenate([c[250:], c[:250]]))

    def test_mkv_equals_one_agent_population_when_idiosyncratic_terms_vanish(self):
        # with zero idiosyncratic noise y stays 0, so both simulators see the same z path
        m = scalar_model(a=0.5, abar=0.5, b=0.5, bbar=0.5, q=0.5, qbar=0.5, r=0.5, rbar=0.5,
                         init0=NoiseSpec.uniform([-1], [1]), step0=0.01)
        pop = PopulationConfig.homogeneous(m, 1)
        k = keys(100, "n1")
        a = mkv_costs(m, full(100, 0.2), full(100, 0.6), 30, k)
        b = pop_costs(m, pop, full(100, 0.2), full(100, 0.6), 30, k)
        assert np.allclose(a, b, rtol=1e-13)


class TestPopRollout:
    def test_single_agent_ignores_k(self, table1):
        pop = PopulationConfig.homogeneous(table1, 1)
        a = pop_rollout(table1, pop, ControlParams([[0.0]], [[0.5]]), 50, 9).value
        b = pop_rollout(table1, pop, ControlParams([[0.9]], [[0.5]]), 50, 9).value
        assert a == b

    @pytest.mark.parametrize("N", [1, 3, 20])
    def test_identical_agents_reduce_to_mkv_z_cost(self, N):
        c = 0.8
        m = scalar_model(a=0.6, abar=0.3, b=1.0, bbar=0.2, q=1.0, qbar=0.4, r=0.5, rbar=0.5,
                         init0=NoiseSpec.degenerate([c]))
        th = ControlParams([[0.4]], [[0.2]])
        pop = PopulationConfig.homogeneous(m, N)
        assert pop_rollout(m, pop, th, 60, 3).value == pytest.approx(mkv_rollout(m, th, 60, 3).value,
                                                                      rel=1e-13)

    def test_mean_matches_exact_truncated_social_cost(self, table1):
        n = 10**4
        pop = PopulationConfig.draw(table1, 10, 0.1, 4)
        c = pop_costs(table1, pop, full(n, 0.0), full(n, 0.0), 50, keys(n, "popmean"))
        stacked = build_stacked(table1, pop)
        ref = truncated_social_cost(stacked, phi_from_theta(ControlParams.zeros(table1), 10), 0.9, 50)
        assert abs(c.mean() - ref) <= 3 * c.std(ddof=1) / np.sqrt(n)
        assert np.all(c >= 0)

    def test_mismatched_variations(self, table1):
        with pytest.raises(ModelValidationError):
            PopulationConfig(3, 0.1, np.zeros((2, 1, 1)))

    def test_variation_norm_checked(self, table1):
        with pytest.raises(ModelValidationError):
            PopulationConfig(1, 0.1, np.full((1, 1, 1), 0.2))

    def test_dimension_mismatch_with_model(self, table1):
        pop = PopulationConfig(2, 0.0, np.zeros((2, 2, 2)))
        with pytest.raises(ModelValidationError):
            pop_costs(table1, pop, full(1, 0.0), full(1, 0.0), 5, keys(1, "x"))


class TestQVariations:
    def test_homogeneous(self, table1):
        assert np.array_equal(draw_q_variations(table1, 5, 0.0, 1), np.zeros((5, 1, 1)))

    def test_table1_radius(self, table1):
        q = draw_q_variations(table1, 1000, 0.1, 1)
        assert np.all(np.abs(q) < 0.1)
        assert q.std() > 0.05

    def test_too_large(self, table1):
        with pytest.raises(ModelValidationError, match="lambda_min"):
            draw_q_variations(table1, 5, 0.6, 1)

    def test_mean_of_many_draws(self, table1):
        q = draw_q_variations(table1, 10**6, 0.1, 2).ravel()
        assert abs(q.mean()) < 4 * 0.1 / np.sqrt(3) / np.sqrt(q.size)

    def test_matrix_case(self):
        m = random_model(np.random.default_rng(0), 3, 2)
        lim = min(np.linalg.eigvalsh(m.Q).min(), np.linalg.eigvalsh(m.Q + m.Q_bar).min())
        q = draw_q_variations(m, 50, 0.9 * lim, 3)
        for x in q:
            assert np.array_equal(x, x.T)
            assert np.linalg.norm(x, 2) <= 0.9 * lim * (1 + 1e-12)
        assert np.array_equal(q, draw_q_variations(m, 50, 0.9 * lim, 3))


class TestPopulationMoments:
    def test_identities_two_dimensional(self):
        m = random_model(np.random.default_rng(4), 2, 1)
        for N in (2, 5):
            est = population_noise_moments(m, N, 200_000, 7)
            for name, target in population_noise_targets(m, N).items():
                e = est[name]
                assert np.all(np.abs(e.value - target) <= 4 * e.stderr), name
