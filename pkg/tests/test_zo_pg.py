import math

import numpy as np
import pytest

from lqmfpg import rng
from lqmfpg.analytic import exact_pg_run, truncated_cost_batch
from lqmfpg.errors import AdmissibilityError, ConfigError, StepError
from lqmfpg.model import ControlParams, NoiseSpec, closed_loops
from lqmfpg.simulators import PopulationConfig
from lqmfpg.zo_pg import (
    GD,
    Adam,
    ZoConfig,
    c0_var,
    estimate_gradient_mkv,
    estimate_gradient_pop,
    gamma_theta,
    perturbations,
    pg_run,
    sample_sphere,
    sample_sphere_batch,
    truncation_horizon,
)

from conftest import scalar_model


def deterministic_model():
    return scalar_model(a=0.6, abar=0.2, b=1.0, bbar=0.5, q=1.0, qbar=0.5, r=2.0, rbar=1.0,
                        init0=NoiseSpec.degenerate([1.0]), init1=NoiseSpec.degenerate([0.5]))


class TestSphere:
    def test_radius(self):
        keys = rng.derive_keys(1, "s", count=1000)
        v = sample_sphere_batch(2, 3, 0.3, keys)
        assert v.shape == (1000, 2, 3)
        assert np.allclose(np.linalg.norm(v.reshape(1000, -1), axis=1), 0.3, rtol=1e-14)

    def test_scalar_sphere_is_two_points(self):
        v = sample_sphere_batch(1, 1, 0.2, rng.derive_keys(2, "s", count=500)).ravel()
        assert set(np.round(v, 15)) == {-0.2, 0.2}

    def test_moments(self):
        n = 200_000
        v = sample_sphere_batch(2, 2, 1.0, rng.derive_keys(3, "s", count=n)).reshape(n, 4)
        assert np.all(np.abs(v.mean(axis=0)) < 4 * 0.5 / math.sqrt(n))
        # E[v v^T] = I / 4 on the unit sphere in R^4
        second = v.T @ v / n
        assert np.allclose(second, np.eye(4) / 4, atol=0.005)

    def test_single_key_matches_batch(self):
        k = rng.derive_key(4, "one")
        assert np.array_equal(sample_sphere(2, 1, 0.5, k), sample_sphere_batch(2, 1, 0.5, [k])[0])

    def test_bad_radius(self):
        with pytest.raises(ValueError):
            sample_sphere(1, 1, 0.0, 1)


class TestPerturbations:
    def test_blocks_use_separate_lanes(self, table1):
        parent = rng.derive_key(0, "pg", 1)
        V1, V2, _ = perturbations(table1, ControlParams([[0.2]], [[0.6]]), 0.1, 50, parent)
        assert np.array_equal(V1, sample_sphere_batch(1, 1, 0.1, rng.child_keys(parent, 50, 1)))
        assert np.array_equal(V2, sample_sphere_batch(1, 1, 0.1, rng.child_keys(parent, 50, 22)))

    def test_blocks_uncorrelated(self, table1):
        V1, V2, _ = perturbations(table1, ControlParams([[0.2]], [[0.6]]), 1.0, 100_000, 11)
        assert abs(np.mean(V1 * V2)) < 4 / math.sqrt(100_000)

    def test_resample_keeps_directions_admissible(self, table1):
        theta = ControlParams.zeros(table1)
        V1, V2, n_bad = perturbations(table1, theta, 0.1, 200, 5, resample=True)
        assert n_bad > 0
        _, fz = closed_loops(table1, theta)
        bz = (table1.B + table1.B_bar)[0, 0]
        Fz = fz[0, 0] - bz * V2.ravel()
        assert np.all(0.9 * Fz**2 < 1)

    def test_allow_keeps_inadmissible_directions(self, table1):
        _, V2, n_bad = perturbations(table1, ControlParams.zeros(table1), 0.1, 200, 5)
        assert n_bad == int(np.sum(V2.ravel() < 0))


class TestEstimator:
    def test_noise_free_model_gives_zero(self):
        m = scalar_model(a=0.5, b=1.0)
        est = estimate_gradient_mkv(m, ControlParams([[0.1]], [[0.1]]), ZoConfig(20, 10, 0.1), 3)
        assert est.norm() == 0.0

    def test_expectation_matches_two_point_average(self):
        # deterministic costs: on the scalar sphere the expectation is a finite average
        m = deterministic_model()
        K, L, tau, T = 0.3, 0.2, 0.1, 30
        pts = [(K + s1 * tau, L + s2 * tau) for s1 in (1, -1) for s2 in (1, -1)]
        cy, cz = truncated_cost_batch(m, np.array([[[p[0]]] for p in pts]),
                                      np.array([[[p[1]]] for p in pts]), T)
        c = cy + cz
        exp_K = (c[0] + c[1] - c[2] - c[3]) / (4 * tau)
        exp_L = (c[0] - c[1] + c[2] - c[3]) / (4 * tau)
        est, costs = estimate_gradient_mkv(m, ControlParams([[K]], [[L]]), ZoConfig(40_000, T, tau), 8,
                                           return_costs=True)
        assert set(np.round(costs, 10)) <= set(np.round(c, 10))
        se = np.max(np.abs(c)) / tau / math.sqrt(40_000)
        assert abs(est.grad_K[0, 0] - exp_K) < 4 * se
        assert abs(est.grad_L[0, 0] - exp_L) < 4 * se

    def test_linear_cost_is_recovered(self):
        # a linear cost <G, theta> has smoothed gradient G; in 1-D at the origin the K estimate is exact
        # and the L estimate only carries the zero-mean cross term v1 v2
        from lqmfpg.zo_pg import _estimate

        m = deterministic_model()
        cfg = ZoConfig(50, 5, 0.1)

        def linear(Ks, Ls, keys):
            return 2.0 * Ks[:, 0, 0]

        est, _ = _estimate(m, ControlParams.zeros(m), cfg, 3, linear)
        assert est.grad_K[0, 0] == pytest.approx(2.0, rel=1e-14)
        assert abs(est.grad_L[0, 0]) < 4 * 2.0 / math.sqrt(cfg.M)

    def test_linear_cost_matrix_blocks(self):
        from lqmfpg.zo_pg import _estimate
        from conftest import random_model

        m = random_model(np.random.default_rng(3), 2, 2)
        G1 = np.array([[1.0, -2.0], [0.5, 3.0]])
        G2 = np.array([[0.0, 1.0], [-1.0, 2.0]])
        cfg = ZoConfig(200_000, 5, 0.05)

        def linear(Ks, Ls, keys):
            return np.einsum("ij,mij->m", G1, Ks) + np.einsum("ij,mij->m", G2, Ls)

        est, _ = _estimate(m, ControlParams.zeros(m), cfg, 9, linear)
        # per-entry s.e. of the one-point estimate is about ||G|| * sqrt(dim) / sqrt(M)
        se = np.sqrt(np.sum(G1**2) + np.sum(G2**2)) * 2 / math.sqrt(cfg.M)
        assert np.all(np.abs(est.grad_K - G1) < 4 * se)
        assert np.all(np.abs(est.grad_L - G2) < 4 * se)

    def test_single_agent_k_gradient_is_pure_noise(self, table1):
        pop = PopulationConfig.homogeneous(table1, 1)
        cfg = ZoConfig(10, 20, 0.05, simulator="pop", population=pop)
        theta = ControlParams([[0.2]], [[0.4]])
        g = np.array([estimate_gradient_pop(table1, pop, theta, cfg, rng.derive_key(0, "n1", i)).grad_K[0, 0]
                      for i in range(200)])
        assert abs(g.mean()) < 4 * g.std(ddof=1) / math.sqrt(g.size)

    def test_rejects_inadmissible_center(self, table1):
        with pytest.raises(AdmissibilityError):
            estimate_gradient_mkv(table1, ControlParams([[5.0]], [[0.0]]), ZoConfig(5, 5, 0.1), 0)

    def test_simulator_mismatch(self, table1):
        with pytest.raises(ConfigError):
            estimate_gradient_mkv(table1, ControlParams.zeros(table1),
                                  ZoConfig(5, 5, 0.1, simulator="pop",
                                           population=PopulationConfig.homogeneous(table1, 2)), 0)

    def test_meta(self, table1):
        est = estimate_gradient_mkv(table1, ControlParams([[0.2]], [[0.6]]), ZoConfig(5, 5, 0.1), 0)
        assert est.meta["smoothing_dim"] == 1 and est.source == "mkv"


class TestZoConfig:
    @pytest.mark.parametrize("kwargs", [
        dict(M=0, T=5, tau=0.1),
        dict(M=5, T=5, tau=0.0),
        dict(M=5, T=5, tau=0.1, simulator="agents"),
        dict(M=5, T=5, tau=0.1, simulator="pop"),
        dict(M=5, T=5, tau=0.1, perturbation_policy="clip"),
        dict(M=5, T=5, tau=0.1, smoothing_dim=0),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigError):
            ZoConfig(**kwargs)


class TestOptimizers:
    def test_gd(self):
        delta, state = GD(0.1).step(GD(0.1).init(2), np.array([1.0, -2.0]), 1)
        assert np.allclose(delta, [0.1, -0.2]) and state is None

    def test_adam_first_step_is_signed_learning_rate(self):
        opt = Adam(0.01)
        delta, _ = opt.step(opt.init(3), np.array([5.0, -1e-3, 2.0]), 1)
        assert np.allclose(delta, [0.01, -0.01, 0.01], rtol=1e-4)

    def test_adam_constant_gradient(self):
        opt = Adam(0.01)
        state = opt.init(1)
        for k in range(1, 50):
            delta, state = opt.step(state, np.array([3.0]), k)
            assert delta[0] == pytest.approx(0.01, rel=1e-6)


class TestPgRun:
    def test_exact_gd_delegates(self, table1):
        a = pg_run(table1, ControlParams.zeros(table1), "exact", GD(0.01), 50)
        b = exact_pg_run(table1, ControlParams.zeros(table1), 0.01, 50)
        assert np.array_equal(a.costs(), b.costs())
        assert np.array_equal(a.K_path(), b.K_path())

    def test_exact_adam_decreases_cost(self, table1):
        tr = pg_run(table1, ControlParams.zeros(table1), "exact", Adam(0.01), 300)
        assert tr.last.cost < 0.5 * tr.records[0].cost

    def test_mkv_reproducible(self, table1):
        cfg = ZoConfig(20, 20, 0.05)
        runs = [pg_run(table1, ControlParams.zeros(table1), "mkv", Adam(0.01), 10, cfg, seed=s)
                for s in (4, 4, 5)]
        assert np.array_equal(runs[0].K_path(), runs[1].K_path())
        assert np.array_equal(runs[0].L_path(), runs[1].L_path())
        assert not np.array_equal(runs[0].K_path(), runs[2].K_path())

    def test_eval_stride(self, table1):
        tr = pg_run(table1, ControlParams.zeros(table1), "mkv", Adam(0.01), 7, ZoConfig(5, 5, 0.05),
                    eval_stride=3)
        evaluated = [r.k for r in tr.records if r.cost is not None]
        assert evaluated == [0, 3, 6, 7]

    def test_pop_columns(self, table1):
        from lqmfpg.zo_pg import PopEvaluator

        ev = PopEvaluator(PopulationConfig.homogeneous(table1, 2))
        tr = pg_run(table1, ControlParams.zeros(table1), "exact", GD(0.01), 3, pop_evals=[ev])
        assert all(2 in r.pop_costs for r in tr.records)
        assert tr.records[-1].pop_rel_errors[2] < tr.records[0].pop_rel_errors[2]

    def test_step_error_carries_trace(self, table1):
        with pytest.raises(StepError) as info:
            pg_run(table1, ControlParams.zeros(table1), "exact", Adam(1e12), 5)
        assert info.value.trace is not None and len(info.value.trace) == 1

    def test_bad_inputs(self, table1):
        with pytest.raises(ConfigError):
            pg_run(table1, ControlParams.zeros(table1), "newton", GD(0.1), 5)
        with pytest.raises(ConfigError):
            pg_run(table1, ControlParams.zeros(table1), "mkv", GD(0.1), 5)
        with pytest.raises(AdmissibilityError):
            pg_run(table1, ControlParams([[5.0]], [[0.0]]), "exact", GD(0.1), 5)


class TestTruncationHorizon:
    def test_worked_example(self):
        # (ln(1/(1e-3 * 0.01)) + 1)^2 / ln(1/0.9)^2 = 14104.5...
        assert truncation_horizon(1e-3, 0.9, 1.0) == 14105

    def test_floor(self):
        assert truncation_horizon(1e6, 0.5, 1.0) == 2

    def test_monotone(self):
        hs = [truncation_horizon(e, 0.8, 2.0) for e in (1e-1, 1e-2, 1e-4, 1e-8)]
        assert hs == sorted(hs) and hs[0] < hs[-1]
        gs = [truncation_horizon(1e-3, g, 2.0) for g in (0.3, 0.6, 0.9, 0.99)]
        assert gs == sorted(gs)

    def test_invalid(self):
        with pytest.raises(AdmissibilityError):
            truncation_horizon(1e-3, 1.0, 1.0)
        with pytest.raises(ValueError):
            truncation_horizon(0.0, 0.5, 1.0)

    def test_table1_scales(self, table1):
        assert gamma_theta(table1, ControlParams.zeros(table1)) == pytest.approx(0.9)
        assert gamma_theta(table1, ControlParams([[0.0]], [[-0.5]])) > 0.9
        assert c0_var(table1) == pytest.approx(1.0 / 3.0)
