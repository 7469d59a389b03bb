import math

import numpy as np
import pytest

from slowing.analysis import SpeedDistribution, w1_stderr, wasserstein1
from slowing.ensemble import InitialLaw
from slowing.kinetic import (
    CollisionKernel,
    NumericContractError,
    SpeedGrid,
    backward_expectation,
    backward_expectation_direct,
    k_of_u,
    lambda_F,
    solve_forward,
    transition_matrix,
)
from slowing.meso import run_meso_ensemble, sample_impact
from slowing.micro import ModelParams
from slowing.profile import affine_profile, constant_profile, exit_speed, tabulated_profile


def unit_kernel(d=2, kappa=0.5, lam=1.0, profile=None):
    return CollisionKernel.from_params(profile or constant_profile(), ModelParams(d, 0.01, kappa, lam))


class TestKOfU:
    def test_examples(self):
        k = unit_kernel()
        assert k_of_u(k, 0.6) == pytest.approx(0.8)
        assert k_of_u(k, 0.0) == 1.0
        assert k_of_u(k, 1.0) == 0.0

    def test_monte_carlo(self):
        rng = np.random.default_rng(0)
        h = sample_impact(rng, 2, 1_000_000)
        freq = np.mean(exit_speed(constant_profile(), 0.6, 0.5, h) == 0)
        assert abs(freq - 0.8) < 3 * math.sqrt(0.16 / h.size)

    def test_random_tuples(self):
        rng = np.random.default_rng(1)
        u_tab = np.linspace(0, 3, 31)
        profiles = [constant_profile(1.3), affine_profile(0.8, 0.7), tabulated_profile(u_tab, 1.5 + np.cos(u_tab))]
        n = 40_000
        for _ in range(20):
            prof = profiles[rng.integers(len(profiles))]
            d, kappa, u = int(rng.integers(2, 5)), rng.uniform(0.1, 1.0), rng.uniform(0.0, 1.5)
            kern = unit_kernel(d, kappa, profile=prof)
            freq = np.mean(exit_speed(prof, u, kappa, sample_impact(rng, d, n)) == 0)
            p = float(kern.k(u))
            assert abs(freq - p) <= 3 * math.sqrt(max(p * (1 - p), 1e-12) / n) + 1e-12

    def test_monotone_and_threshold(self):
        kern = unit_kernel(3, 0.4, profile=affine_profile(1.0, 1.0))
        u = np.linspace(0, 3, 300)
        assert np.all(np.diff(kern.k(u)) <= 0)
        h = np.linspace(0, 1, 300)
        assert np.all(np.diff(kern.threshold(h)) <= 0)
        assert kern.threshold(1.0) == 0.0


class TestLambdaF:
    def test_point_mass(self):
        assert lambda_F(unit_kernel(), SpeedDistribution([0.6])) == pytest.approx(0.96)

    def test_fast_particles_never_stop(self):
        assert lambda_F(unit_kernel(), SpeedDistribution([1.0, 1.5, 3.0])) == 0.0

    def test_uniform_quadrature_vs_sample(self):
        kern = unit_kernel(kappa=0.5)
        law = InitialLaw("uniform", low=0.9, high=1.0)
        exact = law.mean(lambda r: kern.sigma * r * kern.k(r), nodes=400)
        r = law.sample(np.random.default_rng(2), 1_000_000)
        vals = kern.sigma * r * kern.k(r)
        assert abs(lambda_F(kern, SpeedDistribution(r)) / r.size - exact) < 3 * vals.std() / math.sqrt(r.size)


class TestBackward:
    def test_constant_function(self):
        kern = unit_kernel()
        for n_max in (0, 2, 6):
            res = backward_expectation(kern, lambda r: np.ones_like(r), 0.8, 1.0, n_max)
            assert 1 - res.remainder - 1e-12 <= res.value <= 1 + 1e-12

    def test_short_time_stopping(self):
        res = backward_expectation(unit_kernel(), lambda r: (r == 0).astype(float), 0.6, 1e-3, 4)
        assert res.value == pytest.approx(0.96e-3, rel=0.01)

    @pytest.mark.parametrize("profile", [constant_profile(), affine_profile(1.0, 1.0)])
    def test_direct_quadrature_oracle(self, profile):
        kern = unit_kernel(3, 0.3, 0.6, profile)
        phi = lambda r: np.exp(-r) + (r == 0)  # noqa: E731
        for n_max in (0, 1, 2):
            grid = backward_expectation(kern, phi, 1.0, 0.8, n_max).value
            direct = backward_expectation_direct(kern, phi, 1.0, 0.8, n_max)
            assert grid == pytest.approx(direct, abs=2e-5)

    def test_against_meso(self):
        prof, p = constant_profile(), ModelParams(2, 0.01, 0.5, 1.0)
        kern = CollisionKernel.from_params(prof, p)
        r0, t = 1.0, 0.5
        res = run_meso_ensemble(prof, p, InitialLaw("point", speed=r0), t, 200_000, 3)
        phi = lambda r: r**2  # noqa: E731
        b = backward_expectation(kern, phi, r0, t, 6)
        v = phi(res.speed[-1])
        assert abs(v.mean() - b.value) < 3 * v.std() / math.sqrt(v.size) + b.remainder

    def test_errors(self):
        with np.errstate(divide="ignore"), pytest.raises(ValueError):
            backward_expectation(unit_kernel(), lambda r: 1.0 / r, 1.0, 1.0, 2)
        with pytest.raises(ValueError):
            backward_expectation(unit_kernel(), lambda r: r, -1.0, 1.0, 2)


class TestForward:
    def test_no_obstacles(self):
        kern = unit_kernel(lam=0.0)
        g = SpeedGrid.uniform(0.2, 0.8, 1.0, 50)
        sol = solve_forward(kern, g, 2.0, 0.1)
        assert np.array_equal(sol.weights[-1], g.weights) and sol.stopped[-1] == 0

    def test_one_step_stopping(self):
        kern = unit_kernel()
        g = SpeedGrid.point_mass(0.6, 1.0, 1000)
        for dt in (1e-3, 5e-4):
            sol = solve_forward(kern, g, dt, dt)
            assert sol.stopped[-1] / dt == pytest.approx(0.96, rel=2 * kern.sigma * dt)

    def test_transition_rows_are_laws(self):
        T = transition_matrix(unit_kernel(3, 0.3, profile=affine_profile(1.0, 1.0)), SpeedGrid.nodes(2.0, 200))
        assert np.all(T >= 0)
        assert np.allclose(T.sum(axis=1), 1.0, atol=1e-14)
        assert np.all(np.triu(T[:, 1:], 1) == 0)

    def test_conservation_and_monotonicity(self):
        kern = unit_kernel(3, 0.4, 1.0, affine_profile(1.0, 0.5))
        g = SpeedGrid.uniform(0.3, 1.0, 1.0, 300)
        sol = solve_forward(kern, g, 3.0, 0.01)
        tot = sol.totals
        assert np.max(np.abs(np.diff(tot))) <= 1e-12 * tot[0]
        assert np.all(np.diff(sol.stopped) >= 0)
        for phi in (lambda s: s, np.sqrt):
            mean = sol.weights @ phi(sol.speeds**2)
            assert np.all(np.diff(mean) <= 1e-15)

    def test_refuses_large_step(self):
        with pytest.raises(NumericContractError):
            solve_forward(unit_kernel(), SpeedGrid.point_mass(1.0, 1.0, 10), 1.0, 0.06)

    def test_against_meso(self):
        prof, p = constant_profile(), ModelParams(2, 0.01, 0.5, 1.0)
        kern = CollisionKernel.from_params(prof, p)
        M = 2000
        sol = solve_forward(kern, SpeedGrid.point_mass(1.0, 1.0, M), 1.0, 0.04)
        res = run_meso_ensemble(prof, p, InitialLaw("point", speed=1.0), 1.0, 200_000, 4)
        w1 = wasserstein1(sol.grid().moving, res.moving())
        assert w1 <= max(2 / M, 3 * w1_stderr(res.moving()))
        frac = res.stopped_fraction()
        assert abs(sol.stopped[-1] - frac) < 3 * math.sqrt(frac * (1 - frac) / res.replicas)
