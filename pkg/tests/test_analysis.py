import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linprog

from slowing.analysis import SpeedDistribution, binomial_ci, check_invariants, w1_stderr, wasserstein1
from slowing.ensemble import InitialLaw
from slowing.meso import run_meso_ensemble
from slowing.micro import ModelParams, run_micro_ensemble
from slowing.profile import constant_profile


def lp_w1(x, wx, y, wy):
    """Optimal transport cost between two weighted point sets by linear programming."""
    wx, wy = wx / wx.sum(), wy / wy.sum()
    n, m = len(x), len(y)
    cost = np.abs(x[:, None] - y[None, :]).ravel()
    rows = np.zeros((n + m, n * m))
    for i in range(n):
        rows[i, i * m : (i + 1) * m] = 1
    for j in range(m):
        rows[n + j, j::m] = 1
    res = linprog(cost, A_eq=rows, b_eq=np.concatenate([wx, wy]), bounds=(0, None), method="highs")
    return res.fun


class TestWasserstein:
    def test_identical(self):
        p = SpeedDistribution([0.3, 0.1, 0.7])
        assert wasserstein1(p, SpeedDistribution([0.7, 0.3, 0.1])) == 0.0

    def test_unit_shift(self):
        assert wasserstein1(SpeedDistribution([0.0]), SpeedDistribution([1.0])) == 1.0

    def test_lp_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            x, y = rng.uniform(0, 2, 10), rng.uniform(0, 2, 10)
            wx, wy = rng.uniform(0.1, 1, 10), rng.uniform(0.1, 1, 10)
            got = wasserstein1(SpeedDistribution(x, wx), SpeedDistribution(y, wy))
            assert got == pytest.approx(lp_w1(x, wx, y, wy), abs=1e-9)

    def test_zero_mass(self):
        with pytest.raises(ValueError):
            wasserstein1(SpeedDistribution([]), SpeedDistribution([1.0]))
        with pytest.raises(ValueError):
            wasserstein1(SpeedDistribution([1.0], [0.0]), SpeedDistribution([1.0]))

    def test_negative_inputs(self):
        with pytest.raises(ValueError):
            SpeedDistribution([-0.1])
        with pytest.raises(ValueError):
            SpeedDistribution([0.1], [-1.0])

    def test_stderr_scale(self):
        rng = np.random.default_rng(1)
        ref = SpeedDistribution(rng.uniform(0, 1, 200_000))
        draws = [wasserstein1(SpeedDistribution(rng.uniform(0, 1, 2000)), ref) for _ in range(50)]
        se = w1_stderr(SpeedDistribution(rng.uniform(0, 1, 2000)))
        assert 0.6 * se < np.mean(draws) < 1.5 * se


samples = st.lists(st.floats(0.0, 10.0), min_size=1, max_size=12)


@settings(max_examples=150, deadline=None)
@given(a=samples, b=samples, c=samples)
def test_metric_axioms(a, b, c):
    p, q, r = (SpeedDistribution(np.array(v)) for v in (a, b, c))
    pq = wasserstein1(p, q)
    assert pq == pytest.approx(wasserstein1(q, p), abs=1e-12)
    assert wasserstein1(p, p) == 0.0
    assert pq <= wasserstein1(p, r) + wasserstein1(r, q) + 1e-9


def test_binomial_ci_contains_estimate():
    lo, hi = binomial_ci(30, 1000)
    assert lo < 0.03 < hi


class TestInvariants:
    def test_free_flight_passes(self):
        law = InitialLaw("uniform", low=0.5, high=1.0)
        res = run_micro_ensemble(constant_profile(), ModelParams(2, 0.05, 0.5, 0.0), law, 1.0, 300, 1, snapshot_times=[0.5])
        assert check_invariants(res).passed

    def test_injected_speed_increase_is_named(self):
        law = InitialLaw("point", speed=1.0)
        res = run_meso_ensemble(constant_profile(), ModelParams(2, 0.05, 0.5, 1.0), law, 1.0, 5000, 2, snapshot_times=[0.5])
        i = 4321
        moving = ~res.stopped[1, i]
        res.speed[1, i] = res.speed[0, i] + 0.1 if moving else 0.1
        res.stopped[1, i] = False
        rep = check_invariants(res)
        assert not rep.checks["speed_nonincreasing"].passed
        assert rep.checks["speed_nonincreasing"].offender == {"replica": i, "master_seed": 2, "block": 1, "offset": 225}
        assert "FAIL" in rep.summary()

    def test_micro_support_with_logs(self):
        law = InitialLaw("uniform", low=0.2, high=1.0)
        res = run_micro_ensemble(
            constant_profile(), ModelParams(2, 0.05, 0.5, 1.0), law, 1.5, 1000, 3, snapshot_times=[0.5, 1.0], keep_logs=True
        )
        rep = check_invariants(res, logs=res.extras["logs"])
        assert rep.passed, rep.summary()
        assert rep.checks["support"].margin <= 1.0

    def test_pure(self):
        law = InitialLaw("point", speed=1.0)
        res = run_meso_ensemble(constant_profile(), ModelParams(2, 0.05, 0.5, 1.0), law, 1.0, 500, 4)
        assert check_invariants(res).to_json() == check_invariants(res).to_json()
