import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pushsum_gne.engine import StepsizeSchedule, run
from pushsum_gne.game import NoiseModel, make_electricity_market, make_quadratic_toy
from pushsum_gne.graph import paper_fig1
from pushsum_gne.metrics import (
    SUMMARY_HEADER,
    MetricsLog,
    checkpoints,
    consensus_error,
    consensus_errors,
    hp_quantile_check,
    lemma_bound,
    rate_fit,
    regret,
    regret_report,
    residuals,
    timeseries_header,
    violation,
    write_summary_csv,
    write_timeseries_csv,
)
from pushsum_gne.solvers import ComparatorSolution, solve_comparator


# -- violation ---------------------------------------------------------------------


def test_violation_fully_compensated():
    assert violation(np.array([[1.0, -2.0], [-1.0, 1.0]]))[-1] == 0.0


def test_violation_one_sided_clip():
    assert violation(np.array([[3.0, -4.0]]))[-1] == 3.0


def test_violation_three_four_five():
    assert violation(np.array([[3.0, 4.0]]))[-1] == 5.0


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.lists(st.floats(-10, 10), min_size=2, max_size=2), min_size=1, max_size=20),
    st.lists(st.floats(-10, 0), min_size=2, max_size=2),
)
def test_violation_nonnegative_and_feasible_steps_never_increase(steps, extra):
    vals = np.array(steps)
    rg = violation(vals)
    assert np.all(rg >= 0)
    more = violation(np.vstack([vals, extra]))
    assert more[-1] <= rg[-1] + 1e-12


def test_log_violation_uses_rounds_one_to_T(market, fig1):
    _, lg = run(market, fig1, StepsizeSchedule(0.8, 0.2, 0.2), 64, seed=0)
    g = lg.g.sum(axis=1)[1:]
    assert np.array_equal(violation(lg), np.linalg.norm(np.maximum(np.cumsum(g, axis=0), 0), axis=1))


# -- consensus errors -----------------------------------------------------------------


def test_consensus_zero_at_exact_consensus():
    base = np.full((3, 4, 1), 2.5)
    assert np.all(consensus_error(base.copy(), np.ones((3, 4)), base) == 0)


def test_consensus_hand_example():
    W = np.array([[1.0, 0.5], [0.0, 0.5]])
    mu = np.array([[1.0], [3.0]])
    z_next = W @ np.ones(2)
    muhat = W @ mu
    err = consensus_error(muhat[None], z_next[None], mu[None])
    # mu~ = (2.5 / 1.5, 1.5 / 0.5) = (5/3, 3), mean mu = 2
    assert err[0] == pytest.approx(1 / 3 + 1, abs=1e-15)


def test_consensus_permutation_symmetric(market, fig1):
    _, lg = run(market, fig1, StepsizeSchedule(0.8, 0.2, 0.2), 50, seed=0)
    mu_e, sig_e = consensus_errors(lg)
    perm = np.array([3, 0, 4, 1, 2])
    zn = lg.z[1:]
    assert np.allclose(consensus_error(lg.sighat[:, perm], zn[:, perm], lg.sigma[:50, perm]), sig_e, rtol=1e-13)
    assert np.allclose(consensus_error(lg.muhat[:, perm], zn[:, perm], lg.mu[:50, perm]), mu_e, rtol=1e-13, atol=1e-300)


# -- residuals ---------------------------------------------------------------------


def fake_log(xs):
    xs = np.asarray(xs, dtype=float)
    T = xs.shape[0] - 1
    m = make_quadratic_toy(N=xs.shape[1])
    lg = MetricsLog.allocate(m, T)
    lg.x[:, :, 0] = xs
    return lg


def test_residuals_zero_at_solution():
    x_star = np.array([0.5, -1.0])
    per, avg = residuals(fake_log(np.tile(x_star, (5, 1))), x_star)
    assert np.all(per == 0) and np.all(avg == 0)


def test_residuals_symmetric_pair():
    x_star = np.array([1.0, 1.0])
    per, avg = residuals(fake_log([[0, 0], [2.0, 1.0], [0.0, 1.0]]), x_star)
    assert per[1] > 0 and per[2] > 0
    assert avg[1] == 0.0


def test_residuals_scripted_hand_values():
    x_star = np.array([0.0, 0.0])
    per, avg = residuals(fake_log([[9, 9], [3.0, 4.0], [1.0, 0.0], [-1.0, 2.0]]), x_star)
    assert per.tolist() == pytest.approx([math.hypot(9, 9), 5.0, 1.0, math.sqrt(5)])
    # running means: (3,4), (2,2), (1,2)
    assert avg.tolist() == pytest.approx([25.0, 8.0, 5.0])


def test_residuals_dimension_mismatch():
    with pytest.raises(ValueError, match="entries"):
        residuals(fake_log([[0, 0], [1, 1]]), np.zeros(3))


# -- rate fits -------------------------------------------------------------------


def test_rate_fit_power_law():
    t = np.arange(1, 10_001)
    slope, _, r2 = rate_fit(3.0 * t**-0.25)
    assert abs(slope + 0.25) <= 1e-9 and r2 == pytest.approx(1.0)


def test_rate_fit_constant():
    assert rate_fit(np.full(100, 4.2))[0] == pytest.approx(0.0, abs=1e-12)


def test_rate_fit_noisy_inverse():
    rng = np.random.default_rng(0)
    t = np.arange(1, 1001)
    y = 2.0 / t + 1e-6 * rng.standard_normal(t.size)
    slope, _, _ = rate_fit(y, t_min=1, t=t)
    assert abs(slope + 1) <= 1e-2


def test_rate_fit_burn_in_and_nonpositive_warning():
    y = np.r_[np.zeros(3), 1.0 / np.arange(4, 104)]
    with pytest.warns(UserWarning, match="coverage"):
        slope, _, _ = rate_fit(y)
    assert slope == pytest.approx(-1.0, abs=1e-9)
    slope, _, _ = rate_fit(y, t_min=4)
    assert slope == pytest.approx(-1.0, abs=1e-9)


# -- regret ------------------------------------------------------------------------


def test_regret_zero_for_constant_comparator_trajectory():
    m = make_electricity_market(seed=1)
    lg = MetricsLog.allocate(m, 6)
    rng = np.random.default_rng(0)
    lg.x[:, :, 0] = rng.uniform(0, 5, (7, 5))
    lg.x[:, 2, 0] = 1.7
    comp = ComparatorSolution(2, np.array([1.7]), 0.0, True, 1)
    assert regret(lg, comp, 2, m).regret == 0.0


def test_regret_toy_hand_sum():
    m = make_quadratic_toy(N=2, seed=6, cap=1.0, time_varying=True)
    traj = np.array([[0.5, 1.2], [-0.3, 0.9], [0.8, -0.4]])
    lg = MetricsLog.allocate(m, 3)
    lg.x[1:, :, 0] = traj
    comp = solve_comparator(m, traj, 0)
    xs = comp.x_star[0]
    total = 0.0
    for k, t in enumerate((1, 2, 3)):
        a, b, c = m.coef(t)[0, :3]
        x = traj[k, 0]
        total += (a + b * x + c * x * x) - (a + b * xs + c * xs * xs)
    assert regret(lg, comp, 0, m).regret == pytest.approx(total, abs=1e-12)


def test_regret_replay_bit_exact(tmp_path, market, fig1):
    _, lg = run(market, fig1, StepsizeSchedule(0.8, 0.2, 0.2), 256, seed=3)
    comp = solve_comparator(market, lg.x[1:], 1)
    before = regret(lg, comp, 1, market).regret
    path = lg.save(tmp_path / "log.npz")
    again = MetricsLog.load(path)
    fresh = make_electricity_market(N=5, seed=0)
    assert regret(again, solve_comparator(fresh, again.x[1:], 1), 1, fresh).regret == before


def test_regret_report_flags_infeasible_comparator(market, fig1):
    _, lg = run(market, fig1, StepsizeSchedule(0.8, 0.2, 0.2), 512, seed=0)
    rep = regret_report(lg, market, checkpoints(512, start=8))
    assert rep.checkpoints.tolist() == [256, 512]
    assert rep.regret.shape == (2, 5)
    assert np.all(rep.violation >= 0)
    assert any("infeasible" in s for s in rep.comparator_status[0])


def test_checkpoints():
    assert checkpoints(100, start=4).tolist() == [16, 32, 64, 100]
    assert checkpoints(64, start=5).tolist() == [32, 64]


# -- high-probability check ----------------------------------------------------------


def _batch(model, K, T=64):
    g = paper_fig1(model.N)
    return [(run(model, g, StepsizeSchedule(0.8, 0.2, 0.2), T, seed=k)[1], model) for k in range(K)]


def test_hp_check_needs_enough_runs():
    m = make_electricity_market()
    with pytest.raises(ValueError, match="at least 50"):
        hp_quantile_check(_batch(m, 3), 0.05, lambda d, lg: 1.0)


def test_hp_zero_noise_never_exceeds():
    m = make_electricity_market(noise=NoiseModel())
    rep = hp_quantile_check(_batch(m, 50), 0.05, lambda d, lg: lemma_bound(lg, m.constants.L, 1.0, d))
    assert np.all(rep.sums == 0)
    assert np.all(rep.bounds > 0)
    assert np.all(rep.fractions == 0) and rep.passed


def test_hp_delta_one_passes_vacuously():
    m = make_electricity_market()
    rep = hp_quantile_check(_batch(m, 50), 1.0, lambda d, lg: 0.0)
    assert rep.tolerance >= 1.0 and rep.passed


# -- persistence and CSV --------------------------------------------------------------


def test_log_round_trip(tmp_path, market, fig1):
    _, lg = run(market, fig1, StepsizeSchedule(0.8, 0.2, 0.2), 40, seed=2, config_hash="abc")
    back = MetricsLog.load(lg.save(tmp_path / "l.npz"))
    assert back.equals(lg)
    assert back.config_hash == "abc"


def test_timeseries_csv_layout(tmp_path, market, fig1):
    _, lg = run(market, fig1, StepsizeSchedule(0.8, 0.2, 0.2), 20, seed=2)
    path = write_timeseries_csv(lg, tmp_path / "ts.csv")
    rows = list(csv.reader(path.open()))
    assert rows[0] == timeseries_header(lg)
    assert rows[0][:7] == ["t", "x_0", "x_1", "x_2", "x_3", "x_4", "g_0"]
    assert "mu_consensus_error" in rows[0] and "monitor_z_sum" in rows[0]
    assert len(rows) == 22
    assert float(rows[1][1]) == lg.x[0, 0, 0]


def test_summary_csv_header(tmp_path, market, fig1):
    _, lg = run(market, fig1, StepsizeSchedule(0.8, 0.2, 0.2), 64, seed=0)
    rep = regret_report(lg, market, [32, 64])
    path = write_summary_csv([(0, 0, rep)], tmp_path / "s.csv")
    rows = list(csv.reader(path.open()))
    assert rows[0] == SUMMARY_HEADER
    assert len(rows) == 1 + 2 * 5
