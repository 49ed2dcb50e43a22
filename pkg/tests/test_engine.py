import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pushsum_gne import _core
from pushsum_gne.engine import (
    DivergedRunError,
    ExplicitSchedule,
    MonitorViolation,
    PreconditionError,
    StepsizeSchedule,
    init,
    run,
    step,
    validate_regime,
)
from pushsum_gne.game import Box, CallableGame, DeclaredConstants, NoiseModel, ScalarQuadraticGame, make_quadratic_toy
from pushsum_gne.graph import GraphSchedule, build_weights, complete_graph, paper_fig1, theta_ceiling

ONES = StepsizeSchedule(0.5, 0.2, 0.2)  # all stepsizes equal 1 at t = 0


def scalar_game(N, grad, con, lo=-1.0, hi=1.0, **kw):
    return CallableGame(
        N,
        [Box(lo, hi) for _ in range(N)],
        cost=lambda i, t, x, s: 0.0,
        gradient=grad,
        constraint=con,
        **kw,
    )


# -- init ----------------------------------------------------------------------


def test_init_defaults(market):
    s = init(market)
    assert np.array_equal(s.x, np.full((5, 1), 10.0))
    assert np.array_equal(s.sigma, market.batch_psi(s.x))
    assert s.z.sum() == 5 and np.all(s.mu == 0)


def test_init_rejects_infeasible_x0(market):
    with pytest.raises(PreconditionError, match="player 3"):
        init(market, [1, 2, 3, 25, 4])


# -- one step ----------------------------------------------------------------------


def test_single_player_hand_step():
    g = scalar_game(1, grad=lambda i, t, x, y: x, con=lambda i, t, x: (np.array([-1.0]), np.zeros((1, 1))))
    s1 = step(init(g, [1.0]), [[1.0]], ONES, g)
    assert s1.x[0, 0] == 0.0
    assert s1.mu[0, 0] == 0.0
    assert s1.z[0] == 1.0
    assert s1.sigma[0, 0] == 0.0  # psi = identity tracks x_1


def test_zero_increments_fixed_point():
    g = scalar_game(3, grad=lambda i, t, x, y: np.zeros(1), con=lambda i, t, x: (np.zeros(1), np.zeros((1, 1))))
    W = np.full((3, 3), 1 / 3)
    s0 = init(g, [0.2, -0.4, 0.9])
    s = s0
    for _ in range(5):
        s = step(s, W, ONES, g)
    assert np.array_equal(s.x, s0.x)
    assert np.array_equal(s.z, s0.z)
    assert np.allclose(s.sigma, s0.sigma.mean())


def straight_line_step(C, W, x, z, mu, sig, al, be, ga, lo, hi, cap_share):
    """Hand transcription of one round for the toy family (N scalar players, no price term)."""
    N = len(x)
    zn = [sum(W[i][j] * z[j] for j in range(N)) for i in range(N)]
    mh = [sum(W[i][j] * mu[j] for j in range(N)) for i in range(N)]
    sh = [sum(W[i][j] * sig[j] for j in range(N)) for i in range(N)]
    xn, mn, sn = [], [], []
    for i in range(N):
        a, b, c, r, u, v = C[i]
        q = b + 2 * c * x[i]  # cost b x + c x^2, no aggregate dependence
        gv = r + u * x[i] + v * x[i] ** 2 - cap_share
        gj = u + 2 * v * x[i]
        s = q + gj * mh[i] / zn[i]
        xn.append(min(max(x[i] - al * s, lo), hi))
        mn.append(max(mh[i] + ga * (gv - be * mh[i]), 0.0))
        sn.append(sh[i] + xn[i] - x[i])
    return xn, zn, mn, sn


def test_one_step_matches_straight_line_transcription():
    m = make_quadratic_toy(N=2, seed=5, cap=-1.0, noise=NoiseModel())
    W = np.array([[2 / 3, 0.5], [1 / 3, 0.5]])
    sched = StepsizeSchedule(0.8, 0.2, 0.2)
    x0 = [1.5, -2.0]
    s = init(m, x0)
    # advance to t = 3 so all stepsizes differ from 1
    s = s.__class__(3, s.x, s.z * np.array([0.8, 1.2]), np.array([[0.4], [0.1]]), s.sigma + np.array([[0.3], [-0.3]]))
    s1 = step(s, W, sched, m)
    C = m.coef(0).tolist()
    xn, zn, mn, sn = straight_line_step(
        C, W.tolist(), [1.5, -2.0], [0.8, 1.2], [0.4, 0.1], [1.8, -2.3],
        3**-0.8, 3**-0.2, 3**-0.2, -5.0, 5.0, m.cap_share,
    )
    assert np.allclose(s1.x[:, 0], xn, atol=1e-12, rtol=0)
    assert np.allclose(s1.z, zn, atol=1e-12, rtol=0)
    assert np.allclose(s1.mu[:, 0], mn, atol=1e-12, rtol=0)
    assert np.allclose(s1.sigma[:, 0], sn, atol=1e-12, rtol=0)


# -- stepsizes and regimes ----------------------------------------------------------


def test_stepsizes_start_at_one_and_decrease():
    al, be, ga = StepsizeSchedule(0.8, 0.2, 0.2).arrays(1000)
    for seq in (al, be, ga):
        assert seq[0] == 1.0 and seq[1] == 1.0
        assert np.all(seq > 0) and np.all(seq <= 1) and np.all(np.diff(seq) <= 0)
    assert al[10] == pytest.approx(10**-0.8)


@pytest.mark.parametrize(
    "a,regime,ok",
    [
        ((0.8, 0.2, 0.2), "online-T1", True),
        ((0.75, 0.25, 0.25), "offline-T3", True),
        ((0.9, 0.3, 0.9), "offline-T2", True),
        ((0.5, 0.3, 0.2), "online-T1", False),
        ((0.8, 0.2, 0.2), "offline-T2", False),
    ],
)
def test_regime_worked_examples(a, regime, ok):
    assert validate_regime(StepsizeSchedule(*a), regime).ok is ok


def test_regime_failure_names_condition():
    rep = validate_regime(StepsizeSchedule(0.5, 0.3, 0.2), "online-T1")
    assert [c.name for c in rep.failures()] == ["a1 > 2a2 > 0"]


def test_explicit_schedule_not_regime_checked():
    rep = validate_regime(ExplicitSchedule(np.ones(5), np.ones(5), np.ones(5)), "online-T1")
    assert not rep.ok


def test_unknown_regime():
    with pytest.raises(ValueError, match="unknown regime"):
        validate_regime(StepsizeSchedule(0.8, 0.2, 0.2), "T4")


# -- run ---------------------------------------------------------------------


def test_run_rejects_short_horizon(market, fig1):
    with pytest.raises(PreconditionError, match="at least 4"):
        run(market, fig1, StepsizeSchedule(0.8, 0.2, 0.2), 3)


def test_run_rejects_invalid_regime(market, fig1):
    with pytest.raises(PreconditionError, match="a1 > 2a2"):
        run(market, fig1, StepsizeSchedule(0.5, 0.3, 0.2), 10, regime="online-T1")


def test_run_rejects_disconnected_graph(market):
    sched = GraphSchedule([np.eye(5)], window=1)
    with pytest.raises(PreconditionError, match="strongly connected"):
        run(market, sched, StepsizeSchedule(0.8, 0.2, 0.2), 10)


def test_run_is_deterministic(market, fig1):
    s = StepsizeSchedule(0.8, 0.2, 0.2)
    _, a = run(market, fig1, s, 500, seed=4)
    _, b = run(market, fig1, s, 500, seed=4)
    _, c = run(market, fig1, s, 500, seed=5)
    assert a.equals(b)
    assert not a.equals(c)


@pytest.mark.skipif(_core.BACKEND != "compiled", reason="compiled kernel not built")
@pytest.mark.parametrize("time_varying", [True, False])
def test_backends_agree(time_varying, fig1):
    from pushsum_gne.game import make_electricity_market

    m = make_electricity_market(seed=2, time_varying=time_varying)
    s = StepsizeSchedule(0.8, 0.2, 0.2)
    logs = {b: run(m, fig1, s, 400, seed=8, backend=b)[1] for b in ("compiled", "python", "generic")}
    for k in ("x", "z", "mu", "sigma", "muhat", "sighat", "g"):
        ref = getattr(logs["generic"], k)
        for b in ("compiled", "python"):
            assert np.allclose(getattr(logs[b], k), ref, atol=1e-12, rtol=1e-12), (b, k)


def test_python_kernel_agrees_with_generic_step(fig1):
    m = make_quadratic_toy(N=5, seed=1, cap=-3.0, time_varying=True)
    s = StepsizeSchedule(0.75, 0.25, 0.25)
    _, a = run(m, fig1, s, 300, seed=2, backend="python")
    _, b = run(m, fig1, s, 300, seed=2, backend="generic")
    for k in ("x", "z", "mu", "sigma"):
        assert np.allclose(getattr(a, k), getattr(b, k), atol=1e-12, rtol=1e-12)


def test_invariants_along_run(market, fig1):
    _, lg = run(market, fig1, StepsizeSchedule(0.8, 0.2, 0.2), 2000, seed=1)
    assert np.all(lg.x >= 0) and np.all(lg.x <= 20)
    assert np.all(lg.mu >= 0)
    for name, flags in lg.monitors.items():
        assert flags.all(), name
    assert np.all(np.diff(lg.r_estimate) <= 0)


def test_doubly_stochastic_keeps_weights_at_one(market):
    _, lg = run(market, complete_graph(5), StepsizeSchedule(0.8, 0.2, 0.2), 200, seed=0)
    assert np.all(lg.z == 1.0)


def test_zero_noise_reduces_to_deterministic_iteration(fig1):
    m = make_quadratic_toy(N=5, seed=3, cap=-2.0, noise=NoiseModel())
    T = 200
    s = StepsizeSchedule(0.8, 0.2, 0.2)
    _, lg = run(m, fig1, s, T, seed=99)
    al, be, ga = s.arrays(T)
    C = m.coef(0).tolist()
    x = [0.0] * 5
    z = [1.0] * 5
    mu = [0.0] * 5
    sig = list(x)
    for t in range(T):
        x, z, mu, sig = straight_line_step(C, fig1[t].tolist(), x, z, mu, sig, al[t], be[t], ga[t], -5.0, 5.0, m.cap_share)
    assert np.allclose(lg.x[T, :, 0], x, atol=1e-12, rtol=0)
    assert np.allclose(lg.mu[T, :, 0], mu, atol=1e-12, rtol=0)


def test_consensus_errors_decay_at_most_at_ceiling_rate(fig1):
    from pushsum_gne.game import make_electricity_market
    from pushsum_gne.metrics import consensus_error

    market = make_electricity_market(cap=40.0)  # active constraint keeps the duals nonzero
    T, t0 = 400, 50
    al, be, ga = StepsizeSchedule(0.8, 0.2, 0.2).arrays(T)
    al[t0:] = 0.0
    ga[t0:] = 0.0
    _, lg = run(market, fig1, ExplicitSchedule(al, be, ga), T, seed=0)
    zn = lg.z[1:]
    for hat, base in ((lg.muhat, lg.mu[:T]), (lg.sighat, lg.sigma[:T])):
        ratio = hat / zn[:, :, None]
        err = np.abs(ratio - base.mean(axis=1, keepdims=True)).max(axis=(1, 2))[t0:]
        scale = np.abs(base[t0]).max() + 1e-300
        keep = err > 1e-11 * scale
        tt = np.arange(err.size)[keep]
        assert tt.size > 20
        rate = np.exp(np.polyfit(tt, np.log(err[keep]), 1)[0])
        assert rate < 1
        assert rate <= theta_ceiling(5, 4)
        assert consensus_error(hat, zn, base)[-1] <= 1e-9 * (1 + scale)


# -- failures -------------------------------------------------------------------


def test_divergence_names_player_step_and_line():
    def grad(i, t, x, y):
        return np.array([np.nan]) if (i == 1 and t == 5) else x

    g = scalar_game(2, grad=grad, con=lambda i, t, x: (np.array([-1.0]), np.zeros((1, 1))))
    with pytest.raises(DivergedRunError) as exc:
        run(g, complete_graph(2), StepsizeSchedule(0.8, 0.2, 0.2), 10)
    assert (exc.value.t, exc.value.player, exc.value.line) == (5, 1, "search direction")


@pytest.mark.parametrize("backend", ["python", "generic"] + (["compiled"] if _core.BACKEND == "compiled" else []))
def test_kernel_divergence_reported(backend):
    tab = np.tile([0.0, 0.0, 1.0, 0.0, 1.0, 0.0], (20, 3, 1))
    tab[7, 2, 1] = np.inf
    m = ScalarQuadraticGame(3, table=tab, lo=-1, hi=1)
    with pytest.raises(DivergedRunError) as exc:
        run(m, complete_graph(3), StepsizeSchedule(0.8, 0.2, 0.2), 20, backend=backend)
    assert (exc.value.t, exc.value.player, exc.value.line) == (7, 2, "search direction")


def test_strict_monitors_raise_and_record_mode_records():
    m = make_quadratic_toy(N=2, cap=-8.0, noise=NoiseModel())
    m.constants = DeclaredConstants(L=1e-9, M=1.0, S=1.0, L_sigma=1.0)
    sched = StepsizeSchedule(0.8, 0.2, 0.2)
    _, lg = run(m, complete_graph(2), sched, 50)
    assert not lg.monitors["mu_bound"].all()
    with pytest.raises(MonitorViolation, match="mu_bound"):
        run(m, complete_graph(2), sched, 50, monitors="strict")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 6))
def test_mass_conservation_random_graphs(seed, N):
    rng = np.random.default_rng(seed)
    mats = []
    for _ in range(3):
        A = (rng.random((N, N)) < 0.3) | np.eye(N, dtype=bool)
        mats.append(build_weights(A))
    ring = np.eye(N, dtype=bool)
    for k in range(N):
        ring[(k + 1) % N, k] = True
    mats.append(build_weights(ring))
    m = make_quadratic_toy(N=N, seed=seed % 1000, cap=-1.0, time_varying=True)
    _, lg = run(m, GraphSchedule(mats, window=4), StepsizeSchedule(0.8, 0.2, 0.2), 60, seed=seed)
    assert np.allclose(lg.z.sum(axis=1), N, rtol=1e-12)
    assert np.allclose(lg.sigma.sum(axis=(1, 2)), lg.x.sum(axis=(1, 2)), atol=1e-9)
    assert lg.monitors["z_bounds"].all()
