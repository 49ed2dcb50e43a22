"""Online distributed stochastic primal-dual push-sum iteration.

Each player ``i`` keeps a decision ``x_i``, a push-sum weight ``z_i``, a
local multiplier ``mu_i`` and an aggregate tracker ``sigma_i``.  One round,
in order, for all players simultaneously:

1. weight mix        ``z_i+ = sum_j w_ij z_j``
2. dual/tracker mix  ``mu^_i = sum_j w_ij mu_j``, ``sigma^_i = sum_j w_ij sigma_j``
3. search direction  ``s_i = q_i(x_i, sigma^_i / z_i+, xi_i) + grad g_i(x_i) mu^_i / z_i+``
4. primal update     ``x_i+ = Proj_X_i(x_i - alpha_t s_i)``
5. dual update       ``mu_i+ = max(mu^_i + gamma_t (g_i(x_i) - beta_t mu^_i), 0)``
6. tracker update    ``sigma_i+ = sigma^_i + psi_i(x_i+) - psi_i(x_i)``
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import _core
from .game import GameModel, ScalarQuadraticGame
from .graph import CheckResult, GraphSchedule, ValidationReport, validate_schedule
from .metrics import MetricsLog

log = logging.getLogger(__name__)

UPDATE_LINES = ("weight mix", "dual/tracker mix", "search direction", "primal update", "dual update", "tracker update")
REGIMES = ("online-T1", "offline-T2", "offline-T3")
MONITOR_TOL = 1e-9


class DivergedRunError(FloatingPointError):
    def __init__(self, t: int, player: int, line: int):
        self.t, self.player, self.line = t, player, UPDATE_LINES[line]
        super().__init__(f"non-finite value at step {t}, player {player}, {self.line}")


class MonitorViolation(RuntimeError):
    pass


class PreconditionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# stepsizes


@dataclass(frozen=True)
class StepsizeSchedule:
    """Power-law stepsizes ``alpha_t = t^-a1``, ``beta_t = t^-a2``, ``gamma_t = t^-a3``.

    All three are 1 at ``t = 0``.
    """

    a1: float
    a2: float
    a3: float

    def __post_init__(self):
        for name in ("a1", "a2", "a3"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"exponent {name} must lie in [0, 1]")

    def _seq(self, a: float, T: int) -> np.ndarray:
        t = np.arange(T, dtype=float)
        t[0] = 1.0
        return t**-a

    def alpha(self, t: int) -> float:
        return 1.0 if t == 0 else float(t) ** -self.a1

    def beta(self, t: int) -> float:
        return 1.0 if t == 0 else float(t) ** -self.a2

    def gamma(self, t: int) -> float:
        return 1.0 if t == 0 else float(t) ** -self.a3

    def arrays(self, T: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(alpha, beta, gamma)`` for ``t = 0..T-1``."""
        return self._seq(self.a1, T), self._seq(self.a2, T), self._seq(self.a3, T)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.a1, self.a2, self.a3)


@dataclass(frozen=True)
class ExplicitSchedule:
    """Arbitrary stepsize sequences (entries in ``[0, 1]``), indexed from ``t = 0``."""

    alpha_seq: np.ndarray
    beta_seq: np.ndarray
    gamma_seq: np.ndarray

    def __post_init__(self):
        for name in ("alpha_seq", "beta_seq", "gamma_seq"):
            seq = np.asarray(getattr(self, name), dtype=float)
            if np.any(seq < 0) or np.any(seq > 1):
                raise ValueError(f"{name} must lie in [0, 1]")
            object.__setattr__(self, name, seq)

    def alpha(self, t):
        return float(self.alpha_seq[t])

    def beta(self, t):
        return float(self.beta_seq[t])

    def gamma(self, t):
        return float(self.gamma_seq[t])

    def arrays(self, T: int):
        if min(len(self.alpha_seq), len(self.beta_seq), len(self.gamma_seq)) < T:
            raise ValueError(f"explicit schedule shorter than horizon {T}")
        return self.alpha_seq[:T].copy(), self.beta_seq[:T].copy(), self.gamma_seq[:T].copy()


def validate_regime(schedule, regime: str) -> ValidationReport:
    """Check power-law exponents against the conditions of a convergence regime.

    ``online-T1`` and ``offline-T3`` need ``0 < a1, a3 < 1``,
    ``a1 > 2 a2 > 0`` and ``2 a2 + a3 < 1``.  ``offline-T2`` needs
    ``a1 = a3`` and the summability conditions ``sum alpha = inf``,
    ``sum alpha^2``, ``sum alpha^2/beta^2``, ``sum alpha beta`` and
    ``sum alpha^2/beta`` finite, i.e. ``a1 <= 1``, ``2 a1 > 1``,
    ``2 (a1 - a2) > 1``, ``a1 + a2 > 1`` and ``2 a1 - a2 > 1``.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    title = f"stepsize regime {regime}"
    if not isinstance(schedule, StepsizeSchedule):
        return ValidationReport(
            title, (CheckResult("power-law schedule", False, detail="explicit schedules cannot be regime-validated"),)
        )
    a1, a2, a3 = schedule.as_tuple()
    if regime in ("online-T1", "offline-T3"):
        conds = [
            ("0 < a1 < 1", 0 < a1 < 1, f"a1 = {a1:g}"),
            ("0 < a3 < 1", 0 < a3 < 1, f"a3 = {a3:g}"),
            ("a1 > 2a2 > 0", a1 > 2 * a2 > 0, f"{a1:g} vs 2a2 = {2 * a2:g}"),
            ("2a2 + a3 < 1", 2 * a2 + a3 < 1, f"2a2 + a3 = {2 * a2 + a3:g}"),
        ]
    else:
        conds = [
            ("alpha = gamma (a1 = a3)", a1 == a3, f"a1 = {a1:g}, a3 = {a3:g}"),
            ("sum alpha diverges (a1 <= 1)", a1 <= 1, f"a1 = {a1:g}"),
            ("sum alpha^2 < inf (2a1 > 1)", 2 * a1 > 1, f"2a1 = {2 * a1:g}"),
            ("sum alpha^2/beta^2 < inf (2(a1 - a2) > 1)", 2 * (a1 - a2) > 1, f"2(a1 - a2) = {2 * (a1 - a2):g}"),
            ("sum alpha beta < inf (a1 + a2 > 1)", a1 + a2 > 1, f"a1 + a2 = {a1 + a2:g}"),
            ("sum alpha^2/beta < inf (2a1 - a2 > 1)", 2 * a1 - a2 > 1, f"2a1 - a2 = {2 * a1 - a2:g}"),
        ]
    return ValidationReport(title, tuple(CheckResult(n, bool(ok), detail=d) for n, ok, d in conds))


# ---------------------------------------------------------------------------
# state


@dataclass(frozen=True)
class RunState:
    """Algorithm state at step ``t``; arrays have one row per player.

    ``muhat``, ``sighat`` and ``z_next`` cache the mixed quantities of the
    step that produced this state (``None`` right after :func:`init`).
    """

    t: int
    x: np.ndarray
    z: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    muhat: np.ndarray | None = None
    sighat: np.ndarray | None = None
    z_next: np.ndarray | None = None


def init(model: GameModel, x0=None) -> RunState:
    """Initial state: ``z = 1``, ``mu = 0``, ``sigma_i = psi_i(x_i)``.

    ``x0`` defaults to the projection of each local set's center.
    """
    if x0 is None:
        x = model.default_x0()
    else:
        x = np.asarray(x0, dtype=float).reshape(model.N, model.d)
        for i in range(model.N):
            if not model.sets[i].contains(x[i]):
                raise PreconditionError(f"x0 for player {i} is outside its local set")
        x = x.copy()
    return RunState(
        t=0,
        x=x,
        z=np.ones(model.N),
        mu=np.zeros((model.N, model.m)),
        sigma=model.batch_psi(x).astype(float),
    )


def _first_bad(arr) -> int | None:
    bad = ~np.isfinite(np.asarray(arr).reshape(arr.shape[0], -1)).all(axis=1)
    idx = np.flatnonzero(bad)
    return int(idx[0]) if idx.size else None


def step(state: RunState, W, schedule, model: GameModel, rng=None, xi=None) -> RunState:
    """One synchronous round of the iteration (generic reference path).

    Noise comes from ``xi`` (shape ``(N, q)``) if given, otherwise it is drawn
    from ``rng`` through the model's noise model; with neither the exact
    pseudo-gradient is used.
    """
    t = state.t
    W = np.asarray(W, dtype=float)
    al, be, ga = schedule.alpha(t), schedule.beta(t), schedule.gamma(t)
    if xi is None and rng is not None:
        xi = model.noise.sample(rng, (model.N, model.noise_dim))

    z_next = W @ state.z
    if (i := _first_bad(z_next)) is not None:
        raise DivergedRunError(t, i, 0)
    muhat = W @ state.mu
    sighat = W @ state.sigma
    for arr in (muhat, sighat):
        if (i := _first_bad(arr)) is not None:
            raise DivergedRunError(t, i, 1)

    zc = z_next[:, None]
    grad = model.batch_gradient(t, state.x, sighat / zc, xi)
    gval, gjac = model.batch_constraint(t, state.x)
    s = grad + np.einsum("idm,im->id", gjac, muhat / zc)
    if (i := _first_bad(s)) is not None:
        raise DivergedRunError(t, i, 2)
    x_next = model.batch_project(state.x - al * s)
    if (i := _first_bad(x_next)) is not None:
        raise DivergedRunError(t, i, 3)
    mu_next = np.maximum(muhat + ga * (gval - be * muhat), 0.0)
    if (i := _first_bad(mu_next)) is not None:
        raise DivergedRunError(t, i, 4)
    sig_next = sighat + model.batch_psi(x_next) - model.batch_psi(state.x)
    if (i := _first_bad(sig_next)) is not None:
        raise DivergedRunError(t, i, 5)
    return RunState(t + 1, x_next, z_next, mu_next, sig_next, muhat, sighat, z_next)


# ---------------------------------------------------------------------------
# full runs


def _run_generic(model, graphs, sched_arrays, xi, state0, T, log_):
    al, be, ga = sched_arrays
    sched = ExplicitSchedule(al, be, ga)
    state = state0
    for t in range(T):
        gval, _ = model.batch_constraint(t, state.x)
        log_.g[t] = gval
        state = step(state, graphs[t], sched, model, xi=xi[t])
        log_.x[t + 1] = state.x
        log_.z[t + 1] = state.z
        log_.mu[t + 1] = state.mu
        log_.sigma[t + 1] = state.sigma
        log_.muhat[t] = state.muhat
        log_.sighat[t] = state.sighat
    return state


def _run_kernel(model: ScalarQuadraticGame, graphs, sched_arrays, xi, T, log_, backend):
    kernel = _core.get_kernel(backend)
    al, be, ga = sched_arrays
    W = np.ascontiguousarray(graphs.matrices_for(T), dtype=float)
    coef = np.ascontiguousarray(model.coefficients(T), dtype=float)
    X = np.ascontiguousarray(log_.x[:, :, 0])
    Z = log_.z
    MU = np.ascontiguousarray(log_.mu[:, :, 0])
    SIG = np.ascontiguousarray(log_.sigma[:, :, 0])
    MUH = np.zeros((T, model.N))
    SIGH = np.zeros((T, model.N))
    G = np.zeros((T + 1, model.N))
    status = kernel(
        W,
        coef,
        np.ascontiguousarray(xi[:, :, 0]),
        al,
        be,
        ga,
        model.lo,
        model.hi,
        model.kappa,
        model.p0,
        model.price_slope,
        model.cap_share,
        X,
        Z,
        MU,
        SIG,
        MUH,
        SIGH,
        G,
    )
    if status is not None:
        raise DivergedRunError(*status)
    log_.x[:, :, 0] = X
    log_.mu[:, :, 0] = MU
    log_.sigma[:, :, 0] = SIG
    log_.muhat[:, :, 0] = MUH
    log_.sighat[:, :, 0] = SIGH
    log_.g[:T, :, 0] = G[:T]
    return RunState(T, log_.x[T].copy(), Z[T].copy(), log_.mu[T].copy(), log_.sigma[T].copy(),
                    log_.muhat[T - 1].copy(), log_.sighat[T - 1].copy(), Z[T].copy())


def run(
    model: GameModel,
    graphs: GraphSchedule,
    schedule,
    T: int,
    seed: int = 0,
    *,
    x0=None,
    monitors: str = "record",
    regime: str | None = None,
    backend: str = "auto",
    config_hash: str = "",
) -> tuple[RunState, MetricsLog]:
    """Execute ``T`` rounds and return the final state and the full log.

    Parameters
    ----------
    model, graphs, schedule
        Game, communication schedule and stepsizes.
    T : int
        Horizon, at least 4.
    seed : int
        Keys the noise streams ``xi_{i,t}``; together with the model and
        configuration this fixes the run bit-for-bit.
    monitors : {"record", "strict"}
        ``strict`` raises :class:`MonitorViolation` after the run if any
        invariant monitor failed.
    regime : str, optional
        If given, the schedule must pass :func:`validate_regime` for it.
    backend : {"auto", "compiled", "python", "generic"}
        Run loop for :class:`ScalarQuadraticGame`; other models always use
        the generic step.
    """
    if T < 4:
        raise PreconditionError(f"horizon T must be at least 4, got {T}")
    if monitors not in ("record", "strict"):
        raise ValueError("monitors must be 'record' or 'strict'")
    if graphs.N != model.N:
        raise PreconditionError(f"graph has {graphs.N} nodes but the game has {model.N} players")
    report = validate_schedule(graphs)
    if not report.ok:
        raise PreconditionError("graph schedule failed validation:\n" + report.format())
    if regime is not None:
        rep = validate_regime(schedule, regime)
        if not rep.ok:
            raise PreconditionError("stepsize schedule failed validation:\n" + rep.format())

    sched_arrays = schedule.arrays(T)
    xi = model.noise.draws(seed, model.N, T, model.noise_dim)
    state0 = init(model, x0)
    log_ = MetricsLog.allocate(model, T, seed=seed, config_hash=config_hash)
    log_.alpha, log_.beta, log_.gamma = sched_arrays
    log_.xi = xi
    log_.x[0], log_.z[0], log_.mu[0], log_.sigma[0] = state0.x, state0.z, state0.mu, state0.sigma
    log_.min_weight = graphs.min_weight

    if isinstance(model, ScalarQuadraticGame) and backend != "generic":
        log_.backend = backend if backend != "auto" else _core.BACKEND
        final = _run_kernel(model, graphs, sched_arrays, xi, T, log_, backend)
    else:
        log_.backend = "generic"
        W_all = [graphs[t] for t in range(T)] if not graphs.cyclic else [graphs.stack[t % graphs.period] for t in range(T)]
        final = _run_generic(model, W_all, sched_arrays, xi, state0, T, log_)
    log_.g[T] = model.batch_constraint(T, log_.x[T])[0]
    log_.noise_digest = hashlib.sha256(np.ascontiguousarray(xi).tobytes()).hexdigest()

    log_.monitors = lemma_monitors(log_, model)
    bad = {k: int((~v).sum()) for k, v in log_.monitors.items() if not v.all()}
    if bad:
        log.warning("monitor violations: %s", bad)
        if monitors == "strict":
            raise MonitorViolation(f"monitor violations: {bad}")
    return final, log_


def lemma_monitors(log_: MetricsLog, model: GameModel, tol: float = MONITOR_TOL) -> dict[str, np.ndarray]:
    """Per-step invariant checks on a finished run.

    ``z_bounds`` (``r <= z_i <= N``), ``mu_bound`` and ``muhat_bound`` (the
    dual bounds scaled by ``z_{i,t+1} L / (beta_t r^2)``, the former divided
    by the minimum weight), ``z_sum`` (push-sum mass) and
    ``sigma_conservation`` (tracker mass equals ``sum_i psi_i(x_i)``).  ``r``
    is the running minimum of all push-sum weights seen so far, which is never
    below the true infimum over the elapsed horizon.  Dual bounds are skipped
    when the model declares no ``L``.
    """
    N, T = model.N, log_.T
    r_run = np.minimum.accumulate(np.minimum(log_.z.min(axis=1), 1.0))
    log_.r_estimate = r_run
    out = {}
    out["z_bounds"] = np.all(
        (log_.z >= r_run[:, None] * (1 - tol)) & (log_.z <= N * (1 + tol)), axis=1
    )
    out["z_sum"] = np.abs(log_.z.sum(axis=1) - N) <= tol * N
    psi_sum = np.stack([model.batch_psi(log_.x[t]).sum(axis=0) for t in range(T + 1)]) if not isinstance(
        model, ScalarQuadraticGame
    ) else model.kappa * log_.x.sum(axis=1)
    sig_sum = log_.sigma.sum(axis=1)
    scale = np.maximum(1.0, np.linalg.norm(psi_sum, axis=1))
    out["sigma_conservation"] = np.linalg.norm(sig_sum - psi_sum, axis=1) <= tol * scale
    L = model.constants.L
    if L is not None:
        r = r_run[1:]
        zn = log_.z[1:]
        cap_hat = zn * L / (log_.beta[:, None] * r[:, None] ** 2)
        mu_norm = np.linalg.norm(log_.mu[:T], axis=2)
        muhat_norm = np.linalg.norm(log_.muhat, axis=2)
        out["mu_bound"] = np.all(mu_norm <= cap_hat / log_.min_weight * (1 + tol), axis=1)
        out["muhat_bound"] = np.all(muhat_norm <= cap_hat * (1 + tol), axis=1)
    return out
