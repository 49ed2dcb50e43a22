"""Centralized reference solutions used only for evaluation.

* :func:`solve_vgne` -- variational equilibrium of a time-invariant game by a
  full-information extragradient method on the KKT operator, optionally
  cross-checked by :func:`grid_vgne` (brute-force grid refinement).
* :func:`solve_comparator` -- best fixed decision in hindsight for one player
  given the others' recorded decisions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .game import GameModel, ScalarQuadraticGame

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class SolverError(RuntimeError):
    def __init__(self, msg: str, trace=None):
        super().__init__(msg)
        self.trace = trace


# ---------------------------------------------------------------------------
# variational GNE


@dataclass
class VgneSolution:
    x_star: np.ndarray
    mu_star: np.ndarray
    residuals: dict
    method: str
    iterations: int = 0
    tol: float = 0.0
    cross_check: dict | None = None
    trace: list = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "x_star": self.x_star.reshape(-1).tolist(),
            "mu_star": self.mu_star.tolist(),
            "residuals": self.residuals,
            "method": self.method,
            "iterations": self.iterations,
            "tol": self.tol,
            "cross_check": self.cross_check,
        }


def _kkt_operator(model: GameModel, X, mu):
    agg = model.aggregate(X)
    Y = np.broadcast_to(agg, (model.N, model.n))
    grad = model.batch_gradient(0, X, Y)
    gval, gjac = model.batch_constraint(0, X)
    Fx = grad + np.einsum("idm,m->id", gjac, mu)
    Fmu = -gval.sum(axis=0)
    return Fx, Fmu, gval.sum(axis=0)


def kkt_residuals(model: GameModel, X, mu) -> dict:
    """Natural-map residuals of the vGNE conditions (unit probe step).

    ``primal``: ``||x - Proj_X(x - F_x)||``; ``dual``: ``||mu - [mu + g]_+||``;
    ``complementarity``: ``|<mu, g(x)>|``; ``infeasibility``: ``||[g(x)]_+||``.
    """
    X = np.asarray(X, dtype=float).reshape(model.N, model.d)
    mu = np.asarray(mu, dtype=float).reshape(model.m)
    Fx, _, g = _kkt_operator(model, X, mu)
    primal = float(np.linalg.norm(X - model.batch_project(X - Fx)))
    dual = float(np.linalg.norm(mu - np.maximum(mu + g, 0.0)))
    return {
        "primal": primal,
        "dual": dual,
        "complementarity": float(abs(mu @ g)),
        "infeasibility": float(np.linalg.norm(np.maximum(g, 0.0))),
        "total": math.hypot(primal, dual),
    }


def solve_vgne(
    model: GameModel,
    tol: float = 1e-10,
    max_iters: int = 200_000,
    *,
    step: float | None = None,
    x0=None,
    cross_check: bool | None = None,
    grid_tol: float = 1e-5,
) -> VgneSolution:
    """Variational GNE of a time-invariant game.

    Runs the extragradient method with Khobotov backtracking on the monotone
    operator ``(x, mu) -> (p(x, sigma(x)) + grad g(x) mu, -g(x))`` over
    ``X x R^m_+`` using exact gradients, until the natural-map residual is at
    most ``tol``.

    ``cross_check=None`` runs :func:`grid_vgne` automatically for scalar
    decisions with ``N <= 6``; the result is stored on the solution.

    Raises
    ------
    SolverError
        If the residual does not reach ``tol`` within ``max_iters``.
    """
    if model.time_varying:
        raise ValueError("solve_vgne needs a time-invariant game")
    X = model.default_x0() if x0 is None else np.asarray(x0, dtype=float).reshape(model.N, model.d)
    mu = np.zeros(model.m)
    eta = 1.0 if step is None else float(step)
    nu = 0.9
    trace = []
    res = kkt_residuals(model, X, mu)["total"]
    it = 0
    while res > tol:
        if it >= max_iters:
            raise SolverError(f"extragradient stalled at residual {res:.3e} after {it} iterations", trace)
        Fx, Fmu, _ = _kkt_operator(model, X, mu)
        while True:
            Xh = model.batch_project(X - eta * Fx)
            muh = np.maximum(mu - eta * Fmu, 0.0)
            Fxh, Fmuh, _ = _kkt_operator(model, Xh, muh)
            dw = math.sqrt(np.sum((X - Xh) ** 2) + np.sum((mu - muh) ** 2))
            dF = math.sqrt(np.sum((Fx - Fxh) ** 2) + np.sum((Fmu - Fmuh) ** 2))
            if step is not None or eta * dF <= nu * dw or dw == 0.0:
                break
            eta *= 0.5
        X = model.batch_project(X - eta * Fxh)
        mu = np.maximum(mu - eta * Fmuh, 0.0)
        it += 1
        res = kkt_residuals(model, X, mu)["total"]
        trace.append(res)
        if step is None and dw > 0 and eta * dF < 0.3 * dw:
            eta *= 1.2
    sol = VgneSolution(X, mu, kkt_residuals(model, X, mu), "extragradient", it, tol, trace=trace)
    if cross_check is None:
        cross_check = model.d == 1 and model.N <= 6 and model.m == 1
    if cross_check:
        gx, gmu = grid_vgne(model, tol=grid_tol)
        sol.cross_check = {
            "method": "grid-refinement",
            "x_grid": gx.reshape(-1).tolist(),
            "mu_grid": gmu.tolist(),
            "max_abs_diff": float(np.max(np.abs(gx.reshape(X.shape) - X))),
        }
    return sol


def stationarity_gap(model: GameModel, sol: VgneSolution, eta: float) -> float:
    """``max_i ||x_i - Proj(x_i - eta (p_i + grad g_i mu))||`` at the solution."""
    Fx, _, _ = _kkt_operator(model, sol.x_star, sol.mu_star)
    return float(np.max(np.abs(sol.x_star - model.batch_project(sol.x_star - eta * Fx))))


# -- brute-force grid oracle -------------------------------------------------


def _field_points(model: GameModel, P: np.ndarray, mu: float) -> np.ndarray:
    """Penalized pseudo-gradient at many joint scalar decisions, shape ``(k, N)``."""
    if isinstance(model, ScalarQuadraticGame):
        C = model.coef(0)
        b, c, u, v = C[:, 1], C[:, 2], C[:, 4], C[:, 5]
        y = model.kappa * P.mean(axis=1, keepdims=True)
        p = b + 2 * c * P - model.p0 + model.price_slope * y + model.kappa / model.N * model.price_slope * P
        return p + (u + 2 * v * P) * mu
    out = np.empty_like(P)
    for k in range(P.shape[0]):
        Fx, _, _ = _kkt_operator(model, P[k][:, None], np.array([mu]))
        out[k] = Fx[:, 0]
    return out


def _grid_equilibrium(model: GameModel, mu: float, tol: float, eta: float) -> np.ndarray:
    N = model.N
    lo = np.array([s.lo[0] for s in model.sets])
    hi = np.array([s.hi[0] for s in model.sets])
    pts = {1: 201, 2: 61, 3: 25, 4: 13, 5: 9, 6: 7}[N]
    blo, bhi = lo.copy(), hi.copy()
    while True:
        axes = [np.linspace(blo[k], bhi[k], pts) for k in range(N)]
        P = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, N)
        R = np.sum((P - np.clip(P - eta * _field_points(model, P, mu), lo, hi)) ** 2, axis=1)
        best = P[np.argmin(R)]
        spacing = (bhi - blo) / (pts - 1)
        if np.all(spacing <= tol):
            return best
        half = 2.0 * spacing
        edge = (np.isclose(best, blo) & (blo > lo)) | (np.isclose(best, bhi) & (bhi < hi))
        # an optimum on an interior face of the zoom box: re-centre without shrinking
        half = np.where(edge, 0.5 * (bhi - blo), half)
        blo = np.maximum(best - half, lo)
        bhi = np.minimum(best + half, hi)


def grid_vgne(model: GameModel, tol: float = 1e-5) -> tuple[np.ndarray, np.ndarray]:
    """Brute-force vGNE for scalar decisions and one coupled constraint.

    For a fixed multiplier the penalized game is solved by successive grid
    refinement of the natural-map residual over the joint box; the
    multiplier is then found by root-finding on total constraint value
    (zero when the constraint is slack at ``mu = 0``).
    """
    if model.d != 1 or model.m != 1 or model.N > 6:
        raise ValueError("grid oracle limited to scalar decisions, one constraint and N <= 6")
    rng = np.random.default_rng(0)
    lo = np.array([s.lo[0] for s in model.sets])
    hi = np.array([s.hi[0] for s in model.sets])
    A = rng.uniform(lo, hi, size=(200, model.N))
    B = rng.uniform(lo, hi, size=(200, model.N))
    lip = np.max(np.linalg.norm(_field_points(model, A, 0.0) - _field_points(model, B, 0.0), axis=1) / np.linalg.norm(A - B, axis=1))
    eta = 1.0 / max(lip, 1e-12)

    def total_g(mu):
        x = _grid_equilibrium(model, mu, tol, eta)
        g, _ = model.batch_constraint(0, x[:, None])
        return float(g.sum()), x

    g0, x0 = total_g(0.0)
    if g0 <= 0:
        return x0, np.zeros(1)
    hi_mu = 1.0
    while total_g(hi_mu)[0] > 0:
        hi_mu *= 2.0
        if hi_mu > 1e12:
            raise SolverError("grid oracle could not bracket the multiplier")
    mu = brentq(lambda m: total_g(m)[0], 0.0, hi_mu, xtol=1e-10, rtol=1e-10)
    return total_g(mu)[1], np.array([mu])


# ---------------------------------------------------------------------------
# static comparator


@dataclass
class ComparatorSolution:
    """Best fixed decision for one player against a recorded trajectory.

    ``intervals`` holds the per-step feasible interval ``(lo, hi)`` for scalar
    decisions (``nan`` when that step's set is empty); ``excluded_steps``
    lists those empty steps, which were left out of the intersection.
    ``feasible`` is false whenever the standing nonemptiness assumption
    fails, i.e. some step was excluded or the intersection is empty.
    ``binding_step`` is the step whose interval end pins ``x_star`` strictly
    inside the box (``None`` when no single step's constraint is active).
    """

    player: int
    x_star: np.ndarray
    objective: float
    feasible: bool
    t_start: int
    intervals: np.ndarray | None = None
    excluded_steps: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int))
    method: str = ""
    binding_step: int | None = None

    @property
    def status(self) -> str:
        if self.feasible:
            text = "ok"
        elif self.excluded_steps.size:
            text = f"comparator infeasible at {self.excluded_steps.size} step(s); excluded from the comparator set"
        else:
            text = "comparator infeasible"
        if self.binding_step is not None:
            text += f"; x* bound by the feasible set of step {self.binding_step}"
        return text

    def to_record(self) -> dict:
        rec = {
            "player": self.player,
            "x_star": self.x_star.tolist(),
            "objective": self.objective,
            "feasible": self.feasible,
            "status": self.status,
            "t_start": self.t_start,
            "excluded_steps": self.excluded_steps.tolist(),
            "binding_step": self.binding_step,
            "method": self.method,
        }
        if self.intervals is not None:
            rec["intervals"] = [[None if math.isnan(a) else a, None if math.isnan(b) else b] for a, b in self.intervals]
        return rec


def golden_section(fn, lo: float, hi: float, tol: float = 1e-10) -> float:
    """Minimizer of a unimodal function on ``[lo, hi]``."""
    if hi - lo <= tol:
        return 0.5 * (lo + hi)
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = fn(c), fn(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = fn(d)
    x = 0.5 * (a + b)
    # the ends can win for monotone objectives
    cands = [(fn(x), x), (fn(lo), lo), (fn(hi), hi)]
    return min(cands)[1]


def _quadratic_sublevel(r, u, v, lo, hi):
    """``{x in [lo, hi] : r + u x + v x^2 <= 0}`` as arrays of bounds (nan when empty)."""
    r, u, v = np.broadcast_arrays(np.asarray(r, float), np.asarray(u, float), np.asarray(v, float))
    a = np.full(r.shape, np.nan)
    b = np.full(r.shape, np.nan)
    quad = v > 0
    disc = u * u - 4 * v * r
    ok = quad & (disc >= 0)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(ok, (-u - sq) / (2 * v), a)
        b = np.where(ok, (-u + sq) / (2 * v), b)
        lin = ~quad
        root = np.where(lin & (u != 0), -r / np.where(u != 0, u, 1.0), np.nan)
    a = np.where(lin & (u > 0), -np.inf, a)
    b = np.where(lin & (u > 0), root, b)
    a = np.where(lin & (u < 0), root, a)
    b = np.where(lin & (u < 0), np.inf, b)
    const_ok = lin & (u == 0) & (r <= 0)
    a = np.where(const_ok, -np.inf, a)
    b = np.where(const_ok, np.inf, b)
    a = np.maximum(a, lo)
    b = np.minimum(b, hi)
    empty = np.isnan(a) | np.isnan(b) | (a > b)
    a[empty] = np.nan
    b[empty] = np.nan
    return a, b


def _generic_interval(model, i, t, c_t, lo, hi, tol):
    """Sublevel interval of a convex scalar constraint by bracketing + root finding."""
    a_out, b_out = lo, hi
    for k in range(model.m):
        h = lambda x: model.constraint_eval(i, t, np.array([x]))[0][k] - c_t[k]
        xm = golden_section(h, lo, hi, tol)
        if h(xm) > 0:
            return np.nan, np.nan
        a = lo if h(lo) <= 0 else brentq(h, lo, xm, xtol=tol)
        b = hi if h(hi) <= 0 else brentq(h, xm, hi, xtol=tol)
        a_out, b_out = max(a_out, a), min(b_out, b)
    if a_out > b_out:
        return np.nan, np.nan
    return a_out, b_out


def _others(model: GameModel, traj: np.ndarray, i: int, ts: np.ndarray):
    """``sigma(x_{-i,t})`` and ``sum_{j != i} g_{j,t}(x_{j,t})`` along the trajectory."""
    T = traj.shape[0]
    psi_other = np.zeros((T, model.n))
    g_other = np.zeros((T, model.m))
    for j in range(model.N):
        if j == i:
            continue
        if isinstance(model, ScalarQuadraticGame):
            psi_other += model.kappa * traj[:, j, :]
        else:
            psi_other += np.stack([model.psi(j, traj[k, j]) for k in range(T)])
        g_other += model.constraint_along(j, ts, traj[:, j, :])
    return psi_other / model.N, g_other


def comparator_objective(model: GameModel, traj, i: int, t_start: int = 1):
    """Return ``x -> sum_t f_{i,t}(x, psi_i(x)/N + sigma(x_{-i,t}))`` for the trajectory."""
    traj = np.asarray(traj, dtype=float).reshape(len(traj), model.N, model.d)
    ts = np.arange(t_start, t_start + traj.shape[0])
    s_other, _ = _others(model, traj, i, ts)
    T = traj.shape[0]
    if isinstance(model, ScalarQuadraticGame):
        C = model.coef_rows(ts)[:, i, :]
        # the sum over t is a quadratic in x: collect its coefficients once
        k0 = C[:, 0].sum()
        k1 = (C[:, 1] - model.p0 + model.price_slope * s_other[:, 0]).sum()
        k2 = (C[:, 2] + model.price_slope * model.kappa / model.N).sum()
        return lambda x: float(k0 + k1 * np.asarray(x).reshape(-1)[0] + k2 * np.asarray(x).reshape(-1)[0] ** 2)

    def obj(x):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        s = model.psi(i, x) / model.N + s_other
        return float(model.cost_along(i, ts, np.broadcast_to(x, (T, model.d)), s).sum())

    return obj


def solve_comparator(model: GameModel, trajectory, i: int, tol: float = 1e-10, t_start: int = 1) -> ComparatorSolution:
    """Best fixed decision in hindsight for player ``i``.

    ``trajectory`` holds joint decisions for consecutive steps starting at
    ``t_start`` (shape ``(T, N)`` or ``(T, N, d)``).  For scalar decisions
    the per-step feasible sets
    ``{x in X_i : g_{i,t}(x) + sum_{j != i} g_{j,t}(x_{j,t}) <= 0}`` are
    intervals (closed form for quadratic constraints); they are intersected
    and the cumulative cost is minimized by golden-section search.  Steps
    whose own set is empty are excluded and reported rather than aborting.
    Vector decisions use projected gradient over ``X_i`` followed by a
    feasibility audit of every step.
    """
    traj = np.asarray(trajectory, dtype=float).reshape(len(trajectory), model.N, model.d)
    T = traj.shape[0]
    ts = np.arange(t_start, t_start + T)
    obj = comparator_objective(model, traj, i, t_start)
    _, g_other = _others(model, traj, i, ts)
    box = model.sets[i]

    if model.d == 1:
        lo, hi = float(box.lo[0]), float(box.hi[0])
        if isinstance(model, ScalarQuadraticGame):
            C = model.coef_rows(ts)[:, i, :]
            a, b = _quadratic_sublevel(C[:, 3] - model.cap_share + g_other[:, 0], C[:, 4], C[:, 5], lo, hi)
        else:
            ab = np.array([_generic_interval(model, i, int(t), -g_other[k], lo, hi, tol) for k, t in enumerate(ts)])
            a, b = ab[:, 0], ab[:, 1]
        empty = np.isnan(a)
        excluded = ts[empty]
        if np.all(empty):
            glo, ghi = lo, hi
            feasible = False
        else:
            glo, ghi = float(np.max(a[~empty])), float(np.min(b[~empty]))
            feasible = not excluded.size
        if glo > ghi:
            glo, ghi = lo, hi
            feasible = False
        x = golden_section(obj, glo, ghi, tol)
        binding = None
        edge_tol = 10 * tol * max(1.0, hi - lo)
        if ghi < hi and ghi - x <= edge_tol:
            binding = int(ts[np.nanargmin(b)])
        elif glo > lo and x - glo <= edge_tol:
            binding = int(ts[np.nanargmax(a)])
        return ComparatorSolution(
            i, np.array([x]), obj(x), bool(feasible), t_start, np.column_stack([a, b]), excluded, "golden-section",
            binding,
        )

    # vector decisions: projected gradient on the cumulative cost
    x = box.project(traj[:, i, :].mean(axis=0))
    s_other, _ = _others(model, traj, i, ts)
    step = 1.0
    f = obj(x)
    for _ in range(10_000):
        s = model.psi(i, x) / model.N + s_other
        grad = sum(model.pseudo_gradient(i, int(t), x, s[k]) for k, t in enumerate(ts))
        while True:
            xn = box.project(x - step * grad)
            fn = obj(xn)
            if fn <= f - 1e-4 * np.dot(grad, x - xn) or step < 1e-16:
                break
            step *= 0.5
        done = np.linalg.norm(xn - x) <= tol
        x, f = xn, fn
        step *= 2.0
        if done:
            break
    viol = g_other + model.constraint_along(i, ts, np.broadcast_to(x, (T, model.d)))
    excluded = ts[np.any(viol > 1e-9, axis=1)]
    return ComparatorSolution(i, x, f, not excluded.size, t_start, None, excluded, "projected-gradient")


def grid_comparator(model: GameModel, trajectory, i: int, resolution: float = 1e-5, t_start: int = 1, chunk: int = 200_000):
    """Dense-grid oracle for scalar decisions: evaluate every grid point directly.

    Feasibility is checked pointwise against each step (steps where no grid
    point is feasible are skipped, mirroring :func:`solve_comparator`).
    Returns ``(x_best, objective)``.
    """
    traj = np.asarray(trajectory, dtype=float).reshape(len(trajectory), model.N, model.d)
    T = traj.shape[0]
    lo, hi = float(model.sets[i].lo[0]), float(model.sets[i].hi[0])
    grid = np.linspace(lo, hi, int(round((hi - lo) / resolution)) + 1)
    feas = np.ones(grid.size, dtype=bool)
    total = np.zeros(grid.size)
    for k in range(T):
        t = t_start + k
        others_g = sum(model.constraint_eval(j, t, traj[k, j])[0] for j in range(model.N) if j != i)
        others_psi = sum(model.psi(j, traj[k, j]) for j in range(model.N) if j != i) / model.N
        ok_t = np.empty(grid.size, dtype=bool)
        for s0 in range(0, grid.size, chunk):
            seg = grid[s0 : s0 + chunk]
            tt = np.full(seg.size, t)
            gv = model.constraint_along(i, tt, seg[:, None])
            ok_t[s0 : s0 + chunk] = np.all(gv + others_g <= 0, axis=1)
            s = model.kappa * seg / model.N + others_psi[0] if isinstance(model, ScalarQuadraticGame) else np.array(
                [model.psi(i, np.array([x]))[0] / model.N + others_psi[0] for x in seg]
            )
            total[s0 : s0 + chunk] += model.cost_along(i, tt, seg[:, None], s)
        if ok_t.any():
            feas &= ok_t
    if not feas.any():
        feas[:] = True
    idx = np.flatnonzero(feas)
    best = idx[np.argmin(total[idx])]
    return float(grid[best]), float(total[best])
