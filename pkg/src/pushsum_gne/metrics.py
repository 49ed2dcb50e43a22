"""Evaluation quantities computed from recorded runs.

Everything here is post-hoc and read-only over a :class:`MetricsLog`:
static regret against the best fixed feasible decision, cumulative
constraint violation, consensus errors of the dual and aggregate trackers,
distance to the variational equilibrium, log-log rate fits and the
high-probability check of the noise martingale.

CSV layouts
-----------
Time series (one file per run), one row per ``t = 0..T``::

    t, x_0..x_{N-1}, g_0..g_{m-1}, z_0..z_{N-1}, mu_consensus_error,
    sigma_consensus_error, <one 0/1 column per monitor>

For vector decisions the ``x`` columns are ``x_{i}_{k}``.  ``g_k`` is the
coupled value ``sum_i g_{i,t}(x_{i,t})``.  Consensus errors and monitor flags
refer to the round leaving ``t`` and are empty in the last row (``t = T``)
where no round was taken, except monitors defined on states.

Summary (one file per batch)::

    run, seed, checkpoint, player, regret_over_T, violation_over_T,
    comparator_status
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .game import GameModel, ScalarQuadraticGame, estimate_iota

LOG_ARRAYS = ("x", "z", "mu", "sigma", "muhat", "sighat", "g", "xi", "alpha", "beta", "gamma", "r_estimate")


@dataclass
class MetricsLog:
    """Full record of one run.

    Arrays indexed by state time have ``T + 1`` rows (``t = 0..T``); arrays
    produced by a round (``muhat``, ``sighat``, ``xi``, stepsizes) have ``T``
    rows, row ``t`` belonging to the round ``t -> t + 1``.  ``g[t, i]`` is
    ``g_{i,t}(x_{i,t})``.
    """

    T: int
    x: np.ndarray
    z: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    muhat: np.ndarray
    sighat: np.ndarray
    g: np.ndarray
    xi: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    r_estimate: np.ndarray
    seed: int = 0
    config_hash: str = ""
    backend: str = ""
    noise_digest: str = ""
    min_weight: float = 1.0
    monitors: dict = field(default_factory=dict)

    @classmethod
    def allocate(cls, model: GameModel, T: int, *, seed: int = 0, config_hash: str = "") -> "MetricsLog":
        N, d, m, n = model.N, model.d, model.m, model.n
        return cls(
            T=T,
            x=np.zeros((T + 1, N, d)),
            z=np.zeros((T + 1, N)),
            mu=np.zeros((T + 1, N, m)),
            sigma=np.zeros((T + 1, N, n)),
            muhat=np.zeros((T, N, m)),
            sighat=np.zeros((T, N, n)),
            g=np.zeros((T + 1, N, m)),
            xi=np.zeros((T, N, model.noise_dim)),
            alpha=np.zeros(T),
            beta=np.zeros(T),
            gamma=np.zeros(T),
            r_estimate=np.ones(T + 1),
            seed=seed,
            config_hash=config_hash,
        )

    @property
    def N(self) -> int:
        return self.x.shape[1]

    @property
    def coupled_g(self) -> np.ndarray:
        """``g_t(x_t) = sum_i g_{i,t}(x_{i,t})``, shape ``(T + 1, m)``."""
        return self.g.sum(axis=1)

    def save(self, path) -> Path:
        """Write to a compressed ``.npz`` with metadata stored as JSON."""
        path = Path(path)
        meta = {
            "T": self.T,
            "seed": int(self.seed),
            "config_hash": self.config_hash,
            "backend": self.backend,
            "noise_digest": self.noise_digest,
            "min_weight": float(self.min_weight),
            "monitors": sorted(self.monitors),
        }
        arrays = {k: getattr(self, k) for k in LOG_ARRAYS}
        arrays.update({f"monitor__{k}": v for k, v in self.monitors.items()})
        np.savez_compressed(path, __meta__=np.array(json.dumps(meta)), **arrays)
        return path if path.suffix == ".npz" else path.with_name(path.name + ".npz")

    @classmethod
    def load(cls, path) -> "MetricsLog":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["__meta__"]))
            arrays = {k: data[k] for k in LOG_ARRAYS}
            monitors = {k: data[f"monitor__{k}"] for k in meta["monitors"]}
        return cls(
            T=int(meta["T"]),
            seed=meta["seed"],
            config_hash=meta["config_hash"],
            backend=meta["backend"],
            noise_digest=meta["noise_digest"],
            min_weight=meta["min_weight"],
            monitors=monitors,
            **arrays,
        )

    def equals(self, other: "MetricsLog") -> bool:
        """Bit-exact equality of all recorded arrays and metadata."""
        if (self.T, self.seed, self.config_hash, self.noise_digest) != (other.T, other.seed, other.config_hash, other.noise_digest):
            return False
        if any(not np.array_equal(getattr(self, k), getattr(other, k)) for k in LOG_ARRAYS):
            return False
        if sorted(self.monitors) != sorted(other.monitors):
            return False
        return all(np.array_equal(v, other.monitors[k]) for k, v in self.monitors.items())


# ---------------------------------------------------------------------------
# regret and violation


def checkpoints(T: int, start: int = 1) -> np.ndarray:
    """Geometric checkpoints ``2^k <= T`` (``k >= start``), plus ``T`` itself."""
    ks = [2**k for k in range(start, int(math.log2(T)) + 1)]
    if not ks or ks[-1] != T:
        ks.append(T)
    return np.array(ks, dtype=int)


@dataclass
class RegretEntry:
    player: int
    T: int
    regret: float
    comparator_feasible: bool
    comparator_status: str
    x_star: np.ndarray

    @property
    def average(self) -> float:
        return self.regret / self.T


def _played_costs(model: GameModel, x: np.ndarray, i: int, ts: np.ndarray) -> np.ndarray:
    """``f_{i,t}(x_{i,t}, sigma(x_t))`` for each ``t``; ``x`` is ``(len(ts), N, d)``."""
    if isinstance(model, ScalarQuadraticGame):
        s = model.kappa * x[:, :, 0].mean(axis=1, keepdims=True)
    else:
        s = np.stack([model.aggregate(xt) for xt in x])
    return model.cost_along(i, ts, x[:, i, :], s)


def _comparator_costs(model: GameModel, x: np.ndarray, i: int, ts: np.ndarray, x_star: np.ndarray) -> np.ndarray:
    """``f_{i,t}(x*, psi_i(x*)/N + sigma(x_{-i,t}))`` for each ``t``."""
    T = len(ts)
    if isinstance(model, ScalarQuadraticGame):
        s_other = model.kappa * (x[:, :, 0].sum(axis=1) - x[:, i, 0]) / model.N
        s = (model.kappa * x_star[0] / model.N + s_other)[:, None]
    else:
        psi_other = np.stack(
            [sum(model.psi(j, xt[j]) for j in range(model.N) if j != i) for xt in x]
        )
        s = model.psi(i, x_star) / model.N + psi_other / model.N
    return model.cost_along(i, ts, np.broadcast_to(x_star, (T, model.d)), s)


def regret(log_: MetricsLog, comparator, i: int, model: GameModel, T: int | None = None) -> RegretEntry:
    """Static regret of player ``i`` over rounds ``t = 1..T``.

    ``R_i(T) = sum_t [f_{i,t}(x_{i,t}, sigma(x_t)) - f_{i,t}(x*, psi_i(x*)/N + sigma(x_{-i,t}))]``
    with expected (noise-free) costs evaluated on replayed coefficients.
    ``comparator`` must have been solved on the same prefix.
    """
    T = log_.T if T is None else int(T)
    ts = np.arange(1, T + 1)
    x = log_.x[1 : T + 1]
    x_star = np.asarray(comparator.x_star, dtype=float).reshape(model.d)
    val = float(np.sum(_played_costs(model, x, i, ts) - _comparator_costs(model, x, i, ts, x_star)))
    return RegretEntry(i, T, val, comparator.feasible, comparator.status, x_star)


def violation(source) -> np.ndarray:
    """Cumulative constraint violation ``R_g(T) = ||[sum_{t=1}^T g_t(x_t)]_+||`` for every ``T``.

    ``source`` is a :class:`MetricsLog` (rounds ``t = 1..T`` of the coupled
    value are used; entry ``k`` is ``R_g(k + 1)``) or an array of per-step
    coupled values of shape ``(T, m)`` (entry ``k`` covers the first ``k + 1``
    rows).  The running sum is clipped, not the summands.
    """
    if isinstance(source, MetricsLog):
        vals = source.coupled_g[1:]
    else:
        vals = np.asarray(source, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
    cum = np.cumsum(vals, axis=0)
    return np.linalg.norm(np.maximum(cum, 0.0), axis=1)


@dataclass
class RegretReport:
    """Checkpointed regret and violation for one run.

    ``regret[k, i]`` is ``R_i(T_k)``; ``violation[k]`` is ``R_g(T_k)``.
    ``comparator_status[k][i]`` records comparator provenance and any
    infeasibility.
    """

    checkpoints: np.ndarray
    regret: np.ndarray
    violation: np.ndarray
    comparator_status: list
    excluded_steps: list

    @property
    def average_regret(self) -> np.ndarray:
        return self.regret / self.checkpoints[:, None]

    @property
    def average_violation(self) -> np.ndarray:
        return self.violation / self.checkpoints

    def rows(self, run: int = 0, seed: int = 0):
        avg_r, avg_v = self.average_regret, self.average_violation
        for k, T in enumerate(self.checkpoints):
            for i in range(self.regret.shape[1]):
                yield [run, seed, int(T), i, repr(float(avg_r[k, i])), repr(float(avg_v[k])), self.comparator_status[k][i]]


def regret_report(log_: MetricsLog, model: GameModel, points=None, tol: float = 1e-10) -> RegretReport:
    """Solve a fresh comparator for every player on every checkpoint prefix."""
    from .solvers import solve_comparator

    points = checkpoints(log_.T) if points is None else np.asarray(points, dtype=int)
    rg = violation(log_)
    R = np.zeros((len(points), model.N))
    status, excluded = [], []
    for k, T in enumerate(points):
        row_s, row_e = [], []
        for i in range(model.N):
            comp = solve_comparator(model, log_.x[1 : T + 1], i, tol=tol, t_start=1)
            R[k, i] = regret(log_, comp, i, model, T).regret
            row_s.append(comp.status)
            row_e.append(comp.excluded_steps.tolist())
        status.append(row_s)
        excluded.append(row_e)
    return RegretReport(points, R, rg[points - 1], status, excluded)


# ---------------------------------------------------------------------------
# consensus and residuals


def consensus_error(hat: np.ndarray, z_next: np.ndarray, base: np.ndarray) -> np.ndarray:
    """``sum_i ||hat_{i,t} / z_{i,t+1} - mean_j base_{j,t}||`` for each ``t``.

    Shapes: ``hat`` and ``base`` ``(T, N, k)``, ``z_next`` ``(T, N)``.
    """
    ratio = hat / z_next[:, :, None]
    mean = base.mean(axis=1, keepdims=True)
    return np.linalg.norm(ratio - mean, axis=2).sum(axis=1)


def consensus_errors(log_: MetricsLog) -> tuple[np.ndarray, np.ndarray]:
    """Dual and aggregate-tracker consensus errors for rounds ``t = 0..T-1``."""
    T = log_.T
    zn = log_.z[1 : T + 1]
    return (
        consensus_error(log_.muhat, zn, log_.mu[:T]),
        consensus_error(log_.sighat, zn, log_.sigma[:T]),
    )


def residuals(log_: MetricsLog, vgne) -> tuple[np.ndarray, np.ndarray]:
    """Distance to the equilibrium.

    Returns ``||x_t - x*||`` for ``t = 0..T`` and ``||xbar_T - x*||^2`` for
    ``T = 1..T`` where ``xbar_T`` averages ``x_1..x_T``.
    """
    x_star = np.asarray(vgne.x_star if hasattr(vgne, "x_star") else vgne, dtype=float)
    if x_star.size != log_.x[0].size:
        raise ValueError(f"solution has {x_star.size} entries, trajectory has {log_.x[0].size}")
    x_star = x_star.reshape(log_.x.shape[1:])
    per_step = np.sqrt(np.sum((log_.x - x_star) ** 2, axis=(1, 2)))
    csum = np.cumsum(log_.x[1:], axis=0)
    xbar = csum / np.arange(1, log_.T + 1)[:, None, None]
    averaged = np.sum((xbar - x_star) ** 2, axis=(1, 2))
    return per_step, averaged


def rate_fit(series, t_min: float = 1, t=None) -> tuple[float, float, float]:
    """Least-squares fit ``log(value) = slope * log(t) + intercept`` over ``t >= t_min``.

    ``t`` defaults to ``1, 2, ...``.  Nonpositive values are dropped with a
    warning stating the coverage.  Returns ``(slope, intercept, r2)``.
    """
    y = np.asarray(series, dtype=float)
    t = np.arange(1, y.size + 1, dtype=float) if t is None else np.asarray(t, dtype=float)
    sel = t >= t_min
    y, t = y[sel], t[sel]
    pos = y > 0
    if not pos.all():
        warnings.warn(f"rate_fit: {int((~pos).sum())} nonpositive values dropped; coverage {pos.mean():.1%}", stacklevel=2)
        y, t = y[pos], t[pos]
    if y.size < 2:
        raise ValueError("rate_fit needs at least two positive values")
    lx, ly = np.log(t), np.log(y)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = np.sum((ly - ly.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(intercept), float(r2)


# ---------------------------------------------------------------------------
# high-probability check


def noise_martingale(log_: MetricsLog, model: GameModel, i: int, x_ref) -> float:
    """``sum_{t>=1} alpha_t <p_{i,t} - q_{i,t}, x_{i,t} - x_ref>`` over the recorded rounds.

    ``p`` and ``q`` are evaluated at the arguments the iteration used: the
    decision ``x_{i,t}`` and the tracker ratio ``sigmahat_{i,t} / z_{i,t+1}``.
    """
    T = log_.T
    ts = np.arange(1, T)
    X = log_.x[1:T, i, :]
    Y = log_.sighat[1:T, i, :] / log_.z[2 : T + 1, i, None]
    diff = -model.gradient_noise_along(i, ts, X, Y, log_.xi[1:T, i, :])
    x_ref = np.asarray(x_ref, dtype=float).reshape(model.d)
    return float(np.sum(log_.alpha[1:T] * np.einsum("td,td->t", diff, X - x_ref)))


def lemma_bound(log_: MetricsLog, L: float, iota: float, delta: float) -> float:
    """``2 L iota (sum alpha_t^2 + ln(1/delta))`` over the same rounds as the martingale."""
    return 2.0 * L * iota * (float(np.sum(log_.alpha[1:] ** 2)) + math.log(1.0 / delta))


@dataclass
class HPReport:
    delta: float
    K: int
    sums: np.ndarray
    bounds: np.ndarray
    fractions: np.ndarray
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.all(self.fractions <= self.tolerance))

    def to_record(self) -> dict:
        return {
            "delta": self.delta,
            "K": self.K,
            "fractions": self.fractions.tolist(),
            "tolerance": self.tolerance,
            "passed": self.passed,
            "max_ratio": float(np.max(self.sums / np.where(self.bounds > 0, self.bounds, np.inf)[:, None])),
        }


def hp_quantile_check(batch, delta: float, bound_fn, reference=None, min_runs: int = 50) -> HPReport:
    """Empirical exceedance of the martingale high-probability bound.

    Parameters
    ----------
    batch : sequence of ``(MetricsLog, GameModel)``
        Independent-seed runs of one configuration.
    delta : float
        Confidence parameter in ``(0, 1]``.
    bound_fn : callable
        ``bound_fn(delta, log) -> float``.
    reference : callable, optional
        ``reference(log, model, i) -> x_i`` giving the fixed point the
        martingale is centred on; defaults to the player's comparator.

    The check passes if, for every player, the fraction of runs whose sum
    exceeds the bound is at most ``delta + 2 sqrt(delta (1 - delta) / K)``.
    """
    K = len(batch)
    if K < min_runs:
        raise ValueError(f"hp_quantile_check needs at least {min_runs} runs, got {K}")
    if not 0 < delta <= 1:
        raise ValueError("delta must lie in (0, 1]")
    if reference is None:
        from .solvers import solve_comparator

        def reference(lg, md, i):
            return solve_comparator(md, lg.x[1 : lg.T + 1], i).x_star

    N = batch[0][1].N
    sums = np.zeros((K, N))
    bounds = np.zeros(K)
    for k, (lg, md) in enumerate(batch):
        bounds[k] = bound_fn(delta, lg)
        for i in range(N):
            sums[k, i] = noise_martingale(lg, md, i, reference(lg, md, i))
    fractions = (sums > bounds[:, None]).mean(axis=0)
    tol = delta + 2.0 * math.sqrt(delta * (1.0 - delta) / K)
    return HPReport(delta, K, sums, bounds, fractions, tol)


def iota_from_model(model: GameModel, draws: int = 10**6, seed: int = 0) -> float:
    """Sub-Gaussian parameter of the model's gradient noise, estimated from samples."""
    if model.noise.degenerate:
        return 0.0
    xi = model.noise.sample(np.random.default_rng(seed), (draws, model.noise_dim))
    return estimate_iota(np.linalg.norm(xi, axis=1))


# ---------------------------------------------------------------------------
# CSV export


def timeseries_header(log_: MetricsLog) -> list[str]:
    N, d, m = log_.x.shape[1], log_.x.shape[2], log_.g.shape[2]
    xs = [f"x_{i}" for i in range(N)] if d == 1 else [f"x_{i}_{k}" for i in range(N) for k in range(d)]
    return (
        ["t"]
        + xs
        + [f"g_{k}" for k in range(m)]
        + [f"z_{i}" for i in range(N)]
        + ["mu_consensus_error", "sigma_consensus_error"]
        + [f"monitor_{k}" for k in sorted(log_.monitors)]
    )


def write_timeseries_csv(log_: MetricsLog, path) -> Path:
    """Per-run time series; layout documented in the module docstring."""
    path = Path(path)
    T = log_.T
    mu_err, sig_err = consensus_errors(log_)
    gsum = log_.coupled_g
    mons = [log_.monitors[k] for k in sorted(log_.monitors)]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(timeseries_header(log_))
        for t in range(T + 1):
            row = [t]
            row += [repr(float(v)) for v in log_.x[t].reshape(-1)]
            row += [repr(float(v)) for v in gsum[t]]
            row += [repr(float(v)) for v in log_.z[t]]
            row += [repr(float(mu_err[t])), repr(float(sig_err[t]))] if t < T else ["", ""]
            row += [int(bool(m[t])) if t < len(m) else "" for m in mons]
            w.writerow(row)
    return path


SUMMARY_HEADER = ["run", "seed", "checkpoint", "player", "regret_over_T", "violation_over_T", "comparator_status"]
RESIDUAL_HEADER = ["run", "seed", "t", "residual", "averaged_residual_sq"]


def write_summary_csv(reports, path) -> Path:
    """Batch summary; ``reports`` is a sequence of ``(run, seed, RegretReport)``."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        for run, seed, rep in reports:
            w.writerows(rep.rows(run, seed))
    return path


def write_residual_csv(entries, path, points=None) -> Path:
    """Residual series at geometric checkpoints; ``entries`` are ``(run, seed, per_step, averaged)``."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESIDUAL_HEADER)
        for run, seed, per_step, averaged in entries:
            T = len(averaged)
            pts = checkpoints(T, start=0) if points is None else points
            for t in pts:
                w.writerow([run, seed, int(t), repr(float(per_step[t])), repr(float(averaged[t - 1]))])
    return path
