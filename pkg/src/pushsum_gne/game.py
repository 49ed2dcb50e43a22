"""Aggregative game instances with exact and noisy first-order oracles.

A game has ``N`` players with decisions ``x_i`` in local convex sets, an
aggregate ``sigma(x) = mean_i psi_i(x_i)``, expected costs
``f_{i,t}(x_i, sigma)`` and coupled constraints ``sum_i g_{i,t}(x_i) <= 0``.

Two families are provided:

* :class:`ScalarQuadraticGame` -- scalar decisions, quadratic cost and
  constraint with per-``(i, t)`` coefficient streams.  Both built-in scenarios
  (``electricity-market`` and ``quadratic-toy``) live here, and the compiled
  run loop understands it natively.
* :class:`CallableGame` -- arbitrary user-supplied oracles (vector decisions
  allowed); runs through the generic step.
"""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

COEFFICIENTS = ("a", "b", "c", "r", "u", "v")
DOMAIN_TOL = 1e-9


class DomainError(ValueError):
    """A decision outside its local set was handed to an oracle."""


# ---------------------------------------------------------------------------
# random streams

_DOMAINS = {"coef": 1, "noise": 2, "probe": 3}


def keyed_generator(seed: int, domain: str, *key: int) -> np.random.Generator:
    """Counter-based (Philox) generator keyed on ``(seed, domain, *key)``.

    Draws from a given key are prefix-stable: ``g.random(T)[:k]`` equals
    ``g.random(k)``, so any ``(player, time)`` entry can be replayed.
    """
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, _DOMAINS[domain], *map(int, key)])
    return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# local sets


class Box:
    """Axis-aligned box ``[lo, hi]`` (scalars broadcast to dimension ``d``)."""

    def __init__(self, lo, hi, d: int = 1):
        self.lo = np.broadcast_to(np.asarray(lo, dtype=float), (d,)).copy()
        self.hi = np.broadcast_to(np.asarray(hi, dtype=float), (d,)).copy()
        if np.any(self.lo > self.hi):
            raise ValueError("box is empty: lo > hi")
        self.d = d

    def project(self, v) -> np.ndarray:
        return np.clip(np.asarray(v, dtype=float), self.lo, self.hi)

    def contains(self, v, tol: float = DOMAIN_TOL) -> bool:
        v = np.asarray(v, dtype=float)
        return bool(np.all(v >= self.lo - tol) and np.all(v <= self.hi + tol))

    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def sample(self, rng, size: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(size, self.d))

    @property
    def radius_bound(self) -> float:
        """``max ||x||`` over the box."""
        return float(np.linalg.norm(np.maximum(np.abs(self.lo), np.abs(self.hi))))

    def __repr__(self):
        return f"Box({self.lo.tolist()}, {self.hi.tolist()})"


class Ball:
    """Euclidean ball of given center and radius."""

    def __init__(self, center, radius: float):
        self.c = np.atleast_1d(np.asarray(center, dtype=float))
        if radius <= 0:
            raise ValueError("radius must be positive")
        self.radius = float(radius)
        self.d = self.c.size

    def project(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        diff = v - self.c
        norm = np.linalg.norm(diff, axis=-1, keepdims=True)
        scale = np.where(norm > self.radius, self.radius / np.maximum(norm, 1e-300), 1.0)
        return self.c + diff * scale

    def contains(self, v, tol: float = DOMAIN_TOL) -> bool:
        return bool(np.linalg.norm(np.asarray(v, dtype=float) - self.c) <= self.radius + tol)

    def center(self) -> np.ndarray:
        return self.c.copy()

    def sample(self, rng, size: int) -> np.ndarray:
        g = rng.standard_normal((size, self.d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        rad = self.radius * rng.random((size, 1)) ** (1.0 / self.d)
        return self.c + g * rad

    @property
    def radius_bound(self) -> float:
        return float(np.linalg.norm(self.c) + self.radius)


def check_projector(project, sample_points: np.ndarray, tol: float = 1e-9) -> list[str]:
    """Test idempotence, non-expansiveness and the obtuse-angle property on samples."""
    P = np.array([project(p) for p in sample_points])
    problems = []
    if np.max(np.abs(np.array([project(p) for p in P]) - P)) > tol:
        problems.append("not idempotent")
    n = len(sample_points)
    half = n // 2
    xa, xb = sample_points[:half], sample_points[half : 2 * half]
    pa, pb = P[:half], P[half : 2 * half]
    if np.any(np.linalg.norm(pa - pb, axis=1) > np.linalg.norm(xa - xb, axis=1) + tol):
        problems.append("expansive")
    # <x - P(x), y - P(x)> <= 0 for y in the set; projected points are in the set
    if np.any(np.einsum("ij,ij->i", xa - pa, pb - pa) > tol * (1 + np.abs(xa).max())):
        problems.append("obtuse-angle property violated")
    return problems


class CustomSet:
    """Convex set given by a user projector, property-tested at construction.

    ``bounds`` is a ``Box`` enclosing the region used to draw probe points
    (points are drawn from a box twice as large so that projections are
    exercised).
    """

    def __init__(self, projector: Callable[[np.ndarray], np.ndarray], bounds: Box, probes: int = 400, seed: int = 0):
        self._proj = projector
        self.bounds = bounds
        self.d = bounds.d
        rng = np.random.default_rng(seed)
        c, h = bounds.center(), bounds.hi - bounds.lo
        pts = rng.uniform(c - h, c + h, size=(probes, self.d))
        problems = check_projector(self.project, pts)
        if problems:
            raise ValueError(f"projector rejected: {', '.join(problems)}")

    def project(self, v) -> np.ndarray:
        return np.asarray(self._proj(np.asarray(v, dtype=float)), dtype=float)

    def contains(self, v, tol: float = DOMAIN_TOL) -> bool:
        v = np.asarray(v, dtype=float)
        return bool(np.linalg.norm(self.project(v) - v) <= tol)

    def center(self) -> np.ndarray:
        return self.project(self.bounds.center())

    def sample(self, rng, size: int) -> np.ndarray:
        return np.array([self.project(p) for p in self.bounds.sample(rng, size)])

    @property
    def radius_bound(self) -> float:
        return self.bounds.radius_bound


# ---------------------------------------------------------------------------
# noise


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean additive gradient noise.

    ``kind`` is ``"uniform"`` (support ``[low, high]`` with ``low == -high``),
    ``"gaussian"`` (``scale``, optionally truncated at ``clip`` which makes it
    bounded) or ``"none"``.
    """

    kind: str = "none"
    low: float = 0.0
    high: float = 0.0
    scale: float = 0.0
    clip: float | None = None

    def __post_init__(self):
        if self.kind not in ("uniform", "gaussian", "none"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind == "uniform" and not math.isclose(self.low, -self.high, abs_tol=1e-15):
            raise ValueError("uniform noise must be symmetric about zero (zero mean)")
        if self.kind == "gaussian" and self.scale < 0:
            raise ValueError("gaussian scale must be nonnegative")

    @property
    def bounded(self) -> bool:
        return self.kind != "gaussian" or self.clip is not None or self.scale == 0

    @property
    def bound(self) -> float:
        if self.kind == "uniform":
            return max(abs(self.low), abs(self.high))
        if self.kind == "gaussian":
            if self.scale == 0:
                return 0.0
            return math.inf if self.clip is None else float(self.clip)
        return 0.0

    @property
    def degenerate(self) -> bool:
        return self.bound == 0.0

    def sample(self, rng, size) -> np.ndarray:
        if self.kind == "uniform":
            # low + (high - low) * U keeps draws prefix-stable per stream
            return self.low + (self.high - self.low) * rng.random(size)
        if self.kind == "gaussian":
            z = self.scale * rng.standard_normal(size)
            if self.clip is not None:
                # symmetric clipping preserves zero mean
                z = np.clip(z, -self.clip, self.clip)
            return z
        return np.zeros(size)

    def draws(self, seed: int, N: int, T: int, q: int = 1) -> np.ndarray:
        """Noise ``xi[t, i, :]`` for ``t < T``; one keyed stream per player."""
        out = np.empty((T, N, q))
        for i in range(N):
            out[:, i, :] = self.sample(keyed_generator(seed, "noise", i), (T, q))
        return out

    def to_dict(self) -> dict:
        return {"kind": self.kind, "low": self.low, "high": self.high, "scale": self.scale, "clip": self.clip}


def estimate_iota(samples) -> float:
    """Smallest ``iota`` with ``mean(exp(||xi||^2 / iota^2)) <= e`` on the samples.

    ``samples`` has one row per draw (or is 1-D for scalar noise).
    """
    s = np.asarray(samples, dtype=float)
    sq = s**2 if s.ndim == 1 else np.sum(s**2, axis=1)
    peak = float(sq.max())
    if peak == 0.0:
        return 0.0

    def excess(log_iota):
        inv = math.exp(-2 * log_iota)
        # log-mean-exp, stable for small iota
        m = sq * inv
        top = m.max()
        return top + math.log(np.mean(np.exp(m - top))) - 1.0

    lo = 0.5 * math.log(peak) - 10.0
    hi = 0.5 * math.log(peak) + 10.0
    return float(math.exp(brentq(excess, lo, hi, xtol=1e-14, rtol=1e-12)))


# ---------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class DeclaredConstants:
    """Bounds used by the lemma monitors.

    ``L`` bounds ``||x_i||`` and ``||g_{i,t}(x_i)||``, ``M`` bounds the
    constraint Jacobian, ``S`` the (noisy) pseudo-gradient and ``L_sigma``
    the Lipschitz constant of each ``psi_i``.
    """

    L: float | None = None
    M: float | None = None
    S: float | None = None
    L_sigma: float | None = None


class GameModel:
    """Base class for aggregative games.

    Subclasses provide the per-player oracles; batch methods default to
    looping over players and may be overridden with vectorized versions.
    Decisions, aggregates and constraint values are 1-D arrays of sizes
    ``d``, ``n`` and ``m``.
    """

    N: int
    d: int = 1
    n: int = 1
    m: int = 1
    time_varying: bool = True
    sets: list
    noise: NoiseModel
    constants: DeclaredConstants
    metadata: dict

    # -- per-player oracles -------------------------------------------------
    def psi(self, i: int, x_i) -> np.ndarray:
        raise NotImplementedError

    def psi_jacobian(self, i: int, x_i) -> np.ndarray:
        """``(d, n)`` Jacobian of ``psi_i``."""
        raise NotImplementedError

    def cost(self, i: int, t: int, x_i, s) -> float:
        """Expected cost ``f_{i,t}(x_i, s)``."""
        raise NotImplementedError

    def pseudo_gradient(self, i: int, t: int, x_i, y) -> np.ndarray:
        raise NotImplementedError

    def stochastic_gradient(self, i: int, t: int, x_i, y, xi) -> np.ndarray:
        """Sampled gradient for a given noise realisation ``xi``."""
        raise NotImplementedError

    def constraint_eval(self, i: int, t: int, x_i) -> tuple[np.ndarray, np.ndarray]:
        """``(g_{i,t}(x_i), Jacobian)`` with shapes ``(m,)`` and ``(d, m)``."""
        raise NotImplementedError

    # -- shared ---------------------------------------------------------------
    def _check_domain(self, i: int, x_i) -> np.ndarray:
        x_i = np.atleast_1d(np.asarray(x_i, dtype=float))
        if not self.sets[i].contains(x_i):
            raise DomainError(f"player {i}: decision {x_i.tolist()} outside local set {self.sets[i]!r}")
        return x_i

    def project_local(self, i: int, v) -> np.ndarray:
        return self.sets[i].project(np.atleast_1d(np.asarray(v, dtype=float)))

    def aggregate(self, x) -> np.ndarray:
        """``(1/N) * sum_i psi_i(x_i)`` for a joint decision of shape ``(N, d)``."""
        X = np.asarray(x, dtype=float).reshape(self.N, self.d)
        return self.batch_psi(X).mean(axis=0)

    def sample_gradient(self, i: int, t: int, x_i, y, rng) -> np.ndarray:
        xi = self.noise.sample(rng, self.noise_dim)
        return self.stochastic_gradient(i, t, x_i, y, xi)

    @property
    def noise_dim(self) -> int:
        return self.d

    def default_x0(self) -> np.ndarray:
        return np.stack([s.project(s.center()) for s in self.sets])

    def expected_cost_surface(self, i, t, x_i, x_others_sum_psi) -> float:
        s = self.psi(i, x_i) / self.N + x_others_sum_psi / self.N
        return self.cost(i, t, x_i, s)

    # -- batch oracles (N players at once) ----------------------------------
    def batch_psi(self, X) -> np.ndarray:
        return np.stack([self.psi(i, X[i]) for i in range(self.N)])

    def batch_gradient(self, t: int, X, Y, Xi=None) -> np.ndarray:
        if Xi is None:
            return np.stack([self.pseudo_gradient(i, t, X[i], Y[i]) for i in range(self.N)])
        return np.stack([self.stochastic_gradient(i, t, X[i], Y[i], Xi[i]) for i in range(self.N)])

    def batch_constraint(self, t: int, X) -> tuple[np.ndarray, np.ndarray]:
        vals, jacs = zip(*(self.constraint_eval(i, t, X[i]) for i in range(self.N)))
        return np.stack(vals), np.stack(jacs)

    def batch_project(self, V) -> np.ndarray:
        return np.stack([self.project_local(i, V[i]) for i in range(self.N)])

    # -- along a time axis (regret / comparator) -----------------------------
    def cost_along(self, i: int, ts, X_i, S) -> np.ndarray:
        """``f_{i,t}(X_i[k], S[k])`` for ``t = ts[k]``."""
        return np.array([self.cost(i, int(t), X_i[k], S[k]) for k, t in enumerate(ts)])

    def constraint_along(self, i: int, ts, X_i) -> np.ndarray:
        return np.stack([self.constraint_eval(i, int(t), X_i[k])[0] for k, t in enumerate(ts)])

    def gradient_noise_along(self, i: int, ts, X_i, Y, Xi) -> np.ndarray:
        """``q - p`` along a trajectory (used by the martingale check)."""
        return np.stack(
            [
                self.stochastic_gradient(i, int(t), X_i[k], Y[k], Xi[k]) - self.pseudo_gradient(i, int(t), X_i[k], Y[k])
                for k, t in enumerate(ts)
            ]
        )


class ScalarQuadraticGame(GameModel):
    """Scalar-decision game with quadratic cost and constraint.

    For player ``i`` at time ``t`` with coefficients ``(a, b, c, r, u, v)``::

        f(x, s)   = a + b x + c x^2 - (p0 - price_slope * s) x
        F(x, s, xi) = f(x, s) + xi x                 (noisy cost)
        g(x)      = r + u x + v x^2 - cap / N        (coupled constraint share)
        psi(x)    = kappa x

    so the pseudo-gradient is
    ``b + 2 c x - p0 + price_slope * (y + kappa x / N)`` and the sampled
    gradient adds ``xi``.

    Parameters
    ----------
    N : int
    ranges : mapping
        ``name -> (low, high)`` for each of ``a, b, c, r, u, v``; coefficients
        are drawn uniformly and independently per ``(i, t)``.
    table : array, optional
        Explicit coefficients of shape ``(T, N, 6)`` (or ``(1, N, 6)``) that
        replace the random streams; used for scripted instances.
    """

    d = n = m = 1

    def __init__(
        self,
        N: int,
        *,
        ranges: Mapping[str, tuple[float, float]] | None = None,
        table=None,
        lo: float = 0.0,
        hi: float = 20.0,
        p0: float = 0.0,
        price_slope: float = 0.0,
        kappa: float = 1.0,
        cap: float = 0.0,
        noise: NoiseModel | None = None,
        time_varying: bool = True,
        seed: int = 0,
        name: str = "scalar-quadratic",
        constants: DeclaredConstants | None = None,
    ):
        if N < 1:
            raise ValueError("need at least one player")
        self.N = int(N)
        self.seed = int(seed)
        self.p0 = float(p0)
        self.price_slope = float(price_slope)
        self.kappa = float(kappa)
        self.cap = float(cap)
        self.cap_share = self.cap / self.N
        self.noise = noise if noise is not None else NoiseModel()
        self.time_varying = bool(time_varying)
        self.name = name
        self.sets = [Box(lo, hi) for _ in range(self.N)]
        self.lo = np.full(self.N, float(lo))
        self.hi = np.full(self.N, float(hi))
        if table is not None:
            tab = np.array(table, dtype=float)
            if tab.ndim != 3 or tab.shape[1:] != (self.N, 6):
                raise ValueError(f"coefficient table must have shape (T, {self.N}, 6), got {tab.shape}")
            self.ranges = {k: (float(tab[..., j].min()), float(tab[..., j].max())) for j, k in enumerate(COEFFICIENTS)}
            self._table = tab
            self._explicit = True
            if tab.shape[0] == 1:
                self.time_varying = False
        else:
            if ranges is None:
                raise ValueError("give either coefficient ranges or an explicit table")
            missing = set(COEFFICIENTS) - set(ranges)
            if missing:
                raise ValueError(f"missing coefficient ranges: {sorted(missing)}")
            self.ranges = {k: (float(ranges[k][0]), float(ranges[k][1])) for k in COEFFICIENTS}
            for k, (a, b) in self.ranges.items():
                if a > b:
                    raise ValueError(f"range for {k} is empty")
            if self.ranges["c"][0] + self.price_slope * self.kappa / (2 * self.N) < 0 or self.ranges["v"][0] < 0:
                raise ValueError("cost and constraint must be convex (c, v >= 0)")
            self._table = np.empty((0, self.N, 6))
            self._explicit = False
        self.constants = constants if constants is not None else self._interval_constants()
        self.metadata = {
            "scenario": name,
            "N": self.N,
            "p0": self.p0,
            "price_slope": self.price_slope,
            "kappa": self.kappa,
            "cap": self.cap,
            "box": [float(lo), float(hi)],
            "ranges": {k: list(v) for k, v in self.ranges.items()},
            "noise": self.noise.to_dict(),
            "time_varying": self.time_varying,
            "seed": self.seed,
        }

    # -- coefficient streams --------------------------------------------------
    def coefficients(self, T: int) -> np.ndarray:
        """Coefficient table for ``t = 0..T-1`` (a single row when frozen).

        Random streams are keyed on ``(seed, player, coefficient)`` and are
        prefix-stable, so extending the horizon never changes earlier rows.
        """
        if not self.time_varying:
            if self._explicit:
                return self._table[:1]
            if self._table.shape[0] < 1:
                self._table = self._draw(1)
            return self._table[:1]
        if self._explicit:
            if T > self._table.shape[0]:
                raise ValueError(f"explicit coefficient table covers {self._table.shape[0]} steps, {T} requested")
            return self._table[:T]
        if T > self._table.shape[0]:
            self._table = self._draw(max(T, 2 * self._table.shape[0]))
        return self._table[:T]

    def _draw(self, T: int) -> np.ndarray:
        tab = np.empty((T, self.N, 6))
        for i in range(self.N):
            for k, name in enumerate(COEFFICIENTS):
                lo, hi = self.ranges[name]
                tab[:, i, k] = lo + (hi - lo) * keyed_generator(self.seed, "coef", i, k).random(T)
        tab.setflags(write=False)
        return tab

    def coef(self, t: int) -> np.ndarray:
        """Coefficients at time ``t``, shape ``(N, 6)``."""
        if not self.time_varying:
            return self.coefficients(1)[0]
        return self.coefficients(t + 1)[t]

    def coef_rows(self, ts) -> np.ndarray:
        ts = np.asarray(ts, dtype=int)
        if not self.time_varying:
            return np.broadcast_to(self.coefficients(1)[0], (ts.size, self.N, 6))
        if ts.size == 0:
            return np.empty((0, self.N, 6))
        return self.coefficients(int(ts.max()) + 1)[ts]

    # -- per-player oracles ---------------------------------------------------
    def psi(self, i, x_i):
        return self.kappa * np.atleast_1d(np.asarray(x_i, dtype=float))

    def psi_jacobian(self, i, x_i):
        return np.array([[self.kappa]])

    def cost(self, i, t, x_i, s):
        a, b, c, _, _, _ = self.coef(t)[i]
        x = float(np.asarray(x_i).reshape(-1)[0])
        s = float(np.asarray(s).reshape(-1)[0])
        return a + b * x + c * x * x - (self.p0 - self.price_slope * s) * x

    def pseudo_gradient(self, i, t, x_i, y):
        x = self._check_domain(i, x_i)[0]
        y = float(np.asarray(y).reshape(-1)[0])
        _, b, c, _, _, _ = self.coef(t)[i]
        return np.array([b + 2.0 * c * x - self.p0 + self.price_slope * y + self.kappa / self.N * self.price_slope * x])

    def stochastic_gradient(self, i, t, x_i, y, xi):
        return self.pseudo_gradient(i, t, x_i, y) + float(np.asarray(xi).reshape(-1)[0])

    def constraint_eval(self, i, t, x_i):
        x = self._check_domain(i, x_i)[0]
        _, _, _, r, u, v = self.coef(t)[i]
        return np.array([r + u * x + v * x * x - self.cap_share]), np.array([[u + 2.0 * v * x]])

    # -- vectorized -------------------------------------------------------------
    def batch_psi(self, X):
        return self.kappa * np.asarray(X, dtype=float).reshape(self.N, 1)

    def batch_gradient(self, t, X, Y, Xi=None):
        C = self.coef(t)
        x = np.asarray(X, dtype=float).reshape(self.N)
        y = np.asarray(Y, dtype=float).reshape(self.N)
        p = C[:, 1] + 2.0 * C[:, 2] * x - self.p0 + self.price_slope * y + self.kappa / self.N * self.price_slope * x
        if Xi is not None:
            p = p + np.asarray(Xi, dtype=float).reshape(self.N)
        return p[:, None]

    def batch_constraint(self, t, X):
        C = self.coef(t)
        x = np.asarray(X, dtype=float).reshape(self.N)
        g = C[:, 3] + C[:, 4] * x + C[:, 5] * x * x - self.cap_share
        J = C[:, 4] + 2.0 * C[:, 5] * x
        return g[:, None], J[:, None, None]

    def batch_project(self, V):
        return np.clip(np.asarray(V, dtype=float).reshape(self.N), self.lo, self.hi)[:, None]

    def cost_along(self, i, ts, X_i, S):
        C = self.coef_rows(ts)[:, i, :]
        x = np.asarray(X_i, dtype=float).reshape(-1)
        s = np.asarray(S, dtype=float).reshape(-1)
        return C[:, 0] + C[:, 1] * x + C[:, 2] * x * x - (self.p0 - self.price_slope * s) * x

    def constraint_along(self, i, ts, X_i):
        C = self.coef_rows(ts)[:, i, :]
        x = np.asarray(X_i, dtype=float).reshape(-1)
        return (C[:, 3] + C[:, 4] * x + C[:, 5] * x * x - self.cap_share)[:, None]

    def gradient_noise_along(self, i, ts, X_i, Y, Xi):
        return np.asarray(Xi, dtype=float).reshape(-1, 1)

    # -- constants --------------------------------------------------------------
    def _interval_constants(self) -> DeclaredConstants:
        lo, hi = float(self.lo.min()), float(self.hi.max())
        xs = Interval(lo, hi)
        R = {k: Interval(*self.ranges[k]) for k in COEFFICIENTS}
        g = R["r"] + R["u"] * xs + R["v"] * xs.square() - self.cap_share
        jac = R["u"] + Interval(2.0, 2.0) * R["v"] * xs
        y = Interval(self.kappa * lo, self.kappa * hi) if self.kappa >= 0 else Interval(self.kappa * hi, self.kappa * lo)
        p = (
            R["b"]
            + Interval(2.0, 2.0) * R["c"] * xs
            - self.p0
            + Interval(self.price_slope, self.price_slope) * y
            + Interval(self.kappa / self.N * self.price_slope, self.kappa / self.N * self.price_slope) * xs
        )
        L = max(max(abs(lo), abs(hi)), g.mag)
        S = p.mag + self.noise.bound
        return DeclaredConstants(L=L, M=jac.mag, S=S, L_sigma=abs(self.kappa))


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __add__(self, other):
        if isinstance(other, Interval):
            return Interval(self.lo + other.lo, self.hi + other.hi)
        return Interval(self.lo + other, self.hi + other)

    def __sub__(self, other):
        if isinstance(other, Interval):
            return Interval(self.lo - other.hi, self.hi - other.lo)
        return Interval(self.lo - other, self.hi - other)

    def __mul__(self, other):
        ps = (self.lo * other.lo, self.lo * other.hi, self.hi * other.lo, self.hi * other.hi)
        return Interval(min(ps), max(ps))

    def square(self):
        if self.lo <= 0.0 <= self.hi:
            return Interval(0.0, max(self.lo**2, self.hi**2))
        return Interval(min(self.lo**2, self.hi**2), max(self.lo**2, self.hi**2))

    @property
    def mag(self) -> float:
        return max(abs(self.lo), abs(self.hi))


class CallableGame(GameModel):
    """Game assembled from user callables (vector decisions allowed).

    Callables use the per-player signatures of :class:`GameModel`:
    ``cost(i, t, x_i, s)``, ``gradient(i, t, x_i, y)``,
    ``constraint(i, t, x_i) -> (value, jacobian)``, ``psi(i, x_i)`` and
    ``psi_jacobian(i, x_i)``.  The sampled gradient defaults to
    ``gradient + xi``.
    """

    def __init__(
        self,
        N: int,
        sets: list,
        *,
        cost,
        gradient,
        constraint,
        psi=None,
        psi_jacobian=None,
        n: int | None = None,
        m: int = 1,
        noise: NoiseModel | None = None,
        stochastic_gradient=None,
        time_varying: bool = True,
        constants: DeclaredConstants | None = None,
        name: str = "callable",
    ):
        self.N = N
        self.sets = list(sets)
        if len(self.sets) != N:
            raise ValueError("need one local set per player")
        self.d = self.sets[0].d
        self.n = n if n is not None else self.d
        self.m = m
        self._cost = cost
        self._grad = gradient
        self._con = constraint
        self._psi = psi if psi is not None else (lambda i, x: np.asarray(x, dtype=float))
        self._psi_jac = psi_jacobian if psi_jacobian is not None else (lambda i, x: np.eye(self.d, self.n))
        self._sgrad = stochastic_gradient
        self.noise = noise if noise is not None else NoiseModel()
        self.time_varying = time_varying
        self.constants = constants if constants is not None else DeclaredConstants()
        self.name = name
        self.metadata = {"scenario": name, "N": N}

    def psi(self, i, x_i):
        return np.atleast_1d(np.asarray(self._psi(i, np.atleast_1d(x_i)), dtype=float))

    def psi_jacobian(self, i, x_i):
        return np.asarray(self._psi_jac(i, np.atleast_1d(x_i)), dtype=float).reshape(self.d, self.n)

    def cost(self, i, t, x_i, s):
        return float(self._cost(i, t, np.atleast_1d(x_i), np.atleast_1d(s)))

    def pseudo_gradient(self, i, t, x_i, y):
        x_i = self._check_domain(i, x_i)
        return np.atleast_1d(np.asarray(self._grad(i, t, x_i, np.atleast_1d(y)), dtype=float))

    def stochastic_gradient(self, i, t, x_i, y, xi):
        if self._sgrad is not None:
            x_i = self._check_domain(i, x_i)
            return np.atleast_1d(np.asarray(self._sgrad(i, t, x_i, np.atleast_1d(y), xi), dtype=float))
        return self.pseudo_gradient(i, t, x_i, y) + np.asarray(xi, dtype=float).reshape(self.d)

    def constraint_eval(self, i, t, x_i):
        x_i = self._check_domain(i, x_i)
        val, jac = self._con(i, t, x_i)
        return np.atleast_1d(np.asarray(val, dtype=float)), np.asarray(jac, dtype=float).reshape(self.d, self.m)


# ---------------------------------------------------------------------------
# scenario factories

ELECTRICITY_RANGES = {
    "a": (1.0, 9.0),
    "b": (5.0, 15.0),
    "c": (6.0, 10.0),
    "r": (1.0, 2.0),
    "u": (2.0, 5.0),
    "v": (1.0, 3.0),
}

QUADRATIC_TOY_RANGES = {
    "a": (0.0, 0.0),
    "b": (-3.0, 1.0),
    "c": (0.5, 1.5),
    "r": (0.0, 0.0),
    "u": (1.0, 1.0),
    "v": (0.0, 0.0),
}


def _merge_ranges(base: dict, overrides: Mapping | None) -> dict:
    out = dict(base)
    for k, v in (overrides or {}).items():
        if k not in out:
            raise ValueError(f"unknown coefficient {k!r}")
        out[k] = (float(v[0]), float(v[1]))
    return out


def make_electricity_market(
    N: int = 5,
    seed: int = 0,
    *,
    time_varying: bool = True,
    p0: float = 40.0,
    price_slope: float = 0.8,
    cap: float = 150.0,
    box: tuple[float, float] = (0.0, 20.0),
    ranges: Mapping | None = None,
    noise: NoiseModel | None = None,
) -> ScalarQuadraticGame:
    """Generators selling into a market with a shared transmission limit.

    Generator ``i`` produces ``x_i`` in ``[0, 20]`` at cost
    ``a + b x + c x^2`` and is paid ``p0 - xi - price_slope * sum_j x_j`` per
    unit; the grid load ``sum_i (r + u x_i + v x_i^2)`` may not exceed ``cap``.
    The aggregate uses ``psi_i(x) = N x`` so that ``sigma(x)`` is total
    generation.  With ``time_varying=False`` the coefficients drawn for
    ``t = 0`` are used at every step.
    """
    if N < 2:
        raise ValueError("the electricity market needs N >= 2")
    return ScalarQuadraticGame(
        N,
        ranges=_merge_ranges(ELECTRICITY_RANGES, ranges),
        lo=box[0],
        hi=box[1],
        p0=p0,
        price_slope=price_slope,
        kappa=float(N),
        cap=cap,
        noise=noise if noise is not None else NoiseModel("uniform", -0.5, 0.5),
        time_varying=time_varying,
        seed=seed,
        name="electricity-market",
    )


def make_quadratic_toy(
    N: int = 2,
    seed: int = 0,
    *,
    time_varying: bool = False,
    cap: float = 0.0,
    box: tuple[float, float] = (-5.0, 5.0),
    ranges: Mapping | None = None,
    noise: NoiseModel | None = None,
) -> ScalarQuadraticGame:
    """Decoupled quadratics ``c_i x^2 + b_i x`` under ``sum_i x_i <= cap``.

    The variational equilibrium has the closed form implemented in
    :func:`quadratic_toy_solution`.
    """
    return ScalarQuadraticGame(
        N,
        ranges=_merge_ranges(QUADRATIC_TOY_RANGES, ranges),
        lo=box[0],
        hi=box[1],
        cap=cap,
        noise=noise if noise is not None else NoiseModel("uniform", -0.5, 0.5),
        time_varying=time_varying,
        seed=seed,
        name="quadratic-toy",
    )


def quadratic_toy_solution(model: ScalarQuadraticGame) -> tuple[np.ndarray, float]:
    """Closed-form vGNE of a time-invariant, interior, linearly-coupled toy.

    Stationarity ``2 c_i x_i + b_i + u_i mu = 0`` with ``sum x_i = cap``
    when the unconstrained minimizers violate the cap.
    """
    C = model.coef(0)
    b, c, u = C[:, 1], C[:, 2], C[:, 4]
    free = -b / (2 * c)
    g_free = np.sum(C[:, 3] + u * free) - model.cap
    if g_free <= 0:
        return free, 0.0
    mu = g_free / np.sum(u * u / (2 * c))
    return -(b + u * mu) / (2 * c), float(mu)


SCENARIOS: dict[str, Callable[..., ScalarQuadraticGame]] = {
    "electricity-market": make_electricity_market,
    "quadratic-toy": make_quadratic_toy,
}


def noise_from_mapping(spec: Mapping | None) -> NoiseModel | None:
    if spec is None:
        return None
    spec = dict(spec)
    kind = spec.pop("kind", "none")
    if kind == "uniform" and "half_width" in spec:
        w = float(spec.pop("half_width"))
        spec["low"], spec["high"] = -w, w
    return NoiseModel(kind, **{k: (None if v is None else float(v)) for k, v in spec.items()})


def scenario_from_mapping(spec: Mapping, source: str = "<scenario>") -> ScalarQuadraticGame:
    """Build a scenario from a plain mapping.

    Recognised fields: ``template`` (a built-in id), ``N``, ``seed``,
    ``time_varying``, ``bounds`` (``[lo, hi]``), ``ranges`` (coefficient
    overrides), ``noise`` (``{"kind": ..., ...}``), ``cap``; the electricity
    market additionally accepts ``p0`` and ``price_slope``.
    """
    spec = dict(spec)
    template = spec.pop("template", spec.pop("id", None))
    if template not in SCENARIOS:
        raise ValueError(f"{source}: unknown scenario template {template!r}; built-ins: {sorted(SCENARIOS)}")
    kwargs = {}
    for key in ("N", "seed"):
        if key in spec:
            kwargs[key] = int(spec.pop(key))
    if "time_varying" in spec:
        kwargs["time_varying"] = bool(spec.pop("time_varying"))
    if "bounds" in spec:
        kwargs["box"] = tuple(float(v) for v in spec.pop("bounds"))
    if "ranges" in spec:
        kwargs["ranges"] = spec.pop("ranges")
    if "noise" in spec:
        kwargs["noise"] = noise_from_mapping(spec.pop("noise"))
    for key in ("cap", "p0", "price_slope"):
        if key in spec:
            if key != "cap" and template != "electricity-market":
                raise ValueError(f"{source}: field {key!r} only applies to electricity-market")
            kwargs[key] = float(spec.pop(key))
    if spec:
        raise ValueError(f"{source}: unknown field(s) {sorted(spec)}")
    return SCENARIOS[template](**kwargs)


def load_scenario(path) -> ScalarQuadraticGame:
    path = Path(path)
    try:
        spec = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return scenario_from_mapping(spec, str(path))


# ---------------------------------------------------------------------------
# numerical probes


def lipschitz_estimate(fn, points_a, points_b) -> float:
    """Largest ``||fn(a) - fn(b)|| / ||a - b||`` over sample pairs."""
    num = np.array([np.linalg.norm(np.atleast_1d(fn(a)) - np.atleast_1d(fn(b))) for a, b in zip(points_a, points_b)])
    den = np.linalg.norm(np.asarray(points_a) - np.asarray(points_b), axis=1)
    keep = den > 0
    return float(np.max(num[keep] / den[keep]))


def convexity_violation(fn, points_a, points_b) -> float:
    """Max of ``g((u+v)/2) - (g(u)+g(v))/2`` over sample pairs (<= 0 for convex ``g``)."""
    worst = -np.inf
    for a, b in zip(points_a, points_b):
        mid = np.atleast_1d(fn(0.5 * (a + b)))
        avg = 0.5 * (np.atleast_1d(fn(a)) + np.atleast_1d(fn(b)))
        worst = max(worst, float(np.max(mid - avg)))
    return worst


def strong_monotonicity_estimate(model: GameModel, t: int = 0, pairs: int = 10_000, seed: int = 0) -> float:
    """Smallest ``<G(x) - G(x'), x - x'> / ||x - x'||^2`` over random joint pairs.

    ``G`` stacks the exact pseudo-gradients evaluated at the true aggregate.
    """
    rng = keyed_generator(seed, "probe", 0)
    X = np.stack([s.sample(rng, pairs) for s in model.sets], axis=1)
    Xp = np.stack([s.sample(rng, pairs) for s in model.sets], axis=1)

    def G(Z):
        out = np.empty_like(Z)
        for k in range(Z.shape[0]):
            agg = model.aggregate(Z[k])
            Y = np.broadcast_to(agg, (model.N, model.n))
            out[k] = model.batch_gradient(t, Z[k], Y)
        return out

    D = X - Xp
    num = np.einsum("kij,kij->k", G(X) - G(Xp), D)
    den = np.einsum("kij,kij->k", D, D)
    return float(np.min(num / den))
