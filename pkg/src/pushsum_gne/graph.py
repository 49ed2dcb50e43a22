"""Time-varying directed communication graphs with column-stochastic weights.

Weight matrices follow the convention ``W[i, j] = w_ij``: the weight node ``i``
puts on the message it receives from node ``j`` (edge ``j -> i``).  Columns sum
to one, so mixing conserves the total mass of whatever is pushed around.
"""

from __future__ import annotations

import json
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.sparse.csgraph import connected_components

COLUMN_TOL = 1e-12


class InvalidGraphError(ValueError):
    """Raised when an adjacency or weight matrix cannot be used for mixing."""


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    first_offending_index: int | None = None
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    """Ordered pass/fail entries from a validator; never raises on failure."""

    title: str
    checks: tuple[CheckResult, ...]
    sampled: bool = False

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def format(self) -> str:
        head = self.title + (" (sampled validation)" if self.sampled else "")
        lines = [head]
        for c in self.checks:
            mark = "PASS" if c.passed else "FAIL"
            where = "" if c.first_offending_index is None else f" at index {c.first_offending_index}"
            extra = f": {c.detail}" if c.detail else ""
            lines.append(f"  [{mark}] {c.name}{where}{extra}")
        return "\n".join(lines)


def build_weights(adjacency) -> np.ndarray:
    """Column-stochastic weights from a boolean adjacency with self-loops.

    ``adjacency[i, j]`` is true when ``j`` sends to ``i``.  Every existing edge
    ``j -> i`` gets ``1 / d_j`` where ``d_j`` is the out-degree of ``j``
    counting its self-loop.

    Raises
    ------
    InvalidGraphError
        If the matrix is not square or some node lacks a self-loop.
    """
    A = np.asarray(adjacency, dtype=bool)
    if A.ndim != 2 or A.shape[0] != A.shape[1] or A.shape[0] < 1:
        raise InvalidGraphError(f"adjacency must be a nonempty square matrix, got shape {A.shape}")
    missing = np.flatnonzero(~np.diag(A))
    if missing.size:
        raise InvalidGraphError(f"node {int(missing[0])} has no self-loop")
    out_degree = A.sum(axis=0)
    return A / out_degree[np.newaxis, :]


def check_weight_matrix(W, min_weight: float | None = None) -> list[str]:
    """Return the list of violated weight-matrix properties (empty if valid)."""
    W = np.asarray(W, dtype=float)
    problems = []
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        return ["not square"]
    if np.any(W < 0):
        problems.append("negative entry")
    if np.max(np.abs(W.sum(axis=0) - 1.0)) > COLUMN_TOL:
        problems.append("column sums differ from 1")
    if np.any(np.diag(W) <= 0):
        problems.append("nonpositive diagonal")
    if min_weight is not None:
        nz = W[W > 0]
        if nz.size and nz.min() < min_weight:
            problems.append("nonzero entry below minimum weight")
    return problems


def mix(values, W) -> np.ndarray:
    """Apply one synchronous mixing round: row ``i`` becomes ``sum_j W[i, j] * values[j]``."""
    W = np.asarray(W, dtype=float)
    V = np.asarray(values, dtype=float)
    if V.shape[0] != W.shape[1]:
        raise ValueError(f"dimension mismatch: values have {V.shape[0]} rows, W is {W.shape}")
    return W @ V


def _strongly_connected(A: np.ndarray) -> bool:
    n_comp, _ = connected_components(A.astype(np.int8), directed=True, connection="strong")
    return n_comp == 1


class GraphSchedule:
    """A cyclic (or generator-backed) sequence of weight matrices.

    Parameters
    ----------
    matrices : sequence of (N, N) arrays
        One period of the schedule; slot ``t`` uses ``matrices[t % len]``.
    window : int
        Connectivity window ``U``: every ``U`` consecutive slots must have a
        strongly connected union graph.
    generator : callable, optional
        ``generator(t) -> W``.  Overrides ``matrices`` for arbitrary schedules.
    horizon : int
        Number of slots sampled when validating a generator-backed schedule.
    name : str
        Label used in reports and manifests.
    """

    def __init__(
        self,
        matrices: Sequence | None = None,
        window: int = 1,
        generator: Callable[[int], np.ndarray] | None = None,
        horizon: int = 256,
        name: str = "custom",
    ):
        if matrices is None and generator is None:
            raise ValueError("schedule needs matrices or a generator")
        if window < 1:
            raise ValueError("window must be a positive integer")
        self.window = int(window)
        self.generator = generator
        self.horizon = int(horizon)
        self.name = name
        if generator is None:
            mats = [np.array(m, dtype=float) for m in matrices]
            if not mats:
                raise ValueError("schedule is empty")
            shapes = {m.shape for m in mats}
            if len(shapes) != 1:
                raise InvalidGraphError(f"inconsistent matrix shapes {sorted(shapes)}")
            self._stack = np.stack(mats)
            self._stack.setflags(write=False)
        else:
            self._stack = np.stack([np.asarray(generator(t), dtype=float) for t in range(self.horizon)])
            self._stack.setflags(write=False)

    @property
    def N(self) -> int:
        return self._stack.shape[1]

    @property
    def period(self) -> int:
        return self._stack.shape[0]

    @property
    def cyclic(self) -> bool:
        return self.generator is None

    @property
    def stack(self) -> np.ndarray:
        """Matrices of one period (or the sampled horizon), shape ``(K, N, N)``."""
        return self._stack

    def __getitem__(self, t: int) -> np.ndarray:
        if self.generator is not None and t >= self.period:
            return np.asarray(self.generator(t), dtype=float)
        return self._stack[t % self.period]

    def matrices_for(self, T: int) -> np.ndarray:
        """Matrices for slots ``0..T-1``; cyclic schedules return one period."""
        if self.cyclic:
            return self._stack
        return np.stack([self[t] for t in range(T)])

    @property
    def min_weight(self) -> float:
        nz = self._stack[self._stack > 0]
        return float(nz.min())

    def __repr__(self) -> str:
        return f"GraphSchedule(name={self.name!r}, N={self.N}, period={self.period}, window={self.window})"


def validate_schedule(schedule: GraphSchedule) -> ValidationReport:
    """Check the three graph conditions slot by slot.

    Checks are reported in order: minimum positive weight (with self-loops),
    column-stochasticity, and joint strong connectivity of every window of
    ``schedule.window`` consecutive slots.  Cyclic schedules are checked over
    one full period (windows wrap around); generator-backed ones over the
    sampled horizon.
    """
    stack = schedule.stack
    K = stack.shape[0]
    checks = []

    w_min = float(stack[stack > 0].min()) if np.any(stack > 0) else 0.0
    bad = None
    for t in range(K):
        W = stack[t]
        if np.any(W < 0) or np.any(np.diag(W) <= 0):
            bad = t
            break
    weight_ok = bad is None and 0.0 < w_min < 1.0 + COLUMN_TOL
    checks.append(
        CheckResult(
            "positive weights bounded below",
            weight_ok,
            bad,
            f"min nonzero weight {w_min:.6g}" if weight_ok else "negative entry or missing self-loop",
        )
    )

    bad = None
    worst = 0.0
    for t in range(K):
        dev = float(np.max(np.abs(stack[t].sum(axis=0) - 1.0)))
        worst = max(worst, dev)
        if dev > COLUMN_TOL and bad is None:
            bad = t
    checks.append(
        CheckResult("column-stochastic", bad is None, bad, f"max column-sum deviation {worst:.3g}")
    )

    U = schedule.window
    bad = None
    starts = range(K) if schedule.cyclic else range(max(K - U + 1, 1))
    for t in starts:
        union = np.zeros(stack.shape[1:], dtype=bool)
        for l in range(U):
            union |= stack[(t + l) % K] > 0
        if not _strongly_connected(union):
            bad = t
            break
    checks.append(
        CheckResult(f"union over window U={U} strongly connected", bad is None, bad)
    )
    return ValidationReport("graph schedule", tuple(checks), sampled=not schedule.cyclic)


@dataclass(frozen=True)
class MixConstants:
    """Running estimate of the push-sum lower bound ``r`` (and optionally theta).

    ``product`` holds ``W_t ... W_0 1``; ``r_estimate`` is the smallest entry
    it has had so far, starting from the all-ones vector.
    """

    product: np.ndarray
    r_estimate: float = 1.0
    theta_estimate: float | None = None

    @classmethod
    def start(cls, N: int) -> "MixConstants":
        return cls(np.ones(N), 1.0)


def update_mix_constants(state: MixConstants, W) -> MixConstants:
    prod = np.asarray(W, dtype=float) @ state.product
    r = min(state.r_estimate, float(prod.min()))
    return MixConstants(prod, r, state.theta_estimate)


def theta_ceiling(N: int, U: int) -> float:
    """Analytic upper bound ``(1 - N^{-NU})^{1/(NU)}`` on the consensus contraction."""
    nu = N * U
    return float(np.exp(np.log1p(-float(N) ** (-nu)) / nu))


def consensus_probe(schedule: GraphSchedule, steps: int = 400, seed: int = 0) -> np.ndarray:
    """Push-sum consensus error on a constant-input probe.

    Random initial values are mixed with ``z_0 = 1``; returns
    ``max_i |y_i / z_i - mean(y_0)|`` for each step.
    """
    rng = np.random.default_rng(seed)
    N = schedule.N
    y = rng.standard_normal(N)
    target = y.mean()
    z = np.ones(N)
    err = np.empty(steps)
    for t in range(steps):
        W = schedule[t]
        y = W @ y
        z = W @ z
        err[t] = np.max(np.abs(y / z - target))
    return err


def estimate_theta(schedule: GraphSchedule, steps: int = 400, seed: int = 0, floor: float = 1e-12) -> float:
    """Per-step geometric decay factor of the consensus probe (least squares on log error).

    Returns 0 when the probe reaches exact consensus within two steps.
    """
    err = consensus_probe(schedule, steps, seed)
    scale = max(err[0], 1e-300)
    keep = err > floor * scale
    t = np.arange(1, steps + 1)[keep]
    if t.size < 3:
        return 0.0
    slope = np.polyfit(t, np.log(err[keep]), 1)[0]
    return float(np.exp(slope))


def paper_fig1(N: int = 5) -> GraphSchedule:
    """Four sparse digraphs that are only jointly strongly connected.

    A reconstruction of the four-graph switching network of the electricity
    market experiment: ring edge ``k -> k+1`` goes to graph ``k mod 4`` and
    chord ``k -> k+2`` to graph ``(k+2) mod 4``.  No single graph is strongly
    connected for ``N >= 3``; their union contains the full ring.
    """
    if N < 2:
        raise ValueError("paper-fig1 needs at least two nodes")
    adj = [np.eye(N, dtype=bool) for _ in range(4)]
    for k in range(N):
        adj[k % 4][(k + 1) % N, k] = True
        if N > 2:
            adj[(k + 2) % 4][(k + 2) % N, k] = True
    return GraphSchedule([build_weights(A) for A in adj], window=4, name="paper-fig1")


def complete_graph(N: int) -> GraphSchedule:
    return GraphSchedule([build_weights(np.ones((N, N), dtype=bool))], window=1, name="complete")


BUILTIN_SCHEDULES: dict[str, Callable[[int], GraphSchedule]] = {
    "paper-fig1": paper_fig1,
    "complete": complete_graph,
}


def builtin_schedule(name: str, N: int) -> GraphSchedule:
    try:
        return BUILTIN_SCHEDULES[name](N)
    except KeyError:
        raise KeyError(f"unknown graph schedule {name!r}; built-ins: {sorted(BUILTIN_SCHEDULES)}") from None


def schedule_from_mapping(spec: dict, source: str = "<mapping>") -> GraphSchedule:
    """Build a schedule from ``{"n": N, "window": U, "slots": [...]}``.

    Each slot is either ``{"edges": [[j, i], ...]}`` (0-based, ``j -> i``;
    self-loops are added automatically and weights follow the out-degree
    rule) or ``{"matrix": [[...], ...]}`` (used verbatim).
    """
    try:
        N = int(spec["n"])
        slots = spec["slots"]
    except KeyError as exc:
        raise ValueError(f"{source}: missing field {exc.args[0]!r}") from None
    window = int(spec.get("window", len(slots)))
    mats = []
    for k, slot in enumerate(slots):
        if "matrix" in slot:
            W = np.asarray(slot["matrix"], dtype=float)
            if W.shape != (N, N):
                raise ValueError(f"{source}: slots[{k}].matrix has shape {W.shape}, expected {(N, N)}")
            mats.append(W)
        elif "edges" in slot:
            A = np.eye(N, dtype=bool)
            for e, edge in enumerate(slot["edges"]):
                j, i = (int(v) for v in edge)
                if not (0 <= i < N and 0 <= j < N):
                    raise ValueError(f"{source}: slots[{k}].edges[{e}] = {edge} out of range for n={N}")
                A[i, j] = True
            mats.append(build_weights(A))
        else:
            raise ValueError(f"{source}: slots[{k}] needs 'edges' or 'matrix'")
    return GraphSchedule(mats, window=window, name=spec.get("name", Path(source).stem))


def load_schedule(path) -> GraphSchedule:
    path = Path(path)
    try:
        spec = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return schedule_from_mapping(spec, str(path))
