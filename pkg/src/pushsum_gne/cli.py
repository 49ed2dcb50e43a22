"""Command-line experiment runner.

Subcommands
-----------
``run``       execute one or more seeded runs and write logs, CSVs and a manifest
``validate``  print the graph and stepsize validation reports without running
``solve``     compute the variational equilibrium or per-player comparators
``metrics``   recompute CSV reports from saved run logs

Configs are JSON objects with the fields of :class:`RunConfig`; presets are
embedded configs and any field can be overridden with ``--set key=value``
(dotted keys reach into nested mappings, values are parsed as JSON when
possible).  The default output root is ``$PUSHSUM_GNE_OUT`` or ``./runs``.

Exit status: 0 success, 1 validation failure or solver non-convergence,
2 configuration error, 3 diverged run, 4 monitor violation in strict mode.
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .engine import DivergedRunError, MonitorViolation, PreconditionError, StepsizeSchedule, run, validate_regime
from .game import ScalarQuadraticGame, load_scenario, quadratic_toy_solution, scenario_from_mapping
from .graph import BUILTIN_SCHEDULES, builtin_schedule, load_schedule, schedule_from_mapping, validate_schedule
from .metrics import (
    MetricsLog,
    checkpoints,
    iota_from_model,
    regret_report,
    residuals,
    write_residual_csv,
    write_summary_csv,
    write_timeseries_csv,
)
from .solvers import SolverError, solve_comparator, solve_vgne

log = logging.getLogger("pushsum_gne")

OUT_ENV = "PUSHSUM_GNE_OUT"
EXIT_OK, EXIT_INVALID, EXIT_CONFIG, EXIT_DIVERGED, EXIT_MONITOR = 0, 1, 2, 3, 4
OUTPUT_KINDS = ("regret", "residuals", "timeseries", "log")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """One experiment.

    Attributes
    ----------
    scenario : str or dict
        Built-in id, path to a scenario JSON file, or a mapping with
        ``template`` and overrides (see ``game.scenario_from_mapping``).
    graph : str or dict
        Built-in schedule id, path to a schedule JSON file, or a mapping.
    exponents : list of float
        ``(a1, a2, a3)``.
    regime : str or None
        Checked with ``engine.validate_regime`` before dispatch.
    instance_seed : int or None
        Seed of the coefficient streams; ``None`` uses each run's seed.
    outputs : list of str
        Any of ``regret``, ``residuals``, ``timeseries``, ``log``.
    """

    scenario: object = "electricity-market"
    graph: object = "paper-fig1"
    exponents: list = field(default_factory=lambda: [0.8, 0.2, 0.2])
    regime: str | None = "online-T1"
    T: int = 100_000
    seed: int = 0
    runs: int = 1
    monitors: str = "record"
    backend: str = "auto"
    x0: list | None = None
    instance_seed: int | None = None
    checkpoint_start: int = 10
    outputs: list = field(default_factory=lambda: ["regret", "timeseries", "log"])

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict, source: str = "<config>") -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError(f"{source}: top level must be an object")
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise ConfigError(f"{source}: unknown field(s) {unknown}; known: {sorted(names)}")
        cfg = cls(**data)
        cfg._check(source)
        return cfg

    def _check(self, source: str):
        def fail(name, msg):
            raise ConfigError(f"{source}: field {name!r}: {msg}")

        if not isinstance(self.scenario, (str, dict)):
            fail("scenario", "expected an id, a path or an object")
        if not isinstance(self.graph, (str, dict)):
            fail("graph", "expected an id, a path or an object")
        if not (isinstance(self.exponents, (list, tuple)) and len(self.exponents) == 3):
            fail("exponents", "expected [a1, a2, a3]")
        try:
            StepsizeSchedule(*(float(a) for a in self.exponents))
        except (TypeError, ValueError) as exc:
            fail("exponents", str(exc))
        for name in ("T", "seed", "runs", "checkpoint_start"):
            if not isinstance(getattr(self, name), int) or isinstance(getattr(self, name), bool):
                fail(name, "expected an integer")
        if self.runs < 1:
            fail("runs", "must be at least 1")
        if self.monitors not in ("record", "strict"):
            fail("monitors", "expected 'record' or 'strict'")
        if self.backend not in ("auto", "compiled", "python", "generic"):
            fail("backend", "expected auto, compiled, python or generic")
        if self.instance_seed is not None and not isinstance(self.instance_seed, int):
            fail("instance_seed", "expected an integer or null")
        bad = sorted(set(self.outputs) - set(OUTPUT_KINDS))
        if bad:
            fail("outputs", f"unknown kind(s) {bad}; choose from {list(OUTPUT_KINDS)}")


PRESETS = {
    "paper-online": {
        "scenario": {"template": "electricity-market", "N": 5, "time_varying": True},
        "graph": "paper-fig1",
        "exponents": [0.8, 0.2, 0.2],
        "regime": "online-T1",
        "T": 100_000,
        "seed": 0,
        "runs": 5,
        "outputs": ["regret", "timeseries", "log"],
    },
    "paper-offline": {
        "scenario": {"template": "electricity-market", "N": 5, "time_varying": False},
        "graph": "paper-fig1",
        "exponents": [0.75, 0.25, 0.25],
        "regime": "offline-T3",
        "T": 100_000,
        "seed": 0,
        "runs": 5,
        "instance_seed": 0,
        "outputs": ["residuals", "timeseries", "log"],
    },
}


# ---------------------------------------------------------------------------
# config resolution


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, items) -> dict:
    """Apply ``key=value`` overrides; dotted keys descend into mappings."""
    data = copy.deepcopy(data)
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        parts = key.split(".")
        node = data
        for p in parts[:-1]:
            if isinstance(node.get(p), str) and p == "scenario":
                node[p] = {"template": node[p]}
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p!r} is not a mapping")
        node[parts[-1]] = _parse_value(value)
    return data


def load_config(path=None, preset=None, overrides=None) -> RunConfig:
    if path is None and preset is None:
        raise ConfigError("give --config or --preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        data, source = copy.deepcopy(PRESETS[preset]), f"preset {preset}"
    else:
        data = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: {exc.strerror}") from None
        try:
            file_data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
        if not isinstance(file_data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        data.update(file_data)
        source = str(path)
    return RunConfig.from_dict(apply_overrides(data, overrides), source)


def build_model(cfg: RunConfig, seed: int) -> ScalarQuadraticGame:
    scen = cfg.scenario
    inst_seed = seed if cfg.instance_seed is None else cfg.instance_seed
    try:
        if isinstance(scen, dict):
            spec = dict(scen)
            spec.setdefault("seed", inst_seed)
            return scenario_from_mapping(spec, "scenario")
        if scen.endswith(".json") or os.sep in scen:
            spec = json.loads(Path(scen).read_text())
            spec.setdefault("seed", inst_seed)
            return scenario_from_mapping(spec, scen)
        return scenario_from_mapping({"template": scen, "seed": inst_seed}, "scenario")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{scen}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    except (ValueError, TypeError, KeyError, OSError) as exc:
        raise ConfigError(f"field 'scenario': {exc}") from None


def build_graph(cfg: RunConfig, N: int):
    g = cfg.graph
    try:
        if isinstance(g, dict):
            return schedule_from_mapping(g, "graph")
        if g in BUILTIN_SCHEDULES:
            return builtin_schedule(g, N)
        return load_schedule(g)
    except (ValueError, KeyError, OSError) as exc:
        raise ConfigError(f"field 'graph': {exc}") from None


def run_seeds(master: int, runs: int) -> list[int]:
    """Per-run seeds spawned from the master seed (stable under adding runs)."""
    children = np.random.SeedSequence(master).spawn(runs)
    return [int(c.generate_state(1, dtype=np.uint32)[0]) for c in children]


def default_out(name: str, cfg: RunConfig) -> Path:
    return Path(os.environ.get(OUT_ENV, "runs")) / f"{name}-{cfg.hash[:10]}"


def _digest_file(path: Path) -> str:
    if path.suffix == ".npz":
        # compressed archives embed timestamps; hash the array contents instead
        h = hashlib.sha256()
        with np.load(path, allow_pickle=False) as data:
            for k in sorted(data.files):
                h.update(k.encode())
                h.update(np.ascontiguousarray(data[k]).tobytes())
        return h.hexdigest()
    return hashlib.sha256(path.read_bytes()).hexdigest()


def inventory(root: Path, files) -> tuple[list[dict], str]:
    entries = []
    for f in sorted(set(files)):
        p = root / f
        entries.append({"path": str(f), "bytes": p.stat().st_size, "sha256": _digest_file(p)})
    total = hashlib.sha256("".join(e["path"] + e["sha256"] for e in entries).encode()).hexdigest()
    return entries, total


# ---------------------------------------------------------------------------
# run


def execute_one(cfg_dict: dict, index: int, seed: int, out: str) -> dict:
    """Run a single seed end-to-end and write its own files (worker entry point)."""
    cfg = RunConfig.from_dict(cfg_dict)
    out = Path(out)
    model = build_model(cfg, seed)
    graphs = build_graph(cfg, model.N)
    sched = StepsizeSchedule(*(float(a) for a in cfg.exponents))
    rundir = out / f"run_{index:03d}"
    rundir.mkdir(parents=True, exist_ok=True)
    info = {"index": index, "seed": seed, "files": [], "status": "ok"}
    try:
        _, lg = run(model, graphs, sched, cfg.T, seed, x0=cfg.x0, monitors=cfg.monitors, regime=cfg.regime,
                    backend=cfg.backend, config_hash=cfg.hash)
    except DivergedRunError as exc:
        info.update(status="diverged", error=str(exc))
        return info
    except MonitorViolation as exc:
        info.update(status="monitor-violation", error=str(exc))
        return info
    rel = lambda p: str(p.relative_to(out))
    if "log" in cfg.outputs:
        info["files"].append(rel(lg.save(rundir / "log.npz")))
    if "timeseries" in cfg.outputs:
        info["files"].append(rel(write_timeseries_csv(lg, rundir / "timeseries.csv")))
    info["monitors"] = {k: int((~v).sum()) for k, v in lg.monitors.items()}
    info["r_estimate"] = float(lg.r_estimate[-1])
    info["backend"] = lg.backend
    info["noise_digest"] = lg.noise_digest
    if "regret" in cfg.outputs:
        rep = regret_report(lg, model, checkpoints(cfg.T, start=min(cfg.checkpoint_start, int(np.log2(cfg.T)))))
        info["files"].append(rel(write_summary_csv([(index, seed, rep)], rundir / "regret.csv")))
        info["final_average_regret"] = rep.average_regret[-1].tolist()
        info["final_average_violation"] = float(rep.average_violation[-1])
    if "residuals" in cfg.outputs:
        if model.time_varying:
            raise ConfigError("residual output needs a time-invariant scenario")
        sol = solve_vgne(model, tol=1e-10, cross_check=False)
        per_step, averaged = residuals(lg, sol)
        info["files"].append(rel(write_residual_csv([(index, seed, per_step, averaged)], rundir / "residuals.csv")))
        (rundir / "vgne.json").write_text(json.dumps(sol.to_record(), indent=2))
        info["files"].append(rel(rundir / "vgne.json"))
        info["final_residual"] = float(per_step[-1])
    return info


def _combine_csv(out: Path, parts: list[str], name: str) -> str | None:
    if not parts:
        return None
    lines = []
    for k, p in enumerate(sorted(parts)):
        rows = (out / p).read_text().splitlines()
        lines.extend(rows if k == 0 else rows[1:])
    (out / name).write_text("\n".join(lines) + "\n")
    return name


def cmd_run(cfg: RunConfig, out: Path, workers: int = 1, name: str = "run") -> int:
    rep_g, rep_r = _reports(cfg)
    if not (rep_g.ok and rep_r.ok):
        print(rep_g.format())
        print(rep_r.format())
        return EXIT_INVALID
    out.mkdir(parents=True, exist_ok=True)
    seeds = run_seeds(cfg.seed, cfg.runs)
    t0 = time.time()
    cfg_dict = cfg.to_dict()
    if workers > 1 and cfg.runs > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            infos = list(pool.map(execute_one, [cfg_dict] * cfg.runs, range(cfg.runs), seeds, [str(out)] * cfg.runs))
    else:
        infos = [execute_one(cfg_dict, k, s, str(out)) for k, s in enumerate(seeds)]
    wall = time.time() - t0

    files = [f for info in infos for f in info["files"]]
    (out / "config.json").write_text(json.dumps(cfg_dict, indent=2, sort_keys=True))
    files.append("config.json")
    for kind, fname in (("regret.csv", "summary.csv"), ("residuals.csv", "residuals.csv")):
        merged = _combine_csv(out, [f for f in files if f.endswith("/" + kind)], fname)
        if merged:
            files.append(merged)
    model = build_model(cfg, seeds[0])
    inv, digest = inventory(out, files)
    c = model.constants
    manifest = {
        "tool": "pushsum_gne",
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "name": name,
        "config_hash": cfg.hash,
        "master_seed": cfg.seed,
        "seeds": seeds,
        "wall_clock_seconds": wall,
        "constants": {
            "L": c.L,
            "M": c.M,
            "S": c.S,
            "L_sigma": c.L_sigma,
            "iota": iota_from_model(model, draws=10**6),
            "r_estimate": [info.get("r_estimate") for info in infos],
        },
        "runs": infos,
        "outputs": inv,
        "outputs_digest": digest,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    print(f"wrote {len(inv)} files to {out} (outputs digest {digest[:16]})")
    statuses = {info["status"] for info in infos}
    if "diverged" in statuses:
        for info in infos:
            if info["status"] == "diverged":
                print(f"run {info['index']} (seed {info['seed']}): {info['error']}", file=sys.stderr)
        return EXIT_DIVERGED
    if "monitor-violation" in statuses:
        for info in infos:
            if info["status"] == "monitor-violation":
                print(f"run {info['index']} (seed {info['seed']}): {info['error']}", file=sys.stderr)
        return EXIT_MONITOR
    return EXIT_OK


# ---------------------------------------------------------------------------
# validate / solve / metrics


def _reports(cfg: RunConfig):
    model = build_model(cfg, cfg.seed)
    graphs = build_graph(cfg, model.N)
    if graphs.N != model.N:
        raise ConfigError(f"field 'graph': schedule has {graphs.N} nodes but the scenario has {model.N} players")
    rep_g = validate_schedule(graphs)
    regime = cfg.regime or "online-T1"
    rep_r = validate_regime(StepsizeSchedule(*(float(a) for a in cfg.exponents)), regime)
    return rep_g, rep_r


def cmd_validate(cfg: RunConfig) -> int:
    rep_g, rep_r = _reports(cfg)
    print(rep_g.format())
    print(rep_r.format())
    return EXIT_OK if rep_g.ok and rep_r.ok else EXIT_INVALID


def cmd_solve(cfg: RunConfig, out: Path, log_path=None, tol: float = 1e-10) -> int:
    out.mkdir(parents=True, exist_ok=True)
    if log_path is not None:
        lg = MetricsLog.load(log_path)
        model = build_model(cfg, lg.seed)
        recs = []
        for i in range(model.N):
            sol = solve_comparator(model, lg.x[1 : lg.T + 1], i, tol=tol)
            recs.append(sol.to_record())
        path = out / "comparator.json"
        path.write_text(json.dumps({"log": str(log_path), "T": lg.T, "players": recs}, indent=2))
        print(f"wrote {path}")
        return EXIT_OK
    model = build_model(cfg, cfg.seed)
    if model.time_varying:
        raise ConfigError("solve needs a time-invariant scenario (set scenario.time_varying=false) or --log")
    try:
        sol = solve_vgne(model, tol=tol)
    except SolverError as exc:
        print(f"solver did not converge: {exc}", file=sys.stderr)
        return EXIT_INVALID
    rec = sol.to_record()
    if model.name == "quadratic-toy":
        x_cf, mu_cf = quadratic_toy_solution(model)
        rec["closed_form"] = {"x": x_cf.tolist(), "mu": mu_cf,
                              "max_abs_diff": float(np.max(np.abs(x_cf - sol.x_star[:, 0])))}
    path = out / "vgne.json"
    path.write_text(json.dumps(rec, indent=2))
    print(f"x* = {np.round(sol.x_star[:, 0], 8).tolist()}, mu* = {sol.mu_star.tolist()}, "
          f"KKT residual {sol.residuals['total']:.2e}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_metrics(run_dir: Path) -> int:
    """Recompute per-run CSVs and the batch summary from saved logs."""
    cfg = RunConfig.from_dict(json.loads((run_dir / "config.json").read_text()), str(run_dir / "config.json"))
    logs = sorted(run_dir.glob("run_*/log.npz"))
    if not logs:
        raise ConfigError(f"{run_dir}: no run logs found")
    reports, res_entries = [], []
    for k, path in enumerate(logs):
        lg = MetricsLog.load(path)
        if lg.config_hash != cfg.hash:
            raise ConfigError(f"{path}: config hash {lg.config_hash[:10]} does not match config.json ({cfg.hash[:10]})")
        model = build_model(cfg, lg.seed)
        write_timeseries_csv(lg, path.parent / "timeseries.csv")
        if model.time_varying:
            reports.append((k, lg.seed, regret_report(lg, model, checkpoints(lg.T, start=min(cfg.checkpoint_start, int(np.log2(lg.T)))))))
        else:
            sol = solve_vgne(model, cross_check=False)
            res_entries.append((k, lg.seed, *residuals(lg, sol)))
    if reports:
        print(f"wrote {write_summary_csv(reports, run_dir / 'summary.csv')}")
    if res_entries:
        print(f"wrote {write_residual_csv(res_entries, run_dir / 'residuals.csv')}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pushsum-gne", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--preset", choices=sorted(PRESETS))
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")
        sp.add_argument("--seed", type=int, help="master seed")

    sp = sub.add_parser("run", help="execute seeded runs")
    common(sp)
    sp.add_argument("--runs", type=int)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--out")
    sp.add_argument("--strict-monitors", action="store_true")

    sp = sub.add_parser("validate", help="check graph schedule and stepsize regime")
    common(sp)

    sp = sub.add_parser("solve", help="variational equilibrium or comparators of a saved log")
    common(sp)
    sp.add_argument("--log", help="run log (.npz) for per-player comparators")
    sp.add_argument("--tol", type=float, default=1e-10)
    sp.add_argument("--out")

    sp = sub.add_parser("metrics", help="recompute reports from saved logs")
    sp.add_argument("run_dir")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "metrics":
            return cmd_metrics(Path(args.run_dir))
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if getattr(args, "runs", None) is not None:
            overrides.append(f"runs={args.runs}")
        if getattr(args, "strict_monitors", False):
            overrides.append('monitors="strict"')
        cfg = load_config(args.config, args.preset, overrides)
        name = args.preset or (Path(args.config).stem if args.config else "run")
        if args.command == "validate":
            return cmd_validate(cfg)
        out = Path(args.out) if getattr(args, "out", None) else default_out(name, cfg)
        if args.command == "run":
            return cmd_run(cfg, out, args.workers, name)
        return cmd_solve(cfg, out, args.log, args.tol)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except PreconditionError as exc:
        print(f"precondition failed: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
