"""CLI, configuration, persistence, and plot-data emission for benchmark runs.

Outputs are a long-format records.csv (one row per trial/method/checkpoint),
a summary.json of per-method per-checkpoint aggregates recomputable from the
records, and resolved-config.json materializing every default so a run can be
reproduced byte-for-byte from it.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import estimation, oed, scenarios
from .dynamics import Trajectory
from .errors import ConfigurationError, TaskOedError
from .estimation import least_squares
from .scenarios import (
    CheckpointRecord,
    ReferenceValues,
    Scenario,
    build_scenario,
    compute_reference,
    default_schedule,
    evaluate_checkpoints,
    run_trial,
    scenario_from_config,
)

log = logging.getLogger("task_oed.harness")

RECORD_FIELDS = (
    "trial", "method", "episodes", "excess_loss", "excess_loss_se",
    "frob_error", "design_score", "wall_ms",
)


def _configure_logging() -> None:
    level = os.environ.get("TASK_OED_LOG", "WARNING").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def method_id(name: str) -> int:
    """Stable per-method stream id; adding a method never perturbs others."""
    return int.from_bytes(hashlib.sha256(name.encode()).digest()[:4], "big")


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------


def resolve_run_config(
    scenario: str | None = None,
    methods: list[str] | None = None,
    episodes: int | None = None,
    trials: int | None = None,
    seed: int | None = None,
    schedule: list[int] | None = None,
    jobs: int = 1,
    timing: bool = False,
    config_file: str | None = None,
    overrides: dict | None = None,
) -> dict:
    """Materialize every default into a single config tree."""
    cfg: dict = {}
    if config_file:
        with open(config_file) as fh:
            cfg = json.load(fh)
    if scenario is not None:
        cfg["scenario_name"] = scenario
    if "scenario" not in cfg:
        if "scenario_name" not in cfg:
            raise ConfigurationError("a scenario must be given (--scenario or config file)")
        cfg["scenario"] = scenarios.default_scenario_config(cfg["scenario_name"])
    cfg.setdefault("scenario_name", cfg["scenario"].get("name", "custom"))
    if methods is not None:
        cfg["methods"] = methods
    if episodes is not None:
        cfg["episodes"] = episodes
    if trials is not None:
        cfg["trials"] = trials
    if seed is not None:
        cfg["seed"] = seed
    if schedule is not None:
        cfg["schedule"] = schedule
    cfg.setdefault("methods", ["task", "uniform", "random"])
    cfg.setdefault("episodes", 100)
    cfg.setdefault("trials", 10)
    cfg.setdefault("seed", 0)
    cfg.setdefault("jobs", jobs)
    cfg.setdefault("timing", timing)
    cfg.setdefault("random_sigma_u", None)
    for key, value in (overrides or {}).items():
        scenarios._apply_dotted(cfg, key, value)
    for m in cfg["methods"]:
        if m not in scenarios.METHODS:
            raise ConfigurationError(
                f"unknown method {m!r}; choose from {scenarios.METHODS}")
    if cfg["trials"] < 1:
        raise ConfigurationError("trials must be >= 1")
    scn = scenario_from_config(cfg["scenario"])  # validates the scenario tree
    cfg["scenario"] = scn.config
    if cfg.get("schedule") is None:
        cfg["schedule"] = default_schedule(scn, int(cfg["episodes"]))
    return cfg


# ---------------------------------------------------------------------------
# Benchmark execution
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    records: list[dict]
    summary: dict
    resolved: dict
    failures: list[dict] = field(default_factory=list)


def _cell_payload(cfg: dict, reference: ReferenceValues, method: str, trial: int):
    return (cfg["scenario"], method, trial, int(cfg["seed"]), int(cfg["episodes"]),
            list(cfg["schedule"]), reference, cfg.get("random_sigma_u"),
            bool(cfg.get("timing", False)))


def _run_cell(payload) -> tuple[int, str, list[CheckpointRecord], float, str | None]:
    (scn_cfg, method, trial, seed, episodes, schedule, reference,
     sigma_u, timing) = payload
    t0 = time.perf_counter()
    try:
        scenario = scenario_from_config(scn_cfg)
        trial_seq = np.random.SeedSequence((seed, trial, method_id(method), 0))
        # Evaluation streams are shared across methods (common random numbers)
        # so paired per-trial comparisons are not washed out by eval noise.
        eval_seq = np.random.SeedSequence((seed, trial, method_id("eval"), 1))
        data = run_trial(scenario, method, episodes, trial_seq, sigma_u=sigma_u)
        records = evaluate_checkpoints(scenario, data.store, schedule,
                                       reference, eval_seq)
    except (TaskOedError, np.linalg.LinAlgError, AssertionError) as exc:
        return trial, method, [], 0.0, f"{type(exc).__name__}: {exc}"
    wall_ms = (time.perf_counter() - t0) * 1000.0 if timing else 0.0
    return trial, method, records, wall_ms, None


def run_benchmark(cfg: dict) -> RunResult:
    """Run every (trial, method) cell and aggregate.

    Per-trial wall time is only recorded in the records when ``timing`` is
    set, because records.csv is contractually byte-reproducible for a fixed
    (config, seed); timings are inherently not.
    """
    scenario = scenario_from_config(cfg["scenario"])
    reference = compute_reference(
        scenario, np.random.SeedSequence((int(cfg["seed"]), method_id("reference"))))
    cells = [(m, t) for t in range(int(cfg["trials"])) for m in cfg["methods"]]
    payloads = [_cell_payload(cfg, reference, m, t) for (m, t) in cells]
    jobs = max(1, int(cfg.get("jobs", 1)))
    results = []
    if jobs == 1:
        for p in payloads:
            results.append(_run_cell(p))
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, payloads))
    records: list[dict] = []
    failures: list[dict] = []
    for trial, method, recs, wall_ms, error in results:
        if error is not None:
            failures.append({"trial": trial, "method": method, "error": error})
            log.error("trial %d method %s failed: %s", trial, method, error)
            continue
        for r in recs:
            records.append({
                "trial": trial,
                "method": method,
                "episodes": r.episodes,
                "excess_loss": r.excess_loss,
                "excess_loss_se": r.excess_loss_se,
                "frob_error": r.frob_error,
                "design_score": r.design_score,
                "wall_ms": wall_ms,
            })
    records.sort(key=lambda r: (r["trial"], r["method"], r["episodes"]))
    summary = summarize(records)
    if failures and len(failures) > 0.2 * len(cells):
        raise ConfigurationError(
            f"{len(failures)} of {len(cells)} trials failed; aborting")
    return RunResult(records, summary, copy.deepcopy(cfg), failures)


def summarize(records: list[dict]) -> dict:
    """Per-method per-checkpoint aggregates, recomputable from records.csv."""
    groups: dict[tuple[str, int], list[dict]] = {}
    for r in records:
        groups.setdefault((r["method"], r["episodes"]), []).append(r)
    methods: dict[str, list[dict]] = {}
    for (method, episodes), rows in sorted(groups.items()):
        losses = np.array([row["excess_loss"] for row in rows])
        frob = np.array([row["frob_error"] for row in rows])
        finite = losses[np.isfinite(losses)]
        n = len(rows)
        entry = {
            "episodes": episodes,
            "n": n,
            "excess_loss_mean": float(np.mean(losses)) if n else float("nan"),
            "excess_loss_median": float(np.median(losses)) if n else float("nan"),
            "excess_loss_se": (
                float(np.std(finite, ddof=1) / math.sqrt(len(finite)))
                if len(finite) > 1 else 0.0
            ),
            "frob_error_mean": float(np.mean(frob)) if n else float("nan"),
            "frob_error_median": float(np.median(frob)) if n else float("nan"),
        }
        methods.setdefault(method, []).append(entry)
    return {"methods": methods}


def write_outputs(result: RunResult, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "records.csv"), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RECORD_FIELDS)
        for r in result.records:
            writer.writerow([_fmt(r[k]) for k in RECORD_FIELDS])
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(result.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "resolved-config.json"), "w") as fh:
        json.dump(result.resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if result.failures:
        with open(os.path.join(out_dir, "failures.json"), "w") as fh:
            json.dump(result.failures, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


# ---------------------------------------------------------------------------
# Trajectory files (newline-delimited JSON, one episode per line)
# ---------------------------------------------------------------------------


def save_trajectories(path: str, trajectories: list[Trajectory]) -> None:
    with open(path, "w") as fh:
        for traj in trajectories:
            fh.write(json.dumps({
                "states": traj.states.tolist(),
                "inputs": traj.inputs.tolist(),
            }))
            fh.write("\n")


def load_trajectories(path: str) -> list[Trajectory]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append(Trajectory(np.asarray(obj["states"]), np.asarray(obj["inputs"])))
    return out


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


def _parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigurationError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def cli_bench(args: argparse.Namespace) -> int:
    try:
        cfg = resolve_run_config(
            scenario=args.scenario,
            methods=args.methods.split(",") if args.methods else None,
            episodes=args.episodes,
            trials=args.trials,
            seed=args.seed,
            schedule=[int(x) for x in args.checkpoints.split(",")] if args.checkpoints else None,
            jobs=args.jobs,
            timing=args.timing,
            config_file=args.config,
            overrides=_parse_overrides(args.set or []),
        )
    except (TaskOedError, OSError, json.JSONDecodeError) as exc:
        _emit_error("configuration", exc)
        return 2
    try:
        result = run_benchmark(cfg)
    except TaskOedError as exc:
        _emit_error("run", exc)
        return 1
    write_outputs(result, args.out)
    n_rows = len(result.records)
    print(f"wrote {n_rows} records for {cfg['trials']} trials x "
          f"{len(cfg['methods'])} methods to {args.out}")
    if result.failures:
        print(f"{len(result.failures)} trial cells failed (see failures.json)")
    return 0


def _emit_error(stage: str, exc: Exception) -> None:
    sys.stderr.write(json.dumps({
        "error": stage,
        "type": type(exc).__name__,
        "detail": str(exc),
    }) + "\n")


def _print_or_json(args, payload: dict, text: str) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2, sort_keys=True))
    else:
        print(text)


def cli_hessian(args: argparse.Namespace) -> int:
    try:
        scenario = build_scenario(args.scenario,
                                  _parse_overrides(args.set or []))
    except TaskOedError as exc:
        _emit_error("configuration", exc)
        return 2
    rng = np.random.default_rng(args.seed)
    A = scenario.model.A.copy()
    if args.perturb:
        A = A + args.perturb * rng.standard_normal(A.shape)
    method = args.method or scenario.hessian_method
    bundle = scenario.hessian_bundle(A, rng)
    if method in ("finite_difference", "fd"):
        H = scenarios.hessian_fd(A, bundle)
    elif method in ("gauss_newton", "gauss-newton"):
        H = scenarios.hessian_gauss_newton(A, bundle)
    else:
        _emit_error("configuration", ConfigurationError(f"unknown method {method!r}"))
        return 2
    eigs = np.linalg.eigvalsh(H.matrix)[::-1]
    diag = np.diag(H.matrix)
    payload = {
        "scenario": scenario.name,
        "method": H.method,
        "fd_step": H.fd_step,
        "eigenvalues": eigs.tolist(),
        "diagonal": diag.tolist(),
    }
    lines = [f"model-task curvature for {scenario.name} ({H.method}, step {H.fd_step:.3g})",
             "top eigenvalues: " + ", ".join(f"{v:.4g}" for v in eigs[:8]),
             "diagonal by vec(A) coordinate:"]
    for i, v in enumerate(diag):
        lines.append(f"  [{i:3d}] {v:.6g}")
    _print_or_json(args, payload, "\n".join(lines))
    return 0


def cli_oed_demo(args: argparse.Namespace) -> int:
    try:
        scenario = build_scenario(args.scenario, _parse_overrides(args.set or []))
    except TaskOedError as exc:
        _emit_error("configuration", exc)
        return 2
    seq = np.random.SeedSequence((args.seed, method_id("oed-demo")))
    noise_seq, alg_seq = seq.spawn(2)
    store = scenarios.DataStore(scenario.model.phi)
    K = args.episodes_per_iteration
    budget = scenario.n_warmup + (args.iterations + 1) * K
    live = scenarios.LiveSystem(scenario.model, noise_seq, budget=budget, observer=store)
    rng = np.random.default_rng(alg_seq)
    scenarios.run_warmup(scenario, live, rng)
    A_hat, _ = store.posterior(scenario.estimator)
    H = scenario.task_hessian(A_hat, rng)
    M = oed.reduce_hessian(H, scenario.model.phi.d_x, scenario.model.phi.d_phi)
    lam_w = store.lam_total / max(store.n_episodes, 1)
    objective = oed.weighted_a_opt(M, lam_w)
    outcome = oed.dynamic_oed(
        objective, args.iterations, K,
        scenarios.make_oracle_factory(scenario, live, store, rng)(),
        scenarios.make_warmup_runner(scenario, live, rng), rng)
    payload = {
        "scenario": scenario.name,
        "iterations": args.iterations,
        "episodes_per_iteration": K,
        "objective": outcome.values,
        "episodes_used": outcome.episodes_used,
    }
    lines = [f"conditional-gradient design on {scenario.name} "
             f"({args.iterations} iterations x {K} episodes)"]
    for n, v in enumerate(outcome.values):
        lines.append(f"  iter {n:2d}: objective {v:.6g}")
    _print_or_json(args, payload, "\n".join(lines))
    return 0


def cli_estimate(args: argparse.Namespace) -> int:
    try:
        scenario = build_scenario(args.scenario, _parse_overrides(args.set or []))
        trajectories = load_trajectories(args.file)
        A_hat = least_squares(trajectories, scenario.model.phi, scenario.estimator)
    except (TaskOedError, OSError, json.JSONDecodeError) as exc:
        _emit_error("estimate", exc)
        return 2
    frob = float(np.linalg.norm(A_hat - scenario.model.A))
    payload = {
        "scenario": scenario.name,
        "episodes": len(trajectories),
        "frob_error": frob,
        "A_hat": A_hat.tolist(),
    }
    text = (f"fit over {len(trajectories)} episodes on {scenario.name}: "
            f"frob_error {frob:.6g}")
    _print_or_json(args, payload, text)
    return 0


def _add_set_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any resolved-config value by dotted key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="task-oed",
        description="Task-driven exploration benchmarks for nonlinear system identification",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    bench = sub.add_parser("bench", help="run a multi-trial benchmark")
    bench.add_argument("--scenario", help="bump1d | drone | car")
    bench.add_argument("--methods", help="comma list: task,random,uniform,costmin")
    bench.add_argument("--episodes", type=int)
    bench.add_argument("--trials", type=int)
    bench.add_argument("--seed", type=int)
    bench.add_argument("--out", default="out")
    bench.add_argument("--config", help="JSON config file (e.g. a resolved-config.json)")
    bench.add_argument("--checkpoints", help="comma list of checkpoint episode counts")
    bench.add_argument("--jobs", type=int, default=1)
    bench.add_argument("--timing", action="store_true",
                       help="record wall time in records.csv (breaks byte reproducibility)")
    _add_set_flag(bench)
    bench.set_defaults(func=cli_bench)

    hess = sub.add_parser("hessian", help="print the task-curvature spectrum for a scenario")
    hess.add_argument("--scenario", required=True)
    hess.add_argument("--method", help="finite_difference | gauss-newton")
    hess.add_argument("--perturb", type=float, default=0.0)
    hess.add_argument("--seed", type=int, default=0)
    hess.add_argument("--json", action="store_true")
    _add_set_flag(hess)
    hess.set_defaults(func=cli_hessian)

    demo = sub.add_parser("oed-demo", help="run the design loop and print its objective")
    demo.add_argument("--scenario", required=True)
    demo.add_argument("--iterations", type=int, default=8)
    demo.add_argument("--episodes-per-iteration", type=int, default=4)
    demo.add_argument("--seed", type=int, default=0)
    demo.add_argument("--json", action="store_true")
    _add_set_flag(demo)
    demo.set_defaults(func=cli_oed_demo)

    est = sub.add_parser("estimate", help="fit parameters from a saved trajectory file")
    est.add_argument("--scenario", required=True)
    est.add_argument("--file", required=True)
    est.add_argument("--json", action="store_true")
    _add_set_flag(est)
    est.set_defaults(func=cli_estimate)

    return parser


def main(argv: list[str] | None = None) -> int:
    _configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
