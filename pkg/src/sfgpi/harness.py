"""Experiment orchestration: learn the SF matrix, build task weights, evaluate.

Every command takes a validated :class:`~sfgpi.config.ExperimentConfig` and
writes its artefacts under ``output_dir``. Outputs that must be reproducible
(CSV learning curves) contain no timing or host information; the run record
keeps those separately.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import statistics
import subprocess
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import QSchedule, evaluation_starts, q_learning_run, steps_to_threshold
from .config import ExperimentConfig
from .env import DeterministicMdp, HypercubeMdp
from .features import (
    BinGrid,
    FeatureMap,
    bin_table,
    consecutive_pairs,
    entangle,
    hypercube_features,
    spriteworld_features,
)
from .gpi import (
    all_goals,
    analytic_goal_weights,
    achievement_failures,
    fit_weights,
    gpi_policy,
    success_rate,
)
from .sf import (
    FULL,
    OFF_DIAGONAL,
    SfMatrix,
    TdSchedule,
    bellman_residual,
    build_exact_sf_matrix,
    exact_optimal_policy,
    oic_violations,
    save_sf_matrix,
    sup_norm_gap,
    td_learn_sf,
)
from .spriteworld import Spriteworld, SpriteworldConfig
from .tasks import categorize, compile_task, load_task_file, parse

log = logging.getLogger(__name__)

CSV_COLUMNS = ("method", "task_id", "task_text", "category", "seed", "step", "success_rate")
REGRESSION_STREAM = 11
THRESHOLD = 0.5


class HarnessError(RuntimeError):
    """A request the harness refuses to run (bad combination of inputs)."""


# -- building blocks ------------------------------------------------------


def build_environment(cfg: ExperimentConfig) -> DeterministicMdp:
    e = cfg.environment
    if e.kind == "hypercube":
        return HypercubeMdp(e.k, e.m or cfg.features.m, discount=cfg.gamma)
    sw = SpriteworldConfig(e.grid_size, e.object_count, e.move_step, e.drag_step, e.seed)
    return Spriteworld(sw, discount=cfg.gamma)


def build_features(cfg: ExperimentConfig, mdp: DeterministicMdp, kind: str | None = None) -> FeatureMap:
    kind = kind or cfg.features.kind
    if isinstance(mdp, HypercubeMdp):
        base = hypercube_features(mdp)
    else:
        base = spriteworld_features(mdp)
        if cfg.features.entities == "agent":
            base = FeatureMap(base.values[:, :2])
    if kind == "disentangled":
        return base
    rotation = cfg.features.rotation or consecutive_pairs(base.k)
    return entangle(base, rotation)


def erl_schedule(cfg: ExperimentConfig, seed: int) -> TdSchedule:
    e = cfg.erl
    return TdSchedule(e.steps, e.alpha, e.epsilon, e.episode_length, e.tie_tol, e.update, seed)


def obtain_matrix(
    cfg: ExperimentConfig, method: str, mdp: DeterministicMdp, seed: int
) -> tuple[SfMatrix, FeatureMap, int]:
    """SF matrix for a GPI method; returns (matrix, features, ERL steps spent)."""
    grid = BinGrid(cfg.features.m)
    if method == "gpi-exact":
        fm = build_features(cfg, mdp, "disentangled")
        return build_exact_sf_matrix(mdp, fm, grid, cfg.gamma, FULL), fm, 0
    if method == "gpi-entangled":
        fm = build_features(cfg, mdp, "entangled")
        return build_exact_sf_matrix(mdp, fm, grid, cfg.gamma, FULL), fm, 0
    if method in ("gpi-learned", "gpi-offdiag"):
        fm = build_features(cfg, mdp)
        mode = FULL if method == "gpi-learned" else OFF_DIAGONAL
        matrix = td_learn_sf(mdp, fm, grid, cfg.gamma, erl_schedule(cfg, seed), mode)
        return matrix, fm, cfg.erl.steps
    raise HarnessError(f"{method} does not use an SF matrix")


def evaluation_horizon(cfg: ExperimentConfig, mdp: DeterministicMdp) -> int:
    if cfg.evaluation.horizon is not None:
        return cfg.evaluation.horizon
    if isinstance(mdp, Spriteworld):
        return 4 * mdp.n * mdp.config.feature_count
    return mdp.state_count


def version_string() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        described = out.stdout.strip() if out.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        described = ""
    return f"sfgpi {__version__}" + (f" ({described})" if described else "")


def _write_json(path: Path, payload) -> None:
    # write-then-rename keeps partially written files out of run directories
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _prepare_run_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.model_dump(mode="json"))
    (out / "VERSION").write_text(version_string() + "\n")
    return out


# -- learn-sf ---------------------------------------------------------------


def cmd_learn_sf(cfg: ExperimentConfig, method: str | None = None) -> dict:
    method = method or cfg.methods[0]
    if method == "baseline-q":
        raise HarnessError("baseline-q learns no SF matrix")
    out = _prepare_run_dir(cfg)
    mdp = build_environment(cfg)
    seed = cfg.seeds[0]
    t0 = time.perf_counter()
    matrix, fm, steps = obtain_matrix(cfg, method, mdp, seed)
    elapsed = time.perf_counter() - t0
    path = save_sf_matrix(out / "sf_matrix.npz", matrix)

    rng = np.random.default_rng([seed, 3])
    probe = rng.choice(mdp.state_count, size=min(mdp.state_count, 256), replace=False)
    report = {
        "method": method,
        "mode": matrix.mode,
        "k": matrix.k,
        "m": matrix.m,
        "gamma": matrix.gamma,
        "state_count": matrix.state_count,
        "action_count": matrix.action_count,
        "stored_entries_per_state_action": matrix.stored_per_state_action,
        "erl_steps": steps,
        "bellman_residual_sampled": bellman_residual(matrix, mdp, np.sort(probe)),
        "matrix_file": str(path),
        "wall_clock_s": round(elapsed, 3),
    }
    if method in ("gpi-learned", "gpi-offdiag"):
        try:
            exact = build_exact_sf_matrix(mdp, fm, BinGrid(cfg.features.m), cfg.gamma, matrix.mode)
            report["sup_norm_gap_to_exact"] = sup_norm_gap(matrix, exact)
        except ValueError as err:
            report["sup_norm_gap_to_exact"] = None
            log.warning("no exact comparison: %s", err)
    _write_json(out / "learn_sf.json", report)
    return report


# -- verify-theorem -----------------------------------------------------------


def cmd_verify_theorem(
    cfg: ExperimentConfig,
    method: str | None = None,
    require_oic: bool = False,
    mode: str = FULL,
) -> dict:
    """Exhaustive achievability of every goal (and wildcard variant) with analytic weights."""
    method = method or cfg.methods[0]
    if method not in ("gpi-exact", "gpi-learned", "gpi-offdiag"):
        raise HarnessError(f"verify-theorem needs disentangled GPI, not {method}")
    mdp = build_environment(cfg)
    grid = BinGrid(cfg.features.m)
    fm = build_features(cfg, mdp, "disentangled")
    violations = oic_violations(mdp, fm, grid, cfg.gamma)
    if require_oic and violations:
        raise HarnessError(
            "features are not optimally independently controllable in this environment, "
            "so the achievability guarantee does not apply; first counterexample: "
            + json.dumps(violations[0])
        )
    exact = method == "gpi-exact"
    if exact:
        matrix = build_exact_sf_matrix(mdp, fm, grid, cfg.gamma, mode)
    else:
        matrix, _, _ = obtain_matrix(cfg, method, mdp, cfg.seeds[0])
    bins = bin_table(fm.values, grid.m)

    goals = all_goals(fm.k, grid.m, wildcards=True)
    failures = []
    single = 0
    for goal in goals:
        is_single = all(a is not None for a in goal.allowed)
        single += is_single
        pol = gpi_policy(matrix, analytic_goal_weights(goal, grid.m))
        bad = achievement_failures(mdp, pol, goal.mask(bins), horizon=mdp.state_count)
        if bad.size:
            failures.append({
                "goal": [None if a is None else sorted(a)[0] for a in goal.allowed],
                "failing_starts": int(bad.size),
                "counterexample_start": int(bad[0]),
            })
    report = {
        "method": method,
        "mode": matrix.mode,
        "k": fm.k,
        "m": grid.m,
        "state_count": mdp.state_count,
        "oic": not violations,
        "oic_counterexamples": violations[:3],
        "total_goals": len(goals),
        "single_bin_goals": single,
        "wildcard_goals": len(goals) - single,
        "achieved": len(goals) - len(failures),
        "failures": failures,
        "exact": exact,
    }
    out = _prepare_run_dir(cfg)
    _write_json(out / "verify_theorem.json", report)
    return report


# -- task evaluation --------------------------------------------------------


@dataclass
class TaskRun:
    method: str
    task_id: int
    task_text: str
    category: str
    seed: int
    curve: list[tuple[int, float]] = field(default_factory=list)
    samples_used: int = 0


def _spriteworld(mdp: DeterministicMdp) -> Spriteworld:
    if not isinstance(mdp, Spriteworld):
        raise HarnessError("task phrases need a spriteworld environment")
    return mdp


def gpi_task_curve(
    cfg: ExperimentConfig,
    mdp: Spriteworld,
    matrix: SfMatrix,
    fm: FeatureMap,
    method: str,
    task_id: int,
    text: str,
    seed: int,
) -> TaskRun:
    """Success of the GPI policy versus regression samples consumed."""
    compiled = compile_task(text, mdp, cfg.features.m, cfg.alignment)
    grid = BinGrid(cfg.features.m)
    horizon = evaluation_horizon(cfg, mdp)
    run = TaskRun(method, task_id, compiled.text, compiled.category, seed)
    budgets = cfg.regression.budgets
    episodes = cfg.evaluation.episodes

    if compiled.weight_source == "analytic" and method != "gpi-entangled":
        pol = gpi_policy(matrix, analytic_goal_weights(compiled.regions[0], grid.m))
        for point, b in enumerate(budgets):
            starts = evaluation_starts(mdp, seed, point, episodes)
            run.curve.append((b, success_rate(mdp, pol, compiled.mask, starts, horizon)))
        return run

    rng = np.random.default_rng([seed, REGRESSION_STREAM, task_id])
    states = np.array([mdp.sample_state(rng) for _ in range(budgets[-1])], dtype=np.int64)
    actions = rng.integers(mdp.action_count, size=budgets[-1])
    rewards = compiled.mask[states].astype(np.float64) if budgets[-1] else np.zeros(0)
    samples = np.column_stack([states, actions, rewards])
    for point, b in enumerate(budgets):
        if b == 0:
            w = np.zeros((fm.k, grid.m))
        else:
            w = fit_weights(samples[:b], fm, grid, cfg.regression.ridge, matrix.cumulants)
        pol = gpi_policy(matrix, w)
        starts = evaluation_starts(mdp, seed, point, episodes)
        run.curve.append((b, success_rate(mdp, pol, compiled.mask, starts, horizon)))
    run.samples_used = budgets[-1]
    return run


def _baseline_job(args) -> TaskRun:
    cfg, task_id, text, seed = args
    mdp = _spriteworld(build_environment(cfg))
    compiled = compile_task(text, mdp, cfg.features.m, cfg.alignment)
    b = cfg.baseline
    schedule = QSchedule(
        b.steps, b.alpha, b.epsilon, cfg.gamma, b.eval_every,
        cfg.evaluation.episodes, evaluation_horizon(cfg, mdp),
    )
    curve = q_learning_run(mdp, compiled.mask, schedule, seed)
    return TaskRun("baseline-q", task_id, compiled.text, compiled.category, seed, curve, b.steps)


def run_method(cfg: ExperimentConfig, method: str, tasks: list[tuple[int, str]]) -> tuple[list[TaskRun], int]:
    """All (task, seed) runs of one method; returns (runs, ERL steps spent)."""
    if method == "baseline-q":
        jobs = [(cfg, tid, text, seed) for tid, text in tasks for seed in cfg.seeds]
        if cfg.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                return list(pool.map(_baseline_job, jobs)), 0
        return [_baseline_job(j) for j in jobs], 0

    mdp = _spriteworld(build_environment(cfg))
    runs, erl = [], 0
    cache: dict[int, tuple[SfMatrix, FeatureMap]] = {}
    for seed in cfg.seeds:
        # exact matrices do not depend on the seed; learned ones do
        key = seed if method in ("gpi-learned", "gpi-offdiag") else 0
        if key not in cache:
            matrix, fm, steps = obtain_matrix(cfg, method, mdp, seed)
            cache[key] = (matrix, fm)
            erl = max(erl, steps)
        matrix, fm = cache[key]
        for tid, text in tasks:
            runs.append(gpi_task_curve(cfg, mdp, matrix, fm, method, tid, text, seed))
    runs.sort(key=lambda r: (r.task_id, r.seed))
    return runs, erl


def curves_csv(runs: list[TaskRun]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for r in runs:
        for step, rate in r.curve:
            writer.writerow([r.method, r.task_id, r.task_text, r.category, r.seed, step, f"{rate:.4f}"])
    return buf.getvalue()


def read_curves_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["task_id"] = int(row["task_id"])
        row["seed"] = int(row["seed"])
        row["step"] = int(row["step"])
        row["success_rate"] = float(row["success_rate"])
    return rows


def summarize_curves(rows: list[dict], threshold: float = THRESHOLD) -> dict:
    """Per (method, category) summary recomputed from CSV rows alone.

    ``steps_to_50pct`` is the median over (task, seed) runs, counting runs
    that never reach the threshold as infinitely slow; it is ``None`` when
    that median is not reached.
    """
    curves: dict[tuple, list[tuple[int, float]]] = {}
    for row in rows:
        key = (row["method"], row["category"], row["task_id"], row["seed"])
        curves.setdefault(key, []).append((row["step"], row["success_rate"]))
    grouped: dict[tuple[str, str], list] = {}
    for (method, category, _tid, _seed), curve in curves.items():
        curve.sort()
        hit = steps_to_threshold(curve, threshold)
        grouped.setdefault((method, category), []).append(
            (math.inf if hit is None else hit, curve[-1][1])
        )
    summary: dict[str, dict] = {}
    for (method, category), vals in sorted(grouped.items()):
        med = statistics.median(v[0] for v in vals)
        summary.setdefault(method, {})[category] = {
            "steps_to_50pct": None if math.isinf(med) else med,
            "final_success": statistics.median(v[1] for v in vals),
            "runs": len(vals),
            "runs_reaching_50pct": sum(not math.isinf(v[0]) for v in vals),
        }
    return summary


def cmd_run_suite(cfg: ExperimentConfig) -> dict:
    """Every (method, task, seed) run; one CSV per method plus summary and run record."""
    out = _prepare_run_dir(cfg)
    tasks = load_task_file(cfg.tasks) if cfg.tasks else []
    for _tid, text in tasks:
        parse(text)
    t0 = time.perf_counter()
    all_rows: list[dict] = []
    record_runs = []
    phase_steps = {}
    for method in cfg.methods:
        runs, erl = run_method(cfg, method, tasks) if tasks else ([], 0)
        text = curves_csv(runs)
        tmp = out / f"curves_{method}.csv.tmp"
        tmp.write_text(text)
        os.replace(tmp, out / f"curves_{method}.csv")
        all_rows += read_curves_csv(out / f"curves_{method}.csv")
        phase_steps[method] = {
            "erl_steps": erl,
            "per_task_steps": max((r.samples_used for r in runs), default=0),
        }
        record_runs += [
            {"method": r.method, "task_id": r.task_id, "seed": r.seed, "category": r.category,
             "curve": [list(p) for p in r.curve]}
            for r in runs
        ]
    summary = summarize_curves(all_rows)
    _write_json(out / "summary.json", summary)
    record = {
        "config_hash": cfg.config_hash(),
        "version": version_string(),
        "seeds": cfg.seeds,
        "methods": cfg.methods,
        "phase_steps": phase_steps,
        "wall_clock_s": round(time.perf_counter() - t0, 3),
        "runs": record_runs,
    }
    _write_json(out / "run_record.json", record)
    return summary


def cmd_run_task(cfg: ExperimentConfig, text: str, method: str | None = None) -> list[TaskRun]:
    method = method or cfg.methods[0]
    mdp = _spriteworld(build_environment(cfg))
    compile_task(text, mdp, cfg.features.m, cfg.alignment)
    runs, _ = run_method(cfg, method, [(1, text)])
    return runs


# -- sample complexity --------------------------------------------------------


def break_even_tasks(erl_steps: float, gpi_per_task: float, baseline_per_task: float) -> int | None:
    """Smallest task count T with ``erl + gpi * T < baseline * T``; None if never."""
    saving = baseline_per_task - gpi_per_task
    if saving <= 0:
        return None
    return int(math.floor(erl_steps / saving)) + 1


def cmd_sample_complexity(cfg: ExperimentConfig, k: int | None = None) -> dict:
    sc = cfg.sample_complexity
    m = cfg.features.m
    report = {
        "constants": {
            "erl_steps": sc.erl_steps,
            "gpi_per_task": sc.gpi_per_task,
            "baseline_per_task": sc.baseline_per_task,
        },
        "break_even_tasks": break_even_tasks(sc.erl_steps, sc.gpi_per_task, sc.baseline_per_task),
    }
    if k is not None:
        tasks = (m + 1) ** k
        report["guaranteed_tasks"] = tasks
        report["gpi_total_steps"] = sc.erl_steps + sc.gpi_per_task * tasks
        report["baseline_total_steps"] = sc.baseline_per_task * tasks
    if sc.run_record:
        report["measured"] = measured_constants(sc.run_record)
    return report


def measured_constants(run_record_path: str | Path) -> dict:
    """Break-even from a suite's run record: median steps-to-50% per method."""
    record = json.loads(Path(run_record_path).read_text())
    per_method: dict[str, list[float]] = {}
    for run in record["runs"]:
        hit = steps_to_threshold([tuple(p) for p in run["curve"]])
        per_method.setdefault(run["method"], []).append(math.inf if hit is None else hit)
    medians = {m: statistics.median(v) for m, v in per_method.items()}
    out = {
        "median_steps_to_50pct": {m: (None if math.isinf(v) else v) for m, v in medians.items()},
        "break_even_tasks": {},
    }
    base = medians.get("baseline-q")
    for method, steps in record["phase_steps"].items():
        if method == "baseline-q":
            continue
        gpi = medians.get(method, math.inf)
        if base is None or math.isinf(base) or math.isinf(gpi):
            # a censored median has no finite per-task cost to compare
            out["break_even_tasks"][method] = None
        else:
            out["break_even_tasks"][method] = break_even_tasks(steps["erl_steps"], gpi, base)
    return out


# -- oracle -----------------------------------------------------------------


def cmd_oracle(cfg: ExperimentConfig) -> dict:
    """Dump the exact SF matrix and the optimal value of every feature-control task."""
    out = _prepare_run_dir(cfg)
    mdp = build_environment(cfg)
    grid = BinGrid(cfg.features.m)
    fm = build_features(cfg, mdp)
    matrix = build_exact_sf_matrix(mdp, fm, grid, cfg.gamma, FULL)
    save_sf_matrix(out / "oracle_sf_matrix.npz", matrix)
    values = np.zeros((matrix.n, mdp.state_count))
    policies = np.zeros((matrix.n, mdp.state_count), dtype=np.int64)
    for p in range(matrix.n):
        pol, q = exact_optimal_policy(mdp, matrix.cumulants[:, p], cfg.gamma)
        values[p] = q.max(axis=1)
        policies[p] = pol.actions
    return {"matrix": matrix, "values": values, "policies": policies, "dir": out}


def oracle_values_csv(values: np.ndarray, m: int) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["feature", "bin", "state", "optimal_value"])
    for p in range(values.shape[0]):
        i, j = divmod(p, m)
        for s, v in enumerate(values[p]):
            writer.writerow([i, j + 1, s, repr(float(v))])
    return buf.getvalue()


def task_category(text: str) -> str:
    return categorize(parse(text))
