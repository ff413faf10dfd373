"""
Experiment orchestration: resolves a preset plus overrides, runs the scenario,
and writes config.json, series.csv, summary.json and compare.csv into
<out>/<scenario>_seed<seed>/.
"""
import json
import time
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from binary_nnn import AnnealSchedule, BinaryProblem, anneal_run, brute_force, greedy, quality_instance, quality_metric
from config import DEFAULT_SEED, DEFAULT_WORKERS, FEASIBILITY_RTOL, OUTPUT_DIR, PRESETS, SCENARIOS, ConfigError
from dana import DanaConfig, dana_c_run, dana_d_run, dgd_baseline_run, robust_run
from discrn import DiscrnConfig, NestedProblem, NoiseModel, discrn_run
from dispatch import DispatchConfig, build_signal, default_device_mix, dispatch_run, load_devices
from graph_core import Graph, build_laplacian, path_graph, random_connected_graph
from problems import (
    AllocationProblem,
    QuadraticCost,
    ev_example_costs,
    hessian_bounds,
    make_discrn_costs,
    random_quadratic_cost,
    random_sinusoidal_cost,
    solve_allocation_oracle,
)
from utils import ensure_dir, log, progress, rng_for, to_jsonable, verbose_log, write_json, write_series
from weight_design import epsilon_study, scaled_laplacian_for

NNN_BRUTE_FORCE_QUALITY_N = 12


@dataclass
class ExperimentConfig:
    scenario: str
    seed: int = DEFAULT_SEED
    overrides: Dict[str, Any] = field(default_factory=dict)
    output_dir: Path = Path(OUTPUT_DIR)

    def __post_init__(self):
        if self.scenario not in PRESETS:
            raise ConfigError(f"Unknown scenario '{self.scenario}' (expected one of {', '.join(SCENARIOS)})")
        if int(self.seed) < 0:
            raise ConfigError(f"seed must be nonnegative, got {self.seed}")
        self.seed = int(self.seed)
        self.output_dir = Path(self.output_dir)

    @property
    def run_dir(self) -> Path:
        return self.output_dir / f"{self.scenario}_seed{self.seed}"


class RunResult(NamedTuple):
    scenario: str
    seed: int
    run_dir: Path
    summary: Dict[str, Any]
    comparison: List[Dict[str, Any]]
    converged: bool


class ScenarioOutput(NamedTuple):
    rows: List[Dict[str, Any]]
    summary: Dict[str, Any]
    comparison: List[Dict[str, Any]]
    converged: bool


# Configuration


def load_config_file(path: Path) -> Dict[str, Any]:
    """
    Reads a JSON or TOML mapping. A nested "overrides" table is merged into
    the top level.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        if path.suffix.lower() == ".toml":
            with path.open("rb") as fh:
                payload = tomllib.load(fh)
        elif path.suffix.lower() == ".json":
            payload = json.loads(path.read_text())
        else:
            raise ConfigError(f"Unsupported config format '{path.suffix}' (use .json or .toml)")
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"Malformed config file {path}: {e}") from e
    if not isinstance(payload, dict):
        raise ConfigError(f"Config file {path} must hold a mapping")
    nested = payload.pop("overrides", {})
    if not isinstance(nested, dict):
        raise ConfigError(f"'overrides' in {path} must be a table")
    payload.update(nested)
    return payload


def parse_assignment(text: str) -> Tuple[str, Any]:
    """
    key=value with the value read as JSON when possible, e.g. q_values=[0,2]
    or two_stage=false; anything else stays a string.
    """
    if "=" not in text:
        raise ConfigError(f"Override '{text}' is not of the form key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def resolve_params(config: ExperimentConfig) -> Dict[str, Any]:
    params = dict(PRESETS[config.scenario])
    unknown = sorted(set(config.overrides) - set(params))
    if unknown:
        raise ConfigError(f"Unknown parameter(s) for '{config.scenario}': {', '.join(unknown)}")
    for key, value in config.overrides.items():
        params[key] = tuple(value) if isinstance(value, list) else value
    return params


def _graph_seed(seed: int, label: str = "graph") -> int:
    return int(rng_for(seed, label).integers(2 ** 31))


# Scenarios


def _iterations_to_gap(rows: Sequence[Dict], f_star: float, gap: float) -> Optional[int]:
    for row in rows:
        if row["f"] - f_star <= gap:
            return int(row["iter"])
    return None


def _tag(rows: Sequence[Dict], **labels) -> List[Dict]:
    return [{**labels, **row} for row in rows]


def run_dana_discrete(params: Dict, seed: int) -> ScenarioOutput:
    n = params["n"]
    graph = random_connected_graph(n, params["m"], _graph_seed(seed))
    cost = random_sinusoidal_cost(n, rng_for(seed, "costs"), params["a_range"], params["b_range"],
                                  params["c_range"], params["theta_range"])
    problem = AllocationProblem(cost, params["d"], graph)
    beta, L, report = scaled_laplacian_for(graph, hessian_bounds(cost))
    x0 = np.full(n, float(params["x0"]))
    if abs(x0.sum() - problem.d) > FEASIBILITY_RTOL * max(1.0, abs(problem.d)):
        x0 = np.full(n, problem.d / n)

    reference = dana_d_run(problem, L, DanaConfig(q=params["reference_q"], alpha=params["alpha"],
                                                 max_iters=params["reference_iters"], record_every=10 ** 9),
                           x0, eps=report.epsilon)
    f_star = problem.objective(reference.x)
    rows, comparison = [], []
    converged = True
    for q in params["q_values"]:
        res = dana_d_run(problem, L, DanaConfig(q=q, alpha=params["alpha"], max_iters=params["max_iters"]),
                         x0, eps=report.epsilon)
        hit = _iterations_to_gap(res.rows, f_star, params["target_gap"])
        converged &= hit is not None
        rows += _tag(res.rows, method=f"dana_q{q}")
        comparison.append({"method": f"dana_q{q}", "iterations": hit, "final_cost": res.final_cost,
                           "runtime": res.runtime})
    if params["include_gradient"]:
        res = dgd_baseline_run(problem, L, params["alpha"], params["max_iters"], x0=x0)
        rows += _tag(res.rows, method="gradient")
        comparison.append({"method": "gradient", "iterations": _iterations_to_gap(res.rows, f_star, params["target_gap"]),
                           "final_cost": res.final_cost, "runtime": res.runtime})
    summary = {"f_star": f_star, "beta": beta, "epsilon": report.epsilon, "reference_iterations": reference.iterations}
    return ScenarioOutput(rows, summary, comparison, converged)


def _dana_continuous_problem(params: Dict, seed: int) -> Tuple[AllocationProblem, np.ndarray, Optional[np.ndarray]]:
    if params["instance"] == "three_node":
        graph = Graph(params["n"], tuple(tuple(e) for e in params["edges"]))
        cost = QuadraticCost(params["a"], params["b"])
        problem = AllocationProblem(cost, params["d"], graph, params["lower"], params["upper"])
        return problem, np.asarray(params["x0"], dtype=float), np.asarray(params["lambda0"], dtype=float)
    if params["instance"] == "forty_node":
        n = params["n"]
        rng = rng_for(seed, "costs")
        graph = random_connected_graph(n, params["m"], _graph_seed(seed))
        cost = random_quadratic_cost(n, rng, params["a_range"], params["b_range"])
        lower = rng.uniform(*params["lower_range"], size=n)
        upper = rng.uniform(*params["upper_range"], size=n)
        problem = AllocationProblem(cost, params["d"], graph, lower, upper)
        return problem, np.full(n, float(params["x0"])), None
    raise ConfigError(f"Unknown DANA-C instance '{params['instance']}' (expected three_node or forty_node)")


def run_dana_continuous(params: Dict, seed: int) -> ScenarioOutput:
    problem, x0, lam0 = _dana_continuous_problem(params, seed)
    _, L, report = scaled_laplacian_for(problem.graph, hessian_bounds(problem.cost))
    optimum = solve_allocation_oracle(problem)
    record_every = max(1, int(round(1.0 / params["h"])) // 10)
    rows, comparison = [], []
    converged = True
    for q in params["q_values"]:
        res = dana_c_run(problem, L, DanaConfig(q=q, h=params["h"], record_every=record_every),
                         params["t_final"], x0, lam0, optimum)
        converged &= res.converged
        rows += _tag(res.rows, method=f"dana_c_q{q}")
        comparison.append({"method": f"dana_c_q{q}", "iterations": res.iterations, "final_cost": res.final_cost,
                           "runtime": res.runtime, "dist": res.rows[-1].get("dist")})
    summary = {"instance": params["instance"], "x_star": optimum.x, "lam_star": optimum.lam,
               "f_star": problem.objective(optimum.x), "epsilon": report.epsilon}
    return ScenarioOutput(rows, summary, comparison, converged)


def run_dana_robust(params: Dict, seed: int) -> ScenarioOutput:
    n = params["n"]
    graph = random_connected_graph(n, params["m"], _graph_seed(seed))
    cost = random_quadratic_cost(n, rng_for(seed, "costs"), params["a_range"], params["b_range"])
    problem = AllocationProblem(cost, params["d"], graph)
    x_star = solve_allocation_oracle(problem).x
    L = build_laplacian(graph)
    record_every = max(1, int(round(1.0 / params["h"])) // 10)
    rows, comparison = [], []
    converged = True
    for q in params["q_values"]:
        res = robust_run(problem, L, q, params["h"], params["t_final"], penalty=params["penalty"],
                         perturb_times=params["perturb_times"], perturb_scale=params["perturb_scale"],
                         rng=rng_for(seed, "noise"), record_every=record_every, x_star=x_star)
        converged &= res.converged
        rows += _tag(res.rows, method=f"robust_q{q}")
        comparison.append({"method": f"robust_q{q}", "iterations": res.iterations, "final_cost": res.final_cost,
                           "runtime": res.runtime, "violation": res.rows[-1]["violation"]})
    return ScenarioOutput(rows, {"f_star": problem.objective(x_star)}, comparison, converged)


def _discrn_config(params: Dict, method: str) -> DiscrnConfig:
    return DiscrnConfig(method=method, delta=params["delta"], batch=params["batch"], rho=params["rho"],
                        eta_gradient=params.get("eta_gradient", DiscrnConfig.eta_gradient),
                        eta_newton=params.get("eta_newton", DiscrnConfig.eta_newton),
                        outer_iters=params["outer_iters"], x0=params["x0"], eta_rule=params["eta_rule"],
                        subsolver_rounds=params["subsolver_rounds"], eval_realizations=params["eval_realizations"])


def _run_discrn_methods(problem: NestedProblem, params: Dict, seed: int, label: str = "") -> ScenarioOutput:
    rows, comparison = [], []
    converged = True
    for method in params["methods"]:
        name = f"{method}{label}"
        # every method sees the same batches and the same evaluation draws
        res = discrn_run(problem, _discrn_config(params, method), rng_for(seed, f"noise{label}"),
                         rng_for(seed, f"eval{label}"))
        converged &= res.converged
        rows += _tag(res.rows, method=name)
        comparison.append({"method": name, "iterations": res.plateau, "final_cost": res.final_cost,
                           "runtime": res.runtime, "accepted_fraction": res.accepted_fraction})
    return ScenarioOutput(rows, {}, comparison, converged)


def run_discrn(params: Dict, seed: int) -> ScenarioOutput:
    n = params["n"]
    graph = random_connected_graph(n, params["m"], _graph_seed(seed))
    cost, omega = make_discrn_costs(n, rng_for(seed, "costs"))
    problem = NestedProblem(cost, params["p_ref"], NoiseModel.from_spec(params["noise"]), graph)
    out = _run_discrn_methods(problem, params, seed)
    return out._replace(summary={"omega_min": float(omega.min()), "omega_max": float(omega.max())})


WEATHER = {"sunny": ("point", 1.5), "cloudy": ("uniform", 0.0, 1.5)}


def run_discrn_ev(params: Dict, seed: int) -> ScenarioOutput:
    """Two EV drivers; the PV disturbance lands on the first driver's allocation."""
    cost = ev_example_costs()
    rows, comparison = [], []
    converged = True
    for weather in params["weather"]:
        if weather not in WEATHER:
            raise ConfigError(f"Unknown weather '{weather}' (expected one of {', '.join(WEATHER)})")
        noise = [NoiseModel.from_spec(WEATHER[weather]), NoiseModel("point", 0.0)]
        problem = NestedProblem(cost, params["p_ref"], noise, path_graph(2))
        out = _run_discrn_methods(problem, params, seed, label=f"_{weather}")
        rows += out.rows
        comparison += out.comparison
        converged &= out.converged
    return ScenarioOutput(rows, {}, comparison, converged)


def _schedule(params: Dict, steps: Optional[int] = None) -> AnnealSchedule:
    return AnnealSchedule(beta=params["beta"], T0=params["T0"], tau0=params["tau0"], window=params["window"],
                          steps=steps or params["learning_steps"], h=params["h"], m=params["m"],
                          alpha=params["alpha"])


def run_nnn_quality(params: Dict, seed: int) -> ScenarioOutput:
    n = params["n"]
    schedule = _schedule(params)
    rng = rng_for(seed, "instances")
    modes = ("binpac", "binpad", "hnn")
    costs: Dict[str, List[float]] = {name: [] for name in (*modes, "greedy")}
    if n <= NNN_BRUTE_FORCE_QUALITY_N:
        costs["brute"] = []
    rows = []
    converged = True
    bar = progress(total=params["trials"], desc="🔁 NNN quality", unit="trial")
    for trial in range(params["trials"]):
        problem = quality_instance(n, rng, params["p_range"], params["exponent_range"], params["p_r"],
                                   params["gamma"], params["T0"], params["tau0"], params["edge_factor"])
        row = {"trial": trial}
        for mode in modes:
            res = anneal_run(problem, schedule, mode, rng_for(seed, f"init{trial}"))
            costs[mode].append(res.cost)
            row[mode] = res.cost
            converged &= res.converged
        row["greedy"] = problem.corner_cost(greedy(problem))
        costs["greedy"].append(row["greedy"])
        if "brute" in costs:
            row["brute"] = brute_force(problem)[1]
            costs["brute"].append(row["brute"])
        rows.append(row)
        bar.update(1)
    bar.close()
    Q = quality_metric(costs)
    comparison = [{"method": name, "iterations": None, "final_cost": float(np.mean(values)), "runtime": None,
                   "Q": Q[name]} for name, values in costs.items()]
    return ScenarioOutput(rows, {"Q": Q}, comparison, converged)


def run_nnn_traj2d(params: Dict, seed: int) -> ScenarioOutput:
    problem = BinaryProblem(params["c"], params["p"], params["p_r"], params["gamma"], params["a"],
                            graph=path_graph(len(params["c"])))
    corner, best = brute_force(problem)
    schedule = _schedule(params)
    rows, comparison = [], []
    summary: Dict[str, Any] = {"brute_corner": corner.astype(int).tolist(), "brute_cost": best}
    converged = True
    for mode in ("binpac", "binpad"):
        res = anneal_run(problem, schedule, mode, rng_for(seed, "init"), record_every=10)
        rows += _tag(res.rows, method=mode)
        summary[mode] = {"corner": res.corner.astype(int).tolist(), "corner_distance": res.corner_distance,
                         "x": res.x}
        converged &= res.converged
        comparison.append({"method": mode, "iterations": len(res.rows), "final_cost": res.cost,
                           "runtime": res.runtime})
    return ScenarioOutput(rows, summary, comparison, converged)


def run_dispatch_fullday(params: Dict, seed: int) -> ScenarioOutput:
    devices = load_devices(Path(params["devices"])) if params["devices"] else default_device_mix()
    capacities = [d.headroom for d in devices]
    signal = build_signal(params["signal"], params["ticks"], rng_for(seed, "signal"), capacities,
                          params["signal_beta"])
    config = DispatchConfig(pd_step=params["pd_step"], dana_step=params["dana_step"], q=params["q"],
                            check_oracle=params["check_oracle"], preprocess=params["preprocess"],
                            max_shift=params["max_shift"])
    variants = [False, True] if params["two_stage"] else [False]
    rows, comparison = [], []
    summary: Dict[str, Any] = {"ticks": signal.ticks, "capacity": signal.capacity, "runs": []}
    converged = True
    for method in params["methods"]:
        for two_stage in variants:
            res = dispatch_run(signal, devices, method, two_stage, config, _graph_seed(seed),
                               params["topology"], params["edge_factor"])
            name = f"{method}{'_two_stage' if two_stage else ''}"
            rows += _tag(res.rows(), method=name)
            run_summary = res.summary()
            summary["runs"].append(run_summary)
            converged &= res.converged
            comparison.append({"method": name, "iterations": None, "final_cost": res.report.rmse,
                               "runtime": res.runtime, "S": res.report.S,
                               "nmse_max": run_summary.get("nmse_max")})
    return ScenarioOutput(rows, summary, comparison, converged)


def run_weight_study(params: Dict, seed: int) -> ScenarioOutput:
    rows = epsilon_study(params["sizes"], params["trials"], params["families"], params["edge_factor"], seed)
    frame = pd.DataFrame(rows)
    stats = frame.groupby(["family", "n"]).agg(eps_mean=("epsilon", "mean"), eps_max=("epsilon", "max"),
                                               satisfied=("satisfied", "mean")).reset_index()
    summary = {"groups": stats.to_dict(orient="records")}
    comparison = [{"method": f"{r['family']}_n{r['n']}", "iterations": None, "final_cost": r["eps_mean"],
                   "runtime": None} for r in summary["groups"]]
    return ScenarioOutput(rows, summary, comparison, bool(frame["satisfied"].all()))


RUNNERS: Dict[str, Callable[[Dict, int], ScenarioOutput]] = {
    "dana_discrete": run_dana_discrete,
    "dana_continuous": run_dana_continuous,
    "dana_continuous_forty": run_dana_continuous,
    "dana_robust": run_dana_robust,
    "discrn": run_discrn,
    "discrn_ev": run_discrn_ev,
    "nnn_quality": run_nnn_quality,
    "nnn_traj2d": run_nnn_traj2d,
    "dispatch_fullday": run_dispatch_fullday,
    "weight_study": run_weight_study,
}


# Reporting


def compare_table(results: Sequence[Mapping[str, Any]]) -> Tuple[str, pd.DataFrame]:
    """
    Aligned text table and DataFrame of (method, iterations, final_cost,
    runtime), sorted by final cost ascending.
    """
    if not results:
        raise ValueError("compare_table needs at least one result")
    frame = pd.DataFrame([{"method": r["method"], "iterations": r.get("iterations"),
                           "final_cost": r.get("final_cost"), "runtime": r.get("runtime")} for r in results])
    frame = frame.sort_values("final_cost", kind="stable", na_position="last").reset_index(drop=True)
    return frame.to_string(index=False), frame


def run_preset(config: ExperimentConfig) -> RunResult:
    params = resolve_params(config)
    verbose_log(f"🧮 {config.scenario} seed={config.seed}")
    start = time.time()
    out = RUNNERS[config.scenario](params, config.seed)
    runtime = time.time() - start

    run_dir = config.run_dir
    ensure_dir(run_dir)
    write_json(run_dir / "config.json", to_jsonable({"scenario": config.scenario, "seed": config.seed,
                                                     "params": params}))
    write_series(run_dir / "series.csv", out.rows)
    summary = to_jsonable({**out.summary, "scenario": config.scenario, "seed": config.seed,
                           "converged": out.converged, "runtime": runtime})
    write_json(run_dir / "summary.json", summary)
    if out.comparison:
        text, frame = compare_table(out.comparison)
        # wall-clock stays out of the file so reruns compare byte for byte
        write_series(run_dir / "compare.csv", frame.drop(columns="runtime").to_dict(orient="records"))
        log(f"\n{config.scenario} (seed {config.seed})\n{text}")
    status = "✅" if out.converged else "⚠️"
    verbose_log(f"{status} {config.scenario} finished in {runtime:.1f}s, 📁 {run_dir}")
    return RunResult(config.scenario, config.seed, run_dir, summary, to_jsonable(out.comparison), out.converged)


def run_many(configs: Sequence[ExperimentConfig], workers: int = DEFAULT_WORKERS) -> List[RunResult]:
    """
    Runs every config; with workers > 1 on a process pool. Results keep the
    input order.
    """
    if workers <= 1 or len(configs) <= 1:
        return [run_preset(c) for c in configs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run_preset, configs))
