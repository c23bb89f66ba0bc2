"""
Evaluation harness: convergence detection, fidelity studies, fronts and reports.

The E-versus-F comparison runs the non-adaptive optimizer on the base-protocol
aims only (E) next to the adaptive optimizer on all aims (F), re-evaluates
both on a large DC-point set, and tabulates the plans that satisfy every
base-protocol aim.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from components import dependencies
from components.adaptive_config import AdaptiveResult, AdaptiveRunConfig, run_adaptive, run_static
from components.dose_engine import DoseKernelConfig, build_dose_model
from components.dvi import cumulative_dvh
from components.exceptions import ArchiveEmptyError, ConfigError, ContractError
from components.moea_core import (ElitistArchive, OptimizerConfig, Solution, archive_from, build_evaluator,
                                  reevaluate_solutions)
from components.objective_model import AimState, ConstraintConfig, ObjectiveMode, ProtocolConfig, embrace_satisfied
from components.patient_model import PatientCase, sample_dc_point_sets
from utils import export_utils
from utils.stats_utils import StatTestResult, holm_bonferroni, shapiro_wilk, wilcoxon_signed_rank  # noqa: F401

# Initialize logger
logger = dependencies.setup_logging()
logger = logging.getLogger('app.eval_harness')

PathLike = Union[str, Path]
NOT_AVAILABLE = "n.a."
FRONT_FORMATS = ("csv", "json")


@dataclass(frozen=True)
class ConvergenceCriteria:
    ratio_threshold: float = 0.99
    plateau_epsilon: float = 1e-4
    plateau_window: int = 20
    reference_generations: Optional[int] = None
    reference_seconds: Optional[float] = None

    def __post_init__(self):
        if not 0 < self.ratio_threshold < 1:
            raise ConfigError(f"ratio_threshold must lie in (0, 1), got {self.ratio_threshold}")
        if self.plateau_window < 1 or self.plateau_epsilon <= 0:
            raise ConfigError("plateau_window must be positive and plateau_epsilon strictly positive")
        if self.reference_generations is not None and self.reference_generations < 1:
            raise ConfigError("reference_generations must be positive")


def detect_convergence(lci_trace: Sequence[float], criteria: Optional[ConvergenceCriteria] = None,
                       reference: Optional[float] = None) -> Optional[int]:
    """
    First generation at which the best-LCI trace has converged.

    Converged means the gain over generation 1 exceeds `ratio_threshold` of the
    reference gain and the next `plateau_window` generations each move by less
    than `plateau_epsilon`.

    Args:
        lci_trace (Sequence[float]): Best LCI per generation, generation 1 first.
        criteria (Optional[ConvergenceCriteria]): Thresholds; defaults when None.
        reference (Optional[float]): Reference LCI; otherwise taken from the trace at
            `reference_generations`, or its final value.

    Returns:
        Optional[int]: 1-based generation, or None if the trace never converges.
    """
    criteria = criteria or ConvergenceCriteria()
    trace = np.asarray(lci_trace, dtype=float)
    if trace.ndim != 1 or trace.size < 2:
        raise ContractError("a convergence trace needs at least two generations")
    if reference is None:
        if criteria.reference_generations is not None:
            reference = float(trace[min(criteria.reference_generations, trace.size) - 1])
        else:
            reference = float(trace[-1])
    first = float(trace[0])
    if reference == first:
        return 1

    ratios = (trace - first) / (reference - first)
    steps = np.abs(np.diff(trace))
    window = criteria.plateau_window
    for g in range(trace.size - window):
        if ratios[g] > criteria.ratio_threshold and np.all(steps[g:g + window] < criteria.plateau_epsilon):
            return g + 1
    return None


def tune_generations(traces: Sequence[Sequence[float]], criteria: Optional[ConvergenceCriteria] = None) -> Tuple[Optional[int], List[Optional[int]]]:
    """Generation count covering every trace; None when any trace never converges."""
    per_trace = [detect_convergence(t, criteria) for t in traces]
    if not per_trace or any(g is None for g in per_trace):
        return None, per_trace
    return max(per_trace), per_trace


def summarize_runtimes(seconds: Sequence[float]) -> Dict[str, float]:
    values = pd.Series(list(seconds), dtype=float)
    if values.empty:
        return {"n": 0, "median": float("nan"), "min": float("nan"), "max": float("nan"), "std": float("nan")}
    return {"n": int(values.size), "median": float(values.median()), "min": float(values.min()),
            "max": float(values.max()), "std": float(values.std(ddof=1)) if values.size > 1 else 0.0}


@dataclass
class RunReport:
    mode: str
    seed: int
    n_plans: int
    n_plans_satisfying_embrace: int
    satisfying_dvis: Dict[str, List[float]] = field(default_factory=dict)
    runtime_s: float = 0.0
    rounds: int = 0
    adjustment_counts: Dict[str, int] = field(default_factory=dict)
    eliminated: List[str] = field(default_factory=list)
    aspirations: Dict[str, Any] = field(default_factory=dict)

    @property
    def embrace_all_satisfied(self) -> bool:
        return self.n_plans_satisfying_embrace > 0

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["embrace_all_satisfied"] = self.embrace_all_satisfied
        return data


def adjustable_labels(protocol: ProtocolConfig) -> List[str]:
    return list(dict.fromkeys(a.dvi.label for a in protocol.added_aims))


def build_run_report(result: AdaptiveResult, protocol: ProtocolConfig) -> RunReport:
    """Count archive plans meeting every base-protocol aim and keep their adjustable DVIs."""
    labels = adjustable_labels(protocol)
    members = list(result.archive.members)
    satisfying = [m for m in members if embrace_satisfied(m.dvi_values, protocol)]
    return RunReport(
        mode=result.mode,
        seed=result.seed,
        n_plans=len(members),
        n_plans_satisfying_embrace=len(satisfying),
        satisfying_dvis={label: [float(m.dvi_values[label]) for m in satisfying] for label in labels},
        runtime_s=result.runtime_s,
        rounds=result.rounds,
        adjustment_counts=result.adjustment_counts,
        eliminated=result.eliminated,
        aspirations=result.aim_state.to_dict(),
    )


def write_run_report(report: RunReport, path: PathLike) -> Path:
    return export_utils.atomic_write_json(path, report.to_dict())


@dataclass
class ReevaluatedFront:
    solutions: List[Solution]
    fallback: pd.DataFrame
    archive: ElitistArchive

    @property
    def mean_abs_fallback(self) -> Tuple[float, float]:
        if self.fallback.empty:
            return 0.0, 0.0
        means = self.fallback.abs().mean()
        return float(means["lci_fallback"]), float(means["lsi_fallback"])


def fallback_frame(fallback: np.ndarray) -> pd.DataFrame:
    return pd.DataFrame(np.asarray(fallback, dtype=float).reshape(-1, 2), columns=["lci_fallback", "lsi_fallback"])


def reevaluate_front(archive: Union[ElitistArchive, Sequence[Solution]], case: PatientCase, protocol: ProtocolConfig,
                     n_dc_reeval: int, seed: int, aim_state: Optional[AimState] = None,
                     mode: ObjectiveMode = ObjectiveMode.FULL, kernel: Optional[DoseKernelConfig] = None,
                     constraints: Optional[ConstraintConfig] = None, t_max: float = 60.0,
                     cache_dir: Optional[PathLike] = None) -> ReevaluatedFront:
    """
    Re-evaluate a front on a fresh DC-point set.

    Args:
        archive (Union[ElitistArchive, Sequence[Solution]]): Plans to re-evaluate.
        case (PatientCase): The case the plans belong to.
        protocol (ProtocolConfig): Aims.
        n_dc_reeval (int): DC points per ROI.
        seed (int): DC-point seed, used as given.
        aim_state (Optional[AimState]): Aspirations for the refreshed objectives.

    Returns:
        ReevaluatedFront: Refreshed plans, per-plan fallback (old minus new) and the rebuilt archive.

    Raises:
        ArchiveEmptyError: If there is nothing to re-evaluate.
    """
    members = list(archive.members if isinstance(archive, ElitistArchive) else archive)
    if not members:
        raise ArchiveEmptyError("cannot re-evaluate an empty front")
    evaluator = build_evaluator(case, protocol, n_dc_reeval, seed, kernel, aim_state, mode, constraints, t_max, cache_dir)
    fresh, fallback = reevaluate_solutions(members, evaluator)
    capacity = archive.capacity if isinstance(archive, ElitistArchive) else max(1, len(fresh))
    frame = fallback_frame(fallback)
    logger.info(f"Re-evaluated {len(fresh)} plans on {n_dc_reeval} DC points; mean |LCI fallback| "
                f"{frame['lci_fallback'].abs().mean():.4g}")
    return ReevaluatedFront(fresh, frame, archive_from(fresh, capacity))


def front_frame(solutions: Sequence[Solution], protocol: ProtocolConfig, dwell_ids: Optional[Sequence[int]] = None,
                n_dwells: Optional[int] = None) -> pd.DataFrame:
    """One row per plan: lci, lsi, constraint, every DVI, every dwell time."""
    labels = [spec.label for spec in protocol.dvi_specs]
    if dwell_ids is None:
        count = n_dwells if n_dwells is not None else (len(solutions[0].dwell_times) if solutions else 0)
        dwell_ids = range(count)
    time_columns = [f"t_{i}" for i in dwell_ids]
    columns = ["lci", "lsi", "constraint"] + labels + time_columns
    rows = []
    for s in solutions:
        if len(s.dwell_times) != len(time_columns):
            raise ContractError(f"plan has {len(s.dwell_times)} dwell times, expected {len(time_columns)}")
        rows.append([s.objectives.lci, s.objectives.lsi, s.objectives.constraint]
                    + [s.dvi_values[label] for label in labels] + [float(t) for t in s.dwell_times])
    return pd.DataFrame(rows, columns=columns, dtype=float)


def export_front(archive: Union[ElitistArchive, Sequence[Solution]], path: PathLike, protocol: ProtocolConfig,
                 dwell_ids: Optional[Sequence[int]] = None, metadata: Optional[Mapping[str, Any]] = None,
                 fmt: str = "csv") -> Path:
    """
    Write a front plus a companion `<stem>.meta.json` with seeds and configuration.

    Raises:
        ConfigError: On an unknown format.
        OSError: On write failure.
    """
    if fmt not in FRONT_FORMATS:
        raise ConfigError(f"unknown front format '{fmt}', expected one of {FRONT_FORMATS}")
    members = list(archive.members if isinstance(archive, ElitistArchive) else archive)
    frame = front_frame(members, protocol, dwell_ids)
    target = Path(path)
    if fmt == "csv":
        export_utils.atomic_write_csv(target, frame)
    else:
        export_utils.atomic_write_json(target, frame.to_dict(orient="records"))
    meta = dict(metadata or {})
    meta.update({"n_plans": len(members), "columns": list(frame.columns)})
    export_utils.atomic_write_json(target.with_name(f"{target.stem}.meta.json"), meta)
    logger.info(f"Exported {len(members)} plans to {target}")
    return target


def read_front_plan(path: PathLike, index: Optional[int] = None) -> Tuple[int, np.ndarray]:
    """
    Dwell times of one plan from an exported front.

    Args:
        path (PathLike): Front written by `export_front` (csv or json).
        index (Optional[int]): Row to take; the row maximizing min(LCI, LSI) when None.

    Returns:
        Tuple[int, np.ndarray]: Row index and dwell times in dwell-id order.
    """
    target = Path(path)
    if target.suffix == ".json":
        with open(target, "r") as f:
            frame = pd.DataFrame(json.load(f))
    else:
        frame = pd.read_csv(target)
    if frame.empty:
        raise ArchiveEmptyError(f"front {target} holds no plans")
    if index is None:
        index = int(np.argmax(np.minimum(frame["lci"].to_numpy(), frame["lsi"].to_numpy())))
    if not 0 <= index < len(frame):
        raise ContractError(f"plan {index} outside the {len(frame)} plans of {target}")
    times = frame.filter(regex=r"^t_\d+$")
    return index, times.iloc[index].to_numpy(dtype=float)


def plan_dvh(case: PatientCase, dwell_times: Sequence[float], n_dc: int, seed: int,
             kernel: Optional[DoseKernelConfig] = None, bins: int = 200,
             roi_names: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """Cumulative DVH of every (or every named) ROI for one plan, in long format with an `roi` column."""
    point_sets = sample_dc_point_sets(case, n_dc, seed, roi_names)
    model = build_dose_model(case, point_sets, kernel or DoseKernelConfig(), point_names=())
    tables = []
    for name, dose in model.dose_vectors(dwell_times).items():
        table = cumulative_dvh(dose, bins)
        table.insert(0, "roi", name)
        tables.append(table)
    return pd.concat(tables, ignore_index=True)


def export_plot_data(traces: Mapping[str, Sequence[float]], archive: Optional[Union[ElitistArchive, Sequence[Solution]]],
                     out_dir: PathLike, prefix: str = "run") -> Tuple[Path, Optional[Path]]:
    """
    Generation-vs-best-LCI trace and an LCI/LSI scatter flagging the both-positive quadrant.

    No scatter file is written when `archive` is None.
    """
    out = Path(out_dir)
    trace = pd.DataFrame({name: list(values) for name, values in traces.items()})
    trace.insert(0, "generation", np.arange(1, len(trace) + 1))
    trace_path = export_utils.atomic_write_csv(out / f"{prefix}_trace.csv", trace)
    if archive is None:
        return trace_path, None
    members = list(archive.members if isinstance(archive, ElitistArchive) else archive)
    scatter = pd.DataFrame({"lci": [m.lci for m in members], "lsi": [m.lsi for m in members]}, dtype=float)
    scatter["both_positive"] = (scatter["lci"] > 0) & (scatter["lsi"] > 0)
    scatter_path = export_utils.atomic_write_csv(out / f"{prefix}_scatter.csv", scatter)
    return trace_path, scatter_path


@dataclass
class Comparison:
    table: pd.DataFrame
    reports: Dict[str, List[RunReport]]


def comparison_table(reports: Mapping[str, Sequence[RunReport]], protocol: ProtocolConfig) -> pd.DataFrame:
    """
    Aggregate run reports per mode.

    DVI medians and standard deviations pool the plans that satisfy every
    base-protocol aim across runs; `n.a.` when there are none.
    """
    labels = adjustable_labels(protocol)
    rows = []
    for mode, runs in reports.items():
        row: Dict[str, Any] = {
            "mode": mode,
            "pct_embrace_satisfied": 100.0 * sum(r.embrace_all_satisfied for r in runs) / len(runs) if runs else 0.0,
            "mean_plans": float(np.mean([r.n_plans_satisfying_embrace for r in runs])) if runs else 0.0,
        }
        for label in labels:
            pooled = pd.Series([v for r in runs for v in r.satisfying_dvis.get(label, [])], dtype=float)
            if pooled.empty:
                row[f"{label}_median"] = NOT_AVAILABLE
                row[f"{label}_std"] = NOT_AVAILABLE
            else:
                row[f"{label}_median"] = float(pooled.median())
                row[f"{label}_std"] = float(pooled.std(ddof=1)) if pooled.size > 1 else 0.0
        rows.append(row)
    columns = ["mode", "pct_embrace_satisfied", "mean_plans"] + [f"{l}_{s}" for l in labels for s in ("median", "std")]
    return pd.DataFrame(rows, columns=columns)


def _seed_list(n_runs: int, seeds: Optional[Sequence[int]]) -> List[int]:
    if n_runs < 1:
        raise ContractError(f"need at least one run, got {n_runs}")
    if seeds is None:
        return list(range(n_runs))
    if len(seeds) != n_runs:
        raise ContractError(f"{len(seeds)} seeds given for {n_runs} runs")
    return [int(s) for s in seeds]


def _map(fn, items: Sequence[Any], jobs: int) -> List[Any]:
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as executor:
            return list(executor.map(fn, items))
    return [fn(item) for item in items]


def compare_approaches(case: PatientCase, protocol: ProtocolConfig, n_runs: int, seeds: Optional[Sequence[int]] = None,
                       opt_config: Optional[OptimizerConfig] = None, adaptive_config: Optional[AdaptiveRunConfig] = None,
                       jobs: int = 1, kernel: Optional[DoseKernelConfig] = None,
                       constraints: Optional[ConstraintConfig] = None, cache_dir: Optional[PathLike] = None) -> Comparison:
    """
    Run E (base aims, non-adaptive, high fidelity) and F (adaptive, all aims) once per seed.

    Args:
        case (PatientCase): The case.
        protocol (ProtocolConfig): Base and added aims.
        n_runs (int): Runs per mode.
        seeds (Optional[Sequence[int]]): One seed per run; 0..n_runs-1 when None.
        opt_config (Optional[OptimizerConfig]): Optimizer settings.
        adaptive_config (Optional[AdaptiveRunConfig]): Fidelities and generation counts for both modes.
        jobs (int): Concurrent runs.

    Returns:
        Comparison: Table with rows F then E, plus the per-run reports.
    """
    seed_list = _seed_list(n_runs, seeds)
    opt_config = opt_config or OptimizerConfig()
    cfg = adaptive_config or AdaptiveRunConfig()
    tasks = [("F", s) for s in seed_list] + [("E", s) for s in seed_list]

    def run(task: Tuple[str, int]) -> RunReport:
        mode, seed = task
        if mode == "F":
            result = run_adaptive(case, protocol, opt_config, cfg, seed, kernel, constraints, cache_dir)
        else:
            result = run_static(case, protocol, opt_config, ObjectiveMode.EMBRACE_ONLY, cfg.n_dc_max, cfg.g_max,
                                seed, cfg.n_dc_reeval, kernel, constraints, cache_dir)
        report = build_run_report(result, protocol)
        report.mode = mode
        return report

    results = _map(run, tasks, jobs)
    reports = {"F": results[:len(seed_list)], "E": results[len(seed_list):]}
    table = comparison_table(reports, protocol)
    logger.info(f"Compared approaches over {len(seed_list)} seeds:\n{table.to_string(index=False)}")
    return Comparison(table, reports)


def sweep_dc_points(case: PatientCase, protocol: ProtocolConfig, n_values: Sequence[int], seeds: Sequence[int],
                    opt_config: Optional[OptimizerConfig] = None, generations: Optional[int] = None, n_dc_reeval: int = 50000,
                    jobs: int = 1, kernel: Optional[DoseKernelConfig] = None,
                    constraints: Optional[ConstraintConfig] = None, cache_dir: Optional[PathLike] = None) -> pd.DataFrame:
    """
    Non-adaptive full-aim runs per DC-point count, each re-evaluated at `n_dc_reeval`.
    `generations` defaults to `opt_config.generations`.

    Returns:
        pd.DataFrame: One row per (n_dc, seed) with mean absolute LCI and LSI fallback.
    """
    if not n_values or not seeds:
        raise ContractError("need at least one DC-point count and one seed")
    opt_config = opt_config or OptimizerConfig()
    tasks = [(int(n), int(s)) for n in n_values for s in seeds]
    generations = opt_config.generations if generations is None else generations

    def run(task: Tuple[int, int]) -> Dict[str, Any]:
        n, seed = task
        result = run_static(case, protocol, opt_config, ObjectiveMode.FULL, n, generations, seed, n_dc_reeval,
                            kernel, constraints, cache_dir)
        fallback = np.abs(result.fallback)
        return {"n_dc": n, "seed": seed, "n_plans": len(result.front),
                "mean_abs_lci_fallback": float(fallback[:, 0].mean()) if len(fallback) else 0.0,
                "mean_abs_lsi_fallback": float(fallback[:, 1].mean()) if len(fallback) else 0.0,
                "runtime_s": result.runtime_s}

    return pd.DataFrame(_map(run, tasks, jobs))


def choose_n_dc_max(fallbacks: Mapping[int, float], tolerance: float) -> int:
    """Smallest DC-point count whose mean fallback is within `tolerance` of every larger count."""
    if not fallbacks:
        raise ContractError("no fallback values to choose from")
    ns = sorted(fallbacks)
    for i, n in enumerate(ns):
        if all(abs(fallbacks[n] - fallbacks[m]) <= tolerance for m in ns[i + 1:]):
            return n
    return ns[-1]


def study_generations(case: PatientCase, protocol: ProtocolConfig, seeds: Sequence[int], n_dc: int,
                      reference_generations: int, opt_config: Optional[OptimizerConfig] = None,
                      criteria: Optional[ConvergenceCriteria] = None, mode: ObjectiveMode = ObjectiveMode.FULL,
                      jobs: int = 1, kernel: Optional[DoseKernelConfig] = None,
                      constraints: Optional[ConstraintConfig] = None,
                      cache_dir: Optional[PathLike] = None) -> Tuple[Optional[int], pd.DataFrame]:
    """Long non-adaptive runs whose best-LCI traces fix the generation count for one fidelity."""
    opt_config = opt_config or OptimizerConfig()
    criteria = criteria or ConvergenceCriteria(reference_generations=reference_generations)

    def run(seed: int) -> AdaptiveResult:
        return run_static(case, protocol, opt_config, mode, n_dc, reference_generations, int(seed), None,
                          kernel, constraints, cache_dir)

    results = _map(run, list(seeds), jobs)
    g, per_trace = tune_generations([r.traces["best_lci"] for r in results], criteria)
    frame = pd.DataFrame({"seed": [r.seed for r in results], "converged_at": per_trace,
                          "runtime_s": [r.runtime_s for r in results]})
    logger.info(f"Generation study at {n_dc} DC points: g = {g}")
    return g, frame


@dataclass
class AdjustmentStudy:
    counts: pd.DataFrame
    tests: pd.DataFrame


def study_adjustment_counts(case: PatientCase, protocol: ProtocolConfig, n_low: int, n_high: int, seeds: Sequence[int],
                            opt_config: Optional[OptimizerConfig] = None,
                            adaptive_config: Optional[AdaptiveRunConfig] = None, alpha: float = 0.05, jobs: int = 1,
                            kernel: Optional[DoseKernelConfig] = None, constraints: Optional[ConstraintConfig] = None,
                            cache_dir: Optional[PathLike] = None) -> AdjustmentStudy:
    """
    Compare per-aim adjustment counts of the adaptive loop at two low fidelities.

    Each sample gets a Shapiro-Wilk check, each aim a paired Wilcoxon test over
    the seeds, and the aims together a Holm-Bonferroni correction.
    """
    opt_config = opt_config or OptimizerConfig()
    base = adaptive_config or AdaptiveRunConfig()
    configs = {}
    for n in (n_low, n_high):
        configs[n] = replace(base, n_dc_min=n, n_dc_max=max(base.n_dc_max, n), n_dc_reeval=max(base.n_dc_reeval, n))
    tasks = [(n, int(s)) for n in (n_low, n_high) for s in seeds]

    def run(task: Tuple[int, int]) -> List[Dict[str, Any]]:
        n, seed = task
        result = run_adaptive(case, protocol, opt_config, configs[n], seed, kernel, constraints, cache_dir,
                              final_run=False)
        per_aim = {a.aim_id: 0 for a in protocol.added_aims}
        for record in result.records:
            per_aim[record.aim_id] += 1
        return [{"n_dc": n, "seed": seed, "aim_id": aim_id, "adjustments": count} for aim_id, count in per_aim.items()]

    counts = pd.DataFrame([row for rows in _map(run, tasks, jobs) for row in rows],
                          columns=["n_dc", "seed", "aim_id", "adjustments"])

    rows = []
    for aim in protocol.added_aims:
        subset = counts[counts["aim_id"] == aim.aim_id].pivot(index="seed", columns="n_dc", values="adjustments")
        low, high = subset[n_low].to_numpy(float), subset[n_high].to_numpy(float)
        normality = {}
        for tag, sample in (("low", low), ("high", high)):
            try:
                normality[tag] = shapiro_wilk(sample, alpha).p_value
            except ContractError as e:
                logger.warning(f"Shapiro-Wilk skipped for {aim.aim_id} ({tag}) - {e}")
                normality[tag] = float("nan")
        test = wilcoxon_signed_rank(low, high, alpha)
        rows.append({"aim_id": aim.aim_id, "median_low": float(np.median(low)), "median_high": float(np.median(high)),
                     "shapiro_p_low": normality["low"], "shapiro_p_high": normality["high"],
                     "wilcoxon_statistic": test.statistic, "p_value": test.p_value, "n_effective": test.n_effective})
    tests = pd.DataFrame(rows)
    if not tests.empty:
        tests["reject"] = holm_bonferroni(tests["p_value"].tolist(), alpha)
    logger.info(f"Adjustment-count study {n_low} vs {n_high} DC points over {len(seeds)} seeds done")
    return AdjustmentStudy(counts, tests)
