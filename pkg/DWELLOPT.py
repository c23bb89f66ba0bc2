import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from typing import List, Optional, Sequence

import pandas as pd

from components import dependencies, eval_harness
from components.adaptive_config import format_audit_line, resume_run, run_adaptive, run_static
from components.exceptions import (ArchiveEmptyError, CaseParseError, CaseValidationError, ConfigError, ContractError,
                                   InfeasibleInitializationError, PhantomConstructionError)
from components.moea_core import save_checkpoint
from components.objective_model import ObjectiveMode, default_protocol, protocol_to_dict, validate_protocol
from components.patient_model import case_hash, generate_phantom
from utils import case_utils, config_utils, export_utils

# Initialize logger
logger = dependencies.setup_logging()
logger = logging.getLogger('app.DWELLOPT')

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_IO = 4

MODES = ("embrace", "full", "static")
STUDY_KINDS = ("dc-points", "generations", "adjustments")


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    """
    Parse command-line arguments for the application.

    Returns:
        argparse.Namespace: Parsed arguments.
    """
    parser = argparse.ArgumentParser(description="Bi-objective dwell-time optimization with adaptive aspiration configuration.")
    parser.add_argument("--log-dir", default=None, metavar="", help="Directory for timestamped log files")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_options(p: argparse.ArgumentParser) -> None:
        p.add_argument("--case", required=True, metavar="", help="Path to the patient case JSON file")
        p.add_argument("--protocol", default=None, metavar="", help="Path to the protocol JSON file (bundled default when omitted)")
        p.add_argument("--settings", default=None, metavar="", help="Path to the optimizer settings JSON file")
        p.add_argument("--seed", type=int, required=True, metavar="", help="Run seed")
        p.add_argument("--out", default="output", metavar="", help="Base directory for fronts, reports and checkpoints")
        p.add_argument("--ndc-min", type=int, default=None, metavar="", help="DC points per ROI in low-fidelity rounds")
        p.add_argument("--ndc-max", type=int, default=None, metavar="", help="DC points per ROI in the final run")
        p.add_argument("--ndc-reeval", type=int, default=None, metavar="", help="DC points per ROI for re-evaluation")
        p.add_argument("--gmin", type=int, default=None, metavar="", help="Generations per low-fidelity round")
        p.add_argument("--gmax", type=int, default=None, metavar="", help="Generations of the final run")
        p.add_argument("--min-steps", type=int, default=None, metavar="", help="Minimum adjustment steps per added aim")
        p.add_argument("--pop", type=int, default=None, metavar="", help="Population size")
        p.add_argument("--dc-cache", default=None, metavar="", help="Directory for cached DC points")

    p_phantom = sub.add_parser("phantom", help="Generate a synthetic phantom case")
    p_phantom.add_argument("--preset", required=True, metavar="", help="Preset name from the phantom presets file")
    p_phantom.add_argument("--presets", default=None, metavar="", help="Path to the phantom presets JSON file")
    p_phantom.add_argument("--seed", type=int, required=True, metavar="", help="Needle jitter seed")
    p_phantom.add_argument("-o", "--output", required=True, metavar="", help="Output case JSON file")

    p_optimize = sub.add_parser("optimize", help="Run one optimization")
    add_run_options(p_optimize)
    p_optimize.add_argument("--mode", choices=MODES, default="full", help="embrace: base aims only; full: adaptive; static: all aims, non-adaptive")

    p_compare = sub.add_parser("compare", help="Compare base-aim-only and adaptive optimization over several seeds")
    add_run_options(p_compare)
    p_compare.add_argument("--runs", type=int, default=1, metavar="", help="Runs per mode; seeds are seed..seed+runs-1")
    p_compare.add_argument("--jobs", type=int, default=1, metavar="", help="Concurrent runs")

    p_resume = sub.add_parser("resume", help="Continue a checkpointed run for more generations")
    add_run_options(p_resume)
    p_resume.add_argument("--checkpoint", required=True, metavar="", help="Checkpoint JSON file written by optimize or resume")
    p_resume.add_argument("--generations", type=int, default=None, metavar="", help="Additional generations (default from optimizer settings)")

    p_dvh = sub.add_parser("dvh", help="Cumulative DVH tables of one plan from an exported front")
    p_dvh.add_argument("--case", required=True, metavar="", help="Path to the patient case JSON file")
    p_dvh.add_argument("--front", required=True, metavar="", help="Front CSV or JSON file written by optimize")
    p_dvh.add_argument("--plan", type=int, default=None, metavar="", help="Row of the plan (best balanced when omitted)")
    p_dvh.add_argument("--ndc", type=int, default=20000, metavar="", help="DC points per ROI")
    p_dvh.add_argument("--seed", type=int, default=0, metavar="", help="DC-point seed")
    p_dvh.add_argument("--bins", type=int, default=200, metavar="", help="Dose levels from 0 to the maximum")
    p_dvh.add_argument("--settings", default=None, metavar="", help="Path to the optimizer settings JSON file (kernel)")
    p_dvh.add_argument("-o", "--output", required=True, metavar="", help="Output CSV file")

    p_protocol = sub.add_parser("protocol", help="Print the protocol as JSON")
    p_protocol.add_argument("--protocol", default=None, metavar="", help="Protocol JSON file to normalize (bundled default when omitted)")
    p_protocol.add_argument("-o", "--output", default=None, metavar="", help="Write to this file instead of stdout")

    p_study = sub.add_parser("study", help="DC-point, generation-count or adjustment-count studies")
    add_run_options(p_study)
    p_study.add_argument("--kind", choices=STUDY_KINDS, required=True, help="Study to run")
    p_study.add_argument("--runs", type=int, default=5, metavar="", help="Seeds per configuration")
    p_study.add_argument("--jobs", type=int, default=1, metavar="", help="Concurrent runs")
    p_study.add_argument("--ndc-values", type=int, nargs="+", default=None, metavar="", help="DC-point counts to study")
    p_study.add_argument("--generations", type=int, default=None, metavar="", help="Generations per run (dc-points, default from optimizer settings) or reference generations (generations)")
    p_study.add_argument("--tolerance", type=float, default=0.01, metavar="", help="Fallback tolerance for choosing n_dc_max")
    return parser.parse_args(argv)


def load_settings(inputs: argparse.Namespace) -> config_utils.OptimizerSettings:
    """Bundled or file settings with command-line overrides applied."""
    settings = config_utils.load_optimizer_settings(inputs.settings)
    if settings is None:
        raise ConfigError("failed to load optimizer settings")
    adaptive_overrides = {
        "n_dc_min": inputs.ndc_min, "n_dc_max": inputs.ndc_max, "n_dc_reeval": inputs.ndc_reeval,
        "g_min": inputs.gmin, "g_max": inputs.gmax, "min_steps": inputs.min_steps,
    }
    adaptive_overrides = {k: v for k, v in adaptive_overrides.items() if v is not None}
    optimizer = settings.optimizer
    if inputs.pop is not None:
        optimizer = replace(optimizer, population_size=inputs.pop)
    return replace(settings, optimizer=optimizer, adaptive=replace(settings.adaptive, **adaptive_overrides))


def load_inputs(inputs: argparse.Namespace):
    case = case_utils.load_case(inputs.case)
    protocol = config_utils.load_protocol(inputs.protocol)
    if protocol is None:
        raise ConfigError("failed to load protocol")
    validate_protocol(protocol, case)
    return case, protocol, load_settings(inputs)


def cmd_phantom(inputs: argparse.Namespace) -> int:
    presets = config_utils.load_phantom_presets(inputs.presets)
    if presets is None:
        raise ConfigError("failed to load phantom presets")
    if inputs.preset not in presets:
        raise ConfigError(f"unknown preset '{inputs.preset}', expected one of {sorted(presets)}")
    case = generate_phantom(presets[inputs.preset], inputs.seed)
    case_utils.save_case(case, inputs.output)
    summary = pd.DataFrame({"roi": [r.name for r in case.rois], "volume_cm3": [round(r.volume_cm3, 3) for r in case.rois]})
    print(summary.to_string(index=False))
    print(f"{case.n_dwells} dwell positions in {len(case.channels)} channels ({len(case.needle_channel_ids)} needles)")
    logger.info(f"Phantom written to {inputs.output}")
    return EXIT_OK


def cmd_optimize(inputs: argparse.Namespace) -> int:
    case, protocol, settings = load_inputs(inputs)
    out = dependencies.setup_environment(inputs.out, inputs.log_dir)
    cfg = settings.adaptive
    tag = f"{inputs.mode}_seed{inputs.seed}"

    if inputs.mode == "full":
        result = run_adaptive(case, protocol, settings.optimizer, cfg, inputs.seed, settings.kernel,
                              settings.constraints, inputs.dc_cache)
    else:
        mode = ObjectiveMode.EMBRACE_ONLY if inputs.mode == "embrace" else ObjectiveMode.FULL
        result = run_static(case, protocol, settings.optimizer, mode, cfg.n_dc_max, cfg.g_max, inputs.seed,
                            cfg.n_dc_reeval, settings.kernel, settings.constraints, inputs.dc_cache)

    metadata = {
        "mode": inputs.mode, "seed": inputs.seed, "case": case.name, "case_hash": case_hash(case),
        "optimizer": asdict(settings.optimizer), "adaptive": asdict(cfg),
        "constraints": asdict(settings.constraints), "kernel": asdict(settings.kernel),
        "aim_state": result.aim_state.to_dict(),
    }
    eval_harness.export_front(result.archive, out / "fronts" / f"front_{tag}.csv", protocol,
                              [d.id for d in case.dwell_positions], metadata)
    report = eval_harness.build_run_report(result, protocol)
    eval_harness.write_run_report(report, out / "reports" / f"report_{tag}.json")
    if inputs.mode == "full":
        export_utils.atomic_write_lines(out / "reports" / f"audit_seed{inputs.seed}.log",
                                        (format_audit_line(r) for r in result.records))
        eval_harness.export_plot_data(result.round_traces, None, out / "plot_data", f"rounds_{tag}")
    eval_harness.export_plot_data(result.traces, result.archive, out / "plot_data", tag)
    if result.final_state is not None:
        save_checkpoint(result.final_state, out / "checkpoints" / f"checkpoint_{tag}.json")

    logger.info(f"{report.n_plans} plans, {report.n_plans_satisfying_embrace} satisfy every base aim; "
                f"eliminated {report.eliminated}")
    return EXIT_OK


def _seeds(inputs: argparse.Namespace) -> List[int]:
    if inputs.runs < 1:
        raise ConfigError("--runs must be at least 1")
    return [inputs.seed + i for i in range(inputs.runs)]


def cmd_compare(inputs: argparse.Namespace) -> int:
    case, protocol, settings = load_inputs(inputs)
    out = dependencies.setup_environment(inputs.out, inputs.log_dir)
    seeds = _seeds(inputs)
    comparison = eval_harness.compare_approaches(case, protocol, len(seeds), seeds, settings.optimizer,
                                                 settings.adaptive, inputs.jobs, settings.kernel,
                                                 settings.constraints, inputs.dc_cache)
    target = out / "reports" / f"compare_seed{inputs.seed}_runs{inputs.runs}.csv"
    export_utils.atomic_write_csv(target, comparison.table, na_rep=eval_harness.NOT_AVAILABLE)
    for mode, reports in comparison.reports.items():
        for report in reports:
            eval_harness.write_run_report(report, out / "reports" / f"report_{mode}_seed{report.seed}.json")
    print(comparison.table.to_string(index=False))
    return EXIT_OK


def cmd_resume(inputs: argparse.Namespace) -> int:
    case, protocol, settings = load_inputs(inputs)
    out = dependencies.setup_environment(inputs.out, inputs.log_dir)
    tag = f"resumed_seed{inputs.seed}"
    generations = settings.optimizer.generations if inputs.generations is None else inputs.generations
    result = resume_run(case, protocol, inputs.checkpoint, generations, inputs.seed, settings.adaptive.n_dc_reeval,
                        settings.kernel, settings.constraints, inputs.dc_cache)
    metadata = {"mode": "resumed", "seed": inputs.seed, "case": case.name, "case_hash": case_hash(case),
                "checkpoint": str(inputs.checkpoint), "generations": generations,
                "aim_state": result.aim_state.to_dict()}
    eval_harness.export_front(result.archive, out / "fronts" / f"front_{tag}.csv", protocol,
                              [d.id for d in case.dwell_positions], metadata)
    report = eval_harness.build_run_report(result, protocol)
    eval_harness.write_run_report(report, out / "reports" / f"report_{tag}.json")
    eval_harness.export_plot_data(result.traces, result.archive, out / "plot_data", tag)
    save_checkpoint(result.final_state, out / "checkpoints" / f"checkpoint_{tag}.json")
    logger.info(f"{report.n_plans} plans after resuming, {report.n_plans_satisfying_embrace} satisfy every base aim")
    return EXIT_OK


def cmd_dvh(inputs: argparse.Namespace) -> int:
    case = case_utils.load_case(inputs.case)
    settings = config_utils.load_optimizer_settings(inputs.settings)
    if settings is None:
        raise ConfigError("failed to load optimizer settings")
    row, times = eval_harness.read_front_plan(inputs.front, inputs.plan)
    table = eval_harness.plan_dvh(case, times, inputs.ndc, inputs.seed, settings.kernel, inputs.bins)
    export_utils.atomic_write_csv(inputs.output, table)
    logger.info(f"DVH of plan {row} from {inputs.front} written to {inputs.output}")
    return EXIT_OK


def cmd_protocol(inputs: argparse.Namespace) -> int:
    protocol = default_protocol() if inputs.protocol is None else config_utils.load_protocol(inputs.protocol)
    if protocol is None:
        raise ConfigError("failed to load protocol")
    data = protocol_to_dict(protocol)
    if inputs.output:
        export_utils.atomic_write_json(inputs.output, data)
    else:
        print(json.dumps(data, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_study(inputs: argparse.Namespace) -> int:
    case, protocol, settings = load_inputs(inputs)
    out = dependencies.setup_environment(inputs.out, inputs.log_dir)
    seeds = _seeds(inputs)
    cfg = settings.adaptive
    common = dict(jobs=inputs.jobs, kernel=settings.kernel, constraints=settings.constraints, cache_dir=inputs.dc_cache)
    reports = out / "reports"

    if inputs.kind == "dc-points":
        n_values = inputs.ndc_values or [2500, 5000, 10000, 20000]
        frame = eval_harness.sweep_dc_points(case, protocol, n_values, seeds, settings.optimizer,
                                             inputs.generations, cfg.n_dc_reeval, **common)
        export_utils.atomic_write_csv(reports / f"study_dc_points_seed{inputs.seed}.csv", frame)
        means = frame.groupby("n_dc")["mean_abs_lci_fallback"].mean().to_dict()
        chosen = eval_harness.choose_n_dc_max(means, inputs.tolerance)
        print(frame.to_string(index=False))
        print(f"n_dc_max = {chosen}")
    elif inputs.kind == "generations":
        n_dc = (inputs.ndc_values or [cfg.n_dc_min])[0]
        reference = inputs.generations or 2 * cfg.g_max
        g, frame = eval_harness.study_generations(case, protocol, seeds, n_dc, reference, settings.optimizer, **common)
        export_utils.atomic_write_csv(reports / f"study_generations_{n_dc}_seed{inputs.seed}.csv", frame, na_rep="none")
        print(frame.to_string(index=False))
        print(f"generations = {g if g is not None else 'not converged'}")
    else:
        n_values = inputs.ndc_values or [cfg.n_dc_min, 2 * cfg.n_dc_min]
        if len(n_values) != 2:
            raise ConfigError("the adjustment study compares exactly two --ndc-values")
        study = eval_harness.study_adjustment_counts(case, protocol, n_values[0], n_values[1], seeds,
                                                     settings.optimizer, cfg, **common)
        export_utils.atomic_write_csv(reports / f"study_adjustments_counts_seed{inputs.seed}.csv", study.counts)
        export_utils.atomic_write_csv(reports / f"study_adjustments_tests_seed{inputs.seed}.csv", study.tests)
        print(study.tests.to_string(index=False))
    return EXIT_OK


COMMANDS = {
    "phantom": cmd_phantom,
    "optimize": cmd_optimize,
    "compare": cmd_compare,
    "resume": cmd_resume,
    "dvh": cmd_dvh,
    "protocol": cmd_protocol,
    "study": cmd_study,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Dispatch one subcommand and map failures to exit codes.

    Returns:
        int: 0 success, 2 usage or configuration, 3 infeasible initialization, 4 I/O.
    """
    try:
        inputs = parse_args(argv)
    except SystemExit as exit_request:
        return EXIT_OK if exit_request.code in (0, None) else EXIT_USAGE

    if inputs.log_dir:
        dependencies.setup_logging(inputs.log_dir)

    try:
        return COMMANDS[inputs.command](inputs)
    except FileNotFoundError as fnf_error:
        logger.error(f"Input not found - {fnf_error}")
        return EXIT_USAGE
    except (ConfigError, CaseParseError, CaseValidationError, PhantomConstructionError, ContractError,
            ArchiveEmptyError) as e:
        logger.error(f"Invalid input - {e}")
        return EXIT_USAGE
    except InfeasibleInitializationError as e:
        logger.error(f"Optimization infeasible - {e}")
        return EXIT_INFEASIBLE
    except OSError as e:
        logger.error(f"I/O failure - {e}")
        return EXIT_IO
    except Exception as e:
        logger.error(f"Unexpected error - {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
