"""
Adaptive aspiration configuration of the added aims.

Low-fidelity optimization rounds alternate with stepwise loosening of the
added aims that the best balanced plan misses. An aim already at its loosest
value is eliminated instead. Once a round needs no adjustment, a fresh
high-fidelity run uses the final aspirations and its front is re-evaluated on
a larger DC-point set.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from components import dependencies
from components.dose_engine import DoseKernelConfig
from components.exceptions import ArchiveEmptyError, ConfigError, ContractError
from components.moea_core import (ElitistArchive, OptimizerConfig, OptimizerState, PlanEvaluator, Solution, archive_from,
                                  build_evaluator, checkpoint_fidelity, create_state, load_checkpoint,
                                  reevaluate_solutions, run_generations)
from components.objective_model import (AimSpec, AimState, ConstraintConfig, ObjectiveMode, ProtocolConfig,
                                        delta, embrace_satisfied, initial_aim_state)
from components.patient_model import PatientCase, derive_seed

# Initialize logger
logger = dependencies.setup_logging()
logger = logging.getLogger('app.adaptive_config')

SNAP_TOLERANCE = 1e-9


@dataclass(frozen=True)
class AdaptiveRunConfig:
    min_steps: int = 4
    n_dc_min: int = 2500
    n_dc_max: int = 20000
    g_min: int = 350
    g_max: int = 490
    n_dc_reeval: int = 50000
    stop_on_embrace: bool = False
    max_embrace_rounds: int = 10

    def __post_init__(self):
        for name in ("min_steps", "n_dc_min", "n_dc_max", "g_min", "g_max", "n_dc_reeval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"AdaptiveRunConfig.{name} must be positive")
        if not self.n_dc_min <= self.n_dc_max <= self.n_dc_reeval:
            raise ConfigError("need n_dc_min <= n_dc_max <= n_dc_reeval")
        if self.max_embrace_rounds < 0:
            raise ConfigError("max_embrace_rounds must be non-negative")


class AdjustOutcome(str, Enum):
    ADJUSTED = "adjusted"
    ELIMINATED = "eliminated"


@dataclass(frozen=True)
class AdjustmentRecord:
    round: int
    aim_id: str
    old_aspiration: float
    new_aspiration: Optional[float]
    p_low: int
    s_star_lci: float
    s_star_lsi: float

    @property
    def eliminated(self) -> bool:
        return self.new_aspiration is None


@dataclass
class AdaptiveResult:
    mode: str
    seed: int
    archive: ElitistArchive
    front: List[Solution]
    fallback: np.ndarray
    aim_state: AimState
    records: List[AdjustmentRecord] = field(default_factory=list)
    rounds: int = 0
    traces: Dict[str, List[float]] = field(default_factory=dict)
    round_traces: Dict[str, List[float]] = field(default_factory=dict)
    runtime_s: float = 0.0
    embrace_reached_low: Optional[bool] = None
    final_state: Optional[OptimizerState] = None
    # s* of the last low-fidelity round that needed no adjustment
    stop_plan: Optional[Solution] = None

    @property
    def adjustment_counts(self) -> Dict[str, int]:
        return {aim_id: entry.steps_taken for aim_id, entry in self.aim_state.entries.items()}

    @property
    def eliminated(self) -> List[str]:
        return [aim_id for aim_id, entry in self.aim_state.entries.items() if entry.eliminated]


def format_audit_line(record: AdjustmentRecord) -> str:
    new = "ELIMINATED" if record.eliminated else repr(record.new_aspiration)
    return (f"round={record.round}\taim={record.aim_id}\told={record.old_aspiration!r}\tnew={new}"
            f"\tp_low={record.p_low}\ts_star_lci={record.s_star_lci!r}\ts_star_lsi={record.s_star_lsi!r}")


def parse_audit_line(line: str) -> AdjustmentRecord:
    try:
        fields = dict(part.split("=", 1) for part in line.strip().split("\t"))
        new = None if fields["new"] == "ELIMINATED" else float(fields["new"])
        return AdjustmentRecord(int(fields["round"]), fields["aim"], float(fields["old"]), new,
                                int(fields["p_low"]), float(fields["s_star_lci"]), float(fields["s_star_lsi"]))
    except (KeyError, ValueError) as e:
        raise ContractError(f"malformed audit line '{line.strip()}' - {e}") from e


def replay_audit(records: Sequence[AdjustmentRecord], protocol: ProtocolConfig) -> AimState:
    """Rebuild the aspiration trajectory from audit records, checking each step's starting point."""
    state = initial_aim_state(protocol)
    for record in records:
        entry = state.entries.get(record.aim_id)
        if entry is None or entry.eliminated:
            raise ContractError(f"audit record for inactive aim {record.aim_id}")
        if entry.current_aspiration != record.old_aspiration:
            raise ContractError(f"audit trail broken at round {record.round} for {record.aim_id}")
        if record.eliminated:
            entry.eliminated = True
        else:
            entry.current_aspiration = record.new_aspiration
            entry.steps_taken += 1
    return state


def select_best_balanced(archive: Union[ElitistArchive, Sequence[Solution]]) -> Solution:
    """Member maximizing min(LCI, LSI); ties by larger LCI + LSI, then earliest member."""
    members = list(archive.members if isinstance(archive, ElitistArchive) else archive)
    if not members:
        raise ArchiveEmptyError("cannot pick a balanced plan from an empty archive")
    best = members[0]
    for candidate in members[1:]:
        if (candidate.objectives.worst, candidate.lci + candidate.lsi) > (best.objectives.worst, best.lci + best.lsi):
            best = candidate
    return best


def lowest_priority(protocol: ProtocolConfig, state: AimState) -> Optional[int]:
    """Largest priority number among non-eliminated added aims."""
    priorities = [a.priority for a in protocol.added_aims if not state.is_eliminated(a)]
    return max(priorities) if priorities else None


def adjust_aim(spec: AimSpec, state: AimState, p_low: int, min_steps: int = 4) -> AdjustOutcome:
    """
    Loosen one adjustable aim by one step, or eliminate it when already at its loosest value.

    The step is (loose - strict) / (min_steps * (p_low - p + 1)), clamped at the loose value.
    """
    if not spec.adjustable:
        raise ContractError(f"{spec.aim_id} is a fixed aim")
    entry = state.entries.get(spec.aim_id)
    if entry is None or entry.eliminated:
        raise ContractError(f"{spec.aim_id} is not an active adjustable aim")
    if p_low < spec.priority or min_steps < 1:
        raise ContractError(f"invalid step parameters p_low={p_low}, min_steps={min_steps} for priority {spec.priority}")

    loose = spec.aspiration_loose
    if entry.current_aspiration == loose:
        entry.eliminated = True
        return AdjustOutcome.ELIMINATED

    step = (loose - spec.aspiration_strict) / (min_steps * (p_low - spec.priority + 1))
    new = entry.current_aspiration + step
    overshoot = (new - loose) * math.copysign(1.0, step) if step else 0.0
    if overshoot >= -SNAP_TOLERANCE * max(1.0, abs(loose)):
        new = loose
    entry.current_aspiration = new
    entry.steps_taken += 1
    return AdjustOutcome.ADJUSTED


def recompute_after_adjustment(archive: ElitistArchive, population: Sequence[Solution], evaluator: PlanEvaluator) -> int:
    """
    Re-score archive and population under the current aspirations.

    DVI values stay cached; only margins and weights move. Returns the number of
    archive members dropped as dominated.
    """
    for member in archive.members:
        evaluator.refresh_objectives(member)
    for solution in population:
        evaluator.refresh_objectives(solution)
    removed = archive.remove_dominated()
    for solution in population:
        archive.offer(solution)
    return removed


def adjust_round(protocol: ProtocolConfig, state: AimState, s_star: Solution, round_no: int, min_steps: int) -> List[AdjustmentRecord]:
    """Apply one round of adjustments for every active added aim that s* misses."""
    p_low = lowest_priority(protocol, state)
    records = []
    if p_low is None:
        return records
    for aim in protocol.added_aims:
        if state.is_eliminated(aim):
            continue
        if delta(aim, state, s_star.dvi_values[aim.dvi.label]) >= 0:
            continue
        old = state.aspiration(aim)
        outcome = adjust_aim(aim, state, p_low, min_steps)
        new = None if outcome == AdjustOutcome.ELIMINATED else state.aspiration(aim)
        records.append(AdjustmentRecord(round_no, aim.aim_id, old, new, p_low, s_star.lci, s_star.lsi))
        if new is None:
            logger.info(f"Round {round_no}: eliminated {aim.aim_id} (loosest aspiration {old:g} not reached)")
        else:
            logger.info(f"Round {round_no}: {aim.aim_id} aspiration {old:g} -> {new:g} (p_low={p_low})")
    return records


def round_bound(protocol: ProtocolConfig, config: AdaptiveRunConfig) -> int:
    """Upper bound on low-fidelity rounds: every adjusting round advances at least one aim."""
    added = protocol.added_aims
    if not added:
        return 1
    p_low_max = max(a.priority for a in added)
    return sum(config.min_steps * (p_low_max - a.priority + 1) + 1 for a in added) + 1


def _finish(mode: str, seed: int, case: PatientCase, protocol: ProtocolConfig, opt_config: OptimizerConfig,
            aim_state: AimState, objective_mode: ObjectiveMode, n_dc: int, generations: int, n_dc_reeval: Optional[int],
            kernel: Optional[DoseKernelConfig], constraints: Optional[ConstraintConfig], cache_dir) -> AdaptiveResult:
    evaluator = build_evaluator(case, protocol, n_dc, derive_seed(seed, f"dc-{n_dc}"), kernel, aim_state,
                                objective_mode, constraints, opt_config.t_max, cache_dir)
    state = create_state(opt_config, evaluator, derive_seed(seed, "optimizer-final"))
    run_generations(state, generations)
    return _conclude(mode, seed, case, protocol, state, n_dc_reeval, kernel, constraints, cache_dir)


def _conclude(mode: str, seed: int, case: PatientCase, protocol: ProtocolConfig, state: OptimizerState,
              n_dc_reeval: Optional[int], kernel: Optional[DoseKernelConfig], constraints: Optional[ConstraintConfig],
              cache_dir) -> AdaptiveResult:
    evaluator = state.evaluator
    members = list(state.archive.members)
    if n_dc_reeval is not None:
        reeval = build_evaluator(case, protocol, n_dc_reeval, derive_seed(seed, f"dc-reeval-{n_dc_reeval}"), kernel,
                                 evaluator.aim_state, evaluator.mode, constraints, evaluator.t_max, cache_dir)
        front, fallback = reevaluate_solutions(members, reeval)
        archive = archive_from(front, state.config.archive_capacity)
    else:
        front, fallback, archive = members, np.zeros((len(members), 2)), state.archive
    return AdaptiveResult(mode, seed, archive, front, fallback, evaluator.aim_state, traces=state.traces,
                          final_state=state)


def resume_run(case: PatientCase, protocol: ProtocolConfig, checkpoint: Union[str, Path], generations: int, seed: int,
               n_dc_reeval: Optional[int] = None, kernel: Optional[DoseKernelConfig] = None,
               constraints: Optional[ConstraintConfig] = None,
               cache_dir: Optional[Union[str, Path]] = None) -> AdaptiveResult:
    """
    Continue a checkpointed run for more generations at the fidelity it was written at.

    The aspirations stored in the checkpoint are used as they are; no further
    adjustment takes place.

    Args:
        case (PatientCase): The case the checkpoint was written for.
        protocol (ProtocolConfig): Aims.
        checkpoint (Union[str, Path]): File written by `save_checkpoint`.
        generations (int): Additional generations.
        seed (int): Seed for the re-evaluation DC points.
        n_dc_reeval (Optional[int]): Re-evaluation DC points; no re-evaluation when None.

    Returns:
        AdaptiveResult: Result in mode "resumed" without adjustment records.

    Raises:
        ConfigError: If the checkpoint is unreadable, lacks its fidelity or belongs to another case.
    """
    started = time.perf_counter()
    fidelity = checkpoint_fidelity(checkpoint)
    evaluator = build_evaluator(case, protocol, fidelity["n_dc"], fidelity["dc_seed"], kernel,
                                initial_aim_state(protocol), fidelity["mode"], constraints, fidelity["t_max"], cache_dir)
    state = load_checkpoint(checkpoint, evaluator)
    start_generation = state.generation
    run_generations(state, generations)
    result = _conclude("resumed", seed, case, protocol, state, n_dc_reeval, kernel, constraints, cache_dir)
    result.runtime_s = time.perf_counter() - started
    logger.info(f"Resumed run went from generation {start_generation} to {state.generation}: "
                f"{len(result.archive)} plans in {result.runtime_s:.1f} s")
    return result



def run_static(case: PatientCase, protocol: ProtocolConfig, opt_config: OptimizerConfig, mode: ObjectiveMode,
               n_dc: int, generations: int, seed: int, n_dc_reeval: Optional[int] = None,
               kernel: Optional[DoseKernelConfig] = None, constraints: Optional[ConstraintConfig] = None,
               cache_dir: Optional[Union[str, Path]] = None) -> AdaptiveResult:
    """
    Non-adaptive run at one fidelity with strict aspirations.

    Args:
        case (PatientCase): The case.
        protocol (ProtocolConfig): Aims.
        opt_config (OptimizerConfig): Optimizer settings.
        mode (ObjectiveMode): EMBRACE_ONLY for base-protocol optimization, FULL for all aims.
        n_dc (int): DC points per ROI during optimization.
        generations (int): Generation count.
        seed (int): Run seed.
        n_dc_reeval (Optional[int]): Re-evaluation DC points; no re-evaluation when None.

    Returns:
        AdaptiveResult: Result without adjustment records.
    """
    started = time.perf_counter()
    result = _finish(mode.value, seed, case, protocol, opt_config, initial_aim_state(protocol), mode, n_dc,
                     generations, n_dc_reeval, kernel, constraints, cache_dir)
    result.runtime_s = time.perf_counter() - started
    logger.info(f"Static run ({mode.value}, seed {seed}) finished: {len(result.archive)} plans in {result.runtime_s:.1f} s")
    return result


def run_adaptive(case: PatientCase, protocol: ProtocolConfig, opt_config: OptimizerConfig,
                 adaptive_config: AdaptiveRunConfig, seed: int, kernel: Optional[DoseKernelConfig] = None,
                 constraints: Optional[ConstraintConfig] = None,
                 cache_dir: Optional[Union[str, Path]] = None, final_run: bool = True) -> AdaptiveResult:
    """
    Adaptive optimization: low-fidelity rounds with aspiration adjustment, then a fresh high-fidelity run.

    Args:
        case (PatientCase): The case.
        protocol (ProtocolConfig): Base and added aims.
        opt_config (OptimizerConfig): Optimizer settings for every run.
        adaptive_config (AdaptiveRunConfig): Fidelities, generation counts and step settings.
        seed (int): Run seed; DC-point and optimizer seeds are derived from it.
        final_run (bool): When False, stop after the low-fidelity rounds and return their archive.

    Returns:
        AdaptiveResult: Re-evaluated final archive, final aim state and the audit records.

    Raises:
        ContractError: If the loop runs past its round bound.
    """
    started = time.perf_counter()
    cfg = adaptive_config
    aim_state = initial_aim_state(protocol)
    low = build_evaluator(case, protocol, cfg.n_dc_min, derive_seed(seed, f"dc-{cfg.n_dc_min}"), kernel, aim_state,
                          ObjectiveMode.FULL, constraints, opt_config.t_max, cache_dir)
    state = None
    records: List[AdjustmentRecord] = []
    bound = round_bound(protocol, cfg)
    rounds = extra_rounds = 0
    snapshot: Optional[AimState] = None
    stop_plan = snapshot_plan = None
    embrace_reached: Optional[bool] = None

    while True:
        rounds += 1
        if rounds > bound + cfg.max_embrace_rounds:
            raise ContractError(f"adaptive loop exceeded its bound of {bound} rounds")
        if state is None:
            state = create_state(opt_config, low, derive_seed(seed, "optimizer-low"))
        run_generations(state, cfg.g_min)
        s_star = select_best_balanced(state.archive)
        made = adjust_round(protocol, aim_state, s_star, rounds, cfg.min_steps)
        records.extend(made)
        if not made:
            stop_plan = s_star.copy(with_dose=False)
        if made:
            recompute_after_adjustment(state.archive, state.population, low)
        logger.info(f"Round {rounds} finished: {len(made)} adjustments, s* = ({s_star.lci:.4f}, {s_star.lsi:.4f}), "
                    f"archive {len(state.archive)}")

        if not cfg.stop_on_embrace:
            if not made:
                break
            continue
        if snapshot is None and not made:
            snapshot = aim_state.copy()
            snapshot_plan = stop_plan
        if snapshot is None:
            continue
        embrace_reached = any(embrace_satisfied(m.dvi_values, protocol) for m in state.archive.members)
        if embrace_reached:
            break
        if extra_rounds >= cfg.max_embrace_rounds:
            logger.info("Base-protocol aims never met in continued rounds; using the aspirations of the first stop")
            aim_state.entries.clear()
            aim_state.entries.update(snapshot.copy().entries)
            stop_plan = snapshot_plan
            break
        extra_rounds += 1

    if final_run:
        result = _finish(ObjectiveMode.FULL.value, seed, case, protocol, opt_config, aim_state.copy(),
                         ObjectiveMode.FULL, cfg.n_dc_max, cfg.g_max, cfg.n_dc_reeval, kernel, constraints, cache_dir)
    else:
        members = list(state.archive.members)
        result = AdaptiveResult(ObjectiveMode.FULL.value, seed, state.archive, members,
                                np.zeros((len(members), 2)), aim_state.copy(), traces=state.traces, final_state=state)
    result.records = records
    result.rounds = rounds
    result.round_traces = state.traces
    result.embrace_reached_low = embrace_reached
    result.stop_plan = stop_plan
    result.runtime_s = time.perf_counter() - started
    logger.info(f"Adaptive run (seed {seed}) finished after {rounds} rounds: {len(records)} adjustments, "
                f"eliminated {result.eliminated}, {len(result.archive)} plans in {result.runtime_s:.1f} s")
    return result
