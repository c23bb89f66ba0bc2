"""
Clinical protocol, aim margins and the coverage/sparing objectives.

Both objectives are worst-case weighted sums of aim margins: within a group
the aims are ranked from least to most violated and weighted by increasing
powers of ten, so the worst aim dominates the sum. A dwell-time modulation
penalty is subtracted from both; the needle contribution cap is a hard
feasibility test.
"""

import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from components import dependencies
from components.dvi import Direction, DviKind, DviSpec, VolumeUnit
from components.exceptions import ConfigError, ContractError
from components.patient_model import ChannelKind, PatientCase

# Initialize logger
logger = dependencies.setup_logging()
logger = logging.getLogger('app.objective_model')

WEIGHT_BASE = 10.0
ADDED_PRIORITIES = (2, 3, 4)


class AimGroup(str, Enum):
    COVERAGE = "coverage"
    SPARING = "sparing"


class AimProtocol(str, Enum):
    EMBRACE = "embrace"
    ADDED = "added"


class ObjectiveMode(str, Enum):
    EMBRACE_ONLY = "embrace"
    FULL = "full"


@dataclass(frozen=True)
class AimSpec:
    dvi: DviSpec
    group: AimGroup
    protocol: AimProtocol
    priority: int
    aspiration_strict: float
    aspiration_loose: float
    adjustable: bool

    def __post_init__(self):
        if self.protocol == AimProtocol.EMBRACE:
            if self.priority != 1 or self.adjustable or self.aspiration_loose != self.aspiration_strict:
                raise ConfigError(f"{self.aim_id}: base-protocol aims have priority 1, a single aspiration and are fixed")
        else:
            if self.priority not in ADDED_PRIORITIES or not self.adjustable:
                raise ConfigError(f"{self.aim_id}: added aims are adjustable with priority in {ADDED_PRIORITIES}")
        if self.dvi.direction == Direction.MAXIMIZE and self.aspiration_loose > self.aspiration_strict:
            raise ConfigError(f"{self.aim_id}: a maximized aim cannot loosen upwards")
        if self.dvi.direction == Direction.MINIMIZE and self.aspiration_loose < self.aspiration_strict:
            raise ConfigError(f"{self.aim_id}: a minimized aim cannot loosen downwards")

    @property
    def aim_id(self) -> str:
        return f"{self.group.value}.{self.dvi.label}"

    def contains(self, aspiration: float) -> bool:
        lo, hi = sorted((self.aspiration_strict, self.aspiration_loose))
        return lo <= aspiration <= hi


@dataclass(frozen=True)
class ProtocolConfig:
    aims: Tuple[AimSpec, ...]
    prescribed_dose_gy: float = 7.0

    def __post_init__(self):
        ids = [a.aim_id for a in self.aims]
        duplicates = sorted({i for i in ids if ids.count(i) > 1})
        if duplicates:
            raise ConfigError(f"duplicate aims in protocol: {duplicates}")
        if not self.prescribed_dose_gy > 0:
            raise ConfigError("prescribed_dose_gy must be positive")

    def aim(self, aim_id: str) -> AimSpec:
        for aim in self.aims:
            if aim.aim_id == aim_id:
                return aim
        raise KeyError(f"unknown aim '{aim_id}'")

    @property
    def added_aims(self) -> Tuple[AimSpec, ...]:
        return tuple(a for a in self.aims if a.protocol == AimProtocol.ADDED)

    @property
    def embrace_aims(self) -> Tuple[AimSpec, ...]:
        return tuple(a for a in self.aims if a.protocol == AimProtocol.EMBRACE)

    @property
    def dvi_specs(self) -> Tuple[DviSpec, ...]:
        """Distinct DVIs in first-use order."""
        seen: Dict[str, DviSpec] = {}
        for aim in self.aims:
            seen.setdefault(aim.dvi.label, aim.dvi)
        return tuple(seen.values())

    @property
    def roi_names(self) -> Tuple[str, ...]:
        return tuple(dict.fromkeys(s.target for s in self.dvi_specs if s.kind != DviKind.D_POINT))

    @property
    def point_names(self) -> Tuple[str, ...]:
        return tuple(dict.fromkeys(s.target for s in self.dvi_specs if s.kind == DviKind.D_POINT))


@dataclass
class AdjustableAimState:
    current_aspiration: float
    eliminated: bool = False
    steps_taken: int = 0


@dataclass
class AimState:
    """Live aspiration state of the adjustable aims, keyed by aim id."""

    entries: Dict[str, AdjustableAimState] = field(default_factory=dict)

    def copy(self) -> "AimState":
        return AimState({k: AdjustableAimState(**asdict(v)) for k, v in self.entries.items()})

    def aspiration(self, aim: AimSpec) -> float:
        if aim.adjustable and aim.aim_id in self.entries:
            return self.entries[aim.aim_id].current_aspiration
        return aim.aspiration_strict

    def is_eliminated(self, aim: AimSpec) -> bool:
        entry = self.entries.get(aim.aim_id)
        return bool(entry and entry.eliminated)

    def to_dict(self) -> Dict[str, Any]:
        return {k: asdict(v) for k, v in self.entries.items()}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "AimState":
        return cls({k: AdjustableAimState(float(v["current_aspiration"]), bool(v["eliminated"]), int(v["steps_taken"]))
                    for k, v in data.items()})


@dataclass(frozen=True)
class ObjectivePair:
    lci: float
    lsi: float
    constraint: float = 0.0

    @property
    def worst(self) -> float:
        return min(self.lci, self.lsi)


@dataclass(frozen=True)
class ConstraintConfig:
    dtmr_alpha: float = 0.01
    dtmr_numerator: float = 2.0
    dtmr_offset: float = 5.0
    cr_single: float = 0.20
    cr_total: float = 0.30
    ratio_floor: float = 0.01

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ConfigError(f"ConstraintConfig.{name} must be positive, got {value}")
        if self.cr_single > self.cr_total:
            raise ConfigError("cr_single cannot exceed cr_total")


def _aim(kind: DviKind, target: str, param: Optional[float], direction: Direction, group: AimGroup,
         strict: float, loose: Optional[float] = None, priority: int = 1, cm3: bool = False) -> AimSpec:
    dvi = DviSpec(kind, target, param, direction, VolumeUnit.CM3 if cm3 else VolumeUnit.FRACTION)
    added = loose is not None
    return AimSpec(dvi, group, AimProtocol.ADDED if added else AimProtocol.EMBRACE, priority,
                   strict, loose if added else strict, added)


def default_protocol(prescribed_dose_gy: float = 7.0) -> ProtocolConfig:
    """Base-protocol aims followed by the added aims, in objective term order."""
    up, down = Direction.MAXIMIZE, Direction.MINIMIZE
    cov, spa = AimGroup.COVERAGE, AimGroup.SPARING
    aims = (
        _aim(DviKind.D_V, "CTV_HR", 0.90, up, cov, 111.0),
        _aim(DviKind.D_V, "CTV_HR", 0.98, up, cov, 83.0),
        _aim(DviKind.D_V, "GTV_RES", 0.98, up, cov, 119.0),
        _aim(DviKind.D_V, "CTV_IR", 0.98, up, cov, 50.0),
        _aim(DviKind.V_D, "CTV_HR", 100.0, up, cov, 99.9, 90.0, priority=2),
        _aim(DviKind.V_D, "CTV_IR", 50.0, up, cov, 99.9, 90.0, priority=3),
        _aim(DviKind.D_V, "CTV_HR", 0.90, down, spa, 119.0),
        _aim(DviKind.D_V, "bladder", 2.0, down, spa, 78.0, cm3=True),
        _aim(DviKind.D_V, "rectum", 2.0, down, spa, 56.0, cm3=True),
        _aim(DviKind.D_POINT, "ICRU_RV", None, down, spa, 56.0),
        _aim(DviKind.D_V, "sigmoid", 2.0, down, spa, 64.0, cm3=True),
        _aim(DviKind.D_V, "bowel", 2.0, down, spa, 64.0, cm3=True),
        _aim(DviKind.V_D, "mid_CTV_IR", 100.0, down, spa, 25.0, 35.0, priority=3),
        _aim(DviKind.V_D, "mid_normal_tissue", 100.0, down, spa, 0.1, 1.5, priority=4),
        _aim(DviKind.V_D, "top_normal_tissue", 100.0, down, spa, 0.2, 7.0, priority=4),
    )
    return ProtocolConfig(aims, prescribed_dose_gy)


def protocol_to_dict(protocol: ProtocolConfig) -> Dict[str, Any]:
    aims = []
    for aim in protocol.aims:
        aims.append({
            "kind": aim.dvi.kind.value, "target": aim.dvi.target, "param": aim.dvi.param,
            "volume_unit": aim.dvi.volume_unit.value, "direction": aim.dvi.direction.value,
            "group": aim.group.value, "protocol": aim.protocol.value, "priority": aim.priority,
            "aspiration_strict": aim.aspiration_strict, "aspiration_loose": aim.aspiration_loose,
            "adjustable": aim.adjustable,
        })
    return {"prescribed_dose_gy": protocol.prescribed_dose_gy, "aims": aims}


def protocol_from_dict(data: Mapping[str, Any]) -> ProtocolConfig:
    """
    Build a ProtocolConfig from its JSON form.

    Raises:
        ConfigError: On missing keys, unknown enum values or violated aim invariants.
    """
    try:
        aims = []
        for raw in data["aims"]:
            dvi = DviSpec(DviKind(raw["kind"]), raw["target"],
                          None if raw.get("param") is None else float(raw["param"]),
                          Direction(raw["direction"]), VolumeUnit(raw.get("volume_unit", "fraction")))
            strict = float(raw["aspiration_strict"])
            aims.append(AimSpec(dvi, AimGroup(raw["group"]), AimProtocol(raw["protocol"]), int(raw["priority"]),
                                strict, float(raw.get("aspiration_loose", strict)), bool(raw.get("adjustable", False))))
        return ProtocolConfig(tuple(aims), float(data.get("prescribed_dose_gy", 7.0)))
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"invalid protocol definition - {e}") from e


def validate_protocol(protocol: ProtocolConfig, case: Optional[PatientCase] = None, require_paired_d90: bool = True) -> None:
    """
    Check that the protocol fits the objective model and, optionally, a case.

    Raises:
        ConfigError: If D90 of CTV_HR is not paired across groups, or a target is missing from the case.
    """
    if require_paired_d90:
        d90 = [a for a in protocol.embrace_aims if a.dvi.kind == DviKind.D_V and a.dvi.target == "CTV_HR"
               and a.dvi.param == 0.90 and a.dvi.volume_unit == VolumeUnit.FRACTION]
        if {a.group for a in d90} != {AimGroup.COVERAGE, AimGroup.SPARING}:
            raise ConfigError("D90 of CTV_HR must bound the dose from below in coverage and from above in sparing")
    if case is not None:
        missing = [r for r in protocol.roi_names if not case.has_roi(r)]
        missing += [p for p in protocol.point_names if p not in {q.name for q in case.reference_points}]
        if missing:
            raise ConfigError(f"protocol references targets missing from case '{case.name}': {missing}")
        if abs(protocol.prescribed_dose_gy - case.prescribed_dose_gy) > 1e-12:
            logger.warning(f"Protocol prescription {protocol.prescribed_dose_gy} Gy differs from case "
                           f"prescription {case.prescribed_dose_gy} Gy; doses are relative to the case")


def initial_aim_state(protocol: ProtocolConfig) -> AimState:
    return AimState({a.aim_id: AdjustableAimState(a.aspiration_strict) for a in protocol.aims if a.adjustable})


def delta(aim: AimSpec, state: Optional[AimState], value: float) -> float:
    """Signed margin of one aim; positive means satisfied."""
    if not np.isfinite(value):
        raise ContractError(f"{aim.aim_id}: DVI value must be finite, got {value}")
    if state is not None and state.is_eliminated(aim):
        raise ContractError(f"{aim.aim_id} is eliminated and has no margin")
    aspiration = state.aspiration(aim) if state is not None else aim.aspiration_strict
    if aim.dvi.direction == Direction.MAXIMIZE:
        return value - aspiration
    return aspiration - value


def compute_weights(deltas: Sequence[float]) -> np.ndarray:
    """
    Worst-case weights: the least violated aim gets 1, the next 10, then 100 and so on.

    Ties keep the aim order. Weights are normalized to sum to 1.
    """
    values = np.asarray(deltas, dtype=float)
    if values.size == 0:
        raise ContractError("cannot weight an empty group")
    order = np.argsort(-values, kind="stable")
    raw = np.empty(values.size)
    raw[order] = WEIGHT_BASE ** np.arange(values.size)
    return raw / raw.sum()


def active_aims(protocol: ProtocolConfig, state: Optional[AimState], mode: ObjectiveMode = ObjectiveMode.FULL) -> List[AimSpec]:
    """Aims contributing to the objectives: base aims plus non-eliminated added aims in full mode."""
    aims = []
    for aim in protocol.aims:
        if aim.protocol == AimProtocol.ADDED:
            if mode == ObjectiveMode.EMBRACE_ONLY or (state is not None and state.is_eliminated(aim)):
                continue
        aims.append(aim)
    return aims


def compute_deltas(dvi_values: Mapping[str, float], protocol: ProtocolConfig, state: Optional[AimState],
                   mode: ObjectiveMode = ObjectiveMode.FULL) -> Dict[str, float]:
    out: Dict[str, float] = {}
    for aim in active_aims(protocol, state, mode):
        if aim.dvi.label not in dvi_values:
            raise ContractError(f"missing DVI value for aim {aim.aim_id}")
        out[aim.aim_id] = delta(aim, state, float(dvi_values[aim.dvi.label]))
    return out


def _group_objective(margins: Sequence[float]) -> float:
    if not margins:
        return 0.0
    return float(np.dot(compute_weights(margins), margins))


def compute_objectives(dvi_values: Mapping[str, float], protocol: ProtocolConfig, state: Optional[AimState],
                       mode: ObjectiveMode = ObjectiveMode.FULL) -> ObjectivePair:
    """
    Least coverage and least sparing index of one plan, before the modulation penalty.

    Args:
        dvi_values (Mapping[str, float]): DVI values keyed by DviSpec.label.
        protocol (ProtocolConfig): The aims.
        state (Optional[AimState]): Adjustable aspirations; strict values when None.
        mode (ObjectiveMode): EMBRACE_ONLY drops every added aim.

    Returns:
        ObjectivePair: lci, lsi and a zero constraint.
    """
    deltas = compute_deltas(dvi_values, protocol, state, mode)
    groups = {aim.aim_id: aim.group for aim in protocol.aims}
    coverage = [d for k, d in deltas.items() if groups[k] == AimGroup.COVERAGE]
    sparing = [d for k, d in deltas.items() if groups[k] == AimGroup.SPARING]
    return ObjectivePair(_group_objective(coverage), _group_objective(sparing), 0.0)


def dtmr_penalty(plan: Sequence[float], neighbor_map: np.ndarray, config: ConstraintConfig) -> float:
    """
    Dwell-time modulation penalty summed over dwells.

    Each dwell is compared with its nearest same-channel neighbour: with
    t_lo = max(min(t, t_n), floor) and r = max(t, t_n) / t_lo, the pair
    violates when r - 1 > f(t_lo), f(t) = numerator / (offset + t), and
    contributes (r - f(t_lo)) / n_dwells.
    """
    times = np.asarray(plan, dtype=float)
    if times.size == 0:
        return 0.0
    neighbors = np.asarray(neighbor_map, dtype=int)
    has = neighbors >= 0
    if not has.any():
        return 0.0
    own = times[has]
    other = times[neighbors[has]]
    t_lo = np.maximum(np.minimum(own, other), config.ratio_floor)
    ratio = np.maximum(own, other) / t_lo
    f = config.dtmr_numerator / (config.dtmr_offset + t_lo)
    violating = ratio - 1.0 > f
    return float(np.sum(ratio[violating] - f[violating]) / times.size)


def apply_dtmr(pair: ObjectivePair, cons_total: float, config: ConstraintConfig) -> ObjectivePair:
    penalty = config.dtmr_alpha * cons_total
    return ObjectivePair(pair.lci - penalty, pair.lsi - penalty, cons_total)


def needle_index_groups(case: PatientCase) -> List[np.ndarray]:
    """Dwell indices of every needle channel."""
    return [case.channel_dwell_indices[c.id] for c in case.channels if c.kind == ChannelKind.NEEDLE]


def check_catheter_contribution(plan: Sequence[float], channels: Sequence[np.ndarray], config: ConstraintConfig) -> bool:
    """
    Needle contribution cap.

    Args:
        plan (Sequence[float]): Dwell times.
        channels (Sequence[np.ndarray]): Dwell indices of each needle channel.
        config (ConstraintConfig): Single and total caps.

    Returns:
        bool: True when every needle and all needles together stay within their share.
    """
    times = np.asarray(plan, dtype=float)
    total = float(times.sum())
    if total <= 0 or not len(channels):
        return True
    sums = np.array([times[idx].sum() for idx in channels])
    return bool(np.all(sums <= config.cr_single * total) and sums.sum() <= config.cr_total * total)


def all_aims_met(deltas: Mapping[str, float]) -> bool:
    return all(d > 0 for d in deltas.values())


def embrace_satisfied(dvi_values: Mapping[str, float], protocol: ProtocolConfig) -> bool:
    """Strict per-aim check over the base-protocol aims only."""
    deltas = compute_deltas(dvi_values, protocol, None, ObjectiveMode.EMBRACE_ONLY)
    return all_aims_met(deltas)
