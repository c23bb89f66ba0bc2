"""Dose-volume indices computed from DC-point dose samples."""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd

from components import dependencies
from components.dose_engine import DoseKernelConfig, DoseVector, build_point_matrix
from components.exceptions import ContractError
from components.patient_model import PatientCase

# Initialize logger
logger = dependencies.setup_logging()
logger = logging.getLogger('app.dvi')

DoseLike = Union[DoseVector, np.ndarray, Sequence[float]]


class DviKind(str, Enum):
    V_D = "V_d"
    D_V = "D_v"
    D_POINT = "D_point"


class Direction(str, Enum):
    MAXIMIZE = "maximize"
    MINIMIZE = "minimize"


class VolumeUnit(str, Enum):
    FRACTION = "fraction"
    CM3 = "cm3"


@dataclass(frozen=True)
class DviSpec:
    kind: DviKind
    target: str
    param: Optional[float]
    direction: Direction
    volume_unit: VolumeUnit = VolumeUnit.FRACTION

    def __post_init__(self):
        if self.kind == DviKind.V_D:
            if self.param is None or not self.param > 0:
                raise ContractError(f"V_d needs a positive dose level, got {self.param}")
        elif self.kind == DviKind.D_V:
            if self.param is None or not self.param > 0:
                raise ContractError(f"D_v needs a positive volume, got {self.param}")
            if self.volume_unit == VolumeUnit.FRACTION and self.param > 1:
                raise ContractError(f"D_v volume fraction must be in (0, 1], got {self.param}")
        elif self.param is not None:
            raise ContractError("D_point takes no parameter")

    @property
    def label(self) -> str:
        """Compact name, e.g. D90_CTV_HR, D2cc_bladder, V100_mid_CTV_IR, Dpoint_ICRU_RV."""
        if self.kind == DviKind.V_D:
            return f"V{self.param:g}_{self.target}"
        if self.kind == DviKind.D_V:
            if self.volume_unit == VolumeUnit.CM3:
                return f"D{self.param:g}cc_{self.target}"
            return f"D{100 * self.param:g}_{self.target}"
        return f"Dpoint_{self.target}"


def _as_array(dose: DoseLike) -> np.ndarray:
    arr = dose.doses if isinstance(dose, DoseVector) else np.asarray(dose, dtype=float)
    if arr.size == 0:
        raise ContractError("dose vector is empty")
    return arr.reshape(-1)


def compute_v_d(dose: DoseLike, d: float) -> float:
    """Percentage of DC points receiving at least d percent of the prescription."""
    doses = _as_array(dose)
    return 100.0 * np.count_nonzero(doses >= d) / doses.size


def compute_d_v(dose: DoseLike, v: float) -> float:
    """
    Minimum dose received by the most irradiated fraction v of the points.

    Returns the descending order statistic at 0-based index ceil(v*n) - 1,
    without interpolation.
    """
    if not 0 < v <= 1:
        raise ContractError(f"volume fraction must be in (0, 1], got {v}")
    doses = _as_array(dose)
    n = doses.size
    # rounding keeps products like 0.9 * 10 from landing just above an integer
    k = math.ceil(round(v * n, 9)) - 1
    position = n - 1 - k
    return float(np.partition(doses, position)[position])


def absolute_to_fraction(v_cm3: float, roi_volume_cm3: float) -> float:
    if not roi_volume_cm3 > 0:
        raise ContractError(f"ROI volume must be positive, got {roi_volume_cm3}")
    if not v_cm3 > 0:
        raise ContractError(f"absolute volume must be positive, got {v_cm3}")
    return min(1.0, v_cm3 / roi_volume_cm3)


def compute_d_point(case: PatientCase, plan: Sequence[float], point_name: str, kernel: DoseKernelConfig) -> float:
    try:
        point = case.reference_point(point_name)
    except KeyError as ke:
        raise ContractError(str(ke)) from ke
    times = np.asarray(plan, dtype=float)
    if times.shape != (case.n_dwells,) or np.any(times < 0):
        raise ContractError("plan must hold one non-negative dwell time per dwell position")
    return float(build_point_matrix(case, np.asarray([point.position]), kernel)[0] @ times)


def compute_dvi(spec: DviSpec, dose: DoseLike, roi_volume_cm3: Optional[float] = None) -> float:
    """
    Evaluate one DVI.

    Args:
        spec (DviSpec): Index definition.
        dose (DoseLike): ROI dose samples, or the single dose value for D_point.
        roi_volume_cm3 (Optional[float]): Needed for absolute-volume D_v.

    Returns:
        float: Percent of ROI volume for V_d, percent of prescription otherwise.
    """
    if spec.kind == DviKind.V_D:
        return compute_v_d(dose, spec.param)
    if spec.kind == DviKind.D_V:
        fraction = spec.param
        if spec.volume_unit == VolumeUnit.CM3:
            if roi_volume_cm3 is None:
                raise ContractError(f"{spec.label} needs the ROI volume")
            fraction = absolute_to_fraction(spec.param, roi_volume_cm3)
        return compute_d_v(dose, fraction)
    return float(_as_array(dose)[0])


def cumulative_dvh(dose: DoseLike, bins: Union[int, Sequence[float]] = 200) -> pd.DataFrame:
    """
    Cumulative DVH table: percentage of points receiving at least each dose level.

    Args:
        dose (DoseLike): Dose samples of one ROI.
        bins (Union[int, Sequence[float]]): Number of levels from 0 to the maximum, or explicit levels.

    Returns:
        pd.DataFrame: Columns dose_percent and volume_percent.
    """
    doses = np.sort(_as_array(dose))
    if np.isscalar(bins) or isinstance(bins, int):
        levels = np.linspace(0.0, float(doses[-1]), int(bins) + 1)
    else:
        levels = np.asarray(bins, dtype=float)
    at_least = doses.size - np.searchsorted(doses, levels, side="left")
    return pd.DataFrame({"dose_percent": levels, "volume_percent": 100.0 * at_least / doses.size})
