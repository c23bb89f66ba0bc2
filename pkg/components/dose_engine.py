"""
Point-source dose engine.

Dose rates follow an inverse-square kernel with unit radial dose and unit
anisotropy, stored per ROI as dense [n_points x n_dwells] matrices in percent
of the prescribed dose per second of dwell time.
"""

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from components import dependencies
from components.exceptions import ContractError
from components.patient_model import DCPointSet, PatientCase, case_hash

# Initialize logger
logger = dependencies.setup_logging()
logger = logging.getLogger('app.dose_engine')


@dataclass(frozen=True)
class DoseKernelConfig:
    """
    Lumped point-source kernel.

    dose_rate_constant is the dose rate (Gy/s) delivered at reference_distance_mm
    by one second of dwell time; distances are clamped at min_distance_mm.
    """

    dose_rate_constant: float = 0.123
    reference_distance_mm: float = 10.0
    min_distance_mm: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (isinstance(value, (int, float)) and np.isfinite(value) and value > 0):
                raise ContractError(f"DoseKernelConfig.{name} must be positive, got {value}")

    def percent_rate(self, prescribed_dose_gy: float) -> float:
        """Kernel constant C in percent of prescription per second at the reference distance."""
        if not prescribed_dose_gy > 0:
            raise ContractError(f"prescribed dose must be positive, got {prescribed_dose_gy}")
        return 100.0 * self.dose_rate_constant / prescribed_dose_gy


def kernel_value(distance_mm: np.ndarray, kernel: DoseKernelConfig, prescribed_dose_gy: float) -> np.ndarray:
    """C * (r0 / max(r, eps_r))^2 elementwise."""
    clamped = np.maximum(np.asarray(distance_mm, dtype=float), kernel.min_distance_mm)
    return kernel.percent_rate(prescribed_dose_gy) * (kernel.reference_distance_mm / clamped) ** 2


def kernel_hash(kernel: DoseKernelConfig) -> str:
    payload = json.dumps(asdict(kernel), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class DoseRateMatrix:
    roi_name: str
    entries: np.ndarray

    @property
    def n_points(self) -> int:
        return self.entries.shape[0]

    @property
    def n_dwells(self) -> int:
        return self.entries.shape[1]


@dataclass(frozen=True, eq=False)
class DoseVector:
    roi_name: str
    doses: np.ndarray

    def __len__(self) -> int:
        return len(self.doses)


def _check_times(times: np.ndarray, n_dwells: int) -> np.ndarray:
    arr = np.asarray(times, dtype=float)
    if arr.shape != (n_dwells,):
        raise ContractError(f"expected {n_dwells} dwell times, got shape {arr.shape}")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise ContractError("dwell times must be finite and non-negative")
    return arr


def _check_indices(changed: Iterable[int], n_dwells: int) -> np.ndarray:
    idx = np.asarray(list(changed) if not isinstance(changed, np.ndarray) else changed, dtype=int).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n_dwells):
        raise ContractError(f"dwell index out of range [0, {n_dwells})")
    return idx


def build_point_matrix(case: PatientCase, points: np.ndarray, kernel: DoseKernelConfig) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    return kernel_value(cdist(pts, case.positions), kernel, case.prescribed_dose_gy)


def build_dose_rate_matrix(case: PatientCase, dc_points: DCPointSet, kernel: DoseKernelConfig) -> DoseRateMatrix:
    """
    Dose-rate matrix of one ROI's DC points against every dwell position.

    Args:
        case (PatientCase): Case whose dwell positions define the columns.
        dc_points (DCPointSet): Points defining the rows.
        kernel (DoseKernelConfig): Point-source kernel.

    Returns:
        DoseRateMatrix: Entries in percent of prescribed dose per second.
    """
    if not case.has_roi(dc_points.roi_name):
        raise ContractError(f"DC points belong to ROI '{dc_points.roi_name}', which the case does not define")
    return DoseRateMatrix(dc_points.roi_name, build_point_matrix(case, dc_points.points, kernel))


def compute_dose(matrix: DoseRateMatrix, dwell_times: Sequence[float]) -> DoseVector:
    times = _check_times(dwell_times, matrix.n_dwells)
    return DoseVector(matrix.roi_name, matrix.entries @ times)


def partial_update_dose(dose: DoseVector, matrix: DoseRateMatrix, changed: Iterable[int],
                        old_times: Sequence[float], new_times: Sequence[float]) -> DoseVector:
    """
    Incrementally update a dose vector after some dwell times changed.

    Args:
        dose (DoseVector): Dose before the change.
        matrix (DoseRateMatrix): Matrix the dose was computed with.
        changed (Iterable[int]): Changed dwell indices.
        old_times (Sequence[float]): Previous times of the changed dwells, aligned with `changed`.
        new_times (Sequence[float]): New times of the changed dwells, aligned with `changed`.

    Returns:
        DoseVector: A new vector; the input is left untouched.
    """
    idx = _check_indices(changed, matrix.n_dwells)
    old = np.asarray(old_times, dtype=float).reshape(-1)
    new = np.asarray(new_times, dtype=float).reshape(-1)
    if old.shape != idx.shape or new.shape != idx.shape:
        raise ContractError("old_times and new_times must align with the changed indices")
    if idx.size == 0:
        return DoseVector(dose.roi_name, dose.doses.copy())
    return DoseVector(dose.roi_name, dose.doses + matrix.entries[:, idx] @ (new - old))


class DoseModel:
    """
    Every dose-rate matrix of one case at one fidelity, stacked row-wise.

    ROI matrices are views into a single stacked array, so a full evaluation
    is one matrix-vector product and a partial one touches only the changed
    columns. Reference points occupy one row each after the ROI rows.
    """

    def __init__(self, case: PatientCase, point_sets: Mapping[str, DCPointSet], kernel: DoseKernelConfig,
                 point_names: Optional[Sequence[str]] = None):
        self.case = case
        self.kernel = kernel
        self.case_hash = case_hash(case)
        self.point_sets = dict(point_sets)
        self.point_names: Tuple[str, ...] = tuple(point_names) if point_names is not None else tuple(
            p.name for p in case.reference_points)

        blocks = [build_dose_rate_matrix(case, point_sets[name], kernel).entries for name in self.point_sets]
        positions = [case.reference_point(name).position for name in self.point_names]
        if positions:
            blocks.append(build_point_matrix(case, np.asarray(positions), kernel))
        self.stacked = np.vstack(blocks) if blocks else np.zeros((0, case.n_dwells))

        self.slices: Dict[str, slice] = {}
        start = 0
        for name, points in self.point_sets.items():
            self.slices[name] = slice(start, start + len(points))
            start += len(points)
        self.point_rows: Dict[str, int] = {name: start + k for k, name in enumerate(self.point_names)}
        self.matrices: Dict[str, DoseRateMatrix] = {
            name: DoseRateMatrix(name, self.stacked[sl]) for name, sl in self.slices.items()}
        logger.debug(f"Dose model for case {self.case_hash[:12]}: {self.stacked.shape[0]} rows x {case.n_dwells} dwells")

    @property
    def n_dwells(self) -> int:
        return self.case.n_dwells

    @property
    def n_points(self) -> Dict[str, int]:
        return {name: sl.stop - sl.start for name, sl in self.slices.items()}

    def compute_all(self, dwell_times: Sequence[float]) -> np.ndarray:
        """Stacked dose of every ROI and reference point."""
        times = _check_times(dwell_times, self.n_dwells)
        return self.stacked @ times

    def partial_update_all(self, stacked_dose: np.ndarray, indices: np.ndarray, delta: np.ndarray) -> np.ndarray:
        """In-place stacked dose update for time changes `delta` at `indices`."""
        if len(indices):
            stacked_dose += self.stacked[:, indices] @ delta
        return stacked_dose

    def roi_dose(self, stacked_dose: np.ndarray, roi_name: str) -> np.ndarray:
        return stacked_dose[self.slices[roi_name]]

    def point_dose(self, stacked_dose: np.ndarray, point_name: str) -> float:
        return float(stacked_dose[self.point_rows[point_name]])

    def dose_vectors(self, dwell_times: Sequence[float]) -> Dict[str, DoseVector]:
        stacked = self.compute_all(dwell_times)
        return {name: DoseVector(name, stacked[sl].copy()) for name, sl in self.slices.items()}


def build_dose_model(case: PatientCase, point_sets: Mapping[str, DCPointSet], kernel: DoseKernelConfig,
                     point_names: Optional[Sequence[str]] = None) -> DoseModel:
    """
    Build the stacked dose model for one fidelity level.

    Args:
        case (PatientCase): The case.
        point_sets (Mapping[str, DCPointSet]): DC points per ROI.
        kernel (DoseKernelConfig): Point-source kernel.
        point_names (Optional[Sequence[str]]): Reference points to include; all when None.

    Returns:
        DoseModel: Shared, read-only model.
    """
    model = DoseModel(case, point_sets, kernel, point_names)
    logger.info(f"Built dose model: {len(model.slices)} ROIs, {sum(model.n_points.values())} DC points, "
                f"{len(model.point_names)} reference points")
    return model
