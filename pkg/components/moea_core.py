"""
Multi-objective real-valued gene-pool optimal mixing.

Each generation selects the best part of the population by non-domination,
clusters it in objective space, estimates a normal distribution per linkage
set of every cluster and resamples linkage sets of each population member one
at a time. A change is kept only when it improves the member under its
cluster's role, otherwise it is undone. Both objectives are maximized.
"""

import json
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.cluster.hierarchy import linkage
from scipy.spatial.distance import cdist, pdist

from components import dependencies
from components.dose_engine import DoseKernelConfig, DoseModel, build_dose_model
from components.dvi import DviKind, VolumeUnit, compute_d_v, compute_v_d, absolute_to_fraction
from components.exceptions import ArchiveEmptyError, ConfigError, ContractError, InfeasibleInitializationError
from components.objective_model import (AimState, ConstraintConfig, ObjectiveMode, ObjectivePair, ProtocolConfig,
                                        apply_dtmr, check_catheter_contribution, compute_objectives, dtmr_penalty,
                                        initial_aim_state, needle_index_groups)
from components.patient_model import PatientCase, nearest_neighbor_map, sample_dc_point_sets
from utils import export_utils

# Initialize logger
logger = dependencies.setup_logging()
logger = logging.getLogger('app.moea_core')

CHECKPOINT_VERSION = 1
DUPLICATE_TOLERANCE = 1e-12


class ClusterRole(str, Enum):
    EXTREME_LCI = "extreme_lci"
    EXTREME_LSI = "extreme_lsi"
    MIDDLE = "middle"


@dataclass(frozen=True)
class OptimizerConfig:
    population_size: int = 96
    selection_fraction: float = 0.35
    n_clusters: int = 5
    archive_capacity: int = 1000
    init_low: float = 0.0
    init_high: float = 2.0
    t_max: float = 60.0
    seed: int = 0
    generations: int = 350
    workers: int = 1
    init_retry_cap: int = 100
    verify_every: int = 0

    def __post_init__(self):
        if self.population_size < 1 or self.n_clusters < 1 or self.archive_capacity < 1:
            raise ConfigError("population_size, n_clusters and archive_capacity must be positive")
        if not 0 < self.selection_fraction <= 1:
            raise ConfigError(f"selection_fraction must be in (0, 1], got {self.selection_fraction}")
        if self.population_size < self.n_clusters:
            raise ConfigError("population_size must be at least n_clusters")
        if self.selection_size < self.n_clusters:
            raise ConfigError(f"selection of {self.selection_size} cannot feed {self.n_clusters} clusters")
        if not 0 <= self.init_low < self.init_high <= self.t_max:
            raise ConfigError("need 0 <= init_low < init_high <= t_max")
        if self.workers < 1 or self.init_retry_cap < 1 or self.generations < 0 or self.verify_every < 0:
            raise ConfigError("workers and init_retry_cap must be positive; generations and verify_every non-negative")

    @property
    def selection_size(self) -> int:
        return int(math.floor(self.selection_fraction * self.population_size))


@dataclass(eq=False)
class Solution:
    dwell_times: np.ndarray
    dose: Optional[np.ndarray]
    dvi_values: Dict[str, float]
    objectives: ObjectivePair
    cr_feasible: bool

    @property
    def lci(self) -> float:
        return self.objectives.lci

    @property
    def lsi(self) -> float:
        return self.objectives.lsi

    def copy(self, with_dose: bool = True) -> "Solution":
        dose = self.dose.copy() if (with_dose and self.dose is not None) else None
        return Solution(self.dwell_times.copy(), dose, dict(self.dvi_values), self.objectives, self.cr_feasible)


@dataclass
class PartialChange:
    indices: np.ndarray
    old_values: np.ndarray
    dvi_values: Dict[str, float]
    objectives: ObjectivePair
    cr_feasible: bool


def dominates(a: ObjectivePair, b: ObjectivePair) -> bool:
    return a.lci >= b.lci and a.lsi >= b.lsi and (a.lci > b.lci or a.lsi > b.lsi)


class PlanEvaluator:
    """
    Full and partial evaluation of dwell-time plans at one fidelity.

    The aim state is shared by reference: adjusting it changes the objectives
    of later evaluations, and `refresh_objectives` brings cached ones up to date.
    """

    def __init__(self, dose_model: DoseModel, protocol: ProtocolConfig, aim_state: Optional[AimState] = None,
                 mode: ObjectiveMode = ObjectiveMode.FULL, constraints: Optional[ConstraintConfig] = None,
                 t_max: float = 60.0):
        self.dose_model = dose_model
        self.case = dose_model.case
        self.protocol = protocol
        self.aim_state = aim_state if aim_state is not None else initial_aim_state(protocol)
        self.mode = mode
        self.constraints = constraints or ConstraintConfig()
        self.t_max = float(t_max)
        self.neighbor_map = nearest_neighbor_map(self.case)
        self.needle_groups = needle_index_groups(self.case)
        self.roi_volumes = {r.name: r.volume_cm3 for r in self.case.rois}
        # filled in by build_evaluator
        self.n_dc: Optional[int] = None
        self.dc_seed: Optional[int] = None

        missing = [s.label for s in protocol.dvi_specs
                   if (s.kind == DviKind.D_POINT and s.target not in dose_model.point_rows)
                   or (s.kind != DviKind.D_POINT and s.target not in dose_model.slices)]
        if missing:
            raise ContractError(f"dose model cannot serve DVIs {missing}")
        self._fractions = {}
        for spec in protocol.dvi_specs:
            if spec.kind == DviKind.D_V:
                self._fractions[spec.label] = (absolute_to_fraction(spec.param, self.roi_volumes[spec.target])
                                               if spec.volume_unit == VolumeUnit.CM3 else spec.param)

    @property
    def n_dwells(self) -> int:
        return self.case.n_dwells

    def with_dose_model(self, dose_model: DoseModel) -> "PlanEvaluator":
        return PlanEvaluator(dose_model, self.protocol, self.aim_state, self.mode, self.constraints, self.t_max)

    def compute_dvis(self, stacked_dose: np.ndarray) -> Dict[str, float]:
        values: Dict[str, float] = {}
        for spec in self.protocol.dvi_specs:
            if spec.kind == DviKind.D_POINT:
                values[spec.label] = self.dose_model.point_dose(stacked_dose, spec.target)
            elif spec.kind == DviKind.V_D:
                values[spec.label] = compute_v_d(self.dose_model.roi_dose(stacked_dose, spec.target), spec.param)
            else:
                values[spec.label] = compute_d_v(self.dose_model.roi_dose(stacked_dose, spec.target), self._fractions[spec.label])
        return values

    def objectives(self, dvi_values: Mapping[str, float], dwell_times: np.ndarray) -> ObjectivePair:
        raw = compute_objectives(dvi_values, self.protocol, self.aim_state, self.mode)
        return apply_dtmr(raw, dtmr_penalty(dwell_times, self.neighbor_map, self.constraints), self.constraints)

    def cr_feasible(self, dwell_times: np.ndarray) -> bool:
        return check_catheter_contribution(dwell_times, self.needle_groups, self.constraints)

    def evaluate(self, dwell_times: Sequence[float]) -> Solution:
        times = np.array(dwell_times, dtype=float)
        dose = self.dose_model.compute_all(times)
        dvis = self.compute_dvis(dose)
        return Solution(times, dose, dvis, self.objectives(dvis, times), self.cr_feasible(times))

    def try_partial(self, solution: Solution, indices: np.ndarray, values: np.ndarray) -> PartialChange:
        """
        Apply new times for `indices` in place with a partial dose update.

        Returns:
            PartialChange: Everything `revert` needs to undo the change.
        """
        if solution.dose is None:
            raise ContractError("partial evaluation needs a solution carrying its dose")
        idx = np.asarray(indices, dtype=int)
        new = np.clip(np.asarray(values, dtype=float), 0.0, self.t_max)
        change = PartialChange(idx, solution.dwell_times[idx].copy(), solution.dvi_values,
                               solution.objectives, solution.cr_feasible)
        self.dose_model.partial_update_all(solution.dose, idx, new - change.old_values)
        solution.dwell_times[idx] = new
        solution.dvi_values = self.compute_dvis(solution.dose)
        solution.objectives = self.objectives(solution.dvi_values, solution.dwell_times)
        solution.cr_feasible = self.cr_feasible(solution.dwell_times)
        return change

    def revert(self, solution: Solution, change: PartialChange) -> None:
        current = solution.dwell_times[change.indices].copy()
        self.dose_model.partial_update_all(solution.dose, change.indices, change.old_values - current)
        solution.dwell_times[change.indices] = change.old_values
        solution.dvi_values = change.dvi_values
        solution.objectives = change.objectives
        solution.cr_feasible = change.cr_feasible

    def refresh_objectives(self, solution: Solution) -> None:
        """Recompute objectives from cached DVIs under the current aim state."""
        solution.objectives = self.objectives(solution.dvi_values, solution.dwell_times)

    def verify(self, solution: Solution, rtol: float = 1e-9) -> bool:
        """Compare the cached dose and DVIs with a full recomputation."""
        fresh = self.evaluate(solution.dwell_times)
        scale = max(1.0, float(np.max(np.abs(fresh.dose))) if fresh.dose.size else 1.0)
        if solution.dose is not None and np.max(np.abs(solution.dose - fresh.dose), initial=0.0) > rtol * scale:
            return False
        return all(abs(solution.dvi_values[k] - v) <= rtol * max(1.0, abs(v)) for k, v in fresh.dvi_values.items())


def build_evaluator(case: PatientCase, protocol: ProtocolConfig, n_dc: int, seed: int,
                    kernel: Optional[DoseKernelConfig] = None, aim_state: Optional[AimState] = None,
                    mode: ObjectiveMode = ObjectiveMode.FULL, constraints: Optional[ConstraintConfig] = None,
                    t_max: float = 60.0, cache_dir: Optional[Union[str, Path]] = None) -> PlanEvaluator:
    """
    Sample DC points for every ROI the protocol needs and wrap them in an evaluator.

    Args:
        case (PatientCase): The case.
        protocol (ProtocolConfig): Aims; decides which ROIs and reference points are needed.
        n_dc (int): DC points per ROI.
        seed (int): DC-point seed.
        kernel (Optional[DoseKernelConfig]): Kernel; defaults when None.
        aim_state (Optional[AimState]): Shared aim state; strict aspirations when None.
        mode (ObjectiveMode): Objective mode.
        constraints (Optional[ConstraintConfig]): Constraint settings.
        t_max (float): Dwell-time cap in seconds.
        cache_dir (Optional[Union[str, Path]]): Directory for the DC-point cache.

    Returns:
        PlanEvaluator: Ready evaluator.
    """
    from utils import case_utils

    kernel = kernel or DoseKernelConfig()
    point_sets = None
    if cache_dir is not None:
        point_sets = case_utils.load_dc_points(cache_dir, case, protocol.roi_names, n_dc, seed)
    if point_sets is None:
        point_sets = sample_dc_point_sets(case, n_dc, seed, protocol.roi_names)
        if cache_dir is not None:
            case_utils.save_dc_points(cache_dir, case, point_sets, n_dc, seed)
    model = build_dose_model(case, point_sets, kernel, protocol.point_names)
    evaluator = PlanEvaluator(model, protocol, aim_state, mode, constraints, t_max)
    evaluator.n_dc, evaluator.dc_seed = int(n_dc), int(seed)
    return evaluator


class ElitistArchive:
    """
    Bounded store of mutually non-dominated, needle-cap feasible solutions.

    Members are kept without dose. On overflow a grid over the objective
    ranges picks a victim in the most crowded cell; the best-LCI, best-LSI and
    best-balanced members are never evicted.
    """

    def __init__(self, capacity: int = 1000):
        if capacity < 1:
            raise ConfigError("archive capacity must be positive")
        self.capacity = capacity
        self.members: List[Solution] = []
        self._stamps: List[int] = []
        self._objs = np.empty((0, 2))
        self._counter = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self) -> Iterator[Solution]:
        return iter(list(self.members))

    @property
    def objectives(self) -> np.ndarray:
        return self._objs.copy()

    def offer(self, solution: Solution) -> bool:
        """Try to insert a copy of `solution`; returns whether it was kept."""
        with self._lock:
            return self._offer(solution)

    def _offer(self, solution: Solution) -> bool:
        if not solution.cr_feasible:
            return False
        lci, lsi = solution.lci, solution.lsi
        objs = self._objs
        if len(objs):
            if np.any((np.abs(objs[:, 0] - lci) <= DUPLICATE_TOLERANCE) & (np.abs(objs[:, 1] - lsi) <= DUPLICATE_TOLERANCE)):
                return False
            if np.any((objs[:, 0] >= lci) & (objs[:, 1] >= lsi) & ((objs[:, 0] > lci) | (objs[:, 1] > lsi))):
                return False
            beaten = (lci >= objs[:, 0]) & (lsi >= objs[:, 1]) & ((lci > objs[:, 0]) | (lsi > objs[:, 1]))
            if beaten.any():
                keep = np.flatnonzero(~beaten)
                self.members = [self.members[i] for i in keep]
                self._stamps = [self._stamps[i] for i in keep]
                self._objs = objs[keep]
        self.members.append(solution.copy(with_dose=False))
        self._stamps.append(self._counter)
        self._counter += 1
        self._objs = np.vstack([self._objs, [[lci, lsi]]])
        if len(self.members) > self.capacity:
            victim = self._grid_victim()
            self._remove(victim)
            return victim != len(self.members)
        return True

    def _remove(self, index: int) -> None:
        del self.members[index]
        del self._stamps[index]
        self._objs = np.delete(self._objs, index, axis=0)

    def _grid_victim(self) -> int:
        objs = self._objs
        grid = max(1, int(math.floor(math.sqrt(self.capacity / 4))))
        lo, hi = objs.min(axis=0), objs.max(axis=0)
        span = hi - lo
        scaled = np.divide(objs - lo, span, out=np.zeros_like(objs), where=span > 0)
        cells = np.minimum(grid - 1, np.floor(scaled * grid)).astype(int)
        keys = cells[:, 0] * grid + cells[:, 1]
        crowd = np.bincount(keys, minlength=grid * grid)[keys]
        balanced = objs.min(axis=1)
        protected = {int(np.argmax(objs[:, 0])), int(np.argmax(objs[:, 1])), int(np.argmax(balanced))}
        candidates = [i for i in range(len(objs)) if i not in protected]
        return min(candidates, key=lambda i: (-crowd[i], balanced[i], -self._stamps[i]))

    def remove_dominated(self) -> int:
        """Drop members dominated by (or duplicating) another after objectives changed."""
        with self._lock:
            self._objs = np.array([[m.lci, m.lsi] for m in self.members]).reshape(-1, 2)
            objs = self._objs
            keep = []
            for i in range(len(objs)):
                ge = (objs[:, 0] >= objs[i, 0]) & (objs[:, 1] >= objs[i, 1])
                gt = (objs[:, 0] > objs[i, 0]) | (objs[:, 1] > objs[i, 1])
                if np.any(ge & gt):
                    continue
                if any(abs(objs[j, 0] - objs[i, 0]) <= DUPLICATE_TOLERANCE and abs(objs[j, 1] - objs[i, 1]) <= DUPLICATE_TOLERANCE
                       for j in keep):
                    continue
                keep.append(i)
            removed = len(objs) - len(keep)
            self.members = [self.members[i] for i in keep]
            self._stamps = [self._stamps[i] for i in keep]
            self._objs = objs[keep].reshape(-1, 2)
            return removed

    def best(self, key: str = "lci") -> Solution:
        if not self.members:
            raise ArchiveEmptyError("archive is empty")
        column = {"lci": self._objs[:, 0], "lsi": self._objs[:, 1], "min": self._objs.min(axis=1)}[key]
        return self.members[int(np.argmax(column))]


def update_archive(archive: ElitistArchive, solution: Solution) -> bool:
    """Offer one plan to the archive; True when it was stored."""
    return archive.offer(solution)


def non_dominated_fronts(objectives: np.ndarray) -> List[np.ndarray]:
    """Fronts of a maximization problem, each as ascending indices."""
    objs = np.asarray(objectives, dtype=float).reshape(-1, 2)
    n = len(objs)
    if n == 0:
        return []
    ge = np.all(objs[:, None, :] >= objs[None, :, :], axis=2)
    gt = np.any(objs[:, None, :] > objs[None, :, :], axis=2)
    dominated_by = ge & gt  # [i, j]: i dominates j
    remaining = np.ones(n, dtype=bool)
    fronts = []
    while remaining.any():
        beaten = np.any(dominated_by[remaining][:, remaining], axis=0)
        front = np.flatnonzero(remaining)[~beaten]
        fronts.append(front)
        remaining[front] = False
    return fronts


def crowding_distance(objectives: np.ndarray) -> np.ndarray:
    """Crowding distance; an objective with zero range contributes nothing."""
    objs = np.asarray(objectives, dtype=float).reshape(-1, 2)
    n = len(objs)
    distance = np.zeros(n)
    if n == 0:
        return distance
    for m in range(objs.shape[1]):
        order = np.argsort(objs[:, m], kind="stable")
        values = objs[order, m]
        span = values[-1] - values[0]
        if span <= 0:
            continue
        distance[order[0]] = distance[order[-1]] = np.inf
        if n > 2:
            distance[order[1:-1]] += (values[2:] - values[:-2]) / span
    return distance


def select(objectives: np.ndarray, fraction: float) -> np.ndarray:
    """
    Indices of the floor(fraction * n) best solutions by non-domination.

    The cut front is filled by decreasing crowding distance, then by index.
    """
    objs = np.asarray(objectives, dtype=float).reshape(-1, 2)
    target = int(math.floor(fraction * len(objs)))
    chosen: List[int] = []
    for front in non_dominated_fronts(objs):
        if len(chosen) + len(front) <= target:
            chosen.extend(int(i) for i in front)
            continue
        crowd = crowding_distance(objs[front])
        order = sorted(range(len(front)), key=lambda k: (-crowd[k], front[k]))
        chosen.extend(int(front[k]) for k in order[:target - len(chosen)])
        break
    return np.array(chosen, dtype=int)


@dataclass
class Cluster:
    members: np.ndarray
    leader: int
    role: ClusterRole


def _normalize(objs: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    lo, hi = objs.min(axis=0), objs.max(axis=0)
    span = hi - lo
    return np.divide(objs - lo, span, out=np.zeros_like(objs), where=span > 0), lo, span


def cluster_selection(objectives: np.ndarray, k: int) -> List[Cluster]:
    """
    Balanced k-leader clustering of the selection in normalized objective space.

    Leader 0 has the best LCI, leader 1 the best LSI among the rest, later
    leaders are farthest-point picks. Each cluster holds the ceil(2m/k)
    solutions nearest to its leader, so clusters overlap. With k >= 2 the
    first two clusters take the extreme roles.
    """
    objs = np.asarray(objectives, dtype=float).reshape(-1, 2)
    m = len(objs)
    if k < 1 or m < k:
        raise ContractError(f"cannot form {k} clusters from {m} solutions")
    size = min(m, int(math.ceil(2 * m / k)))
    roles = [ClusterRole.MIDDLE] if k == 1 else [ClusterRole.EXTREME_LCI, ClusterRole.EXTREME_LSI] + [ClusterRole.MIDDLE] * (k - 2)
    if k == 1:
        return [Cluster(np.arange(m), 0, ClusterRole.MIDDLE)]

    norm, _, span = _normalize(objs)
    if not np.any(span > 0):
        clusters = []
        for c in range(k):
            members = [i for i in range(m) if i % k == c]
            j = c
            while len(members) < size:
                j = (j + 1) % m
                if j not in members:
                    members.append(j)
            clusters.append(Cluster(np.array(members), members[0], roles[c]))
        return clusters

    leaders = [int(np.argmax(objs[:, 0]))]
    rest = [i for i in range(m) if i != leaders[0]]
    leaders.append(rest[int(np.argmax(objs[rest, 1]))])
    while len(leaders) < k:
        nearest = cdist(norm, norm[leaders]).min(axis=1)
        nearest[leaders] = -1.0
        leaders.append(int(np.argmax(nearest)))

    clusters = []
    for c, leader in enumerate(leaders):
        dist = np.linalg.norm(norm - norm[leader], axis=1)
        order = np.argsort(dist, kind="stable")
        clusters.append(Cluster(np.sort(order[:size]), leader, roles[c]))
    return clusters


def assign_to_clusters(objectives: np.ndarray, selection: np.ndarray, clusters: Sequence[Cluster]) -> np.ndarray:
    """Cluster index per population member: its own first cluster, else the nearest leader."""
    objs = np.asarray(objectives, dtype=float).reshape(-1, 2)
    sel_objs = objs[selection]
    lo, hi = sel_objs.min(axis=0), sel_objs.max(axis=0)
    span = hi - lo
    scaled = np.divide(objs - lo, span, out=np.zeros_like(objs), where=span > 0)
    leaders = scaled[[selection[c.leader] for c in clusters]]
    assignment = np.argmin(cdist(scaled, leaders), axis=1)
    for c in reversed(range(len(clusters))):
        assignment[selection[clusters[c].members]] = c
    return assignment


@dataclass(frozen=True, eq=False)
class LinkageTree:
    linkage_sets: Tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.linkage_sets)


def build_linkage_tree(dwell_positions: np.ndarray) -> LinkageTree:
    """
    Offline linkage tree from average-linkage (UPGMA) clustering of dwell positions.

    Sets are listed leaves first, then merges in merge order; the root is left out.
    """
    positions = np.atleast_2d(np.asarray(dwell_positions, dtype=float))
    n = len(positions)
    if n == 0:
        raise ContractError("linkage tree needs at least one dwell position")
    if n == 1:
        return LinkageTree((np.array([0]),))
    merges = linkage(pdist(positions), method="average")
    nodes: List[np.ndarray] = [np.array([i]) for i in range(n)]
    for left, right, _, _ in merges:
        nodes.append(np.sort(np.concatenate([nodes[int(left)], nodes[int(right)]])))
    return LinkageTree(tuple(nodes[:-1]))


@dataclass(eq=False)
class ClusterModel:
    means: List[np.ndarray]
    covariances: List[np.ndarray]
    factors: List[np.ndarray]
    role: ClusterRole = ClusterRole.MIDDLE


def _regularized_cholesky(cov: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    try:
        return cov, np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    lam = max(1e-6 * float(np.trace(cov)) / len(cov), 1e-10)
    while True:
        regularized = cov + lam * np.eye(len(cov))
        try:
            return regularized, np.linalg.cholesky(regularized)
        except np.linalg.LinAlgError:
            lam *= 10.0


def estimate_distributions(cluster_times: np.ndarray, tree: LinkageTree, role: ClusterRole = ClusterRole.MIDDLE) -> ClusterModel:
    """
    Maximum-likelihood normal distribution per linkage set.

    Args:
        cluster_times (np.ndarray): [members x dwells] dwell times of one cluster.
        tree (LinkageTree): Linkage sets.
        role (ClusterRole): Role recorded on the model.

    Returns:
        ClusterModel: Means, (regularized) covariances and their Cholesky factors.
    """
    times = np.atleast_2d(np.asarray(cluster_times, dtype=float))
    if len(times) == 0:
        raise ContractError("cannot estimate from an empty cluster")
    means, covs, factors = [], [], []
    for subset in tree.linkage_sets:
        block = times[:, subset]
        mean = block.mean(axis=0)
        centered = block - mean
        cov, factor = _regularized_cholesky(centered.T @ centered / len(block))
        means.append(mean)
        covs.append(cov)
        factors.append(factor)
    return ClusterModel(means, covs, factors, role)


def _improves(role: ClusterRole, before: ObjectivePair, after: ObjectivePair) -> bool:
    if role == ClusterRole.EXTREME_LCI:
        return after.lci > before.lci
    if role == ClusterRole.EXTREME_LSI:
        return after.lsi > before.lsi
    return dominates(after, before)


def gom_variation(solution: Solution, model: ClusterModel, tree: LinkageTree, evaluator: PlanEvaluator,
                  rng: np.random.Generator, archive: Optional[ElitistArchive] = None) -> int:
    """
    Gene-pool optimal mixing over every linkage set of one solution, in place.

    Returns:
        int: Number of accepted changes.
    """
    accepted = 0
    for k, subset in enumerate(tree.linkage_sets):
        sample = model.means[k] + model.factors[k] @ rng.standard_normal(len(subset))
        sample = np.clip(sample, 0.0, evaluator.t_max)
        if np.array_equal(sample, solution.dwell_times[subset]):
            continue
        candidate = solution.dwell_times.copy()
        candidate[subset] = sample
        if not evaluator.cr_feasible(candidate):
            continue
        before = solution.objectives
        change = evaluator.try_partial(solution, subset, sample)
        keep = _improves(model.role, before, solution.objectives)
        if not keep and model.role == ClusterRole.MIDDLE and archive is not None and not dominates(before, solution.objectives):
            keep = update_archive(archive, solution)
        elif keep and archive is not None:
            update_archive(archive, solution)
        if keep:
            accepted += 1
        else:
            evaluator.revert(solution, change)
    return accepted


def _scale_needles(times: np.ndarray, groups: Sequence[np.ndarray], constraints: ConstraintConfig) -> np.ndarray:
    needle_idx = np.concatenate(groups) if groups else np.array([], dtype=int)
    needle_total = float(times[needle_idx].sum())
    other_total = float(times.sum()) - needle_total
    if other_total <= 0:
        raise InfeasibleInitializationError("no applicator dwell time to balance the needle contribution")
    if needle_total <= 0:
        return times
    largest = max(float(times[g].sum()) for g in groups)
    bounds = [1.0, constraints.cr_total * other_total / ((1 - constraints.cr_total) * needle_total)]
    if largest > constraints.cr_single * needle_total:
        bounds.append(constraints.cr_single * other_total / (largest - constraints.cr_single * needle_total))
    scaled = times.copy()
    scaled[needle_idx] *= min(bounds) * (1 - 1e-9)
    return scaled


def init_population(config: OptimizerConfig, evaluator: PlanEvaluator, rng: np.random.Generator) -> List[Solution]:
    """
    Uniform random plans on [init_low, init_high]; needle-cap violations are resampled,
    then needle times are scaled down once the retry cap is exhausted.

    Raises:
        InfeasibleInitializationError: When scaling cannot restore feasibility.
    """
    population = []
    resampled = scaled = 0
    for _ in range(config.population_size):
        for attempt in range(config.init_retry_cap):
            times = rng.uniform(config.init_low, config.init_high, evaluator.n_dwells)
            if evaluator.cr_feasible(times):
                break
            resampled += 1
        else:
            times = _scale_needles(times, evaluator.needle_groups, evaluator.constraints)
            scaled += 1
            if not evaluator.cr_feasible(times):
                raise InfeasibleInitializationError("needle scaling did not reach a feasible plan")
        population.append(evaluator.evaluate(times))
    if resampled or scaled:
        logger.info(f"Initialization: {resampled} needle-cap resamples, {scaled} plans scaled to feasibility")
    return population


@dataclass
class OptimizerState:
    config: OptimizerConfig
    evaluator: PlanEvaluator
    population: List[Solution]
    archive: ElitistArchive
    rng: np.random.Generator
    tree: LinkageTree
    generation: int = 0
    traces: Dict[str, List[float]] = field(default_factory=lambda: {"best_lci": [], "best_min": [], "archive_size": []})


def create_state(config: OptimizerConfig, evaluator: PlanEvaluator, seed: Optional[int] = None) -> OptimizerState:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    population = init_population(config, evaluator, rng)
    archive = ElitistArchive(config.archive_capacity)
    for solution in population:
        update_archive(archive, solution)
    tree = build_linkage_tree(evaluator.case.positions)
    logger.info(f"New optimizer state: {len(population)} plans, {len(tree)} linkage sets, archive {len(archive)}")
    return OptimizerState(config, evaluator, population, archive, rng, tree)


def _record_traces(state: OptimizerState) -> None:
    objs = state.archive.objectives
    state.traces["best_lci"].append(float(objs[:, 0].max()) if len(objs) else float("nan"))
    state.traces["best_min"].append(float(objs.min(axis=1).max()) if len(objs) else float("nan"))
    state.traces["archive_size"].append(float(len(objs)))


def run_generation(state: OptimizerState) -> int:
    """One generation of select, cluster, estimate and mix over the whole population."""
    config = state.config
    objs = np.array([[s.lci, s.lsi] for s in state.population])
    selection = select(objs, config.selection_fraction)
    clusters = cluster_selection(objs[selection], config.n_clusters)
    models = [estimate_distributions(np.array([state.population[selection[i]].dwell_times for i in c.members]),
                                     state.tree, c.role) for c in clusters]
    assignment = assign_to_clusters(objs, selection, clusters)
    seeds = state.rng.integers(0, 2**63 - 1, size=len(state.population))

    def vary(i: int) -> int:
        return gom_variation(state.population[i], models[assignment[i]], state.tree, state.evaluator,
                             np.random.default_rng(int(seeds[i])), state.archive)

    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as executor:
            accepted = sum(executor.map(vary, range(len(state.population))))
    else:
        accepted = sum(vary(i) for i in range(len(state.population)))

    state.generation += 1
    _record_traces(state)
    if config.verify_every and state.generation % config.verify_every == 0:
        for solution in state.population:
            if not state.evaluator.verify(solution):
                raise ContractError(f"cached dose drifted from full recomputation at generation {state.generation}")
    logger.debug(f"Generation {state.generation}: {accepted} accepted changes, archive {len(state.archive)}, "
                 f"best LCI {state.traces['best_lci'][-1]:.4f}, best min {state.traces['best_min'][-1]:.4f}")
    return accepted


def run_generations(state: OptimizerState, g: Optional[int] = None) -> ElitistArchive:
    """Run g more generations on a resumable state; `config.generations` when g is None."""
    if g is None:
        g = state.config.generations
    if g < 0:
        raise ContractError(f"generation count must be non-negative, got {g}")
    for _ in range(g):
        run_generation(state)
    return state.archive


def reevaluate_solutions(solutions: Sequence[Solution], evaluator: PlanEvaluator) -> Tuple[List[Solution], np.ndarray]:
    """Full re-evaluation of every solution; fallback rows are old minus new (LCI, LSI)."""
    fresh = []
    fallback = np.zeros((len(solutions), 2))
    for k, solution in enumerate(solutions):
        new = evaluator.evaluate(solution.dwell_times)
        fallback[k] = (solution.lci - new.lci, solution.lsi - new.lsi)
        new.dose = None
        fresh.append(new)
    return fresh, fallback


def archive_from(solutions: Sequence[Solution], capacity: int) -> ElitistArchive:
    archive = ElitistArchive(capacity)
    for solution in solutions:
        update_archive(archive, solution)
    return archive


def save_checkpoint(state: OptimizerState, path: Union[str, Path]) -> Path:
    """
    Versioned JSON checkpoint of the resumable optimizer state.

    Cached doses and objectives are not stored; `load_checkpoint` recomputes them.
    """
    payload = {
        "version": CHECKPOINT_VERSION,
        "case_hash": state.evaluator.dose_model.case_hash,
        "config": asdict(state.config),
        "generation": state.generation,
        "rng_state": state.rng.bit_generator.state,
        "aim_state": state.evaluator.aim_state.to_dict(),
        "fidelity": {"n_dc": state.evaluator.n_dc, "dc_seed": state.evaluator.dc_seed,
                     "mode": state.evaluator.mode.value},
        "population": [s.dwell_times.tolist() for s in state.population],
        "archive": [s.dwell_times.tolist() for s in state.archive.members],
        "traces": state.traces,
    }
    return export_utils.atomic_write_json(path, payload)


def _read_checkpoint(path: Union[str, Path]) -> Dict[str, Any]:
    with open(path, "r") as f:
        payload = json.load(f)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {payload.get('version')}")
    return payload


def checkpoint_fidelity(path: Union[str, Path]) -> Dict[str, Any]:
    """
    DC-point count, DC seed, objective mode and dwell-time cap a checkpoint was written at.

    Raises:
        ConfigError: If the checkpoint does not record its fidelity.
    """
    payload = _read_checkpoint(path)
    fidelity = payload.get("fidelity") or {}
    if fidelity.get("n_dc") is None or fidelity.get("dc_seed") is None:
        raise ConfigError(f"checkpoint {path} does not record its DC-point fidelity")
    return {"n_dc": int(fidelity["n_dc"]), "dc_seed": int(fidelity["dc_seed"]),
            "mode": ObjectiveMode(fidelity.get("mode", ObjectiveMode.FULL.value)),
            "t_max": float(payload["config"]["t_max"])}


def load_checkpoint(path: Union[str, Path], evaluator: PlanEvaluator) -> OptimizerState:
    """
    Restore an optimizer state written by `save_checkpoint`.

    The evaluator's aim state is overwritten with the stored one.

    Raises:
        ConfigError: On version or case mismatch.
    """
    payload = _read_checkpoint(path)
    if payload["case_hash"] != evaluator.dose_model.case_hash:
        raise ConfigError("checkpoint belongs to a different case")
    restored = AimState.from_dict(payload["aim_state"])
    evaluator.aim_state.entries.clear()
    evaluator.aim_state.entries.update(restored.entries)
    config = OptimizerConfig(**payload["config"])
    rng = np.random.default_rng()
    rng.bit_generator.state = payload["rng_state"]
    population = [evaluator.evaluate(t) for t in payload["population"]]
    archive = archive_from([evaluator.evaluate(t) for t in payload["archive"]], config.archive_capacity)
    state = OptimizerState(config, evaluator, population, archive, rng, build_linkage_tree(evaluator.case.positions),
                           int(payload["generation"]), {k: list(v) for k, v in payload["traces"].items()})
    logger.info(f"Resumed optimizer state at generation {state.generation} from {path}")
    return state
