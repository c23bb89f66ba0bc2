"""
Patient geometry: dwell positions, channels, ROIs and reference points.

Shapes are unions of posed primitives (ellipsoids, boxes, ellipsoidal shells),
optionally minus excluded primitives and cut by an axial slab. Lengths are in
millimeters, volumes in cm³. Synthetic phantoms stand in for delineated
patient anatomy.
"""

import hashlib
import json
import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property, lru_cache
from typing import Any, ClassVar, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist

from components import dependencies
from components.exceptions import CaseValidationError, ContractError, PhantomConstructionError

# Initialize logger
logger = dependencies.setup_logging()
logger = logging.getLogger('app.patient_model')

Vec3 = Tuple[float, float, float]
Mat3 = Tuple[Vec3, Vec3, Vec3]

IDENTITY: Mat3 = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
MM3_PER_CM3 = 1000.0
VOLUME_SAMPLES = 1_000_000
VOLUME_SEED = 7_192_019
VOLUME_CHUNK = 250_000
OVERLAP_SAMPLES = 20_000
DEFAULT_CLEARANCE_MM = 1.0


class ChannelKind(str, Enum):
    INTRACAVITARY_TANDEM = "intracavitary_tandem"
    OVOID = "ovoid"
    NEEDLE = "needle"


class RoiKind(str, Enum):
    TARGET = "target"
    OAR = "oar"
    NORMAL_TISSUE = "normal_tissue"


DELINEATED_ROIS = ("CTV_HR", "CTV_IR", "GTV_RES", "bladder", "rectum", "sigmoid", "bowel")
DERIVED_ROIS = ("mid_CTV_IR", "mid_normal_tissue", "top_normal_tissue")
ROI_NAMES = DELINEATED_ROIS + DERIVED_ROIS
TARGET_ROIS = ("CTV_HR", "CTV_IR", "GTV_RES")
OAR_ROIS = ("bladder", "rectum", "sigmoid", "bowel")


def _vec3(value: Sequence[float], name: str = "vector") -> Vec3:
    if len(value) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(value)}")
    out = tuple(float(v) for v in value)
    if not all(math.isfinite(v) for v in out):
        raise ValueError(f"{name} must be finite, got {out}")
    return out  # type: ignore[return-value]


def _mat3(value: Sequence[Sequence[float]]) -> Mat3:
    rows = tuple(_vec3(row, "rotation row") for row in value)
    if len(rows) != 3:
        raise ValueError("rotation must be a 3x3 matrix")
    arr = np.asarray(rows)
    if not np.allclose(arr.T @ arr, np.eye(3), atol=1e-9):
        raise ValueError("rotation must be orthonormal")
    return rows  # type: ignore[return-value]


def _to_local(points: np.ndarray, center: Vec3, rotation: Mat3) -> np.ndarray:
    # Columns of the rotation are the local axes in world coordinates.
    return (np.atleast_2d(points) - np.asarray(center)) @ np.asarray(rotation)


def _support(center: Vec3, rotation: Mat3, radii: Vec3, axis: np.ndarray, box: bool) -> Tuple[float, float]:
    """Extent of an ellipsoid (or box) along a unit axis."""
    local_axis = np.asarray(rotation).T @ axis
    if box:
        half = float(np.sum(np.abs(local_axis) * np.asarray(radii)))
    else:
        half = float(np.sqrt(np.sum((local_axis * np.asarray(radii)) ** 2)))
    mid = float(np.dot(np.asarray(center), axis))
    return mid - half, mid + half


@dataclass(frozen=True)
class Ellipsoid:
    center: Vec3
    radii: Vec3
    rotation: Mat3 = IDENTITY
    type_name: ClassVar[str] = "ellipsoid"

    def contains(self, points: np.ndarray) -> np.ndarray:
        local = _to_local(points, self.center, self.rotation) / np.asarray(self.radii)
        return np.einsum("ij,ij->i", local, local) <= 1.0

    def volume_mm3(self) -> float:
        a, b, c = self.radii
        return 4.0 / 3.0 * math.pi * a * b * c

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        rot = np.asarray(self.rotation)
        half = np.sqrt(((rot * np.asarray(self.radii)) ** 2).sum(axis=1))
        return np.asarray(self.center) - half, np.asarray(self.center) + half

    def extent(self, axis: np.ndarray) -> Tuple[float, float]:
        return _support(self.center, self.rotation, self.radii, axis, box=False)


@dataclass(frozen=True)
class Box:
    center: Vec3
    half_sizes: Vec3
    rotation: Mat3 = IDENTITY
    type_name: ClassVar[str] = "box"

    def contains(self, points: np.ndarray) -> np.ndarray:
        local = np.abs(_to_local(points, self.center, self.rotation))
        return np.all(local <= np.asarray(self.half_sizes), axis=1)

    def volume_mm3(self) -> float:
        hx, hy, hz = self.half_sizes
        return 8.0 * hx * hy * hz

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        half = np.abs(np.asarray(self.rotation)) @ np.asarray(self.half_sizes)
        return np.asarray(self.center) - half, np.asarray(self.center) + half

    def extent(self, axis: np.ndarray) -> Tuple[float, float]:
        return _support(self.center, self.rotation, self.half_sizes, axis, box=True)


@dataclass(frozen=True)
class EllipsoidShell:
    center: Vec3
    outer_radii: Vec3
    inner_radii: Vec3
    rotation: Mat3 = IDENTITY
    type_name: ClassVar[str] = "ellipsoid_shell"

    def _outer(self) -> Ellipsoid:
        return Ellipsoid(self.center, self.outer_radii, self.rotation)

    def contains(self, points: np.ndarray) -> np.ndarray:
        local = _to_local(points, self.center, self.rotation)
        outer = local / np.asarray(self.outer_radii)
        inner = local / np.asarray(self.inner_radii)
        return (np.einsum("ij,ij->i", outer, outer) <= 1.0) & (np.einsum("ij,ij->i", inner, inner) > 1.0)

    def volume_mm3(self) -> float:
        return self._outer().volume_mm3() - Ellipsoid(self.center, self.inner_radii, self.rotation).volume_mm3()

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        return self._outer().bounds()

    def extent(self, axis: np.ndarray) -> Tuple[float, float]:
        return self._outer().extent(axis)


Primitive = Union[Ellipsoid, Box, EllipsoidShell]
_PRIMITIVE_TYPES = {cls.type_name: cls for cls in (Ellipsoid, Box, EllipsoidShell)}


def primitive_from_dict(data: Dict[str, Any]) -> Primitive:
    """
    Build a primitive from its JSON form.

    Args:
        data (Dict[str, Any]): Mapping with a 'type' key and the primitive's fields.

    Returns:
        Primitive: The validated primitive.

    Raises:
        ValueError: On unknown types, missing fields or non-positive sizes.
    """
    kind = data.get("type")
    if kind not in _PRIMITIVE_TYPES:
        raise ValueError(f"unknown primitive type '{kind}'")
    rotation = _mat3(data["rotation"]) if data.get("rotation") is not None else IDENTITY
    center = _vec3(data["center"], "center")
    if kind == "ellipsoid":
        prim: Primitive = Ellipsoid(center, _vec3(data["radii"], "radii"), rotation)
        sizes = prim.radii
    elif kind == "box":
        prim = Box(center, _vec3(data["half_sizes"], "half_sizes"), rotation)
        sizes = prim.half_sizes
    else:
        prim = EllipsoidShell(center, _vec3(data["outer_radii"], "outer_radii"), _vec3(data["inner_radii"], "inner_radii"), rotation)
        sizes = prim.inner_radii
        if any(i >= o for i, o in zip(prim.inner_radii, prim.outer_radii)):
            raise ValueError("ellipsoid_shell inner radii must be smaller than the outer radii")
    if any(s <= 0 for s in sizes):
        raise ValueError(f"{kind} sizes must be positive")
    return prim


def primitive_to_dict(prim: Primitive) -> Dict[str, Any]:
    out: Dict[str, Any] = {"type": prim.type_name, "center": list(prim.center)}
    if isinstance(prim, Ellipsoid):
        out["radii"] = list(prim.radii)
    elif isinstance(prim, Box):
        out["half_sizes"] = list(prim.half_sizes)
    else:
        out["outer_radii"] = list(prim.outer_radii)
        out["inner_radii"] = list(prim.inner_radii)
    if prim.rotation != IDENTITY:
        out["rotation"] = [list(row) for row in prim.rotation]
    return out


@dataclass(frozen=True)
class Slab:
    """Region between two planes perpendicular to `axis`; closed below, open above."""

    origin: Vec3
    axis: Vec3
    lower: float
    upper: Optional[float] = None

    def coordinate(self, points: np.ndarray) -> np.ndarray:
        return (np.atleast_2d(points) - np.asarray(self.origin)) @ np.asarray(self.axis)

    def contains(self, points: np.ndarray) -> np.ndarray:
        s = self.coordinate(points)
        inside = s >= self.lower
        if self.upper is not None:
            inside &= s < self.upper
        return inside


@dataclass(frozen=True)
class RoiShape:
    include: Tuple[Primitive, ...]
    exclude: Tuple[Primitive, ...] = ()
    slab: Optional[Slab] = None

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        inside = np.zeros(len(pts), dtype=bool)
        for prim in self.include:
            inside |= prim.contains(pts)
        for prim in self.exclude:
            if not inside.any():
                break
            inside &= ~prim.contains(pts)
        if self.slab is not None:
            inside &= self.slab.contains(pts)
        return inside

    @property
    def is_analytic(self) -> bool:
        return len(self.include) == 1 and not self.exclude and self.slab is None

    def bounds(self) -> Tuple[np.ndarray, np.ndarray]:
        lows, highs = zip(*(prim.bounds() for prim in self.include))
        lo, hi = np.min(lows, axis=0), np.max(highs, axis=0)
        if self.slab is not None:
            axis = np.asarray(self.slab.axis)
            k = int(np.argmax(np.abs(axis)))
            if abs(abs(axis[k]) - 1.0) < 1e-12:
                sign = np.sign(axis[k])
                base = self.slab.origin[k]
                bounds_along = [base + sign * self.slab.lower]
                if self.slab.upper is not None:
                    bounds_along.append(base + sign * self.slab.upper)
                if sign > 0:
                    lo[k] = max(lo[k], bounds_along[0])
                    if len(bounds_along) > 1:
                        hi[k] = min(hi[k], bounds_along[1])
                else:
                    hi[k] = min(hi[k], bounds_along[0])
                    if len(bounds_along) > 1:
                        lo[k] = max(lo[k], bounds_along[1])
        return lo, hi

    def axial_extent(self, axis: Sequence[float]) -> Tuple[float, float]:
        """Extent of the included primitives along `axis` (exclusions ignored)."""
        unit = np.asarray(axis, dtype=float)
        spans = [prim.extent(unit) for prim in self.include]
        return min(s[0] for s in spans), max(s[1] for s in spans)

    def volume_cm3(self) -> float:
        return _shape_volume_mm3(self) / MM3_PER_CM3

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Rejection sampling from the bounding box; exactly uniform within the shape."""
        lo, hi = self.bounds()
        if np.any(hi <= lo):
            raise ContractError("shape has an empty bounding box")
        box_volume = float(np.prod(hi - lo))
        fraction = min(1.0, max(_shape_volume_mm3(self) / box_volume, 1e-3))
        batch = int(min(VOLUME_CHUNK, max(1024, math.ceil(1.2 * n / fraction))))
        accepted: List[np.ndarray] = []
        count = 0
        attempts = 0
        while count < n:
            attempts += 1
            if attempts > 10_000:
                raise ContractError("rejection sampling made no progress; shape volume too small")
            candidates = rng.uniform(lo, hi, size=(batch, 3))
            inside = candidates[self.contains(candidates)]
            accepted.append(inside)
            count += len(inside)
        return np.concatenate(accepted)[:n]


def shape_from_dict(data: Dict[str, Any]) -> RoiShape:
    slab = None
    if data.get("slab") is not None:
        s = data["slab"]
        slab = Slab(_vec3(s["origin"], "slab origin"), _vec3(s["axis"], "slab axis"), float(s["lower"]),
                    None if s.get("upper") is None else float(s["upper"]))
    include = tuple(primitive_from_dict(p) for p in data["include"])
    if not include:
        raise ValueError("shape needs at least one included primitive")
    return RoiShape(include, tuple(primitive_from_dict(p) for p in data.get("exclude", [])), slab)


def shape_to_dict(shape: RoiShape) -> Dict[str, Any]:
    out: Dict[str, Any] = {"include": [primitive_to_dict(p) for p in shape.include]}
    if shape.exclude:
        out["exclude"] = [primitive_to_dict(p) for p in shape.exclude]
    if shape.slab is not None:
        out["slab"] = {"origin": list(shape.slab.origin), "axis": list(shape.slab.axis),
                       "lower": shape.slab.lower, "upper": shape.slab.upper}
    return out


@lru_cache(maxsize=256)
def _shape_volume_mm3(shape: RoiShape) -> float:
    if shape.is_analytic:
        return shape.include[0].volume_mm3()
    lo, hi = shape.bounds()
    if np.any(hi <= lo):
        return 0.0
    rng = np.random.default_rng(VOLUME_SEED)
    inside = 0
    remaining = VOLUME_SAMPLES
    while remaining > 0:
        size = min(VOLUME_CHUNK, remaining)
        inside += int(shape.contains(rng.uniform(lo, hi, size=(size, 3))).sum())
        remaining -= size
    return float(np.prod(hi - lo)) * inside / VOLUME_SAMPLES


@dataclass(frozen=True)
class DwellPosition:
    id: int
    channel_id: int
    position: Vec3


@dataclass(frozen=True)
class Channel:
    id: int
    kind: ChannelKind
    dwell_ids: Tuple[int, ...]


@dataclass(frozen=True)
class Roi:
    name: str
    kind: RoiKind
    shape: RoiShape
    volume_cm3: float


@dataclass(frozen=True)
class ReferencePoint:
    name: str
    position: Vec3


@dataclass(frozen=True)
class ApplicatorAxis:
    origin: Vec3
    direction: Vec3


@dataclass(frozen=True)
class PatientCase:
    prescribed_dose_gy: float
    channels: Tuple[Channel, ...]
    dwell_positions: Tuple[DwellPosition, ...]
    rois: Tuple[Roi, ...]
    reference_points: Tuple[ReferencePoint, ...]
    applicator_axis: ApplicatorAxis
    normal_tissue_envelope: Optional[Primitive] = None
    keep_out: Tuple[Primitive, ...] = ()
    clearance_mm: float = DEFAULT_CLEARANCE_MM
    name: str = "case"

    @property
    def n_dwells(self) -> int:
        return len(self.dwell_positions)

    @property
    def roi_names(self) -> Tuple[str, ...]:
        return tuple(r.name for r in self.rois)

    def roi(self, name: str) -> Roi:
        for roi in self.rois:
            if roi.name == name:
                return roi
        raise KeyError(f"ROI '{name}' not present in case '{self.name}'")

    def has_roi(self, name: str) -> bool:
        return any(r.name == name for r in self.rois)

    def reference_point(self, name: str) -> ReferencePoint:
        for point in self.reference_points:
            if point.name == name:
                return point
        raise KeyError(f"reference point '{name}' not present in case '{self.name}'")

    @cached_property
    def positions(self) -> np.ndarray:
        return np.array([d.position for d in self.dwell_positions], dtype=float).reshape(-1, 3)

    @cached_property
    def dwell_index(self) -> Dict[int, int]:
        return {d.id: i for i, d in enumerate(self.dwell_positions)}

    @cached_property
    def channel_dwell_indices(self) -> Dict[int, np.ndarray]:
        return {c.id: np.array([self.dwell_index[d] for d in c.dwell_ids], dtype=int) for c in self.channels}

    @cached_property
    def needle_channel_ids(self) -> Tuple[int, ...]:
        return tuple(c.id for c in self.channels if c.kind == ChannelKind.NEEDLE)


@dataclass(frozen=True, eq=False)
class DCPointSet:
    roi_name: str
    points: np.ndarray
    seed: int

    def __len__(self) -> int:
        return len(self.points)


def validate_case(case: PatientCase) -> PatientCase:
    """
    Check every PatientCase invariant.

    Args:
        case (PatientCase): The case to validate.

    Returns:
        PatientCase: The same case, for chaining.

    Raises:
        CaseValidationError: Naming the offending field on the first violation.
    """
    if not (isinstance(case.prescribed_dose_gy, (int, float)) and case.prescribed_dose_gy > 0):
        raise CaseValidationError("must be positive", field="prescribed_dose_gy")
    if not case.channels:
        raise CaseValidationError("at least one channel is required", field="channels")
    if not any(c.kind == ChannelKind.INTRACAVITARY_TANDEM for c in case.channels):
        raise CaseValidationError("at least one intracavitary channel is required", field="channels")

    ids = [d.id for d in case.dwell_positions]
    if len(set(ids)) != len(ids):
        raise CaseValidationError("dwell position ids must be unique", field="dwell_positions")
    for dwell in case.dwell_positions:
        if not all(math.isfinite(v) for v in dwell.position):
            raise CaseValidationError(f"dwell {dwell.id} has a non-finite position", field="dwell_positions")

    channel_ids = [c.id for c in case.channels]
    if len(set(channel_ids)) != len(channel_ids):
        raise CaseValidationError("channel ids must be unique", field="channels")
    known = set(ids)
    for channel in case.channels:
        if not channel.dwell_ids:
            raise CaseValidationError(f"channel {channel.id} has no dwell positions", field="channels")
        missing = [d for d in channel.dwell_ids if d not in known]
        if missing:
            raise CaseValidationError(f"channel {channel.id} references unknown dwell ids {missing}", field="channels")
    for dwell in case.dwell_positions:
        if dwell.channel_id not in channel_ids:
            raise CaseValidationError(f"dwell {dwell.id} references unknown channel {dwell.channel_id}", field="dwell_positions")

    names = [r.name for r in case.rois]
    if len(set(names)) != len(names):
        raise CaseValidationError("ROI names must be unique", field="rois")
    for roi in case.rois:
        if not roi.volume_cm3 > 0:
            raise CaseValidationError(f"ROI '{roi.name}' must have a positive volume", field="rois")
        expected = roi.shape.volume_cm3()
        if abs(expected - roi.volume_cm3) > 1e-6 * max(expected, 1e-12):
            raise CaseValidationError(
                f"ROI '{roi.name}' volume {roi.volume_cm3} cm3 does not match its shape ({expected} cm3)", field="rois")

    point_names = [p.name for p in case.reference_points]
    if len(set(point_names)) != len(point_names):
        raise CaseValidationError("reference point names must be unique", field="reference_points")

    direction = np.asarray(case.applicator_axis.direction)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise CaseValidationError("direction must be a unit vector", field="applicator_axis")

    if case.clearance_mm < 0:
        raise CaseValidationError("must be non-negative", field="clearance_mm")
    if case.n_dwells and case.rois:
        samples = _clearance_samples(case.positions, case.clearance_mm)
        for roi in case.rois:
            hits = roi.shape.contains(samples)
            if hits.any():
                dwell = case.dwell_positions[int(np.flatnonzero(hits)[0]) // len(_CLEARANCE_DIRECTIONS)]
                raise CaseValidationError(
                    f"ROI '{roi.name}' lies within {case.clearance_mm} mm of dwell position {dwell.id}", field="rois")
    return case


_CLEARANCE_DIRECTIONS = np.array(
    [(0.0, 0.0, 0.0)] + [
        tuple(np.array(v) / np.linalg.norm(v))
        for v in ((i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1))
        if any(v)
    ]
)


def _clearance_samples(positions: np.ndarray, clearance: float) -> np.ndarray:
    return (positions[:, None, :] + clearance * _CLEARANCE_DIRECTIONS[None, :, :]).reshape(-1, 3)


@dataclass(frozen=True)
class RoiTemplate:
    name: str
    kind: RoiKind
    primitive: Primitive


@dataclass(frozen=True)
class PhantomSpec:
    """Parameters of a synthetic cervix phantom; lengths in millimeters."""

    name: str
    rois: Tuple[RoiTemplate, ...]
    envelope: Primitive
    reference_points: Tuple[ReferencePoint, ...]
    prescribed_dose_gy: float = 7.0
    tandem_start_mm: float = 0.0
    tandem_end_mm: float = 50.0
    tandem_step_mm: float = 2.5
    ovoid_offset_mm: float = 15.0
    ovoid_z_start_mm: float = -14.0
    ovoid_z_end_mm: float = -4.0
    ovoid_step_mm: float = 2.5
    needle_count: int = 0
    needle_radius_mm: float = 20.0
    needle_z_start_mm: float = -5.0
    needle_z_end_mm: float = 30.0
    needle_step_mm: float = 5.0
    needle_radial_jitter_mm: float = 2.0
    needle_angular_jitter_deg: float = 3.0
    needle_depth_jitter_mm: float = 2.5
    channel_radius_mm: float = 1.5
    clearance_mm: float = DEFAULT_CLEARANCE_MM


# Needle slots alternate right/left around the applicator (degrees from +x).
NEEDLE_SLOT_ANGLES_DEG = (0.0, 180.0, 35.0, 215.0, -35.0, 145.0, 70.0, 250.0)
MAX_NEEDLES = len(NEEDLE_SLOT_ANGLES_DEG)
APPLICATOR_AXIS = ApplicatorAxis((0.0, 0.0, 0.0), (0.0, 0.0, 1.0))


def phantom_spec_from_dict(data: Dict[str, Any]) -> PhantomSpec:
    """Build a PhantomSpec from its JSON preset form."""
    rois = tuple(
        RoiTemplate(r["name"], RoiKind(r["kind"]), primitive_from_dict(r["primitive"])) for r in data["rois"]
    )
    points = tuple(ReferencePoint(p["name"], _vec3(p["position"], "reference point")) for p in data.get("reference_points", []))
    scalars = {k: v for k, v in data.items() if k not in ("rois", "envelope", "reference_points")}
    return PhantomSpec(rois=rois, envelope=primitive_from_dict(data["envelope"]), reference_points=points, **scalars)


def _axial_positions(start: float, end: float, step: float) -> np.ndarray:
    count = int(math.floor((end - start) / step + 1e-9)) + 1
    return start + step * np.arange(count)


def _rotation_about_z(angle_rad: float) -> Mat3:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return ((c, -s, 0.0), (s, c, 0.0), (0.0, 0.0, 1.0))


def _check_spec(spec: PhantomSpec) -> None:
    positive = {
        "prescribed_dose_gy": spec.prescribed_dose_gy, "tandem_step_mm": spec.tandem_step_mm,
        "ovoid_step_mm": spec.ovoid_step_mm, "needle_step_mm": spec.needle_step_mm,
        "needle_radius_mm": spec.needle_radius_mm, "channel_radius_mm": spec.channel_radius_mm,
    }
    for name, value in positive.items():
        if not value > 0:
            raise PhantomConstructionError(f"phantom '{spec.name}': {name} must be positive, got {value}")
    if spec.tandem_end_mm < spec.tandem_start_mm:
        raise PhantomConstructionError(f"phantom '{spec.name}': tandem_end_mm precedes tandem_start_mm")
    if not 0 <= spec.needle_count <= MAX_NEEDLES:
        raise PhantomConstructionError(f"phantom '{spec.name}': needle_count must be in [0, {MAX_NEEDLES}], got {spec.needle_count}")
    names = [r.name for r in spec.rois]
    missing = [n for n in DELINEATED_ROIS if n not in names]
    if missing:
        raise PhantomConstructionError(f"phantom '{spec.name}': missing ROI templates {missing}")


def _shapes_overlap(a: RoiShape, b: RoiShape) -> bool:
    lo_a, hi_a = a.bounds()
    lo_b, hi_b = b.bounds()
    if np.any(hi_a < lo_b) or np.any(hi_b < lo_a):
        return False
    samples = a.sample(OVERLAP_SAMPLES, np.random.default_rng(VOLUME_SEED))
    return bool(b.contains(samples).any())


def generate_phantom(spec: PhantomSpec, seed: int) -> PatientCase:
    """
    Generate a synthetic cervix phantom with a tandem, two ovoids and optional needles.

    ROI shapes depend only on the phantom parameters. The seed jitters needle placement inside
    fixed keep-out slots, so two seeds yield identical ROIs and different dwells.

    Args:
        spec (PhantomSpec): Phantom parameters.
        seed (int): Seed for needle jitter.

    Returns:
        PatientCase: Validated case with all ten ROIs including the mid/top subdivisions.

    Raises:
        PhantomConstructionError: If the parameters are invalid or mandatory ROIs overlap.
    """
    _check_spec(spec)
    rng = np.random.default_rng(seed)
    pad = spec.channel_radius_mm + spec.clearance_mm

    channels: List[Channel] = []
    dwells: List[DwellPosition] = []
    keep_out: List[Primitive] = []

    def add_channel(kind: ChannelKind, coords: np.ndarray) -> None:
        channel_id = len(channels)
        first = len(dwells)
        for offset, xyz in enumerate(coords):
            dwells.append(DwellPosition(first + offset, channel_id, tuple(float(v) for v in xyz)))
        channels.append(Channel(channel_id, kind, tuple(range(first, first + len(coords)))))

    tandem_z = _axial_positions(spec.tandem_start_mm, spec.tandem_end_mm, spec.tandem_step_mm)
    add_channel(ChannelKind.INTRACAVITARY_TANDEM, np.column_stack([np.zeros_like(tandem_z), np.zeros_like(tandem_z), tandem_z]))
    keep_out.append(Box((0.0, 0.0, float(tandem_z.mean())),
                        (pad, pad, float((tandem_z[-1] - tandem_z[0]) / 2 + pad))))

    ovoid_z = _axial_positions(spec.ovoid_z_start_mm, spec.ovoid_z_end_mm, spec.ovoid_step_mm)
    for side in (1.0, -1.0):
        x = side * spec.ovoid_offset_mm
        add_channel(ChannelKind.OVOID, np.column_stack([np.full_like(ovoid_z, x), np.zeros_like(ovoid_z), ovoid_z]))
        keep_out.append(Box((x, 0.0, float(ovoid_z.mean())), (pad, pad, float((ovoid_z[-1] - ovoid_z[0]) / 2 + pad))))

    needle_z = _axial_positions(spec.needle_z_start_mm, spec.needle_z_end_mm, spec.needle_step_mm)
    for slot in range(spec.needle_count):
        nominal = math.radians(NEEDLE_SLOT_ANGLES_DEG[slot])
        angle = nominal + math.radians(rng.uniform(-spec.needle_angular_jitter_deg, spec.needle_angular_jitter_deg))
        radius = spec.needle_radius_mm + rng.uniform(-spec.needle_radial_jitter_mm, spec.needle_radial_jitter_mm)
        depth = rng.uniform(-spec.needle_depth_jitter_mm, spec.needle_depth_jitter_mm)
        z = needle_z + depth
        add_channel(ChannelKind.NEEDLE, np.column_stack([np.full_like(z, radius * math.cos(angle)),
                                                         np.full_like(z, radius * math.sin(angle)), z]))
        tangential = spec.needle_radius_mm * math.sin(math.radians(spec.needle_angular_jitter_deg)) + spec.needle_radial_jitter_mm
        keep_out.append(Box(
            (spec.needle_radius_mm * math.cos(nominal), spec.needle_radius_mm * math.sin(nominal), float(needle_z.mean())),
            (spec.needle_radial_jitter_mm + pad, tangential + pad,
             float((needle_z[-1] - needle_z[0]) / 2 + spec.needle_depth_jitter_mm + pad)),
            _rotation_about_z(nominal),
        ))

    keep_out_t = tuple(keep_out)
    templates = {r.name: r for r in spec.rois}
    rois: List[Roi] = []
    for name in DELINEATED_ROIS:
        template = templates[name]
        shape = RoiShape((template.primitive,), keep_out_t)
        rois.append(Roi(name, template.kind, shape, shape.volume_cm3()))

    by_name = {r.name: r for r in rois}
    for oar in OAR_ROIS:
        for other in TARGET_ROIS + OAR_ROIS:
            if other == oar or (other in OAR_ROIS and OAR_ROIS.index(other) < OAR_ROIS.index(oar)):
                continue
            if _shapes_overlap(by_name[oar].shape, by_name[other].shape):
                raise PhantomConstructionError(f"phantom '{spec.name}': ROI '{oar}' overlaps ROI '{other}'")

    case = PatientCase(
        prescribed_dose_gy=float(spec.prescribed_dose_gy),
        channels=tuple(channels),
        dwell_positions=tuple(dwells),
        rois=tuple(rois),
        reference_points=spec.reference_points,
        applicator_axis=APPLICATOR_AXIS,
        normal_tissue_envelope=spec.envelope,
        keep_out=keep_out_t,
        clearance_mm=spec.clearance_mm,
        name=f"{spec.name}-seed{seed}",
    )
    case = validate_case(split_mid_top(case))
    logger.info(f"Generated phantom '{case.name}': {case.n_dwells} dwell positions, "
                f"{len(case.needle_channel_ids)} needles, {len(case.rois)} ROIs")
    return case


def split_mid_top(case: PatientCase) -> PatientCase:
    """
    Derive the mid/top subdivisions from CTV_IR, CTV_HR and the normal-tissue envelope.

    The mid slab spans the axial extent of CTV_IR; the top slab starts at the
    higher of the CTV_HR and CTV_IR superior planes, so the two never overlap.
    Normal tissue is the envelope minus every delineated ROI and the applicator
    keep-out. mid_CTV_IR is CTV_IR cut to the mid slab.

    Args:
        case (PatientCase): Case holding at least CTV_IR, CTV_HR and an envelope.

    Returns:
        PatientCase: Copy with mid_CTV_IR, mid_normal_tissue and top_normal_tissue (re)built.

    Raises:
        CaseValidationError: Listing every missing prerequisite.
    """
    missing = [name for name in ("CTV_IR", "CTV_HR") if not case.has_roi(name)]
    if case.normal_tissue_envelope is None:
        missing.append("normal_tissue_envelope")
    if missing:
        raise CaseValidationError(f"cannot split mid/top regions, missing {missing}", field="rois")

    axis = np.asarray(case.applicator_axis.direction, dtype=float)
    origin = np.asarray(case.applicator_axis.origin, dtype=float)
    offset = float(origin @ axis)
    ir = case.roi("CTV_IR")
    hr = case.roi("CTV_HR")
    ir_lo, ir_hi = ir.shape.axial_extent(axis)
    _, hr_hi = hr.shape.axial_extent(axis)

    mid = Slab(case.applicator_axis.origin, case.applicator_axis.direction, ir_lo - offset, ir_hi - offset)
    top = Slab(case.applicator_axis.origin, case.applicator_axis.direction, max(hr_hi, ir_hi) - offset, None)

    delineated = [r for r in case.rois if r.name not in DERIVED_ROIS]
    occupied = tuple(p for r in delineated for p in r.shape.include) + tuple(case.keep_out)
    envelope = (case.normal_tissue_envelope,)

    derived = {
        "mid_CTV_IR": (RoiKind.OAR, RoiShape(ir.shape.include, ir.shape.exclude, mid)),
        "mid_normal_tissue": (RoiKind.NORMAL_TISSUE, RoiShape(envelope, occupied, mid)),
        "top_normal_tissue": (RoiKind.NORMAL_TISSUE, RoiShape(envelope, occupied, top)),
    }
    rois = list(delineated)
    for name, (kind, shape) in derived.items():
        volume = shape.volume_cm3()
        if volume <= 0:
            raise CaseValidationError(f"derived ROI '{name}' is empty", field="rois")
        rois.append(Roi(name, kind, shape, volume))
    logger.debug(f"Split mid/top for '{case.name}': mid slab [{mid.lower:.2f}, {mid.upper:.2f}) mm, top from {top.lower:.2f} mm")
    return replace(case, rois=tuple(rois))


def derive_seed(seed: int, label: str) -> int:
    """Stable child seed for a labelled sub-stream (e.g. one ROI's DC points)."""
    sequence = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(label.encode("utf-8"))])
    return int(sequence.generate_state(1, dtype=np.uint32)[0])


def sample_dc_points(case: PatientCase, roi_name: str, n: int, seed: int) -> DCPointSet:
    """
    Sample dose-calculation points uniformly inside one ROI.

    Args:
        case (PatientCase): Case holding the ROI.
        roi_name (str): ROI to sample.
        n (int): Number of points, at least 1.
        seed (int): Sampler seed.

    Returns:
        DCPointSet: Exactly n points inside the ROI shape.

    Raises:
        ContractError: If n < 1, the ROI is unknown or has zero volume.
    """
    if n < 1:
        raise ContractError(f"number of DC points must be at least 1, got {n}")
    try:
        roi = case.roi(roi_name)
    except KeyError as ke:
        raise ContractError(str(ke)) from ke
    if roi.volume_cm3 <= 0 or roi.shape.volume_cm3() <= 0:
        raise ContractError(f"ROI '{roi_name}' has zero volume")
    points = roi.shape.sample(n, np.random.default_rng(seed))
    return DCPointSet(roi_name, points, int(seed))


def sample_dc_point_sets(case: PatientCase, n: int, seed: int, roi_names: Optional[Sequence[str]] = None) -> Dict[str, DCPointSet]:
    """Sample n DC points in every (or every named) ROI with per-ROI derived seeds."""
    names = list(roi_names) if roi_names is not None else list(case.roi_names)
    sets = {name: sample_dc_points(case, name, n, derive_seed(seed, name)) for name in names}
    logger.info(f"Sampled {n} DC points in each of {len(sets)} ROIs (seed {seed})")
    return sets


def nearest_neighbor_map(case: PatientCase) -> np.ndarray:
    """
    Same-channel Euclidean nearest neighbour of each dwell position.

    Returns:
        np.ndarray: Index array of length n_dwells; -1 where a channel holds a single dwell.
    """
    neighbors = np.full(case.n_dwells, -1, dtype=int)
    positions = case.positions
    for indices in case.channel_dwell_indices.values():
        if len(indices) < 2:
            continue
        dist = cdist(positions[indices], positions[indices])
        np.fill_diagonal(dist, np.inf)
        neighbors[indices] = indices[np.argmin(dist, axis=1)]
    return neighbors


def case_to_dict(case: PatientCase) -> Dict[str, Any]:
    """Canonical JSON-ready form of a case."""
    return {
        "name": case.name,
        "prescribed_dose_gy": case.prescribed_dose_gy,
        "channels": [{"id": c.id, "kind": c.kind.value, "dwell_ids": list(c.dwell_ids)} for c in case.channels],
        "dwell_positions": [{"id": d.id, "channel_id": d.channel_id, "position": list(d.position)} for d in case.dwell_positions],
        "rois": [{"name": r.name, "kind": r.kind.value, "volume_cm3": r.volume_cm3, "shape": shape_to_dict(r.shape)} for r in case.rois],
        "reference_points": [{"name": p.name, "position": list(p.position)} for p in case.reference_points],
        "applicator_axis": {"origin": list(case.applicator_axis.origin), "direction": list(case.applicator_axis.direction)},
        "normal_tissue_envelope": None if case.normal_tissue_envelope is None else primitive_to_dict(case.normal_tissue_envelope),
        "keep_out": [primitive_to_dict(p) for p in case.keep_out],
        "clearance_mm": case.clearance_mm,
    }


def case_hash(case: PatientCase) -> str:
    """Stable SHA-256 over the canonical JSON of the case."""
    payload = json.dumps(case_to_dict(case), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
