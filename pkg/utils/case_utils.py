import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Union

import numpy as np

from components import dependencies
from components.exceptions import CaseParseError, CaseValidationError
from components.patient_model import (ApplicatorAxis, Channel, ChannelKind, DCPointSet, DEFAULT_CLEARANCE_MM,
                                      DwellPosition, PatientCase, ReferencePoint, Roi, RoiKind, case_hash,
                                      case_to_dict, derive_seed, primitive_from_dict, shape_from_dict, validate_case)
from utils import export_utils

# Initialize logger
logger = dependencies.setup_logging()
logger = logging.getLogger('app.case_utils')

REQUIRED_KEYS = ("prescribed_dose_gy", "channels", "dwell_positions", "rois", "reference_points", "applicator_axis")
PathLike = Union[str, Path]


def _vector(value: Any, field: str):
    if not isinstance(value, (list, tuple)) or len(value) != 3:
        raise CaseParseError("expected a list of 3 numbers", field=field)
    try:
        return tuple(float(v) for v in value)
    except (TypeError, ValueError) as e:
        raise CaseParseError(f"non-numeric coordinate - {e}", field=field) from e


def case_from_dict(data: Mapping[str, Any]) -> PatientCase:
    """
    Build and validate a case from its JSON form.

    Raises:
        CaseValidationError: If a required key is missing or an invariant fails.
        CaseParseError: If a value has the wrong shape or type.
    """
    if not isinstance(data, Mapping):
        raise CaseParseError("case document must be a JSON object")
    for key in REQUIRED_KEYS:
        if key not in data:
            raise CaseValidationError("required field is missing", field=key)

    dose = data["prescribed_dose_gy"]
    if isinstance(dose, bool) or not isinstance(dose, (int, float)):
        raise CaseParseError("must be a number", field="prescribed_dose_gy")

    try:
        channels = tuple(Channel(int(c["id"]), ChannelKind(c["kind"]), tuple(int(d) for d in c["dwell_ids"]))
                         for c in data["channels"])
    except (KeyError, TypeError, ValueError) as e:
        raise CaseParseError(f"invalid channel - {e}", field="channels") from e
    try:
        dwells = tuple(DwellPosition(int(d["id"]), int(d["channel_id"]), _vector(d["position"], "dwell_positions"))
                       for d in data["dwell_positions"])
    except (KeyError, TypeError, ValueError) as e:
        raise CaseParseError(f"invalid dwell position - {e}", field="dwell_positions") from e
    try:
        rois = tuple(Roi(r["name"], RoiKind(r["kind"]), shape_from_dict(r["shape"]), float(r["volume_cm3"]))
                     for r in data["rois"])
    except (KeyError, TypeError, ValueError) as e:
        raise CaseParseError(f"invalid ROI - {e}", field="rois") from e
    try:
        points = tuple(ReferencePoint(str(p["name"]), _vector(p["position"], "reference_points"))
                       for p in data["reference_points"])
    except (KeyError, TypeError) as e:
        raise CaseParseError(f"invalid reference point - {e}", field="reference_points") from e
    try:
        axis = data["applicator_axis"]
        applicator_axis = ApplicatorAxis(_vector(axis["origin"], "applicator_axis"), _vector(axis["direction"], "applicator_axis"))
    except (KeyError, TypeError) as e:
        raise CaseParseError(f"invalid applicator axis - {e}", field="applicator_axis") from e
    try:
        envelope = data.get("normal_tissue_envelope")
        envelope = primitive_from_dict(envelope) if envelope is not None else None
        keep_out = tuple(primitive_from_dict(p) for p in data.get("keep_out", []))
    except (KeyError, TypeError, ValueError) as e:
        raise CaseParseError(f"invalid primitive - {e}", field="normal_tissue_envelope") from e

    case = PatientCase(
        prescribed_dose_gy=float(dose),
        channels=channels,
        dwell_positions=dwells,
        rois=rois,
        reference_points=points,
        applicator_axis=applicator_axis,
        normal_tissue_envelope=envelope,
        keep_out=keep_out,
        clearance_mm=float(data.get("clearance_mm", DEFAULT_CLEARANCE_MM)),
        name=str(data.get("name", "case")),
    )
    return validate_case(case)


def load_case(path: PathLike) -> PatientCase:
    """
    Load and validate a patient case file.

    Args:
        path (PathLike): Path to the case JSON file.

    Returns:
        PatientCase: The validated case.

    Raises:
        FileNotFoundError: If the file does not exist.
        CaseParseError: On malformed JSON (with line) or malformed fields.
        CaseValidationError: On a missing field or a violated invariant.
    """
    try:
        with open(path, "r") as case_file:
            text = case_file.read()
        data = json.loads(text)
    except FileNotFoundError as fnf_error:
        logger.error(f"Case file not found - {fnf_error}")
        raise
    except json.JSONDecodeError as json_error:
        logger.error(f"Invalid JSON format in case file - {json_error}")
        raise CaseParseError(json_error.msg, line=json_error.lineno) from json_error

    try:
        case = case_from_dict(data)
    except (CaseParseError, CaseValidationError) as e:
        logger.error(f"Invalid case file {path} - {e}")
        raise
    logger.info(f"Loaded case '{case.name}' from {path}: {case.n_dwells} dwell positions, {len(case.rois)} ROIs")
    return case


def save_case(case: PatientCase, path: PathLike) -> Path:
    """Write a case as canonical, byte-stable JSON."""
    return export_utils.atomic_write_json(path, case_to_dict(case))


def _cache_file(cache_dir: PathLike, digest: str, roi_name: str, n: int, seed: int) -> Path:
    return Path(cache_dir) / f"dc_{digest[:16]}_{roi_name}_{n}_{seed}.npz"


def load_dc_points(cache_dir: PathLike, case: PatientCase, roi_names: Sequence[str], n: int, seed: int) -> Optional[Dict[str, DCPointSet]]:
    """
    Load cached DC point sets; None when any of them is missing or unreadable.
    """
    digest = case_hash(case)
    sets: Dict[str, DCPointSet] = {}
    try:
        for name in roi_names:
            path = _cache_file(cache_dir, digest, name, n, seed)
            if not path.exists():
                return None
            with np.load(path) as archive:
                points = archive["points"]
                derived = int(archive["seed"])
            if points.shape != (n, 3) or derived != derive_seed(seed, name):
                logger.warning(f"Ignoring stale DC-point cache entry {path}")
                return None
            sets[name] = DCPointSet(name, points, derived)
    except (OSError, ValueError, KeyError) as e:
        logger.error(f"Failed to read DC-point cache - {e}")
        return None
    logger.debug(f"Loaded {len(sets)} DC point sets from cache")
    return sets


def save_dc_points(cache_dir: PathLike, case: PatientCase, point_sets: Mapping[str, DCPointSet], n: int, seed: int) -> None:
    """Cache DC point sets as .npz files keyed by case hash, ROI, count and seed."""
    digest = case_hash(case)
    Path(cache_dir).mkdir(parents=True, exist_ok=True)
    for name, point_set in point_sets.items():
        target = _cache_file(cache_dir, digest, name, n, seed)
        fd, tmp_name = tempfile.mkstemp(dir=target.parent, suffix=".npz")
        try:
            with os.fdopen(fd, "wb") as handle:
                np.savez_compressed(handle, points=point_set.points, seed=np.int64(point_set.seed))
            os.replace(tmp_name, target)
        except OSError as e:
            logger.error(f"Failed to write DC-point cache {target} - {e}")
            if os.path.exists(tmp_name):
                os.remove(tmp_name)
            raise
