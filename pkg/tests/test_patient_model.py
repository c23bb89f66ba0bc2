import math
from dataclasses import replace

import numpy as np
import pytest

from components.exceptions import CaseValidationError, ContractError, PhantomConstructionError
from components.patient_model import (Box, ChannelKind, Ellipsoid, PatientCase, Roi, RoiKind, RoiShape, Slab,
                                      case_hash, derive_seed, generate_phantom, nearest_neighbor_map,
                                      sample_dc_point_sets, sample_dc_points, split_mid_top, validate_case)


def _single_roi_case(base: PatientCase, name: str, primitive) -> PatientCase:
    shape = RoiShape((primitive,))
    return replace(base, rois=(Roi(name, RoiKind.TARGET, shape, shape.volume_cm3()),))


def test_analytic_volumes():
    ball = RoiShape((Ellipsoid((0.0, 0.0, 0.0), (10.0, 10.0, 10.0)),))
    box = RoiShape((Box((5.0, 5.0, 5.0), (5.0, 10.0, 1.0)),))
    assert ball.is_analytic
    assert ball.volume_cm3() == pytest.approx(4.0 / 3.0 * math.pi)
    assert box.volume_cm3() == pytest.approx(0.4)


def test_monte_carlo_volume_matches_analytic_union():
    # two disjoint balls: the union is not analytic, its volume is the sum
    union = RoiShape((Ellipsoid((0.0, 0.0, 0.0), (5.0, 5.0, 5.0)), Ellipsoid((20.0, 0.0, 0.0), (5.0, 5.0, 5.0))))
    assert not union.is_analytic
    expected = 2 * 4.0 / 3.0 * math.pi * 125 / 1000
    assert union.volume_cm3() == pytest.approx(expected, rel=0.01)


def test_slab_is_closed_below_and_open_above():
    slab = Slab((0.0, 0.0, 0.0), (0.0, 0.0, 1.0), 0.0, 30.0)
    inside = slab.contains(np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 29.999], [0.0, 0.0, 30.0], [0.0, 0.0, -1e-9]]))
    assert inside.tolist() == [True, True, False, False]


def test_sample_dc_points_stay_inside_box(toy_case):
    case = _single_roi_case(toy_case, "box", Box((0.0, 50.0, 0.0), (2.0, 3.0, 4.0)))
    points = sample_dc_points(case, "box", 5000, seed=3).points
    assert points.shape == (5000, 3)
    assert np.all(np.abs(points - np.array([0.0, 50.0, 0.0])) <= np.array([2.0, 3.0, 4.0]))


def test_sample_dc_points_are_uniform_in_a_ball(toy_case):
    center = np.array([0.0, 60.0, 0.0])
    case = _single_roi_case(toy_case, "ball", Ellipsoid(tuple(center), (1.0, 1.0, 1.0)))
    points = sample_dc_points(case, "ball", 100_000, seed=5).points
    assert np.all(np.linalg.norm(points - center, axis=1) <= 1.0)
    assert np.all(np.abs(points.mean(axis=0) - center) < 0.02)
    assert np.mean(points[:, 0] > center[0]) == pytest.approx(0.5, abs=0.01)


def test_sample_dc_points_is_deterministic(toy_case):
    first = sample_dc_points(toy_case, "bladder", 100, seed=9)
    second = sample_dc_points(toy_case, "bladder", 100, seed=9)
    np.testing.assert_array_equal(first.points, second.points)
    assert not np.array_equal(first.points, sample_dc_points(toy_case, "bladder", 100, seed=10).points)


def test_sample_dc_point_sets_use_per_roi_seeds(toy_case):
    sets = sample_dc_point_sets(toy_case, 2500, seed=1)
    assert set(sets) == {"CTV_HR", "bladder"}
    assert all(len(s) == 2500 for s in sets.values())
    assert sets["CTV_HR"].seed == derive_seed(1, "CTV_HR")


@pytest.mark.parametrize("n, roi", [(0, "bladder"), (10, "liver")])
def test_sample_dc_points_rejects_bad_requests(toy_case, n, roi):
    with pytest.raises(ContractError):
        sample_dc_points(toy_case, roi, n, seed=1)


def test_derive_seed_is_stable_and_label_specific():
    assert derive_seed(4, "dc-2500") == derive_seed(4, "dc-2500")
    assert derive_seed(4, "dc-2500") != derive_seed(4, "dc-20000")
    assert derive_seed(4, "dc-2500") != derive_seed(5, "dc-2500")


def test_nearest_neighbor_map_stays_within_channels(toy_case):
    neighbors = nearest_neighbor_map(toy_case)
    assert neighbors[0] == 1
    assert neighbors[8] == 7
    assert neighbors[9] == 10 and neighbors[10] == 9
    channel_of = {d.id: d.channel_id for d in toy_case.dwell_positions}
    assert all(channel_of[i] == channel_of[int(j)] for i, j in enumerate(neighbors))


def test_validate_case_names_the_offending_field(toy_case):
    with pytest.raises(CaseValidationError) as excinfo:
        validate_case(replace(toy_case, prescribed_dose_gy=0.0))
    assert excinfo.value.field == "prescribed_dose_gy"

    needles_only = tuple(c for c in toy_case.channels if c.kind == ChannelKind.NEEDLE)
    with pytest.raises(CaseValidationError) as excinfo:
        validate_case(replace(toy_case, channels=needles_only))
    assert excinfo.value.field == "channels"

    wrong_volume = tuple(replace(r, volume_cm3=r.volume_cm3 * 1.01) if r.name == "bladder" else r for r in toy_case.rois)
    with pytest.raises(CaseValidationError) as excinfo:
        validate_case(replace(toy_case, rois=wrong_volume))
    assert excinfo.value.field == "rois"


def test_validate_case_rejects_roi_touching_a_dwell(toy_case):
    blob = RoiShape((Ellipsoid((0.0, 0.0, 5.0), (3.0, 3.0, 3.0)),))
    rois = toy_case.rois + (Roi("GTV_RES", RoiKind.TARGET, blob, blob.volume_cm3()),)
    with pytest.raises(CaseValidationError, match="GTV_RES"):
        validate_case(replace(toy_case, rois=rois))


def test_split_mid_top_lists_missing_parents(toy_case):
    with pytest.raises(CaseValidationError) as excinfo:
        split_mid_top(toy_case)
    message = str(excinfo.value)
    assert "CTV_IR" in message and "normal_tissue_envelope" in message
    assert "CTV_HR" not in message.split("missing")[1]


def test_case_hash_is_stable(toy_case):
    assert case_hash(toy_case) == case_hash(replace(toy_case))
    assert case_hash(toy_case) != case_hash(replace(toy_case, name="other"))


def test_easy_phantom_layout(easy_phantom):
    kinds = [c.kind for c in easy_phantom.channels]
    assert kinds.count(ChannelKind.INTRACAVITARY_TANDEM) == 1
    assert kinds.count(ChannelKind.OVOID) == 2
    assert ChannelKind.NEEDLE not in kinds
    assert easy_phantom.needle_channel_ids == ()
    assert set(easy_phantom.roi_names) == {"CTV_HR", "CTV_IR", "GTV_RES", "bladder", "rectum", "sigmoid", "bowel",
                                           "mid_CTV_IR", "mid_normal_tissue", "top_normal_tissue"}
    assert all(r.volume_cm3 > 0 for r in easy_phantom.rois)


def test_mid_regions_stay_inside_the_ctv_ir_slab(easy_phantom):
    axis = np.asarray(easy_phantom.applicator_axis.direction)
    lo, hi = easy_phantom.roi("CTV_IR").shape.axial_extent(axis)
    for name in ("mid_CTV_IR", "mid_normal_tissue"):
        points = sample_dc_points(easy_phantom, name, 4000, seed=2).points
        s = points @ axis
        assert np.all((s >= lo) & (s < hi))
    mid_ir = sample_dc_points(easy_phantom, "mid_CTV_IR", 4000, seed=2).points
    assert easy_phantom.roi("CTV_IR").shape.contains(mid_ir).all()

    _, hr_hi = easy_phantom.roi("CTV_HR").shape.axial_extent(axis)
    top = sample_dc_points(easy_phantom, "top_normal_tissue", 4000, seed=2).points
    assert np.all(top @ axis >= max(hr_hi, hi))


def test_mid_ctv_ir_is_the_whole_slab_cut(easy_phantom):
    axis = np.asarray(easy_phantom.applicator_axis.direction)
    ir = easy_phantom.roi("CTV_IR").shape
    mid = easy_phantom.roi("mid_CTV_IR").shape
    lo, hi = ir.axial_extent(axis)
    box_lo, box_hi = ir.bounds()
    points = np.random.default_rng(5).uniform(box_lo, box_hi, size=(200_000, 3))
    s = points @ axis
    expected = ir.contains(points) & (s >= lo) & (s < hi)
    assert np.array_equal(mid.contains(points), expected)
    # CTV_HR lies inside CTV_IR and stays part of the cut
    in_hr = easy_phantom.roi("CTV_HR").shape.contains(points) & expected
    assert in_hr.any() and mid.contains(points[in_hr]).all()


def test_mid_normal_tissue_volume_accounting(easy_phantom):
    mid_nt = easy_phantom.roi("mid_normal_tissue")
    slab = mid_nt.shape.slab
    envelope = easy_phantom.normal_tissue_envelope
    occupied = RoiShape(mid_nt.shape.exclude)

    lo, hi = envelope.bounds()
    points = np.random.default_rng(17).uniform(lo, hi, size=(400_000, 3))
    in_slab = envelope.contains(points) & slab.contains(points)
    box_cm3 = float(np.prod(hi - lo)) / 1000.0
    taken_cm3 = box_cm3 * np.mean(in_slab & occupied.contains(points))
    slab_cm3 = box_cm3 * np.mean(in_slab)
    assert mid_nt.volume_cm3 + taken_cm3 == pytest.approx(slab_cm3, rel=0.01)


def test_phantom_rejects_overlapping_oars(phantom_presets):
    spec = phantom_presets["easy"]
    rois = tuple(replace(r, primitive=Ellipsoid((0.0, 40.0, 5.0), (15.0, 10.0, 20.0))) if r.name == "rectum" else r
                 for r in spec.rois)
    with pytest.raises(PhantomConstructionError, match="rectum"):
        generate_phantom(replace(spec, rois=rois), seed=1)


def test_phantom_rejects_too_many_needles(phantom_presets):
    with pytest.raises(PhantomConstructionError, match="needle_count"):
        generate_phantom(replace(phantom_presets["easy"], needle_count=9), seed=1)


def _needle_positions(case: PatientCase) -> np.ndarray:
    return case.positions[np.concatenate([case.channel_dwell_indices[c] for c in case.needle_channel_ids])]


@pytest.fixture(scope="module")
def medium_pair(phantom_presets):
    spec = phantom_presets["medium"]
    return generate_phantom(spec, seed=1), generate_phantom(spec, seed=2)


@pytest.mark.slow
def test_medium_phantom_has_about_eighty_dwells(medium_pair):
    case, _ = medium_pair
    assert 70 <= case.n_dwells <= 90
    assert len(case.needle_channel_ids) == 6


@pytest.mark.slow
def test_phantom_seed_only_moves_needles(medium_pair):
    first, second = medium_pair
    assert [r.shape for r in first.rois] == [r.shape for r in second.rois]
    assert [r.volume_cm3 for r in first.rois] == [r.volume_cm3 for r in second.rois]
    assert not np.allclose(_needle_positions(first), _needle_positions(second))
    tandem = first.channel_dwell_indices[first.channels[0].id]
    np.testing.assert_array_equal(first.positions[tandem], second.positions[tandem])
