import numpy as np
import pytest

from components.dvi import Direction, DviKind, DviSpec
from components.exceptions import ConfigError, ContractError
from components.objective_model import (AimGroup, AimProtocol, AimSpec, ConstraintConfig, ObjectiveMode,
                                        ObjectivePair, ProtocolConfig, active_aims, all_aims_met, apply_dtmr,
                                        check_catheter_contribution, compute_deltas, compute_objectives,
                                        compute_weights, default_protocol, delta, dtmr_penalty, embrace_satisfied,
                                        initial_aim_state, protocol_from_dict, protocol_to_dict, validate_protocol)

UP, DOWN = Direction.MAXIMIZE, Direction.MINIMIZE


def _fixed(kind, target, param, direction, group, aspiration) -> AimSpec:
    return AimSpec(DviSpec(kind, target, param, direction), group, AimProtocol.EMBRACE, 1, aspiration, aspiration, False)


def _toy_coverage_protocol() -> ProtocolConfig:
    aims = (
        _fixed(DviKind.D_V, "CTV_HR", 0.90, UP, AimGroup.COVERAGE, 100.0),
        _fixed(DviKind.D_V, "CTV_HR", 0.98, UP, AimGroup.COVERAGE, 100.0),
        _fixed(DviKind.D_V, "GTV_RES", 0.98, UP, AimGroup.COVERAGE, 100.0),
    )
    return ProtocolConfig(aims)


def _default_values(protocol: ProtocolConfig, offset: float) -> dict:
    """DVI values sitting `offset` on the satisfied side of every strict aspiration."""
    values = {}
    for aim in protocol.aims:
        sign = 1.0 if aim.dvi.direction == UP else -1.0
        values.setdefault(aim.dvi.label, aim.aspiration_strict + sign * offset)
    return values


def test_delta_sign_convention(protocol):
    d90 = protocol.aim("coverage.D90_CTV_HR")
    bladder = protocol.aim("sparing.D2cc_bladder")
    assert delta(d90, None, 115.0) == pytest.approx(4.0)
    assert delta(d90, None, 111.0) == 0.0
    assert delta(bladder, None, 80.0) == pytest.approx(-2.0)
    with pytest.raises(ContractError):
        delta(d90, None, float("nan"))


def test_delta_uses_current_aspiration_and_refuses_eliminated(protocol):
    aim = protocol.aim("sparing.V100_mid_normal_tissue")
    state = initial_aim_state(protocol)
    state.entries[aim.aim_id].current_aspiration = 1.15
    assert delta(aim, state, 1.0) == pytest.approx(0.15)
    state.entries[aim.aim_id].eliminated = True
    with pytest.raises(ContractError):
        delta(aim, state, 1.0)


def test_weights_worked_example():
    np.testing.assert_allclose(compute_weights([2.0, -1.0, -5.0]), np.array([1.0, 10.0, 100.0]) / 111.0, rtol=1e-12)
    assert compute_weights([3.0]).tolist() == [1.0]
    with pytest.raises(ContractError):
        compute_weights([])


def test_weights_ties_keep_aim_order():
    np.testing.assert_allclose(compute_weights([1.0, 1.0]), [1.0 / 11.0, 10.0 / 11.0])


def test_weights_for_nine_aims():
    weights = compute_weights(-np.arange(9.0))
    assert weights.max() == pytest.approx(1e8 / sum(10.0 ** k for k in range(9)), rel=1e-12)
    assert weights.argmax() == 8


@pytest.mark.parametrize("size", range(1, 10))
def test_weights_contract_on_random_deltas(rng, size):
    deltas = rng.normal(0.0, 5.0, size)
    weights = compute_weights(deltas)
    assert weights.sum() == pytest.approx(1.0, abs=1e-12)
    worst = int(np.argmin(deltas))
    assert all(weights[worst] > w for i, w in enumerate(weights) if i != worst)


def test_lci_worked_example():
    protocol = _toy_coverage_protocol()
    values = {"D90_CTV_HR": 102.0, "D98_CTV_HR": 99.0, "D98_GTV_RES": 95.0}
    pair = compute_objectives(values, protocol, None)
    assert pair.lci == pytest.approx(-508.0 / 111.0, abs=1e-12)
    # no sparing aims in this protocol
    assert pair.lsi == 0.0


def test_objectives_match_sorted_weight_oracle(protocol, rng):
    values = _default_values(protocol, 0.0)
    for label in values:
        values[label] += rng.normal(0.0, 5.0)
    deltas = compute_deltas(values, protocol, None)
    pair = compute_objectives(values, protocol, None)
    for group, objective in ((AimGroup.COVERAGE, pair.lci), (AimGroup.SPARING, pair.lsi)):
        margins = sorted((d for k, d in deltas.items() if protocol.aim(k).group == group), reverse=True)
        raw = [10.0 ** k for k in range(len(margins))]
        assert objective == pytest.approx(sum(w * m for w, m in zip(raw, margins)) / sum(raw), rel=1e-12)


def test_objectives_positive_when_all_aims_met(protocol):
    pair = compute_objectives(_default_values(protocol, 0.5), protocol, None)
    assert pair.lci > 0 and pair.lsi > 0


def test_missing_dvi_names_the_aim(protocol):
    values = _default_values(protocol, 1.0)
    del values["D2cc_rectum"]
    with pytest.raises(ContractError, match="sparing.D2cc_rectum"):
        compute_objectives(values, protocol, None)


def test_active_aims_by_mode(protocol):
    state = initial_aim_state(protocol)
    assert len(active_aims(protocol, state, ObjectiveMode.FULL)) == 15
    assert len(active_aims(protocol, state, ObjectiveMode.EMBRACE_ONLY)) == 10
    state.entries["sparing.V100_top_normal_tissue"].eliminated = True
    ids = [a.aim_id for a in active_aims(protocol, state)]
    assert "sparing.V100_top_normal_tissue" not in ids and len(ids) == 14


def test_default_protocol_layout(protocol):
    assert len(protocol.embrace_aims) == 10
    assert [a.priority for a in protocol.added_aims] == [2, 3, 3, 4, 4]
    assert all(a.adjustable for a in protocol.added_aims)
    validate_protocol(protocol)


def test_protocol_json_round_trip(protocol):
    assert protocol_from_dict(protocol_to_dict(protocol)) == protocol


def test_protocol_rejects_bad_definitions(protocol):
    raw = protocol_to_dict(protocol)
    raw["aims"][0]["direction"] = "sideways"
    with pytest.raises(ConfigError):
        protocol_from_dict(raw)
    with pytest.raises(ConfigError):
        AimSpec(DviSpec(DviKind.V_D, "CTV_HR", 100.0, UP), AimGroup.COVERAGE, AimProtocol.ADDED, 2, 90.0, 99.9, True)
    with pytest.raises(ConfigError):
        ProtocolConfig(protocol.aims + (protocol.aims[0],))


def test_validate_protocol_requires_paired_d90(protocol):
    unpaired = ProtocolConfig(tuple(a for a in protocol.aims if a.aim_id != "sparing.D90_CTV_HR"))
    with pytest.raises(ConfigError):
        validate_protocol(unpaired)


def test_validate_protocol_against_case(protocol, toy_case, toy_protocol):
    validate_protocol(toy_protocol, toy_case)
    with pytest.raises(ConfigError, match="rectum"):
        validate_protocol(protocol, toy_case)


def test_dtmr_uniform_plan_has_no_penalty():
    neighbors = np.array([1, 0, 1])
    assert dtmr_penalty(np.full(3, 4.0), neighbors, ConstraintConfig()) == 0.0


def test_dtmr_hand_computed_example():
    # one pair (1 s, 0.5 s) in a 10-dwell plan: t_lo = 0.5, r = 2, f = 2/5.5
    times = np.full(10, 5.0)
    times[0], times[1] = 1.0, 0.5
    neighbors = np.full(10, -1)
    neighbors[0] = 1
    penalty = dtmr_penalty(times, neighbors, ConstraintConfig())
    assert penalty == pytest.approx((2.0 - 0.3636) / 10.0, abs=1e-3)
    assert penalty == pytest.approx((2.0 - 2.0 / 5.5) / 10.0, abs=1e-12)


def test_dtmr_floor_and_cutoff():
    config = ConstraintConfig()
    # ratio 1.3 at t_lo = 5: 0.3 > 2/10, violating
    assert dtmr_penalty(np.array([5.0, 6.5]), np.array([1, 0]), config) == pytest.approx(2 * (1.3 - 0.2) / 2)
    # ratio 1.1 at t_lo = 5: 0.1 <= 0.2, fine
    assert dtmr_penalty(np.array([5.0, 5.5]), np.array([1, 0]), config) == 0.0
    # zero times are floored at ratio_floor
    zero = dtmr_penalty(np.array([0.0, 0.0]), np.array([1, 0]), config)
    assert zero == 0.0


def test_apply_dtmr_shifts_both_objectives():
    shifted = apply_dtmr(ObjectivePair(1.0, 2.0), 3.0, ConstraintConfig(dtmr_alpha=0.01))
    assert (shifted.lci, shifted.lsi, shifted.constraint) == pytest.approx((0.97, 1.97, 3.0))


def test_catheter_contribution_rule():
    config = ConstraintConfig()
    needles = [np.array([0]), np.array([1])]
    assert not check_catheter_contribution([25.0, 0.0, 75.0], needles, config)
    assert check_catheter_contribution([15.0, 14.0, 71.0], needles, config)
    assert not check_catheter_contribution([16.0, 16.0, 68.0], needles, config)
    assert check_catheter_contribution([50.0, 50.0], [], config)
    assert check_catheter_contribution([0.0, 0.0, 0.0], needles, config)


def test_constraint_config_validation():
    with pytest.raises(ConfigError):
        ConstraintConfig(cr_single=0.5, cr_total=0.3)
    with pytest.raises(ConfigError):
        ConstraintConfig(dtmr_alpha=0.0)


def test_all_aims_met_is_strict():
    assert all_aims_met({"a": 0.1, "b": 0.1})
    assert not all_aims_met({"a": 0.1, "b": 0.0})


def test_embrace_satisfied_checks_base_aims_only(protocol):
    values = _default_values(protocol, 0.5)
    assert embrace_satisfied(values, protocol)
    values["V100_mid_normal_tissue"] = 50.0
    assert embrace_satisfied(values, protocol)
    values["D2cc_bladder"] = 78.0
    assert not embrace_satisfied(values, protocol)
