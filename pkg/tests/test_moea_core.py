import json
from dataclasses import replace

import numpy as np
import pytest

from components.dose_engine import build_dose_model
from components.exceptions import ArchiveEmptyError, ConfigError, ContractError
from components.moea_core import (ClusterModel, ClusterRole, ElitistArchive, OptimizerConfig, PlanEvaluator,
                                  Solution, archive_from, build_evaluator, build_linkage_tree, checkpoint_fidelity,
                                  cluster_selection, create_state, crowding_distance, dominates,
                                  estimate_distributions, gom_variation, init_population, load_checkpoint,
                                  non_dominated_fronts, reevaluate_solutions, run_generations, save_checkpoint,
                                  select, update_archive)
from components.objective_model import ObjectiveMode, ObjectivePair
from components.patient_model import sample_dc_point_sets


def _solution(lci: float, lsi: float, feasible: bool = True) -> Solution:
    return Solution(np.zeros(1), None, {}, ObjectivePair(lci, lsi), feasible)


def _mutually_non_dominated(objs: np.ndarray) -> bool:
    pairs = [ObjectivePair(*row) for row in objs]
    return not any(dominates(a, b) for a in pairs for b in pairs if a is not b)


def _upgma_sets(points: np.ndarray) -> set:
    """Naive average-linkage clustering returning every merged set except the root."""
    clusters = {i: [i] for i in range(len(points))}
    dist = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2)
    merged = set()
    next_id = len(points)
    while len(clusters) > 1:
        keys = sorted(clusters)
        best = None
        for a_pos, a in enumerate(keys):
            for b in keys[a_pos + 1:]:
                d = dist[np.ix_(clusters[a], clusters[b])].mean()
                if best is None or d < best[0]:
                    best = (d, a, b)
        _, a, b = best
        members = clusters.pop(a) + clusters.pop(b)
        clusters[next_id] = members
        next_id += 1
        if clusters and len(members) < len(points):
            merged.add(frozenset(members))
    return merged


def test_optimizer_config_selection_size():
    assert OptimizerConfig().selection_size == 33
    with pytest.raises(ConfigError):
        OptimizerConfig(population_size=10, selection_fraction=0.2, n_clusters=5)
    with pytest.raises(ConfigError):
        OptimizerConfig(init_low=3.0, init_high=2.0)


def test_dominates_is_strict():
    assert dominates(ObjectivePair(1.0, 1.0), ObjectivePair(1.0, 0.5))
    assert not dominates(ObjectivePair(1.0, 1.0), ObjectivePair(1.0, 1.0))
    assert not dominates(ObjectivePair(2.0, 0.0), ObjectivePair(0.0, 2.0))


def test_two_front_selection():
    objs = np.array([[3.0, 0.0], [2.0, 2.0], [0.0, 3.0], [2.0, -1.0], [1.0, 1.0], [-1.0, 2.0]])
    fronts = non_dominated_fronts(objs)
    assert [f.tolist() for f in fronts] == [[0, 1, 2], [3, 4, 5]]
    assert sorted(select(objs, 0.5).tolist()) == [0, 1, 2]
    # the cut front is filled by crowding distance: both extremes are infinite, lower index first
    assert select(objs, 0.7).tolist() == [0, 1, 2, 3]


def test_selection_of_identical_solutions_is_by_index():
    objs = np.zeros((96, 2))
    assert select(objs, 0.35).tolist() == list(range(33))


def test_crowding_distance_extremes_are_infinite():
    distance = crowding_distance(np.array([[0.0, 3.0], [1.0, 2.0], [3.0, 0.0]]))
    assert np.isinf(distance[0]) and np.isinf(distance[2])
    assert distance[1] == pytest.approx(2.0)


def test_cluster_sizes_and_roles(rng):
    objs = rng.normal(size=(33, 2))
    clusters = cluster_selection(objs, 5)
    assert [len(c.members) for c in clusters] == [14] * 5
    assert clusters[0].role == ClusterRole.EXTREME_LCI and clusters[1].role == ClusterRole.EXTREME_LSI
    assert clusters[0].leader == int(np.argmax(objs[:, 0]))
    assert all(c.leader in c.members for c in clusters)

    single = cluster_selection(objs, 1)
    assert len(single) == 1 and single[0].members.tolist() == list(range(33))
    with pytest.raises(ContractError):
        cluster_selection(objs[:3], 5)


def test_degenerate_objectives_fall_back_to_round_robin():
    clusters = cluster_selection(np.ones((10, 2)), 3)
    assert [len(c.members) for c in clusters] == [7, 7, 7]
    covered = set().union(*(set(c.members.tolist()) for c in clusters))
    assert covered == set(range(10))


def test_collinear_objectives_give_contiguous_clusters():
    objs = np.column_stack([np.arange(12.0), -np.arange(12.0)])
    for cluster in cluster_selection(objs, 4):
        assert len(cluster.members) == 6
        assert np.all(np.diff(cluster.members) == 1)


def test_linkage_tree_small_cases():
    assert [s.tolist() for s in build_linkage_tree(np.zeros((1, 3))).linkage_sets] == [[0]]
    tree = build_linkage_tree(np.array([[0.0, 0, 0], [1.0, 0, 0], [10.0, 0, 0], [11.0, 0, 0]]))
    assert len(tree) == 6
    assert {tuple(s) for s in tree.linkage_sets[4:]} == {(0, 1), (2, 3)}


def test_linkage_tree_matches_naive_upgma(rng):
    points = rng.uniform(0, 50, size=(12, 3))
    tree = build_linkage_tree(points)
    assert [s.tolist() for s in tree.linkage_sets[:12]] == [[i] for i in range(12)]
    assert {frozenset(s.tolist()) for s in tree.linkage_sets[12:]} == _upgma_sets(points)


def test_estimates_match_two_pass_statistics(rng, toy_case):
    tree = build_linkage_tree(toy_case.positions)
    times = rng.uniform(0, 10, size=(30, toy_case.n_dwells))
    model = estimate_distributions(times, tree)
    for subset, mean, cov in zip(tree.linkage_sets, model.means, model.covariances):
        block = times[:, subset]
        oracle_mean = np.array([sum(col) / len(col) for col in block.T])
        oracle_cov = np.array([[sum((block[:, a] - oracle_mean[a]) * (block[:, b] - oracle_mean[b])) / len(block)
                                for b in range(len(subset))] for a in range(len(subset))])
        np.testing.assert_allclose(mean, oracle_mean, rtol=1e-12)
        np.testing.assert_allclose(cov, oracle_cov, rtol=1e-12, atol=1e-12)


def test_two_member_variance_and_degenerate_cluster(toy_case):
    tree = build_linkage_tree(toy_case.positions)
    a, b = np.full(toy_case.n_dwells, 2.0), np.full(toy_case.n_dwells, 5.0)
    model = estimate_distributions(np.vstack([a, b]), tree)
    assert model.covariances[0][0, 0] == pytest.approx((5.0 - 2.0) ** 2 / 4)

    flat = estimate_distributions(np.vstack([a, a, a]), tree)
    for cov, factor in zip(flat.covariances, flat.factors):
        assert np.all(np.diag(cov) > 0)
        np.testing.assert_allclose(factor @ factor.T, cov, rtol=1e-9, atol=1e-20)


def test_evaluator_rejects_missing_dose_rows(toy_case, toy_protocol, kernel):
    point_sets = sample_dc_point_sets(toy_case, 10, seed=1, roi_names=["CTV_HR"])
    with pytest.raises(ContractError):
        PlanEvaluator(build_dose_model(toy_case, point_sets, kernel), toy_protocol)


def test_partial_evaluation_and_revert(toy_evaluator, rng):
    solution = toy_evaluator.evaluate(rng.uniform(0, 10, toy_evaluator.n_dwells))
    dose_before = solution.dose.copy()
    objectives_before = solution.objectives
    change = toy_evaluator.try_partial(solution, np.array([1, 2]), np.array([30.0, 0.5]))
    assert toy_evaluator.verify(solution)
    toy_evaluator.revert(solution, change)
    np.testing.assert_allclose(solution.dose, dose_before, rtol=1e-12)
    assert solution.objectives == objectives_before
    # values beyond t_max are clipped
    toy_evaluator.try_partial(solution, np.array([0]), np.array([1e6]))
    assert solution.dwell_times[0] == toy_evaluator.t_max


def test_archive_accepts_and_rejects():
    archive = ElitistArchive(10)
    assert archive.offer(_solution(0.0, 0.0))
    assert not archive.offer(_solution(-1.0, -1.0))
    assert not archive.offer(_solution(0.0, 0.0))
    assert not archive.offer(_solution(5.0, 5.0, feasible=False))
    assert archive.offer(_solution(1.0, -0.5))
    assert archive.offer(_solution(1.0, 1.0))
    assert len(archive) == 1
    assert archive.best("min").lci == 1.0
    with pytest.raises(ArchiveEmptyError):
        ElitistArchive(3).best()


def test_update_archive_stores_a_copy():
    archive = ElitistArchive(5)
    solution = _solution(0.5, 0.5)
    assert update_archive(archive, solution)
    solution.dwell_times[0] = 9.0
    assert archive.members[0].dwell_times[0] == 0.0
    assert not update_archive(archive, _solution(0.4, 0.4))


def test_archive_stays_bounded_and_non_dominated(rng):
    archive = ElitistArchive(1000)
    x = rng.uniform(0, 1, 10_000)
    for lci, lsi in zip(x, 1.0 - x + rng.normal(0, 0.01, x.size)):
        archive.offer(_solution(lci, lsi))
    assert len(archive) <= 1000
    assert _mutually_non_dominated(archive.objectives)


def test_archive_overflow_keeps_extremes():
    archive = ElitistArchive(20)
    x = np.linspace(0.0, 1.0, 101)
    for lci in x:
        archive.offer(_solution(lci, 1.0 - lci))
    objs = archive.objectives
    assert len(archive) == 20
    assert objs[:, 0].max() == 1.0 and objs[:, 1].max() == 1.0
    assert objs.min(axis=1).max() == pytest.approx(0.5)


def test_remove_dominated_after_objective_change():
    archive = archive_from([_solution(0.0, 1.0), _solution(1.0, 0.0)], 10)
    archive.members[0].objectives = ObjectivePair(2.0, 1.0)
    assert archive.remove_dominated() == 1
    assert len(archive) == 1 and archive.members[0].lci == 2.0


def test_init_population_is_deterministic(small_config, toy_evaluator):
    first = init_population(small_config, toy_evaluator, np.random.default_rng(3))
    second = init_population(small_config, toy_evaluator, np.random.default_rng(3))
    assert all(np.array_equal(a.dwell_times, b.dwell_times) for a, b in zip(first, second))
    assert all(s.cr_feasible for s in first)


def test_init_population_without_needles_never_resamples(small_config, toy_case_without_needles, toy_protocol, kernel):
    evaluator = build_evaluator(toy_case_without_needles, toy_protocol, 100, seed=2, kernel=kernel)
    population = init_population(small_config, evaluator, np.random.default_rng(8))
    draws = np.random.default_rng(8)
    for solution in population:
        expected = draws.uniform(small_config.init_low, small_config.init_high, evaluator.n_dwells)
        np.testing.assert_array_equal(solution.dwell_times, expected)


def test_init_population_scales_needles_after_retry_cap(small_config, toy_case, toy_protocol, kernel):
    evaluator = build_evaluator(toy_case, toy_protocol, 100, seed=2, kernel=kernel)
    config = replace(small_config, init_retry_cap=1, population_size=40)
    population = init_population(config, evaluator, np.random.default_rng(1))
    assert all(s.cr_feasible for s in population)


def test_gom_keeps_plan_when_sample_equals_current(toy_evaluator, rng):
    tree = build_linkage_tree(toy_evaluator.case.positions)
    solution = toy_evaluator.evaluate(rng.uniform(0, 10, toy_evaluator.n_dwells))
    times = solution.dwell_times.copy()
    model = ClusterModel([times[s] for s in tree.linkage_sets], [np.zeros((len(s), len(s))) for s in tree.linkage_sets],
                         [np.zeros((len(s), len(s))) for s in tree.linkage_sets])
    assert gom_variation(solution, model, tree, toy_evaluator, rng) == 0
    np.testing.assert_array_equal(solution.dwell_times, times)


@pytest.mark.parametrize("role", list(ClusterRole))
def test_gom_never_worsens_under_its_acceptance_metric(toy_evaluator, rng, role):
    tree = build_linkage_tree(toy_evaluator.case.positions)
    donors = rng.uniform(0, 20, size=(10, toy_evaluator.n_dwells))
    donors[:, 9:] *= 0.05
    model = estimate_distributions(donors, tree, role)
    start = rng.uniform(0, 10, toy_evaluator.n_dwells)
    start[9:] = 0.1
    solution = toy_evaluator.evaluate(start)
    before = solution.objectives
    gom_variation(solution, model, tree, toy_evaluator, rng)
    after = solution.objectives
    assert solution.cr_feasible
    assert toy_evaluator.verify(solution)
    if role == ClusterRole.EXTREME_LCI:
        assert after.lci >= before.lci
    elif role == ClusterRole.EXTREME_LSI:
        assert after.lsi >= before.lsi
    else:
        assert after.lci >= before.lci and after.lsi >= before.lsi


def test_run_generations(small_config, toy_evaluator):
    state = create_state(small_config, toy_evaluator, seed=5)
    before = [(m.lci, m.lsi) for m in state.archive.members]
    run_generations(state, 0)
    assert [(m.lci, m.lsi) for m in state.archive.members] == before

    run_generations(state, 4)
    assert state.generation == 4
    assert all(len(v) == 4 for v in state.traces.values())
    assert np.all(np.diff(state.traces["best_lci"]) >= 0)
    assert _mutually_non_dominated(state.archive.objectives)
    assert all(m.cr_feasible and m.dose is None for m in state.archive.members)
    with pytest.raises(ContractError):
        run_generations(state, -1)


def test_run_generations_defaults_to_configured_count(small_config, toy_evaluator):
    state = create_state(small_config, toy_evaluator, seed=5)
    run_generations(state)
    assert state.generation == small_config.generations == 4


def test_traces_improve_and_archive_stays_bounded(small_config, toy_evaluator):
    config = replace(small_config, archive_capacity=6)
    state = create_state(config, toy_evaluator, seed=8)
    for _ in range(6):
        run_generations(state, 1)
        assert len(state.archive) <= config.archive_capacity
        assert _mutually_non_dominated(state.archive.objectives)
    assert np.all(np.diff(state.traces["best_min"]) >= 0)
    assert np.all(np.diff(state.traces["best_lci"]) >= 0)
    assert max(state.traces["archive_size"]) <= config.archive_capacity


def test_runs_are_reproducible(small_config, toy_evaluator):
    first = create_state(small_config, toy_evaluator, seed=5)
    run_generations(first, 3)
    second = create_state(small_config, toy_evaluator, seed=5)
    run_generations(second, 3)
    np.testing.assert_array_equal(first.archive.objectives, second.archive.objectives)


def test_cached_doses_survive_verification(small_config, toy_evaluator):
    state = create_state(replace(small_config, verify_every=1), toy_evaluator, seed=1)
    run_generations(state, 2)
    assert all(toy_evaluator.verify(s) for s in state.population)


def test_dose_drift_is_a_contract_error(monkeypatch, small_config, toy_evaluator):
    state = create_state(replace(small_config, verify_every=1), toy_evaluator, seed=1)
    monkeypatch.setattr(toy_evaluator, "verify", lambda solution: False)
    with pytest.raises(ContractError, match="drifted"):
        run_generations(state, 1)


def test_reevaluation_at_same_fidelity_has_no_fallback(small_config, toy_evaluator):
    state = create_state(small_config, toy_evaluator, seed=2)
    run_generations(state, 1)
    fresh, fallback = reevaluate_solutions(state.archive.members, toy_evaluator)
    assert len(fresh) == len(state.archive)
    np.testing.assert_allclose(fallback, 0.0, atol=1e-9)
    assert all(s.dose is None for s in fresh)


def test_checkpoint_round_trip(small_config, toy_evaluator, toy_case, toy_case_without_needles, toy_protocol, kernel,
                               tmp_path):
    state = create_state(small_config, toy_evaluator, seed=3)
    run_generations(state, 2)
    path = save_checkpoint(state, tmp_path / "checkpoint.json")
    fidelity = checkpoint_fidelity(path)
    assert (fidelity["n_dc"], fidelity["dc_seed"], fidelity["mode"]) == (300, 11, ObjectiveMode.FULL)
    assert fidelity["t_max"] == small_config.t_max

    evaluator = build_evaluator(toy_case, toy_protocol, 300, seed=11, kernel=kernel)
    restored = load_checkpoint(path, evaluator)
    assert restored.generation == 2
    assert restored.traces == state.traces
    assert restored.rng.bit_generator.state == state.rng.bit_generator.state
    for a, b in zip(restored.population, state.population):
        np.testing.assert_array_equal(a.dwell_times, b.dwell_times)
    assert len(restored.archive) == len(state.archive)

    other = build_evaluator(toy_case_without_needles, toy_protocol, 50, seed=1, kernel=kernel)
    with pytest.raises(ConfigError):
        load_checkpoint(path, other)

    payload = json.loads(path.read_text())
    del payload["fidelity"]
    bare = tmp_path / "bare.json"
    bare.write_text(json.dumps(payload))
    with pytest.raises(ConfigError, match="fidelity"):
        checkpoint_fidelity(bare)

    payload = json.loads(path.read_text())
    payload["version"] = 99
    path.write_text(json.dumps(payload))
    with pytest.raises(ConfigError):
        load_checkpoint(path, evaluator)
