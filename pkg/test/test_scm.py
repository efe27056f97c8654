import numpy as np
import pytest

from impact_remediation.scenario import build_neighbor_structure
from impact_remediation.scm import (
    AGGREGATE,
    AGGREGATE_OUTCOME,
    DISAGGREGATED,
    BLOCKS,
    FeatureBundle,
    FitError,
    FittedModel,
    InterventionResponse,
    ModelMismatchError,
    as_intervention,
    build_features,
    counterfactual_privilege,
    design_matrix,
    fit,
    fit_aggregate,
    least_squares,
    load_model,
    predict,
    save_model,
)
from impact_remediation.synth import gen_random
from test.helpers import TOY_PREDICTIONS, all_interventions


@pytest.fixture
def random_truth():
    return gen_random(5, m=60, r=3)


def test_fit_recovers_generating_coefficients(random_truth):
    scenario = random_truth.scenario
    model = fit(scenario, build_neighbor_structure(scenario))

    assert model.kind == DISAGGREGATED
    assert model.outcomes == scenario.groups
    np.testing.assert_allclose(model.coefficients, random_truth.model.coefficients, atol=1e-6)
    assert all(d.rank == 4 * scenario.r for d in model.diagnostics)
    assert all(d.rss < 1e-20 for d in model.diagnostics)


def test_weighted_fit_recovers_noiseless_coefficients(random_truth):
    scenario = random_truth.scenario
    model = fit(scenario, build_neighbor_structure(scenario), weighted=True)
    np.testing.assert_allclose(model.coefficients, random_truth.model.coefficients, atol=1e-6)


def test_fit_aggregate_shape(random_truth):
    scenario = random_truth.scenario
    model = fit_aggregate(scenario, build_neighbor_structure(scenario))
    assert model.kind == AGGREGATE
    assert model.coefficients.shape == (1, len(BLOCKS), scenario.r)
    assert model.categories == scenario.groups


@pytest.mark.parametrize("z", list(TOY_PREDICTIONS))
def test_toy_predictions(toy, toy_neighbors, z):
    predicted = predict(toy.model, toy.scenario, toy_neighbors, z)
    np.testing.assert_allclose(predicted, TOY_PREDICTIONS[z], atol=1e-12)


def test_toy_null_intervention_reproduces_rates(toy, toy_neighbors):
    predicted = predict(toy.model, toy.scenario, toy_neighbors, (0, 0))
    np.testing.assert_allclose(predicted, toy.scenario.rates, atol=1e-15)


def test_response_matches_feature_path(random_truth):
    scenario = random_truth.scenario
    neighbors = build_neighbor_structure(scenario)
    response = InterventionResponse(random_truth.model, scenario, neighbors)
    rng = np.random.default_rng(0)
    for _ in range(10):
        z = rng.integers(0, 2, size=scenario.m)
        features = build_features(scenario, neighbors, z)
        np.testing.assert_allclose(response.max_calc(z), features.max_calc, atol=0)


def test_bounds_contain_every_completion(toy_response):
    for prefix in ((), (0,), (1,)):
        low, high = toy_response.expected_bounds(*toy_response.max_calc_bounds(prefix))
        for z in all_interventions(2):
            if tuple(z[:len(prefix)]) != prefix:
                continue
            predicted = toy_response.predict(z)
            assert (low <= predicted + 1e-15).all() and (predicted <= high + 1e-15).all()


@pytest.mark.parametrize("z", [(1,), (0, 0, 1), (0, 2), [[0, 1]]])
def test_as_intervention_rejects_bad_vectors(z):
    with pytest.raises(ValueError):
        as_intervention(z, 2)


def test_model_file_round_trip_is_exact(tmp_path, random_truth):
    scenario = random_truth.scenario
    neighbors = build_neighbor_structure(scenario)
    for model in (fit(scenario, neighbors), fit_aggregate(scenario, neighbors)):
        path = save_model(model, tmp_path / f"{model.kind}.csv")
        assert load_model(path) == model


def test_model_file_without_header(tmp_path):
    path = tmp_path / "model.csv"
    path.write_text("outcome,block,category,value\nA,alpha,A,0.1\n")
    with pytest.raises(ModelMismatchError, match="missing model header"):
        load_model(path)


def test_model_file_with_missing_coefficient(tmp_path, toy):
    path = save_model(toy.model, tmp_path / "model.csv")
    lines = path.read_text().splitlines()
    path.write_text("\n".join(line for line in lines if line != "A,beta,B,0") + "\n")
    with pytest.raises(ModelMismatchError, match="A/beta/B"):
        load_model(path)


def test_least_squares_rejects_bad_input():
    with pytest.raises(FitError):
        least_squares(np.empty((0, 3)), np.empty(0))
    with pytest.raises(FitError):
        least_squares(np.array([[1.0, np.nan]]), np.array([1.0]))
    with pytest.raises(FitError):
        least_squares(np.eye(2), np.ones(2), weights=np.array([1.0, -1.0]))


def test_least_squares_minimum_norm_on_rank_deficient_design():
    design = np.array([[1.0, 1.0], [2.0, 2.0]])
    coef, diag = least_squares(design, np.array([2.0, 4.0]))
    np.testing.assert_allclose(coef, [1.0, 1.0])
    assert diag.rank == 1


def test_mismatched_groups_are_rejected(toy, toy_neighbors):
    other = FittedModel(("A", "C"), ("A", "C"), toy.model.coefficients)
    with pytest.raises(ModelMismatchError):
        predict(other, toy.scenario, toy_neighbors, (0, 0))


def test_coefficient_shape_is_checked():
    with pytest.raises(ModelMismatchError, match="shape"):
        FittedModel(("A", "B"), ("A", "B"), np.zeros((2, 3, 2)))


def test_privilege_needs_aggregate_model(toy, toy_neighbors):
    with pytest.raises(ModelMismatchError, match="aggregate"):
        counterfactual_privilege(toy.model, toy.scenario, toy_neighbors, (0, 0), 0, (0.5, 0.5))
    response = InterventionResponse(toy.model, toy.scenario, toy_neighbors)
    with pytest.raises(ModelMismatchError):
        response.privilege(response.max_calc(np.zeros(2, dtype=np.int64)))


def test_privilege_vanishes_at_own_proportions(random_truth):
    scenario = random_truth.scenario
    neighbors = build_neighbor_structure(scenario)
    aggregate = fit_aggregate(scenario, neighbors)
    z = np.zeros(scenario.m, dtype=np.int64)
    z[:3] = 1
    for i in range(5):
        value = counterfactual_privilege(aggregate, scenario, neighbors, z, i, scenario.proportions[i])
        assert value == pytest.approx(0.0, abs=1e-12)


def test_privilege_matrix_matches_scalar_form(random_truth):
    scenario = random_truth.scenario
    neighbors = build_neighbor_structure(scenario)
    aggregate = fit_aggregate(scenario, neighbors)
    response = InterventionResponse(aggregate, scenario, neighbors)
    z = np.zeros(scenario.m, dtype=np.int64)
    z[::7] = 1
    matrix = response.privilege(response.max_calc(z))
    for i in (0, 13, 59):
        for k in range(scenario.r):
            one_hot = np.eye(scenario.r)[k]
            expected = counterfactual_privilege(aggregate, scenario, neighbors, z, i, one_hot)
            assert matrix[i, k] == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("rho_prime", [(0.5, 0.6, 0.0), (-0.1, 0.6, 0.5), (1.0, 0.0)])
def test_privilege_rejects_points_off_the_simplex(random_truth, rho_prime):
    scenario = random_truth.scenario
    neighbors = build_neighbor_structure(scenario)
    aggregate = fit_aggregate(scenario, neighbors)
    with pytest.raises(ValueError, match="simplex"):
        counterfactual_privilege(aggregate, scenario, neighbors, np.zeros(scenario.m, dtype=np.int64), 0, rho_prime)


def null_design(scenario):
    zero = np.zeros(scenario.m, dtype=np.int64)
    return design_matrix(build_features(scenario, build_neighbor_structure(scenario), zero))


@pytest.mark.parametrize("seed", range(4))
def test_least_squares_residual_is_orthogonal_to_design(seed):
    scenario = gen_random(seed, m=40, r=3, noise_sd=0.01).scenario
    design = null_design(scenario)
    for k in range(scenario.r):
        target = scenario.rates[:, k]
        coef, _ = least_squares(design, target)
        residual = target - design @ coef
        scale = np.linalg.norm(design) * np.linalg.norm(target)
        assert np.abs(design.T @ residual).max() <= 1e-8 * scale


@pytest.mark.parametrize("m", [60, 8])
def test_duplicated_rows_give_identical_coefficients(m):
    # m=8 with 12 columns is rank-deficient: the minimum-norm solution is unchanged too
    scenario = gen_random(2, m=m, r=3, noise_sd=0.01).scenario
    design = null_design(scenario)
    for k in range(scenario.r):
        target = scenario.rates[:, k]
        coef, _ = least_squares(design, target)
        doubled, _ = least_squares(np.vstack([design, design]), np.concatenate([target, target]))
        np.testing.assert_allclose(doubled, coef, rtol=1e-8, atol=1e-10)


def test_constant_outcome_is_all_intercept():
    m = 6
    features = FeatureBundle(np.zeros(m), np.zeros(m), np.zeros(m), np.ones((m, 1)))
    coef, diag = least_squares(design_matrix(features), np.full(m, 0.3))
    np.testing.assert_allclose(coef, [0.0, 0.0, 0.0, 0.3], atol=1e-12)
    assert diag.rank == 1


def test_fitted_predictions_match_truth_at_random_interventions(random_truth):
    scenario = random_truth.scenario
    neighbors = build_neighbor_structure(scenario)
    fitted = fit(scenario, neighbors)
    rng = np.random.default_rng(11)
    for _ in range(10):
        z = rng.integers(0, 2, size=scenario.m)
        np.testing.assert_allclose(predict(fitted, scenario, neighbors, z),
                                   predict(random_truth.model, scenario, neighbors, z), atol=1e-8)


def aggregate_model(categories, blocks):
    coefficients = np.asarray(blocks, dtype=np.float64).reshape(1, len(BLOCKS), len(categories))
    return FittedModel((AGGREGATE_OUTCOME,), categories, coefficients, kind=AGGREGATE)


def test_privilege_hand_example(toy, toy_neighbors):
    model = aggregate_model(toy.scenario.groups, [[0, 0], [0, 0], [0, 0], [0.3, 0.1]])
    # university 1 has rho = (1, 0)
    value = counterfactual_privilege(model, toy.scenario, toy_neighbors, (0, 0), 0, (0.0, 1.0))
    assert value == pytest.approx(0.2, abs=1e-15)
    assert counterfactual_privilege(model, toy.scenario, toy_neighbors, (1, 1), 1, (1.0, 0.0)) == \
        pytest.approx(-0.2, abs=1e-15)


def test_category_constant_model_has_no_privilege(random_truth):
    scenario = random_truth.scenario
    neighbors = build_neighbor_structure(scenario)
    model = aggregate_model(scenario.groups, [[0.2] * 3, [-0.1] * 3, [0.05] * 3, [0.4] * 3])
    response = InterventionResponse(model, scenario, neighbors)
    rng = np.random.default_rng(3)
    for _ in range(5):
        z = rng.integers(0, 2, size=scenario.m)
        np.testing.assert_allclose(response.privilege(response.max_calc(z)), 0.0, atol=1e-12)
        for rho_prime in ((1.0, 0.0, 0.0), (0.2, 0.3, 0.5)):
            assert counterfactual_privilege(model, scenario, neighbors, z, 7, rho_prime) == \
                pytest.approx(0.0, abs=1e-12)


def test_aggregate_response_counts_interventions_only(random_truth):
    scenario = random_truth.scenario
    assert scenario.calc.any()
    neighbors = build_neighbor_structure(scenario)
    aggregate = fit_aggregate(scenario, neighbors)
    response = InterventionResponse(aggregate, scenario, neighbors)
    zero = np.zeros(scenario.m, dtype=np.int64)

    assert not response.observed_calc
    assert InterventionResponse(random_truth.model, scenario, neighbors).observed_calc
    np.testing.assert_array_equal(response.max_calc(zero), 0.0)

    z = zero.copy()
    z[[4, 9]] = 1
    z_only = build_features(scenario, neighbors, z, observed_calc=False)
    np.testing.assert_allclose(response.max_calc(z), z_only.max_calc)
    observed = InterventionResponse(aggregate, scenario, neighbors, observed_calc=True)
    np.testing.assert_allclose(observed.max_calc(z), build_features(scenario, neighbors, z).max_calc)
