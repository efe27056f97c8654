import itertools

import numpy as np
import pytest

from impact_remediation.constraint import (
    Budget,
    ConstraintError,
    ConstraintSet,
    CounterfactualPrivilege,
    MaxGapAcross,
    MinRateAcross,
    MinRateWithin,
    NoHarmAcross,
    NoHarmWithin,
    budget_of,
    check_feasibility,
    parse_constraint,
    parse_constraints,
)
from impact_remediation.scenario import build_neighbor_structure
from impact_remediation.scm import InterventionResponse, counterfactual_privilege, fit_aggregate
from impact_remediation.synth import gen_random
from test.helpers import all_interventions


@pytest.mark.parametrize("entry, expected", [
    ("budget:b=3", Budget(3)),
    ("no_harm_across", NoHarmAcross(0.0)),
    ("No_Harm_Across: eta = -0.01", NoHarmAcross(-0.01)),
    ("no_harm_within:eta=0,cells=s1/A|s2/B", NoHarmWithin(0.0, (("s1", "A"), ("s2", "B")))),
    ("min_rate_across:kappa=0.2", MinRateAcross(0.2)),
    ("min_rate_within:kappa=0.1", MinRateWithin(0.1)),
    ("privilege:tau=0.05", CounterfactualPrivilege(0.05)),
    ("max_gap_across:epsilon=0.02", MaxGapAcross(0.02)),
])
def test_parse_constraint(entry, expected):
    assert parse_constraint(entry) == expected


@pytest.mark.parametrize("entry, message", [
    ("quota:b=1", "unknown constraint type"),
    ("budget:size=1", "no parameter 'size'"),
    ("budget:b=two", "not a valid int"),
    ("min_rate_across", "min_rate_across"),
    ("no_harm_within:cells=s1-A", "set_id/group"),
])
def test_parse_constraint_errors(entry, message):
    with pytest.raises(ConstraintError, match=message):
        parse_constraint(entry)


def test_budget_of_takes_the_tightest():
    assert budget_of(parse_constraints(["budget:b=4", "no_harm_across", "budget:b=2"])) == 2
    assert budget_of([NoHarmAcross()]) is None


def test_toy_margins(toy, toy_neighbors):
    constraints = [Budget(1), NoHarmAcross(0.0), MinRateWithin(0.1), MaxGapAcross(0.07)]

    report = check_feasibility(toy.model, toy.scenario, toy_neighbors, (0, 1), constraints)
    assert report.feasible
    margins = [m.margin for m in report.margins]
    assert margins[0] == 0.0
    assert margins[1] == pytest.approx(26.25 / 175 - 13.75 / 175, abs=1e-12)
    assert margins[2] == pytest.approx(0.05, abs=1e-12)
    assert margins[3] == pytest.approx(0.05, abs=1e-12)
    assert margins[4] == pytest.approx(0.07 - 0.06, abs=1e-12)

    report = check_feasibility(toy.model, toy.scenario, toy_neighbors, (1, 1), constraints)
    assert not report.feasible
    violated = [type(c) for c, _ in report.violations]
    assert violated == [Budget]
    assert report.total_violation == 1.0


def test_null_intervention_is_no_harm(toy, toy_neighbors):
    report = check_feasibility(toy.model, toy.scenario, toy_neighbors, (0, 0),
                               [NoHarmAcross(0.0), NoHarmWithin(0.0)])
    assert report.feasible
    assert all(m.margin == 0.0 for m in report.margins)


def test_no_harm_within_cells(toy, toy_neighbors):
    constraint = NoHarmWithin(0.06, (("university-1", "A"),))
    report = check_feasibility(toy.model, toy.scenario, toy_neighbors, (0, 1), [constraint])
    # university-1/A rises 0.10 -> 0.15
    assert report.margins[0].margin == pytest.approx(-0.01, abs=1e-12)
    assert "university-1/A" in report.margins[0].label


def test_unknown_no_harm_cell(toy, toy_response):
    with pytest.raises(ConstraintError, match="not in the scenario"):
        ConstraintSet([NoHarmWithin(0.0, (("university-9", "A"),))], toy_response)


def test_unreachable_minimum_rate_is_reported(toy, toy_neighbors):
    report = check_feasibility(toy.model, toy.scenario, toy_neighbors, (1, 1), [MinRateAcross(1.0)])
    assert not report.feasible
    assert "VIOLATED" in report.describe()
    assert len(report.violations) == 2


def test_privilege_needs_aggregate_model(toy_response):
    with pytest.raises(ConstraintError, match="aggregate model"):
        ConstraintSet([CounterfactualPrivilege(0.1)], toy_response)


@pytest.mark.parametrize("constraint", [Budget(-1), Budget(3), MaxGapAcross(-0.1)])
def test_invalid_parameters(toy_response, constraint):
    with pytest.raises(ConstraintError):
        ConstraintSet([constraint], toy_response)


def test_privilege_margin_uses_strict_bound():
    truth = gen_random(2, m=8, r=2)
    scenario = truth.scenario
    neighbors = build_neighbor_structure(scenario)
    aggregate = fit_aggregate(scenario, neighbors)
    response = InterventionResponse(aggregate, scenario, neighbors)
    z = np.zeros(scenario.m, dtype=np.int64)
    worst = float(response.privilege(response.max_calc(z)).max())

    at_bound = check_feasibility(truth.model, scenario, neighbors, z, [CounterfactualPrivilege(worst)], aggregate)
    assert not at_bound.feasible
    above = check_feasibility(truth.model, scenario, neighbors, z, [CounterfactualPrivilege(worst + 1e-9)], aggregate)
    assert above.feasible


@pytest.mark.parametrize("seed", range(3))
def test_privilege_counts_interventions_only(seed):
    truth = gen_random(30 + seed, m=7, r=3, neighbor_k=2)
    scenario = truth.scenario
    neighbors = build_neighbor_structure(scenario)
    aggregate = fit_aggregate(scenario, neighbors)
    z = np.zeros(scenario.m, dtype=np.int64)
    z[seed] = 1
    worst = max(
        counterfactual_privilege(aggregate, scenario, neighbors, z, i, np.eye(scenario.r)[k])
        for i in range(scenario.m) for k in range(scenario.r)
    )

    assert check_feasibility(truth.model, scenario, neighbors, z, [CounterfactualPrivilege(worst + 1e-9)],
                             aggregate).feasible
    assert not check_feasibility(truth.model, scenario, neighbors, z, [CounterfactualPrivilege(worst)],
                                 aggregate).feasible


@pytest.mark.parametrize("seed", range(6))
def test_subtree_pruning_never_discards_a_feasible_completion(seed):
    truth = gen_random(seed, m=6, r=2, neighbor_k=2)
    scenario = truth.scenario
    neighbors = build_neighbor_structure(scenario)
    response = InterventionResponse(truth.model, scenario, neighbors)
    aggregate_response = InterventionResponse(fit_aggregate(scenario, neighbors), scenario, neighbors)

    baseline_means = ConstraintSet([NoHarmAcross()], response).baseline_means
    constraints = [
        NoHarmAcross(0.0),
        NoHarmWithin(0.0),
        MinRateAcross(float(baseline_means.max())),
        MinRateWithin(0.1),
        MaxGapAcross(0.02),
        CounterfactualPrivilege(0.01),
    ]
    for constraint in constraints:
        checker = ConstraintSet([constraint], response, aggregate_response)
        feasible = {tuple(z) for z in all_interventions(scenario.m) if checker.report(z).feasible}
        for depth in range(scenario.m + 1):
            for prefix in itertools.product((0, 1), repeat=depth):
                mc_low, mc_high = response.max_calc_bounds(prefix)
                low, high = response.expected_bounds(mc_low, mc_high)
                if checker.subtree_infeasible(prefix, mc_low, mc_high, low, high):
                    assert not any(z[:depth] == prefix for z in feasible), (constraint, prefix)
