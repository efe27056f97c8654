import numpy as np
import pytest

from impact_remediation.constraint import (
    Budget,
    CounterfactualPrivilege,
    MaxGapAcross,
    MinRateAcross,
    MinRateWithin,
    NoHarmAcross,
    NoHarmWithin,
)
from impact_remediation.milp import (
    ExportError,
    build_model,
    evaluate_model,
    evaluate_objective,
    export_milp,
    implied_assignment,
    parse_lp,
    read_lp,
    violated_constraints,
    violated_rows,
    write_lp,
)
from impact_remediation.objective import ObjectiveSpec
from impact_remediation.scenario import GroupSlice, InterventionSet, Scenario, build_neighbor_structure
from impact_remediation.scm import FittedModel, fit_aggregate
from impact_remediation.solve import Problem, solve_enumerate, solve_min_budget
from impact_remediation.synth import gen_random, gen_toy_career_fair
from test.helpers import all_interventions


def written(pm, path):
    export = write_lp(pm, path)
    return export, read_lp(export.path)


def test_toy_model_reparses_and_substitutes(tmp_path, toy, toy_neighbors):
    pm = build_model(toy.model, toy.scenario, toy_neighbors, ObjectiveSpec.across(), [Budget(1)])
    export, program = written(pm, tmp_path / "toy.lp")

    assert program.sense == "minimize"
    assert "z(0)" in program.binaries and "w(0_1)" in program.binaries
    assert "budget_0" in {row.constraint for row in program.rows}

    implied_assignment(pm, toy.scenario, toy_neighbors, (0, 1))
    assert violated_constraints(pm) == []
    assert violated_rows(program, export.values()) == []
    assert evaluate_model(pm) == pytest.approx(0.06, abs=1e-9)
    assert evaluate_objective(program, export.values()) == pytest.approx(0.06, abs=1e-9)

    implied_assignment(pm, toy.scenario, toy_neighbors, (1, 1))
    assert violated_constraints(pm) == ["budget_0"]
    assert violated_rows(program, export.values()) == ["budget_0"]


def test_single_set_model(tmp_path, toy):
    sets = [InterventionSet("only", 10.0, 20.0, 1.0, 1, 0)]
    slices = [GroupSlice("only", "A", 10, 0.1), GroupSlice("only", "B", 30, 0.3)]
    scenario = Scenario.from_records(sets, slices)
    neighbors = build_neighbor_structure(scenario)
    model = FittedModel(("A", "B"), ("A", "B"), toy.model.coefficients)

    pm = build_model(model, scenario, neighbors, ObjectiveSpec.across(), [Budget(1)])
    export, program = written(pm, tmp_path / "single.lp")
    problem = Problem(model, scenario, neighbors, ObjectiveSpec.across(), [Budget(1)])
    for z in ((0,), (1,)):
        implied_assignment(pm, scenario, neighbors, z)
        assert violated_rows(program, export.values()) == []
        assert evaluate_objective(program, export.values()) == pytest.approx(problem.value(np.array(z)), abs=1e-9)


OBJECTIVES = (
    ObjectiveSpec.across(),
    ObjectiveSpec.within(),
    ObjectiveSpec.threshold_within(0.3),
    ObjectiveSpec.threshold_across(0.3),
    ObjectiveSpec.aggregate(),
)
CONSTRAINTS = (
    [],
    [NoHarmAcross(0.0)],
    [MinRateWithin(0.05), NoHarmWithin(0.0, (("set-0", "g0"),))],
    [MinRateAcross(0.1), MaxGapAcross(0.5)],
)


@pytest.mark.parametrize("seed", range(20))
def test_random_models_agree_with_direct_evaluation(tmp_path, seed):
    m, r = 3 + seed % 4, 2 + seed % 2
    truth = gen_random(seed, m=m, r=r, neighbor_k=1 + seed % 3)
    scenario, model = truth.scenario, truth.model
    neighbors = build_neighbor_structure(scenario)
    objective = OBJECTIVES[seed % len(OBJECTIVES)]
    constraints = [Budget(m)] + CONSTRAINTS[seed % len(CONSTRAINTS)]

    pm = build_model(model, scenario, neighbors, objective, constraints)
    export, program = written(pm, tmp_path / "random.lp")
    problem = Problem(model, scenario, neighbors, objective, constraints)
    for z in all_interventions(m):
        implied_assignment(pm, scenario, neighbors, z)
        if problem.constraint_set.report(z).feasible:
            assert violated_constraints(pm) == [], z
            assert violated_rows(program, export.values()) == [], z
            assert evaluate_model(pm) == pytest.approx(problem.value(z), abs=1e-9)
            assert evaluate_objective(program, export.values()) == pytest.approx(problem.value(z), abs=1e-9)


def test_linear_optimum_matches_enumeration_optimum():
    truth = gen_random(3, m=6, r=2)
    scenario, model = truth.scenario, truth.model
    neighbors = build_neighbor_structure(scenario)
    objective, constraints = ObjectiveSpec.within(), [Budget(2)]
    pm = build_model(model, scenario, neighbors, objective, constraints)

    best = min(evaluate_model(implied_assignment(pm, scenario, neighbors, z)) for z in all_interventions(scenario.m, 2))
    result = solve_enumerate(model, scenario, neighbors, objective, constraints)
    assert best == pytest.approx(result.objective_value, abs=1e-9)


def test_privilege_rows(tmp_path, toy, toy_neighbors):
    aggregate = fit_aggregate(toy.scenario, toy_neighbors)
    constraints = [Budget(1), CounterfactualPrivilege(0.082)]
    pm = build_model(toy.model, toy.scenario, toy_neighbors, ObjectiveSpec.aggregate(), constraints,
                     aggregate_model=aggregate)
    export, program = written(pm, tmp_path / "dip.lp")
    assert program.sense == "maximize"
    assert program.bounds["const_one"] == (1.0, 1.0)

    implied_assignment(pm, toy.scenario, toy_neighbors, (1, 0))
    assert violated_constraints(pm) == []
    assert violated_rows(program, export.values()) == []
    assert evaluate_objective(program, export.values()) == pytest.approx(85 / 425, abs=1e-9)

    tight = build_model(toy.model, toy.scenario, toy_neighbors, ObjectiveSpec.aggregate(),
                        [Budget(1), CounterfactualPrivilege(0.08)], aggregate_model=aggregate)
    implied_assignment(tight, toy.scenario, toy_neighbors, (1, 0))
    assert "privilege_1[0,1]" in violated_constraints(tight)


@pytest.mark.parametrize("seed", range(6))
def test_aggregate_scoring_matches_problem(tmp_path, seed):
    truth = gen_random(50 + seed, m=5, r=2 + seed % 2, neighbor_k=2)
    scenario, model = truth.scenario, truth.model
    neighbors = build_neighbor_structure(scenario)
    aggregate = fit_aggregate(scenario, neighbors)
    constraints = [Budget(3), CounterfactualPrivilege(0.5)]

    pm = build_model(model, scenario, neighbors, ObjectiveSpec.aggregate(), constraints,
                     aggregate_model=aggregate, aggregate_objective=True)
    export, program = written(pm, tmp_path / "aggregate.lp")
    problem = Problem(model, scenario, neighbors, ObjectiveSpec.aggregate(), constraints,
                      aggregate_model=aggregate, aggregate_objective=True)
    for z in all_interventions(scenario.m, 3):
        implied_assignment(pm, scenario, neighbors, z)
        assert evaluate_model(pm) == pytest.approx(problem.value(z), abs=1e-9)
        assert evaluate_objective(program, export.values()) == pytest.approx(problem.value(z), abs=1e-9)
        if problem.evaluate(z).feasible:
            assert violated_rows(program, export.values()) == []


def test_numeric_group_labels_keep_epigraph_names_apart(tmp_path):
    truth = gen_random(13, m=4, r=4, neighbor_k=1)
    base = truth.scenario
    groups = ("1", "11", "12", "2")
    scenario = Scenario(base.sets, groups, base.counts, base.rates, neighbor_k=base.neighbor_k)
    model = FittedModel(groups, groups, truth.model.coefficients)
    neighbors = build_neighbor_structure(scenario)

    pm = build_model(model, scenario, neighbors, ObjectiveSpec.within(), [Budget(2)])
    assert len(pm.u) == scenario.m * 6
    export, program = written(pm, tmp_path / "labels.lp")
    assert len([label for label in export.variables if label.startswith("u(")]) == scenario.m * 6

    problem = Problem(model, scenario, neighbors, ObjectiveSpec.within(), [Budget(2)])
    z = np.array([1, 0, 0, 1])
    implied_assignment(pm, scenario, neighbors, z)
    assert violated_rows(program, export.values()) == []
    assert evaluate_objective(program, export.values()) == pytest.approx(problem.value(z), abs=1e-9)


def test_disparity_cannot_be_maximized(toy, toy_neighbors):
    with pytest.raises(ExportError, match="minimization"):
        build_model(toy.model, toy.scenario, toy_neighbors, ObjectiveSpec.across(), [Budget(1)], sense="maximize")


def test_privilege_needs_aggregate_model(toy, toy_neighbors):
    with pytest.raises(ExportError, match="aggregate model"):
        build_model(toy.model, toy.scenario, toy_neighbors, ObjectiveSpec.aggregate(),
                    [Budget(1), CounterfactualPrivilege(0.1)])


def test_aggregate_scoring_needs_aggregate_objective_and_model(toy, toy_neighbors):
    with pytest.raises(ExportError, match="needs that model"):
        build_model(toy.model, toy.scenario, toy_neighbors, ObjectiveSpec.aggregate(), [Budget(1)],
                    aggregate_objective=True)
    with pytest.raises(ExportError, match="only applies"):
        build_model(toy.model, toy.scenario, toy_neighbors, ObjectiveSpec.across(), [Budget(1)],
                    aggregate_objective=True)


def test_unwritable_path(tmp_path, toy, toy_neighbors):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(ExportError, match="cannot write"):
        export_milp(toy.model, toy.scenario, toy_neighbors, ObjectiveSpec.across(), [Budget(1)], blocker / "x.lp")


@pytest.mark.parametrize("text, message", [
    ("min\nobj:\n+1 x\ns.t.\n+1 x\n<=\n1\nend\n", "line 5: term outside a row"),
    ("min\nobj:\n+1 x\nbounds\n0 <= x <=\nend\n", "line 5: malformed bound"),
    ("min\nobj:\n+1 x\ns.t.\nc1:\n+1 x\n<=\nend\n", "line 8: row 'c1' is unfinished"),
])
def test_parse_rejects_malformed_lines(text, message):
    with pytest.raises(ExportError, match=message):
        parse_lp(text)


def test_parse_reads_rows_over_several_lines():
    program = parse_lp("\\* demo *\\\nmax\nobj:\n+2 x\n-1 y\ns.t.\nc_u_cap_:\n+1 x\n+1 y\n<= 3\n"
                       "bounds\n   0 <= x <= 1\n   y free\nbinary\n  x\nend\n")
    assert program.sense == "maximize"
    assert program.objective == {"x": 2.0, "y": -1.0}
    assert [(row.constraint, row.coefficients, row.sense, row.rhs) for row in program.rows] == [
        ("cap", {"x": 1.0, "y": 1.0}, "<=", 3.0)
    ]
    assert program.bounds == {"x": (0.0, 1.0), "y": (float("-inf"), float("inf"))}
    assert program.binaries == ["x"]


def test_export_is_deterministic(tmp_path):
    truth = gen_toy_career_fair()
    neighbors = build_neighbor_structure(truth.scenario)
    first = export_milp(truth.model, truth.scenario, neighbors, ObjectiveSpec.within(), [Budget(2)], tmp_path / "a.lp")
    second = export_milp(truth.model, truth.scenario, neighbors, ObjectiveSpec.within(), [Budget(2)], tmp_path / "b.lp")
    assert first.read_bytes() == second.read_bytes()


def test_minimum_budget_model_substitution(toy, toy_neighbors):
    b, result = solve_min_budget(toy.model, toy.scenario, toy_neighbors, ObjectiveSpec.across(), [], 0.065)
    pm = build_model(toy.model, toy.scenario, toy_neighbors, ObjectiveSpec.across(), [Budget(b)])
    implied_assignment(pm, toy.scenario, toy_neighbors, result.z_star)
    assert violated_constraints(pm) == []
    assert evaluate_model(pm) == pytest.approx(result.objective_value, abs=1e-9)
