import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from impact_remediation.config import RunConfig
from impact_remediation.constraint import (
    Budget,
    ConstraintSpec,
    CounterfactualPrivilege,
    NoHarmAcross,
    parse_constraints,
)
from impact_remediation.objective import (
    ChangeReport,
    ObjectiveKind,
    ObjectiveSpec,
    change_report,
    comparison_frame,
)
from impact_remediation.save_data import save_artifacts, save_comparison
from impact_remediation.scenario import NeighborStructure, Scenario, build_neighbor_structure, load_scenario
from impact_remediation.scm import (
    AGGREGATE,
    DISAGGREGATED,
    FittedModel,
    InterventionResponse,
    ModelMismatchError,
    fit,
    fit_aggregate,
    load_model,
)
from impact_remediation.solve import SolveResult, min_feasible_tau, solve

logger = logging.getLogger(__name__)

EXIT_FEASIBLE = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2

IR = "IR"
IR_NO_HARM = "IR+no-harm"
DIP_TAU = "DIP(tau)"
DIP_UNCONSTRAINED = "DIP-unconstrained"
COMPARE_VARIANTS = (IR, IR_NO_HARM, DIP_TAU, DIP_UNCONSTRAINED)


@dataclass
class Fitted:
    scenario: Scenario
    neighbors: NeighborStructure
    model: FittedModel
    aggregate_model: Optional[FittedModel] = None


def objective_spec(config: RunConfig) -> ObjectiveSpec:
    kind = ObjectiveKind(config.objective)
    kappa = config.kappa if kind in (ObjectiveKind.THRESHOLD_WITHIN, ObjectiveKind.THRESHOLD_ACROSS) else None
    ordered = config.ordered_pairs if kind in (ObjectiveKind.WITHIN, ObjectiveKind.ACROSS) else False
    return ObjectiveSpec(kind, kappa, ordered)


def disparity_spec(config: RunConfig) -> ObjectiveSpec:
    """Disparity measure reported for a run; across-population when the run maximizes impact."""
    spec = objective_spec(config)
    return spec if spec.is_disparity else ObjectiveSpec.across(config.ordered_pairs)


def base_constraints(config: RunConfig) -> List[ConstraintSpec]:
    """CONSTRAINTS entries plus BUDGET and ETA (no-harm across groups) when set."""
    constraints = parse_constraints(config.constraints)
    if config.budget is not None:
        constraints.append(Budget(config.budget))
    if config.eta is not None:
        constraints.append(NoHarmAcross(config.eta))
    return constraints


def _model(path: Optional[Path], kind: str) -> Optional[FittedModel]:
    if path is None:
        return None
    model = load_model(path)
    if model.kind != kind:
        raise ModelMismatchError(f"{path} holds a {model.kind} model, expected {kind}")
    logger.info(f"Using {kind} model from {path}")
    return model


def prepare(config: RunConfig, aggregate: bool = False) -> Fitted:
    """Loads the scenario, builds neighbors and fits the model(s)."""
    try:
        # Step 1: Load and validate the scenario
        scenario = load_scenario(config.sets, config.slices, config.scenario)

        # Step 2: Neighbor sets and similarities
        neighbors = build_neighbor_structure(scenario)

        # Step 3: Load or fit the disaggregated model, and the aggregate one for DIP
        model = _model(config.model_path, DISAGGREGATED) or fit(scenario, neighbors, weighted=config.weighted_fit)
        aggregate_model = None
        if aggregate:
            aggregate_model = (_model(config.aggregate_model_path, AGGREGATE)
                               or fit_aggregate(scenario, neighbors, weighted=config.weighted_fit))
        return Fitted(scenario, neighbors, model, aggregate_model)
    except Exception as e:
        logger.error(f"Could not prepare the scenario: {e}")
        raise


def _resolve_tau(config: RunConfig, fitted: Fitted, constraints: Sequence[ConstraintSpec]) -> float:
    if isinstance(config.tau, (int, float)):
        return float(config.tau)
    tau = min_feasible_tau(fitted.model, fitted.scenario, fitted.neighbors, constraints,
                           fitted.aggregate_model, limit=config.enumeration_limit)
    logger.info(f"Using the smallest feasible tau={tau}")
    return tau


def _solve(config: RunConfig, fitted: Fitted, objective: ObjectiveSpec,
           constraints: Sequence[ConstraintSpec]) -> SolveResult:
    # DIP scores z with the aggregate model unless DIP_OBJECTIVE=disaggregated
    aggregate_objective = (objective.kind is ObjectiveKind.AGGREGATE and fitted.aggregate_model is not None
                           and config.dip_objective == "aggregate")
    return solve(config.solver, fitted.model, fitted.scenario, fitted.neighbors, objective, constraints,
                 aggregate_model=fitted.aggregate_model, seed=config.seed, limit=config.enumeration_limit,
                 workers=config.workers, restarts=config.restarts, aggregate_objective=aggregate_objective)


def _report(fitted: Fitted, z: np.ndarray, measure: ObjectiveSpec) -> ChangeReport:
    response = InterventionResponse(fitted.model, fitted.scenario, fitted.neighbors)
    baseline = response.predict(np.zeros(fitted.scenario.m, dtype=np.int64))
    return change_report(baseline, response.predict(z), fitted.scenario, measure)


def format_summary(config: RunConfig, result: SolveResult, report: ChangeReport) -> str:
    """Plain-text summary; holds nothing that changes between identical runs."""
    selected = result.selected_ids
    lines = [
        f"mode: {config.mode}",
        f"objective: {result.objective.label} ({result.objective.sense})",
        f"solver: {result.stats.solver}",
        f"feasible: {'yes' if result.feasible else 'no'}",
        f"objective value: {result.objective_value:.6f}",
        f"selected ({len(selected)}): {', '.join(selected) if selected else '-'}",
        f"disparity ({report.measure}): {report.disparity_pre:.4f} -> {report.disparity_post:.4f}",
        f"aggregate impact: {report.aggregate.pre_mean:.4f} -> {report.aggregate.post_mean:.4f}",
        f"nodes explored: {result.stats.nodes_explored}",
        f"candidates evaluated: {result.stats.candidates_evaluated}",
        "",
        report.to_text(),
        "",
        "constraints:",
        result.feasibility.describe(),
    ]
    if result.warnings:
        lines.extend(["", "warnings:", *(f"  {w}" for w in result.warnings)])
    return "\n".join(lines) + "\n"


def run_solve(config: RunConfig) -> Tuple[int, SolveResult]:
    """
    Solves one IR or DIP problem and writes result.csv, report.csv, summary.txt
    and selected.geojson under `config.out`.

    Returns:
        (exit code, result): 0 when the returned intervention is feasible, 2 otherwise
    """
    config.validate()
    dip = config.mode == "DIP"
    fitted = prepare(config, aggregate=dip)

    try:
        # Step 4: Objective and constraints
        constraints = base_constraints(config)
        if dip and config.tau is not None:
            constraints.append(CounterfactualPrivilege(_resolve_tau(config, fitted, constraints)))
        objective = ObjectiveSpec.aggregate() if dip else objective_spec(config)

        # Step 5: Solve
        result = _solve(config, fitted, objective, constraints)

        # Step 6: Report and write artifacts
        report = _report(fitted, result.z_star, disparity_spec(config))
        summary = format_summary(config, result, report)
        save_artifacts(fitted.scenario, result.z_star, report, summary, config.out)
    except Exception as e:
        logger.error(f"Solve failed: {e}")
        raise

    for warning in result.warnings:
        logger.warning(warning)
    if not result.feasible:
        logger.warning("Returned intervention is infeasible:\n" + result.feasibility.describe())
        return EXIT_INFEASIBLE, result
    logger.info(f"Selected {len(result.selected_ids)} set(s); artifacts in {config.out}")
    return EXIT_FEASIBLE, result


def run_compare(config: RunConfig, variants: Sequence[str] = COMPARE_VARIANTS) -> Tuple[int, Dict[str, SolveResult]]:
    """
    Solves every variant on the same fitted models and budget and writes
    compare.csv / compare.txt: a no-intervention row first, then one row per variant.
    """
    config.validate()
    unknown = [v for v in variants if v not in COMPARE_VARIANTS]
    if unknown:
        raise ValueError(f"unknown compare variant(s) {unknown}; expected from {COMPARE_VARIANTS}")
    needs_dip = any(v in (DIP_TAU, DIP_UNCONSTRAINED) for v in variants)
    fitted = prepare(config, aggregate=needs_dip)
    measure = disparity_spec(config)
    base = base_constraints(config)

    results: Dict[str, SolveResult] = {}
    rows: List[Tuple[str, ChangeReport]] = []
    try:
        rows.append(("none", _report(fitted, np.zeros(fitted.scenario.m, dtype=np.int64), measure)))
        for variant in variants:
            name, objective, constraints = variant, measure, list(base)
            if variant == IR_NO_HARM and not any(isinstance(c, NoHarmAcross) for c in constraints):
                constraints.append(NoHarmAcross(config.eta or 0.0))
            elif variant == DIP_TAU:
                tau = _resolve_tau(config, fitted, constraints)
                constraints.append(CounterfactualPrivilege(tau))
                objective, name = ObjectiveSpec.aggregate(), f"DIP(tau={tau:g})"
            elif variant == DIP_UNCONSTRAINED:
                objective = ObjectiveSpec.aggregate()

            logger.info(f"Solving variant {name}")
            result = _solve(config, fitted, objective, constraints)
            results[name] = result
            rows.append((name, _report(fitted, result.z_star, measure)))

        frame = comparison_frame(rows, fitted.scenario.groups)
        save_comparison(frame, config.out)
    except Exception as e:
        logger.error(f"Compare failed: {e}")
        raise

    infeasible = [name for name, result in results.items() if not result.feasible]
    if infeasible:
        logger.warning(f"Infeasible variant(s): {', '.join(infeasible)}")
        return EXIT_INFEASIBLE, results
    return EXIT_FEASIBLE, results
