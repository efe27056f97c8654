import itertools
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from impact_remediation.constraint import (
    PRIVILEGE_SLACK,
    Budget,
    ConstraintSet,
    ConstraintSpec,
    CounterfactualPrivilege,
    FeasibilityReport,
    budget_of,
)
from impact_remediation.objective import (
    ObjectiveKind,
    ObjectiveSpec,
    group_weights,
    minimization_score,
    objective_value,
)
from impact_remediation.scenario import EmptyGroupError, NeighborStructure, Scenario
from impact_remediation.scm import FittedModel, InterventionResponse, prediction_range_warning

logger = logging.getLogger(__name__)

DEFAULT_ENUMERATION_LIMIT = 2_000_000
BOUND_TOLERANCE = 1e-12


class SolverLimitError(RuntimeError):
    """Raised when exhaustive enumeration would exceed the configured candidate limit."""


class MissingBudgetError(ValueError):
    """Raised when a solve is requested without a Budget constraint."""


@dataclass(frozen=True)
class SolverStats:
    solver: str
    nodes_explored: int = 0
    candidates_evaluated: int = 0
    wall_time: float = 0.0
    restarts: int = 0
    workers: int = 1


@dataclass(frozen=True, eq=False)
class SolveResult:
    z_star: np.ndarray
    objective_value: float
    feasible: bool
    objective: ObjectiveSpec
    set_ids: Tuple[str, ...]
    pre_means: Optional[np.ndarray]
    post_means: Optional[np.ndarray]
    stats: SolverStats
    feasibility: FeasibilityReport
    warnings: Tuple[str, ...] = ()

    @property
    def selected_ids(self) -> List[str]:
        return [sid for sid, chosen in zip(self.set_ids, self.z_star) if chosen]

    def same_solution(self, other: "SolveResult") -> bool:
        return self.objective_value == other.objective_value and np.array_equal(self.z_star, other.z_star)


class Evaluation(NamedTuple):
    violation: float
    score: float
    z: Tuple[int, ...]

    @property
    def feasible(self) -> bool:
        return self.violation == 0


class Problem:
    """
    Model, scenario, objective and constraints bound together for repeated evaluation.

    Constraints are always checked on the disaggregated model. With
    `aggregate_objective`, the aggregate-impact objective is scored on the
    aggregate model instead, whose calc term counts interventions only.

    Raises:
        MissingBudgetError: If no Budget constraint is supplied
        ValueError: If aggregate scoring is asked for without the aggregate model
            or for a disparity objective
    """

    def __init__(self, model: FittedModel, scenario: Scenario, neighbors: NeighborStructure,
                 objective: ObjectiveSpec, constraints: Sequence[ConstraintSpec],
                 aggregate_model: Optional[FittedModel] = None, aggregate_objective: bool = False):
        self.budget = budget_of(constraints)
        if self.budget is None:
            raise MissingBudgetError("every solve needs a Budget constraint (sum z <= b)")
        if aggregate_objective and (aggregate_model is None or objective.is_disparity):
            raise ValueError("aggregate-model scoring needs the aggregate model and the aggregate objective")
        self.model = model
        self.scenario = scenario
        self.neighbors = neighbors
        self.objective = objective
        self.constraints = tuple(constraints)
        self.aggregate_model = aggregate_model
        self.response = InterventionResponse(model, scenario, neighbors)
        aggregate_response = InterventionResponse(aggregate_model, scenario, neighbors) if aggregate_model else None
        self.constraint_set = ConstraintSet(self.constraints, self.response, aggregate_response)
        self.scoring = aggregate_response if aggregate_objective else None
        # responses whose maxCalc must be pinned down before a subtree is a leaf
        self.tracked = [r for r in (aggregate_response,) if r is not None and (
            aggregate_objective or any(isinstance(c, CounterfactualPrivilege) for c in self.constraints))]
        self.weights = group_weights(scenario) if objective.kind in (
            ObjectiveKind.ACROSS, ObjectiveKind.THRESHOLD_ACROSS) else None
        if objective.kind == ObjectiveKind.AGGREGATE:
            objective_value(self.constraint_set.baseline, scenario, objective)

    @property
    def m(self) -> int:
        return self.scenario.m

    def scored(self, z: np.ndarray, predicted: np.ndarray) -> float:
        """Objective value at z, given the disaggregated predictions there."""
        if self.scoring is not None:
            predicted = self.scoring.predict(z)
        return objective_value(predicted, self.scenario, self.objective)

    def value(self, z: np.ndarray) -> float:
        return self.scored(z, self.response.predict(z))

    def evaluate(self, z: np.ndarray) -> Evaluation:
        max_calc = self.response.max_calc(z)
        predicted = self.response.expected(max_calc)
        report = self.constraint_set.report(z, max_calc, predicted)
        score = minimization_score(self.scored(z, predicted), self.objective)
        return Evaluation(report.total_violation, score, tuple(int(v) for v in z))

    def collapsed(self, prefix: Sequence[int], mc_low: np.ndarray, mc_high: np.ndarray) -> bool:
        """True when every completion of `prefix` gives the same maxCalc in every model in use."""
        if not np.array_equal(mc_low, mc_high):
            return False
        return all(np.array_equal(*response.max_calc_bounds(prefix)) for response in self.tracked)

    def node_bound(self, prefix: Sequence[int], low: np.ndarray, high: np.ndarray) -> float:
        """`lower_bound` over the subtree of `prefix`, on whichever model scores the objective."""
        if self.scoring is not None:
            low, high = self.scoring.expected_bounds(*self.scoring.max_calc_bounds(prefix))
        return self.lower_bound(low, high)

    def lower_bound(self, low: np.ndarray, high: np.ndarray) -> float:
        """
        Lower bound on the minimization score for any E with low <= E <= high elementwise.
        """
        spec = self.objective
        kind = spec.kind
        if kind == ObjectiveKind.AGGREGATE:
            return -objective_value(high, self.scenario, spec)
        if kind == ObjectiveKind.THRESHOLD_WITHIN:
            return float(np.maximum(spec.kappa - high, 0.0).sum())

        if kind == ObjectiveKind.WITHIN:
            lo, hi = low, high
        else:
            lo, hi = (self.weights * low).sum(axis=0), (self.weights * high).sum(axis=0)
        if kind == ObjectiveKind.THRESHOLD_ACROSS:
            return float(np.maximum(spec.kappa - hi, 0.0).sum())

        first, second = np.triu_indices(lo.shape[-1], k=1)
        gaps = np.maximum(
            np.maximum(lo[..., first] - hi[..., second], lo[..., second] - hi[..., first]), 0.0
        )
        return spec.pair_factor * float(gaps.sum())

    def result(self, best: Evaluation, stats: SolverStats, extra_warnings: Iterable[str] = ()) -> SolveResult:
        z = np.array(best.z, dtype=np.int64)
        predicted = self.response.predict(z)
        report = self.constraint_set.report(z, predicted=predicted)
        warnings = list(extra_warnings)
        range_warning = prediction_range_warning(predicted)
        if range_warning:
            warnings.append(range_warning)
        if not report.feasible:
            warnings.append(f"no feasible intervention found; returning the least-violating candidate "
                            f"(total violation {report.total_violation:.6g})")
        return SolveResult(
            z_star=z,
            objective_value=self.scored(z, predicted),
            feasible=report.feasible,
            objective=self.objective,
            set_ids=self.scenario.set_ids,
            pre_means=_means_or_none(self.constraint_set.baseline, self.scenario),
            post_means=_means_or_none(predicted, self.scenario),
            stats=stats,
            feasibility=report,
            warnings=tuple(warnings),
        )


def _means_or_none(predicted: np.ndarray, scenario: Scenario) -> Optional[np.ndarray]:
    try:
        return (group_weights(scenario) * predicted).sum(axis=0)
    except EmptyGroupError:
        return None


def _better(candidate: Evaluation, incumbent: Optional[Evaluation]) -> bool:
    """Feasible before infeasible, then least violation, best score, lexicographically smallest z."""
    return incumbent is None or candidate < incumbent


def _zeros_completion(prefix: Sequence[int], m: int) -> np.ndarray:
    z = np.zeros(m, dtype=np.int64)
    z[:len(prefix)] = prefix
    return z


def candidate_count(m: int, b: int) -> int:
    return sum(math.comb(m, j) for j in range(min(b, m) + 1))


def _candidates(m: int, b: int) -> Iterable[Tuple[int, ...]]:
    for size in range(min(b, m) + 1):
        yield from itertools.combinations(range(m), size)


def _best_of(problem: Problem, combos: Sequence[Tuple[int, ...]]) -> Optional[Evaluation]:
    best = None
    for combo in combos:
        z = np.zeros(problem.m, dtype=np.int64)
        z[list(combo)] = 1
        evaluation = problem.evaluate(z)
        if _better(evaluation, best):
            best = evaluation
    return best


def _enumerate(problem: Problem, limit: int, workers: int) -> Tuple[Evaluation, int]:
    count = candidate_count(problem.m, problem.budget)
    if count > limit:
        raise SolverLimitError(
            f"enumeration needs {count:,} candidates (m={problem.m}, b={problem.budget}), limit is {limit:,}"
        )
    combos = list(_candidates(problem.m, problem.budget))
    if workers <= 1:
        return _best_of(problem, combos), count

    chunk = math.ceil(len(combos) / workers)
    chunks = [combos[i:i + chunk] for i in range(0, len(combos), chunk)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        partial = [best for best in pool.map(lambda part: _best_of(problem, part), chunks) if best is not None]
    # min over (violation, score, z) is order-independent
    return min(partial), count


def solve_enumerate(model: FittedModel, scenario: Scenario, neighbors: NeighborStructure,
                    objective: ObjectiveSpec, constraints: Sequence[ConstraintSpec],
                    aggregate_model: Optional[FittedModel] = None,
                    limit: int = DEFAULT_ENUMERATION_LIMIT, workers: int = 1,
                    aggregate_objective: bool = False) -> SolveResult:
    """
    Exact optimum by evaluating every z with sum(z) <= b.

    Ties go to the lexicographically smallest z (index 0 most significant).
    Without any feasible z, the least-violating candidate is returned with
    feasible=False.

    Raises:
        MissingBudgetError: If no Budget constraint is given
        SolverLimitError: If the candidate count exceeds `limit`
    """
    start = time.perf_counter()
    problem = Problem(model, scenario, neighbors, objective, constraints, aggregate_model, aggregate_objective)
    best, count = _enumerate(problem, limit, workers)
    stats = SolverStats("enumerate", candidates_evaluated=count, wall_time=time.perf_counter() - start,
                        workers=workers)
    logger.info(f"Enumerated {count:,} candidates in {stats.wall_time:.3f}s")
    return problem.result(best, stats)


def node_lower_bound(problem: Problem, prefix: Sequence[int]) -> float:
    """Interval lower bound on the score of every completion of `prefix` (budget ignored)."""
    mc_low, mc_high = problem.response.max_calc_bounds(prefix)
    low, high = problem.response.expected_bounds(mc_low, mc_high)
    return problem.lower_bound(low, high)


def solve_branch_bound(model: FittedModel, scenario: Scenario, neighbors: NeighborStructure,
                       objective: ObjectiveSpec, constraints: Sequence[ConstraintSpec],
                       aggregate_model: Optional[FittedModel] = None,
                       limit: int = DEFAULT_ENUMERATION_LIMIT, workers: int = 1,
                       aggregate_objective: bool = False) -> SolveResult:
    """
    Exact depth-first branch-and-bound over z_0, z_1, ... (0-branch first).

    Each undecided z_j is relaxed to the interval [0, 1] through maxCalc, which
    bounds every E_ik and mu_k; a node is pruned when its bound exceeds the
    incumbent or when interval bounds prove a constraint unsatisfiable. Leaves are
    reached in lexicographic order, so the tie-break matches `solve_enumerate`.
    A node whose maxCalc interval has collapsed is a leaf: every completion
    predicts the same outcomes, and its zero completion is lexicographically first.
    When no feasible z exists, the least-violating candidate comes from enumeration.
    """
    start = time.perf_counter()
    problem = Problem(model, scenario, neighbors, objective, constraints, aggregate_model, aggregate_objective)
    m, budget = problem.m, problem.budget
    response = problem.response

    incumbent: Optional[Evaluation] = None
    nodes = evaluated = pruned = 0
    stack: List[Tuple[Tuple[int, ...], int]] = [((), 0)]
    while stack:
        prefix, ones = stack.pop()
        leaf = len(prefix) == m or ones == budget
        if not leaf:
            mc_low, mc_high = response.max_calc_bounds(prefix)
            leaf = problem.collapsed(prefix, mc_low, mc_high)

        if leaf:
            nodes += 1
            evaluated += 1
            evaluation = problem.evaluate(_zeros_completion(prefix, m))
            if evaluation.feasible and _better(evaluation, incumbent):
                incumbent = evaluation
            continue

        low, high = response.expected_bounds(mc_low, mc_high)
        if problem.constraint_set.subtree_infeasible(prefix, mc_low, mc_high, low, high):
            pruned += 1
            continue
        if incumbent is not None:
            bound = problem.node_bound(prefix, low, high)
            if bound - incumbent.score > BOUND_TOLERANCE * max(1.0, abs(incumbent.score)):
                pruned += 1
                continue

        nodes += 1
        if ones < budget:
            stack.append((prefix + (1,), ones + 1))
        stack.append((prefix + (0,), ones))

    if incumbent is None:
        logger.warning("Branch-and-bound found no feasible intervention; ranking violations by enumeration")
        incumbent, count = _enumerate(problem, limit, workers)
        evaluated += count

    stats = SolverStats("bnb", nodes_explored=nodes, candidates_evaluated=evaluated,
                        wall_time=time.perf_counter() - start, workers=workers)
    logger.info(f"Branch-and-bound explored {nodes:,} nodes, pruned {pruned:,}, in {stats.wall_time:.3f}s")
    return problem.result(incumbent, stats)


def _local_search(problem: Problem, z: np.ndarray, cache: dict) -> Evaluation:
    """Best-improvement descent over add, drop and 1-swap moves."""

    def evaluate(candidate: np.ndarray) -> Evaluation:
        key = candidate.tobytes()
        if key not in cache:
            cache[key] = problem.evaluate(candidate)
        return cache[key]

    current = evaluate(z)
    while True:
        chosen = np.flatnonzero(z)
        free = np.flatnonzero(z == 0)
        moves = []
        if len(chosen) < problem.budget:
            moves.extend(((), (j,)) for j in free)
        moves.extend(((i,), ()) for i in chosen)
        moves.extend(((i,), (j,)) for i in chosen for j in free)

        best, best_z = current, None
        for drop, add in moves:
            candidate = z.copy()
            candidate[list(drop)] = 0
            candidate[list(add)] = 1
            evaluation = evaluate(candidate)
            if evaluation < best:
                best, best_z = evaluation, candidate
        if best_z is None:
            return current
        current, z = best, best_z


def _greedy(problem: Problem, cache: dict) -> np.ndarray:
    """Adds the single best flip while it improves and budget remains."""
    z = np.zeros(problem.m, dtype=np.int64)
    current = problem.evaluate(z)
    cache[z.tobytes()] = current
    while int(z.sum()) < problem.budget:
        best, best_z = current, None
        for j in np.flatnonzero(z == 0):
            candidate = z.copy()
            candidate[j] = 1
            key = candidate.tobytes()
            if key not in cache:
                cache[key] = problem.evaluate(candidate)
            if cache[key] < best:
                best, best_z = cache[key], candidate
        if best_z is None:
            break
        current, z = best, best_z
    return z


def solve_local_search(model: FittedModel, scenario: Scenario, neighbors: NeighborStructure,
                       objective: ObjectiveSpec, constraints: Sequence[ConstraintSpec],
                       seed: int = 0, aggregate_model: Optional[FittedModel] = None,
                       restarts: int = 4, aggregate_objective: bool = False) -> SolveResult:
    """
    Greedy construction followed by add/drop/swap local search, plus seeded random restarts.

    Deterministic for a given seed. Starting from z = 0, the result is feasible
    whenever z = 0 is.
    """
    start = time.perf_counter()
    problem = Problem(model, scenario, neighbors, objective, constraints, aggregate_model, aggregate_objective)
    cache: dict = {}

    best = _local_search(problem, _greedy(problem, cache), cache)
    rng = np.random.default_rng(seed)
    for _ in range(restarts):
        size = int(rng.integers(0, problem.budget + 1))
        z = np.zeros(problem.m, dtype=np.int64)
        z[rng.choice(problem.m, size=size, replace=False)] = 1
        candidate = _local_search(problem, z, cache)
        if candidate < best:
            best = candidate

    stats = SolverStats("local", candidates_evaluated=len(cache), wall_time=time.perf_counter() - start,
                        restarts=restarts)
    logger.info(f"Local search evaluated {len(cache):,} candidates over {restarts} restart(s)")
    return problem.result(best, stats)


SOLVERS = {
    "enumerate": solve_enumerate,
    "bnb": solve_branch_bound,
    "local": solve_local_search,
}


def solve(name: str, model: FittedModel, scenario: Scenario, neighbors: NeighborStructure,
          objective: ObjectiveSpec, constraints: Sequence[ConstraintSpec],
          aggregate_model: Optional[FittedModel] = None, seed: int = 0,
          limit: int = DEFAULT_ENUMERATION_LIMIT, workers: int = 1, restarts: int = 4,
          aggregate_objective: bool = False) -> SolveResult:
    """Dispatches to a solver by name with the options that solver understands."""
    if name not in SOLVERS:
        raise ValueError(f"unknown solver {name!r}; expected one of {sorted(SOLVERS)}")
    if name == "local":
        return solve_local_search(model, scenario, neighbors, objective, constraints, seed=seed,
                                  aggregate_model=aggregate_model, restarts=restarts,
                                  aggregate_objective=aggregate_objective)
    return SOLVERS[name](model, scenario, neighbors, objective, constraints,
                         aggregate_model=aggregate_model, limit=limit, workers=workers,
                         aggregate_objective=aggregate_objective)


def solve_min_budget(model: FittedModel, scenario: Scenario, neighbors: NeighborStructure,
                     objective: ObjectiveSpec, constraints: Sequence[ConstraintSpec], target: float,
                     solver: str = "bnb", aggregate_model: Optional[FittedModel] = None,
                     limit: int = DEFAULT_ENUMERATION_LIMIT) -> Tuple[Optional[int], SolveResult]:
    """
    Smallest budget b whose optimal disparity is at most `target`.

    The optimum is non-increasing in b, so b is found by bisection over [0, m].
    Any Budget entries in `constraints` are replaced. Returns (None, result at b=m)
    when even b = m misses the target.
    """
    if not objective.is_disparity:
        raise ValueError("minimum-budget search needs a disparity objective")
    if solver not in ("enumerate", "bnb"):
        raise ValueError("minimum-budget search needs an exact solver (enumerate or bnb)")
    others = [c for c in constraints if not isinstance(c, Budget)]

    def run(b: int) -> SolveResult:
        return solve(solver, model, scenario, neighbors, objective, others + [Budget(b)],
                     aggregate_model=aggregate_model, limit=limit)

    def reaches(result: SolveResult) -> bool:
        return result.feasible and result.objective_value <= target

    top = run(scenario.m)
    if not reaches(top):
        logger.info(f"No budget reaches disparity {target}; best at b={scenario.m} is {top.objective_value:.6g}")
        return None, top

    low, high, found = 0, scenario.m, top
    while low < high:
        middle = (low + high) // 2
        result = run(middle)
        if reaches(result):
            high, found = middle, result
        else:
            low = middle + 1
    logger.info(f"Minimum budget for disparity <= {target} is b={high}")
    return high, found


def min_feasible_tau(model: FittedModel, scenario: Scenario, neighbors: NeighborStructure,
                     constraints: Sequence[ConstraintSpec], aggregate_model: FittedModel,
                     decimals: int = 3, limit: int = DEFAULT_ENUMERATION_LIMIT) -> float:
    """
    Smallest tau on a 10**-decimals grid for which the privilege constraint can hold.

    Enumerates every z allowed by the other constraints and takes
    P* = min_z max_{i,r'} c_ir'(z); returns the smallest grid value with
    P* <= tau - 1e-12.

    Raises:
        ValueError: If no z satisfies the remaining constraints
    """
    others = [c for c in constraints if not isinstance(c, CounterfactualPrivilege)]
    problem = Problem(model, scenario, neighbors, ObjectiveSpec.aggregate(), others, aggregate_model)
    privilege_response = InterventionResponse(aggregate_model, scenario, neighbors)
    count = candidate_count(problem.m, problem.budget)
    if count > limit:
        raise SolverLimitError(f"tau search needs {count:,} candidates, limit is {limit:,}")

    best = math.inf
    for combo in _candidates(problem.m, problem.budget):
        z = np.zeros(problem.m, dtype=np.int64)
        z[list(combo)] = 1
        if not problem.constraint_set.report(z).feasible:
            continue
        best = min(best, float(privilege_response.privilege(privilege_response.max_calc(z)).max()))
    if best == math.inf:
        raise ValueError("no intervention satisfies the constraints other than tau")

    scale = 10 ** decimals
    tau = math.ceil((best + PRIVILEGE_SLACK) * scale) / scale
    if best > tau - PRIVILEGE_SLACK:
        tau = (round(tau * scale) + 1) / scale
    logger.info(f"Smallest feasible tau to {decimals} decimals is {tau} (min max privilege {best:.6g})")
    return tau
