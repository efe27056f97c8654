import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from impact_remediation.objective import group_weights
from impact_remediation.scenario import NeighborStructure, Scenario
from impact_remediation.scm import FittedModel, InterventionResponse, as_intervention

logger = logging.getLogger(__name__)

# c_ir' < tau is checked as c_ir' <= tau - PRIVILEGE_SLACK
PRIVILEGE_SLACK = 1e-12
# interval bounds must clear a threshold by this much before a subtree is pruned
PRUNE_TOLERANCE = 1e-12


class ConstraintError(ValueError):
    """Raised for invalid constraint parameters or missing model pieces."""


@dataclass(frozen=True)
class Budget:
    b: int


@dataclass(frozen=True)
class NoHarmAcross:
    eta: float = 0.0


@dataclass(frozen=True)
class NoHarmWithin:
    eta: float = 0.0
    cells: Optional[Tuple[Tuple[str, str], ...]] = None


@dataclass(frozen=True)
class MinRateAcross:
    kappa: float


@dataclass(frozen=True)
class MinRateWithin:
    kappa: float


@dataclass(frozen=True)
class CounterfactualPrivilege:
    tau: float


@dataclass(frozen=True)
class MaxGapAcross:
    epsilon: float


ConstraintSpec = Union[Budget, NoHarmAcross, NoHarmWithin, MinRateAcross, MinRateWithin,
                       CounterfactualPrivilege, MaxGapAcross]

CONSTRAINT_TYPES = {
    "budget": (Budget, {"b": int}),
    "no_harm_across": (NoHarmAcross, {"eta": float}),
    "no_harm_within": (NoHarmWithin, {"eta": float, "cells": str}),
    "min_rate_across": (MinRateAcross, {"kappa": float}),
    "min_rate_within": (MinRateWithin, {"kappa": float}),
    "privilege": (CounterfactualPrivilege, {"tau": float}),
    "max_gap_across": (MaxGapAcross, {"epsilon": float}),
}


@dataclass(frozen=True)
class ConstraintMargin:
    constraint: ConstraintSpec
    label: str
    margin: float

    @property
    def violated(self) -> bool:
        return self.margin < 0


@dataclass(frozen=True)
class FeasibilityReport:
    feasible: bool
    margins: Tuple[ConstraintMargin, ...]

    @property
    def violations(self) -> List[Tuple[ConstraintSpec, float]]:
        return [(m.constraint, m.margin) for m in self.margins if m.violated]

    @property
    def total_violation(self) -> float:
        return float(sum(-m.margin for m in self.margins if m.violated))

    def describe(self) -> str:
        return "\n".join(
            f"{'VIOLATED' if m.violated else 'ok':<9}{m.label:<48}margin {m.margin:+.6g}" for m in self.margins
        )


def parse_constraint(entry: str) -> ConstraintSpec:
    """
    Parses one `type:param=value,param=value` entry.

    `no_harm_within` takes `cells=set_id/group|set_id/group`; omitted cells mean all pairs.
    """
    name, _, params = entry.strip().partition(":")
    name = name.strip().lower()
    if name not in CONSTRAINT_TYPES:
        raise ConstraintError(f"unknown constraint type {name!r}; expected one of {sorted(CONSTRAINT_TYPES)}")
    cls, fields = CONSTRAINT_TYPES[name]

    kwargs: Dict[str, object] = {}
    for item in filter(None, (p.strip() for p in params.split(","))):
        key, _, value = item.partition("=")
        key = key.strip()
        if key not in fields:
            raise ConstraintError(f"constraint {name!r} has no parameter {key!r}")
        try:
            kwargs[key] = fields[key](value.strip())
        except ValueError:
            raise ConstraintError(f"constraint {name!r}: {key}={value!r} is not a valid {fields[key].__name__}") from None

    if "cells" in kwargs:
        cells = []
        for cell in str(kwargs["cells"]).split("|"):
            set_id, sep, group = cell.partition("/")
            if not sep:
                raise ConstraintError(f"cell {cell!r} must read set_id/group")
            cells.append((set_id.strip(), group.strip()))
        kwargs["cells"] = tuple(cells)
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConstraintError(f"constraint {name!r}: {e}") from e


def parse_constraints(entries: Iterable[str]) -> List[ConstraintSpec]:
    return [parse_constraint(entry) for entry in entries]


def budget_of(constraints: Sequence[ConstraintSpec]) -> Optional[int]:
    """Tightest budget among the constraints, or None when there is none."""
    budgets = [c.b for c in constraints if isinstance(c, Budget)]
    return min(budgets) if budgets else None


class ConstraintSet:
    """
    Constraint list bound to one scenario and model, evaluated per intervention.

    Baselines E(0) and the per-group weights are computed once so solvers can
    call `report` for many candidates.
    """

    def __init__(self, constraints: Sequence[ConstraintSpec], response: InterventionResponse,
                 aggregate_response: Optional[InterventionResponse] = None):
        self.constraints = tuple(constraints)
        self.response = response
        self.aggregate_response = aggregate_response
        scenario = response.scenario
        self.scenario = scenario

        for c in self.constraints:
            if isinstance(c, Budget) and not 0 <= c.b <= scenario.m:
                raise ConstraintError(f"budget b={c.b} must lie in [0, m={scenario.m}]")
            if isinstance(c, (MinRateAcross, MinRateWithin)) and c.kappa is None:
                raise ConstraintError("minimum-rate constraints need kappa")
            if isinstance(c, MaxGapAcross) and c.epsilon < 0:
                raise ConstraintError(f"max gap epsilon must be non-negative, got {c.epsilon}")
            if isinstance(c, CounterfactualPrivilege) and aggregate_response is None:
                raise ConstraintError("the tau (counterfactual privilege) constraint needs the DIP aggregate model")

        self.baseline = response.predict(np.zeros(scenario.m, dtype=np.int64))
        needs_means = any(isinstance(c, (NoHarmAcross, MinRateAcross, MaxGapAcross)) for c in self.constraints)
        self.weights = group_weights(scenario) if needs_means else None
        self.baseline_means = (self.weights * self.baseline).sum(axis=0) if needs_means else None
        self._cells = {id(c): self._cell_mask(c) for c in self.constraints if isinstance(c, NoHarmWithin)}

    def _cell_mask(self, constraint: NoHarmWithin) -> np.ndarray:
        scenario = self.scenario
        if constraint.cells is None:
            return np.ones((scenario.m, scenario.r), dtype=bool)
        set_index = {sid: i for i, sid in enumerate(scenario.set_ids)}
        group_index = {g: k for k, g in enumerate(scenario.groups)}
        mask = np.zeros((scenario.m, scenario.r), dtype=bool)
        for set_id, group in constraint.cells:
            if set_id not in set_index or group not in group_index:
                raise ConstraintError(f"no-harm cell ({set_id!r}, {group!r}) is not in the scenario")
            mask[set_index[set_id], group_index[group]] = True
        return mask

    @property
    def budget(self) -> Optional[int]:
        return budget_of(self.constraints)

    def _means(self, predicted: np.ndarray) -> np.ndarray:
        return (self.weights * predicted).sum(axis=0)

    def report(self, z: np.ndarray, max_calc: Optional[np.ndarray] = None,
               predicted: Optional[np.ndarray] = None) -> FeasibilityReport:
        if max_calc is None:
            max_calc = self.response.max_calc(z)
        if predicted is None:
            predicted = self.response.expected(max_calc)
        groups, ids = self.scenario.groups, self.scenario.set_ids
        means = self._means(predicted) if self.weights is not None else None

        margins: List[ConstraintMargin] = []
        for c in self.constraints:
            if isinstance(c, Budget):
                margins.append(ConstraintMargin(c, f"budget sum(z) <= {c.b}", float(c.b - int(np.sum(z)))))
            elif isinstance(c, NoHarmAcross):
                change = means - self.baseline_means
                for k, group in enumerate(groups):
                    margins.append(ConstraintMargin(c, f"no-harm across, group {group}", float(change[k] - c.eta)))
            elif isinstance(c, NoHarmWithin):
                slack = np.where(self._cells[id(c)], predicted - self.baseline - c.eta, np.inf)
                i, k = np.unravel_index(np.argmin(slack), slack.shape)
                margins.append(ConstraintMargin(c, f"no-harm within, worst cell {ids[i]}/{groups[k]}", float(slack[i, k])))
            elif isinstance(c, MinRateAcross):
                for k, group in enumerate(groups):
                    margins.append(ConstraintMargin(c, f"min rate across, group {group}", float(means[k] - c.kappa)))
            elif isinstance(c, MinRateWithin):
                slack = predicted - c.kappa
                i, k = np.unravel_index(np.argmin(slack), slack.shape)
                margins.append(ConstraintMargin(c, f"min rate within, worst cell {ids[i]}/{groups[k]}", float(slack[i, k])))
            elif isinstance(c, CounterfactualPrivilege):
                privilege = self.aggregate_response.privilege(self.aggregate_response.max_calc(z))
                i, k = np.unravel_index(np.argmax(privilege), privilege.shape)
                margins.append(ConstraintMargin(
                    c, f"privilege c < tau, worst set {ids[i]} vs {groups[k]}",
                    float(c.tau - PRIVILEGE_SLACK - privilege[i, k]),
                ))
            elif isinstance(c, MaxGapAcross):
                gap = float(means.max() - means.min())
                margins.append(ConstraintMargin(c, "max gap across groups", c.epsilon - gap))

        return FeasibilityReport(all(not m.violated for m in margins), tuple(margins))

    def subtree_infeasible(self, prefix: Sequence[int], mc_low: np.ndarray, mc_high: np.ndarray,
                           low: np.ndarray, high: np.ndarray) -> bool:
        """
        True when interval bounds prove no completion of `prefix` can be feasible.

        `low`/`high` bound the expected outcomes over the subtree. Budget is left
        to the branching rule.
        """
        if self.weights is not None:
            means_low, means_high = self._means(low), self._means(high)
        for c in self.constraints:
            if isinstance(c, NoHarmAcross):
                if (means_high - self.baseline_means - c.eta < -PRUNE_TOLERANCE).any():
                    return True
            elif isinstance(c, NoHarmWithin):
                slack = high - self.baseline - c.eta
                if (slack[self._cells[id(c)]] < -PRUNE_TOLERANCE).any():
                    return True
            elif isinstance(c, MinRateAcross):
                if (means_high - c.kappa < -PRUNE_TOLERANCE).any():
                    return True
            elif isinstance(c, MinRateWithin):
                if (high - c.kappa < -PRUNE_TOLERANCE).any():
                    return True
            elif isinstance(c, MaxGapAcross):
                if float(means_low.max() - means_high.min()) - c.epsilon > PRUNE_TOLERANCE:
                    return True
            elif isinstance(c, CounterfactualPrivilege):
                at_low = self.aggregate_response.privilege(self.aggregate_response.max_calc(_completion(prefix, self.scenario.m, 0)))
                at_high = self.aggregate_response.privilege(self.aggregate_response.max_calc(_completion(prefix, self.scenario.m, 1)))
                if (np.minimum(at_low, at_high) - (c.tau - PRIVILEGE_SLACK) > PRUNE_TOLERANCE).any():
                    return True
        return False


def _completion(prefix: Sequence[int], m: int, fill: int) -> np.ndarray:
    z = np.full(m, fill, dtype=np.int64)
    z[:len(prefix)] = prefix
    return z


def check_feasibility(model: FittedModel, scenario: Scenario, neighbors: NeighborStructure,
                      z: Sequence[int], constraints: Sequence[ConstraintSpec],
                      aggregate_model: Optional[FittedModel] = None) -> FeasibilityReport:
    """
    Evaluates every constraint at z and reports signed slack (negative = violated).

    Raises:
        ConstraintError: If a tau constraint is requested without the aggregate model
    """
    response = InterventionResponse(model, scenario, neighbors)
    aggregate_response = InterventionResponse(aggregate_model, scenario, neighbors) if aggregate_model else None
    z = as_intervention(z, scenario.m)
    report = ConstraintSet(constraints, response, aggregate_response).report(z)
    if not report.feasible:
        logger.debug(f"z={z.tolist()} violates {len(report.violations)} constraint(s)")
    return report
