import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pyomo.environ as pyo

from impact_remediation.constraint import (
    PRIVILEGE_SLACK,
    Budget,
    ConstraintSpec,
    CounterfactualPrivilege,
    MaxGapAcross,
    MinRateAcross,
    MinRateWithin,
    NoHarmAcross,
    NoHarmWithin,
)
from impact_remediation.objective import ObjectiveKind, ObjectiveSpec, group_weights
from impact_remediation.scenario import NeighborStructure, Scenario
from impact_remediation.scm import FittedModel, InterventionResponse, as_intervention

logger = logging.getLogger(__name__)

MODEL_NAME = "impact_remediation"
# pyomo's own stand-in for constants, emitted by some LP writers
ONE_VAR_CONSTANT = "ONE_VAR_CONSTANT"

SECTION_NAMES = {
    "min": "minimize", "minimize": "minimize", "minimum": "minimize",
    "max": "maximize", "maximize": "maximize", "maximum": "maximize",
    "s.t.": "subject to", "st": "subject to", "subject to": "subject to", "such that": "subject to",
    "bounds": "bounds", "bound": "bounds",
    "general": "general", "generals": "general", "gen": "general",
    "binary": "binary", "binaries": "binary", "bin": "binary",
    "end": "end",
}
SENSES = {"<=": "<=", "=<": "<=", "<": "<=", ">=": ">=", "=>": ">=", ">": ">=", "=": "="}
# c_u_budget_0_ -> budget_0
ROW_LABEL = re.compile(r"(?:c_[elu]|r_[lu])_(.+)_")

# ({(variable family, set index): coefficient}, constant)
Form = Tuple[Dict[Tuple[str, int], float], float]


class ExportError(ValueError):
    """Raised when an objective or constraint cannot be linearized soundly."""


def _table_rule(table: Dict):
    """Indexed-component rule that looks each index up in a prebuilt table."""

    def rule(block, *index):
        return table[index if len(index) > 1 else index[0]]

    return rule


def _difference(first: Form, second: Form) -> Form:
    terms = dict(first[0])
    for var, coef in second[0].items():
        terms[var] = terms.get(var, 0.0) - coef
    return terms, first[1] - second[1]


class _Builder:
    """Adds components to one ConcreteModel; E_ik = slope_ik * mc_i + base_ik throughout."""

    def __init__(self, model: FittedModel, scenario: Scenario, neighbors: NeighborStructure,
                 aggregate_model: Optional[FittedModel]):
        self.scenario = scenario
        self.neighbors = neighbors
        self.response = InterventionResponse(model, scenario, neighbors)
        self.aggregate_response = (
            InterventionResponse(aggregate_model, scenario, neighbors) if aggregate_model else None
        )
        self.baseline = self.response.predict(np.zeros(scenario.m, dtype=np.int64))
        self._weights = None

        self.sets = list(range(scenario.m))
        self.groups = list(range(scenario.r))
        self.picks = [(i, int(j)) for i in self.sets for j in neighbors.indices[i]]
        self.pm = pyo.ConcreteModel(name=MODEL_NAME)
        self.pm.z = pyo.Var(self.sets, domain=pyo.Binary)
        self.pm.const_one = pyo.Var(bounds=(1.0, 1.0), initialize=1.0)

    @property
    def weights(self) -> np.ndarray:
        if self._weights is None:
            self._weights = group_weights(self.scenario)
        return self._weights

    def linear(self, form: Form):
        """(pyomo expression or None when every coefficient is zero, constant)."""
        terms, constant = form
        live = [(getattr(self.pm, family)[i], float(coef)) for (family, i), coef in terms.items() if coef != 0.0]
        return pyo.quicksum(coef * var for var, coef in live) if live else None, float(constant)

    def row(self, name: str, form: Form, sense: str, rhs: float):
        """
        `form sense rhs` as a pyomo relation.

        A form whose every coefficient is zero keeps its constant on `const_one`;
        a zero form is dropped when it holds and rejected when it cannot.
        """
        body, constant = self.linear(form)
        rhs = float(rhs)
        if body is None:
            if constant != 0.0:
                body, constant = constant * self.pm.const_one, 0.0
            elif (sense == "<=" and 0.0 <= rhs) or (sense == ">=" and 0.0 >= rhs) or (sense == "=" and rhs == 0.0):
                return pyo.Constraint.Skip
            else:
                raise ExportError(f"row {name} reads 0 {sense} {rhs:g} and cannot hold for any intervention")
        bound = rhs - constant
        if sense == "<=":
            return body <= bound
        if sense == ">=":
            return body >= bound
        return body == bound

    def family(self, name: str, table: Dict) -> None:
        if table:
            self.pm.add_component(name, pyo.Constraint(list(table), rule=_table_rule(table)))

    def intervention_structure(self) -> None:
        """t_j = c_j or z_j, and mc_i = max_j s_ij t_j through selection binaries w_ij."""
        pm, scenario, neighbors = self.pm, self.scenario, self.neighbors
        pm.t = pyo.Var(self.sets, bounds=(0.0, 1.0))
        pm.mc = pyo.Var(self.sets, bounds=(0.0, 1.0))
        pm.w = pyo.Var(self.picks, domain=pyo.Binary)

        calc = [float(c) for c in scenario.calc]
        pm.or_calc = pyo.Constraint(self.sets, rule=lambda m_, j: m_.t[j] >= calc[j])
        pm.or_z = pyo.Constraint(self.sets, rule=lambda m_, j: m_.t[j] - m_.z[j] >= 0.0)
        pm.or_cap = pyo.Constraint(self.sets, rule=lambda m_, j: m_.t[j] - m_.z[j] <= calc[j])
        self._max_structure(pm.mc, pm.t, pm.w, "mc")

    def treated_only_structure(self) -> None:
        """mz_i = max_j s_ij z_j: the calc term of the aggregate model, which ignores observed c."""
        pm = self.pm
        if hasattr(pm, "mz"):
            return
        pm.mz = pyo.Var(self.sets, bounds=(0.0, 1.0))
        pm.y = pyo.Var(self.picks, domain=pyo.Binary)
        self._max_structure(pm.mz, pm.z, pm.y, "mz")

    def _max_structure(self, top, source, pick, prefix: str) -> None:
        similarity = {
            (i, int(j)): float(s)
            for i in self.sets
            for j, s in zip(self.neighbors.indices[i], self.neighbors.similarity[i])
        }
        pm = self.pm
        pm.add_component(f"{prefix}_lb", pyo.Constraint(
            self.picks, rule=lambda m_, i, j: top[i] - similarity[i, j] * source[j] >= 0.0))
        pm.add_component(f"{prefix}_ub", pyo.Constraint(
            self.picks, rule=lambda m_, i, j: top[i] - similarity[i, j] * source[j] + pick[i, j] <= 1.0))
        pm.add_component(f"{prefix}_pick", pyo.Constraint(
            self.sets, rule=lambda m_, i: pyo.quicksum(pick[i, int(j)] for j in self.neighbors.indices[i]) == 1))

    def outcome(self, i: int, k: int) -> Form:
        """E_ik as (linear terms, constant)."""
        return {("mc", i): float(self.response.slope[i, k])}, float(self.response.base[i, k])

    def group_mean(self, k: int) -> Form:
        """mu_k as (linear terms, constant)."""
        weights = self.weights[:, k]
        terms = {("mc", i): float(weights[i] * self.response.slope[i, k]) for i in self.sets}
        return terms, float(weights @ self.response.base[:, k])

    def absolute(self, differences: Dict[tuple, Form]):
        """u >= gap and u >= -gap for every index; returns the u variables."""
        pm, index = self.pm, list(differences)
        pm.u = pyo.Var(index, bounds=(0.0, None))
        gaps = {}
        for idx, form in differences.items():
            body, constant = self.linear(form)
            gaps[idx] = constant if body is None else body + constant
        pm.gap = pyo.Expression(index, rule=_table_rule(gaps))
        pm.gap_pos = pyo.Constraint(index, rule=_table_rule({idx: pm.u[idx] >= pm.gap[idx] for idx in index}))
        pm.gap_neg = pyo.Constraint(index, rule=_table_rule({idx: pm.u[idx] >= -pm.gap[idx] for idx in index}))
        return pm.u

    def shortfall(self, kappa: float, values: Dict[tuple, Form]):
        """v >= kappa - value, v >= 0, for every index; returns the v variables."""
        pm, index = self.pm, list(values)
        pm.v = pyo.Var(index, bounds=(0.0, None))
        short = {}
        for idx, form in values.items():
            body, constant = self.linear(form)
            short[idx] = float(kappa) - constant - (body if body is not None else 0.0)
        pm.shortfall = pyo.Expression(index, rule=_table_rule(short))
        pm.short = pyo.Constraint(index, rule=_table_rule({idx: pm.v[idx] >= pm.shortfall[idx] for idx in index}))
        return pm.v


def _objective(builder: _Builder, spec: ObjectiveSpec, aggregate_objective: bool):
    scenario = builder.scenario
    pairs = [(k, q) for k in builder.groups for q in builder.groups if k < q]
    kind = spec.kind

    if kind == ObjectiveKind.ACROSS:
        means = [builder.group_mean(k) for k in builder.groups]
        u = builder.absolute({(k, q): _difference(means[k], means[q]) for k, q in pairs})
        return spec.pair_factor * pyo.quicksum(u[idx] for idx in u)
    if kind == ObjectiveKind.WITHIN:
        u = builder.absolute({
            (i, k, q): _difference(builder.outcome(i, k), builder.outcome(i, q))
            for i in builder.sets for k, q in pairs
        })
        return spec.pair_factor * pyo.quicksum(u[idx] for idx in u)
    if kind == ObjectiveKind.THRESHOLD_WITHIN:
        v = builder.shortfall(spec.kappa, {(i, k): builder.outcome(i, k) for i in builder.sets for k in builder.groups})
        return pyo.quicksum(v[idx] for idx in v)
    if kind == ObjectiveKind.THRESHOLD_ACROSS:
        v = builder.shortfall(spec.kappa, {k: builder.group_mean(k) for k in builder.groups})
        return pyo.quicksum(v[idx] for idx in v)

    # aggregate impact: sum_i (n^(i) / n) E_i on the aggregate model, or (1/n) sum_ik n_ik E_ik
    mass = scenario.mass
    total = float(mass.sum())
    if total == 0:
        raise ExportError("aggregate impact needs a population with non-zero weight")
    pm = builder.pm
    if aggregate_objective:
        response = builder.aggregate_response
        if response is None:
            raise ExportError("scoring the aggregate objective on the aggregate model needs that model")
        builder.treated_only_structure()
        share = mass.sum(axis=1) / total
        terms = {("mz", i): float(share[i] * response.slope[i, 0]) for i in builder.sets}
        constant = float(share @ response.base[:, 0])
    else:
        share = mass / total
        terms = {("mc", i): float(share[i] @ builder.response.slope[i]) for i in builder.sets}
        constant = float((share * builder.response.base).sum())
    body, _ = builder.linear((terms, 0.0))
    objective = constant * pm.const_one
    return objective if body is None else body + objective


def _constraints(builder: _Builder, constraints: Sequence[ConstraintSpec]) -> None:
    pm = builder.pm
    for n, c in enumerate(constraints):
        if isinstance(c, Budget):
            pm.add_component(f"budget_{n}", pyo.Constraint(expr=pyo.quicksum(pm.z[j] for j in builder.sets) <= c.b))
        elif isinstance(c, (NoHarmAcross, MinRateAcross)):
            name = f"mean_floor_{n}"
            baseline = (builder.weights * builder.baseline).sum(axis=0) if isinstance(c, NoHarmAcross) else None
            builder.family(name, {
                k: builder.row(f"{name}[{k}]", builder.group_mean(k), ">=",
                               c.eta + baseline[k] if baseline is not None else c.kappa)
                for k in builder.groups
            })
        elif isinstance(c, (NoHarmWithin, MinRateWithin)):
            name = f"cell_floor_{n}"
            cells = _cells(builder, c) if isinstance(c, NoHarmWithin) else [
                (i, k) for i in builder.sets for k in builder.groups
            ]
            builder.family(name, {
                (i, k): builder.row(f"{name}[{i},{k}]", builder.outcome(i, k), ">=",
                                    c.eta + builder.baseline[i, k] if isinstance(c, NoHarmWithin) else c.kappa)
                for i, k in cells
            })
        elif isinstance(c, MaxGapAcross):
            name = f"max_gap_{n}"
            means = [builder.group_mean(k) for k in builder.groups]
            builder.family(name, {
                (k, q): builder.row(f"{name}[{k},{q}]", _difference(means[k], means[q]), "<=", c.epsilon)
                for k in builder.groups for q in builder.groups if k != q
            })
        elif isinstance(c, CounterfactualPrivilege):
            _privilege_rows(builder, n, c)
        else:
            raise ExportError(f"constraint {c!r} has no linear form")


def _cells(builder: _Builder, constraint: NoHarmWithin) -> List[Tuple[int, int]]:
    scenario = builder.scenario
    if constraint.cells is None:
        return [(i, k) for i in builder.sets for k in builder.groups]
    set_index = {sid: i for i, sid in enumerate(scenario.set_ids)}
    group_index = {g: k for k, g in enumerate(scenario.groups)}
    try:
        return [(set_index[sid], group_index[group]) for sid, group in constraint.cells]
    except KeyError as e:
        raise ExportError(f"no-harm cell {e.args[0]!r} is not in the scenario") from None


def _privilege_rows(builder: _Builder, n: int, constraint: CounterfactualPrivilege) -> None:
    """c_ik = E_i(rho_i) - E_i(e_k) <= tau - slack, linear in the aggregate model's mz_i."""
    response = builder.aggregate_response
    if response is None:
        raise ExportError("the tau (counterfactual privilege) constraint needs the aggregate model")
    builder.treated_only_structure()
    alpha, beta, gamma, theta = response.model.coefficients[0]
    name = f"privilege_{n}"
    rows = {}
    for i in builder.sets:
        for k in builder.groups:
            slope = float(response.slope[i, 0] - alpha[k])
            counterfactual = beta[k] * response.max_ap[i] + gamma[k] * response.counselors[i] + theta[k]
            constant = float(response.base[i, 0] - counterfactual)
            rows[i, k] = builder.row(f"{name}[{i},{k}]", ({("mz", i): slope}, constant), "<=",
                                     constraint.tau - PRIVILEGE_SLACK)
    builder.family(name, rows)


def build_model(model: FittedModel, scenario: Scenario, neighbors: NeighborStructure,
                objective: ObjectiveSpec, constraints: Sequence[ConstraintSpec],
                aggregate_model: Optional[FittedModel] = None, sense: Optional[str] = None,
                aggregate_objective: bool = False) -> pyo.ConcreteModel:
    """
    Linearizes the intervention problem as a pyomo model.

    t_j = c_j or z_j and mc_i = max_j s_ij t_j are encoded exactly with selection
    binaries w_ij; the aggregate model's mz_i = max_j s_ij z_j uses binaries y_ij.
    Absolute differences and threshold shortfalls become epigraph variables u and
    v, which is only sound when they are minimized.

    Raises:
        ExportError: If a disparity objective is requested in maximize sense
    """
    sense = sense or objective.sense
    if sense not in ("minimize", "maximize"):
        raise ExportError(f"sense must be minimize or maximize, got {sense!r}")
    if objective.is_disparity and sense == "maximize":
        raise ExportError(f"{objective.label} can only be exported for minimization; "
                          "its absolute-value and shortfall terms are not sound when maximized")
    if aggregate_objective and objective.is_disparity:
        raise ExportError("aggregate-model scoring only applies to the aggregate objective")

    builder = _Builder(model, scenario, neighbors, aggregate_model)
    builder.intervention_structure()
    expr = _objective(builder, objective, aggregate_objective)
    _constraints(builder, constraints)
    builder.pm.obj = pyo.Objective(expr=expr, sense=pyo.minimize if sense == "minimize" else pyo.maximize)
    return builder.pm


def implied_assignment(pm: pyo.ConcreteModel, scenario: Scenario, neighbors: NeighborStructure,
                       z: Sequence[int]) -> pyo.ConcreteModel:
    """
    Loads the values every variable takes at intervention z into `pm`.

    Selection binaries go to the first neighbor attaining the max; epigraph
    variables take the smallest value their rows allow. Nothing is fixed.
    """
    z = as_intervention(z, scenario.m)
    treated = np.maximum(scenario.calc, z)
    sources = [("mc", "w", treated)]
    if hasattr(pm, "mz"):
        sources.append(("mz", "y", z))

    pm.const_one.value = 1.0
    for j in range(scenario.m):
        pm.z[j].value = float(z[j])
        pm.t[j].value = float(treated[j])
    for top_name, pick_name, source in sources:
        top, pick = getattr(pm, top_name), getattr(pm, pick_name)
        scores = neighbors.similarity * source[neighbors.indices]
        for i in range(scenario.m):
            chosen = int(np.argmax(scores[i]))
            top[i].value = float(scores[i, chosen])
            for position, j in enumerate(neighbors.indices[i]):
                pick[i, int(j)].value = 1.0 if position == chosen else 0.0

    if hasattr(pm, "gap"):
        for idx in pm.gap:
            pm.u[idx].value = abs(pyo.value(pm.gap[idx]))
    if hasattr(pm, "shortfall"):
        for idx in pm.shortfall:
            pm.v[idx].value = max(0.0, pyo.value(pm.shortfall[idx]))
    return pm


def evaluate_model(pm: pyo.ConcreteModel) -> float:
    return float(pyo.value(pm.obj))


def violated_constraints(pm: pyo.ConcreteModel, tolerance: float = 1e-9) -> List[str]:
    """Names of active constraints the loaded values break by more than `tolerance`."""
    broken = []
    for con in pm.component_data_objects(pyo.Constraint, active=True):
        body = pyo.value(con.body)
        if (con.has_lb() and body < pyo.value(con.lower) - tolerance
                or con.has_ub() and body > pyo.value(con.upper) + tolerance):
            broken.append(con.name)
    return broken


# ---------------------------------------------------------------------------
# LP file
# ---------------------------------------------------------------------------

@dataclass
class LpExport:
    """An LP file together with the pyomo variable behind every label in it."""
    path: Path
    variables: Dict[str, object]

    def values(self) -> Dict[str, float]:
        """Current value of each labelled variable."""
        values = {label: float(var.value) for label, var in self.variables.items()}
        values[ONE_VAR_CONSTANT] = 1.0
        return values


def write_lp(pm: pyo.ConcreteModel, path: Union[str, Path]) -> LpExport:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        _, symbol_map_id = pm.write(str(path), format="lp", io_options={"symbolic_solver_labels": True})
    except OSError as e:
        raise ExportError(f"cannot write LP file {path}: {e}") from e

    labels = pm.solutions.symbol_map[symbol_map_id].byObject
    variables = {
        labels[id(var)]: var
        for var in pm.component_data_objects(pyo.Var, descend_into=True)
        if id(var) in labels
    }
    logger.info(f"LP written to {path} ({len(variables)} variables)")
    return LpExport(path, variables)


@dataclass
class Row:
    name: str
    coefficients: Dict[str, float]
    sense: str
    rhs: float

    @property
    def constraint(self) -> str:
        """Model-side constraint name behind the LP row label."""
        match = ROW_LABEL.fullmatch(self.name)
        return match.group(1) if match else self.name


@dataclass
class LinearProgram:
    """A mixed-integer linear program read back from a CPLEX LP file."""
    sense: str
    objective: Dict[str, float]
    rows: List[Row] = field(default_factory=list)
    bounds: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    binaries: List[str] = field(default_factory=list)
    integers: List[str] = field(default_factory=list)

    def variables(self) -> List[str]:
        names: Dict[str, None] = dict.fromkeys(self.objective)
        for row in self.rows:
            names.update(dict.fromkeys(row.coefficients))
        names.update(dict.fromkeys(list(self.bounds) + self.binaries + self.integers))
        return list(names)


def _number(token: str) -> Optional[float]:
    try:
        return float(token)
    except ValueError:
        return None


def _bound(parts: List[str]) -> Optional[Tuple[str, float, float]]:
    inf = float("inf")
    if len(parts) == 5 and parts[1] == "<=" and parts[3] == "<=":
        lower, upper = _number(parts[0]), _number(parts[4])
        if lower is not None and upper is not None:
            return parts[2], lower, upper
    if len(parts) == 3 and parts[1] in SENSES:
        value = _number(parts[2])
        if value is not None:
            sense = SENSES[parts[1]]
            if sense == "=":
                return parts[0], value, value
            return (parts[0], value, inf) if sense == ">=" else (parts[0], -inf, value)
        value = _number(parts[0])
        if value is not None and SENSES[parts[1]] == "<=":
            return parts[2], value, inf
    if len(parts) == 2 and parts[1].lower() == "free":
        return parts[0], -inf, inf
    return None


def parse_lp(text: str) -> LinearProgram:
    """
    Reads the linear subset of CPLEX LP: objective, rows, bounds and integrality.

    Rows may be spread over several lines; `\\` starts a comment.

    Raises:
        ExportError: On content outside that subset, naming the line
    """
    program = LinearProgram("minimize", {})
    section: Optional[str] = None
    name: Optional[str] = None
    terms: Dict[str, float] = {}
    coefficient: Optional[float] = None
    sense: Optional[str] = None
    bounds: Dict[str, Tuple[float, float]] = {}

    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("\\"):
            continue
        header = SECTION_NAMES.get(" ".join(line.lower().split()))
        if header is not None:
            if sense is not None or (section == "subject to" and terms):
                raise ExportError(f"line {number}: row {name!r} is unfinished")
            if section in ("minimize", "maximize"):
                program.objective = terms
            section, name, terms, coefficient = header, None, {}, None
            if header in ("minimize", "maximize"):
                program.sense = header
            if header == "end":
                break
            continue

        if section in ("minimize", "maximize", "subject to"):
            for token in line.split():
                if token.endswith(":") and len(token) > 1:
                    if section == "subject to" and terms:
                        raise ExportError(f"line {number}: row {name!r} has no sense")
                    name = token[:-1]
                    continue
                if sense is not None:
                    rhs = _number(token)
                    if rhs is None:
                        raise ExportError(f"line {number}: expected a right-hand side, got {token!r}")
                    program.rows.append(Row(name, terms, sense, rhs))
                    name, terms, sense = None, {}, None
                    continue
                if token in SENSES:
                    if section != "subject to" or name is None:
                        raise ExportError(f"line {number}: comparison outside a row: {line!r}")
                    sense = SENSES[token]
                    continue
                if section == "subject to" and name is None:
                    raise ExportError(f"line {number}: term outside a row: {line!r}")
                if token in ("+", "-"):
                    coefficient = (coefficient or 1.0) * (-1.0 if token == "-" else 1.0)
                    continue
                value = _number(token)
                if value is not None:
                    coefficient = value * (coefficient if coefficient is not None else 1.0)
                    continue
                terms[token] = terms.get(token, 0.0) + (coefficient if coefficient is not None else 1.0)
                coefficient = None
        elif section == "bounds":
            bound = _bound(line.split())
            if bound is None:
                raise ExportError(f"line {number}: malformed bound {line!r}")
            bounds[bound[0]] = bound[1:]
        elif section == "binary":
            program.binaries.extend(line.split())
        elif section == "general":
            program.integers.extend(line.split())
        else:
            raise ExportError(f"line {number}: unexpected content {line!r}")

    if section in ("minimize", "maximize"):
        program.objective = terms
    program.bounds = bounds
    return program


def read_lp(path: Union[str, Path]) -> LinearProgram:
    return parse_lp(Path(path).read_text())


def evaluate_objective(program: LinearProgram, values: Dict[str, float]) -> float:
    return float(sum(coef * values[name] for name, coef in program.objective.items()))


def violated_rows(program: LinearProgram, values: Dict[str, float], tolerance: float = 1e-9) -> List[str]:
    """Constraint names of LP rows the assignment breaks by more than `tolerance`."""
    broken = []
    for row in program.rows:
        lhs = sum(coef * values[name] for name, coef in row.coefficients.items())
        if (row.sense == "<=" and lhs > row.rhs + tolerance
                or row.sense == ">=" and lhs < row.rhs - tolerance
                or row.sense == "=" and abs(lhs - row.rhs) > tolerance):
            broken.append(row.constraint)
    return broken


def export_milp(model: FittedModel, scenario: Scenario, neighbors: NeighborStructure,
                objective: ObjectiveSpec, constraints: Sequence[ConstraintSpec], path: Union[str, Path],
                aggregate_model: Optional[FittedModel] = None, sense: Optional[str] = None,
                aggregate_objective: bool = False) -> Path:
    """Builds the MILP and writes it as a CPLEX LP file."""
    pm = build_model(model, scenario, neighbors, objective, constraints, aggregate_model, sense,
                     aggregate_objective)
    return write_lp(pm, path).path
