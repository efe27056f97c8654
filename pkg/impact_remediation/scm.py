import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import polars as pl

from impact_remediation.scenario import NeighborStructure, Scenario

logger = logging.getLogger(__name__)

BLOCKS = ("alpha", "beta", "gamma", "theta")
DISAGGREGATED = "disaggregated"
AGGREGATE = "aggregate"
AGGREGATE_OUTCOME = "aggregate"
MODEL_FORMAT = "impact-remediation-model"
MODEL_FORMAT_VERSION = 1
SIMPLEX_TOLERANCE = 1e-9


class ModelMismatchError(ValueError):
    """Raised when a model does not match the scenario or the requested use."""


class FitError(ValueError):
    """Raised when least squares cannot be run on the given data."""


@dataclass(frozen=True)
class FitDiagnostics:
    rss: float
    rank: int
    condition: float
    n_obs: int


@dataclass(frozen=True, eq=False)
class FittedModel:
    """
    Structural-equation coefficients.

    `coefficients[g, b, :]` is block b (alpha, beta, gamma, theta) of outcome g,
    a vector over `categories` that is dotted with rho^(i). A disaggregated model
    has one outcome per group; the aggregate model has the single outcome
    "aggregate".
    """
    outcomes: Tuple[str, ...]
    categories: Tuple[str, ...]
    coefficients: np.ndarray
    diagnostics: Tuple[FitDiagnostics, ...] = ()
    kind: str = DISAGGREGATED

    def __post_init__(self):
        object.__setattr__(self, "outcomes", tuple(self.outcomes))
        object.__setattr__(self, "categories", tuple(self.categories))
        coefficients = np.array(self.coefficients, dtype=np.float64, copy=True)
        coefficients.setflags(write=False)
        object.__setattr__(self, "coefficients", coefficients)
        object.__setattr__(self, "diagnostics", tuple(self.diagnostics))

        expected = (len(self.outcomes), len(BLOCKS), len(self.categories))
        if coefficients.shape != expected:
            raise ModelMismatchError(f"coefficients have shape {coefficients.shape}, expected {expected}")
        if self.kind not in (DISAGGREGATED, AGGREGATE):
            raise ModelMismatchError(f"unknown model kind {self.kind!r}")
        if self.kind == AGGREGATE and len(self.outcomes) != 1:
            raise ModelMismatchError("an aggregate model has exactly one outcome")

    def block(self, name: str) -> np.ndarray:
        """(outcomes x categories) matrix of one coefficient block."""
        return self.coefficients[:, BLOCKS.index(name), :]

    @property
    def alpha(self) -> np.ndarray:
        return self.block("alpha")

    @property
    def beta(self) -> np.ndarray:
        return self.block("beta")

    @property
    def gamma(self) -> np.ndarray:
        return self.block("gamma")

    @property
    def theta(self) -> np.ndarray:
        return self.block("theta")

    def __eq__(self, other) -> bool:
        if not isinstance(other, FittedModel):
            return NotImplemented
        return (
            self.outcomes == other.outcomes
            and self.categories == other.categories
            and self.kind == other.kind
            and np.array_equal(self.coefficients, other.coefficients)
            and self.diagnostics == other.diagnostics
        )

    __hash__ = None


class FeatureBundle(NamedTuple):
    max_calc: np.ndarray
    max_ap: np.ndarray
    counselors: np.ndarray
    proportions: np.ndarray


def as_intervention(z: Sequence[int], m: int) -> np.ndarray:
    """Validates an intervention vector and returns it as a 0/1 int array."""
    z = np.asarray(z)
    if z.shape != (m,):
        raise ValueError(f"intervention vector must have length {m}, got shape {z.shape}")
    if not np.isin(z, (0, 1)).all():
        raise ValueError("intervention vector entries must be 0 or 1")
    return z.astype(np.int64)


def _neighbor_max(neighbors: NeighborStructure, values: np.ndarray) -> np.ndarray:
    return (neighbors.similarity * values[neighbors.indices]).max(axis=1)


def build_features(scenario: Scenario, neighbors: NeighborStructure, z: Sequence[int],
                   observed_calc: bool = True) -> FeatureBundle:
    """
    Per-set regressors under intervention z.

    maxCalc_i(z) = max_{j in N(i)} s(i,j) (c_j or z_j), or s(i,j) z_j alone when
    `observed_calc` is off; maxAP_i ignores z.
    """
    z = as_intervention(z, scenario.m)
    treated = np.maximum(scenario.calc, z) if observed_calc else z
    return FeatureBundle(
        max_calc=_neighbor_max(neighbors, treated),
        max_ap=_neighbor_max(neighbors, scenario.ap),
        counselors=scenario.counselors,
        proportions=scenario.proportions,
    )


def design_matrix(features: FeatureBundle) -> np.ndarray:
    """m x 4r matrix: rho*maxCalc, rho*maxAP, rho*f, rho."""
    rho = features.proportions
    return np.hstack([
        rho * features.max_calc[:, None],
        rho * features.max_ap[:, None],
        rho * features.counselors[:, None],
        rho,
    ])


def least_squares(design: np.ndarray, target: np.ndarray,
                  weights: Optional[np.ndarray] = None) -> Tuple[np.ndarray, FitDiagnostics]:
    """
    Minimum-norm least squares through numpy's SVD-based solver.

    Args:
        design: (n x p) design matrix
        target: length-n response
        weights: optional non-negative observation weights

    Returns:
        Coefficient vector of length p and fit diagnostics

    Raises:
        FitError: If there are no observations or any value is non-finite
    """
    design = np.asarray(design, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if design.ndim != 2 or design.shape[0] < 1:
        raise FitError("least squares needs at least one observation")
    if target.shape != (design.shape[0],):
        raise FitError(f"target has shape {target.shape}, expected ({design.shape[0]},)")
    if not (np.isfinite(design).all() and np.isfinite(target).all()):
        raise FitError("design and target must be finite")

    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if not np.isfinite(weights).all() or (weights < 0).any():
            raise FitError("observation weights must be finite and non-negative")
        root = np.sqrt(weights)
        design, target = design * root[:, None], target * root

    coef, _, rank, singular = np.linalg.lstsq(design, target, rcond=None)
    residual = target - design @ coef
    condition = float(singular[0] / singular[rank - 1]) if rank > 0 else float("inf")
    return coef, FitDiagnostics(float(residual @ residual), int(rank), condition, int(design.shape[0]))


def fit(scenario: Scenario, neighbors: NeighborStructure, weighted: bool = False) -> FittedModel:
    """
    Fits one structural equation per group under the null intervention (observed c).

    With `weighted`, observations of group k are weighted by n_k^(i).
    """
    features = build_features(scenario, neighbors, np.zeros(scenario.m, dtype=np.int64))
    design = design_matrix(features)
    r = scenario.r

    coefficients = np.empty((r, len(BLOCKS), r))
    diagnostics = []
    for k, group in enumerate(scenario.groups):
        weights = scenario.mass[:, k] if weighted else None
        coef, diag = least_squares(design, scenario.rates[:, k], weights)
        coefficients[k] = coef.reshape(len(BLOCKS), r)
        diagnostics.append(diag)
        logger.debug(f"Group {group!r}: rss={diag.rss:.3g}, rank={diag.rank}/{design.shape[1]}, cond={diag.condition:.3g}")
        if diag.rank < design.shape[1]:
            logger.info(f"Group {group!r}: rank-deficient design ({diag.rank} < {design.shape[1]}), using minimum-norm solution")

    logger.info(f"Fitted disaggregated model for {r} groups on {scenario.m} sets")
    return FittedModel(scenario.groups, scenario.groups, coefficients, tuple(diagnostics), DISAGGREGATED)


def fit_aggregate(scenario: Scenario, neighbors: NeighborStructure, weighted: bool = False) -> FittedModel:
    """
    Fits the one-outcome model on each set's pooled outcome rate.

    Sets with zero total weight have no pooled rate and are left out of the fit.
    The fit sees the observed calc term; responses built on the result count
    interventions only.
    """
    mass = scenario.mass
    totals = mass.sum(axis=1)
    keep = totals > 0
    if not keep.any():
        raise FitError("every set has zero total weight; no pooled outcome to fit")
    pooled = (mass * scenario.rates).sum(axis=1)[keep] / totals[keep]

    features = build_features(scenario, neighbors, np.zeros(scenario.m, dtype=np.int64))
    design = design_matrix(features)[keep]
    coef, diag = least_squares(design, pooled, totals[keep] if weighted else None)
    logger.info(f"Fitted aggregate model on {int(keep.sum())} sets (rank {diag.rank}/{design.shape[1]})")
    return FittedModel(
        (AGGREGATE_OUTCOME,), scenario.groups, coef.reshape(1, len(BLOCKS), scenario.r), (diag,), AGGREGATE
    )


def _check_compatible(model: FittedModel, scenario: Scenario) -> None:
    if model.categories != scenario.groups:
        raise ModelMismatchError(
            f"model categories {list(model.categories)} do not match scenario groups {list(scenario.groups)}"
        )
    if model.kind == DISAGGREGATED and model.outcomes != scenario.groups:
        raise ModelMismatchError(
            f"model outcomes {list(model.outcomes)} do not match scenario groups {list(scenario.groups)}"
        )


class InterventionResponse:
    """
    Precomputed structural equations for fast evaluation of many interventions.

    E[i, g](z) = slope[i, g] * maxCalc_i(z) + base[i, g]; everything except
    maxCalc is independent of z.

    The disaggregated model's calc term is c_j or z_j. The aggregate model
    counts only interventions, C_j(z) = z_j, unless `observed_calc` says otherwise.
    """

    def __init__(self, model: FittedModel, scenario: Scenario, neighbors: NeighborStructure,
                 observed_calc: Optional[bool] = None):
        _check_compatible(model, scenario)
        if neighbors.m != scenario.m:
            raise ModelMismatchError(f"neighbor structure covers {neighbors.m} sets, scenario has {scenario.m}")
        self.model = model
        self.scenario = scenario
        self.indices = neighbors.indices
        self.similarity = neighbors.similarity
        self.observed_calc = model.kind == DISAGGREGATED if observed_calc is None else observed_calc
        self.calc = scenario.calc if self.observed_calc else np.zeros(scenario.m, dtype=np.int64)

        rho = scenario.proportions
        self.max_ap = _neighbor_max(neighbors, scenario.ap)
        self.counselors = scenario.counselors
        self.slope = rho @ model.alpha.T
        self.base = (
            (rho @ model.beta.T) * self.max_ap[:, None]
            + (rho @ model.gamma.T) * self.counselors[:, None]
            + rho @ model.theta.T
        )

    @property
    def m(self) -> int:
        return self.scenario.m

    def max_calc(self, z: np.ndarray) -> np.ndarray:
        treated = np.maximum(self.calc, z)
        return (self.similarity * treated[self.indices]).max(axis=1)

    def expected(self, max_calc: np.ndarray) -> np.ndarray:
        return self.slope * max_calc[:, None] + self.base

    def predict(self, z: np.ndarray) -> np.ndarray:
        return self.expected(self.max_calc(z))

    def max_calc_bounds(self, prefix: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
        """maxCalc with every undecided entry at 0 and at 1; z_j for j < len(prefix) is fixed."""
        depth = len(prefix)
        low = np.zeros(self.m, dtype=np.int64)
        low[:depth] = prefix
        high = low.copy()
        high[depth:] = 1
        return self.max_calc(low), self.max_calc(high)

    def expected_bounds(self, mc_low: np.ndarray, mc_high: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Elementwise interval of E given maxCalc intervals, using the sign of each slope."""
        at_low = self.expected(mc_low)
        at_high = self.expected(mc_high)
        return np.minimum(at_low, at_high), np.maximum(at_low, at_high)

    def privilege(self, max_calc: np.ndarray) -> np.ndarray:
        """
        c_{i,k} = E_i(rho^(i), z) - E_i(e_k, z) for every set i and one-hot category k.

        Only defined for the one-outcome aggregate model.
        """
        if self.model.kind != AGGREGATE:
            raise ModelMismatchError("counterfactual privilege needs the aggregate (one-outcome) model")
        blocks = self.model.coefficients[0]
        counterfactual = (
            blocks[0][None, :] * max_calc[:, None]
            + blocks[1][None, :] * self.max_ap[:, None]
            + blocks[2][None, :] * self.counselors[:, None]
            + blocks[3][None, :]
        )
        return self.expected(max_calc)[:, :1] - counterfactual


def prediction_range_warning(predicted: np.ndarray) -> Optional[str]:
    outside = int(((predicted < 0) | (predicted > 1)).sum())
    if outside == 0:
        return None
    return (f"{outside} expected outcome(s) outside [0, 1] "
            f"(min {predicted.min():.4g}, max {predicted.max():.4g}); values are not clamped")


def predict(model: FittedModel, scenario: Scenario, neighbors: NeighborStructure, z: Sequence[int]) -> np.ndarray:
    """
    Expected outcomes E[Y_k^(i)(z)] as an m x (outcomes) matrix; not clamped to [0, 1].

    Raises:
        ModelMismatchError: If the model was fitted on a different group list
    """
    response = InterventionResponse(model, scenario, neighbors)
    predicted = response.predict(as_intervention(z, scenario.m))
    warning = prediction_range_warning(predicted)
    if warning:
        logger.warning(warning)
    return predicted


def _structural_value(blocks: np.ndarray, rho: np.ndarray, features: Sequence[float]) -> float:
    max_calc, max_ap, counselors = features
    return float(
        np.dot(blocks[0], rho) * max_calc
        + (np.dot(blocks[1], rho) * max_ap + np.dot(blocks[2], rho) * counselors + np.dot(blocks[3], rho))
    )


def counterfactual_privilege(model: FittedModel, scenario: Scenario, neighbors: NeighborStructure,
                             z: Sequence[int], i: int, rho_prime: Sequence[float]) -> float:
    """
    c_ir' = E[Y^(i)(rho^(i), z)] - E[Y^(i)(rho', z)] under the aggregate model.

    The calc term counts interventions only: maxCalc_i = max_j s(i,j) z_j.

    Raises:
        ModelMismatchError: If the model is not the one-outcome aggregate model
        ValueError: If rho_prime is not on the probability simplex
    """
    if model.kind != AGGREGATE:
        raise ModelMismatchError("counterfactual privilege needs the aggregate (one-outcome) model")
    _check_compatible(model, scenario)
    rho_prime = np.asarray(rho_prime, dtype=np.float64)
    if rho_prime.shape != (scenario.r,) or (rho_prime < 0).any() or abs(rho_prime.sum() - 1.0) > SIMPLEX_TOLERANCE:
        raise ValueError(f"rho_prime must be a length-{scenario.r} vector on the simplex, got {rho_prime.tolist()}")

    features = build_features(scenario, neighbors, z, observed_calc=False)
    values = (features.max_calc[i], features.max_ap[i], features.counselors[i])
    blocks = model.coefficients[0]
    return _structural_value(blocks, features.proportions[i], values) - _structural_value(blocks, rho_prime, values)


# ---------------------------------------------------------------------------
# Model file
# ---------------------------------------------------------------------------

def save_model(model: FittedModel, path: Union[str, Path]) -> Path:
    """Writes coefficients (17 significant digits) and diagnostics to a versioned text file."""
    path = Path(path)
    header = {
        "format": MODEL_FORMAT,
        "version": MODEL_FORMAT_VERSION,
        "kind": model.kind,
        "outcomes": list(model.outcomes),
        "categories": list(model.categories),
    }
    rows = [
        (outcome, block, category, f"{model.coefficients[g, b, c]:.17g}")
        for g, outcome in enumerate(model.outcomes)
        for b, block in enumerate(BLOCKS)
        for c, category in enumerate(model.categories)
    ]
    for outcome, diag in zip(model.outcomes, model.diagnostics):
        rows.extend([
            (outcome, "diagnostic", "rss", f"{diag.rss:.17g}"),
            (outcome, "diagnostic", "rank", str(diag.rank)),
            (outcome, "diagnostic", "condition", f"{diag.condition:.17g}"),
            (outcome, "diagnostic", "n_obs", str(diag.n_obs)),
        ])
    body = pl.DataFrame(rows, schema=["outcome", "block", "category", "value"], orient="row").write_csv()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("# " + json.dumps(header, sort_keys=True) + "\n" + body)
    logger.info(f"Model saved to {path}")
    return path


def load_model(path: Union[str, Path]) -> FittedModel:
    """
    Reads a model written by `save_model`.

    Raises:
        ModelMismatchError: On an unknown format/version or missing coefficients
    """
    path = Path(path)
    with path.open() as handle:
        first = handle.readline()
    try:
        header = json.loads(first.lstrip("#").strip())
    except json.JSONDecodeError as e:
        raise ModelMismatchError(f"{path}: missing model header") from e
    if header.get("format") != MODEL_FORMAT or header.get("version") != MODEL_FORMAT_VERSION:
        raise ModelMismatchError(f"{path}: unsupported model format {header.get('format')!r} v{header.get('version')}")

    outcomes, categories = header["outcomes"], header["categories"]
    body = pl.read_csv(path, skip_rows=1, infer_schema=False)
    values = {(row["outcome"], row["block"], row["category"]): row["value"] for row in body.iter_rows(named=True)}

    coefficients = np.empty((len(outcomes), len(BLOCKS), len(categories)))
    missing: List[str] = []
    for g, outcome in enumerate(outcomes):
        for b, block in enumerate(BLOCKS):
            for c, category in enumerate(categories):
                key = (outcome, block, category)
                if key not in values:
                    missing.append("/".join(key))
                else:
                    coefficients[g, b, c] = float(values[key])
    if missing:
        raise ModelMismatchError(f"{path}: missing coefficients {', '.join(missing[:5])}")

    diagnostics = []
    for outcome in outcomes:
        keys = [(outcome, "diagnostic", name) for name in ("rss", "rank", "condition", "n_obs")]
        if all(key in values for key in keys):
            rss, rank, condition, n_obs = (values[key] for key in keys)
            diagnostics.append(FitDiagnostics(float(rss), int(rank), float(condition), int(n_obs)))
    return FittedModel(tuple(outcomes), tuple(categories), coefficients, tuple(diagnostics), header["kind"])
