import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
import polars as pl

from impact_remediation.scenario import EmptyGroupError, Scenario

logger = logging.getLogger(__name__)

UNDEFINED = "undefined"
AGGREGATE_ROW = "__aggregate__"
DISPARITY_ROW = "__disparity__"


class ObjectiveKind(str, Enum):
    WITHIN = "within"
    ACROSS = "across"
    THRESHOLD_WITHIN = "threshold-within"
    THRESHOLD_ACROSS = "threshold-across"
    AGGREGATE = "aggregate"


THRESHOLD_KINDS = (ObjectiveKind.THRESHOLD_WITHIN, ObjectiveKind.THRESHOLD_ACROSS)


@dataclass(frozen=True)
class ObjectiveSpec:
    """
    Which measure to optimize.

    The four disparity variants are minimized; AGGREGATE (population-mean
    expected outcome) is maximized. `ordered_pairs` counts every pair of
    groups twice in the pairwise variants.
    """
    kind: ObjectiveKind = ObjectiveKind.ACROSS
    kappa: Optional[float] = None
    ordered_pairs: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", ObjectiveKind(self.kind))
        if self.kind in THRESHOLD_KINDS:
            if self.kappa is None or not 0.0 <= self.kappa <= 1.0:
                raise ValueError(f"{self.kind.value} needs kappa in [0, 1], got {self.kappa}")
        elif self.kappa is not None:
            raise ValueError(f"kappa is only valid for threshold objectives, not {self.kind.value}")

    @classmethod
    def within(cls, ordered_pairs: bool = False) -> "ObjectiveSpec":
        return cls(ObjectiveKind.WITHIN, ordered_pairs=ordered_pairs)

    @classmethod
    def across(cls, ordered_pairs: bool = False) -> "ObjectiveSpec":
        return cls(ObjectiveKind.ACROSS, ordered_pairs=ordered_pairs)

    @classmethod
    def threshold_within(cls, kappa: float) -> "ObjectiveSpec":
        return cls(ObjectiveKind.THRESHOLD_WITHIN, kappa)

    @classmethod
    def threshold_across(cls, kappa: float) -> "ObjectiveSpec":
        return cls(ObjectiveKind.THRESHOLD_ACROSS, kappa)

    @classmethod
    def aggregate(cls) -> "ObjectiveSpec":
        return cls(ObjectiveKind.AGGREGATE)

    @property
    def sense(self) -> str:
        return "maximize" if self.kind == ObjectiveKind.AGGREGATE else "minimize"

    @property
    def is_disparity(self) -> bool:
        return self.kind != ObjectiveKind.AGGREGATE

    @property
    def pair_factor(self) -> float:
        return 2.0 if self.ordered_pairs else 1.0

    @property
    def label(self) -> str:
        if self.kappa is not None:
            return f"{self.kind.value}(kappa={self.kappa:g})"
        return self.kind.value + (" (ordered pairs)" if self.ordered_pairs else "")


def _check_shape(predicted: np.ndarray, scenario: Scenario) -> np.ndarray:
    predicted = np.asarray(predicted, dtype=np.float64)
    if predicted.shape != (scenario.m, scenario.r):
        raise ValueError(f"expected an {scenario.m} x {scenario.r} outcome matrix, got {predicted.shape}")
    return predicted


def group_weights(scenario: Scenario) -> np.ndarray:
    """m x r matrix of n_k^(i) / n_k (or the weighted analogue); columns sum to 1."""
    mass = scenario.mass
    totals = mass.sum(axis=0)
    empty = [g for g, total in zip(scenario.groups, totals) if total == 0]
    if empty:
        raise EmptyGroupError(f"group(s) {', '.join(map(repr, empty))} have zero total weight")
    return mass / totals


def group_means(predicted: np.ndarray, scenario: Scenario) -> np.ndarray:
    """mu_k = (1/n_k) sum_i n_k^(i) E_ik."""
    predicted = _check_shape(predicted, scenario)
    return (group_weights(scenario) * predicted).sum(axis=0)


def pairwise_gap_sum(values: np.ndarray) -> float:
    """Sum of |v_k - v_k'| over unordered pairs k < k' of the last axis."""
    first, second = np.triu_indices(values.shape[-1], k=1)
    return float(np.abs(values[..., first] - values[..., second]).sum())


def disparity(predicted: np.ndarray, scenario: Scenario, spec: ObjectiveSpec) -> float:
    """
    delta(z) for one of the four disparity measures.

    Raises:
        ValueError: If `spec` is the aggregate-impact objective
        EmptyGroupError: If a population-level measure references an empty group
    """
    predicted = _check_shape(predicted, scenario)
    kind = spec.kind
    if kind == ObjectiveKind.ACROSS:
        return spec.pair_factor * pairwise_gap_sum(group_means(predicted, scenario))
    if kind == ObjectiveKind.WITHIN:
        return spec.pair_factor * pairwise_gap_sum(predicted)
    if kind == ObjectiveKind.THRESHOLD_WITHIN:
        return float(np.maximum(spec.kappa - predicted, 0.0).sum())
    if kind == ObjectiveKind.THRESHOLD_ACROSS:
        return float(np.maximum(spec.kappa - group_means(predicted, scenario), 0.0).sum())
    raise ValueError("aggregate impact is not a disparity measure; use aggregate_impact")


def aggregate_impact(predicted: np.ndarray, scenario: Scenario) -> float:
    """
    Population-mean expected outcome (1/n) sum_k sum_i n_k^(i) E_ik.

    A one-column matrix (aggregate model) is weighted by the set totals n^(i).
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    mass = scenario.mass
    if predicted.shape == (scenario.m, 1):
        mass = mass.sum(axis=1, keepdims=True)
    elif predicted.shape != (scenario.m, scenario.r):
        raise ValueError(f"expected an {scenario.m} x {scenario.r} or {scenario.m} x 1 matrix, got {predicted.shape}")
    total = mass.sum()
    if total == 0:
        raise EmptyGroupError("population has zero total weight")
    return float((mass * predicted).sum() / total)


def objective_value(predicted: np.ndarray, scenario: Scenario, spec: ObjectiveSpec) -> float:
    if spec.kind == ObjectiveKind.AGGREGATE:
        return aggregate_impact(predicted, scenario)
    return disparity(predicted, scenario, spec)


def minimization_score(value: float, spec: ObjectiveSpec) -> float:
    """Turns an objective value into a score that solvers minimize."""
    return -value if spec.sense == "maximize" else value


# ---------------------------------------------------------------------------
# Change reporting
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GroupChange:
    group: str
    pre_mean: float
    post_mean: float
    pct_change: Optional[float]


@dataclass(frozen=True)
class ChangeReport:
    groups: Tuple[GroupChange, ...]
    aggregate: GroupChange
    disparity_pre: Optional[float] = None
    disparity_post: Optional[float] = None
    measure: Optional[str] = None

    def to_frame(self) -> pl.DataFrame:
        rows = list(self.groups) + [self.aggregate]
        if self.disparity_pre is not None:
            rows.append(GroupChange(DISPARITY_ROW, self.disparity_pre, self.disparity_post,
                                    percent_change(self.disparity_pre, self.disparity_post)))
        return pl.DataFrame({
            "group": [row.group for row in rows],
            "pre_mean": [row.pre_mean for row in rows],
            "post_mean": [row.post_mean for row in rows],
            "pct_change": [format_percent(row.pct_change) for row in rows],
        }, schema={"group": pl.Utf8, "pre_mean": pl.Float64, "post_mean": pl.Float64, "pct_change": pl.Utf8})

    def to_text(self) -> str:
        """Fixed-width table for terminal display."""
        lines = [f"{'group':<16}{'pre':>12}{'post':>12}{'% change':>12}"]
        for row in list(self.groups) + [self.aggregate]:
            lines.append(f"{row.group:<16}{row.pre_mean:>12.6f}{row.post_mean:>12.6f}{format_percent(row.pct_change):>12}")
        if self.disparity_pre is not None:
            lines.append(f"{'disparity':<16}{self.disparity_pre:>12.6f}{self.disparity_post:>12.6f}{'':>12}")
        return "\n".join(lines)


def percent_change(pre: float, post: float) -> Optional[float]:
    if pre == 0:
        return None
    return 100.0 * (post - pre) / pre


def format_percent(value: Optional[float]) -> str:
    """Two-decimal signed percentage; zero prints as ±0.00."""
    if value is None:
        return UNDEFINED
    text = f"{value:+.2f}"
    if text in ("+0.00", "-0.00"):
        return "±0.00"
    return text


def change_report(pre: np.ndarray, post: np.ndarray, scenario: Scenario,
                  spec: Optional[ObjectiveSpec] = None) -> ChangeReport:
    """
    Per-group and aggregate percent change between two expected-outcome matrices.

    A group whose pre-mean is zero gets an undefined change instead of a number.
    """
    pre_means, post_means = group_means(pre, scenario), group_means(post, scenario)
    groups = []
    for group, before, after in zip(scenario.groups, pre_means, post_means):
        change = percent_change(float(before), float(after))
        if change is None:
            logger.warning(f"Group {group!r} has zero pre-intervention mean; percent change undefined")
        groups.append(GroupChange(group, float(before), float(after), change))

    pre_total, post_total = aggregate_impact(pre, scenario), aggregate_impact(post, scenario)
    aggregate = GroupChange(AGGREGATE_ROW, pre_total, post_total, percent_change(pre_total, post_total))

    if spec is None or not spec.is_disparity:
        return ChangeReport(tuple(groups), aggregate)
    return ChangeReport(tuple(groups), aggregate, disparity(pre, scenario, spec),
                        disparity(post, scenario, spec), spec.label)


def comparison_frame(rows: Sequence[Tuple[str, ChangeReport]], groups: Sequence[str]) -> pl.DataFrame:
    """One row per approach: per-group % change, aggregate % change and disparity."""
    columns: dict = {"approach": [name for name, _ in rows]}
    for k, group in enumerate(groups):
        columns[group] = [format_percent(report.groups[k].pct_change) for _, report in rows]
    columns["aggregate_pct"] = [format_percent(report.aggregate.pct_change) for _, report in rows]
    columns["disparity"] = [report.disparity_post for _, report in rows]
    return pl.DataFrame(columns)


def comparison_text(frame: pl.DataFrame) -> str:
    headers: List[str] = frame.columns
    widths = [max(len(str(h)), *(len(_cell(v)) for v in frame[h])) + 2 for h in headers]
    lines = ["".join(str(h).rjust(w) if i else str(h).ljust(w) for i, (h, w) in enumerate(zip(headers, widths)))]
    for row in frame.iter_rows():
        lines.append("".join(_cell(v).rjust(w) if i else _cell(v).ljust(w) for i, (v, w) in enumerate(zip(row, widths))))
    return "\n".join(lines)


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)
