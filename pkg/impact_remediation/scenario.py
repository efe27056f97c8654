import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import polars as pl

from impact_remediation.config import ScenarioOptions

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088
PROPORTION_TOLERANCE = 1e-9

SETS_COLUMNS = {
    "id": pl.Utf8,
    "lat": pl.Float64,
    "lon": pl.Float64,
    "counselors": pl.Float64,
    "offers_ap": pl.Int64,
    "offers_calc": pl.Int64,
}
SLICES_COLUMNS = {"set_id": pl.Utf8, "group": pl.Utf8, "count": pl.Int64, "outcome_rate": pl.Float64}
WEIGHTS_COLUMNS = {"set_id": pl.Utf8, "group": pl.Utf8, "weight": pl.Float64}
PROPORTIONS_COLUMNS = {"set_id": pl.Utf8, "group": pl.Utf8, "proportion": pl.Float64}


class ScenarioValidationError(ValueError):
    """Raised with every problem found while building or loading a scenario."""

    def __init__(self, issues: List[str]):
        self.issues = list(issues)
        super().__init__("Scenario validation failed:\n  " + "\n  ".join(self.issues))


class EmptyGroupError(ValueError):
    """Raised when a measure references a group with zero total weight."""


@dataclass(frozen=True)
class InterventionSet:
    id: str
    latitude: float
    longitude: float
    counselors_f: float = 0.0
    offers_ap_p: int = 0
    offers_calc_c: int = 0

    def problems(self) -> List[str]:
        issues = []
        if not self.id:
            issues.append("set id must be a non-empty string")
        if not -90.0 <= self.latitude <= 90.0:
            issues.append(f"set {self.id!r}: latitude {self.latitude} outside [-90, 90]")
        if not -180.0 <= self.longitude <= 180.0:
            issues.append(f"set {self.id!r}: longitude {self.longitude} outside [-180, 180]")
        if not self.counselors_f >= 0.0:
            issues.append(f"set {self.id!r}: counselors {self.counselors_f} must be >= 0")
        if self.offers_ap_p not in (0, 1):
            issues.append(f"set {self.id!r}: offers_ap must be 0 or 1")
        if self.offers_calc_c not in (0, 1):
            issues.append(f"set {self.id!r}: offers_calc must be 0 or 1")
        return issues


@dataclass(frozen=True)
class GroupSlice:
    set_id: str
    group: str
    count: int
    outcome_rate: float


class GroupTotals(NamedTuple):
    per_group: np.ndarray
    per_set: np.ndarray
    total: Union[int, float]


def _frozen(array: Optional[np.ndarray], dtype) -> Optional[np.ndarray]:
    if array is None:
        return None
    out = np.array(array, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Scenario:
    """
    Intervention sets, the group partition and the (set x group) measurements.

    `counts`, `rates`, `weights` and `design_proportions` are m x r arrays aligned
    with `sets` (sorted by id) and `groups` (sorted by label). Arrays are read-only.
    """
    sets: Tuple[InterventionSet, ...]
    groups: Tuple[str, ...]
    counts: np.ndarray
    rates: np.ndarray
    neighbor_k: int = 5
    weights: Optional[np.ndarray] = None
    design_proportions: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "sets", tuple(self.sets))
        object.__setattr__(self, "groups", tuple(self.groups))
        object.__setattr__(self, "counts", _frozen(self.counts, np.int64))
        object.__setattr__(self, "rates", _frozen(self.rates, np.float64))
        object.__setattr__(self, "weights", _frozen(self.weights, np.float64))
        object.__setattr__(self, "design_proportions", _frozen(self.design_proportions, np.float64))

        issues = []
        m, r = len(self.sets), len(self.groups)
        if m < 1:
            issues.append("scenario needs at least one intervention set (m >= 1)")
        if r < 2:
            issues.append(f"scenario needs at least two groups to measure disparity (r >= 2), got {r}")
        if len(set(s.id for s in self.sets)) != m:
            issues.append("intervention set ids must be unique")
        if len(set(self.groups)) != r:
            issues.append("group labels must be unique")
        if self.neighbor_k < 0:
            issues.append(f"neighbor_k must be non-negative, got {self.neighbor_k}")
        for s in self.sets:
            issues.extend(s.problems())

        for name in ("counts", "rates", "weights", "design_proportions"):
            array = getattr(self, name)
            if array is not None and array.shape != (m, r):
                issues.append(f"{name} has shape {array.shape}, expected {(m, r)}")
        if issues:
            raise ScenarioValidationError(issues)

        if (self.counts < 0).any():
            issues.append("counts must be non-negative")
        if not np.isfinite(self.rates).all() or (self.rates < 0).any() or (self.rates > 1).any():
            issues.append("outcome rates must lie in [0, 1]")
        if self.weights is not None and (not np.isfinite(self.weights).all() or (self.weights < 0).any()):
            issues.append("weights must be finite and non-negative")
        if self.design_proportions is not None:
            rows = self.design_proportions
            if (rows < 0).any() or np.abs(rows.sum(axis=1) - 1.0).max() > PROPORTION_TOLERANCE:
                issues.append("design proportions must be non-negative and sum to 1 for every set")
        if issues:
            raise ScenarioValidationError(issues)

    @property
    def m(self) -> int:
        return len(self.sets)

    @property
    def r(self) -> int:
        return len(self.groups)

    @property
    def set_ids(self) -> Tuple[str, ...]:
        return tuple(s.id for s in self.sets)

    @property
    def slices(self) -> List[GroupSlice]:
        return [
            GroupSlice(s.id, group, int(self.counts[i, k]), float(self.rates[i, k]))
            for i, s in enumerate(self.sets)
            for k, group in enumerate(self.groups)
        ]

    @property
    def mass(self) -> np.ndarray:
        """Per-cell weights used for means: the explicit weights, else the counts."""
        if self.weights is not None:
            return self.weights
        return self.counts.astype(np.float64)

    @property
    def proportions(self) -> np.ndarray:
        """Structural regressors rho^(i): explicit design proportions, else count shares."""
        if self.design_proportions is not None:
            return self.design_proportions
        totals = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        safe = np.where(totals > 0, totals, 1.0)
        return np.where(totals > 0, self.counts / safe, 0.0)

    @property
    def calc(self) -> np.ndarray:
        return np.array([s.offers_calc_c for s in self.sets], dtype=np.float64)

    @property
    def ap(self) -> np.ndarray:
        return np.array([s.offers_ap_p for s in self.sets], dtype=np.float64)

    @property
    def counselors(self) -> np.ndarray:
        return np.array([s.counselors_f for s in self.sets], dtype=np.float64)

    @property
    def coordinates(self) -> np.ndarray:
        return np.array([[s.latitude, s.longitude] for s in self.sets], dtype=np.float64)

    def with_rates(self, rates: np.ndarray) -> "Scenario":
        return Scenario(self.sets, self.groups, self.counts, rates, self.neighbor_k,
                        self.weights, self.design_proportions)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Scenario):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return np.array_equal(a, b)

        return (
            self.sets == other.sets
            and self.groups == other.groups
            and self.neighbor_k == other.neighbor_k
            and same(self.counts, other.counts)
            and same(self.rates, other.rates)
            and same(self.weights, other.weights)
            and same(self.design_proportions, other.design_proportions)
        )

    __hash__ = None

    @classmethod
    def from_records(
        cls,
        sets: Iterable[InterventionSet],
        slices: Iterable[GroupSlice],
        neighbor_k: int = 5,
        weights: Optional[Dict[Tuple[str, str], float]] = None,
        design_proportions: Optional[Dict[Tuple[str, str], float]] = None,
    ) -> "Scenario":
        """
        Builds a scenario from unordered records, sorting sets by id and groups by label.

        Raises:
            ScenarioValidationError: on duplicate ids, duplicate or missing (set, group) pairs
        """
        sets = sorted(sets, key=lambda s: s.id)
        slices = list(slices)
        groups = sorted({sl.group for sl in slices})
        set_index = {s.id: i for i, s in enumerate(sets)}
        group_index = {g: k for k, g in enumerate(groups)}

        issues = []
        if len(set_index) != len(sets):
            issues.append("intervention set ids must be unique")
        counts = np.zeros((len(sets), len(groups)), dtype=np.int64)
        rates = np.zeros((len(sets), len(groups)), dtype=np.float64)
        seen = set()
        for sl in slices:
            key = (sl.set_id, sl.group)
            if sl.set_id not in set_index:
                issues.append(f"slice references unknown set {sl.set_id!r}")
                continue
            if key in seen:
                issues.append(f"duplicate slice for set {sl.set_id!r}, group {sl.group!r}")
                continue
            seen.add(key)
            counts[set_index[sl.set_id], group_index[sl.group]] = sl.count
            rates[set_index[sl.set_id], group_index[sl.group]] = sl.outcome_rate
        for s in sets:
            for g in groups:
                if (s.id, g) not in seen:
                    issues.append(f"missing slice for set {s.id!r}, group {g!r}")
        if issues:
            raise ScenarioValidationError(issues)

        def table(cells, name):
            if cells is None:
                return None
            out = np.zeros_like(rates)
            missing = []
            for s in sets:
                for g in groups:
                    if (s.id, g) not in cells:
                        missing.append(f"missing {name} for set {s.id!r}, group {g!r}")
                    else:
                        out[set_index[s.id], group_index[g]] = cells[(s.id, g)]
            if missing:
                raise ScenarioValidationError(missing)
            return out

        return cls(
            sets=tuple(sets),
            groups=tuple(groups),
            counts=counts,
            rates=rates,
            neighbor_k=neighbor_k,
            weights=table(weights, "weight"),
            design_proportions=table(design_proportions, "proportion"),
        )


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------

def _read_table(path: Union[str, Path], columns: Dict[str, pl.DataType]) -> Tuple[pl.DataFrame, List[str]]:
    """
    Reads a CSV as strings, checks the header and casts each column.

    Returns the typed frame (with a 1-based `line` column) and any issues found.
    """
    path = Path(path)
    if not path.is_file():
        raise ScenarioValidationError([f"{path}: file not found"])

    try:
        raw = pl.read_csv(path, infer_schema=False)
    except Exception as e:
        raise ScenarioValidationError([f"{path}: could not parse CSV ({e})"]) from e

    missing = [c for c in columns if c not in raw.columns]
    if missing:
        raise ScenarioValidationError([f"{path}: missing column(s) {', '.join(missing)}"])

    raw = raw.select(list(columns)).with_row_index("line", offset=2)
    typed = raw.with_columns([
        pl.col(name).str.strip_chars().cast(dtype, strict=False).alias(name)
        for name, dtype in columns.items()
    ])

    issues = []
    for name, dtype in columns.items():
        blank = raw[name].is_null() | (raw[name].str.strip_chars() == "")
        unparsed = typed[name].is_null() & ~blank
        for line in raw.filter(blank)["line"]:
            issues.append(f"{path.name}:{line}: column '{name}' is empty")
        for line, value in zip(raw.filter(unparsed)["line"], raw.filter(unparsed)[name]):
            issues.append(f"{path.name}:{line}: column '{name}' is not a valid {dtype} (got {value!r})")
        if dtype == pl.Float64:
            non_finite = typed.filter(pl.col(name).is_not_null() & ~pl.col(name).is_finite())
            for line in non_finite["line"]:
                issues.append(f"{path.name}:{line}: column '{name}' must be finite")
    return typed, issues


def _range_issues(df: pl.DataFrame, source: str, column: str, predicate: pl.Expr, message: str) -> List[str]:
    present = pl.col(column).is_not_null()
    if df.schema[column] == pl.Float64:
        present = present & pl.col(column).is_finite()
    bad = df.filter(present & ~predicate)
    return [f"{source}:{line}: column '{column}' {message} (got {value})"
            for line, value in zip(bad["line"], bad[column])]


def _duplicate_issues(df: pl.DataFrame, source: str, keys: Sequence[str]) -> List[str]:
    dupes = df.filter(pl.struct(keys).is_duplicated())
    return [
        f"{source}:{row['line']}: duplicate {'/'.join(keys)} {tuple(row[k] for k in keys)}"
        for row in dupes.iter_rows(named=True)
    ]


def _size_issues(sets_df: pl.DataFrame, slices_df: pl.DataFrame, sets_name: str, slices_name: str) -> List[str]:
    """m >= 1 and r >= 2, reported against the file that falls short."""
    issues = []
    if sets_df.height == 0:
        issues.append(f"{sets_name}:1: at least one intervention set is needed (m >= 1), found no data rows")
    groups = sorted(slices_df["group"].drop_nulls().unique().to_list())
    if len(groups) < 2:
        line = slices_df["line"].max() if slices_df.height else 1
        found = f"only {groups[0]!r}" if groups else "none"
        issues.append(f"{slices_name}:{line}: at least two groups are needed to measure disparity (r >= 2), "
                      f"found {found}")
    return issues


def _cell_table(path: Union[str, Path], columns: Dict[str, pl.DataType], value_column: str,
                issues: List[str]) -> Dict[Tuple[str, str], float]:
    df, found = _read_table(path, columns)
    name = Path(path).name
    issues.extend(found)
    issues.extend(_duplicate_issues(df, name, ["set_id", "group"]))
    issues.extend(_range_issues(df, name, value_column, pl.col(value_column) >= 0, "must be >= 0"))
    return {
        (row["set_id"], row["group"]): row[value_column]
        for row in df.iter_rows(named=True)
        if row["set_id"] is not None and row["group"] is not None and row[value_column] is not None
    }


def load_scenario(sets_path: Union[str, Path], slices_path: Union[str, Path],
                  config: Optional[ScenarioOptions] = None) -> Scenario:
    """
    Loads and validates a scenario from `sets.csv` and `slices.csv`.

    Args:
        sets_path: CSV with header id,lat,lon,counselors,offers_ap,offers_calc
        slices_path: CSV with header set_id,group,count,outcome_rate
        config: neighbor_k plus optional weights / design-proportions files

    Returns:
        Validated Scenario, sets sorted by id and groups by label

    Raises:
        ScenarioValidationError: listing every problem with its file and line
    """
    config = config or ScenarioOptions()
    sets_df, issues = _read_table(sets_path, SETS_COLUMNS)
    slices_df, slice_issues = _read_table(slices_path, SLICES_COLUMNS)
    issues.extend(slice_issues)

    sets_name, slices_name = Path(sets_path).name, Path(slices_path).name
    issues.extend(_duplicate_issues(sets_df.filter(pl.col("id").is_not_null()), sets_name, ["id"]))
    issues.extend(_range_issues(sets_df, sets_name, "lat", pl.col("lat").is_between(-90, 90), "must be in [-90, 90]"))
    issues.extend(_range_issues(sets_df, sets_name, "lon", pl.col("lon").is_between(-180, 180), "must be in [-180, 180]"))
    issues.extend(_range_issues(sets_df, sets_name, "counselors", pl.col("counselors") >= 0, "must be >= 0"))
    for column in ("offers_ap", "offers_calc"):
        issues.extend(_range_issues(sets_df, sets_name, column, pl.col(column).is_in([0, 1]), "must be 0 or 1"))

    issues.extend(_duplicate_issues(slices_df, slices_name, ["set_id", "group"]))
    issues.extend(_range_issues(slices_df, slices_name, "count", pl.col("count") >= 0, "must be >= 0"))
    issues.extend(_range_issues(slices_df, slices_name, "outcome_rate",
                                pl.col("outcome_rate").is_between(0, 1), "must be in [0, 1]"))

    known = set(sets_df["id"].drop_nulls().to_list())
    known_ids = pl.Series(sorted(known), dtype=pl.Utf8)
    unknown = slices_df.filter(pl.col("set_id").is_not_null() & ~pl.col("set_id").is_in(known_ids))
    for line, set_id in zip(unknown["line"], unknown["set_id"]):
        issues.append(f"{slices_name}:{line}: column 'set_id' references unknown set {set_id!r}")
    issues.extend(_size_issues(sets_df, slices_df, sets_name, slices_name))

    weights = None
    if config.weights_path is not None:
        weights = _cell_table(config.weights_path, WEIGHTS_COLUMNS, "weight", issues)
    proportions = None
    if config.proportions_path is not None:
        proportions = _cell_table(config.proportions_path, PROPORTIONS_COLUMNS, "proportion", issues)

    if issues:
        logger.error(f"Scenario validation failed with {len(issues)} issue(s)")
        raise ScenarioValidationError(issues)

    sets = [
        InterventionSet(row["id"], row["lat"], row["lon"], row["counselors"], row["offers_ap"], row["offers_calc"])
        for row in sets_df.iter_rows(named=True)
    ]
    slices = [
        GroupSlice(row["set_id"], row["group"], row["count"], row["outcome_rate"])
        for row in slices_df.iter_rows(named=True)
    ]
    scenario = Scenario.from_records(sets, slices, config.neighbor_k, weights, proportions)
    logger.info(f"Loaded scenario with m={scenario.m} sets and r={scenario.r} groups")

    totals = group_totals(scenario)
    for group, total in zip(scenario.groups, totals.per_group):
        if total == 0:
            logger.warning(f"Group {group!r} has zero total count; measures referencing it will fail")
    return scenario


def write_scenario(scenario: Scenario, out_dir: Union[str, Path],
                   extra_config: Optional[Dict[str, str]] = None) -> Dict[str, Path]:
    """
    Writes a scenario in the loader's CSV schemas plus a `scenario.env` that reloads it.

    `extra_config` entries are appended to `scenario.env` as KEY=value lines.

    Returns:
        Mapping of artifact name to written path
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"sets": out_dir / "sets.csv", "slices": out_dir / "slices.csv"}

    pl.DataFrame({
        "id": [s.id for s in scenario.sets],
        "lat": [s.latitude for s in scenario.sets],
        "lon": [s.longitude for s in scenario.sets],
        "counselors": [float(s.counselors_f) for s in scenario.sets],
        "offers_ap": [s.offers_ap_p for s in scenario.sets],
        "offers_calc": [s.offers_calc_c for s in scenario.sets],
    }, schema=SETS_COLUMNS).write_csv(paths["sets"])

    cells = [(s.id, g) for s in scenario.sets for g in scenario.groups]
    pl.DataFrame({
        "set_id": [c[0] for c in cells],
        "group": [c[1] for c in cells],
        "count": scenario.counts.ravel().tolist(),
        "outcome_rate": scenario.rates.ravel().tolist(),
    }, schema=SLICES_COLUMNS).write_csv(paths["slices"])

    config_lines = ["SETS=sets.csv", "SLICES=slices.csv", f"NEIGHBOR_K={scenario.neighbor_k}"]
    for name, array, column, schema in (
        ("weights", scenario.weights, "weight", WEIGHTS_COLUMNS),
        ("proportions", scenario.design_proportions, "proportion", PROPORTIONS_COLUMNS),
    ):
        if array is None:
            continue
        paths[name] = out_dir / f"{name}.csv"
        pl.DataFrame({
            "set_id": [c[0] for c in cells],
            "group": [c[1] for c in cells],
            column: array.ravel().tolist(),
        }, schema=schema).write_csv(paths[name])
        config_lines.append(f"{name.upper()}_PATH={name}.csv")
    for key, value in (extra_config or {}).items():
        config_lines.append(f"{key.upper()}={value}")

    paths["config"] = out_dir / "scenario.env"
    paths["config"].write_text("\n".join(config_lines) + "\n")
    logger.info(f"Scenario written to {out_dir}")
    return paths


# ---------------------------------------------------------------------------
# Neighbors and similarity
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NeighborStructure:
    """
    N(i) and s(i, j) as fixed-width tables.

    Row i of `indices` is N(i) with i first, then the nearest other sets by
    (distance, index); `similarity[i, c]` is s(i, indices[i, c]).
    """
    indices: np.ndarray
    similarity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "indices", _frozen(self.indices, np.int64))
        object.__setattr__(self, "similarity", _frozen(self.similarity, np.float64))

    @property
    def m(self) -> int:
        return self.indices.shape[0]

    def neighbors(self, i: int) -> List[int]:
        return self.indices[i].tolist()

    def s(self, i: int, j: int) -> float:
        hits = np.flatnonzero(self.indices[i] == j)
        if hits.size == 0:
            raise KeyError(f"set {j} is not in N({i})")
        return float(self.similarity[i, hits[0]])


def haversine_km(coords_a: np.ndarray, coords_b: np.ndarray) -> np.ndarray:
    """Great-circle distances (km) between every row of `coords_a` and `coords_b` (lat, lon degrees)."""
    lat1, lon1 = np.radians(coords_a[:, 0])[:, None], np.radians(coords_a[:, 1])[:, None]
    lat2, lon2 = np.radians(coords_b[:, 0])[None, :], np.radians(coords_b[:, 1])[None, :]
    a = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def build_neighbor_structure(scenario: Scenario) -> NeighborStructure:
    m = scenario.m
    width = min(scenario.neighbor_k, m - 1) + 1
    distances = haversine_km(scenario.coordinates, scenario.coordinates)
    order = np.arange(m)

    indices = np.empty((m, width), dtype=np.int64)
    for i in range(m):
        # ties broken by ascending index
        ranked = np.lexsort((order, distances[i]))
        others = ranked[ranked != i][: width - 1]
        indices[i] = np.concatenate(([i], others))

    nearest = np.take_along_axis(distances, indices, axis=1)
    nearest[:, 0] = 0.0
    similarity = 1.0 / (1.0 + nearest)
    logger.debug(f"Built neighbor structure with |N(i)| = {width} for {m} sets")
    return NeighborStructure(indices, similarity)


# ---------------------------------------------------------------------------
# Totals and observed disparity
# ---------------------------------------------------------------------------

def group_totals(scenario: Scenario) -> GroupTotals:
    """n_k, n^(i) and n; weighted totals when the scenario carries weights."""
    if scenario.weights is not None:
        mass = scenario.weights
        return GroupTotals(mass.sum(axis=0), mass.sum(axis=1), float(mass.sum()))
    counts = scenario.counts
    return GroupTotals(counts.sum(axis=0), counts.sum(axis=1), int(counts.sum()))


def observed_disparity(scenario: Scenario, measure) -> float:
    """Disparity of the factual outcome rates, with no model and no intervention."""
    from impact_remediation.objective import disparity

    return disparity(scenario.rates, scenario, measure)
