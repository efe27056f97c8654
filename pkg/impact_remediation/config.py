import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Union

from dotenv import dotenv_values

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'

OBJECTIVE_CHOICES = ("within", "across", "threshold-within", "threshold-across", "aggregate")
SOLVER_CHOICES = ("enumerate", "bnb", "local")
MODE_CHOICES = ("IR", "DIP")
DIP_OBJECTIVE_CHOICES = ("aggregate", "disaggregated")

PATH_KEYS = ("sets", "slices", "weights_path", "proportions_path", "model_path", "aggregate_model_path", "out")


class ConfigError(ValueError):
    """Raised when a run or scenario configuration is invalid."""


def configure_logging(verbose: bool = False) -> None:
    """Configures root logging the same way for every entry point."""
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format=LOG_FORMAT
    )


@dataclass(frozen=True)
class ScenarioOptions:
    neighbor_k: int = 5
    weights_path: Optional[Path] = None
    proportions_path: Optional[Path] = None

    def __post_init__(self):
        if self.neighbor_k < 0:
            raise ConfigError(f"neighbor_k must be non-negative, got {self.neighbor_k}")


@dataclass
class RunConfig:
    """
    Everything one `solve` / `compare` run needs.

    Constraints are kept as raw `type:param=value` strings here and parsed by
    `constraint.parse_constraints`, so this module stays free of model types.
    """
    sets: Optional[Path] = None
    slices: Optional[Path] = None
    scenario: ScenarioOptions = field(default_factory=ScenarioOptions)
    model_path: Optional[Path] = None
    aggregate_model_path: Optional[Path] = None
    objective: str = "across"
    kappa: Optional[float] = None
    ordered_pairs: bool = False
    budget: Optional[int] = None
    constraints: List[str] = field(default_factory=list)
    solver: str = "bnb"
    seed: int = 0
    out: Path = Path("out")
    mode: str = "IR"
    dip_objective: str = "aggregate"
    tau: Optional[Union[float, str]] = None
    eta: Optional[float] = None
    weighted_fit: bool = False
    enumeration_limit: int = 2_000_000
    workers: int = 1
    restarts: int = 4

    def validate(self, require_scenario: bool = True) -> "RunConfig":
        """
        Checks the configuration and returns it.

        Raises:
            ConfigError: listing every problem found
        """
        problems = []
        if require_scenario:
            if self.sets is None: problems.append("SETS")
            if self.slices is None: problems.append("SLICES")
        if problems:
            raise ConfigError(f"Missing configuration values: {', '.join(problems)}")

        if self.objective not in OBJECTIVE_CHOICES:
            problems.append(f"objective must be one of {OBJECTIVE_CHOICES}, got {self.objective!r}")
        if self.objective.startswith("threshold") and self.kappa is None:
            problems.append(f"objective {self.objective!r} needs KAPPA")
        if self.solver not in SOLVER_CHOICES:
            problems.append(f"solver must be one of {SOLVER_CHOICES}, got {self.solver!r}")
        if self.mode not in MODE_CHOICES:
            problems.append(f"mode must be one of {MODE_CHOICES}, got {self.mode!r}")
        if self.dip_objective not in DIP_OBJECTIVE_CHOICES:
            problems.append(f"dip_objective must be one of {DIP_OBJECTIVE_CHOICES}, got {self.dip_objective!r}")
        if self.budget is not None and self.budget < 0:
            problems.append(f"budget must be non-negative, got {self.budget}")
        if isinstance(self.tau, str) and self.tau != "min":
            problems.append(f"tau must be a number or 'min', got {self.tau!r}")
        if self.enumeration_limit < 1:
            problems.append("enumeration_limit must be positive")
        if self.workers < 1:
            problems.append("workers must be at least 1")

        if problems:
            raise ConfigError("Invalid configuration: " + "; ".join(problems))
        return self


def _parse_bool(key: str, value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key.upper()} must be a boolean, got {value!r}")


def _parse_number(key: str, value: str, kind=float):
    try:
        return kind(value)
    except ValueError:
        raise ConfigError(f"{key.upper()} must be {kind.__name__}, got {value!r}") from None


def load_config_values(config_file: Union[str, Path]) -> Dict[str, str]:
    """
    Loads key/value pairs from a config file.

    Keys are lower-cased; relative paths are resolved against the file's directory.

    Args:
        config_file: Path to the config file

    Returns:
        Dictionary with the raw (string) values

    Raises:
        ConfigError: If the file does not exist
    """
    config_file = Path(config_file)
    if not config_file.is_file():
        raise ConfigError(f"Config file {config_file} not found")

    raw = dotenv_values(config_file)
    values = {key.lower(): value for key, value in raw.items() if value is not None}

    base = config_file.resolve().parent
    for key in PATH_KEYS:
        if key in values and values[key] and not Path(values[key]).is_absolute():
            values[key] = str(base / values[key])

    logger.debug(f"Loaded {len(values)} config values from {config_file}")
    return values


def build_run_config(values: Dict[str, str], overrides: Optional[Dict[str, object]] = None) -> RunConfig:
    """
    Builds a RunConfig from config-file values, then applies command-line overrides.

    Overrides whose value is None are ignored, so unset flags never clobber the file.
    """
    merged: Dict[str, object] = dict(values)
    for key, value in (overrides or {}).items():
        if value is not None:
            merged[key] = value

    def get(key, default=None):
        value = merged.get(key, default)
        return default if value == "" else value

    constraints = get("constraints", [])
    if isinstance(constraints, str):
        constraints = [entry.strip() for entry in constraints.split(";") if entry.strip()]

    tau = get("tau")
    if isinstance(tau, str) and tau != "min":
        tau = _parse_number("tau", tau)

    def optional_path(key):
        value = get(key)
        return Path(value) if value is not None else None

    def optional_number(key, kind=float):
        value = get(key)
        if value is None or not isinstance(value, str):
            return value
        return _parse_number(key, value, kind)

    def flag(key, default):
        value = get(key)
        if value is None:
            return default
        return value if isinstance(value, bool) else _parse_bool(key, str(value))

    scenario = ScenarioOptions(
        neighbor_k=optional_number("neighbor_k", int) if get("neighbor_k") is not None else 5,
        weights_path=optional_path("weights_path"),
        proportions_path=optional_path("proportions_path"),
    )

    return RunConfig(
        sets=optional_path("sets"),
        slices=optional_path("slices"),
        scenario=scenario,
        model_path=optional_path("model_path"),
        aggregate_model_path=optional_path("aggregate_model_path"),
        objective=str(get("objective", "across")),
        kappa=optional_number("kappa"),
        ordered_pairs=flag("ordered_pairs", False),
        budget=optional_number("budget", int),
        constraints=list(constraints),
        solver=str(get("solver", "bnb")),
        seed=optional_number("seed", int) if get("seed") is not None else 0,
        out=optional_path("out") or Path("out"),
        mode=str(get("mode", "IR")).upper(),
        dip_objective=str(get("dip_objective", "aggregate")).lower(),
        tau=tau,
        eta=optional_number("eta"),
        weighted_fit=flag("weighted_fit", False),
        enumeration_limit=optional_number("enumeration_limit", int) if get("enumeration_limit") is not None else 2_000_000,
        workers=optional_number("workers", int) if get("workers") is not None else 1,
        restarts=optional_number("restarts", int) if get("restarts") is not None else 4,
    )


def load_run_config(config_file: Optional[Union[str, Path]] = None,
                    overrides: Optional[Dict[str, object]] = None) -> RunConfig:
    """Reads an optional config file and merges flag overrides on top."""
    values = load_config_values(config_file) if config_file else {}
    return build_run_config(values, overrides)
