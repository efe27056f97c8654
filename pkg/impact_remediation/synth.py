import logging
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from impact_remediation.scenario import (
    EARTH_RADIUS_KM,
    InterventionSet,
    Scenario,
    build_neighbor_structure,
)
from impact_remediation.scm import BLOCKS, DISAGGREGATED, FittedModel, InterventionResponse

logger = logging.getLogger(__name__)

TOY_SET_IDS = ("university-1", "university-2")
TOY_GROUPS = ("A", "B")
# one kilometre of latitude, so s(1, 2) = 1 / (1 + 1) = 0.5
KM_IN_DEGREES = 1.0 / (EARTH_RADIUS_KM * math.pi / 180.0)

Range = Tuple[float, float]


@dataclass(frozen=True)
class GroundTruth:
    """A scenario together with the coefficients that generated its outcome rates."""
    scenario: Scenario
    model: FittedModel
    noise_sd: float = 0.0
    truncated: int = 0


def gen_toy_career_fair() -> GroundTruth:
    """
    Two universities, two applicant groups, one career fair to host.

    Each university's structural regressors are one-hot (university 1 is
    modelled through category A's coefficients, university 2 through B's), so
    E_1k = alpha_k[0] * maxCalc_1 + theta_k[0] and E_2k = alpha_k[1] * maxCalc_2 + theta_k[1].
    """
    sets = (
        InterventionSet(TOY_SET_IDS[0], 0.0, 0.0),
        InterventionSet(TOY_SET_IDS[1], KM_IN_DEGREES, 0.0),
    )
    counts = np.array([[100, 150], [75, 100]], dtype=np.int64)
    design = np.eye(2)

    coefficients = np.zeros((2, len(BLOCKS), 2))
    # rows: outcome A, outcome B; blocks alpha, beta, gamma, theta
    coefficients[0, 0] = (0.10, 0.10)
    coefficients[1, 0] = (0.10, 0.05)
    coefficients[0, 3] = (0.10, 0.05)
    coefficients[1, 3] = (0.20, 0.10)
    model = FittedModel(TOY_GROUPS, TOY_GROUPS, coefficients, kind=DISAGGREGATED)

    placeholder = Scenario(sets, TOY_GROUPS, counts, np.zeros((2, 2)), neighbor_k=1, design_proportions=design)
    rates = _null_outcomes(placeholder, model)
    logger.debug(f"Toy career-fair scenario with null rates {rates.tolist()}")
    return GroundTruth(placeholder.with_rates(rates), model)


@dataclass(frozen=True)
class RandomScenarioConfig:
    """Sampling ranges for `gen_random`; every range is an inclusive [low, high]."""
    latitude: Range = (40.5, 40.9)
    longitude: Range = (-74.25, -73.7)
    counts: Tuple[int, int] = (5, 200)
    counselors: Range = (0.0, 4.0)
    p_ap: float = 0.5
    p_calc: float = 0.4
    alpha: Range = (-0.05, 0.2)
    beta: Range = (0.0, 0.2)
    gamma: Range = (0.0, 0.05)
    theta: Range = (0.05, 0.3)

    def validate(self) -> None:
        ranges = {
            "latitude": self.latitude, "longitude": self.longitude, "counts": self.counts,
            "counselors": self.counselors, "alpha": self.alpha, "beta": self.beta,
            "gamma": self.gamma, "theta": self.theta,
        }
        for name, (low, high) in ranges.items():
            if not low <= high:
                raise ValueError(f"{name} range ({low}, {high}) is empty")
        if not (-90 <= self.latitude[0] and self.latitude[1] <= 90):
            raise ValueError(f"latitude range {self.latitude} leaves [-90, 90]")
        if not (-180 <= self.longitude[0] and self.longitude[1] <= 180):
            raise ValueError(f"longitude range {self.longitude} leaves [-180, 180]")
        if self.counts[0] < 0 or self.counselors[0] < 0:
            raise ValueError("counts and counselors must be non-negative")
        for name, p in (("p_ap", self.p_ap), ("p_calc", self.p_calc)):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")


def gen_random(seed: int, m: int, r: int, neighbor_k: int = 5, noise_sd: float = 0.0,
               ranges: RandomScenarioConfig = RandomScenarioConfig()) -> GroundTruth:
    """
    Seeded random scenario whose outcome rates come from known coefficients.

    Rates are the null-intervention predictions plus Gaussian noise of standard
    deviation `noise_sd`, truncated to [0, 1]; the number of truncated cells is
    logged and kept on the result.

    Raises:
        ValueError: If m < 1, r < 2, noise_sd < 0 or a range is invalid
    """
    if m < 1 or r < 2:
        raise ValueError(f"need m >= 1 and r >= 2, got m={m}, r={r}")
    if noise_sd < 0:
        raise ValueError(f"noise_sd must be non-negative, got {noise_sd}")
    ranges.validate()

    rng = np.random.default_rng(seed)
    id_width = len(str(m - 1))
    group_width = len(str(r - 1))

    latitudes = rng.uniform(*ranges.latitude, size=m)
    longitudes = rng.uniform(*ranges.longitude, size=m)
    counselors = rng.uniform(*ranges.counselors, size=m)
    offers_ap = (rng.random(m) < ranges.p_ap).astype(int)
    offers_calc = (rng.random(m) < ranges.p_calc).astype(int)
    sets = tuple(
        InterventionSet(f"set-{i:0{id_width}d}", float(latitudes[i]), float(longitudes[i]),
                        float(counselors[i]), int(offers_ap[i]), int(offers_calc[i]))
        for i in range(m)
    )
    groups = tuple(f"g{k:0{group_width}d}" for k in range(r))
    counts = rng.integers(ranges.counts[0], ranges.counts[1], size=(m, r), endpoint=True)

    coefficients = np.empty((r, len(BLOCKS), r))
    for b, name in enumerate(BLOCKS):
        coefficients[:, b, :] = rng.uniform(*getattr(ranges, name), size=(r, r))
    model = FittedModel(groups, groups, coefficients, kind=DISAGGREGATED)

    placeholder = Scenario(sets, groups, counts, np.zeros((m, r)), neighbor_k=neighbor_k)
    rates = _null_outcomes(placeholder, model)
    if noise_sd > 0:
        rates = rates + rng.normal(0.0, noise_sd, size=rates.shape)
    outside = (rates < 0) | (rates > 1)
    truncated = int(outside.sum())
    if truncated:
        logger.warning(f"Truncated {truncated} noisy outcome rate(s) into [0, 1]; fits on this data are biased")
    rates = np.clip(rates, 0.0, 1.0)

    logger.info(f"Generated random scenario seed={seed} m={m} r={r} K={neighbor_k}")
    return GroundTruth(placeholder.with_rates(rates), model, noise_sd, truncated)


def _null_outcomes(scenario: Scenario, model: FittedModel) -> np.ndarray:
    response = InterventionResponse(model, scenario, build_neighbor_structure(scenario))
    return response.predict(np.zeros(scenario.m, dtype=np.int64))
