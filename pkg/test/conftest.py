import pytest

from impact_remediation.scenario import build_neighbor_structure
from impact_remediation.scm import InterventionResponse
from impact_remediation.synth import gen_toy_career_fair


@pytest.fixture
def toy():
    return gen_toy_career_fair()


@pytest.fixture
def toy_neighbors(toy):
    return build_neighbor_structure(toy.scenario)


@pytest.fixture
def toy_response(toy, toy_neighbors):
    return InterventionResponse(toy.model, toy.scenario, toy_neighbors)
