import pytest

from trial_bounds import sim_lab
from trial_bounds.policy_sets import EvaluationPolicy
from trial_bounds.trial_data import Registry

ACCEPTANCE_LINES: list[str] = []

PAPER_REGISTRY = {
    "y_min": 0,
    "y_max": 1,
    "neutral_action": 0,
    "covariate_support": [0, 1, 2, 3],
    "action_space": [0, 1],
    "policies": [
        {"id": "pi0", "performance": None, "arm_prob": 1 / 3, "action_map": {"default": 0}},
        {"id": "pi1", "performance": 0.425, "arm_prob": 1 / 3, "action_map": {"1": 1, "default": 0}},
        {"id": "pi2", "performance": 0.375, "arm_prob": 1 / 3, "action_map": {"2": 1, "3": 1, "default": 0}},
    ],
}


def candidate(name, actions, performance=None):
    """Evaluation policy over the 4-point support, defaulting to its true accuracy."""
    if performance is None:
        performance = sim_lab.true_accuracy(actions)
    return EvaluationPolicy.from_actions(name, dict(zip(sim_lab.SUPPORT, actions)), performance)


@pytest.fixture
def registry_doc():
    return {**PAPER_REGISTRY, "policies": [dict(p) for p in PAPER_REGISTRY["policies"]]}


@pytest.fixture
def registry(registry_doc):
    return Registry.from_dict(registry_doc)


@pytest.fixture(scope="session")
def sim5000():
    return sim_lab.simulate_trial(5000, 7).dataset


@pytest.fixture(scope="session")
def population():
    return sim_lab.population_cells()


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
