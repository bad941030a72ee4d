import numpy as np
import pytest

from instancelab.env import PomdpModel, build_bandit, build_gated_corridor

BANDIT_ARGS = (0.9, 0.1, 4, 10, 0.9)
CORRIDOR_ARGS = (8, 0.35, 3, 20, 0.9)

# optimal value of the standard corridor, computed once by the belief-tree
# solver and cross-checked against a 1e6-episode Monte-Carlo run (z = 0.15)
CORRIDOR_OPTIMAL_VALUE = 3.4761935993667326


@pytest.fixture(scope="session")
def bandit() -> PomdpModel:
    return build_bandit(*BANDIT_ARGS)


@pytest.fixture(scope="session")
def corridor() -> PomdpModel:
    return build_gated_corridor(*CORRIDOR_ARGS)


@pytest.fixture(scope="session")
def small_corridor() -> PomdpModel:
    return build_gated_corridor(5, 0.4, 2, 12, 0.9)


def make_two_state_chain(gamma=0.9, horizon=6) -> PomdpModel:
    """Deterministic 2-state flip-flop with action-dependent rewards.

    Action 0 keeps the state and pays 1 in state 0; action 1 flips the state
    and pays 1 in state 1. Observations reveal the state exactly.
    """
    transition = np.zeros((2, 2, 2, 2))
    transition[0, 0, 1, 0] = 1.0   # stay in 0, reward 1
    transition[1, 0, 0, 1] = 1.0   # stay in 1, reward 0
    transition[0, 1, 0, 1] = 1.0   # flip to 1, reward 0
    transition[1, 1, 1, 0] = 1.0   # flip to 0, reward 1
    observation = np.zeros((2, 3, 1, 2))
    observation[0, :, 0, 0] = 1.0
    observation[1, :, 0, 1] = 1.0
    return PomdpModel(
        name="chain2", num_states=2, num_actions=2, num_modalities=1,
        observation_space=2, reward_support=np.array([0.0, 1.0]),
        initial_dist=np.array([1.0, 0.0]), transition=transition,
        observation=observation, discount=gamma, horizon=horizon,
        terminal_states=np.zeros(2, dtype=bool))


def make_noisy_tiny(gamma=0.9, horizon=5, uninformative_o0=False) -> PomdpModel:
    """2-state, 2-action, 2-modality model with genuinely noisy emissions."""
    transition = np.zeros((2, 2, 2, 2))
    transition[0, 0] = [[0.1, 0.2], [0.6, 0.1]]
    transition[0, 1] = [[0.3, 0.3], [0.2, 0.2]]
    transition[1, 0] = [[0.25, 0.25], [0.25, 0.25]]
    transition[1, 1] = [[0.0, 0.5], [0.4, 0.1]]
    observation = np.zeros((2, 3, 2, 2))
    observation[0, :, 0] = [0.8, 0.2]
    observation[0, :, 1] = [0.4, 0.6]
    observation[1, :, 0] = [0.3, 0.7]
    observation[1, :, 1] = [0.9, 0.1]
    if uninformative_o0:
        observation[:, 2, :, :] = 0.5
    return PomdpModel(
        name="noisy2", num_states=2, num_actions=2, num_modalities=2,
        observation_space=2, reward_support=np.array([0.0, 1.0]),
        initial_dist=np.array([0.6, 0.4]), transition=transition,
        observation=observation, discount=gamma, horizon=horizon,
        terminal_states=np.zeros(2, dtype=bool))
