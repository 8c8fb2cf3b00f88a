"""Tiny environments used to exercise the trainer without a power flow."""
from dataclasses import dataclass, field

import numpy as np

from topocem.environment import Cause


@dataclass
class StubResult:
    observation: np.ndarray
    reward: float
    done: bool
    cause: Cause
    info: dict = field(default_factory=dict)


class BanditEnv:
    """Every step is a decision; ``best`` earns 1, others earn ``payoff[a] < 1``.

    Observations are per-step noise, independent of the payoff.
    """

    def __init__(self, n_actions=8, obs_size=6, best=3, length=5, seed=0, max_rho=1.2):
        rng = np.random.default_rng(seed)
        self.n_actions, self.obs_size, self.best, self.length = n_actions, obs_size, best, length
        self.payoff = rng.uniform(0.0, 0.5, n_actions)
        self.payoff[best] = 1.0
        self.table = rng.normal(size=(length + 1, obs_size))
        self.max_rho = max_rho
        self.t = 0

    @property
    def obs(self):
        return self.table[self.t].copy()

    def reset(self, start_step=0):
        self.t = 0
        return self.obs

    def observation(self):
        return self.obs

    def snapshot(self):
        return np.array([self.t], dtype=np.int8), np.ones(1, dtype=bool)

    def step(self, action):
        self.t += 1
        done = self.t >= self.length
        cause = Cause.SCENARIO_COMPLETE if done else Cause.NONE
        return StubResult(self.obs, float(self.payoff[action]), done, cause,
                          {"applied": True, "max_rho": self.max_rho})


class ScriptedRewardEnv:
    """Single-step episodes whose rewards come from a fixed list, one per reset."""

    def __init__(self, rewards, successes=None):
        self.rewards = list(rewards)
        self.successes = list(successes) if successes is not None else [False] * len(self.rewards)
        self.k = -1
        self.max_rho = 0.0

    def reset(self, start_step=0):
        self.k += 1
        return np.zeros(2)

    def observation(self):
        return np.zeros(2)

    def step(self, action):
        i = self.k % len(self.rewards)
        cause = Cause.SCENARIO_COMPLETE if self.successes[i] else Cause.DIVERGENCE
        return StubResult(np.zeros(2), float(self.rewards[i]), True, cause,
                          {"applied": True, "max_rho": 0.0})
