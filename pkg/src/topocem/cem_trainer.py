"""Cross-entropy method loop: sample episodes, keep the elite, imitate it, repeat."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .action_space import build_action_catalog
from .environment import EnvConfig, EpisodeRecord, GridEnv, observation_layout, observation_size
from .errors import ContractViolation, DomainError
from .grid_topology import GridModel
from .policy_net import PolicyNet, make_optimizer, save_checkpoint, train_arrays
from .scenario import Scenario

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("batch", "mean_reward", "reward_boundary", "successes")


@dataclass
class TrainerConfig:
    batch_size: int = 20
    elite_percentile: float = 75.0
    learning_rate: float = 1e-4
    activity_threshold: float = 0.95
    optimizer: str = "adam"
    epochs: int = 8
    minibatch: int = 32
    hidden: tuple[int, ...] = (300, 300)
    plateau_window: int = 5
    plateau_tol: float = 0.01
    gap_tol: float = 0.02
    max_batches: int = 200
    pool_cap: int = 3  # multiples of batch_size
    checkpoint_every: int = 10
    seed: int = 0

    def validate(self) -> None:
        if not 0 < self.activity_threshold < 1.5:
            raise DomainError("activity threshold must lie in (0, 1.5)")
        if self.batch_size < 4:
            raise DomainError("batch size must be at least 4")
        if not 0 < self.elite_percentile < 100:
            raise DomainError("elite percentile must lie in (0, 100)")
        if self.learning_rate < 0 or self.epochs < 1 or self.minibatch < 1:
            raise DomainError("learning rate must be >= 0, epochs and minibatch >= 1")
        if self.plateau_window < 2 or self.max_batches < 1 or self.pool_cap < 1:
            raise DomainError("plateau window >= 2, max batches and pool cap >= 1")

    @property
    def n_elite(self) -> int:
        """Elite size implied by the percentile on a nominal batch (5 of 20 at 75)."""
        n = self.batch_size
        return n - math.ceil(self.elite_percentile / 100.0 * (n - 1))


@dataclass
class BatchStats:
    batch: int
    rewards: tuple[float, ...]
    reward_boundary: float
    mean_reward: float
    successes: int
    n_elite: int = 0
    n_pairs: int = 0
    capped: bool = False
    loss: float = float("nan")

    @property
    def n_episodes(self) -> int:
        return len(self.rewards)


def _sample(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, len(probs) - 1)


def episode_seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([seed, *path]).generate_state(1, np.uint64)[0])


def rollout_episode(policy: PolicyNet | None, env, rng: np.random.Generator,
                    activity_threshold: float = 0.95, start_step: int = 0,
                    scenario_id: str = "", seed: int = 0) -> EpisodeRecord:
    """Run one episode; the policy is only consulted when max loading exceeds the threshold.

    ``policy=None`` is the do-nothing agent.
    """
    env.reset(start_step)
    rec = EpisodeRecord(scenario_id=scenario_id, seed=seed, start_step=start_step)
    snap = getattr(env, "snapshot", None)
    if snap is not None:
        a, s = snap()
        rec.topologies.append(a)
        rec.line_status.append(s)
    while True:
        sampled = policy is not None and env.max_rho > activity_threshold
        if sampled:
            obs = env.observation()
            action = _sample(policy.forward(obs), rng)
            rec.decision_obs.append(obs)
            rec.decision_actions.append(action)
        else:
            action = 0
        res = env.step(action)
        rec.actions.append(action)
        rec.applied.append(bool(res.info.get("applied", True)))
        rec.rewards.append(float(res.reward))
        rec.max_rho.append(float(res.info.get("max_rho", 0.0)))
        rec.sampled.append(sampled)
        if snap is not None:
            a, s = snap()
            rec.topologies.append(a)
            rec.line_status.append(s)
        if res.done:
            rec.cause = res.cause
            return rec


def select_elite(episodes: list[EpisodeRecord], percentile: float = 75.0) -> list[EpisodeRecord]:
    """Episodes whose total reward reaches the percentile cutoff, ties included."""
    if not episodes:
        raise DomainError("cannot select elite episodes from an empty batch")
    rewards = np.array([e.total_reward for e in episodes])
    cutoff = np.percentile(rewards, percentile, method="higher")
    return [e for e, r in zip(episodes, rewards) if r >= cutoff]


def _top_k_boundary(rewards: list[float], k: int) -> float:
    return float(sorted(rewards, reverse=True)[min(k, len(rewards)) - 1])


def collect_batch(policy: PolicyNet, env_factory: Callable, config: TrainerConfig,
                  previous_boundary: float | None, batch_index: int = 0,
                  scenario_id: str = "", start_step: int = 0):
    """Sample ``batch_size`` episodes, then keep sampling while the adaptive test fails.

    The test passes when the k-th best reward beats ``previous_boundary`` or the
    k best episodes all succeed (k = ``config.n_elite``). Sampling stops at
    ``pool_cap * batch_size`` episodes; the stats then carry ``capped=True``.
    One environment from ``env_factory`` serves the whole batch.
    """
    env = env_factory()
    k = config.n_elite
    cap = config.pool_cap * config.batch_size
    episodes: list[EpisodeRecord] = []

    def one():
        s = episode_seed(config.seed, batch_index, len(episodes))
        episodes.append(rollout_episode(policy, env, np.random.default_rng(s),
                                        config.activity_threshold, start_step,
                                        scenario_id, s))

    for _ in range(config.batch_size):
        one()
    capped = False
    while True:
        rewards = [e.total_reward for e in episodes]
        boundary = _top_k_boundary(rewards, k)
        top = sorted(episodes, key=lambda e: -e.total_reward)[:k]
        if previous_boundary is None or boundary > previous_boundary:
            break
        if all(e.success for e in top):
            break
        if len(episodes) >= cap:
            capped = True
            log.info("batch %d: pool cap %d reached", batch_index, cap)
            break
        one()
    elite = [e for e in episodes if e.total_reward >= boundary]
    stats = BatchStats(batch_index, tuple(rewards), boundary, float(np.mean(rewards)),
                       sum(e.success for e in episodes), n_elite=len(elite), capped=capped)
    return episodes, stats


def should_stop(history: list[BatchStats], config: TrainerConfig) -> bool:
    """Boundary flat within ``plateau_tol`` over the window and mean within ``gap_tol``."""
    w = config.plateau_window
    if len(history) < w:
        return False
    recent = np.array([h.reward_boundary for h in history[-w:]])
    ref = abs(recent[-1])
    if ref == 0:
        return bool(np.all(recent == 0) and history[-1].mean_reward == 0)
    flat = (recent.max() - recent.min()) / ref < config.plateau_tol
    gap = (recent[-1] - history[-1].mean_reward) / ref < config.gap_tol
    return bool(flat and gap)


def elite_pairs(elite: list[EpisodeRecord]) -> tuple[np.ndarray, np.ndarray]:
    obs = [o for e in elite for o in e.decision_obs]
    act = [a for e in elite for a in e.decision_actions]
    if not obs:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    return np.stack(obs), np.asarray(act, dtype=np.int64)


def fit_policy(net: PolicyNet, obs: np.ndarray, act: np.ndarray, config: TrainerConfig,
               optimizer, rng: np.random.Generator) -> float:
    """``epochs`` shuffled minibatch passes; returns the mean pre-update loss."""
    losses = []
    n = len(act)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for i in range(0, n, config.minibatch):
            idx = order[i:i + config.minibatch]
            losses.append(train_arrays(net, obs[idx], act[idx], config.learning_rate,
                                       optimizer))
    return float(np.mean(losses)) if losses else float("nan")


def write_history_csv(history: list[BatchStats], path, comments: dict | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for key, val in (comments or {}).items():
            fh.write(f"# {key}={val}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for h in history:
            w.writerow([h.batch, repr(h.mean_reward), repr(h.reward_boundary), h.successes])


def read_history_csv(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        rows = [ln for ln in fh if not ln.startswith("#")]
    return [{"batch": int(r["batch"]), "mean_reward": float(r["mean_reward"]),
             "reward_boundary": float(r["reward_boundary"]), "successes": int(r["successes"])}
            for r in csv.DictReader(rows)]


@dataclass
class TrainingResult:
    net: PolicyNet
    history: list[BatchStats]
    stopped: bool
    checkpoints: list[Path] = field(default_factory=list)


def train_with_factory(config: TrainerConfig, env_factory: Callable, dims: tuple[int, ...],
                       passthrough=(), scenario_id: str = "", out_dir=None,
                       on_batch: Callable | None = None) -> TrainingResult:
    """Generic CEM loop over any environment exposing reset/step/observation/max_rho.

    Input normalization is frozen from a probe episode run before the first
    batch with every observation recorded.
    """
    config.validate()
    net = PolicyNet.initialize(dims, seed=config.seed)
    optimizer = make_optimizer(config.optimizer)
    out = Path(out_dir) if out_dir is not None else None
    checkpoints: list[Path] = []

    env = env_factory()
    probe = [env.reset(0)]
    while True:
        res = env.step(0)
        probe.append(res.observation)
        if res.done:
            break
    net.fit_normalization(np.stack(probe), passthrough)

    history: list[BatchStats] = []
    previous = None
    stopped = False
    for b in range(config.max_batches):
        episodes, stats = collect_batch(net, env_factory, config, previous, b, scenario_id)
        elite = [e for e in episodes if e.total_reward >= stats.reward_boundary]
        obs, act = elite_pairs(elite)
        stats.n_pairs = len(act)
        if len(act):
            rng = np.random.default_rng(episode_seed(config.seed, b, 1 << 30))
            stats.loss = fit_policy(net, obs, act, config, optimizer, rng)
        history.append(stats)
        previous = stats.reward_boundary
        log.info("batch %d: mean %.3f boundary %.3f successes %d/%d pairs %d",
                 b, stats.mean_reward, stats.reward_boundary, stats.successes,
                 stats.n_episodes, stats.n_pairs)
        if on_batch is not None:
            on_batch(net, stats)
        if out is not None and config.checkpoint_every and (b + 1) % config.checkpoint_every == 0:
            path = out / f"checkpoint_{b + 1:04d}.bin"
            save_checkpoint(net, path)
            checkpoints.append(path)
        if should_stop(history, config):
            stopped = True
            break
    if out is not None:
        path = out / "policy.bin"
        save_checkpoint(net, path)
        checkpoints.append(path)
    return TrainingResult(net, history, stopped, checkpoints)


def grid_passthrough(grid: GridModel) -> tuple[slice, slice]:
    layout = observation_layout(grid)
    return layout["topology"], layout["line_status"]


def train(config: TrainerConfig, grid: GridModel, scenario: Scenario,
          env_config: EnvConfig | None = None, out_dir=None,
          on_batch: Callable | None = None) -> TrainingResult:
    catalog = build_action_catalog(grid)
    env = GridEnv(grid, scenario, catalog, env_config)
    dims = (observation_size(grid), *config.hidden, len(catalog))
    if scenario.n_steps < env.config.horizon:
        raise ContractViolation(f"scenario {scenario.id} is shorter than the horizon")
    return train_with_factory(config, lambda: env, dims, grid_passthrough(grid), scenario.id,
                              out_dir, on_batch)
