"""Episode evaluation, topology sequences, topological entropy and CSV reports."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .action_space import build_action_catalog
from .cem_trainer import BatchStats, episode_seed, rollout_episode
from .environment import Cause, EnvConfig, EpisodeRecord, GridEnv
from .grid_topology import GridModel, Topology, describe_topology
from .policy_net import PolicyNet
from .scenario import ScenarioScore

BASE_LABEL = "B"


def topology_key(assignment: np.ndarray, line_status: np.ndarray) -> bytes:
    """Busbar vector with the endpoints of out-of-service lines masked to 0.

    Assumes the standard element order: line origins, then line extremities.
    """
    a = np.asarray(assignment, dtype=np.int8).copy()
    off = ~np.asarray(line_status, dtype=bool)
    n_line = off.shape[0]
    a[:n_line][off] = 0
    a[n_line:2 * n_line][off] = 0
    return a.tobytes()


@dataclass
class TopologySequence:
    runs: list[tuple[bytes, int]]

    @property
    def length(self) -> int:
        return sum(n for _, n in self.runs)

    @property
    def distinct(self) -> list[bytes]:
        return list(dict.fromkeys(k for k, _ in self.runs))

    @property
    def revisit(self) -> bool:
        return len(self.distinct) < len(self.runs)

    def dwell(self) -> dict[bytes, int]:
        out: dict[bytes, int] = {}
        for k, n in self.runs:
            out[k] = out.get(k, 0) + n
        return out


def sequence_from_keys(keys) -> TopologySequence:
    runs: list[list] = []
    for k in keys:
        if runs and runs[-1][0] == k:
            runs[-1][1] += 1
        else:
            runs.append([k, 1])
    return TopologySequence([(k, n) for k, n in runs])


def topology_sequence(episode: EpisodeRecord) -> TopologySequence:
    """Run-length encoding of the observed topologies (reset snapshot included)."""
    if not episode.topologies:
        raise ValueError("episode has no recorded topologies")
    return sequence_from_keys(topology_key(a, s)
                              for a, s in zip(episode.topologies, episode.line_status))


def topological_entropy(sequence) -> float:
    """Shannon entropy (nats) of the time share spent in each distinct topology."""
    if not isinstance(sequence, TopologySequence):
        sequence = TopologySequence(list(sequence))
    dwell = sequence.dwell()
    if any(n <= 0 for n in dwell.values()):
        raise ValueError("dwell steps must be positive")
    total = sum(dwell.values())
    if len(dwell) <= 1:
        return 0.0
    return float(-sum((n / total) * math.log(n / total) for n in dwell.values()))


@dataclass
class EpisodeAnalysis:
    scenario_id: str
    seed: int
    total_reward: float
    success: bool
    cause: str
    sequence: TopologySequence = field(repr=False)
    entropy: float = 0.0
    record: EpisodeRecord | None = field(default=None, repr=False, compare=False)

    @property
    def revisit(self) -> bool:
        return self.sequence.revisit

    @property
    def length(self) -> int:
        return self.sequence.length


def analyze_episode(episode: EpisodeRecord) -> EpisodeAnalysis:
    seq = topology_sequence(episode)
    return EpisodeAnalysis(episode.scenario_id, episode.seed, episode.total_reward,
                           episode.success, episode.cause.value, seq, topological_entropy(seq),
                           episode)


@dataclass
class EvaluationSummary:
    n_scenarios: int
    n_success: int
    success: dict[str, bool]
    best: dict[str, EpisodeAnalysis]

    @property
    def success_fraction(self) -> float:
        return self.n_success / self.n_scenarios if self.n_scenarios else 0.0


def _evaluate_one(args) -> list[EpisodeAnalysis]:
    net, grid, scenario, n_episodes, seed, index, env_config, threshold, start = args
    env = GridEnv(grid, scenario, build_action_catalog(grid), env_config)
    out = []
    for k in range(n_episodes):
        s = episode_seed(seed, index, k)
        rec = rollout_episode(net, env, np.random.default_rng(s), threshold, start,
                              scenario.id, s)
        out.append(analyze_episode(rec))
    return out


def evaluate_agent(net: PolicyNet | None, grid: GridModel, scenarios, episodes_per_scenario: int,
                   seed: int, env_config: EnvConfig | None = None,
                   activity_threshold: float = 0.95, start_step: int = 0,
                   jobs: int = 1) -> tuple[dict[str, list[EpisodeAnalysis]], EvaluationSummary]:
    """Stochastic rollouts per scenario; ``net=None`` evaluates the do-nothing agent.

    A scenario counts as a success when any of its episodes completes.
    """
    if episodes_per_scenario < 1:
        raise ValueError("episodes_per_scenario must be >= 1")
    n_ep = 1 if net is None else episodes_per_scenario
    tasks = [(net, grid, sc, n_ep, seed, i, env_config, activity_threshold, start_step)
             for i, sc in enumerate(scenarios)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_evaluate_one, tasks))
    else:
        results = [_evaluate_one(t) for t in tasks]
    analyses = {sc.id: res for sc, res in zip(scenarios, results)}
    success = {sid: any(a.success for a in res) for sid, res in analyses.items()}
    best = {sid: max(res, key=lambda a: a.total_reward) for sid, res in analyses.items()}
    summary = EvaluationSummary(len(analyses), sum(success.values()), success, best)
    return analyses, summary


class TopologyLabels:
    """Stable short names: ``B`` for the base topology, ``T1``, ``T2``... by first sight."""

    def __init__(self, n_line: int | None = None, n_elements: int | None = None):
        self.names: dict[bytes, str] = {}
        if n_elements is not None:
            base = np.ones(n_elements, dtype=np.int8)
            self.names[topology_key(base, np.ones(n_line, dtype=bool))] = BASE_LABEL

    def __call__(self, key: bytes) -> str:
        if key not in self.names:
            self.names[key] = f"T{sum(1 for v in self.names.values() if v != BASE_LABEL) + 1}"
        return self.names[key]

    def sequence(self, seq: TopologySequence) -> str:
        return "->".join(self(k) for k, _ in seq.runs)


def emit_reports(scores: list[ScenarioScore], history, analyses: list[EpisodeAnalysis],
                 out_dir, grid: GridModel | None = None, success: dict | None = None,
                 comments: dict | None = None) -> dict[str, Path]:
    """Write the scenario scatter, training curve and topology table CSVs.

    ``analyses`` is the list of episodes to tabulate (typically the best one
    per scenario). ``success`` defaults to any successful analysed episode.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if success is None:
        success = {}
        for a in analyses:
            success[a.scenario_id] = success.get(a.scenario_id, False) or a.success
    header = [f"# {k}={v}\n" for k, v in (comments or {}).items()]
    paths = {name: out / f"{name}.csv" for name in ("scatter", "training_curve",
                                                    "topology_table", "topology_legend")}

    with open(paths["scatter"], "w", newline="", encoding="utf-8") as fh:
        fh.writelines(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario_id", "days_above", "max_loading", "trained_success"])
        for s in scores:
            flag = success.get(s.scenario_id)
            w.writerow([s.scenario_id, s.days_above, f"{s.max_loading:.6f}",
                        "" if flag is None else int(flag)])

    with open(paths["training_curve"], "w", newline="", encoding="utf-8") as fh:
        fh.writelines(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["batch", "mean_reward", "reward_boundary", "successes"])
        for h in history or []:
            if isinstance(h, BatchStats):
                h = {"batch": h.batch, "mean_reward": h.mean_reward,
                     "reward_boundary": h.reward_boundary, "successes": h.successes}
            w.writerow([h["batch"], repr(float(h["mean_reward"])),
                        repr(float(h["reward_boundary"])), h["successes"]])

    labels = (TopologyLabels(grid.n_line, grid.n_elements) if grid is not None
              else TopologyLabels())
    groups: dict[str, list[float]] = {}
    for a in analyses:
        groups.setdefault(labels.sequence(a.sequence), []).append(a.entropy)
    with open(paths["topology_table"], "w", newline="", encoding="utf-8") as fh:
        fh.writelines(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sequence", "episodes", "entropy_min", "entropy_max"])
        for seq, ent in sorted(groups.items(), key=lambda kv: (-len(kv[1]), kv[0])):
            w.writerow([seq, len(ent), f"{min(ent):.4f}", f"{max(ent):.4f}"])

    with open(paths["topology_legend"], "w", newline="", encoding="utf-8") as fh:
        fh.writelines(header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "description", "assignment"])
        for key, name in labels.names.items():
            vec = np.frombuffer(key, dtype=np.int8)
            desc = ""
            if grid is not None and len(vec) == grid.n_elements:
                status = np.ones(grid.n_line, dtype=bool)
                masked = vec[:grid.n_line] == 0
                status[masked] = False
                assign = np.where(vec == 0, 1, vec).astype(np.int8)
                desc = describe_topology(grid, Topology(assign, status))
            w.writerow([name, desc, "".join(str(int(v)) for v in vec)])
    return paths


def episode_count(analyses: dict[str, list[EpisodeAnalysis]]) -> int:
    return sum(len(v) for v in analyses.values())


__all__ = ["Cause", "EpisodeAnalysis", "EvaluationSummary", "TopologyLabels", "TopologySequence",
           "analyze_episode", "emit_reports", "evaluate_agent", "sequence_from_keys",
           "topological_entropy", "topology_key", "topology_sequence"]
