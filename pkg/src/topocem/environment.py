"""Step-based grid operation episodes with tripping, reconnection and cooldown rules."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .action_space import ActionCatalog, build_action_catalog
from .errors import ContractViolation, InitializationError
from .grid_topology import Action, GridModel, Topology, apply_action
from .power_flow import PowerFlowSolution, compute_loadings, prepare_network, solve_power_flow
from .scenario import STEPS_PER_WEEK, Scenario


class Cause(str, Enum):
    NONE = "none"
    DEMAND_NOT_SERVED = "demand_not_served"
    GENERATOR_DISCONNECTED = "generator_disconnected"
    ISLANDING = "islanding"
    DIVERGENCE = "divergence"
    SCENARIO_COMPLETE = "scenario_complete"


@dataclass
class EnvConfig:
    mode: str = "ac"
    horizon: int = STEPS_PER_WEEK
    tripping: bool = True
    hard_overload: float = 1.5
    overload_grace: int = 2
    reconnect_steps: int = 10
    cooldown_steps: int = 3


@dataclass
class EnvState:
    t: int
    steps: int
    topology: Topology
    overload: np.ndarray
    reconnect: np.ndarray
    cooldown: np.ndarray
    solution: PowerFlowSolution
    loadings: np.ndarray
    done: bool = False
    cause: Cause = Cause.NONE


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    cause: Cause
    info: dict = field(default_factory=dict)


def compute_reward(loadings) -> float:
    """Mean remaining squared transfer margin over lines, in [0, 1]."""
    rho = np.asarray(loadings, dtype=float)
    return float(np.mean(np.maximum(0.0, 1.0 - rho ** 2)))


def observation_layout(grid: GridModel) -> dict[str, slice]:
    sizes = [
        ("gen_v", grid.n_gen), ("gen_p", grid.n_gen), ("gen_q", grid.n_gen),
        ("load_p", grid.n_load), ("load_q", grid.n_load), ("load_v", grid.n_load),
        ("p_or", grid.n_line), ("q_or", grid.n_line), ("v_or", grid.n_line), ("a_or", grid.n_line),
        ("p_ex", grid.n_line), ("q_ex", grid.n_line), ("v_ex", grid.n_line), ("a_ex", grid.n_line),
        ("rho", grid.n_line), ("topology", grid.n_elements), ("line_status", grid.n_line),
        ("overload_steps", grid.n_line),
    ]
    out, start = {}, 0
    for name, size in sizes:
        out[name] = slice(start, start + size)
        start += size
    return out


def observation_size(grid: GridModel) -> int:
    return max(s.stop for s in observation_layout(grid).values())


def build_observation(grid: GridModel, state: EnvState) -> np.ndarray:
    sol = state.solution
    layout = observation_layout(grid)
    obs = np.zeros(observation_size(grid))
    for name in ("gen_v", "gen_p", "gen_q", "load_p", "load_q", "load_v", "p_or", "q_or",
                 "v_or", "a_or", "p_ex", "q_ex", "v_ex", "a_ex"):
        obs[layout[name]] = getattr(sol, name)
    obs[layout["rho"]] = state.loadings
    obs[layout["topology"]] = state.topology.assignment
    obs[layout["line_status"]] = state.topology.line_in_service
    obs[layout["overload_steps"]] = state.overload
    return obs


class GridEnv:
    """One episode engine; single owner, not thread-safe.

    Each step: apply the action under cooldown rules, move to the next
    snapshot, solve the load flow, check hard constraints, apply tripping,
    run reconnection timers, then compute the reward.
    """

    def __init__(self, grid: GridModel, scenario: Scenario, catalog: ActionCatalog | None = None,
                 config: EnvConfig | None = None):
        self.grid = grid
        self.scenario = scenario
        self.catalog = catalog if catalog is not None else build_action_catalog(grid)
        self.config = config or EnvConfig()
        self.state: EnvState | None = None
        self.start_step = 0
        self._cache: dict = {}

    @property
    def max_rho(self) -> float:
        return float(self.state.loadings.max()) if self.state is not None else 0.0

    def _solve(self, topology: Topology, t: int) -> PowerFlowSolution:
        return solve_power_flow(self.grid, topology, self.scenario.injections(t),
                                mode=self.config.mode, cache=self._cache)

    def reset(self, start_step: int = 0) -> np.ndarray:
        if start_step < 0 or start_step + self.config.horizon > self.scenario.n_steps:
            raise ContractViolation(
                f"scenario {self.scenario.id} has {self.scenario.n_steps} steps; need "
                f"{self.config.horizon} from step {start_step}")
        grid = self.grid
        topo = Topology.base(grid)
        sol = self._solve(topo, start_step)
        if not sol.converged:
            raise InitializationError(f"load flow diverged at step {start_step}")
        self.start_step = start_step
        self.state = EnvState(
            t=start_step, steps=0, topology=topo,
            overload=np.zeros(grid.n_line, dtype=np.int64),
            reconnect=np.zeros(grid.n_line, dtype=np.int64),
            cooldown=np.zeros(grid.n_sub, dtype=np.int64),
            solution=sol, loadings=compute_loadings(sol, grid))
        return build_observation(grid, self.state)

    def observation(self) -> np.ndarray:
        return build_observation(self.grid, self.state)

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        """Copies of the current busbar assignment and line status."""
        topo = self.state.topology
        return topo.assignment.copy(), topo.line_in_service.copy()

    def _terminate(self, cause: Cause, applied: bool) -> StepResult:
        st = self.state
        st.done, st.cause = True, cause
        return StepResult(build_observation(self.grid, st), 0.0, True, cause,
                          {"applied": applied, "max_rho": self.max_rho, "t": st.t})

    def step(self, action: int | Action) -> StepResult:
        st = self.state
        if st is None or st.done:
            raise ContractViolation("step called on a terminal or un-reset environment")
        cfg = self.config
        grid = self.grid
        act = self.catalog[action] if isinstance(action, (int, np.integer)) else action

        cd_before = st.cooldown.copy()
        topo, applied = apply_action(grid, st.topology, act, st.cooldown, cfg.cooldown_steps)
        started = st.cooldown > cd_before
        st.topology = topo
        st.t += 1
        st.steps += 1

        net = prepare_network(grid, topo, self._cache)
        if net.islanded:
            return self._terminate(Cause.ISLANDING, applied)
        sol = self._solve(topo, st.t)
        if not sol.converged:
            return self._terminate(Cause.DIVERGENCE, applied)
        rho = compute_loadings(sol, grid)

        on = topo.line_in_service
        tripped = np.zeros(grid.n_line, dtype=bool)
        if cfg.tripping:
            hard = on & (rho > cfg.hard_overload)
            soft = on & (rho > 1.0) & ~hard
            st.overload[soft] += 1
            st.overload[on & (rho <= 1.0)] = 0
            tripped = hard | (soft & (st.overload > cfg.overload_grace))
            st.overload[tripped] = 0
            st.reconnect[tripped] = cfg.reconnect_steps

        waiting = (st.reconnect > 0) & ~tripped
        st.reconnect[waiting] -= 1
        restored = waiting & (st.reconnect == 0)
        st.cooldown[(st.cooldown > 0) & ~started] -= 1

        if tripped.any() or restored.any():
            topo = topo.copy()
            topo.line_in_service[tripped] = False
            topo.line_in_service[restored] = True
            st.overload[restored] = 0
            st.topology = topo
            net = prepare_network(grid, topo, self._cache)
            if net.islanded:
                g = net.graph
                main = g.component[g.gen_node[grid.slack_gen]]
                if np.any(g.component[g.load_node] != main):
                    return self._terminate(Cause.DEMAND_NOT_SERVED, applied)
                return self._terminate(Cause.GENERATOR_DISCONNECTED, applied)
            sol = self._solve(topo, st.t)
            if not sol.converged:
                return self._terminate(Cause.DIVERGENCE, applied)
            rho = compute_loadings(sol, grid)

        st.solution, st.loadings = sol, rho
        reward = compute_reward(rho)
        done = st.steps >= cfg.horizon - 1
        cause = Cause.SCENARIO_COMPLETE if done else Cause.NONE
        st.done, st.cause = done, cause
        return StepResult(build_observation(grid, st), reward, done, cause,
                          {"applied": applied, "max_rho": float(rho.max()), "t": st.t,
                           "tripped": np.flatnonzero(tripped).tolist(),
                           "restored": np.flatnonzero(restored).tolist()})


@dataclass
class EpisodeRecord:
    """Per-step log of one episode.

    ``topologies``/``line_status`` hold one row per observed snapshot, the
    reset snapshot included; the other per-step lists have one entry per
    ``step`` call. ``decision_obs``/``decision_actions`` keep only the steps
    where the policy was sampled.
    """

    scenario_id: str
    seed: int
    start_step: int = 0
    actions: list[int] = field(default_factory=list)
    applied: list[bool] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    max_rho: list[float] = field(default_factory=list)
    sampled: list[bool] = field(default_factory=list)
    topologies: list[np.ndarray] = field(default_factory=list)
    line_status: list[np.ndarray] = field(default_factory=list)
    decision_obs: list[np.ndarray] = field(default_factory=list)
    decision_actions: list[int] = field(default_factory=list)
    cause: Cause = Cause.NONE

    @property
    def total_reward(self) -> float:
        return float(np.sum(self.rewards)) if self.rewards else 0.0

    @property
    def success(self) -> bool:
        return self.cause == Cause.SCENARIO_COMPLETE

    @property
    def length(self) -> int:
        return len(self.topologies)


def write_episode_csv(record: EpisodeRecord, path: str | Path, header: dict) -> None:
    """One row per step plus ``# key=value`` header lines (scenario, seed, grid hash...)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        meta = {"scenario_id": record.scenario_id, "seed": record.seed,
                "start_step": record.start_step, **header}
        for key, val in meta.items():
            fh.write(f"# {key}={val}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "action_id", "applied", "reward", "max_rho", "done", "cause"])
        n = len(record.actions)
        for k in range(n):
            last = k == n - 1
            w.writerow([k + 1, record.actions[k], int(record.applied[k]),
                        repr(float(record.rewards[k])), repr(float(record.max_rho[k])),
                        int(last and record.cause != Cause.NONE),
                        record.cause.value if last else Cause.NONE.value])


def read_episode_csv(path: str | Path) -> tuple[dict, list[dict]]:
    header: dict[str, str] = {}
    rows = []
    with open(path, encoding="utf-8") as fh:
        body = []
        for line in fh:
            if line.startswith("#"):
                key, _, val = line[1:].strip().partition("=")
                header[key.strip()] = val.strip()
            else:
                body.append(line)
    for rec in csv.DictReader(body):
        rows.append({"step": int(rec["step"]), "action_id": int(rec["action_id"]),
                     "applied": bool(int(rec["applied"])), "reward": float(rec["reward"]),
                     "max_rho": float(rec["max_rho"]), "done": bool(int(rec["done"])),
                     "cause": rec["cause"]})
    return header, rows
