"""Command-line entry point: ``topocem <subcommand> [options]``."""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import __version__
from .action_space import build_action_catalog
from .analytics import (EpisodeAnalysis, TopologySequence, emit_reports, evaluate_agent,
                        topological_entropy)
from .cem_trainer import TrainerConfig, read_history_csv, train, write_history_csv
from .environment import (EnvConfig, GridEnv, observation_size, read_episode_csv,
                          write_episode_csv)
from .errors import DomainError, TopocemError
from .grid_topology import load_grid
from .policy_net import load_checkpoint
from .scenario import (STEPS_PER_WEEK, SyntheticParams, generate_synthetic, load_scenario,
                       read_scores_csv, save_scenario, score_scenario, select_training_scenario,
                       write_scores_csv)

log = logging.getLogger("topocem")


@dataclass
class RunConfig:
    grid: str | None = None
    scenario_dir: str | None = None
    out_dir: str = "out"
    seed: int = 0
    mode: str = "ac"
    horizon: int = STEPS_PER_WEEK
    jobs: int = field(default_factory=lambda: os.cpu_count() or 1)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)

    def env_config(self) -> EnvConfig:
        return EnvConfig(mode=self.mode, horizon=self.horizon)

    def digest(self) -> str:
        """Hash of the settings that affect results (output location and jobs excluded)."""
        settings = asdict(self)
        del settings["out_dir"], settings["jobs"]
        blob = json.dumps(settings, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def header(self, **extra) -> dict:
        return {"config_hash": self.digest(), "seed": self.seed, **extra}


# flag name -> (config key, type); trainer keys live in the [trainer] section
RUN_KEYS = {"grid": str, "scenario_dir": str, "out_dir": str, "seed": int, "mode": str,
            "horizon": int, "jobs": int}
TRAINER_KEYS = {f.name: f.type for f in fields(TrainerConfig) if f.name not in ("hidden", "seed")}
_CASTS = {"int": int, "float": float, "str": str, int: int, float: float, str: str}


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Flags override the INI file, which overrides built-in defaults."""
    ini = configparser.ConfigParser()
    if getattr(args, "config", None):
        if not ini.read(args.config, encoding="utf-8"):
            raise DomainError(f"cannot read config file {args.config}")
    cfg = RunConfig()
    for key, typ in RUN_KEYS.items():
        val = getattr(args, key, None)
        if val is None and ini.has_option("run", key):
            val = typ(ini.get("run", key))
        if val is not None:
            setattr(cfg, key, val)
    for key, typ in TRAINER_KEYS.items():
        cast = _CASTS.get(typ, str)
        val = getattr(args, key, None)
        if val is None and ini.has_option("trainer", key):
            val = cast(ini.get("trainer", key))
        if val is not None:
            setattr(cfg.trainer, key, val)
    cfg.trainer.seed = cfg.seed
    if cfg.mode not in ("ac", "dc"):
        raise DomainError(f"mode must be 'ac' or 'dc', got {cfg.mode!r}")
    if cfg.horizon < 2 or cfg.jobs < 1:
        raise DomainError("horizon must be >= 2 and jobs >= 1")
    return cfg


def _write_comments(fh, header: dict) -> None:
    for k, v in header.items():
        fh.write(f"# {k}={v}\n")


def _scenario_files(path: str | None) -> list[Path]:
    if path is None:
        raise DomainError("no scenario directory given (--scenarios)")
    p = Path(path)
    if p.is_file():
        return [p]
    if not p.is_dir():
        raise DomainError(f"scenario path {p} does not exist")
    files = sorted(p.glob("*.csv"))
    if not files:
        raise DomainError(f"no scenario CSV files in {p}")
    return files


def _score_file(args):
    grid_path, path = args
    grid = load_grid(grid_path)
    return score_scenario(grid, load_scenario(path, grid=grid))


def cmd_enumerate(args, cfg: RunConfig) -> int:
    grid = load_grid(cfg.grid)
    catalog = build_action_catalog(grid)
    out = sys.stdout
    _write_comments(out, cfg.header(grid_hash=grid.digest))
    out.write(catalog.to_csv())
    return 0


def cmd_gen_scenarios(args, cfg: RunConfig) -> int:
    grid = load_grid(cfg.grid)
    params = SyntheticParams(days=args.days, stress_factor=args.stress)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenarios = generate_synthetic(params, args.count, cfg.seed, grid, prefix=args.prefix)
    header = cfg.header(stress_factor=args.stress, days=args.days)
    for sc in scenarios:
        save_scenario(sc, out / f"{sc.id}.csv", header)
    print(f"wrote {len(scenarios)} scenarios to {out}")
    return 0


def cmd_score(args, cfg: RunConfig) -> int:
    files = _scenario_files(cfg.scenario_dir)
    tasks = [(cfg.grid, f) for f in files]
    if cfg.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            scores = list(pool.map(_score_file, tasks))
    else:
        scores = [_score_file(t) for t in tasks]
    out = Path(args.output or Path(cfg.out_dir) / "scores.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scores_csv(scores, out, cfg.header())
    print(f"scored {len(scores)} scenarios -> {out}")
    return 0


def cmd_select(args, cfg: RunConfig) -> int:
    try:
        scores = read_scores_csv(args.scores)
    except OSError as exc:
        raise DomainError(f"cannot read scores {args.scores}: {exc}") from exc
    print(select_training_scenario(scores))
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    grid = load_grid(cfg.grid)
    if not args.scenario or not Path(args.scenario).is_file():
        raise DomainError(f"scenario file {args.scenario!r} not found")
    scenario = load_scenario(args.scenario, grid=grid)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = train(cfg.trainer, grid, scenario, cfg.env_config(), out)
    header = cfg.header(scenario_id=scenario.id, grid_hash=grid.digest,
                        stopped=int(result.stopped))
    write_history_csv(result.history, out / "history.csv", header)
    last = result.history[-1]
    print(f"{len(result.history)} batches, stopped={result.stopped}, "
          f"mean={last.mean_reward:.3f} boundary={last.reward_boundary:.3f}")
    return 0


def _encode_runs(seq: TopologySequence) -> str:
    return "|".join(f"{k.hex()}*{n}" for k, n in seq.runs)


def _decode_runs(text: str) -> TopologySequence:
    runs = []
    for part in filter(None, text.split("|")):
        key, _, n = part.rpartition("*")
        runs.append((bytes.fromhex(key), int(n)))
    return TopologySequence(runs)


EVAL_COLUMNS = ["scenario_id", "episode", "seed", "total_reward", "success", "cause",
                "entropy", "revisit", "runs"]


def cmd_evaluate(args, cfg: RunConfig) -> int:
    grid = load_grid(cfg.grid)
    files = _scenario_files(cfg.scenario_dir)
    scenarios = [load_scenario(f, grid=grid) for f in files]
    net = None
    if args.checkpoint:
        net = load_checkpoint(args.checkpoint)
        n_actions = len(build_action_catalog(grid))
        if net.dims[0] != observation_size(grid) or net.dims[-1] != n_actions:
            raise DomainError(f"checkpoint dimensions {net.dims} do not fit this grid")
    analyses, summary = evaluate_agent(net, grid, scenarios, args.episodes, cfg.seed,
                                       cfg.env_config(), cfg.trainer.activity_threshold,
                                       jobs=cfg.jobs)
    out = Path(cfg.out_dir)
    (out / "episodes").mkdir(parents=True, exist_ok=True)
    header = cfg.header(grid_hash=grid.digest,
                        agent=Path(args.checkpoint).name if args.checkpoint else "do-nothing")
    with open(out / "evaluation.csv", "w", newline="", encoding="utf-8") as fh:
        _write_comments(fh, header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_COLUMNS)
        for sid, eps in analyses.items():
            for k, a in enumerate(eps):
                w.writerow([sid, k, a.seed, repr(a.total_reward), int(a.success), a.cause,
                            repr(a.entropy), int(a.revisit), _encode_runs(a.sequence)])
    path_of = {sc.id: f for sc, f in zip(scenarios, files)}
    for sid, best in summary.best.items():
        write_episode_csv(best.record, out / "episodes" / f"{sid}.csv",
                          {**header, "scenario_path": path_of[sid].resolve(),
                           "mode": cfg.mode, "horizon": cfg.horizon})
    with open(out / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        _write_comments(fh, header)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenarios", "successes", "success_fraction"])
        w.writerow([summary.n_scenarios, summary.n_success, repr(summary.success_fraction)])
    print(f"success {summary.n_success}/{summary.n_scenarios} "
          f"({summary.success_fraction:.3f})")
    return 0


def read_evaluation_csv(path) -> list[EpisodeAnalysis]:
    with open(path, encoding="utf-8") as fh:
        rows = [ln for ln in fh if not ln.startswith("#")]
    out = []
    for r in csv.DictReader(rows):
        seq = _decode_runs(r["runs"])
        out.append(EpisodeAnalysis(r["scenario_id"], int(r["seed"]), float(r["total_reward"]),
                                   bool(int(r["success"])), r["cause"], seq,
                                   topological_entropy(seq)))
    return out


def cmd_analyze(args, cfg: RunConfig) -> int:
    grid = load_grid(cfg.grid)
    try:
        scores = read_scores_csv(args.scores) if args.scores else []
        history = read_history_csv(args.history) if args.history else []
        episodes = read_evaluation_csv(args.evaluation) if args.evaluation else []
    except (OSError, KeyError, ValueError) as exc:
        raise DomainError(f"cannot read analysis inputs: {exc}") from exc
    best: dict[str, EpisodeAnalysis] = {}
    success: dict[str, bool] = {}
    for a in episodes:
        success[a.scenario_id] = success.get(a.scenario_id, False) or a.success
        if a.scenario_id not in best or a.total_reward > best[a.scenario_id].total_reward:
            best[a.scenario_id] = a
    paths = emit_reports(scores, history, list(best.values()), cfg.out_dir, grid, success,
                         cfg.header())
    for p in paths.values():
        print(p)
    return 0


def cmd_replay(args, cfg: RunConfig) -> int:
    try:
        header, rows = read_episode_csv(args.episode)
    except (OSError, KeyError, ValueError) as exc:
        raise DomainError(f"cannot read episode {args.episode}: {exc}") from exc
    grid = load_grid(cfg.grid)
    if header.get("grid_hash") not in (None, grid.digest):
        raise DomainError(f"episode was recorded on grid {header['grid_hash']}, "
                          f"loaded grid is {grid.digest}")
    scenario_path = args.scenario or header.get("scenario_path")
    if not scenario_path or not Path(scenario_path).is_file():
        raise DomainError("scenario for the episode not found; pass --scenario")
    scenario = load_scenario(scenario_path, grid=grid)
    env_cfg = EnvConfig(mode=args.mode or header.get("mode", cfg.mode),
                        horizon=int(args.horizon or header.get("horizon", cfg.horizon)))
    env = GridEnv(grid, scenario, build_action_catalog(grid), env_cfg)
    env.reset(int(header.get("start_step", 0)))
    mismatches = 0
    for row in rows:
        res = env.step(row["action_id"])
        if res.reward != row["reward"] or res.done != row["done"] or \
                res.info["applied"] != row["applied"]:
            mismatches += 1
            log.warning("step %d: recorded reward %r, replayed %r", row["step"], row["reward"],
                        res.reward)
        if res.done:
            break
    if mismatches or len(rows) != env.state.steps:
        print(f"replay mismatch: {mismatches} differing steps, "
              f"{env.state.steps}/{len(rows)} steps replayed")
        return 1
    print(f"replay ok: {len(rows)} steps, rewards identical")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with [run] and [trainer] sections")
    common.add_argument("--grid", help="grid definition JSON (default: packaged IEEE 14-bus)")
    common.add_argument("--seed", type=int)
    common.add_argument("--mode", choices=("ac", "dc"))
    common.add_argument("--horizon", type=int)
    common.add_argument("--jobs", type=int)
    common.add_argument("--out", dest="out_dir")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="topocem", description=__doc__)
    p.add_argument("--version", action="version", version=f"topocem {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("enumerate", parents=[common], help="per-substation configuration counts")

    g = sub.add_parser("gen-scenarios", parents=[common], help="write synthetic scenarios")
    g.add_argument("--count", type=int, default=50)
    g.add_argument("--days", type=int, default=7)
    g.add_argument("--stress", type=float, default=1.2)
    g.add_argument("--prefix", default="scn")

    s = sub.add_parser("score", parents=[common], help="do-nothing screening of scenarios")
    s.add_argument("--scenarios", dest="scenario_dir")
    s.add_argument("--output")

    s = sub.add_parser("select", parents=[common], help="pick the training scenario")
    s.add_argument("--scores", required=True)

    t = sub.add_parser("train", parents=[common], help="cross-entropy method training")
    t.add_argument("--scenario", help="training scenario CSV")
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--max-batches", dest="max_batches", type=int)
    t.add_argument("--learning-rate", dest="learning_rate", type=float)
    t.add_argument("--optimizer", choices=("adam", "sgd"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--activity-threshold", dest="activity_threshold", type=float)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)

    e = sub.add_parser("evaluate", parents=[common], help="evaluate an agent on scenarios")
    e.add_argument("--checkpoint", help="policy checkpoint; omit for the do-nothing agent")
    e.add_argument("--scenarios", dest="scenario_dir")
    e.add_argument("--episodes", type=int, default=14)

    a = sub.add_parser("analyze", parents=[common], help="emit scatter/curve/table reports")
    a.add_argument("--scores")
    a.add_argument("--history")
    a.add_argument("--evaluation")

    r = sub.add_parser("replay", parents=[common], help="re-simulate a recorded episode")
    r.add_argument("--episode", required=True)
    r.add_argument("--scenario")
    return p


COMMANDS = {"enumerate": cmd_enumerate, "gen-scenarios": cmd_gen_scenarios, "score": cmd_score,
            "select": cmd_select, "train": cmd_train, "evaluate": cmd_evaluate,
            "analyze": cmd_analyze, "replay": cmd_replay}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (TopocemError, OSError) as exc:
        print(f"topocem: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
