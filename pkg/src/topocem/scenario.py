"""Injection time series: CSV ingestion, synthetic generation and do-nothing screening."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DomainError, ScenarioParseError
from .grid_topology import GridModel, Topology
from .power_flow import InjectionSet, solve_power_flow_series

STEP_SECONDS = 300
STEPS_PER_DAY = 288
STEPS_PER_WEEK = 7 * STEPS_PER_DAY
POWER_FACTOR = 0.95
LOADING_FLAG = 0.95


@dataclass(frozen=True, eq=False)
class Scenario:
    id: str
    load_p: np.ndarray  # (T, n_load) MW
    load_q: np.ndarray  # (T, n_load) MVAr
    gen_p: np.ndarray  # (T, n_gen) MW
    gen_v: np.ndarray  # (T, n_gen) pu
    step_seconds: int = STEP_SECONDS

    @property
    def n_steps(self) -> int:
        return self.load_p.shape[0]

    def injections(self, t: int) -> InjectionSet:
        return InjectionSet(self.load_p[t], self.load_q[t], self.gen_p[t], self.gen_v[t])

    def window(self, start: int = 0, length: int = STEPS_PER_WEEK) -> "Scenario":
        if start < 0 or start + length > self.n_steps:
            raise DomainError(f"window [{start}, {start + length}) outside scenario of "
                              f"{self.n_steps} steps")
        sl = slice(start, start + length)
        return Scenario(self.id, self.load_p[sl], self.load_q[sl], self.gen_p[sl],
                        self.gen_v[sl], self.step_seconds)

    def with_id(self, new_id: str) -> "Scenario":
        return Scenario(new_id, self.load_p, self.load_q, self.gen_p, self.gen_v,
                        self.step_seconds)


def scenario_header(n_load: int, n_gen: int, with_q: bool = True) -> list[str]:
    cols = ["step"] + [f"load_p_{i}" for i in range(n_load)]
    if with_q:
        cols += [f"load_q_{i}" for i in range(n_load)]
    cols += [f"gen_p_{i}" for i in range(n_gen)] + [f"gen_v_{i}" for i in range(n_gen)]
    return cols


def _check_header(header: list[str], n_load: int, n_gen: int) -> bool:
    """Validate block by block; returns whether reactive load columns are present."""
    if not header or header[0] != "step":
        raise ScenarioParseError("missing header: first column must be 'step'", row=1, column=1)
    blocks: dict[str, list[str]] = {}
    for name in header[1:]:
        prefix = name.rsplit("_", 1)[0]
        blocks.setdefault(prefix, []).append(name)
    unknown = set(blocks) - {"load_p", "load_q", "gen_p", "gen_v"}
    if unknown:
        raise ScenarioParseError(f"unknown column block(s) {sorted(unknown)}", row=1)
    expected = {"load_p": n_load, "load_q": n_load, "gen_p": n_gen, "gen_v": n_gen}
    for block, count in expected.items():
        if block == "load_q" and block not in blocks:
            continue
        found = len(blocks.get(block, []))
        if found != count:
            raise ScenarioParseError(
                f"column block {block}: expected {count} columns, found {found}", row=1)
    with_q = "load_q" in blocks
    if header != scenario_header(n_load, n_gen, with_q):
        raise ScenarioParseError("columns out of order; expected " +
                                 ",".join(scenario_header(n_load, n_gen, with_q)), row=1)
    return with_q


def load_scenario(path: str | Path, n_load: int = 11, n_gen: int = 5,
                  grid: GridModel | None = None) -> Scenario:
    """Parse a scenario CSV. Leading ``#`` lines are comments (``# id=...`` names it)."""
    if grid is not None:
        n_load, n_gen = grid.n_load, grid.n_gen
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioParseError(f"cannot read scenario {path}: {exc}") from exc
    lines = text.split("\n")
    sid = path.stem
    first = 0
    while first < len(lines) and lines[first].startswith("#"):
        body = lines[first][1:].strip()
        if body.startswith("id="):
            sid = body[3:].strip()
        first += 1
    rows = list(csv.reader(io.StringIO("\n".join(lines[first:]))))
    if not rows:
        raise ScenarioParseError("missing header", row=first + 1)
    header = rows[0]
    with_q = _check_header(header, n_load, n_gen)
    data = np.empty((len(rows) - 1, len(header) - 1))
    n_rows = 0
    for r, row in enumerate(rows[1:]):
        if not row:
            continue
        file_row = first + r + 2
        if len(row) != len(header):
            raise ScenarioParseError(f"expected {len(header)} cells, found {len(row)}",
                                     row=file_row)
        for c, cell in enumerate(row[1:]):
            try:
                data[n_rows, c] = float(cell)
            except ValueError:
                raise ScenarioParseError(f"non-numeric cell {cell!r} in {header[c + 1]}",
                                         row=file_row, column=c + 2) from None
        n_rows += 1
    data = data[:n_rows]
    if n_rows == 0:
        raise ScenarioParseError("scenario has no data rows", row=first + 2)
    if not np.all(np.isfinite(data)):
        raise ScenarioParseError("non-finite values in scenario")
    load_p = data[:, :n_load]
    off = n_load
    if with_q:
        load_q = data[:, off:off + n_load]
        off += n_load
    else:
        load_q = load_p * np.tan(np.arccos(POWER_FACTOR))
    gen_p = data[:, off:off + n_gen]
    gen_v = data[:, off + n_gen:off + 2 * n_gen]
    if np.any(load_p < 0):
        raise ScenarioParseError("negative load active power")
    if np.any(gen_v <= 0):
        raise ScenarioParseError("generator voltage setpoints must be positive")
    if grid is not None:
        renewable = [g.id for g in grid.generators if g.kind in ("wind", "solar")]
        if np.any(gen_p[:, renewable] < 0):
            raise ScenarioParseError("negative renewable output")
    return Scenario(sid, load_p, load_q, gen_p, gen_v)


def save_scenario(scenario: Scenario, path: str | Path, comments: dict | None = None) -> None:
    n_load, n_gen = scenario.load_p.shape[1], scenario.gen_p.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# id={scenario.id}\n")
        for key, val in (comments or {}).items():
            fh.write(f"# {key}={val}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(scenario_header(n_load, n_gen))
        block = np.hstack([scenario.load_p, scenario.load_q, scenario.gen_p, scenario.gen_v])
        for t, row in enumerate(block):
            w.writerow([t] + [f"{v:.6f}" for v in row])


@dataclass
class SyntheticParams:
    """Knobs of the synthetic scenario generator.

    Each scenario draws a stress level uniformly in ``[0, stress_factor]``.
    It adds ``stress * stress_gen_mw`` of capacity to the ``stress_gens``
    in-feeds on the distribution side (midday solar pushes power across the
    transmission/distribution interface) and scales ``stress_loads`` by
    ``1 + stress`` around the evening peak.
    """

    days: int = 7
    level: tuple[float, float] = (0.8, 1.0)
    daily_amplitude: float = 0.3
    weekend_factor: float = 0.9
    noise: float = 0.02
    wind_capacity_mw: float = 50.0
    solar_capacity_mw: float = 30.0
    renewable_variability: float = 0.3
    stress_factor: float = 0.0
    stress_gens: tuple[int, ...] = (2,)
    stress_gen_mw: float = 100.0
    stress_loads: tuple[int, ...] = ()
    thermal_share: float = 0.15
    loss_margin: float = 0.05
    power_factor: float = POWER_FACTOR

    def validate(self):
        lo, hi = self.level
        if self.days < 1 or lo <= 0 or hi < lo:
            raise DomainError("days must be >= 1 and the level range positive")
        for name in ("daily_amplitude", "noise", "wind_capacity_mw", "solar_capacity_mw",
                     "renewable_variability", "stress_factor", "stress_gen_mw", "thermal_share",
                     "loss_margin"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be non-negative")
        if not 0 < self.power_factor <= 1 or self.daily_amplitude >= 1:
            raise DomainError("power_factor must be in (0, 1] and daily_amplitude < 1")


def _smooth_noise(rng, size, n, sigma, corr=0.98):
    """AR(1) noise with stationary standard deviation ``sigma``."""
    out = np.empty((size, n))
    x = rng.normal(0.0, sigma, n)
    innov = rng.normal(0.0, sigma * np.sqrt(1 - corr ** 2), (size, n))
    for t in range(size):
        x = corr * x + innov[t]
        out[t] = x
    return out


def daily_shape(hours: np.ndarray, amplitude: float) -> np.ndarray:
    """Two-peak daily load curve scaled to [1 - amplitude, 1]."""
    morning = np.exp(-0.5 * ((hours - 9.0) / 2.0) ** 2)
    evening = np.exp(-0.5 * ((hours - 19.0) / 2.5) ** 2)
    night = np.exp(-0.5 * ((hours - 3.5) / 2.5) ** 2)
    raw = 0.8 * morning + evening - 0.5 * night
    raw = (raw - raw.min()) / (raw.max() - raw.min())
    return 1.0 - amplitude + amplitude * raw


def _one_synthetic(grid: GridModel, params: SyntheticParams, rng, sid: str) -> Scenario:
    T = params.days * STEPS_PER_DAY
    t = np.arange(T)
    hours = (t % STEPS_PER_DAY) * 24.0 / STEPS_PER_DAY
    day = t // STEPS_PER_DAY
    nominal_p = np.array([ld.p_mw for ld in grid.loads])
    n_load, n_gen = grid.n_load, grid.n_gen

    level = rng.uniform(*params.level)
    start_dow = int(rng.integers(0, 7))
    weekly = np.where((day + start_dow) % 7 >= 5, params.weekend_factor, 1.0)
    shape = daily_shape(hours, params.daily_amplitude) * weekly
    per_load = 1.0 + _smooth_noise(rng, T, n_load, params.noise)
    load_p = nominal_p[None, :] * level * shape[:, None] * per_load

    # drawn unconditionally so a stress sweep under one seed only rescales this term
    stress = params.stress_factor * rng.uniform()
    day_weight = rng.uniform(0.5, 1.0, params.days)
    peak = np.exp(-0.5 * ((hours - 19.0) / 3.0) ** 2) * day_weight[day]
    for i in params.stress_loads:
        load_p[:, i] *= 1.0 + stress * peak
    load_p = np.maximum(load_p, 0.0)
    load_q = load_p * np.tan(np.arccos(params.power_factor))

    gen_p = np.zeros((T, n_gen))
    gen_v = np.tile([g.v_pu for g in grid.generators], (T, 1))
    total = load_p.sum(axis=1) * (1.0 + params.loss_margin)
    var = params.renewable_variability
    sun = np.clip(np.sin(np.pi * (hours - 6.0) / 14.0), 0.0, None)
    for g in grid.generators:
        if g.kind == "wind":
            base = rng.uniform(0.2, 0.7)
            wind = base + _smooth_noise(rng, T, 1, var, corr=0.995)[:, 0]
            gen_p[:, g.id] = params.wind_capacity_mw * np.clip(wind, 0.0, 1.0)
        elif g.kind == "solar":
            clouds = np.clip(1.0 - np.abs(_smooth_noise(rng, T, 1, var, corr=0.99)[:, 0]), 0, 1)
            gen_p[:, g.id] = params.solar_capacity_mw * sun * clouds
    day_sun = rng.uniform(0.6, 1.0, params.days)[day]
    for g in params.stress_gens:
        gen_p[:, g] += stress * params.stress_gen_mw * sun * day_sun
    thermal = [g.id for g in grid.generators if g.kind == "thermal" and not g.slack]
    renewable = gen_p.sum(axis=1)
    # curtail in-feeds that exceed demand
    over = renewable > total
    gen_p[over] *= (total[over] / renewable[over])[:, None]
    renewable = np.minimum(renewable, total)
    # thermal units back off when renewables alone would overshoot the demand
    residual = np.maximum(total - renewable, 0.0)
    share = np.minimum(params.thermal_share * total, residual / (len(thermal) + 1))
    for g in thermal:
        gen_p[:, g] = share
    slack = grid.slack_gen
    gen_p[:, slack] = residual - share * len(thermal)
    return Scenario(sid, load_p, load_q, gen_p, gen_v)


def generate_synthetic(params: SyntheticParams, count: int, seed: int,
                       grid: GridModel, prefix: str = "scn") -> list[Scenario]:
    """``count`` scenarios; scenario ``i`` depends only on ``(seed, i)``."""
    params.validate()
    if count < 0:
        raise DomainError("count must be non-negative")
    out = []
    for i in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        out.append(_one_synthetic(grid, params, rng, f"{prefix}_{i:04d}"))
    return out


@dataclass
class ScenarioScore:
    scenario_id: str
    days_above: int
    max_loading: float
    line_max: np.ndarray = field(repr=False)
    divergent: bool = False


def score_scenario(grid: GridModel, scenario: Scenario, days: int = 7,
                   threshold: float = LOADING_FLAG) -> ScenarioScore:
    """Do-nothing screening: base topology, no tripping, every step solved."""
    n = days * STEPS_PER_DAY
    if scenario.n_steps < n:
        raise DomainError(f"scenario {scenario.id} covers {scenario.n_steps} steps, "
                          f"{n} required")
    rho, ok = solve_power_flow_series(grid, Topology.base(grid), scenario.load_p[:n],
                                      scenario.load_q[:n], scenario.gen_p[:n],
                                      scenario.gen_v[:n])
    step_max = rho.max(axis=1)
    per_day = step_max.reshape(days, STEPS_PER_DAY).max(axis=1)
    return ScenarioScore(scenario.id, int(np.sum(per_day >= threshold)), float(step_max.max()),
                         rho.max(axis=0), divergent=not bool(ok.all()))


def select_training_scenario(scores: list[ScenarioScore]) -> str:
    """Highest do-nothing loading; ties go to more flagged days, then the smaller id."""
    usable = [s for s in scores if not s.divergent]
    if not usable:
        raise DomainError("no non-divergent scenario scores to select from")
    best = min(usable, key=lambda s: (-s.max_loading, -s.days_above, s.scenario_id))
    return best.scenario_id


def write_scores_csv(scores: list[ScenarioScore], path, comments: dict | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        for key, val in (comments or {}).items():
            fh.write(f"# {key}={val}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario_id", "days_above", "max_loading", "divergent"])
        for s in scores:
            w.writerow([s.scenario_id, s.days_above, f"{s.max_loading:.6f}", int(s.divergent)])


def read_scores_csv(path) -> list[ScenarioScore]:
    with open(path, encoding="utf-8") as fh:
        rows = [ln for ln in fh if not ln.startswith("#")]
    out = []
    for rec in csv.DictReader(rows):
        out.append(ScenarioScore(rec["scenario_id"], int(rec["days_above"]),
                                 float(rec["max_loading"]), np.zeros(0),
                                 bool(int(rec.get("divergent", 0) or 0))))
    return out
