"""Static grid description, busbar topology state and electrical-node derivation.

Element endpoints are addressed by a position in the topology vector, ordered
as line origins, line extremities, loads, generators. With 20 lines, 11 loads
and 5 generators this gives the 56 slots the agent observes and controls.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ContractViolation, GridFileError, RejectedAction

SCHEMA_VERSION = 1
COOLDOWN_STEPS = 3
GENERATOR_TYPES = ("wind", "solar", "nuclear", "thermal")


@dataclass(frozen=True)
class Element:
    kind: str  # "line_or", "line_ex", "load" or "gen"
    index: int
    pos: int

    @property
    def is_line(self) -> bool:
        return self.kind in ("line_or", "line_ex")

    def label(self) -> str:
        name = {"line_or": "line", "line_ex": "line"}.get(self.kind, self.kind)
        return f"{name} {self.index}"


@dataclass(frozen=True)
class Substation:
    id: int
    name: str
    level: str
    elements: tuple[Element, ...]

    @property
    def n(self) -> int:
        return len(self.elements)

    @property
    def n_prime(self) -> int:
        return sum(not e.is_line for e in self.elements)

    @property
    def positions(self) -> np.ndarray:
        return np.array([e.pos for e in self.elements], dtype=np.intp)

    @property
    def line_mask(self) -> np.ndarray:
        return np.array([e.is_line for e in self.elements], dtype=bool)


@dataclass(frozen=True)
class Line:
    id: int
    from_sub: int
    to_sub: int
    r: float
    x: float
    b: float
    limit_a: float
    transformer: bool = False


@dataclass(frozen=True)
class Load:
    id: int
    substation: int
    p_mw: float
    q_mvar: float


@dataclass(frozen=True)
class Generator:
    id: int
    substation: int
    kind: str
    slack: bool
    p_mw: float
    v_pu: float


@dataclass(frozen=True, eq=False)
class GridModel:
    """Immutable electrical description of the network."""

    name: str
    base_mva: float
    sub_kv: tuple[float, ...]
    substations: tuple[Substation, ...]
    lines: tuple[Line, ...]
    loads: tuple[Load, ...]
    generators: tuple[Generator, ...]
    digest: str = ""

    @property
    def n_sub(self) -> int:
        return len(self.substations)

    @property
    def n_line(self) -> int:
        return len(self.lines)

    @property
    def n_load(self) -> int:
        return len(self.loads)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    @property
    def n_elements(self) -> int:
        return 2 * self.n_line + self.n_load + self.n_gen

    def line_or_pos(self, line: int) -> int:
        return line

    def line_ex_pos(self, line: int) -> int:
        return self.n_line + line

    def load_pos(self, load: int) -> int:
        return 2 * self.n_line + load

    def gen_pos(self, gen: int) -> int:
        return 2 * self.n_line + self.n_load + gen

    @cached_property
    def element_sub(self) -> np.ndarray:
        out = np.empty(self.n_elements, dtype=np.intp)
        for sub in self.substations:
            out[sub.positions] = sub.id
        return out

    @cached_property
    def line_ends(self) -> np.ndarray:
        return np.array([[ln.from_sub, ln.to_sub] for ln in self.lines], dtype=np.intp)

    @cached_property
    def slack_gen(self) -> int:
        return next(g.id for g in self.generators if g.slack)

    @cached_property
    def limits_a(self) -> np.ndarray:
        """Thermal limits at (origin, extremity) in amperes.

        Table limits are rated at the origin end. The extremity rating carries
        the same apparent power, so for transformers it is rescaled by the
        voltage ratio; for plain lines both ends share one limit.
        """
        lim = np.array([ln.limit_a for ln in self.lines], dtype=float)
        kv = np.asarray(self.sub_kv)
        ratio = kv[self.line_ends[:, 0]] / kv[self.line_ends[:, 1]]
        return np.column_stack([lim, lim * ratio])

    def element_by_pos(self, pos: int) -> Element:
        sub = self.substations[self.element_sub[pos]]
        return next(e for e in sub.elements if e.pos == pos)

    def restricted_to(self, substation_ids) -> "GridModel":
        """Copy keeping only the listed substations' records (for catalog checks)."""
        keep = tuple(s for s in self.substations if s.id in set(substation_ids))
        return GridModel(self.name, self.base_mva, self.sub_kv, keep, self.lines,
                         self.loads, self.generators, self.digest)


def _build_substations(sub_records, n_line, lines, loads, gens) -> tuple[Substation, ...]:
    slots: dict[int, list[Element]] = {s["id"]: [] for s in sub_records}
    for ln in lines:
        slots[ln.from_sub].append(Element("line_or", ln.id, ln.id))
    for ln in lines:
        slots[ln.to_sub].append(Element("line_ex", ln.id, n_line + ln.id))
    for ld in loads:
        slots[ld.substation].append(Element("load", ld.id, 2 * n_line + ld.id))
    for g in gens:
        slots[g.substation].append(Element("gen", g.id, 2 * n_line + len(loads) + g.id))
    return tuple(Substation(s["id"], s.get("name", f"sub_{s['id']}"), s["level"],
                            tuple(slots[s["id"]])) for s in sub_records)


def grid_from_dict(doc: dict) -> GridModel:
    try:
        version = doc["schema_version"]
    except KeyError:
        raise GridFileError("grid file has no schema_version") from None
    if version != SCHEMA_VERSION:
        raise GridFileError(f"unsupported grid schema_version {version!r}")
    for key in ("substations", "lines", "loads", "generators", "bases"):
        if key not in doc:
            raise GridFileError(f"grid file lacks section {key!r}")
    try:
        subs = sorted(doc["substations"], key=lambda s: s["id"])
        if [s["id"] for s in subs] != list(range(len(subs))):
            raise GridFileError("substation ids must be 0..n-1")
        level_kv = doc["bases"]["kv"]
        sub_kv = tuple(float(level_kv[s["level"]]) for s in subs)
        lines = tuple(Line(i, int(r["from"]), int(r["to"]), float(r["r_pu"]), float(r["x_pu"]),
                           float(r.get("b_pu", 0.0)), float(r["limit_a"]),
                           bool(r.get("transformer", False)))
                      for i, r in enumerate(doc["lines"]))
        loads = tuple(Load(i, int(r["substation"]), float(r.get("p_mw", 0.0)),
                           float(r.get("q_mvar", 0.0)))
                      for i, r in enumerate(doc["loads"]))
        gens = tuple(Generator(i, int(r["substation"]), r["type"], bool(r.get("slack", False)),
                               float(r.get("p_mw", 0.0)), float(r.get("v_pu", 1.0)))
                     for i, r in enumerate(doc["generators"]))
        base_mva = float(doc["bases"]["mva"])
    except (KeyError, TypeError, ValueError) as exc:
        raise GridFileError(f"malformed grid record: {exc}") from exc

    n = len(subs)
    for ln in lines:
        if not (0 <= ln.from_sub < n and 0 <= ln.to_sub < n) or ln.from_sub == ln.to_sub:
            raise GridFileError(f"line {ln.id} has invalid ends")
        if ln.limit_a <= 0 or (ln.r == 0 and ln.x == 0):
            raise GridFileError(f"line {ln.id} has invalid parameters")
    for rec in (*loads, *gens):
        if not 0 <= rec.substation < n:
            raise GridFileError(f"element host substation {rec.substation} out of range")
    for g in gens:
        if g.kind not in GENERATOR_TYPES:
            raise GridFileError(f"generator {g.id} has unknown type {g.kind!r}")
        if g.v_pu <= 0:
            raise GridFileError(f"generator {g.id} voltage setpoint must be positive")
    if sum(g.slack for g in gens) != 1:
        raise GridFileError("exactly one generator must carry the slack flag")

    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return GridModel(
        name=doc.get("name", "grid"),
        base_mva=base_mva,
        sub_kv=sub_kv,
        substations=_build_substations(subs, len(lines), lines, loads, gens),
        lines=lines,
        loads=loads,
        generators=gens,
        digest=hashlib.sha256(canonical).hexdigest()[:16],
    )


def load_grid(path: str | Path | None = None) -> GridModel:
    """Read a grid definition file; ``None`` selects the bundled 14-bus case."""
    if path is None:
        text = resources.files("topocem.data").joinpath("ieee14.json").read_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise GridFileError(f"cannot read grid file {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GridFileError(f"grid file is not valid JSON: {exc}") from exc
    return grid_from_dict(doc)


@dataclass
class Topology:
    assignment: np.ndarray
    line_in_service: np.ndarray

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int8)
        self.line_in_service = np.asarray(self.line_in_service, dtype=bool)
        if self.assignment.ndim != 1 or not np.isin(self.assignment, (1, 2)).all():
            raise ContractViolation("busbar assignment must be a vector of 1s and 2s")

    @classmethod
    def base(cls, grid: GridModel) -> "Topology":
        return cls(np.ones(grid.n_elements, dtype=np.int8), np.ones(grid.n_line, dtype=bool))

    def copy(self) -> "Topology":
        return Topology(self.assignment.copy(), self.line_in_service.copy())

    def __eq__(self, other):
        if not isinstance(other, Topology):
            return NotImplemented
        return (np.array_equal(self.assignment, other.assignment)
                and np.array_equal(self.line_in_service, other.line_in_service))

    def is_base(self) -> bool:
        return bool((self.assignment == 1).all() and self.line_in_service.all())


@dataclass(frozen=True)
class Action:
    """Target configuration for one substation; both fields None means do nothing."""

    substation: int | None = None
    config: tuple[int, ...] | None = None

    @property
    def is_do_nothing(self) -> bool:
        return self.substation is None


DO_NOTHING = Action()


def validate_config(config, substation: Substation) -> bool:
    config = np.asarray(config)
    if config.shape != (substation.n,):
        raise ContractViolation(
            f"config of length {config.size} for substation {substation.id} "
            f"with {substation.n} elements")
    lines = substation.line_mask
    for bus in (1, 2):
        on_bus = config == bus
        count = int(on_bus.sum())
        if count == 0:
            continue
        if count < 2 and substation.n != 1:
            return False
        if not lines[on_bus].any():
            return False
    return True


def apply_action(grid: GridModel, topology: Topology, action: Action,
                 cooldowns: np.ndarray, cooldown_steps: int = COOLDOWN_STEPS):
    """Return ``(new_topology, applied)``.

    ``cooldowns`` is updated in place when a change is made. Re-applying the
    configuration already in place is a no-op and starts no cooldown.
    """
    if action.is_do_nothing:
        return topology, True
    sub = grid.substations[action.substation]
    if not validate_config(action.config, sub):
        raise RejectedAction(f"config {action.config} violates substation {sub.id} constraints")
    if cooldowns[sub.id] > 0:
        return topology, False
    pos = sub.positions
    target = np.asarray(action.config, dtype=np.int8)
    if np.array_equal(topology.assignment[pos], target):
        return topology, True
    new = topology.copy()
    new.assignment[pos] = target
    cooldowns[sub.id] = cooldown_steps
    return new, True


@dataclass
class ElectricalGraph:
    n_nodes: int
    node_substation: np.ndarray
    node_busbar: np.ndarray
    element_node: np.ndarray  # -1 for out-of-service line endpoints
    line_nodes: np.ndarray  # (n_line, 2), -1 when out of service
    load_node: np.ndarray
    gen_node: np.ndarray
    component: np.ndarray
    n_components: int = field(default=0)

    def energized_components(self) -> set[int]:
        hosts = np.concatenate([self.load_node, self.gen_node])
        return {int(c) for c in self.component[hosts]}


def electrical_graph(grid: GridModel, topology: Topology) -> ElectricalGraph:
    n_line = grid.n_line
    active = np.ones(grid.n_elements, dtype=bool)
    active[:n_line] = topology.line_in_service
    active[n_line:2 * n_line] = topology.line_in_service

    occupied = np.zeros((grid.n_sub, 2), dtype=bool)
    subs = grid.element_sub
    busbar_idx = topology.assignment.astype(np.intp) - 1
    occupied[subs[active], busbar_idx[active]] = True

    node_id = np.full((grid.n_sub, 2), -1, dtype=np.intp)
    flat = np.flatnonzero(occupied.ravel())
    node_id.ravel()[flat] = np.arange(flat.size)
    node_sub, node_bus = np.divmod(flat, 2)

    element_node = np.where(active, node_id[subs, busbar_idx], -1)
    line_nodes = np.column_stack([element_node[:n_line], element_node[n_line:2 * n_line]])
    load_node = element_node[2 * n_line:2 * n_line + grid.n_load]
    gen_node = element_node[2 * n_line + grid.n_load:]

    labels, n_comp = _components(flat.size, line_nodes[topology.line_in_service].tolist())
    return ElectricalGraph(flat.size, node_sub, node_bus + 1, element_node, line_nodes,
                           load_node, gen_node, labels, n_comp)


def _components(n: int, edges) -> tuple[np.ndarray, int]:
    # union-find; graphs here have at most a few dozen nodes
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a, b in edges:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    roots = [find(a) for a in range(n)]
    relabel = {r: k for k, r in enumerate(dict.fromkeys(roots))}
    return np.array([relabel[r] for r in roots], dtype=np.intp), len(relabel)


def detect_islands(graph: ElectricalGraph) -> bool:
    """True when loads or generators are spread over more than one component."""
    return len(graph.energized_components()) > 1


def describe_topology(grid: GridModel, topology: Topology) -> str:
    """Short text listing the elements moved to busbar 2, per substation."""
    parts = []
    for sub in grid.substations:
        moved = [e.label() for e in sub.elements if topology.assignment[e.pos] == 2]
        if moved:
            parts.append(f"{' and '.join(moved)} at busbar 2 (substation {sub.id})")
    return "; ".join(parts) if parts else "base topology"
