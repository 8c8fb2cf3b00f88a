"""Substation configuration counting, enumeration and the global action catalog."""
from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .grid_topology import DO_NOTHING, Action, GridModel, Substation, validate_config


def count_configs_raw(n: int, n_prime: int) -> int:
    """The closed form alpha(n) - beta(n) - gamma(n') exactly as published."""
    alpha = 2 ** (n - 1)
    beta = n - (1 if n == 2 else 0)
    gamma = 2 ** n_prime - 1 - n_prime
    return alpha - beta - gamma


def count_configs(n: int, n_prime: int) -> int:
    """Number of valid two-busbar configurations of a substation, identity included.

    The published closed form counts one configuration twice when the
    substation hosts a single line and at least two other elements: isolating
    that line is both a one-element split and a line-free busbar. The extra
    term adds it back, so the count matches exhaustive enumeration everywhere.
    """
    if n < 2 or not 0 <= n_prime < n:
        raise DomainError(f"count_configs needs n >= 2 and 0 <= n' < n, got ({n}, {n_prime})")
    overlap = 1 if (n - n_prime == 1 and n_prime >= 2) else 0
    return count_configs_raw(n, n_prime) + overlap


@dataclass(frozen=True)
class SubstationActionSet:
    substation: int
    n: int
    n_prime: int
    configs: tuple[tuple[int, ...], ...]

    @property
    def tau(self) -> int:
        return len(self.configs)


def enumerate_configs(substation: Substation) -> SubstationActionSet:
    seen = set()
    for bits in itertools.product((1, 2), repeat=substation.n):
        if bits[0] == 2:
            bits = tuple(3 - b for b in bits)
        if bits not in seen and validate_config(bits, substation):
            seen.add(bits)
    return SubstationActionSet(substation.id, substation.n, substation.n_prime,
                               tuple(sorted(seen)))


@dataclass(frozen=True)
class ActionCatalog:
    """Ordered action list; the index is the policy output index.

    Entries follow substation order, configs in lexicographic order (identity
    first). Index 0 is the global do-nothing: the first substation's identity
    when that substation has a single configuration, otherwise an extra entry.
    """

    actions: tuple[Action, ...]
    entries: tuple[tuple[int | None, int], ...]
    sets: tuple[SubstationActionSet, ...]

    def __len__(self) -> int:
        return len(self.actions)

    def __getitem__(self, idx: int) -> Action:
        return self.actions[idx]

    @property
    def n_identity(self) -> int:
        return sum(1 for e in self.entries if e[0] is not None and e[1] == 0)

    def counts(self) -> tuple[int, ...]:
        return tuple(s.tau for s in self.sets)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["substation", "n", "n_prime", "tau"])
        for s in self.sets:
            w.writerow([s.substation, s.n, s.n_prime, s.tau])
        return buf.getvalue()


def build_action_catalog(grid: GridModel) -> ActionCatalog:
    sets = tuple(enumerate_configs(sub) for sub in grid.substations)
    actions: list[Action] = []
    entries: list[tuple[int | None, int]] = []
    if sets and sets[0].tau != 1:
        actions.append(DO_NOTHING)
        entries.append((None, 0))
    for s in sets:
        for k, cfg in enumerate(s.configs):
            actions.append(Action(s.substation, cfg))
            entries.append((s.substation, k))
    if entries and entries[0][0] is not None:
        actions[0] = DO_NOTHING
    return ActionCatalog(tuple(actions), tuple(entries), sets)


def config_for(grid: GridModel, substation: int, busbar2: set[int]) -> tuple[int, ...]:
    """Canonical config placing the listed topology positions on busbar 2."""
    sub = grid.substations[substation]
    cfg = np.array([2 if e.pos in busbar2 else 1 for e in sub.elements])
    if cfg[0] == 2:
        cfg = 3 - cfg
    return tuple(int(c) for c in cfg)
