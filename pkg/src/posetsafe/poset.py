"""Safety posets: strict-priority relations over constraint indices.

A pair ``(i, j)`` in a poset means ``i < j``: constraint ``j`` has strictly
higher priority than ``i``. In a linear extension the lower-priority
constraint is enforced earlier and the higher-priority one later, so the
last constraint of an extension is the one that is guaranteed to hold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

__all__ = [
    "PosetError",
    "CycleDetected",
    "SelfRelation",
    "IndexOutOfRange",
    "SafetyPoset",
    "LinearExtension",
    "validate",
    "transitive_closure",
    "enumerate_linear_extensions",
    "iter_linear_extensions",
    "sample_linear_extension",
    "incomparable",
    "is_maximal",
    "maximal_elements",
    "is_antichain",
    "parse_poset",
    "format_poset",
    "to_dot",
]


class PosetError(ValueError):
    pass


class CycleDetected(PosetError):
    def __init__(self, path: Sequence[int]):
        self.path = tuple(path)
        super().__init__("cycle in priority relation: " + " < ".join(map(str, self.path)))


class SelfRelation(PosetError):
    def __init__(self, index: int):
        self.index = index
        super().__init__(f"constraint {index} is related to itself")


class IndexOutOfRange(PosetError, IndexError):
    pass


Pair = tuple[int, int]


def _check_pairs(n: int, relations: Iterable[Pair]) -> list[Pair]:
    pairs = []
    for i, j in relations:
        i, j = int(i), int(j)
        if not (0 <= i < n and 0 <= j < n):
            raise IndexOutOfRange(f"relation ({i}, {j}) outside 0..{n - 1}")
        if i == j:
            raise SelfRelation(i)
        pairs.append((i, j))
    return pairs


def _find_cycle(n: int, pairs: list[Pair]) -> list[int] | None:
    succ: list[list[int]] = [[] for _ in range(n)]
    for i, j in sorted(set(pairs)):
        succ[i].append(j)
    state = [0] * n  # 0 unvisited, 1 on stack, 2 done
    stack: list[int] = []

    def visit(v: int) -> list[int] | None:
        state[v] = 1
        stack.append(v)
        for w in succ[v]:
            if state[w] == 1:
                return stack[stack.index(w):] + [w]
            if state[w] == 0:
                found = visit(w)
                if found:
                    return found
        stack.pop()
        state[v] = 2
        return None

    for v in range(n):
        if state[v] == 0:
            found = visit(v)
            if found:
                return found
    return None


def validate(n: int, relations: Iterable[Pair]) -> None:
    """Raise if ``relations`` cannot be the strict part of a partial order on ``n`` items.

    Raises :class:`SelfRelation` for a pair ``(i, i)``, :class:`CycleDetected`
    (carrying the offending path) if the closure would contain a cycle, and
    :class:`IndexOutOfRange` for indices outside ``0..n-1``.
    """
    pairs = _check_pairs(n, relations)
    cycle = _find_cycle(n, pairs)
    if cycle is not None:
        raise CycleDetected(cycle)


def _closure(n: int, pairs: Iterable[Pair]) -> frozenset[Pair]:
    reach = np.zeros((n, n), dtype=bool)
    for i, j in pairs:
        reach[i, j] = True
    # Warshall
    for k in range(n):
        reach |= np.outer(reach[:, k], reach[k, :])
    return frozenset((int(i), int(j)) for i, j in zip(*np.nonzero(reach)))


def transitive_closure(poset_or_n, relations: Iterable[Pair] | None = None) -> "SafetyPoset":
    """Return the poset whose relation is the transitive closure of the input.

    Accepts either a :class:`SafetyPoset` (idempotent) or ``(n, relations)``.
    """
    if isinstance(poset_or_n, SafetyPoset):
        return poset_or_n
    return SafetyPoset(int(poset_or_n), relations or ())


@dataclass(frozen=True)
class SafetyPoset:
    """Immutable safety poset. ``relations`` is stored transitively closed."""

    n: int
    relations: frozenset[Pair] = field(default_factory=frozenset)
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.n < 0:
            raise PosetError("n must be non-negative")
        pairs = _check_pairs(self.n, self.relations)
        cycle = _find_cycle(self.n, pairs)
        if cycle is not None:
            raise CycleDetected(cycle)
        object.__setattr__(self, "relations", _closure(self.n, pairs))
        if self.names is not None:
            names = tuple(self.names)
            if len(names) != self.n or len(set(names)) != self.n:
                raise PosetError("names must be unique and one per constraint")
            object.__setattr__(self, "names", names)

    @classmethod
    def chain(cls, n: int, names: Sequence[str] | None = None) -> "SafetyPoset":
        return cls(n, frozenset((i, i + 1) for i in range(n - 1)), names=tuple(names) if names else None)

    @classmethod
    def antichain(cls, n: int, names: Sequence[str] | None = None) -> "SafetyPoset":
        return cls(n, frozenset(), names=tuple(names) if names else None)

    @classmethod
    def from_names(cls, names: Sequence[str], relations: Iterable[tuple[str, str]]) -> "SafetyPoset":
        index = {name: k for k, name in enumerate(names)}
        return cls(len(names), frozenset((index[a], index[b]) for a, b in relations), names=tuple(names))

    def index(self, name: str) -> int:
        if self.names is None or name not in self.names:
            raise KeyError(name)
        return self.names.index(name)

    def label(self, i: int) -> str:
        return self.names[i] if self.names else str(i)

    def precedes(self, i: int, j: int) -> bool:
        """``True`` iff ``i < j`` (``j`` strictly higher priority)."""
        return (i, j) in self.relations

    def reachability(self) -> np.ndarray:
        m = np.zeros((self.n, self.n), dtype=bool)
        for i, j in self.relations:
            m[i, j] = True
        return m

    def hasse_edges(self) -> list[Pair]:
        """Transitive reduction of the relation, sorted."""
        rel = self.relations
        out = []
        for i, j in sorted(rel):
            if not any((i, k) in rel and (k, j) in rel for k in range(self.n)):
                out.append((i, j))
        return out

    def respects(self, order: Sequence[int]) -> bool:
        if sorted(order) != list(range(self.n)):
            return False
        pos = {v: k for k, v in enumerate(order)}
        return all(pos[i] < pos[j] for i, j in self.relations)


@dataclass(frozen=True)
class LinearExtension:
    order: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(int(v) for v in self.order))
        if sorted(self.order) != list(range(len(self.order))):
            raise PosetError(f"{self.order} is not a permutation")

    def __len__(self) -> int:
        return len(self.order)

    def __iter__(self) -> Iterator[int]:
        return iter(self.order)

    def check(self, poset: SafetyPoset) -> None:
        if len(self.order) != poset.n or not poset.respects(self.order):
            raise PosetError(f"{self.order} is not a linear extension of the poset")

    def position(self, i: int) -> int:
        return self.order.index(i)


def iter_linear_extensions(poset: SafetyPoset) -> Iterator[LinearExtension]:
    """Yield every linear extension in lexicographic order."""
    n = poset.n
    preds = [0] * n
    succ: list[list[int]] = [[] for _ in range(n)]
    for i, j in poset.relations:
        preds[j] += 1
        succ[i].append(j)
    placed = [False] * n
    prefix: list[int] = []

    def rec() -> Iterator[LinearExtension]:
        if len(prefix) == n:
            yield LinearExtension(tuple(prefix))
            return
        for v in range(n):
            if placed[v] or preds[v]:
                continue
            placed[v] = True
            prefix.append(v)
            for w in succ[v]:
                preds[w] -= 1
            yield from rec()
            for w in succ[v]:
                preds[w] += 1
            prefix.pop()
            placed[v] = False

    yield from rec()


def enumerate_linear_extensions(poset: SafetyPoset, limit: int = 10_000) -> list[LinearExtension]:
    if limit < 1:
        raise ValueError("limit must be >= 1")
    out = []
    for ext in iter_linear_extensions(poset):
        out.append(ext)
        if len(out) >= limit:
            break
    return out


def sample_linear_extension(poset: SafetyPoset, seed: int | np.random.Generator) -> LinearExtension:
    """Greedy sampler: at each step pick uniformly among the currently minimal elements.

    This is not uniform over extensions; it only guarantees every extension
    has positive probability.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = poset.n
    preds = [0] * n
    succ: list[list[int]] = [[] for _ in range(n)]
    for i, j in poset.relations:
        preds[j] += 1
        succ[i].append(j)
    remaining = set(range(n))
    order = []
    while remaining:
        avail = sorted(v for v in remaining if preds[v] == 0)
        v = avail[int(rng.integers(len(avail)))]
        order.append(v)
        remaining.remove(v)
        for w in succ[v]:
            preds[w] -= 1
    return LinearExtension(tuple(order))


def _check_index(poset: SafetyPoset, *idx: int) -> None:
    for i in idx:
        if not 0 <= i < poset.n:
            raise IndexOutOfRange(f"index {i} outside 0..{poset.n - 1}")


def incomparable(poset: SafetyPoset, i: int, j: int) -> bool:
    _check_index(poset, i, j)
    if i == j:
        raise PosetError("incomparability is defined for distinct constraints")
    return (i, j) not in poset.relations and (j, i) not in poset.relations


def is_maximal(poset: SafetyPoset, i: int) -> bool:
    _check_index(poset, i)
    return not any(a == i for a, _ in poset.relations)


def maximal_elements(poset: SafetyPoset) -> list[int]:
    return [i for i in range(poset.n) if is_maximal(poset, i)]


def is_antichain(poset: SafetyPoset, subset: Iterable[int]) -> bool:
    items = sorted(set(subset))
    _check_index(poset, *items)
    return all(incomparable(poset, a, b) for k, a in enumerate(items) for b in items[k + 1:])


def parse_poset(text: str) -> SafetyPoset:
    """Parse the ``n=<count>`` / ``i < j`` text format.

    Blank lines and ``#`` comments are ignored. An optional ``names=a,b,c``
    line labels the constraints; relations may then use names or indices.
    """
    n = None
    names = None
    rels: list[tuple[str, str]] = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("n="):
            n = int(line[2:])
        elif line.startswith("names="):
            names = [s.strip() for s in line[6:].split(",") if s.strip()]
        elif "<" in line:
            a, b = (s.strip() for s in line.split("<", 1))
            rels.append((a, b))
        else:
            raise PosetError(f"line {lineno}: cannot parse {raw!r}")
    if n is None:
        if names is None:
            raise PosetError("missing n=<count> header")
        n = len(names)
    if names is not None and len(names) != n:
        raise PosetError("names count does not match n")

    def resolve(tok: str) -> int:
        if names is not None and tok in names:
            return names.index(tok)
        try:
            return int(tok)
        except ValueError:
            raise PosetError(f"unknown constraint {tok!r}") from None

    return SafetyPoset(n, frozenset((resolve(a), resolve(b)) for a, b in rels),
                       names=tuple(names) if names else None)


def format_poset(poset: SafetyPoset, closed: bool = False) -> str:
    lines = [f"n={poset.n}"]
    if poset.names:
        lines.append("names=" + ",".join(poset.names))
    edges = sorted(poset.relations) if closed else poset.hasse_edges()
    lines += [f"{i} < {j}" for i, j in edges]
    return "\n".join(lines) + "\n"


def to_dot(poset: SafetyPoset, name: str = "poset") -> str:
    """Hasse diagram in DOT; edges point from lower to higher priority."""
    lines = [f"digraph {name} {{", "  rankdir=BT;"]
    for i in range(poset.n):
        lines.append(f'  n{i} [label="{poset.label(i)}"];')
    for i, j in poset.hasse_edges():
        lines.append(f"  n{i} -> n{j};")
    lines.append("}")
    return "\n".join(lines) + "\n"
