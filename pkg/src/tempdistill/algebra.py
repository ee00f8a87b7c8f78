"""Five-relation interval algebra over events.

Each event is an interval with ``start < end``.  The five relations are read
as endpoint constraints:

* ``BEFORE``:        end(A) < start(B)
* ``INCLUDES``:      start(A) < start(B) and end(B) < end(A)
* ``SIMULTANEOUS``:  both endpoints equal

``AFTER`` and ``IS_INCLUDED`` are their converses.  A relation graph with a
missing edge means "one of the five", so the universe of models is every
interval configuration in which *every* pair stands in one of these five
relations.
"""

from __future__ import annotations

import enum
import functools
import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping

import numpy as np


class TemporalRelation(enum.Enum):
    BEFORE = "BEFORE"
    AFTER = "AFTER"
    INCLUDES = "INCLUDES"
    IS_INCLUDED = "IS_INCLUDED"
    SIMULTANEOUS = "SIMULTANEOUS"

    @property
    def index(self) -> int:
        return _INDEX[self]

    @classmethod
    def parse(cls, label: str) -> "TemporalRelation":
        """Map a TLINK label to one of the five relations.

        ``DURING`` is read as ``IS_INCLUDED``; anything else unknown raises
        ``ValueError``.
        """
        key = label.strip().upper().replace("-", "_").replace(" ", "_")
        key = _ALIASES.get(key, key)
        try:
            return cls[key]
        except KeyError:
            raise ValueError(f"unknown temporal relation label {label!r}") from None


RELATIONS: tuple[TemporalRelation, ...] = tuple(TemporalRelation)
_INDEX = {r: i for i, r in enumerate(RELATIONS)}
_ALIASES = {"DURING": "IS_INCLUDED", "EQUAL": "SIMULTANEOUS", "IDENTITY": "SIMULTANEOUS"}

RelationSet = frozenset  # frozenset[TemporalRelation]; empty only as the inconsistent marker
ALL: frozenset[TemporalRelation] = frozenset(RELATIONS)

_INVERSE = {
    TemporalRelation.BEFORE: TemporalRelation.AFTER,
    TemporalRelation.AFTER: TemporalRelation.BEFORE,
    TemporalRelation.INCLUDES: TemporalRelation.IS_INCLUDED,
    TemporalRelation.IS_INCLUDED: TemporalRelation.INCLUDES,
    TemporalRelation.SIMULTANEOUS: TemporalRelation.SIMULTANEOUS,
}


class Inconsistent(ValueError):
    """Raised when a relation graph admits no interval model."""

    def __init__(self, message: str, witness: tuple[str, ...] = ()):
        super().__init__(message)
        self.witness = witness


def invert(r: TemporalRelation) -> TemporalRelation:
    return _INVERSE[r]


def invert_set(rs: Iterable[TemporalRelation]) -> frozenset[TemporalRelation]:
    return frozenset(_INVERSE[r] for r in rs)


def to_mask(rs: Iterable[TemporalRelation]) -> int:
    m = 0
    for r in rs:
        m |= 1 << _INDEX[r]
    return m


def from_mask(mask: int) -> frozenset[TemporalRelation]:
    return frozenset(r for i, r in enumerate(RELATIONS) if mask >> i & 1)


def format_set(rs: Iterable[TemporalRelation]) -> str:
    return "|".join(r.value for r in RELATIONS if r in set(rs))


def parse_set(text: str) -> frozenset[TemporalRelation]:
    return frozenset(TemporalRelation.parse(t) for t in text.split("|") if t.strip())


def relation_of(s1, e1, s2, e2) -> TemporalRelation | None:
    """Relation of interval (s1, e1) to (s2, e2), or None if outside the five."""
    if e1 < s2:
        return TemporalRelation.BEFORE
    if e2 < s1:
        return TemporalRelation.AFTER
    if s1 == s2 and e1 == e2:
        return TemporalRelation.SIMULTANEOUS
    if s1 < s2 and e2 < e1:
        return TemporalRelation.INCLUDES
    if s2 < s1 and e1 < e2:
        return TemporalRelation.IS_INCLUDED
    return None


# --------------------------------------------------------------------------
# Relation graphs


@dataclass(frozen=True)
class RelationGraph:
    """Events plus directed relation-set edges.

    ``edges`` always holds both directions of a pair and never a self-edge.
    A pair with no entry is unconstrained (all five relations).
    """

    nodes: tuple[str, ...]
    edges: Mapping[tuple[str, str], frozenset[TemporalRelation]] = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.nodes)) != len(self.nodes):
            raise ValueError("duplicate node ids")
        known = set(self.nodes)
        for (a, b), rs in self.edges.items():
            if a == b:
                raise ValueError(f"self-edge on {a!r}")
            if a not in known or b not in known:
                raise ValueError(f"edge ({a!r}, {b!r}) references unknown node")
            if self.edges.get((b, a)) != invert_set(rs):
                raise ValueError(f"edge ({a!r}, {b!r}) lacks a matching converse")

    @classmethod
    def from_edges(
        cls,
        nodes: Iterable[str],
        edges: Iterable[tuple[str, str, Iterable[TemporalRelation] | TemporalRelation]] = (),
    ) -> "RelationGraph":
        """Build a graph from one-directional edges.

        Converses are filled in; repeated edges on the same pair are
        intersected.  An empty intersection raises ``Inconsistent``.
        """
        nodes = tuple(nodes)
        out: dict[tuple[str, str], frozenset[TemporalRelation]] = {}
        for a, b, rs in edges:
            rs = frozenset([rs]) if isinstance(rs, TemporalRelation) else frozenset(rs)
            cur = out.get((a, b), ALL) & rs
            if not cur:
                raise Inconsistent(f"contradictory edges on ({a}, {b})", (a, b))
            out[(a, b)] = cur
            out[(b, a)] = invert_set(cur)
        return cls(nodes, out)

    def edge(self, a: str, b: str) -> frozenset[TemporalRelation]:
        return self.edges.get((a, b), ALL)

    def pairs(self) -> Iterator[tuple[str, str]]:
        """Unordered node pairs in node order."""
        return itertools.combinations(self.nodes, 2)

    def complete(self) -> "RelationGraph":
        """Same constraints with every pair stored explicitly."""
        edges = {}
        for a, b in itertools.permutations(self.nodes, 2):
            edges[(a, b)] = self.edge(a, b)
        return RelationGraph(self.nodes, edges)

    def constrained_edges(self) -> list[tuple[str, str, frozenset[TemporalRelation]]]:
        """One direction per non-trivial pair (node order)."""
        return [(a, b, self.edge(a, b)) for a, b in self.pairs() if self.edge(a, b) != ALL]

    def to_tsv(self, doc_id: str) -> str:
        lines = [f"{doc_id}\t{a}\t{format_set(rs)}\t{b}" for a, b, rs in self.constrained_edges()]
        return "".join(line + "\n" for line in lines)


# --------------------------------------------------------------------------
# Composition


def compose(r1: TemporalRelation, r2: TemporalRelation) -> frozenset[TemporalRelation]:
    """Possible relations of A to C given ``r1(A, B)`` and ``r2(B, C)``."""
    from tempdistill._composition import TABLE

    return from_mask(TABLE[r1.index][r2.index])


@functools.lru_cache(maxsize=None)
def _compose_masks(m1: int, m2: int) -> int:
    from tempdistill._composition import TABLE

    out = 0
    for i in range(5):
        if m1 >> i & 1:
            for j in range(5):
                if m2 >> j & 1:
                    out |= TABLE[i][j]
    return out


def compose_sets(s1: Iterable[TemporalRelation], s2: Iterable[TemporalRelation]) -> frozenset[TemporalRelation]:
    return from_mask(_compose_masks(to_mask(s1), to_mask(s2)))


def propagate(g: RelationGraph) -> RelationGraph:
    """Path consistency to a fixed point.

    Returns the complete graph; raises ``Inconsistent`` with a witness
    triple ``(a, b, c)`` when some edge empties.
    """
    nodes = g.nodes
    n = len(nodes)
    full = to_mask(ALL)
    m = [[full] * n for _ in range(n)]
    for i in range(n):
        m[i][i] = 1 << TemporalRelation.SIMULTANEOUS.index
    for (a, b), rs in g.edges.items():
        m[nodes.index(a)][nodes.index(b)] = to_mask(rs)

    queue = deque((i, j) for i in range(n) for j in range(n) if i != j)
    queued = set(queue)
    inv = _inverse_mask
    while queue:
        i, j = queue.popleft()
        queued.discard((i, j))
        for k in range(n):
            if k == i or k == j:
                continue
            # (i, k) through j, and (k, j) through i
            for a, b, via in ((i, k, j), (k, j, i)):
                if a == via or b == via:
                    continue
                new = m[a][b] & _compose_masks(m[a][via], m[via][b])
                if new != m[a][b]:
                    if not new:
                        raise Inconsistent(
                            f"no relation left between {nodes[a]} and {nodes[b]} via {nodes[via]}",
                            (nodes[a], nodes[via], nodes[b]),
                        )
                    m[a][b] = new
                    m[b][a] = inv(new)
                    for p in ((a, b), (b, a)):
                        if p not in queued:
                            queued.add(p)
                            queue.append(p)
    edges = {(nodes[i], nodes[j]): from_mask(m[i][j]) for i in range(n) for j in range(n) if i != j}
    return RelationGraph(nodes, edges)


@functools.lru_cache(maxsize=None)
def _inverse_mask(mask: int) -> int:
    return to_mask(invert_set(from_mask(mask)))


def is_consistent(g: RelationGraph) -> bool:
    try:
        propagate(g)
    except Inconsistent:
        return False
    return True


# --------------------------------------------------------------------------
# Brute-force oracle

ORACLE_MAX_EVENTS = 7


def _insert_interval(ranks: list[int], n_levels: int) -> Iterator[tuple[list[int], int, int, int]]:
    """All ways to add one interval to a weak ordering of endpoints.

    ``ranks`` holds dense endpoint ranks ``0..n_levels-1``.  Yields
    ``(new_ranks, new_levels, start_rank, end_rank)``.
    """
    # slot p: even -> new level in gap p/2, odd -> tie with level (p-1)/2
    n_slots = 2 * n_levels + 1
    for ps in range(n_slots):
        for pe in range(ps, n_slots):
            if pe == ps and ps % 2 == 1:
                continue
            # keys on a 2x slot grid; +1 keeps two new points in one gap ordered
            ks, ke = 2 * ps, 2 * pe + (1 if pe == ps else 0)
            old = [4 * r + 2 for r in ranks]  # level r is slot 2r+1
            vals = sorted(set(old) | {ks, ke})
            dense = {v: i for i, v in enumerate(vals)}
            yield [dense[v] for v in old], len(vals), dense[ks], dense[ke]


def enumerate_models(n: int, allowed=None) -> Iterator[list[int]]:
    """Enumerate weak orderings of ``2n`` endpoints in which each interval has
    ``start < end`` and every pair stands in one of the five relations.

    ``allowed[i][j]`` (a bitmask, optional) prunes pairs ``j < i``.  Yields
    flat rank lists ``[s0, e0, s1, e1, ...]``.
    """

    def rec(ranks: list[int], n_levels: int, k: int):
        if k == n:
            yield ranks
            return
        for new_old, levels, s, e in _insert_interval(ranks, n_levels):
            ok = True
            for j in range(k):
                r = relation_of(s, e, new_old[2 * j], new_old[2 * j + 1])
                if r is None or (allowed is not None and not allowed[k][j] >> r.index & 1):
                    ok = False
                    break
            if ok:
                yield from rec(new_old + [s, e], levels, k + 1)

    yield from rec([], 0, 0)


@functools.lru_cache(maxsize=None)
def _model_table(n: int) -> tuple[list[list[int]], list[list[int]]]:
    """All models on ``n`` intervals.

    Returns ``(ranks, bits)``: ``ranks[m]`` are the endpoint ranks of model
    ``m`` and ``bits[p][r]`` is an int bitset over models in which pair ``p``
    (in ``combinations`` order) stands in relation index ``r``.
    """
    ranks_all = list(enumerate_models(n))
    return ranks_all, _pair_bitsets(ranks_all, n)


def _pair_bitsets(ranks_all: list[list[int]], n: int) -> list[list[int]]:
    pairs = list(itertools.combinations(range(n), 2))
    arr = np.array(ranks_all, dtype=np.int64).reshape(len(ranks_all), 2 * n)
    bits = []
    for i, j in pairs:
        s1, e1, s2, e2 = arr[:, 2 * i], arr[:, 2 * i + 1], arr[:, 2 * j], arr[:, 2 * j + 1]
        masks = (
            e1 < s2,
            e2 < s1,
            (s1 < s2) & (e2 < e1),
            (s2 < s1) & (e1 < e2),
            (s1 == s2) & (e1 == e2),
        )
        bits.append([int.from_bytes(np.packbits(mk, bitorder="little").tobytes(), "little") for mk in masks])
    return bits


_TABLE_MAX = 6  # larger n enumerates with pruning instead of a cached table


@dataclass(frozen=True)
class OracleResult:
    graph: RelationGraph
    # (a, b, relation) -> endpoint assignment {eid: (start, end)} realizing it
    witnesses: dict[tuple[str, str, TemporalRelation], dict[str, tuple[int, int]]]


def oracle_closure(g: RelationGraph, with_witnesses: bool = False):
    """Exact closure by enumerating endpoint orderings.

    Every relation kept on a pair is realized by at least one model that
    satisfies all input constraints.  Returns the complete graph, or an
    ``OracleResult`` carrying integer endpoint witnesses when asked.
    """
    nodes = g.nodes
    n = len(nodes)
    if n > ORACLE_MAX_EVENTS:
        raise ValueError(f"oracle_closure handles at most {ORACLE_MAX_EVENTS} events, got {n}")
    pairs = list(itertools.combinations(range(n), 2))
    allowed = [to_mask(g.edge(nodes[i], nodes[j])) for i, j in pairs]

    if n <= _TABLE_MAX:
        ranks_all, bits = _model_table(n)
        keep = (1 << len(ranks_all)) - 1
        for p, mask in enumerate(allowed):
            if mask != 31:
                sel = 0
                for r in range(5):
                    if mask >> r & 1:
                        sel |= bits[p][r]
                keep &= sel
    else:
        amat = [[0] * n for _ in range(n)]
        for p, (i, j) in enumerate(pairs):
            # enumerate_models checks the later interval against the earlier one
            amat[j][i] = _inverse_mask(allowed[p])
        ranks_all = list(enumerate_models(n, amat))
        bits = _pair_bitsets(ranks_all, n)
        keep = (1 << len(ranks_all)) - 1

    if not keep:
        raise Inconsistent("no interval model satisfies the constraints", nodes)

    edges: dict[tuple[str, str], frozenset[TemporalRelation]] = {}
    witnesses = {}
    for p, (i, j) in enumerate(pairs):
        a, b = nodes[i], nodes[j]
        present = []
        for r in range(5):
            hit = keep & bits[p][r]
            if hit:
                present.append(RELATIONS[r])
                if with_witnesses:
                    ranks = ranks_all[(hit & -hit).bit_length() - 1]
                    witnesses[(a, b, RELATIONS[r])] = {
                        nodes[q]: (ranks[2 * q], ranks[2 * q + 1]) for q in range(n)
                    }
        rs = frozenset(present)
        edges[(a, b)] = rs
        edges[(b, a)] = invert_set(rs)
    out = RelationGraph(nodes, edges)
    if with_witnesses:
        return OracleResult(out, witnesses)
    return out


def composition_table_from_oracle() -> list[list[int]]:
    """5x5 composition table as bitmasks, derived by endpoint enumeration."""
    table = []
    for r1 in RELATIONS:
        row = []
        for r2 in RELATIONS:
            g = RelationGraph.from_edges("ABC", [("A", "B", r1), ("B", "C", r2)])
            row.append(to_mask(oracle_closure(g).edge("A", "C")))
        table.append(row)
    return table
