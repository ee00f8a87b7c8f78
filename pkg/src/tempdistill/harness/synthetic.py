"""Synthetic narratives with exact interval semantics.

Events are placed one at a time relative to a randomly chosen earlier event
(its *anchor*) with a relation drawn from ``relation_weights``.  The story
states those anchor relations as clue sentences, plus extra clues until the
chronological order of every pair follows from path consistency.  No clue
carries a timestamp.
"""

from __future__ import annotations

import bisect
import random
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from tempdistill.algebra import (
    RELATIONS,
    RelationGraph,
    TemporalRelation,
    invert,
    propagate,
    relation_of,
)
from tempdistill.timeml import AnnotatedDocument, EventSpan, TlinkRecord

R = TemporalRelation

TRIGGERS = (
    "arrived left signed fell rose called met won lost opened closed hired fired "
    "sold bought moved voted paid sued warned resigned launched cancelled merged "
    "crashed recovered announced denied admitted collapsed expanded"
).split()

CONNECTIVE = {
    R.BEFORE: "before",
    R.AFTER: "after",
    R.INCLUDES: "around",
    R.IS_INCLUDED: "during",
    R.SIMULTANEOUS: "with",
}
_SUBJECTS = "the board|the minister|the company|the union|the bank|the court|the team|the city".split("|")
_OBJECTS = "the deal|the vote|the report|the market|the plan|the contract|the shares|the case".split("|")

DEFAULT_RELATION_WEIGHTS = {
    R.BEFORE: 0.3,
    R.AFTER: 0.3,
    R.INCLUDES: 0.15,
    R.IS_INCLUDED: 0.15,
    R.SIMULTANEOUS: 0.1,
}


@dataclass(frozen=True)
class NarrativeEvent:
    eid: str
    trigger: str
    start: Fraction
    end: Fraction


@dataclass(frozen=True)
class Clue:
    source: str  # eid
    relation: TemporalRelation
    target: str


@dataclass(frozen=True)
class SyntheticNarrative:
    doc_id: str
    events: tuple[NarrativeEvent, ...]
    clues: tuple[Clue, ...]
    anchor_relations: tuple[TemporalRelation, ...]  # what the generator drew
    mirror_clues: bool = True  # state every clue from both sides

    @property
    def by_eid(self) -> dict[str, NarrativeEvent]:
        return {e.eid: e for e in self.events}

    @property
    def text(self) -> str:
        """The story: one sentence per clue, followed by its converse when mirrored."""
        ev = self.by_eid
        out = []
        for c in self.clues:
            a, b = ev[c.source].trigger, ev[c.target].trigger
            out.append(f"{a} {CONNECTIVE[c.relation]} {b} .")
            if self.mirror_clues:
                out.append(f"{b} {CONNECTIVE[invert(c.relation)]} {a} .")
        return " ".join(out)

    @property
    def tokens(self) -> list[str]:
        return self.text.split()

    def gold_graph(self) -> RelationGraph:
        edges = []
        for i, a in enumerate(self.events):
            for b in self.events[i + 1:]:
                edges.append((a.eid, b.eid, relation_of(a.start, a.end, b.start, b.end)))
        return RelationGraph.from_edges([e.eid for e in self.events], edges)

    def clue_graph(self) -> RelationGraph:
        return RelationGraph.from_edges([e.eid for e in self.events], [(c.source, c.target, c.relation) for c in self.clues])

    def gold_order(self) -> list[str]:
        """Triggers by start time; simultaneous events by trigger spelling order in TRIGGERS."""
        return [e.trigger for e in sorted(self.events, key=lambda e: (e.start, TRIGGERS.index(e.trigger)))]

    def to_annotated(self) -> AnnotatedDocument:
        """Markup form: one introductory sentence per event, then the clues.

        Every pair gets a TLINK with its gold relation.
        """
        rng = random.Random(self.doc_id)
        parts, spans = [], []
        pos = 0
        for e in self.events:
            subj, obj = rng.choice(_SUBJECTS).capitalize(), rng.choice(_OBJECTS)
            head = f"{subj} "
            spans.append(EventSpan(e.eid, "OCCURRENCE", pos + len(head), pos + len(head) + len(e.trigger), e.trigger))
            sent = f"{head}{e.trigger} {obj}. "
            parts.append(sent)
            pos += len(sent)
        raw = "".join(parts) + self.text
        gold = self.gold_graph()
        tlinks = tuple(TlinkRecord(a, b, next(iter(rs)).value) for a, b, rs in gold.constrained_edges())
        return AnnotatedDocument(self.doc_id, raw, tuple(spans), tlinks)


def _endpoints(events: Sequence[NarrativeEvent]) -> list[Fraction]:
    return sorted({p for e in events for p in (e.start, e.end)})


def _place(events: list[NarrativeEvent], anchor: NarrativeEvent, r: TemporalRelation, rng: random.Random):
    """Interval standing in relation ``r`` to ``anchor`` and in one of the five
    relations to every other event (gaps between consecutive endpoints never
    straddle an existing endpoint)."""
    pts = _endpoints(events)

    def below(x):
        k = bisect.bisect_left(pts, x)
        return pts[k - 1] if k > 0 else x - 1

    def above(x):
        k = bisect.bisect_right(pts, x)
        return pts[k] if k < len(pts) else x + 1

    def inside(lo, hi):
        return lo + (hi - lo) / 3, lo + 2 * (hi - lo) / 3

    s, e = anchor.start, anchor.end
    if r is R.SIMULTANEOUS:
        return s, e
    if r is R.INCLUDES:
        return (below(s) + s) / 2, (e + above(e)) / 2
    if r is R.BEFORE:
        return inside(below(s), s)
    if r is R.AFTER:
        return inside(e, above(e))
    # IS_INCLUDED: any gap strictly within the anchor
    lo = bisect.bisect_left(pts, s)
    hi = bisect.bisect_left(pts, e)
    k = rng.randrange(lo, hi)
    return inside(pts[k], pts[k + 1])


def _start_class(r: TemporalRelation) -> int:
    return {R.BEFORE: -1, R.INCLUDES: -1, R.AFTER: 1, R.IS_INCLUDED: 1, R.SIMULTANEOUS: 0}[r]


def order_determined(g: RelationGraph) -> list[tuple[str, str]]:
    """Pairs whose start order is not fixed by the closure of ``g``."""
    closed = propagate(g)
    return [(a, b) for a, b in closed.pairs() if len({_start_class(r) for r in closed.edge(a, b)}) > 1]


def gen_narrative(
    rng: random.Random,
    doc_id: str,
    n_events: int,
    vocab_size: int = len(TRIGGERS),
    relation_weights=None,
    mirror_clues: bool = True,
) -> SyntheticNarrative:
    weights = relation_weights or DEFAULT_RELATION_WEIGHTS
    rels = list(weights)
    probs = [weights[r] for r in rels]
    triggers = rng.sample(TRIGGERS[:vocab_size], n_events)
    events: list[NarrativeEvent] = [NarrativeEvent("e1", triggers[0], Fraction(0), Fraction(1))]
    clues: list[Clue] = []
    drawn = []
    for k in range(1, n_events):
        anchor = rng.choice(events)
        r = rng.choices(rels, probs)[0]
        drawn.append(r)
        s, e = _place(events, anchor, r, rng)
        ev = NarrativeEvent(f"e{k + 1}", triggers[k], s, e)
        assert relation_of(ev.start, ev.end, anchor.start, anchor.end) is r
        events.append(ev)
        clues.append(Clue(ev.eid, r, anchor.eid))

    by_eid = {e.eid: e for e in events}
    eids = [e.eid for e in events]
    while True:
        g = RelationGraph.from_edges(eids, [(c.source, c.target, c.relation) for c in clues])
        open_pairs = order_determined(g)
        if not open_pairs:
            break
        a, b = rng.choice(open_pairs)
        ea, eb = by_eid[a], by_eid[b]
        clues.append(Clue(a, relation_of(ea.start, ea.end, eb.start, eb.end), b))

    clues = [c if rng.random() < 0.5 else Clue(c.target, invert(c.relation), c.source) for c in clues]
    rng.shuffle(clues)
    return SyntheticNarrative(doc_id, tuple(events), tuple(clues), tuple(drawn), mirror_clues)


def gen_synthetic_corpus(
    seed: int,
    n_docs: int,
    events_per_doc: int | tuple[int, int] = (4, 6),
    vocab_size: int = len(TRIGGERS),
    relation_weights=None,
    prefix: str = "doc",
    mirror_clues: bool = True,
) -> list[SyntheticNarrative]:
    """Deterministic corpus; ``events_per_doc`` is a count or inclusive range in [2, 7]."""
    lo, hi = (events_per_doc, events_per_doc) if isinstance(events_per_doc, int) else events_per_doc
    if not 2 <= lo <= hi <= 7:
        raise ValueError("events_per_doc must lie in [2, 7]")
    if hi > vocab_size or vocab_size > len(TRIGGERS):
        raise ValueError(f"vocab_size must be in [{hi}, {len(TRIGGERS)}]")
    rng = random.Random(seed)
    width = len(str(max(n_docs - 1, 0)))
    return [
        gen_narrative(rng, f"{prefix}{k:0{width}d}", rng.randint(lo, hi), vocab_size, relation_weights, mirror_clues)
        for k in range(n_docs)
    ]


def relation_histogram(corpus: Sequence[SyntheticNarrative]) -> dict[TemporalRelation, float]:
    """Share of each relation among the generator's anchor draws."""
    counts = {r: 0 for r in RELATIONS}
    for doc in corpus:
        for r in doc.anchor_relations:
            counts[r] += 1
    total = sum(counts.values()) or 1
    return {r: c / total for r, c in counts.items()}
