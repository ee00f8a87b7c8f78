"""Question/answer pairs over event pairs of a narrative."""

from __future__ import annotations

import json
import logging
import random
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

from tempdistill.algebra import (
    Inconsistent,
    RelationGraph,
    RELATIONS,
    TemporalRelation,
    invert,
    propagate,
)
from tempdistill.timeml import AnnotatedDocument, Event, extract_events

log = logging.getLogger(__name__)

TEMPLATE_VERSION = "narrativereason-triple-v1"
QUESTION = "your task is to identify the temporal relation between {a} and {b}: based on the Story: {story}"
ANSWER = "Event {a} is {label} Event {b}"
SPLITS = ("train", "dev", "test")


class SameEvent(ValueError):
    pass


@dataclass(frozen=True)
class QAPair:
    doc_id: str
    source_eid: str
    target_eid: str
    relation: TemporalRelation
    question: str
    answer: str

    @property
    def id(self) -> str:
        return f"{self.doc_id}:{self.source_eid}:{self.target_eid}"

    def to_record(self) -> dict:
        return {
            "id": self.id,
            "doc_id": self.doc_id,
            "question": self.question,
            "answer": self.answer,
            "relation": self.relation.value,
            "source_eid": self.source_eid,
            "target_eid": self.target_eid,
        }


@dataclass
class DatasetManifest:
    n_docs: int
    n_events: int
    n_pairs: int
    splits: dict[str, str]
    seed: int
    template_version: str = TEMPLATE_VERSION
    closure: bool = False
    bidirectional: bool = False
    filter_empty_args: bool = False
    n_skipped_ambiguous: int = 0
    n_skipped_unmapped: int = 0
    skipped_docs: dict[str, str] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def render_pair(story: str, a: Event, b: Event, r: TemporalRelation) -> QAPair:
    if a.eid == b.eid and a.doc_id == b.doc_id:
        raise SameEvent(f"cannot relate event {a.eid} to itself")
    if a.doc_id != b.doc_id:
        raise ValueError(f"events come from different documents: {a.doc_id!r}, {b.doc_id!r}")
    q = QUESTION.format(a=a.triple, b=b.triple, story=story)
    ans = ANSWER.format(a=a.triple, b=b.triple, label=r.value)
    return QAPair(a.doc_id, a.eid, b.eid, r, q, ans)


def assign_splits(doc_ids: Iterable[str], seed: int, fractions=(0.8, 0.1, 0.1)) -> dict[str, str]:
    """Document-level split; shuffles the sorted ids with ``seed``."""
    ids = sorted(set(doc_ids))
    random.Random(seed).shuffle(ids)
    n = len(ids)
    n_train = round(fractions[0] * n)
    n_dev = round(fractions[1] * n)
    out = {}
    for k, d in enumerate(ids):
        out[d] = "train" if k < n_train else "dev" if k < n_train + n_dev else "test"
    return dict(sorted(out.items()))


def _document_pairs(doc: AnnotatedDocument, closure: bool, bidirectional: bool, filter_empty_args: bool, window: int):
    """Pairs for one document plus (n_ambiguous, n_unmapped) counters."""
    events = {e.eid: e for e in extract_events(doc, window)}
    if filter_empty_args:
        events = {k: e for k, e in events.items() if not e.has_empty_args}

    links = []
    n_unmapped = 0
    for t in doc.tlink_records:
        try:
            r = TemporalRelation.parse(t.relation_label)
        except ValueError:
            n_unmapped += 1
            continue
        if t.source_eid == t.target_eid:
            n_unmapped += 1
            continue
        links.append((t.source_eid, t.target_eid, r))

    graph = RelationGraph.from_edges(doc.eids, links)
    # first annotated direction per unordered pair
    direction: dict[frozenset, tuple[str, str]] = {}
    for a, b, _ in links:
        direction.setdefault(frozenset((a, b)), (a, b))

    if closure:
        graph = propagate(graph)
        candidates = [direction.get(frozenset(p), p) for p in graph.pairs()]
    else:
        candidates = list(direction.values())

    triples = []
    n_ambiguous = 0
    for a, b in candidates:
        rs = graph.edge(a, b)
        if len(rs) != 1:
            n_ambiguous += 1
            continue
        (r,) = rs
        triples.append((a, b, r))
        if bidirectional:
            triples.append((b, a, invert(r)))

    story = " ".join(doc.raw_text.split())
    pairs = [
        render_pair(story, events[a], events[b], r)
        for a, b, r in triples
        if a in events and b in events
    ]
    return pairs, n_ambiguous, n_unmapped


def build_dataset(
    corpus: Sequence[AnnotatedDocument],
    closure: bool = False,
    bidirectional: bool = False,
    filter_empty_args: bool = False,
    seed: int = 0,
    window: int = 8,
) -> tuple[list[QAPair], DatasetManifest]:
    """QA pairs for every document, ordered by (doc_id, source, target).

    Without ``closure`` one pair is emitted per annotated TLINK (deduplicated
    per event pair); with it, one per event pair whose closed relation is a
    single label.  ``bidirectional`` adds the converse of each pair.
    Documents whose links are contradictory are skipped and listed in the
    manifest.
    """
    pairs: list[QAPair] = []
    skipped: dict[str, str] = {}
    n_amb = n_unm = n_events = 0
    kept = []
    for doc in sorted(corpus, key=lambda d: d.doc_id):
        try:
            doc_pairs, amb, unm = _document_pairs(doc, closure, bidirectional, filter_empty_args, window)
        except Inconsistent as exc:
            log.warning("skipping %s: inconsistent relations (%s)", doc.doc_id, exc)
            skipped[doc.doc_id] = f"inconsistent: {exc}"
            continue
        kept.append(doc.doc_id)
        n_events += len(doc.event_spans)
        n_amb += amb
        n_unm += unm
        pairs.extend(doc_pairs)
    pairs.sort(key=lambda p: (p.doc_id, p.source_eid, p.target_eid))
    manifest = DatasetManifest(
        n_docs=len(kept),
        n_events=n_events,
        n_pairs=len(pairs),
        splits=assign_splits(kept, seed),
        seed=seed,
        closure=closure,
        bidirectional=bidirectional,
        filter_empty_args=filter_empty_args,
        n_skipped_ambiguous=n_amb,
        n_skipped_unmapped=n_unm,
        skipped_docs=skipped,
    )
    return pairs, manifest


def dumps_dataset(pairs: Iterable[QAPair]) -> str:
    return "".join(json.dumps(p.to_record(), ensure_ascii=False) + "\n" for p in pairs)


@dataclass(frozen=True)
class DatasetStats:
    histogram: dict[str, int]
    per_doc: dict[str, int]

    @property
    def n_pairs(self) -> int:
        return sum(self.histogram.values())


def dataset_stats(pairs: Iterable[QAPair]) -> DatasetStats:
    pairs = list(pairs)
    hist = Counter(p.relation.value for p in pairs)
    per_doc = Counter(p.doc_id for p in pairs)
    return DatasetStats({r.value: hist.get(r.value, 0) for r in RELATIONS}, dict(sorted(per_doc.items())))
