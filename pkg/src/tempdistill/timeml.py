"""TimeML/NarrativeTime-style documents: inline EVENT tags plus TLINKs.

Input grammar (a small XML-ish subset):

* ``<EVENT eid="e7" class="OCCURRENCE">fallen</EVENT>`` marks a trigger.
  ``eid`` is required, ``class`` optional.  Whitespace just inside the tag is
  kept in the text but left out of the span.
* ``<TLINK eventID="e1" relatedToEvent="e2" relType="BEFORE"/>`` adds a link.
* Every other tag is dropped; entities (``&amp;`` etc.) are decoded.

Relations may also come from a tab-separated sidecar with columns
``doc_id  source_eid  relation  target_eid``.
"""

from __future__ import annotations

import html
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

DOC_SUFFIXES = (".tml", ".txt", ".xml")
RELATIONS_FILE = "relations.tsv"

AUXILIARIES = frozenset(
    "am is are was were be been being has have had having do does did will would "
    "shall should can could may might must 's 're 've 'd not n't".split()
)

_TAG = re.compile(r"<\s*(/?)\s*([A-Za-z_][\w.-]*)((?:\s+[\w:.-]+\s*=\s*(?:\"[^\"]*\"|'[^']*'))*)\s*(/?)\s*>")
_ATTR = re.compile(r"([\w:.-]+)\s*=\s*(?:\"([^\"]*)\"|'([^']*)')")
_TOKEN = re.compile(r"\w+(?:['’-]\w+)*|'s|n't|[^\w\s]")


class ParseError(ValueError):
    pass


class MalformedMarkup(ParseError):
    pass


class DuplicateEid(ParseError):
    pass


class DanglingTlink(ParseError):
    pass


@dataclass(frozen=True)
class EventSpan:
    eid: str
    event_class: str
    start: int
    end: int
    trigger_text: str


@dataclass(frozen=True)
class TlinkRecord:
    source_eid: str
    target_eid: str
    relation_label: str


@dataclass(frozen=True)
class AnnotatedDocument:
    doc_id: str
    raw_text: str
    event_spans: tuple[EventSpan, ...] = ()
    tlink_records: tuple[TlinkRecord, ...] = ()

    def __post_init__(self):
        seen = set()
        for sp in self.event_spans:
            if sp.eid in seen:
                raise DuplicateEid(f"{self.doc_id}: eid {sp.eid!r} declared twice")
            seen.add(sp.eid)
            if not (0 <= sp.start <= sp.end <= len(self.raw_text)):
                raise MalformedMarkup(f"{self.doc_id}: span of {sp.eid} out of bounds")
            if self.raw_text[sp.start:sp.end] != sp.trigger_text:
                raise MalformedMarkup(f"{self.doc_id}: span of {sp.eid} does not match its trigger")
        for t in self.tlink_records:
            for eid in (t.source_eid, t.target_eid):
                if eid not in seen:
                    raise DanglingTlink(f"{self.doc_id}: TLINK references unknown eid {eid!r}")

    @property
    def eids(self) -> list[str]:
        return [sp.eid for sp in self.event_spans]


@dataclass(frozen=True)
class EventTriple:
    subject: str
    predicate: str
    object: str

    def __str__(self) -> str:
        return f"<{self.subject}, {self.predicate}, {self.object}>"


@dataclass(frozen=True)
class Event:
    eid: str
    doc_id: str
    trigger: str
    event_class: str
    triple: EventTriple

    @property
    def has_empty_args(self) -> bool:
        return not self.triple.subject or not self.triple.object


# --------------------------------------------------------------------------
# Parsing


def _attrs(text: str) -> dict[str, str]:
    return {m.group(1): html.unescape(m.group(2) if m.group(2) is not None else m.group(3)) for m in _ATTR.finditer(text)}


def _tlink_from_attrs(a: dict[str, str]) -> TlinkRecord:
    src = a.get("eventID") or a.get("eventInstanceID") or a.get("source")
    tgt = a.get("relatedToEvent") or a.get("relatedToEventInstance") or a.get("target")
    rel = a.get("relType") or a.get("relation")
    if not (src and tgt and rel):
        raise MalformedMarkup(f"TLINK missing source, target or relType: {a}")
    return TlinkRecord(src, tgt, rel)


def parse_document(
    text: str,
    doc_id: str = "",
    relations: Iterable[tuple[str, str, str]] = (),
) -> AnnotatedDocument:
    """Parse inline-annotated text.

    ``relations`` holds extra ``(source_eid, label, target_eid)`` rows, e.g.
    from a sidecar file.  Offsets in the result refer to the tag-free text.
    """
    out: list[str] = []
    pos = 0  # length of text emitted so far
    spans: list[EventSpan] = []
    tlinks: list[TlinkRecord] = []
    open_event: tuple[dict[str, str], int] | None = None

    def emit(chunk: str):
        nonlocal pos
        if "<" in chunk or ">" in chunk:
            raise MalformedMarkup(f"{doc_id}: stray angle bracket near {chunk[:40]!r}")
        chunk = html.unescape(chunk)
        out.append(chunk)
        pos += len(chunk)

    i = 0
    for m in _TAG.finditer(text):
        emit(text[i:m.start()])
        i = m.end()
        closing, name, attr_text, selfclose = m.group(1), m.group(2).upper(), m.group(3), m.group(4)
        if name == "EVENT":
            if closing:
                if open_event is None:
                    raise MalformedMarkup(f"{doc_id}: </EVENT> without an open EVENT")
                attrs, start = open_event
                inner = "".join(out)[start:]
                lead = len(inner) - len(inner.lstrip())
                trigger = inner.strip()
                s = start + lead
                spans.append(EventSpan(attrs["eid"], attrs.get("class", ""), s, s + len(trigger), trigger))
                open_event = None
            elif selfclose:
                raise MalformedMarkup(f"{doc_id}: empty EVENT tag")
            else:
                if open_event is not None:
                    raise MalformedMarkup(f"{doc_id}: nested EVENT tags")
                attrs = _attrs(attr_text)
                if "eid" not in attrs:
                    raise MalformedMarkup(f"{doc_id}: EVENT without eid attribute")
                open_event = (attrs, pos)
        elif name == "TLINK" and not closing:
            tlinks.append(_tlink_from_attrs(_attrs(attr_text)))
    emit(text[i:])
    if open_event is not None:
        raise MalformedMarkup(f"{doc_id}: unclosed EVENT {open_event[0]['eid']!r}")

    for src, label, tgt in relations:
        tlinks.append(TlinkRecord(src, tgt, label))
    return AnnotatedDocument(doc_id, "".join(out), tuple(spans), tuple(tlinks))


def serialize_document(doc: AnnotatedDocument) -> str:
    """Markup that parses back to ``doc``; TLINKs are written inline."""
    parts = []
    cur = 0
    for sp in sorted(doc.event_spans, key=lambda s: s.start):
        parts.append(html.escape(doc.raw_text[cur:sp.start], quote=False))
        attrs = f'eid="{html.escape(sp.eid)}"'
        if sp.event_class:
            attrs = f'class="{html.escape(sp.event_class)}" ' + attrs
        parts.append(f"<EVENT {attrs}>{html.escape(sp.trigger_text, quote=False)}</EVENT>")
        cur = sp.end
    parts.append(html.escape(doc.raw_text[cur:], quote=False))
    for t in doc.tlink_records:
        parts.append(
            f'<TLINK eventID="{html.escape(t.source_eid)}" relatedToEvent="{html.escape(t.target_eid)}"'
            f' relType="{html.escape(t.relation_label)}"/>'
        )
    return "".join(parts)


def read_relations(path: str | Path) -> dict[str, list[tuple[str, str, str]]]:
    """Sidecar rows grouped by doc_id as ``(source, label, target)``."""
    rows: dict[str, list[tuple[str, str, str]]] = defaultdict(list)
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 4:
            raise MalformedMarkup(f"{path}:{n}: expected 4 tab-separated columns, got {len(cols)}")
        doc_id, src, rel, tgt = (c.strip() for c in cols)
        rows[doc_id].append((src, rel, tgt))
    return dict(rows)


def load_corpus(directory: str | Path) -> list[AnnotatedDocument]:
    """Parse every document file in ``directory`` (sorted by doc_id)."""
    directory = Path(directory)
    sidecar = directory / RELATIONS_FILE
    rels = read_relations(sidecar) if sidecar.exists() else {}
    files = sorted(p for p in directory.iterdir() if p.suffix in DOC_SUFFIXES)
    docs = [parse_document(p.read_text(encoding="utf-8"), p.stem, rels.get(p.stem, ())) for p in files]
    unknown = set(rels) - {d.doc_id for d in docs}
    if unknown:
        raise DanglingTlink(f"relations for unknown documents: {sorted(unknown)}")
    return docs


# --------------------------------------------------------------------------
# Triple extraction


def tokenize(text: str) -> list[tuple[str, int, int]]:
    """Word and punctuation tokens with character offsets."""
    return [(m.group(), m.start(), m.end()) for m in _TOKEN.finditer(text)]


def _squash(text: str) -> str:
    return " ".join(text.split())


def _is_word(tok: str) -> bool:
    return tok[0].isalnum() or tok[0] == "_"


def extract_events(doc: AnnotatedDocument, window: int = 8) -> list[Event]:
    """One ``Event`` per span with a heuristic (subject, predicate, object).

    The predicate is the trigger plus any auxiliaries directly before it.
    Subject and object are the contiguous runs of word tokens on either side,
    at most ``window`` tokens long, stopping at punctuation, auxiliaries and
    other event triggers.
    """
    toks = tokenize(doc.raw_text)
    trigger_tok = set()
    spans_tok = {}
    for sp in doc.event_spans:
        ks = [k for k, (_, s, e) in enumerate(toks) if s < sp.end and e > sp.start]
        spans_tok[sp.eid] = (ks[0], ks[-1]) if ks else None
        trigger_tok.update(ks)

    def stop(k: int) -> bool:
        tok = toks[k][0]
        return not _is_word(tok) or tok.lower() in AUXILIARIES or k in trigger_tok

    events = []
    for sp in doc.event_spans:
        rng = spans_tok[sp.eid]
        if rng is None:
            events.append(Event(sp.eid, doc.doc_id, sp.trigger_text, sp.event_class, EventTriple("", sp.trigger_text, "")))
            continue
        first, last = rng
        while first > 0 and toks[first - 1][0].lower() in AUXILIARIES and (first - 1) not in trigger_tok:
            first -= 1

        left = first
        while left > 0 and first - left < window and not stop(left - 1):
            left -= 1
        right = last
        while right + 1 < len(toks) and right - last < window and not stop(right + 1):
            right += 1

        subject = _squash(doc.raw_text[toks[left][1]:toks[first - 1][2]]) if left < first else ""
        obj = _squash(doc.raw_text[toks[last + 1][1]:toks[right][2]]) if right > last else ""
        predicate = _squash(doc.raw_text[toks[first][1]:toks[last][2]])
        events.append(Event(sp.eid, doc.doc_id, sp.trigger_text, sp.event_class, EventTriple(subject, predicate, obj)))
    return events


# --------------------------------------------------------------------------
# Corpus report


@dataclass(frozen=True)
class DocumentReport:
    doc_id: str
    n_events: int
    n_tlinks: int
    n_empty_args: int


@dataclass(frozen=True)
class CorpusReport:
    documents: tuple[DocumentReport, ...] = field(default_factory=tuple)

    @property
    def n_docs(self) -> int:
        return len(self.documents)

    @property
    def n_events(self) -> int:
        return sum(d.n_events for d in self.documents)

    @property
    def n_tlinks(self) -> int:
        return sum(d.n_tlinks for d in self.documents)

    @property
    def n_empty_args(self) -> int:
        return sum(d.n_empty_args for d in self.documents)

    def to_tsv(self) -> str:
        lines = ["doc_id\tn_events\tn_tlinks\tn_empty_args"]
        lines += [f"{d.doc_id}\t{d.n_events}\t{d.n_tlinks}\t{d.n_empty_args}" for d in self.documents]
        lines.append(f"TOTAL({self.n_docs})\t{self.n_events}\t{self.n_tlinks}\t{self.n_empty_args}")
        return "\n".join(lines) + "\n"


def validate_corpus(docs: Sequence[AnnotatedDocument], window: int = 8) -> CorpusReport:
    reports = []
    for doc in sorted(docs, key=lambda d: d.doc_id):
        events = extract_events(doc, window)
        reports.append(
            DocumentReport(doc.doc_id, len(doc.event_spans), len(doc.tlink_records), sum(e.has_empty_args for e in events))
        )
    return CorpusReport(tuple(reports))
