"""Closed vocabulary shared by every toy model, and the task encodings.

Temporal QA::

    <bos> [prefix] story Q trig_a trig_b A -> LABEL <eos>

Timeline ordering (the summarisation analog)::

    <bos> [prefix] story ORD -> trig_1 ... trig_k <eos>

Only the tokens after ``->`` carry the language-model loss.
"""

from __future__ import annotations

from dataclasses import dataclass

from tempdistill.algebra import RELATIONS, TemporalRelation
from tempdistill.harness.synthetic import CONNECTIVE, TRIGGERS, SyntheticNarrative

TIMELINE_PROMPT = "This is a timeline summarization task, your task is to summarize the provided timeline"
TEMPORAL_PROMPT = "This is a temporal reasoning task, your task is to answer the question based on the provided text"

PAD, BOS, EOS, Q, A, ORD = "<pad>", "<bos>", "<eos>", "<q>", "<a>", "<ord>"


def prompt_tokens(prompt: str) -> list[str]:
    return prompt.lower().replace(",", " ,").split()


def _build_vocab() -> tuple[str, ...]:
    words = [PAD, BOS, EOS, Q, A, ORD, "."]
    words += [CONNECTIVE[r] for r in RELATIONS]
    words += [r.value for r in RELATIONS]
    words += TRIGGERS
    for w in prompt_tokens(TIMELINE_PROMPT) + prompt_tokens(TEMPORAL_PROMPT):
        if w not in words:
            words.append(w)
    return tuple(words)


VOCAB = _build_vocab()
INDEX = {w: i for i, w in enumerate(VOCAB)}
LABEL_IDS = tuple(INDEX[r.value] for r in RELATIONS)
TRIGGER_IDS = frozenset(INDEX[t] for t in TRIGGERS)


@dataclass(frozen=True)
class Example:
    ids: tuple[int, ...]
    n_prompt: int  # tokens before the first supervised target
    doc_id: str
    task: str  # "temporal" | "ordering"

    @property
    def targets(self) -> tuple[int, ...]:
        return self.ids[self.n_prompt:]


def encode(words: list[str]) -> tuple[int, ...]:
    return tuple(INDEX[w] for w in words)


def _head(prefix: str | None) -> list[str]:
    return [BOS] + (prompt_tokens(prefix) if prefix else [])


def qa_example(doc: SyntheticNarrative, a: str, b: str, r: TemporalRelation, prefix: str | None = None) -> Example:
    prompt = _head(prefix) + doc.tokens + [Q, a, b, A]
    return Example(encode(prompt + [r.value, EOS]), len(prompt), doc.doc_id, "temporal")


def ordering_example(doc: SyntheticNarrative, prefix: str | None = None) -> Example:
    prompt = _head(prefix) + doc.tokens + [ORD]
    return Example(encode(prompt + doc.gold_order() + [EOS]), len(prompt), doc.doc_id, "ordering")


def qa_examples(doc: SyntheticNarrative, prefix: str | None = None) -> list[Example]:
    """Both directions of every event pair, labelled with the gold relation."""
    gold = doc.gold_graph()
    trig = {e.eid: e.trigger for e in doc.events}
    out = []
    for a, b in gold.pairs():
        for x, y in ((a, b), (b, a)):
            (r,) = gold.edge(x, y)
            out.append(qa_example(doc, trig[x], trig[y], r, prefix))
    return out


def decode(ids) -> list[str]:
    return [VOCAB[i] for i in ids]
