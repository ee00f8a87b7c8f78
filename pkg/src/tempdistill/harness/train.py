"""Teacher and student training, evaluation and the KD bridge."""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from tempdistill import losses
from tempdistill.algebra import RELATIONS
from tempdistill.cka import LayerTrace, sentence_embedding
from tempdistill.harness.model import STUDENT_SPEC, TEACHER_SPEC, ModelSpec, ToyModel, pad_batch
from tempdistill.harness.synthetic import SyntheticNarrative, gen_synthetic_corpus
from tempdistill.harness.tokens import (
    EOS,
    INDEX,
    LABEL_IDS,
    TEMPORAL_PROMPT,
    TIMELINE_PROMPT,
    VOCAB,
    Example,
    ordering_example,
    qa_example,
    qa_examples,
)

log = logging.getLogger(__name__)

KD_METHODS = ("nst", "pkt", "crd")
STUDENT_TASKS = ("ordering", "ordering+kd", "joint", "temporal_only")


class DidNotConverge(RuntimeError):
    pass


class ConfigMismatch(ValueError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    seed: int = 0
    n_teacher_docs: int = 1000
    n_student_docs: int = 2000
    n_test_docs: int = 200
    events_per_doc: tuple[int, int] = (4, 6)
    vocab_size: int = 30


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    steps: int = 2000
    batch_size: int = 8
    lr: float = 1e-3
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    kd_methods: tuple[str, ...] = ("nst", "pkt")
    pkt_kernel: losses.KernelSpec = losses.COSINE
    nst_sigma: float = 1.0
    nst_normalize: bool = True
    crd_negatives: int = 4
    crd_cardinality: int | None = None  # defaults to the training-set size
    teacher_gate: float = 0.20  # required margin over the majority class
    lr_schedule: str = "constant"  # or "cosine" (decay to zero over ``steps``)
    prompt_loss_weight: float = 0.0  # extra next-token loss on the prompt tokens

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.prompt_loss_weight < 0:
            raise ValueError("prompt_loss_weight must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        unknown = set(self.kd_methods) - set(KD_METHODS)
        if unknown:
            raise ValueError(f"unknown KD methods {sorted(unknown)}")

    def effective_weights(self, use_kd: bool) -> losses.LossWeights:
        """Weights with disabled KD terms zeroed."""
        w = self.weights
        on = set(self.kd_methods) if use_kd else set()
        return losses.LossWeights(
            lang=w.lang,
            nst=w.nst if "nst" in on else 0.0,
            pkt=w.pkt if "pkt" in on else 0.0,
            crd=w.crd if "crd" in on else 0.0,
        )


@dataclass
class ToyData:
    teacher_docs: list[SyntheticNarrative]
    student_docs: list[SyntheticNarrative]
    test_docs: list[SyntheticNarrative]

    @classmethod
    def generate(cls, cfg: CorpusConfig, seed: int | None = None) -> "ToyData":
        """Teacher documents come from ``cfg.seed``; student and test
        documents from ``seed`` (default ``cfg.seed``)."""
        seed = cfg.seed if seed is None else seed
        kw = dict(events_per_doc=cfg.events_per_doc, vocab_size=cfg.vocab_size)
        return cls(
            gen_synthetic_corpus(cfg.seed * 3 + 0, cfg.n_teacher_docs, prefix="teach", **kw),
            gen_synthetic_corpus(seed * 3 + 1, cfg.n_student_docs, prefix="stud", **kw),
            gen_synthetic_corpus(seed * 3 + 2, cfg.n_test_docs, prefix="test", **kw),
        )


@dataclass
class TrainResult:
    model: ToyModel
    loss_log: list[float]
    term_log: list[dict[str, float]]

    @property
    def final_loss(self) -> float:
        tail = self.loss_log[-50:]
        return float(np.mean(tail))


# --------------------------------------------------------------------------
# KD terms on one batch


def _kd_terms(
    cfg: TrainConfig,
    weights: losses.LossWeights,
    s_logits: np.ndarray,
    s_hidden: np.ndarray,
    t_logits: np.ndarray,
    t_hidden: np.ndarray,
    s_pooled: np.ndarray,
    t_pooled: np.ndarray,
    lengths: Sequence[int],
    n_train: int,
) -> dict[str, losses.LossTerm]:
    B = len(lengths)
    terms = {}
    if weights.pkt > 0:
        g = np.zeros_like(s_logits)
        v = 0.0
        for b, n in enumerate(lengths):
            vb, gb = losses.pkt_loss(t_logits[b, :n], s_logits[b, :n], cfg.pkt_kernel)
            v += vb / B
            g[b, :n] = gb / B
        terms["pkt"] = losses.LossTerm(v, {"logits": g})
    if weights.nst > 0:
        g = np.zeros_like(s_hidden)
        v = 0.0
        for b, n in enumerate(lengths):
            vb, gb = losses.nst_mmd2(t_hidden[b, :n], s_hidden[b, :n], cfg.nst_sigma, cfg.nst_normalize)
            v += vb / B
            g[b, :n] = gb / B
        terms["nst"] = losses.LossTerm(v, {"hidden": g})
    if weights.crd > 0:
        S, T, P = losses.match_dims(s_pooled, t_pooled, seed=cfg.seed)
        n_neg = min(cfg.crd_negatives, B - 1)
        M = max(cfg.crd_cardinality or n_train, n_neg)
        batch = losses.CrdBatch(S, T, tuple((i, i) for i in range(B)), n_neg, M)
        v, g = losses.crd_loss(batch)
        if P is not None:
            g = g @ P
        terms["crd"] = losses.LossTerm(v, {"pooled": g})
    return terms


def _pool(hidden: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    m = mask.to(hidden.dtype)[..., None]
    return (hidden * m).sum(1) / m.sum(1)


def _targets(batch: Sequence[Example], L: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Next-token targets, answer mask and prompt mask for right-padded inputs."""
    tgt = np.zeros((len(batch), L), dtype=np.int64)
    sup = np.zeros((len(batch), L), dtype=bool)
    prompt = np.zeros((len(batch), L), dtype=bool)
    for b, ex in enumerate(batch):
        ids = ex.ids
        tgt[b, : len(ids) - 1] = ids[1:]
        sup[b, ex.n_prompt - 1 : len(ids) - 1] = True
        prompt[b, : ex.n_prompt - 1] = True
    return tgt, sup, prompt


def train_model(
    model: ToyModel,
    examples: Sequence[Example],
    cfg: TrainConfig,
    teacher: ToyModel | None = None,
    use_kd: bool = False,
) -> TrainResult:
    """Adam on the combined objective; KD terms only when ``use_kd``."""
    weights = cfg.effective_weights(use_kd)
    kd_on = weights.nst > 0 or weights.pkt > 0 or weights.crd > 0
    if kd_on and teacher is None:
        raise ConfigMismatch("KD enabled without a teacher")
    if teacher is not None:
        teacher.eval()
        teacher.requires_grad_(False)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    if cfg.lr_schedule == "cosine":
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * s / cfg.steps)))
    else:
        sched = None
    rng = np.random.default_rng(cfg.seed)
    order: list[int] = []
    loss_log, term_log = [], []
    model.train()
    for step in range(cfg.steps):
        if len(order) < cfg.batch_size:
            order.extend(rng.permutation(len(examples)).tolist())
        idx, order = order[: cfg.batch_size], order[cfg.batch_size :]
        batch = [examples[i] for i in idx]
        ids, mask = pad_batch([ex.ids for ex in batch])
        logits, hidden = model(ids, return_hidden=True)
        last = hidden[-1]
        pooled = _pool(last, mask)
        tgt, sup, prompt = _targets(batch, ids.shape[1])
        np_logits = logits.detach().numpy()
        lang_v, lang_g = losses.language_loss(np_logits, tgt, sup)
        if cfg.prompt_loss_weight > 0:
            pv, pg = losses.language_loss(np_logits, tgt, prompt)
            lang_v, lang_g = lang_v + cfg.prompt_loss_weight * pv, lang_g + cfg.prompt_loss_weight * pg
        terms = {"lang": losses.LossTerm(lang_v, {"logits": lang_g})}
        if kd_on:
            with torch.no_grad():
                t_logits, t_hidden = teacher(ids, return_hidden=True)
                t_pooled = _pool(t_hidden[-1], mask)
            terms.update(
                _kd_terms(
                    cfg, weights,
                    np_logits, last.detach().numpy(),
                    t_logits.numpy(), t_hidden[-1].numpy(),
                    pooled.detach().numpy(), t_pooled.numpy(),
                    [len(ex.ids) for ex in batch], len(examples),
                )
            )
        total = losses.combined_loss(terms, weights)
        outs = {"logits": logits, "hidden": last, "pooled": pooled}
        keys = [k for k in outs if k in total.grads]
        opt.zero_grad()
        torch.autograd.backward([outs[k] for k in keys], [torch.from_numpy(total.grads[k]) for k in keys])
        opt.step()
        if sched is not None:
            sched.step()
        loss_log.append(total.value)
        term_log.append({k: t.value for k, t in terms.items()})
    model.eval()
    return TrainResult(model, loss_log, term_log)


# --------------------------------------------------------------------------
# Evaluation


@torch.no_grad()
def relation_accuracy(model: ToyModel, examples: Sequence[Example], batch_size: int = 256) -> float:
    """Argmax over the five label tokens at the answer position."""
    model.eval()
    correct = 0
    label_ids = torch.tensor(LABEL_IDS)
    for k in range(0, len(examples), batch_size):
        chunk = examples[k : k + batch_size]
        ids, _ = pad_batch([ex.ids[: ex.n_prompt] for ex in chunk])
        logits = model(ids)
        last = torch.tensor([ex.n_prompt - 1 for ex in chunk])
        scores = logits[torch.arange(len(chunk)), last][:, label_ids]
        pred = label_ids[scores.argmax(-1)]
        correct += int((pred == torch.tensor([ex.ids[ex.n_prompt] for ex in chunk])).sum())
    return correct / len(examples) if examples else 0.0


def majority_share(examples: Sequence[Example]) -> float:
    if not examples:
        return 0.0
    counts = np.bincount([ex.ids[ex.n_prompt] for ex in examples])
    return float(counts.max() / len(examples))


def balanced_qa(docs: Sequence[SyntheticNarrative], per_label: int, seed: int = 0) -> list[Example]:
    """Equal number of QA examples per relation label."""
    by_label: dict[int, list[Example]] = {i: [] for i in LABEL_IDS}
    for d in docs:
        for ex in qa_examples(d):
            by_label[ex.ids[ex.n_prompt]].append(ex)
    rng = random.Random(seed)
    out = []
    for lab in LABEL_IDS:
        pool = by_label[lab]
        if len(pool) < per_label:
            raise ValueError(f"only {len(pool)} examples for {VOCAB[lab]}")
        out.extend(rng.sample(pool, per_label))
    return out


def kendall_tau(pred: Sequence[str], gold: Sequence[str], ties: set[frozenset] = frozenset()) -> float:
    """Rank agreement over event pairs; pairs tied in gold are skipped.

    ``ties`` holds unordered pairs of items that are simultaneous.  Returns
    1.0 when no untied pair exists.
    """
    pos = {x: i for i, x in enumerate(pred)}
    conc = disc = 0
    for i in range(len(gold)):
        for j in range(i + 1, len(gold)):
            a, b = gold[i], gold[j]
            if frozenset((a, b)) in ties:
                continue
            if pos[a] < pos[b]:
                conc += 1
            else:
                disc += 1
    if conc + disc == 0:
        return 1.0
    return (conc - disc) / (conc + disc)


@dataclass
class OrderingResult:
    accuracy: float
    kendall_tau: float
    n_malformed: int
    taus: list[float]


DECODING = ("constrained", "free")


@torch.no_grad()
def generate_orders(
    model: ToyModel,
    docs: Sequence[SyntheticNarrative],
    prefix: str | None = None,
    decoding: str = "constrained",
) -> list[list[str]]:
    """Greedy decoding after the ordering prompt.

    ``free`` takes the argmax over the whole vocabulary and stops at
    ``<eos>`` or after ``k + 1`` tokens.  ``constrained`` takes the argmax
    over the story's triggers not yet emitted, so the output is always a
    permutation of the events.
    """
    if decoding not in DECODING:
        raise ValueError(f"decoding must be one of {DECODING}")
    model.eval()
    seqs = []
    for d in docs:
        ex = ordering_example(d, prefix)
        seqs.append(list(ex.ids[: ex.n_prompt]))
    remaining = [[INDEX[e.trigger] for e in d.events] for d in docs]
    limit = [len(d.events) + (1 if decoding == "free" else 0) for d in docs]
    outs: list[list[int]] = [[] for _ in docs]
    done = [False] * len(docs)
    eos = INDEX[EOS]
    while not all(done):
        ids, _ = pad_batch(seqs)
        logits = model(ids)
        for b, s in enumerate(seqs):
            if done[b]:
                continue
            row = logits[b, len(s) - 1]
            if decoding == "constrained":
                nxt = max(remaining[b], key=lambda i: (float(row[i]), -i))
                remaining[b].remove(nxt)
            else:
                nxt = int(row.argmax())
                if nxt == eos:
                    done[b] = True
                    continue
            outs[b].append(nxt)
            s.append(nxt)
            if len(outs[b]) >= limit[b]:
                done[b] = True
    return [[VOCAB[i] for i in o] for o in outs]


def eval_ordering(
    model: ToyModel,
    docs: Sequence[SyntheticNarrative],
    prefix: str | None = None,
    decoding: str = "constrained",
) -> OrderingResult:
    """Exact-order accuracy and mean Kendall tau; malformed outputs score -1."""
    preds = generate_orders(model, docs, prefix, decoding)
    taus, exact, bad = [], 0, 0
    for doc, pred in zip(docs, preds):
        gold = doc.gold_order()
        if sorted(pred) != sorted(gold):
            taus.append(-1.0)
            bad += 1
            continue
        ties = {frozenset((a.trigger, b.trigger)) for a in doc.events for b in doc.events if a is not b and a.start == b.start}
        taus.append(kendall_tau(pred, gold, ties))
        exact += pred == gold
    return OrderingResult(exact / len(docs), float(np.mean(taus)), bad, taus)


# --------------------------------------------------------------------------
# Pipelines


def teacher_examples(data: ToyData, task: str) -> list[Example]:
    if task == "temporal":
        return [ex for d in data.teacher_docs for ex in qa_examples(d)]
    if task == "ordering":
        return [ordering_example(d) for d in data.teacher_docs]
    raise ValueError(f"unknown teacher task {task!r}")


def gate_examples(docs: Sequence[SyntheticNarrative], per_label: int = 100, seed: int = 0) -> list[Example]:
    """Label-balanced held-out QA set, capped by the rarest label."""
    counts = np.bincount([ex.ids[ex.n_prompt] for d in docs for ex in qa_examples(d)], minlength=max(LABEL_IDS) + 1)
    return balanced_qa(docs, min(per_label, int(counts[list(LABEL_IDS)].min())), seed)


def train_teacher(
    cfg: TrainConfig,
    data: ToyData,
    task: str = "temporal",
    spec: ModelSpec = TEACHER_SPEC,
    gate: bool = True,
) -> tuple[ToyModel, dict]:
    """Train a teacher with the language loss only.

    For the temporal task the held-out relation accuracy must beat the
    majority-class share by ``cfg.teacher_gate`` both on the natural label
    mix and on a label-balanced set (majority one fifth); otherwise
    DidNotConverge.
    """
    model = ToyModel(spec, f"teacher-{task}", seed=cfg.seed + 1000)
    res = train_model(model, teacher_examples(data, task), replace(cfg, kd_methods=()))
    info: dict = {"final_loss": res.final_loss, "task": task}
    if task == "temporal":
        natural = [ex for d in data.test_docs for ex in qa_examples(d)]
        balanced = gate_examples(data.test_docs)
        acc, maj = relation_accuracy(model, natural), majority_share(natural)
        bacc, bmaj = relation_accuracy(model, balanced), majority_share(balanced)
        info.update(accuracy=acc, majority=maj, balanced_accuracy=bacc, balanced_majority=bmaj)
        log.info("teacher seed=%d relation accuracy %.3f (majority %.3f), balanced %.3f", cfg.seed, acc, maj, bacc)
        short = [f"{a:.3f} < {m + cfg.teacher_gate:.3f}" for a, m in ((acc, maj), (bacc, bmaj)) if a < m + cfg.teacher_gate]
        if gate and short:
            raise DidNotConverge(f"teacher accuracy below gate: {', '.join(short)}")
    else:
        r = eval_ordering(model, data.test_docs)
        info.update(kendall_tau=r.kendall_tau, accuracy=r.accuracy)
    return model, info


def student_examples(data: ToyData, task: str) -> list[Example]:
    if task in ("ordering", "ordering+kd"):
        return [ordering_example(d) for d in data.student_docs]
    if task == "temporal_only":
        return [ex for d in data.teacher_docs for ex in qa_examples(d)]
    if task == "joint":
        ordering = [ordering_example(d, TIMELINE_PROMPT) for d in data.student_docs]
        temporal = [ex for d in data.teacher_docs for ex in qa_examples(d, TEMPORAL_PROMPT)]
        return ordering + temporal
    raise ValueError(f"unknown student task {task!r}")


def train_student(
    cfg: TrainConfig,
    data: ToyData,
    teacher: ToyModel | None,
    task: str,
    spec: ModelSpec = STUDENT_SPEC,
) -> TrainResult:
    if task not in STUDENT_TASKS:
        raise ValueError(f"unknown student task {task!r}")
    use_kd = task == "ordering+kd"
    if use_kd and teacher is None:
        raise ConfigMismatch("ordering+kd needs a teacher")
    model = ToyModel(spec, f"student-{task}", seed=cfg.seed)
    return train_model(model, student_examples(data, task), cfg, teacher=teacher if use_kd else None, use_kd=use_kd)


def eval_prefix(task: str) -> str | None:
    return TIMELINE_PROMPT if task == "joint" else None


# --------------------------------------------------------------------------
# Layer traces


def probe_examples(docs: Sequence[SyntheticNarrative], prefixed: bool = False) -> tuple[list[Example], list[str]]:
    """One QA and one ordering prompt per document, labelled by task."""
    exs, labels = [], []
    for d in docs:
        a, b = d.events[0], d.events[1]
        (r,) = d.gold_graph().edge(a.eid, b.eid)
        exs.append(qa_example(d, a.trigger, b.trigger, r, TEMPORAL_PROMPT if prefixed else None))
        labels.append("temporal")
        exs.append(ordering_example(d, TIMELINE_PROMPT if prefixed else None))
        labels.append("summarisation")
    return exs, labels


@torch.no_grad()
def layer_trace(model: ToyModel, examples: Sequence[Example]) -> LayerTrace:
    """Mean-pooled prompt states per layer (rows = probe items)."""
    model.eval()
    ids, mask = pad_batch([ex.ids[: ex.n_prompt] for ex in examples])
    _, hidden = model(ids, return_hidden=True)
    layers = []
    for h in hidden:
        h = h.numpy()
        layers.append(np.stack([sentence_embedding(h[b, : ex.n_prompt]) for b, ex in enumerate(examples)]))
    return LayerTrace(model.model_id, layers)
