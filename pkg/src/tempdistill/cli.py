"""Command-line entry point: ``tempdistill <subcommand> [flags]``.

Exit codes: 0 success, 1 domain error (JSON record on stderr), 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from tempdistill import algebra, cka, losses, qa, tensorio, timeml

log = logging.getLogger("tempdistill")

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class DomainError(Exception):
    """Raised by a command after it has printed its own findings."""

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --------------------------------------------------------------------------
# gen-corpus


def cmd_gen_corpus(args) -> None:
    from tempdistill.harness.synthetic import gen_synthetic_corpus

    lo, hi = _int_range(args.events)
    docs = gen_synthetic_corpus(args.seed, args.n_docs, (lo, hi), args.vocab_size)
    out = Path(args.out)
    rows = []
    for nar in docs:
        ann = nar.to_annotated()
        if args.links == "clues":
            links = tuple(timeml.TlinkRecord(c.source, c.target, c.relation.value) for c in nar.clues)
        else:
            links = ann.tlink_records
        plain = timeml.AnnotatedDocument(ann.doc_id, ann.raw_text, ann.event_spans)
        tensorio.atomic_write(out / f"{nar.doc_id}.tml", timeml.serialize_document(plain))
        rows += [f"{nar.doc_id}\t{t.source_eid}\t{t.relation_label}\t{t.target_eid}\n" for t in links]
    tensorio.atomic_write(out / timeml.RELATIONS_FILE, "# doc_id\tsource\trelation\ttarget\n" + "".join(rows))
    print(json.dumps({"n_docs": len(docs), "n_links": len(rows), "out": str(out)}))


def _int_range(text: str) -> tuple[int, int]:
    parts = text.split(",")
    try:
        lo, hi = (int(parts[0]), int(parts[-1]))
    except ValueError:
        raise UsageError(f"expected N or LO,HI, got {text!r}") from None
    if len(parts) > 2:
        raise UsageError(f"expected N or LO,HI, got {text!r}")
    return lo, hi


# --------------------------------------------------------------------------
# build-dataset


def cmd_build_dataset(args) -> None:
    corpus = timeml.load_corpus(args.corpus)
    pairs, manifest = qa.build_dataset(
        corpus,
        closure=args.closure,
        bidirectional=args.bidirectional,
        filter_empty_args=args.filter_empty_args,
        seed=args.seed,
        window=args.window,
    )
    out = Path(args.out)
    tensorio.atomic_write(out, qa.dumps_dataset(pairs))
    tensorio.atomic_write(_manifest_path(out), manifest.to_json() + "\n")
    if args.report:
        tensorio.atomic_write(args.report, timeml.validate_corpus(corpus, args.window).to_tsv())
    stats = qa.dataset_stats(pairs)
    print(json.dumps({"n_docs": manifest.n_docs, "n_pairs": manifest.n_pairs, "histogram": stats.histogram}))


def _manifest_path(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


# --------------------------------------------------------------------------
# check-consistency


def cmd_check_consistency(args) -> None:
    rows = timeml.read_relations(args.relations)
    closed_tsv, bad = [], []
    for doc_id in sorted(rows):
        nodes, edges = [], []
        for src, label, tgt in rows[doc_id]:
            for e in (src, tgt):
                if e not in nodes:
                    nodes.append(e)
            try:
                edges.append((src, tgt, algebra.parse_set(label)))
            except ValueError as exc:
                raise DomainError(f"{doc_id}: {exc}", doc_id=doc_id) from None
        try:
            g = algebra.propagate(algebra.RelationGraph.from_edges(nodes, edges))
        except algebra.Inconsistent as exc:
            bad.append({"doc_id": doc_id, "witness": list(exc.witness), "message": str(exc)})
            print(f"{doc_id}\tINCONSISTENT\twitness={','.join(exc.witness)}")
            continue
        print(f"{doc_id}\tconsistent\t{len(nodes)} events")
        closed_tsv.append(g.to_tsv(doc_id))
    if args.out:
        tensorio.atomic_write(args.out, "".join(closed_tsv))
    if bad:
        raise DomainError(f"{len(bad)} inconsistent document(s)", documents=bad)


# --------------------------------------------------------------------------
# kd-eval


def _finite_diff_check(f: Callable[[np.ndarray], float], X: np.ndarray, grad: np.ndarray, rng, n_points: int, h: float = 1e-5):
    """Relative error of ``grad`` against central differences at random entries."""
    X = X.copy()
    idx = [tuple(int(rng.integers(s)) for s in X.shape) for _ in range(n_points)]
    num, ana = [], []
    for i in idx:
        old = X[i]
        X[i] = old + h
        up = f(X)
        X[i] = old - h
        down = f(X)
        X[i] = old
        num.append((up - down) / (2 * h))
        ana.append(grad[i])
    num, ana = np.array(num), np.array(ana)
    scale = max(np.max(np.abs(num)), np.max(np.abs(ana)), 1e-12)
    return float(np.max(np.abs(num - ana)) / scale)


def cmd_kd_eval(args) -> None:
    T = tensorio.read_tensor(args.teacher)
    S = tensorio.read_tensor(args.student)
    rng = np.random.default_rng(args.seed)
    kernel = losses.KernelSpec(args.kernel, args.sigma)
    runners: dict[str, Callable[[np.ndarray], tuple[float, np.ndarray]]] = {
        "pkt": lambda X: losses.pkt_loss(T, X, kernel),
        "nst": lambda X: losses.nst_mmd2(T, X, args.sigma, not args.no_normalize),
    }
    if "crd" in args.losses:
        St, Tt, _ = losses.match_dims(S, T, seed=args.seed)
        n = min(len(St), len(Tt))
        negs = min(args.negatives, len(Tt) - 1)
        M = args.cardinality or len(Tt)

        def run_crd(X):
            Xp, Tp, P = losses.match_dims(X, T, seed=args.seed)
            v, g = losses.crd_loss(losses.CrdBatch(Xp, Tp, tuple((i, i) for i in range(n)), negs, M))
            return v, (g @ P if P is not None else g)

        runners["crd"] = run_crd
    report = []
    for name in args.losses:
        value, grad = runners[name](S)
        err = _finite_diff_check(lambda X: runners[name](X)[0], S, grad, rng, args.grad_points)
        rec = {"loss": name, "value": value, "grad_rel_error": err, "grad_check": "pass" if err < args.tolerance else "fail"}
        report.append(rec)
        print(json.dumps(rec))
    if args.out:
        tensorio.atomic_write(args.out, "".join(json.dumps(r) + "\n" for r in report))
    failed = [r["loss"] for r in report if r["grad_check"] == "fail"]
    if failed:
        raise DomainError("gradient check failed", losses=failed)


# --------------------------------------------------------------------------
# cka


def cmd_cka(args) -> None:
    a, b = tensorio.load_trace(args.trace_a), tensorio.load_trace(args.trace_b)
    m = cka.cross_model_cka(a, b)
    result = {
        "model_a": a.model_id,
        "model_b": b.model_id,
        "cross": m.tolist(),
        "sweep_a": cka.layer_sweep(a),
        "sweep_b": cka.layer_sweep(b),
    }
    tensorio.atomic_write(args.out, json.dumps(result, indent=1) + "\n")
    if args.projection:
        labels = a.extra.get("labels")
        if not labels:
            raise DomainError("trace A has no probe labels for a projection")
        ids = a.extra.get("item_ids")
        tensorio.atomic_write(args.projection, cka.projection_csv(cka.pca2d(a.layers[-1]), labels, ids))
    print(json.dumps({"model_a": a.model_id, "model_b": b.model_id, "shape": list(m.shape)}))


# --------------------------------------------------------------------------
# distill-toy


def cmd_distill_toy(args) -> None:
    from tempdistill.harness import experiment
    from tempdistill.harness.train import DidNotConverge

    matrix = experiment.MatrixConfig.load(args.matrix) if args.matrix else experiment.MatrixConfig()
    if args.steps is not None:
        matrix = matrix.with_steps(args.steps)
    if args.conditions:
        matrix = matrix.with_conditions(tuple(args.conditions.split(",")))
    seeds = tuple(range(args.seed, args.seed + args.seeds))
    try:
        report = experiment.run_experiment_matrix(matrix, seeds, workers=args.workers, teacher_cache=args.teacher_cache)
    except DidNotConverge as exc:
        raise DomainError(f"teacher did not converge: {exc}") from exc
    experiment.write_report(report, args.out)
    print(report.summary_table(with_time=True), end="")


# --------------------------------------------------------------------------
# parser


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging level")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tempdistill", description="Temporal-relation QA datasets, KD losses, CKA and the toy distillation harness.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    g = [_global_flags()]

    p = sub.add_parser("gen-corpus", parents=g, help="write a synthetic TimeML-style corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-docs", type=int, default=50, help="number of documents")
    p.add_argument("--events", default="4,6", help="events per document: N or LO,HI within [2, 7]")
    p.add_argument("--vocab-size", type=int, default=30, help="number of distinct trigger words")
    p.add_argument("--links", choices=["clues", "all"], default="clues", help="annotate only the story's clue links or every pair")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("build-dataset", parents=g, help="build the QA dataset from a corpus directory")
    p.add_argument("--corpus", required=True, help="directory of .tml/.txt documents (optional relations.tsv)")
    p.add_argument("--out", required=True, help="output JSONL file; the manifest goes to FILE.manifest.json")
    p.add_argument("--closure", action="store_true", help="expand links by temporal closure")
    p.add_argument("--bidirectional", action="store_true", help="also emit the converse of every pair")
    p.add_argument("--filter-empty-args", action="store_true", help="drop events with an empty subject or object")
    p.add_argument("--window", type=int, default=8, help="token window for triple extraction")
    p.add_argument("--report", help="optional corpus report TSV")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("check-consistency", parents=g, help="closure-check a relation file; exit 1 on contradiction")
    p.add_argument("--relations", required=True, help="TSV: doc_id, source, relation set (A|B), target")
    p.add_argument("--out", help="optional TSV of the closed graphs")
    p.set_defaults(func=cmd_check_consistency)

    p = sub.add_parser("kd-eval", parents=g, help="evaluate KD losses and check their gradients")
    p.add_argument("--teacher", required=True, help="teacher matrix tensor file")
    p.add_argument("--student", required=True, help="student matrix tensor file")
    p.add_argument("--losses", type=lambda s: s.split(","), default=["pkt", "nst"], help="comma list from pkt,nst,crd")
    p.add_argument("--kernel", choices=["cosine_affinity", "gaussian"], default="cosine_affinity", help="PKT kernel")
    p.add_argument("--sigma", type=float, default=1.0, help="Gaussian bandwidth")
    p.add_argument("--no-normalize", action="store_true", help="skip NST column normalisation")
    p.add_argument("--negatives", type=int, default=4, help="CRD negatives per positive")
    p.add_argument("--cardinality", type=int, help="CRD dataset cardinality (default: teacher rows)")
    p.add_argument("--grad-points", type=int, default=10, help="entries checked by finite differences")
    p.add_argument("--tolerance", type=float, default=1e-4, help="maximum gradient relative error")
    p.add_argument("--out", help="optional JSONL report")
    p.set_defaults(func=cmd_kd_eval)

    p = sub.add_parser("cka", parents=g, help="layer-wise CKA between two trace directories")
    p.add_argument("--trace-a", required=True, help="first trace directory")
    p.add_argument("--trace-b", required=True, help="second trace directory")
    p.add_argument("--out", required=True, help="output JSON with the CKA matrix and sweeps")
    p.add_argument("--projection", help="optional CSV with a 2-D PCA projection of trace A's last layer")
    p.set_defaults(func=cmd_cka)

    p = sub.add_parser("distill-toy", parents=g, help="run the toy teacher/student experiment matrix")
    p.add_argument("--matrix", help="JSON matrix file (default: the built-in six conditions)")
    p.add_argument("--seeds", type=int, default=5, help="number of seeds, starting at --seed")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--steps", type=int, help="override student training steps")
    p.add_argument("--conditions", help="comma list restricting the conditions")
    p.add_argument("--workers", type=int, help="parallel runs (default: TEMPDISTILL_THREADS or CPU count)")
    p.add_argument("--teacher-cache", help="directory for reusing trained teachers across invocations")
    p.set_defaults(func=cmd_distill_toy)
    return parser


DOMAIN_ERRORS = (
    DomainError,
    ValueError,
    OSError,
    algebra.Inconsistent,
)


def _error_record(exc: BaseException, code: int) -> str:
    rec = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    rec.update(getattr(exc, "details", {}) or {})
    witness = getattr(exc, "witness", None)
    if witness:
        rec["witness"] = list(witness)
    return json.dumps(rec)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(_error_record(exc, EXIT_USAGE), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(_error_record(exc, EXIT_USAGE), file=sys.stderr)
        return EXIT_USAGE
    except DOMAIN_ERRORS as exc:
        print(_error_record(exc, EXIT_DOMAIN), file=sys.stderr)
        return EXIT_DOMAIN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
