"""The six-condition teacher/student matrix, its report and sign tests."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy.stats import binomtest

from tempdistill import cka, losses
from tempdistill.harness.model import STUDENT_SPEC, TEACHER_SPEC, ModelSpec, ToyModel
from tempdistill.harness.train import (
    CorpusConfig,
    ToyData,
    TrainConfig,
    eval_ordering,
    eval_prefix,
    layer_trace,
    probe_examples,
    train_student,
    train_teacher,
)
from tempdistill.tensorio import atomic_write, save_trace

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Condition:
    task: str  # student task, see train.STUDENT_TASKS
    teacher: str | None  # "temporal" | "timeline" | "untrained" | None


CONDITIONS: dict[str, Condition] = {
    "kd_temporal": Condition("ordering+kd", "temporal"),
    "kd_timeline": Condition("ordering+kd", "timeline"),
    "kd_origin": Condition("ordering+kd", "untrained"),
    "single_task": Condition("ordering", None),
    "temporal_only": Condition("temporal_only", None),
    "joint": Condition("joint", None),
}

# (treatment, control) pairs for the one-sided sign tests
COMPARISONS = (("kd_temporal", "single_task"), ("kd_temporal", "kd_origin"))

DEFAULT_TEACHER = TrainConfig(seed=0, steps=3000, batch_size=32, lr=1e-3, lr_schedule="cosine", kd_methods=())


def _train_config(d: dict) -> TrainConfig:
    d = dict(d)
    if "weights" in d:
        d["weights"] = losses.LossWeights(**d["weights"])
    if "pkt_kernel" in d:
        d["pkt_kernel"] = losses.KernelSpec(**d["pkt_kernel"])
    if "kd_methods" in d:
        d["kd_methods"] = tuple(d["kd_methods"])
    return TrainConfig(**d)


def _spec(d: dict) -> ModelSpec:
    return ModelSpec(**d)


@dataclass(frozen=True)
class MatrixConfig:
    conditions: tuple[str, ...] = tuple(CONDITIONS)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    student: TrainConfig = field(default_factory=TrainConfig)
    teacher: TrainConfig = DEFAULT_TEACHER
    student_spec: ModelSpec = STUDENT_SPEC
    teacher_spec: ModelSpec = TEACHER_SPEC
    decoding: str = "constrained"
    n_probe_docs: int = 24

    def __post_init__(self):
        unknown = [c for c in self.conditions if c not in CONDITIONS]
        if unknown:
            raise ValueError(f"unknown conditions {unknown}; choose from {list(CONDITIONS)}")
        if not self.conditions:
            raise ValueError("no conditions")
        if self.decoding not in ("constrained", "free"):
            raise ValueError("decoding must be 'constrained' or 'free'")

    @classmethod
    def from_dict(cls, d: dict) -> "MatrixConfig":
        d = dict(d)
        kw = {}
        if "conditions" in d:
            kw["conditions"] = tuple(d.pop("conditions"))
        if "corpus" in d:
            c = dict(d.pop("corpus"))
            if "events_per_doc" in c:
                c["events_per_doc"] = tuple(c["events_per_doc"])
            kw["corpus"] = CorpusConfig(**c)
        if "student" in d:
            kw["student"] = _train_config(d.pop("student"))
        if "teacher" in d:
            kw["teacher"] = _train_config({**dataclasses.asdict(DEFAULT_TEACHER), **d.pop("teacher")})
        for key in ("student_spec", "teacher_spec"):
            if key in d:
                kw[key] = _spec(d.pop(key))
        for key in ("decoding", "n_probe_docs"):
            if key in d:
                kw[key] = d.pop(key)
        if d:
            raise ValueError(f"unknown matrix keys {sorted(d)}")
        return cls(**kw)

    @classmethod
    def load(cls, path) -> "MatrixConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    def with_steps(self, steps: int) -> "MatrixConfig":
        return replace(self, student=replace(self.student, steps=steps))

    def with_conditions(self, conditions: Sequence[str]) -> "MatrixConfig":
        return replace(self, conditions=tuple(conditions))

    @property
    def teachers_needed(self) -> list[str]:
        return sorted({CONDITIONS[c].teacher for c in self.conditions} - {None})


# --------------------------------------------------------------------------
# Results


@dataclass
class RunResult:
    condition: str
    seed: int
    accuracy: float
    kendall_tau: float
    final_loss: float
    n_malformed: int
    loss_log: list[float]
    trace: cka.LayerTrace
    teacher_cka: list[list[float]] | None = None  # student layers x teacher layers
    seconds: float = 0.0

    def row(self) -> dict:
        return {
            "condition": self.condition,
            "seed": self.seed,
            "accuracy": self.accuracy,
            "kendall_tau": self.kendall_tau,
            "final_loss": self.final_loss,
        }


@dataclass
class SignTest:
    treatment: str
    control: str
    wins: int
    losses: int
    ties: int
    p_value: float
    mean_diff: float

    @property
    def passed(self) -> bool:
        return self.mean_diff > 0 and self.p_value < 0.1


def sign_test(a: Sequence[float], b: Sequence[float], treatment: str = "a", control: str = "b") -> SignTest:
    """Paired one-sided sign test of ``a > b``; ties are dropped."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape or a.size == 0:
        raise ValueError("sign test needs two equal-length, non-empty samples")
    wins, lost = int(np.sum(a > b)), int(np.sum(a < b))
    n = wins + lost
    p = binomtest(wins, n, 0.5, alternative="greater").pvalue if n else 1.0
    return SignTest(treatment, control, wins, lost, a.size - n, float(p), float(np.mean(a - b)))


@dataclass
class MatrixReport:
    config: MatrixConfig
    seeds: tuple[int, ...]
    runs: list[RunResult]
    teachers: dict[str, dict]
    teacher_traces: dict[str, cka.LayerTrace]
    seconds: float = 0.0

    def by_condition(self, condition: str) -> list[RunResult]:
        return sorted((r for r in self.runs if r.condition == condition), key=lambda r: r.seed)

    def taus(self, condition: str) -> list[float]:
        return [r.kendall_tau for r in self.by_condition(condition)]

    def sign_tests(self) -> list[SignTest]:
        out = []
        for t, c in COMPARISONS:
            if t in self.config.conditions and c in self.config.conditions:
                out.append(sign_test(self.taus(t), self.taus(c), t, c))
        return out

    def csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["condition", "seed", "accuracy", "kendall_tau", "final_loss"], lineterminator="\n")
        w.writeheader()
        for r in self.runs:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.row().items()})
        return buf.getvalue()

    def summary_table(self, with_time: bool = False) -> str:
        lines = [f"{'condition':<14} {'n':>2} {'tau mean':>9} {'tau sd':>7} {'exact':>6} {'malformed':>9} {'final loss':>10}"]
        for c in self.config.conditions:
            rs = self.by_condition(c)
            taus = np.array([r.kendall_tau for r in rs])
            lines.append(
                f"{c:<14} {len(rs):>2} {taus.mean():>9.4f} {taus.std():>7.4f} "
                f"{np.mean([r.accuracy for r in rs]):>6.3f} {sum(r.n_malformed for r in rs):>9d} "
                f"{np.mean([r.final_loss for r in rs]):>10.4f}"
            )
        for name, info in sorted(self.teachers.items()):
            shown = {k: (round(v, 4) if isinstance(v, float) else v) for k, v in info.items() if k != "fingerprint"}
            lines.append(f"teacher {name}: {shown}")
        for st in self.sign_tests():
            lines.append(
                f"sign test {st.treatment} > {st.control}: wins {st.wins}, losses {st.losses}, ties {st.ties}, "
                f"p = {st.p_value:.4f}, mean diff = {st.mean_diff:+.4f} -> {'PASS' if st.passed else 'FAIL'}"
            )
        if with_time:
            lines.append(f"wall time {self.seconds:.1f}s")
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# Running


def _workers(requested: int | None) -> int:
    if requested:
        return max(1, requested)
    env = os.environ.get("TEMPDISTILL_THREADS")
    return max(1, int(env)) if env else (os.cpu_count() or 1)


def _config_hash(*parts) -> str:
    blob = json.dumps([dataclasses.asdict(p) if dataclasses.is_dataclass(p) else p for p in parts], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def build_teacher(name: str, matrix: MatrixConfig, data: ToyData, cache_dir: str | Path | None = None) -> tuple[ToyModel, dict]:
    """Train (or load from ``cache_dir``) one teacher; the temporal one is gated."""
    if name == "untrained":
        model = ToyModel(matrix.teacher_spec, "teacher-untrained", seed=matrix.teacher.seed + 1000)
        return model, {"task": "untrained", "fingerprint": model.fingerprint()}
    task = {"temporal": "temporal", "timeline": "ordering"}[name]
    # the student document count does not affect the teacher
    key = _config_hash(name, matrix.teacher, replace(matrix.corpus, n_student_docs=0), matrix.teacher_spec)
    path = Path(cache_dir) / f"teacher-{name}-{key}.pt" if cache_dir else None
    if path is not None and path.exists():
        blob = torch.load(path, weights_only=False)
        model = ToyModel(matrix.teacher_spec, f"teacher-{task}", seed=0)
        model.load_state_dict(blob["state"])
        log.info("loaded cached %s teacher from %s", name, path)
        return model, blob["info"]
    model, info = train_teacher(matrix.teacher, data, task, matrix.teacher_spec)
    info["fingerprint"] = model.fingerprint()
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        torch.save({"state": model.state_dict(), "info": info}, tmp)
        os.replace(tmp, path)
    return model, info


def run_condition(
    condition: str,
    seed: int,
    matrix: MatrixConfig,
    teacher: ToyModel | None,
) -> RunResult:
    """Train and evaluate one (condition, seed) student."""
    torch.set_num_threads(1)
    t0 = time.time()
    cond = CONDITIONS[condition]
    data = ToyData.generate(matrix.corpus, seed)
    before = teacher.fingerprint() if teacher is not None else None
    cfg = replace(matrix.student, seed=seed)
    res = train_student(cfg, data, teacher if cond.teacher else None, cond.task, matrix.student_spec)
    if teacher is not None and teacher.fingerprint() != before:
        raise RuntimeError("teacher parameters changed during distillation")
    prefix = eval_prefix(cond.task)
    ev = eval_ordering(res.model, data.test_docs, prefix, decoding=matrix.decoding)
    probes, labels = probe_examples(data.test_docs[: matrix.n_probe_docs], prefixed=prefix is not None)
    trace = layer_trace(res.model, probes)
    trace.model_id = f"{condition}-seed{seed}"
    trace.extra = {"condition": condition, "seed": seed, "labels": labels}
    teacher_cka = None
    if teacher is not None:
        t_trace = layer_trace(teacher, probe_examples(data.test_docs[: matrix.n_probe_docs])[0])
        teacher_cka = cka.cross_model_cka(trace, t_trace).tolist()
    return RunResult(
        condition, seed, ev.accuracy, ev.kendall_tau, res.final_loss, ev.n_malformed,
        res.loss_log, trace, teacher_cka, time.time() - t0,
    )


def _run_job(args):
    condition, seed, matrix, teacher_state = args
    teacher = None
    if teacher_state is not None:
        teacher = ToyModel(matrix.teacher_spec, teacher_state[0], seed=0)
        teacher.load_state_dict(teacher_state[1])
    return run_condition(condition, seed, matrix, teacher)


def run_experiment_matrix(
    matrix: MatrixConfig,
    seeds: Sequence[int],
    workers: int | None = None,
    teacher_cache: str | Path | None = None,
) -> MatrixReport:
    """Every (condition, seed) run; teachers are trained once and frozen.

    Runs are independent and merged in (condition, seed) order, so the
    report does not depend on ``workers``.
    """
    t0 = time.time()
    seeds = tuple(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    teacher_data = ToyData.generate(matrix.corpus, matrix.corpus.seed)
    teachers, infos, t_traces = {}, {}, {}
    for name in matrix.teachers_needed:
        model, info = build_teacher(name, matrix, teacher_data, teacher_cache)
        teachers[name], infos[name] = model, info
        probes, labels = probe_examples(teacher_data.test_docs[: matrix.n_probe_docs])
        tr = layer_trace(model, probes)
        tr.extra = {"teacher": name, "labels": labels}
        t_traces[name] = tr
    jobs = []
    for c in matrix.conditions:
        tname = CONDITIONS[c].teacher
        state = (teachers[tname].model_id, teachers[tname].state_dict()) if tname else None
        jobs += [(c, s, matrix, state) for s in seeds]
    n = min(_workers(workers), len(jobs))
    if n == 1:
        runs = [_run_job(j) for j in jobs]
    else:
        with ProcessPoolExecutor(n) as pool:
            runs = list(pool.map(_run_job, jobs))
    for name, model in teachers.items():
        if model.fingerprint() != infos[name]["fingerprint"]:
            raise RuntimeError(f"{name} teacher parameters changed")
    return MatrixReport(matrix, seeds, runs, infos, t_traces, time.time() - t0)


def write_report(report: MatrixReport, out: str | Path) -> None:
    """results.csv, summary.txt, report.json, loss logs, CKA sweeps and traces.

    Everything except timing.json is byte-reproducible for a fixed config.
    """
    out = Path(out)
    atomic_write(out / "results.csv", report.csv())
    atomic_write(out / "summary.txt", report.summary_table())
    sweeps = ["condition,seed,layer,cka_to_layer0"]
    for r in report.runs:
        for k, v in enumerate(cka.layer_sweep(r.trace)):
            sweeps.append(f"{r.condition},{r.seed},{k},{v:.10f}")
        save_trace(out / "traces" / f"{r.condition}-seed{r.seed}", r.trace.model_id, r.trace.layers, r.trace.extra)
        atomic_write(out / "losses" / f"{r.condition}-seed{r.seed}.txt", "".join(f"{v:.10g}\n" for v in r.loss_log))
    for name, tr in report.teacher_traces.items():
        save_trace(out / "traces" / f"teacher-{name}", f"teacher-{name}", tr.layers, tr.extra)
    atomic_write(out / "cka_sweeps.csv", "\n".join(sweeps) + "\n")
    doc = {
        "config": report.config.to_dict(),
        "seeds": list(report.seeds),
        "teachers": report.teachers,
        "runs": [
            {**r.row(), "n_malformed": r.n_malformed, "teacher_cka": r.teacher_cka}
            for r in report.runs
        ],
        "sign_tests": [dataclasses.asdict(s) | {"passed": s.passed} for s in report.sign_tests()],
    }
    atomic_write(out / "report.json", json.dumps(doc, indent=1) + "\n")
    timing = {"total": round(report.seconds, 2), "runs": {f"{r.condition}-seed{r.seed}": round(r.seconds, 2) for r in report.runs}}
    atomic_write(out / "timing.json", json.dumps(timing, indent=1) + "\n")
