import copy
import itertools
import json
import time
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import kendalltau as scipy_tau

from tempdistill import losses
from tempdistill.harness import experiment as E
from tempdistill.harness import train as T
from tempdistill.harness.model import STUDENT_SPEC, TEACHER_SPEC, ModelSpec, ToyModel
from tempdistill.harness.synthetic import DEFAULT_RELATION_WEIGHTS, gen_synthetic_corpus, relation_histogram
from tempdistill.harness.tokens import EOS, INDEX, ORD, VOCAB, ordering_example, qa_examples

TINY_CORPUS = T.CorpusConfig(n_teacher_docs=40, n_student_docs=24, n_test_docs=16, events_per_doc=(3, 4))
TINY_SPEC = ModelSpec(n_layers=1, width=16, n_heads=2)


@pytest.fixture(scope="module")
def data():
    return T.ToyData.generate(TINY_CORPUS)


def tiny_cfg(**kw):
    return replace(T.TrainConfig(steps=6, batch_size=4), **kw)


# ---------------------------------------------------------------- models


def test_parameter_counts():
    for spec in (TEACHER_SPEC, STUDENT_SPEC, TINY_SPEC):
        model = ToyModel(spec)
        assert sum(p.numel() for p in model.parameters()) == spec.n_parameters()
    assert TEACHER_SPEC.n_parameters() > 4 * STUDENT_SPEC.n_parameters()


def test_model_init_is_seeded_and_isolated():
    torch.manual_seed(123)
    before = torch.random.get_rng_state()
    a, b = ToyModel(TINY_SPEC, seed=3), ToyModel(TINY_SPEC, seed=3)
    assert torch.equal(torch.random.get_rng_state(), before)
    assert a.fingerprint() == b.fingerprint() != ToyModel(TINY_SPEC, seed=4).fingerprint()


def test_hidden_layout():
    model = ToyModel(TINY_SPEC)
    logits, hidden = model(torch.zeros((2, 5), dtype=torch.long), return_hidden=True)
    assert logits.shape == (2, 5, len(VOCAB))
    assert len(hidden) == TINY_SPEC.n_layers + 2
    assert all(h.shape == (2, 5, TINY_SPEC.width) for h in hidden)


def test_model_is_causal():
    model = ToyModel(TINY_SPEC)
    ids = torch.tensor([[1, 8, 9, 10, 11]])
    alt = ids.clone()
    alt[0, 4] = 12
    assert torch.equal(model(ids)[0, :4], model(alt)[0, :4])


def test_spec_validation():
    with pytest.raises(ValueError):
        ModelSpec(width=30, n_heads=4)
    with pytest.raises(ValueError):
        ToyModel(ModelSpec(max_len=4))(torch.zeros((1, 5), dtype=torch.long))


# ---------------------------------------------------------------- corpus


def test_generator_histogram_within_two_points():
    hist = relation_histogram(gen_synthetic_corpus(11, 3000, (4, 6)))
    for r, w in DEFAULT_RELATION_WEIGHTS.items():
        assert abs(hist[r] - w) <= 0.02, r


def test_toy_data_split_by_seed():
    a, b = T.ToyData.generate(TINY_CORPUS, 0), T.ToyData.generate(TINY_CORPUS, 1)
    assert [d.text for d in a.teacher_docs] == [d.text for d in b.teacher_docs]
    assert [d.text for d in a.student_docs] != [d.text for d in b.student_docs]
    again = T.ToyData.generate(TINY_CORPUS, 1)
    assert [d.text for d in again.test_docs] == [d.text for d in b.test_docs]


def test_gate_examples_balanced(data):
    exs = T.gate_examples(data.test_docs, per_label=5)
    counts = np.bincount([ex.ids[ex.n_prompt] for ex in exs])
    assert set(counts[counts > 0]) == {5} and T.majority_share(exs) == pytest.approx(0.2)


# ---------------------------------------------------------------- Kendall tau


def test_kendall_tau_examples():
    assert T.kendall_tau(list("abc"), list("abc")) == 1.0
    assert T.kendall_tau(list("cba"), list("abc")) == -1.0
    assert T.kendall_tau(list("bac"), list("abc")) == pytest.approx(1 / 3)
    # a and b simultaneous: their order is not scored
    assert T.kendall_tau(list("bac"), list("abc"), {frozenset("ab")}) == 1.0
    assert T.kendall_tau(list("ab"), list("ab"), {frozenset("ab")}) == 1.0


@given(st.permutations(list("abcdefg")))
def test_kendall_tau_matches_scipy(perm):
    gold = list("abcdefg")
    ref = scipy_tau([perm.index(x) for x in gold], range(len(gold))).statistic
    assert T.kendall_tau(perm, gold) == pytest.approx(ref, abs=1e-12)


@given(st.permutations(list("abcdef")), st.sets(st.sampled_from(list(itertools.combinations("abcdef", 2))), max_size=4))
def test_kendall_tau_matches_pairwise_oracle(perm, tied):
    gold = list("abcdef")
    ties = {frozenset(p) for p in tied}
    score = []
    for i, j in itertools.combinations(range(6), 2):
        if frozenset((gold[i], gold[j])) not in ties:
            score.append(1 if perm.index(gold[i]) < perm.index(gold[j]) else -1)
    expected = float(np.mean(score)) if score else 1.0
    assert T.kendall_tau(perm, gold, ties) == pytest.approx(expected, abs=1e-12)


def test_malformed_outputs_score_minus_one(data, monkeypatch):
    docs = data.test_docs[:3]
    good = docs[0].gold_order()
    fake = [good, good[:-1], good[:-1] + [good[0]]]
    monkeypatch.setattr(T, "generate_orders", lambda *a, **k: fake)
    res = T.eval_ordering(None, docs)
    assert res.n_malformed == 2 and res.taus[1:] == [-1.0, -1.0]
    assert res.taus[0] == 1.0 and res.accuracy == pytest.approx(1 / 3)


def test_constrained_decoding_is_a_permutation(data):
    model = ToyModel(TINY_SPEC, seed=2)
    for pred, doc in zip(T.generate_orders(model, data.test_docs[:6]), data.test_docs[:6]):
        assert sorted(pred) == sorted(doc.gold_order())
    free = T.generate_orders(model, data.test_docs[:6], decoding="free")
    assert all(len(p) <= len(d.events) + 1 for p, d in zip(free, data.test_docs[:6]))
    with pytest.raises(ValueError):
        T.generate_orders(model, data.test_docs[:1], decoding="beam")


def test_ordering_example_layout(data):
    doc = data.test_docs[0]
    ex = ordering_example(doc)
    assert VOCAB[ex.ids[ex.n_prompt - 1]] == ORD
    assert [VOCAB[i] for i in ex.targets] == doc.gold_order() + [EOS]


# ---------------------------------------------------------------- training


def test_untrained_balanced_accuracy_near_chance():
    big = T.ToyData.generate(replace(T.CorpusConfig(), n_test_docs=300))
    exs = T.gate_examples(big.test_docs, per_label=200)
    assert len(exs) == 1000
    accs = [T.relation_accuracy(ToyModel(TEACHER_SPEC, seed=s), exs) for s in range(3)]
    assert all(abs(a - 0.2) <= 0.05 for a in accs), accs


def test_training_is_deterministic(data):
    cfg = tiny_cfg()
    teacher = ToyModel(TINY_SPEC, seed=9)
    a = T.train_student(cfg, data, teacher, "ordering+kd", TINY_SPEC)
    b = T.train_student(cfg, data, teacher, "ordering+kd", TINY_SPEC)
    assert a.model.fingerprint() == b.model.fingerprint()
    assert a.loss_log == b.loss_log


def test_teacher_frozen_during_distillation(data):
    teacher = ToyModel(TINY_SPEC, seed=9)
    before = teacher.fingerprint()
    cfg = tiny_cfg(kd_methods=("nst", "pkt", "crd"), weights=losses.LossWeights(1, 1, 1, 1))
    res = T.train_student(cfg, data, teacher, "ordering+kd", TINY_SPEC)
    assert teacher.fingerprint() == before
    assert {"lang", "nst", "pkt", "crd"} <= set(res.term_log[0])


def test_zero_kd_weights_equal_no_kd_bitwise(data):
    teacher = ToyModel(TINY_SPEC, seed=9)
    off = tiny_cfg(weights=losses.LossWeights(1.0, 0.0, 0.0, 0.0))
    kd = T.train_student(off, data, teacher, "ordering+kd", TINY_SPEC)
    plain = T.train_student(tiny_cfg(), data, None, "ordering", TINY_SPEC)
    assert kd.model.fingerprint() == plain.model.fingerprint()
    assert kd.loss_log == plain.loss_log


def test_self_distillation_terms_vanish(data):
    student = ToyModel(TINY_SPEC, seed=5)
    teacher = copy.deepcopy(student)
    res = T.train_model(student, [ordering_example(d) for d in data.student_docs], tiny_cfg(steps=1), teacher, use_kd=True)
    assert res.term_log[0]["nst"] < 1e-8 and res.term_log[0]["pkt"] < 1e-8


def test_kd_without_teacher_rejected(data):
    with pytest.raises(T.ConfigMismatch):
        T.train_student(tiny_cfg(), data, None, "ordering+kd", TINY_SPEC)
    with pytest.raises(ValueError):
        T.train_student(tiny_cfg(), data, None, "summarise", TINY_SPEC)


def test_smoothed_loss_decreases(data):
    res = T.train_student(T.TrainConfig(steps=150, batch_size=8), data, None, "ordering", TINY_SPEC)
    assert np.mean(res.loss_log[-50:]) < res.loss_log[0]


def test_cosine_schedule_changes_training(data):
    a = T.train_student(tiny_cfg(), data, None, "ordering", TINY_SPEC)
    b = T.train_student(tiny_cfg(lr_schedule="cosine"), data, None, "ordering", TINY_SPEC)
    assert a.loss_log[0] == b.loss_log[0] and a.loss_log != b.loss_log
    with pytest.raises(ValueError):
        tiny_cfg(lr_schedule="step")


def test_prompt_loss_weight_adds_story_term(data):
    a = T.train_student(tiny_cfg(), data, None, "ordering", TINY_SPEC)
    b = T.train_student(tiny_cfg(prompt_loss_weight=0.5), data, None, "ordering", TINY_SPEC)
    assert b.loss_log[0] > a.loss_log[0]
    with pytest.raises(ValueError):
        tiny_cfg(prompt_loss_weight=-1.0)


def test_joint_task_uses_prefix_prompts(data):
    exs = T.student_examples(data, "joint")
    tasks = {ex.task for ex in exs}
    assert tasks == {"temporal", "ordering"}
    timeline = INDEX["timeline"]
    temporal = INDEX["temporal"]
    for ex in exs:
        head = ex.ids[: ex.n_prompt]
        assert (timeline in head) == (ex.task == "ordering")
        assert (temporal in head) == (ex.task == "temporal")
    assert T.eval_prefix("joint") is not None and T.eval_prefix("ordering") is None


def test_untrained_teacher_fails_gate(data):
    with pytest.raises(T.DidNotConverge):
        T.train_teacher(tiny_cfg(steps=1), data, "temporal", TINY_SPEC)
    _, info = T.train_teacher(tiny_cfg(steps=1), data, "temporal", TINY_SPEC, gate=False)
    assert info["balanced_majority"] == pytest.approx(0.2) and 0.2 < info["majority"] < 0.6


def test_layer_trace_rows(data):
    probes, labels = T.probe_examples(data.test_docs[:5])
    trace = T.layer_trace(ToyModel(TINY_SPEC), probes)
    assert len(trace.layers) == TINY_SPEC.n_layers + 2
    assert all(layer.shape == (10, TINY_SPEC.width) for layer in trace.layers)
    assert labels == ["temporal", "summarisation"] * 5


# ---------------------------------------------------------------- matrix


def tiny_matrix(conditions=("single_task", "kd_origin")):
    return E.MatrixConfig(
        conditions=conditions,
        corpus=TINY_CORPUS,
        student=tiny_cfg(),
        teacher=tiny_cfg(teacher_gate=-1.0, kd_methods=()),
        student_spec=TINY_SPEC,
        teacher_spec=ModelSpec(n_layers=1, width=16, n_heads=2),
        n_probe_docs=4,
    )


def test_sign_test_examples():
    st5 = E.sign_test([2, 2, 2, 2, 2], [1, 1, 1, 1, 1])
    assert (st5.wins, st5.losses, st5.ties) == (5, 0, 0)
    assert st5.p_value == pytest.approx(1 / 32) and st5.passed
    st4 = E.sign_test([2, 2, 2, 2, 0], [1, 1, 1, 1, 1])
    assert st4.p_value == pytest.approx(6 / 32) and not st4.passed
    tie = E.sign_test([1, 2, 2, 2, 2], [1, 1, 1, 1, 1])
    assert tie.ties == 1 and tie.p_value == pytest.approx(1 / 16) and tie.passed
    assert not E.sign_test([1, 1], [1, 1]).passed
    with pytest.raises(ValueError):
        E.sign_test([1], [1, 2])


def test_matrix_config_roundtrip(tmp_path):
    m = tiny_matrix(tuple(E.CONDITIONS))
    path = tmp_path / "m.json"
    path.write_text(json.dumps(m.to_dict()))
    assert E.MatrixConfig.load(path) == m
    assert m.teachers_needed == ["temporal", "timeline", "untrained"]
    with pytest.raises(ValueError):
        E.MatrixConfig(conditions=("kd_magic",))
    with pytest.raises(ValueError):
        E.MatrixConfig.from_dict({"stepz": 3})


def test_matrix_echoes_conditions_and_reproduces(tmp_path):
    m = tiny_matrix(("single_task", "kd_origin", "kd_temporal"))
    reports = []
    for k in range(2):
        rep = E.run_experiment_matrix(m, [0, 1], workers=1)
        E.write_report(rep, tmp_path / f"r{k}")
        reports.append(rep)
    assert [(r.condition, r.seed) for r in reports[0].runs] == [(c, s) for c in m.conditions for s in (0, 1)]
    for name in ("results.csv", "summary.txt", "report.json", "cka_sweeps.csv", "traces/kd_temporal-seed1/trace.json"):
        assert (tmp_path / "r0" / name).read_bytes() == (tmp_path / "r1" / name).read_bytes(), name
    doc = json.loads((tmp_path / "r0" / "report.json").read_text())
    assert [s["treatment"] for s in doc["sign_tests"]] == ["kd_temporal", "kd_temporal"]
    assert set(doc["teachers"]) == {"temporal", "untrained"}
    sweeps = (tmp_path / "r0" / "cka_sweeps.csv").read_text().splitlines()
    assert all(float(line.split(",")[3]) == pytest.approx(1.0, abs=1e-10) for line in sweeps[1:] if line.split(",")[2] == "0")


def test_parallel_matches_serial():
    m = tiny_matrix()
    a = E.run_experiment_matrix(m, [0], workers=1)
    b = E.run_experiment_matrix(m, [0], workers=2)
    assert a.csv() == b.csv()


def test_teacher_cache(tmp_path):
    m = tiny_matrix(("kd_temporal",))
    a = E.run_experiment_matrix(m, [0], workers=1, teacher_cache=tmp_path)
    assert len(list(tmp_path.glob("teacher-temporal-*.pt"))) == 1
    b = E.run_experiment_matrix(m, [0], workers=1, teacher_cache=tmp_path)
    assert a.csv() == b.csv() and a.teachers == b.teachers


def test_smoke_matrix_under_five_minutes():
    m = E.MatrixConfig(conditions=("single_task", "kd_origin")).with_steps(200)
    t0 = time.time()
    rep = E.run_experiment_matrix(m, [0], workers=1)
    elapsed = time.time() - t0
    assert elapsed < 300, elapsed
    assert len(rep.runs) == 2 and all(np.isfinite(r.kendall_tau) for r in rep.runs)
