import json
import re
import time

import numpy as np
import pytest

from tempdistill import cli
from tempdistill.tensorio import save_trace, write_tensor


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def corpus(tmp_path, capsys):
    d = tmp_path / "corpus"
    code, _, _ = run(capsys, "gen-corpus", "--out", str(d), "--n-docs", "12", "--events", "3,5", "--seed", "4")
    assert code == 0
    return d


def test_help_lists_every_flag(capsys):
    parser = cli.build_parser()
    sub = next(a for a in parser._actions if a.choices and "cka" in a.choices)
    assert set(sub.choices) == {"build-dataset", "check-consistency", "kd-eval", "cka", "distill-toy", "gen-corpus"}
    for name, p in sub.choices.items():
        text = p.format_help()
        flags = [s for a in p._actions for s in a.option_strings]
        assert {"--seed", "--log-level", "--out"} <= set(flags), name
        for flag in flags:
            assert re.search(rf"(^|\s|,){re.escape(flag)}\b", text), (name, flag)


def test_usage_errors(capsys):
    code, _, err = run(capsys, "cka", "--trace-a", "x")
    assert code == 2 and json.loads(err.strip().splitlines()[-1])["exit_code"] == 2
    code, _, _ = run(capsys, "build-dataset", "--corpus", "x", "--out", "y", "--bogus")
    assert code == 2
    code, _, _ = run(capsys, "frobnicate")
    assert code == 2


def test_build_dataset_reproducible(corpus, tmp_path, capsys):
    outs = []
    for k in range(2):
        out = tmp_path / f"qa{k}.jsonl"
        code, stdout, _ = run(capsys, "build-dataset", "--corpus", str(corpus), "--out", str(out), "--closure", "--bidirectional", "--seed", "7")
        assert code == 0
        outs.append((out.read_bytes(), (tmp_path / f"qa{k}.jsonl.manifest.json").read_bytes()))
    assert outs[0] == outs[1]
    manifest = json.loads(outs[0][1])
    assert manifest["n_pairs"] == len(outs[0][0].splitlines()) and manifest["seed"] == 7
    rec = json.loads(outs[0][0].splitlines()[0])
    assert set(rec) == {"id", "doc_id", "question", "answer", "relation", "source_eid", "target_eid"}


def test_closure_adds_pairs(corpus, tmp_path, capsys):
    counts = []
    for flags in ([], ["--closure"]):
        out = tmp_path / "qa.jsonl"
        assert run(capsys, "build-dataset", "--corpus", str(corpus), "--out", str(out), *flags)[0] == 0
        counts.append(len(out.read_text().splitlines()))
    assert counts[1] > counts[0]


def test_build_dataset_missing_corpus(tmp_path, capsys):
    code, _, err = run(capsys, "build-dataset", "--corpus", str(tmp_path / "nope"), "--out", str(tmp_path / "o.jsonl"))
    assert code == 1
    assert json.loads(err.strip().splitlines()[-1])["exit_code"] == 1
    assert not (tmp_path / "o.jsonl").exists()


def test_check_consistency(tmp_path, capsys):
    good = tmp_path / "good.tsv"
    good.write_text("d\ta\tBEFORE\tb\nd\tb\tBEFORE|SIMULTANEOUS\tc\n")
    out = tmp_path / "closed.tsv"
    code, stdout, _ = run(capsys, "check-consistency", "--relations", str(good), "--out", str(out))
    assert code == 0 and "consistent" in stdout
    assert "d\ta\tBEFORE\tc" in out.read_text()

    bad = tmp_path / "bad.tsv"
    bad.write_text("x\ta\tBEFORE\tb\nx\tb\tBEFORE\tc\nx\tc\tBEFORE\ta\n")
    code, stdout, err = run(capsys, "check-consistency", "--relations", str(bad))
    assert code == 1
    assert "INCONSISTENT" in stdout and "witness=" in stdout
    rec = json.loads(err.strip().splitlines()[-1])
    witness = rec["documents"][0]["witness"]
    assert len(witness) == 3 and set(witness) == {"a", "b", "c"}


def test_kd_eval(tmp_path, capsys):
    r = np.random.default_rng(0)
    write_tensor(tmp_path / "t.tnsr", r.normal(size=(6, 5)))
    write_tensor(tmp_path / "s.tnsr", r.normal(size=(6, 3)))
    report = tmp_path / "kd.jsonl"
    code, stdout, _ = run(
        capsys, "kd-eval", "--teacher", str(tmp_path / "t.tnsr"), "--student", str(tmp_path / "s.tnsr"),
        "--losses", "pkt,nst,crd", "--out", str(report),
    )
    assert code == 0
    recs = [json.loads(line) for line in report.read_text().splitlines()]
    assert [r["loss"] for r in recs] == ["pkt", "nst", "crd"]
    assert all(r["grad_check"] == "pass" for r in recs)


def test_kd_eval_row_mismatch(tmp_path, capsys):
    write_tensor(tmp_path / "t.tnsr", np.ones((4, 2)))
    write_tensor(tmp_path / "s.tnsr", np.ones((3, 2)))
    code, _, err = run(capsys, "kd-eval", "--teacher", str(tmp_path / "t.tnsr"), "--student", str(tmp_path / "s.tnsr"))
    assert code == 1 and "RowCountMismatch" in err


def test_cka_command(tmp_path, capsys):
    r = np.random.default_rng(1)
    labels = ["temporal", "summarisation"] * 4
    save_trace(tmp_path / "a", "a", [r.normal(size=(8, d)) for d in (3, 4, 5)], {"labels": labels})
    save_trace(tmp_path / "b", "b", [r.normal(size=(8, d)) for d in (2, 6)])
    out, proj = tmp_path / "cka.json", tmp_path / "proj.csv"
    code, _, _ = run(capsys, "cka", "--trace-a", str(tmp_path / "a"), "--trace-b", str(tmp_path / "b"), "--out", str(out), "--projection", str(proj))
    assert code == 0
    res = json.loads(out.read_text())
    assert np.array(res["cross"]).shape == (3, 2)
    assert res["sweep_a"][0] == pytest.approx(1.0)
    assert proj.read_text().splitlines()[0] == "item_id,x,y,task_label"
    code, _, _ = run(capsys, "cka", "--trace-a", str(tmp_path / "b"), "--trace-b", str(tmp_path / "a"), "--out", str(tmp_path / "ba.json"))
    swapped = json.loads((tmp_path / "ba.json").read_text())
    assert np.allclose(np.array(swapped["cross"]).T, res["cross"], atol=1e-12)


def test_full_pipeline_under_ten_minutes(tmp_path, capsys):
    t0 = time.time()
    assert run(capsys, "gen-corpus", "--out", str(tmp_path / "corpus"), "--n-docs", "20", "--seed", "1")[0] == 0
    assert run(capsys, "build-dataset", "--corpus", str(tmp_path / "corpus"), "--out", str(tmp_path / "qa.jsonl"), "--closure")[0] == 0
    code, stdout, _ = run(
        capsys, "distill-toy", "--out", str(tmp_path / "m"), "--seeds", "1", "--steps", "200",
        "--conditions", "single_task,kd_origin", "--workers", "1",
    )
    assert code == 0 and "single_task" in stdout and "kd_origin" in stdout
    header = (tmp_path / "m" / "results.csv").read_text().splitlines()[0]
    assert header == "condition,seed,accuracy,kendall_tau,final_loss"
    traces = tmp_path / "m" / "traces"
    code, _, _ = run(
        capsys, "cka", "--trace-a", str(traces / "single_task-seed0"), "--trace-b", str(traces / "kd_origin-seed0"),
        "--out", str(tmp_path / "cka.json"),
    )
    assert code == 0
    assert json.loads((tmp_path / "cka.json").read_text())["sweep_a"][0] == pytest.approx(1.0)
    assert time.time() - t0 < 600


def test_distill_toy_bad_matrix(tmp_path, capsys):
    bad = tmp_path / "m.json"
    bad.write_text(json.dumps({"conditions": ["nope"]}))
    code, _, err = run(capsys, "distill-toy", "--matrix", str(bad), "--out", str(tmp_path / "o"))
    assert code == 1 and "unknown conditions" in err
