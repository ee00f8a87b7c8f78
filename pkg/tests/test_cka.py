import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

import oracles
from tempdistill import cka
from tempdistill.cka import LayerTrace, ProbeSet, cross_model_cka, layer_sweep, linear_cka, pca2d, projection_csv, sentence_embedding
from tempdistill.tensorio import dumps_tensor, load_trace, loads_tensor, read_tensor, save_trace, write_tensor


def rng(seed=0):
    return np.random.default_rng(seed)


def test_sentence_embedding():
    v = np.array([[1.0, 2.0]])
    assert np.array_equal(sentence_embedding(v), [1.0, 2.0])
    assert np.array_equal(sentence_embedding([[1.0, -2.0], [-1.0, 2.0]]), [0.0, 0.0])
    X = rng().normal(size=(5, 4))
    expected = [sum(X[i, j] for i in range(5)) / 5 for j in range(4)]
    assert np.allclose(sentence_embedding(X), expected, atol=1e-15)
    with pytest.raises(cka.EmptyInput):
        sentence_embedding(np.zeros((0, 3)))


def test_cka_examples():
    r = rng(1)
    X = r.normal(size=(8, 3))
    assert linear_cka(X, X) == pytest.approx(1.0, abs=1e-12)
    Y = r.normal(size=(8, 5))
    assert linear_cka(X, Y) == pytest.approx(oracles.cka(X, Y), abs=1e-12)
    with pytest.raises(cka.RowCountMismatch):
        linear_cka(X, Y[:7])
    with pytest.raises(cka.DegenerateInput):
        linear_cka(np.ones((4, 2)), X[:4])


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 12), st.integers(1, 6), st.integers(1, 6), st.integers(0, 10**6), st.floats(0.1, 10))
def test_cka_properties(n, p, q, seed, c):
    r = rng(seed)
    X, Y = r.normal(size=(n, p)), r.normal(size=(n, q))
    v = linear_cka(X, Y)
    assert -1e-12 <= v <= 1 + 1e-12
    assert v == pytest.approx(linear_cka(Y, X), abs=1e-12)
    Q = ortho_group.rvs(p, random_state=seed) if p > 1 else np.array([[-1.0]])
    assert linear_cka(X @ Q, Y) == pytest.approx(v, abs=1e-8)
    assert linear_cka(c * X, Y) == pytest.approx(v, abs=1e-8)
    assert linear_cka(X + r.normal(size=p), Y) == pytest.approx(v, abs=1e-8)


def test_layer_sweep_and_cross():
    r = rng(2)
    base = r.normal(size=(10, 4))
    same = LayerTrace("m", [base, base, base])
    assert np.allclose(layer_sweep(same), 1.0)
    a = LayerTrace("a", [r.normal(size=(10, d)) for d in (4, 6, 3)])
    b = LayerTrace("b", [r.normal(size=(10, d)) for d in (5, 2)])
    assert layer_sweep(a)[0] == pytest.approx(1.0)
    m = cross_model_cka(a, b)
    assert m.shape == (3, 2)
    assert np.allclose(m, cross_model_cka(b, a).T, atol=1e-12)
    for i in range(3):
        for j in range(2):
            assert m[i, j] == pytest.approx(oracles.cka(a.layers[i], b.layers[j]), abs=1e-12)
    assert np.allclose(np.diag(cross_model_cka(a, a)), 1.0)


def test_trace_validation():
    with pytest.raises(cka.RowCountMismatch):
        LayerTrace("x", [np.ones((3, 2)), np.ones((4, 2))])
    with pytest.raises(cka.EmptyInput):
        LayerTrace("x", [])
    with pytest.raises(cka.RowCountMismatch):
        cross_model_cka(LayerTrace("a", [np.eye(3)]), LayerTrace("b", [np.eye(4)]))


def test_probe_set_labels():
    p = ProbeSet((("a", "temporal"), ("b", "summarisation")))
    assert p.labels == ["temporal", "summarisation"]
    with pytest.raises(ValueError):
        ProbeSet((("a", "temporal"),))
    with pytest.raises(ValueError):
        ProbeSet((("a", "temporal"), ("b", "other")))


def test_pca_examples():
    r = rng(3)
    X = r.normal(size=(20, 2)) * [3.0, 1.0]
    X -= X.mean(0)
    Z = pca2d(X)
    R = np.linalg.lstsq(X, Z, rcond=None)[0]
    assert np.allclose(R @ R.T, np.eye(2), atol=1e-10)
    assert np.allclose(X @ R, Z, atol=1e-10)
    rank1 = np.outer(r.normal(size=9), r.normal(size=4))
    assert np.var(pca2d(rank1)[:, 1]) < 1e-20


def test_pca_variance_vs_eigensolver():
    X = rng(4).normal(size=(10, 5)) @ rng(5).normal(size=(5, 5))
    Z = pca2d(X)
    evals = np.sort(np.linalg.eigvalsh(np.cov(X.T, bias=True)))[::-1]
    assert np.allclose(Z.var(axis=0), evals[:2], rtol=1e-9)
    assert abs(Z[:, 0] @ Z[:, 1]) < 1e-9
    assert Z[:, 0].var() >= Z[:, 1].var()
    with pytest.raises(cka.DegenerateInput):
        pca2d(np.ones((4, 3)))


def test_projection_csv():
    text = projection_csv(np.array([[0.5, -1.0], [2.0, 3.0]]), ["temporal", "summarisation"], ["p0", "p1"])
    assert text.splitlines() == ["item_id,x,y,task_label", "p0,0.5,-1.0,temporal", "p1,2.0,3.0,summarisation"]


# ---------------------------------------------------------------- tensor files


def test_tensor_round_trip(tmp_path):
    X = rng().normal(size=(3, 4)).astype(np.float32).astype(np.float64)
    data = dumps_tensor(X)
    assert data.startswith(b"TNSR v1 3 4 dtype=f32 order=row-major\n")
    assert len(data) == len(b"TNSR v1 3 4 dtype=f32 order=row-major\n") + 48
    assert np.array_equal(loads_tensor(data), X)
    write_tensor(tmp_path / "x.txt", X, text=True)
    assert np.array_equal(read_tensor(tmp_path / "x.txt"), X)
    with pytest.raises(ValueError):
        loads_tensor(data[:-1])
    with pytest.raises(ValueError):
        loads_tensor(b"1 2\n3\n")


def test_trace_round_trip(tmp_path):
    layers = [rng(i).normal(size=(5, 3)) for i in range(3)]
    save_trace(tmp_path / "t", "student", layers, {"condition": "x"})
    tr = load_trace(tmp_path / "t")
    assert tr.model_id == "student" and len(tr.layers) == 3
    assert np.allclose(tr.layers[1], layers[1], atol=1e-6)
    assert not list((tmp_path / "t").glob("*.tmp"))
    with pytest.raises(FileNotFoundError):
        load_trace(tmp_path)
