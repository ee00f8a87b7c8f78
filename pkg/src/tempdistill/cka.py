"""Representation similarity: mean-pooled sentence embeddings, linear CKA,
layer sweeps and a PCA projection for plotting."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

TASK_LABELS = ("temporal", "summarisation")


class EmptyInput(ValueError):
    pass


class DegenerateInput(ValueError):
    pass


class RowCountMismatch(ValueError):
    pass


@dataclass
class LayerTrace:
    """Per-layer representations of the same probe items; layer 0 is the
    embedding layer."""

    model_id: str
    layers: list[np.ndarray]
    extra: dict = field(default_factory=dict)  # free-form metadata, e.g. probe labels

    def __post_init__(self):
        self.layers = [np.asarray(x, dtype=np.float64) for x in self.layers]
        if not self.layers:
            raise EmptyInput("trace has no layers")
        rows = {x.shape[0] for x in self.layers}
        if len(rows) != 1:
            raise RowCountMismatch(f"layers disagree on row count: {sorted(rows)}")


@dataclass(frozen=True)
class ProbeSet:
    items: tuple[tuple[str, str], ...]  # (text, task_label)

    def __post_init__(self):
        labels = {lab for _, lab in self.items}
        if not labels <= set(TASK_LABELS):
            raise ValueError(f"unknown task labels {sorted(labels - set(TASK_LABELS))}")
        if labels != set(TASK_LABELS):
            raise ValueError("probe set needs both task labels")

    @property
    def labels(self) -> list[str]:
        return [lab for _, lab in self.items]


def sentence_embedding(token_states) -> np.ndarray:
    X = np.asarray(token_states, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyInput("need at least one token")
    return X.mean(axis=0)


def linear_cka(X, Y) -> float:
    """Linear CKA with the biased (plain centered-Gram) HSIC estimator.

    ``||Yc^T Xc||_F^2 / (||Xc^T Xc||_F ||Yc^T Yc||_F)`` with column-centered
    inputs.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[0] != Y.shape[0]:
        raise RowCountMismatch(f"{X.shape[0]} vs {Y.shape[0]} rows")
    if X.shape[0] < 2:
        raise DegenerateInput("need at least two rows")
    Xc = X - X.mean(axis=0)
    Yc = Y - Y.mean(axis=0)
    nx = np.linalg.norm(Xc.T @ Xc)
    ny = np.linalg.norm(Yc.T @ Yc)
    if nx == 0 or ny == 0:
        raise DegenerateInput("constant representation")
    return float(np.linalg.norm(Yc.T @ Xc) ** 2 / (nx * ny))


def layer_sweep(trace: LayerTrace) -> list[float]:
    base = trace.layers[0]
    return [linear_cka(base, layer) for layer in trace.layers]


def cross_model_cka(a: LayerTrace, b: LayerTrace) -> np.ndarray:
    out = np.empty((len(a.layers), len(b.layers)))
    for i, x in enumerate(a.layers):
        for j, y in enumerate(b.layers):
            out[i, j] = linear_cka(x, y)
    return out


def pca2d(X) -> np.ndarray:
    """Scores on the top two principal components.

    Each component is signed so its largest-magnitude loading is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3:
        raise DegenerateInput("pca2d needs at least three rows")
    Xc = X - X.mean(axis=0)
    if not np.any(Xc):
        raise DegenerateInput("all rows identical")
    _, _, vt = np.linalg.svd(Xc, full_matrices=False)
    comps = np.zeros((2, X.shape[1]))
    k = min(2, vt.shape[0])
    comps[:k] = vt[:k]
    for c in comps[:k]:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1
    return Xc @ comps.T


def projection_csv(points, labels: Sequence[str], item_ids: Sequence[str] | None = None) -> str:
    points = np.asarray(points)
    item_ids = item_ids or [str(i) for i in range(len(points))]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["item_id", "x", "y", "task_label"])
    for iid, (x, y), lab in zip(item_ids, points, labels):
        w.writerow([iid, repr(float(x)), repr(float(y)), lab])
    return buf.getvalue()
