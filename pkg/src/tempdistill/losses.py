"""Distillation objectives with closed-form gradients.

All matrices are float64 numpy arrays.  Each loss returns ``(value, grad)``
where ``grad`` is the derivative with respect to the student operand.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping

import numpy as np

PROB_FLOOR = 1e-12
_NORM_FLOOR = 1e-12


class ZeroVector(ValueError):
    pass


class RowCountMismatch(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class DegenerateColumn(ValueError):
    pass


class NonFinite(ValueError):
    pass


class MissingTerm(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "cosine_affinity"  # or "gaussian"
    sigma: float = 1.0

    def __post_init__(self):
        if self.kind not in ("cosine_affinity", "gaussian"):
            raise ValueError(f"unknown kernel {self.kind!r}")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


COSINE = KernelSpec("cosine_affinity")
GAUSSIAN = KernelSpec("gaussian", 1.0)


def _as_matrix(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFinite(f"{name} has non-finite entries")
    return a


# --------------------------------------------------------------------------
# Kernels


def cosine_affinity(x, y) -> float:
    """(cos(x, y) + 1) / 2."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise ZeroVector("cosine affinity of a zero vector")
    c = float(np.clip(x @ y / (nx * ny), -1.0, 1.0))
    return 0.5 * (c + 1.0)


def gaussian_kernel(x, y, sigma: float = 1.0) -> float:
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    return float(np.exp(-(d @ d) / (2 * sigma**2)))


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared distances between rows of a and rows of b."""
    d = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2 * a @ b.T
    return np.maximum(d, 0.0)


def _row_unit(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(y, axis=1)
    if np.any(norms == 0):
        raise ZeroVector("zero row under the cosine kernel")
    return y / norms[:, None], norms


def kernel_matrix(Y: np.ndarray, kernel: KernelSpec) -> np.ndarray:
    """Pairwise kernel values between the rows of Y."""
    if kernel.kind == "cosine_affinity":
        u, _ = _row_unit(Y)
        return 0.5 * (np.clip(u @ u.T, -1.0, 1.0) + 1.0)
    return np.exp(-_sq_dists(Y, Y) / (2 * kernel.sigma**2))


# --------------------------------------------------------------------------
# PKT


def conditional_probs(Y, kernel: KernelSpec = COSINE) -> np.ndarray:
    """P[i, j] = K(y_i, y_j) / sum_{k != j} K(y_k, y_j); zero diagonal."""
    Y = _as_matrix(Y, "Y")
    if Y.shape[0] < 2:
        raise ValueError("need at least two rows")
    K = kernel_matrix(Y, kernel)
    np.fill_diagonal(K, 0.0)
    Z = K.sum(axis=0)
    if np.any(Z <= 0):
        raise DegenerateColumn("column with no off-diagonal affinity")
    return K / Z[None, :]


def pkt_loss(Yt, Ys, kernel: KernelSpec = COSINE) -> tuple[float, np.ndarray]:
    """KL divergence between teacher and student conditional distributions.

    Sums ``p log(p / q)`` over all off-diagonal entries; both probabilities
    are floored at ``PROB_FLOOR`` inside the log.
    """
    Yt = _as_matrix(Yt, "Yt")
    Ys = _as_matrix(Ys, "Ys")
    if Yt.shape[0] != Ys.shape[0]:
        raise RowCountMismatch(f"teacher has {Yt.shape[0]} rows, student {Ys.shape[0]}")
    l = Ys.shape[0]
    P = conditional_probs(Yt, kernel)
    Ks = kernel_matrix(Ys, kernel)
    np.fill_diagonal(Ks, 0.0)
    Z = Ks.sum(axis=0)
    if np.any(Z <= 0):
        raise DegenerateColumn("student column with no off-diagonal affinity")
    Q = Ks / Z[None, :]

    off = ~np.eye(l, dtype=bool)
    Pc = np.maximum(P, PROB_FLOOR)
    Qc = np.maximum(Q, PROB_FLOOR)
    value = float(np.sum(P[off] * (np.log(Pc[off]) - np.log(Qc[off]))))
    if not np.isfinite(value):
        raise NonFinite("PKT loss overflowed")

    # dL/dQ, zero where the floor is active
    A = np.where(off & (Q > PROB_FLOOR), -P / Qc, 0.0)
    # through the column normalisation: dL/dK_ij = (A_ij - sum_k A_kj Q_kj) / Z_j
    G = (A - (A * Q).sum(axis=0)[None, :]) / Z[None, :]
    G[~off] = 0.0
    S = G + G.T  # each kernel value feeds entries (i, j) and (j, i)

    if kernel.kind == "cosine_affinity":
        u, norms = _row_unit(Ys)
        H = 0.5 * S  # dK/dcos = 1/2
        HU = H @ u
        grad = (HU - (HU * u).sum(1)[:, None] * u) / norms[:, None]
    else:
        W = S * Ks  # dK_ij/dy_i = K_ij (y_j - y_i) / sigma^2
        grad = (W @ Ys - W.sum(1)[:, None] * Ys) / kernel.sigma**2
    return value, grad


# --------------------------------------------------------------------------
# NST


def _unit_columns(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.maximum(np.linalg.norm(X, axis=0), _NORM_FLOOR)
    return X / norms[None, :], norms


def nst_mmd2(T, S, sigma: float = 1.0, normalize_columns: bool = True) -> tuple[float, np.ndarray]:
    """Squared MMD between the neuron columns of T (l x N) and S (l x M).

    Uses the Gaussian kernel on column vectors; columns are L2-normalized
    first unless ``normalize_columns`` is False.
    """
    T = _as_matrix(T, "T")
    S = _as_matrix(S, "S")
    if T.shape[0] != S.shape[0]:
        raise RowCountMismatch(f"teacher has {T.shape[0]} rows, student {S.shape[0]}")
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    N, M = T.shape[1], S.shape[1]
    if N < 1 or M < 1:
        raise ValueError("need at least one column on each side")
    if normalize_columns:
        Th, _ = _unit_columns(T)
        Sh, s_norms = _unit_columns(S)
    else:
        Th, Sh = T, S
    tc, sc = Th.T, Sh.T  # columns as rows
    two_s2 = 2 * sigma**2
    Ktt = np.exp(-_sq_dists(tc, tc) / two_s2)
    Kss = np.exp(-_sq_dists(sc, sc) / two_s2)
    Kst = np.exp(-_sq_dists(sc, tc) / two_s2)
    value = float(Ktt.mean() + Kss.mean() - 2.0 * Kst.mean())

    s2 = sigma**2
    g_ss = (2.0 / (M * M * s2)) * (Sh @ Kss - Sh * Kss.sum(axis=0)[None, :])
    g_st = (2.0 / (M * N * s2)) * (Th @ Kst.T - Sh * Kst.sum(axis=1)[None, :])
    g = g_ss - g_st  # gradient w.r.t. the (possibly normalized) student columns
    if normalize_columns:
        g = (g - Sh * (g * Sh).sum(axis=0)[None, :]) / s_norms[None, :]
    return value, g


# --------------------------------------------------------------------------
# CRD


def crd_critic(s, t, N: int, M: int) -> float:
    """exp(s.t) / (exp(s.t) + N/M) on L2-normalized s and t."""
    s = np.asarray(s, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    ns, nt = np.linalg.norm(s), np.linalg.norm(t)
    if ns == 0 or nt == 0:
        raise ZeroVector("CRD critic of a zero vector")
    e = np.exp(s @ t / (ns * nt))
    return float(e / (e + N / M))


def default_negatives(positives, n_teacher: int, N: int) -> tuple[tuple[int, int], ...]:
    """For each positive (i, j): N pairs (i, k) cycling over teacher rows k != j."""
    if n_teacher < 2:
        raise ValueError("need at least two teacher rows to form negatives")
    out = []
    for i, j in positives:
        others = [(j + d) % n_teacher for d in range(1, n_teacher)]
        out.extend((i, others[k % len(others)]) for k in range(N))
    return tuple(out)


@dataclass(frozen=True)
class CrdBatch:
    student_reps: np.ndarray  # items x d
    teacher_reps: np.ndarray  # items x d
    positives: tuple[tuple[int, int], ...]
    negatives_per_positive: int
    dataset_cardinality: int
    negatives: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        if self.negatives_per_positive < 1:
            raise ValueError("CRD needs at least one negative per positive")
        if self.dataset_cardinality < self.negatives_per_positive:
            raise ValueError("dataset cardinality M must be at least N")
        if not self.positives:
            raise ValueError("CRD needs at least one positive pair")

    def negative_pairs(self) -> tuple[tuple[int, int], ...]:
        if self.negatives is not None:
            return tuple(self.negatives)
        return default_negatives(self.positives, len(self.teacher_reps), self.negatives_per_positive)


def crd_loss(batch: CrdBatch) -> tuple[float, np.ndarray]:
    """-E_pos[log h] - N E_neg[log(1 - h)], gradient w.r.t. student_reps."""
    S = _as_matrix(batch.student_reps, "student_reps")
    T = _as_matrix(batch.teacher_reps, "teacher_reps")
    if S.shape[1] != T.shape[1]:
        raise DimensionMismatch(f"student dim {S.shape[1]} != teacher dim {T.shape[1]}")
    ns = np.linalg.norm(S, axis=1)
    nt = np.linalg.norm(T, axis=1)
    if np.any(ns == 0) or np.any(nt == 0):
        raise ZeroVector("zero representation in CRD batch")
    Sh, Th = S / ns[:, None], T / nt[:, None]
    N, M = batch.negatives_per_positive, batch.dataset_cardinality
    k = N / M

    pos = np.asarray(batch.positives, dtype=int).reshape(-1, 2)
    neg = np.asarray(batch.negative_pairs(), dtype=int).reshape(-1, 2)
    c_pos = (Sh[pos[:, 0]] * Th[pos[:, 1]]).sum(1)
    c_neg = (Sh[neg[:, 0]] * Th[neg[:, 1]]).sum(1)
    # log h = c - log(e^c + k); log(1 - h) = log k - log(e^c + k)
    lse_pos = np.logaddexp(c_pos, np.log(k))
    lse_neg = np.logaddexp(c_neg, np.log(k))
    log_h = c_pos - lse_pos
    log_1mh = np.log(k) - lse_neg
    value = float(-log_h.mean() - N * log_1mh.mean())

    h_pos = np.exp(log_h)
    h_neg = np.exp(c_neg - lse_neg)
    dc_pos = -(1.0 - h_pos) / len(pos)
    dc_neg = N * h_neg / len(neg)
    g_hat = np.zeros_like(S)
    np.add.at(g_hat, pos[:, 0], dc_pos[:, None] * Th[pos[:, 1]])
    np.add.at(g_hat, neg[:, 0], dc_neg[:, None] * Th[neg[:, 1]])
    grad = (g_hat - (g_hat * Sh).sum(1)[:, None] * Sh) / ns[:, None]
    return value, grad


def projection_matrix(d_in: int, d_out: int, seed: int = 0) -> np.ndarray:
    """Fixed ``d_out x d_in`` map with orthonormal rows (``d_out <= d_in``)."""
    if d_out > d_in:
        raise ValueError("projection must not increase dimension")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((d_in, d_out)))
    q = q * np.sign(np.diag(r))[None, :]
    return q.T


def match_dims(student_reps, teacher_reps, seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Project the wider side down to the narrower width.

    Returns ``(student, teacher, P)`` where ``P`` is the projection applied to
    the student (``None`` if the student was left alone); a student gradient
    ``g`` on the projected reps maps back as ``g @ P``.
    """
    S = np.asarray(student_reps, dtype=np.float64)
    T = np.asarray(teacher_reps, dtype=np.float64)
    ds, dt = S.shape[1], T.shape[1]
    if ds == dt:
        return S, T, None
    if dt > ds:
        return S, T @ projection_matrix(dt, ds, seed).T, None
    P = projection_matrix(ds, dt, seed)
    return S @ P.T, T, P


# --------------------------------------------------------------------------
# Combined objective


@dataclass(frozen=True)
class LossWeights:
    lang: float = 1.0
    nst: float = 1.0
    pkt: float = 1.0
    crd: float = 1.0

    def __post_init__(self):
        vals = [getattr(self, f.name) for f in fields(self)]
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be non-negative")
        if not any(v > 0 for v in vals):
            raise ValueError("at least one loss weight must be positive")

    def items(self):
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


@dataclass(frozen=True)
class LossTerm:
    value: float
    grads: Mapping[str, np.ndarray]


def combined_loss(terms: Mapping[str, LossTerm], weights: LossWeights) -> LossTerm:
    """Weighted sum of the terms named in ``weights``.

    Gradients are summed per key, so terms that share an operand (for
    instance ``"student_logits"``) accumulate.  Terms with zero weight are
    ignored; a positively weighted term that is missing raises.
    """
    value = 0.0
    grads: dict[str, np.ndarray] = {}
    for name, w in weights.items():
        if w == 0:
            continue
        if name not in terms:
            raise MissingTerm(f"weight for {name!r} is {w} but no term was given")
        term = terms[name]
        value += w * term.value
        for key, g in term.grads.items():
            g = w * np.asarray(g, dtype=np.float64)
            grads[key] = grads[key] + g if key in grads else g
    return LossTerm(value, grads)


def language_loss(logits, targets, mask) -> tuple[float, np.ndarray]:
    """Mean next-token cross-entropy over positions where ``mask`` is set.

    ``logits`` is (..., V); ``targets`` and ``mask`` match its leading shape.
    Returns the value and the gradient with respect to ``logits``.
    """
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets)
    m = np.asarray(mask, dtype=bool)
    n = int(m.sum())
    if n == 0:
        raise ValueError("no supervised positions")
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    picked = np.take_along_axis(logp, t[..., None], axis=-1)[..., 0]
    value = float(-(picked * m).sum() / n)
    grad = np.exp(logp)
    np.put_along_axis(grad, t[..., None], np.take_along_axis(grad, t[..., None], axis=-1) - 1.0, axis=-1)
    grad *= m[..., None] / n
    return value, grad
