"""Affinity propagation and adjusted mutual information."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln


@dataclass
class ClusterResult:
    labels: np.ndarray  # exemplar index of each point
    exemplars: np.ndarray
    n_clusters: int
    converged: bool
    iterations: int


def similarity(points, preference: float) -> np.ndarray:
    """Negative squared Euclidean distances, ``preference`` on the diagonal."""
    X = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if X.shape[0] < 1:
        raise ValueError("need at least one point")
    if not np.all(np.isfinite(X)) or not np.isfinite(preference):
        raise ValueError("points and preference must be finite")
    sq = np.sum(X * X, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    S = -np.maximum(d2, 0.0)
    # exact symmetry and zero self-distance regardless of rounding
    S = np.minimum(S, S.T)
    np.fill_diagonal(S, preference)
    return S


def affinity_propagation(
    S: np.ndarray,
    damping: float = 0.5,
    max_iter: int = 200,
    convergence_iter: int = 15,
    seed: int = 0,
) -> ClusterResult:
    """Responsibility/availability message passing on similarity matrix S.

    Similarities get a seeded perturbation at the level of machine epsilon
    so that near-symmetric configurations can still elect a single exemplar;
    the fully symmetric case (all off-diagonal entries equal, all
    preferences equal) is answered directly.
    If no exemplar emerges, every point is returned as its own cluster with
    ``converged=False``.
    """
    S = np.array(S, dtype=np.float64)
    n = S.shape[0]
    if S.ndim != 2 or S.shape != (n, n):
        raise ValueError(f"similarity matrix must be square, got shape {S.shape}")
    if not np.all(np.isfinite(S)):
        raise ValueError("similarity matrix must be finite")
    if not 0.5 <= damping < 1:
        raise ValueError("damping must lie in [0.5, 1)")
    if not max_iter >= convergence_iter >= 1:
        raise ValueError("need max_iter >= convergence_iter >= 1")
    if n == 1:
        return ClusterResult(np.zeros(1, dtype=int), np.zeros(1, dtype=int), 1, True, 0)
    rows = np.arange(n)
    off = S[~np.eye(n, dtype=bool)]
    diag = np.diag(S)
    if np.all(off == off[0]) and np.all(diag == diag[0]):
        # fully symmetric: message passing cannot break the tie, but the
        # optimum is known (n exemplars iff self-similarity beats the rest)
        if diag[0] > off[0]:
            return ClusterResult(rows.copy(), rows.copy(), n, True, 0)
        return ClusterResult(np.zeros(n, dtype=int), np.zeros(1, dtype=int), 1, True, 0)

    rng = np.random.default_rng(seed)
    noisy = S + (np.finfo(float).eps * S + np.finfo(float).tiny * 100) * rng.standard_normal((n, n))

    R = np.zeros((n, n))
    A = np.zeros((n, n))
    prev = None
    stable = 0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        # responsibilities
        AS = A + noisy
        first = np.argmax(AS, axis=1)
        best = AS[rows, first]
        AS[rows, first] = -np.inf
        second = AS.max(axis=1)
        R_new = noisy - best[:, None]
        R_new[rows, first] = noisy[rows, first] - second
        R = damping * R + (1 - damping) * R_new

        # availabilities
        Rp = np.maximum(R, 0.0)
        Rp[rows, rows] = R[rows, rows]
        A_new = Rp.sum(axis=0)[None, :] - Rp
        self_avail = A_new[rows, rows].copy()
        A_new = np.minimum(A_new, 0.0)
        A_new[rows, rows] = self_avail
        A = damping * A + (1 - damping) * A_new

        ex = (R[rows, rows] + A[rows, rows]) > 0
        if prev is not None and np.array_equal(ex, prev):
            stable += 1
        else:
            stable = 1
        prev = ex
        if stable >= convergence_iter and ex.any():
            converged = True
            break

    exemplars = np.flatnonzero(prev)
    if exemplars.size == 0:
        return ClusterResult(rows.copy(), rows.copy(), n, False, it)
    # argmax returns the first maximum: ties go to the lowest exemplar index
    labels = exemplars[np.argmax(S[:, exemplars], axis=1)]
    labels[exemplars] = exemplars
    return ClusterResult(labels, exemplars, int(exemplars.size), converged, it)


# -- adjusted mutual information --------------------------------------------


@dataclass
class Contingency:
    table: np.ndarray  # (r, c) counts
    a: np.ndarray  # row marginals
    b: np.ndarray  # column marginals
    n: int


def contingency(labels_true, labels_pred) -> Contingency:
    u = np.asarray(labels_true)
    v = np.asarray(labels_pred)
    if u.shape != v.shape or u.ndim != 1:
        raise ValueError(f"label arrays differ in shape: {u.shape} vs {v.shape}")
    if u.size == 0:
        raise ValueError("need at least one label")
    _, ui = np.unique(u, return_inverse=True)
    _, vi = np.unique(v, return_inverse=True)
    table = np.zeros((ui.max() + 1, vi.max() + 1), dtype=np.int64)
    np.add.at(table, (ui, vi), 1)
    return Contingency(table, table.sum(axis=1), table.sum(axis=0), int(u.size))


def entropy(counts: np.ndarray, n: int) -> float:
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log(p)))


def mutual_information(c: Contingency) -> float:
    nz = c.table > 0
    nij = c.table[nz].astype(np.float64)
    outer = np.outer(c.a, c.b)[nz].astype(np.float64)
    return float(np.sum(nij / c.n * (np.log(c.n * nij) - np.log(outer))))


def expected_mutual_information(c: Contingency) -> float:
    """Exact E[MI] under the hypergeometric (fixed marginals) model."""
    N = c.n
    lf = gammaln(np.arange(N + 2) + 1.0)  # lf[k] = log(k!)
    emi = 0.0
    for ai in c.a:
        for bj in c.b:
            lo = max(1, ai + bj - N)
            hi = min(ai, bj)
            if lo > hi:
                continue
            nij = np.arange(lo, hi + 1)
            term1 = nij / N * (np.log(N * nij) - np.log(ai * bj))
            log_p = (
                lf[ai] + lf[bj] + lf[N - ai] + lf[N - bj]
                - lf[N] - lf[nij] - lf[ai - nij] - lf[bj - nij] - lf[N - ai - bj + nij]
            )
            emi += float(np.sum(term1 * np.exp(log_p)))
    return emi


def _one_to_one(c: Contingency) -> bool:
    nz = c.table > 0
    return bool(np.all(nz.sum(axis=1) == 1) and np.all(nz.sum(axis=0) == 1))


def same_partition(u, v) -> bool:
    return _one_to_one(contingency(u, v))


def ami(labels_true, labels_pred) -> float:
    """Adjusted mutual information, max-entropy normalizer, natural logs."""
    c = contingency(labels_true, labels_pred)
    if _one_to_one(c):
        return 1.0
    mi = mutual_information(c)
    emi = expected_mutual_information(c)
    denom = max(entropy(c.a, c.n), entropy(c.b, c.n)) - emi
    if denom == 0:
        return 0.0
    return (mi - emi) / denom


def abs_error(true_k: int, est_k: int) -> int:
    return abs(int(true_k) - int(est_k))
