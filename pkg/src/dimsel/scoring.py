"""Exact brute-force dot-product scoring with deterministic tie-breaks.

All scores are accumulated in float64. Documents are cast in chunks so a
float32 corpus never has to be fully duplicated in memory.
"""

from __future__ import annotations

import numpy as np

DOC_CHUNK = 16384


def score_matrix(queries: np.ndarray, docs: np.ndarray, chunk: int = DOC_CHUNK) -> np.ndarray:
    """``queries @ docs.T`` in float64, shape (n_queries, n_docs)."""
    q = np.ascontiguousarray(queries, dtype=np.float64)
    if q.ndim == 1:
        q = q[None, :]
    out = np.empty((q.shape[0], docs.shape[0]), dtype=np.float64)
    for start in range(0, docs.shape[0], chunk):
        block = np.asarray(docs[start : start + chunk], dtype=np.float64)
        out[:, start : start + block.shape[0]] = q @ block.T
    return out


def id_ranks(ids) -> np.ndarray:
    """Position of each id in lexicographic order, used as the tie-break key."""
    order = sorted(range(len(ids)), key=ids.__getitem__)
    ranks = np.empty(len(ids), dtype=np.int64)
    ranks[order] = np.arange(len(ids))
    return ranks


def rank_all(scores: np.ndarray, tiebreak: np.ndarray) -> np.ndarray:
    """Indices sorted by score descending, ties by ascending ``tiebreak``."""
    return np.lexsort((tiebreak, -scores))


def rank_top(scores: np.ndarray, tiebreak: np.ndarray, n: int) -> np.ndarray:
    """First ``n`` entries of :func:`rank_all` without sorting everything.

    Every index tied with the n-th best score is kept as a candidate, so the
    result is identical to ``rank_all(scores, tiebreak)[:n]``.
    """
    total = scores.shape[0]
    if n >= total:
        return rank_all(scores, tiebreak)
    part = np.argpartition(-scores, n - 1)[:n]
    threshold = scores[part].min()
    cand = np.flatnonzero(scores >= threshold)
    order = np.lexsort((tiebreak[cand], -scores[cand]))
    return cand[order[:n]]
