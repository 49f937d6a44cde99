"""Query-side top-k dimension masks and the scoring baselines built on them.

Every method reduces to a per-query importance vector over dimensions; the
mask keeps the ``k`` most important coordinates of the query (ties to the
lower index) and scores it against unmodified documents without
re-normalizing. ``full`` is the all-ones mask.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embstore import EmbeddingMatrix
from .errors import ConfigError, DimensionMismatchError, DimselError
from .predictor import Predictor
from .scoring import id_ranks, rank_all, rank_top, score_matrix

VARIANTS = ("full", "cutoff", "norm", "dime_prf", "eclipse_prf", "learned")


@dataclass(frozen=True)
class DimMask:
    dim: int
    indices: tuple[int, ...]

    def __post_init__(self) -> None:
        idx = tuple(sorted(int(i) for i in self.indices))
        if not 1 <= len(idx) <= self.dim:
            raise ConfigError(f"mask size {len(idx)} outside [1, {self.dim}]")
        if len(set(idx)) != len(idx) or idx[0] < 0 or idx[-1] >= self.dim:
            raise ConfigError("mask indices must be unique and within [0, dim)")
        object.__setattr__(self, "indices", idx)

    @property
    def k(self) -> int:
        return len(self.indices)

    def vector(self) -> np.ndarray:
        m = np.zeros(self.dim)
        m[list(self.indices)] = 1.0
        return m


@dataclass(frozen=True)
class ScoringMethod:
    variant: str = "full"
    k: int | None = None
    prf_depth: int = 1
    n_neg: int = 10

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown scoring variant {self.variant!r}; expected one of {VARIANTS}")
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.prf_depth < 1 or self.n_neg < 1:
            raise ConfigError("prf_depth and n_neg must be >= 1")

    def budget(self, dim: int) -> int:
        k = dim if self.k is None or self.variant == "full" else self.k
        if not 1 <= k <= dim:
            raise ConfigError(f"k={k} outside [1, {dim}]")
        return k


def dimension_order(scores: np.ndarray) -> np.ndarray:
    """Dimensions by decreasing score, ties to the lower index (row-wise for 2-D)."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), axis=-1, kind="stable")


def topk_mask(scores: np.ndarray, k: int) -> DimMask:
    scores = np.asarray(scores, dtype=np.float64)
    d = scores.shape[-1]
    if not 1 <= k <= d:
        raise ConfigError(f"k={k} outside [1, {d}]")
    if not np.all(np.isfinite(scores)):
        raise ValueError("importance scores must be finite")
    return DimMask(d, tuple(dimension_order(scores)[:k]))


def mask_matrix(order: np.ndarray, k: int) -> np.ndarray:
    """0/1 masks keeping the first ``k`` dims of each row of ``order``."""
    m = np.zeros(order.shape, dtype=np.float64)
    np.put_along_axis(m, order[:, :k], 1.0, axis=1)
    return m


def masked_score(e_q: np.ndarray, e_d: np.ndarray, mask: DimMask) -> float:
    q = np.asarray(e_q, dtype=np.float64)
    d = np.asarray(e_d, dtype=np.float64)
    if q.shape != d.shape or q.shape[-1] != mask.dim:
        raise DimensionMismatchError(f"shapes q{q.shape} d{d.shape} mask dim {mask.dim}")
    return float(np.dot(q * mask.vector(), d))


def importance(
    method: ScoringMethod,
    queries: np.ndarray,
    corpus: EmbeddingMatrix,
    predictor: Predictor | None = None,
    first_pass: np.ndarray | None = None,
) -> np.ndarray:
    """Per-query importance vectors, shape (n_queries, D).

    ``first_pass`` optionally supplies the full-dimensional ranking (corpus
    row indices, best first) for the PRF variants.
    """
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    n, d = q.shape
    if d != corpus.dim:
        raise DimensionMismatchError(f"query dim {d} != corpus dim {corpus.dim}")
    v = method.variant
    if v == "full":
        return np.ones((n, d))
    if v == "cutoff":
        return np.tile(np.arange(d, 0, -1, dtype=np.float64), (n, 1))
    if v == "norm":
        return np.abs(q)
    if v == "learned":
        if predictor is None:
            raise ConfigError("learned scoring requires a predictor")
        if predictor.dim != d:
            raise DimensionMismatchError(f"predictor dim {predictor.dim} != embedding dim {d}")
        return predictor.predict_log_probs(q)
    # PRF variants
    depth = method.prf_depth + (method.n_neg if v == "eclipse_prf" else 0)
    if first_pass is None:
        first_pass = first_pass_ranking(q, corpus, depth)
    if first_pass.shape[1] < method.prf_depth:
        raise DimselError("corpus too small for the requested feedback depth")
    docs = corpus.data
    out = np.empty((n, d))
    for i in range(n):
        pos = docs[first_pass[i, : method.prf_depth]].astype(np.float64).mean(axis=0)
        if v == "dime_prf":
            out[i] = q[i] * pos
        else:
            neg_rows = first_pass[i, method.prf_depth : method.prf_depth + method.n_neg]
            neg = docs[neg_rows].astype(np.float64).mean(axis=0) if neg_rows.size else 0.0
            out[i] = q[i] * (pos - neg)
    return out


def first_pass_ranking(queries: np.ndarray, corpus: EmbeddingMatrix, depth: int) -> np.ndarray:
    if corpus.count == 0:
        raise DimselError("corpus is empty")
    tb = id_ranks(corpus.ids)
    scores = score_matrix(queries, corpus.data)
    depth = min(depth, corpus.count)
    return np.array([rank_top(s, tb, depth) for s in scores])


def masked_queries(queries: np.ndarray, order: np.ndarray, k: int) -> np.ndarray:
    return np.atleast_2d(np.asarray(queries, dtype=np.float64)) * mask_matrix(order, k)


def score_query(
    method: ScoringMethod,
    q: np.ndarray,
    corpus: EmbeddingMatrix,
    predictor: Predictor | None = None,
    depth: int | None = None,
) -> list[tuple[str, float]]:
    """Rank the corpus for one query; ``depth`` truncates the returned list."""
    if corpus.count == 0:
        raise DimselError("corpus is empty")
    q = np.asarray(q, dtype=np.float64)
    imp = importance(method, q, corpus, predictor)
    k = method.budget(corpus.dim)
    qm = masked_queries(q, dimension_order(imp), k)
    scores = score_matrix(qm, corpus.data)[0]
    tb = id_ranks(corpus.ids)
    order = rank_all(scores, tb) if depth is None else rank_top(scores, tb, depth)
    return [(corpus.ids[i], float(scores[i])) for i in order]


def score_batch(
    method: ScoringMethod,
    queries: EmbeddingMatrix,
    corpus: EmbeddingMatrix,
    predictor: Predictor | None = None,
    depth: int = 1000,
) -> dict[str, list[tuple[str, float]]]:
    """:func:`score_query` for every query, truncated to ``depth``."""
    if corpus.count == 0:
        raise DimselError("corpus is empty")
    imp = importance(method, queries.data, corpus, predictor)
    k = method.budget(corpus.dim)
    qm = masked_queries(queries.data, dimension_order(imp), k)
    tb = id_ranks(corpus.ids)
    out = {}
    for start in range(0, queries.count, 256):
        scores = score_matrix(qm[start : start + 256], corpus.data)
        for i, s in enumerate(scores):
            order = rank_top(s, tb, depth)
            out[queries.ids[start + i]] = [(corpus.ids[j], float(s[j])) for j in order]
    return out


def format_run(run: dict[str, list[tuple[str, float]]], tag: str = "dimsel") -> str:
    """TREC run lines ``qid Q0 docid rank score tag``."""
    lines = []
    for qid, ranked in run.items():
        for rank, (docid, score) in enumerate(ranked, start=1):
            lines.append(f"{qid} Q0 {docid} {rank} {score!r} {tag}\n")
    return "".join(lines)


def parse_run(text: str) -> dict[str, list[tuple[str, float]]]:
    rows: dict[str, list[tuple[int, str, float]]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 6:
            raise DimselError(f"run line {lineno}: expected 6 columns")
        qid, _, docid, rank, score = parts[:5]
        rows.setdefault(qid, []).append((int(rank), docid, float(score)))
    return {q: [(d, s) for _, d, s in sorted(r)] for q, r in rows.items()}
