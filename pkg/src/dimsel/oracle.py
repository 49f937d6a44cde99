"""Label-derived dimension-importance targets.

For each query with at least one relevant document the target is a softmax
over dimensions of ``e_q * (p - n)``, where ``p`` is the gain-weighted
centroid of the relevant documents and ``n`` the mean of a random sample of
hard negatives (the best-scoring non-relevant documents).
"""

from __future__ import annotations

import hashlib
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .embstore import EmbeddingMatrix, Qrels
from .errors import ConfigError, DimensionMismatchError, NoNegativesError, NoRelevantDocumentsError
from .scoring import score_matrix

logger = logging.getLogger(__name__)

TAU_GRID = (0.0001, 0.0002, 0.0005, 0.001, 0.002, 0.005, 0.01, 0.02, 0.05)


@dataclass(frozen=True)
class OracleConfig:
    tau: float = 0.01
    pool_size: int = 1000
    sample_size: int = 64
    weight_positives: bool = True
    hard_negatives: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.pool_size < 1 or self.sample_size < 1:
            raise ConfigError("pool_size and sample_size must be >= 1")
        if self.sample_size > self.pool_size:
            raise ConfigError(f"sample_size {self.sample_size} exceeds pool_size {self.pool_size}")


@dataclass(frozen=True)
class ImportanceTarget:
    query_id: str
    probs: np.ndarray


@dataclass
class BuildSummary:
    n_targets: int = 0
    skipped_queries: int = 0
    missing_documents: int = 0
    skipped_ids: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "n_targets": self.n_targets,
            "skipped_queries": self.skipped_queries,
            "missing_documents": self.missing_documents,
            "skipped_ids": list(self.skipped_ids),
        }


def gain(y: int) -> float:
    """Exponential gain ``2**y - 1``."""
    return float(2**y - 1)


def positive_centroid(q: np.ndarray, positives: Sequence[tuple[np.ndarray, int]], weighted: bool = True) -> np.ndarray:
    """Gain-weighted (or plain) mean of the relevant documents.

    ``q`` is accepted for symmetry with the other steps; the centroid does not
    depend on it.
    """
    if not positives:
        raise NoRelevantDocumentsError("query has no relevant documents")
    rows = np.array([np.asarray(r, dtype=np.float64) for r, _ in positives])
    if not weighted:
        return rows.mean(axis=0)
    gains = np.array([gain(y) for _, y in positives])
    total = gains.sum()
    if total <= 0:
        raise NoRelevantDocumentsError("query has no relevant documents")
    return (gains / total) @ rows


def query_rng(seed: int, query_id: str) -> np.random.Generator:
    # Stable across processes (unlike hash()), so parallel order never matters.
    digest = hashlib.blake2b(query_id.encode("utf-8"), digest_size=8).digest()
    return np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, int.from_bytes(digest, "little")])


def _select_negatives(scores: np.ndarray, excluded: np.ndarray, cfg: OracleConfig, rng: np.random.Generator) -> np.ndarray:
    candidates = np.flatnonzero(~excluded)
    if candidates.size == 0:
        raise NoNegativesError("no negatives available")
    order = np.argsort(-scores[candidates], kind="stable")
    pool = candidates[order[: min(cfg.pool_size, candidates.size)]]
    chosen = rng.choice(pool.size, size=min(cfg.sample_size, pool.size), replace=False)
    return np.sort(pool[chosen])


def mine_hard_negatives(
    q: np.ndarray,
    corpus: EmbeddingMatrix,
    positives: set[str] | frozenset[str],
    cfg: OracleConfig,
    query_id: str | None = None,
) -> np.ndarray:
    """Sample up to M rows from the top-K non-relevant documents.

    Returns sorted corpus row indices. With ``query_id`` the draw uses the
    same per-query stream as :func:`build_targets`; otherwise ``cfg.seed``.
    """
    if q.shape[-1] != corpus.dim:
        raise DimensionMismatchError(f"query dim {q.shape[-1]} != corpus dim {corpus.dim}")
    excluded = np.zeros(corpus.count, dtype=bool)
    for docid in positives:
        row = corpus.id_index.get(docid)
        if row is not None:
            excluded[row] = True
    scores = score_matrix(q, corpus.data)[0]
    rng = np.random.default_rng(cfg.seed) if query_id is None else query_rng(cfg.seed, query_id)
    return _select_negatives(scores, excluded, cfg, rng)


def negative_mean(corpus: EmbeddingMatrix, rows: np.ndarray) -> np.ndarray:
    return corpus.data[rows].astype(np.float64).mean(axis=0)


def raw_scores(q: np.ndarray, p: np.ndarray, n: np.ndarray | None = None) -> np.ndarray:
    """Per-dimension discrimination ``q_j * (p_j - n_j)``; ``n=None`` means no negatives."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    n = np.zeros_like(p) if n is None else np.asarray(n, dtype=np.float64)
    if not (q.shape == p.shape == n.shape):
        raise DimensionMismatchError(f"shape mismatch: q{q.shape} p{p.shape} n{n.shape}")
    return q * (p - n)


def importance_distribution(r: np.ndarray, tau: float) -> np.ndarray:
    """Temperature softmax over dimensions, stabilized by max subtraction."""
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    r = np.asarray(r, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise ValueError("raw scores must be finite")
    z = r / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def build_targets(
    corpus: EmbeddingMatrix,
    queries: EmbeddingMatrix,
    qrels: Qrels,
    cfg: OracleConfig,
    query_chunk: int = 256,
) -> tuple[list[ImportanceTarget], BuildSummary]:
    """One importance target per query that has relevant documents in the corpus."""
    if queries.dim != corpus.dim:
        raise DimensionMismatchError(f"query dim {queries.dim} != corpus dim {corpus.dim}")
    summary = BuildSummary()
    work: list[tuple[int, str, list[tuple[int, int]]]] = []
    for row, qid in enumerate(queries.ids):
        pos = []
        for docid, y in qrels.positives(qid).items():
            drow = corpus.id_index.get(docid)
            if drow is None:
                summary.missing_documents += 1
                continue
            pos.append((drow, y))
        if not pos:
            summary.skipped_queries += 1
            summary.skipped_ids.append(qid)
            continue
        work.append((row, qid, sorted(pos)))
    if summary.missing_documents:
        logger.warning("oracle: %d judged documents absent from corpus", summary.missing_documents)

    targets: list[ImportanceTarget] = []
    for start in range(0, len(work), query_chunk):
        chunk = work[start : start + query_chunk]
        qmat = queries.data[[row for row, _, _ in chunk]].astype(np.float64)
        sims = score_matrix(qmat, corpus.data) if cfg.hard_negatives else None
        for i, (_, qid, pos) in enumerate(chunk):
            q = qmat[i]
            p = positive_centroid(q, [(corpus.data[r], y) for r, y in pos], weighted=cfg.weight_positives)
            n = None
            if cfg.hard_negatives:
                excluded = np.zeros(corpus.count, dtype=bool)
                excluded[[r for r, _ in pos]] = True
                rows = _select_negatives(sims[i], excluded, cfg, query_rng(cfg.seed, qid))
                n = negative_mean(corpus, rows)
            probs = importance_distribution(raw_scores(q, p, n), cfg.tau)
            targets.append(ImportanceTarget(qid, probs))
    summary.n_targets = len(targets)
    logger.info("oracle: %d targets, %d queries skipped", summary.n_targets, summary.skipped_queries)
    return targets, summary


def targets_to_matrix(targets: Sequence[ImportanceTarget]) -> EmbeddingMatrix:
    return EmbeddingMatrix([t.query_id for t in targets], np.array([t.probs for t in targets]))


def targets_from_matrix(m: EmbeddingMatrix) -> list[ImportanceTarget]:
    out = []
    for qid, row in zip(m.ids, m.data):
        p = row.astype(np.float64)
        out.append(ImportanceTarget(qid, p / p.sum()))
    return out


def targets_by_id(targets: Sequence[ImportanceTarget]) -> Mapping[str, np.ndarray]:
    return {t.query_id: t.probs for t in targets}
