"""NDCG, retained-dimension sweeps and dimension-selection consistency."""

from __future__ import annotations

import csv
import io
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .embstore import EmbeddingMatrix, Qrels
from .errors import DegenerateCorrelationError, DimselError
from .predictor import Predictor
from .selection import ScoringMethod, dimension_order, first_pass_ranking, importance, mask_matrix
from .scoring import id_ranks, rank_top, score_matrix

FIXED_FRACTION = 0.30


def dcg(labels: Sequence[int]) -> float:
    return sum((2.0**y - 1.0) / math.log2(i + 2) for i, y in enumerate(labels))


def ndcg_at(ranking: Sequence[str], judgments: Mapping[str, int], cutoff: int = 10) -> float | None:
    """NDCG@cutoff with exponential gains; ``None`` when the query has no relevant docs."""
    if cutoff < 1:
        raise ValueError("cutoff must be >= 1")
    ideal = sorted((y for y in judgments.values() if y > 0), reverse=True)[:cutoff]
    if not ideal:
        return None
    got = dcg([judgments.get(d, 0) for d in ranking[:cutoff]])
    return got / dcg(ideal)


@dataclass
class MetricSummary:
    mean: float
    per_query: dict[str, float]
    n_skipped: int

    @property
    def n_evaluated(self) -> int:
        return len(self.per_query)


def mean_ndcg(run: Mapping[str, Sequence], qrels: Qrels, cutoff: int = 10) -> MetricSummary:
    """Mean NDCG over queries in ``run``; entries may be doc ids or (doc id, score)."""
    per_query = {}
    skipped = 0
    for qid, ranked in run.items():
        docs = [r[0] if isinstance(r, tuple) else r for r in ranked]
        v = ndcg_at(docs, qrels[qid], cutoff)
        if v is None:
            skipped += 1
        else:
            per_query[qid] = v
    mean = float(np.mean(list(per_query.values()))) if per_query else 0.0
    return MetricSummary(mean, per_query, skipped)


def k_grid(dim: int, step_percent: int = 2) -> list[tuple[float, int]]:
    """(fraction, k) pairs for 2%..100%; k rounded half-up.

    When several fractions round to the same k only the largest is kept, so
    the grid always ends at (1.0, dim).
    """
    by_k: dict[int, float] = {}
    for pct in range(step_percent, 101, step_percent):
        by_k[max(1, (2 * pct * dim + 100) // 200)] = pct / 100.0
    return [(f, k) for k, f in by_k.items()]


@dataclass
class SweepResult:
    method: str
    dim: int
    curve: list[tuple[float, int, float]]
    n_queries: int = 0
    n_skipped: int = 0
    peak: float = field(init=False)
    peak_k: int = field(init=False)
    peak_fraction: float = field(init=False)
    at_fixed: float | None = field(init=False)

    def __post_init__(self) -> None:
        # Ties resolve to the larger k, so a flat curve peaks at 100%.
        _, self.peak_k, self.peak = max(self.curve, key=lambda row: (row[2], row[1]))
        self.peak_fraction = self.peak_k / self.dim
        fixed = max(1, (2 * round(FIXED_FRACTION * 100) * self.dim + 100) // 200)
        self.at_fixed = next((v for _, k, v in self.curve if k == fixed), None)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["fraction", "k", "ndcg@10"])
        for f, k, v in self.curve:
            w.writerow([f"{f:.2f}", k, repr(v)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "dim": self.dim,
            "peak": self.peak,
            "peak_k": self.peak_k,
            "peak_fraction": self.peak_fraction,
            "at_30": self.at_fixed,
            "n_queries": self.n_queries,
            "n_skipped": self.n_skipped,
        }


class _Judged:
    """Label lookup for the evaluated queries, vectorized per query."""

    def __init__(self, queries: EmbeddingMatrix, corpus: EmbeddingMatrix, qrels: Qrels, cutoff: int):
        self.rows: list[int] = []
        self.labels: list[np.ndarray] = []
        self.idcg: list[float] = []
        self.skipped = 0
        n_docs = corpus.count
        for row, qid in enumerate(queries.ids):
            j = qrels[qid]
            ideal = sorted((y for y in j.values() if y > 0), reverse=True)[:cutoff]
            if not ideal:
                self.skipped += 1
                continue
            lab = np.zeros(n_docs, dtype=np.int64)
            for docid, y in j.items():
                r = corpus.id_index.get(docid)
                if r is not None:
                    lab[r] = y
            self.rows.append(row)
            self.labels.append(lab)
            self.idcg.append(dcg(ideal))
        self.discount = 1.0 / np.log2(np.arange(2, cutoff + 2))


def _evaluate_masked(qm: np.ndarray, corpus: EmbeddingMatrix, judged: _Judged, tb: np.ndarray, cutoff: int) -> float:
    total = 0.0
    for start in range(0, qm.shape[0], 256):
        scores = score_matrix(qm[start : start + 256], corpus.data)
        for i, s in enumerate(scores):
            top = rank_top(s, tb, cutoff)
            gains = 2.0 ** judged.labels[start + i][top] - 1.0
            total += float(gains @ judged.discount[: top.size]) / judged.idcg[start + i]
    return total / qm.shape[0]


def sweep(
    method: ScoringMethod,
    queries: EmbeddingMatrix,
    corpus: EmbeddingMatrix,
    qrels: Qrels,
    predictor: Predictor | None = None,
    grid: Sequence[tuple[float, int]] | None = None,
    cutoff: int = 10,
    tag: str | None = None,
) -> SweepResult:
    """NDCG@cutoff of ``method`` at every retained-dimension budget in ``grid``."""
    if queries.dim != corpus.dim:
        raise DimselError(f"query dim {queries.dim} != corpus dim {corpus.dim}")
    grid = list(grid) if grid is not None else k_grid(corpus.dim)
    judged = _Judged(queries, corpus, qrels, cutoff)
    if not judged.rows:
        raise DimselError("no evaluable queries (none has relevant documents)")
    q = queries.data[judged.rows].astype(np.float64)
    first_pass = None
    if method.variant in ("dime_prf", "eclipse_prf"):
        depth = method.prf_depth + (method.n_neg if method.variant == "eclipse_prf" else 0)
        first_pass = first_pass_ranking(q, corpus, depth)
    imp = importance(method, q, corpus, predictor, first_pass=first_pass)
    order = dimension_order(imp)
    tb = id_ranks(corpus.ids)
    curve = []
    cache: dict[int, float] = {}
    for fraction, k in grid:
        key = corpus.dim if method.variant == "full" else k
        if key not in cache:
            cache[key] = _evaluate_masked(q * mask_matrix(order, key), corpus, judged, tb, cutoff)
        curve.append((fraction, k, cache[key]))
    return SweepResult(tag or method.variant, corpus.dim, curve, len(judged.rows), judged.skipped)


def seed_summary(results: Sequence[SweepResult]) -> list[tuple[float, int, float, float]]:
    """Per-k mean and (population) std across runs that share a grid."""
    curves = np.array([[v for _, _, v in r.curve] for r in results])
    grid = [(f, k) for f, k, _ in results[0].curve]
    return [(f, k, float(m), float(s)) for (f, k), m, s in zip(grid, curves.mean(0), curves.std(0))]


def topk_sets(importances: np.ndarray, k: int) -> np.ndarray:
    """Boolean (n, D) membership of each row's top-k dimensions."""
    imp = np.atleast_2d(np.asarray(importances, dtype=np.float64))
    if not 1 <= k <= imp.shape[1]:
        raise DimselError(f"k={k} outside [1, {imp.shape[1]}]")
    return mask_matrix(dimension_order(imp), k).astype(bool)


def jaccard(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 1.0


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(xc @ xc), np.sqrt(yc @ yc)
    if sx == 0 or sy == 0:
        raise DegenerateCorrelationError("degenerate correlation: a series has zero variance")
    return float(np.clip((xc @ yc) / (sx * sy), -1.0, 1.0))


@dataclass
class ConsistencyResult:
    pearson: float
    n_pairs: int
    k: int
    self_jaccard: float
    mean_jaccard: float
    mean_cosine: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def consistency_analysis(importances: np.ndarray, embeddings: np.ndarray, k: int = 512) -> ConsistencyResult:
    """Pearson correlation of query cosine vs top-k Jaccard over all unordered pairs."""
    imp = np.atleast_2d(np.asarray(importances, dtype=np.float64))
    emb = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    n = imp.shape[0]
    if n < 2 or emb.shape[0] != n:
        raise DimselError("consistency analysis needs >= 2 queries with matching embeddings")
    sets = topk_sets(imp, k).astype(np.float64)
    inter = sets @ sets.T
    sizes = sets.sum(axis=1)
    jac = inter / (sizes[:, None] + sizes[None, :] - inter)
    unit = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    cos = unit @ unit.T
    iu = np.triu_indices(n, k=1)
    r = pearson(cos[iu], jac[iu])
    return ConsistencyResult(
        pearson=r,
        n_pairs=int(iu[0].size),
        k=k,
        self_jaccard=float(np.min(np.diag(jac))),
        mean_jaccard=float(jac[iu].mean()),
        mean_cosine=float(cos[iu].mean()),
    )


def predictor_consistency(predictor: Predictor, queries: EmbeddingMatrix, k: int = 512) -> ConsistencyResult:
    return consistency_analysis(predictor.predict_log_probs(queries.data), queries.data, k)


def pairwise_jaccard(importances: np.ndarray, k: int, n_pairs: int = 20000, seed: int = 0) -> float:
    """Mean top-k Jaccard over ``n_pairs`` seeded random unordered pairs."""
    imp = np.atleast_2d(np.asarray(importances, dtype=np.float64))
    n = imp.shape[0]
    if n < 2:
        raise DimselError("pairwise Jaccard needs >= 2 queries")
    if n_pairs < 1:
        raise DimselError("n_pairs must be >= 1")
    sets = topk_sets(imp, k)
    rng = np.random.default_rng([seed, 0x7A11])
    i = rng.integers(0, n, size=n_pairs)
    j = rng.integers(0, n - 1, size=n_pairs)
    j = j + (j >= i)
    inter = np.count_nonzero(sets[i] & sets[j], axis=1)
    union = np.count_nonzero(sets[i] | sets[j], axis=1)
    return float(np.mean(inter / union))
