"""Synthetic corpora with planted per-cluster informative dimensions.

Each cluster ``c`` owns a dimension set ``S_c`` and a fixed sign pattern on
it. A query's signal lives only on ``S_c``: the cluster signs times
query-specific magnitudes drawn from ``[1 - spread, 1 + spread]``, scaled to
norm ``signal_strength``. Its relevant documents copy that signal and add
their own isotropic Gaussian noise (total norm about ``noise_scale``), as does
the query. Distractors are unit-variance isotropic Gaussians regardless of
``noise_scale``, so they stay normalizable in the noiseless setting.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .embstore import EmbeddingMatrix, Qrels, normalize, save_embeddings, save_qrels
from .errors import ConfigError


@dataclass(frozen=True)
class SynthConfig:
    dim: int = 256
    n_clusters: int = 8
    queries_per_cluster: int = 100
    docs_per_query: int = 2
    n_distractors: int = 4000
    planted_size: int = 16
    signal_strength: float = 1.0
    noise_scale: float = 0.5
    magnitude_spread: float = 0.5
    graded_fraction: float = 0.3
    test_fraction: float = 0.2
    disjoint: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        counts = (self.dim, self.n_clusters, self.queries_per_cluster, self.docs_per_query, self.n_distractors, self.planted_size)
        if min(counts) < 1:
            raise ConfigError("all counts must be >= 1")
        if self.planted_size >= self.dim:
            raise ConfigError("planted_size must be smaller than dim")
        if not self.signal_strength > 0:
            raise ConfigError("signal_strength must be positive")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be non-negative")
        if not 0 <= self.magnitude_spread < 1:
            raise ConfigError("magnitude_spread must lie in [0, 1)")
        if not 0 <= self.graded_fraction <= 1:
            raise ConfigError("graded_fraction must lie in [0, 1]")
        if not 0 <= self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in [0, 1)")
        if self.disjoint and self.n_clusters * self.planted_size > self.dim:
            raise ConfigError(
                f"{self.n_clusters} disjoint planted sets of size {self.planted_size} do not fit in dim {self.dim}"
            )


@dataclass(frozen=True)
class SynthData:
    queries: EmbeddingMatrix
    corpus: EmbeddingMatrix
    qrels: Qrels
    planted: dict[int, tuple[int, ...]]
    cluster_of: dict[str, int]
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]

    def planted_for(self, qid: str) -> tuple[int, ...]:
        return self.planted[self.cluster_of[qid]]


def _planted_sets(cfg: SynthConfig) -> dict[int, tuple[int, ...]]:
    rng = np.random.default_rng([cfg.seed, 0xD15E])
    if cfg.disjoint:
        perm = rng.permutation(cfg.dim)
        return {
            c: tuple(sorted(int(j) for j in perm[c * cfg.planted_size : (c + 1) * cfg.planted_size]))
            for c in range(cfg.n_clusters)
        }
    return {
        c: tuple(sorted(int(j) for j in rng.choice(cfg.dim, cfg.planted_size, replace=False)))
        for c in range(cfg.n_clusters)
    }


def _cluster_block(cfg: SynthConfig, c: int, dims: tuple[int, ...]):
    rng = np.random.default_rng([cfg.seed, 1, c])
    idx = np.array(dims)
    signs = rng.choice([-1.0, 1.0], size=len(dims))
    sigma = cfg.noise_scale / np.sqrt(cfg.dim)
    nq, npos = cfg.queries_per_cluster, cfg.docs_per_query
    mags = rng.uniform(1 - cfg.magnitude_spread, 1 + cfg.magnitude_spread, size=(nq, len(dims)))
    signal = signs * mags
    signal *= cfg.signal_strength / np.linalg.norm(signal, axis=1, keepdims=True)
    queries = np.zeros((nq, cfg.dim))
    queries[:, idx] = signal
    queries += sigma * rng.standard_normal((nq, cfg.dim))
    docs = np.zeros((nq, npos, cfg.dim))
    docs[:, :, idx] = signal[:, None, :]
    docs += sigma * rng.standard_normal((nq, npos, cfg.dim))
    labels = np.where(rng.random((nq, npos)) < cfg.graded_fraction, 2, 1)
    return queries, docs.reshape(nq * npos, cfg.dim), labels


def generate(cfg: SynthConfig) -> SynthData:
    planted = _planted_sets(cfg)
    q_rows, d_rows = [], []
    q_ids, d_ids = [], []
    judgments: dict[str, dict[str, int]] = {}
    cluster_of: dict[str, int] = {}
    for c in range(cfg.n_clusters):
        queries, docs, labels = _cluster_block(cfg, c, planted[c])
        for i in range(cfg.queries_per_cluster):
            qid = f"q{c:02d}_{i:05d}"
            q_ids.append(qid)
            cluster_of[qid] = c
            judgments[qid] = {}
            for j in range(cfg.docs_per_query):
                did = f"d{c:02d}_{i:05d}_{j:02d}"
                d_ids.append(did)
                judgments[qid][did] = int(labels[i, j])
        q_rows.append(queries)
        d_rows.append(docs)
    rng = np.random.default_rng([cfg.seed, 2])
    d_rows.append(rng.standard_normal((cfg.n_distractors, cfg.dim)))
    d_ids.extend(f"n{i:06d}" for i in range(cfg.n_distractors))

    queries = normalize(EmbeddingMatrix(q_ids, np.vstack(q_rows)))
    corpus = normalize(EmbeddingMatrix(d_ids, np.vstack(d_rows)))

    split_rng = np.random.default_rng([cfg.seed, 3])
    order = split_rng.permutation(len(q_ids))
    n_test = int(round(cfg.test_fraction * len(q_ids)))
    test = {q_ids[i] for i in order[:n_test]}
    return SynthData(
        queries=queries,
        corpus=corpus,
        qrels=Qrels(judgments),
        planted=planted,
        cluster_of=cluster_of,
        train_ids=tuple(q for q in q_ids if q not in test),
        test_ids=tuple(q for q in q_ids if q in test),
    )


def write(data: SynthData, cfg: SynthConfig, out_dir: str | Path) -> dict[str, Path]:
    """Write EMB1/qrels files plus a planted-truth JSON; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "queries": out / "queries.emb",
        "corpus": out / "corpus.emb",
        "qrels": out / "qrels.txt",
        "qrels_train": out / "qrels.train.txt",
        "qrels_test": out / "qrels.test.txt",
        "planted": out / "planted.json",
    }
    save_embeddings(data.queries, paths["queries"])
    save_embeddings(data.corpus, paths["corpus"])
    save_qrels(data.qrels, paths["qrels"])
    save_qrels(data.qrels.restrict(data.train_ids), paths["qrels_train"])
    save_qrels(data.qrels.restrict(data.test_ids), paths["qrels_test"])
    truth = {
        "config": asdict(cfg),
        "planted": {str(c): list(dims) for c, dims in data.planted.items()},
        "cluster_of": data.cluster_of,
        "train_ids": list(data.train_ids),
        "test_ids": list(data.test_ids),
    }
    paths["planted"].write_text(json.dumps(truth, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths
