"""Supervised search adapter: one D x D projection shared by queries and documents.

Training uses an in-batch softmax contrastive loss over (query, relevant
document) pairs on the cosine of the adapted vectors, starting from the
identity so the untrained adapter reproduces the base ranking.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .embstore import EmbeddingMatrix, Qrels
from .errors import AdapterFormatError, DimensionMismatchError, TrainingError, ZeroNormError
from .evalkit import SweepResult, sweep
from .optim import AdamW, cosine_lr
from .predictor import Predictor, TrainConfig, split_validation
from .selection import ScoringMethod, score_batch, score_query

logger = logging.getLogger(__name__)

MAGIC = b"ADPT"
TEMPERATURE = 0.05


@dataclass
class Adapter:
    matrix: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != self.matrix.shape[1]:
            raise DimensionMismatchError(f"adapter matrix must be square, got {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix)):
            raise AdapterFormatError("adapter matrix has non-finite entries")

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[0])

    @classmethod
    def identity(cls, dim: int) -> Adapter:
        return cls(np.eye(dim))

    @property
    def is_identity(self) -> bool:
        return bool(np.array_equal(self.matrix, np.eye(self.dim)))

    def transform(self, x: np.ndarray) -> np.ndarray:
        """``A x`` per row, then L2-normalized (float64)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise DimensionMismatchError(f"input dim {x.shape[1]} != adapter dim {self.dim}")
        if self.is_identity:
            return x
        y = x @ self.matrix.T
        norms = np.linalg.norm(y, axis=1)
        if np.any(norms <= 1e-12):
            raise ZeroNormError(f"adapter maps row {int(np.argmin(norms))} to a zero vector")
        return y / norms[:, None]


def apply(a: Adapter, m: EmbeddingMatrix) -> EmbeddingMatrix:
    """Map every row through A and re-normalize.

    The identity is returned untouched: inputs are already unit-norm, and a
    second normalization pass would perturb float32 rows and break ties.
    """
    if m.dim != a.dim:
        raise DimensionMismatchError(f"embedding dim {m.dim} != adapter dim {a.dim}")
    if a.is_identity:
        return m
    y = m.data.astype(np.float64) @ a.matrix.T
    norms = np.linalg.norm(y, axis=1)
    bad = np.flatnonzero(norms <= 1e-12)
    if bad.size:
        raise ZeroNormError(f"adapter maps {m.ids[int(bad[0])]!r} to a zero vector")
    return EmbeddingMatrix(m.ids, (y / norms[:, None]).astype(np.float32))


def _unit(x: np.ndarray):
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / n, n


def contrastive_loss_and_grad(
    matrix: np.ndarray, q: np.ndarray, d: np.ndarray, temperature: float = TEMPERATURE
) -> tuple[float, np.ndarray]:
    """In-batch InfoNCE on cosine(A q_i, A d_j); row i's positive is column i."""
    u, nu = _unit(q @ matrix.T)
    v, nv = _unit(d @ matrix.T)
    logits = (u @ v.T) / temperature
    logits -= logits.max(axis=1, keepdims=True)
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    b = q.shape[0]
    loss = -float(np.trace(logp)) / b
    g = np.exp(logp)
    g[np.arange(b), np.arange(b)] -= 1.0
    g /= b * temperature
    du = g @ v
    dv = g.T @ u
    # back through the row normalization: (I - u u^T) / |x|
    dx_q = (du - u * np.sum(du * u, axis=1, keepdims=True)) / nu
    dx_d = (dv - v * np.sum(dv * v, axis=1, keepdims=True)) / nv
    return loss, dx_q.T @ q + dx_d.T @ d


def _pairs(queries: EmbeddingMatrix, corpus: EmbeddingMatrix, qrels: Qrels, qids) -> tuple[np.ndarray, np.ndarray]:
    qi, di = [], []
    for qid in qids:
        for docid in sorted(qrels.positives(qid)):
            row = corpus.id_index.get(docid)
            if row is not None:
                qi.append(queries.id_index[qid])
                di.append(row)
    return np.asarray(qi, dtype=np.int64), np.asarray(di, dtype=np.int64)


def _mean_loss(matrix, q, d, batch_size, temperature) -> float:
    total = 0.0
    for start in range(0, q.shape[0], batch_size):
        loss, _ = contrastive_loss_and_grad(matrix, q[start : start + batch_size], d[start : start + batch_size], temperature)
        total += loss * min(batch_size, q.shape[0] - start)
    return total / q.shape[0]


def train_adapter(
    queries: EmbeddingMatrix,
    corpus: EmbeddingMatrix,
    qrels: Qrels,
    cfg: TrainConfig,
    temperature: float = TEMPERATURE,
) -> Adapter:
    """Fit A from identity; the checkpoint with the lowest validation loss wins.

    The identity itself counts as a checkpoint, so zero epochs (or no
    improvement) returns the identity. Input dropout is not used here.
    """
    if queries.dim != corpus.dim:
        raise DimensionMismatchError(f"query dim {queries.dim} != corpus dim {corpus.dim}")
    qids = [q for q in queries.ids if any(d in corpus.id_index for d in qrels.positives(q))]
    if not qids:
        raise TrainingError("empty training pairs")
    if len(qids) < 2:
        raise TrainingError("validation split is empty")
    tr, va = split_validation(len(qids), cfg.val_fraction, cfg.seed)
    qi_tr, di_tr = _pairs(queries, corpus, qrels, [qids[i] for i in tr])
    qi_va, di_va = _pairs(queries, corpus, qrels, [qids[i] for i in va])
    qdata = queries.data.astype(np.float64)
    ddata = corpus.data.astype(np.float64)
    q_va, d_va = qdata[qi_va], ddata[di_va]

    matrix = np.eye(queries.dim)
    params = {"matrix": matrix}
    opt = AdamW(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    n = qi_tr.size
    total = math.ceil(n / cfg.batch_size) * cfg.epochs
    best = matrix.astype(np.float32)
    best_loss = _mean_loss(best.astype(np.float64), q_va, d_va, cfg.batch_size, temperature)
    best_epoch = 0
    history = [{"epoch": 0, "val_loss": best_loss}]
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch, 0xADA]).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            _, grad = contrastive_loss_and_grad(matrix, qdata[qi_tr[idx]], ddata[di_tr[idx]], temperature)
            opt.step({"matrix": grad}, lr=cosine_lr(step, total, cfg.lr))
            step += 1
        snap = matrix.astype(np.float32)
        val = _mean_loss(snap.astype(np.float64), q_va, d_va, cfg.batch_size, temperature)
        history.append({"epoch": epoch, "val_loss": val})
        if val < best_loss:
            best, best_loss, best_epoch = snap, val, epoch
    logger.info("adapter: best val loss %.6f at epoch %d", best_loss, best_epoch)
    return Adapter(
        best.astype(np.float64),
        {
            "train_config": cfg.to_dict(),
            "temperature": temperature,
            "best_val_loss": best_loss,
            "best_epoch": best_epoch,
            "n_train_pairs": int(n),
            "n_val_pairs": int(qi_va.size),
            "history": history,
        },
    )


@dataclass
class Pipeline:
    """Adapter first, then a selection-module scoring method in the adapted space."""

    adapter: Adapter
    method: ScoringMethod
    predictor: Predictor | None = None

    def adapt(self, m: EmbeddingMatrix) -> EmbeddingMatrix:
        return apply(self.adapter, m)

    def score_query(self, q: np.ndarray, corpus: EmbeddingMatrix, depth: int | None = None):
        q_adapted = self.adapter.transform(q)[0].astype(np.float32)
        return score_query(self.method, q_adapted, self.adapt(corpus), self.predictor, depth)

    def run(self, queries: EmbeddingMatrix, corpus: EmbeddingMatrix, depth: int = 1000):
        return score_batch(self.method, self.adapt(queries), self.adapt(corpus), self.predictor, depth)

    def sweep(self, queries: EmbeddingMatrix, corpus: EmbeddingMatrix, qrels: Qrels, **kw) -> SweepResult:
        kw.setdefault("tag", f"adapter+{self.method.variant}")
        return sweep(self.method, self.adapt(queries), self.adapt(corpus), qrels, self.predictor, **kw)


def compose(a: Adapter, method: ScoringMethod, predictor: Predictor | None = None) -> Pipeline:
    if predictor is not None and predictor.dim != a.dim:
        raise DimensionMismatchError(f"predictor dim {predictor.dim} != adapter dim {a.dim}")
    return Pipeline(a, method, predictor)


def encode(a: Adapter) -> bytes:
    meta = json.dumps(a.metadata, sort_keys=True).encode("utf-8")
    return b"".join(
        [MAGIC, struct.pack("<I", a.dim), a.matrix.astype("<f4").tobytes(order="C"), struct.pack("<I", len(meta)), meta]
    )


def decode(buf: bytes, expected_dim: int | None = None) -> Adapter:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise AdapterFormatError("not an adapter file (bad magic)")
    (dim,) = struct.unpack_from("<I", buf, 4)
    if expected_dim is not None and dim != expected_dim:
        raise DimensionMismatchError(f"adapter dim {dim} != expected {expected_dim}")
    pos = 8
    if len(buf) < pos + 4 * dim * dim + 4:
        raise AdapterFormatError("unexpected end of adapter file")
    mat = np.frombuffer(buf, dtype="<f4", count=dim * dim, offset=pos).reshape(dim, dim)
    pos += 4 * dim * dim
    (n_meta,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if len(buf) < pos + n_meta:
        raise AdapterFormatError("unexpected end of adapter file")
    return Adapter(mat.astype(np.float64), json.loads(buf[pos : pos + n_meta].decode("utf-8")))


def save(a: Adapter, path: str | Path) -> None:
    Path(path).write_bytes(encode(a))


def load(path: str | Path, expected_dim: int | None = None) -> Adapter:
    return decode(Path(path).read_bytes(), expected_dim)
