"""Embedding matrices, relevance judgments and their on-disk formats.

EMB1 layout (all integers little-endian)::

    b"EMB1" | u32 dim | u32 count | count x (u16 len, utf-8 id) | count*dim f32

Normalization is never applied on load; call :func:`normalize` once and
keep the result.
"""

from __future__ import annotations

import logging
import struct
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatchError,
    DuplicateIdError,
    HeaderError,
    NonFiniteError,
    PayloadSizeError,
    QrelsParseError,
    ZeroNormError,
)

logger = logging.getLogger(__name__)

MAGIC = b"EMB1"
NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class EmbeddingMatrix:
    """Row-major stack of float32 vectors with string ids."""

    ids: tuple[str, ...]
    data: np.ndarray
    id_index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 2 or data.shape[1] < 1:
            raise DimensionMismatchError(f"expected a 2-D array with dim >= 1, got shape {data.shape}")
        ids = tuple(self.ids)
        if len(ids) != data.shape[0]:
            raise DimensionMismatchError(f"{len(ids)} ids for {data.shape[0]} rows")
        index: dict[str, int] = {}
        for row, ident in enumerate(ids):
            if ident in index:
                raise DuplicateIdError(f"duplicate id {ident!r}")
            index[ident] = row
        if not np.all(np.isfinite(data)):
            bad = int(np.argwhere(~np.isfinite(data))[0][0])
            raise NonFiniteError(f"non-finite value in row {ids[bad]!r}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "id_index", index)

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    @property
    def count(self) -> int:
        return int(self.data.shape[0])

    def __len__(self) -> int:
        return self.count

    def row(self, ident: str) -> np.ndarray:
        return self.data[self.id_index[ident]]

    def subset(self, ids: Iterable[str]) -> EmbeddingMatrix:
        """Rows for ``ids`` in the given order."""
        ids = list(ids)
        rows = [self.id_index[i] for i in ids]
        return EmbeddingMatrix(ids, self.data[rows])


def normalize(m: EmbeddingMatrix) -> EmbeddingMatrix:
    """L2-normalize every row; zero rows are an error, not silently skipped."""
    x = m.data.astype(np.float64)
    norms = np.linalg.norm(x, axis=1)
    bad = np.flatnonzero(norms <= NORM_FLOOR)
    if bad.size:
        raise ZeroNormError(f"zero-norm vector for id {m.ids[int(bad[0])]!r}")
    return EmbeddingMatrix(m.ids, (x / norms[:, None]).astype(np.float32))


def encode_embeddings(m: EmbeddingMatrix) -> bytes:
    parts = [MAGIC, struct.pack("<II", m.dim, m.count)]
    for ident in m.ids:
        raw = ident.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise HeaderError(f"id too long for EMB1: {ident[:32]!r}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
    parts.append(m.data.astype("<f4", copy=False).tobytes(order="C"))
    return b"".join(parts)


def decode_embeddings(buf: bytes) -> EmbeddingMatrix:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise HeaderError("malformed header: missing EMB1 magic")
    dim, count = struct.unpack_from("<II", buf, 4)
    if dim == 0:
        raise HeaderError("malformed header: dim must be positive")
    pos = 12
    ids = []
    for _ in range(count):
        if pos + 2 > len(buf):
            raise HeaderError("malformed header: id table truncated")
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        if pos + n > len(buf):
            raise HeaderError("malformed header: id table truncated")
        try:
            ids.append(buf[pos : pos + n].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise HeaderError(f"malformed header: id is not utf-8 ({exc})") from None
        pos += n
    expected = count * dim * 4
    if len(buf) - pos != expected:
        raise PayloadSizeError(
            f"payload size mismatch: expected {expected} bytes for {count}x{dim}, found {len(buf) - pos}"
        )
    data = np.frombuffer(buf, dtype="<f4", count=count * dim, offset=pos).reshape(count, dim)
    return EmbeddingMatrix(ids, data.astype(np.float32))


def load_embeddings(path: str | Path) -> EmbeddingMatrix:
    return decode_embeddings(Path(path).read_bytes())


def save_embeddings(m: EmbeddingMatrix, path: str | Path) -> None:
    Path(path).write_bytes(encode_embeddings(m))


@dataclass(frozen=True)
class Qrels:
    """Graded judgments ``query id -> {doc id -> label}``."""

    judgments: Mapping[str, Mapping[str, int]]
    duplicates: int = 0

    def __getitem__(self, qid: str) -> Mapping[str, int]:
        return self.judgments.get(qid, {})

    def __contains__(self, qid: str) -> bool:
        return qid in self.judgments

    def __iter__(self):
        return iter(self.judgments)

    def __len__(self) -> int:
        return len(self.judgments)

    def positives(self, qid: str) -> dict[str, int]:
        """D+(q): docs with label > 0."""
        return {d: y for d, y in self[qid].items() if y > 0}

    def restrict(self, qids: Iterable[str]) -> Qrels:
        keep = set(qids)
        return Qrels({q: dict(j) for q, j in self.judgments.items() if q in keep})


def parse_qrels(lines: Iterable[str]) -> Qrels:
    judgments: dict[str, dict[str, int]] = {}
    duplicates = 0
    for lineno, line in enumerate(lines, start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 4:
            raise QrelsParseError(f"expected 'qid iter docid label', got {line.strip()!r}", lineno)
        qid, _, docid, raw = parts[:4]
        try:
            label = int(raw)
        except ValueError:
            raise QrelsParseError(f"non-integer label {raw!r}", lineno) from None
        if label < 0:
            raise QrelsParseError(f"negative label {label}", lineno)
        per_query = judgments.setdefault(qid, {})
        if docid in per_query:
            duplicates += 1
        per_query[docid] = label
    if duplicates:
        logger.warning("qrels: %d duplicate (qid, docid) pairs, last occurrence kept", duplicates)
    return Qrels(judgments, duplicates)


def load_qrels(path: str | Path) -> Qrels:
    with open(path, encoding="utf-8") as fh:
        return parse_qrels(fh)


def format_qrels(qrels: Qrels) -> str:
    lines = []
    for qid in qrels.judgments:
        for docid, label in qrels.judgments[qid].items():
            lines.append(f"{qid} 0 {docid} {label}\n")
    return "".join(lines)


def save_qrels(qrels: Qrels, path: str | Path) -> None:
    Path(path).write_text(format_qrels(qrels), encoding="utf-8")
