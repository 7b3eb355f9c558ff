"""Exact cosine k-NN over unit-norm shape embeddings.

The index is a flat scan: similarities are blocked dot products and the top-k
is an exact sort with deterministic tie-breaking (descending similarity, then
ascending shape_id). Entries are canonically ordered by shape_id at build
time, so insertion order never influences results.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FingerprintError, FormatError, ParameterError

NORM_TOL = 1e-6

SIDX_MAGIC = b"SIDX"
SIDX_VERSION = 1
_SIDX_HEADER = struct.Struct("<4sII I 32s")

EMPTY_FINGERPRINT = bytes(32)


@dataclass
class ShapeIndex:
    """Immutable store of (shape_id, class_id, embedding), sorted by shape_id."""

    shape_ids: list[str]
    class_ids: list[str]
    embeddings: np.ndarray  # (n, D) float64
    fingerprint: bytes = EMPTY_FINGERPRINT

    @property
    def size(self) -> int:
        return len(self.shape_ids)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class RetrievalResult:
    """Ranked (shape_id, class_id, similarity) triples for one query."""

    shape_ids: list[str]
    class_ids: list[str]
    similarities: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.shape_ids)


def build_index(entries: Iterable[tuple[str, str, np.ndarray]],
                fingerprint: bytes = EMPTY_FINGERPRINT) -> ShapeIndex:
    """Build an index from (shape_id, class_id, embedding) triples.

    Duplicate shape_ids are a construction error; every embedding must be
    unit-norm and share one dimension.
    """
    items = sorted(entries, key=lambda e: e[0])
    if not items:
        raise ParameterError("cannot build an empty index")
    if len(fingerprint) != 32:
        raise ParameterError("fingerprint must be 32 bytes")
    ids = [e[0] for e in items]
    for a, b in zip(ids, ids[1:]):
        if a == b:
            raise ParameterError(f"duplicate shape_id {a!r}")
    dim = np.asarray(items[0][2]).shape
    if len(dim) != 1:
        raise ParameterError("embeddings must be 1-D vectors")
    emb = np.stack([np.asarray(e[2], dtype=np.float64) for e in items])
    norms = np.linalg.norm(emb, axis=1)
    worst = float(np.max(np.abs(norms - 1.0)))
    if worst > NORM_TOL:
        raise ParameterError(f"embeddings must be unit-norm (max deviation {worst:.2e})")
    return ShapeIndex(
        shape_ids=ids,
        class_ids=[e[1] for e in items],
        embeddings=emb,
        fingerprint=fingerprint,
    )


def query(index: ShapeIndex, q: np.ndarray, k: int) -> RetrievalResult:
    """Exact top-k by inner product (cosine on unit vectors).

    Ties break by ascending shape_id; the result holds min(k, index size)
    entries with non-increasing similarity.
    """
    if k < 1:
        raise ParameterError(f"k must be >= 1, got {k}")
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (index.dim,):
        raise ParameterError(f"query dimension {q.shape} != index dimension ({index.dim},)")
    # einsum reduces each row with the same summation order regardless of row
    # position, so identical embeddings produce identical similarities and tie
    # deterministically (BLAS gemv rounds remainder rows differently).
    sims = np.einsum("ij,j->i", index.embeddings, q)
    k_eff = min(k, index.size)
    # Entries are shape_id-sorted, so a stable sort on -sim breaks ties by id.
    order = np.argsort(-sims, kind="stable")[:k_eff]
    return RetrievalResult(
        shape_ids=[index.shape_ids[i] for i in order],
        class_ids=[index.class_ids[i] for i in order],
        similarities=sims[order],
    )


def verify_fingerprint(index: ShapeIndex, expected: bytes) -> None:
    """Raise FingerprintError unless the index was built from ``expected``."""
    if index.fingerprint != expected:
        raise FingerprintError(
            "index fingerprint does not match the encoder checkpoint; "
            "rebuild the index or drop --strict")


# ---------------------------------------------------------------------------
# SIDX v1 persistence
# ---------------------------------------------------------------------------


def save_index(index: ShapeIndex, path: str | Path) -> None:
    """Write SIDX v1: header, then per entry length-prefixed ids and f32 rows."""
    chunks = [_SIDX_HEADER.pack(SIDX_MAGIC, SIDX_VERSION, index.dim, index.size,
                                index.fingerprint)]
    emb32 = index.embeddings.astype("<f4")
    for i in range(index.size):
        sid = index.shape_ids[i].encode("utf-8")
        cid = index.class_ids[i].encode("utf-8")
        chunks.append(struct.pack("<I", len(sid)) + sid)
        chunks.append(struct.pack("<I", len(cid)) + cid)
        chunks.append(emb32[i].tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    os.replace(tmp, path)


def load_index(path: str | Path) -> ShapeIndex:
    raw = Path(path).read_bytes()
    if len(raw) < _SIDX_HEADER.size:
        raise FormatError(f"{path}: truncated SIDX header")
    magic, version, dim, count, fingerprint = _SIDX_HEADER.unpack_from(raw)
    if magic != SIDX_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != SIDX_VERSION:
        raise FormatError(f"{path}: unsupported SIDX version {version}")
    pos = _SIDX_HEADER.size
    shape_ids: list[str] = []
    class_ids: list[str] = []
    rows = np.empty((count, dim), dtype=np.float64)
    try:
        for i in range(count):
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape_ids.append(raw[pos:pos + n].decode("utf-8"))
            pos += n
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            class_ids.append(raw[pos:pos + n].decode("utf-8"))
            pos += n
            rows[i] = np.frombuffer(raw, dtype="<f4", count=dim, offset=pos)
            pos += dim * 4
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise FormatError(f"{path}: corrupt entry block") from exc
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    if sorted(shape_ids) != shape_ids:
        raise FormatError(f"{path}: entries not in canonical shape_id order")
    return ShapeIndex(shape_ids=shape_ids, class_ids=class_ids,
                      embeddings=rows, fingerprint=fingerprint)
