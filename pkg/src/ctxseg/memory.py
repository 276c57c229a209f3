"""Per-domain external memory: one record {q, t, g?} per observed image.

Retrieval is an exact linear scan with Euclidean distance on the query features,
ties broken by insertion order.
"""

from __future__ import annotations

import dataclasses
import hashlib
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (DimensionError, DuplicateIdError, MemoryChecksumError, MemoryFormatError,
                     MemoryTruncatedError, MemoryVersionError, VariantMismatchError)

TEXTURE_ONLY = "texture-only"
TEXTURE_SHAPE = "texture+shape"
VARIANTS = (TEXTURE_ONLY, TEXTURE_SHAPE)
AGGREGATIONS = ("average", "sum", "concat")

MAGIC = b"CTXM"
FORMAT_VERSION = 1


def _vector(x, name) -> np.ndarray:
    v = np.array(x, dtype=np.float32).reshape(-1)
    v.flags.writeable = False
    return v


@dataclass(frozen=True)
class MemoryRecord:
    id: str
    q: np.ndarray
    t: np.ndarray
    g: Optional[np.ndarray] = None
    seq: int = -1

    def __post_init__(self):
        object.__setattr__(self, "q", _vector(self.q, "q"))
        object.__setattr__(self, "t", _vector(self.t, "t"))
        if self.g is not None:
            object.__setattr__(self, "g", _vector(self.g, "g"))

    @property
    def context_row(self) -> np.ndarray:
        return self.t if self.g is None else np.concatenate([self.t, self.g])

    def __eq__(self, other):
        if not isinstance(other, MemoryRecord):
            return NotImplemented
        same_g = (self.g is None and other.g is None) or (
            self.g is not None and other.g is not None and _bits_equal(self.g, other.g))
        return (self.id == other.id and self.seq == other.seq and same_g
                and _bits_equal(self.q, other.q) and _bits_equal(self.t, other.t))

    __hash__ = None


def _bits_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass(frozen=True)
class ContextQueryResult:
    support_ids: tuple
    distances: tuple
    context_matrix: np.ndarray
    aggregated: np.ndarray


def aggregate(context_matrix: Sequence, method: str = "average", T: Optional[int] = None) -> np.ndarray:
    """Combine context rows: elementwise mean, elementwise sum, or zero-padded concatenation.

    ``concat`` always returns ``T * row_width`` entries, so ``T`` is required for it.
    """
    if method not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {method!r}; expected one of {AGGREGATIONS}")
    rows = [np.asarray(r, dtype=np.float32).reshape(-1) for r in context_matrix]
    if not rows:
        raise ValueError("aggregate needs at least one context row")
    width = rows[0].shape[0]
    if any(r.shape[0] != width for r in rows):
        raise DimensionError("ragged context rows")
    mat = np.stack(rows)
    if method == "average":
        return mat.mean(axis=0, dtype=np.float64).astype(np.float32)
    if method == "sum":
        return mat.sum(axis=0, dtype=np.float64).astype(np.float32)
    if T is None or T < len(rows):
        raise ValueError("concat aggregation needs T >= number of rows")
    out = np.zeros(T * width, dtype=np.float32)
    out[: mat.size] = mat.ravel()
    return out


class DomainMemory:
    """Records for one domain. Many readers or one writer at a time."""

    def __init__(self, domain_id: str, variant: str, dims: tuple, extractor_id: str,
                 capacity: Optional[int] = None):
        if variant not in VARIANTS:
            raise ValueError(f"unknown memory variant {variant!r}")
        d_q, d_t, d_g = (tuple(dims) + (None,))[:3]
        if variant == TEXTURE_SHAPE and not d_g:
            raise DimensionError("texture+shape memory needs a shape dimension")
        if variant == TEXTURE_ONLY:
            d_g = None
        if capacity is not None and capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.domain_id = domain_id
        self.variant = variant
        self.dims = (int(d_q), int(d_t), None if d_g is None else int(d_g))
        self.extractor_id = extractor_id
        self.capacity = capacity
        self._records: list[MemoryRecord] = []
        self._next_seq = 0
        self._lock = threading.Lock()
        self._snapshot = None

    # -- properties -----------------------------------------------------
    @property
    def records(self) -> tuple:
        return tuple(self._records)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self._records]

    @property
    def context_width(self) -> int:
        d_q, d_t, d_g = self.dims
        return d_t + (d_g or 0)

    def __len__(self):
        return len(self._records)

    def __contains__(self, record_id):
        return any(r.id == record_id for r in self._records)

    def __eq__(self, other):
        if not isinstance(other, DomainMemory):
            return NotImplemented
        return ((self.domain_id, self.variant, self.dims, self.extractor_id, self.capacity,
                 self._next_seq) ==
                (other.domain_id, other.variant, other.dims, other.extractor_id, other.capacity,
                 other._next_seq)
                and self._records == other._records)

    __hash__ = None

    def __repr__(self):
        return (f"DomainMemory(domain_id={self.domain_id!r}, variant={self.variant!r}, "
                f"records={len(self)}, dims={self.dims})")

    # -- mutation -------------------------------------------------------
    def _check(self, record: MemoryRecord):
        d_q, d_t, d_g = self.dims
        if self.variant == TEXTURE_SHAPE and record.g is None:
            raise VariantMismatchError(f"record {record.id}: texture+shape memory needs a shape feature")
        if self.variant == TEXTURE_ONLY and record.g is not None:
            raise VariantMismatchError(f"record {record.id}: texture-only memory cannot hold a shape feature")
        if record.q.shape[0] != d_q or record.t.shape[0] != d_t:
            raise DimensionError(f"record {record.id}: dims ({record.q.shape[0]}, {record.t.shape[0]}) "
                                 f"!= memory ({d_q}, {d_t})")
        if record.g is not None and record.g.shape[0] != d_g:
            raise DimensionError(f"record {record.id}: shape dim {record.g.shape[0]} != {d_g}")

    def insert(self, record: MemoryRecord) -> MemoryRecord:
        """Append ``record`` with the next sequence number; evicts the oldest when at capacity."""
        self._check(record)
        with self._lock:
            if record.id in self:
                raise DuplicateIdError(f"duplicate record id {record.id!r}")
            stored = dataclasses.replace(record, seq=self._next_seq)
            records = self._records + [stored]
            if self.capacity is not None and len(records) > self.capacity:
                records = records[len(records) - self.capacity:]
            self._records = records
            self._next_seq += 1
            self._snapshot = None
        return stored

    def truncated(self, n: int) -> "DomainMemory":
        """Copy holding only the first ``n`` records by insertion order."""
        out = DomainMemory(self.domain_id, self.variant, self.dims, self.extractor_id, self.capacity)
        out._records = list(self._records[:n])
        out._next_seq = self._next_seq
        return out

    # -- retrieval ------------------------------------------------------
    def _arrays(self):
        with self._lock:
            snap = self._snapshot
            if snap is None or snap[0] is not self._records:
                records = self._records
                if records:
                    queries = np.stack([r.q for r in records]).astype(np.float64)
                    context = np.stack([r.context_row for r in records])
                else:
                    queries = np.zeros((0, self.dims[0]))
                    context = np.zeros((0, self.context_width), dtype=np.float32)
                snap = (records, queries, context)
                self._snapshot = snap
            return snap

    def retrieve(self, q, T: int, exclude_id: Optional[str] = None,
                 method: str = "average") -> ContextQueryResult:
        if T < 1:
            raise ValueError("T must be >= 1")
        q = np.asarray(q, dtype=np.float64).reshape(-1)
        if q.shape[0] != self.dims[0]:
            raise DimensionError(f"query dim {q.shape[0]} != memory query dim {self.dims[0]}")
        records, queries, context = self._arrays()
        keep = np.array([r.id != exclude_id for r in records], dtype=bool)
        idx = np.flatnonzero(keep)
        if idx.size == 0:
            width = self.context_width * (T if method == "concat" else 1)
            return ContextQueryResult((), (), np.zeros((0, self.context_width), np.float32),
                                      np.zeros(width, dtype=np.float32))
        diff = queries[idx] - q
        dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
        seqs = np.array([records[i].seq for i in idx])
        order = np.lexsort((seqs, dist))[:T]
        chosen = idx[order]
        matrix = context[chosen]
        return ContextQueryResult(
            support_ids=tuple(records[i].id for i in chosen),
            distances=tuple(float(d) for d in dist[order]),
            context_matrix=matrix,
            aggregated=aggregate(matrix, method, T),
        )


def insert(memory: DomainMemory, record: MemoryRecord) -> DomainMemory:
    memory.insert(record)
    return memory


def retrieve_context(memory: DomainMemory, q, T: int, exclude_id: Optional[str] = None,
                     method: str = "average") -> ContextQueryResult:
    return memory.retrieve(q, T, exclude_id, method)


# -- persistence ------------------------------------------------------------

def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def memory_to_bytes(memory: DomainMemory) -> bytes:
    d_q, d_t, d_g = memory.dims
    parts = [MAGIC, struct.pack("<H", FORMAT_VERSION),
             _pack_str(memory.domain_id), _pack_str(memory.variant), _pack_str(memory.extractor_id),
             struct.pack("<IIIIQI", d_q, d_t, d_g or 0, memory.capacity or 0, memory._next_seq,
                         len(memory))]
    for r in memory.records:
        parts.append(_pack_str(r.id))
        parts.append(struct.pack("<Q", r.seq))
        parts.append(r.q.astype("<f4").tobytes())
        parts.append(r.t.astype("<f4").tobytes())
        if r.g is not None:
            parts.append(r.g.astype("<f4").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise MemoryTruncatedError(f"memory file truncated at byte {len(self.buf)} (needed {self.pos + n})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MemoryFormatError(f"invalid string in memory file: {exc}") from exc

    def floats(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float32)


def memory_from_bytes(buf: bytes, expected_variant: Optional[str] = None) -> DomainMemory:
    if buf[:4] != MAGIC:
        raise MemoryFormatError("not a memory file (bad magic bytes)")
    rd = _Reader(buf)
    rd.take(4)
    (version,) = rd.unpack("<H")
    if version != FORMAT_VERSION:
        raise MemoryVersionError(f"memory file version {version}, this build reads {FORMAT_VERSION}")
    domain_id, variant, extractor_id = rd.string(), rd.string(), rd.string()
    if variant not in VARIANTS:
        raise MemoryFormatError(f"unknown variant {variant!r} in memory file")
    d_q, d_t, d_g, capacity, next_seq, count = rd.unpack("<IIIIQI")
    records = []
    for _ in range(count):
        rid = rd.string()
        (seq,) = rd.unpack("<Q")
        q, t = rd.floats(d_q), rd.floats(d_t)
        g = rd.floats(d_g) if variant == TEXTURE_SHAPE else None
        records.append(MemoryRecord(rid, q, t, g, seq))
    checksum = rd.take(32) if len(buf) - rd.pos >= 32 else None
    if checksum is None:
        raise MemoryTruncatedError("memory file truncated: checksum missing")
    if rd.pos != len(buf):
        raise MemoryFormatError(f"{len(buf) - rd.pos} trailing bytes after checksum")
    if hashlib.sha256(buf[:-32]).digest() != checksum:
        raise MemoryChecksumError("memory file checksum mismatch")
    if expected_variant is not None and variant != expected_variant:
        raise VariantMismatchError(f"memory file holds a {variant!r} memory, expected {expected_variant!r}")
    memory = DomainMemory(domain_id, variant, (d_q, d_t, d_g or None), extractor_id, capacity or None)
    memory._records = records
    memory._next_seq = next_seq
    return memory


def save_memory(memory: DomainMemory, path) -> Path:
    path = Path(path)
    path.write_bytes(memory_to_bytes(memory))
    return path


def load_memory(path, expected_variant: Optional[str] = None) -> DomainMemory:
    return memory_from_bytes(Path(path).read_bytes(), expected_variant)
