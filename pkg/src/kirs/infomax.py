"""Infomax table ``d = [e, s]`` per entity and relation, and its binary file format.

Layout (little-endian)::

    b"KIRS" | version u32 | semantic dim u32 | structural dim u32
    | entity count u64 | relation count u64
    | entity records    (id u64, structural+semantic f32 values)
    | relation records  (id u64, structural+semantic f32 values)
    | plane records     (id u64, semantic-dim f32 values; all zeros = no plane)
    | metadata length u32 | metadata JSON (utf-8)
    | CRC32 u32 of every preceding byte

Model checkpoints use the same record encoding under the magic ``b"KIRC"``
with named sections; see :func:`save_checkpoint`.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"KIRS"
CHECKPOINT_MAGIC = b"KIRC"
VERSION = 1
_HEADER = struct.Struct("<4sIIIQQ")
_U32 = struct.Struct("<I")


class StoreFormatError(ValueError):
    """Base class for unreadable store or checkpoint files."""


class BadMagicError(StoreFormatError):
    pass


class VersionMismatchError(StoreFormatError):
    def __init__(self, found, expected=VERSION):
        super().__init__(f"file format version {found}, this build reads {expected}")
        self.found = found


class TruncatedFileError(StoreFormatError):
    def __init__(self, section, record_index):
        super().__init__(f"file ends inside {section} record {record_index}")
        self.section = section
        self.record_index = record_index


class ChecksumError(StoreFormatError):
    pass


def _record_dtype(dim, width=4):
    return np.dtype([("id", "<u8"), ("v", f"<f{width}", (dim,))])


def _pack_records(ids, values, width=4):
    rec = np.empty(len(ids), dtype=_record_dtype(values.shape[1], width))
    rec["id"] = ids
    rec["v"] = values
    return rec.tobytes()


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, section, index=0):
        if self.pos + n > len(self.data):
            raise TruncatedFileError(section, index)
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def records(self, count, dim, section, width=4):
        dtype = _record_dtype(dim, width)
        available = (len(self.data) - self.pos) // dtype.itemsize
        if available < count:
            raise TruncatedFileError(section, available)
        rec = np.frombuffer(self.take(count * dtype.itemsize, section), dtype=dtype)
        return rec["id"].astype(np.int64), rec["v"].copy()

    def trailer(self, section):
        (n,) = _U32.unpack(self.take(4, section))
        meta = json.loads(bytes(self.take(n, section)).decode("utf-8"))
        body_end = self.pos
        (crc,) = _U32.unpack(self.take(4, "checksum"))
        if zlib.crc32(self.data[:body_end]) != crc:
            raise ChecksumError("CRC32 mismatch")
        if self.pos != len(self.data):
            raise StoreFormatError(f"{len(self.data) - self.pos} trailing bytes after checksum")
        return meta


def _check_magic(head, magic):
    if head == magic:
        return
    if len(head) < 4 and magic.startswith(head):
        raise TruncatedFileError("header", 0)
    raise BadMagicError(f"expected magic {magic!r}, found {head!r}")


def _trailer_bytes(body, metadata):
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    body = body + _U32.pack(len(meta)) + meta
    return body + _U32.pack(zlib.crc32(body))


@dataclass(eq=False)
class InfomaxStore:
    """Frozen-after-build lookup table; vectors are float32."""

    structural_dim: int
    semantic_dim: int
    entity_ids: np.ndarray
    entity_vectors: np.ndarray
    relation_ids: np.ndarray
    relation_vectors: np.ndarray
    plane_vectors: np.ndarray  # (n_relations, semantic_dim), aligned with relation_ids
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        dim = self.dim
        for name in ("entity_vectors", "relation_vectors"):
            arr = getattr(self, name)
            if arr.ndim != 2 or arr.shape[1] != dim:
                raise ValueError(f"{name} has shape {arr.shape}, expected (*, {dim})")
        if self.plane_vectors.shape != (len(self.relation_ids), self.semantic_dim):
            raise ValueError("plane vectors must be (n_relations, semantic_dim)")
        if len(self.entity_ids) != len(self.entity_vectors):
            raise ValueError("entity ids and vectors differ in length")
        self._entity_row = {int(k): n for n, k in enumerate(self.entity_ids)}
        self._relation_row = {int(k): n for n, k in enumerate(self.relation_ids)}

    @property
    def dim(self):
        return self.structural_dim + self.semantic_dim

    @property
    def n_entities(self):
        return len(self.entity_ids)

    @property
    def n_relations(self):
        return len(self.relation_ids)

    def __eq__(self, other):
        if not isinstance(other, InfomaxStore):
            return NotImplemented
        same = (self.structural_dim, self.semantic_dim, self.metadata) == (
            other.structural_dim, other.semantic_dim, other.metadata
        )
        arrays = ("entity_ids", "entity_vectors", "relation_ids", "relation_vectors", "plane_vectors")
        return same and all(
            getattr(self, a).dtype == getattr(other, a).dtype
            and getattr(self, a).shape == getattr(other, a).shape
            and getattr(self, a).tobytes() == getattr(other, a).tobytes()
            for a in arrays
        )

    def lookup(self, kind, key):
        """``(vector, miss)``; absent ids (including ``None``/``-1`` links) give zeros."""
        rows, table = {
            "entity": (self._entity_row, self.entity_vectors),
            "relation": (self._relation_row, self.relation_vectors),
        }[kind]
        row = rows.get(-1 if key is None else int(key))
        if row is None:
            return np.zeros(self.dim, dtype=np.float32), True
        return table[row].copy(), False

    def entity_matrix(self, entity_ids):
        """Rows for ``entity_ids`` with zeros where the id is ``-1`` or absent."""
        out = np.zeros((len(entity_ids), self.dim), dtype=np.float32)
        for n, k in enumerate(np.asarray(entity_ids).tolist()):
            row = self._entity_row.get(k)
            if row is not None:
                out[n] = self.entity_vectors[row]
        return out

    def relation_matrix(self, relation_ids=None):
        ids = range(self.n_relations) if relation_ids is None else relation_ids
        out = np.zeros((len(ids), self.dim), dtype=np.float32)
        for n, r in enumerate(ids):
            out[n] = self.lookup("relation", r)[0]
        return out

    def plane_matrix(self, relation_ids=None):
        """Planes padded to full width as ``[0_e, w_s]``."""
        ids = range(self.n_relations) if relation_ids is None else relation_ids
        out = np.zeros((len(ids), self.dim), dtype=np.float32)
        for n, r in enumerate(ids):
            row = self._relation_row.get(int(r))
            if row is not None:
                out[n, self.structural_dim :] = self.plane_vectors[row]
        return out

    def half_scales(self, target_norm):
        """Factors taking the mean nonzero entity-row norm of each half to ``target_norm``."""
        out = []
        for cols in (slice(0, self.structural_dim), slice(self.structural_dim, None)):
            norms = np.linalg.norm(self.entity_vectors[:, cols].astype(np.float64), axis=1)
            norms = norms[norms > 0]
            out.append(target_norm / norms.mean() if len(norms) else 1.0)
        return tuple(out)

    def rescaled(self, target_norm):
        """Copy with each half scaled by :meth:`half_scales`; planes are unchanged."""
        f_st, f_sem = self.half_scales(target_norm)
        factor = np.concatenate([np.full(self.structural_dim, f_st), np.full(self.semantic_dim, f_sem)])
        f32 = lambda a: (a.astype(np.float64) * factor).astype(np.float32)
        meta = dict(self.metadata, rescaled_to=target_norm)
        return InfomaxStore(
            self.structural_dim, self.semantic_dim, self.entity_ids, f32(self.entity_vectors),
            self.relation_ids, f32(self.relation_vectors), self.plane_vectors, meta,
        )

    def to_bytes(self):
        body = _HEADER.pack(
            MAGIC, VERSION, self.semantic_dim, self.structural_dim, self.n_entities, self.n_relations
        )
        body += _pack_records(self.entity_ids, self.entity_vectors)
        body += _pack_records(self.relation_ids, self.relation_vectors)
        body += _pack_records(self.relation_ids, self.plane_vectors)
        return _trailer_bytes(body, self.metadata)

    @classmethod
    def from_bytes(cls, data):
        data = memoryview(data).cast("B")
        _check_magic(bytes(data[:4]), MAGIC)
        r = _Reader(data)
        if len(data) >= 8:
            (version,) = _U32.unpack(data[4:8])
            if version != VERSION:
                raise VersionMismatchError(version)
        _, _, sem, st, n_ent, n_rel = _HEADER.unpack(r.take(_HEADER.size, "header"))
        dim = sem + st
        e_ids, e_vec = r.records(n_ent, dim, "entity")
        r_ids, r_vec = r.records(n_rel, dim, "relation")
        p_ids, p_vec = r.records(n_rel, sem, "plane")
        meta = r.trailer("metadata")
        if not np.array_equal(p_ids, r_ids):
            raise StoreFormatError("plane records do not follow relation order")
        return cls(st, sem, e_ids, e_vec, r_ids, r_vec, p_vec, meta)


def save(store, path):
    Path(path).write_bytes(store.to_bytes())


def load(path):
    return InfomaxStore.from_bytes(Path(path).read_bytes())


def _half(table, attr, n, dim, label, what):
    if table is None:
        return np.zeros((n, dim)), np.ones(n, dtype=bool)
    vec = np.asarray(getattr(table, attr), dtype=np.float64)
    if vec.shape != (n, dim):
        raise ValueError(f"{label} {what} table is {vec.shape}, expected {(n, dim)}")
    seen = getattr(table, "entity_seen", None) if attr == "entity_vectors" else None
    if seen is None:
        seen = np.ones(n, dtype=bool)
    return np.where(seen[:, None], vec, 0.0), np.asarray(seen, dtype=bool)


def build(structural, semantic, structural_dim=None, semantic_dim=None, seed=None, sources=None):
    """Concatenate ``[e, s]`` for every entity and relation id.

    Either table may be ``None`` (an ablated encoder); its half is then zeros
    of ``structural_dim``/``semantic_dim``. Entities that a table never saw
    get zeros in that half and are reported once in a warning.
    """
    tables = [t for t in (structural, semantic) if t is not None]
    if not tables:
        raise ValueError("need at least one of the structural and semantic tables")
    st_dim = structural.entity_vectors.shape[1] if structural is not None else structural_dim
    sem_dim = semantic.entity_vectors.shape[1] if semantic is not None else semantic_dim
    for given, actual, label in ((structural_dim, st_dim, "structural"), (semantic_dim, sem_dim, "semantic")):
        if actual is None:
            raise ValueError(f"{label}_dim is required when the {label} table is missing")
        if given is not None and given != actual:
            raise ValueError(f"{label} dim {actual} disagrees with requested {given}")
    n_ent = tables[0].entity_vectors.shape[0]
    n_rel = tables[0].relation_vectors.shape[0]

    e_st, seen_st = _half(structural, "entity_vectors", n_ent, st_dim, "structural", "entity")
    e_sem, seen_sem = _half(semantic, "entity_vectors", n_ent, sem_dim, "semantic", "entity")
    r_st, _ = _half(structural, "relation_vectors", n_rel, st_dim, "structural", "relation")
    r_sem, _ = _half(semantic, "relation_vectors", n_rel, sem_dim, "semantic", "relation")
    for label, seen in (("structural", seen_st), ("semantic", seen_sem)):
        if not seen.all():
            logger.warning("%d entities missing from the %s table; zero-filled", (~seen).sum(), label)

    planes = np.zeros((n_rel, sem_dim))
    if semantic is not None and getattr(semantic, "relation_planes", None) is not None:
        planes = np.asarray(semantic.relation_planes, dtype=np.float64)
    metadata = {
        "structural_dim": int(st_dim),
        "semantic_dim": int(sem_dim),
        "n_entities": int(n_ent),
        "n_relations": int(n_rel),
        "seed": seed,
        "sources": dict(sources or {}),
    }
    f32 = lambda a: np.ascontiguousarray(a, dtype=np.float32)
    return InfomaxStore(
        int(st_dim), int(sem_dim),
        np.arange(n_ent, dtype=np.int64), f32(np.hstack([e_st, e_sem])),
        np.arange(n_rel, dtype=np.int64), f32(np.hstack([r_st, r_sem])),
        f32(planes), metadata,
    )


def file_checksum(path):
    """CRC32 of a file's bytes, formatted for the ``sources`` metadata field."""
    return f"{zlib.crc32(Path(path).read_bytes()):08x}"


# -- model checkpoints ------------------------------------------------------

_SECTION = struct.Struct("<HQIB")  # name length, rows, cols, value width


def checkpoint_bytes(tables, metadata=None):
    """Serialize named 2-D tables; float64 tables keep 8-byte values."""
    body = CHECKPOINT_MAGIC + _U32.pack(VERSION) + _U32.pack(len(tables))
    for name, arr in tables.items():
        arr = np.asarray(arr)
        if arr.ndim == 1:
            arr = arr[:, None]
        width = 8 if arr.dtype == np.float64 else 4
        raw = name.encode("utf-8")
        body += _SECTION.pack(len(raw), arr.shape[0], arr.shape[1], width) + raw
        body += _pack_records(np.arange(arr.shape[0]), arr, width)
    return _trailer_bytes(body, metadata or {})


def checkpoint_from_bytes(data):
    data = memoryview(data).cast("B")
    _check_magic(bytes(data[:4]), CHECKPOINT_MAGIC)
    r = _Reader(data)
    r.take(4, "header")
    (version,) = _U32.unpack(r.take(4, "header"))
    if version != VERSION:
        raise VersionMismatchError(version)
    (n_sections,) = _U32.unpack(r.take(4, "header"))
    tables = {}
    for k in range(n_sections):
        name_len, rows, cols, width = _SECTION.unpack(r.take(_SECTION.size, "section header", k))
        name = bytes(r.take(name_len, "section header", k)).decode("utf-8")
        _, values = r.records(rows, cols, name, width)
        tables[name] = values
    return tables, r.trailer("metadata")


def save_checkpoint(path, tables, metadata=None):
    Path(path).write_bytes(checkpoint_bytes(tables, metadata))


def load_checkpoint(path):
    """``(tables, metadata)`` as written by :func:`save_checkpoint`."""
    return checkpoint_from_bytes(Path(path).read_bytes())
