import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kirs import infomax
from kirs.infomax import (
    BadMagicError, ChecksumError, InfomaxStore, TruncatedFileError, VersionMismatchError,
)
from kirs.semantic import SemanticTable
from kirs.structural import StructuralTable


def tables(n_ent=3, n_rel=2, st_dim=200, sem_dim=768, seed=0):
    rng = np.random.default_rng(seed)
    planes = rng.normal(size=(n_rel, sem_dim))
    planes /= np.linalg.norm(planes, axis=1, keepdims=True)
    s = StructuralTable(rng.normal(size=(n_ent, st_dim)), rng.normal(size=(n_rel, st_dim)))
    m = SemanticTable(rng.normal(size=(n_ent, sem_dim)), rng.normal(size=(n_rel, sem_dim)), planes)
    return s, m


def test_build_concatenates_reference_dims():
    s, m = tables()
    store = infomax.build(s, m, seed=7)
    assert store.dim == 968 and store.entity_vectors.shape == (3, 968)
    np.testing.assert_array_equal(store.entity_vectors[1, :200], s.entity_vectors[1].astype(np.float32))
    np.testing.assert_array_equal(store.entity_vectors[1, 200:], m.entity_vectors[1].astype(np.float32))
    np.testing.assert_array_equal(store.relation_vectors[0, 200:], m.relation_vectors[0].astype(np.float32))
    assert store.metadata["structural_dim"] == 200 and store.metadata["seed"] == 7


def test_build_zero_fills_missing_semantic_half(caplog):
    s, m = tables()
    m.entity_seen = np.array([True, False, True])
    store = infomax.build(s, m)
    assert not store.entity_vectors[1, 200:].any()
    assert store.entity_vectors[1, :200].any()
    assert "missing from the semantic table" in caplog.text


def test_build_with_ablated_half():
    s, _ = tables()
    store = infomax.build(s, None, semantic_dim=768)
    assert store.dim == 968 and not store.entity_vectors[:, 200:].any()
    assert not store.plane_vectors.any()
    with pytest.raises(ValueError):
        infomax.build(s, None)


def test_build_dimension_disagreement():
    s, m = tables()
    with pytest.raises(ValueError):
        infomax.build(s, m, structural_dim=100)


def test_build_is_deterministic():
    s, m = tables()
    assert infomax.build(s, m, seed=1) == infomax.build(s, m, seed=1)


def test_round_trip_small(tmp_path):
    store = infomax.build(*tables(), seed=3, sources={"kg": "00ff"})
    infomax.save(store, tmp_path / "d.kirs")
    again = infomax.load(tmp_path / "d.kirs")
    assert again == store
    assert again.metadata["sources"] == {"kg": "00ff"}


def test_byte_layout():
    store = infomax.build(*tables(n_ent=2, n_rel=1, st_dim=2, sem_dim=3))
    raw = store.to_bytes()
    magic, version, sem, stru, n_ent, n_rel = struct.unpack_from("<4sIIIQQ", raw)
    assert (magic, version, sem, stru, n_ent, n_rel) == (b"KIRS", 1, 3, 2, 2, 1)
    off = 32
    rec = 8 + 4 * 5
    ident, = struct.unpack_from("<Q", raw, off + rec)
    vals = struct.unpack_from("<5f", raw, off + rec + 8)
    assert ident == 1
    np.testing.assert_array_equal(vals, store.entity_vectors[1])
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[:-4])


@settings(max_examples=25, deadline=None)
@given(
    n_ent=st.integers(0, 10_000),
    n_rel=st.integers(0, 20),
    st_dim=st.integers(0, 6),
    sem_dim=st.integers(1, 6),
    seed=st.integers(0, 2**16),
)
def test_round_trip_property(n_ent, n_rel, st_dim, sem_dim, seed):
    s, m = tables(n_ent, n_rel, st_dim, sem_dim, seed)
    store = infomax.build(s, m, seed=seed)
    assert InfomaxStore.from_bytes(store.to_bytes()) == store


def test_lookup_hits_and_misses():
    store = infomax.build(*tables())
    vec, miss = store.lookup("entity", 2)
    assert not miss
    np.testing.assert_array_equal(vec, store.entity_vectors[2])
    for key in (99, -1, None):
        vec, miss = store.lookup("entity", key)
        assert miss and vec.shape == (968,) and not vec.any()
    assert store.lookup("relation", 5)[1]
    mat = store.entity_matrix([2, -1])
    np.testing.assert_array_equal(mat[0], store.entity_vectors[2])
    assert not mat[1].any()


def test_plane_matrix_pads_structural_half():
    s, m = tables(st_dim=4, sem_dim=3)
    store = infomax.build(s, m)
    pm = store.plane_matrix()
    assert pm.shape == (2, 7) and not pm[:, :4].any()
    np.testing.assert_allclose(np.linalg.norm(pm, axis=1), 1.0, rtol=1e-6)


def test_bad_magic():
    raw = bytearray(infomax.build(*tables(st_dim=2, sem_dim=2)).to_bytes())
    raw[:4] = b"NOPE"
    with pytest.raises(BadMagicError):
        InfomaxStore.from_bytes(bytes(raw))


def test_version_bump():
    raw = bytearray(infomax.build(*tables(st_dim=2, sem_dim=2)).to_bytes())
    raw[4:8] = struct.pack("<I", 2)
    with pytest.raises(VersionMismatchError) as err:
        InfomaxStore.from_bytes(bytes(raw))
    assert err.value.found == 2


def test_truncation_names_record():
    store = infomax.build(*tables(n_ent=5, st_dim=2, sem_dim=2))
    raw = store.to_bytes()
    rec = 8 + 4 * 4
    cut = 32 + 3 * rec + 5  # inside entity record 3
    with pytest.raises(TruncatedFileError) as err:
        InfomaxStore.from_bytes(raw[:cut])
    assert (err.value.section, err.value.record_index) == ("entity", 3)
    with pytest.raises(TruncatedFileError):
        InfomaxStore.from_bytes(raw[:2])
    with pytest.raises(TruncatedFileError):
        InfomaxStore.from_bytes(raw[:-2])


def test_checksum_flip():
    raw = bytearray(infomax.build(*tables(st_dim=2, sem_dim=2)).to_bytes())
    raw[40] ^= 0x01
    with pytest.raises(ChecksumError):
        InfomaxStore.from_bytes(bytes(raw))


def test_error_classes_are_distinct():
    classes = {BadMagicError, VersionMismatchError, TruncatedFileError, ChecksumError}
    assert all(not issubclass(a, b) for a in classes for b in classes if a is not b)


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tabs = {
        "user": rng.normal(size=(4, 3)),
        "item": rng.normal(size=(5, 3)).astype(np.float32),
        "plane": rng.normal(size=(2, 3)),
    }
    infomax.save_checkpoint(tmp_path / "m.ckpt", tabs, {"augmented": True})
    got, meta = infomax.load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"augmented": True} and list(got) == list(tabs)
    for k in tabs:
        assert got[k].dtype == tabs[k].dtype
        assert got[k].tobytes() == tabs[k].tobytes()


def test_checkpoint_errors(tmp_path):
    raw = infomax.checkpoint_bytes({"w": np.ones((3, 2))})
    with pytest.raises(BadMagicError):
        infomax.checkpoint_from_bytes(b"KIRS" + raw[4:])
    with pytest.raises(TruncatedFileError):
        infomax.checkpoint_from_bytes(raw[:30])
    bumped = bytearray(raw)
    bumped[4:8] = struct.pack("<I", 9)
    with pytest.raises(VersionMismatchError):
        infomax.checkpoint_from_bytes(bytes(bumped))
