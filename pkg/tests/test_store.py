"""Embedding store: persistence format, normalization, exact top-k."""

import numpy as np
import pytest

from querylift.errors import ContractError, FormatError
from querylift.store import (
    EmbeddingMatrix,
    load_matrix,
    normalize_rows,
    save_matrix,
    top_k,
)


def random_matrix(rng, count, dim, prefix="d"):
    data = rng.standard_normal((count, dim))
    return EmbeddingMatrix([f"{prefix}{i:04d}" for i in range(count)], normalize_rows(data))


class TestFormat:
    def test_empty_matrix_is_16_byte_file(self, tmp_path):
        m = EmbeddingMatrix([], np.zeros((0, 4), dtype=np.float32))
        path = tmp_path / "e.emb"
        save_matrix(m, path)
        assert path.stat().st_size == 16
        assert (tmp_path / "e.emb.ids.jsonl").read_text() == ""

    def test_known_payload_bytes(self, tmp_path):
        m = EmbeddingMatrix(["a"], np.array([[1.0, 0.0]], dtype=np.float32))
        path = tmp_path / "one.emb"
        save_matrix(m, path)
        blob = path.read_bytes()
        assert blob[:4] == b"EMB1"
        assert blob[16:] == bytes.fromhex("0000803f00000000")

    def test_round_trip_identity(self, tmp_path):
        rng = np.random.default_rng(0)
        m = random_matrix(rng, 17, 5)
        path = tmp_path / "m.emb"
        save_matrix(m, path)
        back = load_matrix(path)
        assert back.ids == m.ids
        assert back.dim == 5 and back.count == 17
        assert np.array_equal(back.data, m.data)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.emb"
        save_matrix(EmbeddingMatrix(["a"], np.ones((1, 2), dtype=np.float32)), path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"EMB2"
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="magic"):
            load_matrix(path)

    def test_truncated_payload_rejected(self, tmp_path):
        path = tmp_path / "t.emb"
        save_matrix(EmbeddingMatrix(["a", "b"], np.ones((2, 3), dtype=np.float32)), path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-4])
        with pytest.raises(FormatError, match="payload length"):
            load_matrix(path)

    def test_duplicate_ids_rejected(self, tmp_path):
        path = tmp_path / "d.emb"
        save_matrix(EmbeddingMatrix(["a", "b"], np.ones((2, 2), dtype=np.float32)), path)
        sidecar = tmp_path / "d.emb.ids.jsonl"
        sidecar.write_text('{"row": 0, "id": "a"}\n{"row": 1, "id": "a"}\n')
        with pytest.raises(FormatError, match="duplicate"):
            load_matrix(path)

    def test_loaded_matrix_is_read_only(self, tmp_path):
        path = tmp_path / "ro.emb"
        save_matrix(EmbeddingMatrix(["a"], np.ones((1, 2), dtype=np.float32)), path)
        m = load_matrix(path)
        with pytest.raises(ValueError):
            m.data[0, 0] = 9.0


class TestNormalize:
    def test_rows_unit_norm(self):
        rng = np.random.default_rng(1)
        m = EmbeddingMatrix([f"x{i}" for i in range(10)], rng.standard_normal((10, 7)).astype(np.float32))
        norms = np.linalg.norm(m.normalized().data.astype(np.float64), axis=1)
        assert np.max(np.abs(norms - 1.0)) <= 1e-5

    def test_zero_row_rejected(self):
        data = np.zeros((2, 3), dtype=np.float32)
        data[0, 0] = 1.0
        with pytest.raises(ContractError, match="zero vector"):
            normalize_rows(data)

    def test_unique_ids_enforced(self):
        with pytest.raises(ContractError, match="unique"):
            EmbeddingMatrix(["a", "a"], np.ones((2, 2), dtype=np.float32))


class TestTopK:
    def test_self_similarity(self):
        rng = np.random.default_rng(2)
        docs = random_matrix(rng, 8, 6)
        queries = EmbeddingMatrix(["q0"], docs.data[3:4].copy())
        hits = top_k(queries, docs, 1)[0]
        assert hits[0].id == docs.ids[3]
        assert hits[0].score == pytest.approx(1.0, abs=1e-5)
        assert hits[0].rank == 1

    def test_tie_broken_by_ascending_id(self):
        row = np.array([[1.0, 0.0]], dtype=np.float32)
        docs = EmbeddingMatrix(["zz", "aa"], np.vstack([row, row]))
        queries = EmbeddingMatrix(["q"], row.copy())
        hits = top_k(queries, docs, 2)[0]
        assert [h.id for h in hits] == ["aa", "zz"]

    def test_matches_reference_scorer(self):
        # Independent O(n*m) oracle: per-query python loop over all docs.
        rng = np.random.default_rng(3)
        docs = random_matrix(rng, 50, 8)
        queries = random_matrix(rng, 5, 8, prefix="q")
        got = top_k(queries, docs, 10)
        for qi in range(queries.count):
            scored = []
            for di in range(docs.count):
                s = float(
                    np.dot(
                        queries.data[qi].astype(np.float64),
                        docs.data[di].astype(np.float64),
                    )
                )
                scored.append((docs.ids[di], s))
            scored.sort(key=lambda t: (-t[1], t[0]))
            expect = scored[:10]
            assert [(h.id, h.score) for h in got[qi]] == expect
            assert [h.rank for h in got[qi]] == list(range(1, 11))

    def test_dim_mismatch_rejected(self):
        a = EmbeddingMatrix(["a"], np.ones((1, 2), dtype=np.float32))
        b = EmbeddingMatrix(["b"], np.ones((1, 3), dtype=np.float32))
        with pytest.raises(ContractError, match="dim mismatch"):
            top_k(a, b, 1)

    def test_prefix_property_and_score_bounds(self):
        rng = np.random.default_rng(4)
        docs = random_matrix(rng, 40, 5)
        queries = random_matrix(rng, 6, 5, prefix="q")
        small = top_k(queries, docs, 7)
        large = top_k(queries, docs, 23)
        for qs, ql in zip(small, large):
            assert [(h.id, h.score) for h in qs] == [(h.id, h.score) for h in ql[:7]]
            assert all(-1.0 - 1e-5 <= h.score <= 1.0 + 1e-5 for h in ql)
            assert all(ql[i].score >= ql[i + 1].score for i in range(len(ql) - 1))

    def test_repeat_runs_identical(self):
        rng = np.random.default_rng(5)
        docs = random_matrix(rng, 30, 4)
        queries = random_matrix(rng, 3, 4, prefix="q")
        first = top_k(queries, docs, 30)
        for _ in range(3):
            assert top_k(queries, docs, 30) == first
