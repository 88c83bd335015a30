"""Embedding client: batching, cache behavior, retries, wire conformance."""

import threading

import numpy as np
import pytest

from querylift.chunker import ChunkRecord
from querylift.embed_client import DiskCache, EmbedderSpec, EmbeddingClient, prefixed
from querylift.errors import ContractError, CredentialError, TransportError
from querylift.mock import MockEmbedder, mock_embed_transport
from querylift.store import load_matrix
from querylift.testing import ThreadedEmbedServer, run_embedding_conformance


def spec(dim=16, max_batch=64, **kw):
    return EmbedderSpec(
        name="mock", endpoint="http://invalid.local/v1/embeddings",
        model=f"mock-{dim}", dim=dim, max_batch=max_batch, **kw
    )


def client(transport=None, cache_dir=None, dim=16, max_batch=64, concurrency=1, **kw):
    return EmbeddingClient(
        spec(dim=dim, max_batch=max_batch, **kw),
        cache_dir=cache_dir,
        transport=transport,
        concurrency=concurrency,
        sleep=lambda s: None,
    )


class TestEmbedTexts:
    def test_empty_list(self):
        matrix = client(mock_embed_transport()).embed_texts([])
        assert matrix.count == 0 and matrix.dim == 16

    def test_same_text_identical_rows(self):
        matrix = client(mock_embed_transport()).embed_texts(["hello", "hello"])
        assert np.array_equal(matrix.data[0], matrix.data[1])

    def test_batching_request_count(self):
        counter = []
        c = client(mock_embed_transport(counter), max_batch=64)
        texts = [f"text {i}" for i in range(1000)]
        matrix = c.embed_texts(texts)
        assert len(counter) == 16
        assert sum(counter) == 1000
        assert matrix.count == 1000
        # output order equals input order
        direct = MockEmbedder("mock-16").embed(texts)
        sims = np.sum(matrix.data.astype(np.float64) * direct, axis=1)
        assert np.min(sims) >= 1.0 - 1e-5

    def test_rows_unit_norm(self):
        matrix = client(mock_embed_transport()).embed_texts(["a", "b c d", "e?"])
        norms = np.linalg.norm(matrix.data.astype(np.float64), axis=1)
        assert np.max(np.abs(norms - 1.0)) <= 1e-5

    def test_parallel_batches_keep_order(self):
        c = client(mock_embed_transport(), max_batch=8, concurrency=4)
        texts = [f"item {i}" for i in range(100)]
        a = c.embed_texts(texts)
        b = client(mock_embed_transport(), max_batch=128).embed_texts(texts)
        assert np.array_equal(a.data, b.data)


class TestCache:
    def test_round_trip_bit_identical_zero_requests(self, tmp_path):
        counter = []
        first = client(mock_embed_transport(counter), cache_dir=tmp_path)
        texts = ["alpha beta", "gamma", "delta epsilon"]
        m1 = first.embed_texts(texts)
        n_before = len(counter)
        second = client(mock_embed_transport(counter), cache_dir=tmp_path)
        m2 = second.embed_texts(texts)
        assert len(counter) == n_before, "cache hits must not touch the network"
        assert np.array_equal(m1.data, m2.data)

    def test_layout_model_and_hash_prefix(self, tmp_path):
        cache = DiskCache(tmp_path, "mock-16", 16)
        cache.put("xyz", np.ones(16, dtype=np.float32))
        key = DiskCache.key("xyz")
        assert (tmp_path / "mock-16" / key[:2] / key).exists()

    def test_wrong_dim_entry_is_a_miss(self, tmp_path):
        DiskCache(tmp_path, "mock-16", 8).put("t", np.ones(8, dtype=np.float32))
        assert DiskCache(tmp_path, "mock-16", 16).get("t") is None


class TestRetries:
    def _flaky(self, failures, counter):
        inner = mock_embed_transport(counter)
        state = {"left": failures}
        lock = threading.Lock()

        def transport(url, payload, headers):
            with lock:
                if state["left"] > 0:
                    state["left"] -= 1
                    raise ConnectionError("refused")
            return inner(url, payload, headers)

        return transport

    def test_recovers_after_two_failures(self):
        sleeps = []
        c = EmbeddingClient(
            spec(), transport=self._flaky(2, []), concurrency=1, sleep=sleeps.append
        )
        matrix = c.embed_texts(["one", "two"])
        assert matrix.count == 2
        assert sleeps == [1.0, 2.0]

    def test_exhausted_retries_raise_transport_error(self):
        c = EmbeddingClient(spec(), transport=self._flaky(99, []), concurrency=1,
                            sleep=lambda s: None)
        with pytest.raises(TransportError, match="attempts"):
            c.embed_texts(["x"])

    def test_server_5xx_retried(self):
        with ThreadedEmbedServer(fail_next=2) as server:
            sleeps = []
            c = EmbeddingClient(
                EmbedderSpec(name="srv", endpoint=server.endpoint, model="mock-8", dim=8),
                sleep=sleeps.append,
            )
            matrix = c.embed_texts(["works eventually"])
            assert matrix.count == 1
            assert sleeps == [1.0, 2.0]


class TestAuth:
    def test_missing_env_var_named(self, monkeypatch):
        monkeypatch.delenv("QL_TEST_KEY", raising=False)
        c = client(mock_embed_transport(), auth_env_var="QL_TEST_KEY")
        with pytest.raises(CredentialError, match="QL_TEST_KEY"):
            c.embed_texts(["x"])

    def test_rejected_key_is_credential_error(self, monkeypatch):
        monkeypatch.setenv("QL_TEST_KEY", "wrong")
        with ThreadedEmbedServer(require_bearer="right") as server:
            c = EmbeddingClient(
                EmbedderSpec(name="srv", endpoint=server.endpoint, model="mock-8",
                             dim=8, auth_env_var="QL_TEST_KEY"),
                sleep=lambda s: None,
            )
            with pytest.raises(CredentialError):
                c.embed_texts(["x"])

    def test_accepted_key(self, monkeypatch):
        monkeypatch.setenv("QL_TEST_KEY", "right")
        with ThreadedEmbedServer(require_bearer="right") as server:
            c = EmbeddingClient(
                EmbedderSpec(name="srv", endpoint=server.endpoint, model="mock-8",
                             dim=8, auth_env_var="QL_TEST_KEY"),
            )
            assert c.embed_texts(["x"]).count == 1


class TestDimContract:
    def test_dim_mismatch_is_contract_error(self):
        def bad(url, payload, headers):
            return 200, {"data": [{"index": 0, "embedding": [1.0, 2.0]}]}

        c = client(bad, dim=16)
        with pytest.raises(ContractError, match="dim"):
            c.embed_texts(["x"])


class TestEmbedStream:
    def _chunks(self, n):
        return [(f"doc{i}#0", f"chunk body number {i}") for i in range(n)]

    def test_empty_stream_valid_file(self, tmp_path):
        out = tmp_path / "empty.emb"
        n = client(mock_embed_transport()).embed_stream([], out)
        assert n == 0
        matrix = load_matrix(out)
        assert matrix.count == 0 and matrix.dim == 16

    def test_ids_preserved_in_order(self, tmp_path):
        out = tmp_path / "c.emb"
        records = self._chunks(25)
        client(mock_embed_transport(), max_batch=7).embed_stream(records, out)
        matrix = load_matrix(out)
        assert matrix.ids == [i for i, _ in records]

    def test_resume_skips_cached_half(self, tmp_path):
        counter = []
        records = self._chunks(40)
        first = client(mock_embed_transport(counter), cache_dir=tmp_path / "cache", max_batch=10)
        # interrupted run: only the first half got embedded
        first.embed_stream(records[:20], tmp_path / "partial.emb")
        embedded_before = sum(counter)
        assert embedded_before == 20

        counter.clear()
        rerun = client(mock_embed_transport(counter), cache_dir=tmp_path / "cache", max_batch=10)
        rerun.embed_stream(records, tmp_path / "full.emb")
        assert sum(counter) == 20, "first half must come from cache"
        matrix = load_matrix(tmp_path / "full.emb")
        assert matrix.count == 40


class TestPrefixes:
    def test_doc_and_query_prefixes(self):
        s = spec(query_prefix="query: ", doc_prefix="passage: ")
        assert prefixed(s, "hello", "query") == "query: hello"
        assert prefixed(s, "hello", "doc") == "passage: hello"
        assert prefixed(spec(), "hello", "doc") == "hello"


class TestWireConformance:
    def test_against_threaded_http_server(self):
        with ThreadedEmbedServer() as server:
            def make_client():
                return EmbeddingClient(
                    EmbedderSpec(name="srv", endpoint=server.endpoint,
                                 model="mock-12", dim=12),
                )
            run_embedding_conformance(make_client)
