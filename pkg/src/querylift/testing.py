"""Shared test harness: a real HTTP embedding server over the mock encoder,
and the conformance checks any embeddings endpoint must pass.

The conformance function is reused verbatim by the local-server package's
suite, so "wire-compatible" stays a tested property rather than a claim.
"""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from .embed_client import EmbeddingClient
from .mock import MockEmbedder


class ThreadedEmbedServer:
    """Minimal HTTP server speaking the embeddings contract, for tests.

    Knobs: `fail_next` makes the next N requests return 500 (retry paths),
    `require_bearer` rejects requests without that token (auth paths).
    """

    def __init__(self, fail_next: int = 0, require_bearer: str | None = None):
        harness = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):  # keep test output quiet
                pass

            def do_GET(self):
                if self.path != "/healthz":
                    self.send_error(404)
                    return
                body = json.dumps({"status": "ok"}).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.end_headers()
                self.wfile.write(body)

            def do_POST(self):
                if self.path != "/v1/embeddings":
                    self.send_error(404)
                    return
                if harness.require_bearer is not None:
                    auth = self.headers.get("Authorization", "")
                    if auth != f"Bearer {harness.require_bearer}":
                        self.send_error(401)
                        return
                with harness._lock:
                    if harness.fail_next > 0:
                        harness.fail_next -= 1
                        self.send_error(500)
                        return
                length = int(self.headers["Content-Length"])
                payload = json.loads(self.rfile.read(length))
                texts = list(payload["input"])
                with harness._lock:
                    harness.request_sizes.append(len(texts))
                embedder = harness._embedder(payload["model"])
                rows = embedder.embed(texts)
                body = json.dumps(
                    {
                        "data": [
                            {"index": i, "embedding": [float(v) for v in rows[i]]}
                            for i in range(len(texts))
                        ]
                    }
                ).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.end_headers()
                self.wfile.write(body)

        self.fail_next = fail_next
        self.require_bearer = require_bearer
        self.request_sizes: list[int] = []
        self._lock = threading.Lock()
        self._embedders: dict[str, MockEmbedder] = {}
        self._server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    def _embedder(self, model: str) -> MockEmbedder:
        with self._lock:
            if model not in self._embedders:
                self._embedders[model] = MockEmbedder(model)
            return self._embedders[model]

    @property
    def endpoint(self) -> str:
        host, port = self._server.server_address
        return f"http://{host}:{port}/v1/embeddings"

    def __enter__(self) -> "ThreadedEmbedServer":
        self._thread.start()
        return self

    def __exit__(self, *exc) -> None:
        self._server.shutdown()
        self._server.server_close()


def run_embedding_conformance(make_client) -> None:
    """Contract checks every embeddings endpoint must satisfy.

    `make_client` returns a fresh EmbeddingClient for the endpoint under
    test. Checks: empty input, output ordering, dimension, unit norms,
    self-consistency across calls, and batch-independence of single rows.
    """
    client: EmbeddingClient = make_client()
    dim = client.spec.dim

    empty = client.embed_texts([])
    assert empty.count == 0 and empty.dim == dim

    texts = [f"conformance probe text number {i}" for i in range(10)]
    matrix = client.embed_texts(texts)
    assert matrix.count == len(texts) and matrix.dim == dim
    norms = np.linalg.norm(matrix.data.astype(np.float64), axis=1)
    assert np.max(np.abs(norms - 1.0)) <= 1e-5, "rows must be unit-norm"

    again = make_client().embed_texts(texts)
    sims = np.sum(matrix.data.astype(np.float64) * again.data.astype(np.float64), axis=1)
    assert np.min(sims) >= 1.0 - 1e-5, "re-embedding must be self-consistent"

    # order: embed reversed, compare row-for-row
    rev = make_client().embed_texts(list(reversed(texts)))
    assert np.allclose(rev.data[::-1], again.data, atol=1e-5), "output must follow input order"

    # batch independence: a row embedded alone matches its in-batch row
    solo = make_client().embed_texts([texts[3]])
    cos = float(solo.data[0].astype(np.float64) @ matrix.data[3].astype(np.float64))
    assert cos >= 1.0 - 1e-5, "embedding must not depend on batch companions"
