"""FastAPI application exposing one local encoder behind the embeddings contract.

POST /v1/embeddings  {"model": ..., "input": [...]}
                     -> {"data": [{"index": i, "embedding": [...]}], "model": ...}
GET  /healthz        -> {"status": "ok", "dim": d, "model": name}

The encoder is constructed before the app is served, so the port only
accepts connections once the model is ready. One model per process;
multi-model setups run one server each.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from .encoder import load_encoder


@dataclass
class ServerConfig:
    model: str = "hash-mlp:256"
    host: str = "127.0.0.1"
    port: int = 8876
    max_batch: int = 256
    normalize: bool = True


class EmbeddingsRequest(BaseModel):
    model: str
    input: list[str]


def create_app(config: ServerConfig) -> FastAPI:
    encoder = load_encoder(config.model)  # fail here, before binding
    app = FastAPI(title="querylift-embed-server")

    @app.get("/healthz")
    def healthz():
        return {"status": "ok", "dim": encoder.dim, "model": config.model}

    @app.post("/v1/embeddings")
    def embeddings(request: EmbeddingsRequest):
        if request.model != config.model:
            raise HTTPException(
                status_code=400,
                detail=f"this server hosts {config.model!r}, not {request.model!r}",
            )
        if len(request.input) > config.max_batch:
            raise HTTPException(
                status_code=413,
                detail=f"batch of {len(request.input)} exceeds cap {config.max_batch}",
            )
        rows = encoder.encode(request.input)
        if config.normalize and rows.shape[0]:
            norms = np.linalg.norm(rows, axis=1, keepdims=True)
            rows = rows / norms
        return {
            "model": config.model,
            "data": [
                {"index": i, "embedding": [float(v) for v in rows[i]]}
                for i in range(rows.shape[0])
            ],
        }

    return app
