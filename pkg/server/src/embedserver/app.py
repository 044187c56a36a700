"""FastAPI wiring for the wire contract.

Endpoints validate the model and kind, then hand the forward pass to the
shared per-device batcher; /tokenize and /health answer directly since
neither is a forward pass. Error semantics: unknown model 404, wrong model
kind for the endpoint 400.
"""
from __future__ import annotations

from contextlib import asynccontextmanager
from typing import Callable, Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from . import inference
from .batching import MicroBatcher
from .registry import ModelEntry, Registry, default_registry
from .tokenizer import count_tokens


class EmbedRequest(BaseModel):
    model: str
    instruction: str
    text: str


class ScoreRequest(BaseModel):
    model: str
    prompt: str


class TokenizeRequest(BaseModel):
    model: str
    text: str


def _run_jobs(jobs: list[Callable[[], object]]) -> list[object]:
    # a real accelerator would group by model; hash models are cheap enough
    # to run one after another inside the single serialized pass
    return [job() for job in jobs]


def create_app(
    registry: Optional[Registry] = None,
    max_batch: int = 32,
    max_wait_ms: float = 50.0,
) -> FastAPI:
    reg = registry if registry is not None else default_registry()
    batcher = MicroBatcher(_run_jobs, max_batch=max_batch, max_wait_ms=max_wait_ms)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        await batcher.start()
        yield
        await batcher.stop()

    app = FastAPI(title="embedserver", lifespan=lifespan)
    app.state.registry = reg
    app.state.batcher = batcher

    def require(model_id: str, kind: str) -> ModelEntry:
        entry = reg.get(model_id)
        if entry is None:
            raise HTTPException(404, f"unknown model {model_id!r}")
        if entry.kind != kind:
            raise HTTPException(400, f"model {model_id!r} is a {entry.kind}, not a {kind}")
        return entry

    @app.get("/health")
    async def health() -> dict:
        return {"status": "ok", "models": reg.ids()}

    @app.post("/embed")
    async def embed(req: EmbedRequest) -> dict:
        entry = require(req.model, "embedder")
        vector = await batcher.submit(
            lambda: inference.embed(entry, req.instruction, req.text)
        )
        return {"dim": entry.dim, "vector": vector}

    @app.post("/score")
    async def score(req: ScoreRequest) -> dict:
        entry = require(req.model, "decoder")
        p_yes, p_no = await batcher.submit(lambda: inference.score(entry, req.prompt))
        return {"p_yes": p_yes, "p_no": p_no}

    @app.post("/tokenize")
    async def tokenize(req: TokenizeRequest) -> dict:
        if reg.get(req.model) is None:
            raise HTTPException(404, f"unknown model {req.model!r}")
        return {"n_tokens": count_tokens(req.text)}

    return app
