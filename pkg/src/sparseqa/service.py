"""HTTP service exposing the engine: ingest, list, ask, evaluate.

Error taxonomy maps to stable status codes: 422 parse/format, 404 unknown
document, 502 backend failure, 507 cache miss.
"""
from __future__ import annotations

import base64
import json
import tempfile
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse, JSONResponse
from pydantic import BaseModel

from .errors import (
    BackendError,
    CacheMissError,
    ConversionError,
    IntegrityError,
    NotFoundError,
    ParseError,
    ProviderError,
    SparseQAError,
)
from .store import Engine, EngineConfig

_STATUS_MAP = [
    (NotFoundError, 404),
    (CacheMissError, 507),
    (BackendError, 502),
    (ProviderError, 502),
    ((ParseError, IntegrityError, ConversionError), 422),
]


class IngestRequest(BaseModel):
    name: str = ""
    content: str                      # canonical markup text
    blobs: dict[str, str] = {}        # hash -> base64 blob bytes


class AskRequest(BaseModel):
    question: str
    k: Optional[int] = None


class EvalRequest(BaseModel):
    cases: list[dict]
    predictions: list[dict]
    k: Optional[int] = None


def create_app(engine: Engine) -> FastAPI:
    app = FastAPI(title="sparseqa")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"],
    )
    app.state.engine = engine

    @app.exception_handler(SparseQAError)
    async def _handle(request: Request, exc: SparseQAError):
        status = next((code for cls, code in _STATUS_MAP if isinstance(exc, cls)), 500)
        return JSONResponse(
            status_code=status,
            content={"error": type(exc).__name__, "detail": str(exc)},
        )

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.post("/documents")
    def ingest(req: IngestRequest):
        with tempfile.TemporaryDirectory() as tmp:
            doc_path = Path(tmp) / "document.xml"
            doc_path.write_text(req.content, encoding="utf-8")
            blob_dir = Path(tmp) / "blobs"
            if req.blobs:
                blob_dir.mkdir()
                for h, b64 in req.blobs.items():
                    (blob_dir / h).write_bytes(base64.b64decode(b64))
            doc_id = engine.ingest_file(doc_path, doc_id=req.name or None)
        return {"doc_id": doc_id}

    @app.get("/documents")
    def list_documents():
        return {"documents": engine.list_documents()}

    @app.get("/documents/{doc_id}")
    def get_document(doc_id: str):
        doc = engine.get_document(doc_id)
        chunks = []
        for c in doc.chunks:
            if c.modality == "text":
                chunks.append({
                    "chunk_id": c.chunk_id, "order": c.order_index, "modality": "text",
                    "section": list(c.section_path), "text": c.text,
                })
            else:
                chunks.append({
                    "chunk_id": c.chunk_id, "order": c.order_index, "modality": "image",
                    "caption": c.caption, "label": c.figure_label,
                    "blob_hash": c.image_ref.hash,
                })
        return {"doc_id": doc.doc_id, "source": doc.source_name, "chunks": chunks}

    @app.get("/documents/{doc_id}/blobs/{blob_hash}")
    def get_blob(doc_id: str, blob_hash: str):
        return FileResponse(engine.blob_path(doc_id, blob_hash),
                            media_type="application/octet-stream")

    @app.post("/documents/{doc_id}/ask")
    def ask(doc_id: str, req: AskRequest):
        return engine.ask_payload(doc_id, req.question, req.k)

    @app.post("/eval/run")
    def eval_run(req: EvalRequest):
        with tempfile.TemporaryDirectory() as tmp:
            cases = Path(tmp) / "cases.jsonl"
            preds = Path(tmp) / "preds.jsonl"
            cases.write_text("\n".join(json.dumps(c) for c in req.cases))
            preds.write_text("\n".join(json.dumps(p) for p in req.predictions))
            result = engine.eval_run(cases, preds, req.k)
        r = result["report"]
        return {
            "anls": r.anls, "token_f1": r.token_f1, "rouge_l": r.rouge_l,
            "recall_at_k": r.recall_at_k, "mean_tokens": r.mean_tokens,
            "mean_latency_ms": r.mean_latency_ms, "case_count": r.case_count,
            "gpt_acc": r.gpt_acc, "table": result["text"],
        }

    return app


def serve(config: EngineConfig, host: str = "127.0.0.1", port: int = 8000):
    import uvicorn

    app = create_app(Engine(config))
    uvicorn.run(app, host=host, port=port, log_level="warning")
