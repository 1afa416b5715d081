"""Document/cache store and the engine facade the CLI and HTTP service share.

Store layout (one directory per document, transparent and diffable):

    <store_root>/
      documents/<doc_id>/document.xml
      documents/<doc_id>/blobs/<hash>
      caches/default.wkec
      corpora/*.jsonl
      adapters/*.wkad
"""
from __future__ import annotations

import json
import os
import shutil
import tempfile
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import dataset as ds
from .adapter import LinearAdapter, TrainConfig, TrainingBatch, sample_negatives, train_adapter
from .doc_model import (
    ImageChunk,
    ParsedDocument,
    TextChunk,
    external_parse,
    load_document,
    parse_interleaved,
    save_document,
)
from .embedding import (
    EmbeddingCache,
    OfflineEmbedder,
    RemoteProvider,
    embed_chunk_cached,
    image_content_hash,
    prefill_cache,
    text_content_hash,
)
from .errors import ConfigError, NotFoundError, SparseQAError
from .generation import (
    AnswerResult,
    EchoBackend,
    ExtractiveBackend,
    RemoteBackend,
    ScriptedBackend,
    assemble_prompt,
    generate_answer,
)
from .metrics import EvalCase, evaluate_run, render_report
from .sampler import SampledEvidence, SamplerConfig, sample


@dataclass
class EngineConfig:
    store_root: Path = Path("./sparseqa-store")
    embedder_kind: str = "offline"       # offline | remote
    embedder_seed: int = 0
    embedder_dims: int = 64
    planted_topics: tuple[str, ...] = ()
    rotation_seed: Optional[int] = None
    embed_url: str = ""
    embed_provider_id: str = ""
    backend_kind: str = "extractive"     # echo | extractive | scripted | remote
    backend_url: str = ""
    transcript_path: str = ""
    k: int = 5
    modality_floor: int = 0
    temperature: float = 0.07
    learning_rate: float = 0.05
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    parser_command: tuple[str, ...] = ()
    parser_dialect: str = "json"

    def __post_init__(self):
        self.store_root = Path(self.store_root)
        if self.k < 1:
            raise ConfigError("k must be >= 1")
        if not (self.temperature > 0):
            raise ConfigError("temperature must be positive")

    @staticmethod
    def load(config_file: Optional[Path] = None, env: Optional[dict] = None,
             overrides: Optional[dict] = None) -> "EngineConfig":
        """Merge config sources with precedence CLI overrides > env > file."""
        values: dict = {}
        if config_file:
            values.update(json.loads(Path(config_file).read_text()))
        env = os.environ if env is None else env
        env_map = {
            "SPARSEQA_STORE_ROOT": ("store_root", str),
            "SPARSEQA_K": ("k", int),
            "SPARSEQA_BACKEND": ("backend_kind", str),
            "SPARSEQA_BACKEND_URL": ("backend_url", str),
            "SPARSEQA_EMBED_URL": ("embed_url", str),
        }
        for var, (key, cast) in env_map.items():
            if var in env:
                values[key] = cast(env[var])
        for key, val in (overrides or {}).items():
            if val is not None:
                values[key] = val
        known = {f for f in EngineConfig.__dataclass_fields__}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "planted_topics" in values:
            values["planted_topics"] = tuple(values["planted_topics"])
        if "parser_command" in values:
            values["parser_command"] = tuple(values["parser_command"])
        return EngineConfig(**values)


class Engine:
    """Owns the store, providers, cache, and backend; exposes pipeline verbs."""

    def __init__(self, config: EngineConfig):
        self.config = config
        root = config.store_root
        (root / "documents").mkdir(parents=True, exist_ok=True)
        (root / "caches").mkdir(exist_ok=True)
        (root / "corpora").mkdir(exist_ok=True)
        (root / "adapters").mkdir(exist_ok=True)

        if config.embedder_kind == "offline":
            self.text_provider = OfflineEmbedder(
                config.embedder_seed, config.embedder_dims,
                planted_topics=list(config.planted_topics) or None,
                rotation_seed=config.rotation_seed,
            )
            self.image_provider = OfflineEmbedder(
                config.embedder_seed, config.embedder_dims,
                planted_topics=list(config.planted_topics) or None,
            )
        elif config.embedder_kind == "remote":
            self.text_provider = RemoteProvider(
                config.embed_url, config.embed_provider_id or config.embed_url,
                config.embedder_dims)
            self.image_provider = self.text_provider
        else:
            raise ConfigError(f"unknown embedder kind {config.embedder_kind!r}")

        if config.backend_kind == "echo":
            self.backend = EchoBackend()
        elif config.backend_kind == "extractive":
            self.backend = ExtractiveBackend()
        elif config.backend_kind == "scripted":
            transcript = {}
            if config.transcript_path:
                transcript = json.loads(Path(config.transcript_path).read_text())
            self.backend = ScriptedBackend(transcript, default="")
        elif config.backend_kind == "remote":
            self.backend = RemoteBackend(config.backend_url)
        else:
            raise ConfigError(f"unknown backend kind {config.backend_kind!r}")

        self._cache_path = root / "caches" / "default.wkec"
        self.cache = (EmbeddingCache.load(self._cache_path)
                      if self._cache_path.exists() else EmbeddingCache(self._cache_path))
        self._docs: dict[str, ParsedDocument] = {}
        self._doc_locks: dict[str, threading.Lock] = {}
        self._lock = threading.Lock()
        for doc_dir in sorted((root / "documents").iterdir()):
            if (doc_dir / "document.xml").exists():
                # lenient load: blob damage is reported by integrity_scan,
                # not by refusing to start
                doc = load_document(doc_dir / "document.xml", verify_blobs=False)
                self._docs[doc.doc_id] = doc

    # --- documents ------------------------------------------------------

    def list_documents(self) -> list[dict]:
        return [
            {"doc_id": d.doc_id, "source": d.source_name,
             "n_text": d.n_text, "m_image": d.m_image}
            for d in sorted(self._docs.values(), key=lambda d: d.doc_id)
        ]

    def get_document(self, doc_id: str) -> ParsedDocument:
        doc = self._docs.get(doc_id)
        if doc is None:
            raise NotFoundError(f"unknown document {doc_id!r}")
        return doc

    def blob_path(self, doc_id: str, blob_hash: str) -> Path:
        self.get_document(doc_id)
        path = self.config.store_root / "documents" / doc_id / "blobs" / blob_hash
        if not path.is_file():
            raise NotFoundError(f"unknown blob {blob_hash!r}")
        return path

    def ingest_file(self, path: Path, doc_id: Optional[str] = None) -> str:
        """Ingest a document file (canonical markup, or PDF when a parser
        command is configured). Atomic: embeds everything before committing."""
        path = Path(path)
        if self.config.parser_command and path.suffix.lower() == ".pdf":
            with tempfile.TemporaryDirectory() as tmp:
                doc = external_parse(path, self.config.parser_command,
                                     Path(tmp) / "blobs", self.config.parser_dialect,
                                     doc_id=doc_id)
                return self._commit(doc)
        doc = parse_interleaved(path.read_bytes(), blob_root=path.parent / "blobs")
        if doc_id:
            doc = ParsedDocument(doc_id=doc_id, source_name=doc.source_name,
                                 chunks=doc.chunks)
        return self._commit(doc)

    def ingest_document(self, doc: ParsedDocument) -> str:
        return self._commit(doc)

    def _commit(self, doc: ParsedDocument) -> str:
        doc_id = doc.doc_id or uuid.uuid4().hex[:12]
        if doc.doc_id != doc_id:
            doc = ParsedDocument(doc_id=doc_id, source_name=doc.source_name,
                                 chunks=doc.chunks)
        # embed first: a provider failure must leave no partial document.
        # chunks already in the main cache are skipped, so re-ingesting the
        # same content never re-calls the provider.
        staging = EmbeddingCache()
        for chunk in doc.chunks:
            if chunk.modality == "text":
                key = (self.text_provider.provider_id, text_content_hash(chunk.text))
            else:
                key = (self.image_provider.provider_id,
                       image_content_hash(chunk.image_ref.resolve(), chunk.caption))
            if self.cache.get(*key) is None:
                embed_chunk_cached(staging, chunk,
                                   self.text_provider, self.image_provider)
        docs_root = self.config.store_root / "documents"
        tmp_dir = Path(tempfile.mkdtemp(dir=docs_root, prefix=".ingest-"))
        try:
            save_document(doc, tmp_dir / "document.xml")
            final = docs_root / doc_id
            if final.exists():
                shutil.rmtree(final)
            tmp_dir.rename(final)
        except BaseException:
            shutil.rmtree(tmp_dir, ignore_errors=True)
            raise
        # re-point blob locators at the committed copy; the ingest source
        # (e.g. an upload temp dir) may vanish
        doc = load_document(final / "document.xml")
        for record in staging.records():
            self.cache.put(record)
        self.cache.persist()
        with self._lock:
            self._docs[doc_id] = doc
            self._doc_locks.setdefault(doc_id, threading.Lock())
        return doc_id

    # --- query pipeline ---------------------------------------------------

    def sample_evidence(self, doc_id: str, question: str,
                        k: Optional[int] = None) -> SampledEvidence:
        doc = self.get_document(doc_id)
        config = SamplerConfig(k=k or self.config.k,
                               modality_floor=self.config.modality_floor)
        return sample(question, doc, self.text_provider, self.image_provider,
                      self.cache, config)

    def ask(self, doc_id: str, question: str,
            k: Optional[int] = None) -> tuple[AnswerResult, SampledEvidence]:
        doc = self.get_document(doc_id)
        evidence = self.sample_evidence(doc_id, question, k)
        prompt = assemble_prompt(question, evidence, doc)
        answer = generate_answer(self.backend, prompt)
        return answer, evidence

    def ask_payload(self, doc_id: str, question: str, k: Optional[int] = None) -> dict:
        """Wire-format ask response shared by the CLI and the HTTP service."""
        doc = self.get_document(doc_id)
        answer, evidence = self.ask(doc_id, question, k)
        items = []
        for e in evidence.entries:
            chunk = doc.chunk(e.chunk_id)
            preview = (chunk.text if isinstance(chunk, TextChunk) else chunk.caption)
            items.append({
                "chunk_id": e.chunk_id,
                "modality": e.modality,
                "score": round(e.score, 6),
                "rank": e.rank,
                "content_preview": preview[:200],
                **({"blob_hash": chunk.image_ref.hash}
                   if isinstance(chunk, ImageChunk) else {}),
            })
        return {
            "answer": answer.answer_text,
            "evidence": items,
            "prompt_tokens": answer.prompt_tokens,
            "latency_ms": answer.latency_ms,
            "backend_id": answer.backend_id,
        }

    # --- evaluation --------------------------------------------------------

    def eval_run(self, cases_path: Path, preds_path: Path, k: Optional[int] = None) -> dict:
        cases = self.join_eval_inputs(cases_path, preds_path)
        report = evaluate_run(cases, k=k or self.config.k)
        return {"report": report, "text": render_report(report)}

    @staticmethod
    def join_eval_inputs(cases_path: Path, preds_path: Path) -> list[EvalCase]:
        preds = {}
        with Path(preds_path).open(encoding="utf-8") as f:
            for line in f:
                if line.strip():
                    rec = json.loads(line)
                    preds[rec["id"]] = rec
        cases = []
        with Path(cases_path).open(encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                rec = json.loads(line)
                p = preds.get(rec["id"])
                if p is None:
                    continue
                cases.append(EvalCase(
                    case_id=rec["id"],
                    question=rec["question"],
                    gt_answers=tuple(rec["answers"]),
                    gt_evidence=tuple(rec.get("evidence", [])),
                    prediction=p["prediction"],
                    sampled_evidence=tuple(p.get("sampled_evidence", [])),
                    prompt_tokens=int(p.get("prompt_tokens", 0)),
                    latency_ms=int(p.get("latency_ms", 0)),
                ))
        return cases

    # --- dataset building -----------------------------------------------------

    def build_dataset(self, doc_ids: list[str], strategies: list[str], split: str,
                      out_name: str, seed: int = 0, per_doc: int = 1) -> dict:
        rng = np.random.default_rng(seed)
        embed_fn = lambda text: self.text_provider.embed_text(text).values
        pairs: list[ds.QAPair] = []
        for doc_id in doc_ids:
            doc = self.get_document(doc_id)
            for strategy in strategies:
                for _ in range(per_doc):
                    try:
                        selection = ds.select_evidence(doc, strategy, rng,
                                                       embed_fn=embed_fn, rng_seed=seed)
                        pairs.extend(ds.generate_pairs(doc, selection, self.backend, split))
                    except (ds.StrategyUnsatisfiableError, ds.SkipDocumentSignal):
                        continue
        kept, rejected = ds.filter_qa(pairs, ds.default_filter_rules())
        out_path = self.config.store_root / "corpora" / out_name
        stats = ds.export_corpus(kept, out_path, docs=self._docs)
        return {"path": str(out_path), "kept": len(kept),
                "rejected": len(rejected), "stats": stats}

    # --- adapter training --------------------------------------------------------

    def train_adapter_from_corpus(self, corpus_path: Path, out_name: str,
                                  config: Optional[TrainConfig] = None) -> dict:
        config = config or TrainConfig(
            temperature=self.config.temperature,
            learning_rate=self.config.learning_rate,
            epochs=self.config.epochs,
            batch_size=self.config.batch_size,
            seed=self.config.seed,
        )
        records = ds.import_corpus(corpus_path)
        rng = np.random.default_rng(config.seed)
        batches = []
        for rec in records:
            doc = self.get_document(rec["doc_id"])
            positives = [self._chunk_vector(doc, cid) for cid in rec["evidence"]]
            neg_ids = sample_negatives(doc, rec["evidence"], rng)
            negatives = [self._chunk_vector(doc, cid) for cid in neg_ids]
            query_vec = self.text_provider.embed_text(rec["question"]).values
            batches.append(TrainingBatch(
                query_vec=np.asarray(query_vec, dtype=np.float64),
                positive_vecs=tuple(np.asarray(p, dtype=np.float64) for p in positives),
                negative_vecs=tuple(np.asarray(n, dtype=np.float64) for n in negatives),
                provenance=tuple(rec["evidence"]) + ("strategy:" + rec["strategy"],),
            ))
        adapter, trajectory = train_adapter(batches, config)
        out_path = self.config.store_root / "adapters" / out_name
        adapter.save(out_path)
        return {"path": str(out_path), "trajectory": trajectory}

    def _chunk_vector(self, doc: ParsedDocument, chunk_id: str) -> np.ndarray:
        chunk = doc.chunk(chunk_id)
        if isinstance(chunk, TextChunk):
            rec = self.cache.get(self.text_provider.provider_id,
                                 text_content_hash(chunk.text))
        else:
            blob = chunk.image_ref.resolve()
            rec = self.cache.get(self.image_provider.provider_id,
                                 image_content_hash(blob, chunk.caption))
        if rec is None:
            raise NotFoundError(f"no cached embedding for chunk {chunk_id!r}")
        return rec.vector.values.astype(np.float64)

    # --- integrity ---------------------------------------------------------------

    def integrity_scan(self) -> list[str]:
        """Referential-integrity check over the whole store; returns problems."""
        problems = []
        for doc in self._docs.values():
            for img in doc.image_chunks():
                try:
                    img.image_ref.resolve()
                except SparseQAError as e:
                    problems.append(f"{doc.doc_id}/{img.chunk_id}: {e}")
        return problems
