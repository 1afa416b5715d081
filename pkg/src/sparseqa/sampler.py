"""Sparse evidence sampler: score every chunk against the query, keep top-k.

Selection is a single ranked pool across both modalities. Ties break on
lower order_index, so results are deterministic and reproducible. The number
of similarity evaluations is exactly n_text + m_image per query (tracked on
the ScoreSet for the cost-independence property).
"""
from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .doc_model import ImageChunk, ParsedDocument, TextChunk
from .embedding import (
    EmbeddingCache,
    EmbeddingProvider,
    EmbeddingVector,
    cosine_similarity,
    embed_text,
    image_content_hash,
    text_content_hash,
)
from .errors import CacheMissError, ConfigError


@dataclass(frozen=True)
class ScoreSet:
    text_scores: dict[str, float]
    image_scores: dict[str, float]
    orders: dict[str, int]  # chunk_id -> order_index, for the tie rule
    n_evaluations: int = 0


@dataclass(frozen=True)
class SamplerConfig:
    k: int = 5
    modality_floor: int = 0  # minimum images among selected, if available

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.modality_floor < 0:
            raise ConfigError("modality_floor must be >= 0")


@dataclass(frozen=True)
class EvidenceEntry:
    chunk_id: str
    modality: str
    score: float
    rank: int


@dataclass(frozen=True)
class SampledEvidence:
    entries: tuple[EvidenceEntry, ...]
    query_text: str

    def chunk_ids(self) -> list[str]:
        return [e.chunk_id for e in self.entries]


class _DocIndex:
    """Per-(document, providers) scoring index: chunk metadata plus the
    stacked matrix of cached unit vectors, so a query costs one dot product
    per chunk with no re-hashing or blob reads."""

    __slots__ = ("chunk_ids", "modalities", "orders", "orders_arr", "vectors")

    def __init__(self, chunk_ids, modalities, orders, vectors):
        self.chunk_ids = chunk_ids
        self.modalities = modalities
        self.orders = orders
        self.orders_arr = np.asarray(orders, dtype=np.int64)
        self.vectors = vectors


# memo keyed by document identity (hashing a large document per query would
# itself be O(n)); entries die with the document object
_INDEX_MEMO: dict[int, dict] = {}


def _doc_index(doc: ParsedDocument, cache: EmbeddingCache,
               text_provider_id: str, image_provider_id: str) -> _DocIndex:
    per_doc = _INDEX_MEMO.get(id(doc))
    if per_doc is None:
        per_doc = _INDEX_MEMO[id(doc)] = {}
        weakref.finalize(doc, _INDEX_MEMO.pop, id(doc), None)
    key = (id(cache), text_provider_id, image_provider_id)
    idx = per_doc.get(key)
    if idx is not None:
        return idx
    chunk_ids, modalities, orders, vecs, missing = [], [], [], [], []
    for chunk in doc.chunks:
        if isinstance(chunk, TextChunk):
            rec = cache.get(text_provider_id, text_content_hash(chunk.text))
        else:
            blob = chunk.image_ref.resolve()
            rec = cache.get(image_provider_id, image_content_hash(blob, chunk.caption))
        if rec is None:
            missing.append(chunk.chunk_id)
            continue
        chunk_ids.append(chunk.chunk_id)
        modalities.append(chunk.modality)
        orders.append(chunk.order_index)
        vecs.append(rec.vector.values)
    if missing:
        raise CacheMissError(missing)
    # score in float64 so results don't depend on BLAS kernel choice
    idx = _DocIndex(chunk_ids, modalities, orders,
                    np.stack(vecs).astype(np.float64))
    per_doc[key] = idx
    return idx


def score_all(
    query_vec: EmbeddingVector,
    doc: ParsedDocument,
    cache: EmbeddingCache,
    text_provider_id: str,
    image_provider_id: str,
) -> ScoreSet:
    """Cosine-score every chunk of the document against the query vector.

    Requires a warm cache: every chunk must already have a cached embedding
    under the active providers.
    """
    idx = _doc_index(doc, cache, text_provider_id, image_provider_id)
    q = np.asarray(query_vec.values, dtype=idx.vectors.dtype)
    sims = idx.vectors @ q
    text_scores: dict[str, float] = {}
    image_scores: dict[str, float] = {}
    orders: dict[str, int] = {}
    for cid, mod, order, score in zip(idx.chunk_ids, idx.modalities,
                                      idx.orders, sims):
        orders[cid] = order
        if mod == "text":
            text_scores[cid] = float(score)
        else:
            image_scores[cid] = float(score)
    return ScoreSet(text_scores, image_scores, orders,
                    n_evaluations=len(idx.chunk_ids))


def _ranked_pool(scores: ScoreSet) -> list[tuple[str, str, float]]:
    pool = [(cid, "text", s) for cid, s in scores.text_scores.items()]
    pool += [(cid, "image", s) for cid, s in scores.image_scores.items()]
    # tie rule: higher score first, then lower order_index
    pool.sort(key=lambda t: (-t[2], scores.orders[t[0]]))
    return pool


def top_k(scores: ScoreSet, config: SamplerConfig, query_text: str = "") -> SampledEvidence:
    """Select the k best chunks over the union of both modalities.

    If modality_floor > 0, the floor's worth of best images is guaranteed a
    slot (when that many images exist); remaining slots fill globally.
    """
    pool = _ranked_pool(scores)
    k = min(config.k, len(pool))
    selected = pool[:k]
    if config.modality_floor > 0:
        floor = min(config.modality_floor, len(scores.image_scores), k)
        have = sum(1 for e in selected if e[1] == "image")
        if have < floor:
            images = [e for e in pool if e[1] == "image"][:floor]
            keep_ids = {e[0] for e in images}
            rest = [e for e in pool if e[0] not in keep_ids][: k - len(images)]
            selected = sorted(images + rest, key=lambda t: (-t[2], scores.orders[t[0]]))
    entries = tuple(
        EvidenceEntry(chunk_id=cid, modality=mod, score=s, rank=i + 1)
        for i, (cid, mod, s) in enumerate(selected)
    )
    return SampledEvidence(entries=entries, query_text=query_text)


def sample(
    query: str,
    doc: ParsedDocument,
    text_provider: EmbeddingProvider,
    image_provider: EmbeddingProvider,
    cache: EmbeddingCache,
    config: Optional[SamplerConfig] = None,
) -> SampledEvidence:
    """Full sampling pass: embed the query, score all chunks, take top-k.

    Query embeddings are deliberately not cached (queries are unbounded
    user input; the cache contract covers document content only).
    """
    config = config or SamplerConfig()
    query_vec = embed_text(text_provider, query)
    if config.modality_floor == 0:
        # vectorized path: equivalent to top_k(score_all(...)) but with no
        # per-chunk python work, keeping ask latency length-independent
        idx = _doc_index(doc, cache,
                         text_provider.provider_id, image_provider.provider_id)
        sims = idx.vectors @ np.asarray(query_vec.values, dtype=np.float64)
        k = min(config.k, sims.shape[0])
        # lexsort: last key is primary -> higher score first, then lower order
        picked = np.lexsort((idx.orders_arr, -sims))[:k]
        entries = tuple(
            EvidenceEntry(chunk_id=idx.chunk_ids[i], modality=idx.modalities[i],
                          score=float(sims[i]), rank=r + 1)
            for r, i in enumerate(picked)
        )
        return SampledEvidence(entries=entries, query_text=query)
    scores = score_all(query_vec, doc, cache,
                       text_provider.provider_id, image_provider.provider_id)
    return top_k(scores, config, query_text=query)
