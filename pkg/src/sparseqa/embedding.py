"""Embedding providers, the persistent embedding cache, and the similarity kernel.

All vectors are L2-normalized float32 at ingestion, so similarity between
cached vectors reduces to a dot product. Cache keys are
(provider_id, content_hash); switching providers can never serve stale
vectors.
"""
from __future__ import annotations

import hashlib
import os
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Protocol

import numpy as np

from .doc_model import ImageChunk, ParsedDocument, TextChunk, content_hash
from .errors import (
    CacheFormatError,
    CacheVersionError,
    DimsError,
    ProviderContractError,
    ProviderError,
)

NORM_TOL = 1e-6


@dataclass(frozen=True)
class EmbeddingVector:
    dims: int
    values: np.ndarray  # float32, unit norm

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.shape != (self.dims,):
            raise DimsError(f"expected {self.dims} values, got shape {v.shape}")
        n = float(np.linalg.norm(v.astype(np.float64)))
        if abs(n - 1.0) > NORM_TOL:
            raise DimsError(f"vector not unit-norm: |v| = {n}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @staticmethod
    def normalized(values: Iterable[float]) -> "EmbeddingVector":
        v = np.asarray(list(values) if not isinstance(values, np.ndarray) else values,
                       dtype=np.float64)
        n = np.linalg.norm(v)
        if n == 0 or not np.isfinite(n):
            raise DimsError("cannot normalize zero or non-finite vector")
        return EmbeddingVector(dims=v.size, values=(v / n).astype(np.float32))


def cosine_similarity(a: EmbeddingVector, b: EmbeddingVector) -> float:
    if a.dims != b.dims:
        raise DimsError(f"dims mismatch: {a.dims} vs {b.dims}")
    return float(np.dot(a.values, b.values))


@dataclass(frozen=True)
class EmbeddingRecord:
    chunk_id: str
    modality: str  # "text" | "image"
    content_hash: str
    provider_id: str
    vector: EmbeddingVector

    def __post_init__(self):
        if not self.provider_id:
            raise ProviderContractError("provider_id must be non-empty")
        if self.modality not in ("text", "image"):
            raise ProviderContractError(f"bad modality {self.modality!r}")


class EmbeddingProvider(Protocol):
    provider_id: str
    dims: int

    def embed_text(self, text: str) -> EmbeddingVector: ...
    def embed_image(self, blob: bytes, caption: str) -> EmbeddingVector: ...


def text_content_hash(text: str) -> str:
    return content_hash(text.encode("utf-8"))


def image_content_hash(blob: bytes, caption: str) -> str:
    # caption participates in the key: changing it must invalidate the entry
    return content_hash(blob + b"\x00" + caption.encode("utf-8"))


def embed_text(provider: EmbeddingProvider, text: str) -> EmbeddingVector:
    if not text:
        raise ProviderError("cannot embed empty text")
    vec = provider.embed_text(text)
    if vec.dims != provider.dims:
        raise ProviderContractError(
            f"provider {provider.provider_id} declared dims {provider.dims}, returned {vec.dims}"
        )
    return vec


def embed_image(provider: EmbeddingProvider, blob: bytes, caption: str) -> EmbeddingVector:
    vec = provider.embed_image(blob, caption)
    if vec.dims != provider.dims:
        raise ProviderContractError(
            f"provider {provider.provider_id} declared dims {provider.dims}, returned {vec.dims}"
        )
    return vec


# --- offline deterministic embedder ------------------------------------------

def _orthonormal_rows(n: int, dims: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    m = rng.standard_normal((dims, dims))
    q, _ = np.linalg.qr(m)
    return q[:n]


class OfflineEmbedder:
    """Deterministic seeded embedder; no network, no model weights.

    Content maps to a unit vector through sha256-seeded gaussian draws, so
    distinct contents collide with negligible probability. In planted mode a
    declared list of topic tokens receive near-orthogonal anchor directions;
    any content containing a topic token embeds close to that anchor
    (cosine ~0.9 between same-topic contents) while disjoint topics stay
    near-orthogonal. An optional rotation_seed rotates the anchors, modelling
    an encoder whose space is misaligned with the anchor space until a
    trained adapter corrects it.
    """

    PLANT_WEIGHT = np.sqrt(0.9)

    def __init__(
        self,
        seed: int,
        dims: int,
        planted_topics: Optional[list[str]] = None,
        rotation_seed: Optional[int] = None,
    ):
        self.seed = seed
        self.dims = dims
        self.provider_id = f"offline-v1:seed={seed}:dims={dims}"
        self._topics = list(planted_topics or [])
        anchors = _orthonormal_rows(len(self._topics), dims, seed ^ 0x5EED) \
            if self._topics else np.zeros((0, dims))
        if rotation_seed is not None:
            rng = np.random.default_rng(rotation_seed)
            q, _ = np.linalg.qr(rng.standard_normal((dims, dims)))
            anchors = anchors @ q.T
            self.provider_id += f":rot={rotation_seed}"
        self._anchors = anchors
        # noise for planted contents lives orthogonal to the anchor span, so
        # same-topic cosine ~ PLANT_WEIGHT^2 and cross-topic cosine ~ 0 hold
        # tightly rather than in expectation
        self._anchor_proj = anchors.T @ anchors if len(self._topics) else None

    def _noise(self, key: bytes) -> np.ndarray:
        digest = hashlib.sha256(str(self.seed).encode() + b"|" + key).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        v = rng.standard_normal(self.dims)
        return v / np.linalg.norm(v)

    def _embed(self, key: bytes, content_text: str) -> EmbeddingVector:
        noise = self._noise(key)
        for idx, topic in enumerate(self._topics):
            if topic in content_text:
                perp = noise - self._anchor_proj @ noise
                perp /= np.linalg.norm(perp)
                a = self.PLANT_WEIGHT
                v = a * self._anchors[idx] + np.sqrt(1 - a * a) * perp
                return EmbeddingVector.normalized(v)
        return EmbeddingVector.normalized(noise)

    def embed_text(self, text: str) -> EmbeddingVector:
        return self._embed(b"T|" + text.encode("utf-8"), text)

    def embed_image(self, blob: bytes, caption: str) -> EmbeddingVector:
        return self._embed(b"I|" + blob + b"\x00" + caption.encode("utf-8"), caption)


def offline_test_embedder(seed: int, dims: int, **kwargs) -> OfflineEmbedder:
    return OfflineEmbedder(seed, dims, **kwargs)


# --- remote provider ----------------------------------------------------------

class RemoteProvider:
    """HTTP+JSON embedding provider client (POST /embed)."""

    def __init__(self, base_url: str, provider_id: str, dims: int, timeout: float = 30.0):
        import httpx

        self.base_url = base_url.rstrip("/")
        self.provider_id = provider_id
        self.dims = dims
        headers = {}
        token = os.environ.get("WUKONG_EMBED_TOKEN")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(timeout=timeout, headers=headers)

    def _call(self, payload: dict) -> EmbeddingVector:
        import httpx

        try:
            resp = self._client.post(self.base_url + "/embed", json=payload)
        except httpx.HTTPError as e:
            raise ProviderError(f"embedding provider unreachable: {e}")
        if resp.status_code != 200:
            raise ProviderError(f"embedding provider returned {resp.status_code}")
        body = resp.json()
        if body.get("dims") != self.dims:
            raise ProviderContractError(
                f"provider declared dims {self.dims}, returned {body.get('dims')}"
            )
        return EmbeddingVector.normalized(body["values"])

    def embed_text(self, text: str) -> EmbeddingVector:
        return self._call({"modality": "text", "content": text, "caption": ""})

    def embed_image(self, blob: bytes, caption: str) -> EmbeddingVector:
        import base64

        return self._call({
            "modality": "image",
            "content": base64.b64encode(blob).decode("ascii"),
            "caption": caption,
        })


# --- cache --------------------------------------------------------------------

_CACHE_MAGIC = b"WKEC"
_CACHE_VERSION = 1


class EmbeddingCache:
    """In-memory map of EmbeddingRecords with bit-exact binary persistence.

    Concurrent readers are safe against a racing writer: a lookup sees either
    nothing or a complete record. All records must share one dims value.
    """

    def __init__(self, locator: Optional[Path] = None):
        self._records: dict[tuple[str, str], EmbeddingRecord] = {}
        self._lock = threading.Lock()
        self._dims: Optional[int] = None
        self.locator = locator

    def __len__(self) -> int:
        return len(self._records)

    def get(self, provider_id: str, content_hash_: str) -> Optional[EmbeddingRecord]:
        return self._records.get((provider_id, content_hash_))

    def put(self, record: EmbeddingRecord) -> None:
        with self._lock:
            if self._dims is None:
                self._dims = record.vector.dims
            elif record.vector.dims != self._dims:
                raise DimsError(
                    f"cache holds {self._dims}-dim vectors; refusing {record.vector.dims}"
                )
            self._records[(record.provider_id, record.content_hash)] = record

    def records(self) -> list[EmbeddingRecord]:
        return list(self._records.values())

    def persist(self, locator: Optional[Path] = None) -> Path:
        path = Path(locator or self.locator)
        path.parent.mkdir(parents=True, exist_ok=True)
        with self._lock:
            records = sorted(
                self._records.values(), key=lambda r: (r.provider_id, r.content_hash)
            )
            out = bytearray()
            out += _CACHE_MAGIC
            out += struct.pack("<HQ", _CACHE_VERSION, len(records))
            for r in records:
                for s in (r.provider_id, r.content_hash, r.chunk_id, r.modality):
                    b = s.encode("utf-8")
                    out += struct.pack("<H", len(b)) + b
                out += struct.pack("<I", r.vector.dims)
                out += r.vector.values.astype("<f4").tobytes()
            path.write_bytes(bytes(out))
        return path

    @staticmethod
    def load(locator: Path) -> "EmbeddingCache":
        data = Path(locator).read_bytes()
        if data[:4] != _CACHE_MAGIC:
            raise CacheFormatError(f"{locator}: not a cache file")
        try:
            version, count = struct.unpack_from("<HQ", data, 4)
            if version != _CACHE_VERSION:
                raise CacheVersionError(
                    f"{locator}: format version {version}, expected {_CACHE_VERSION}"
                )
            off = 14
            cache = EmbeddingCache(locator=Path(locator))
            for _ in range(count):
                fields = []
                for _ in range(4):
                    (n,) = struct.unpack_from("<H", data, off)
                    off += 2
                    fields.append(data[off:off + n].decode("utf-8"))
                    off += n
                (dims,) = struct.unpack_from("<I", data, off)
                off += 4
                values = np.frombuffer(data, dtype="<f4", count=dims, offset=off).copy()
                off += 4 * dims
                provider_id, chash, chunk_id, modality = fields
                cache.put(EmbeddingRecord(
                    chunk_id=chunk_id, modality=modality, content_hash=chash,
                    provider_id=provider_id,
                    vector=EmbeddingVector(dims=dims, values=values),
                ))
            return cache
        except CacheVersionError:
            raise
        except (struct.error, UnicodeDecodeError, IndexError) as e:
            raise CacheFormatError(f"{locator}: truncated or corrupt cache file: {e}")


def embed_chunk_cached(
    cache: EmbeddingCache,
    chunk,
    text_provider: EmbeddingProvider,
    image_provider: EmbeddingProvider,
) -> EmbeddingRecord:
    """Embed one document chunk through the cache; never calls a provider
    twice for the same (provider, content)."""
    if isinstance(chunk, TextChunk):
        chash = text_content_hash(chunk.text)
        hit = cache.get(text_provider.provider_id, chash)
        if hit is not None:
            return hit
        record = EmbeddingRecord(
            chunk_id=chunk.chunk_id, modality="text", content_hash=chash,
            provider_id=text_provider.provider_id,
            vector=embed_text(text_provider, chunk.text),
        )
    elif isinstance(chunk, ImageChunk):
        blob = chunk.image_ref.resolve()
        chash = image_content_hash(blob, chunk.caption)
        hit = cache.get(image_provider.provider_id, chash)
        if hit is not None:
            return hit
        record = EmbeddingRecord(
            chunk_id=chunk.chunk_id, modality="image", content_hash=chash,
            provider_id=image_provider.provider_id,
            vector=embed_image(image_provider, blob, chunk.caption),
        )
    else:
        raise DimsError(f"not a chunk: {chunk!r}")
    cache.put(record)
    return record


def prefill_cache(
    cache: EmbeddingCache,
    doc: ParsedDocument,
    text_provider: EmbeddingProvider,
    image_provider: EmbeddingProvider,
) -> int:
    """Eagerly embed every chunk of a document; returns records touched."""
    for chunk in doc.chunks:
        embed_chunk_cached(cache, chunk, text_provider, image_provider)
    return len(doc.chunks)
