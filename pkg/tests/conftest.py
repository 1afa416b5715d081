import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sparseqa.doc_model import (
    ImageChunk,
    ImageRef,
    ParsedDocument,
    TextChunk,
    content_hash,
)
from sparseqa.embedding import EmbeddingCache, OfflineEmbedder, prefill_cache


def make_blob(tmp_path: Path, data: bytes) -> ImageRef:
    blob_dir = tmp_path / "blobs"
    blob_dir.mkdir(parents=True, exist_ok=True)
    h = content_hash(data)
    (blob_dir / h).write_bytes(data)
    return ImageRef(hash=h, locator=blob_dir / h)


def make_doc(tmp_path: Path, texts=None, images=None, doc_id="doc1",
             interleave=False) -> ParsedDocument:
    """texts: list of (text, section_path); images: list of (caption, label, bytes)."""
    texts = texts or []
    images = images or []
    chunks = []
    order = 0
    if interleave:
        # alternate text/image as far as both last
        ti, ii = 0, 0
        while ti < len(texts) or ii < len(images):
            if ti < len(texts):
                t, sec = texts[ti]
                chunks.append(TextChunk(f"t{ti}", order, tuple(sec), t))
                ti += 1
                order += 1
            if ii < len(images):
                cap, label, data = images[ii]
                chunks.append(ImageChunk(f"i{ii}", order, cap, label,
                                         make_blob(tmp_path, data)))
                ii += 1
                order += 1
    else:
        for i, (t, sec) in enumerate(texts):
            chunks.append(TextChunk(f"t{i}", order, tuple(sec), t))
            order += 1
        for i, (cap, label, data) in enumerate(images):
            chunks.append(ImageChunk(f"i{i}", order, cap, label,
                                     make_blob(tmp_path, data)))
            order += 1
    return ParsedDocument(doc_id=doc_id, source_name="fixture", chunks=tuple(chunks))


@pytest.fixture
def simple_doc(tmp_path):
    return make_doc(
        tmp_path,
        texts=[("First paragraph about methods.", ("Intro",)),
               ("Second paragraph, see Figure 1 for details.", ("Methods",))],
        images=[("Latency by document length.", "Figure 1", b"\x89PNG fake bytes")],
    )


TOPICS = [f"zqtopic{i:02d}" for i in range(8)]


@pytest.fixture
def planted():
    """Planted-topic world: one chunk per topic plus noise chunks; queries and
    chunks share the embedding space (no rotation)."""
    dims = 64
    provider = OfflineEmbedder(7, dims, planted_topics=TOPICS)
    return provider, TOPICS


def build_planted_doc(tmp_path, topics, chunks_per_topic=1, noise_chunks=4,
                      images=2, doc_id="planted"):
    texts = []
    for t in topics:
        for j in range(chunks_per_topic):
            texts.append((f"Paragraph {j} discussing {t} in depth.", ()))
    for j in range(noise_chunks):
        texts.append((f"Unrelated filler paragraph number {j}.", ()))
    imgs = [(f"Diagram {j} of miscellany.", f"Figure {j + 1}", b"img" + bytes([j]))
            for j in range(images)]
    return make_doc(tmp_path, texts=texts, images=imgs, doc_id=doc_id)


@pytest.fixture
def planted_world(tmp_path, planted):
    provider, topics = planted
    doc = build_planted_doc(tmp_path, topics)
    cache = EmbeddingCache()
    prefill_cache(cache, doc, provider, provider)
    return doc, provider, cache, topics
