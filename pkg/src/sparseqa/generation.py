"""Prompt assembly and answer generation through a pluggable LLM backend.

Evidence parts are rendered in sampler rank order (most relevant nearest the
instruction). Text chunks go in verbatim; image chunks travel as attachment
references with their captions. Backends are anything with a
``generate(payload) -> {"answer": ..., "prompt_tokens": n}`` method; the
built-in mocks (echo / extractive / scripted) keep the whole pipeline
runnable offline.
"""
from __future__ import annotations

import base64
import hashlib
import os
import re
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Union

from .doc_model import ImageChunk, ParsedDocument, TextChunk
from .errors import (
    BackendError,
    ContextOverflowError,
    IntegrityError,
    TransientBackendError,
)
from .sampler import SampledEvidence

TOKENS_PER_IMAGE = 256

DEFAULT_INSTRUCTION = (
    "Answer the question using only the evidence provided below. "
    "Cite the id of each evidence piece you rely on. "
    "If the evidence does not contain the answer, say so."
)

TEMPLATES = {
    "default": DEFAULT_INSTRUCTION,
    "terse": "Answer from the evidence only. Cite evidence ids.",
}

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


def estimate_tokens(text: str) -> int:
    """Deterministic whitespace-plus-punctuation token count."""
    return len(_TOKEN_RE.findall(text))


@dataclass(frozen=True)
class TextPart:
    chunk_id: str
    content: str


@dataclass(frozen=True)
class ImagePart:
    chunk_id: str
    blob_hash: str
    blob: bytes
    caption: str


Part = Union[TextPart, ImagePart]


@dataclass(frozen=True)
class PromptAssembly:
    instruction_id: str
    instruction: str
    query: str
    evidence_parts: tuple[Part, ...]
    token_estimate: int

    def prompt_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.instruction.encode("utf-8"))
        h.update(b"\x00" + self.query.encode("utf-8"))
        for p in self.evidence_parts:
            if isinstance(p, TextPart):
                h.update(b"\x00T" + p.chunk_id.encode() + b"|" + p.content.encode("utf-8"))
            else:
                h.update(b"\x00I" + p.chunk_id.encode() + b"|" + p.blob_hash.encode()
                         + b"|" + p.caption.encode("utf-8"))
        return h.hexdigest()

    def evidence_ids(self) -> list[str]:
        return [p.chunk_id for p in self.evidence_parts]


@dataclass(frozen=True)
class AnswerResult:
    answer_text: str
    evidence_used: tuple[str, ...]
    prompt_tokens: int
    latency_ms: int
    backend_id: str


def assemble_prompt(
    query: str,
    evidence: SampledEvidence,
    doc: ParsedDocument,
    template_id: str = "default",
) -> PromptAssembly:
    """Build the evidence-grounded prompt in rank order."""
    if template_id not in TEMPLATES:
        raise IntegrityError(f"unknown template {template_id!r}")
    if not evidence.entries:
        raise IntegrityError("evidence must contain at least one chunk")
    instruction = TEMPLATES[template_id]
    parts: list[Part] = []
    tokens = estimate_tokens(instruction) + estimate_tokens(query)
    for entry in evidence.entries:
        if not doc.has_chunk(entry.chunk_id):
            raise IntegrityError(f"evidence chunk {entry.chunk_id!r} not in document")
        chunk = doc.chunk(entry.chunk_id)
        if isinstance(chunk, TextChunk):
            parts.append(TextPart(chunk.chunk_id, chunk.text))
            tokens += estimate_tokens(chunk.text)
        else:
            blob = chunk.image_ref.resolve()
            parts.append(ImagePart(chunk.chunk_id, chunk.image_ref.hash, blob, chunk.caption))
            tokens += TOKENS_PER_IMAGE + estimate_tokens(chunk.caption)
    return PromptAssembly(
        instruction_id=template_id,
        instruction=instruction,
        query=query,
        evidence_parts=tuple(parts),
        token_estimate=tokens,
    )


class Backend(Protocol):
    backend_id: str

    def generate(self, prompt: PromptAssembly) -> dict: ...


def generate_answer(
    backend: Backend,
    prompt: PromptAssembly,
    max_attempts: int = 3,
    sleep: Callable[[float], None] = time.sleep,
) -> AnswerResult:
    """Call the backend with exponential backoff on transient failures.

    Backoff: 200ms base, x4 growth, no jitter (test determinism).
    """
    start = time.perf_counter()
    last_exc: Optional[Exception] = None
    for attempt in range(max_attempts):
        try:
            out = backend.generate(prompt)
            break
        except ContextOverflowError:
            raise
        except TransientBackendError as e:
            last_exc = e
            if attempt + 1 < max_attempts:
                sleep(0.2 * (4 ** attempt))
    else:
        raise BackendError(f"backend {backend.backend_id} failed after "
                           f"{max_attempts} attempts: {last_exc}")
    latency_ms = int((time.perf_counter() - start) * 1000)
    return AnswerResult(
        answer_text=out["answer"],
        evidence_used=tuple(out.get("evidence_used", prompt.evidence_ids())),
        prompt_tokens=int(out.get("prompt_tokens", prompt.token_estimate)),
        latency_ms=latency_ms,
        backend_id=backend.backend_id,
    )


# --- mock backends ------------------------------------------------------------

class EchoBackend:
    """Returns a canned answer derived from the prompt hash."""

    backend_id = "mock-echo"

    def generate(self, prompt: PromptAssembly) -> dict:
        return {
            "answer": f"echo:{prompt.prompt_hash()[:16]}",
            "prompt_tokens": prompt.token_estimate,
        }


class ExtractiveBackend:
    """Returns the highest-ranked text evidence part verbatim."""

    backend_id = "mock-extractive"

    def generate(self, prompt: PromptAssembly) -> dict:
        for part in prompt.evidence_parts:
            if isinstance(part, TextPart):
                return {
                    "answer": part.content,
                    "evidence_used": [part.chunk_id],
                    "prompt_tokens": prompt.token_estimate,
                }
        return {"answer": "", "evidence_used": [], "prompt_tokens": prompt.token_estimate}


class ScriptedBackend:
    """Replays a recorded transcript keyed by prompt hash.

    Unknown prompts fall back to ``default`` when set, else raise.
    """

    backend_id = "mock-scripted"

    def __init__(self, transcript: dict[str, str], default: Optional[str] = None):
        self.transcript = dict(transcript)
        self.default = default

    def generate(self, prompt: PromptAssembly) -> dict:
        key = prompt.prompt_hash()
        if key in self.transcript:
            answer = self.transcript[key]
        elif self.default is not None:
            answer = self.default
        else:
            raise BackendError(f"scripted backend has no entry for prompt {key[:16]}")
        return {"answer": answer, "prompt_tokens": prompt.token_estimate}


class FlakyBackend:
    """Test double: fails transiently n times, then delegates."""

    def __init__(self, inner: Backend, failures: int):
        self.inner = inner
        self.failures = failures
        self.backend_id = f"flaky({inner.backend_id})"
        self.calls = 0

    def generate(self, prompt: PromptAssembly) -> dict:
        self.calls += 1
        if self.calls <= self.failures:
            raise TransientBackendError(f"simulated transient failure {self.calls}")
        return self.inner.generate(prompt)


def mock_backends() -> dict[str, Backend]:
    return {
        "echo": EchoBackend(),
        "extractive": ExtractiveBackend(),
        "scripted": ScriptedBackend({}, default="scripted-default"),
    }


# --- remote backend -------------------------------------------------------------

class RemoteBackend:
    """HTTP+JSON LLM backend client (POST /generate)."""

    def __init__(self, base_url: str, timeout: float = 120.0):
        import httpx

        self.base_url = base_url.rstrip("/")
        self.backend_id = f"remote:{self.base_url}"
        headers = {}
        token = os.environ.get("WUKONG_LLM_TOKEN")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        self._client = httpx.Client(timeout=timeout, headers=headers)

    def generate(self, prompt: PromptAssembly) -> dict:
        import httpx

        parts = []
        for p in prompt.evidence_parts:
            if isinstance(p, TextPart):
                parts.append({"type": "text", "content": p.content})
            else:
                parts.append({
                    "type": "image",
                    "data": base64.b64encode(p.blob).decode("ascii"),
                    "caption": p.caption,
                })
        payload = {"instruction": prompt.instruction, "query": prompt.query, "parts": parts}
        try:
            resp = self._client.post(self.base_url + "/generate", json=payload)
        except httpx.HTTPError as e:
            raise TransientBackendError(f"backend unreachable: {e}")
        if resp.status_code == 413:
            raise ContextOverflowError(prompt.token_estimate)
        if resp.status_code >= 500:
            raise TransientBackendError(f"backend returned {resp.status_code}")
        if resp.status_code != 200:
            raise BackendError(f"backend returned {resp.status_code}")
        body = resp.json()
        return {"answer": body["answer"],
                "prompt_tokens": int(body.get("prompt_tokens", prompt.token_estimate))}
