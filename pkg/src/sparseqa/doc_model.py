"""Interleaved document model: reading-ordered text and image chunks.

A parsed document is stored as a single markup file with ``<text>`` and
``<image>`` elements in reading order; image blobs live in a sibling
``blobs/<hash>`` directory, content-addressed by sha256. Serialization is
canonical (fixed attribute order, LF newlines, sorted nothing-else) so
parse/serialize round-trips are byte-exact.

Validity constraints on content beyond the type invariants:
- text, captions, headings and ids must not contain C0 control characters
  other than tab and newline (they are unrepresentable in XML 1.0);
- section headings must not contain "/" (it is the section-path separator).
"""
from __future__ import annotations

import hashlib
import json
import subprocess
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

from .errors import (
    ConversionError,
    ExternalToolError,
    IntegrityError,
    MissingBlobError,
    ParseError,
)

SECTION_SEP = "/"


def content_hash(data: bytes) -> str:
    return "sha256:" + hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class ImageRef:
    """Content-addressed reference to a stored image blob."""

    hash: str
    locator: Optional[Path] = None

    def resolve(self) -> bytes:
        if self.locator is None or not self.locator.is_file():
            raise MissingBlobError(f"blob {self.hash} has no stored file")
        data = self.locator.read_bytes()
        if content_hash(data) != self.hash:
            raise MissingBlobError(f"blob at {self.locator} does not match hash {self.hash}")
        return data


@dataclass(frozen=True)
class TextChunk:
    chunk_id: str
    order_index: int
    section_path: tuple[str, ...]
    text: str

    def __post_init__(self):
        if not self.text.strip():
            raise IntegrityError(f"text chunk {self.chunk_id} is empty after trimming")
        for heading in self.section_path:
            if SECTION_SEP in heading:
                raise IntegrityError(f"section heading {heading!r} contains {SECTION_SEP!r}")

    @property
    def modality(self) -> str:
        return "text"


@dataclass(frozen=True)
class ImageChunk:
    chunk_id: str
    order_index: int
    caption: str
    figure_label: Optional[str]
    image_ref: ImageRef

    @property
    def modality(self) -> str:
        return "image"


Chunk = Union[TextChunk, ImageChunk]


@dataclass(frozen=True)
class ParsedDocument:
    """Immutable reading-ordered sequence of text and image chunks."""

    doc_id: str
    source_name: str
    chunks: tuple[Chunk, ...]

    def __post_init__(self):
        if not self.chunks:
            raise ParseError("no chunks")
        orders = sorted(c.order_index for c in self.chunks)
        if orders != list(range(len(self.chunks))):
            raise IntegrityError(
                f"order_index values must be exactly 0..{len(self.chunks) - 1}, got {orders}"
            )
        ids = [c.chunk_id for c in self.chunks]
        if len(set(ids)) != len(ids):
            raise IntegrityError("duplicate chunk_id")
        object.__setattr__(self, "chunks", tuple(sorted(self.chunks, key=lambda c: c.order_index)))

    @property
    def n_text(self) -> int:
        return sum(1 for c in self.chunks if isinstance(c, TextChunk))

    @property
    def m_image(self) -> int:
        return sum(1 for c in self.chunks if isinstance(c, ImageChunk))

    def text_chunks(self) -> Iterator[TextChunk]:
        return (c for c in self.chunks if isinstance(c, TextChunk))

    def image_chunks(self) -> Iterator[ImageChunk]:
        return (c for c in self.chunks if isinstance(c, ImageChunk))

    def chunk(self, chunk_id: str) -> Chunk:
        for c in self.chunks:
            if c.chunk_id == chunk_id:
                return c
        raise IntegrityError(f"unknown chunk_id {chunk_id!r}")

    def has_chunk(self, chunk_id: str) -> bool:
        return any(c.chunk_id == chunk_id for c in self.chunks)


# --- canonical serialization ------------------------------------------------

def _escape_attr(s: str) -> str:
    return (
        s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
        .replace('"', "&quot;").replace("\t", "&#9;").replace("\n", "&#10;")
    )


def _escape_text(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _normalize_newlines(s: str) -> str:
    return s.replace("\r\n", "\n").replace("\r", "\n")


def serialize_document(doc: ParsedDocument) -> bytes:
    """Render the canonical markup form: fixed attribute order, LF, UTF-8."""
    lines = [f'<document id="{_escape_attr(doc.doc_id)}" source="{_escape_attr(doc.source_name)}">']
    for c in doc.chunks:
        if isinstance(c, TextChunk):
            attrs = f'id="{_escape_attr(c.chunk_id)}" order="{c.order_index}"'
            if c.section_path:
                attrs += f' section="{_escape_attr(SECTION_SEP.join(c.section_path))}"'
            lines.append(f"  <text {attrs}>{_escape_text(_normalize_newlines(c.text))}</text>")
        else:
            attrs = f'id="{_escape_attr(c.chunk_id)}" order="{c.order_index}"'
            if c.figure_label is not None:
                attrs += f' label="{_escape_attr(c.figure_label)}"'
            attrs += f' hash="{c.image_ref.hash}"'
            lines.append(f"  <image {attrs}>{_escape_text(_normalize_newlines(c.caption))}</image>")
    lines.append("</document>")
    lines.append("")
    return "\n".join(lines).encode("utf-8")


def parse_interleaved(data: bytes, blob_root: Optional[Path] = None,
                      verify_blobs: bool = True) -> ParsedDocument:
    """Parse the canonical markup form.

    When blob_root is given, every image's blob must exist there under
    ``<hash>`` and match its hash; otherwise references are left unresolved
    (pure in-memory parse).
    """
    try:
        root = ET.fromstring(data.decode("utf-8"))
    except UnicodeDecodeError as e:
        raise ParseError(f"not valid UTF-8: {e}")
    except ET.ParseError as e:
        line, col = e.position
        raise ParseError(str(e.msg) if hasattr(e, "msg") else str(e), line=line, column=col)

    if root.tag != "document":
        raise ParseError(f"expected <document> root, got <{root.tag}>")

    chunks: list[Chunk] = []
    seen_orders: set[int] = set()
    for el in root:
        try:
            order = int(el.attrib["order"])
            cid = el.attrib["id"]
        except (KeyError, ValueError) as e:
            raise ParseError(f"bad or missing attribute on <{el.tag}>: {e}")
        if order in seen_orders:
            raise IntegrityError(f"duplicate order_index {order}")
        seen_orders.add(order)
        body = _normalize_newlines(el.text or "")
        if el.tag == "text":
            section = el.attrib.get("section", "")
            path = tuple(section.split(SECTION_SEP)) if section else ()
            chunks.append(TextChunk(cid, order, path, body))
        elif el.tag == "image":
            h = el.attrib.get("hash")
            if not h:
                raise ParseError(f"image {cid} missing hash attribute")
            locator = blob_root / h if blob_root is not None else None
            ref = ImageRef(hash=h, locator=locator)
            if blob_root is not None and verify_blobs:
                ref.resolve()  # raises MissingBlobError on absence/mismatch
            chunks.append(ImageChunk(cid, order, body, el.attrib.get("label"), ref))
        else:
            raise ParseError(f"unknown element <{el.tag}>")

    if not chunks:
        raise ParseError("no chunks")
    return ParsedDocument(
        doc_id=root.attrib.get("id", ""),
        source_name=root.attrib.get("source", ""),
        chunks=tuple(chunks),
    )


def load_document(path: Path, verify_blobs: bool = True) -> ParsedDocument:
    """Parse a document file, resolving blobs from its sibling blobs/ dir."""
    return parse_interleaved(path.read_bytes(), blob_root=path.parent / "blobs",
                             verify_blobs=verify_blobs)


def save_document(doc: ParsedDocument, path: Path) -> None:
    """Write the canonical form and copy blobs beside it."""
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_dir = path.parent / "blobs"
    for img in doc.image_chunks():
        data = img.image_ref.resolve()
        blob_dir.mkdir(exist_ok=True)
        target = blob_dir / img.image_ref.hash
        if not target.exists():
            target.write_bytes(data)
    path.write_bytes(serialize_document(doc))


# --- external parser adapters ----------------------------------------------

def external_parse(
    pdf_path: Path,
    parser_command: Sequence[str],
    blob_dir: Path,
    dialect: str = "json",
    doc_id: Optional[str] = None,
) -> ParsedDocument:
    """Run a configured external PDF parser and canonicalize its output.

    The command is invoked as ``parser_command... <pdf_path>`` and must emit
    its structured output on stdout. Two output dialects are supported:
    "json" (paragraph/figure lists) and "flat" (line-tagged records).
    """
    if not Path(pdf_path).is_file():
        raise ExternalToolError(f"input not readable: {pdf_path}", exit_status=-1)
    proc = subprocess.run(
        [*parser_command, str(pdf_path)], capture_output=True, text=True
    )
    if proc.returncode != 0:
        raise ExternalToolError(
            f"external parser failed on {pdf_path}",
            exit_status=proc.returncode,
            diagnostics=proc.stderr,
        )
    converter = {"json": convert_json_dialect, "flat": convert_flat_dialect}.get(dialect)
    if converter is None:
        raise ConversionError(f"unknown parser dialect {dialect!r}")
    return converter(proc.stdout, blob_dir, doc_id or Path(pdf_path).stem, str(pdf_path))


def _store_blob(data: bytes, blob_dir: Path) -> ImageRef:
    blob_dir.mkdir(parents=True, exist_ok=True)
    h = content_hash(data)
    target = blob_dir / h
    if not target.exists():
        target.write_bytes(data)
    return ImageRef(hash=h, locator=target)


def convert_json_dialect(raw: str, blob_dir: Path, doc_id: str, source: str) -> ParsedDocument:
    """Canonicalize the JSON dialect.

    Expected shape: {"elements": [{"type": "paragraph", "text": ..., "section": [..]}
    | {"type": "figure", "caption": ..., "label": ..., "image_b64": ...}, ...]}
    """
    import base64

    try:
        payload = json.loads(raw)
        elements = payload["elements"]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise ConversionError(f"unparseable json dialect output: {e}")

    chunks: list[Chunk] = []
    t = i = 0
    for order, el in enumerate(elements):
        kind = el.get("type")
        if kind == "paragraph":
            chunks.append(TextChunk(f"t{t}", order, tuple(el.get("section", [])), el["text"]))
            t += 1
        elif kind == "figure":
            try:
                data = base64.b64decode(el["image_b64"])
            except (KeyError, ValueError) as e:
                raise ConversionError(f"figure element missing image data: {e}")
            ref = _store_blob(data, blob_dir)
            chunks.append(ImageChunk(f"i{i}", order, el.get("caption", ""), el.get("label"), ref))
            i += 1
        else:
            raise ConversionError(f"unknown element type {kind!r}")
    if not chunks:
        raise ConversionError("parser emitted no elements")
    return ParsedDocument(doc_id=doc_id, source_name=source, chunks=tuple(chunks))


def convert_flat_dialect(raw: str, blob_dir: Path, doc_id: str, source: str) -> ParsedDocument:
    """Canonicalize the flat line-tagged dialect.

    Each line is ``P<TAB>section<TAB>text`` or ``F<TAB>label<TAB>caption<TAB>image_b64``;
    section levels are joined by ">".
    """
    import base64

    chunks: list[Chunk] = []
    t = i = order = 0
    for lineno, line in enumerate(raw.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if fields[0] == "P" and len(fields) == 3:
            path = tuple(p for p in fields[1].split(">") if p)
            chunks.append(TextChunk(f"t{t}", order, path, fields[2]))
            t += 1
        elif fields[0] == "F" and len(fields) == 4:
            try:
                data = base64.b64decode(fields[3])
            except ValueError as e:
                raise ConversionError(f"line {lineno}: bad image data: {e}")
            ref = _store_blob(data, blob_dir)
            chunks.append(ImageChunk(f"i{i}", order, fields[2], fields[1] or None, ref))
            i += 1
        else:
            raise ConversionError(f"line {lineno}: unrecognized record {fields[0]!r}")
        order += 1
    if not chunks:
        raise ConversionError("parser emitted no elements")
    return ParsedDocument(doc_id=doc_id, source_name=source, chunks=tuple(chunks))
