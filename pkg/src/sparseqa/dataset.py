"""QA corpus construction: strategy-driven evidence selection, prompt
templating, generation-output parsing, rule-based filtering, and split export.

Five selection strategies produce evidence-annotated QA pairs:
text_only / image_only (single evidence), image_text / section /
cross_paragraph (multi evidence). Training templates ask for batched QA
generation in one call; test templates run two-phase (questions first, then
a concise-sentence and a keyword answer pass per question).
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .doc_model import ImageChunk, ParsedDocument, TextChunk
from .errors import (
    GenerationParseError,
    IntegrityError,
    SkipDocumentSignal,
    StrategyUnsatisfiableError,
    TemplateError,
)

STRATEGIES = ("text_only", "image_only", "image_text", "section", "cross_paragraph")
SINGLE_EVIDENCE = ("text_only", "image_only")


@dataclass(frozen=True)
class EvidenceSelection:
    strategy: str
    chunk_ids: tuple[str, ...]
    doc_id: str
    rng_seed: int

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise StrategyUnsatisfiableError(f"unknown strategy {self.strategy!r}")
        if not self.chunk_ids:
            raise IntegrityError("evidence selection must be non-empty")


@dataclass(frozen=True)
class QAPair:
    qa_id: str
    question: str
    answers: tuple[str, ...]  # 1-2 variants: concise, detailed
    evidence: EvidenceSelection
    generator_id: str
    split: str  # train | test
    filter_status: str = "kept"  # kept | rejected:<reason>

    @property
    def kept(self) -> bool:
        return self.filter_status == "kept"


@dataclass(frozen=True)
class FilterRule:
    rule_id: str
    description: str
    passes: Callable[[QAPair], bool]


# --- evidence selection --------------------------------------------------------

_FIGREF_RE = re.compile(r"\b(Figure|Fig\.|Table|Tab\.)\s*(\d+)", re.IGNORECASE)


def _normalize_label(kind: str, num: str) -> str:
    kind = kind.lower().rstrip(".")
    kind = {"fig": "figure", "tab": "table"}.get(kind, kind)
    return f"{kind} {num}"


def _referenced_labels(text: str) -> set[str]:
    return {_normalize_label(k, n) for k, n in _FIGREF_RE.findall(text)}


def select_evidence(
    doc: ParsedDocument,
    strategy: str,
    rng: np.random.Generator,
    embed_fn: Optional[Callable[[str], np.ndarray]] = None,
    theta_rel: float = 0.6,
    rng_seed: int = 0,
) -> EvidenceSelection:
    """Pick evidence chunks for one QA-generation call; seeded-deterministic."""
    texts = list(doc.text_chunks())
    images = list(doc.image_chunks())

    if strategy == "text_only":
        if not texts:
            raise StrategyUnsatisfiableError("text_only needs a text chunk")
        pick = texts[int(rng.integers(len(texts)))]
        ids: tuple[str, ...] = (pick.chunk_id,)

    elif strategy == "image_only":
        if not images:
            raise StrategyUnsatisfiableError("image_only needs an image chunk")
        pick = images[int(rng.integers(len(images)))]
        ids = (pick.chunk_id,)

    elif strategy == "image_text":
        by_label = {
            _normalize_label(*m.groups()): img
            for img in images if img.figure_label
            for m in [_FIGREF_RE.match(img.figure_label)] if m
        }
        pairs = []
        for t in texts:
            for label in sorted(_referenced_labels(t.text)):
                if label in by_label:
                    pairs.append((t.chunk_id, by_label[label].chunk_id))
        if not pairs:
            raise StrategyUnsatisfiableError("no text chunk references an available figure")
        ids = pairs[int(rng.integers(len(pairs)))]

    elif strategy == "section":
        paths = sorted({t.section_path for t in texts})
        if not paths:
            raise StrategyUnsatisfiableError("section needs a text chunk")
        path = paths[int(rng.integers(len(paths)))]
        members = [t for t in texts if t.section_path == path]
        orders = [t.order_index for t in members]
        lo, hi = min(orders), max(orders)
        # images positioned inside the section's span belong to it
        span_images = [i for i in images if lo < i.order_index < hi]
        ids = tuple(c.chunk_id for c in sorted(members + span_images,
                                               key=lambda c: c.order_index))

    elif strategy == "cross_paragraph":
        if embed_fn is None:
            raise StrategyUnsatisfiableError("cross_paragraph needs an embedding function")
        if len(texts) < 2:
            raise StrategyUnsatisfiableError("cross_paragraph needs >= 2 text chunks")
        vecs = {t.chunk_id: np.asarray(embed_fn(t.text), dtype=np.float64) for t in texts}
        anchors = list(rng.permutation(len(texts)))
        for ai in anchors:
            anchor = texts[int(ai)]
            selected = [anchor]
            for t in texts:
                if len(selected) >= 4:
                    break
                ok = all(
                    abs(t.order_index - s.order_index) >= 2
                    and float(np.dot(vecs[t.chunk_id], vecs[s.chunk_id])) >= theta_rel
                    for s in selected
                )
                if ok:
                    selected.append(t)
            if len(selected) >= 2:
                ids = tuple(c.chunk_id for c in sorted(selected, key=lambda c: c.order_index))
                break
        else:
            raise StrategyUnsatisfiableError(
                f"no related non-adjacent paragraphs at threshold {theta_rel}"
            )
    else:
        raise StrategyUnsatisfiableError(f"unknown strategy {strategy!r}")

    return EvidenceSelection(strategy=strategy, chunk_ids=tuple(ids),
                             doc_id=doc.doc_id, rng_seed=rng_seed)


# --- prompt templates -----------------------------------------------------------

_QA_MARKERS_3 = "[Q1]:\n[A1]:\n[Q2]:\n[A2]:\n[Q3]:\n[A3]:"
_QA_MARKERS_2 = "[Q1]:\n[A1]:\n[Q2]:\n[A2]:"

_TRAIN_TEXT_ONLY = """Generate 3 high quality academic questions and corresponding answers based on the provided text.
Requirements:
- Questions must be answerable from the material alone; do not add outside information.
- It is a single paragraph, not the whole paper: do not ask about the paper's main idea or abstract.
- Produce question-answer pairs, not multiple choice. Use English.
Expected output, listed as:
{markers}

Material:
{material}"""

_TRAIN_IMAGE_ONLY = """Generate 2 high quality academic questions and corresponding answers based solely on the provided figure or table.
Requirements:
- Must not mention the name of the figure directly or use words like "figure" or "table" in the question.
- Questions must be answerable from the figure content alone, without the surrounding text.
- Answers must be detailed and derived exclusively from the figure. Use English.
Expected output, listed as:
{markers}

Material:
{material}"""

_TRAIN_IMAGE_TEXT = """Generate 2 high quality academic questions and corresponding answers based on the provided figure; the accompanying paragraph may be used to understand it.
Requirements:
- Must not mention the name of the figure directly or use words like "figure" or "table" in the question.
- Questions demand reasoning over the figure's content; answers are detailed and grounded in the material only. Use English.
Expected output, listed as:
{markers}

Here is the supplementary paragraph text for the figure:
{material}"""

_TRAIN_SECTION = """Generate 3 high quality academic questions and corresponding answers based on a section of a research paper.
Requirements:
- Each question gets two answers: a concise one (no more than 20 words) and a detailed one including the reasoning chain.
- Questions must be answerable directly from the material; do not ask about the paper's main idea. Use English.
Expected output, listed as:
[Q1]:
[A11]: concise answer, no more than 20 words
[A12]: detailed answer with reasoning
[Q2]:
[A21]:
[A22]:
[Q3]:
[A31]:
[A32]:

Material:
{material}"""

_TRAIN_CROSS_Q = """Based on the selected paragraphs from a research paper that share a thematic connection, formulate one insightful open-ended question reflecting their shared themes.
Requirements:
- The question must not reference the paragraph indices directly.
Expected output:
[Q]: your question

Here are the selected paragraphs:
{material}"""

_TRAIN_CROSS_A = """Given the selected related paragraphs from a research paper, answer the question below.
Expected output:
[A1]: concise answer, no more than 20 words
[A2]: detailed answer with the reasoning chain, derived solely from the material

Material:
{material}

The question is:
{question}"""

_TEST_Q_TEXT = """Create 2 academic questions from a given research paper paragraph.
Requirements:
- No more than 30 words each; answerable by text, not multiple choice; use English.
- Focus on the paragraph, not the entire paper.
- If the paragraph lacks valid information, return 'quit'.
Expected output (return 'quit' directly if the paragraph lacks valid information):
[Q1]:
[Q2]:

Material:
{material}"""

_TEST_Q_FIGURE = """Formulate 2 academic questions based on the provided figures and tables from a research paper.
Requirements:
- No more than 30 words each; specific to the data visible in the figures/tables.
- Must not mention the label of the figure/table directly or use words like 'from the figure/table'.
- If the material lacks valid information, return 'quit'.
Expected output (return 'quit' directly if the material lacks valid information):
[Q1]:
[Q2]:

Material:
{material}"""

_TEST_Q_SECTION = """Formulate 2 academic questions based on a section from a research paper.
Requirements:
- No more than 30 words each; require integrating information across the section's paragraphs and figures/tables.
- Must not mention the label of the figure/table directly or use words like 'from the figure/table'.
Expected output:
[Q1]:
[Q2]:

Material:
{material}"""

_TEST_A_CONCISE = """Answer {n} questions based on the material given.
Requirements: each answer no more than one sentence, less than 20 words; use English; grounded in the material only.
You should think step by step and give your answer at the end like: [thinking procedure]: [A1/A2]
Expected output:
[thinking procedure]: ...
[A1]: answer 1, no more than one sentence.
[thinking procedure]: ...
[A2]: answer 2, no more than one sentence.

Material:
{material}

Questions:
{question}"""

_TEST_A_KEYWORD = """Answer {n} questions based on the material given.
Requirements: each answer within a few keywords, less than 20 words; use English; grounded in the material only.
You should think step by step and give your answer at the end like: [thinking procedure]: [A1/A2]
Expected output:
[thinking procedure]: ...
[A1]: answer 1, within a few keywords.
[thinking procedure]: ...
[A2]: answer 2, within a few keywords.

Material:
{material}

Questions:
{question}"""

# (strategy, split, phase) -> (template, n_questions)
DEFAULT_TEMPLATES: dict[tuple[str, str, str], tuple[str, int]] = {
    ("text_only", "train", "generate"): (_TRAIN_TEXT_ONLY.replace("{markers}", _QA_MARKERS_3), 3),
    ("image_only", "train", "generate"): (_TRAIN_IMAGE_ONLY.replace("{markers}", _QA_MARKERS_2), 2),
    ("image_text", "train", "generate"): (_TRAIN_IMAGE_TEXT.replace("{markers}", _QA_MARKERS_2), 2),
    ("section", "train", "generate"): (_TRAIN_SECTION, 3),
    ("cross_paragraph", "train", "question"): (_TRAIN_CROSS_Q, 1),
    ("cross_paragraph", "train", "answer"): (_TRAIN_CROSS_A, 1),
    ("text_only", "test", "question"): (_TEST_Q_TEXT, 2),
    ("image_only", "test", "question"): (_TEST_Q_FIGURE, 2),
    ("image_text", "test", "question"): (_TEST_Q_FIGURE, 2),
    ("section", "test", "question"): (_TEST_Q_SECTION, 2),
    ("cross_paragraph", "test", "question"): (_TEST_Q_SECTION, 2),
}
for _s in STRATEGIES:
    DEFAULT_TEMPLATES[(_s, "test", "answer_concise")] = (_TEST_A_CONCISE, 2)
    DEFAULT_TEMPLATES[(_s, "test", "answer_keyword")] = (_TEST_A_KEYWORD, 2)


def render_material(selection: EvidenceSelection, doc: ParsedDocument) -> str:
    parts = []
    for idx, cid in enumerate(selection.chunk_ids):
        chunk = doc.chunk(cid)
        if isinstance(chunk, TextChunk):
            parts.append(f"[paragraph idx={idx}]\n{chunk.text}")
        else:
            label = f" ({chunk.figure_label})" if chunk.figure_label else ""
            parts.append(f"[image idx={idx}]{label} caption: {chunk.caption}")
    return "\n\n".join(parts)


def build_prompt(
    selection: EvidenceSelection,
    doc: ParsedDocument,
    template_library: Optional[dict] = None,
    split: str = "train",
    phase: str = "generate",
    question: str = "",
) -> str:
    """Render the generation prompt for a selection; chunk content goes in
    verbatim."""
    library = template_library if template_library is not None else DEFAULT_TEMPLATES
    key = (selection.strategy, split, phase)
    if key not in library:
        raise TemplateError(f"no template for strategy={selection.strategy} "
                            f"split={split} phase={phase}")
    template, n = library[key]
    return template.format(material=render_material(selection, doc),
                           question=question, n=n)


# --- generation output parsing ---------------------------------------------------

_MARKER_RE = re.compile(r"\[(Q|A)(\d*)\]\s*:|\[thinking procedure\]\s*:", re.IGNORECASE)


def parse_generation(raw_text: str, expected_markers: str = "qa") -> list[tuple[str, list[str]]]:
    """Extract (question, answers) pairs from marker-structured LLM output.

    Markers: [Qi]: question, [Ai]: answer, [Ai1]/[Ai2]: two-answer variants.
    [thinking procedure]: blocks are discarded. A bare 'quit' raises
    SkipDocumentSignal. expected_markers: "qa" | "q_only" | "a_only".
    """
    stripped = raw_text.strip().strip("`'\"")
    if stripped.lower() == "quit":
        raise SkipDocumentSignal()

    questions: dict[int, str] = {}
    answers: dict[int, dict[int, str]] = {}
    matches = list(_MARKER_RE.finditer(raw_text))
    for m, nxt in zip(matches, matches[1:] + [None]):
        body = raw_text[m.end(): nxt.start() if nxt else len(raw_text)].strip()
        if m.group(0).lower().startswith("[thinking"):
            continue
        kind, digits = m.group(1).upper(), m.group(2)
        if kind == "Q":
            idx = int(digits) if digits else 1
            questions[idx] = body
        else:
            if len(digits) == 2:       # [Ai1]/[Ai2] two-answer variant
                idx, sub = int(digits[0]), int(digits[1])
            else:
                idx, sub = (int(digits) if digits else 1), 1
            answers.setdefault(idx, {})[sub] = body

    pairs: list[tuple[str, list[str]]] = []
    for idx in sorted(set(questions) | set(answers)):
        q = questions.get(idx, "")
        a = [answers[idx][s] for s in sorted(answers.get(idx, {}))]
        if expected_markers == "q_only":
            if q:
                pairs.append((q, []))
        elif q or a:
            pairs.append((q, a))
    if not pairs:
        raise GenerationParseError(f"no extractable pairs in output: {raw_text[:120]!r}")
    return pairs


# --- filtering --------------------------------------------------------------------

def _ascii_ratio(s: str) -> float:
    if not s:
        return 1.0
    return sum(1 for ch in s if ord(ch) < 128) / len(s)


def default_filter_rules(
    min_question_tokens: int = 6,
    max_concise_answer_tokens: int = 30,
    max_detailed_answer_tokens: int = 120,
    min_ascii_ratio: float = 0.9,
) -> list[FilterRule]:
    return [
        FilterRule(
            "too_short_question",
            f"question has >= {min_question_tokens} tokens",
            lambda p: len(p.question.split()) >= min_question_tokens,
        ),
        FilterRule(
            "too_long_answer",
            f"concise answer <= {max_concise_answer_tokens} tokens, "
            f"detailed <= {max_detailed_answer_tokens}",
            lambda p: (
                len(p.answers) >= 1
                and len(p.answers[0].split()) <= max_concise_answer_tokens
                and all(len(a.split()) <= max_detailed_answer_tokens for a in p.answers[1:])
            ),
        ),
        FilterRule(
            "non_english",
            f"ASCII ratio >= {min_ascii_ratio} over question and answers",
            lambda p: _ascii_ratio(p.question + " " + " ".join(p.answers)) >= min_ascii_ratio,
        ),
        FilterRule(
            "not_a_question",
            "question ends with '?'",
            lambda p: p.question.rstrip().endswith("?"),
        ),
    ]


def filter_qa(pairs: Sequence[QAPair], rules: Sequence[FilterRule]) -> tuple[list[QAPair], list[QAPair]]:
    """Evaluate every pair against every rule; first failing rule is the
    recorded rejection reason. Returns (kept, rejected)."""
    kept: list[QAPair] = []
    rejected: list[QAPair] = []
    for p in pairs:
        reason = next((r.rule_id for r in rules if not r.passes(p)), None)
        if reason is None:
            kept.append(replace(p, filter_status="kept"))
        else:
            rejected.append(replace(p, filter_status=f"rejected:{reason}"))
    return kept, rejected


# --- pipeline ----------------------------------------------------------------------

def _raw_prompt(text: str):
    from .generation import PromptAssembly

    return PromptAssembly(instruction_id="dataset", instruction=text, query="",
                          evidence_parts=(), token_estimate=0)


def generate_pairs(
    doc: ParsedDocument,
    selection: EvidenceSelection,
    backend,
    split: str,
    template_library: Optional[dict] = None,
    id_prefix: str = "qa",
) -> list[QAPair]:
    """Run the generation flow for one selection through an LLM backend.

    Train split: one batched call (two for cross_paragraph). Test split:
    question phase then concise and keyword answer phases.
    """
    gen_id = getattr(backend, "backend_id", "unknown")
    pairs: list[QAPair] = []

    def mk(i: int, q: str, answers: Sequence[str]) -> QAPair:
        return QAPair(
            qa_id=f"{id_prefix}-{selection.doc_id}-{selection.strategy}-{i}",
            question=q, answers=tuple(answers), evidence=selection,
            generator_id=gen_id, split=split,
        )

    if split == "train" and selection.strategy == "cross_paragraph":
        q_raw = backend.generate(_raw_prompt(build_prompt(
            selection, doc, template_library, split, "question")))["answer"]
        q = parse_generation(q_raw, "q_only")[0][0]
        a_raw = backend.generate(_raw_prompt(build_prompt(
            selection, doc, template_library, split, "answer", question=q)))["answer"]
        answers = parse_generation(a_raw, "a_only")
        flat = [a for _, ans in answers for a in ans]
        return [mk(0, q, flat)]

    if split == "train":
        raw = backend.generate(_raw_prompt(build_prompt(
            selection, doc, template_library, split, "generate")))["answer"]
        for i, (q, ans) in enumerate(parse_generation(raw, "qa")):
            pairs.append(mk(i, q, ans))
        return pairs

    # test split: two-phase with two answer variants per question
    q_raw = backend.generate(_raw_prompt(build_prompt(
        selection, doc, template_library, split, "question")))["answer"]
    qs = [q for q, _ in parse_generation(q_raw, "q_only")]
    q_block = "\n".join(f"[Q{i + 1}]: {q}" for i, q in enumerate(qs))
    concise_raw = backend.generate(_raw_prompt(build_prompt(
        selection, doc, template_library, split, "answer_concise", question=q_block)))["answer"]
    keyword_raw = backend.generate(_raw_prompt(build_prompt(
        selection, doc, template_library, split, "answer_keyword", question=q_block)))["answer"]
    concise = dict(enumerate(a for _, ans in parse_generation(concise_raw, "a_only") for a in ans))
    keyword = dict(enumerate(a for _, ans in parse_generation(keyword_raw, "a_only") for a in ans))
    for i, q in enumerate(qs):
        answers = [a for a in (concise.get(i), keyword.get(i)) if a]
        if answers:
            pairs.append(mk(i, q, answers))
    if not pairs:
        raise GenerationParseError("test-split generation produced no answered questions")
    return pairs


# --- export / import ----------------------------------------------------------------

def pair_to_record(p: QAPair) -> dict:
    return {
        "id": p.qa_id,
        "doc_id": p.evidence.doc_id,
        "strategy": p.evidence.strategy,
        "question": p.question,
        "answers": list(p.answers),
        "evidence": list(p.evidence.chunk_ids),
        "split": p.split,
        "generator": p.generator_id,
    }


def export_corpus(pairs: Sequence[QAPair], out_path: Path,
                  docs: Optional[dict[str, ParsedDocument]] = None) -> dict:
    """Write kept pairs as JSONL and return per-(strategy, split) counts.

    When docs are supplied, every evidence id is verified to resolve.
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    stats: dict[tuple[str, str], int] = {}
    with out_path.open("w", encoding="utf-8") as f:
        for p in pairs:
            if not p.kept:
                continue
            if docs is not None:
                doc = docs.get(p.evidence.doc_id)
                if doc is None or not all(doc.has_chunk(c) for c in p.evidence.chunk_ids):
                    raise IntegrityError(
                        f"pair {p.qa_id}: evidence does not resolve in {p.evidence.doc_id}"
                    )
            f.write(json.dumps(pair_to_record(p), ensure_ascii=False) + "\n")
            key = (p.evidence.strategy, p.split)
            stats[key] = stats.get(key, 0) + 1
    return {f"{s}/{sp}": n for (s, sp), n in sorted(stats.items())}


def import_corpus(path: Path) -> list[dict]:
    records = []
    with Path(path).open(encoding="utf-8") as f:
        for line in f:
            if line.strip():
                records.append(json.loads(line))
    return records


_STATS_ROWS = [
    ("Single", "text_only", "Text-only"),
    ("Single", "image_only", "Image-only"),
    ("Multi", "image_text", "Image-text"),
    ("Multi", "section", "Section"),
    ("Multi", "cross_paragraph", "Cross-paragraph"),
]


def render_stats(stats: dict) -> str:
    """Plain-text per-strategy count table, train and test columns."""
    lines = [f"{'Category':<28}{'Training':>10}{'Test':>10}"]
    for group, strategy, label in _STATS_ROWS:
        tr = stats.get(f"{strategy}/train", 0)
        te = stats.get(f"{strategy}/test", 0)
        lines.append(f"{group + ' ' + label:<28}{tr:>10}{te:>10}")
    return "\n".join(lines)
