import numpy as np
import pytest

from conftest import make_blob, make_doc
from sparseqa.dataset import (
    DEFAULT_TEMPLATES,
    STRATEGIES,
    EvidenceSelection,
    QAPair,
    build_prompt,
    default_filter_rules,
    export_corpus,
    filter_qa,
    generate_pairs,
    import_corpus,
    parse_generation,
    render_stats,
    select_evidence,
)
from sparseqa.doc_model import ImageChunk, ParsedDocument, TextChunk
from sparseqa.errors import (
    GenerationParseError,
    IntegrityError,
    SkipDocumentSignal,
    StrategyUnsatisfiableError,
    TemplateError,
)


def rich_doc(tmp_path):
    """Interleaved fixture: two sections, a referenced figure, an orphan image."""
    chunks = (
        TextChunk("t0", 0, ("Intro",), "Opening paragraph about goals."),
        TextChunk("t1", 1, ("Intro",), "Background with shared terminology."),
        ImageChunk("i0", 2, "Overview diagram.", "Figure 1",
                   make_blob(tmp_path, b"blob-one")),
        TextChunk("t2", 3, ("Intro",), "Closing intro remark."),
        TextChunk("t3", 4, ("Methods",), "Setup description paragraph."),
        TextChunk("t4", 5, ("Methods",), "As shown in Figure 1, latency drops."),
        ImageChunk("i1", 6, "Unreferenced photo.", None,
                   make_blob(tmp_path, b"blob-two")),
        TextChunk("t5", 7, ("Methods",), "Results discussion, see Table 2."),
    )
    return ParsedDocument(doc_id="rich", source_name="fixture", chunks=chunks)


class TestSelectEvidence:
    def test_text_only_single_text_chunk(self, tmp_path):
        doc = rich_doc(tmp_path)
        sel = select_evidence(doc, "text_only", np.random.default_rng(0))
        assert len(sel.chunk_ids) == 1
        assert sel.chunk_ids[0].startswith("t")

    def test_image_only_single_image(self, tmp_path):
        doc = rich_doc(tmp_path)
        sel = select_evidence(doc, "image_only", np.random.default_rng(0))
        assert sel.chunk_ids[0].startswith("i")

    def test_image_text_resolves_reference(self, tmp_path):
        doc = rich_doc(tmp_path)
        # the only resolvable cross-reference is t4 -> Figure 1 (= i0);
        # t5 cites Table 2 which has no matching image
        for seed in range(5):
            sel = select_evidence(doc, "image_text", np.random.default_rng(seed))
            assert set(sel.chunk_ids) == {"t4", "i0"}

    def test_image_text_unsatisfiable_without_references(self, tmp_path):
        doc = make_doc(tmp_path, texts=[("no references here", ())],
                       images=[("cap", "Figure 1", b"x")])
        with pytest.raises(StrategyUnsatisfiableError):
            select_evidence(doc, "image_text", np.random.default_rng(0))

    def test_section_covers_all_members_and_span_images(self, tmp_path):
        doc = rich_doc(tmp_path)
        seen = set()
        for seed in range(20):
            sel = select_evidence(doc, "section", np.random.default_rng(seed))
            seen.add(sel.chunk_ids)
        # Intro spans orders 0..3 and contains i0 (order 2);
        # Methods spans 4..7 and contains i1 (order 6).
        assert seen == {("t0", "t1", "i0", "t2"), ("t3", "t4", "i1", "t5")}

    def test_cross_paragraph_related_non_adjacent(self, tmp_path):
        texts = [
            ("shared theme aaa", ()),   # t0
            ("off topic filler", ()),   # t1
            ("shared theme bbb", ()),   # t2
            ("another stray note", ()), # t3
            ("shared theme ccc", ()),   # t4
        ]
        doc = make_doc(tmp_path, texts=texts)
        related = {"t0", "t2", "t4"}

        def embed(text):
            v = np.zeros(4)
            v[0 if "shared theme" in text else (2 + hash(text) % 2)] = 1.0
            return v

        sel = select_evidence(doc, "cross_paragraph", np.random.default_rng(1),
                              embed_fn=embed)
        assert 2 <= len(sel.chunk_ids) <= 4
        assert set(sel.chunk_ids) <= related
        orders = [doc.chunk(c).order_index for c in sel.chunk_ids]
        assert all(b - a >= 2 for a, b in zip(orders, orders[1:]))

    def test_cross_paragraph_unsatisfiable_when_unrelated(self, tmp_path):
        doc = make_doc(tmp_path, texts=[("one", ()), ("two", ()), ("three", ())])
        rng = np.random.default_rng(0)
        eye = np.eye(3)
        vecs = {"one": eye[0], "two": eye[1], "three": eye[2]}
        with pytest.raises(StrategyUnsatisfiableError):
            select_evidence(doc, "cross_paragraph", rng,
                            embed_fn=lambda t: vecs[t])

    def test_unknown_strategy(self, tmp_path):
        doc = rich_doc(tmp_path)
        with pytest.raises(StrategyUnsatisfiableError):
            select_evidence(doc, "bogus", np.random.default_rng(0))

    def test_empty_doc_strategies_unsatisfiable(self, tmp_path):
        doc = make_doc(tmp_path, texts=[("only text", ())])
        with pytest.raises(StrategyUnsatisfiableError):
            select_evidence(doc, "image_only", np.random.default_rng(0))

    def test_seed_determinism(self, tmp_path):
        doc = rich_doc(tmp_path)
        a = select_evidence(doc, "text_only", np.random.default_rng(5))
        b = select_evidence(doc, "text_only", np.random.default_rng(5))
        assert a == b


class TestBuildPrompt:
    def test_material_verbatim_and_markers(self, tmp_path):
        doc = rich_doc(tmp_path)
        sel = EvidenceSelection("text_only", ("t0",), "rich", 0)
        prompt = build_prompt(sel, doc, split="train", phase="generate")
        assert "Opening paragraph about goals." in prompt
        assert "[Q1]:" in prompt and "[A1]:" in prompt and "[Q3]:" in prompt

    def test_figure_question_prohibits_label_mention(self, tmp_path):
        doc = rich_doc(tmp_path)
        sel = EvidenceSelection("image_only", ("i0",), "rich", 0)
        prompt = build_prompt(sel, doc, split="test", phase="question")
        assert "'from the figure/table'" in prompt
        assert "Overview diagram." in prompt

    def test_section_test_prompt_same_prohibition(self, tmp_path):
        doc = rich_doc(tmp_path)
        sel = EvidenceSelection("section", ("t3", "t4", "i1", "t5"), "rich", 0)
        prompt = build_prompt(sel, doc, split="test", phase="question")
        assert "'from the figure/table'" in prompt

    def test_answer_phase_receives_question(self, tmp_path):
        doc = rich_doc(tmp_path)
        sel = EvidenceSelection("text_only", ("t0",), "rich", 0)
        prompt = build_prompt(sel, doc, split="test", phase="answer_concise",
                              question="[Q1]: What is the goal?")
        assert "What is the goal?" in prompt

    def test_missing_template(self, tmp_path):
        doc = rich_doc(tmp_path)
        sel = EvidenceSelection("text_only", ("t0",), "rich", 0)
        with pytest.raises(TemplateError):
            build_prompt(sel, doc, split="test", phase="generate")

    def test_every_default_template_renders(self, tmp_path):
        doc = rich_doc(tmp_path)
        sel = EvidenceSelection("text_only", ("t0", "i0"), "rich", 0)
        for (strategy, split, phase) in DEFAULT_TEMPLATES:
            s = EvidenceSelection(strategy, ("t0", "i0"), "rich", 0)
            out = build_prompt(s, doc, split=split, phase=phase, question="[Q1]: q?")
            assert "{" not in out.replace("{'", "")  # no unfilled placeholders


class TestParseGeneration:
    def test_basic_qa(self):
        raw = "[Q1]: What?\n[A1]: Because.\n[Q2]: Where?\n[A2]: Here."
        assert parse_generation(raw) == [("What?", ["Because."]),
                                         ("Where?", ["Here."])]

    def test_two_answer_variant(self):
        raw = "[Q1]: What?\n[A11]: short\n[A12]: longer keyword answer"
        assert parse_generation(raw) == [("What?", ["short", "longer keyword answer"])]

    def test_thinking_procedure_discarded(self):
        raw = ("[thinking procedure]: reason about the table first\n"
               "[A1]: forty-two")
        assert parse_generation(raw, "a_only") == [("", ["forty-two"])]

    def test_quit_raises_skip(self):
        with pytest.raises(SkipDocumentSignal):
            parse_generation("quit")
        with pytest.raises(SkipDocumentSignal):
            parse_generation("  'quit'  ")

    def test_unparseable_raises(self):
        with pytest.raises(GenerationParseError):
            parse_generation("no markers anywhere in this output")

    def test_q_only_mode(self):
        raw = "[Q1]: First question?\n[Q2]: Second question?"
        assert parse_generation(raw, "q_only") == [("First question?", []),
                                                   ("Second question?", [])]

    def test_unnumbered_markers(self):
        assert parse_generation("[Q]: why?\n[A]: reason") == [("why?", ["reason"])]

    def test_multiline_bodies(self):
        raw = "[Q1]: A question\nspanning lines?\n[A1]: An answer\nwith detail."
        assert parse_generation(raw) == [
            ("A question\nspanning lines?", ["An answer\nwith detail."])]


def mk_pair(question="What is the measured latency figure?",
            answers=("12 ms",), status="pending"):
    sel = EvidenceSelection("text_only", ("t0",), "rich", 0)
    return QAPair(qa_id="p1", question=question, answers=tuple(answers),
                  evidence=sel, generator_id="g", split="train",
                  filter_status=status)


class TestFilters:
    def test_good_pair_kept(self):
        kept, rejected = filter_qa([mk_pair()], default_filter_rules())
        assert len(kept) == 1 and not rejected
        assert kept[0].filter_status == "kept"

    def test_short_question_rejected(self):
        kept, rejected = filter_qa([mk_pair(question="Why so?")],
                                   default_filter_rules())
        assert not kept
        assert rejected[0].filter_status == "rejected:too_short_question"

    def test_long_answer_rejected(self):
        long_answer = " ".join(["word"] * 200)
        kept, rejected = filter_qa([mk_pair(answers=(long_answer,))],
                                   default_filter_rules())
        assert rejected[0].filter_status == "rejected:too_long_answer"

    def test_detailed_answer_allows_more(self):
        detailed = " ".join(["word"] * 100)  # over concise cap, under detailed
        kept, _ = filter_qa([mk_pair(answers=("short", detailed))],
                            default_filter_rules())
        assert len(kept) == 1

    def test_non_english_rejected(self):
        kept, rejected = filter_qa(
            [mk_pair(question="你好这是一个中文问题吗今天怎么样?")],
            default_filter_rules())
        assert rejected[0].filter_status.startswith("rejected:")

    def test_not_a_question_rejected(self):
        kept, rejected = filter_qa(
            [mk_pair(question="This is a statement with many tokens here.")],
            default_filter_rules())
        assert rejected[0].filter_status == "rejected:not_a_question"

    def test_filter_monotone_under_rule_removal(self):
        pairs = [mk_pair(), mk_pair(question="Why?"),
                 mk_pair(question="Statement with quite a few words here.")]
        rules = default_filter_rules()
        kept_all, _ = filter_qa(pairs, rules)
        kept_some, _ = filter_qa(pairs, rules[:1])
        assert len(kept_some) >= len(kept_all)


class _Replay:
    """Backend returning canned outputs in call order."""

    backend_id = "replay"

    def __init__(self, outputs):
        self.outputs = list(outputs)
        self.prompts = []

    def generate(self, prompt):
        self.prompts.append(prompt.instruction)
        return {"answer": self.outputs.pop(0), "prompt_tokens": 0}


class TestGeneratePairs:
    def test_train_single_call(self, tmp_path):
        doc = rich_doc(tmp_path)
        sel = EvidenceSelection("text_only", ("t0",), "rich", 0)
        backend = _Replay(["[Q1]: Why is the goal stated?\n[A1]: To frame scope.\n"
                           "[Q2]: What terminology is shared?\n[A2]: Background terms."])
        pairs = generate_pairs(doc, sel, backend, "train")
        assert len(pairs) == 2
        assert len(backend.prompts) == 1
        assert pairs[0].question == "Why is the goal stated?"
        assert pairs[0].split == "train"

    def test_train_cross_paragraph_two_phase(self, tmp_path):
        doc = rich_doc(tmp_path)
        sel = EvidenceSelection("cross_paragraph", ("t0", "t2"), "rich", 0)
        backend = _Replay([
            "[Q]: How do the intro paragraphs connect?",
            "[A1]: They share terminology.\n[A2]: The opening frames the close.",
        ])
        pairs = generate_pairs(doc, sel, backend, "train")
        assert len(pairs) == 1
        assert pairs[0].question == "How do the intro paragraphs connect?"
        assert pairs[0].answers == ("They share terminology.",
                                    "The opening frames the close.")
        assert len(backend.prompts) == 2

    def test_test_split_three_phases_two_variants(self, tmp_path):
        doc = rich_doc(tmp_path)
        sel = EvidenceSelection("text_only", ("t0",), "rich", 0)
        backend = _Replay([
            "[Q1]: What does the opening state?\n[Q2]: What is framed?",
            "[A1]: the goals\n[A2]: the scope",
            "[thinking procedure]: scan\n[A1]: goals\n[A2]: scope",
        ])
        pairs = generate_pairs(doc, sel, backend, "test")
        assert len(pairs) == 2
        assert pairs[0].answers == ("the goals", "goals")
        assert pairs[1].answers == ("the scope", "scope")
        assert len(backend.prompts) == 3

    def test_quit_propagates(self, tmp_path):
        doc = rich_doc(tmp_path)
        sel = EvidenceSelection("text_only", ("t0",), "rich", 0)
        with pytest.raises(SkipDocumentSignal):
            generate_pairs(doc, sel, _Replay(["quit"]), "train")


class TestExportImport:
    def test_round_trip_multiset(self, tmp_path):
        pairs = []
        for i, strategy in enumerate(STRATEGIES):
            sel = EvidenceSelection(strategy, ("t0",), "rich", 0)
            pairs.append(QAPair(
                qa_id=f"qa-{i}", question=f"Question number {i} about what?",
                answers=(f"answer {i}",), evidence=sel, generator_id="g",
                split="train" if i % 2 == 0 else "test", filter_status="kept"))
        out = tmp_path / "corpus.jsonl"
        stats = export_corpus(pairs, out)
        records = import_corpus(out)
        assert {r["id"] for r in records} == {p.qa_id for p in pairs}
        assert sum(stats.values()) == len(pairs)
        for r, p in zip(sorted(records, key=lambda r: r["id"]), pairs):
            assert r["question"] == p.question
            assert tuple(r["answers"]) == p.answers
            assert tuple(r["evidence"]) == p.evidence.chunk_ids

    def test_rejected_pairs_not_exported(self, tmp_path):
        pairs = [mk_pair(status="kept"),
                 mk_pair(status="rejected:too_short_question")]
        stats = export_corpus(pairs, tmp_path / "c.jsonl")
        assert sum(stats.values()) == 1
        assert len(import_corpus(tmp_path / "c.jsonl")) == 1

    def test_export_validates_evidence_resolution(self, tmp_path):
        doc = rich_doc(tmp_path)
        bad = QAPair(qa_id="x", question="q?", answers=("a",),
                     evidence=EvidenceSelection("text_only", ("t99",), "rich", 0),
                     generator_id="g", split="train", filter_status="kept")
        with pytest.raises(IntegrityError):
            export_corpus([bad], tmp_path / "c.jsonl", docs={"rich": doc})

    def test_render_stats_layout(self):
        stats = {"text_only/train": 7, "section/test": 3}
        text = render_stats(stats)
        assert "Single Text-only" in text and "Multi Section" in text
        lines = text.splitlines()
        assert len(lines) == 6  # header + five strategy rows
