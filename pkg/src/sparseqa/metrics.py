"""Answer-quality and retrieval metrics, plus run aggregation.

String metrics follow document-QA conventions: ANLS with the 0.5 cut,
token-level F1, and ROUGE-L F-measure (beta = 1). One normalization is
applied on both sides of every metric: lowercase, collapse whitespace, strip
terminal punctuation. Multi-reference scores take the max over references.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .errors import EmptyRunError


def normalize_answer(s: str) -> str:
    s = " ".join(s.lower().split())
    return s.rstrip(".,;:!?")


def tokenize(s: str) -> list[str]:
    return re.findall(r"\w+", normalize_answer(s), re.UNICODE)


def levenshtein(a: str, b: str) -> int:
    """Unit-cost edit distance over unicode scalar values."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def anls(prediction: str, gt_answers: Sequence[str]) -> float:
    """Normalized Levenshtein similarity with the 0.5 threshold, max over gts."""
    best = 0.0
    p = normalize_answer(prediction)
    for gt in gt_answers:
        g = normalize_answer(gt)
        if not p and not g:
            s = 1.0
        elif not p or not g:
            s = 0.0
        else:
            s = 1.0 - levenshtein(p, g) / max(len(p), len(g))
        if s < 0.5:
            s = 0.0
        best = max(best, s)
    return best


def _f1(overlap: int, n_pred: int, n_gt: int) -> float:
    if overlap == 0 or n_pred == 0 or n_gt == 0:
        return 0.0
    precision = overlap / n_pred
    recall = overlap / n_gt
    return 2 * precision * recall / (precision + recall)


def token_f1(prediction: str, gt_answers: Sequence[str]) -> float:
    """Token-level multiset-overlap F1, max over gts."""
    pred_tokens = tokenize(prediction)
    best = 0.0
    for gt in gt_answers:
        gt_tokens = tokenize(gt)
        counts: dict[str, int] = {}
        for t in gt_tokens:
            counts[t] = counts.get(t, 0) + 1
        overlap = 0
        for t in pred_tokens:
            if counts.get(t, 0) > 0:
                counts[t] -= 1
                overlap += 1
        best = max(best, _f1(overlap, len(pred_tokens), len(gt_tokens)))
    return best


def _lcs_len(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(prediction: str, gt_answers: Sequence[str]) -> float:
    """ROUGE-L F-measure (beta = 1) over token sequences, max over gts."""
    pred_tokens = tokenize(prediction)
    best = 0.0
    for gt in gt_answers:
        gt_tokens = tokenize(gt)
        lcs = _lcs_len(pred_tokens, gt_tokens)
        best = max(best, _f1(lcs, len(pred_tokens), len(gt_tokens)))
    return best


def retrieval_recall(sampled_evidence: Sequence[str], gt_evidence: Sequence[str],
                     k: Optional[int] = None) -> Optional[float]:
    """Fraction of annotated evidence present in the top-k selection.

    Returns None for empty ground truth (case excluded from aggregation).
    """
    gt = set(gt_evidence)
    if not gt:
        return None
    top = list(sampled_evidence)[:k] if k is not None else list(sampled_evidence)
    return len(gt & set(top)) / len(gt)


@dataclass(frozen=True)
class EvalCase:
    case_id: str
    question: str
    gt_answers: tuple[str, ...]
    gt_evidence: tuple[str, ...]
    prediction: str
    sampled_evidence: tuple[str, ...]  # in rank order
    prompt_tokens: int = 0
    latency_ms: int = 0
    doc_length: Optional[int] = None  # chunk count, for length bucketing

    def __post_init__(self):
        if not self.gt_answers:
            raise EmptyRunError(f"case {self.case_id}: gt_answers must be non-empty")


@dataclass(frozen=True)
class MetricReport:
    anls: float
    token_f1: float
    rouge_l: float
    recall_at_k: Optional[float]
    mean_tokens: float
    mean_latency_ms: float
    case_count: int
    recall_excluded: int = 0  # cases with empty gt evidence
    gpt_acc: Optional[float] = None


def gpt_acc(judge_backend, case: EvalCase) -> int:
    """Binary correctness verdict from a judge backend; see evaluate_run."""
    from .generation import PromptAssembly, TextPart

    prompt = PromptAssembly(
        instruction_id="judge",
        instruction=(
            "You are grading a question-answering system. Given the question, "
            "the reference answers, and the prediction, output 1 if the "
            "prediction is correct and 0 otherwise. Output a single digit."
        ),
        query=case.question,
        evidence_parts=(
            TextPart("reference", " | ".join(case.gt_answers)),
            TextPart("prediction", case.prediction),
        ),
        token_estimate=0,
    )
    out = judge_backend.generate(prompt)
    verdict = str(out["answer"]).strip()
    return 1 if verdict.startswith("1") else 0


def evaluate_run(cases: Sequence[EvalCase], k: int = 5,
                 judge_backend=None) -> MetricReport:
    """Aggregate per-case metrics into a report; fixed summation order."""
    if not cases:
        raise EmptyRunError("no cases to evaluate")
    sum_anls = sum_f1 = sum_rouge = 0.0
    sum_tokens = sum_latency = 0
    recall_sum, recall_n, recall_excl = 0.0, 0, 0
    judge_sum = 0
    judge_ok = judge_backend is not None
    for c in cases:
        sum_anls += anls(c.prediction, c.gt_answers)
        sum_f1 += token_f1(c.prediction, c.gt_answers)
        sum_rouge += rouge_l(c.prediction, c.gt_answers)
        sum_tokens += c.prompt_tokens
        sum_latency += c.latency_ms
        r = retrieval_recall(c.sampled_evidence, c.gt_evidence, k)
        if r is None:
            recall_excl += 1
        else:
            recall_sum += r
            recall_n += 1
        if judge_ok:
            try:
                judge_sum += gpt_acc(judge_backend, c)
            except Exception:
                judge_ok = False  # judge unavailable: omit, never fabricate
    n = len(cases)
    return MetricReport(
        anls=sum_anls / n,
        token_f1=sum_f1 / n,
        rouge_l=sum_rouge / n,
        recall_at_k=(recall_sum / recall_n) if recall_n else None,
        mean_tokens=sum_tokens / n,
        mean_latency_ms=sum_latency / n,
        case_count=n,
        recall_excluded=recall_excl,
        gpt_acc=(judge_sum / n) if judge_ok else None,
    )


def evaluate_grouped(cases: Sequence[EvalCase], k: int = 5,
                     bucket_size: int = 50) -> dict[str, MetricReport]:
    """Reports bucketed by document length (chunk count)."""
    buckets: dict[str, list[EvalCase]] = {}
    for c in cases:
        if c.doc_length is None:
            key = "unknown"
        else:
            lo = (c.doc_length // bucket_size) * bucket_size
            key = f"{lo}-{lo + bucket_size - 1}"
        buckets.setdefault(key, []).append(c)
    return {key: evaluate_run(group, k) for key, group in sorted(buckets.items())}


def render_report(report: MetricReport, label: str = "run") -> str:
    """Plain-text table with the standard metric columns (scores x100)."""
    cols = ["ANLS", "F1", "ROUGE", "Recall@k", "Token", "Latency"]
    vals = [
        f"{report.anls * 100:.1f}",
        f"{report.token_f1 * 100:.1f}",
        f"{report.rouge_l * 100:.1f}",
        f"{report.recall_at_k * 100:.1f}" if report.recall_at_k is not None else "-",
        f"{report.mean_tokens:.0f}",
        f"{report.mean_latency_ms:.0f}ms",
    ]
    if report.gpt_acc is not None:
        cols.append("GPT Acc")
        vals.append(f"{report.gpt_acc * 100:.1f}")
    w = [max(len(c), len(v)) for c, v in zip(cols, vals)]
    header = "  ".join(c.ljust(n) for c, n in zip(cols, w))
    row = "  ".join(v.ljust(n) for v, n in zip(vals, w))
    return f"[{label}] cases={report.case_count}\n{header}\n{row}"


def render_per_k_table(reports: dict[int, MetricReport]) -> str:
    """Table of metrics by k (sampling-budget ablation layout)."""
    lines = ["k     ANLS   F1     ROUGE  Recall@k  Token"]
    for k in sorted(reports):
        r = reports[k]
        rec = f"{r.recall_at_k * 100:.1f}" if r.recall_at_k is not None else "-"
        lines.append(
            f"{k:<5} {r.anls * 100:<6.1f} {r.token_f1 * 100:<6.1f} "
            f"{r.rouge_l * 100:<6.1f} {rec:<9} {r.mean_tokens:.0f}"
        )
    return "\n".join(lines)
