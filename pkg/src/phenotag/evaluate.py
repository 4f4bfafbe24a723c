"""Scoring model output against human ground truth.

Mention agreement is strict: a predicted mention counts as a true positive
only when a gold mention in the same record has identical start and end
offsets; any partial overlap scores as one false positive plus one false
negative. Concept agreement requires an exact concept-id match on a
mention-matched pair (NONE == NONE counts as correct, so unnormalizable
mentions are still scored).

The true-negative unit is one per record with zero gold and zero predicted
mentions, matching a sampled corpus where half the records expect no
disease mention at all.
"""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .corpus import AnnotationSet, ConceptId, NormalizedAnnotation, Source, TextSpan
from .errors import ValidationError
from .ontology import EmbeddingProvider, cosine
from .orchestrate import LlmVerdict, VerdictKind

from .report import (  # noqa: F401  (re-exported: reporting is part of this surface)
    AlignmentStats,
    CotRow,
    EmbeddingRow,
    FinetunedRow,
    FlagsRow,
    NerNenRow,
    RagFsiRow,
    ReportBundle,
    ZeroShotRow,
    render_report,
)

__all__ = [
    "ConfusionCounts",
    "MetricsReport",
    "RougeScore",
    "AlignmentReport",
    "ConceptAccuracy",
    "match_mentions",
    "match_concepts",
    "compute_metrics",
    "rouge_n",
    "coherence_score",
    "mean_coherence",
    "alignment_accuracy",
    "alignment_confusions",
    "alignment_stats",
    "hallucination_rate",
    "mean_rouge",
    "normalised_performance",
    "write_verdicts",
    "read_verdicts",
    "render_report",
    "ReportBundle",
    "AlignmentStats",
    "NerNenRow",
    "ZeroShotRow",
    "FinetunedRow",
    "RagFsiRow",
    "FlagsRow",
    "CotRow",
    "EmbeddingRow",
]


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self) -> None:
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn
        )

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


@dataclass(frozen=True)
class MetricsReport:
    """Each metric is absent (None) when its denominator is zero; reports
    render absent values as "NR"."""

    recall: float | None
    fpr: float | None
    tnr: float | None
    fnr: float | None
    precision: float | None
    f1: float | None
    accuracy: float | None


def compute_metrics(counts: ConfusionCounts) -> MetricsReport:
    """Confusion ratios: recall TP/(TP+FN), FPR FP/(TN+FP), TNR TN/(TN+FP),
    FNR FN/(TP+FN), precision TP/(TP+FP), F1 2PR/(P+R), accuracy
    (TP+TN)/total."""
    tp, tn, fp, fn = counts.tp, counts.tn, counts.fp, counts.fn
    positives = tp + fn
    negatives = tn + fp
    predicted = tp + fp
    recall = tp / positives if positives else None
    fpr = fp / negatives if negatives else None
    tnr = tn / negatives if negatives else None
    fnr = fn / positives if positives else None
    precision = tp / predicted if predicted else None
    f1 = None
    if precision is not None and recall is not None and precision + recall > 0:
        f1 = 2.0 * precision * recall / (precision + recall)
    accuracy = (tp + tn) / counts.total if counts.total else None
    return MetricsReport(
        recall=recall, fpr=fpr, tnr=tnr, fnr=fnr,
        precision=precision, f1=f1, accuracy=accuracy,
    )


# ---------------------------------------------------------------------------
# Mention and concept agreement
# ---------------------------------------------------------------------------

MatchedPair = tuple[NormalizedAnnotation, NormalizedAnnotation]


def match_mentions(
    predicted: AnnotationSet,
    gold: AnnotationSet,
    record_ids: Iterable[str] | None = None,
) -> tuple[list[MatchedPair], ConfusionCounts]:
    """One-to-one exact-span matching of predictions against gold.

    ``record_ids`` fixes the record universe (normally every record in the
    gold file, including mention-free ones); it defaults to the gold set's
    annotated records. A predicted record outside the universe is an error.
    """
    universe = list(record_ids) if record_ids is not None else list(gold.record_ids())
    known = set(universe)
    unknown = [rid for rid in predicted.record_ids() if rid not in known]
    if unknown:
        raise ValidationError(
            f"records present in predictions but absent from gold: {unknown}"
        )
    pairs: list[MatchedPair] = []
    tp = tn = fp = fn = 0
    for rid in universe:
        preds = predicted.for_record(rid)
        golds = list(gold.for_record(rid))
        if not preds and not golds:
            tn += 1
            continue
        for pred in preds:
            index = next((i for i, g in enumerate(golds) if g.span == pred.span), None)
            if index is None:
                fp += 1
            else:
                pairs.append((pred, golds.pop(index)))
                tp += 1
        fn += len(golds)
    return pairs, ConfusionCounts(tp=tp, tn=tn, fp=fp, fn=fn)


@dataclass(frozen=True)
class ConceptAccuracy:
    correct: int
    total: int

    def __post_init__(self) -> None:
        if self.correct > self.total:
            raise ValueError("correct cannot exceed total")

    @property
    def accuracy(self) -> float | None:
        return self.correct / self.total if self.total else None


def match_concepts(pairs: Sequence[MatchedPair]) -> ConceptAccuracy:
    """Exact concept-id agreement over mention-matched pairs."""
    correct = sum(1 for pred, gold in pairs if pred.concept == gold.concept)
    return ConceptAccuracy(correct=correct, total=len(pairs))


# ---------------------------------------------------------------------------
# ROUGE-n and coherence
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RougeScore:
    n: int
    precision: float
    recall: float
    f1: float


_WORD = re.compile(r"\w+")


def _word_tokens(text: str) -> list[str]:
    return [t.lower() for t in _WORD.findall(text)]


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(candidate: str, reference: str, n: int) -> RougeScore:
    """Clipped n-gram overlap: for each distinct n-gram the contribution is
    min(count in candidate, count in reference)."""
    if n <= 0:
        raise ValidationError(f"gram order must be positive, got {n}")
    candidate_grams = _ngram_counts(_word_tokens(candidate), n)
    reference_grams = _ngram_counts(_word_tokens(reference), n)
    candidate_total = sum(candidate_grams.values())
    reference_total = sum(reference_grams.values())
    if candidate_total == 0 or reference_total == 0:
        return RougeScore(n=n, precision=0.0, recall=0.0, f1=0.0)
    overlap = sum(min(count, reference_grams[gram]) for gram, count in candidate_grams.items())
    precision = overlap / candidate_total
    recall = overlap / reference_total
    f1 = 0.0 if precision + recall == 0 else 2.0 * precision * recall / (precision + recall)
    return RougeScore(n=n, precision=precision, recall=recall, f1=f1)


def mean_rouge(pairs: Sequence[tuple[str, str]], n: int) -> RougeScore | None:
    """Per-pair ROUGE-n averaged arithmetically over a dataset."""
    if not pairs:
        return None
    scores = [rouge_n(candidate, reference, n) for candidate, reference in pairs]
    count = len(scores)
    return RougeScore(
        n=n,
        precision=sum(s.precision for s in scores) / count,
        recall=sum(s.recall for s in scores) / count,
        f1=sum(s.f1 for s in scores) / count,
    )


def coherence_score(candidate: str, reference: str, provider: EmbeddingProvider) -> float:
    """Cosine similarity between the two texts' sentence embeddings."""
    return cosine(provider.embed(candidate), provider.embed(reference))


def mean_coherence(
    pairs: Sequence[tuple[str, str]], provider: EmbeddingProvider
) -> float | None:
    """Dataset-level coherence: arithmetic mean over candidate/reference pairs."""
    if not pairs:
        return None
    scores = [coherence_score(candidate, reference, provider) for candidate, reference in pairs]
    return sum(scores) / len(scores)


# ---------------------------------------------------------------------------
# Verdict alignment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AlignmentReport:
    bern2_alignment_accuracy: float
    gt_alignment_accuracy: float


def _gold_concept_at(
    gold: AnnotationSet, annotation: NormalizedAnnotation
) -> ConceptId | None:
    for entry in gold.for_record(annotation.record_id):
        if entry.span == annotation.span:
            return entry.concept
    return None


def _final_concept(verdict: LlmVerdict, annotation: NormalizedAnnotation) -> ConceptId:
    if verdict.kind is VerdictKind.DISAGREE and verdict.proposal is not None:
        return verdict.proposal
    return annotation.concept


def alignment_accuracy(
    verdicts: Sequence[LlmVerdict],
    backend_annotations: Sequence[NormalizedAnnotation],
    gold: AnnotationSet,
) -> AlignmentReport:
    """BERN2 alignment: the verdict is the right judgment of the backend
    (Agree when the backend concept equals gold, Disagree when it differs).
    GT alignment: the post-verdict concept equals gold. Unparseable verdicts
    count as incorrect in both; a backend mention with no exact-span gold
    counterpart has no gold concept and can never satisfy GT alignment."""
    if len(verdicts) != len(backend_annotations):
        raise ValidationError(
            f"{len(verdicts)} verdicts for {len(backend_annotations)} annotations"
        )
    if not verdicts:
        raise ValidationError("empty evaluation: no verdicts to align")
    bern2_correct = 0
    gt_correct = 0
    for verdict, annotation in zip(verdicts, backend_annotations):
        gold_concept = _gold_concept_at(gold, annotation)
        backend_matches = gold_concept is not None and annotation.concept == gold_concept
        if verdict.kind is VerdictKind.AGREE:
            bern2_correct += backend_matches
        elif verdict.kind is VerdictKind.DISAGREE:
            bern2_correct += not backend_matches
        if verdict.kind is not VerdictKind.UNPARSEABLE:
            if gold_concept is not None and _final_concept(verdict, annotation) == gold_concept:
                gt_correct += 1
    count = len(verdicts)
    return AlignmentReport(
        bern2_alignment_accuracy=bern2_correct / count,
        gt_alignment_accuracy=gt_correct / count,
    )


def alignment_confusions(
    verdicts: Sequence[LlmVerdict],
    backend_annotations: Sequence[NormalizedAnnotation],
    gold: AnnotationSet,
) -> tuple[ConfusionCounts, ConfusionCounts]:
    """Confusion matrices backing the Table-3/Table-6 style columns.

    BERN2 side: Agree is the positive prediction, "backend equals gold" the
    positive class. GT side: a non-NONE final concept is the positive
    prediction, a non-NONE gold concept the positive class, with exact-id
    agreement required for a true positive. Unparseable verdicts count
    against whichever class they failed.
    """
    b_tp = b_fp = b_tn = b_fn = 0
    g_tp = g_fp = g_tn = g_fn = 0
    for verdict, annotation in zip(verdicts, backend_annotations):
        gold_concept = _gold_concept_at(gold, annotation)
        backend_matches = gold_concept is not None and annotation.concept == gold_concept
        if verdict.kind is VerdictKind.AGREE:
            if backend_matches:
                b_tp += 1
            else:
                b_fp += 1
        elif verdict.kind is VerdictKind.DISAGREE:
            if backend_matches:
                b_fn += 1
            else:
                b_tn += 1
        else:
            if backend_matches:
                b_fn += 1
            else:
                b_fp += 1
        final = _final_concept(verdict, annotation)
        asserts_concept = verdict.kind is not VerdictKind.UNPARSEABLE and not final.is_none
        gold_positive = gold_concept is not None and not gold_concept.is_none
        correct = (
            verdict.kind is not VerdictKind.UNPARSEABLE
            and gold_concept is not None
            and final == gold_concept
        )
        if asserts_concept and gold_positive and correct:
            g_tp += 1
        elif asserts_concept:
            g_fp += 1
        elif gold_positive:
            g_fn += 1
        else:
            g_tn += 1
    return (
        ConfusionCounts(b_tp, b_tn, b_fp, b_fn),
        ConfusionCounts(g_tp, g_tn, g_fp, g_fn),
    )


def alignment_stats(
    verdicts: Sequence[LlmVerdict],
    backend_annotations: Sequence[NormalizedAnnotation],
    gold: AnnotationSet,
) -> tuple["AlignmentStats", "AlignmentStats"]:
    """F1/P/R from alignment_confusions plus accuracies straight from
    alignment_accuracy, so the A column always matches the headline rate."""
    report = alignment_accuracy(verdicts, backend_annotations, gold)
    bern2_counts, gt_counts = alignment_confusions(verdicts, backend_annotations, gold)
    bern2_metrics = compute_metrics(bern2_counts)
    gt_metrics = compute_metrics(gt_counts)
    return (
        AlignmentStats(
            f1=bern2_metrics.f1,
            precision=bern2_metrics.precision,
            recall=bern2_metrics.recall,
            accuracy=report.bern2_alignment_accuracy,
        ),
        AlignmentStats(
            f1=gt_metrics.f1,
            precision=gt_metrics.precision,
            recall=gt_metrics.recall,
            accuracy=report.gt_alignment_accuracy,
        ),
    )


def hallucination_rate(verdicts: Sequence[LlmVerdict]) -> float | None:
    """Flagged fraction; absent (None, rendered "NR") for empty input."""
    if not verdicts:
        return None
    return sum(1 for v in verdicts if v.hallucinated) / len(verdicts)


def normalised_performance(
    labeled_values: Sequence[tuple[str, float]]
) -> list[tuple[str, float]]:
    """Divide every value by the maximum across the whole comparison group,
    so the best variant maps to exactly 1.0."""
    items = list(labeled_values)
    if not items:
        raise ValidationError("nothing to normalise")
    maximum = max(value for _, value in items)
    if maximum <= 0:
        raise ValidationError("cannot normalise: no value is positive")
    return [(label, value / maximum) for label, value in items]


# ---------------------------------------------------------------------------
# Verdict file interface (re-scoring externally produced runs)
# ---------------------------------------------------------------------------

def write_verdicts(
    results: Sequence[tuple[NormalizedAnnotation, LlmVerdict]]
) -> list[str]:
    """Serialize (annotation, verdict) pairs to the line format
    {"record_id", "span", "backend_concept", "kind", "proposal",
    "hallucinated"}."""
    lines = []
    for annotation, verdict in results:
        obj = {
            "record_id": annotation.record_id,
            "span": [annotation.span.begin, annotation.span.end],
            "backend_concept": annotation.concept.render(),
            "kind": verdict.kind.value,
            "proposal": verdict.proposal.render() if verdict.proposal else None,
            "hallucinated": verdict.hallucinated,
        }
        lines.append(json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":")))
    return lines


def read_verdicts(
    lines: Iterable[str], texts: Mapping[str, str] | None = None
) -> tuple[list[LlmVerdict], list[NormalizedAnnotation]]:
    """Parse verdict lines back into aligned (verdicts, backend annotations).

    Surfaces are recovered from ``texts`` when available; raw model text is
    not persisted in this format.
    """
    verdicts: list[LlmVerdict] = []
    annotations: list[NormalizedAnnotation] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            span = TextSpan(int(obj["span"][0]), int(obj["span"][1]))
            concept = ConceptId.parse(obj["backend_concept"])
            kind = VerdictKind(obj["kind"])
            proposal = ConceptId.parse(obj["proposal"]) if obj.get("proposal") else None
            verdict = LlmVerdict(
                kind=kind,
                raw_text="",
                proposal=proposal,
                hallucinated=bool(obj.get("hallucinated", False)),
            )
            record_id = obj["record_id"]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError) as exc:
            raise ValidationError(f"line {lineno}: bad verdict record: {exc}") from exc
        surface = ""
        if texts and record_id in texts and span.end <= len(texts[record_id]):
            surface = texts[record_id][span.begin : span.end]
        annotations.append(
            NormalizedAnnotation(
                record_id=record_id,
                span=span,
                surface=surface,
                concept=concept,
                source=Source.NER_BACKEND,
            )
        )
        verdicts.append(verdict)
    return verdicts, annotations
