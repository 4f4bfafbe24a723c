"""Driving an external NER/NEN backend over a wire protocol.

The wire shape mirrors the public BERN2 response (mention/span/obj/id) so
the real service drops in unmodified:

    request:  {"texts": [string, ...]}
    response: {"results": [{"annotations": [{"mention": str,
               "span": {"begin": int, "end": int}, "obj": str,
               "id": [str, ...]}, ...]}, ...]}   (aligned by index)

Only entries with obj == "disease" are kept. Records are grouped in
submission order into chunks of batch_size and dispatched with a bounded
in-flight window; outcomes are re-sequenced to input order, and a failed
record never aborts the batch.
"""

from __future__ import annotations

import json
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Mapping, Protocol, Sequence

from .corpus import ConceptId, NONE_CONCEPT, NormalizedAnnotation, Source, SurveyRecord, TextSpan
from .errors import BackendError, ValidationError

__all__ = [
    "BackendConfig",
    "AnnotationOutcome",
    "NerBackend",
    "HttpNerBackend",
    "MockNerBackend",
    "mock_backend",
    "submitted_text",
    "parse_backend_response",
    "annotate_batch",
    "write_outcomes",
    "read_outcomes",
]


@dataclass(frozen=True)
class BackendConfig:
    endpoint: str = ""
    batch_size: int = 16
    max_inflight: int = 4
    retry_budget: int = 2
    timeout_ms: int = 30_000

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_inflight < 1:
            raise ValueError("max_inflight must be >= 1")
        if self.retry_budget < 0:
            raise ValueError("retry_budget must be >= 0")


@dataclass(frozen=True)
class AnnotationOutcome:
    """Exactly one per submitted record: either annotations or a reason.

    ``question_join`` records where the answer starts inside the submitted
    question-space-answer concatenation (0 when the question was empty).
    """

    record_id: str
    text: str
    status: str  # "ok" | "failed"
    annotations: tuple[NormalizedAnnotation, ...] = ()
    error: str | None = None
    question_join: int = 0

    def __post_init__(self) -> None:
        if self.status not in ("ok", "failed"):
            raise ValueError(f"bad status {self.status!r}")
        if self.status == "failed" and not self.error:
            raise ValueError("failed outcomes must carry a reason")


class NerBackend(Protocol):
    """Anything that answers the NER wire protocol for a batch of texts."""

    def submit(self, texts: Sequence[str]) -> dict: ...


class HttpNerBackend:
    """POSTs {"texts": [...]} to a BERN2-compatible endpoint."""

    def __init__(
        self,
        endpoint: str,
        timeout_ms: int = 30_000,
        transport: Callable[[str, dict, float], dict] | None = None,
    ):
        self.endpoint = endpoint
        self.timeout_ms = timeout_ms
        self._transport = transport or _post_json

    def submit(self, texts: Sequence[str]) -> dict:
        try:
            return self._transport(self.endpoint, {"texts": list(texts)}, self.timeout_ms / 1000.0)
        except Exception as exc:
            raise BackendError(f"NER backend at {self.endpoint} failed: {exc}") from exc


def _post_json(url: str, payload: dict, timeout_s: float) -> dict:
    import os

    import requests

    # Secrets travel in the environment only, never in config files.
    token = os.environ.get("PHENOTAG_NER_TOKEN")
    headers = {"Authorization": f"Bearer {token}"} if token else {}
    response = requests.post(url, json=payload, timeout=timeout_s, headers=headers)
    response.raise_for_status()
    return response.json()


_TOKEN = re.compile(r"\w+")


class MockNerBackend:
    """Deterministic lexicon-driven backend speaking the same wire contract.

    Annotates by case-insensitive longest-match whole-token scan; multiword
    lexicon terms match across single spaces.
    """

    def __init__(self, lexicon: Mapping[str, ConceptId]):
        if not lexicon:
            raise ValueError("mock lexicon must be non-empty")
        self._terms: list[tuple[tuple[str, ...], ConceptId]] = []
        for term, concept in lexicon.items():
            if not term or term != term.lower():
                raise ValueError(f"lexicon terms must be non-empty lowercase, got {term!r}")
            self._terms.append((tuple(term.split()), concept))
        # Longest token sequence first so "asthma episodes" beats "asthma".
        self._terms.sort(key=lambda item: (-len(item[0]), item[0]))

    def submit(self, texts: Sequence[str]) -> dict:
        return {"results": [{"annotations": self._scan(text)} for text in texts]}

    def _scan(self, text: str) -> list[dict]:
        tokens = [(m.group(0).lower(), m.start(), m.end()) for m in _TOKEN.finditer(text)]
        annotations: list[dict] = []
        i = 0
        while i < len(tokens):
            match = self._match_at(tokens, i)
            if match is None:
                i += 1
                continue
            length, concept = match
            begin = tokens[i][1]
            end = tokens[i + length - 1][2]
            annotations.append(
                {
                    "mention": text[begin:end],
                    "span": {"begin": begin, "end": end},
                    "obj": "disease",
                    "id": [concept.render()],
                }
            )
            i += length
        return annotations

    def _match_at(self, tokens, i):
        for term_tokens, concept in self._terms:
            if i + len(term_tokens) > len(tokens):
                continue
            if all(tokens[i + j][0] == term_tokens[j] for j in range(len(term_tokens))):
                return len(term_tokens), concept
        return None


def mock_backend(lexicon: Mapping[str, ConceptId]) -> MockNerBackend:
    return MockNerBackend(lexicon)


def submitted_text(record: SurveyRecord) -> tuple[str, int]:
    """Text sent to the backend for a record, plus the question/answer join
    offset (0 when the question is empty and the answer goes out alone)."""
    if not record.question_text:
        return record.answer_text, 0
    return f"{record.question_text} {record.answer_text}", len(record.question_text) + 1


def parse_backend_response(
    payload: Mapping, text: str, record_id: str = ""
) -> list[NormalizedAnnotation]:
    """Parse one text's result entry into disease annotations.

    Keeps only obj == "disease". An id list that is empty or all sentinel
    ("CUI-less") maps to the NONE concept; otherwise the first id that
    parses as a MeSH concept wins.
    """
    entries = payload.get("annotations")
    if not isinstance(entries, list):
        raise ValidationError("backend result missing 'annotations' list")
    annotations: list[NormalizedAnnotation] = []
    for entry in entries:
        if entry.get("obj") != "disease":
            continue
        span_obj = entry.get("span", {})
        try:
            span = TextSpan(int(span_obj["begin"]), int(span_obj["end"]))
            span.check_bounds(text)
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"backend span invalid for record {record_id!r}: {exc}") from exc
        mention = entry.get("mention", "")
        if text[span.begin : span.end] != mention:
            raise ValidationError(
                f"backend mention {mention!r} does not match text at "
                f"({span.begin}, {span.end}) for record {record_id!r}"
            )
        concept = NONE_CONCEPT
        for candidate in entry.get("id", []):
            if not isinstance(candidate, str) or candidate.strip().upper() == "CUI-LESS":
                continue
            try:
                concept = ConceptId.parse(candidate)
                break
            except ValueError:
                continue
        annotations.append(
            NormalizedAnnotation(
                record_id=record_id,
                span=span,
                surface=mention,
                concept=concept,
                source=Source.NER_BACKEND,
            )
        )
    return annotations


def annotate_batch(
    records: Sequence[SurveyRecord],
    backend: NerBackend,
    config: BackendConfig,
) -> list[AnnotationOutcome]:
    """Annotate every record, returning one outcome per record in input order.

    Records are chunked in submission order. Each chunk is retried up to
    retry_budget times on transport failure; a chunk that still fails marks
    every record in it failed without touching the rest. Malformed results
    fail only the record they belong to.
    """
    chunks: list[list[SurveyRecord]] = [
        list(records[i : i + config.batch_size])
        for i in range(0, len(records), config.batch_size)
    ]
    if not chunks:
        return []
    results: list[list[AnnotationOutcome]] = [[] for _ in chunks]
    with ThreadPoolExecutor(max_workers=config.max_inflight) as pool:
        futures = {
            pool.submit(_process_chunk, chunk, backend, config): index
            for index, chunk in enumerate(chunks)
        }
        for future, index in futures.items():
            results[index] = future.result()
    return [outcome for chunk_outcomes in results for outcome in chunk_outcomes]


def _process_chunk(
    chunk: list[SurveyRecord], backend: NerBackend, config: BackendConfig
) -> list[AnnotationOutcome]:
    submissions = [submitted_text(record) for record in chunk]
    texts = [text for text, _ in submissions]
    joins = [join for _, join in submissions]
    attempts = 1 + config.retry_budget
    payload = None
    last_error: Exception | None = None
    for _ in range(attempts):
        try:
            payload = backend.submit(texts)
            break
        except Exception as exc:
            last_error = exc
    if payload is None:
        reason = f"backend unreachable after {attempts} attempts: {last_error}"
        return [
            AnnotationOutcome(record.record_id, text, "failed", error=reason, question_join=join)
            for record, text, join in zip(chunk, texts, joins)
        ]
    results = payload.get("results") if isinstance(payload, Mapping) else None
    if not isinstance(results, list) or len(results) != len(chunk):
        reason = "malformed backend response: results misaligned with submitted texts"
        return [
            AnnotationOutcome(record.record_id, text, "failed", error=reason, question_join=join)
            for record, text, join in zip(chunk, texts, joins)
        ]
    outcomes = []
    for record, text, join, result in zip(chunk, texts, joins, results):
        try:
            annotations = parse_backend_response(result, text, record.record_id)
            outcomes.append(
                AnnotationOutcome(
                    record.record_id, text, "ok",
                    annotations=tuple(annotations), question_join=join,
                )
            )
        except ValidationError as exc:
            outcomes.append(
                AnnotationOutcome(record.record_id, text, "failed", error=str(exc), question_join=join)
            )
    return outcomes


def write_outcomes(outcomes: Sequence[AnnotationOutcome]) -> list[str]:
    """Serialize outcomes to the line-delimited predictions format."""
    lines = []
    for outcome in outcomes:
        obj = {
            "record_id": outcome.record_id,
            "text": outcome.text,
            "status": outcome.status,
            "question_join": outcome.question_join,
            "annotations": [
                {
                    "begin": ann.span.begin,
                    "end": ann.span.end,
                    "surface": ann.surface,
                    "concept": ann.concept.render(),
                    "confidence": ann.confidence,
                }
                for ann in outcome.annotations
            ],
            "error": outcome.error,
        }
        lines.append(json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":")))
    return lines


def read_outcomes(lines) -> list[AnnotationOutcome]:
    """Parse a predictions file back into outcomes."""
    outcomes = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            annotations = tuple(
                NormalizedAnnotation(
                    record_id=obj["record_id"],
                    span=TextSpan(int(a["begin"]), int(a["end"])),
                    surface=a["surface"],
                    concept=ConceptId.parse(a["concept"]),
                    source=Source.NER_BACKEND,
                    confidence=a.get("confidence"),
                )
                for a in obj.get("annotations", [])
            )
            outcomes.append(
                AnnotationOutcome(
                    record_id=obj["record_id"],
                    text=obj["text"],
                    status=obj["status"],
                    annotations=annotations,
                    error=obj.get("error"),
                    question_join=int(obj.get("question_join", 0)),
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"line {lineno}: bad prediction record: {exc}") from exc
    return outcomes


class InflightProbe:
    """Wraps a backend and records the high-water mark of concurrent calls.

    Test instrumentation for the bounded-window invariant.
    """

    def __init__(self, inner: NerBackend, delay_s: float = 0.0):
        self._inner = inner
        self._delay_s = delay_s
        self._lock = threading.Lock()
        self._active = 0
        self.high_water = 0
        self.calls = 0

    def submit(self, texts: Sequence[str]) -> dict:
        import time

        with self._lock:
            self._active += 1
            self.calls += 1
            self.high_water = max(self.high_water, self._active)
        try:
            if self._delay_s:
                time.sleep(self._delay_s)
            return self._inner.submit(texts)
        finally:
            with self._lock:
                self._active -= 1
