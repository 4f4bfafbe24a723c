"""Survey corpus handling.

Ingests line-delimited survey records, normalizes free text while keeping a
reversible character-offset map back to the raw input, draws stratified
annotation samples, and round-trips ground truth through the Doccano JSONL
format.

All character offsets count Unicode scalar values (Python string indices),
never bytes.
"""

from __future__ import annotations

import difflib
import json
import random
import re
import unicodedata
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from .errors import ValidationError

__all__ = [
    "FieldType",
    "Source",
    "SurveyRecord",
    "TextSpan",
    "ConceptId",
    "NONE_CONCEPT",
    "NormalizedAnnotation",
    "AnnotationSet",
    "PreprocessConfig",
    "NormalizedText",
    "Corpus",
    "ingest_records",
    "load_records",
    "normalize_text",
    "stratified_sample",
    "import_doccano",
    "export_doccano",
    "load_acronym_map",
    "load_lexicon",
]


class FieldType(Enum):
    """Closed set of survey question formats."""

    SLIDER = "slider"
    DESCRIPTIVE = "descriptive"
    BINARY = "binary"
    RATIO = "ratio"
    DROPDOWN = "dropdown"
    CHECKBOX = "checkbox"


class Source(Enum):
    """Provenance of an annotation."""

    NER_BACKEND = "ner_backend"
    LLM = "llm"
    HUMAN = "human"


@dataclass(frozen=True)
class SurveyRecord:
    """One question/answer unit from a survey export."""

    record_id: str
    question_text: str
    answer_text: str
    field_type: FieldType
    preceding_questions: tuple[str, ...] = ()
    expects_disease: bool = False

    def __post_init__(self) -> None:
        if not self.record_id:
            raise ValueError("record_id must be non-empty")


@dataclass(frozen=True, order=True)
class TextSpan:
    """Half-open character span [begin, end) into some text."""

    begin: int
    end: int

    def __post_init__(self) -> None:
        if not (0 <= self.begin < self.end):
            raise ValueError(f"invalid span ({self.begin}, {self.end}): need 0 <= begin < end")

    def check_bounds(self, text: str) -> None:
        if self.end > len(text):
            raise ValueError(f"span ({self.begin}, {self.end}) exceeds text of length {len(text)}")


_MESH_IDENTIFIER = re.compile(r"D\d+")
_MESH_RENDERING = re.compile(r"mesh:(d\d+)", re.IGNORECASE)


@dataclass(frozen=True)
class ConceptId:
    """A MeSH descriptor id, or the NONE sentinel for unnormalized mentions.

    Canonical rendering is ``mesh:D<digits>`` (or the literal ``NONE``).
    """

    identifier: str | None = None

    def __post_init__(self) -> None:
        if self.identifier is not None and not _MESH_IDENTIFIER.fullmatch(self.identifier):
            raise ValueError(f"malformed MeSH identifier {self.identifier!r}")

    @property
    def is_none(self) -> bool:
        return self.identifier is None

    @classmethod
    def parse(cls, text: str) -> "ConceptId":
        """Parse a canonical rendering; case-insensitive on the prefix and the D."""
        stripped = text.strip()
        if stripped.upper() == "NONE":
            return NONE_CONCEPT
        match = _MESH_RENDERING.fullmatch(stripped)
        if match is None:
            raise ValueError(f"cannot parse concept id {text!r}")
        return cls("D" + match.group(1)[1:])

    def render(self) -> str:
        return "NONE" if self.identifier is None else f"mesh:{self.identifier}"

    def __str__(self) -> str:
        return self.render()


NONE_CONCEPT = ConceptId(None)


@dataclass(frozen=True)
class NormalizedAnnotation:
    """A disease mention (span + surface) with its ontology assignment."""

    record_id: str
    span: TextSpan
    surface: str
    concept: ConceptId
    source: Source
    confidence: float | None = None

    def __post_init__(self) -> None:
        if self.confidence is not None and not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def check_against(self, text: str) -> None:
        """Verify the span fits ``text`` and the surface matches the slice."""
        self.span.check_bounds(text)
        actual = text[self.span.begin : self.span.end]
        if actual != self.surface:
            raise ValueError(
                f"surface {self.surface!r} does not match text slice {actual!r} "
                f"at ({self.span.begin}, {self.span.end})"
            )


class AnnotationSet:
    """Annotations grouped by record, each group sorted by (begin, end).

    Human-sourced groups may not contain two annotations with identical
    spans; model-sourced groups may overlap freely.
    """

    def __init__(self, annotations: Iterable[NormalizedAnnotation] = ()):
        grouped: dict[str, list[NormalizedAnnotation]] = defaultdict(list)
        for ann in annotations:
            grouped[ann.record_id].append(ann)
        self._by_record: dict[str, tuple[NormalizedAnnotation, ...]] = {}
        for record_id, group in grouped.items():
            group.sort(key=lambda a: (a.span.begin, a.span.end))
            seen_human_spans: set[TextSpan] = set()
            for ann in group:
                if ann.source is Source.HUMAN:
                    if ann.span in seen_human_spans:
                        raise ValidationError(
                            f"record {record_id!r}: duplicate human annotation "
                            f"at span ({ann.span.begin}, {ann.span.end})"
                        )
                    seen_human_spans.add(ann.span)
            self._by_record[record_id] = tuple(group)

    def for_record(self, record_id: str) -> tuple[NormalizedAnnotation, ...]:
        return self._by_record.get(record_id, ())

    def record_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self._by_record))

    def __iter__(self) -> Iterator[NormalizedAnnotation]:
        for record_id in sorted(self._by_record):
            yield from self._by_record[record_id]

    def __len__(self) -> int:
        return sum(len(group) for group in self._by_record.values())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AnnotationSet):
            return NotImplemented
        return self._by_record == other._by_record

    def __repr__(self) -> str:
        return f"AnnotationSet({len(self)} annotations over {len(self._by_record)} records)"


class Corpus:
    """Immutable collection of survey records with unique ids."""

    def __init__(self, records: Iterable[SurveyRecord]):
        self.records: tuple[SurveyRecord, ...] = tuple(records)
        self._by_id: dict[str, SurveyRecord] = {}
        for record in self.records:
            if record.record_id in self._by_id:
                raise ValidationError(f"duplicate record_id {record.record_id!r}")
            self._by_id[record.record_id] = record

    def get(self, record_id: str) -> SurveyRecord:
        try:
            return self._by_id[record_id]
        except KeyError:
            raise KeyError(f"unknown record_id {record_id!r}") from None

    def __contains__(self, record_id: str) -> bool:
        return record_id in self._by_id

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[SurveyRecord]:
        return iter(self.records)


# ---------------------------------------------------------------------------
# Record ingestion
# ---------------------------------------------------------------------------

def ingest_records(
    lines: Iterable[str],
    expects_keywords: Sequence[str] = (),
) -> Corpus:
    """Parse line-delimited survey records into a validated corpus.

    Each line is a JSON object with keys record_id, question_text,
    answer_text, field_type, preceding_questions (optional list) and
    expects_disease (optional bool). When expects_disease is absent and
    ``expects_keywords`` is given, the flag is derived by a case-insensitive
    keyword scan of the question text.
    """
    records: list[SurveyRecord] = []
    seen: set[str] = set()
    keywords = tuple(k.lower() for k in expects_keywords)
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"line {lineno}: malformed record: {exc.msg}") from exc
        if not isinstance(obj, dict):
            raise ValidationError(f"line {lineno}: record must be an object")
        try:
            record_id = obj["record_id"]
            question_text = obj["question_text"]
            answer_text = obj["answer_text"]
            raw_field_type = obj["field_type"]
        except KeyError as exc:
            raise ValidationError(f"line {lineno}: missing key {exc.args[0]!r}") from exc
        if not isinstance(record_id, str) or not record_id:
            raise ValidationError(f"line {lineno}: record_id must be a non-empty string")
        if record_id in seen:
            raise ValidationError(f"duplicate record_id {record_id!r}")
        try:
            field_type = FieldType(raw_field_type)
        except ValueError:
            raise ValidationError(
                f"line {lineno}: unknown field_type {raw_field_type!r}"
            ) from None
        preceding = obj.get("preceding_questions", [])
        if not isinstance(preceding, list) or not all(isinstance(q, str) for q in preceding):
            raise ValidationError(f"line {lineno}: preceding_questions must be a list of strings")
        if "expects_disease" in obj:
            expects = obj["expects_disease"]
            if not isinstance(expects, bool):
                raise ValidationError(f"line {lineno}: expects_disease must be a boolean")
        else:
            expects = any(k in question_text.lower() for k in keywords)
        seen.add(record_id)
        records.append(
            SurveyRecord(
                record_id=record_id,
                question_text=str(question_text),
                answer_text=str(answer_text),
                field_type=field_type,
                preceding_questions=tuple(preceding),
                expects_disease=expects,
            )
        )
    return Corpus(records)


def load_records(path: str | Path, expects_keywords: Sequence[str] = ()) -> Corpus:
    with open(path, encoding="utf-8") as handle:
        return ingest_records(handle, expects_keywords)


# ---------------------------------------------------------------------------
# Text normalization with offset maps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PreprocessConfig:
    """Which normalization steps run, plus their resources.

    Steps always apply in the fixed order: NFC, lowercase, acronym
    expansion, punctuation normalization, spelling correction, whitespace
    collapse. Spelling correction is off by default. Stemming never runs
    here; it would destroy the character offsets agreement scoring needs,
    so it lives in retrieval tokenization only.
    """

    nfc: bool = True
    lowercase: bool = True
    expand_acronyms: bool = True
    normalize_punctuation: bool = True
    correct_spelling: bool = False
    collapse_whitespace: bool = True
    acronyms: Mapping[str, str] = field(default_factory=dict)
    lexicon: tuple[str, ...] = ()

    @classmethod
    def only(cls, *steps: str, **resources) -> "PreprocessConfig":
        """Config with exactly the named steps enabled."""
        flags = {
            name: (name in steps)
            for name in (
                "nfc",
                "lowercase",
                "expand_acronyms",
                "normalize_punctuation",
                "correct_spelling",
                "collapse_whitespace",
            )
        }
        unknown = set(steps) - set(flags)
        if unknown:
            raise ValueError(f"unknown preprocessing steps: {sorted(unknown)}")
        return cls(**flags, **resources)


@dataclass(frozen=True)
class NormalizedText:
    """Normalized text plus a total monotonic map back to raw offsets.

    ``offset_map`` has ``len(text) + 1`` entries: entry ``i`` is the raw
    offset where the content at normalized offset ``i`` begins, with a
    final end-boundary sentinel. ``end_map`` gives, per character, the raw
    offset just past its source, so ``map_span`` yields tight raw spans
    even around deletions.
    """

    text: str
    offset_map: tuple[int, ...]
    end_map: tuple[int, ...]

    def to_raw(self, offset: int) -> int:
        return self.offset_map[offset]

    def map_span(self, span: TextSpan) -> TextSpan:
        """Translate a span over the normalized text into raw coordinates."""
        span.check_bounds(self.text)
        return TextSpan(self.offset_map[span.begin], self.end_map[span.end - 1])


Edit = tuple[int, int, str]


def _apply_edits(
    text: str, begins: list[int], ends: list[int], edits: list[Edit]
) -> tuple[str, list[int], list[int]]:
    """Splice non-overlapping (start, end, replacement) edits, carrying the
    per-character raw source ranges through the rewrite."""
    pieces: list[str] = []
    out_begins: list[int] = []
    out_ends: list[int] = []
    pos = 0
    for start, end, replacement in edits:
        pieces.append(text[pos:start])
        out_begins.extend(begins[pos:start])
        out_ends.extend(ends[pos:start])
        if replacement:
            if end > start:
                src_begin, src_end = begins[start], ends[end - 1]
            elif start < len(text):  # pure insertion anchors at a point
                src_begin = src_end = begins[start]
            else:
                src_begin = src_end = ends[-1] if ends else 0
            pieces.append(replacement)
            out_begins.extend([src_begin] * len(replacement))
            out_ends.extend([src_end] * len(replacement))
        pos = end
    pieces.append(text[pos:])
    out_begins.extend(begins[pos:])
    out_ends.extend(ends[pos:])
    return "".join(pieces), out_begins, out_ends


def _nfc_edits(text: str) -> list[Edit]:
    composed = unicodedata.normalize("NFC", text)
    if composed == text:
        return []
    matcher = difflib.SequenceMatcher(a=text, b=composed, autojunk=False)
    return [
        (i1, i2, composed[j1:j2])
        for tag, i1, i2, j1, j2 in matcher.get_opcodes()
        if tag != "equal"
    ]


def _lowercase_edits(text: str) -> list[Edit]:
    return [(i, i + 1, c.lower()) for i, c in enumerate(text) if c.lower() != c]


def _acronym_edits(text: str, acronyms: Mapping[str, str]) -> list[Edit]:
    if not acronyms:
        return []
    # Longest key first so "b.i.d" style keys beat their prefixes.
    keys = sorted(acronyms, key=lambda k: (-len(k), k))
    pattern = re.compile(
        r"\b(?:" + "|".join(re.escape(k) for k in keys) + r")\b", re.IGNORECASE
    )
    return [
        (m.start(), m.end(), acronyms[m.group(0).lower()]) for m in pattern.finditer(text)
    ]


_PUNCT_REPLACEMENTS = {
    "‘": "'",
    "’": "'",
    "‚": "'",
    "‛": "'",
    "“": '"',
    "”": '"',
    "„": '"',
    "–": "-",
    "—": "-",
    "−": "-",
    "…": "...",
    "​": "",
    "‌": "",
    "‍": "",
    "﻿": "",
}


def _punctuation_edits(text: str) -> list[Edit]:
    return [
        (i, i + 1, _PUNCT_REPLACEMENTS[c])
        for i, c in enumerate(text)
        if c in _PUNCT_REPLACEMENTS
    ]


def _within_distance_one(a: str, b: str) -> bool:
    if a == b:
        return True
    la, lb = len(a), len(b)
    if abs(la - lb) > 1:
        return False
    if la == lb:
        return sum(x != y for x, y in zip(a, b)) <= 1
    short, long = (a, b) if la < lb else (b, a)
    i = 0
    while i < len(short) and short[i] == long[i]:
        i += 1
    return short[i:] == long[i + 1 :]


def _spelling_edits(text: str, lexicon: Sequence[str]) -> list[Edit]:
    if not lexicon:
        return []
    known = set(lexicon)
    edits: list[Edit] = []
    for m in re.finditer(r"\w+", text):
        token = m.group(0)
        if not token.isalpha() or token.lower() in known:
            continue
        # Ties broken by lexicon order: first entry within distance 1 wins.
        for word in lexicon:
            if _within_distance_one(token.lower(), word):
                edits.append((m.start(), m.end(), word))
                break
    return edits


def _whitespace_edits(text: str) -> list[Edit]:
    edits: list[Edit] = []
    for m in re.finditer(r"\s+", text):
        start, end = m.span()
        at_edge = start == 0 or end == len(text)
        if at_edge or m.group(0) != " ":
            edits.append((start, end, "" if at_edge else " "))
    return edits


def normalize_text(raw: str, config: PreprocessConfig | None = None) -> NormalizedText:
    """Normalize ``raw`` per config, returning text plus its raw-offset map.

    Every Unicode string is processable; no step can fail.
    """
    config = config or PreprocessConfig()
    text = raw
    begins = list(range(len(raw)))
    ends = list(range(1, len(raw) + 1))
    steps = (
        (config.nfc, _nfc_edits),
        (config.lowercase, _lowercase_edits),
        (config.expand_acronyms, lambda t: _acronym_edits(t, config.acronyms)),
        (config.normalize_punctuation, _punctuation_edits),
        (config.correct_spelling, lambda t: _spelling_edits(t, config.lexicon)),
        (config.collapse_whitespace, _whitespace_edits),
    )
    for enabled, make_edits in steps:
        if enabled:
            text, begins, ends = _apply_edits(text, begins, ends, make_edits(text))
    sentinel = ends[-1] if ends else 0
    return NormalizedText(
        text=text, offset_map=tuple(begins) + (sentinel,), end_map=tuple(ends)
    )


def load_acronym_map(path: str | Path) -> dict[str, str]:
    """Read "acronym = expansion" lines; keys are folded to lowercase."""
    acronyms: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValidationError(f"line {lineno}: expected 'acronym = expansion'")
        key, _, value = stripped.partition("=")
        acronyms[key.strip().lower()] = value.strip()
    return acronyms


def load_lexicon(path: str | Path) -> tuple[str, ...]:
    """Read a one-word-per-line spelling lexicon, preserving file order."""
    words = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        word = line.strip().lower()
        if word and not word.startswith("#"):
            words.append(word)
    return tuple(words)


# ---------------------------------------------------------------------------
# Stratified sampling
# ---------------------------------------------------------------------------

def stratified_sample(corpus: Corpus, n: int, seed: int) -> list[SurveyRecord]:
    """Draw ``n`` records split as evenly as possible across expects_disease.

    The expects_disease=true stratum receives the ceiling half. Within each
    stratum all available field types are covered before any type repeats.
    Pure function of (corpus, n, seed).
    """
    if n < 0:
        raise ValidationError("sample size must be non-negative")
    if n > len(corpus):
        raise ValidationError(f"sample size {n} exceeds corpus size {len(corpus)}")
    expected = [r for r in corpus if r.expects_disease]
    unexpected = [r for r in corpus if not r.expects_disease]
    quota_expected = (n + 1) // 2
    quota_unexpected = n // 2
    rng = random.Random(seed)
    picked: list[SurveyRecord] = []
    for stratum, quota, label in (
        (expected, quota_expected, "expects_disease=true"),
        (unexpected, quota_unexpected, "expects_disease=false"),
    ):
        if len(stratum) < quota:
            raise ValidationError(
                f"stratum {label} has {len(stratum)} records, {quota} required"
            )
        picked.extend(_draw_stratum(stratum, quota, rng))
    return picked


def _draw_stratum(records: list[SurveyRecord], quota: int, rng: random.Random) -> list[SurveyRecord]:
    groups: dict[str, list[SurveyRecord]] = defaultdict(list)
    for record in sorted(records, key=lambda r: r.record_id):
        groups[record.field_type.value].append(record)
    for group in groups.values():
        rng.shuffle(group)
    type_order = sorted(groups)
    rng.shuffle(type_order)
    picked: list[SurveyRecord] = []
    while len(picked) < quota:
        for field_type in type_order:
            group = groups[field_type]
            if group and len(picked) < quota:
                picked.append(group.pop())
    return picked


# ---------------------------------------------------------------------------
# Doccano import/export
# ---------------------------------------------------------------------------

def import_doccano(lines: Iterable[str]) -> tuple[AnnotationSet, dict[str, str]]:
    """Parse Doccano JSONL into human-sourced annotations plus record texts.

    Lines look like {"text": ..., "label": [[begin, end, "mesh:D..."], ...]}
    with an optional "record_id"; ids are synthesized from the line number
    when absent so files straight out of Doccano still load.
    """
    annotations: list[NormalizedAnnotation] = []
    texts: dict[str, str] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"line {lineno}: malformed Doccano line: {exc.msg}") from exc
        if not isinstance(obj, dict) or "text" not in obj:
            raise ValidationError(f"line {lineno}: expected an object with a 'text' key")
        text = obj["text"]
        if not isinstance(text, str):
            raise ValidationError(f"line {lineno}: 'text' must be a string")
        record_id = obj.get("record_id", f"line-{lineno:06d}")
        if record_id in texts:
            raise ValidationError(f"line {lineno}: duplicate record_id {record_id!r}")
        texts[record_id] = text
        for entry in obj.get("label", []):
            if not (isinstance(entry, (list, tuple)) and len(entry) == 3):
                raise ValidationError(f"line {lineno}: label entries must be [begin, end, label]")
            begin, end, label = entry
            try:
                span = TextSpan(int(begin), int(end))
                span.check_bounds(text)
            except (ValueError, TypeError) as exc:
                raise ValidationError(f"line {lineno}: span out of bounds: {exc}") from exc
            try:
                concept = ConceptId.parse(str(label))
            except ValueError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from exc
            annotations.append(
                NormalizedAnnotation(
                    record_id=record_id,
                    span=span,
                    surface=text[span.begin : span.end],
                    concept=concept,
                    source=Source.HUMAN,
                )
            )
    try:
        return AnnotationSet(annotations), texts
    except ValidationError as exc:
        raise ValidationError(f"duplicate spans in import: {exc}") from exc


def export_doccano(annotations: AnnotationSet, texts: Mapping[str, str]) -> list[str]:
    """Render one canonical Doccano JSON line per record.

    Records are ordered by record_id and serialized with sorted keys, so
    export∘import is byte-stable. Every annotated record must have a text.
    """
    for record_id in annotations.record_ids():
        if record_id not in texts:
            raise ValidationError(f"no text supplied for record {record_id!r}")
    lines = []
    for record_id in sorted(texts):
        text = texts[record_id]
        labels = []
        for ann in annotations.for_record(record_id):
            ann.check_against(text)
            labels.append([ann.span.begin, ann.span.end, ann.concept.render()])
        obj = {"record_id": record_id, "text": text, "label": labels}
        lines.append(json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":")))
    return lines
