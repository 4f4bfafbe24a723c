"""Prompt strategies, LLM backends, verdict parsing, and RAFT data prep.

Prompts are assembled from versioned template files (swappable via a
templates directory) with sections in a fixed order: task instruction,
retrieved documents, few-shot examples, chain-of-thought directive, the
case under judgment, answer-format instruction. Turning a section's flag
off removes exactly that section, so the all-flags-off rendering is
byte-identical to the plain zero-shot prompt.

The chain-of-thought variant composes with any strategy; "hybrid" is the
strong scaffold plus few-shot examples.
"""

from __future__ import annotations

import dataclasses
import json
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Protocol, Sequence

from .corpus import ConceptId, Corpus, NormalizedAnnotation, SurveyRecord
from .errors import BackendError, ValidationError
from .ontology import EmbeddingProvider, OntologyIndex, OntologyStore, RagDocument, build_rag_document

__all__ = [
    "Strategy",
    "CotVariant",
    "PromptSpec",
    "PromptContext",
    "FewShotExample",
    "VerdictKind",
    "LlmVerdict",
    "LlmParams",
    "LlmBackend",
    "ScriptedLlmBackend",
    "HttpLlmBackend",
    "TemplateRegistry",
    "build_prompt",
    "select_few_shot",
    "parse_verdict",
    "detect_hallucination",
    "flag_hallucination",
    "run_strategy",
    "chain_validate",
    "ChainResult",
    "RaftDatapoint",
    "build_raft_dataset",
    "render_cot_answer",
    "raft_to_jsonl",
    "load_example_pool",
]


class Strategy(Enum):
    ZERO_SHOT_CONCEPT_VS_CONCEPT = "zero-shot-cvc"
    ZERO_SHOT_CONCEPT_VS_MENTION = "zero-shot-cvm"
    FEW_SHOT = "few-shot"
    COT = "cot"
    RAG_FSI = "rag-fsi"
    RAG_FSI_FLAGS = "rag-fsi-flags"


class CotVariant(Enum):
    NONE = "none"
    SIMPLE = "simple"
    STRONG = "strong"
    HYBRID = "hybrid"


_ALLOWED_SHOTS = (0, 1, 2, 3, 5)


@dataclass(frozen=True)
class PromptSpec:
    """A strategy configuration: which sections the prompt carries."""

    strategy: Strategy
    k: int = 5
    cot_variant: CotVariant = CotVariant.NONE
    use_rag: bool = False
    use_fsi: bool = False
    retrieval_k: int = 3

    def __post_init__(self) -> None:
        if self.k not in _ALLOWED_SHOTS:
            raise ValueError(f"shot count {self.k} not in {_ALLOWED_SHOTS}")
        if self.rag_enabled and self.retrieval_k < 1:
            raise ValueError("retrieval_k must be >= 1 when retrieval is active")
        if self.strategy is Strategy.RAG_FSI_FLAGS and self.use_fsi and self.k == 0:
            raise ValueError("use_fsi requires k >= 1")

    @property
    def rag_enabled(self) -> bool:
        if self.strategy is Strategy.RAG_FSI:
            return True
        if self.strategy is Strategy.RAG_FSI_FLAGS:
            return self.use_rag
        return False

    @property
    def fsi_enabled(self) -> bool:
        if self.strategy is Strategy.RAG_FSI:
            return self.k > 0
        if self.strategy is Strategy.RAG_FSI_FLAGS:
            return self.use_fsi
        if self.strategy is Strategy.FEW_SHOT:
            return self.k > 0
        if self.strategy is Strategy.COT:
            return self.cot_variant is CotVariant.HYBRID
        return False


class VerdictKind(Enum):
    AGREE = "agree"
    DISAGREE = "disagree"
    UNPARSEABLE = "unparseable"


@dataclass(frozen=True)
class LlmVerdict:
    """A parsed model judgment. Proposal only accompanies Disagree."""

    kind: VerdictKind
    raw_text: str
    proposal: ConceptId | None = None
    hallucinated: bool = False

    def __post_init__(self) -> None:
        if self.proposal is not None and self.kind is not VerdictKind.DISAGREE:
            raise ValueError("proposal only valid on Disagree verdicts")
        if self.hallucinated and self.proposal is None:
            raise ValueError("hallucinated verdicts must carry a proposal")


_VERDICT_TOKEN = re.compile(r"\b(agree|disagree)\b", re.IGNORECASE)
_MESH_PATTERN = re.compile(r"mesh:d\d+", re.IGNORECASE)


def parse_verdict(text: str) -> LlmVerdict:
    """Total parser: every string maps to a verdict.

    The first standalone AGREE/DISAGREE token (any case) decides the kind;
    on DISAGREE the first mesh:D<digits> substring becomes the proposal.
    """
    match = _VERDICT_TOKEN.search(text)
    if match is None:
        return LlmVerdict(VerdictKind.UNPARSEABLE, raw_text=text)
    if match.group(1).lower() == "agree":
        return LlmVerdict(VerdictKind.AGREE, raw_text=text)
    proposal_match = _MESH_PATTERN.search(text)
    proposal = ConceptId.parse(proposal_match.group(0)) if proposal_match else None
    return LlmVerdict(VerdictKind.DISAGREE, raw_text=text, proposal=proposal)


def detect_hallucination(verdict: LlmVerdict, store: OntologyStore) -> bool:
    """True iff the verdict proposes a concept the ontology does not know.

    Unparseable verdicts are counted separately, never as hallucinations.
    """
    return verdict.proposal is not None and verdict.proposal not in store


def flag_hallucination(verdict: LlmVerdict, store: OntologyStore) -> LlmVerdict:
    return dataclasses.replace(verdict, hallucinated=detect_hallucination(verdict, store))


@dataclass(frozen=True)
class FewShotExample:
    question: str
    mention: str
    concept: str
    verdict: str

    def __post_init__(self) -> None:
        if parse_verdict(self.verdict).kind is VerdictKind.UNPARSEABLE:
            raise ValueError(f"example verdict {self.verdict!r} is not parseable")


@dataclass(frozen=True)
class PromptContext:
    """Everything a prompt rendering can draw on for one judgment."""

    record: SurveyRecord
    mention: NormalizedAnnotation
    backend_concept: ConceptId
    backend_concept_name: str | None = None
    retrieved_docs: tuple[RagDocument, ...] = ()
    examples: tuple[FewShotExample, ...] = ()


# ---------------------------------------------------------------------------
# Templates and prompt assembly
# ---------------------------------------------------------------------------

_TEMPLATE_NAMES = (
    "task_concept_vs_concept",
    "task_concept_vs_mention",
    "documents_section",
    "examples_section",
    "example_item",
    "cot_simple",
    "cot_strong",
    "case_concept_vs_concept",
    "case_concept_vs_mention",
    "answer_format",
    "generator_propose",
    "cot_answer",
)


class TemplateRegistry:
    """Named prompt templates, loaded from a directory or the built-ins.

    Wordings iterate faster than code: pointing the registry at a directory
    swaps every prompt without a rebuild.
    """

    def __init__(self, directory: str | Path | None = None):
        self._templates: dict[str, str] = {}
        for name in _TEMPLATE_NAMES:
            if directory is not None:
                path = Path(directory) / f"{name}.txt"
                if not path.is_file():
                    raise ValidationError(f"template {name!r} missing from {directory}")
                text = path.read_text(encoding="utf-8")
            else:
                text = (
                    resources.files("phenotag").joinpath(f"templates/{name}.txt").read_text("utf-8")
                )
            self._templates[name] = text.rstrip("\n")

    def render(self, name: str, **fields: str) -> str:
        return self._templates[name].format(**fields)


_DEFAULT_REGISTRY: TemplateRegistry | None = None


def _default_registry() -> TemplateRegistry:
    global _DEFAULT_REGISTRY
    if _DEFAULT_REGISTRY is None:
        _DEFAULT_REGISTRY = TemplateRegistry()
    return _DEFAULT_REGISTRY


def _render_preceding(questions: Sequence[str]) -> str:
    if not questions:
        return "(none)"
    return "\n".join(f"- {q}" for q in questions)


def build_prompt(
    spec: PromptSpec, ctx: PromptContext, templates: TemplateRegistry | None = None
) -> str:
    """Deterministic prompt rendering; identical (spec, ctx) gives identical bytes."""
    registry = templates or _default_registry()
    concept_vs_mention = spec.strategy is Strategy.ZERO_SHOT_CONCEPT_VS_MENTION
    sections = [
        registry.render(
            "task_concept_vs_mention" if concept_vs_mention else "task_concept_vs_concept"
        )
    ]
    if spec.rag_enabled:
        if not ctx.retrieved_docs:
            raise ValidationError("prompt requires the 'retrieved_docs' section but context has none")
        sections.append(
            registry.render(
                "documents_section",
                documents="\n\n".join(doc.body for doc in ctx.retrieved_docs),
            )
        )
    if spec.fsi_enabled:
        if not ctx.examples:
            raise ValidationError("prompt requires the 'examples' section but context has none")
        rendered = "\n\n".join(
            registry.render(
                "example_item",
                question=example.question,
                mention=example.mention,
                concept=example.concept,
                verdict=example.verdict,
            )
            for example in ctx.examples
        )
        sections.append(registry.render("examples_section", examples=rendered))
    if spec.cot_variant is CotVariant.SIMPLE:
        sections.append(registry.render("cot_simple"))
    elif spec.cot_variant in (CotVariant.STRONG, CotVariant.HYBRID):
        sections.append(registry.render("cot_strong"))
    concept_name = ctx.backend_concept_name or (
        "no concept" if ctx.backend_concept.is_none else "unknown concept"
    )
    if concept_vs_mention:
        case = registry.render(
            "case_concept_vs_mention",
            mention=ctx.mention.surface,
            concept_name=concept_name,
            concept_id=ctx.backend_concept.render(),
        )
    else:
        case = registry.render(
            "case_concept_vs_concept",
            preceding_questions=_render_preceding(ctx.record.preceding_questions),
            question=ctx.record.question_text,
            answer=ctx.record.answer_text,
            mention=ctx.mention.surface,
            concept_name=concept_name,
            concept_id=ctx.backend_concept.render(),
        )
    sections.append(case)
    sections.append(registry.render("answer_format"))
    return "\n\n".join(sections)


def select_few_shot(
    pool: Sequence[FewShotExample], k: int, seed: int
) -> list[FewShotExample]:
    """Pick k distinct examples, deterministic for a fixed seed."""
    if k < 0:
        raise ValidationError("shot count must be non-negative")
    if len(pool) < k:
        raise ValidationError(f"example pool has {len(pool)} entries, {k} required")
    if k == 0:
        return []
    return random.Random(seed).sample(list(pool), k)


def load_example_pool(path: str | Path) -> list[FewShotExample]:
    pool = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            pool.append(
                FewShotExample(
                    question=obj["question"],
                    mention=obj["mention"],
                    concept=obj["concept"],
                    verdict=obj["verdict"],
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"line {lineno}: bad few-shot example: {exc}") from exc
    return pool


# ---------------------------------------------------------------------------
# LLM backends
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LlmParams:
    """Deterministic decoding by default so runs are reproducible."""

    max_tokens: int = 256
    temperature: float = 0.0


class LlmBackend(Protocol):
    name: str

    def complete(self, prompt: str, params: LlmParams) -> str: ...


class ScriptedLlmBackend:
    """Rule-driven backend for tests: first matching rule answers.

    Rules are {"contains": ...} or {"regex": ...} plus "response"; an empty
    "contains" makes a catch-all. Loadable from a JSONL rule file.
    """

    def __init__(self, rules: Iterable[Mapping], name: str = "scripted"):
        self.name = name
        self._rules = []
        for rule in rules:
            if "response" not in rule:
                raise ValidationError("scripted rule missing 'response'")
            if "regex" in rule:
                self._rules.append((re.compile(rule["regex"], re.DOTALL), rule["response"]))
            elif "contains" in rule:
                needle = rule["contains"]
                self._rules.append((needle, rule["response"]))
            else:
                raise ValidationError("scripted rule needs 'contains' or 'regex'")
        self.calls: list[str] = []

    @classmethod
    def from_file(cls, path: str | Path, name: str = "scripted") -> "ScriptedLlmBackend":
        rules = []
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                rules.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"line {lineno}: bad scripted rule: {exc.msg}") from exc
        return cls(rules, name=name)

    def complete(self, prompt: str, params: LlmParams) -> str:
        self.calls.append(prompt)
        for matcher, response in self._rules:
            if isinstance(matcher, str):
                if matcher in prompt:
                    return response
            elif matcher.search(prompt):
                return response
        raise BackendError(f"scripted backend {self.name!r}: no rule matched the prompt")


class HttpLlmBackend:
    """Backend speaking {"prompt", "max_tokens", "temperature"} -> {"text"}."""

    def __init__(
        self,
        endpoint: str,
        name: str = "llm",
        timeout_ms: int = 60_000,
        transport: Callable[[str, dict, float], dict] | None = None,
    ):
        self.name = name
        self.endpoint = endpoint
        self.timeout_ms = timeout_ms
        self._transport = transport or _post_json

    def complete(self, prompt: str, params: LlmParams) -> str:
        payload = {
            "prompt": prompt,
            "max_tokens": params.max_tokens,
            "temperature": params.temperature,
        }
        try:
            response = self._transport(self.endpoint, payload, self.timeout_ms / 1000.0)
            return str(response["text"])
        except Exception as exc:
            raise BackendError(f"LLM backend {self.name!r} failed: {exc}") from exc


def _post_json(url: str, payload: dict, timeout_s: float) -> dict:
    import os

    import requests

    token = os.environ.get("PHENOTAG_LLM_TOKEN")
    headers = {"Authorization": f"Bearer {token}"} if token else {}
    response = requests.post(url, json=payload, timeout=timeout_s, headers=headers)
    response.raise_for_status()
    return response.json()


# ---------------------------------------------------------------------------
# Strategy execution
# ---------------------------------------------------------------------------

def run_strategy(
    records: Corpus,
    annotations: Sequence[NormalizedAnnotation],
    spec: PromptSpec,
    llm: LlmBackend,
    store: OntologyStore,
    provider: EmbeddingProvider | None = None,
    seed: int = 0,
    example_pool: Sequence[FewShotExample] = (),
    index: OntologyIndex | None = None,
    templates: TemplateRegistry | None = None,
    params: LlmParams = LlmParams(),
    retry_budget: int = 1,
    max_inflight: int = 1,
    prompt_sink: Callable[[NormalizedAnnotation, str], None] | None = None,
) -> list[tuple[NormalizedAnnotation, LlmVerdict]]:
    """Judge every backend annotation with the configured strategy.

    Output order equals annotation order. An LLM failure that survives its
    retries records an Unparseable verdict with the error detail and the
    run continues.
    """
    examples: tuple[FewShotExample, ...] = ()
    if spec.fsi_enabled:
        examples = tuple(select_few_shot(example_pool, spec.k, seed))
    if spec.rag_enabled and index is None:
        if provider is None:
            raise ValidationError("retrieval-augmented strategies need an embedding provider")
        index = OntologyIndex(store, provider)

    def judge(annotation: NormalizedAnnotation) -> tuple[NormalizedAnnotation, LlmVerdict]:
        record = records.get(annotation.record_id)
        docs: tuple[RagDocument, ...] = ()
        if spec.rag_enabled:
            query = " ".join(part for part in (annotation.surface, record.question_text) if part)
            ranked = index.top_k(query, spec.retrieval_k)
            docs = tuple(build_rag_document(store.get(cid)) for cid, _ in ranked)
        name = None
        if annotation.concept in store:
            name = store.get(annotation.concept).preferred_name
        ctx = PromptContext(
            record=record,
            mention=annotation,
            backend_concept=annotation.concept,
            backend_concept_name=name,
            retrieved_docs=docs,
            examples=examples,
        )
        prompt = build_prompt(spec, ctx, templates)
        if prompt_sink is not None:
            prompt_sink(annotation, prompt)
        text = None
        last_error: Exception | None = None
        for _ in range(1 + retry_budget):
            try:
                text = llm.complete(prompt, params)
                break
            except Exception as exc:
                last_error = exc
        if text is None:
            verdict = LlmVerdict(
                VerdictKind.UNPARSEABLE, raw_text=f"<llm error: {last_error}>"
            )
        else:
            verdict = parse_verdict(text)
        return annotation, flag_hallucination(verdict, store)

    if max_inflight > 1:
        with ThreadPoolExecutor(max_workers=max_inflight) as pool:
            return list(pool.map(judge, annotations))
    return [judge(annotation) for annotation in annotations]


@dataclass(frozen=True)
class ChainResult:
    """Outcome of the generator/evaluator chain for one mention.

    ``proposed`` is the generator's concept; the final verdict is Agree when
    the evaluator accepted it, the evaluator's Disagree (with its
    counter-proposal when given) otherwise.
    """

    proposed: ConceptId | None
    verdict: LlmVerdict
    generator_raw: str


def chain_validate(
    generator: LlmBackend,
    evaluator: LlmBackend,
    ctx: PromptContext,
    spec: PromptSpec,
    store: OntologyStore | None = None,
    templates: TemplateRegistry | None = None,
    params: LlmParams = LlmParams(),
) -> ChainResult:
    """Generator proposes a concept; evaluator judges the proposal.

    An unparseable generator output short-circuits: the evaluator is never
    called. Only the generator's answer is forwarded, not its reasoning.
    """
    registry = templates or _default_registry()
    propose_prompt = registry.render(
        "generator_propose",
        question=ctx.record.question_text,
        answer=ctx.record.answer_text,
        mention=ctx.mention.surface,
    )
    generated = generator.complete(propose_prompt, params)
    id_match = _MESH_PATTERN.search(generated)
    if id_match is None:
        return ChainResult(
            proposed=None,
            verdict=LlmVerdict(VerdictKind.UNPARSEABLE, raw_text=generated),
            generator_raw=generated,
        )
    proposed = ConceptId.parse(id_match.group(0))
    name = None
    if store is not None and proposed in store:
        name = store.get(proposed).preferred_name
    eval_ctx = dataclasses.replace(ctx, backend_concept=proposed, backend_concept_name=name)
    eval_prompt = build_prompt(spec, eval_ctx, templates)
    verdict = parse_verdict(evaluator.complete(eval_prompt, params))
    if verdict.kind is VerdictKind.AGREE:
        final = LlmVerdict(VerdictKind.AGREE, raw_text=verdict.raw_text)
    elif verdict.kind is VerdictKind.DISAGREE:
        final = verdict
    else:
        final = LlmVerdict(VerdictKind.UNPARSEABLE, raw_text=verdict.raw_text)
    if store is not None:
        final = flag_hallucination(final, store)
    return ChainResult(proposed=proposed, verdict=final, generator_raw=generated)


# ---------------------------------------------------------------------------
# RAFT dataset construction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RaftDatapoint:
    question: str
    oracle_doc: RagDocument
    distractor_docs: tuple[RagDocument, ...]
    cot_answer: str

    def __post_init__(self) -> None:
        if len(self.distractor_docs) < 1:
            raise ValueError("RAFT datapoints need at least one distractor")
        ids = [doc.concept_id for doc in self.distractor_docs]
        if len(set(ids)) != len(ids):
            raise ValueError("distractors must be pairwise distinct")
        if self.oracle_doc.concept_id in ids:
            raise ValueError("oracle document may not appear among the distractors")


def render_cot_answer(
    concept, question: str, templates: TemplateRegistry | None = None
) -> str:
    """Reasoned answer quoting the oracle document's name and id, ending
    with the canonical concept id on the final ANSWER line."""
    registry = templates or _default_registry()
    return registry.render(
        "cot_answer",
        question=question,
        concept_name=concept.preferred_name,
        concept_id=concept.concept_id.render(),
    )


def build_raft_dataset(
    store: OntologyStore,
    questions: Sequence[tuple[str, ConceptId]],
    n_distractors: int,
    seed: int,
    provider: EmbeddingProvider | None = None,
    index: OntologyIndex | None = None,
    templates: TemplateRegistry | None = None,
) -> list[RaftDatapoint]:
    """Build one datapoint per (question, gold concept) pair.

    Distractors are the nearest non-oracle concepts by retrieval (hard
    negatives) when an embedding provider or index is available, otherwise
    a seeded random sample. Deterministic per seed either way.
    """
    if n_distractors < 1:
        raise ValidationError("n_distractors must be >= 1")
    if len(store) < n_distractors + 1:
        raise ValidationError(
            f"store has {len(store)} concepts, need at least {n_distractors + 1}"
        )
    if index is None and provider is not None:
        index = OntologyIndex(store, provider)
    rng = random.Random(seed)
    all_ids = [c.concept_id for c in store.concepts()]
    datapoints = []
    for question, gold_id in questions:
        if gold_id not in store:
            raise ValidationError(f"gold concept {gold_id} not in the ontology store")
        oracle = build_rag_document(store.get(gold_id))
        if index is not None:
            ranked = index.top_k(question, n_distractors + 1)
            distractor_ids = [cid for cid, _ in ranked if cid != gold_id][:n_distractors]
            if len(distractor_ids) < n_distractors:
                remaining = sorted(
                    (cid for cid in all_ids if cid != gold_id and cid not in distractor_ids),
                    key=lambda c: c.render(),
                )
                distractor_ids.extend(remaining[: n_distractors - len(distractor_ids)])
        else:
            candidates = [cid for cid in all_ids if cid != gold_id]
            distractor_ids = rng.sample(candidates, n_distractors)
        datapoints.append(
            RaftDatapoint(
                question=question,
                oracle_doc=oracle,
                distractor_docs=tuple(
                    build_rag_document(store.get(cid)) for cid in distractor_ids
                ),
                cot_answer=render_cot_answer(store.get(gold_id), question, templates),
            )
        )
    return datapoints


def raft_to_jsonl(datapoints: Sequence[RaftDatapoint]) -> list[str]:
    """Serialize datapoints to the line-delimited export format."""
    lines = []
    for point in datapoints:
        obj = {
            "question": point.question,
            "oracle": point.oracle_doc.body,
            "distractors": [doc.body for doc in point.distractor_docs],
            "cot_answer": point.cot_answer,
        }
        lines.append(json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":")))
    return lines
