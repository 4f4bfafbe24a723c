import random

import pytest

from phenotag.corpus import ConceptId, Corpus, FieldType, NormalizedAnnotation, Source, SurveyRecord, TextSpan
from phenotag.errors import BackendError, ValidationError
from phenotag.ontology import HashedBagOfWordsProvider, OntologyIndex
from phenotag.orchestrate import (
    ChainResult,
    CotVariant,
    FewShotExample,
    LlmParams,
    LlmVerdict,
    PromptContext,
    PromptSpec,
    ScriptedLlmBackend,
    Strategy,
    TemplateRegistry,
    VerdictKind,
    build_prompt,
    build_raft_dataset,
    chain_validate,
    detect_hallucination,
    flag_hallucination,
    parse_verdict,
    raft_to_jsonl,
    render_cot_answer,
    run_strategy,
    select_few_shot,
)

from conftest import make_concepts


ASTHMA = ConceptId("D001249")


def make_record(record_id="r1", question="Any breathing issues?", answer="child has asthma",
                preceding=("Does your child take medication?",)):
    return SurveyRecord(record_id, question, answer, FieldType.DESCRIPTIVE, tuple(preceding))


def make_mention(record_id="r1", concept=ASTHMA, begin=10, end=16, surface="asthma"):
    return NormalizedAnnotation(record_id, TextSpan(begin, end), surface, concept, Source.NER_BACKEND)


def make_ctx(**overrides):
    defaults = dict(
        record=make_record(),
        mention=make_mention(),
        backend_concept=ASTHMA,
        backend_concept_name="asthma",
    )
    defaults.update(overrides)
    return PromptContext(**defaults)


def example_pool(n=20):
    return [
        FewShotExample(
            question=f"Question {i}?",
            mention=f"mention{i}",
            concept=f"concept{i} (mesh:D{i + 1:06d})",
            verdict="AGREE" if i % 2 == 0 else f"DISAGREE mesh:D{i + 1:06d}",
        )
        for i in range(n)
    ]


# --- build_prompt ------------------------------------------------------------

def test_zero_shot_cvc_prompt_contents():
    spec = PromptSpec(Strategy.ZERO_SHOT_CONCEPT_VS_CONCEPT)
    prompt = build_prompt(spec, make_ctx())
    assert "Does your child take medication?" in prompt
    assert "asthma (mesh:D001249)" in prompt
    assert "Answer AGREE or DISAGREE; if DISAGREE, give the correct concept as mesh:Dxxxxxx." in prompt
    assert "Worked examples" not in prompt
    assert "Reference documents" not in prompt
    assert "step by step" not in prompt


def test_cot_simple_contains_literal_directive():
    spec = PromptSpec(Strategy.COT, cot_variant=CotVariant.SIMPLE)
    assert "Let's think step by step" in build_prompt(spec, make_ctx())


def test_cot_strong_contains_four_step_scaffold():
    spec = PromptSpec(Strategy.COT, cot_variant=CotVariant.STRONG)
    prompt = build_prompt(spec, make_ctx())
    assert "Let's think step by step" in prompt
    for step in ("1. Restate the mention", "2. Restate the definition",
                 "3. Compare the mention", "4. State your verdict"):
        assert step in prompt


def test_cot_hybrid_requires_and_renders_examples():
    spec = PromptSpec(Strategy.COT, cot_variant=CotVariant.HYBRID, k=2)
    with pytest.raises(ValidationError, match="examples"):
        build_prompt(spec, make_ctx())
    prompt = build_prompt(spec, make_ctx(examples=tuple(example_pool(2))))
    assert "Worked examples" in prompt
    assert "Let's think step by step" in prompt


def test_flags_off_collapses_to_zero_shot_bytes():
    ctx = make_ctx()
    flagged = build_prompt(
        PromptSpec(Strategy.RAG_FSI_FLAGS, use_rag=False, use_fsi=False), ctx
    )
    zero_shot = build_prompt(PromptSpec(Strategy.ZERO_SHOT_CONCEPT_VS_CONCEPT), ctx)
    assert flagged == zero_shot


def test_flag_sections_add_and_remove_cleanly(store10):
    from phenotag.ontology import build_rag_document

    docs = tuple(build_rag_document(c) for c in store10.concepts()[:2])
    examples = tuple(example_pool(2))
    ctx = make_ctx(retrieved_docs=docs, examples=examples)
    base = build_prompt(PromptSpec(Strategy.RAG_FSI_FLAGS), ctx)
    with_rag = build_prompt(PromptSpec(Strategy.RAG_FSI_FLAGS, use_rag=True), ctx)
    with_both = build_prompt(PromptSpec(Strategy.RAG_FSI_FLAGS, use_rag=True, use_fsi=True, k=2), ctx)
    registry = TemplateRegistry()
    docs_section = registry.render("documents_section", documents="\n\n".join(d.body for d in docs))
    assert with_rag == base.replace(
        base.split("\n\n", 1)[0], base.split("\n\n", 1)[0] + "\n\n" + docs_section, 1
    )
    assert docs_section in with_both
    assert with_both.replace(docs_section + "\n\n", "", 1) == build_prompt(
        PromptSpec(Strategy.RAG_FSI_FLAGS, use_fsi=True, k=2), ctx
    )


def test_missing_docs_section_is_named_error():
    spec = PromptSpec(Strategy.RAG_FSI, k=0)
    with pytest.raises(ValidationError, match="retrieved_docs"):
        build_prompt(spec, make_ctx())


def test_prompt_deterministic():
    spec = PromptSpec(Strategy.FEW_SHOT, k=3)
    ctx = make_ctx(examples=tuple(example_pool(3)))
    assert build_prompt(spec, ctx) == build_prompt(spec, ctx)


def test_concept_vs_mention_prompt_omits_answer_text():
    spec = PromptSpec(Strategy.ZERO_SHOT_CONCEPT_VS_MENTION)
    prompt = build_prompt(spec, make_ctx())
    assert "mention text" in prompt
    assert "child has asthma" not in prompt
    assert '"asthma"' in prompt


def test_template_directory_override(tmp_path):
    import shutil
    from importlib import resources

    src = resources.files("phenotag").joinpath("templates")
    for item in src.iterdir():
        shutil.copy(str(item), tmp_path / item.name)
    (tmp_path / "cot_simple.txt").write_text("Think carefully now.\n", encoding="utf-8")
    registry = TemplateRegistry(tmp_path)
    spec = PromptSpec(Strategy.COT, cot_variant=CotVariant.SIMPLE)
    assert "Think carefully now." in build_prompt(spec, make_ctx(), registry)


def test_template_directory_missing_file(tmp_path):
    with pytest.raises(ValidationError, match="task_concept_vs_concept"):
        TemplateRegistry(tmp_path)


def test_spec_validation():
    with pytest.raises(ValueError, match="shot count"):
        PromptSpec(Strategy.FEW_SHOT, k=4)
    with pytest.raises(ValueError, match="retrieval_k"):
        PromptSpec(Strategy.RAG_FSI, retrieval_k=0)
    with pytest.raises(ValueError, match="use_fsi"):
        PromptSpec(Strategy.RAG_FSI_FLAGS, use_fsi=True, k=0)


# --- select_few_shot ----------------------------------------------------------

def test_select_five_distinct_from_twenty():
    pool = example_pool(20)
    picked = select_few_shot(pool, 5, seed=13)
    assert len(picked) == 5
    assert len(set(id(e) for e in picked)) == 5
    assert len({e.question for e in picked}) == 5


def test_select_zero_gives_empty():
    assert select_few_shot(example_pool(5), 0, seed=1) == []


def test_select_deterministic():
    pool = example_pool(20)
    assert select_few_shot(pool, 5, seed=7) == select_few_shot(pool, 5, seed=7)
    assert select_few_shot(pool, 5, seed=7) != select_few_shot(pool, 5, seed=8)


def test_select_pool_too_small():
    with pytest.raises(ValidationError, match="3 entries, 5 required"):
        select_few_shot(example_pool(3), 5, seed=0)


# --- parse_verdict ------------------------------------------------------------

def test_parse_agree():
    verdict = parse_verdict("AGREE — the concept matches.")
    assert verdict.kind is VerdictKind.AGREE
    assert verdict.proposal is None


def test_parse_disagree_with_proposal():
    verdict = parse_verdict("Disagree. Correct concept: mesh:D003920.")
    assert verdict.kind is VerdictKind.DISAGREE
    assert verdict.proposal == ConceptId("D003920")
    assert verdict.raw_text.startswith("Disagree")


def test_parse_unparseable():
    assert parse_verdict("Possibly related to breathing.").kind is VerdictKind.UNPARSEABLE


def test_parse_stable_under_whitespace_and_case():
    for text in ("  agree  ", "AgReE!", "\n\tAGREE\n"):
        assert parse_verdict(text).kind is VerdictKind.AGREE
    for text in ("  disagree mesh:d000001 ", "DISAGREE."):
        assert parse_verdict(text).kind is VerdictKind.DISAGREE


def test_parse_standalone_token_only():
    assert parse_verdict("disagreement brewing").kind is VerdictKind.UNPARSEABLE
    assert parse_verdict("they agreed").kind is VerdictKind.UNPARSEABLE
    assert parse_verdict("I agree fully").kind is VerdictKind.AGREE


def test_parse_first_token_wins():
    assert parse_verdict("agree... no wait, disagree").kind is VerdictKind.AGREE
    assert parse_verdict("disagree, though some agree").kind is VerdictKind.DISAGREE


def test_parse_totality_fuzz():
    rng = random.Random(99)
    alphabet = "aA gG rR eE dD iI sS mesh:D0123 \t\n.!-"
    for _ in range(300):
        text = "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 40)))
        verdict = parse_verdict(text)
        assert verdict.kind in VerdictKind
        assert verdict.raw_text == text


# --- detect_hallucination ------------------------------------------------------

def test_hallucination_known_unknown_and_agree(store10):
    known = parse_verdict("DISAGREE mesh:D000001")
    unknown = parse_verdict("DISAGREE mesh:D999999")
    agree = parse_verdict("AGREE")
    assert detect_hallucination(known, store10) is False
    assert detect_hallucination(unknown, store10) is True
    assert detect_hallucination(agree, store10) is False
    assert flag_hallucination(unknown, store10).hallucinated is True


def test_verdict_invariants():
    with pytest.raises(ValueError):
        LlmVerdict(VerdictKind.AGREE, raw_text="x", proposal=ASTHMA)
    with pytest.raises(ValueError):
        LlmVerdict(VerdictKind.DISAGREE, raw_text="x", hallucinated=True)


# --- run_strategy ---------------------------------------------------------------

def corpus_with_annotations(store, n=10):
    records = []
    annotations = []
    concepts = store.concepts()
    for i in range(n):
        name = concepts[i % len(concepts)].preferred_name
        answer = f"the patient reports {name} daily"
        records.append(
            SurveyRecord(f"r{i:03d}", f"Condition {i}?", answer, FieldType.DESCRIPTIVE)
        )
        begin = answer.index(name)
        annotations.append(
            NormalizedAnnotation(
                f"r{i:03d}",
                TextSpan(begin, begin + len(name)),
                name,
                concepts[i % len(concepts)].concept_id,
                Source.NER_BACKEND,
            )
        )
    return Corpus(records), annotations


def test_scripted_agree_run_has_zero_hallucinations(store10):
    corpus, annotations = corpus_with_annotations(store10, 10)
    llm = ScriptedLlmBackend([{"contains": "", "response": "AGREE"}])
    results = run_strategy(
        corpus, annotations, PromptSpec(Strategy.ZERO_SHOT_CONCEPT_VS_CONCEPT),
        llm, store10, seed=1,
    )
    assert len(results) == 10
    assert all(v.kind is VerdictKind.AGREE for _, v in results)
    assert sum(v.hallucinated for _, v in results) == 0


def test_rag_prompts_contain_exactly_three_documents(store10):
    corpus, annotations = corpus_with_annotations(store10, 4)
    prompts = []
    llm = ScriptedLlmBackend([{"contains": "", "response": "AGREE"}])
    run_strategy(
        corpus, annotations, PromptSpec(Strategy.RAG_FSI, k=2, retrieval_k=3),
        llm, store10, provider=HashedBagOfWordsProvider(), seed=3,
        example_pool=example_pool(10),
        prompt_sink=lambda ann, p: prompts.append(p),
    )
    assert len(prompts) == 4
    for prompt in prompts:
        assert prompt.count("NAME: ") == 3
        assert "Worked examples" in prompt


def test_unknown_proposals_all_flagged(store10):
    corpus, annotations = corpus_with_annotations(store10, 6)
    llm = ScriptedLlmBackend([{"contains": "", "response": "DISAGREE mesh:D999999"}])
    results = run_strategy(
        corpus, annotations, PromptSpec(Strategy.ZERO_SHOT_CONCEPT_VS_CONCEPT),
        llm, store10, seed=1,
    )
    assert all(v.hallucinated for _, v in results)


def test_llm_failure_becomes_unparseable_and_run_continues(store10):
    corpus, annotations = corpus_with_annotations(store10, 3)

    class FailsOnSecond:
        name = "flaky"

        def __init__(self):
            self.count = 0

        def complete(self, prompt, params):
            self.count += 1
            if "r001" in prompt or "Condition 1?" in prompt:
                raise BackendError("down")
            return "AGREE"

    results = run_strategy(
        corpus, annotations, PromptSpec(Strategy.ZERO_SHOT_CONCEPT_VS_CONCEPT),
        FailsOnSecond(), store10, seed=1, retry_budget=1,
    )
    kinds = [v.kind for _, v in results]
    assert kinds == [VerdictKind.AGREE, VerdictKind.UNPARSEABLE, VerdictKind.AGREE]
    assert "llm error" in results[1][1].raw_text


def test_run_strategy_order_preserved_under_concurrency(store10):
    corpus, annotations = corpus_with_annotations(store10, 10)
    llm = ScriptedLlmBackend([{"contains": "", "response": "AGREE"}])
    results = run_strategy(
        corpus, annotations, PromptSpec(Strategy.ZERO_SHOT_CONCEPT_VS_CONCEPT),
        llm, store10, seed=1, max_inflight=4,
    )
    assert [a.record_id for a, _ in results] == [a.record_id for a in annotations]


def test_run_strategy_deterministic_with_seed(store10):
    corpus, annotations = corpus_with_annotations(store10, 5)
    spec = PromptSpec(Strategy.FEW_SHOT, k=3)
    pool = example_pool(12)

    def run():
        prompts = []
        llm = ScriptedLlmBackend([{"contains": "", "response": "AGREE"}])
        run_strategy(corpus, annotations, spec, llm, store10, seed=42,
                     example_pool=pool, prompt_sink=lambda a, p: prompts.append(p))
        return prompts

    assert run() == run()


# --- chain_validate --------------------------------------------------------------

def test_chain_happy_path(store10):
    concept = store10.concepts()[0]
    gen = ScriptedLlmBackend([{"contains": "", "response": f"I propose {concept.concept_id.render()}"}])
    ev = ScriptedLlmBackend([{"contains": "", "response": "AGREE"}])
    result = chain_validate(gen, ev, make_ctx(), PromptSpec(Strategy.ZERO_SHOT_CONCEPT_VS_CONCEPT), store10)
    assert result.proposed == concept.concept_id
    assert result.verdict.kind is VerdictKind.AGREE
    assert len(ev.calls) == 1
    assert concept.concept_id.render() in ev.calls[0]


def test_chain_evaluator_override(store10):
    gen = ScriptedLlmBackend([{"contains": "", "response": "mesh:D000001"}])
    ev = ScriptedLlmBackend([{"contains": "", "response": "DISAGREE mesh:D000003"}])
    result = chain_validate(gen, ev, make_ctx(), PromptSpec(Strategy.ZERO_SHOT_CONCEPT_VS_CONCEPT), store10)
    assert result.proposed == ConceptId("D000001")
    assert result.verdict.kind is VerdictKind.DISAGREE
    assert result.verdict.proposal == ConceptId("D000003")


def test_chain_short_circuits_on_unparseable_generator(store10):
    gen = ScriptedLlmBackend([{"contains": "", "response": "unsure"}])
    ev = ScriptedLlmBackend([{"contains": "", "response": "AGREE"}])
    result = chain_validate(gen, ev, make_ctx(), PromptSpec(Strategy.ZERO_SHOT_CONCEPT_VS_CONCEPT), store10)
    assert result.proposed is None
    assert result.verdict.kind is VerdictKind.UNPARSEABLE
    assert ev.calls == []


# --- RAFT -------------------------------------------------------------------------

def raft_questions(store, n):
    concepts = store.concepts()
    return [
        (f"What condition involves {concepts[i % len(concepts)].preferred_name}?",
         concepts[i % len(concepts)].concept_id)
        for i in range(n)
    ]


def test_raft_three_distractors_none_oracle(store10):
    points = build_raft_dataset(store10, raft_questions(store10, 10), 3, seed=5,
                                provider=HashedBagOfWordsProvider())
    assert len(points) == 10
    for point in points:
        assert len(point.distractor_docs) == 3
        ids = {d.concept_id for d in point.distractor_docs}
        assert len(ids) == 3
        assert point.oracle_doc.concept_id not in ids


def test_raft_exhaustion_uses_all_non_oracle(store10):
    points = build_raft_dataset(store10, raft_questions(store10, 2), 9, seed=5,
                                provider=HashedBagOfWordsProvider())
    for point in points:
        assert len(point.distractor_docs) == 9


def test_raft_deterministic_per_seed(store10):
    questions = raft_questions(store10, 8)
    for provider in (HashedBagOfWordsProvider(), None):
        a = raft_to_jsonl(build_raft_dataset(store10, questions, 3, seed=11, provider=provider))
        b = raft_to_jsonl(build_raft_dataset(store10, questions, 3, seed=11, provider=provider))
        assert a == b
    r1 = raft_to_jsonl(build_raft_dataset(store10, questions, 3, seed=1, provider=None))
    r2 = raft_to_jsonl(build_raft_dataset(store10, questions, 3, seed=2, provider=None))
    assert r1 != r2


def test_raft_errors(store10):
    with pytest.raises(ValidationError, match="n_distractors"):
        build_raft_dataset(store10, raft_questions(store10, 1), 0, seed=1)
    with pytest.raises(ValidationError, match="at least 11"):
        build_raft_dataset(store10, raft_questions(store10, 1), 10, seed=1)
    with pytest.raises(ValidationError, match="not in the ontology"):
        build_raft_dataset(store10, [("q?", ConceptId("D999999"))], 2, seed=1)


def test_render_cot_answer_shape(store10):
    concept = store10.concepts()[0]
    answer = render_cot_answer(concept, "What ails the patient?")
    assert answer.splitlines()[-1] == f"ANSWER: {concept.concept_id.render()}"
    assert concept.preferred_name in answer
    other = render_cot_answer(store10.concepts()[1], "What ails the patient?")
    assert answer != other


def test_scripted_backend_from_file(tmp_path):
    import json as _json

    path = tmp_path / "rules.jsonl"
    path.write_text(
        _json.dumps({"contains": "asthma", "response": "AGREE"})
        + "\n"
        + _json.dumps({"contains": "", "response": "DISAGREE mesh:D000001"})
        + "\n",
        encoding="utf-8",
    )
    backend = ScriptedLlmBackend.from_file(path)
    assert backend.complete("about asthma", LlmParams()) == "AGREE"
    assert backend.complete("about eczema", LlmParams()).startswith("DISAGREE")


def test_http_llm_backend_wire():
    from phenotag.orchestrate import HttpLlmBackend

    calls = []

    def transport(url, payload, timeout):
        calls.append((url, payload))
        return {"text": "AGREE"}

    backend = HttpLlmBackend("http://llm.local/complete", transport=transport)
    out = backend.complete("judge this", LlmParams(max_tokens=64, temperature=0.0))
    assert out == "AGREE"
    assert calls == [
        ("http://llm.local/complete",
         {"prompt": "judge this", "max_tokens": 64, "temperature": 0.0}),
    ]
