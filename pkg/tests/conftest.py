import json

import pytest

from phenotag.corpus import ConceptId
from phenotag.ontology import OntologyConcept, OntologyStore, tokenize

_PREFIXES = (
    "bronch", "cardi", "derm", "gastr", "hepat",
    "nephr", "neur", "oste", "pulmon", "rhin",
    "arthr", "myel", "phleb", "gloss", "cyst",
)
_SUFFIXES = ("itis", "osis", "algia", "opathy", "emia", "oma", "asis")
_ORGANS = (
    "airways", "heart", "skin", "stomach", "liver",
    "kidneys", "nerves", "bones", "lungs", "sinuses",
)


def _buckets(text):
    from phenotag.ontology import _bucket

    return {_bucket(token, 256) for token in tokenize(text)}


def _candidate_names():
    for suffix in _SUFFIXES:
        for prefix in _PREFIXES:
            yield prefix + suffix


def make_concepts(n):
    """Deterministic synthetic disease concepts whose single-token names
    occupy pairwise-distinct hash buckets, so exact-name retrieval under the
    256-bucket fallback provider has an unambiguous winner."""
    reserved = _buckets(
        "name id mesh description is a persistent disorder of the synonyms chronic syndrome "
        + " ".join(_ORGANS)
        + " "
        + " ".join(f"d{i + 1:06d}" for i in range(n))
    )
    names = []
    for name in _candidate_names():
        (bucket,) = _buckets(name)
        if bucket not in reserved:
            reserved.add(bucket)
            names.append(name)
        if len(names) == n:
            break
    if len(names) < n:
        raise RuntimeError(f"fixture generator exhausted at {len(names)} names")
    concepts = []
    for i, name in enumerate(names):
        organ = _ORGANS[i % len(_ORGANS)]
        concepts.append(
            OntologyConcept(
                concept_id=ConceptId(f"D{i + 1:06d}"),
                preferred_name=name,
                description=f"{name} is a persistent disorder of the {organ}.",
                synonyms=(f"chronic {name}", f"{name} syndrome"),
            )
        )
    return concepts


def concepts_to_jsonl(concepts):
    lines = []
    for c in concepts:
        lines.append(
            json.dumps(
                {
                    "concept_id": c.concept_id.render(),
                    "preferred_name": c.preferred_name,
                    "description": c.description,
                    "synonyms": list(c.synonyms),
                }
            )
        )
    return "\n".join(lines) + "\n"


@pytest.fixture
def store50():
    return OntologyStore(make_concepts(50))


@pytest.fixture
def store10():
    return OntologyStore(make_concepts(10))


E2E_LEXICON = {
    "asthma": "mesh:D001249",
    "eczema": "mesh:D004485",
    "diabetes": "mesh:D003920",
    "migraine": "mesh:D008881",
}


def e2e_fixture():
    """20 records + gold engineered to score tp=8, fp=2, fn=2, tn=8.

    Answers are already in normalized form (lowercase, single spaces) so the
    default preprocessing is the identity and gold spans stay valid. 8
    records match gold exactly, 2 carry gold the mock lexicon cannot find,
    2 carry lexicon terms the annotators rejected, 8 are clean.
    """
    records, gold_lines = [], []

    def add_record(rid, answer, labels, expects):
        records.append(
            {
                "record_id": rid,
                "question_text": "",
                "answer_text": answer,
                "field_type": "descriptive",
                "preceding_questions": [],
                "expects_disease": expects,
            }
        )
        gold_lines.append({"record_id": rid, "text": answer, "label": labels})

    for i, term in enumerate(["asthma", "eczema", "diabetes", "migraine"] * 2):
        answer = f"the child has {term} these days"
        begin = answer.index(term)
        add_record(f"tp{i:02d}", answer, [[begin, begin + len(term), E2E_LEXICON[term]]], True)
    for i in range(2):
        answer = "suffers from hay fever often"
        begin = answer.index("hay fever")
        add_record(f"fn{i:02d}", answer, [[begin, begin + 9, "mesh:D006255"]], True)
    for i in range(2):
        add_record(f"fp{i:02d}", "worried about asthma in the news", [], False)
    for i in range(8):
        add_record(f"tn{i:02d}", f"no concerns at all number {i}", [], False)
    return (
        [json.dumps(r) for r in records],
        [json.dumps(g) for g in gold_lines],
        [json.dumps({"term": t, "concept_id": c}) for t, c in E2E_LEXICON.items()],
    )


def write_e2e_workspace(root):
    """Materialize the end-to-end fixture plus a config file under ``root``."""
    record_lines, gold_lines, lexicon_lines = e2e_fixture()
    (root / "records.jsonl").write_text("\n".join(record_lines) + "\n", encoding="utf-8")
    (root / "gold.jsonl").write_text("\n".join(gold_lines) + "\n", encoding="utf-8")
    (root / "mock_lexicon.jsonl").write_text("\n".join(lexicon_lines) + "\n", encoding="utf-8")
    (root / "ontology.jsonl").write_text(concepts_to_jsonl(make_concepts(50)), encoding="utf-8")
    examples = [
        json.dumps(
            {
                "question": f"Example question {i}?",
                "mention": f"mention{i}",
                "concept": f"concept{i} (mesh:D{i + 1:06d})",
                "verdict": "AGREE" if i % 2 == 0 else f"DISAGREE mesh:D{i + 1:06d}",
            }
        )
        for i in range(12)
    ]
    (root / "examples.jsonl").write_text("\n".join(examples) + "\n", encoding="utf-8")
    (root / "llm_rules.jsonl").write_text(
        json.dumps({"contains": "", "response": "AGREE"}) + "\n", encoding="utf-8"
    )
    (root / "config.ini").write_text(
        "[paths]\n"
        "corpus = records.jsonl\n"
        "ontology = ontology.jsonl\n"
        "gold = gold.jsonl\n"
        "example_pool = examples.jsonl\n"
        "output_dir = out\n"
        "\n"
        "[ner]\n"
        "mock_lexicon = mock_lexicon.jsonl\n"
        "batch_size = 4\n"
        "\n"
        "[llm]\n"
        "scripted = llm_rules.jsonl\n"
        "\n"
        "[run]\n"
        "seed = 7\n"
        "\n"
        "[eval]\n"
        "predictions = out/predictions.jsonl\n",
        encoding="utf-8",
    )
    return root / "config.ini"
