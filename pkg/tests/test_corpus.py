import json
import random

import pytest

from phenotag.corpus import (
    AnnotationSet,
    ConceptId,
    Corpus,
    FieldType,
    NONE_CONCEPT,
    NormalizedAnnotation,
    PreprocessConfig,
    Source,
    SurveyRecord,
    TextSpan,
    export_doccano,
    import_doccano,
    ingest_records,
    normalize_text,
    stratified_sample,
)
from phenotag.errors import ValidationError


def record_line(record_id, field_type="binary", question="Any asthma?", answer="yes",
                preceding=(), expects=None):
    obj = {
        "record_id": record_id,
        "question_text": question,
        "answer_text": answer,
        "field_type": field_type,
        "preceding_questions": list(preceding),
    }
    if expects is not None:
        obj["expects_disease"] = expects
    return json.dumps(obj)


# --- ingest_records ---------------------------------------------------------

def test_ingest_single_binary_record():
    corpus = ingest_records([record_line("r1", field_type="binary")])
    assert len(corpus) == 1
    assert corpus.get("r1").field_type is FieldType.BINARY


def test_ingest_duplicate_id_names_offender():
    lines = [record_line("r1"), record_line("r1")]
    with pytest.raises(ValidationError, match="'r1'"):
        ingest_records(lines)


def test_ingest_unknown_field_type_names_line():
    lines = [record_line("r1"), record_line("r2", field_type="matrix")]
    with pytest.raises(ValidationError, match="line 2.*matrix"):
        ingest_records(lines)


def test_ingest_malformed_line_names_line():
    with pytest.raises(ValidationError, match="line 1"):
        ingest_records(["{not json"])


def test_ingest_expects_disease_defaults_false_and_keyword_derivation():
    corpus = ingest_records(
        [record_line("r1", question="Any wheeze or illness?"), record_line("r2", question="Postcode?")],
        expects_keywords=["illness"],
    )
    assert corpus.get("r1").expects_disease is True
    assert corpus.get("r2").expects_disease is False


def test_ingest_explicit_flag_wins_over_keywords():
    corpus = ingest_records(
        [record_line("r1", question="Any illness?", expects=False)],
        expects_keywords=["illness"],
    )
    assert corpus.get("r1").expects_disease is False


# --- normalize_text ---------------------------------------------------------

def test_lowercase_only_is_identity_mapped():
    result = normalize_text("ASTHMA?", PreprocessConfig.only("lowercase"))
    assert result.text == "asthma?"
    assert result.offset_map == tuple(range(8))


def test_acronym_expansion_offsets_hand_traced():
    config = PreprocessConfig.only(
        "lowercase", "expand_acronyms", acronyms={"dx": "diagnosis"}
    )
    result = normalize_text("dx of RSV", config)
    assert result.text == "diagnosis of rsv"
    assert result.map_span(TextSpan(13, 16)) == TextSpan(6, 9)


def test_empty_input():
    result = normalize_text("", PreprocessConfig())
    assert result.text == ""
    assert result.offset_map == (0,)


def test_nfc_composes_combining_marks():
    decomposed = "résume"  # e + combining acute
    result = normalize_text(decomposed, PreprocessConfig.only("nfc"))
    assert result.text == "résume"
    assert result.to_raw(2) == 3  # 's' sits after the two-char sequence in raw


def test_punctuation_normalization():
    result = normalize_text(
        "“flu” — maybe…", PreprocessConfig.only("normalize_punctuation")
    )
    assert result.text == '"flu" - maybe...'


def test_whitespace_collapse_and_trim():
    result = normalize_text("  a\t\tb ", PreprocessConfig.only("collapse_whitespace"))
    assert result.text == "a b"
    assert result.map_span(TextSpan(0, 1)) == TextSpan(2, 3)
    assert result.map_span(TextSpan(2, 3)) == TextSpan(5, 6)


def test_spelling_correction_distance_one_lexicon_order():
    config = PreprocessConfig.only(
        "correct_spelling", lexicon=("asthma", "eczema", "astma")
    )
    # "asthm" is distance 1 from both "asthma" and "astma"; lexicon order wins.
    assert normalize_text("asthm", config).text == "asthma"
    # Known words and non-alpha tokens are untouched.
    assert normalize_text("eczema 12q", config).text == "eczema 12q"


def test_spelling_correction_off_by_default():
    assert "asthm" in normalize_text("asthm", PreprocessConfig(lexicon=("asthma",))).text


def test_full_pipeline_acronym_then_collapse():
    config = PreprocessConfig(acronyms={"rsv": "respiratory syncytial virus"})
    result = normalize_text("  Had  RSV twice.", config)
    assert result.text == "had respiratory syncytial virus twice."
    # "twice" in normalized text maps back to the raw token.
    begin = result.text.index("twice")
    raw_span = result.map_span(TextSpan(begin, begin + 5))
    assert "  Had  RSV twice."[raw_span.begin : raw_span.end] == "twice"


def test_offset_map_total_and_monotone_property():
    rng = random.Random(11)
    alphabet = "aA bB“’— \téé?xyz. RSV dx"
    config = PreprocessConfig(acronyms={"dx": "diagnosis", "rsv": "resp virus"})
    for _ in range(200):
        raw = "".join(rng.choice(alphabet) for _ in range(rng.randrange(0, 30)))
        result = normalize_text(raw, config)
        assert len(result.offset_map) == len(result.text) + 1
        assert all(
            result.offset_map[i] <= result.offset_map[i + 1]
            for i in range(len(result.text))
        )
        assert result.offset_map[-1] <= len(raw)


# --- stratified_sample ------------------------------------------------------

def make_pool(n_expected, n_unexpected):
    types = [t.value for t in FieldType]
    records = []
    for i in range(n_expected):
        records.append(
            SurveyRecord(f"e{i:04d}", "q", "a", FieldType(types[i % len(types)]), (), True)
        )
    for i in range(n_unexpected):
        records.append(
            SurveyRecord(f"u{i:04d}", "q", "a", FieldType(types[i % len(types)]), (), False)
        )
    return Corpus(records)


def test_equal_proportion_split():
    corpus = make_pool(500, 500)
    sample = stratified_sample(corpus, 100, seed=3)
    assert len(sample) == 100
    assert sum(r.expects_disease for r in sample) == 50


def test_exhaustion_takes_everything():
    corpus = make_pool(2, 2)
    sample = stratified_sample(corpus, 4, seed=9)
    assert sorted(r.record_id for r in sample) == ["e0000", "e0001", "u0000", "u0001"]


def test_sampling_deterministic():
    corpus = make_pool(40, 40)
    first = [r.record_id for r in stratified_sample(corpus, 10, seed=21)]
    second = [r.record_id for r in stratified_sample(corpus, 10, seed=21)]
    assert first == second
    assert first != [r.record_id for r in stratified_sample(corpus, 10, seed=22)]


def test_field_types_covered_before_repeats():
    corpus = make_pool(30, 30)
    sample = stratified_sample(corpus, 12, seed=5)
    for stratum in (True, False):
        types = [r.field_type for r in sample if r.expects_disease is stratum]
        assert len(set(types)) == len(FieldType)  # 6 picks cover all 6 types


def test_shortfall_reports_available_counts():
    corpus = make_pool(3, 60)
    with pytest.raises(ValidationError, match="3 records, 25 required"):
        stratified_sample(corpus, 50, seed=0)


def test_odd_n_gives_ceiling_to_expected_stratum():
    corpus = make_pool(20, 20)
    sample = stratified_sample(corpus, 7, seed=1)
    assert sum(r.expects_disease for r in sample) == 4


# --- Doccano import/export --------------------------------------------------

def test_import_single_annotation_hand_counted():
    line = json.dumps({"record_id": "r1", "text": "has asthma", "label": [[4, 10, "mesh:D001249"]]})
    annotations, texts = import_doccano([line])
    (ann,) = annotations.for_record("r1")
    assert ann.surface == "asthma"
    assert ann.concept == ConceptId("D001249")
    assert ann.source is Source.HUMAN
    assert texts["r1"] == "has asthma"


def test_import_negative_record_keeps_empty_entry():
    line = json.dumps({"record_id": "r9", "text": "no issues", "label": []})
    annotations, texts = import_doccano([line])
    assert annotations.for_record("r9") == ()
    assert "r9" in texts


def test_import_out_of_bounds_span_names_line():
    line = json.dumps({"record_id": "r1", "text": "0123456789", "label": [[4, 20, "NONE"]]})
    with pytest.raises(ValidationError, match="line 1.*out of bounds"):
        import_doccano([line])


def test_import_bad_label_string_rejected():
    line = json.dumps({"record_id": "r1", "text": "has asthma", "label": [[4, 10, "icd:J45"]]})
    with pytest.raises(ValidationError, match="line 1"):
        import_doccano([line])


def test_import_synthesizes_record_ids():
    line = json.dumps({"text": "has asthma", "label": [[4, 10, "NONE"]]})
    annotations, texts = import_doccano([line])
    assert list(texts) == ["line-000001"]
    assert len(annotations) == 1


def test_import_rejects_duplicate_human_spans():
    line = json.dumps(
        {"record_id": "r1", "text": "has asthma", "label": [[4, 10, "NONE"], [4, 10, "mesh:D001249"]]}
    )
    with pytest.raises(ValidationError, match="duplicate"):
        import_doccano([line])


def three_record_fixture():
    texts = {
        "r1": "child has asthma and eczema",
        "r2": "no conditions reported",
        "r3": "recurrent ear infections",
    }
    annotations = AnnotationSet(
        [
            NormalizedAnnotation("r1", TextSpan(10, 16), "asthma", ConceptId("D001249"), Source.HUMAN),
            NormalizedAnnotation("r1", TextSpan(21, 27), "eczema", ConceptId("D004485"), Source.HUMAN),
            NormalizedAnnotation("r3", TextSpan(10, 24), "ear infections", NONE_CONCEPT, Source.HUMAN),
        ]
    )
    return annotations, texts


def test_export_import_round_trip():
    annotations, texts = three_record_fixture()
    lines = export_doccano(annotations, texts)
    reimported, retexts = import_doccano(lines)
    assert reimported == annotations
    assert retexts == texts
    assert export_doccano(reimported, retexts) == lines


def test_export_zero_annotation_record_emits_empty_label():
    annotations, texts = three_record_fixture()
    r2_line = next(l for l in export_doccano(annotations, texts) if '"r2"' in l)
    assert json.loads(r2_line)["label"] == []


def test_export_unknown_record_is_error():
    annotations, _ = three_record_fixture()
    with pytest.raises(ValidationError, match="'r3'"):
        export_doccano(annotations, {"r1": "child has asthma and eczema", "r2": "x"})


# --- invariants -------------------------------------------------------------

def test_surface_always_matches_span_substring():
    annotations, texts = three_record_fixture()
    for ann in annotations:
        ann.check_against(texts[ann.record_id])


def test_annotation_set_sorted_by_span():
    anns = [
        NormalizedAnnotation("r", TextSpan(5, 9), "xxxx", NONE_CONCEPT, Source.NER_BACKEND),
        NormalizedAnnotation("r", TextSpan(1, 3), "xx", NONE_CONCEPT, Source.NER_BACKEND),
        NormalizedAnnotation("r", TextSpan(1, 2), "x", NONE_CONCEPT, Source.NER_BACKEND),
    ]
    ordered = AnnotationSet(anns).for_record("r")
    assert [(a.span.begin, a.span.end) for a in ordered] == [(1, 2), (1, 3), (5, 9)]


def test_model_sets_may_overlap_human_sets_may_not():
    dup = [
        NormalizedAnnotation("r", TextSpan(1, 3), "xx", NONE_CONCEPT, Source.NER_BACKEND),
        NormalizedAnnotation("r", TextSpan(1, 3), "xx", ConceptId("D1"), Source.NER_BACKEND),
    ]
    assert len(AnnotationSet(dup).for_record("r")) == 2
    human_dup = [
        NormalizedAnnotation("r", TextSpan(1, 3), "xx", NONE_CONCEPT, Source.HUMAN),
        NormalizedAnnotation("r", TextSpan(1, 3), "xx", ConceptId("D1"), Source.HUMAN),
    ]
    with pytest.raises(ValidationError):
        AnnotationSet(human_dup)


def test_concept_id_parsing_and_rendering():
    assert ConceptId.parse("mesh:D001249").render() == "mesh:D001249"
    assert ConceptId.parse("MESH:d003920") == ConceptId("D003920")
    assert ConceptId.parse("NONE").is_none
    with pytest.raises(ValueError):
        ConceptId.parse("D001249")
    with pytest.raises(ValueError):
        ConceptId("X12")


def test_text_span_validation():
    with pytest.raises(ValueError):
        TextSpan(3, 3)
    with pytest.raises(ValueError):
        TextSpan(-1, 2)
    TextSpan(0, 1).check_bounds("a")
    with pytest.raises(ValueError):
        TextSpan(0, 2).check_bounds("a")
