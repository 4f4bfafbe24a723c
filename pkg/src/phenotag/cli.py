"""Command-line entry point wiring the pipeline into reproducible runs.

Exit codes are a stable contract: 0 success, 1 validation or usage
problem, 2 missing input, 3 backend failure. Every command writes its run
manifest before any result file, and all result files are written
atomically, so identical configs with scripted backends reproduce outputs
byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path
from typing import Callable

import click

from . import __version__
from .annotate import (
    BackendConfig,
    HttpNerBackend,
    MockNerBackend,
    annotate_batch,
    read_outcomes,
    write_outcomes,
)
from .config import RunConfig, RunManifest, atomic_write_text, derive_seed, load_config
from .corpus import (
    AnnotationSet,
    ConceptId,
    Corpus,
    import_doccano,
    load_records,
    normalize_text,
)
from .errors import BackendError, ValidationError
from .evaluate import (
    CotRow,
    EmbeddingRow,
    FinetunedRow,
    FlagsRow,
    NerNenRow,
    RagFsiRow,
    ReportBundle,
    ZeroShotRow,
    alignment_accuracy,
    alignment_confusions,
    alignment_stats,
    compute_metrics,
    hallucination_rate,
    match_concepts,
    match_mentions,
    mean_coherence,
    mean_rouge,
    read_verdicts,
    render_report,
    write_verdicts,
)
from .ontology import HashedBagOfWordsProvider, RemoteEmbeddingProvider, load_ontology
from .orchestrate import (
    CotVariant,
    HttpLlmBackend,
    LlmParams,
    PromptSpec,
    ScriptedLlmBackend,
    Strategy,
    TemplateRegistry,
    build_raft_dataset,
    load_example_pool,
    raft_to_jsonl,
    run_strategy,
)

EXIT_VALIDATION = 1
EXIT_MISSING_INPUT = 2
EXIT_BACKEND = 3

_STRATEGY_NAMES = {
    "zero-shot-cvc": (Strategy.ZERO_SHOT_CONCEPT_VS_CONCEPT, CotVariant.NONE),
    "zero-shot-cvm": (Strategy.ZERO_SHOT_CONCEPT_VS_MENTION, CotVariant.NONE),
    "few-shot": (Strategy.FEW_SHOT, CotVariant.NONE),
    "cot:none": (Strategy.COT, CotVariant.NONE),
    "cot:simple": (Strategy.COT, CotVariant.SIMPLE),
    "cot:strong": (Strategy.COT, CotVariant.STRONG),
    "cot:hybrid": (Strategy.COT, CotVariant.HYBRID),
    "rag-fsi": (Strategy.RAG_FSI, CotVariant.NONE),
    "rag-fsi-flags": (Strategy.RAG_FSI_FLAGS, CotVariant.NONE),
}


def _execute(body: Callable[[], None]) -> None:
    try:
        body()
    except FileNotFoundError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_MISSING_INPUT)
    except BackendError as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_BACKEND)
    except (ValidationError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        sys.exit(EXIT_VALIDATION)


@click.group()
@click.version_option(version=__version__)
def main() -> None:
    """Disease phenotyping pipeline: ingest, annotate, verify, evaluate."""


def _resolve(path_option: str | None, cfg: RunConfig, section: str, key: str) -> Path:
    if path_option is not None:
        path = Path(path_option)
        if not path.exists():
            raise FileNotFoundError(f"no such file: {path}")
        return path
    return cfg.require_path(section, key)


def _preprocessed_corpus(corpus: Corpus, cfg: RunConfig) -> Corpus:
    preprocess = cfg.preprocess()
    rewritten = []
    for record in corpus:
        rewritten.append(
            dataclasses.replace(
                record,
                question_text=normalize_text(record.question_text, preprocess).text,
                answer_text=normalize_text(record.answer_text, preprocess).text,
                preceding_questions=tuple(
                    normalize_text(q, preprocess).text for q in record.preceding_questions
                ),
            )
        )
    return Corpus(rewritten)


def _record_to_json(record) -> str:
    obj = {
        "record_id": record.record_id,
        "question_text": record.question_text,
        "answer_text": record.answer_text,
        "field_type": record.field_type.value,
        "preceding_questions": list(record.preceding_questions),
        "expects_disease": record.expects_disease,
    }
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# ingest
# ---------------------------------------------------------------------------

@main.command()
@click.option("--config", "-c", "config_path", required=True, help="Run config INI file.")
@click.option("--records", "records_option", default=None, help="Override the record file path.")
def ingest(config_path: str, records_option: str | None) -> None:
    """Validate and persist the survey corpus; print record statistics."""

    def body() -> None:
        cfg = load_config(config_path)
        records_path = _resolve(records_option, cfg, "paths", "corpus")
        corpus = load_records(records_path, cfg.expects_keywords())
        out_dir = cfg.output_dir
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest("ingest", cfg, out_dir)
        manifest.add_input(records_path)
        manifest.write()
        corpus_out = out_dir / "corpus.jsonl"
        atomic_write_text(corpus_out, "\n".join(_record_to_json(r) for r in corpus) + "\n")
        manifest.add_output(corpus_out)
        manifest.write()
        click.echo(f"{len(corpus)} records")
        by_type: dict[str, int] = {}
        for record in corpus:
            by_type[record.field_type.value] = by_type.get(record.field_type.value, 0) + 1
        for field_type in sorted(by_type):
            click.echo(f"  {field_type}: {by_type[field_type]}")
        expected = sum(r.expects_disease for r in corpus)
        click.echo(f"  expects_disease: {expected} true / {len(corpus) - expected} false")

    _execute(body)


# ---------------------------------------------------------------------------
# annotate
# ---------------------------------------------------------------------------

def _load_mock_lexicon(path: Path) -> dict[str, ConceptId]:
    lexicon: dict[str, ConceptId] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            lexicon[obj["term"]] = ConceptId.parse(obj["concept_id"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"line {lineno}: bad lexicon entry: {exc}") from exc
    return lexicon


@main.command()
@click.option("--config", "-c", "config_path", required=True)
@click.option("--corpus", "corpus_option", default=None, help="Override the corpus file path.")
@click.option("--mock-lexicon", "mock_option", default=None,
              help="Use the deterministic mock backend with this lexicon file.")
@click.option("--endpoint", "endpoint_option", default=None, help="NER backend URL.")
@click.option("--out", "out_option", default=None, help="Predictions output path.")
def annotate(config_path: str, corpus_option: str | None, mock_option: str | None,
             endpoint_option: str | None, out_option: str | None) -> None:
    """Run the NER/NEN backend over the corpus and persist predictions."""

    def body() -> None:
        cfg = load_config(config_path)
        corpus_path = _resolve(corpus_option, cfg, "paths", "corpus")
        corpus = _preprocessed_corpus(load_records(corpus_path, cfg.expects_keywords()), cfg)
        mock_path = Path(mock_option) if mock_option else cfg.path("ner", "mock_lexicon")
        endpoint = endpoint_option or cfg.get("ner", "endpoint")
        if mock_path is not None:
            if not mock_path.exists():
                raise FileNotFoundError(f"mock lexicon not found: {mock_path}")
            backend = MockNerBackend(_load_mock_lexicon(mock_path))
        elif endpoint:
            backend = HttpNerBackend(endpoint, timeout_ms=cfg.get_int("ner", "timeout_ms", 30_000))
        else:
            raise ValidationError("no NER backend: set [ner] endpoint or --mock-lexicon")
        backend_config = BackendConfig(
            endpoint=endpoint or "",
            batch_size=cfg.get_int("ner", "batch_size", 16),
            max_inflight=cfg.get_int("ner", "max_inflight", 4),
            retry_budget=cfg.get_int("ner", "retry_budget", 2),
            timeout_ms=cfg.get_int("ner", "timeout_ms", 30_000),
        )
        out_dir = cfg.output_dir
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest("annotate", cfg, out_dir)
        manifest.add_input(corpus_path)
        manifest.write()
        outcomes = annotate_batch(corpus.records, backend, backend_config)
        predictions_path = Path(out_option) if out_option else out_dir / "predictions.jsonl"
        atomic_write_text(predictions_path, "\n".join(write_outcomes(outcomes)) + "\n")
        manifest.add_output(predictions_path)
        manifest.write()
        failures = sum(1 for o in outcomes if o.status == "failed")
        click.echo(f"{len(outcomes)} records annotated, {failures} failed")
        if outcomes and failures == len(outcomes):
            click.echo("error: backend failed for every record", err=True)
            sys.exit(EXIT_BACKEND)

    _execute(body)


# ---------------------------------------------------------------------------
# run (LLM verification strategies)
# ---------------------------------------------------------------------------

def _parse_flags(flags_option: str | None) -> tuple[bool, bool]:
    use_rag, use_fsi = True, True
    if flags_option:
        for part in flags_option.split(","):
            key, _, value = part.strip().partition("=")
            if key not in ("rag", "fsi") or value not in ("on", "off"):
                raise ValidationError(
                    f"bad --flags entry {part!r}: expected rag=on|off,fsi=on|off"
                )
            if key == "rag":
                use_rag = value == "on"
            else:
                use_fsi = value == "on"
    return use_rag, use_fsi


def _build_spec(cfg: RunConfig, strategy_option: str | None, k_option: int | None,
                retrieval_option: int | None, flags_option: str | None) -> PromptSpec:
    name = strategy_option or cfg.get("strategy", "name")
    if name is None or name not in _STRATEGY_NAMES:
        valid = ", ".join(sorted(_STRATEGY_NAMES))
        raise ValidationError(f"unknown strategy {name!r}; valid names: {valid}")
    strategy, cot_variant = _STRATEGY_NAMES[name]
    k = k_option if k_option is not None else cfg.get_int("strategy", "k", 5)
    retrieval_k = (
        retrieval_option if retrieval_option is not None
        else cfg.get_int("strategy", "retrieval_k", 3)
    )
    use_rag, use_fsi = True, True
    if strategy is Strategy.RAG_FSI_FLAGS:
        config_flags = cfg.get("strategy", "flags")
        use_rag, use_fsi = _parse_flags(flags_option or config_flags)
    if strategy is Strategy.RAG_FSI_FLAGS and use_fsi and k == 0:
        k = 5
    return PromptSpec(
        strategy=strategy,
        k=k,
        cot_variant=cot_variant,
        use_rag=use_rag,
        use_fsi=use_fsi,
        retrieval_k=retrieval_k,
    )


def _embedding_provider(cfg: RunConfig):
    label = cfg.get("embedding", "label", "default")
    endpoint = cfg.get("embedding", "endpoint")
    dimension = cfg.get_int("embedding", "dimension", 256)
    if endpoint:
        return RemoteEmbeddingProvider(label, endpoint, dimension)
    return HashedBagOfWordsProvider(dimension=dimension, name=label)


def _llm_backend(cfg: RunConfig, scripted_option: str | None):
    scripted = Path(scripted_option) if scripted_option else cfg.path("llm", "scripted")
    if scripted is not None:
        if not scripted.exists():
            raise FileNotFoundError(f"scripted LLM rule file not found: {scripted}")
        return ScriptedLlmBackend.from_file(scripted)
    endpoint = cfg.get("llm", "endpoint")
    if endpoint:
        return HttpLlmBackend(endpoint, timeout_ms=cfg.get_int("llm", "timeout_ms", 60_000))
    raise ValidationError("no LLM backend: set [llm] endpoint or [llm] scripted")


@main.command()
@click.option("--config", "-c", "config_path", required=True)
@click.option("--strategy", "strategy_option", default=None,
              help="zero-shot-cvc|zero-shot-cvm|few-shot|cot:VARIANT|rag-fsi|rag-fsi-flags")
@click.option("--k", "k_option", type=int, default=None, help="Few-shot count (0/1/2/3/5).")
@click.option("--retrieval-k", "retrieval_option", type=int, default=None)
@click.option("--flags", "flags_option", default=None, help="rag=on|off,fsi=on|off")
@click.option("--seed", "seed_option", type=int, default=None)
@click.option("--predictions", "predictions_option", default=None)
@click.option("--scripted-llm", "scripted_option", default=None)
@click.option("--dump-prompts", "dump_option", default=None,
              help="Also write every rendered prompt to this file.")
@click.option("--out", "out_option", default=None, help="Verdicts output path.")
def run(config_path: str, strategy_option: str | None, k_option: int | None,
        retrieval_option: int | None, flags_option: str | None, seed_option: int | None,
        predictions_option: str | None, scripted_option: str | None,
        dump_option: str | None, out_option: str | None) -> None:
    """Judge backend annotations with an LLM strategy; persist verdicts."""

    def body() -> None:
        cfg = load_config(config_path)
        spec = _build_spec(cfg, strategy_option, k_option, retrieval_option, flags_option)
        corpus_path = cfg.require_path("paths", "corpus")
        corpus = _preprocessed_corpus(load_records(corpus_path, cfg.expects_keywords()), cfg)
        predictions_path = _resolve(predictions_option, cfg, "eval", "predictions")
        outcomes = read_outcomes(
            predictions_path.read_text(encoding="utf-8").splitlines()
        )
        ontology_path = cfg.require_path("paths", "ontology")
        store = load_ontology(ontology_path)
        llm = _llm_backend(cfg, scripted_option)
        provider = _embedding_provider(cfg) if spec.rag_enabled else None
        example_pool = []
        if spec.fsi_enabled:
            pool_path = cfg.require_path("paths", "example_pool")
            example_pool = load_example_pool(pool_path)
        templates = None
        templates_dir = cfg.path("paths", "templates")
        if templates_dir is not None and templates_dir.exists():
            templates = TemplateRegistry(templates_dir)
        seed = derive_seed(seed_option if seed_option is not None else cfg.seed, "run")
        annotations = [
            ann for outcome in outcomes if outcome.status == "ok" for ann in outcome.annotations
        ]
        orphans = sorted({a.record_id for a in annotations if a.record_id not in corpus})
        if orphans:
            raise ValidationError(f"predictions reference records missing from corpus: {orphans}")
        out_dir = cfg.output_dir
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest("run", cfg, out_dir)
        for path in (corpus_path, predictions_path, ontology_path):
            manifest.add_input(path)
        manifest.write()
        dumped: list[str] = []
        sink = None
        if dump_option:
            def sink(annotation, prompt):  # noqa: E306
                dumped.append(json.dumps(
                    {
                        "record_id": annotation.record_id,
                        "span": [annotation.span.begin, annotation.span.end],
                        "prompt": prompt,
                    },
                    ensure_ascii=False, sort_keys=True, separators=(",", ":"),
                ))
        results = run_strategy(
            corpus, annotations, spec, llm, store,
            provider=provider,
            seed=seed,
            example_pool=example_pool,
            templates=templates,
            params=LlmParams(
                max_tokens=cfg.get_int("llm", "max_tokens", 256),
                temperature=cfg.get_float("llm", "temperature", 0.0),
            ),
            retry_budget=cfg.get_int("llm", "retry_budget", 1),
            max_inflight=cfg.get_int("llm", "max_inflight", 1),
            prompt_sink=sink,
        )
        verdicts_path = Path(out_option) if out_option else out_dir / "verdicts.jsonl"
        atomic_write_text(verdicts_path, "\n".join(write_verdicts(results)) + "\n")
        manifest.add_output(verdicts_path)
        if dump_option:
            prompts_path = Path(dump_option)
            atomic_write_text(prompts_path, "\n".join(dumped) + "\n")
            manifest.add_output(prompts_path)
        manifest.write()
        kinds: dict[str, int] = {}
        for _, verdict in results:
            kinds[verdict.kind.value] = kinds.get(verdict.kind.value, 0) + 1
        rate = hallucination_rate([v for _, v in results])
        click.echo(f"{len(results)} verdicts: " + ", ".join(
            f"{kind}={count}" for kind, count in sorted(kinds.items())
        ))
        click.echo(f"hallucination rate: {'NR' if rate is None else f'{rate:.3f}'}")

    _execute(body)


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _load_summaries(path: Path) -> list[tuple[str, str]]:
    pairs = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            pairs.append((obj["candidate"], obj["reference"]))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValidationError(f"line {lineno}: bad summary pair: {exc}") from exc
    return pairs


def _read_verdict_file(path: Path, texts):
    return read_verdicts(path.read_text(encoding="utf-8").splitlines(), texts)


def _bundle_from_plan(plan_path: Path, gold_set: AnnotationSet, gold_texts) -> ReportBundle:
    """Build tables 2-7 from a JSON plan of labeled verdict/summary files."""
    try:
        plan = json.loads(plan_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"bad report plan: {exc}") from exc
    base = plan_path.parent
    bundle = ReportBundle()

    def _path(entry: dict, key: str) -> Path:
        resolved = base / entry[key]
        if not resolved.exists():
            raise FileNotFoundError(f"report plan references missing file {resolved}")
        return resolved

    for entry in plan.get("zero_shot", []):
        verdicts, annotations = _read_verdict_file(_path(entry, "verdicts"), gold_texts)
        report = alignment_accuracy(verdicts, annotations, gold_set)
        bundle.zero_shot.append(ZeroShotRow(
            prompt_group=entry.get("group", ""),
            model=entry.get("model", ""),
            correct_rate=report.bern2_alignment_accuracy,
            hallucination_rate=hallucination_rate(verdicts),
        ))
    for entry in plan.get("finetuned", []):
        verdicts, annotations = _read_verdict_file(_path(entry, "verdicts"), gold_texts)
        bern2, gt = alignment_stats(verdicts, annotations, gold_set)
        bundle.finetuned.append(FinetunedRow(
            group=entry.get("group", ""), model=entry.get("model", ""), bern2=bern2, gt=gt,
        ))
    for entry in plan.get("rag_fsi", []):
        verdicts, annotations = _read_verdict_file(_path(entry, "verdicts"), gold_texts)
        report = alignment_accuracy(verdicts, annotations, gold_set)
        pairs = _load_summaries(_path(entry, "summaries"))
        bundle.rag_fsi.append(RagFsiRow(
            model=entry.get("model", ""),
            rouge1=mean_rouge(pairs, 1),
            coherence=mean_coherence(pairs, HashedBagOfWordsProvider()),
            bern2_alignment=report.bern2_alignment_accuracy,
            gt_alignment=report.gt_alignment_accuracy,
        ))
    for entry in plan.get("flags", []):
        verdicts, annotations = _read_verdict_file(_path(entry, "verdicts"), gold_texts)
        report = alignment_accuracy(verdicts, annotations, gold_set)
        bundle.flags.append(FlagsRow(
            model=entry.get("model", ""),
            bern2_alignment=report.bern2_alignment_accuracy,
            gt_alignment=report.gt_alignment_accuracy,
        ))
    for entry in plan.get("cot", []):
        verdicts, annotations = _read_verdict_file(_path(entry, "verdicts"), gold_texts)
        bern2_counts, _ = alignment_confusions(verdicts, annotations, gold_set)
        metrics = compute_metrics(bern2_counts)
        bundle.cot.append(CotRow(
            model=entry.get("model", ""),
            prompt=entry.get("prompt", ""),
            tpr=metrics.recall,
            fnr=metrics.fnr,
        ))
    for entry in plan.get("embeddings", []):
        label = entry.get("embedding", "default")
        if entry.get("endpoint"):
            provider = RemoteEmbeddingProvider(
                label, entry["endpoint"], int(entry.get("dimension", 256))
            )
        else:
            provider = HashedBagOfWordsProvider(name=label)
        pairs = _load_summaries(_path(entry, "summaries"))
        bundle.embeddings.append(EmbeddingRow(
            embedding=label,
            rouge1=mean_rouge(pairs, 1),
            coherence=mean_coherence(pairs, provider),
        ))
    return bundle


@main.command("eval")
@click.option("--config", "-c", "config_path", required=True)
@click.option("--predictions", "predictions_option", default=None)
@click.option("--gold", "gold_option", default=None)
@click.option("--verdicts", "verdicts_option", default=None)
@click.option("--report-plan", "plan_option", default=None)
@click.option("--tables", "tables_option", default="all")
@click.option("--out", "out_option", default=None, help="Report output directory.")
def eval_cmd(config_path: str, predictions_option: str | None, gold_option: str | None,
             verdicts_option: str | None, plan_option: str | None, tables_option: str,
             out_option: str | None) -> None:
    """Score predictions (and optional verdicts) against ground truth."""

    def body() -> None:
        if tables_option != "all":
            raise ValidationError(f"--tables accepts only 'all', got {tables_option!r}")
        cfg = load_config(config_path)
        predictions_path = _resolve(predictions_option, cfg, "eval", "predictions")
        gold_path = _resolve(gold_option, cfg, "paths", "gold")
        outcomes = read_outcomes(predictions_path.read_text(encoding="utf-8").splitlines())
        gold_set, gold_texts = import_doccano(
            gold_path.read_text(encoding="utf-8").splitlines()
        )
        universe = sorted(gold_texts)
        known = set(universe)
        missing = sorted(o.record_id for o in outcomes if o.record_id not in known)
        if missing:
            raise ValidationError(f"records missing from gold file: {missing}")
        for outcome in outcomes:
            if outcome.status == "ok" and gold_texts[outcome.record_id] != outcome.text:
                raise ValidationError(
                    f"record {outcome.record_id!r}: prediction text differs from gold text"
                )
        predicted = AnnotationSet(
            ann for o in outcomes if o.status == "ok" for ann in o.annotations
        )
        pairs, counts = match_mentions(predicted, gold_set, universe)
        metrics = compute_metrics(counts)
        concept_accuracy = match_concepts(pairs)
        out_dir = Path(out_option) if out_option else cfg.output_dir
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest("eval", cfg, out_dir)
        manifest.add_input(predictions_path)
        manifest.add_input(gold_path)
        manifest.write()
        bundle = ReportBundle(
            ner_nen=[NerNenRow("BERN2", metrics, concept_accuracy.accuracy, counts=counts)]
        )
        verdicts_path = (
            Path(verdicts_option) if verdicts_option else cfg.path("eval", "verdicts")
        )
        if verdicts_path is not None and verdicts_path.exists():
            verdicts, annotations = _read_verdict_file(verdicts_path, gold_texts)
            if verdicts:
                report = alignment_accuracy(verdicts, annotations, gold_set)
                manifest.add_input(verdicts_path)
                rate = hallucination_rate(verdicts)
                click.echo(
                    f"verdicts: BERN2 alignment {report.bern2_alignment_accuracy:.3f}, "
                    f"GT alignment {report.gt_alignment_accuracy:.3f}, "
                    f"hallucination rate {'NR' if rate is None else f'{rate:.3f}'}"
                )
        plan_path = Path(plan_option) if plan_option else cfg.path("eval", "report_plan")
        if plan_path is not None and plan_path.exists():
            planned = _bundle_from_plan(plan_path, gold_set, gold_texts)
            planned.ner_nen = bundle.ner_nen
            bundle = planned
        paths = render_report(bundle, out_dir)
        for path in paths.values():
            manifest.add_output(path)
        manifest.write()

        def fmt(value):
            return "NR" if value is None else f"{value:.3f}"

        click.echo(
            f"mentions: tp={counts.tp} fp={counts.fp} fn={counts.fn} tn={counts.tn}"
        )
        click.echo(
            f"precision {fmt(metrics.precision)} recall {fmt(metrics.recall)} "
            f"F1 {fmt(metrics.f1)} accuracy {fmt(metrics.accuracy)}"
        )
        click.echo(f"concept accuracy (NEN): {fmt(concept_accuracy.accuracy)}")
        click.echo(f"report: {paths['report']}")

    _execute(body)


# ---------------------------------------------------------------------------
# raft
# ---------------------------------------------------------------------------

@main.command()
@click.option("--config", "-c", "config_path", required=True)
@click.option("--questions", "questions_option", default=None)
@click.option("--n-distractors", "n_option", type=int, default=None)
@click.option("--seed", "seed_option", type=int, default=None)
@click.option("--out", "out_option", default=None)
def raft(config_path: str, questions_option: str | None, n_option: int | None,
         seed_option: int | None, out_option: str | None) -> None:
    """Build a RAFT fine-tuning dataset from question/concept pairs."""

    def body() -> None:
        cfg = load_config(config_path)
        n_distractors = n_option if n_option is not None else cfg.get_int("raft", "n_distractors", 3)
        if n_distractors < 1:
            raise ValidationError(
                "usage: --n-distractors must be >= 1 (each datapoint needs distractors)"
            )
        ontology_path = cfg.require_path("paths", "ontology")
        store = load_ontology(ontology_path)
        questions_path = _resolve(questions_option, cfg, "raft", "questions")
        questions = []
        for lineno, line in enumerate(
            questions_path.read_text(encoding="utf-8").splitlines(), 1
        ):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                questions.append((obj["question"], ConceptId.parse(obj["concept_id"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"line {lineno}: bad question record: {exc}") from exc
        seed = derive_seed(seed_option if seed_option is not None else cfg.seed, "raft")
        provider = _embedding_provider(cfg)
        datapoints = build_raft_dataset(
            store, questions, n_distractors, seed, provider=provider
        )
        for point in datapoints:  # invariant recheck before anything is written
            distractor_ids = {d.concept_id for d in point.distractor_docs}
            if point.oracle_doc.concept_id in distractor_ids or len(
                distractor_ids
            ) != n_distractors:
                raise ValidationError("internal defect: RAFT invariants violated")
        out_dir = cfg.output_dir
        out_dir.mkdir(parents=True, exist_ok=True)
        manifest = RunManifest("raft", cfg, out_dir)
        manifest.add_input(ontology_path)
        manifest.add_input(questions_path)
        manifest.write()
        raft_path = Path(out_option) if out_option else out_dir / "raft.jsonl"
        atomic_write_text(raft_path, "\n".join(raft_to_jsonl(datapoints)) + "\n")
        manifest.add_output(raft_path)
        manifest.write()
        click.echo(f"{len(datapoints)} RAFT datapoints with {n_distractors} distractors each")

    _execute(body)


if __name__ == "__main__":
    main()
