"""MeSH-style disease ontology store with retrieval support.

Loads concepts from line-delimited JSON, renders each one into a fixed
retrieval document, embeds documents with pluggable providers, and serves
exact-term and exhaustive top-k cosine lookup. The built-in fallback
provider is a hashed bag of words: fully deterministic, no model downloads.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Protocol

import numpy as np

from .corpus import ConceptId
from .errors import BackendError, ValidationError

__all__ = [
    "OntologyConcept",
    "RagDocument",
    "OntologyStore",
    "load_ontology",
    "build_rag_document",
    "EmbeddingProvider",
    "HashedBagOfWordsProvider",
    "RemoteEmbeddingProvider",
    "embed",
    "cosine",
    "OntologyIndex",
    "stem_token",
    "tokenize",
]


@dataclass(frozen=True)
class OntologyConcept:
    """One disease concept: id, preferred name, description, synonyms."""

    concept_id: ConceptId
    preferred_name: str
    description: str = ""
    synonyms: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.concept_id.is_none:
            raise ValueError("ontology concepts need a real concept id")
        if not self.preferred_name:
            raise ValueError(f"{self.concept_id}: preferred_name must be non-empty")


@dataclass(frozen=True)
class RagDocument:
    """The rendered retrieval document for one concept."""

    concept_id: ConceptId
    body: str


def build_rag_document(concept: OntologyConcept) -> RagDocument:
    """Render the canonical four-field retrieval document for a concept."""
    synonyms = "; ".join(concept.synonyms) if concept.synonyms else "(none)"
    body = (
        f"NAME: {concept.preferred_name}\n"
        f"ID: {concept.concept_id.render()}\n"
        f"DESCRIPTION: {concept.description}\n"
        f"SYNONYMS: {synonyms}"
    )
    return RagDocument(concept_id=concept.concept_id, body=body)


class OntologyStore:
    """Immutable set of unique concepts with a case-folded synonym index."""

    def __init__(self, concepts: Iterable[OntologyConcept]):
        self._by_id: dict[ConceptId, OntologyConcept] = {}
        term_index: dict[str, set[ConceptId]] = {}
        for concept in concepts:
            if concept.concept_id in self._by_id:
                raise ValidationError(f"duplicate concept_id {concept.concept_id}")
            self._by_id[concept.concept_id] = concept
            for term in (concept.preferred_name, *concept.synonyms):
                term_index.setdefault(term.strip().lower(), set()).add(concept.concept_id)
        self._term_index = {term: tuple(sorted(ids, key=lambda c: c.render()))
                            for term, ids in term_index.items()}

    def __len__(self) -> int:
        return len(self._by_id)

    def __contains__(self, concept_id: ConceptId) -> bool:
        return concept_id in self._by_id

    def get(self, concept_id: ConceptId) -> OntologyConcept:
        try:
            return self._by_id[concept_id]
        except KeyError:
            raise KeyError(f"unknown concept {concept_id}") from None

    def concepts(self) -> list[OntologyConcept]:
        """All concepts, ascending by canonical id rendering."""
        return [self._by_id[cid] for cid in sorted(self._by_id, key=lambda c: c.render())]

    def lookup_exact(self, term: str) -> list[OntologyConcept]:
        """Concepts whose preferred name or any synonym equals ``term``,
        case-insensitively after whitespace trim; ascending id order."""
        ids = self._term_index.get(term.strip().lower(), ())
        return [self._by_id[cid] for cid in ids]


def load_ontology(source: str | Path | Iterable[str]) -> OntologyStore:
    """Load an ontology from line-delimited JSON concept objects.

    Each line: {"concept_id": "mesh:D...", "preferred_name": ...,
    "description": ..., "synonyms": [...]}.
    """
    if isinstance(source, (str, Path)):
        lines: Iterable[str] = Path(source).read_text(encoding="utf-8").splitlines()
    else:
        lines = source
    concepts = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"line {lineno}: malformed concept: {exc.msg}") from exc
        try:
            concept = OntologyConcept(
                concept_id=ConceptId.parse(str(obj["concept_id"])),
                preferred_name=str(obj.get("preferred_name") or ""),
                description=str(obj.get("description", "")),
                synonyms=tuple(str(s) for s in obj.get("synonyms", [])),
            )
        except KeyError as exc:
            raise ValidationError(f"line {lineno}: missing key {exc.args[0]!r}") from exc
        except ValueError as exc:
            raise ValidationError(f"line {lineno}: {exc}") from exc
        concepts.append(concept)
    return OntologyStore(concepts)


# ---------------------------------------------------------------------------
# Embeddings
# ---------------------------------------------------------------------------

_SUFFIX_RULES: tuple[tuple[str, str, int], ...] = (
    # (suffix, replacement, minimum stem length after stripping)
    ("sses", "ss", 2),
    ("ies", "y", 2),
    ("ing", "", 3),
    ("ed", "", 3),
    ("es", "", 3),
    ("s", "", 3),
)


def stem_token(token: str) -> str:
    """Crude suffix-stripping stemmer, applied identically at index and
    query time; it only has to be consistent, not linguistically right."""
    if token.endswith("ss"):
        return token
    for suffix, replacement, min_stem in _SUFFIX_RULES:
        if token.endswith(suffix) and len(token) - len(suffix) >= min_stem:
            return token[: -len(suffix)] + replacement
    return token


def tokenize(text: str) -> list[str]:
    return [stem_token(t) for t in re.findall(r"\w+", text.lower())]


class EmbeddingProvider(Protocol):
    """Deterministic text-to-unit-vector provider."""

    name: str
    dimension: int

    def embed(self, text: str) -> np.ndarray: ...


def _bucket(token: str, dimension: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "big") % dimension


class HashedBagOfWordsProvider:
    """Fallback provider: stemmed tokens hashed into fixed buckets, counts
    L2-normalized. Seedless and stable across processes."""

    def __init__(self, dimension: int = 256, name: str = "default"):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.name = name
        self.dimension = dimension

    def embed(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            raise ValidationError("cannot embed empty or whitespace-only text")
        vector = np.zeros(self.dimension, dtype=np.float64)
        for token in tokens:
            vector[_bucket(token, self.dimension)] += 1.0
        return vector / np.linalg.norm(vector)


class RemoteEmbeddingProvider:
    """Provider backed by an HTTP endpoint speaking the embedding wire:
    request {"texts": [...]} -> response {"vectors": [[...], ...]}."""

    def __init__(
        self,
        name: str,
        endpoint: str,
        dimension: int,
        transport: Callable[[str, dict], dict] | None = None,
        timeout_ms: int = 30_000,
    ):
        self.name = name
        self.endpoint = endpoint
        self.dimension = dimension
        self._timeout_ms = timeout_ms
        self._transport = transport or _default_transport

    def embed(self, text: str) -> np.ndarray:
        if not text.strip():
            raise ValidationError("cannot embed empty or whitespace-only text")
        try:
            response = self._transport(self.endpoint, {"texts": [text]})
            vectors = response["vectors"]
            raw = np.asarray(vectors[0], dtype=np.float64)
        except Exception as exc:
            raise BackendError(f"embedding provider {self.name!r} failed: {exc}") from exc
        if raw.shape != (self.dimension,):
            raise BackendError(
                f"embedding provider {self.name!r} returned shape {raw.shape}, "
                f"expected ({self.dimension},)"
            )
        norm = np.linalg.norm(raw)
        if norm == 0:
            raise BackendError(f"embedding provider {self.name!r} returned a zero vector")
        return raw / norm


def _default_transport(url: str, payload: dict) -> dict:
    import os

    import requests

    token = os.environ.get("PHENOTAG_EMBED_TOKEN")
    headers = {"Authorization": f"Bearer {token}"} if token else {}
    response = requests.post(url, json=payload, timeout=30, headers=headers)
    response.raise_for_status()
    return response.json()


def embed(text: str, provider: EmbeddingProvider) -> np.ndarray:
    """Embed ``text`` into a unit vector via ``provider``."""
    return provider.embed(text)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity; the plain dot product for unit vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    denom = np.linalg.norm(u) * np.linalg.norm(v)
    if denom == 0:
        raise ValueError("cosine undefined for zero vectors")
    return float(np.dot(u, v) / denom)


class OntologyIndex:
    """Exhaustive-scan vector index over a store's retrieval documents.

    Immutable after build; rebuilding from the same store and provider
    yields identical vectors. Exhaustive scan is deliberate: at the
    disease-subset scale nothing fancier pays for itself.
    """

    def __init__(self, store: OntologyStore, provider: EmbeddingProvider):
        self.store = store
        self.provider = provider
        self._concept_ids: list[ConceptId] = []
        rows = []
        for concept in store.concepts():
            document = build_rag_document(concept)
            rows.append(provider.embed(document.body))
            self._concept_ids.append(concept.concept_id)
        self._matrix = np.vstack(rows) if rows else np.zeros((0, provider.dimension))

    def vector_for(self, concept_id: ConceptId) -> np.ndarray:
        return self._matrix[self._concept_ids.index(concept_id)].copy()

    def top_k(self, query_text: str, k: int) -> list[tuple[ConceptId, float]]:
        """Concepts ranked by descending cosine against the query embedding;
        ties broken by ascending concept id; at most ``k`` results."""
        if k <= 0:
            raise ValidationError(f"k must be positive, got {k}")
        if not query_text.strip():
            raise ValidationError("empty retrieval query")
        query = self.provider.embed(query_text)
        scores = self._matrix @ query
        ranked = sorted(
            zip(self._concept_ids, scores.tolist()),
            key=lambda pair: (-pair[1], pair[0].render()),
        )
        return ranked[:k]
