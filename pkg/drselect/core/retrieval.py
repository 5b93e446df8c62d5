"""Uniform search over retriever backends.

Three backends answer ``search(query, top_k)``:

    RunFileBackend - precomputed TREC run, answers only the queries it holds
    HttpBackend    - remote search service, ``POST {base_url}/search``
    LexicalBackend - in-process TF-IDF cosine retriever over the corpus,
                     optionally with deterministic Gaussian score noise

The lexical retriever exists to make the pipeline testable end-to-end
without a neural model.
"""
from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from sklearn.feature_extraction.text import CountVectorizer
from sklearn.preprocessing import normalize

from drselect.core.data_model import (BackendSpec, Corpus, DrPool, Query,
                                      Run, parse_run)
from drselect.core.errors import (DrSelectError, MissingQuery,
                                  ValidationError)
from drselect.core.http_client import JsonPoster, timeout_ms_from_env
from drselect.processing import config

logger = logging.getLogger(__name__)

# Lowercase runs of letters/digits; everything else separates tokens.
TOKEN_PATTERN = r"(?u)[^\W_]+"

_analyzer = CountVectorizer(lowercase=True,
                            token_pattern=TOKEN_PATTERN).build_analyzer()


def tokenize(text: str) -> list[str]:
    """Lowercase, split on non-alphanumerics; no stemming, no stopwords."""
    return _analyzer(text)


@dataclass(frozen=True)
class ScoredList:
    """Result of one search: (doc_id, score) pairs, best first."""

    query_id: str
    results: tuple[tuple[str, float], ...]
    depth: int

    @property
    def doc_ids(self) -> list[str]:
        return [doc_id for doc_id, _ in self.results]


def _ranked(query_id, pairs, top_k) -> ScoredList:
    """Sort pairs by score descending, doc_id ascending, drop repeats."""
    seen = set()
    unique = []
    for doc_id, score in pairs:
        if doc_id not in seen:
            seen.add(doc_id)
            unique.append((doc_id, float(score)))
    unique.sort(key=lambda p: (-p[1], p[0]))
    return ScoredList(query_id, tuple(unique[:top_k]), top_k)


class LexicalIndex:
    """TF-IDF index over a corpus with idf = ln(1 + N/df).

    Document vectors are raw term counts times idf, L2-normalized, so a
    dot product with a normalized query vector is the cosine similarity.
    """

    def __init__(self, corpus: Corpus):
        self.corpus = corpus
        self.vectorizer = CountVectorizer(lowercase=True,
                                          token_pattern=TOKEN_PATTERN)
        try:
            self.counts = self.vectorizer.fit_transform(
                [doc.full_text for doc in corpus]).tocsr()
        except ValueError as e:
            raise ValidationError(f"cannot index corpus: {e}") from None
        self.vocabulary = self.vectorizer.vocabulary_
        n_docs = self.counts.shape[0]
        self.df = np.asarray((self.counts > 0).sum(axis=0)).ravel()
        self.idf = np.log1p(n_docs / self.df)
        self._idf_diag = sp.diags(self.idf)
        self.doc_vectors = normalize(self.counts @ self._idf_diag).tocsr()
        # position of every document when sorted by doc_id, for tie-breaks
        order = sorted(range(n_docs), key=lambda i: corpus.docs[i].doc_id)
        self.id_order = np.empty(n_docs, dtype=np.int64)
        self.id_order[order] = np.arange(n_docs)

    def document_frequency(self, term: str) -> int:
        column = self.vocabulary.get(term)
        return 0 if column is None else int(self.df[column])

    def term_counts(self, doc_id: str) -> dict[str, int]:
        row = self.counts[self.corpus.position(doc_id)]
        terms = self.vectorizer.get_feature_names_out()
        return {terms[j]: int(c) for j, c in zip(row.indices, row.data)}

    def cosine(self, text: str) -> np.ndarray:
        """Cosine similarity of ``text`` to every document, corpus order."""
        query = normalize(self.vectorizer.transform([text]) @ self._idf_diag)
        return (self.doc_vectors @ query.T).toarray().ravel()

    def top(self, scores: np.ndarray, candidates: np.ndarray,
            top_k: int) -> list[tuple[str, float]]:
        """Best ``top_k`` of ``candidates`` by score, ties by doc_id."""
        order = np.lexsort((self.id_order[candidates], -scores[candidates]))
        chosen = candidates[order[:top_k]]
        return [(self.corpus.docs[i].doc_id, float(scores[i]))
                for i in chosen]


class RunFileBackend:
    """Replays a precomputed run."""

    live = False

    def __init__(self, run: Run):
        self.run = run

    def search(self, query: Query, top_k: int) -> ScoredList:
        if query.query_id not in self.run.entries:
            raise MissingQuery(self.run.dr_id, query.query_id)
        entries = self.run.entries[query.query_id][:top_k]
        return ScoredList(query.query_id,
                          tuple((e.doc_id, e.score) for e in entries), top_k)


class HttpBackend:
    """Remote search service speaking the drselect search contract.

    ``POST {base_url}/search`` with ``{"query_id", "text", "top_k"}``,
    answered by ``{"results": [{"doc_id", "score"}, ...]}``.
    """

    live = True

    def __init__(self, base_url, timeout_ms=None,
                 max_retries=config.http_max_retries,
                 max_in_flight=config.http_max_in_flight, session=None,
                 sleep=None):
        kwargs = {} if sleep is None else {"sleep": sleep}
        self.poster = JsonPoster(base_url.rstrip("/") + "/search",
                                 timeout_ms=timeout_ms_from_env(timeout_ms),
                                 max_retries=max_retries,
                                 max_in_flight=max_in_flight,
                                 session=session, **kwargs)

    def search(self, query: Query, top_k: int) -> ScoredList:
        body = self.poster.post({"query_id": query.query_id,
                                 "text": query.text, "top_k": top_k})
        try:
            pairs = [(str(r["doc_id"]), float(r["score"]))
                     for r in body["results"]]
        except (KeyError, TypeError, ValueError):
            raise DrSelectError(
                f"malformed search response for '{query.query_id}'") from None
        return _ranked(query.query_id, pairs, top_k)


class LexicalBackend:
    """TF-IDF cosine retriever, optionally with additive Gaussian noise.

    With ``noise`` = sigma > 0 every document of the corpus gets score
    cosine + N(0, sigma^2); the noise vector is drawn from a generator seeded
    by a hash of (noise_seed, query text), so it is reproducible. Without
    noise only documents sharing a term with the query are returned.
    """

    live = True

    def __init__(self, index: LexicalIndex, noise: float = 0.0,
                 noise_seed: int = 0):
        if noise < 0:
            raise ValidationError("noise must be non-negative")
        self.index = index
        self.noise = float(noise)
        self.noise_seed = int(noise_seed)

    def _noise(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(
            f"{self.noise_seed}\x00{text}".encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return rng.normal(0.0, self.noise, size=len(self.index.corpus))

    def search(self, query: Query, top_k: int) -> ScoredList:
        scores = self.index.cosine(query.text)
        if self.noise > 0:
            scores = scores + self._noise(query.text)
            candidates = np.arange(len(scores))
        else:
            candidates = np.flatnonzero(scores > 0)
        return ScoredList(query.query_id,
                          tuple(self.index.top(scores, candidates, top_k)),
                          top_k)


def search(backend, query: Query, top_k: int) -> ScoredList:
    """Search one query; ``top_k`` must be at least 1."""
    if top_k < 1:
        raise ValidationError("top_k must be >= 1")
    return backend.search(query, top_k)


class BatchResults(dict):
    """query_id -> ScoredList, plus the per-query errors that were skipped."""

    def __init__(self, results, errors):
        super().__init__(results)
        self.errors = errors


def batch_search(backend, queries: Sequence[Query], top_k: int,
                 workers: int | None = None) -> BatchResults:
    """Search every query; fails only if every single query failed."""
    if not queries:
        raise ValidationError("batch_search needs at least one query")

    def one(query):
        try:
            return query.query_id, search(backend, query, top_k), None
        except DrSelectError as e:
            return query.query_id, None, e

    with ThreadPoolExecutor(max_workers=workers) as pool:
        outcomes = list(pool.map(one, queries))
    results = {q: r for q, r, e in outcomes if e is None}
    errors = {q: e for q, r, e in outcomes if e is not None}
    if not results:
        raise next(iter(errors.values()))
    if errors:
        logger.warning("queries failed in batch",
                       extra={"failed": len(errors), "total": len(queries)})
    return BatchResults(results, errors)


def alter_query(query: Query, num_variants: int, seed: int) -> list[Query]:
    """
    Perturb a query by deleting one token at a time.

    Tokens are deleted round-robin by position starting at
    ``seed mod token_count``; at most token_count variants are produced.
    Single-token queries come back unchanged.
    """
    tokens = query.text.split()
    if not tokens:
        raise ValidationError(f"query '{query.query_id}' is empty")
    if num_variants < 1:
        raise ValidationError("num_variants must be >= 1")
    if len(tokens) == 1:
        return [query]
    start = seed % len(tokens)
    variants = []
    for i in range(min(num_variants, len(tokens))):
        drop = (start + i) % len(tokens)
        text = " ".join(t for j, t in enumerate(tokens) if j != drop)
        variants.append(Query(f"{query.query_id}#alt{i + 1}", text,
                              query.source_doc_id))
    return variants


def build_backend(dr_id: str, spec: BackendSpec, corpus: Corpus | None = None,
                  index: LexicalIndex | None = None):
    """Instantiate the backend a pool manifest entry describes."""
    if spec.kind == "run_file":
        with open(spec.path_or_url, encoding="utf-8") as f:
            return RunFileBackend(parse_run(f, dr_id=dr_id))
    if spec.kind == "http":
        return HttpBackend(
            spec.path_or_url,
            timeout_ms=spec.options.get("timeout_ms"),
            max_retries=spec.options.get("max_retries",
                                         config.http_max_retries),
            max_in_flight=spec.options.get("max_in_flight",
                                           config.http_max_in_flight))
    if spec.kind == "lexical":
        if index is None:
            if corpus is None:
                raise ValidationError(
                    f"lexical retriever '{dr_id}' needs the corpus")
            index = LexicalIndex(corpus)
        return LexicalBackend(index, noise=spec.options.get("noise", 0.0),
                              noise_seed=spec.options.get("noise_seed", 0))
    raise ValidationError(f"unknown backend '{spec.kind}'")


def build_backends(pool: DrPool, corpus: Corpus | None = None) -> dict:
    """dr_id -> backend; lexical backends share one index."""
    index = None
    backends = {}
    for dr_id, spec in pool.retrievers:
        if spec.kind == "lexical" and index is None and corpus is not None:
            index = LexicalIndex(corpus)
        backends[dr_id] = build_backend(dr_id, spec, corpus, index)
    return backends


def run_from_results(dr_id: str, results: Iterable[ScoredList]) -> Run:
    return Run.from_scores(dr_id, {r.query_id: r.results for r in results})
