"""Canonical types and file I/O for corpora, queries, runs, qrels, pools,
and dense retriever rankings.

File formats:
    run      - ``qid Q0 docid rank score runtag`` per line (TREC)
    qrels    - ``qid 0 docid grade`` per line
    corpus   - JSONL with ``_id``, ``title``, ``text`` (BEIR layout)
    queries  - JSONL with ``_id``, ``text`` and optional ``source_doc_id``
    pool     - JSON array of ``{"dr_id", "backend", "path_or_url", ...}``
    ranking  - JSON array of ``{"dr_id", "score", "rank"}``
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple

import numpy as np

from drselect.core.errors import ParseError, ValidationError

logger = logging.getLogger(__name__)

BACKEND_KINDS = ("run_file", "http", "lexical")


def _lines(source):
    """Iterate over the lines of a string or a text stream."""
    if isinstance(source, str):
        return source.splitlines()
    return source


@dataclass(frozen=True)
class Document:
    """A document of the target corpus."""

    doc_id: str
    title: str
    text: str

    @property
    def full_text(self) -> str:
        """Title and text joined, as the LLM and the lexical index see it."""
        if self.title:
            return f"{self.title} {self.text}"
        return self.text


class Corpus:
    """Ordered, duplicate-free collection of documents held in memory."""

    def __init__(self, docs: Iterable[Document], name: str = ""):
        self.name = name
        self.docs = tuple(docs)
        self._index = {}
        for position, doc in enumerate(self.docs):
            if not doc.doc_id:
                raise ValidationError("empty doc_id")
            if doc.doc_id in self._index:
                raise ValidationError(f"duplicate doc_id '{doc.doc_id}'")
            if not doc.text.strip():
                raise ValidationError(f"document '{doc.doc_id}' has no text")
            self._index[doc.doc_id] = position

    def __len__(self):
        return len(self.docs)

    def __iter__(self):
        return iter(self.docs)

    def __contains__(self, doc_id):
        return doc_id in self._index

    def __getitem__(self, doc_id: str) -> Document:
        return self.docs[self._index[doc_id]]

    def position(self, doc_id: str) -> int:
        """Insertion position of a document."""
        return self._index[doc_id]

    @property
    def doc_ids(self) -> list[str]:
        return [doc.doc_id for doc in self.docs]


@dataclass(frozen=True)
class Query:
    """A real or generated query; generated ones link to their source."""

    query_id: str
    text: str
    source_doc_id: str | None = None


class RunEntry(NamedTuple):
    doc_id: str
    score: float
    rank: int


@dataclass(frozen=True)
class Run:
    """Ranked document lists of one retriever, keyed by query id.

    Lists are always normalized: scores non-increasing, ties broken by
    doc_id ascending, ranks 1..n.
    """

    dr_id: str
    entries: Mapping[str, tuple[RunEntry, ...]] = field(default_factory=dict)

    @classmethod
    def from_scores(cls, dr_id: str,
                    scored: Mapping[str, Iterable[tuple[str, float]]]) -> Run:
        """Build a normalized run from unsorted ``(doc_id, score)`` lists."""
        entries = {}
        for query_id, pairs in scored.items():
            pairs = list(pairs)
            seen = set()
            for doc_id, _ in pairs:
                if doc_id in seen:
                    raise ValidationError(
                        f"duplicate document '{doc_id}' for query "
                        f"'{query_id}' in run '{dr_id}'")
                seen.add(doc_id)
            ordered = sorted(pairs, key=lambda p: (-p[1], p[0]))
            entries[query_id] = tuple(
                RunEntry(doc_id, float(score), rank)
                for rank, (doc_id, score) in enumerate(ordered, start=1))
        return cls(dr_id, entries)

    @property
    def query_ids(self) -> list[str]:
        return list(self.entries)

    @property
    def depth(self) -> int:
        """Longest list in the run."""
        return max((len(v) for v in self.entries.values()), default=0)

    def doc_ids(self, query_id: str) -> list[str]:
        return [e.doc_id for e in self.entries.get(query_id, ())]

    def scores(self, query_id: str) -> np.ndarray:
        return np.array([e.score for e in self.entries.get(query_id, ())],
                        dtype=float)

    def with_scores(self, transform) -> Run:
        """Copy of this run with every score mapped through ``transform``.

        The transform must preserve order; ranks are kept as they are.
        """
        return Run(self.dr_id, {
            q: tuple(RunEntry(e.doc_id, float(transform(e.score)), e.rank)
                     for e in entries)
            for q, entries in self.entries.items()})


def parse_run(source, dr_id: str | None = None) -> Run:
    """
    Parse a TREC run.

    Parameters
    ----------
    source : str or iterable of str
        Run text or open text stream.
    dr_id : str, optional
        Retriever id; defaults to the runtag of the first line.

    Returns
    -------
    Run
        Normalized run (re-sorted by score, ties by doc_id, ranks 1..n).
    """
    scored = {}
    for line_no, line in enumerate(_lines(source), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 6:
            raise ParseError(f"expected 6 fields, got {len(parts)}", line_no)
        query_id, _, doc_id, rank, score, tag = parts
        try:
            int(rank)
            score = float(score)
        except ValueError:
            raise ParseError(f"bad rank or score in '{line.strip()}'",
                             line_no) from None
        if not math.isfinite(score):
            raise ParseError("score is not finite", line_no)
        if dr_id is None:
            dr_id = tag
        docs = scored.setdefault(query_id, {})
        if doc_id in docs:
            raise ValidationError(
                f"line {line_no}: duplicate document '{doc_id}' for query "
                f"'{query_id}'")
        docs[doc_id] = score
    return Run.from_scores(dr_id or "",
                           {q: docs.items() for q, docs in scored.items()})


def write_run(run: Run, tag: str | None = None) -> str:
    """Serialize a run in TREC format with shortest round-trip scores."""
    tag = tag or run.dr_id
    lines = []
    for query_id, entries in run.entries.items():
        for entry in entries:
            lines.append(f"{query_id} Q0 {entry.doc_id} {entry.rank} "
                         f"{entry.score!r} {tag}")
    return "".join(line + "\n" for line in lines)


class Qrels:
    """Graded relevance judgments, ground truth or pseudo.

    Attributes
    ----------
    judgments : dict
        query_id -> {doc_id: grade}.
    duplicates : int
        Number of input lines that overwrote an earlier judgment.
    """

    def __init__(self, judgments: Mapping[str, Mapping[str, int]] = None,
                 duplicates: int = 0):
        self.judgments = {q: dict(docs) for q, docs in (judgments or {}).items()}
        for query_id, docs in self.judgments.items():
            for doc_id, grade in docs.items():
                if grade < 0:
                    raise ValidationError(
                        f"negative grade for ({query_id}, {doc_id})")
        self.duplicates = duplicates

    def __eq__(self, other):
        return isinstance(other, Qrels) and self.judgments == other.judgments

    def __getitem__(self, key: tuple[str, str]) -> int:
        query_id, doc_id = key
        return self.judgments[query_id][doc_id]

    def __len__(self):
        return sum(len(docs) for docs in self.judgments.values())

    @property
    def query_ids(self) -> list[str]:
        return list(self.judgments)

    def for_query(self, query_id: str) -> dict[str, int]:
        return self.judgments.get(query_id, {})

    def relevant(self, query_id: str) -> set[str]:
        return {d for d, g in self.for_query(query_id).items() if g > 0}


def parse_qrels(source) -> Qrels:
    """Parse ``qid 0 docid grade`` lines; later duplicates win."""
    judgments = {}
    duplicates = 0
    for line_no, line in enumerate(_lines(source), start=1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 4:
            raise ParseError(f"expected 4 fields, got {len(parts)}", line_no)
        query_id, _, doc_id, grade = parts
        try:
            grade = int(grade)
        except ValueError:
            raise ParseError(f"grade '{grade}' is not an integer",
                             line_no) from None
        docs = judgments.setdefault(query_id, {})
        if doc_id in docs:
            duplicates += 1
        docs[doc_id] = grade
    if duplicates:
        logger.warning("duplicate qrels lines overwritten",
                       extra={"duplicates": duplicates})
    return Qrels(judgments, duplicates=duplicates)


def write_qrels(qrels: Qrels) -> str:
    return "".join(f"{q} 0 {d} {g}\n"
                   for q, docs in qrels.judgments.items()
                   for d, g in docs.items())


def load_corpus(source, name: str = "") -> Corpus:
    """Read a BEIR-style JSONL corpus, preserving file order."""
    docs = []
    seen = set()
    for line_no, line in enumerate(_lines(source), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON: {e.msg}", line_no) from None
        if not isinstance(record, dict) or "_id" not in record \
                or "text" not in record:
            raise ParseError("record needs '_id' and 'text'", line_no)
        text, title = record["text"], record.get("title") or ""
        if not isinstance(text, str) or not isinstance(title, str):
            raise ParseError("'text' and 'title' must be strings", line_no)
        if not text.strip():
            raise ParseError("blank 'text'", line_no)
        doc_id = str(record["_id"])
        if doc_id in seen:
            raise ValidationError(f"line {line_no}: duplicate _id '{doc_id}'")
        seen.add(doc_id)
        docs.append(Document(doc_id, title, text))
    return Corpus(docs, name=name)


def sample_documents(corpus: Corpus, k: int, seed: int) -> list[Document]:
    """Draw k distinct documents uniformly without replacement."""
    if not 1 <= k <= len(corpus):
        raise ValidationError(
            f"cannot sample {k} documents from a corpus of {len(corpus)}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(corpus), size=k, replace=False)
    return [corpus.docs[i] for i in chosen]


def load_queries(source) -> list[Query]:
    """Read queries from JSONL (``_id``, ``text``, optional source)."""
    queries = []
    seen = set()
    for line_no, line in enumerate(_lines(source), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON: {e.msg}", line_no) from None
        if "_id" not in record or "text" not in record:
            raise ParseError("record needs '_id' and 'text'", line_no)
        query_id = str(record["_id"])
        if query_id in seen:
            raise ValidationError(
                f"line {line_no}: duplicate query id '{query_id}'")
        seen.add(query_id)
        queries.append(Query(query_id, record["text"],
                             record.get("source_doc_id")))
    return queries


def write_queries(queries: Iterable[Query]) -> str:
    lines = []
    for query in queries:
        record = {"_id": query.query_id, "text": query.text}
        if query.source_doc_id is not None:
            record["source_doc_id"] = query.source_doc_id
        lines.append(json.dumps(record, ensure_ascii=False))
    return "".join(line + "\n" for line in lines)


@dataclass(frozen=True)
class BackendSpec:
    """How to reach one retriever: kind plus location and options."""

    kind: str
    path_or_url: str = ""
    options: Mapping[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class DrPool:
    """The candidate dense retrievers R = {R_1..R_n}."""

    retrievers: tuple[tuple[str, BackendSpec], ...]

    def __post_init__(self):
        ids = [dr_id for dr_id, _ in self.retrievers]
        duplicates = sorted({i for i in ids if ids.count(i) > 1})
        if duplicates:
            raise ValidationError(f"duplicate dr_id in pool: {duplicates}")

    def __len__(self):
        return len(self.retrievers)

    @property
    def dr_ids(self) -> list[str]:
        return [dr_id for dr_id, _ in self.retrievers]

    def require_selection(self):
        """Selection only makes sense with at least two candidates."""
        if len(self) < 2:
            raise ValidationError(
                f"selection needs at least 2 retrievers, pool has {len(self)}")


def load_pool_manifest(path: str) -> DrPool:
    """Read a pool manifest; relative paths resolve against its folder."""
    with open(path, encoding="utf-8") as f:
        try:
            records = json.load(f)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid pool manifest: {e.msg}",
                             e.lineno) from None
    base = os.path.dirname(os.path.abspath(path))
    retrievers = []
    for record in records:
        kind = record.get("backend")
        if kind not in BACKEND_KINDS:
            raise ValidationError(
                f"unknown backend '{kind}' for '{record.get('dr_id')}'")
        location = record.get("path_or_url", "")
        if kind == "run_file" and location and not os.path.isabs(location):
            location = os.path.join(base, location)
        options = {k: v for k, v in record.items()
                   if k not in ("dr_id", "backend", "path_or_url")}
        retrievers.append((str(record["dr_id"]),
                           BackendSpec(kind, location, options)))
    return DrPool(tuple(retrievers))


@dataclass(frozen=True)
class DrRanking:
    """An ordering of retrievers produced by one selection method.

    Entries are sorted by score descending, ties by dr_id ascending.
    Methods where lower values are better store negated values.
    """

    method_id: str
    entries: tuple[tuple[str, float], ...]

    def __post_init__(self):
        expected = sorted(self.entries, key=lambda e: (-e[1], e[0]))
        if list(self.entries) != expected:
            raise ValidationError(
                f"ranking '{self.method_id}' is not sorted")
        ids = [dr_id for dr_id, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ValidationError(
                f"ranking '{self.method_id}' repeats a dr_id")

    @classmethod
    def from_scores(cls, scores: Mapping[str, float],
                    method_id: str) -> DrRanking:
        for dr_id, score in scores.items():
            if not math.isfinite(score):
                raise ValidationError(
                    f"{method_id}: non-finite score for '{dr_id}'")
        entries = sorted(((d, float(s)) for d, s in scores.items()),
                         key=lambda e: (-e[1], e[0]))
        return cls(method_id, tuple(entries))

    def __len__(self):
        return len(self.entries)

    @property
    def dr_ids(self) -> list[str]:
        return [dr_id for dr_id, _ in self.entries]

    @property
    def scores(self) -> dict[str, float]:
        return dict(self.entries)

    @property
    def top(self) -> str:
        return self.entries[0][0]


def write_ranking(ranking: DrRanking) -> str:
    records = [{"dr_id": dr_id, "score": score, "rank": rank}
               for rank, (dr_id, score) in enumerate(ranking.entries, start=1)]
    return json.dumps(records, indent=1) + "\n"


def read_ranking(text: str, method_id: str) -> DrRanking:
    records = json.loads(text)
    return DrRanking.from_scores(
        {r["dr_id"]: r["score"] for r in records}, method_id)
