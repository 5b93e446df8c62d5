"""Prompt construction and LLM calls for query generation, relevance
judging, and setwise reranking.

Two backends implement ``complete(request, params) -> list[str]``:

    HttpLlm - ``POST {base_url}/generate``, bearer token from an env var
    MockLlm - deterministic stand-in: generates a document's top TF-IDF
              terms, judges by token overlap, and picks the candidate with
              the highest overlap; reproducible from (seed, prompt)
"""
from __future__ import annotations

import enum
import hashlib
import logging
import os
import re
import string
import threading
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from drselect.core.data_model import Document, Query
from drselect.core.errors import DrSelectError, LlmError, ValidationError
from drselect.core.http_client import JsonPoster, timeout_ms_from_env
from drselect.core.retrieval import LexicalIndex, tokenize
from drselect.core.setwise import heap_sort_setwise
from drselect.processing import config

logger = logging.getLogger(__name__)

PROMPT_DIR = os.path.join(os.path.dirname(os.path.dirname(
    os.path.abspath(__file__))), "prompts")


class Task(str, enum.Enum):
    QUERY_GEN = "query_gen"
    JUDGE = "judge"
    SETWISE = "setwise"


REQUIRED_PLACEHOLDERS = {
    Task.QUERY_GEN: {"document"},
    Task.JUDGE: {"query", "document"},
    Task.SETWISE: {"query", "candidates"},
}

# (query type, document type) named in the shipped prompts of each domain
DOMAINS = {
    "wikipedia": ("question", "Wikipedia page"),
    "scientific": ("scientific claim or question",
                   "scientific paper title and abstract"),
    "argument": ("argument", "argument passage"),
    "news": ("news headline", "news article"),
}


@dataclass(frozen=True)
class PromptTemplate:
    """A prompt with ``{placeholder}`` slots for one task.

    Besides the task fields a template may name any key of
    ``domain_hints``; those are filled in at render time.
    """

    task: Task
    template: str
    domain_hints: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        names = {name for _, name, _, _ in string.Formatter().parse(
            self.template) if name is not None}
        required = REQUIRED_PLACEHOLDERS[Task(self.task)]
        if not required <= names <= required | set(self.domain_hints):
            raise ValidationError(
                f"{Task(self.task).value} template needs placeholders "
                f"{sorted(required)}, found {sorted(names)}")

    def render(self, **fields) -> str:
        return self.template.format(**{**self.domain_hints, **fields})


def load_template_file(task, path: str, domain_hints=None) -> PromptTemplate:
    with open(path, encoding="utf-8") as f:
        text = f.read().strip()
    return PromptTemplate(Task(task), text, dict(domain_hints or {}))


def load_template(task, domain: str = config.prompt_domain) -> PromptTemplate:
    """Load one of the shipped ``{task}_{domain}.txt`` assets."""
    if domain not in DOMAINS:
        raise ValidationError(f"unknown prompt domain '{domain}', "
                              f"choose from {sorted(DOMAINS)}")
    query_type, doc_type = DOMAINS[domain]
    path = os.path.join(PROMPT_DIR, f"{Task(task).value}_{domain}.txt")
    return load_template_file(task, path, {"query_type": query_type,
                                           "doc_type": doc_type})


class GenerationParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    top_p: float = Field(config.top_p, gt=0.0, le=1.0)
    temperature: float = Field(config.temperature, ge=0.0)
    max_tokens: int = Field(config.max_tokens, gt=0)
    n_samples: int = Field(1, gt=0)


class GradedLabel(enum.Enum):
    HIGHLY_RELEVANT = "Highly Relevant"
    SOMEWHAT_RELEVANT = "Somewhat Relevant"
    NOT_RELEVANT = "Not Relevant"


def parse_label(text: str) -> GradedLabel | None:
    """Case-insensitive substring match; the longest matching label wins."""
    lowered = text.lower()
    matches = [label for label in GradedLabel
               if label.value.lower() in lowered]
    if not matches:
        return None
    return max(matches, key=lambda label: len(label.value))


def binarize(label: GradedLabel) -> int:
    return 1 if label is GradedLabel.HIGHLY_RELEVANT else 0


@dataclass(frozen=True)
class LlmRequest:
    """A rendered prompt plus the structured inputs it was rendered from."""

    task: Task
    prompt: str
    fields: Mapping[str, object] = field(default_factory=dict)


class _Counting:
    """Thread-safe per-task call counter shared by both backends."""

    def _init_counter(self):
        self.calls = Counter()
        self._lock = threading.Lock()

    def _count(self, task):
        with self._lock:
            self.calls[Task(task).value] += 1


class HttpLlm(_Counting):
    """Completion service: ``POST {base_url}/generate``."""

    def __init__(self, base_url, api_key_env=config.llm_api_key_env,
                 model_name="", concurrency_cap=config.llm_concurrency_cap,
                 timeout_ms=None, max_retries=config.http_max_retries,
                 session=None, sleep=None):
        self._init_counter()
        self.model_name = model_name
        headers = {}
        api_key = os.environ.get(api_key_env)
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        kwargs = {} if sleep is None else {"sleep": sleep}
        self.poster = JsonPoster(base_url.rstrip("/") + "/generate",
                                 timeout_ms=timeout_ms_from_env(timeout_ms),
                                 max_retries=max_retries,
                                 max_in_flight=concurrency_cap,
                                 headers=headers, session=session, **kwargs)

    def complete(self, request: LlmRequest,
                 params: GenerationParams) -> list[str]:
        self._count(request.task)
        payload = {"prompt": request.prompt, "top_p": params.top_p,
                   "temperature": params.temperature,
                   "max_tokens": params.max_tokens, "n": params.n_samples}
        if self.model_name:
            payload["model"] = self.model_name
        body = self.poster.post(payload)
        outputs = body.get("outputs") if isinstance(body, dict) else None
        if not isinstance(outputs, list):
            raise DrSelectError("completion response has no 'outputs' list")
        return [str(o) for o in outputs]


def _overlap(query_text: str, doc: Document) -> float:
    """Fraction of distinct query tokens that occur in the document."""
    query_tokens = set(tokenize(query_text))
    if not query_tokens:
        return 0.0
    return len(query_tokens & set(tokenize(doc.full_text))) / len(query_tokens)


def _candidate_label(i: int) -> str:
    return string.ascii_uppercase[i]


class MockLlm(_Counting):
    """Deterministic LLM stand-in for tests and offline runs."""

    def __init__(self, seed=0, index: LexicalIndex | None = None,
                 query_terms=config.mock_query_terms,
                 overlap_threshold=config.mock_overlap_threshold):
        self._init_counter()
        self.seed = seed
        self.index = index
        self.query_terms = query_terms
        self.overlap_threshold = overlap_threshold

    def _rng(self, prompt, j):
        digest = hashlib.sha256(
            f"{self.seed}\x00{j}\x00{prompt}".encode("utf-8")).digest()
        return np.random.default_rng(int.from_bytes(digest[:8], "little"))

    def _weighted_terms(self, doc: Document) -> list[str]:
        """Document terms by TF-IDF, best first (ties alphabetical)."""
        tf = Counter(tokenize(doc.full_text))
        weights = {}
        for term, count in tf.items():
            idf = 1.0
            if self.index is not None:
                df = self.index.document_frequency(term)
                if df:
                    idf = float(np.log1p(len(self.index.corpus) / df))
            weights[term] = count * idf
        return sorted(weights, key=lambda t: (-weights[t], t))

    def _generate(self, request, params):
        terms = self._weighted_terms(request.fields["document"])
        if not terms:
            return [""] * params.n_samples
        pool = terms[1:2 * self.query_terms]
        outputs = []
        for j in range(params.n_samples):
            rng = self._rng(request.prompt, j)
            extra = min(self.query_terms - 1, len(pool))
            picked = [terms[0]] + [pool[i] for i in
                                   rng.choice(len(pool), size=extra,
                                              replace=False)]
            outputs.append(" ".join(picked[i]
                                    for i in rng.permutation(len(picked))))
        return outputs

    def _judge(self, request):
        query, doc = request.fields["query"], request.fields["document"]
        overlap = _overlap(query.text, doc)
        if (query.source_doc_id == doc.doc_id
                or overlap >= self.overlap_threshold):
            return GradedLabel.HIGHLY_RELEVANT.value
        if overlap > 0:
            return GradedLabel.SOMEWHAT_RELEVANT.value
        return GradedLabel.NOT_RELEVANT.value

    def _setwise(self, request):
        query, docs = request.fields["query"], request.fields["candidates"]
        keys = [(_overlap(query.text, d), d.doc_id == query.source_doc_id,
                 -i) for i, d in enumerate(docs)]
        best = max(range(len(docs)), key=lambda i: keys[i])
        return f"Passage {_candidate_label(best)}"

    def complete(self, request: LlmRequest,
                 params: GenerationParams) -> list[str]:
        self._count(request.task)
        if request.task is Task.QUERY_GEN:
            return self._generate(request, params)
        if request.task is Task.JUDGE:
            return [self._judge(request)]
        return [self._setwise(request)]


def _first_line(text: str) -> str:
    for line in text.strip().splitlines():
        if line.strip():
            return line.strip()
    return ""


def _fallback_query(document: Document) -> str:
    if document.title.strip():
        return document.title.strip()
    return " ".join(document.text.split()[:8])


def generate_queries(backend, template: PromptTemplate, document: Document,
                     l: int, params: GenerationParams | None = None
                     ) -> list[Query]:
    """
    Generate ``l`` pseudo-queries for one document.

    Query ids are ``{doc_id}#q{j}``, j = 1..l. An empty generation is retried
    once; if still empty it is replaced by the title (or the first 8 tokens
    of the text when there is no title).
    """
    if l < 1:
        raise ValidationError("l must be >= 1")
    if Task(template.task) is not Task.QUERY_GEN:
        raise ValidationError("generate_queries needs a query_gen template")
    params = (params or GenerationParams()).model_copy(
        update={"n_samples": l})
    request = LlmRequest(Task.QUERY_GEN,
                         template.render(document=document.full_text),
                         {"document": document})
    try:
        outputs = [_first_line(o) for o in backend.complete(request, params)]
        outputs = (outputs + [""] * l)[:l]
        for j, text in enumerate(outputs):
            if not text:
                retry = backend.complete(
                    request, params.model_copy(update={"n_samples": 1}))
                outputs[j] = _first_line(retry[0]) if retry else ""
                if not outputs[j]:
                    logger.warning("empty generation replaced",
                                   extra={"doc_id": document.doc_id})
                    outputs[j] = _fallback_query(document)
    except DrSelectError as e:
        raise LlmError(f"query generation failed: {e}",
                       doc_id=document.doc_id) from e
    return [Query(f"{document.doc_id}#q{j}", text, document.doc_id)
            for j, text in enumerate(outputs, start=1)]


class JudgeOutcome:
    """Counts judge answers that matched no label (defaulted)."""

    def __init__(self):
        self.unparsed = 0
        self._lock = threading.Lock()

    def add_unparsed(self):
        with self._lock:
            self.unparsed += 1


def judge(backend, template: PromptTemplate, query: Query,
          document: Document, params: GenerationParams | None = None,
          outcome: JudgeOutcome | None = None) -> GradedLabel:
    """Ask for a graded label; unparseable twice defaults to NotRelevant."""
    if Task(template.task) is not Task.JUDGE:
        raise ValidationError("judge needs a judge template")
    params = params or GenerationParams(temperature=0.0)
    request = LlmRequest(Task.JUDGE,
                         template.render(query=query.text,
                                         document=document.full_text),
                         {"query": query, "document": document})
    try:
        for _ in range(2):
            answers = backend.complete(request, params)
            label = parse_label(answers[0]) if answers else None
            if label is not None:
                return label
    except DrSelectError as e:
        raise LlmError(f"judging failed: {e}", query_id=query.query_id,
                       doc_id=document.doc_id) from e
    logger.warning("unparseable judgment defaulted to Not Relevant",
                   extra={"query_id": query.query_id,
                          "doc_id": document.doc_id})
    if outcome is not None:
        outcome.add_unparsed()
    return GradedLabel.NOT_RELEVANT


_PASSAGE = re.compile(r"passage\s*\[?([a-z])\]?", re.IGNORECASE)
_BARE = re.compile(r"^\[?([a-z])\]?[.):]?$", re.IGNORECASE)


def parse_choice(text: str, n_candidates: int) -> int | None:
    """Index of the passage named in an answer like 'Passage B'."""
    text = text.strip()
    match = _PASSAGE.search(text) or _BARE.match(text)
    if not match:
        return None
    index = string.ascii_uppercase.index(match.group(1).upper())
    return index if index < n_candidates else None


def _truncate(text: str, budget: int) -> str:
    return " ".join(text.split()[:budget])


def setwise_rerank(backend, template: PromptTemplate, query: Query,
                   candidates: Sequence[Document],
                   set_size: int = config.setwise_set_size,
                   token_budget: int = config.setwise_token_budget,
                   params: GenerationParams | None = None) -> list[str]:
    """
    Rerank candidates with a setwise LLM comparator inside heap sort.

    Returns a permutation of the candidate doc_ids, best first. An answer
    naming no shown passage is retried once, then the current heap order
    is kept.
    """
    if Task(template.task) is not Task.SETWISE:
        raise ValidationError("setwise_rerank needs a setwise template")
    if set_size < 2 or set_size > len(string.ascii_uppercase):
        raise ValidationError("set_size must be in [2, 26]")
    ids = [doc.doc_id for doc in candidates]
    if len(set(ids)) != len(ids):
        raise ValidationError("setwise candidates must be distinct")
    params = params or GenerationParams(temperature=0.0)

    def pick_best(docs):
        shown = "\n".join(
            f"Passage {_candidate_label(i)}: "
            f"{_truncate(d.full_text, token_budget)}"
            for i, d in enumerate(docs))
        request = LlmRequest(Task.SETWISE,
                             template.render(query=query.text,
                                             candidates=shown),
                             {"query": query, "candidates": list(docs)})
        try:
            for _ in range(2):
                answers = backend.complete(request, params)
                choice = parse_choice(answers[0], len(docs)) if answers \
                    else None
                if choice is not None:
                    return choice
        except DrSelectError as e:
            raise LlmError(f"setwise comparison failed: {e}",
                           query_id=query.query_id) from e
        logger.warning("setwise answer outside candidate set",
                       extra={"query_id": query.query_id})
        return 0

    ranked = heap_sort_setwise(list(candidates), pick_best, set_size)
    return [doc.doc_id for doc in ranked]
