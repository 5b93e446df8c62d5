"""Test doubles and builders for a synthetic corpus with a pool of noisy
lexical retrievers."""
import json
import threading
from types import SimpleNamespace

import numpy as np

from drselect.core.data_model import Corpus, Document
from drselect.core.retrieval import LexicalIndex

NOISE_LEVELS = {"lex-s0": 0.0, "lex-s025": 0.25, "lex-s05": 0.5,
                "lex-s1": 1.0, "lex-s2": 2.0}


def synthetic_corpus(n_docs=200, vocab_size=600, doc_len=40, seed=0):
    """Documents of Zipf-distributed pseudo-words; every document has a few
    rare terms that identify it."""
    rng = np.random.default_rng(seed)
    vocab = np.array([f"t{i:04d}" for i in range(vocab_size)])
    weights = 1.0 / np.arange(1, vocab_size + 1)
    weights /= weights.sum()
    docs = [Document(f"d{i:03d}", "",
                     " ".join(rng.choice(vocab, size=doc_len, p=weights)))
            for i in range(n_docs)]
    return Corpus(docs, name="synthetic")


def make_corpus(*texts, titles=None):
    titles = titles or [""] * len(texts)
    return Corpus(Document(f"d{i}", title, text)
                  for i, (title, text) in enumerate(zip(titles, texts),
                                                    start=1))


def write_world(path, corpus, n_real_queries=30):
    """Write corpus.jsonl, pool.json, real queries and qrels below path."""
    corpus_path = path / "corpus.jsonl"
    corpus_path.write_text("".join(
        json.dumps({"_id": d.doc_id, "title": d.title, "text": d.text}) + "\n"
        for d in corpus))
    pool_path = path / "pool.json"
    pool_path.write_text(json.dumps([
        {"dr_id": dr_id, "backend": "lexical", "noise": noise,
         "noise_seed": i}
        for i, (dr_id, noise) in enumerate(NOISE_LEVELS.items())]))
    index = LexicalIndex(corpus)
    queries, qrels = [], []
    for doc in corpus.docs[:n_real_queries]:
        counts = index.term_counts(doc.doc_id)
        rare = sorted(counts, key=lambda t: (index.document_frequency(t), t))
        query_id = f"real-{doc.doc_id}"
        queries.append(json.dumps({"_id": query_id,
                                   "text": " ".join(rare[:3])}))
        qrels.append(f"{query_id} 0 {doc.doc_id} 1")
    queries_path = path / "queries.jsonl"
    queries_path.write_text("\n".join(queries) + "\n")
    qrels_path = path / "qrels.txt"
    qrels_path.write_text("\n".join(qrels) + "\n")
    return SimpleNamespace(corpus=corpus_path, pool=pool_path,
                           queries=queries_path, qrels=qrels_path)


class StubResponse:
    def __init__(self, status_code=200, body=None):
        self.status_code = status_code
        self._body = body

    def json(self):
        if isinstance(self._body, Exception):
            raise self._body
        return self._body


class StubSession:
    """Stands in for ``requests.Session``: replays scripted responses (or
    raises scripted exceptions), repeating the last one, and records every
    request."""

    def __init__(self, responses):
        self.responses = list(responses)
        self.requests = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.requests.append({"url": url, "json": json, "headers": headers,
                              "timeout": timeout})
        response = self.responses.pop(0) if len(self.responses) > 1 \
            else self.responses[0]
        if isinstance(response, Exception):
            raise response
        return response


class BlockingSession:
    """Holds every request until ``release`` is set and records the peak
    number of requests in flight at once."""

    def __init__(self, body):
        self.body = body
        self.release = threading.Event()
        self.active = 0
        self.peak = 0
        self._lock = threading.Lock()

    def post(self, url, json=None, headers=None, timeout=None):
        with self._lock:
            self.active += 1
            self.peak = max(self.peak, self.active)
        self.release.wait(timeout=10)
        with self._lock:
            self.active -= 1
        return StubResponse(200, self.body)


class ScriptedLlm:
    """LLM backend answering from a list, one answer list per call; the
    last answer repeats."""

    def __init__(self, answers):
        self.answers = list(answers)
        self.requests = []

    def complete(self, request, params):
        self.requests.append((request, params))
        answer = self.answers.pop(0) if len(self.answers) > 1 \
            else self.answers[0]
        return list(answer)


class FailingLlm:
    """Fails the test if anything asks it for a completion."""

    calls = {}

    def complete(self, request, params):
        raise AssertionError(f"unexpected LLM call for {request.task}")
