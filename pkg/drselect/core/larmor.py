"""
LARMOR dense retriever selection pipeline.

sample -> generate pseudo-queries -> retrieve with every retriever ->
fuse (RRF, top m) -> LLM judgments and/or LLM setwise reference lists ->
score retrievers -> fuse the judgment- and reference-based rankings.

Stages that can be selected on their own:
    Q    - source document of each pseudo-query as its only relevant doc
    QF   - mean RBO of every run against the fused ranking
    QFJ  - mean measure against LLM pseudo-judgments over the fused ranking
    QFR  - mean RBO against LLM setwise reference lists
    FULL - RRF of the QFJ and QFR rankings

Every step writes its artifacts to the run directory and is skipped when
they are already there, so a crashed run resumes from the last completed
step.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Literal, Mapping, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from drselect.core import llm_gateway as llm
from drselect.core.data_model import (Corpus, DrPool, DrRanking, Qrels,
                                      Query, Run, load_queries, parse_qrels,
                                      parse_run, read_ranking,
                                      sample_documents, write_qrels,
                                      write_queries, write_ranking, write_run)
from drselect.core.errors import (BackendUnavailable, MissingArtifact,
                                  MissingQuery, StaleArtifact, ValidationError)
from drselect.core.fusion import FusedRanking, fuse_dr_rankings, rrf_fuse
from drselect.core.metrics import EvalMeasure, mean_metric, rbo
from drselect.core.retrieval import batch_search, run_from_results
from drselect.processing import config

logger = logging.getLogger(__name__)

STAGES = ("Q", "QF", "QFJ", "QFR", "FULL")
# ranking file / method name of every stage
METHOD_OF_STAGE = {"Q": "q", "QF": "qf", "QFJ": "qfj", "QFR": "qfr",
                   "FULL": "larmor"}

QUERIES = "queries.jsonl"
FUSED = "fused.trec"
PSEUDO_QRELS = "pseudo_qrels.txt"
REFERENCE_LISTS = "reference_lists.jsonl"

# steps whose output each step and each stage ranking is computed from
STEP_INPUTS = {
    "gen-queries": frozenset(),
    "retrieve": frozenset({"gen-queries"}),
    "fuse": frozenset({"gen-queries", "retrieve"}),
    "judge": frozenset({"gen-queries", "retrieve", "fuse"}),
    "rerank": frozenset({"gen-queries", "retrieve", "fuse"}),
}
STAGE_INPUTS = {
    "Q": frozenset({"gen-queries", "retrieve"}),
    "QF": STEP_INPUTS["fuse"] | {"fuse"},
    "QFJ": STEP_INPUTS["judge"] | {"judge"},
    "QFR": STEP_INPUTS["rerank"] | {"rerank"},
    "FULL": frozenset(STEP_INPUTS),
}


class PipelineConfig(BaseModel):
    """Constants of one LARMOR run."""

    model_config = ConfigDict(frozen=True)

    k: int = Field(config.sample_size, ge=1)
    l: int = Field(config.queries_per_doc, ge=1)
    m: int = Field(config.judge_depth, ge=1)
    retrieval_depth: int = Field(config.retrieval_depth, ge=1)
    k_rrf: float = Field(config.rrf_k, gt=0)
    rbo_p: float = Field(config.rbo_p, gt=0.0, lt=1.0)
    ndcg_cutoff: int = Field(config.ndcg_cutoff, ge=1)
    stage: Literal["Q", "QF", "QFJ", "QFR", "FULL"] = "FULL"
    seed: int = config.seed
    set_size: int = Field(config.setwise_set_size, ge=2)
    token_budget: int = Field(config.setwise_token_budget, ge=1)
    domain: str = config.prompt_domain
    top_p: float = Field(config.top_p, gt=0.0, le=1.0)

    @model_validator(mode="after")
    def _check_depths(self):
        if self.m > self.retrieval_depth:
            raise ValueError("m must not exceed retrieval_depth")
        return self

    @property
    def measure(self) -> EvalMeasure:
        return EvalMeasure("ndcg", self.ndcg_cutoff)


@dataclass
class GeneratedQuerySet:
    """Pseudo-queries with links to the sampled documents they came from."""

    queries: list[Query]
    sampled_doc_ids: list[str]

    @property
    def query_ids(self) -> list[str]:
        return [q.query_id for q in self.queries]

    @property
    def duplicates(self) -> int:
        """Generated strings that repeat an earlier one (kept anyway)."""
        texts = [q.text for q in self.queries]
        return len(texts) - len(set(texts))


@dataclass
class PipelineArtifacts:
    generated_queries: GeneratedQuerySet | None = None
    runs: dict[str, Run] = field(default_factory=dict)
    fused_rankings: dict[str, FusedRanking] = field(default_factory=dict)
    pseudo_qrels: Qrels | None = None
    reference_lists: dict[str, list[str]] = field(default_factory=dict)
    stage_rankings: dict[str, DrRanking] = field(default_factory=dict)
    stats: dict[str, dict] = field(default_factory=dict)


class RunDirectory:
    """File layout of a pipeline run.

    queries.jsonl, runs/{dr_id}.trec, fused.trec, pseudo_qrels.txt,
    reference_lists.jsonl, ranking_{method}.json, pipeline_stats.json

    artifacts.json records, for every checkpointed artifact, the sha256 of
    its text and of the generated query ids it was computed for. A file
    without a matching record is treated as never written.
    """

    MANIFEST = "artifacts.json"

    def __init__(self, path: str):
        self.path = path
        os.makedirs(os.path.join(path, "runs"), exist_ok=True)

    def file(self, name: str) -> str:
        return os.path.join(self.path, name)

    def ranking_file(self, method: str) -> str:
        return self.file(ranking_name(method))

    def exists(self, name: str) -> bool:
        return os.path.exists(self.file(name))

    def read(self, name: str) -> str:
        with open(self.file(name), encoding="utf-8") as f:
            return f.read()

    def _replace(self, name: str, text: str) -> None:
        target = self.file(name)
        tmp = target + ".tmp"
        with open(tmp, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, target)

    def _manifest(self) -> dict:
        if not self.exists(self.MANIFEST):
            return {}
        return json.loads(self.read(self.MANIFEST))

    def _save_manifest(self, manifest: dict) -> None:
        self._replace(self.MANIFEST,
                      json.dumps(manifest, indent=1, sort_keys=True) + "\n")

    def write(self, name: str, text: str,
              query_ids: Sequence[str] | None = None) -> None:
        """Atomically write ``name``; with ``query_ids`` it becomes a
        checkpoint recorded in the manifest."""
        self._replace(name, text)
        if query_ids is not None:
            manifest = self._manifest()
            manifest[name] = {"sha256": _digest(text),
                              "queries": _query_fingerprint(query_ids)}
            self._save_manifest(manifest)

    def complete(self, name: str) -> bool:
        if not self.exists(name):
            return False
        entry = self._manifest().get(name)
        return entry is not None and \
            entry["sha256"] == _digest(self.read(name))

    def load(self, name: str, stage: str,
             query_ids: Sequence[str] | None = None) -> str | None:
        """Text of a checkpoint, or None when it has to be recomputed.

        Raises StaleArtifact when a complete checkpoint was computed for
        other query ids than ``query_ids``.
        """
        if not self.exists(name):
            return None
        text = self.read(name)
        entry = self._manifest().get(name)
        if entry is None or entry["sha256"] != _digest(text):
            logger.warning("incomplete artifact ignored",
                           extra={"artifact": name, "stage": stage})
            return None
        if query_ids is not None and \
                entry["queries"] != _query_fingerprint(query_ids):
            raise StaleArtifact(stage, name)
        return text

    def stored_runs(self) -> list[str]:
        return sorted(f"runs/{name}"
                      for name in os.listdir(self.file("runs"))
                      if name.endswith(".trec"))

    def remove(self, names: Sequence[str]) -> None:
        manifest = self._manifest()
        removed = [name for name in names if self.exists(name)]
        for name in removed:
            os.remove(self.file(name))
        dropped = [name for name in names if manifest.pop(name, None)]
        if dropped:
            self._save_manifest(manifest)
        if removed:
            logger.info("invalidated artifacts", extra={"artifacts": removed})

    def update_stats(self, section: str, values: Mapping) -> None:
        stats = json.loads(self.read("pipeline_stats.json")) \
            if self.exists("pipeline_stats.json") else {}
        stats[section] = dict(values)
        self._replace("pipeline_stats.json",
                      json.dumps(stats, indent=1, sort_keys=True) + "\n")


def _digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _query_fingerprint(query_ids: Sequence[str]) -> str:
    return _digest("\n".join(sorted(query_ids)))


def run_artifact(dr_id: str) -> str:
    return f"runs/{dr_id}.trec"


def ranking_name(method: str) -> str:
    return f"ranking_{method}.json"


def _mean(values) -> float:
    values = list(values)
    return float(np.mean(values)) if values else 0.0


def _safe_rbo(run_list, reference, p) -> float:
    """RBO where an empty side contributes 0."""
    if not run_list or not reference:
        return 0.0
    return rbo(run_list, reference, p)


def build_fused(artifacts: PipelineArtifacts, pool: DrPool,
                cfg: PipelineConfig) -> dict[str, FusedRanking]:
    """F[q] = RRF over every retriever's list for q, truncated to m."""
    fused = {}
    for query_id in artifacts.generated_queries.query_ids:
        lists = []
        for dr_id in pool.dr_ids:
            run = artifacts.runs.get(dr_id)
            if run is None or query_id not in run.entries:
                raise MissingQuery(dr_id, query_id)
            lists.append(run.doc_ids(query_id))
        fused[query_id] = rrf_fuse(lists, cfg.k_rrf, depth=cfg.m)
    return fused


def stage_q(artifacts: PipelineArtifacts, pool: DrPool,
            cfg: PipelineConfig | None = None) -> DrRanking:
    """Rank retrievers by how well they find each query's source document."""
    cfg = cfg or PipelineConfig()
    queries = artifacts.generated_queries.queries
    qrels = Qrels({q.query_id: {q.source_doc_id: 1} for q in queries})
    scores = {dr_id: mean_metric(artifacts.runs[dr_id], qrels, cfg.measure,
                                 query_ids=[q.query_id for q in queries])
              for dr_id in pool.dr_ids}
    return DrRanking.from_scores(scores, "q")


def _mean_rbo(artifacts, pool, references, p) -> dict[str, float]:
    query_ids = artifacts.generated_queries.query_ids
    return {dr_id: _mean(_safe_rbo(artifacts.runs[dr_id].doc_ids(q),
                                   references[q], p) for q in query_ids)
            for dr_id in pool.dr_ids}


def stage_qf(artifacts: PipelineArtifacts, pool: DrPool,
             cfg: PipelineConfig) -> DrRanking:
    references = {q: f.item_ids for q, f in artifacts.fused_rankings.items()}
    return DrRanking.from_scores(
        _mean_rbo(artifacts, pool, references, cfg.rbo_p), "qf")


def judge_fused(artifacts: PipelineArtifacts, corpus: Corpus, backend,
                template: llm.PromptTemplate, workers: int | None = None,
                outcome: llm.JudgeOutcome | None = None) -> Qrels:
    """Binarized LLM judgment of every (q, d) with d in F[q]."""
    queries = {q.query_id: q for q in artifacts.generated_queries.queries}
    pairs = [(q, d) for q in artifacts.generated_queries.query_ids
             for d in artifacts.fused_rankings[q].item_ids]
    for _, doc_id in pairs:
        if doc_id not in corpus:
            raise ValidationError(
                f"retrieved document '{doc_id}' is not in the corpus")

    def one(pair):
        query_id, doc_id = pair
        label = llm.judge(backend, template, queries[query_id],
                          corpus[doc_id], outcome=outcome)
        return llm.binarize(label)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        grades = list(pool.map(one, pairs))
    judgments = {}
    for (query_id, doc_id), grade in zip(pairs, grades):
        judgments.setdefault(query_id, {})[doc_id] = grade
    return Qrels(judgments)


def stage_qfj(artifacts: PipelineArtifacts, pool: DrPool,
              cfg: PipelineConfig) -> DrRanking:
    """Rank retrievers by mean measure against the pseudo-judgments."""
    if artifacts.pseudo_qrels is None:
        raise MissingArtifact("judge", "pseudo_qrels.txt")
    query_ids = artifacts.generated_queries.query_ids
    scores = {dr_id: mean_metric(artifacts.runs[dr_id],
                                 artifacts.pseudo_qrels, cfg.measure,
                                 query_ids=query_ids)
              for dr_id in pool.dr_ids}
    return DrRanking.from_scores(scores, "qfj")


def rerank_fused(artifacts: PipelineArtifacts, corpus: Corpus, backend,
                 template: llm.PromptTemplate, cfg: PipelineConfig,
                 workers: int | None = None) -> dict[str, list[str]]:
    """Setwise-rerank F[q] of every query into a reference list L[q]."""
    queries = artifacts.generated_queries.queries

    def one(query):
        fused = artifacts.fused_rankings[query.query_id].item_ids
        for doc_id in fused:
            if doc_id not in corpus:
                raise ValidationError(
                    f"retrieved document '{doc_id}' is not in the corpus")
        return llm.setwise_rerank(backend, template, query,
                                  [corpus[d] for d in fused],
                                  set_size=cfg.set_size,
                                  token_budget=cfg.token_budget)

    with ThreadPoolExecutor(max_workers=workers) as pool:
        lists = list(pool.map(one, queries))
    return {q.query_id: ranked for q, ranked in zip(queries, lists)}


def stage_qfr(artifacts: PipelineArtifacts, pool: DrPool,
              cfg: PipelineConfig) -> DrRanking:
    if not artifacts.reference_lists:
        raise MissingArtifact("rerank", "reference_lists.jsonl")
    return DrRanking.from_scores(
        _mean_rbo(artifacts, pool, artifacts.reference_lists, cfg.rbo_p),
        "qfr")


class LarmorPipeline:
    """
    Resumable LARMOR run over one corpus and retriever pool.

    Parameters
    ----------
    corpus : Corpus
        Target corpus.
    pool : DrPool
        Candidate retrievers.
    cfg : PipelineConfig
        Pipeline constants.
    llm_backend : HttpLlm or MockLlm, optional
        Needed by generation, judging, and reranking.
    backends : dict, optional
        dr_id -> search backend; needed by the retrieval step.
    run_dir : str, optional
        Artifact directory. Without it nothing is persisted.
    templates : dict, optional
        Task -> PromptTemplate; defaults to the shipped templates of
        ``cfg.domain``.
    workers : int, optional
        Thread cap for every parallel section.
    """

    def __init__(self, corpus, pool, cfg, llm_backend=None, backends=None,
                 run_dir=None, templates=None, workers=None):
        self.corpus = corpus
        self.pool = pool
        self.cfg = cfg
        self.llm = llm_backend
        self.backends = backends or {}
        self.dir = RunDirectory(run_dir) if run_dir else None
        self.templates = dict(templates or {})
        for task in llm.Task:
            if task not in self.templates:
                self.templates[task] = llm.load_template(task, cfg.domain)
        self.workers = workers
        self.artifacts = PipelineArtifacts()

    def _stats(self, section, values):
        self.artifacts.stats[section] = dict(values)
        if self.dir:
            self.dir.update_stats(section, values)

    def _setwise_calls(self):
        return getattr(self.llm, "calls", {}).get(llm.Task.SETWISE.value, 0)

    def _need_llm(self, stage):
        if self.llm is None:
            raise ValidationError(f"stage '{stage}' needs an LLM backend")

    # -- checkpointed steps ------------------------------------------------

    def _checkpoint(self, name, stage, query_ids=None):
        if self.dir is None:
            return None
        return self.dir.load(name, stage, query_ids)

    def _invalidate(self, step):
        """Forget every artifact computed from the output of ``step``."""
        a = self.artifacts
        names = []
        for later, inputs in STEP_INPUTS.items():
            if step not in inputs:
                continue
            if later == "retrieve":
                a.runs = {}
                if self.dir:
                    names.extend(self.dir.stored_runs())
            elif later == "fuse":
                a.fused_rankings = {}
                names.append(FUSED)
            elif later == "judge":
                a.pseudo_qrels = None
                names.append(PSEUDO_QRELS)
            elif later == "rerank":
                a.reference_lists = {}
                names.append(REFERENCE_LISTS)
        for stage, inputs in STAGE_INPUTS.items():
            if step in inputs:
                a.stage_rankings.pop(stage, None)
                names.append(ranking_name(METHOD_OF_STAGE[stage]))
        if self.dir:
            self.dir.remove(names)

    def gen_queries(self, force=False) -> GeneratedQuerySet:
        a = self.artifacts
        if a.generated_queries is not None and not force:
            return a.generated_queries
        text = None if force else self._checkpoint(QUERIES, "gen-queries")
        if text is not None:
            queries = load_queries(text)
            sampled = list(dict.fromkeys(q.source_doc_id for q in queries))
            a.generated_queries = GeneratedQuerySet(queries, sampled)
            return a.generated_queries
        self._need_llm("gen-queries")
        docs = sample_documents(self.corpus, self.cfg.k, self.cfg.seed)
        template = self.templates[llm.Task.QUERY_GEN]
        params = llm.GenerationParams(top_p=self.cfg.top_p)
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            per_doc = list(pool.map(
                lambda d: llm.generate_queries(self.llm, template, d,
                                               self.cfg.l, params), docs))
        queries = [q for qs in per_doc for q in qs]
        self._invalidate("gen-queries")
        a.generated_queries = GeneratedQuerySet(queries,
                                                [d.doc_id for d in docs])
        if a.generated_queries.duplicates:
            logger.warning("duplicate generated queries kept",
                           extra={"duplicates": a.generated_queries.duplicates})
        if self.dir:
            self.dir.write(QUERIES, write_queries(queries),
                           a.generated_queries.query_ids)
        self._stats("generation", {
            "queries": len(queries), "sampled_docs": len(docs),
            "duplicates": a.generated_queries.duplicates})
        return a.generated_queries

    def _load_queries(self):
        if self.artifacts.generated_queries is None:
            if not (self.dir and self.dir.complete(QUERIES)):
                raise MissingArtifact("gen-queries", QUERIES)
            self.gen_queries()
        return self.artifacts.generated_queries

    def retrieve(self, force=False) -> dict[str, Run]:
        generated = self._load_queries()
        queries, query_ids = generated.queries, generated.query_ids
        a = self.artifacts
        invalidated = False
        for dr_id in self.pool.dr_ids:
            if dr_id in a.runs and not force:
                continue
            name = run_artifact(dr_id)
            text = None if force else self._checkpoint(name, "retrieve",
                                                       query_ids)
            if text is not None:
                run = parse_run(text, dr_id=dr_id)
                # the checkpoint covers every query; empty lists leave no lines
                a.runs[dr_id] = Run(dr_id, {q: run.entries.get(q, ())
                                            for q in query_ids})
                continue
            if dr_id not in self.backends:
                raise ValidationError(f"no search backend for '{dr_id}'")
            try:
                results = batch_search(self.backends[dr_id], queries,
                                       self.cfg.retrieval_depth, self.workers)
            except MissingQuery as e:
                raise MissingQuery(dr_id, e.query_id) from e
            if results.errors:
                query_id, error = next(iter(results.errors.items()))
                if isinstance(error, BackendUnavailable):
                    raise error
                raise MissingQuery(dr_id, query_id) from error
            if not invalidated:
                self._invalidate("retrieve")
                invalidated = True
            a.runs[dr_id] = run_from_results(
                dr_id, (results[q.query_id] for q in queries))
            logger.info("retrieved", extra={"dr_id": dr_id,
                                            "queries": len(results)})
            if self.dir:
                self.dir.write(name, write_run(a.runs[dr_id]), query_ids)
        return a.runs

    def _load_runs(self):
        self._load_queries()
        if self.dir:
            for dr_id in self.pool.dr_ids:
                name = run_artifact(dr_id)
                if dr_id not in self.artifacts.runs and \
                        not self.dir.complete(name):
                    raise MissingArtifact("retrieve", name)
        return self.retrieve()

    def fuse(self, force=False) -> dict[str, FusedRanking]:
        a = self.artifacts
        if a.fused_rankings and not force:
            return a.fused_rankings
        self._load_runs()
        query_ids = a.generated_queries.query_ids
        text = None if force else self._checkpoint(FUSED, "fuse", query_ids)
        if text is not None:
            run = parse_run(text, dr_id="fused")
            a.fused_rankings = {
                q: FusedRanking(tuple((e.doc_id, e.score)
                                      for e in run.entries.get(q, ())))
                for q in query_ids}
            return a.fused_rankings
        fused = build_fused(a, self.pool, self.cfg)
        self._invalidate("fuse")
        a.fused_rankings = fused
        if self.dir:
            run = Run.from_scores("fused", {
                q: f.entries for q, f in fused.items()})
            self.dir.write(FUSED, write_run(run, tag="fused"), query_ids)
        return a.fused_rankings

    def _load_fused(self):
        if not self.artifacts.fused_rankings and self.dir \
                and not self.dir.complete(FUSED):
            raise MissingArtifact("fuse", FUSED)
        return self.fuse()

    def judge(self, force=False) -> Qrels:
        a = self.artifacts
        if a.pseudo_qrels is not None and not force:
            return a.pseudo_qrels
        self._load_fused()
        query_ids = a.generated_queries.query_ids
        text = None if force else self._checkpoint(PSEUDO_QRELS, "judge",
                                                   query_ids)
        if text is not None:
            a.pseudo_qrels = parse_qrels(text)
            return a.pseudo_qrels
        self._need_llm("judge")
        outcome = llm.JudgeOutcome()
        qrels = judge_fused(a, self.corpus, self.llm,
                            self.templates[llm.Task.JUDGE], self.workers,
                            outcome)
        self._invalidate("judge")
        a.pseudo_qrels = qrels
        if self.dir:
            self.dir.write(PSEUDO_QRELS, write_qrels(qrels), query_ids)
        self._stats("judge", {
            "judged_pairs": len(qrels),
            "relevant": sum(len(qrels.relevant(q)) for q in qrels.query_ids),
            "unparsed": outcome.unparsed})
        return a.pseudo_qrels

    def rerank(self, force=False) -> dict[str, list[str]]:
        a = self.artifacts
        if a.reference_lists and not force:
            return a.reference_lists
        self._load_fused()
        query_ids = a.generated_queries.query_ids
        text = None if force else self._checkpoint(REFERENCE_LISTS, "rerank",
                                                   query_ids)
        if text is not None:
            a.reference_lists = {}
            for line in text.splitlines():
                if line.strip():
                    record = json.loads(line)
                    a.reference_lists[record["query_id"]] = record["doc_ids"]
            return a.reference_lists
        self._need_llm("rerank")
        before = self._setwise_calls()
        lists = rerank_fused(a, self.corpus, self.llm,
                             self.templates[llm.Task.SETWISE], self.cfg,
                             self.workers)
        self._invalidate("rerank")
        a.reference_lists = lists
        if self.dir:
            self.dir.write(REFERENCE_LISTS, "".join(
                json.dumps({"query_id": q, "doc_ids": docs}) + "\n"
                for q, docs in lists.items()), query_ids)
        self._stats("rerank", {
            "queries": len(lists),
            "comparator_calls": self._setwise_calls() - before})
        return a.reference_lists

    # -- scoring -----------------------------------------------------------

    def _record(self, stage, ranking):
        self.artifacts.stage_rankings[stage] = ranking
        if self.dir:
            self.dir.write(ranking_name(METHOD_OF_STAGE[stage]),
                           write_ranking(ranking))
        return ranking

    def select(self, stage: str | None = None) -> DrRanking:
        """Compute the ranking of ``stage`` (default ``cfg.stage``), running
        or resuming whatever earlier steps it needs."""
        stage = stage or self.cfg.stage
        if stage not in STAGES:
            raise ValidationError(f"unknown stage '{stage}'")
        a = self.artifacts
        self.gen_queries()
        self.retrieve()
        if stage == "Q":
            return self._record("Q", stage_q(a, self.pool, self.cfg))
        self.fuse()
        if stage == "QF":
            return self._record("QF", stage_qf(a, self.pool, self.cfg))
        if stage in ("QFJ", "FULL"):
            self.judge()
        if stage in ("QFR", "FULL"):
            self.rerank()
        if stage == "QFJ":
            return self._record("QFJ", stage_qfj(a, self.pool, self.cfg))
        if stage == "QFR":
            return self._record("QFR", stage_qfr(a, self.pool, self.cfg))
        self._record("Q", stage_q(a, self.pool, self.cfg))
        self._record("QF", stage_qf(a, self.pool, self.cfg))
        qfj = self._record("QFJ", stage_qfj(a, self.pool, self.cfg))
        qfr = self._record("QFR", stage_qfr(a, self.pool, self.cfg))
        full = fuse_dr_rankings([qfj, qfr], self.cfg.k_rrf)
        return self._record("FULL", DrRanking(METHOD_OF_STAGE["FULL"],
                                              full.entries))


def run_larmor(corpus: Corpus, pool: DrPool, cfg: PipelineConfig,
               llm_backend, backends: dict, run_dir: str | None = None,
               templates=None, workers: int | None = None
               ) -> tuple[DrRanking, PipelineArtifacts]:
    """Run (or resume) the pipeline and return the ``cfg.stage`` ranking."""
    pool.require_selection()
    pipeline = LarmorPipeline(corpus, pool, cfg, llm_backend, backends,
                              run_dir, templates, workers)
    ranking = pipeline.select()
    logger.info("larmor selection done",
                extra={"stage": cfg.stage, "selected": ranking.top})
    return ranking, pipeline.artifacts


def read_stage_ranking(run_dir: str, stage: str) -> DrRanking:
    method = METHOD_OF_STAGE[stage]
    with open(RunDirectory(run_dir).ranking_file(method),
              encoding="utf-8") as f:
        return read_ranking(f.read(), method)
