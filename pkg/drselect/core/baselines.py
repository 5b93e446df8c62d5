"""
Baseline retriever selection methods.

Most baselines are post-retrieval query performance predictors (QPP): a
predictor maps the score list one retriever returned for one real query to
a number, and the retriever's method score is the mean over queries.
Predictors where lower is better (entropy, alteration) store the negated
mean, so every ranking sorts descending.

    msmarco / leaderboard - reported performance from an external file
    entropy               - entropy of the softmax over the top scores
    wig                   - mean top score minus the normalizing factor
    nqc                   - standard deviation of the top scores
    smv                   - score magnitude and variance
    sigma                 - std of the best score prefix
    sigma-max             - std of scores above a fraction of the top one
    clarity               - KL of the top documents' language model to the
                            corpus language model
    alteration            - score stability under query perturbation
    qpp-fusion            - RBO to the fused list of all retrievers

With ``normalize`` the factor c(q) is the mean of the top ``norm_depth``
scores of the query.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Mapping, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy import special, stats

from drselect.core.data_model import DrRanking, Query, Run
from drselect.core.errors import (IdSetMismatch, UnsupportedBaseline,
                                  ValidationError)
from drselect.core.fusion import rrf_fuse
from drselect.core.metrics import rbo
from drselect.core.retrieval import LexicalIndex, alter_query, search
from drselect.processing import config

logger = logging.getLogger(__name__)


class QppConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    top_k: int = Field(config.qpp_top_k, ge=1)
    normalize: bool = False
    norm_depth: int = Field(config.qpp_norm_depth, ge=1)
    sigma_max_fraction: float = Field(config.sigma_max_fraction, gt=0.0,
                                      le=1.0)
    entropy_top_k: int = Field(config.entropy_top_k, ge=2)
    alteration_variants: int = Field(config.alteration_variants, ge=1)
    alteration_depth: int = Field(config.retrieval_depth, ge=1)
    clarity_lambda: float = Field(config.clarity_lambda, gt=0.0, le=1.0)
    seed: int = config.seed


def normalizing_factor(scores: np.ndarray, cfg: QppConfig) -> float:
    """c(q): mean of the top ``norm_depth`` scores."""
    return float(np.mean(scores[:cfg.norm_depth]))


def _scaled(value, scores, cfg):
    """Divide by |c(q)| when normalizing; None if c(q) is 0."""
    if not cfg.normalize:
        return value
    c = abs(normalizing_factor(scores, cfg))
    if c == 0:
        return None
    return value / c


def binary_entropy(scores: np.ndarray, cfg: QppConfig) -> float | None:
    top = scores[:cfg.entropy_top_k]
    if len(top) < 2:
        return None
    return float(stats.entropy(special.softmax(top)))


def wig(scores: np.ndarray, cfg: QppConfig) -> float | None:
    if not len(scores):
        return None
    c = normalizing_factor(scores, cfg) if cfg.normalize else 0.0
    return float(np.mean(scores[:cfg.top_k])) - c


def nqc(scores: np.ndarray, cfg: QppConfig) -> float | None:
    top = scores[:cfg.top_k]
    if len(top) < 2:
        return None
    return _scaled(float(np.std(top)), scores, cfg)


def smv(scores: np.ndarray, cfg: QppConfig) -> float | None:
    top = scores[:cfg.top_k]
    if len(top) < 2 or np.any(top <= 0):
        return None
    mu = np.mean(top)
    value = float(np.mean(top * np.abs(np.log(top / mu))))
    return _scaled(value, scores, cfg)


def sigma(scores: np.ndarray, cfg: QppConfig) -> float | None:
    """Largest std(top j) / j over prefix lengths j = 2..top_k."""
    depth = min(cfg.top_k, len(scores))
    if depth < 2:
        return None
    return max(float(np.std(scores[:j])) / j for j in range(2, depth + 1))


def sigma_max(scores: np.ndarray, cfg: QppConfig) -> float | None:
    """std / mean of the scores within ``sigma_max_fraction`` of the top.

    The cut is measured from the top score by its magnitude, so the top
    document is kept for negative scores too.
    """
    if not len(scores):
        return None
    top = float(scores[0])
    kept = scores[scores >= top - (1 - cfg.sigma_max_fraction) * abs(top)]
    if len(kept) < 2:
        return 0.0
    mean = abs(float(np.mean(kept)))
    if mean == 0:
        return None
    return float(np.std(kept)) / mean


# name -> (predictor, higher_is_better)
SCORE_PREDICTORS: dict[str, tuple[Callable, bool]] = {
    "entropy": (binary_entropy, False),
    "wig": (wig, True),
    "nqc": (nqc, True),
    "smv": (smv, True),
    "sigma": (sigma, True),
    "sigma-max": (sigma_max, True),
}
NORMALIZABLE = ("wig", "nqc", "smv")
METHODS = ("msmarco", "leaderboard", *SCORE_PREDICTORS, "clarity",
           "alteration", "qpp-fusion")
QUERY_METHODS = (*SCORE_PREDICTORS, "clarity", "alteration", "qpp-fusion")


def method_id(method: str, cfg: QppConfig) -> str:
    if cfg.normalize and method in NORMALIZABLE:
        return f"{method}-norm"
    return method


class CorpusLanguageModel:
    """Maximum-likelihood unigram model of a corpus plus per-document term
    counts, built from a lexical index."""

    def __init__(self, index: LexicalIndex):
        self.index = index
        self.doc_lengths = np.asarray(index.counts.sum(axis=1)).ravel()
        collection = np.asarray(index.counts.sum(axis=0)).ravel()
        self.p_corpus = collection / collection.sum()

    def top_model(self, doc_ids: Sequence[str], lam: float) -> np.ndarray | None:
        """Uniform mixture of Jelinek-Mercer smoothed document models."""
        rows = [self.index.corpus.position(d) for d in doc_ids
                if d in self.index.corpus]
        rows = [r for r in rows if self.doc_lengths[r] > 0]
        if not rows:
            return None
        counts = self.index.counts[rows].toarray()
        doc_models = counts / self.doc_lengths[rows][:, None]
        return lam * doc_models.mean(axis=0) + (1.0 - lam) * self.p_corpus


def clarity(doc_ids: Sequence[str], model: CorpusLanguageModel,
            cfg: QppConfig) -> float | None:
    """KL(P_top || P_corpus) in nats."""
    p_top = model.top_model(doc_ids[:cfg.top_k], cfg.clarity_lambda)
    if p_top is None:
        return None
    return float(stats.entropy(p_top, model.p_corpus))


def _mean_of_queries(dr_id, values, name) -> float:
    usable = [v for v in values.values() if v is not None]
    skipped = len(values) - len(usable)
    if skipped:
        logger.warning("queries skipped by predictor",
                       extra={"method": name, "dr_id": dr_id,
                              "skipped": skipped})
    if not usable:
        raise UnsupportedBaseline(
            f"{name}: no query of '{dr_id}' could be scored")
    return float(np.mean(usable))


def _common_queries(runs: Mapping[str, Run],
                    query_ids: Sequence[str] | None) -> list[str]:
    if not runs:
        raise ValidationError("no runs to score")
    if query_ids is not None:
        return list(query_ids)
    dr_ids = list(runs)
    reference = runs[dr_ids[0]].query_ids
    for dr_id in dr_ids[1:]:
        if set(runs[dr_id].query_ids) != set(reference):
            raise IdSetMismatch("runs cover different queries", reference,
                                runs[dr_id].query_ids)
    return sorted(reference)


def predictor_ranking(method: str, runs: Mapping[str, Run], cfg: QppConfig,
                      index: LexicalIndex | None = None,
                      query_ids: Sequence[str] | None = None) -> DrRanking:
    """
    Rank retrievers by the mean of a per-query predictor over their runs.

    Parameters
    ----------
    method : str
        A key of ``SCORE_PREDICTORS`` or "clarity".
    runs : mapping
        dr_id -> run over the real target queries.
    cfg : QppConfig
        Predictor settings.
    index : LexicalIndex, optional
        Corpus statistics; required by clarity.
    query_ids : sequence of str, optional
        Queries to average over. The default is the queries of the runs,
        which must all be the same.

    Returns
    -------
    DrRanking
    """
    query_ids = _common_queries(runs, query_ids)
    if method == "clarity":
        if index is None:
            raise UnsupportedBaseline("clarity needs the corpus statistics")
        model = CorpusLanguageModel(index)

        def per_query(run, q):
            return clarity(run.doc_ids(q), model, cfg)
        higher_is_better = True
    elif method in SCORE_PREDICTORS:
        predictor, higher_is_better = SCORE_PREDICTORS[method]

        def per_query(run, q):
            return predictor(run.scores(q), cfg)
    else:
        raise ValidationError(f"unknown predictor '{method}'")
    scores = {}
    for dr_id, run in runs.items():
        values = {q: per_query(run, q) for q in query_ids}
        mean = _mean_of_queries(dr_id, values, method)
        scores[dr_id] = mean if higher_is_better else -mean
    return DrRanking.from_scores(scores, method_id(method, cfg))


def msmarco_perf(perf: Mapping[str, float] | str, dr_ids: Sequence[str],
                 method: str = "msmarco") -> DrRanking:
    """Rank by externally reported performance (``{dr_id: score}``)."""
    if isinstance(perf, str):
        with open(perf, encoding="utf-8") as f:
            perf = json.load(f)
    missing = sorted(set(dr_ids) - set(perf))
    if missing:
        raise ValidationError(f"{method}: no reported score for {missing}")
    return DrRanking.from_scores({d: float(perf[d]) for d in dr_ids}, method)


def leaderboard(perf: Mapping[str, float] | str,
                dr_ids: Sequence[str]) -> DrRanking:
    return msmarco_perf(perf, dr_ids, method="leaderboard")


def _alteration_value(backend, query: Query, cfg: QppConfig) -> float | None:
    original = search(backend, query, cfg.top_k)
    doc_ids = original.doc_ids
    if not doc_ids:
        return None
    variants = alter_query(query, cfg.alteration_variants, cfg.seed)
    table = np.empty((len(variants), len(doc_ids)))
    for i, variant in enumerate(variants):
        altered = dict(search(backend, variant, cfg.alteration_depth).results)
        floor = min(altered.values()) if altered else 0.0
        table[i] = [altered.get(d, floor) for d in doc_ids]
    return float(np.mean(np.std(table, axis=0)))


def query_alteration(backends: Mapping[str, object], queries: Sequence[Query],
                     cfg: QppConfig, workers: int | None = None) -> DrRanking:
    """Rank by robustness of scores to single-token query deletions;
    smaller mean std is better."""
    if not queries:
        raise ValidationError("alteration needs real queries")
    for dr_id, backend in backends.items():
        if not getattr(backend, "live", False):
            raise UnsupportedBaseline(
                f"alteration needs live search, '{dr_id}' only replays a "
                "run file")
    scores = {}
    for dr_id, backend in backends.items():
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(
                lambda q: _alteration_value(backend, q, cfg), queries))
        mean = _mean_of_queries(
            dr_id, {q.query_id: v for q, v in zip(queries, values)},
            "alteration")
        scores[dr_id] = -mean
    return DrRanking.from_scores(scores, "alteration")


def qpp_fusion(runs: Mapping[str, Run], k_rrf: float = config.rrf_k,
               p: float = config.rbo_p,
               query_ids: Sequence[str] | None = None) -> DrRanking:
    """Mean RBO of every run against the RRF fusion of all runs."""
    query_ids = _common_queries(runs, query_ids)
    references = {q: rrf_fuse([run.doc_ids(q) for run in runs.values()],
                              k_rrf).item_ids for q in query_ids}
    scores = {}
    for dr_id, run in runs.items():
        values = []
        for q in query_ids:
            docs = run.doc_ids(q)
            values.append(rbo(docs, references[q], p)
                          if docs and references[q] else 0.0)
        scores[dr_id] = float(np.mean(values))
    return DrRanking.from_scores(scores, "qpp-fusion")
