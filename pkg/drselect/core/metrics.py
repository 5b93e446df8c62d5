"""Measurement layer: nDCG@k, rank-biased overlap, Kendall tau, and the
selection loss delta_e."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import stats

from drselect.core.data_model import DrRanking, Qrels, Run
from drselect.core.errors import IdSetMismatch, ValidationError
from drselect.processing import config


@dataclass(frozen=True)
class EvalMeasure:
    """Evaluation measure E; only nDCG is defined.

    gain "linear" uses the grade as gain (trec_eval); "exponential" uses
    2**grade - 1.
    """

    kind: str = "ndcg"
    cutoff: int = config.ndcg_cutoff
    gain: str = "linear"

    def __post_init__(self):
        if self.kind != "ndcg":
            raise ValidationError(f"unsupported measure '{self.kind}'")
        if self.cutoff < 1:
            raise ValidationError("cutoff must be >= 1")
        if self.gain not in ("linear", "exponential"):
            raise ValidationError(f"unknown gain '{self.gain}'")

    @property
    def name(self) -> str:
        return f"ndcg@{self.cutoff}"


def _gain(grade, gain):
    return (2.0 ** grade - 1.0) if gain == "exponential" else float(grade)


def ndcg_at_k(ranked: Sequence[str], judgments: Mapping[str, int], k: int,
              gain: str = "linear") -> float:
    """
    nDCG@k with log2(i + 1) discount.

    The ideal ranking is built from every judged document of the query.
    Returns 0 when the query has no relevant document.
    """
    dcg = sum(_gain(judgments.get(doc_id, 0), gain) / math.log2(i + 1)
              for i, doc_id in enumerate(ranked[:k], start=1))
    ideal = sorted((g for g in judgments.values() if g > 0), reverse=True)
    idcg = sum(_gain(g, gain) / math.log2(i + 1)
               for i, g in enumerate(ideal[:k], start=1))
    if idcg == 0:
        return 0.0
    return dcg / idcg


def per_query_metric(run: Run, qrels: Qrels, measure: EvalMeasure,
                     query_ids: Iterable[str] | None = None
                     ) -> dict[str, float]:
    """Measure value of every qrels query; queries missing from the run
    count as 0."""
    if query_ids is None:
        query_ids = qrels.query_ids
    return {q: (ndcg_at_k(run.doc_ids(q), qrels.for_query(q),
                          measure.cutoff, measure.gain)
                if q in run.entries else 0.0)
            for q in query_ids}


def mean_metric(run: Run, qrels: Qrels, measure: EvalMeasure,
                query_ids: Iterable[str] | None = None) -> float:
    """Mean measure over the qrels queries (or ``query_ids``)."""
    if not run.entries:
        raise ValidationError(f"run '{run.dr_id}' is empty")
    values = per_query_metric(run, qrels, measure, query_ids)
    if not values or not set(values) & set(run.entries):
        raise ValidationError(
            f"run '{run.dr_id}' and the qrels share no query")
    return float(np.mean(list(values.values())))


def rbo(list_a: Sequence[str], list_b: Sequence[str],
        p: float = config.rbo_p) -> float:
    """
    Extrapolated rank-biased overlap, evaluated at d = min(|A|, |B|).

    RBO_ext = (X_d / d) p^d + ((1 - p) / p) sum_{i=1..d} (X_i / i) p^i,
    with X_i the size of the intersection of the two i-prefixes.
    """
    if not list_a or not list_b:
        raise ValidationError("rbo needs two non-empty lists")
    if not 0.0 < p < 1.0:
        raise ValidationError("rbo needs 0 < p < 1")
    depth = min(len(list_a), len(list_b))
    seen_a, seen_b = set(), set()
    overlap = 0
    total = 0.0
    weight = 1.0
    agrees = True
    for i in range(1, depth + 1):
        a, b = list_a[i - 1], list_b[i - 1]
        if a == b:
            overlap += 1
        else:
            overlap += (a in seen_b) + (b in seen_a)
            seen_a.add(a)
            seen_b.add(b)
        weight *= p
        total += overlap / i * weight
        agrees = agrees and overlap == i
    if agrees:
        return 1.0
    return overlap / depth * weight + (1.0 - p) / p * total


def kendall_tau(rank_a: DrRanking, rank_b: DrRanking) -> float:
    """
    Kendall tau-b between two retriever rankings.

    Ties are equal method scores. A side that is entirely tied gives 0.0;
    fewer than two retrievers give 1.0.
    """
    if set(rank_a.dr_ids) != set(rank_b.dr_ids):
        raise IdSetMismatch("rankings cover different retrievers",
                            rank_a.dr_ids, rank_b.dr_ids)
    ids = sorted(rank_a.dr_ids)
    if len(ids) < 2:
        return 1.0
    a, b = rank_a.scores, rank_b.scores
    x, y = [a[i] for i in ids], [b[i] for i in ids]
    if len(set(x)) < 2 or len(set(y)) < 2:
        return 0.0
    tau, _ = stats.kendalltau(x, y)
    if math.isnan(tau):
        return 0.0
    return float(tau)


def delta_e(gt_scores: Mapping[str, float], predicted: DrRanking) -> float:
    """Performance lost by using the predicted top retriever instead of the
    ground-truth best: e(R*) - e(top). Zero when the pick ties the best."""
    if not gt_scores or not len(predicted):
        raise ValidationError("delta_e needs scores and a ranking")
    missing = set(gt_scores) - set(predicted.dr_ids)
    if missing:
        raise IdSetMismatch("ranking does not cover the ground truth",
                            gt_scores, predicted.dr_ids)
    return max(gt_scores.values()) - gt_scores[predicted.top]
