import json
import math

import numpy as np
import pytest

from drselect.core import baselines
from drselect.core.baselines import QppConfig
from drselect.core.data_model import Query, Run
from drselect.core.errors import (IdSetMismatch, UnsupportedBaseline,
                                  ValidationError)
from drselect.core.retrieval import (LexicalIndex, RunFileBackend,
                                     ScoredList)
from helpers import make_corpus

S = np.array


def test_binary_entropy_fixtures():
    cfg = QppConfig()
    assert baselines.binary_entropy(S([5.0] * 10), cfg) == \
        pytest.approx(math.log(10))
    assert baselines.binary_entropy(S([100.0] + [0.0] * 9), cfg) == \
        pytest.approx(0.0, abs=1e-6)
    assert baselines.binary_entropy(S([2.0, 1.0]), cfg) == \
        pytest.approx(0.5822, abs=1e-4)
    assert baselines.binary_entropy(S([2.0]), cfg) is None


def test_wig_fixtures():
    scores = S([3.0, 2.0, 1.0])
    assert baselines.wig(scores, QppConfig(top_k=2)) == 2.5
    assert baselines.wig(scores, QppConfig(top_k=2, normalize=True,
                                           norm_depth=3)) == 0.5
    assert baselines.wig(scores, QppConfig(top_k=3, normalize=True,
                                           norm_depth=3)) == 0.0


def test_nqc_fixtures():
    assert baselines.nqc(S([4.0, 4.0, 4.0]), QppConfig()) == 0.0
    assert baselines.nqc(S([3.0, 1.0]), QppConfig()) == 1.0
    assert baselines.nqc(S([3.0, 1.0]), QppConfig(normalize=True)) == 0.5
    assert baselines.nqc(S([3.0]), QppConfig()) is None


def test_smv_fixtures():
    assert baselines.smv(S([2.0, 2.0, 2.0]), QppConfig()) == 0.0
    assert baselines.smv(S([8.0, 2.0, 2.0]), QppConfig()) == \
        pytest.approx(2.7726, abs=1e-4)
    assert baselines.smv(S([8.0, 2.0, 2.0]), QppConfig(normalize=True)) == \
        pytest.approx(0.6931, abs=1e-4)
    assert baselines.smv(S([2.0, 0.0]), QppConfig()) is None


def test_sigma_fixtures():
    assert baselines.sigma(S([2.0, 2.0, 2.0]), QppConfig()) == 0.0
    assert baselines.sigma(S([3.0, 1.0, 1.0]), QppConfig()) == \
        pytest.approx(0.5)
    assert baselines.sigma(S([3.0]), QppConfig()) is None


def test_sigma_max_fixtures():
    cfg = QppConfig(sigma_max_fraction=0.5)
    assert baselines.sigma_max(S([4.0, 4.0, 4.0]), cfg) == 0.0
    assert baselines.sigma_max(S([10.0, 6.0, 4.0, 1.0]), cfg) == \
        pytest.approx(0.25)
    assert baselines.sigma_max(S([10.0, 1.0]), cfg) == 0.0


def test_sigma_max_keeps_a_negative_top_score():
    cfg = QppConfig(sigma_max_fraction=0.5)
    assert baselines.sigma_max(S([-1.0, -1.2, -5.0]), cfg) == \
        pytest.approx(0.1 / 1.1)
    assert baselines.sigma_max(S([-2.0, -9.0]), cfg) == 0.0
    assert baselines.sigma_max(S([-1.0, -1.2, -5.0]) * 10, cfg) == \
        pytest.approx(0.1 / 1.1)


def test_clarity_two_document_corpus():
    corpus = make_corpus("a a", "b b")
    model = baselines.CorpusLanguageModel(LexicalIndex(corpus))
    value = baselines.clarity(["d1"], model, QppConfig(top_k=1))
    expected = 0.8 * math.log(1.6) + 0.2 * math.log(0.4)
    assert value == pytest.approx(expected, abs=1e-4)


def test_clarity_of_whole_corpus_is_zero_for_uniform_docs():
    corpus = make_corpus("a b", "a b", "a b")
    model = baselines.CorpusLanguageModel(LexicalIndex(corpus))
    assert baselines.clarity(["d1", "d2", "d3"], model,
                             QppConfig()) == pytest.approx(0.0, abs=1e-12)


def test_clarity_is_never_negative(world_corpus, world_index):
    model = baselines.CorpusLanguageModel(world_index)
    rng = np.random.default_rng(0)
    doc_ids = world_corpus.doc_ids
    for _ in range(200):
        top = list(rng.choice(doc_ids, size=rng.integers(1, 20),
                              replace=False))
        assert baselines.clarity(top, model, QppConfig()) >= 0.0


def runs_with(**scores):
    """dr_id -> run over queries q1, q2 with the given score lists."""
    return {dr_id: Run.from_scores(dr_id, {
        q: [(f"d{i}", s) for i, s in enumerate(values)]
        for q in ("q1", "q2")}) for dr_id, values in scores.items()}


@pytest.mark.parametrize("method", ["wig", "nqc", "smv"])
def test_unnormalized_predictors_scale_linearly(method):
    runs = runs_with(a=[5.0, 3.0, 2.0, 1.0], b=[0.9, 0.8, 0.1, 0.05])
    scaled = {d: r.with_scores(lambda s: 10 * s) for d, r in runs.items()}
    base = baselines.predictor_ranking(method, runs, QppConfig()).scores
    big = baselines.predictor_ranking(method, scaled, QppConfig()).scores
    for dr_id in runs:
        assert big[dr_id] == pytest.approx(10 * base[dr_id], rel=1e-12)


@pytest.mark.parametrize("method", ["nqc", "smv", "sigma-max"])
def test_normalized_predictors_are_scale_invariant(method):
    cfg = QppConfig(normalize=True)
    runs = runs_with(a=[5.0, 3.0, 2.0, 1.0], b=[0.9, 0.8, 0.1, 0.05])
    scaled = {d: r.with_scores(lambda s: 10 * s) for d, r in runs.items()}
    base = baselines.predictor_ranking(method, runs, cfg)
    big = baselines.predictor_ranking(method, scaled, cfg)
    assert big.dr_ids == base.dr_ids
    for dr_id in runs:
        assert big.scores[dr_id] == pytest.approx(base.scores[dr_id],
                                                  rel=1e-12)


def test_entropy_is_shift_invariant_and_ascending():
    runs = runs_with(peaked=[9.0, 1.0, 0.5], flat=[1.0, 1.0, 0.9])
    shifted = {d: r.with_scores(lambda s: s + 100) for d, r in runs.items()}
    ranking = baselines.predictor_ranking("entropy", runs, QppConfig())
    assert ranking.dr_ids == ["peaked", "flat"]
    assert all(score <= 0 for score in ranking.scores.values())
    again = baselines.predictor_ranking("entropy", shifted, QppConfig())
    for dr_id in runs:
        assert again.scores[dr_id] == pytest.approx(ranking.scores[dr_id],
                                                    abs=1e-12)


def test_method_id_marks_normalization():
    runs = runs_with(a=[3.0, 1.0], b=[2.0, 1.0])
    assert baselines.predictor_ranking(
        "nqc", runs, QppConfig(normalize=True)).method_id == "nqc-norm"
    assert baselines.predictor_ranking(
        "sigma", runs, QppConfig(normalize=True)).method_id == "sigma"


def test_smv_without_usable_query_is_unsupported():
    runs = runs_with(a=[1.0, -1.0], b=[2.0, 1.0])
    with pytest.raises(UnsupportedBaseline):
        baselines.predictor_ranking("smv", runs, QppConfig())


def test_predictors_need_the_same_queries():
    runs = {"a": Run.from_scores("a", {"q1": [("d", 1.0)]}),
            "b": Run.from_scores("b", {"q2": [("d", 1.0)]})}
    with pytest.raises(IdSetMismatch):
        baselines.predictor_ranking("wig", runs, QppConfig())


def test_clarity_ranking_needs_corpus_statistics():
    with pytest.raises(UnsupportedBaseline):
        baselines.predictor_ranking("clarity", runs_with(a=[1.0], b=[1.0]),
                                    QppConfig())


def test_msmarco_perf_from_file(tmp_path):
    path = tmp_path / "perf.json"
    path.write_text(json.dumps({"a": 33.1, "b": 41.0, "c": 38.2, "z": 1.0}))
    ranking = baselines.msmarco_perf(str(path), ["a", "b", "c"])
    assert ranking.dr_ids == ["b", "c", "a"]
    assert ranking.method_id == "msmarco"
    assert baselines.leaderboard({"a": 1.0, "b": 2.0},
                                 ["a", "b"]).method_id == "leaderboard"
    with pytest.raises(ValidationError):
        baselines.msmarco_perf({"a": 1.0}, ["a", "b"])


def test_qpp_fusion_identical_runs_tie():
    lists = {"q1": [("x", 3.0), ("y", 2.0), ("z", 1.0)]}
    runs = {d: Run.from_scores(d, lists) for d in ("b", "a", "c")}
    ranking = baselines.qpp_fusion(runs)
    assert ranking.dr_ids == ["a", "b", "c"]
    assert set(ranking.scores.values()) == {1.0}


def test_qpp_fusion_ranks_contrarian_last():
    agreeing = {f"q{i}": [(f"d{j}", 10.0 - j) for j in range(10)]
                for i in range(3)}
    contrarian = {q: [(d, -s) for d, s in docs]
                  for q, docs in agreeing.items()}
    runs = {f"r{i}": Run.from_scores(f"r{i}", agreeing) for i in range(5)}
    runs["odd"] = Run.from_scores("odd", contrarian)
    assert baselines.qpp_fusion(runs).dr_ids[-1] == "odd"


def test_qpp_fusion_ignores_score_magnitudes():
    runs = runs_with(a=[5.0, 3.0, 2.0, 1.0], b=[0.9, 0.95, 0.1, 0.05])
    mutated = {d: r.with_scores(lambda s: 7 * s + 3) for d, r in runs.items()}
    assert baselines.qpp_fusion(mutated) == baselines.qpp_fusion(runs)


class WeightedTermBackend:
    """Live backend scoring a document by the summed weights of the query
    terms it knows."""

    live = True

    def __init__(self, weights):
        self.weights = weights

    def search(self, query, top_k):
        scores = [(d, float(sum(w.get(t, 0.0) for t in query.text.split())))
                  for d, w in self.weights.items()]
        scores.sort(key=lambda p: (-p[1], p[0]))
        return ScoredList(query.query_id, tuple(scores[:top_k]), top_k)


def test_query_alteration_hand_computed():
    sensitive = WeightedTermBackend({"d1": {"a": 1, "b": 2, "c": 3},
                                     "d2": {"a": 3, "b": 1, "c": 0}})
    insensitive = WeightedTermBackend({"d1": {}, "d2": {}})
    cfg = QppConfig(alteration_variants=2, seed=0)
    ranking = baselines.query_alteration(
        {"sensitive": sensitive, "insensitive": insensitive},
        [Query("q1", "a b c")], cfg)
    # variants "b c" and "a c": d1 scores 5, 4 and d2 scores 1, 3
    assert ranking.scores["sensitive"] == pytest.approx(-0.75)
    assert ranking.scores["insensitive"] == 0.0
    assert ranking.dr_ids == ["insensitive", "sensitive"]


def test_query_alteration_single_token_queries_tie():
    backends = {name: WeightedTermBackend({"d1": {"a": w}, "d2": {"a": 1}})
                for name, w in (("y", 2.0), ("x", 5.0))}
    ranking = baselines.query_alteration(backends, [Query("q", "a")],
                                         QppConfig())
    assert ranking.dr_ids == ["x", "y"]
    assert set(ranking.scores.values()) == {0.0}


def test_query_alteration_needs_live_backends():
    run = Run.from_scores("r", {"q": [("d", 1.0)]})
    with pytest.raises(UnsupportedBaseline):
        baselines.query_alteration({"r": RunFileBackend(run)},
                                   [Query("q", "a b")], QppConfig())
