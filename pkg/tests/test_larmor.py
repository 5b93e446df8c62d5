import json
import math
import os

import numpy as np
import pydantic
import pytest

from drselect.core import larmor
from drselect.core import llm_gateway as llm
from drselect.core.data_model import (BackendSpec, DrPool, DrRanking, Qrels,
                                      Query, Run, write_queries)
from drselect.core.errors import (MissingArtifact, MissingQuery,
                                  StaleArtifact, ValidationError)
from drselect.core.fusion import rrf_fuse
from drselect.core.larmor import (GeneratedQuerySet, LarmorPipeline,
                                  PipelineArtifacts, PipelineConfig)
from drselect.core.llm_gateway import MockLlm
from drselect.core.metrics import kendall_tau
from drselect.core.retrieval import RunFileBackend, build_backend
from helpers import NOISE_LEVELS, FailingLlm

SMALL = PipelineConfig(k=20, l=5, m=20, retrieval_depth=50)


def lexical_pool():
    return DrPool(tuple(
        (dr_id, BackendSpec("lexical", options={"noise": noise,
                                                "noise_seed": i}))
        for i, (dr_id, noise) in enumerate(NOISE_LEVELS.items())))


def lexical_backends(pool, index):
    return {dr_id: build_backend(dr_id, spec, index=index)
            for dr_id, spec in pool.retrievers}


def make_pipeline(corpus, index, cfg=SMALL, llm=None, run_dir=None,
                  with_backends=True):
    pool = lexical_pool()
    backends = lexical_backends(pool, index) if with_backends else {}
    return LarmorPipeline(corpus, pool, cfg,
                          llm if llm is not None else MockLlm(0, index),
                          backends, run_dir=run_dir)


@pytest.fixture(scope="module")
def full_run(tmp_path_factory, world_corpus, world_index):
    run_dir = str(tmp_path_factory.mktemp("larmor"))
    pipeline = make_pipeline(world_corpus, world_index, run_dir=run_dir)
    ranking = pipeline.select("FULL")
    return pipeline, ranking, run_dir


# retrievers ordered by how little noise they add
NOISE_ORDER = DrRanking.from_scores(
    {dr_id: -noise for dr_id, noise in NOISE_LEVELS.items()}, "noise")


def seeded_trial(corpus, index, seed):
    pool = DrPool(tuple(
        (dr_id, BackendSpec("lexical", options={"noise": noise,
                                                "noise_seed": 5 * seed + i}))
        for i, (dr_id, noise) in enumerate(NOISE_LEVELS.items())))
    cfg = SMALL.model_copy(update={"seed": seed})
    pipeline = LarmorPipeline(corpus, pool, cfg, MockLlm(seed, index),
                              lexical_backends(pool, index))
    full = pipeline.select("FULL")
    stage_rankings = pipeline.artifacts.stage_rankings
    return full.top, {stage: kendall_tau(ranking, NOISE_ORDER)
                      for stage, ranking in stage_rankings.items()}


def test_selection_over_a_hundred_seeds(world_corpus, world_index):
    picks = 0
    taus = {stage: [] for stage in larmor.STAGES}
    for seed in range(100):
        top, per_stage = seeded_trial(world_corpus, world_index, seed)
        picks += top == "lex-s0"
        for stage, tau in per_stage.items():
            taus[stage].append(tau)
    means = {stage: float(np.mean(values)) for stage, values in taus.items()}
    assert all(len(values) == 100 for values in taus.values())
    assert picks >= 95
    assert means["FULL"] >= 0.8
    for stage in ("Q", "QF", "QFJ", "QFR"):
        assert means[stage] >= 0.6, stage
        assert means["FULL"] >= means[stage] - 0.01, stage


def test_config_validation():
    with pytest.raises(pydantic.ValidationError):
        PipelineConfig(m=60, retrieval_depth=50)
    with pytest.raises(pydantic.ValidationError):
        PipelineConfig(stage="QX")
    with pytest.raises(pydantic.ValidationError):
        PipelineConfig(k=0)
    with pytest.raises(pydantic.ValidationError):
        SMALL.k = 3
    assert SMALL.measure.name == "ndcg@10"


def test_selects_the_noise_free_retriever(full_run):
    _, ranking, _ = full_run
    assert ranking.method_id == "larmor"
    assert ranking.top == "lex-s0"
    assert sorted(ranking.dr_ids) == sorted(NOISE_LEVELS)


def test_every_stage_is_recorded(full_run):
    pipeline, _, run_dir = full_run
    assert set(pipeline.artifacts.stage_rankings) == set(larmor.STAGES)
    for stage, method in larmor.METHOD_OF_STAGE.items():
        assert os.path.exists(os.path.join(run_dir, f"ranking_{method}.json"))
        stored = larmor.read_stage_ranking(run_dir, stage)
        assert stored.dr_ids == pipeline.artifacts.stage_rankings[stage].dr_ids


def test_generated_queries_link_to_sampled_documents(full_run):
    pipeline, _, _ = full_run
    generated = pipeline.artifacts.generated_queries
    assert len(generated.queries) == SMALL.k * SMALL.l
    assert len(set(generated.sampled_doc_ids)) == SMALL.k
    assert {q.source_doc_id for q in generated.queries} == \
        set(generated.sampled_doc_ids)
    assert len(set(generated.query_ids)) == len(generated.queries)


def test_fused_lists_are_bounded_and_come_from_the_runs(full_run):
    pipeline, _, _ = full_run
    a = pipeline.artifacts
    for query_id, fused in a.fused_rankings.items():
        ids = fused.item_ids
        assert 0 < len(ids) <= SMALL.m
        assert len(set(ids)) == len(ids)
        retrieved = set().union(*(run.doc_ids(query_id)
                                  for run in a.runs.values()))
        assert set(ids) <= retrieved


def test_judgments_and_reference_lists_cover_the_fused_lists(full_run):
    pipeline, _, _ = full_run
    a = pipeline.artifacts
    assert sorted(a.pseudo_qrels.query_ids) == sorted(a.fused_rankings)
    for query_id, fused in a.fused_rankings.items():
        judged = a.pseudo_qrels.for_query(query_id)
        assert set(judged) == set(fused.item_ids)
        assert set(judged.values()) <= {0, 1}
        assert sorted(a.reference_lists[query_id]) == sorted(fused.item_ids)


def test_stats_are_written(full_run):
    pipeline, _, run_dir = full_run
    with open(os.path.join(run_dir, "pipeline_stats.json")) as f:
        stats = json.load(f)
    assert stats["generation"]["queries"] == SMALL.k * SMALL.l
    assert stats["judge"]["judged_pairs"] == sum(
        f.depth for f in pipeline.artifacts.fused_rankings.values())
    assert stats["rerank"]["queries"] == SMALL.k * SMALL.l
    assert stats["rerank"]["comparator_calls"] > 0


def test_stage_q_never_judges(world_corpus, world_index, tmp_path):
    llm = MockLlm(0, world_index)
    pipeline = make_pipeline(world_corpus, world_index, llm=llm,
                             run_dir=str(tmp_path))
    ranking = pipeline.select("Q")
    assert ranking.method_id == "q"
    assert ranking.top == "lex-s0"
    assert llm.calls["judge"] == 0
    assert llm.calls["setwise"] == 0
    assert not os.path.exists(tmp_path / "fused.trec")


def test_stage_rankings_ignore_score_magnitudes(full_run):
    pipeline, _, _ = full_run
    a = pipeline.artifacts
    shifted = PipelineArtifacts(
        generated_queries=a.generated_queries,
        runs={d: r.with_scores(lambda s: 3 * s + 1) for d, r in a.runs.items()},
        pseudo_qrels=a.pseudo_qrels,
        reference_lists=a.reference_lists)
    shifted.fused_rankings = larmor.build_fused(shifted, pipeline.pool, SMALL)
    assert {q: f.item_ids for q, f in shifted.fused_rankings.items()} == \
        {q: f.item_ids for q, f in a.fused_rankings.items()}
    for stage_fn, stage in ((larmor.stage_q, "Q"), (larmor.stage_qf, "QF"),
                            (larmor.stage_qfj, "QFJ"),
                            (larmor.stage_qfr, "QFR")):
        assert stage_fn(shifted, pipeline.pool, SMALL) == \
            a.stage_rankings[stage]


def test_completed_run_resumes_without_llm(full_run, world_corpus,
                                           world_index):
    _, ranking, run_dir = full_run
    resumed = make_pipeline(world_corpus, world_index, llm=FailingLlm(),
                            run_dir=run_dir, with_backends=False)
    assert resumed.select("FULL") == ranking


def test_interrupted_run_resumes_from_last_step(full_run, world_corpus,
                                                world_index, tmp_path):
    _, ranking, _ = full_run
    first = make_pipeline(world_corpus, world_index, run_dir=str(tmp_path))
    first.gen_queries()
    first.retrieve()
    first.fuse()
    first.judge()
    llm = MockLlm(0, world_index)
    second = make_pipeline(world_corpus, world_index, llm=llm,
                           run_dir=str(tmp_path), with_backends=False)
    assert second.select("FULL") == ranking
    assert llm.calls["query_gen"] == 0
    assert llm.calls["judge"] == 0
    assert llm.calls["setwise"] > 0


def test_same_seed_writes_identical_files(full_run, world_corpus, world_index,
                                          tmp_path):
    _, _, run_dir = full_run
    make_pipeline(world_corpus, world_index,
                  run_dir=str(tmp_path)).select("FULL")
    for root, _, files in os.walk(run_dir):
        for name in files:
            path = os.path.join(root, name)
            other = os.path.join(tmp_path, os.path.relpath(path, run_dir))
            with open(path, "rb") as a, open(other, "rb") as b:
                assert a.read() == b.read(), name


def test_steps_out_of_order_name_the_missing_step(world_corpus, world_index,
                                                  tmp_path):
    def fresh():
        return make_pipeline(world_corpus, world_index, run_dir=str(tmp_path))

    with pytest.raises(MissingArtifact) as err:
        fresh().fuse()
    assert err.value.stage == "gen-queries"
    fresh().gen_queries()
    with pytest.raises(MissingArtifact) as err:
        fresh().fuse()
    assert err.value.stage == "retrieve"
    fresh().retrieve()
    with pytest.raises(MissingArtifact) as err:
        fresh().judge()
    assert err.value.stage == "fuse"
    fresh().fuse()
    assert fresh().judge()


def test_scoring_without_llm_artifacts():
    a = PipelineArtifacts(generated_queries=GeneratedQuerySet(
        [Query("q1", "x", "a")], ["a"]))
    with pytest.raises(MissingArtifact) as err:
        larmor.stage_qfj(a, DrPool(()), SMALL)
    assert err.value.stage == "judge"
    with pytest.raises(MissingArtifact) as err:
        larmor.stage_qfr(a, DrPool(()), SMALL)
    assert err.value.stage == "rerank"


def two_retriever_artifacts():
    queries = [Query("q1", "alpha", "a"), Query("q2", "beta", "b")]
    runs = {"r1": Run.from_scores("r1", {"q1": [("a", 2.0), ("x", 1.0)],
                                         "q2": [("b", 2.0), ("y", 1.0)]}),
            "r2": Run.from_scores("r2", {"q1": [("x", 2.0), ("a", 1.0)],
                                         "q2": [("y", 1.0)]})}
    pool = DrPool((("r1", BackendSpec("lexical")),
                   ("r2", BackendSpec("lexical"))))
    artifacts = PipelineArtifacts(
        generated_queries=GeneratedQuerySet(queries, ["a", "b"]), runs=runs)
    return artifacts, pool


def test_stage_q_by_hand():
    artifacts, pool = two_retriever_artifacts()
    ranking = larmor.stage_q(artifacts, pool, SMALL)
    assert ranking.dr_ids == ["r1", "r2"]
    assert ranking.scores["r1"] == 1.0
    assert ranking.scores["r2"] == pytest.approx(0.5 / math.log2(3))


def test_stage_qf_by_hand():
    artifacts, pool = two_retriever_artifacts()
    artifacts.fused_rankings = {"q1": rrf_fuse([["a", "x"]]),
                                "q2": rrf_fuse([["b", "y"]])}
    ranking = larmor.stage_qf(artifacts, pool, SMALL)
    assert ranking.scores["r1"] == 1.0
    assert ranking.scores["r2"] < 1.0


def test_build_fused_needs_every_query():
    artifacts, pool = two_retriever_artifacts()
    artifacts.runs["r2"] = Run.from_scores("r2", {"q1": [("a", 1.0)]})
    with pytest.raises(MissingQuery) as err:
        larmor.build_fused(artifacts, pool, SMALL)
    assert (err.value.dr_id, err.value.query_id) == ("r2", "q2")


def test_build_fused_truncates_to_m():
    artifacts, pool = two_retriever_artifacts()
    fused = larmor.build_fused(artifacts, pool,
                               PipelineConfig(m=1, retrieval_depth=1))
    assert fused["q1"].item_ids == ["a"]
    assert fused["q2"].item_ids == ["y"]


def test_duplicate_generated_queries_are_counted():
    generated = GeneratedQuerySet([Query("a#q1", "cats", "a"),
                                   Query("a#q2", "cats", "a"),
                                   Query("b#q1", "dogs", "b")], ["a", "b"])
    assert generated.duplicates == 1
    assert generated.query_ids == ["a#q1", "a#q2", "b#q1"]


def test_run_file_missing_a_query(tiny_corpus, tmp_path):
    pool = DrPool((("r1", BackendSpec("lexical")),
                   ("r2", BackendSpec("lexical"))))
    pipeline = LarmorPipeline(
        tiny_corpus, pool, PipelineConfig(k=2, l=1, m=2, retrieval_depth=5),
        MockLlm(), {"r1": RunFileBackend(Run("r1", {})),
                    "r2": RunFileBackend(Run("r2", {}))})
    pipeline.gen_queries()
    with pytest.raises(MissingQuery) as err:
        pipeline.retrieve()
    assert err.value.dr_id == "r1"


def test_run_larmor_needs_two_retrievers(tiny_corpus):
    pool = DrPool((("only", BackendSpec("lexical")),))
    with pytest.raises(ValidationError):
        larmor.run_larmor(tiny_corpus, pool, SMALL, MockLlm(), {})


def test_run_larmor_returns_requested_stage(tiny_corpus):
    pool = DrPool((("a", BackendSpec("lexical", options={"noise": 0.0})),
                   ("b", BackendSpec("lexical", options={"noise": 5.0}))))
    backends = {dr_id: build_backend(dr_id, spec, corpus=tiny_corpus)
                for dr_id, spec in pool.retrievers}
    cfg = PipelineConfig(k=2, l=2, m=4, retrieval_depth=4, stage="QF")
    ranking, artifacts = larmor.run_larmor(tiny_corpus, pool, cfg, MockLlm(),
                                           backends)
    assert ranking.method_id == "qf"
    assert set(artifacts.stage_rankings) == {"QF"}


def test_stats_sections_merge(tmp_path):
    run_dir = larmor.RunDirectory(str(tmp_path))
    run_dir.update_stats("generation", {"queries": 3})
    run_dir.update_stats("judge", {"relevant": 1})
    stats = json.loads(run_dir.read("pipeline_stats.json"))
    assert stats == {"generation": {"queries": 3}, "judge": {"relevant": 1}}


def test_pseudo_qrels_are_binary_and_include_source(tiny_corpus):
    a = PipelineArtifacts(generated_queries=GeneratedQuerySet(
        [Query("d1#q1", "zymurgy yeast", "d1")], ["d1"]))
    a.fused_rankings = {"d1#q1": rrf_fuse([["d3", "d1", "d2"]])}
    qrels = larmor.judge_fused(a, tiny_corpus, MockLlm(),
                               llm.load_template(llm.Task.JUDGE))
    assert qrels == Qrels({"d1#q1": {"d1": 1, "d2": 0, "d3": 0}})


def test_checkpoints_need_a_matching_record(tmp_path):
    run_dir = larmor.RunDirectory(str(tmp_path))
    text = "q1 Q0 a 1 1.0 fused\n"
    run_dir.write(larmor.FUSED, text, ["q1", "q2"])
    assert run_dir.complete(larmor.FUSED)
    assert run_dir.load(larmor.FUSED, "fuse", ["q2", "q1"]) == text
    with pytest.raises(StaleArtifact) as err:
        run_dir.load(larmor.FUSED, "fuse", ["q1"])
    assert err.value.stage == "fuse"
    assert isinstance(err.value, MissingArtifact)

    (tmp_path / larmor.FUSED).write_text(text[:8])
    assert not run_dir.complete(larmor.FUSED)
    assert run_dir.load(larmor.FUSED, "fuse", ["q1", "q2"]) is None
    run_dir.write(larmor.PSEUDO_QRELS, "q1 0 a 1\n")
    assert not run_dir.complete(larmor.PSEUDO_QRELS)

    run_dir.remove([larmor.FUSED, larmor.PSEUDO_QRELS,
                    larmor.REFERENCE_LISTS])
    assert not (tmp_path / larmor.FUSED).exists()
    assert not (tmp_path / larmor.PSEUDO_QRELS).exists()
    assert json.loads(run_dir.read("artifacts.json")) == {}
    assert not list(tmp_path.glob("*.tmp"))


def test_regenerated_queries_invalidate_later_steps(world_corpus,
                                                    world_index, tmp_path):
    first = make_pipeline(world_corpus, world_index, run_dir=str(tmp_path))
    old_ids = first.gen_queries().query_ids
    first.retrieve()
    first.fuse()

    reseeded = SMALL.model_copy(update={"seed": 1})
    second = make_pipeline(world_corpus, world_index, cfg=reseeded,
                           llm=MockLlm(1, world_index), run_dir=str(tmp_path))
    generated = second.gen_queries(force=True)
    assert set(generated.query_ids) != set(old_ids)
    assert not (tmp_path / "fused.trec").exists()
    assert not list((tmp_path / "runs").glob("*.trec"))

    runs = second.retrieve()
    assert all(runs["lex-s0"].doc_ids(q) for q in generated.query_ids)
    with open(tmp_path / "runs" / "lex-s0.trec") as f:
        assert {line.split()[0] for line in f} == set(generated.query_ids)
    ranking = larmor.stage_q(second.artifacts, second.pool, reseeded)
    assert ranking.top == "lex-s0"
    assert ranking.scores["lex-s0"] > 0.8


def test_runs_for_other_queries_are_stale(world_corpus, world_index,
                                          tmp_path):
    first = make_pipeline(world_corpus, world_index, run_dir=str(tmp_path))
    first.gen_queries()
    first.retrieve()
    other = make_pipeline(world_corpus, world_index,
                          cfg=SMALL.model_copy(update={"seed": 1}),
                          llm=MockLlm(1, world_index)).gen_queries()
    larmor.RunDirectory(str(tmp_path)).write(
        larmor.QUERIES, write_queries(other.queries), other.query_ids)

    resumed = make_pipeline(world_corpus, world_index, run_dir=str(tmp_path))
    with pytest.raises(StaleArtifact) as err:
        resumed.retrieve()
    assert err.value.stage == "retrieve"
    assert err.value.path == "runs/lex-s0.trec"


def test_forced_retrieval_drops_the_fused_lists(world_corpus, world_index,
                                                tmp_path):
    pipeline = make_pipeline(world_corpus, world_index, run_dir=str(tmp_path))
    pipeline.gen_queries()
    pipeline.retrieve()
    pipeline.fuse()
    pipeline.judge()
    pipeline.retrieve(force=True)
    assert pipeline.artifacts.fused_rankings == {}
    assert pipeline.artifacts.pseudo_qrels is None
    assert not (tmp_path / "fused.trec").exists()
    assert not (tmp_path / "pseudo_qrels.txt").exists()
    assert (tmp_path / "queries.jsonl").exists()

    resumed = make_pipeline(world_corpus, world_index, run_dir=str(tmp_path),
                            with_backends=False)
    with pytest.raises(MissingArtifact) as err:
        resumed.judge()
    assert err.value.stage == "fuse"


def test_truncated_run_is_retrieved_again(world_corpus, world_index,
                                          tmp_path):
    pipeline = make_pipeline(world_corpus, world_index, run_dir=str(tmp_path))
    pipeline.gen_queries()
    pipeline.retrieve()
    path = tmp_path / "runs" / "lex-s0.trec"
    complete = path.read_text()
    lines = complete.splitlines(keepends=True)
    path.write_text("".join(lines[:len(lines) // 2]))

    stalled = make_pipeline(world_corpus, world_index, run_dir=str(tmp_path),
                            with_backends=False)
    with pytest.raises(MissingArtifact) as err:
        stalled.fuse()
    assert err.value.stage == "retrieve"

    resumed = make_pipeline(world_corpus, world_index, run_dir=str(tmp_path))
    runs = resumed.retrieve()
    assert path.read_text() == complete
    assert all(runs["lex-s0"].doc_ids(q)
               for q in resumed.artifacts.generated_queries.query_ids)
    assert not list((tmp_path / "runs").glob("*.tmp"))
