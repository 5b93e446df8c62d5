"""
Command line entry point.

Examples: python -m drselect select --method larmor --corpus corpus.jsonl
              --pool pool.json --llm mock --output-dir runs/scifact
          python -m drselect select --method wig --normalize
              --queries queries.jsonl --pool pool.json --output-dir runs/scifact
          python -m drselect evaluate --gt-qrels qrels.txt
              --queries queries.jsonl --pool pool.json --output-dir runs/scifact

Stage-wise LARMOR execution (each step is skipped when its artifacts exist,
unless --force is given):
          gen-queries -> retrieve -> fuse -> judge / rerank -> select

Exit codes: 0 success, 2 usage or contract violation, 3 backend unavailable.
"""
from __future__ import annotations

import argparse
import glob
import logging
import os
import sys
import traceback
from functools import cached_property

from drselect import __version__
from drselect.core import baselines
from drselect.core.data_model import (Qrels, Run, load_corpus,
                                      load_pool_manifest, load_queries,
                                      parse_qrels, read_ranking, write_ranking)
from drselect.core.errors import (BackendUnavailable, DrSelectError, LlmError,
                                  MissingQuery, ValidationError)
from drselect.core.evaluator import (build_reports, emit_report, ground_truth,
                                     report_markdown)
from drselect.core.larmor import METHOD_OF_STAGE, LarmorPipeline
from drselect.core.llm_gateway import HttpLlm, MockLlm
from drselect.core.retrieval import (LexicalIndex, RunFileBackend,
                                     batch_search, build_backend,
                                     run_from_results)
from drselect.processing import error_reporting
from drselect.processing.logs import configure_logging
from drselect.processing.run_config import RunConfig

logger = logging.getLogger(__name__)

STAGE_OF_METHOD = {method: stage for stage, method in METHOD_OF_STAGE.items()}
METHODS = (*STAGE_OF_METHOD, *baselines.METHODS)
STAGE_COMMANDS = ("gen-queries", "retrieve", "fuse", "judge", "rerank")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_BACKEND = 3


class Session:
    """Lazily loaded inputs of one command."""

    def __init__(self, cfg: RunConfig, force: bool = False):
        self.cfg = cfg
        self.force = force
        self.workers = cfg.workers or os.cpu_count()

    @cached_property
    def corpus(self):
        if not self.cfg.corpus:
            raise ValidationError("this command needs --corpus")
        with open(self.cfg.corpus, encoding="utf-8") as f:
            return load_corpus(f, name=self.collection)

    @property
    def collection(self) -> str:
        if self.cfg.collection:
            return self.cfg.collection
        if self.cfg.corpus:
            return os.path.splitext(os.path.basename(self.cfg.corpus))[0]
        return os.path.basename(os.path.normpath(self.cfg.output_dir))

    @cached_property
    def pool(self):
        if not self.cfg.pool:
            raise ValidationError("this command needs --pool")
        return load_pool_manifest(self.cfg.pool)

    @cached_property
    def index(self):
        return LexicalIndex(self.corpus)

    @cached_property
    def backends(self):
        backends = {}
        for dr_id, spec in self.pool.retrievers:
            index = self.index if spec.kind == "lexical" else None
            backends[dr_id] = build_backend(dr_id, spec, index=index)
        return backends

    @cached_property
    def llm(self):
        spec = self.cfg.llm
        if spec.kind == "mock":
            return MockLlm(seed=self.cfg.seed, index=self.index)
        return HttpLlm(spec.base_url, api_key_env=spec.api_key_env,
                       model_name=spec.model_name,
                       concurrency_cap=spec.concurrency_cap)

    @cached_property
    def queries(self):
        if not self.cfg.queries:
            raise ValidationError("this method needs --queries")
        with open(self.cfg.queries, encoding="utf-8") as f:
            return load_queries(f)

    def pipeline(self, needs_llm=True) -> LarmorPipeline:
        os.makedirs(self.cfg.output_dir, exist_ok=True)
        return LarmorPipeline(self.corpus, self.pool, self.cfg.pipeline,
                              self.llm if needs_llm else None,
                              self.backends, run_dir=self.cfg.output_dir,
                              workers=self.workers)

    def real_query_runs(self, depth: int) -> dict[str, Run]:
        """Run of every retriever over the real queries, at most ``depth``
        documents each."""
        runs = {}
        for dr_id, backend in self.backends.items():
            if isinstance(backend, RunFileBackend):
                entries = {}
                for query in self.queries:
                    if query.query_id not in backend.run.entries:
                        raise MissingQuery(dr_id, query.query_id)
                    entries[query.query_id] = \
                        backend.run.entries[query.query_id][:depth]
                runs[dr_id] = Run(dr_id, entries)
            else:
                results = batch_search(backend, self.queries, depth,
                                       self.workers)
                runs[dr_id] = run_from_results(dr_id, results.values())
        return runs

    def write_ranking(self, ranking) -> str:
        os.makedirs(self.cfg.output_dir, exist_ok=True)
        path = os.path.join(self.cfg.output_dir,
                            f"ranking_{ranking.method_id}.json")
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(write_ranking(ranking))
        return path


def _print_ranking(ranking):
    print(f"{ranking.method_id}: selected {ranking.top}")
    for rank, (dr_id, score) in enumerate(ranking.entries, start=1):
        print(f"  {rank:3d}  {dr_id:<30s} {score:.6f}")


def _baseline(session: Session, method: str):
    qpp = session.cfg.qpp
    if method in ("msmarco", "leaderboard"):
        if not session.cfg.msmarco_perf:
            raise ValidationError(f"method '{method}' needs --msmarco-perf")
        return baselines.msmarco_perf(session.cfg.msmarco_perf,
                                      session.pool.dr_ids, method=method)
    queries = session.queries
    if method == "alteration":
        return baselines.query_alteration(session.backends, queries, qpp,
                                          session.workers)
    runs = session.real_query_runs(max(qpp.top_k, qpp.norm_depth))
    query_ids = [q.query_id for q in queries]
    if method == "qpp-fusion":
        return baselines.qpp_fusion(runs, session.cfg.pipeline.k_rrf,
                                    session.cfg.pipeline.rbo_p, query_ids)
    index = session.index if method == "clarity" else None
    return baselines.predictor_ranking(method, runs, qpp, index=index,
                                       query_ids=query_ids)


def cmd_select(session: Session, args) -> int:
    method = args.method
    if method in STAGE_OF_METHOD:
        session.pool.require_selection()
        ranking = session.pipeline().select(STAGE_OF_METHOD[method])
    else:
        ranking = _baseline(session, method)
        session.write_ranking(ranking)
    _print_ranking(ranking)
    return EXIT_OK


def cmd_stage(session: Session, args) -> int:
    pipeline = session.pipeline(needs_llm=args.command in (
        "gen-queries", "judge", "rerank"))
    step = {"gen-queries": pipeline.gen_queries, "retrieve": pipeline.retrieve,
            "fuse": pipeline.fuse, "judge": pipeline.judge,
            "rerank": pipeline.rerank}[args.command]
    step(force=session.force)
    print(f"{args.command}: done ({session.cfg.output_dir})")
    return EXIT_OK


def cmd_evaluate(session: Session, args) -> int:
    if not session.cfg.gt_qrels:
        raise ValidationError("evaluate needs --gt-qrels")
    files = sorted(glob.glob(os.path.join(session.cfg.output_dir,
                                          "ranking_*.json")))
    if not files:
        raise ValidationError(
            f"no ranking files in '{session.cfg.output_dir}'")
    rankings = {}
    for path in files:
        method = os.path.basename(path)[len("ranking_"):-len(".json")]
        with open(path, encoding="utf-8") as f:
            rankings[method] = read_ranking(f.read(), method)
    with open(session.cfg.gt_qrels, encoding="utf-8") as f:
        qrels = parse_qrels(f)
    query_ids = {q.query_id for q in session.queries}
    qrels = Qrels({q: qrels.for_query(q) for q in qrels.query_ids
                   if q in query_ids})
    pipeline_cfg = session.cfg.pipeline
    gt = ground_truth(session.real_query_runs(pipeline_cfg.retrieval_depth),
                      qrels, pipeline_cfg.measure, session.pool.dr_ids)
    reports = build_reports({session.collection: rankings},
                            {session.collection: gt})
    emit_report(reports, session.cfg.output_dir)
    print(report_markdown(reports))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--corpus", help="corpus JSONL (_id, title, text)")
    common.add_argument("--collection", help="collection name in reports")
    common.add_argument("--pool", help="retriever pool manifest (JSON)")
    common.add_argument("--llm", help="'mock' or the LLM service base URL")
    common.add_argument("--output-dir", help="run directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int,
                        help="thread cap, defaults to the CPU count")
    common.add_argument("--queries", help="real queries JSONL, baselines "
                                          "and evaluation only")
    common.add_argument("--gt-qrels", help="human qrels for evaluation")
    common.add_argument("--msmarco-perf",
                        help="JSON {dr_id: score} for msmarco/leaderboard")
    common.add_argument("--normalize", action="store_true",
                        help="normalize score-based QPP predictors")
    common.add_argument("--force", action="store_true",
                        help="recompute artifacts that already exist")
    common.add_argument("--log-level")

    parser = argparse.ArgumentParser(
        prog="drselect", description="Dense retriever selection.",
        epilog=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    commands = parser.add_subparsers(dest="command", required=True)
    select = commands.add_parser("select", parents=[common],
                                 help="rank the retriever pool")
    select.add_argument("--method", required=True, choices=METHODS)
    for name in STAGE_COMMANDS:
        commands.add_parser(name, parents=[common],
                            help=f"LARMOR step '{name}'")
    commands.add_parser("evaluate", parents=[common],
                        help="score ranking files against human qrels")
    return parser


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    return cfg.with_overrides(
        seed=args.seed, normalize=args.normalize, llm=args.llm,
        corpus=args.corpus, collection=args.collection, pool=args.pool,
        output_dir=args.output_dir, workers=args.workers,
        queries=args.queries, gt_qrels=args.gt_qrels,
        msmarco_perf=args.msmarco_perf, log_level=args.log_level)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level or "INFO")
    try:
        cfg = _run_config(args)
        configure_logging(cfg.log_level)
        session = Session(cfg, force=args.force)
        if args.command == "select":
            return cmd_select(session, args)
        if args.command == "evaluate":
            return cmd_evaluate(session, args)
        return cmd_stage(session, args)
    except (BackendUnavailable, LlmError) as e:
        logger.error("backend unavailable", extra={"error": str(e)})
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BACKEND
    except (DrSelectError, FileNotFoundError) as e:
        logger.error("command failed", extra={"error": str(e)})
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:
        error_reporting.report_error(error_text=traceback.format_exc())
        raise


if __name__ == "__main__":
    sys.exit(main())
