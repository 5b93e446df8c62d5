"""Ground-truth retriever rankings from human qrels and evaluation of the
selection methods against them (Kendall tau and delta_e)."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from drselect.core.data_model import DrRanking, Qrels, Run
from drselect.core.errors import ValidationError
from drselect.core.metrics import EvalMeasure, delta_e, kendall_tau, mean_metric

logger = logging.getLogger(__name__)

REPORT_FORMATS = ("csv", "json", "md")


@dataclass(frozen=True)
class GroundTruth:
    """Mean measure of every retriever on the real queries of a collection."""

    scores: Mapping[str, float]
    measure: EvalMeasure = field(default_factory=EvalMeasure)

    @property
    def ranking(self) -> DrRanking:
        return DrRanking.from_scores(self.scores, "oracle")

    @property
    def best(self) -> str:
        return self.ranking.top


def ground_truth(runs: Mapping[str, Run], qrels: Qrels,
                 measure: EvalMeasure | None = None,
                 dr_ids: Sequence[str] | None = None) -> GroundTruth:
    """Score every retriever's run on the real queries against the qrels."""
    measure = measure or EvalMeasure()
    dr_ids = list(dr_ids) if dr_ids is not None else list(runs)
    missing = [d for d in dr_ids if d not in runs]
    if missing:
        raise ValidationError(f"no ground-truth run for {missing}")
    if not dr_ids:
        raise ValidationError("ground truth needs at least one run")
    return GroundTruth({d: mean_metric(runs[d], qrels, measure)
                        for d in dr_ids}, measure)


class MethodResult(NamedTuple):
    kendall_tau: float
    delta_e: float
    selected: str


def evaluate_method(predicted: DrRanking, gt: GroundTruth) -> MethodResult:
    return MethodResult(kendall_tau(predicted, gt.ranking),
                        delta_e(gt.scores, predicted), predicted.top)


@dataclass
class MethodReport:
    """Results of one method over every collection it was evaluated on."""

    method_id: str
    results: dict[str, MethodResult] = field(default_factory=dict)

    def average(self, key: str) -> float:
        """Unweighted mean over the collections present."""
        return float(np.mean([getattr(r, key) for r in self.results.values()]))


def build_reports(rankings: Mapping[str, Mapping[str, DrRanking]],
                  truths: Mapping[str, GroundTruth]) -> list[MethodReport]:
    """
    Evaluate rankings of several collections.

    Parameters
    ----------
    rankings : mapping
        collection -> method_id -> predicted DrRanking.
    truths : mapping
        collection -> GroundTruth.

    Returns
    -------
    list of MethodReport
        One per method, in order of first appearance.
    """
    reports = {}
    for collection, by_method in rankings.items():
        if collection not in truths:
            raise ValidationError(f"no ground truth for '{collection}'")
        for method, predicted in by_method.items():
            report = reports.setdefault(method, MethodReport(method))
            report.results[collection] = evaluate_method(predicted,
                                                         truths[collection])
    return list(reports.values())


def _collections(reports):
    return list(dict.fromkeys(c for r in reports for c in r.results))


def _rows(reports, key, scale, digits):
    """Table rows for one quantity: method, one cell per collection, Avrg."""
    collections = _collections(reports)
    rows = []
    for report in reports:
        cells = [f"{getattr(report.results[c], key) * scale:.{digits}f}"
                 if c in report.results else "-" for c in collections]
        rows.append([report.method_id, *cells,
                     f"{report.average(key) * scale:.{digits}f}"])
    return rows


def _tables(reports):
    # delta_e in percentage points of the measure
    return [("kendall_tau", "Kendall tau", _rows(reports, "kendall_tau",
                                                 1.0, 3)),
            ("delta_e", "Delta e", _rows(reports, "delta_e", 100.0, 2))]


def report_csv(reports: Sequence[MethodReport]) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["table", "method", *_collections(reports), "Avrg"])
    for key, _, rows in _tables(reports):
        for row in rows:
            writer.writerow([key, *row])
    return out.getvalue()


def report_json(reports: Sequence[MethodReport]) -> str:
    payload = {"collections": _collections(reports), "methods": {}}
    for report in reports:
        payload["methods"][report.method_id] = {
            "results": {c: {"kendall_tau": r.kendall_tau,
                            "delta_e": r.delta_e,
                            "selected": r.selected}
                        for c, r in report.results.items()},
            "avg": {"kendall_tau": report.average("kendall_tau"),
                    "delta_e": report.average("delta_e")},
        }
    return json.dumps(payload, indent=1) + "\n"


def report_markdown(reports: Sequence[MethodReport]) -> str:
    header = ["Method", *_collections(reports), "Avrg"]
    lines = []
    for _, title, rows in _tables(reports):
        lines.append(f"## {title}")
        lines.append("")
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        for row in rows:
            lines.append("| " + " | ".join(row) + " |")
        lines.append("")
    return "\n".join(lines)


_WRITERS = {"csv": report_csv, "json": report_json, "md": report_markdown}


def emit_report(reports: Sequence[MethodReport], out_dir: str,
                formats: Sequence[str] = REPORT_FORMATS) -> list[str]:
    """Write ``report.{csv,json,md}``; returns the written paths."""
    if not reports:
        raise ValidationError("no method was evaluated")
    paths = []
    for fmt in formats:
        if fmt not in _WRITERS:
            raise ValidationError(f"unknown report format '{fmt}'")
        path = os.path.join(out_dir, f"report.{fmt}")
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(_WRITERS[fmt](reports))
        paths.append(path)
    logger.info("report written", extra={"methods": len(reports),
                                         "formats": list(formats)})
    return paths
