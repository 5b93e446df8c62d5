"""Reciprocal rank fusion (RRF) of document rankings and of retriever
rankings. Only positions are used, never scores."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

from drselect.core.data_model import DrRanking
from drselect.core.errors import IdSetMismatch, ValidationError
from drselect.processing import config


@dataclass(frozen=True)
class FusedRanking:
    """(item_id, rrf_score) pairs, best first, ties by item_id."""

    entries: tuple[tuple[str, float], ...]

    @property
    def item_ids(self) -> list[str]:
        return [item for item, _ in self.entries]

    @property
    def depth(self) -> int:
        return len(self.entries)


def rrf_fuse(rankings: Sequence[Sequence[str]], k_rrf: float = config.rrf_k,
             depth: int | None = None) -> FusedRanking:
    """
    Fuse ranked item lists: score(item) = sum over lists of 1/(k_rrf + rank).

    Parameters
    ----------
    rankings : sequence of sequences of str
        Ranked lists, best first, each without repeats.
    k_rrf : float, optional
        RRF constant. The default is 60.
    depth : int, optional
        Truncate the fused list to this length. The default keeps all items.

    Returns
    -------
    FusedRanking
    """
    if not rankings:
        raise ValidationError("rrf_fuse needs at least one ranking")
    if k_rrf <= 0:
        raise ValidationError("k_rrf must be positive")
    ranks = defaultdict(list)
    for ranking in rankings:
        if len(set(ranking)) != len(ranking):
            raise ValidationError("an input ranking repeats an item")
        for rank, item in enumerate(ranking, start=1):
            ranks[item].append(rank)
    # summing in rank order keeps scores bit-identical under input permutation
    fused = [(item, sum(1.0 / (k_rrf + r) for r in sorted(item_ranks)))
             for item, item_ranks in ranks.items()]
    fused.sort(key=lambda e: (-e[1], e[0]))
    if depth is not None:
        fused = fused[:depth]
    return FusedRanking(tuple(fused))


def fuse_dr_rankings(rankings: Sequence[DrRanking],
                     k_rrf: float = config.rrf_k) -> DrRanking:
    """Merge retriever rankings by RRF over their positions."""
    if not rankings:
        raise ValidationError("nothing to fuse")
    reference = rankings[0].dr_ids
    for ranking in rankings[1:]:
        if set(ranking.dr_ids) != set(reference):
            raise IdSetMismatch("fused rankings cover different retrievers",
                                reference, ranking.dr_ids)
    fused = rrf_fuse([r.dr_ids for r in rankings], k_rrf)
    method_id = "rrf(" + "+".join(sorted(r.method_id for r in rankings)) + ")"
    return DrRanking.from_scores(dict(fused.entries), method_id)
