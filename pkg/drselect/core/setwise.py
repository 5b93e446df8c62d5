"""Heap sort driven by a set-wise "pick the best" comparator.

The heap is (set_size - 1)-ary, so every sift step shows the comparator a
parent together with its children, at most ``set_size`` items, and asks
for the index of the most relevant one. Extracting the root repeatedly
yields the items best first.
"""
from __future__ import annotations

from typing import Callable, Sequence, TypeVar

T = TypeVar("T")


def heap_sort_setwise(items: Sequence[T],
                      pick_best: Callable[[list[T]], int],
                      set_size: int = 3) -> list[T]:
    """
    Sort ``items`` best first using only set-wise comparisons.

    Parameters
    ----------
    items : sequence
        Distinct items to sort.
    pick_best : callable
        Receives a list of 2..set_size items, returns the index of the best.
        Indices outside the list are treated as "keep the parent".
    set_size : int, optional
        Items shown per comparison. The default is 3.

    Returns
    -------
    list
        A permutation of ``items``.
    """
    if set_size < 2:
        raise ValueError("set_size must be >= 2")
    arity = set_size - 1
    heap = list(range(len(items)))

    def sift_down(node, size):
        while True:
            first = arity * node + 1
            if first >= size:
                return
            group = [node] + list(range(first, min(first + arity, size)))
            best = pick_best([items[heap[g]] for g in group])
            if not isinstance(best, int) or not 0 <= best < len(group):
                best = 0
            if best == 0:
                return
            child = group[best]
            heap[node], heap[child] = heap[child], heap[node]
            node = child

    n = len(heap)
    for node in range((n - 2) // arity, -1, -1):
        sift_down(node, n)
    ordered = []
    for size in range(n, 0, -1):
        ordered.append(items[heap[0]])
        heap[0] = heap[size - 1]
        sift_down(0, size - 1)
    return ordered
