"""Reference computations written without looking at the library's internals.

Each function restates a rule from first principles so tests can compare the
library against it exhaustively or at fixed points.
"""

from __future__ import annotations

import itertools
from fractions import Fraction

ABSTAIN = None


def count_votes(votes, min_coverage=2, min_votes=None):
    """One dimension, one vote per annotator ('P', 'N' or None for not addressed).

    Returns (winner or None, confidence as Fraction or None, logged, resolution).
    """
    cast = [v for v in votes if v is not ABSTAIN]
    p = cast.count("P")
    n = cast.count("N")
    logged = p > 0 and n > 0
    winner = None
    if len(cast) >= min_coverage and p != n:
        top, top_count = ("P", p) if p > n else ("N", n)
        if min_votes is None:
            if 2 * top_count > len(cast):
                winner = top
        elif top_count >= min_votes:
            winner = top
    conf = Fraction(max(p, n), len(cast)) if winner else None
    resolution = None
    if logged:
        resolution = "consensus" if winner else "dropped"
    return winner, conf, logged, resolution


def all_patterns(k, with_abstain=False):
    choices = ("P", "N", ABSTAIN) if with_abstain else ("P", "N")
    return itertools.product(choices, repeat=k)


def majority_probability(n, p):
    """P(strictly more than half of n independent voters are right), each right with prob p."""
    total = 0.0
    for right in range(n + 1):
        if 2 * right > n:
            ways = 1
            for i in range(right):
                ways = ways * (n - i) // (i + 1)
            total += ways * p ** right * (1 - p) ** (n - right)
    return total


def pairwise_agreement(labels):
    """Fraction of unordered rater pairs that agree on one item."""
    pairs = [(a, b) for i, a in enumerate(labels) for b in labels[i + 1:]]
    return Fraction(sum(a == b for a, b in pairs), len(pairs))


def naive_recount(rows):
    """rows: (group, truth, prediction). Returns ({group: percent}, macro percent)."""
    totals, hits = {}, {}
    for group, truth, pred in rows:
        totals[group] = totals.get(group, 0) + 1
        hits[group] = hits.get(group, 0) + (1 if pred == truth else 0)
    acc = {g: 100.0 * hits[g] / totals[g] for g in totals}
    return acc, (sum(acc.values()) / len(acc) if acc else None)
