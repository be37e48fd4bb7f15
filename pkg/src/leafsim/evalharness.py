"""Retrieval-quality evaluation: label homogeneity, relevance@K and mAP.

Two query/knowledge-base splits are supported: ``counterfactual`` queries
the labeled train+test pool with temporally later test samples, and
``unsupervised`` queries the train pool with unlabeled samples.

Relevance between two tag rankings is measured with exact match, Jaccard
overlap, or normalized edit similarity. Samples without a tag list are
treated as benign: two missing lists agree perfectly, a missing list
never agrees with a present one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

from .errors import ValidationError
from .model import Label, SampleMeta, Subset, TagRanking

__all__ = [
    "Scenario",
    "damerau_levenshtein",
    "relevance_em",
    "relevance_iou",
    "relevance_nes",
    "relevance_at_k",
    "average_precision",
    "mean_average_precision",
    "label_homogeneity",
    "HomogeneityReport",
    "GroupStats",
    "RelevanceReport",
    "aggregate_report",
    "nearest_rank_percentiles",
    "RELEVANCE_FNS",
    "PERCENTILES",
]

PERCENTILES: Tuple[int, ...] = (1, 10, 50, 95)

SCENARIO_SUBSETS = {
    "counterfactual": (Subset.TEST, frozenset({Subset.TRAIN, Subset.TEST})),
    "unsupervised": (Subset.UNLABELED, frozenset({Subset.TRAIN})),
}


@dataclass(frozen=True)
class Scenario:
    """A named query/knowledge-base row split over one databank."""

    name: str
    query_rows: Tuple[int, ...]
    kb_rows: Tuple[int, ...]

    def __post_init__(self) -> None:
        if self.name not in SCENARIO_SUBSETS:
            raise ValidationError(
                f"unknown scenario {self.name!r}; expected one of {sorted(SCENARIO_SUBSETS)}"
            )

    @classmethod
    def from_meta(cls, name: str, metas: Sequence[SampleMeta]) -> "Scenario":
        if name not in SCENARIO_SUBSETS:
            raise ValidationError(
                f"unknown scenario {name!r}; expected one of {sorted(SCENARIO_SUBSETS)}"
            )
        query_subset, kb_subsets = SCENARIO_SUBSETS[name]
        query_rows = tuple(m.row for m in metas if m.subset == query_subset)
        kb_rows = tuple(m.row for m in metas if m.subset in kb_subsets)
        return cls(name, query_rows, kb_rows)

    @classmethod
    def counterfactual(cls, metas: Sequence[SampleMeta]) -> "Scenario":
        """Queries are the test subset; the knowledge base is train + test."""
        return cls.from_meta("counterfactual", metas)

    @classmethod
    def unsupervised(cls, metas: Sequence[SampleMeta]) -> "Scenario":
        """Queries are the unlabeled subset; the knowledge base is train."""
        return cls.from_meta("unsupervised", metas)


# ---------------------------------------------------------------------------
# Relevance functions over tag rankings
# ---------------------------------------------------------------------------

def damerau_levenshtein(a: Sequence, b: Sequence) -> int:
    """Edit distance with insertions, deletions, substitutions and adjacent
    transpositions at unit cost (optimal string alignment)."""
    la, lb = len(a), len(b)
    if la == 0:
        return lb
    if lb == 0:
        return la
    prev2: List[int] = [0] * (lb + 1)
    prev1 = list(range(lb + 1))
    curr = [0] * (lb + 1)
    for i in range(1, la + 1):
        curr[0] = i
        for j in range(1, lb + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            best = min(prev1[j] + 1, curr[j - 1] + 1, prev1[j - 1] + cost)
            if i > 1 and j > 1 and a[i - 1] == b[j - 2] and a[i - 2] == b[j - 1]:
                best = min(best, prev2[j - 2] + 1)
            curr[j] = best
        prev2, prev1, curr = prev1, curr, prev2
    return prev1[lb]


def relevance_em(a: TagRanking, b: TagRanking) -> float:
    """1.0 iff the ranked name sequences are identical (order-sensitive)."""
    return 1.0 if a.names == b.names else 0.0


def relevance_iou(a: TagRanking, b: TagRanking) -> float:
    """Jaccard overlap of the tag-name sets; two empty rankings agree fully."""
    sa, sb = set(a.names), set(b.names)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def relevance_nes(a: TagRanking, b: TagRanking) -> float:
    """Edit similarity: 1 - distance / max length, penalizing rank shifts."""
    na, nb = a.names, b.names
    longest = max(len(na), len(nb))
    if longest == 0:
        return 1.0
    return 1.0 - damerau_levenshtein(na, nb) / longest


RELEVANCE_FNS: Dict[str, Callable[[TagRanking, TagRanking], float]] = {
    "em": relevance_em,
    "iou": relevance_iou,
    "nes": relevance_nes,
}


def _has_tags(ranking: Optional[TagRanking]) -> bool:
    return ranking is not None and len(ranking) > 0


def relevance_at_k(
    query_rank: Optional[TagRanking],
    hit_ranks: Sequence[Optional[TagRanking]],
    fn: Callable[[TagRanking, TagRanking], float],
) -> List[float]:
    """Score each hit against the query under the missing-tag rule.

    A sample without a tag list is taken to be benign: if both sides are
    missing their lists the relevance is 1.0, if exactly one side is
    missing it is 0.0, otherwise ``fn`` applies.
    """
    scores: List[float] = []
    q_present = _has_tags(query_rank)
    for hit in hit_ranks:
        h_present = _has_tags(hit)
        if not q_present and not h_present:
            scores.append(1.0)
        elif q_present != h_present:
            scores.append(0.0)
        else:
            scores.append(fn(query_rank, hit))
    return scores


# ---------------------------------------------------------------------------
# Mean average precision
# ---------------------------------------------------------------------------

def average_precision(relevances: Sequence[int]) -> float:
    """AP over binary relevances: mean precision at each relevant rank,
    relative to the number of relevant hits returned (0.0 if none)."""
    hits = 0
    total = 0.0
    for i, rel in enumerate(relevances, start=1):
        if rel not in (0, 1):
            raise ValidationError(f"relevance values must be 0 or 1, got {rel!r}")
        if rel == 1:
            hits += 1
            total += hits / i
    if hits == 0:
        return 0.0
    return total / hits


def mean_average_precision(relevances_per_query: Sequence[Sequence[int]]) -> float:
    if not relevances_per_query:
        raise ValidationError("mean average precision needs at least one query")
    return sum(average_precision(r) for r in relevances_per_query) / len(relevances_per_query)


# ---------------------------------------------------------------------------
# Label homogeneity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GroupStats:
    """Aggregate of one query group's per-query values."""

    n: int
    mean: float
    std: float
    percentiles: Tuple[float, ...] = ()

    def to_dict(self) -> dict:
        out = {"n": self.n, "mean": self.mean, "std": self.std}
        if self.percentiles:
            out["percentiles"] = list(self.percentiles)
        return out


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    n = len(values)
    mean = sum(values) / n
    var = sum((v - mean) ** 2 for v in values) / n  # population variance
    return mean, math.sqrt(var)


@dataclass(frozen=True)
class HomogeneityReport:
    """Per-group mean/std of same-label hit counts among the top K."""

    k: int
    groups: Mapping[str, GroupStats]
    n_truncated: int = 0
    n_skipped_unlabeled: int = 0

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "groups": {name: stats.to_dict() for name, stats in self.groups.items()},
            "n_truncated": self.n_truncated,
            "n_skipped_unlabeled": self.n_skipped_unlabeled,
        }


def label_homogeneity(
    query_labels: Sequence[Label],
    hit_labels: Sequence[Sequence[Label]],
    k: int,
) -> HomogeneityReport:
    """Count, per query, how many of its top-K hits share its label.

    Perfect retrieval gives mean K with std 0 in every group. Unlabeled
    queries are skipped (with a count); queries with fewer than K hits are
    evaluated over what they have and counted as truncated.
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if len(query_labels) != len(hit_labels):
        raise ValidationError(
            f"{len(query_labels)} query labels but {len(hit_labels)} hit lists"
        )
    counts_by_group: Dict[str, List[float]] = {}
    n_truncated = 0
    n_skipped = 0
    for label, hits in zip(query_labels, hit_labels):
        if label == Label.UNLABELED:
            n_skipped += 1
            continue
        top = list(hits[:k])
        if len(top) < k:
            n_truncated += 1
        same = float(sum(1 for h in top if h == label))
        counts_by_group.setdefault(label.value, []).append(same)
        counts_by_group.setdefault("all", []).append(same)
    if not counts_by_group:
        raise ValidationError("no labeled queries to evaluate")
    groups = {
        name: GroupStats(len(vals), *_mean_std(vals))
        for name, vals in sorted(counts_by_group.items())
    }
    return HomogeneityReport(
        k=k, groups=groups, n_truncated=n_truncated, n_skipped_unlabeled=n_skipped
    )


# ---------------------------------------------------------------------------
# Report aggregation
# ---------------------------------------------------------------------------

def nearest_rank_percentiles(
    values: Sequence[float], percentiles: Sequence[int] = PERCENTILES
) -> Tuple[float, ...]:
    """Nearest-rank percentiles: the ceil(p/100 * n)-th smallest value."""
    if not values:
        raise ValidationError("cannot take percentiles of no values")
    ordered = sorted(values)
    n = len(ordered)
    out = []
    for p in percentiles:
        rank = max(1, math.ceil(p / 100 * n))
        out.append(ordered[min(rank, n) - 1])
    return tuple(out)


@dataclass(frozen=True)
class RelevanceReport:
    """Aggregated relevance scores in the shape of the summary tables."""

    fn: str
    k: int
    groups: Mapping[str, GroupStats]
    raw: Optional[Mapping[str, Tuple[float, ...]]] = None

    def to_dict(self) -> dict:
        out = {
            "fn": self.fn,
            "k": self.k,
            "groups": {name: stats.to_dict() for name, stats in self.groups.items()},
        }
        if self.raw is not None:
            out["raw"] = {name: list(vals) for name, vals in self.raw.items()}
        return out


def aggregate_report(
    per_query_scores: Sequence[float],
    group_labels: Sequence[str],
    fn: str,
    k: int,
    percentiles: Sequence[int] = PERCENTILES,
    include_raw: bool = False,
) -> RelevanceReport:
    """Group scores by label and report mean, population std, and the
    nearest-rank percentiles (in the fixed order given)."""
    if not per_query_scores:
        raise ValidationError("cannot aggregate an empty score list")
    if len(per_query_scores) != len(group_labels):
        raise ValidationError(
            f"{len(per_query_scores)} scores but {len(group_labels)} group labels"
        )
    by_group: Dict[str, List[float]] = {}
    for score, label in zip(per_query_scores, group_labels):
        by_group.setdefault(label, []).append(score)
        by_group.setdefault("all", []).append(score)
    groups = {}
    for name, vals in sorted(by_group.items()):
        mean, std = _mean_std(vals)
        groups[name] = GroupStats(
            len(vals), mean, std, nearest_rank_percentiles(vals, percentiles)
        )
    raw = None
    if include_raw:
        raw = {name: tuple(vals) for name, vals in sorted(by_group.items())}
    return RelevanceReport(fn=fn, k=k, groups=groups, raw=raw)
