"""Tag co-occurrence statistics, enrichment and rank scoring.

A sample's tag metadata comes in two generations: ``prev`` is the older
single family tag, ``curr`` the scored multi-kind tag list. Enrichment
adds tags that co-occur with what a sample already has; rank scoring
turns scores plus enrichment into a per-kind ranking.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from itertools import combinations
from typing import Dict, Iterable, Mapping, Optional, Tuple

from .errors import UnknownTagError, ValidationError
from .model import (
    CoocTable,
    EnrichedTags,
    PairStat,
    ScoredTagList,
    Tag,
    TagKind,
    TagRanking,
)

__all__ = [
    "SampleTagRecord",
    "build_cooc",
    "rel_freq",
    "enrich_tags",
    "tag_distribution",
    "rank_tags",
]

# Only family and class tags are reliable enough to pull in new tags.
_ENRICHMENT_SEED_KINDS = frozenset({TagKind.FAM, TagKind.CLASS})
_RANKABLE_KINDS = frozenset({TagKind.FAM, TagKind.CLASS, TagKind.BEH})


@dataclass(frozen=True)
class SampleTagRecord:
    """Tag metadata for one sample across both generations.

    ``prev`` and ``curr`` are independently optional; an empty ``curr``
    list (a sample with no detections) behaves like an absent one.
    """

    sha256: str
    prev: Optional[Tag] = None
    curr: Optional[ScoredTagList] = None

    def __post_init__(self) -> None:
        if self.prev is not None and self.prev.kind != TagKind.FAM:
            raise ValidationError(
                f"prev tag must be a family tag, got {self.prev}"
            )

    @property
    def has_prev(self) -> bool:
        return self.prev is not None

    @property
    def has_curr(self) -> bool:
        return self.curr is not None and len(self.curr) > 0


def build_cooc(records: Iterable[SampleTagRecord]) -> CoocTable:
    """Count, per tag and per unordered tag pair, the distinct samples
    containing them. Each sample contributes at most one to any count,
    no matter how many vendors produced the tag."""
    tag_freq: Counter = Counter()
    pair_counts: Counter = Counter()
    for rec in records:
        if not rec.has_curr:
            continue
        tags = sorted(rec.curr.tag_set(), key=Tag.sort_key)
        tag_freq.update(tags)
        for a, b in combinations(tags, 2):
            pair_counts[(a, b)] += 1
    pair_stats = {
        (a, b): PairStat(tag_freq[a], tag_freq[b], c) for (a, b), c in pair_counts.items()
    }
    return CoocTable(dict(tag_freq), pair_stats)


def rel_freq(table: CoocTable, x: Tag, y: Tag) -> float:
    """Occurrence frequency of ``x`` relative to ``y``: freq(x, y) / freq(y).

    Zero when the pair never co-occurs; asymmetric by construction.
    """
    fy = table.freq(y)
    if fy == 0:
        raise UnknownTagError(f"tag {y} not present in co-occurrence table")
    return table.pair_count(x, y) / fy


def _partners_above(
    table: CoocTable, source: Tag, threshold: float
) -> Iterable[Tuple[Tag, float]]:
    f_src = table.freq(source)
    if f_src == 0:
        return
    for partner, count_ab in table.partners(source):
        f = count_ab / f_src
        if f >= threshold:
            yield partner, f


def enrich_tags(
    record: SampleTagRecord, table: CoocTable, threshold: float
) -> EnrichedTags:
    """Propose extra tags for a sample from its co-occurrence neighbors.

    Four cases, by which tag generations the sample has:

    * neither: nothing to do, the sample is most likely benign;
    * only ``prev``: add every partner of the old family tag whose
      conditional frequency reaches the threshold;
    * only ``curr``: same, seeded from each family/class tag in the list;
    * both: the union, keeping the larger frequency on key collisions.
    """
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError(f"threshold must be in [0, 1], got {threshold}")
    added: Dict[Tuple[Tag, Tag], float] = {}
    if record.has_prev:
        for partner, f in _partners_above(table, record.prev, threshold):
            key = (record.prev, partner)
            if f > added.get(key, -1.0):
                added[key] = f
    if record.has_curr:
        for tag, _score in record.curr:
            if tag.kind not in _ENRICHMENT_SEED_KINDS:
                continue
            for partner, f in _partners_above(table, tag, threshold):
                key = (tag, partner)
                if f > added.get(key, -1.0):
                    added[key] = f
    return EnrichedTags(added)


def tag_distribution(
    tags: Optional[ScoredTagList], kind: TagKind
) -> Dict[Tag, float]:
    """Normalize the scores of one kind's tags into a probability
    distribution (vendor agreement mass). Empty when the kind is absent."""
    if tags is None or len(tags) == 0:
        return {}
    items = tags.of_kind(kind)
    if not items:
        return {}
    total = sum(s for _, s in items)
    return {t: s / total for t, s in items}


def rank_tags(
    record: SampleTagRecord,
    enriched: EnrichedTags,
    kind: TagKind,
    source_distribution: str = "fam",
) -> TagRanking:
    """Rank kind-``kind`` tags by score mass plus co-occurrence mass.

    Every original tag starts at its probability under the kind's score
    distribution. Each enriched pair with a family source and a target of
    the ranked kind then adds the source's probability scaled by the
    stored conditional frequency. The source probability is taken from
    the family distribution by default; ``source_distribution="target"``
    switches to the ranked kind's own distribution.
    """
    if kind not in _RANKABLE_KINDS:
        raise ValidationError(f"cannot rank kind {kind}; expected FAM, CLASS or BEH")
    if source_distribution not in ("fam", "target"):
        raise ValidationError(
            f"source_distribution must be 'fam' or 'target', got {source_distribution!r}"
        )
    scores: Dict[Tag, float] = dict(tag_distribution(record.curr, kind))
    if source_distribution == "fam":
        source_probs = tag_distribution(record.curr, TagKind.FAM)
    else:
        source_probs = dict(scores)
    for (src, tgt), freq in enriched.items():
        if src.kind != TagKind.FAM or tgt.kind != kind:
            continue
        p = source_probs.get(src, 0.0)
        if p > 0.0:
            scores[tgt] = scores.get(tgt, 0.0) + p * freq
    return TagRanking.from_scores(kind, scores)
