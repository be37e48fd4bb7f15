"""Domain types shared across the toolkit.

Pure data: no I/O and no algorithms beyond construction-time validation.
All types are immutable once built and safe to share between threads.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Iterator, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .errors import DimensionError, ParseError, ValidationError

__all__ = [
    "TagKind",
    "Label",
    "Subset",
    "Tag",
    "tag_parse",
    "ScoredTagList",
    "PairStat",
    "CoocTable",
    "EnrichedTags",
    "TagRanking",
    "SampleMeta",
    "LeafMatrix",
    "QueryHit",
]

_SHA256_RE = re.compile(r"^[0-9a-f]{64}$")
_APPEARED_RE = re.compile(r"^\d{4}-(0[1-9]|1[0-2])$")
# Wire delimiters (",", "|") and whitespace can never be part of a tag name.
_NAME_RE = re.compile(r"^[^\s,|]+$")


class TagKind(str, Enum):
    """Tag categories emitted by the tag-normalization stage."""

    FAM = "FAM"        # malware family
    CLASS = "CLASS"    # malware class
    BEH = "BEH"        # behavior
    FILE = "FILE"      # file property
    UNK = "UNK"        # unknown / uncategorized

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return self.value


class Label(str, Enum):
    """Ground-truth verdict of a sample."""

    UNLABELED = "unlabeled"
    BENIGN = "benign"
    MALICIOUS = "malicious"

    @classmethod
    def from_int(cls, value: int) -> "Label":
        """Map the conventional -1/0/1 encoding to a label."""
        try:
            return {-1: cls.UNLABELED, 0: cls.BENIGN, 1: cls.MALICIOUS}[value]
        except KeyError:
            raise ValidationError(f"label must be -1, 0 or 1, got {value!r}") from None

    def to_int(self) -> int:
        return {Label.UNLABELED: -1, Label.BENIGN: 0, Label.MALICIOUS: 1}[self]

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return self.value


class Subset(str, Enum):
    """Corpus split a sample belongs to."""

    TRAIN = "train"
    TEST = "test"
    UNLABELED = "unlabeled"

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return self.value


@dataclass(frozen=True)
class Tag:
    """A categorized tag. Identity is the (kind, name) pair.

    Names are lowercase and may contain ':' sub-paths (e.g. "os:windows").
    """

    kind: TagKind
    name: str

    def __post_init__(self) -> None:
        if not isinstance(self.kind, TagKind):
            raise ValidationError(f"invalid tag kind {self.kind!r}")
        if not self.name:
            raise ValidationError("tag name must be non-empty")
        if self.name != self.name.lower():
            raise ValidationError(f"tag name must be lowercase, got {self.name!r}")
        if not _NAME_RE.match(self.name):
            raise ValidationError(f"tag name contains forbidden characters: {self.name!r}")

    def render(self) -> str:
        """Canonical wire form, always kind-prefixed."""
        return f"{self.kind.value}:{self.name}"

    def __str__(self) -> str:
        return self.render()

    # Canonical ordering used everywhere a deterministic tag order is needed.
    def sort_key(self) -> str:
        return self.render()


_KIND_PREFIXES = {k.value: k for k in TagKind}


def tag_parse(text: str) -> Tag:
    """Parse a "KIND:name" token; bare names default to kind UNK.

    The kind prefix is matched case-insensitively; the name is lowercased.
    A ':'-bearing token whose head is not a known kind is rejected rather
    than guessed at.
    """
    token = text.strip()
    if not token:
        raise ParseError("empty tag token")
    if ":" in token:
        head, rest = token.split(":", 1)
        kind = _KIND_PREFIXES.get(head.upper())
        if kind is None:
            raise ParseError(f"unknown kind prefix {head!r} in tag {token!r}")
        name = rest.lower()
        if not name:
            raise ParseError(f"empty name in tag {token!r}")
    else:
        kind = TagKind.UNK
        name = token.lower()
    try:
        return Tag(kind, name)
    except ValidationError as exc:
        raise ParseError(f"bad tag token {token!r}: {exc}") from exc


@dataclass(frozen=True)
class ScoredTagList:
    """Ordered tags with their rank scores for one sample.

    An empty list is valid and means "no tags" (the usual benign indicator).
    ``detections`` is the vendor-detection count when known.
    """

    tags: Tuple[Tuple[Tag, int], ...] = ()
    detections: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "tags", tuple((t, int(s)) for t, s in self.tags))
        seen = set()
        for tag, score in self.tags:
            if not isinstance(tag, Tag):
                raise ValidationError(f"expected Tag, got {tag!r}")
            if score < 1:
                raise ValidationError(f"tag score must be >= 1, got {score} for {tag}")
            if tag in seen:
                raise ValidationError(f"duplicate tag {tag} in scored list")
            seen.add(tag)
        if self.detections is not None and self.detections < 0:
            raise ValidationError(f"detections must be >= 0, got {self.detections}")

    def __len__(self) -> int:
        return len(self.tags)

    def __iter__(self) -> Iterator[Tuple[Tag, int]]:
        return iter(self.tags)

    def of_kind(self, kind: TagKind) -> Tuple[Tuple[Tag, int], ...]:
        return tuple((t, s) for t, s in self.tags if t.kind == kind)

    def tag_set(self) -> frozenset:
        return frozenset(t for t, _ in self.tags)


class PairStat(NamedTuple):
    """Raw counts for an unordered tag pair (a is the canonically smaller tag)."""

    count_a: int
    count_b: int
    count_ab: int


def _canonical_pair(x: Tag, y: Tag) -> Tuple[Tag, Tag]:
    return (x, y) if x.sort_key() < y.sort_key() else (y, x)


class CoocTable:
    """Pairwise tag co-occurrence counts over a sample corpus.

    ``tag_freq`` maps each tag to the number of distinct samples it occurs
    in; ``pair_stats`` holds per-pair counts keyed by the canonically
    ordered tag pair. Conditional frequencies are always derived from these
    raw counts, never stored.
    """

    def __init__(
        self,
        tag_freq: Mapping[Tag, int],
        pair_stats: Mapping[Tuple[Tag, Tag], PairStat],
    ) -> None:
        freq = dict(tag_freq)
        pairs = {}
        for tag, count in freq.items():
            if count < 1:
                raise ValidationError(f"tag frequency must be >= 1, got {count} for {tag}")
        for (a, b), stat in pair_stats.items():
            if a == b:
                raise ValidationError(f"self-pair {a} is not a valid co-occurrence pair")
            if _canonical_pair(a, b) != (a, b):
                raise ValidationError(f"pair ({a}, {b}) is not canonically ordered")
            stat = PairStat(*stat)
            if stat.count_ab < 1:
                raise ValidationError(f"pair ({a}, {b}) stored with count_ab < 1")
            if stat.count_ab > min(stat.count_a, stat.count_b):
                raise ValidationError(
                    f"pair ({a}, {b}): count_ab={stat.count_ab} exceeds "
                    f"min(count_a={stat.count_a}, count_b={stat.count_b})"
                )
            for tag, count in ((a, stat.count_a), (b, stat.count_b)):
                if tag not in freq:
                    raise ValidationError(f"pair ({a}, {b}) references unknown tag {tag}")
                if freq[tag] != count:
                    raise ValidationError(
                        f"pair ({a}, {b}): stored count for {tag} is {count}, "
                        f"but tag frequency is {freq[tag]}"
                    )
            pairs[(a, b)] = stat
        self._tag_freq = freq
        self._pair_stats = pairs
        self._partners: Optional[dict] = None

    @property
    def tag_freq(self) -> Mapping[Tag, int]:
        return MappingProxyType(self._tag_freq)

    @property
    def pair_stats(self) -> Mapping[Tuple[Tag, Tag], PairStat]:
        return MappingProxyType(self._pair_stats)

    def __contains__(self, tag: Tag) -> bool:
        return tag in self._tag_freq

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CoocTable):
            return NotImplemented
        return self._tag_freq == other._tag_freq and self._pair_stats == other._pair_stats

    def freq(self, tag: Tag) -> int:
        """Distinct-sample occurrence count of ``tag`` (0 when unseen)."""
        return self._tag_freq.get(tag, 0)

    def pair_count(self, x: Tag, y: Tag) -> int:
        """Number of samples containing both tags (0 when the pair is unseen)."""
        if x == y:
            return self.freq(x)
        stat = self._pair_stats.get(_canonical_pair(x, y))
        return stat.count_ab if stat is not None else 0

    def partners(self, tag: Tag) -> Tuple[Tuple[Tag, int], ...]:
        """All tags co-occurring with ``tag`` and the shared-sample counts.

        Deterministically ordered by the partner's canonical form.
        """
        if self._partners is None:
            adj: dict = {}
            for (a, b), stat in self._pair_stats.items():
                adj.setdefault(a, []).append((b, stat.count_ab))
                adj.setdefault(b, []).append((a, stat.count_ab))
            self._partners = {
                t: tuple(sorted(ps, key=lambda p: p[0].sort_key())) for t, ps in adj.items()
            }
        return self._partners.get(tag, ())

    @property
    def n_tags(self) -> int:
        return len(self._tag_freq)

    @property
    def n_pairs(self) -> int:
        return len(self._pair_stats)

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"CoocTable(n_tags={self.n_tags}, n_pairs={self.n_pairs})"


@dataclass(frozen=True)
class EnrichedTags:
    """Tags added to a sample by co-occurrence, keyed by (source, added).

    The value is the conditional frequency of the added tag given the
    source tag at the time of enrichment.
    """

    added: Mapping[Tuple[Tag, Tag], float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        frozen = {}
        for (src, tgt), f in dict(self.added).items():
            if not 0.0 <= f <= 1.0:
                raise ValidationError(f"conditional frequency {f} for ({src}, {tgt}) not in [0,1]")
            frozen[(src, tgt)] = float(f)
        object.__setattr__(self, "added", MappingProxyType(frozen))

    def __len__(self) -> int:
        return len(self.added)

    def __contains__(self, key: Tuple[Tag, Tag]) -> bool:
        return key in self.added

    def items(self) -> Iterator[Tuple[Tuple[Tag, Tag], float]]:
        """Pairs in deterministic (source, target) canonical-form order."""
        return iter(
            sorted(self.added.items(), key=lambda kv: (kv[0][0].sort_key(), kv[0][1].sort_key()))
        )

    def get(self, key: Tuple[Tag, Tag], default: float = 0.0) -> float:
        return self.added.get(key, default)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EnrichedTags):
            return NotImplemented
        return dict(self.added) == dict(other.added)


@dataclass(frozen=True)
class TagRanking:
    """Descending ranking of one kind's tags; ties break by ascending name."""

    kind: TagKind
    ranked: Tuple[Tuple[Tag, float], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "ranked", tuple((t, float(s)) for t, s in self.ranked))
        prev: Optional[Tuple[Tag, float]] = None
        for tag, score in self.ranked:
            if tag.kind != self.kind:
                raise ValidationError(f"tag {tag} does not match ranking kind {self.kind}")
            if score < 0:
                raise ValidationError(f"rank score must be non-negative, got {score} for {tag}")
            if prev is not None:
                if score > prev[1]:
                    raise ValidationError("rank scores must be non-increasing")
                if score == prev[1] and tag.name <= prev[0].name:
                    raise ValidationError("equal scores must be ordered by ascending tag name")
            prev = (tag, score)

    @classmethod
    def from_scores(cls, kind: TagKind, scores: Mapping[Tag, float]) -> "TagRanking":
        ordered = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0].name))
        return cls(kind, tuple(ordered))

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(t.name for t, _ in self.ranked)

    def __len__(self) -> int:
        return len(self.ranked)

    def __iter__(self) -> Iterator[Tuple[Tag, float]]:
        return iter(self.ranked)


@dataclass(frozen=True)
class SampleMeta:
    """Identity and split information for one corpus row."""

    row: int
    sha256: str
    label: Label
    subset: Subset
    appeared: Optional[str] = None  # "YYYY-MM"

    def __post_init__(self) -> None:
        if self.row < 0:
            raise ValidationError(f"row must be >= 0, got {self.row}")
        if not _SHA256_RE.match(self.sha256):
            raise ValidationError(f"sha256 must be 64 lowercase hex chars, got {self.sha256!r}")
        if (self.label == Label.UNLABELED) != (self.subset == Subset.UNLABELED):
            raise ValidationError(
                f"label {self.label.value!r} inconsistent with subset {self.subset.value!r}: "
                "a sample is unlabeled exactly when it sits in the unlabeled subset"
            )
        if self.appeared is not None and not _APPEARED_RE.match(self.appeared):
            raise ValidationError(f"appeared must be 'YYYY-MM', got {self.appeared!r}")


class LeafMatrix:
    """N x T matrix of terminal-node indices, one row per sample.

    Node indices are opaque engine-assigned IDs; only equality between
    them is ever meaningful. Storage is normalized to the smallest
    unsigned width (16 or 32 bits) holding the largest index, and the
    underlying array is frozen after construction.
    """

    __slots__ = ("_data",)

    def __init__(self, data) -> None:
        arr = np.asarray(data)
        if arr.ndim != 2:
            raise DimensionError(f"leaf matrix must be 2-D, got shape {arr.shape}")
        n, t = arr.shape
        if n < 1 or t < 1:
            raise ValidationError(f"leaf matrix needs N >= 1 and T >= 1, got {n}x{t}")
        if arr.dtype.kind not in ("u", "i"):
            raise ValidationError(f"leaf indices must be integers, got dtype {arr.dtype}")
        if arr.dtype.kind == "i" and arr.size and int(arr.min()) < 0:
            raise ValidationError("leaf indices must be non-negative")
        max_idx = int(arr.max())
        if max_idx >= 2**32:
            raise ValidationError(f"leaf index {max_idx} exceeds the 32-bit width limit")
        dtype = np.uint16 if max_idx < 2**16 else np.uint32
        arr = np.ascontiguousarray(arr, dtype=dtype)
        arr.setflags(write=False)
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def n_samples(self) -> int:
        return self._data.shape[0]

    @property
    def n_trees(self) -> int:
        return self._data.shape[1]

    @property
    def leaf_width_bytes(self) -> int:
        return self._data.dtype.itemsize

    def row(self, i: int) -> np.ndarray:
        """Leaf vector of sample ``i`` (read-only view)."""
        return self._data[i]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LeafMatrix):
            return NotImplemented
        return self._data.shape == other._data.shape and bool(
            np.array_equal(self._data, other._data)
        )

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"LeafMatrix(n_samples={self.n_samples}, n_trees={self.n_trees})"


@dataclass(frozen=True)
class QueryHit:
    """One retrieved sample: its matrix row and leaf-similarity score."""

    row: int
    score: float
