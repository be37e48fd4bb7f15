"""Similarity search over tree-ensemble leaf predictions, plus tag
co-occurrence enrichment and retrieval evaluation for binary-file corpora."""

from .errors import (
    DimensionError,
    DuplicateError,
    EmptyIndexError,
    FormatError,
    LeafSimError,
    ParseError,
    UnknownTagError,
    ValidationError,
)
from .model import (
    CoocTable,
    EnrichedTags,
    Label,
    LeafMatrix,
    PairStat,
    QueryHit,
    SampleMeta,
    ScoredTagList,
    Subset,
    Tag,
    TagKind,
    TagRanking,
    tag_parse,
)
from .simindex import SimIndex, leaf_similarity, oracle_top_k, top_k, top_k_batch
from .tagbank import (
    SampleTagRecord,
    build_cooc,
    enrich_tags,
    rank_tags,
    rel_freq,
    tag_distribution,
)
from .evalharness import (
    Scenario,
    aggregate_report,
    damerau_levenshtein,
    label_homogeneity,
    mean_average_precision,
    relevance_at_k,
    relevance_em,
    relevance_iou,
    relevance_nes,
)

__version__ = "0.1.0"

__all__ = [
    "LeafSimError",
    "FormatError",
    "ParseError",
    "DuplicateError",
    "ValidationError",
    "DimensionError",
    "EmptyIndexError",
    "UnknownTagError",
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
    "SimIndex",
    "leaf_similarity",
    "top_k",
    "top_k_batch",
    "oracle_top_k",
    "SampleTagRecord",
    "build_cooc",
    "rel_freq",
    "enrich_tags",
    "tag_distribution",
    "rank_tags",
    "Scenario",
    "damerau_levenshtein",
    "relevance_em",
    "relevance_iou",
    "relevance_nes",
    "relevance_at_k",
    "mean_average_precision",
    "label_homogeneity",
    "aggregate_report",
]
