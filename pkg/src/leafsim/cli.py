"""Single command-line entry point for the whole pipeline.

Subcommands: build-index, query, cooc, enrich, rank, eval. Exit codes:
0 success, 2 data or validation problem, 64 usage error. All output is
file-based; ``LEAFSIM_THREADS`` caps query parallelism.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import os
import random
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from . import io as lio
from .errors import LeafSimError, ValidationError
from .evalharness import (
    RELEVANCE_FNS,
    SCENARIO_SUBSETS,
    aggregate_report,
    label_homogeneity,
    mean_average_precision,
    relevance_at_k,
    relevance_em,
)
from .model import Label, SampleMeta, Subset, TagKind
from .simindex import SimIndex, top_k_batch
from .tagbank import SampleTagRecord, build_cooc, enrich_tags, rank_tags

EXIT_OK = 0
EXIT_DATA = 2
EXIT_USAGE = 64

_INDEX_FORMAT = "leafsim-index"
_INDEX_VERSION = 1


class _Parser(argparse.ArgumentParser):
    """argparse parser that reports usage errors with exit code 64."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def _worker_count() -> int:
    raw = os.environ.get("LEAFSIM_THREADS")
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ValidationError(f"LEAFSIM_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise ValidationError(f"LEAFSIM_THREADS must be >= 1, got {value}")
    return value


def _timestamp(deterministic: bool) -> Optional[str]:
    if deterministic:
        return None
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _write_json(payload: dict, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _require_file(path: Path) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return path


# ---------------------------------------------------------------------------
# build-index
# ---------------------------------------------------------------------------

def _subset_rows(metas: Sequence[SampleMeta], subsets: Optional[Sequence[Subset]]) -> Optional[List[int]]:
    if subsets is None:
        return None
    wanted = set(subsets)
    return [m.row for m in metas if m.subset in wanted]


def _cmd_build_index(args: argparse.Namespace) -> int:
    leaves = _require_file(Path(args.leaves))
    meta = _require_file(Path(args.meta))
    matrix = lio.read_leaf_matrix(leaves)
    metas = lio.read_sample_meta(meta)
    if len(metas) != matrix.n_samples:
        raise ValidationError(
            f"metadata row count {len(metas)} does not match matrix rows {matrix.n_samples}"
        )
    subsets = None
    if args.subsets:
        try:
            subsets = [Subset(s) for s in args.subsets.split(",")]
        except ValueError:
            raise ValidationError(f"unknown subset in {args.subsets!r}") from None
        if not _subset_rows(metas, subsets):
            raise ValidationError(f"no rows fall in subsets {args.subsets!r}")
    artifact = {
        "format": _INDEX_FORMAT,
        "version": _INDEX_VERSION,
        "leaves": str(leaves.resolve()),
        "meta": str(meta.resolve()),
        "leaves_digest": _file_digest(leaves),
        "meta_digest": _file_digest(meta),
        "n_samples": matrix.n_samples,
        "n_trees": matrix.n_trees,
        "subsets": [s.value for s in subsets] if subsets else None,
    }
    created = _timestamp(args.deterministic)
    if created is not None:
        artifact["created_at"] = created
    _write_json(artifact, Path(args.out))
    return EXIT_OK


def _load_index(path: Path) -> Tuple[SimIndex, List[SampleMeta]]:
    with open(_require_file(path), "r", encoding="utf-8") as fh:
        artifact = json.load(fh)
    if artifact.get("format") != _INDEX_FORMAT or artifact.get("version") != _INDEX_VERSION:
        raise ValidationError(f"{path} is not a {_INDEX_FORMAT} v{_INDEX_VERSION} artifact")
    leaves = _require_file(Path(artifact["leaves"]))
    meta = _require_file(Path(artifact["meta"]))
    for file, key in ((leaves, "leaves_digest"), (meta, "meta_digest")):
        actual = _file_digest(file)
        if actual != artifact[key]:
            raise ValidationError(
                f"stale index: {file} has digest {actual}, artifact recorded {artifact[key]}"
            )
    matrix = lio.read_leaf_matrix(leaves)
    metas = lio.read_sample_meta(meta)
    if len(metas) != matrix.n_samples:
        raise ValidationError(
            f"metadata row count {len(metas)} does not match matrix rows {matrix.n_samples}"
        )
    subsets = artifact.get("subsets")
    row_filter = _subset_rows(metas, [Subset(s) for s in subsets] if subsets else None)
    index = SimIndex(
        matrix,
        row_filter=row_filter,
        shas=[m.sha256 for m in metas],
        digest=artifact["leaves_digest"],
    )
    return index, metas


# ---------------------------------------------------------------------------
# query
# ---------------------------------------------------------------------------

def _cmd_query(args: argparse.Namespace) -> int:
    index, metas = _load_index(Path(args.index))
    queries_path = _require_file(Path(args.queries))
    queries = lio.read_leaf_matrix(queries_path)
    qmeta_path = Path(args.queries_meta) if args.queries_meta else queries_path.with_suffix(".meta.jsonl")
    if not qmeta_path.is_file():
        raise FileNotFoundError(
            f"query metadata not found: {qmeta_path} (pass --queries-meta to point elsewhere)"
        )
    qmetas = lio.read_sample_meta(qmeta_path)
    if len(qmetas) != queries.n_samples:
        raise ValidationError(
            f"query metadata rows {len(qmetas)} do not match query matrix rows {queries.n_samples}"
        )
    query_shas = [m.sha256 for m in qmetas]
    hits_per_query = top_k_batch(
        index,
        queries,
        k=args.top_k,
        exclude_self_by_sha=args.exclude_self,
        query_shas=query_shas,
        n_threads=_worker_count(),
    )
    records = []
    for sha, hits in zip(query_shas, hits_per_query):
        entries = tuple(
            lio.HitEntry(sha=metas[h.row].sha256, score=h.score, label=metas[h.row].label)
            for h in hits
        )
        records.append(lio.HitsRecord(query_sha=sha, hits=entries))
    lio.write_hits_jsonl(records, Path(args.out))
    return EXIT_OK


# ---------------------------------------------------------------------------
# cooc / enrich / rank
# ---------------------------------------------------------------------------

def _tag_records(
    tags_path: Optional[Path], prev_path: Optional[Path]
) -> List[SampleTagRecord]:
    """Join the two tag generations into per-sample records.

    Samples keep the tag-file order; samples present only in the family
    sidecar follow, in sidecar order.
    """
    curr = lio.parse_avclass_file(tags_path) if tags_path else {}
    prev = lio.read_prev_family_csv(prev_path) if prev_path else {}
    records = [
        SampleTagRecord(sha256=sha, prev=prev.get(sha), curr=stl) for sha, stl in curr.items()
    ]
    records.extend(
        SampleTagRecord(sha256=sha, prev=tag, curr=None)
        for sha, tag in prev.items()
        if sha not in curr
    )
    return records


def _cmd_cooc(args: argparse.Namespace) -> int:
    records = _tag_records(_require_file(Path(args.tags)), None)
    table = build_cooc(records)
    lio.write_cooc_table(table, Path(args.out))
    return EXIT_OK


def _cmd_enrich(args: argparse.Namespace) -> int:
    records = _tag_records(
        _require_file(Path(args.tags)),
        _require_file(Path(args.prev)) if args.prev else None,
    )
    table = lio.read_cooc_table(_require_file(Path(args.cooc)))
    out = [(rec.sha256, enrich_tags(rec, table, args.threshold)) for rec in records]
    lio.write_enrichment_jsonl(out, Path(args.out))
    return EXIT_OK


def _cmd_rank(args: argparse.Namespace) -> int:
    records = _tag_records(
        _require_file(Path(args.tags)),
        _require_file(Path(args.prev)) if args.prev else None,
    )
    table = lio.read_cooc_table(_require_file(Path(args.cooc)))
    kind = TagKind(args.kind)
    out = []
    for rec in records:
        enriched = enrich_tags(rec, table, args.threshold)
        out.append((rec.sha256, rank_tags(rec, enriched, kind, args.source_dist)))
    lio.write_ranking_jsonl(out, Path(args.out))
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _validate_scenario(
    scenario: str,
    hits_records: Sequence[lio.HitsRecord],
    meta_by_sha: Dict[str, SampleMeta],
) -> None:
    query_subset, kb_subsets = SCENARIO_SUBSETS[scenario]
    for rec in hits_records:
        meta = meta_by_sha.get(rec.query_sha)
        if meta is None:
            raise ValidationError(f"query {rec.query_sha} is not in the metadata")
        if meta.subset != query_subset:
            raise ValidationError(
                f"query {rec.query_sha} is in subset {meta.subset.value!r}, but scenario "
                f"{scenario!r} queries the {query_subset.value!r} subset"
            )
        for hit in rec.hits:
            hmeta = meta_by_sha.get(hit.sha)
            if hmeta is None:
                raise ValidationError(f"hit {hit.sha} is not in the metadata")
            if hmeta.subset not in kb_subsets:
                raise ValidationError(
                    f"hit {hit.sha} is in subset {hmeta.subset.value!r}, outside the "
                    f"{scenario!r} knowledge base"
                )


def _query_group(meta: SampleMeta, has_tags: bool) -> str:
    # Unlabeled queries are grouped by tag presence, their only indicator.
    if meta.label == Label.UNLABELED:
        return Label.MALICIOUS.value if has_tags else Label.BENIGN.value
    return meta.label.value


def _sample_records(
    records: List[lio.HitsRecord], sample: Optional[int], seed: int
) -> List[lio.HitsRecord]:
    if sample is None or sample >= len(records):
        return records
    rng = random.Random(seed)
    keep = sorted(rng.sample(range(len(records)), sample))
    return [records[i] for i in keep]


def _cmd_eval(args: argparse.Namespace) -> int:
    hits_records = lio.read_hits_jsonl(_require_file(Path(args.hits)))
    if not hits_records:
        raise ValidationError("hits file contains no queries")
    metas = lio.read_sample_meta(_require_file(Path(args.meta)))
    meta_by_sha = {m.sha256: m for m in metas}
    _validate_scenario(args.scenario, hits_records, meta_by_sha)
    hits_records = _sample_records(hits_records, args.sample, args.seed)
    k = args.k
    n_short = sum(1 for rec in hits_records if len(rec.hits) < k)

    report: dict = {
        "protocol": args.protocol,
        "scenario": args.scenario,
        "k": k,
        "n_queries": len(hits_records),
        "n_short": n_short,
    }

    if args.protocol == "label-hom":
        query_labels = [meta_by_sha[rec.query_sha].label for rec in hits_records]
        hit_labels = [
            [h.label if h.label is not None else meta_by_sha[h.sha].label for h in rec.hits]
            for rec in hits_records
        ]
        hom = label_homogeneity(query_labels, hit_labels, k)
        report["groups"] = {name: stats.to_dict() for name, stats in hom.groups.items()}
        report["n_truncated"] = hom.n_truncated
        report["n_skipped_unlabeled"] = hom.n_skipped_unlabeled
    else:
        rankings = dict(lio.read_ranking_jsonl(_require_file(Path(args.rankings))))
        fn_name = "em" if args.protocol == "map" else args.fn
        fn = RELEVANCE_FNS[fn_name]
        per_query_scores: List[List[float]] = []
        groups: List[str] = []
        for rec in hits_records:
            q_rank = rankings.get(rec.query_sha)
            hit_ranks = [rankings.get(h.sha) for h in rec.hits[:k]]
            per_query_scores.append(relevance_at_k(q_rank, hit_ranks, fn))
            groups.append(
                _query_group(meta_by_sha[rec.query_sha], q_rank is not None and len(q_rank) > 0)
            )
        if args.protocol == "map":
            rel_by_group: Dict[str, List[List[int]]] = {}
            for scores, group in zip(per_query_scores, groups):
                rels = [int(s) for s in scores]
                rel_by_group.setdefault(group, []).append(rels)
                rel_by_group.setdefault("all", []).append(rels)
            report["fn"] = "em"
            report["groups"] = {
                name: {"map": mean_average_precision(rels), "n": len(rels)}
                for name, rels in sorted(rel_by_group.items())
            }
        else:
            if args.agg == "mean":
                values = [sum(s) / len(s) if s else 0.0 for s in per_query_scores]
                value_groups = groups
            else:  # pooled: every query-hit pair enters the aggregate
                values = [v for scores in per_query_scores for v in scores]
                value_groups = [
                    g for scores, g in zip(per_query_scores, groups) for _ in scores
                ]
            agg = aggregate_report(values, value_groups, fn_name, k, include_raw=args.dump_raw)
            report["fn"] = fn_name
            report["agg"] = args.agg
            report["groups"] = {name: stats.to_dict() for name, stats in agg.groups.items()}
            if agg.raw is not None:
                report["raw"] = {name: list(vals) for name, vals in agg.raw.items()}

    created = _timestamp(args.deterministic)
    if created is not None:
        report["created_at"] = created
    _write_json(report, Path(args.out))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser wiring
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="leafsim", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("build-index", help="validate inputs and persist an index artifact")
    p.add_argument("--leaves", required=True, help="leaf matrix (.lsim)")
    p.add_argument("--meta", required=True, help="sample metadata (.meta.jsonl)")
    p.add_argument("--out", required=True, help="index artifact path (JSON)")
    p.add_argument(
        "--subsets",
        help="comma-separated subsets forming the knowledge base (default: all rows)",
    )
    p.add_argument("--deterministic", action="store_true", help="omit the creation timestamp")
    p.set_defaults(func=_cmd_build_index)

    p = sub.add_parser("query", help="run top-K similarity queries against an index")
    p.add_argument("--index", required=True, help="index artifact from build-index")
    p.add_argument("--queries", required=True, help="query leaf matrix (.lsim)")
    p.add_argument("--top-k", type=int, required=True, dest="top_k")
    p.add_argument(
        "--exclude-self",
        action="store_true",
        help="drop hits with the query's own sha256 before truncation",
    )
    p.add_argument(
        "--queries-meta",
        help="query metadata path (default: sibling .meta.jsonl of --queries)",
    )
    p.add_argument("--out", required=True, help="hit JSONL output path")
    p.set_defaults(func=_cmd_query)

    p = sub.add_parser("cooc", help="build a tag co-occurrence table from tag lines")
    p.add_argument("--tags", required=True, help="per-sample tag lines")
    p.add_argument("--out", required=True, help="co-occurrence CSV output path")
    p.set_defaults(func=_cmd_cooc)

    for name, help_text in (
        ("enrich", "add co-occurring tags to each sample"),
        ("rank", "rank each sample's tags of one kind"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--tags", required=True, help="per-sample tag lines")
        p.add_argument("--cooc", required=True, help="co-occurrence CSV")
        p.add_argument("--threshold", type=float, default=0.9)
        p.add_argument("--prev", help="older single-family sidecar CSV (sha256,family)")
        p.add_argument("--out", required=True)
        if name == "rank":
            p.add_argument("--kind", choices=["FAM", "CLASS", "BEH"], default="FAM")
            p.add_argument(
                "--source-dist",
                choices=["fam", "target"],
                default="fam",
                dest="source_dist",
                help="distribution the enrichment-source probability is drawn from",
            )
            p.set_defaults(func=_cmd_rank)
        else:
            p.set_defaults(func=_cmd_enrich)

    p = sub.add_parser("eval", help="evaluate retrieval quality from hit and ranking files")
    p.add_argument("--protocol", choices=["label-hom", "relevance", "map"], required=True)
    p.add_argument("--scenario", choices=sorted(SCENARIO_SUBSETS), required=True)
    p.add_argument("--hits", required=True, help="hit JSONL from the query command")
    p.add_argument("--meta", required=True, help="databank metadata (.meta.jsonl)")
    p.add_argument("--rankings", help="ranking JSONL (relevance and map protocols)")
    p.add_argument("--fn", choices=sorted(RELEVANCE_FNS), default="em")
    p.add_argument("-k", "--k", type=int, required=True)
    p.add_argument(
        "--agg",
        choices=["mean", "pooled"],
        default="mean",
        help="aggregate per-query mean relevance, or pool all query-hit scores",
    )
    p.add_argument("--sample", type=int, help="evaluate a random subset of queries")
    p.add_argument("--seed", type=int, default=0, help="seed for --sample")
    p.add_argument("--dump-raw", action="store_true", dest="dump_raw")
    p.add_argument("--out", required=True, help="report JSON output path")
    p.add_argument("--deterministic", action="store_true", help="omit the creation timestamp")
    p.set_defaults(func=_cmd_eval)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "eval" and args.protocol in ("relevance", "map") and not args.rankings:
        parser.error(f"--rankings is required for the {args.protocol} protocol")
    if args.command == "eval" and args.k < 1:
        parser.error("k must be >= 1")
    if args.command == "query" and args.top_k < 1:
        parser.error("--top-k must be >= 1")
    try:
        return args.func(args)
    except LeafSimError as exc:
        print(f"leafsim: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"leafsim: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
