"""Readers and writers for every on-disk artifact.

Formats:

* ``.lsim``        little-endian binary container for a LeafMatrix
* ``.meta.jsonl``  one JSON object per corpus row (identity, label, subset)
* AVClass lines    ``SHA256 DETECTIONS tag|score,...`` or ``SHA256 NULL``
* ``.cooc.csv``    raw co-occurrence counts (conditional frequencies are
                   always recomputed, never stored)
* hit / enrichment / ranking JSONL and the evaluation report JSON

Every writer is byte-deterministic for identical input, and every
reader/writer pair round-trips values exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DuplicateError, FormatError, ParseError, ValidationError
from .model import (
    CoocTable,
    EnrichedTags,
    Label,
    LeafMatrix,
    PairStat,
    SampleMeta,
    ScoredTagList,
    Subset,
    Tag,
    TagKind,
    TagRanking,
    tag_parse,
)

__all__ = [
    "LeafMatrixHeader",
    "read_leaf_matrix",
    "write_leaf_matrix",
    "leaf_matrix_digest",
    "parse_avclass_file",
    "read_cooc_table",
    "write_cooc_table",
    "read_sample_meta",
    "write_sample_meta",
    "HitEntry",
    "HitsRecord",
    "read_hits_jsonl",
    "write_hits_jsonl",
    "read_enrichment_jsonl",
    "write_enrichment_jsonl",
    "read_ranking_jsonl",
    "write_ranking_jsonl",
    "read_prev_family_csv",
    "write_prev_family_csv",
]

PathLike = Union[str, Path]

_MAGIC = b"LSIM"
_VERSION = 1
# magic, version, n_samples, n_trees, leaf_width_bytes, 3 reserved zero bytes
_HEADER = struct.Struct("<4sIQIB3s")
HEADER_SIZE = _HEADER.size  # 24


@dataclass(frozen=True)
class LeafMatrixHeader:
    """Fixed header of the ``.lsim`` container (all fields little-endian)."""

    n_samples: int
    n_trees: int
    leaf_width_bytes: int

    def payload_size(self) -> int:
        return self.n_samples * self.n_trees * self.leaf_width_bytes

    def pack(self) -> bytes:
        return _HEADER.pack(
            _MAGIC, _VERSION, self.n_samples, self.n_trees, self.leaf_width_bytes, b"\x00\x00\x00"
        )

    @classmethod
    def unpack(cls, raw: bytes) -> "LeafMatrixHeader":
        if len(raw) < HEADER_SIZE:
            raise FormatError(
                f"file too short for header: expected {HEADER_SIZE} bytes, got {len(raw)}"
            )
        magic, version, n_samples, n_trees, width, reserved = _HEADER.unpack(raw[:HEADER_SIZE])
        if magic != _MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {_MAGIC!r}")
        if version != _VERSION:
            raise FormatError(f"unsupported version {version}, expected {_VERSION}")
        if width not in (2, 4):
            raise FormatError(f"leaf width must be 2 or 4 bytes, got {width}")
        if reserved != b"\x00\x00\x00":
            raise FormatError("reserved header bytes must be zero")
        if n_samples < 1 or n_trees < 1:
            raise FormatError(f"header declares empty matrix ({n_samples}x{n_trees})")
        return cls(n_samples, n_trees, width)


def write_leaf_matrix(matrix: LeafMatrix, path: PathLike) -> None:
    """Serialize ``matrix``; the leaf width is chosen from the largest index."""
    width = 2 if int(matrix.data.max()) < 2**16 else 4
    header = LeafMatrixHeader(matrix.n_samples, matrix.n_trees, width)
    payload = np.ascontiguousarray(matrix.data, dtype=f"<u{width}")
    with open(path, "wb") as fh:
        fh.write(header.pack())
        fh.write(payload.tobytes())


def read_leaf_matrix(path: PathLike) -> LeafMatrix:
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        header = LeafMatrixHeader.unpack(fh.read(HEADER_SIZE))
        expected = HEADER_SIZE + header.payload_size()
        if size != expected:
            raise FormatError(
                f"payload size mismatch in {path.name}: expected {expected} bytes total "
                f"({header.n_samples}x{header.n_trees}x{header.leaf_width_bytes} payload), "
                f"got {size}"
            )
        data = np.fromfile(fh, dtype=f"<u{header.leaf_width_bytes}", count=header.n_samples * header.n_trees)
    return LeafMatrix(data.reshape(header.n_samples, header.n_trees))


def leaf_matrix_digest(matrix: LeafMatrix) -> str:
    """Content checksum, equal to the sha256 of the serialized file bytes."""
    width = 2 if int(matrix.data.max()) < 2**16 else 4
    h = hashlib.sha256()
    h.update(LeafMatrixHeader(matrix.n_samples, matrix.n_trees, width).pack())
    h.update(np.ascontiguousarray(matrix.data, dtype=f"<u{width}").tobytes())
    return "sha256:" + h.hexdigest()


# ---------------------------------------------------------------------------
# AVClass tag files
# ---------------------------------------------------------------------------

def _check_sha(token: str, lineno: int) -> str:
    sha = token.lower()
    if len(sha) != 64 or any(c not in "0123456789abcdef" for c in sha):
        raise ParseError(f"line {lineno}: invalid sha256 {token!r}")
    return sha


def parse_avclass_file(path: PathLike) -> Dict[str, ScoredTagList]:
    """Parse per-sample tag lines into sha256 -> ScoredTagList.

    ``NULL`` lines (no vendor detections) map to an empty tag list with
    the detection count absent.
    """
    out: Dict[str, ScoredTagList] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) == 2 and fields[1] == "NULL":
                sha = _check_sha(fields[0], lineno)
                if sha in out:
                    raise DuplicateError(f"line {lineno}: duplicate sha256 {sha}")
                out[sha] = ScoredTagList((), detections=None)
                continue
            if len(fields) != 3:
                raise ParseError(
                    f"line {lineno}: expected 'SHA256 DETECTIONS tags' or 'SHA256 NULL', "
                    f"got {len(fields)} fields"
                )
            sha = _check_sha(fields[0], lineno)
            if sha in out:
                raise DuplicateError(f"line {lineno}: duplicate sha256 {sha}")
            try:
                detections = int(fields[1])
            except ValueError:
                raise ParseError(
                    f"line {lineno}: detections count {fields[1]!r} is not an integer"
                ) from None
            tags: List[Tuple[Tag, int]] = []
            for item in fields[2].split(","):
                token, sep, score_text = item.rpartition("|")
                if not sep or not token:
                    raise ParseError(f"line {lineno}: tag entry {item!r} is not 'tag|score'")
                try:
                    score = int(score_text)
                except ValueError:
                    raise ParseError(
                        f"line {lineno}: score {score_text!r} for tag {token!r} is not an integer"
                    ) from None
                try:
                    tags.append((tag_parse(token), score))
                except ParseError as exc:
                    raise ParseError(f"line {lineno}: {exc}") from None
            try:
                out[sha] = ScoredTagList(tuple(tags), detections=detections)
            except ValidationError as exc:
                raise ParseError(f"line {lineno}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# Co-occurrence CSV
# ---------------------------------------------------------------------------

_COOC_HEADER = ["tag_a", "tag_b", "count_a", "count_b", "count_ab"]


def write_cooc_table(table: CoocTable, path: PathLike) -> None:
    """Write raw counts as CSV, canonically ordered.

    A diagonal row (tag, tag, f, f, f) is written for every tag so that
    per-tag totals survive the round trip even for tags without partners.
    """
    rows = [(t.render(), t.render(), f, f, f) for t, f in table.tag_freq.items()]
    rows += [
        (a.render(), b.render(), s.count_a, s.count_b, s.count_ab)
        for (a, b), s in table.pair_stats.items()
    ]
    rows.sort(key=lambda r: (r[0], r[1]))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_COOC_HEADER)
        writer.writerows(rows)


def read_cooc_table(path: PathLike) -> CoocTable:
    """Read a co-occurrence CSV.

    Pair rows may appear in either tag order; frequencies are taken from
    diagonal rows when present and inferred from pair columns otherwise,
    with any disagreement rejected.
    """
    tag_freq: Dict[Tag, int] = {}
    pair_counts: Dict[Tuple[Tag, Tag], int] = {}
    pair_col_freq: Dict[Tag, int] = {}

    def note_freq(tag: Tag, count: int, lineno: int, store: Dict[Tag, int]) -> None:
        if count < 1:
            raise ValidationError(f"line {lineno}: count for {tag} must be >= 1, got {count}")
        prior = store.get(tag)
        if prior is not None and prior != count:
            raise ValidationError(
                f"line {lineno}: inconsistent counts for {tag}: {prior} vs {count}"
            )
        store[tag] = count

    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty co-occurrence file (missing header)") from None
        if header != _COOC_HEADER:
            raise FormatError(f"bad co-occurrence header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ParseError(f"line {lineno}: expected 5 columns, got {len(row)}")
            try:
                a, b = tag_parse(row[0]), tag_parse(row[1])
            except ParseError as exc:
                raise ParseError(f"line {lineno}: {exc}") from None
            try:
                ca, cb, cab = int(row[2]), int(row[3]), int(row[4])
            except ValueError:
                raise ParseError(f"line {lineno}: non-integer count in {row[2:]!r}") from None
            if a == b:
                if not ca == cb == cab:
                    raise ValidationError(
                        f"line {lineno}: diagonal row for {a} must repeat one count"
                    )
                if a in tag_freq:
                    raise DuplicateError(f"line {lineno}: duplicate frequency row for {a}")
                note_freq(a, ca, lineno, tag_freq)
                continue
            if a.sort_key() > b.sort_key():
                a, b, ca, cb = b, a, cb, ca
            if cab < 1:
                raise ValidationError(f"line {lineno}: count_ab must be >= 1, got {cab}")
            if cab > min(ca, cb):
                raise ValidationError(
                    f"line {lineno}: count_ab={cab} exceeds min(count_a={ca}, count_b={cb})"
                )
            if (a, b) in pair_counts:
                raise DuplicateError(f"line {lineno}: duplicate pair ({a}, {b})")
            note_freq(a, ca, lineno, pair_col_freq)
            note_freq(b, cb, lineno, pair_col_freq)
            pair_counts[(a, b)] = cab

    for tag, count in pair_col_freq.items():
        if tag in tag_freq:
            if tag_freq[tag] != count:
                raise ValidationError(
                    f"pair columns give frequency {count} for {tag}, "
                    f"but its frequency row says {tag_freq[tag]}"
                )
        else:
            tag_freq[tag] = count
    pair_stats = {
        (a, b): PairStat(tag_freq[a], tag_freq[b], cab) for (a, b), cab in pair_counts.items()
    }
    return CoocTable(tag_freq, pair_stats)


# ---------------------------------------------------------------------------
# Sample metadata JSONL
# ---------------------------------------------------------------------------

def read_sample_meta(path: PathLike) -> List[SampleMeta]:
    """Read row metadata; line i must describe row i (a gap-free prefix)."""
    metas: List[SampleMeta] = []
    seen_sha = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: invalid JSON: {exc}") from None
            if not isinstance(obj, dict):
                raise ParseError(f"line {lineno}: expected a JSON object")
            missing = {"row", "sha256", "label", "subset", "appeared"} - obj.keys()
            if missing:
                raise ParseError(f"line {lineno}: missing keys {sorted(missing)}")
            row = obj["row"]
            expected_row = len(metas)
            if row != expected_row:
                raise ValidationError(
                    f"line {lineno}: rows must form the prefix 0..N-1 in order; "
                    f"expected row {expected_row}, got {row}"
                )
            try:
                label = Label.from_int(obj["label"])
            except (ValidationError, TypeError) as exc:
                raise ValidationError(f"line {lineno}: {exc}") from None
            try:
                subset = Subset(obj["subset"])
            except ValueError:
                raise ValidationError(f"line {lineno}: unknown subset {obj['subset']!r}") from None
            try:
                meta = SampleMeta(
                    row=row,
                    sha256=obj["sha256"],
                    label=label,
                    subset=subset,
                    appeared=obj["appeared"],
                )
            except ValidationError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from None
            if meta.sha256 in seen_sha:
                raise DuplicateError(f"line {lineno}: duplicate sha256 {meta.sha256}")
            seen_sha.add(meta.sha256)
            metas.append(meta)
    return metas


def write_sample_meta(metas: Sequence[SampleMeta], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for m in metas:
            fh.write(
                json.dumps(
                    {
                        "row": m.row,
                        "sha256": m.sha256,
                        "label": m.label.to_int(),
                        "subset": m.subset.value,
                        "appeared": m.appeared,
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )


# ---------------------------------------------------------------------------
# Query results JSONL
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HitEntry:
    """One retrieved sample in a query-result record."""

    sha: str
    score: float
    label: Optional[Label] = None


@dataclass(frozen=True)
class HitsRecord:
    """All hits returned for one query sample."""

    query_sha: str
    hits: Tuple[HitEntry, ...]


def write_hits_jsonl(records: Iterable[HitsRecord], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "query_sha": rec.query_sha,
                        "hits": [
                            {
                                "sha": h.sha,
                                "score": h.score,
                                "label": h.label.value if h.label is not None else None,
                            }
                            for h in rec.hits
                        ],
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )


def read_hits_jsonl(path: PathLike) -> List[HitsRecord]:
    records: List[HitsRecord] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: invalid JSON: {exc}") from None
            try:
                hits = tuple(
                    HitEntry(
                        sha=h["sha"],
                        score=float(h["score"]),
                        label=Label(h["label"]) if h.get("label") is not None else None,
                    )
                    for h in obj["hits"]
                )
                records.append(HitsRecord(query_sha=obj["query_sha"], hits=hits))
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"line {lineno}: malformed hits record: {exc}") from None
    return records


# ---------------------------------------------------------------------------
# Enrichment / ranking JSONL
# ---------------------------------------------------------------------------

def write_enrichment_jsonl(
    records: Iterable[Tuple[str, EnrichedTags]], path: PathLike
) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sha, enriched in records:
            fh.write(
                json.dumps(
                    {
                        "sha256": sha,
                        "added": [
                            {"src": src.render(), "tag": tgt.render(), "freq": freq}
                            for (src, tgt), freq in enriched.items()
                        ],
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )


def read_enrichment_jsonl(path: PathLike) -> List[Tuple[str, EnrichedTags]]:
    out: List[Tuple[str, EnrichedTags]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                added = {
                    (tag_parse(item["src"]), tag_parse(item["tag"])): float(item["freq"])
                    for item in obj["added"]
                }
                out.append((obj["sha256"], EnrichedTags(added)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"line {lineno}: malformed enrichment record: {exc}") from None
    return out


def write_ranking_jsonl(records: Iterable[Tuple[str, TagRanking]], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sha, ranking in records:
            fh.write(
                json.dumps(
                    {
                        "sha256": sha,
                        "kind": ranking.kind.value,
                        "ranking": [
                            {"tag": t.render(), "score": s} for t, s in ranking.ranked
                        ],
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )


def read_ranking_jsonl(path: PathLike) -> List[Tuple[str, TagRanking]]:
    out: List[Tuple[str, TagRanking]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                kind = TagKind(obj["kind"])
                ranked = tuple(
                    (tag_parse(item["tag"]), float(item["score"])) for item in obj["ranking"]
                )
                out.append((obj["sha256"], TagRanking(kind, ranked)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"line {lineno}: malformed ranking record: {exc}") from None
            except ValidationError as exc:
                raise ValidationError(f"line {lineno}: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# Single-family sidecar (the older one-tag-per-sample column)
# ---------------------------------------------------------------------------

def read_prev_family_csv(path: PathLike) -> Dict[str, Tag]:
    """Read ``sha256,family`` rows mapping samples to their single family tag."""
    out: Dict[str, Tag] = {}
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError("empty family file (missing header)") from None
        if header != ["sha256", "family"]:
            raise FormatError(f"bad family-file header {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise ParseError(f"line {lineno}: expected 2 columns, got {len(row)}")
            sha = _check_sha(row[0], lineno)
            if sha in out:
                raise DuplicateError(f"line {lineno}: duplicate sha256 {sha}")
            name = row[1].strip().lower()
            if not name:
                raise ParseError(f"line {lineno}: empty family name")
            try:
                out[sha] = Tag(TagKind.FAM, name)
            except ValidationError as exc:
                raise ParseError(f"line {lineno}: {exc}") from None
    return out


def write_prev_family_csv(records: Iterable[Tuple[str, Tag]], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sha256", "family"])
        for sha, tag in records:
            writer.writerow([sha, tag.name])
