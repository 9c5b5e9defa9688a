"""Dataset loading, curation, and splitting.

The on-disk manifest is UTF-8 JSON Lines, one record per line:

    {"id": ..., "image": ..., "width": ..., "height": ...,
     "category"?: ..., "tags": [...], "transcript": [...],
     "gt_icons"?: [{"tag", "x", "y", "w", "h"}, ...]}

``category`` is omitted when absent and ``gt_icons`` is omitted when the
record carries no planted ground truth.  The merge map is a TSV file of
``raw<TAB>canonical`` lines.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, replace

from .boxes import Box, box_from_dict, box_to_dict
from .errors import EmptyDataset, MissingField, ParseError


@dataclass(frozen=True)
class InfographicRecord:
    """One image with its labels, transcript, and optional planted boxes."""

    id: str
    image_path: str
    width: int
    height: int
    category: str | None
    tags: frozenset[str]
    transcript: tuple[str, ...]
    gt_icons: tuple[tuple[str, Box], ...] | None = None

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"record {self.id}: width/height must be >= 1")

    @property
    def aspect(self) -> float:
        return self.width / self.height


@dataclass
class TagVocabulary:
    """Retained canonical tags with their image counts and the merge map."""

    tags: list[str]
    counts: dict[str, int]
    merge_map: dict[str, str] = field(default_factory=dict)

    def index(self, tag: str) -> int:
        return self.tags.index(tag)

    def __contains__(self, tag: str) -> bool:
        return tag in self.counts

    def __len__(self) -> int:
        return len(self.tags)


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    seed: int


def load_merge_map(path: str | os.PathLike) -> dict[str, str]:
    """Load a raw->canonical tag map from TSV; validates idempotence."""
    mapping: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError("expected raw<TAB>canonical", line=n)
            mapping[parts[0]] = parts[1]
    for raw, canon in mapping.items():
        if mapping.get(canon, canon) != canon:
            raise ParseError(f"merge map not idempotent at {raw!r} -> {canon!r}", line=0)
    return mapping


def merge_tags(raw_tags, merge_map: dict[str, str]) -> frozenset[str]:
    """Map raw tags through the merge map; unmapped tags pass through."""
    return frozenset(merge_map.get(t, t) for t in raw_tags)


def curate(
    records,
    min_tag_count: int = 50,
    aspect_bounds: tuple[float, float] = (1 / 5, 5.0),
    max_tags_per_image: int | None = None,
    merge_map: dict[str, str] | None = None,
) -> tuple[list[InfographicRecord], TagVocabulary]:
    """Filter records and tags to a mutually consistent fixed point.

    A record survives when it has a category, an aspect ratio inside
    ``aspect_bounds``, and at least one retained tag; a tag is retained when
    it occurs in at least ``min_tag_count`` surviving records.  Dropping
    records can push tags below threshold (and vice versa), so the two
    filters iterate until stable.  Record tag sets are reduced to the
    retained vocabulary; with ``max_tags_per_image`` set they are further
    truncated to the most frequent tags (ties broken by tag name).

    Returns the curated records (input order preserved) and the tag
    vocabulary with final counts.

    Raises:
        EmptyDataset: nothing survives curation.
    """
    if min_tag_count < 1:
        raise ValueError("min_tag_count must be >= 1")
    lo, hi = aspect_bounds
    merge_map = dict(merge_map or {})

    current: list[InfographicRecord] = []
    for r in records:
        tags = merge_tags(r.tags, merge_map)
        if r.category is None or not tags:
            continue
        if not (lo <= r.aspect <= hi):
            continue
        current.append(replace(r, tags=tags))

    while True:
        counts: dict[str, int] = {}
        for r in current:
            for t in r.tags:
                counts[t] = counts.get(t, 0) + 1
        retained = {t for t, c in counts.items() if c >= min_tag_count}

        nxt: list[InfographicRecord] = []
        changed = False
        for r in current:
            tags = frozenset(t for t in r.tags if t in retained)
            if max_tags_per_image is not None and len(tags) > max_tags_per_image:
                ranked = sorted(tags, key=lambda t: (-counts[t], t))
                tags = frozenset(ranked[:max_tags_per_image])
            if not tags:
                changed = True
                continue
            if tags != r.tags:
                changed = True
                r = replace(r, tags=tags)
            nxt.append(r)
        current = nxt
        if not changed:
            break

    if not current:
        raise EmptyDataset("no records survive curation")

    final_counts: dict[str, int] = {}
    for r in current:
        for t in r.tags:
            final_counts[t] = final_counts.get(t, 0) + 1
    vocab = TagVocabulary(
        tags=sorted(final_counts), counts=final_counts, merge_map=merge_map
    )
    return current, vocab


def _split_key(seed: int, record_id: str) -> bytes:
    return hashlib.sha256(f"{seed}:{record_id}".encode("utf-8")).digest()


def split(records, ratio: float = 0.1, seed: int = 0) -> DatasetSplit:
    """Deterministic train/test split of exact size ``round(ratio * N)``.

    Records are ranked by a stable hash of (seed, id); the lowest-ranked
    ``round(ratio * N)`` ids form the test set.  The result is independent
    of the input ordering.
    """
    if not (0.0 < ratio < 1.0):
        raise ValueError("ratio must be in (0, 1)")
    ids = [r.id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate record ids")
    n_test = round(ratio * len(ids))
    ranked = sorted(ids, key=lambda i: (_split_key(seed, i), i))
    test = set(ranked[:n_test])
    return DatasetSplit(
        train_ids=tuple(i for i in ids if i not in test),
        test_ids=tuple(i for i in ids if i in test),
        seed=seed,
    )


def record_to_dict(r: InfographicRecord) -> dict:
    d: dict = {
        "id": r.id,
        "image": r.image_path,
        "width": r.width,
        "height": r.height,
    }
    if r.category is not None:
        d["category"] = r.category
    d["tags"] = sorted(r.tags)
    d["transcript"] = list(r.transcript)
    if r.gt_icons is not None:
        d["gt_icons"] = [{"tag": t, **box_to_dict(b)} for t, b in r.gt_icons]
    return d


def record_from_dict(d: dict, line: int | None = None) -> InfographicRecord:
    for f in ("id", "image", "width", "height", "tags", "transcript"):
        if f not in d:
            raise MissingField(f, line=line)
    gt = None
    if "gt_icons" in d:
        gt = tuple((g["tag"], box_from_dict(g)) for g in d["gt_icons"])
    return InfographicRecord(
        id=str(d["id"]),
        image_path=str(d["image"]),
        width=int(d["width"]),
        height=int(d["height"]),
        category=d.get("category"),
        tags=frozenset(d["tags"]),
        transcript=tuple(d["transcript"]),
        gt_icons=gt,
    )


def load_manifest(path: str | os.PathLike) -> list[InfographicRecord]:
    """Read a JSON Lines manifest; raises ParseError with the line number."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(str(e), line=n) from e
            records.append(record_from_dict(d, line=n))
    return records


def write_manifest(records, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(record_to_dict(r), sort_keys=True) + "\n")


def resolve_image_path(record: InfographicRecord, root: str | os.PathLike) -> str:
    """Resolve a record's image path against the manifest's directory."""
    if os.path.isabs(record.image_path):
        return record.image_path
    return os.path.join(os.fspath(root), record.image_path)


def vocab_to_dict(v: TagVocabulary) -> dict:
    return {"tags": v.tags, "counts": v.counts, "merge_map": v.merge_map}


def vocab_from_dict(d: dict) -> TagVocabulary:
    return TagVocabulary(
        tags=list(d["tags"]),
        counts={k: int(c) for k, c in d["counts"].items()},
        merge_map=dict(d.get("merge_map", {})),
    )


def save_vocab(v: TagVocabulary, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(vocab_to_dict(v), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_vocab(path: str | os.PathLike) -> TagVocabulary:
    with open(path, encoding="utf-8") as fh:
        return vocab_from_dict(json.load(fh))
