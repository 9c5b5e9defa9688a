"""Metrics: top-k category accuracy, tag precision/recall@k, box IOU,
hashtag localization precision/accuracy, and chance baselines."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from .boxes import Box, box_from_dict, box_to_dict
from .errors import (
    DegenerateBox,
    EmptyGroundTruth,
    MissingPrediction,
    ParseError,
)
from .seeds import derive_rng
from .vision import sample_random_boxes


@dataclass(frozen=True)
class GroundTruthBoxSet:
    """One annotator's boxes (or a no-visual judgement) for an (image, tag)."""

    image_id: str
    tag: str
    annotator: str
    boxes: tuple[Box, ...]
    no_visual: bool = False

    def __post_init__(self):
        if self.no_visual and self.boxes:
            raise ValueError("no_visual set but boxes present")


def gt_to_dict(g: GroundTruthBoxSet) -> dict:
    return {
        "image_id": g.image_id,
        "tag": g.tag,
        "annotator": g.annotator,
        "no_visual": g.no_visual,
        "boxes": [box_to_dict(b) for b in g.boxes],
    }


def gt_from_dict(d: dict) -> GroundTruthBoxSet:
    return GroundTruthBoxSet(
        image_id=str(d["image_id"]),
        tag=str(d["tag"]),
        annotator=str(d.get("annotator", "")),
        boxes=tuple(box_from_dict(b) for b in d.get("boxes", [])),
        no_visual=bool(d.get("no_visual", False)),
    )


def load_gt_jsonl(path: str | os.PathLike) -> list[GroundTruthBoxSet]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(gt_from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as e:
                raise ParseError(str(e), line=n) from e
    return out


def write_gt_jsonl(gts, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for g in gts:
            fh.write(json.dumps(gt_to_dict(g), sort_keys=True) + "\n")


def gt_sets_from_records(records) -> list[GroundTruthBoxSet]:
    """Turn planted gt_icons into per-(image, tag) ground-truth sets."""
    out = []
    for r in records:
        if not r.gt_icons:
            continue
        per_tag: dict[str, list[Box]] = {}
        for tag, box in r.gt_icons:
            per_tag.setdefault(tag, []).append(box)
        for tag in sorted(per_tag):
            out.append(GroundTruthBoxSet(r.id, tag, "synthetic",
                                         tuple(per_tag[tag]), False))
    return out


# ---------------------------------------------------------------------------
# Label metrics
# ---------------------------------------------------------------------------


def topk_accuracy(predictions: dict[str, list[str]], gt_category: dict[str, str],
                  ks=(1, 3, 5)) -> dict[int, float]:
    """Fraction of images whose true category appears in the top-k ranking."""
    ks = sorted(ks)
    if not gt_category:
        raise EmptyGroundTruth("no images to evaluate")
    hits = {k: 0 for k in ks}
    for image_id, cat in gt_category.items():
        ranking = predictions.get(image_id)
        if ranking is None or len(ranking) < ks[-1]:
            raise MissingPrediction(f"image {image_id!r} needs a top-{ks[-1]} ranking")
        for k in ks:
            if cat in ranking[:k]:
                hits[k] += 1
    n = len(gt_category)
    return {k: hits[k] / n for k in ks}


def tag_pr_at_k(predictions: dict[str, list[str]], gt_tags: dict[str, set],
                k: int) -> tuple[float, float]:
    """Mean precision and recall of the top-k predicted tags."""
    if not gt_tags:
        raise EmptyGroundTruth("no images to evaluate")
    precs, recs = [], []
    for image_id, gt in gt_tags.items():
        if not gt:
            raise EmptyGroundTruth(f"image {image_id!r} has no ground-truth tags")
        ranking = predictions.get(image_id)
        if ranking is None:
            raise MissingPrediction(f"image {image_id!r} has no tag prediction")
        hit = len(set(ranking[:k]) & gt)
        precs.append(hit / k)
        recs.append(hit / len(gt))
    return sum(precs) / len(precs), sum(recs) / len(recs)


# ---------------------------------------------------------------------------
# Box metrics
# ---------------------------------------------------------------------------


def iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two pixel boxes; symmetric, in [0, 1]."""
    if a.w <= 0 or a.h <= 0 or b.w <= 0 or b.h <= 0:
        raise DegenerateBox(f"boxes must have positive size: {a}, {b}")
    ix = max(0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


@dataclass
class HashtagMetrics:
    precision: float
    accuracy: float
    mean_iou: float
    n_pairs: int
    n_with_proposal: int
    n_hits: int

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "accuracy": self.accuracy,
            "mean_iou": self.mean_iou,
            "n_pairs": self.n_pairs,
            "n_with_proposal": self.n_with_proposal,
            "n_hits": self.n_hits,
        }


def eligible_pairs(gts) -> dict[tuple[str, str], list[Box]]:
    """Group ground truth by (image, tag), uniting boxes across annotators;
    pairs judged to have no visual region (no boxes at all) are excluded."""
    grouped: dict[tuple[str, str], list[Box]] = {}
    for g in gts:
        grouped.setdefault((g.image_id, g.tag), []).extend(g.boxes)
    return {pair: boxes for pair, boxes in grouped.items() if boxes}


def hashtag_metrics(
    proposals: dict[tuple[str, str], list[Box]],
    gts,
    iou_threshold: float = 0.5,
) -> HashtagMetrics:
    """Localization quality of the best proposal per (image, tag) pair.

    A hit is a best proposal with IOU strictly above the threshold against
    at least one ground-truth box (any annotator).  Precision divides hits
    by pairs that received a proposal, accuracy by all eligible pairs; a
    pair without a proposal contributes IOU 0 to the mean.
    """
    pairs = eligible_pairs(gts)
    n_pairs = len(pairs)
    n_with = 0
    n_hits = 0
    iou_total = 0.0
    for pair, gt_boxes in pairs.items():
        ranked = proposals.get(pair) or []
        if not ranked:
            continue
        n_with += 1
        best = ranked[0]
        best_iou = max(iou(best, g) for g in gt_boxes)
        iou_total += best_iou
        if best_iou > iou_threshold:
            n_hits += 1
    return HashtagMetrics(
        precision=n_hits / n_with if n_with else 0.0,
        accuracy=n_hits / n_pairs if n_pairs else 0.0,
        mean_iou=iou_total / n_pairs if n_pairs else 0.0,
        n_pairs=n_pairs,
        n_with_proposal=n_with,
        n_hits=n_hits,
    )


def random_crop_baseline(
    image_dims: dict[str, tuple[int, int]],
    gts,
    seed: int = 0,
    side_fraction_range: tuple[float, float] = (0.1, 0.4),
    iou_threshold: float = 0.5,
) -> HashtagMetrics:
    """Chance baseline: one random crop per eligible (image, tag) pair."""
    pairs = eligible_pairs(gts)
    proposals: dict[tuple[str, str], list[Box]] = {}
    for image_id, tag in sorted(pairs):
        w, h = image_dims[image_id]
        rng = derive_rng(seed, "random-crop", image_id, tag)
        proposals[(image_id, tag)] = sample_random_boxes(
            w, h, 1, side_fraction_range, rng=rng
        )
    return hashtag_metrics(proposals, gts, iou_threshold)


def category_chance(categories, ks=(1, 3, 5)) -> dict[int, float]:
    """Accuracy of always predicting the k empirically most frequent
    categories (ties broken by name)."""
    categories = list(categories)
    if not categories:
        raise EmptyGroundTruth("no categories")
    counts: dict[str, int] = {}
    for c in categories:
        counts[c] = counts.get(c, 0) + 1
    ranked = sorted(counts, key=lambda c: (-counts[c], c))
    n = len(categories)
    return {k: sum(counts[c] for c in ranked[:k]) / n for k in sorted(ks)}


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------


def write_report(report: dict, path: str | os.PathLike) -> None:
    """Canonical JSON (sorted keys) for diffability."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=1)
        fh.write("\n")


def format_summary(report: dict) -> str:
    """Fixed-width table of the scalar metrics in a report."""
    rows: list[tuple[str, float]] = []

    def walk(prefix: str, node):
        if isinstance(node, dict):
            for key in sorted(node):
                walk(f"{prefix}.{key}" if prefix else str(key), node[key])
        elif isinstance(node, (int, float)) and not isinstance(node, bool):
            rows.append((prefix, float(node)))

    walk("", report)
    width = max((len(name) for name, _ in rows), default=10)
    lines = [f"{name:<{width}}  {value:>12.6f}" for name, value in rows]
    return "\n".join(lines)


def load_proposals_jsonl(path: str | os.PathLike) -> dict[tuple[str, str], list[Box]]:
    """Read the hashtag proposals file into (image, tag) -> ranked boxes."""
    out: dict[tuple[str, str], list[Box]] = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
                out[(d["image_id"], d["tag"])] = [box_from_dict(p) for p in d["proposals"]]
            except (json.JSONDecodeError, KeyError) as e:
                raise ParseError(str(e), line=n) from e
    return out
