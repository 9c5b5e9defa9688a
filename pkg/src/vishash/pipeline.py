"""Glue between corpus records and the models: feature building, label
encoding, batch prediction, and image loading."""

from __future__ import annotations

import functools
import os

import numpy as np

from . import mlp
from .corpus import InfographicRecord, resolve_image_path
from .embed_text import EmbeddingTable, embed_mean, rank_tags_with_snap, snap_tags, tokenize_clean
from .errors import EmptyDataset
from .imgio import load_image
from .seeds import derive_seed
from .vision import VisionModel, aggregate_bag, extract_patch, head_output, sample_random_boxes


class ImageCache:
    """Lazy image loader resolving manifest-relative paths, with an LRU."""

    def __init__(self, root: str | os.PathLike, maxsize: int = 128):
        self.root = os.fspath(root)
        self._load = functools.lru_cache(maxsize=maxsize)(self._load_uncached)

    def _load_uncached(self, path: str) -> np.ndarray:
        return load_image(path)

    def __call__(self, record: InfographicRecord) -> np.ndarray:
        return self._load(resolve_image_path(record, self.root))


def text_features(records, table: EmbeddingTable) -> np.ndarray:
    """Mean-embedding feature matrix, one row per record."""
    X = np.zeros((len(records), table.dim))
    for i, r in enumerate(records):
        X[i] = embed_mean(tokenize_clean(r.transcript), table).vector
    return X


def category_label_list(records) -> list[str]:
    """Background label at index 0, then the sorted categories."""
    cats = sorted({r.category for r in records if r.category is not None})
    if not cats:
        raise EmptyDataset("no categorized records")
    return [mlp.BACKGROUND_LABEL] + cats


def category_targets(records, labels: list[str]) -> np.ndarray:
    index = {c: i for i, c in enumerate(labels)}
    return np.array([index[r.category] for r in records], dtype=np.int64)


def tag_targets(records, tags: list[str]) -> np.ndarray:
    index = {t: i for i, t in enumerate(tags)}
    out = np.zeros((len(records), len(tags)))
    for i, r in enumerate(records):
        for t in r.tags:
            if t in index:
                out[i, index[t]] = 1.0
    return out


def predict_categories(model: mlp.MlpModel, records, table: EmbeddingTable,
                       k: int) -> dict[str, list[str]]:
    X = text_features(records, table)
    return {
        r.id: [label for label, _ in mlp.predict_topk(model, X[i], k)]
        for i, r in enumerate(records)
    }


def predict_tags(
    model: mlp.MlpModel,
    records,
    table: EmbeddingTable,
    k: int,
    snap: bool = False,
) -> dict[str, list[str]]:
    """Ranked tag predictions per record, optionally with verbatim snapping."""
    X = text_features(records, table)
    out = {}
    for i, r in enumerate(records):
        ranking = [t for t, _ in mlp.predict_topk(model, X[i], model.d_out)]
        if snap:
            snapped = snap_tags(tokenize_clean(r.transcript), model.labels)
            ranking = rank_tags_with_snap(ranking, snapped, k)
        out[r.id] = ranking[:k]
    return out


def predict_bag_categories(
    model: VisionModel,
    records,
    images: ImageCache,
    k: int,
    bag_size: int = 5,
    side_fraction_range: tuple[float, float] = (0.1, 0.4),
    seed: int = 0,
) -> dict[str, list[str]]:
    """Bag predictions for whole images, one sampled bag per record."""
    out = {}
    side = model.encoder.cfg.patch_side
    start = 1 if model.head == mlp.SOFTMAX else 0
    for r in records:
        img = images(r)
        rng = np.random.default_rng(derive_seed(seed, "evalbag", r.id))
        boxes = sample_random_boxes(img.shape[1], img.shape[0], bag_size,
                                    side_fraction_range, rng=rng)
        pixels = np.stack([extract_patch(img, b, side) for b in boxes])
        hidden = model.encoder.forward(pixels)
        scores = head_output(model, aggregate_bag(hidden, model.agg))
        idx = sorted(range(start, len(model.labels)), key=lambda j: (-scores[j], j))
        out[r.id] = [model.labels[j] for j in idx[:k]]
    return out
