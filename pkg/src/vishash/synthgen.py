"""Synthetic infographic generator with planted ground truth.

Each generated image is a large canvas with gridlines and text-like
distractor strokes, plus colored icon glyphs planted at known boxes: every
tag owns a distinct (shape, color) glyph, with color shared per category
and shape varying within it.  Transcripts mix the image's tag-name words,
words correlated with its category, and noise words from a separate pool,
so tag names never appear for tags the image does not have.  A synthetic
embedding table ties the vocabulary together: words of one category
cluster around a shared direction.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .boxes import Box
from .corpus import InfographicRecord, TagVocabulary, write_manifest
from .embed_text import EmbeddingTable
from .errors import ConfigError
from .imgio import save_image
from .seeds import derive_rng

CATEGORY_NAMES = (
    "economy", "health", "science", "travel", "sports", "food",
    "technology", "education", "environment", "politics", "culture", "weather",
)

TAG_WORDS = (
    "coin", "bank", "market", "doctor", "virus", "pill", "atom", "rocket",
    "plane", "beach", "soccer", "tennis", "pizza", "fruit", "robot", "laptop",
    "school", "book", "forest", "river", "vote", "law", "music", "paint",
    "cloud", "storm", "engine", "bridge", "garden", "camera", "phone", "clock",
    "tower", "island", "desert", "glacier", "harbor", "meadow", "canyon", "valley",
)

SHAPES = ("circle", "triangle", "bar", "ring", "cross", "star")

PALETTE = (
    (220, 40, 40), (40, 80, 220), (40, 170, 70), (240, 150, 30),
    (150, 60, 200), (20, 165, 165), (215, 60, 160), (140, 95, 40),
    (95, 115, 25), (25, 55, 115), (235, 205, 35), (120, 20, 60),
    (20, 120, 90), (250, 95, 85), (85, 40, 160), (160, 180, 60),
    (60, 150, 235), (205, 85, 25), (35, 35, 145), (170, 30, 110),
    (30, 200, 160), (190, 140, 230), (110, 70, 15), (65, 95, 70),
    (240, 60, 210), (15, 90, 35), (200, 165, 120), (70, 10, 20),
    (130, 210, 50), (10, 35, 75), (255, 120, 150), (90, 90, 180),
    (180, 60, 60), (45, 130, 130), (225, 180, 70), (140, 0, 200),
    (0, 160, 40), (215, 110, 55), (55, 20, 130), (160, 110, 160),
)

BACKGROUND = (246, 244, 240)
N_THEME_WORDS = 8
N_FILLER_WORDS = 200


@dataclass
class SynthConfig:
    n_images: int = 100
    canvas: tuple[int, int] = (1024, 1536)  # (W, H)
    n_categories: int = 6
    n_tags: int = 20
    icons_per_image: tuple[int, int] = (2, 4)
    icon_side: tuple[int, int] = (110, 190)
    words_per_image: int = 95
    noise_word_fraction: float = 0.2
    seed: int = 0
    embed_dim: int = 64

    def __post_init__(self):
        if self.n_categories > len(CATEGORY_NAMES) or self.n_categories < 1:
            raise ConfigError(f"n_categories must be in [1, {len(CATEGORY_NAMES)}]")
        if self.n_tags > len(TAG_WORDS):
            raise ConfigError(f"n_tags must be <= {len(TAG_WORDS)}")
        if self.n_tags < self.n_categories:
            raise ConfigError("need n_tags >= n_categories")
        if self.n_tags > len(PALETTE):
            raise ConfigError("not enough palette colors for n_tags")
        if not (0.0 <= self.noise_word_fraction <= 1.0):
            raise ConfigError("noise_word_fraction must be in [0, 1]")
        w, h = self.canvas
        if self.icon_side[1] + 8 > min(w, h):
            raise ConfigError("icons do not fit on the canvas")
        if self.icon_side[0] < 8 or self.icon_side[0] > self.icon_side[1]:
            raise ConfigError("bad icon_side range")


@dataclass
class SynthOutput:
    records: list[InfographicRecord]
    vocab: TagVocabulary
    categories: list[str]
    table: EmbeddingTable
    images: dict[str, np.ndarray] = field(default_factory=dict)


def tag_category_map(cfg: SynthConfig) -> dict[str, str]:
    """Fixed grouping: tag i belongs to category i mod n_categories."""
    return {
        TAG_WORDS[i]: CATEGORY_NAMES[i % cfg.n_categories]
        for i in range(cfg.n_tags)
    }


def tag_glyphs(cfg: SynthConfig) -> dict[str, tuple[str, tuple[int, int, int]]]:
    """tag -> (shape, color); every tag gets its own palette color, shapes
    cycle, so all pairs are distinct."""
    return {
        TAG_WORDS[i]: (SHAPES[i % len(SHAPES)], PALETTE[i])
        for i in range(cfg.n_tags)
    }


def _theme_words(category: str) -> list[str]:
    return [f"{category}{k}" for k in range(N_THEME_WORDS)]


def _filler_words() -> list[str]:
    return [f"filler{k:03d}" for k in range(N_FILLER_WORDS)]


def build_embedding_table(cfg: SynthConfig) -> EmbeddingTable:
    """Random embeddings with per-category cluster structure."""
    rng = derive_rng(cfg.seed, "embeddings")
    dim = cfg.embed_dim
    cats = CATEGORY_NAMES[: cfg.n_categories]

    def unit(v):
        return v / np.linalg.norm(v)

    cat_dirs = {c: unit(rng.standard_normal(dim)) for c in cats}
    entries: dict[str, np.ndarray] = {}
    cat_of = tag_category_map(cfg)
    for tag in TAG_WORDS[: cfg.n_tags]:
        own = unit(rng.standard_normal(dim))
        entries[tag] = cat_dirs[cat_of[tag]] + 1.2 * own
    for c in cats:
        for w in _theme_words(c):
            entries[w] = cat_dirs[c] + 0.35 * unit(rng.standard_normal(dim))
    for w in _filler_words():
        entries[w] = unit(rng.standard_normal(dim))
    return EmbeddingTable(dim, entries)


# ---------------------------------------------------------------------------
# Glyph rasterization
# ---------------------------------------------------------------------------


def _shape_mask(shape: str, side: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side]
    c = (side - 1) / 2.0
    r = side / 2.0
    dy, dx = yy - c, xx - c
    rad = np.hypot(dx, dy)
    if shape == "circle":
        return rad <= 0.92 * r
    if shape == "ring":
        return (rad <= 0.95 * r) & (rad >= 0.55 * r)
    if shape == "triangle":
        # upward triangle: apex at top-center, base at the bottom
        t = yy / max(side - 1, 1)
        return np.abs(dx) <= 0.95 * r * t
    if shape == "bar":
        third = max(side // 5, 2)
        mask = np.zeros((side, side), dtype=bool)
        heights = (0.55, 0.95, 0.75)
        for k, frac in enumerate(heights):
            x0 = int(round(k * 1.6 * third + 0.1 * side))
            x1 = min(x0 + third, side)
            y0 = int(round(side * (1 - frac)))
            mask[y0:, x0:x1] = True
        return mask
    if shape == "cross":
        arm = 0.30 * side
        return (np.abs(dx) <= arm / 2) | (np.abs(dy) <= arm / 2)
    if shape == "star":
        theta = np.arctan2(dy, dx)
        spikes = 0.5 + 0.5 * np.cos(5 * theta)
        limit = (0.38 + 0.60 * spikes**1.5) * r
        return rad <= limit
    raise ConfigError(f"unknown shape {shape!r}")


def _draw_glyph(canvas: np.ndarray, box: Box, shape: str, color) -> None:
    mask = _shape_mask(shape, box.w)
    region = canvas[box.y : box.y + box.h, box.x : box.x + box.w]
    region[mask] = color


def _draw_background(canvas: np.ndarray, rng: np.random.Generator) -> None:
    h, w = canvas.shape[:2]
    canvas[:, :] = BACKGROUND
    # light gridlines
    for gx in range(0, w, max(w // 8, 24)):
        canvas[:, gx : gx + 1] = (225, 223, 218)
    for gy in range(0, h, max(h // 10, 24)):
        canvas[gy : gy + 1, :] = (225, 223, 218)
    # text-like dark dashes in ragged rows
    n_rows = max(6, h // 60)
    for _ in range(n_rows):
        y = int(rng.integers(0, h - 4))
        x = int(rng.integers(0, w // 3))
        while x < w - 8:
            dash = int(rng.integers(6, 26))
            gap = int(rng.integers(4, 14))
            end = min(x + dash, w)
            canvas[y : y + 3, x:end] = (60, 58, 55)
            x = end + gap


def _place_boxes(sides, width, height, rng, occupied=None, tries=200) -> list[Box]:
    """Non-overlapping square placements (4 px margin); ConfigError on failure."""
    placed: list[Box] = list(occupied or [])
    out: list[Box] = []
    margin = 4
    for side in sides:
        ok = None
        for _ in range(tries):
            x = int(rng.integers(0, width - side + 1))
            y = int(rng.integers(0, height - side + 1))
            cand = Box(x, y, side, side)
            clash = any(
                not (cand.x + cand.w + margin <= b.x or b.x + b.w + margin <= cand.x
                     or cand.y + cand.h + margin <= b.y or b.y + b.h + margin <= cand.y)
                for b in placed
            )
            if not clash:
                ok = cand
                break
        if ok is None:
            raise ConfigError("could not place glyphs without overlap")
        placed.append(ok)
        out.append(ok)
    return out


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def _image_labels(cfg: SynthConfig, i: int):
    """Category and tags for image i (independent of canvas/layout)."""
    rng = derive_rng(cfg.seed, "labels", i)
    cats = CATEGORY_NAMES[: cfg.n_categories]
    category = cats[int(rng.integers(len(cats)))]
    cat_tags = [t for t, c in tag_category_map(cfg).items() if c == category]
    n_tags = int(rng.integers(1, min(3, len(cat_tags)) + 1))
    idx = rng.choice(len(cat_tags), size=n_tags, replace=False)
    tags = [cat_tags[j] for j in np.sort(idx)]
    return category, tags


def _transcript(cfg: SynthConfig, i: int, category: str, tags: list[str]) -> list[str]:
    rng = derive_rng(cfg.seed, "text", i)
    words: list[str] = []
    for t in tags:
        words.extend([t] * (1 + int(rng.integers(0, 3))))
    n_rest = max(cfg.words_per_image - len(words), 0)
    n_noise = int(round(cfg.noise_word_fraction * n_rest))
    theme = _theme_words(category)
    filler = _filler_words()
    words.extend(theme[int(j)] for j in rng.integers(0, len(theme), n_rest - n_noise))
    words.extend(filler[int(j)] for j in rng.integers(0, len(filler), n_noise))
    perm = rng.permutation(len(words))
    return [words[int(p)] for p in perm]


def render_image(cfg: SynthConfig, i: int):
    """Render image i; returns (canvas uint8, gt_icons list)."""
    w, h = cfg.canvas
    category, tags = _image_labels(cfg, i)
    rng = derive_rng(cfg.seed, "layout", i)
    canvas = np.empty((h, w, 3), dtype=np.uint8)
    _draw_background(canvas, rng)

    lo, hi = cfg.icons_per_image
    n_icons = max(len(tags), int(rng.integers(lo, hi + 1)))
    owners = list(tags)
    while len(owners) < n_icons:
        owners.append(tags[int(rng.integers(len(tags)))])
    sides = [int(rng.integers(cfg.icon_side[0], cfg.icon_side[1] + 1))
             for _ in range(n_icons)]
    boxes = _place_boxes(sides, w, h, rng)
    glyphs = tag_glyphs(cfg)
    gt_icons = []
    for tag, box in zip(owners, boxes):
        shape, color = glyphs[tag]
        _draw_glyph(canvas, box, shape, color)
        gt_icons.append((tag, box))
    gt_icons.sort(key=lambda tb: (tb[0], tb[1]))
    return canvas, category, tags, gt_icons


def generate(cfg: SynthConfig, out_dir: str | os.PathLike | None = None) -> SynthOutput:
    """Generate the synthetic corpus; deterministic per cfg.seed.

    With ``out_dir`` set, writes PNGs under ``images/``, the manifest as
    ``manifest.jsonl``, and the embedding table as ``embeddings.txt``; image
    paths in the returned records are relative to ``out_dir``.  Without it,
    rendered arrays are returned in memory (``SynthOutput.images``).
    """
    records: list[InfographicRecord] = []
    images: dict[str, np.ndarray] = {}
    w, h = cfg.canvas
    if out_dir is not None:
        os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    for i in range(cfg.n_images):
        canvas, category, tags, gt_icons = render_image(cfg, i)
        image_id = f"synth{i:05d}"
        rel = os.path.join("images", f"{image_id}.png")
        if out_dir is not None:
            save_image(canvas, os.path.join(out_dir, rel))
        else:
            images[image_id] = canvas
        records.append(
            InfographicRecord(
                id=image_id,
                image_path=rel,
                width=w,
                height=h,
                category=category,
                tags=frozenset(tags),
                transcript=tuple(_transcript(cfg, i, category, tags)),
                gt_icons=tuple(gt_icons),
            )
        )

    counts: dict[str, int] = {t: 0 for t in TAG_WORDS[: cfg.n_tags]}
    for r in records:
        for t in r.tags:
            counts[t] += 1
    vocab = TagVocabulary(tags=sorted(counts), counts=counts, merge_map={})
    table = build_embedding_table(cfg)
    if out_dir is not None:
        write_manifest(records, os.path.join(out_dir, "manifest.jsonl"))
        table.save(os.path.join(out_dir, "embeddings.txt"))
    return SynthOutput(
        records=records,
        vocab=vocab,
        categories=list(CATEGORY_NAMES[: cfg.n_categories]),
        table=table,
        images=images,
    )
