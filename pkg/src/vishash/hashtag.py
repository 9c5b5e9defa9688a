"""Dense crop scoring and visual-hashtag localization.

For a target tag, many random square crops of the image are scored by the
visual classifier; each crop's confidence is assigned to all pixels it
covers and per-pixel scores are averaged over the number of crops covering
that pixel.  Thresholding the resulting activation map yields connected
components, which are gated (area, fill ratio) into box proposals.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .boxes import Box
from .errors import VishashError
from .vision import VisionModel, extract_patch, head_output, sample_random_boxes


@dataclass
class ActivationMap:
    """Per-pixel mean classifier confidence for one (image, tag) pair."""

    width: int
    height: int
    sum: np.ndarray  # H x W float64 accumulator
    count: np.ndarray  # H x W int64 coverage

    @classmethod
    def zeros(cls, width: int, height: int) -> "ActivationMap":
        return cls(width, height, np.zeros((height, width)),
                   np.zeros((height, width), dtype=np.int64))

    def value(self) -> np.ndarray:
        """sum/count where covered, 0 elsewhere."""
        out = np.zeros_like(self.sum)
        covered = self.count > 0
        out[covered] = self.sum[covered] / self.count[covered]
        return out


@dataclass(frozen=True)
class HashtagProposal:
    image_id: str
    tag: str
    box: Box
    confidence: float


@dataclass(frozen=True)
class Component:
    """A 4-connected foreground component with its tight bounding box."""

    bbox: Box
    area: int
    ys: np.ndarray
    xs: np.ndarray


@dataclass
class HashtagConfig:
    n_crops: int = 3500
    side_fraction_range: tuple[float, float] = (0.1, 0.4)
    threshold_k: float = 1.0
    min_area_fraction: float = 0.005
    fill_ratio_min: float = 0.25
    chunk: int = 256


def score_crops(
    image: np.ndarray,
    model: VisionModel,
    tag: str,
    n: int = 3500,
    side_fraction_range: tuple[float, float] = (0.1, 0.4),
    seed: int = 0,
    chunk: int = 256,
) -> list[tuple[Box, float]]:
    """Score n random crops with the target label's confidence."""
    idx = model.label_index(tag)
    h, w = image.shape[:2]
    boxes = sample_random_boxes(w, h, n, side_fraction_range, seed=seed)
    scores = _crop_scores(image, model, boxes, chunk)
    return [(b, float(scores[i, idx])) for i, b in enumerate(boxes)]


def _crop_scores(image, model: VisionModel, boxes, chunk: int) -> np.ndarray:
    side = model.encoder.cfg.patch_side
    out = np.empty((len(boxes), model.d_out))
    for lo in range(0, len(boxes), chunk):
        batch = boxes[lo : lo + chunk]
        pixels = np.stack([extract_patch(image, b, side) for b in batch])
        hidden = model.encoder.forward(pixels)
        out[lo : lo + len(batch)] = head_output(model, hidden)
    return out


def accumulate_heatmap(dims: tuple[int, int], scored_crops) -> ActivationMap:
    """Average crop confidences into per-pixel values.

    ``dims`` is (width, height).  Every pixel's value is the mean
    confidence of the crops containing it; uncovered pixels stay 0.
    """
    width, height = dims
    amap = ActivationMap.zeros(width, height)
    for box, conf in scored_crops:
        if not box.within(width, height):
            raise VishashError(f"crop {box} outside {width}x{height} image")
        amap.sum[box.y : box.y + box.h, box.x : box.x + box.w] += conf
        amap.count[box.y : box.y + box.h, box.x : box.x + box.w] += 1
    return amap


def threshold_map(amap: ActivationMap, k: float = 1.0) -> np.ndarray:
    """Binary mask of pixels whose value exceeds mean + k*std (covered only).

    Statistics are over covered pixels; the inequality is strict, so a
    constant map yields an empty mask.  ``k = -inf`` degenerates to the
    all-covered mask.
    """
    covered = amap.count > 0
    if not covered.any():
        return np.zeros_like(covered)
    if np.isneginf(k):
        return covered.copy()
    vals = amap.value()
    mu = float(vals[covered].mean())
    sigma = float(vals[covered].std())
    return (vals > mu + k * sigma) & covered


_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


def connected_components(mask: np.ndarray) -> list[Component]:
    """4-connected foreground components, ordered by their first pixel in
    row-major scan order; each carries a tight bounding box and area."""
    labeled, n = ndimage.label(mask, structure=_FOUR_CONNECTED)
    if n == 0:
        return []
    flat = labeled.ravel()
    nonzero = np.flatnonzero(flat)
    first_seen: dict[int, int] = {}
    for pos in nonzero:
        lab = int(flat[pos])
        if lab not in first_seen:
            first_seen[lab] = int(pos)
            if len(first_seen) == n:
                break
    order = sorted(first_seen, key=first_seen.get)
    comps = []
    for lab in order:
        ys, xs = np.nonzero(labeled == lab)
        bbox = Box(int(xs.min()), int(ys.min()),
                   int(xs.max() - xs.min() + 1), int(ys.max() - ys.min() + 1))
        comps.append(Component(bbox=bbox, area=len(ys), ys=ys, xs=xs))
    return comps


def refine(
    component: Component,
    amap: ActivationMap,
    min_area_fraction: float = 0.005,
    fill_ratio_min: float = 0.25,
) -> Box | None:
    """Gate a component into a box proposal, or discard (None).

    Discards components smaller than ``min_area_fraction`` of the image or
    with a fill ratio (area / bbox area) below ``fill_ratio_min``;
    otherwise returns the tight bounding box.
    """
    image_area = amap.width * amap.height
    if component.area < min_area_fraction * image_area:
        return None
    if component.area / component.bbox.area < fill_ratio_min:
        return None
    return component.bbox


def mean_in_box(amap: ActivationMap, box: Box) -> float:
    vals = amap.value()
    return float(vals[box.y : box.y + box.h, box.x : box.x + box.w].mean())


@dataclass
class TagExtraction:
    proposals: list[HashtagProposal] = field(default_factory=list)
    fallback_used: bool = False

    @property
    def best(self) -> HashtagProposal | None:
        return self.proposals[0] if self.proposals else None


def extract_hashtags(
    image: np.ndarray,
    tags,
    model: VisionModel,
    config: HashtagConfig = HashtagConfig(),
    fallback: bool = False,
    seed: int = 0,
    image_id: str = "",
    return_maps: bool = False,
):
    """Run the full localization pipeline for each tag of one image.

    One shared set of random crops is scored for all tags (the per-crop
    hidden features do not depend on the tag).  For each tag the crops'
    confidences build an activation map which is thresholded; connected
    components pass through the refinement gates and survivors are ranked
    by mean activation within their box.

    With ``fallback`` set, a tag whose components are all discarded yields
    the highest-confidence pre-refinement component box instead; if the
    mask has no components at all, the single best-scoring crop box is
    used, so at least one proposal is always emitted.

    Returns a dict tag -> TagExtraction (and tag -> ActivationMap as a
    second dict when ``return_maps``).
    """
    tags = list(tags)
    if not tags:
        raise ValueError("tags must be non-empty")
    tag_idx = [model.label_index(t) for t in tags]
    h, w = image.shape[:2]
    boxes = sample_random_boxes(w, h, config.n_crops, config.side_fraction_range,
                                seed=seed)
    scores = _crop_scores(image, model, boxes, config.chunk)

    results: dict[str, TagExtraction] = {}
    maps: dict[str, ActivationMap] = {}
    for tag, idx in zip(tags, tag_idx):
        confs = scores[:, idx]
        amap = accumulate_heatmap((w, h), zip(boxes, confs))
        mask = threshold_map(amap, config.threshold_k)
        comps = connected_components(mask)

        kept: list[tuple[Box, float]] = []
        for comp in comps:
            box = refine(comp, amap, config.min_area_fraction, config.fill_ratio_min)
            if box is not None:
                kept.append((box, mean_in_box(amap, box)))
        kept.sort(key=lambda bc: (-bc[1], bc[0]))

        res = TagExtraction()
        if kept:
            res.proposals = [
                HashtagProposal(image_id, tag, b, c) for b, c in kept
            ]
        elif fallback:
            res.fallback_used = True
            if comps:
                scored = [(c.bbox, mean_in_box(amap, c.bbox)) for c in comps]
                scored.sort(key=lambda bc: (-bc[1], bc[0]))
                box, conf = scored[0]
            else:
                best = int(np.argmax(confs))
                box = boxes[best]
                conf = mean_in_box(amap, box)
            res.proposals = [HashtagProposal(image_id, tag, box, conf)]
        results[tag] = res
        if return_maps:
            maps[tag] = amap
    if return_maps:
        return results, maps
    return results


# ---------------------------------------------------------------------------
# Heatmap / proposal serialization
# ---------------------------------------------------------------------------


def export_heatmap_pgm(amap: ActivationMap, path) -> None:
    """8-bit binary PGM (P5) of the min-max normalized value grid."""
    vals = amap.value()
    lo, hi = float(vals.min()), float(vals.max())
    if hi > lo:
        scaled = np.round((vals - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(vals)
    data = scaled.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{amap.width} {amap.height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def export_heatmap_raw(amap: ActivationMap, path) -> None:
    """Raw float grid: 16-byte header (magic "IHMF", u32 width, u32 height,
    u32 reserved, little-endian) followed by float32 LE rows."""
    with open(path, "wb") as fh:
        fh.write(b"IHMF")
        fh.write(struct.pack("<III", amap.width, amap.height, 0))
        fh.write(amap.value().astype("<f4").tobytes())


def load_heatmap_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:4] != b"IHMF":
            raise VishashError("not a raw heatmap file")
        width, height, _ = struct.unpack("<III", head[4:])
        grid = np.frombuffer(fh.read(), dtype="<f4")
    if grid.size != width * height:
        raise VishashError("raw heatmap size mismatch")
    return grid.reshape(height, width).astype(np.float64)


def extraction_to_dict(image_id: str, tag: str, res: TagExtraction) -> dict:
    return {
        "image_id": image_id,
        "tag": tag,
        "proposals": [
            {"x": p.box.x, "y": p.box.y, "w": p.box.w, "h": p.box.h,
             "confidence": p.confidence}
            for p in res.proposals
        ],
        "fallback_used": res.fallback_used,
    }
