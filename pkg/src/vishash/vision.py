"""Patch-based multiple-instance learning.

Each image is represented by a bag of square patches.  Every patch runs
through the same small convolutional encoder; the per-patch hidden vectors
are aggregated element-wise (mean or max) and a single linear layer plus
softmax/sigmoid head classifies the whole bag.  Gradients flow end-to-end
from the head through the aggregation into the encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .boxes import Box
from .errors import (
    DimensionMismatch,
    EmptyBag,
    EmptyDataset,
    HeadMismatch,
    ImageTooSmall,
    NonFiniteLoss,
    UnknownLabel,
)
from .mlp import SIGMOID, SOFTMAX, glorot_uniform, load_arrays, save_arrays
from .seeds import derive_rng

MEAN = "mean"
MAX = "max"


@dataclass(frozen=True)
class Patch:
    """A square source-image region resized to side x side, values in [0,1]."""

    box: Box
    pixels: np.ndarray


@dataclass
class Bag:
    patches: list[Patch]
    label: object = None


def resize_bilinear(img: np.ndarray, side: int) -> np.ndarray:
    """Resize an H x W x C float array to side x side with bilinear sampling."""
    h, w = img.shape[:2]
    ys = (np.arange(side) + 0.5) * (h / side) - 0.5
    xs = (np.arange(side) + 0.5) * (w / side) - 0.5
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    tl = img[np.ix_(y0, x0)]
    tr = img[np.ix_(y0, x1)]
    bl = img[np.ix_(y1, x0)]
    br = img[np.ix_(y1, x1)]
    top = tl * (1 - fx) + tr * fx
    bot = bl * (1 - fx) + br * fx
    return top * (1 - fy) + bot * fy


def extract_patch(image: np.ndarray, box: Box, side: int) -> np.ndarray:
    """Crop a box from a uint8 image and resize to side x side floats in [0,1]."""
    region = image[box.y : box.y + box.h, box.x : box.x + box.w].astype(np.float64)
    region /= 255.0
    return resize_bilinear(region, side)


def sample_random_boxes(
    width: int,
    height: int,
    n: int,
    side_fraction_range: tuple[float, float] = (0.1, 0.4),
    rng: np.random.Generator | None = None,
    seed: int = 0,
) -> list[Box]:
    """n random square boxes with side a uniform fraction of min(W, H)."""
    if min(width, height) < 10:
        raise ImageTooSmall(f"{width}x{height} image; need min dimension >= 10")
    if rng is None:
        rng = np.random.default_rng(seed)
    lo, hi = side_fraction_range
    sides = np.maximum(1, np.rint(rng.uniform(lo, hi, n) * min(width, height)).astype(np.int64))
    sides = np.minimum(sides, min(width, height))
    xs = rng.integers(0, width - sides + 1)
    ys = rng.integers(0, height - sides + 1)
    return [Box(int(x), int(y), int(s), int(s)) for x, y, s in zip(xs, ys, sides)]


def sample_random_patches(
    image: np.ndarray,
    n: int,
    side_fraction_range: tuple[float, float] = (0.1, 0.4),
    seed: int = 0,
    patch_side: int = 64,
) -> list[Patch]:
    """Random square crops, resized; deterministic for a fixed seed."""
    h, w = image.shape[:2]
    boxes = sample_random_boxes(w, h, n, side_fraction_range, seed=seed)
    return [Patch(b, extract_patch(image, b, patch_side)) for b in boxes]


def squarify_box(box: Box, width: int, height: int) -> Box:
    """Tight square around a box: side max(w, h), centered, clamped in-bounds.

    The side is preserved unless it exceeds the image, in which case it is
    clamped to min(width, height).
    """
    side = min(max(box.w, box.h), width, height)
    cx = box.x + box.w / 2.0
    cy = box.y + box.h / 2.0
    x = int(round(cx - side / 2.0))
    y = int(round(cy - side / 2.0))
    x = min(max(x, 0), width - side)
    y = min(max(y, 0), height - side)
    return Box(x, y, side, side)


def squarify_proposals(boxes, image: np.ndarray, patch_side: int = 64) -> list[Patch]:
    h, w = image.shape[:2]
    out = []
    for b in boxes:
        sq = squarify_box(b, w, h)
        out.append(Patch(sq, extract_patch(image, sq, patch_side)))
    return out


def aggregate_bag(hidden: np.ndarray, mode: str) -> np.ndarray:
    """Element-wise mean or max over the bag axis of a B x d_hidden stack.

    The mean uses an exactly rounded per-unit sum (math.fsum), so it is
    bit-identical under patch permutation and under duplicating the bag.
    """
    hidden = np.asarray(hidden, dtype=np.float64)
    if hidden.ndim != 2 or hidden.shape[0] == 0:
        raise EmptyBag("bag must contain at least one hidden vector")
    if mode == MEAN:
        b = hidden.shape[0]
        return np.array([math.fsum(hidden[:, j]) / b
                         for j in range(hidden.shape[1])])
    if mode == MAX:
        return hidden.max(axis=0)
    raise ValueError(f"unknown aggregation mode {mode!r}")


# ---------------------------------------------------------------------------
# Patch encoder: conv -> ReLU -> conv -> ReLU -> global average pool ->
# linear -> ReLU.  Stands behind a fixed interface (patch -> d_hidden reals).
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    conv1: tuple[int, int, int] = (8, 5, 2)  # (out_channels, kernel, stride)
    conv2: tuple[int, int, int] = (16, 5, 2)
    hidden: int = 64
    patch_side: int = 64


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """N x H x W x C -> N x H' x W' x (k*k*C) sliding windows."""
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # N x H' x W' x C x k x k
    win = win.transpose(0, 1, 2, 4, 5, 3)  # N x H' x W' x k x k x C
    n, ho, wo = win.shape[:3]
    return np.ascontiguousarray(win).reshape(n, ho, wo, k * k * x.shape[3])


def _col2im(dcols: np.ndarray, x_shape, k: int, stride: int) -> np.ndarray:
    """Scatter-add window gradients back to the input layout."""
    n, h, w, c = x_shape
    ho, wo = dcols.shape[1], dcols.shape[2]
    dc = dcols.reshape(n, ho, wo, k, k, c)
    dx = np.zeros(x_shape)
    for i in range(k):
        for j in range(k):
            dx[:, i : i + ho * stride : stride, j : j + wo * stride : stride] += dc[:, :, :, i, j]
    return dx


class PatchEncoder:
    """Shared per-patch feature extractor; output width = cfg.hidden."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        c1, k1, _ = cfg.conv1
        c2, k2, _ = cfg.conv2
        cin = cfg.in_channels
        self.K1 = glorot_uniform(rng, k1 * k1 * cin, k1 * k1 * c1, (k1, k1, cin, c1))
        self.c1 = np.zeros(c1)
        self.K2 = glorot_uniform(rng, k2 * k2 * c1, k2 * k2 * c2, (k2, k2, c1, c2))
        self.c2 = np.zeros(c2)
        self.Wf = glorot_uniform(rng, c2, cfg.hidden, (c2, cfg.hidden))
        self.bf = np.zeros(cfg.hidden)

    @property
    def d_hidden(self) -> int:
        return self.cfg.hidden

    def params(self) -> dict[str, np.ndarray]:
        return {"K1": self.K1, "c1": self.c1, "K2": self.K2, "c2": self.c2,
                "Wf": self.Wf, "bf": self.bf}

    def forward(self, x: np.ndarray, want_cache: bool = False):
        """Encode N patches (N x S x S x C floats) to N x d_hidden.

        Each patch is centered by its own per-channel mean first (a local,
        dataset-independent operation): near-constant background patches
        collapse to ~zero input, so bag aggregates are driven by contrast.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[3] != self.cfg.in_channels:
            raise DimensionMismatch(f"patch batch shape {x.shape}")
        x = x - x.mean(axis=(1, 2), keepdims=True)
        _, k1, s1 = self.cfg.conv1
        _, k2, s2 = self.cfg.conv2
        cols1 = _im2col(x, k1, s1)
        z1 = cols1 @ self.K1.reshape(-1, self.K1.shape[3]) + self.c1
        a1 = np.maximum(z1, 0.0)
        cols2 = _im2col(a1, k2, s2)
        z2 = cols2 @ self.K2.reshape(-1, self.K2.shape[3]) + self.c2
        a2 = np.maximum(z2, 0.0)
        g = a2.mean(axis=(1, 2))
        zf = g @ self.Wf + self.bf
        hid = np.maximum(zf, 0.0)
        if not want_cache:
            return hid
        return hid, {"x_shape": x.shape, "cols1": cols1, "z1": z1, "a1": a1,
                     "cols2": cols2, "z2": z2, "a2": a2, "g": g, "zf": zf}

    def backward(self, cache: dict, dhid: np.ndarray) -> dict[str, np.ndarray]:
        """Parameter gradients given d(loss)/d(hidden); input grads not needed."""
        _, k1, s1 = self.cfg.conv1
        _, k2, s2 = self.cfg.conv2
        dzf = dhid * (cache["zf"] > 0)
        dWf = cache["g"].T @ dzf
        dbf = dzf.sum(axis=0)
        dg = dzf @ self.Wf.T
        ho2, wo2 = cache["a2"].shape[1:3]
        da2 = np.broadcast_to(dg[:, None, None, :] / (ho2 * wo2), cache["a2"].shape)
        dz2 = da2 * (cache["z2"] > 0)
        dK2 = (cache["cols2"].reshape(-1, cache["cols2"].shape[3]).T
               @ dz2.reshape(-1, dz2.shape[3])).reshape(self.K2.shape)
        dc2 = dz2.sum(axis=(0, 1, 2))
        dcols2 = dz2 @ self.K2.reshape(-1, self.K2.shape[3]).T
        da1 = _col2im(dcols2, cache["a1"].shape, k2, s2)
        dz1 = da1 * (cache["z1"] > 0)
        dK1 = (cache["cols1"].reshape(-1, cache["cols1"].shape[3]).T
               @ dz1.reshape(-1, dz1.shape[3])).reshape(self.K1.shape)
        dc1 = dz1.sum(axis=(0, 1, 2))
        return {"K1": dK1, "c1": dc1, "K2": dK2, "c2": dc2, "Wf": dWf, "bf": dbf}


# ---------------------------------------------------------------------------
# Bag classifier: encoder -> aggregate -> linear -> softmax/sigmoid
# ---------------------------------------------------------------------------


@dataclass
class VisionModel:
    encoder: PatchEncoder
    W: np.ndarray  # d_hidden x d_out
    b: np.ndarray
    head: str
    labels: list[str]
    agg: str = MEAN

    @property
    def d_out(self) -> int:
        return self.W.shape[1]

    def label_index(self, label: str) -> int:
        try:
            return self.labels.index(label)
        except ValueError:
            raise UnknownLabel(f"label {label!r} not in model vocabulary") from None


def init_vision_model(
    labels: list[str], head: str, agg: str = MEAN,
    encoder_cfg: EncoderConfig = EncoderConfig(), seed: int = 0,
) -> VisionModel:
    if head not in (SOFTMAX, SIGMOID):
        raise ValueError(f"unknown head {head!r}")
    if agg not in (MEAN, MAX):
        raise ValueError(f"unknown aggregation {agg!r}")
    rng = np.random.default_rng(seed)
    enc = PatchEncoder(encoder_cfg, seed=int(rng.integers(2**63)))
    W = glorot_uniform(rng, encoder_cfg.hidden, len(labels), (encoder_cfg.hidden, len(labels)))
    return VisionModel(enc, W, np.zeros(len(labels)), head, list(labels), agg)


def _softmax(z: np.ndarray) -> np.ndarray:
    zs = z - z.max(axis=-1, keepdims=True)
    e = np.exp(zs)
    return e / e.sum(axis=-1, keepdims=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def head_output(model: VisionModel, agg: np.ndarray) -> np.ndarray:
    z = agg @ model.W + model.b
    return _softmax(z) if model.head == SOFTMAX else _sigmoid(z)


def predict_bag(model: VisionModel, bag_pixels: np.ndarray) -> np.ndarray:
    """Label distribution for one bag (B x S x S x 3 patch pixels)."""
    hidden = model.encoder.forward(np.asarray(bag_pixels, dtype=np.float64))
    return head_output(model, aggregate_bag(hidden, model.agg))


def score_patches(model: VisionModel, pixels: np.ndarray) -> np.ndarray:
    """Head outputs for each patch as its own singleton bag (N x d_out)."""
    hidden = model.encoder.forward(np.asarray(pixels, dtype=np.float64))
    return head_output(model, hidden)


def score_patch(model: VisionModel, patch: Patch | np.ndarray, label: str) -> float:
    """Confidence of ``label`` for the singleton bag {patch}; in [0, 1]."""
    idx = model.label_index(label)
    pix = patch.pixels if isinstance(patch, Patch) else patch
    return float(score_patches(model, pix[None])[0, idx])


def bag_batch_step(model: VisionModel, x: np.ndarray, bag_size: int, targets,
                   agg: str) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and parameter gradients for a batch of bags.

    ``x`` stacks the patches of ``len(targets)`` bags contiguously
    (n_bags * bag_size, S, S, C).  Gradients flow through the aggregation:
    mean splits evenly across the bag, max routes each hidden unit's
    gradient to its (first) argmax patch.
    """
    bsz = x.shape[0] // bag_size
    hid, cache = model.encoder.forward(x, want_cache=True)
    hid_bags = hid.reshape(bsz, bag_size, -1)
    aggv = hid_bags.mean(axis=1) if agg == MEAN else hid_bags.max(axis=1)
    z = aggv @ model.W + model.b

    if model.head == SOFTMAX:
        tb = np.asarray(targets, dtype=np.int64)
        logz = z - z.max(axis=1, keepdims=True)
        logprob = logz - np.log(np.exp(logz).sum(axis=1, keepdims=True))
        loss = float(-logprob[np.arange(bsz), tb].mean())
        dz = _softmax(z)
        dz[np.arange(bsz), tb] -= 1.0
        dz /= bsz
    else:
        tb = np.asarray(targets, dtype=np.float64)
        softplus = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
        loss = float((softplus - z * tb).mean(axis=1).mean())
        dz = (_sigmoid(z) - tb) / (model.d_out * bsz)

    dW = aggv.T @ dz
    db = dz.sum(axis=0)
    dagg = dz @ model.W.T
    if agg == MEAN:
        dhid = np.repeat(dagg / bag_size, bag_size, axis=0)
    else:
        dhid_bags = np.zeros_like(hid_bags)
        arg = hid_bags.argmax(axis=1)  # first argmax wins ties
        bi = np.arange(bsz)[:, None]
        di = np.arange(hid_bags.shape[2])[None, :]
        dhid_bags[bi, arg, di] = dagg
        dhid = dhid_bags.reshape(-1, hid_bags.shape[2])
    grads = model.encoder.backward(cache, dhid)
    grads["W"] = dW
    grads["b"] = db
    return loss, grads


@dataclass
class VisionTrainConfig:
    epochs: int = 5
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch: int = 16  # bags per SGD step
    bag_size: int = 5
    side_fraction_range: tuple[float, float] = (0.1, 0.4)
    seed: int = 0
    lr_schedule: tuple[float, int] | None = (0.5, 1)  # (factor, epochs)

    def __post_init__(self):
        if self.epochs < 1 or self.bag_size < 1 or self.batch < 1:
            raise ValueError("epochs, batch, and bag_size must be >= 1")


def _quantize_model(model: VisionModel) -> VisionModel:
    q = lambda a: a.astype(np.float32).astype(np.float64)
    enc = model.encoder
    for k, v in enc.params().items():
        setattr(enc, k, q(v))
    return replace(model, W=q(model.W), b=q(model.b))


def train_vision(
    images,
    targets,
    labels: list[str],
    head: str,
    config: VisionTrainConfig,
    agg: str = MEAN,
    proposals: list[list[Box]] | None = None,
    encoder_cfg: EncoderConfig = EncoderConfig(),
    progress=None,
) -> tuple[VisionModel, list[float]]:
    """Train the bag classifier end-to-end.

    ``images`` is a sequence of H x W x 3 uint8 arrays (or zero-argument
    callables returning one, for lazy loading).  ``targets`` holds a class
    index per image for the softmax head or a 0/1 vector per image for the
    sigmoid head.  With ``proposals`` given, each image's bag is a fixed
    sample of its squarified proposal boxes; otherwise bags are resampled
    from random crops every epoch.  Deterministic for a fixed config.seed.
    """
    n = len(images)
    if n == 0:
        raise EmptyDataset("no training images")
    model = init_vision_model(labels, head, agg, encoder_cfg, seed=config.seed)
    if head == SOFTMAX:
        targets = np.asarray(targets, dtype=np.int64)
    else:
        targets = np.asarray(targets, dtype=np.float64)
        if targets.shape != (n, len(labels)):
            raise DimensionMismatch(f"targets shape {targets.shape}")

    side = encoder_cfg.patch_side
    prop_squares: list[list[Box]] | None = None
    if proposals is not None:
        prop_squares = []
        for i in range(n):
            img = images[i]() if callable(images[i]) else images[i]
            h, w = img.shape[:2]
            prop_squares.append([squarify_box(b, w, h) for b in proposals[i]])

    params = {**model.encoder.params(), "W": model.W, "b": model.b}
    vel = {k: np.zeros_like(v) for k, v in params.items()}
    order_rng = derive_rng(config.seed, "order")
    curve: list[float] = []
    step = 0

    for epoch in range(config.epochs):
        lr = config.lr
        if config.lr_schedule is not None:
            factor, period = config.lr_schedule
            lr = config.lr * factor ** (epoch // period)
        order = order_rng.permutation(n)
        for lo in range(0, n, config.batch):
            idx = order[lo : lo + config.batch]
            pixels = []
            for i in idx:
                img = images[i]() if callable(images[i]) else images[i]
                if prop_squares is not None:
                    rng = derive_rng(config.seed, "propbag", int(i))
                    boxes = prop_squares[i]
                    sel = rng.choice(len(boxes), size=config.bag_size,
                                     replace=len(boxes) < config.bag_size)
                    chosen = [boxes[j] for j in np.sort(sel)]
                else:
                    rng = derive_rng(config.seed, "bag", epoch, int(i))
                    chosen = sample_random_boxes(
                        img.shape[1], img.shape[0], config.bag_size,
                        config.side_fraction_range, rng=rng,
                    )
                pixels.extend(extract_patch(img, b, side) for b in chosen)
            x = np.stack(pixels)  # (bsz*bag_size, S, S, 3)
            step_loss, grads = bag_batch_step(model, x, config.bag_size,
                                              targets[idx], agg)
            if not np.isfinite(step_loss):
                raise NonFiniteLoss(step, step_loss)
            curve.append(step_loss)
            if config.weight_decay:
                for k in ("K1", "K2", "Wf", "W"):
                    grads[k] = grads[k] + config.weight_decay * params[k]
            for k in params:
                vel[k] = config.momentum * vel[k] + grads[k]
                params[k] -= lr * vel[k]
            step += 1
        if progress is not None:
            progress(epoch, curve[-1])

    return _quantize_model(model), curve


# ---------------------------------------------------------------------------
# Checkpoints: same envelope as the text models; weight order is the head's
# W1,b1,W2,b2 followed by the encoder's conv segments and a small config
# segment (aggregation flag, patch side, strides).
# ---------------------------------------------------------------------------


def vision_kind(head: str) -> str:
    return "vision-category" if head == SOFTMAX else "vision-tag"


def save_vision(model: VisionModel, path) -> None:
    cfg = model.encoder.cfg
    cfg_arr = np.array(
        [1.0 if model.agg == MAX else 0.0, cfg.patch_side, cfg.in_channels,
         cfg.conv1[2], cfg.conv2[2]],
        dtype=np.float64,
    )
    save_arrays(
        path,
        vision_kind(model.head),
        model.labels,
        [model.encoder.Wf, model.encoder.bf, model.W, model.b,
         model.encoder.K1, model.encoder.c1, model.encoder.K2, model.encoder.c2,
         cfg_arr],
    )


def load_vision(path, expect_head: str | None = None) -> VisionModel:
    kind, labels, arrays = load_arrays(path, "vision-")
    if expect_head is not None and kind != vision_kind(expect_head):
        raise HeadMismatch(f"expected {vision_kind(expect_head)!r}, got {kind!r}")
    Wf, bf, W, b, K1, c1, K2, c2, cfg_arr = arrays
    cfg = EncoderConfig(
        in_channels=int(cfg_arr[2]),
        conv1=(K1.shape[3], K1.shape[0], int(cfg_arr[3])),
        conv2=(K2.shape[3], K2.shape[0], int(cfg_arr[4])),
        hidden=Wf.shape[1],
        patch_side=int(cfg_arr[1]),
    )
    enc = PatchEncoder(cfg, seed=0)
    enc.K1, enc.c1, enc.K2, enc.c2, enc.Wf, enc.bf = K1, c1, K2, c2, Wf, bf
    head = SOFTMAX if kind == "vision-category" else SIGMOID
    agg = MAX if cfg_arr[0] == 1.0 else MEAN
    return VisionModel(enc, W, b, head, labels, agg)
