"""Single-hidden-layer network: forward, backprop, SGD training, checkpoints.

Architecture is linear -> ReLU -> linear -> head, where the head is either
a softmax over categories (index 0 reserved for a background class) or
per-label sigmoids for multi-label tagging.  All training math runs in
float64; checkpoints store float32, and trained weights are quantized to
float32-representable values so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import (
    CorruptChecksum,
    DimensionMismatch,
    EmptyDataset,
    HeadMismatch,
    NonFiniteLoss,
    VersionMismatch,
)

BACKGROUND_LABEL = "__background__"

SOFTMAX = "softmax"
SIGMOID = "sigmoid"


@dataclass
class MlpModel:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    head: str
    labels: list[str]

    @property
    def d_in(self) -> int:
        return self.W1.shape[0]

    @property
    def d_hidden(self) -> int:
        return self.W1.shape[1]

    @property
    def d_out(self) -> int:
        return self.W2.shape[1]

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}


@dataclass
class TrainConfig:
    iterations: int = 20000
    lr: float = 1e-3
    momentum: float = 0.0
    weight_decay: float = 0.0
    batch: int | None = None  # None = full batch
    seed: int = 0
    lr_schedule: tuple[float, int] | None = None  # (factor, period)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=shape)
    # float32-representable init so that lr=0 training and checkpointing
    # leave weights bit-identical
    return w.astype(np.float32).astype(np.float64)


def init_model(
    d_in: int, d_hidden: int, labels: list[str], head: str, seed: int = 0
) -> MlpModel:
    if head not in (SOFTMAX, SIGMOID):
        raise ValueError(f"unknown head {head!r}")
    d_out = len(labels)
    rng = np.random.default_rng(seed)
    return MlpModel(
        W1=glorot_uniform(rng, d_in, d_hidden, (d_in, d_hidden)),
        b1=np.zeros(d_hidden),
        W2=glorot_uniform(rng, d_hidden, d_out, (d_hidden, d_out)),
        b2=np.zeros(d_out),
        head=head,
        labels=list(labels),
    )


def quantize(model: MlpModel) -> MlpModel:
    """Round all parameters to float32-representable float64 values."""
    q = lambda a: a.astype(np.float32).astype(np.float64)
    return MlpModel(q(model.W1), q(model.b1), q(model.W2), q(model.b2),
                    model.head, list(model.labels))


def _check_input(model: MlpModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.d_in:
        raise DimensionMismatch(f"input shape {x.shape}, model d_in {model.d_in}")
    return x


def _logits(model: MlpModel, x: np.ndarray) -> np.ndarray:
    z1 = x @ model.W1 + model.b1
    h = np.maximum(z1, 0.0)
    return h @ model.W2 + model.b2


def _softmax(z: np.ndarray) -> np.ndarray:
    zs = z - z.max(axis=1, keepdims=True)
    e = np.exp(zs)
    return e / e.sum(axis=1, keepdims=True)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward(model: MlpModel, x) -> np.ndarray:
    """Head output for one input vector (or a batch, row per sample)."""
    single = np.asarray(x).ndim == 1
    xb = _check_input(model, x)
    z = _logits(model, xb)
    y = _softmax(z) if model.head == SOFTMAX else _sigmoid(z)
    return y[0] if single else y


def loss(model: MlpModel, x, target) -> float:
    """Cross-entropy (softmax head) or mean binary cross-entropy (sigmoid).

    ``target`` is a class index (or batch of indices) for the softmax head
    and a 0/1 vector of length d_out (or batch of them) for the sigmoid
    head.  Batched inputs return the mean sample loss.
    """
    xb = _check_input(model, x)
    z = _logits(model, xb)
    if model.head == SOFTMAX:
        t = np.atleast_1d(np.asarray(target, dtype=np.int64))
        logz = z - z.max(axis=1, keepdims=True)
        logprob = logz - np.log(np.exp(logz).sum(axis=1, keepdims=True))
        return float(-logprob[np.arange(len(t)), t].mean())
    t = np.asarray(target, dtype=np.float64)
    if t.ndim == 1:
        t = t[None, :]
    if t.shape != z.shape:
        raise DimensionMismatch(f"target shape {t.shape}, logits {z.shape}")
    # per-element BCE from logits: softplus(z) - z*t, mean-reduced over d_out
    softplus = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    return float((softplus - z * t).mean(axis=1).mean())


def grad(model: MlpModel, x, target) -> dict[str, np.ndarray]:
    """Analytic gradients of ``loss`` w.r.t. all parameters (mean over batch)."""
    xb = _check_input(model, x)
    n = xb.shape[0]
    z1 = xb @ model.W1 + model.b1
    h = np.maximum(z1, 0.0)
    z2 = h @ model.W2 + model.b2
    if model.head == SOFTMAX:
        y = _softmax(z2)
        t = np.atleast_1d(np.asarray(target, dtype=np.int64))
        dz2 = y.copy()
        dz2[np.arange(n), t] -= 1.0
        dz2 /= n
    else:
        y = _sigmoid(z2)
        t = np.asarray(target, dtype=np.float64)
        if t.ndim == 1:
            t = t[None, :]
        dz2 = (y - t) / (model.d_out * n)
    dW2 = h.T @ dz2
    db2 = dz2.sum(axis=0)
    dh = dz2 @ model.W2.T
    dz1 = dh * (z1 > 0)
    dW1 = xb.T @ dz1
    db1 = dz1.sum(axis=0)
    return {"W1": dW1, "b1": db1, "W2": dW2, "b2": db2}


def train(X, targets, model: MlpModel, config: TrainConfig) -> tuple[MlpModel, list[float]]:
    """SGD with optional momentum, weight decay (W matrices only), and a
    step learning-rate schedule.  Deterministic for a fixed config.seed.

    Returns the trained model (float32-quantized parameters) and the
    per-iteration loss curve.

    Raises:
        NonFiniteLoss: training diverged; carries the iteration index.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyDataset("training set is empty")
    n = X.shape[0]
    if model.head == SOFTMAX:
        targets = np.asarray(targets, dtype=np.int64)
    else:
        targets = np.asarray(targets, dtype=np.float64)

    m = MlpModel(model.W1.copy(), model.b1.copy(), model.W2.copy(), model.b2.copy(),
                 model.head, list(model.labels))
    vel = {k: np.zeros_like(v) for k, v in m.params().items()}
    rng = np.random.default_rng(config.seed)
    order = np.arange(n)
    cursor = n  # forces a reshuffle on the first minibatch iteration
    curve: list[float] = []

    for it in range(config.iterations):
        lr = config.lr
        if config.lr_schedule is not None:
            factor, period = config.lr_schedule
            lr = config.lr * factor ** (it // period)

        if config.batch is None:
            xb, tb = X, targets
        else:
            if cursor + config.batch > n:
                order = rng.permutation(n)
                cursor = 0
            idx = order[cursor : cursor + config.batch]
            cursor += config.batch
            xb, tb = X[idx], targets[idx]

        step_loss = loss(m, xb, tb)
        if not np.isfinite(step_loss):
            raise NonFiniteLoss(it, step_loss)
        curve.append(step_loss)

        g = grad(m, xb, tb)
        if config.weight_decay:
            g["W1"] = g["W1"] + config.weight_decay * m.W1
            g["W2"] = g["W2"] + config.weight_decay * m.W2
        params = m.params()
        for k in params:
            vel[k] = config.momentum * vel[k] + g[k]
            params[k] -= lr * vel[k]

    return quantize(m), curve


def predict_topk(model: MlpModel, x, k: int) -> list[tuple[str, float]]:
    """Top-k labels with scores, descending; ties broken by label index.

    The softmax (category) head excludes the background label at index 0
    from the ranking.
    """
    scores = forward(model, x)
    if scores.ndim != 1:
        raise DimensionMismatch("predict_topk takes a single input vector")
    start = 1 if model.head == SOFTMAX else 0
    if not (1 <= k <= model.d_out - start):
        raise ValueError(f"k={k} out of range for {model.d_out - start} rankable labels")
    idx = sorted(range(start, model.d_out), key=lambda i: (-scores[i], i))
    return [(model.labels[i], float(scores[i])) for i in idx[:k]]


# ---------------------------------------------------------------------------
# Checkpoint envelope (shared with the vision models, which append encoder
# weight segments after W1,b1,W2,b2)
# ---------------------------------------------------------------------------

KINDS = ("text-category", "text-tag", "vision-category", "vision-tag")


def save_arrays(path, kind: str, labels: list[str], arrays: list[np.ndarray]) -> None:
    if kind not in KINDS:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    blobs = [np.ascontiguousarray(a, dtype=np.float32) for a in arrays]
    raw = b"".join(b.astype("<f4").tobytes() for b in blobs)
    doc = {
        "version": 1,
        "kind": kind,
        "dims": [list(b.shape) for b in blobs],
        "labels": list(labels),
        "checksum": hashlib.sha256(raw).hexdigest(),
        "weights": base64.b64encode(raw).decode("ascii"),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_arrays(path, expect_kind_prefix: str | None = None):
    """Read a checkpoint; returns (kind, labels, arrays as float64)."""
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CorruptChecksum(f"unreadable checkpoint: {e}") from e
    if doc.get("version") != 1:
        raise VersionMismatch(f"unsupported checkpoint version {doc.get('version')!r}")
    kind = doc.get("kind")
    if kind not in KINDS:
        raise CorruptChecksum(f"unknown checkpoint kind {kind!r}")
    if expect_kind_prefix is not None and not kind.startswith(expect_kind_prefix):
        raise HeadMismatch(f"expected a {expect_kind_prefix}* checkpoint, got {kind!r}")
    try:
        raw = base64.b64decode(doc["weights"], validate=True)
    except Exception as e:
        raise CorruptChecksum(f"undecodable weights: {e}") from e
    if hashlib.sha256(raw).hexdigest() != doc.get("checksum"):
        raise CorruptChecksum("weight checksum mismatch")
    arrays = []
    off = 0
    for shape in doc["dims"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if off + nbytes > len(raw):
            raise CorruptChecksum("weight buffer shorter than dims describe")
        arrays.append(
            np.frombuffer(raw, dtype="<f4", count=count, offset=off)
            .reshape(shape)
            .astype(np.float64)
        )
        off += nbytes
    if off != len(raw):
        raise CorruptChecksum("trailing bytes in weight buffer")
    return kind, [str(l) for l in doc["labels"]], arrays


def text_kind(head: str) -> str:
    return "text-category" if head == SOFTMAX else "text-tag"


def save(model: MlpModel, path: str | os.PathLike) -> None:
    save_arrays(path, text_kind(model.head), model.labels,
                [model.W1, model.b1, model.W2, model.b2])


def load(path: str | os.PathLike, expect_head: str | None = None) -> MlpModel:
    expect = None if expect_head is None else text_kind(expect_head)
    kind, labels, arrays = load_arrays(path, "text-")
    if expect is not None and kind != expect:
        raise HeadMismatch(f"expected {expect!r}, got {kind!r}")
    if len(arrays) != 4:
        raise CorruptChecksum(f"text checkpoint must hold 4 arrays, has {len(arrays)}")
    W1, b1, W2, b2 = arrays
    head = SOFTMAX if kind == "text-category" else SIGMOID
    if len(labels) != W2.shape[1]:
        raise CorruptChecksum("label count does not match output layer width")
    return MlpModel(W1, b1, W2, b2, head, labels)
