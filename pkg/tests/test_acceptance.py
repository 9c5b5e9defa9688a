"""Acceptance criteria, one test per gate, each printing a pass/fail line.

The synthetic end-to-end tests drive the real CLI over a seed-pinned
500-image corpus; everything it produces is built once per session in a
module fixture and the gates read the emitted reports.  Run with ``-s -v``
to see the per-criterion lines.
"""

import json
import time

import numpy as np
import pytest

from vishash import mlp, vision
from vishash.boxes import Box
from vishash.cli import cli
from vishash.evaluate import iou
from vishash.hashtag import accumulate_heatmap, connected_components
from vishash.vision import EncoderConfig, aggregate_bag, bag_batch_step, init_vision_model


def check(name: str, ok: bool, detail: str) -> None:
    print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, f"{name}: {detail}"


# ---------------------------------------------------------------------------
# Criterion: gradient oracles (text < 1e-4, vision end-to-end < 1e-3,
# >= 100 random instances each, < 1 min)
# ---------------------------------------------------------------------------


def _text_fd_worst(model, x, target, eps=1e-5):
    analytic = mlp.grad(model, x, target)
    worst = 0.0
    for name, param in model.params().items():
        it = np.nditer(param, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            old = param[idx]
            param[idx] = old + eps
            up = mlp.loss(model, x, target)
            param[idx] = old - eps
            down = mlp.loss(model, x, target)
            param[idx] = old
            num = (up - down) / (2 * eps)
            ana = analytic[name][idx]
            worst = max(worst, abs(ana - num) / max(abs(ana) + abs(num), 1e-8))
            it.iternext()
    return worst


def test_gradient_oracles():
    t0 = time.time()
    rng = np.random.default_rng(202)

    worst_text = 0.0
    for trial in range(100):
        d_in = int(rng.integers(2, 7))
        d_h = int(rng.integers(2, 6))
        d_out = int(rng.integers(2, 6))
        head = mlp.SOFTMAX if trial % 2 == 0 else mlp.SIGMOID
        labels = [f"l{i}" for i in range(d_out)]
        m = mlp.init_model(d_in, d_h, labels, head, seed=trial)
        for p in m.params().values():
            p += rng.standard_normal(p.shape) * 0.5
        x = rng.standard_normal(d_in)
        t = int(rng.integers(d_out)) if head == mlp.SOFTMAX \
            else rng.integers(0, 2, d_out).astype(float)
        worst_text = max(worst_text, _text_fd_worst(m, x, t))

    cfg = EncoderConfig(in_channels=2, conv1=(3, 3, 1), conv2=(4, 3, 1),
                        hidden=5, patch_side=8)
    worst_vis = 0.0
    eps = 1e-6
    for trial in range(100):
        head = mlp.SOFTMAX if trial % 2 == 0 else mlp.SIGMOID
        agg = vision.MEAN if trial % 4 < 2 else vision.MAX
        labels = [f"l{i}" for i in range(3)]
        model = init_vision_model(labels, head, agg, cfg, seed=trial)
        # continuous random parameters keep ReLU/argmax kinks off the
        # evaluation point (fresh inits have exactly-zero biases)
        for p in {**model.encoder.params(), "W": model.W, "b": model.b}.values():
            p += rng.standard_normal(p.shape) * 0.3
        x = rng.random((4, 8, 8, 2))
        targets = (rng.integers(0, 3, 2) if head == mlp.SOFTMAX
                   else rng.integers(0, 2, (2, 3)).astype(float))
        _, analytic = bag_batch_step(model, x, 2, targets, agg)
        params = {**model.encoder.params(), "W": model.W, "b": model.b}
        for name, param in params.items():
            flat = param.reshape(-1)
            for i in rng.choice(flat.size, size=min(3, flat.size), replace=False):
                old = flat[i]
                flat[i] = old + eps
                up, _ = bag_batch_step(model, x, 2, targets, agg)
                flat[i] = old - eps
                down, _ = bag_batch_step(model, x, 2, targets, agg)
                flat[i] = old
                num = (up - down) / (2 * eps)
                ana = analytic[name].reshape(-1)[i]
                worst_vis = max(worst_vis,
                                abs(ana - num) / max(abs(ana) + abs(num), 1e-7))

    elapsed = time.time() - t0
    check("gradient-oracle-text", worst_text < 1e-4,
          f"max rel err {worst_text:.2e} < 1e-4 over 100 instances")
    check("gradient-oracle-vision", worst_vis < 1e-3,
          f"max rel err {worst_vis:.2e} < 1e-3 over 100 instances")
    check("gradient-oracle-runtime", elapsed < 60.0, f"{elapsed:.1f}s < 60s")


# ---------------------------------------------------------------------------
# Criterion: exact oracles
# ---------------------------------------------------------------------------


def test_exact_oracle_iou_rasterization():
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        a = Box(int(rng.integers(0, 40)), int(rng.integers(0, 40)),
                int(rng.integers(1, 25)), int(rng.integers(1, 25)))
        b = Box(int(rng.integers(0, 40)), int(rng.integers(0, 40)),
                int(rng.integers(1, 25)), int(rng.integers(1, 25)))
        ca = np.zeros((70, 70), dtype=bool)
        cb = np.zeros((70, 70), dtype=bool)
        ca[a.y: a.y + a.h, a.x: a.x + a.w] = True
        cb[b.y: b.y + b.h, b.x: b.x + b.w] = True
        inter = int(np.logical_and(ca, cb).sum())
        union = int(np.logical_or(ca, cb).sum())
        worst = max(worst, abs(iou(a, b) - inter / union))
    check("exact-oracle-iou", worst == 0.0,
          f"max |iou - pixel count| = {worst} over 1000 box pairs")


def test_exact_oracle_connected_components():
    rng = np.random.default_rng(8)
    mismatches = 0
    for _ in range(200):
        mask = rng.random((32, 32)) < float(rng.uniform(0.2, 0.6))
        got = [frozenset(zip(c.ys.tolist(), c.xs.tolist()))
               for c in connected_components(mask)]
        # flood-fill oracle, explicit stack, 4-connectivity
        seen = np.zeros_like(mask)
        oracle = []
        for y in range(32):
            for x in range(32):
                if not mask[y, x] or seen[y, x]:
                    continue
                stack, pixels = [(y, x)], []
                seen[y, x] = True
                while stack:
                    cy, cx = stack.pop()
                    pixels.append((cy, cx))
                    for ny, nx in ((cy - 1, cx), (cy + 1, cx),
                                   (cy, cx - 1), (cy, cx + 1)):
                        if 0 <= ny < 32 and 0 <= nx < 32 and mask[ny, nx] \
                                and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
                oracle.append(frozenset(pixels))
        if sorted(got, key=min) != sorted(oracle, key=min):
            mismatches += 1
    check("exact-oracle-components", mismatches == 0,
          f"{mismatches} partition mismatches over 200 random 32x32 masks")


def test_exact_oracle_heatmap():
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(50):
        scored = []
        for _ in range(int(rng.integers(5, 30))):
            w = int(rng.integers(1, 10))
            h = int(rng.integers(1, 10))
            scored.append((Box(int(rng.integers(0, 16 - w + 1)),
                               int(rng.integers(0, 16 - h + 1)), w, h),
                           float(rng.random())))
        amap = accumulate_heatmap((16, 16), scored)
        vals = amap.value()
        for y in range(16):
            for x in range(16):
                confs = [c for b, c in scored
                         if b.x <= x < b.x + b.w and b.y <= y < b.y + b.h]
                expect = sum(confs) / len(confs) if confs else 0.0
                worst = max(worst, abs(vals[y, x] - expect))
    check("exact-oracle-heatmap", worst <= 1e-9,
          f"max abs diff {worst:.2e} <= 1e-9 over 50 random 16x16 cases")


# ---------------------------------------------------------------------------
# Criterion: MIL invariants, exact floating-point equality
# ---------------------------------------------------------------------------


def test_mil_invariants_exact():
    rng = np.random.default_rng(10)
    cfg = EncoderConfig(in_channels=2, conv1=(3, 3, 1), conv2=(4, 3, 1),
                        hidden=6, patch_side=8)
    ok_perm = ok_single = ok_dup = ok_dom = True
    for trial in range(20):
        head = mlp.SOFTMAX if trial % 2 == 0 else mlp.SIGMOID
        for agg in (vision.MEAN, vision.MAX):
            model = init_vision_model(
                [f"l{i}" for i in range(3)], head, agg, cfg, seed=trial)
            bag = rng.random((5, 8, 8, 2))
            hid = model.encoder.forward(bag)
            perm = hid[rng.permutation(5)]
            ok_perm &= np.array_equal(aggregate_bag(hid, agg),
                                      aggregate_bag(perm, agg))
            ok_single &= np.array_equal(aggregate_bag(hid[:1], agg), hid[0])
            if agg == vision.MEAN:
                ok_dup &= np.array_equal(
                    aggregate_bag(hid, agg),
                    aggregate_bag(np.concatenate([hid, hid]), agg))
            else:
                dominated = np.minimum(hid[0], hid[1:].min(axis=0)) - 0.125
                bigger = np.vstack([hid, dominated[None]])
                ok_dom &= np.array_equal(aggregate_bag(hid, agg),
                                         aggregate_bag(bigger, agg))
    check("mil-permutation-invariance", ok_perm, "bit-exact over 40 cases")
    check("mil-singleton-identity", ok_single, "bit-exact over 40 cases")
    check("mil-mean-duplicate-invariance", ok_dup, "bit-exact over 20 cases")
    check("mil-max-dominated-noop", ok_dom, "bit-exact over 20 cases")


# ---------------------------------------------------------------------------
# Criterion: synthetic end-to-end (500 images, 6 categories, 20 tags,
# seed-pinned) via the CLI
# ---------------------------------------------------------------------------

SEED = "1"
E2E = {
    "synth": ["--images", "500", "--canvas", "320x448", "--categories", "6",
              "--tags", "20", "--icons", "4-6", "--icon-side", "56-88",
              "--words", "95", "--noise", "0.2", "--embed-dim", "64"],
    "curate": ["--min-tag-count", "10"],
    "text": ["--hidden", "128", "--iterations", "3000", "--lr", "0.05"],
    "vision_cat": ["--epochs", "24", "--lr", "0.1", "--momentum", "0.9",
                   "--batch", "16", "--bag-size", "5", "--side-lo", "0.15",
                   "--side-hi", "0.45", "--lr-step-epochs", "8",
                   "--lr-step-factor", "0.5"],
    "vision_tag": ["--agg", "max", "--epochs", "44", "--lr", "2.0",
                   "--momentum", "0.0", "--batch", "16", "--bag-size", "5",
                   "--side-lo", "0.15", "--side-hi", "0.45",
                   "--lr-step-epochs", "16", "--lr-step-factor", "0.5"],
    "hashtag": ["--tags-from", "gt", "--subset", "test", "--fallback",
                "--n-crops", "3500", "--threshold-k", "1.5",
                "--side-lo", "0.05", "--side-hi", "0.18"],
}


def _run(argv):
    code = cli(argv)
    assert code == 0, f"cli {argv[0]} exited {code}"


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    data = root / "data"
    t0 = time.time()
    _run(["synth", "--out", str(data), "--seed", SEED] + E2E["synth"])
    manifest = str(data / "curated.jsonl")
    _run(["curate", "--manifest", str(data / "manifest.jsonl"),
          "--out", manifest, "--vocab-out", str(data / "vocab.json"),
          "--seed", SEED] + E2E["curate"])
    emb = str(data / "embeddings.txt")
    _run(["train-text", "--head", "category", "--manifest", manifest,
          "--embeddings", emb, "--out", str(root / "cat.json"),
          "--seed", SEED] + E2E["text"])
    _run(["train-text", "--head", "tag", "--manifest", manifest,
          "--embeddings", emb, "--out", str(root / "tag.json"),
          "--seed", SEED] + E2E["text"])
    _run(["train-vision", "--head", "category", "--manifest", manifest,
          "--out", str(root / "vis-cat.json"), "--seed", SEED]
         + E2E["vision_cat"])
    _run(["train-vision", "--head", "tag", "--manifest", manifest,
          "--out", str(root / "vis-tag.json"), "--seed", SEED]
         + E2E["vision_tag"])
    _run(["hashtag", "--manifest", manifest,
          "--vision-model", str(root / "vis-tag.json"),
          "--out", str(root / "proposals.jsonl"), "--seed", SEED]
         + E2E["hashtag"])
    _run(["evaluate", "--manifest", manifest,
          "--report", str(root / "report.json"), "--embeddings", emb,
          "--text-category-model", str(root / "cat.json"),
          "--text-tag-model", str(root / "tag.json"), "--snap",
          "--vision-category-model", str(root / "vis-cat.json"),
          "--bag-size", "9", "--proposals", str(root / "proposals.jsonl"),
          "--gt-from-icons", "--subset", "test", "--ks", "1,3,5",
          "--seed", SEED])
    _run(["baseline", "--manifest", manifest, "--gt-from-icons",
          "--subset", "test", "--report", str(root / "baseline.json"),
          "--seed", SEED])
    elapsed = time.time() - t0
    report = json.loads((root / "report.json").read_text())
    baseline = json.loads((root / "baseline.json").read_text())
    return {"root": root, "manifest": manifest, "report": report,
            "baseline": baseline, "elapsed": elapsed}


@pytest.mark.slow
def test_e2e_text_category_accuracy(e2e):
    acc = e2e["report"]["text_category"]["topk"]["1"]
    chance = e2e["report"]["category_chance"]["1"]
    check("e2e-text-category", acc >= 0.90,
          f"top-1 accuracy {acc:.3f} >= 0.90 (chance {chance:.3f})")


@pytest.mark.slow
def test_e2e_text_tag_snap_precision(e2e):
    prec = e2e["report"]["text_tags"]["1"]["precision"]
    check("e2e-text-tag-snap", prec >= 0.80,
          f"top-1 precision with snapping {prec:.3f} >= 0.80")


@pytest.mark.slow
def test_e2e_vision_category_vs_chance(e2e):
    acc = e2e["report"]["vision_category"]["topk"]["1"]
    chance = e2e["report"]["category_chance"]["1"]
    check("e2e-vision-category", acc >= 2 * chance,
          f"top-1 accuracy {acc:.3f} >= 2x chance ({chance:.3f})")


@pytest.mark.slow
def test_e2e_hashtag_accuracy(e2e):
    acc = e2e["report"]["hashtags"]["accuracy"]
    rand = e2e["baseline"]["random_crop"]["accuracy"]
    check("e2e-hashtag-accuracy", acc >= 0.50,
          f"localization accuracy {acc:.3f} >= 0.50 (IOU > 0.5, fallback on)")
    check("e2e-hashtag-beats-random", acc > rand,
          f"pipeline {acc:.3f} > random-crop baseline {rand:.3f}")


@pytest.mark.slow
def test_e2e_runtime(e2e):
    check("e2e-runtime", e2e["elapsed"] <= 1200.0,
          f"full pipeline {e2e['elapsed']:.0f}s <= 1200s")


# ---------------------------------------------------------------------------
# Criterion: CLI determinism (byte-identical artifacts across two runs)
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_cli_determinism(tmp_path):
    outs = []
    for run in ("a", "b"):
        root = tmp_path / run
        data = root / "data"
        _run(["synth", "--out", str(data), "--images", "30",
              "--canvas", "160x200", "--categories", "3", "--tags", "6",
              "--icons", "2-3", "--icon-side", "24-40", "--words", "40",
              "--embed-dim", "16", "--seed", "5"])
        manifest = str(data / "manifest.jsonl")
        _run(["train-text", "--head", "tag", "--manifest", manifest,
              "--embeddings", str(data / "embeddings.txt"),
              "--out", str(root / "tag.json"), "--hidden", "16",
              "--iterations", "200", "--lr", "0.05", "--seed", "5"])
        _run(["train-vision", "--head", "tag", "--manifest", manifest,
              "--out", str(root / "vis-tag.json"), "--epochs", "2",
              "--batch", "8", "--bag-size", "3", "--patch-side", "32",
              "--hidden", "16", "--side-lo", "0.2", "--side-hi", "0.5",
              "--seed", "5"])
        _run(["hashtag", "--manifest", manifest,
              "--vision-model", str(root / "vis-tag.json"),
              "--tags-from", "gt", "--subset", "all", "--fallback",
              "--n-crops", "200", "--out", str(root / "proposals.jsonl"),
              "--seed", "5"])
        _run(["evaluate", "--manifest", manifest,
              "--report", str(root / "report.json"),
              "--proposals", str(root / "proposals.jsonl"),
              "--gt-from-icons", "--subset", "all", "--ks", "1,3",
              "--seed", "5"])
        blobs = {}
        for name in ("tag.json", "vis-tag.json", "proposals.jsonl",
                     "report.json"):
            blobs[name] = (root / name).read_bytes()
        outs.append(blobs)
    same = all(outs[0][k] == outs[1][k] for k in outs[0])
    diff = [k for k in outs[0] if outs[0][k] != outs[1][k]]
    check("cli-determinism", same,
          "checkpoints, proposals, and report byte-identical"
          + (f" (differs: {diff})" if diff else ""))


# ---------------------------------------------------------------------------
# Criterion: metric-shape checks
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_shape_fallback_precision_equals_accuracy(e2e):
    h = e2e["report"]["hashtags"]
    check("shape-fallback-prec-eq-acc", h["precision"] == h["accuracy"],
          f"fallback on: precision {h['precision']:.3f} == accuracy "
          f"{h['accuracy']:.3f}")


@pytest.mark.slow
def test_shape_no_fallback_precision_ge_accuracy(e2e):
    root = e2e["root"]
    _run(["hashtag", "--manifest", e2e["manifest"],
          "--vision-model", str(root / "vis-tag.json"),
          "--tags-from", "gt", "--subset", "test",
          "--n-crops", "800", "--threshold-k", "1.5",
          "--side-lo", "0.05", "--side-hi", "0.18",
          "--out", str(root / "proposals-nofb.jsonl"), "--seed", SEED])
    _run(["evaluate", "--manifest", e2e["manifest"],
          "--report", str(root / "report-nofb.json"),
          "--proposals", str(root / "proposals-nofb.jsonl"),
          "--gt-from-icons", "--subset", "test", "--ks", "1",
          "--seed", SEED])
    h = json.loads((root / "report-nofb.json").read_text())["hashtags"]
    check("shape-nofallback-prec-ge-acc", h["precision"] >= h["accuracy"],
          f"fallback off: precision {h['precision']:.3f} >= accuracy "
          f"{h['accuracy']:.3f} ({h['n_with_proposal']}/{h['n_pairs']} "
          f"pairs proposed)")


@pytest.mark.slow
def test_shape_topk_nondecreasing(e2e):
    ok = True
    detail = []
    for section in ("text_category", "vision_category"):
        acc = e2e["report"][section]["topk"]
        vals = [acc[k] for k in ("1", "3", "5")]
        ok &= vals == sorted(vals)
        detail.append(f"{section} {[round(v, 3) for v in vals]}")
    check("shape-topk-nondecreasing", ok, "; ".join(detail))
