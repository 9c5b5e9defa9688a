import numpy as np
import pytest

from vishash import mlp, vision
from vishash.boxes import Box
from vishash.errors import EmptyBag, ImageTooSmall, UnknownLabel
from vishash.vision import (
    EncoderConfig,
    VisionTrainConfig,
    aggregate_bag,
    bag_batch_step,
    init_vision_model,
    predict_bag,
    resize_bilinear,
    sample_random_boxes,
    sample_random_patches,
    score_patch,
    squarify_box,
    train_vision,
)

TOY_CFG = EncoderConfig(in_channels=2, conv1=(3, 3, 1), conv2=(4, 3, 1),
                        hidden=5, patch_side=8)


def toy_model(head, agg, seed=0, n_labels=3):
    labels = ([mlp.BACKGROUND_LABEL] + [f"c{i}" for i in range(1, n_labels)]
              if head == mlp.SOFTMAX else [f"t{i}" for i in range(n_labels)])
    return init_vision_model(labels, head, agg, TOY_CFG, seed=seed)


# ---------------------------------------------------------------------------
# patch sampling
# ---------------------------------------------------------------------------


def test_sample_zero_patches():
    img = np.zeros((50, 50, 3), dtype=np.uint8)
    assert sample_random_patches(img, 0, seed=1) == []


def test_sample_sides_and_bounds():
    img = np.zeros((100, 100, 3), dtype=np.uint8)
    patches = sample_random_patches(img, 200, seed=2, patch_side=16)
    for p in patches:
        assert 10 <= p.box.w <= 40
        assert p.box.w == p.box.h
        assert p.box.within(100, 100)
        assert p.pixels.shape == (16, 16, 3)


def test_sample_side_mean_matches_uniform_expectation():
    # Monte Carlo against E[side] = 0.25 * min dim on a 200x300 image
    boxes = sample_random_boxes(300, 200, 1000, (0.1, 0.4), seed=3)
    mean_side = np.mean([b.w for b in boxes])
    assert abs(mean_side - 0.25 * 200) / (0.25 * 200) < 0.03


def test_sample_too_small_image():
    with pytest.raises(ImageTooSmall):
        sample_random_boxes(8, 100, 5, seed=0)


def test_sample_deterministic():
    a = sample_random_boxes(120, 90, 20, seed=9)
    b = sample_random_boxes(120, 90, 20, seed=9)
    assert a == b
    assert a != sample_random_boxes(120, 90, 20, seed=10)


# ---------------------------------------------------------------------------
# squarify
# ---------------------------------------------------------------------------


def test_squarify_square_is_fixed_point():
    assert squarify_box(Box(10, 20, 30, 30), 100, 100) == Box(10, 20, 30, 30)


def test_squarify_max_side_centered():
    # 10x4 box centered at (50, 50) -> 10x10 box centered at (50, 50)
    assert squarify_box(Box(45, 48, 10, 4), 100, 100) == Box(45, 45, 10, 10)


def test_squarify_clamped_at_edge():
    # 30x10 box near the right edge: center (85, 55) wants x=70..100 which
    # exceeds width 90 -> clamp to x=60, side preserved
    out = squarify_box(Box(70, 50, 30, 10), 90, 90)
    assert (out.w, out.h) == (30, 30)
    assert out.within(90, 90)
    assert out == Box(60, 40, 30, 30)


def test_squarify_side_larger_than_image():
    out = squarify_box(Box(0, 0, 80, 10), 50, 60)
    assert out.within(50, 60)
    assert out.w == out.h == 50


# ---------------------------------------------------------------------------
# aggregation and bag prediction
# ---------------------------------------------------------------------------


def test_aggregate_singleton_identity():
    h = np.array([[1.0, -2.0, 3.0]])
    assert np.array_equal(aggregate_bag(h, vision.MEAN), h[0])
    assert np.array_equal(aggregate_bag(h, vision.MAX), h[0])


def test_aggregate_mean_and_max():
    h = np.array([[0.0, 2.0], [2.0, 0.0]])
    assert np.array_equal(aggregate_bag(h, vision.MEAN), [1.0, 1.0])
    h3 = np.array([[0.0, 2.0], [2.0, 0.0], [1.0, 1.0]])
    assert np.array_equal(aggregate_bag(h3, vision.MAX), [2.0, 2.0])


def test_aggregate_empty_bag():
    with pytest.raises(EmptyBag):
        aggregate_bag(np.zeros((0, 4)), vision.MEAN)


def test_predict_bag_identical_patches_equals_single():
    model = toy_model(mlp.SOFTMAX, vision.MEAN, seed=1)
    rng = np.random.default_rng(0)
    patch = rng.random((8, 8, 2))
    bag = np.stack([patch] * 4)
    got = predict_bag(model, bag)
    single = predict_bag(model, patch[None])
    assert np.allclose(got, single, atol=1e-12)


def test_predict_bag_permutation_invariant():
    rng = np.random.default_rng(1)
    bag = rng.random((5, 8, 8, 2))
    perm = bag[rng.permutation(5)]
    for agg in (vision.MEAN, vision.MAX):
        model = toy_model(mlp.SOFTMAX, agg, seed=2)
        assert np.array_equal(predict_bag(model, bag), predict_bag(model, perm))


def test_predict_bag_mean_duplicate_invariant():
    rng = np.random.default_rng(2)
    bag = rng.random((3, 8, 8, 2))
    model = toy_model(mlp.SIGMOID, vision.MEAN, seed=3)
    doubled = np.concatenate([bag, bag])
    assert np.allclose(predict_bag(model, bag), predict_bag(model, doubled),
                       atol=1e-12)


def test_predict_bag_max_dominated_patch_noop():
    model = toy_model(mlp.SIGMOID, vision.MAX, seed=4)
    rng = np.random.default_rng(3)
    bag = rng.random((3, 8, 8, 2))
    hidden = model.encoder.forward(bag)
    # a zero patch has hidden relu(bf') which may not be dominated; instead
    # duplicate an existing patch scaled down through pixels is not ordered,
    # so dominate in hidden space directly via an existing patch copy
    dominated = bag[0:1].copy()
    h_dom = model.encoder.forward(dominated)
    assert np.all(h_dom <= hidden.max(axis=0) + 1e-15)
    bigger = np.concatenate([bag, dominated])
    assert np.array_equal(predict_bag(model, bag), predict_bag(model, bigger))


def test_hand_computed_two_patch_toy():
    # 2x2 patches, one 2x2 kernel then a 1x1: scalar algebra end to end
    cfg = EncoderConfig(in_channels=1, conv1=(1, 2, 1), conv2=(1, 1, 1),
                        hidden=2, patch_side=2)
    model = init_vision_model([mlp.BACKGROUND_LABEL, "a", "b"], mlp.SOFTMAX,
                              vision.MEAN, cfg, seed=0)
    enc = model.encoder
    enc.K1[..., 0, 0] = [[1.0, -1.0], [2.0, 0.5]]
    enc.c1[...] = 2.0
    enc.K2[...] = -1.0
    enc.c2[...] = 3.0
    enc.Wf[...] = [[1.0, -2.0]]
    enc.bf[...] = [0.0, 4.0]
    model.W[...] = [[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]]
    model.b[...] = [0.1, 0.2, 0.3]

    k = np.array([[1.0, -1.0], [2.0, 0.5]])
    hids = []
    patches = [np.array([[0.5, 1.0], [0.0, 0.5]]),
               np.array([[1.0, 0.0], [0.0, 1.0]])]
    for p in patches:
        centered = p - p.mean()
        a1 = max(float((centered * k).sum()) + 2.0, 0.0)
        a2 = max(a1 * -1.0 + 3.0, 0.0)
        hids.append([max(a2 * 1.0 + 0.0, 0.0), max(a2 * -2.0 + 4.0, 0.0)])
    agg = np.mean(hids, axis=0)
    z = agg @ np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]]) + [0.1, 0.2, 0.3]
    expect = np.exp(z - z.max())
    expect /= expect.sum()

    bag = np.stack([p[:, :, None] for p in patches])
    assert np.allclose(predict_bag(model, bag), expect, atol=1e-12)


# ---------------------------------------------------------------------------
# score_patch
# ---------------------------------------------------------------------------


def test_score_patch_zero_weights_sigmoid_half():
    model = toy_model(mlp.SIGMOID, vision.MEAN, seed=5)
    model.W[...] = 0.0
    model.b[...] = 0.0
    patch = np.random.default_rng(0).random((8, 8, 2))
    assert score_patch(model, patch, "t1") == 0.5


def test_score_patch_unknown_label():
    model = toy_model(mlp.SIGMOID, vision.MEAN)
    with pytest.raises(UnknownLabel):
        score_patch(model, np.zeros((8, 8, 2)), "nope")


def test_score_patch_category_scores_sum_to_one():
    model = toy_model(mlp.SOFTMAX, vision.MEAN, seed=6)
    patch = np.random.default_rng(1).random((8, 8, 2))
    total = sum(score_patch(model, patch, lab) for lab in model.labels)
    assert abs(total - 1.0) < 1e-9


# ---------------------------------------------------------------------------
# end-to-end gradients through conv + pool + aggregate + head
# ---------------------------------------------------------------------------


def fd_bag_gradients(model, x, bag_size, targets, agg, eps=1e-6):
    params = {**model.encoder.params(), "W": model.W, "b": model.b}
    out = {}
    for name, param in params.items():
        g = np.zeros_like(param)
        it = np.nditer(param, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            old = param[idx]
            param[idx] = old + eps
            up, _ = bag_batch_step(model, x, bag_size, targets, agg)
            param[idx] = old - eps
            down, _ = bag_batch_step(model, x, bag_size, targets, agg)
            param[idx] = old
            g[idx] = (up - down) / (2 * eps)
            it.iternext()
        out[name] = g
    return out


@pytest.mark.parametrize("head,agg", [
    (mlp.SOFTMAX, vision.MEAN),
    (mlp.SOFTMAX, vision.MAX),
    (mlp.SIGMOID, vision.MEAN),
    (mlp.SIGMOID, vision.MAX),
])
def test_end_to_end_gradient_check(head, agg):
    rng = np.random.default_rng(42)
    model = toy_model(head, agg, seed=7)
    x = rng.random((4, 8, 8, 2))  # 2 bags of 2 patches
    targets = (np.array([1, 2]) if head == mlp.SOFTMAX
               else rng.integers(0, 2, (2, 3)).astype(float))
    _, analytic = bag_batch_step(model, x, 2, targets, agg)
    numeric = fd_bag_gradients(model, x, 2, targets, agg)
    for k in analytic:
        denom = np.maximum(np.abs(analytic[k]) + np.abs(numeric[k]), 1e-7)
        rel = float(np.max(np.abs(analytic[k] - numeric[k]) / denom))
        assert rel < 1e-3, f"{head}/{agg} {k}: {rel}"


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def color_dataset(rng, n=24, size=48):
    """Category <=> dominant color; trivially separable."""
    images, targets = [], []
    for i in range(n):
        cat = i % 2
        img = np.full((size, size, 3), 230, dtype=np.uint8)
        color = (200, 30, 30) if cat == 0 else (30, 30, 200)
        x, y = int(rng.integers(4, size - 20)), int(rng.integers(4, size - 20))
        img[y : y + 16, x : x + 16] = color
        images.append(img)
        targets.append(cat + 1)  # background at 0
    return images, np.array(targets)


def test_train_vision_separable_colors():
    rng = np.random.default_rng(5)
    images, targets = color_dataset(rng)
    labels = [mlp.BACKGROUND_LABEL, "red", "blue"]
    cfg = VisionTrainConfig(epochs=30, lr=2e-2, batch=8, bag_size=4,
                            side_fraction_range=(0.3, 0.6), seed=1,
                            lr_schedule=(0.5, 10))
    enc_cfg = EncoderConfig(patch_side=16, hidden=16)
    model, curve = train_vision(images, targets, labels, mlp.SOFTMAX, cfg,
                                agg=vision.MEAN, encoder_cfg=enc_cfg)
    correct = 0
    for i, img in enumerate(images):
        boxes = sample_random_boxes(48, 48, 4, (0.3, 0.6),
                                    rng=np.random.default_rng(100 + i))
        bag = np.stack([vision.extract_patch(img, b, 16) for b in boxes])
        pred = int(np.argmax(predict_bag(model, bag)[1:])) + 1
        correct += pred == targets[i]
    assert correct / len(images) >= 0.95
    assert curve[-1] < curve[0]


def test_train_vision_lr_zero_keeps_weights():
    rng = np.random.default_rng(6)
    images, targets = color_dataset(rng, n=8)
    labels = [mlp.BACKGROUND_LABEL, "red", "blue"]
    cfg = VisionTrainConfig(epochs=1, lr=0.0, batch=4, bag_size=2, seed=2,
                            side_fraction_range=(0.3, 0.6))
    enc_cfg = EncoderConfig(patch_side=16, hidden=8)
    ref = init_vision_model(labels, mlp.SOFTMAX, vision.MEAN, enc_cfg,
                            seed=cfg.seed)
    model, _ = train_vision(images, targets, labels, mlp.SOFTMAX, cfg,
                            agg=vision.MEAN, encoder_cfg=enc_cfg)
    for k, v in model.encoder.params().items():
        assert np.array_equal(v, ref.encoder.params()[k].astype(np.float32)
                              .astype(np.float64)), k
    assert np.array_equal(model.W, ref.W)


def test_train_vision_deterministic():
    rng = np.random.default_rng(7)
    images, targets = color_dataset(rng, n=8)
    labels = [mlp.BACKGROUND_LABEL, "red", "blue"]
    outs = []
    for _ in range(2):
        cfg = VisionTrainConfig(epochs=2, lr=1e-2, batch=4, bag_size=2, seed=3,
                                side_fraction_range=(0.3, 0.6))
        model, curve = train_vision(images, targets, labels, mlp.SOFTMAX, cfg,
                                    encoder_cfg=EncoderConfig(patch_side=16,
                                                              hidden=8))
        outs.append((model.W.copy(), tuple(curve)))
    assert np.array_equal(outs[0][0], outs[1][0])
    assert outs[0][1] == outs[1][1]


def test_epoch_resampling_differs():
    # bags for the same image must differ between epochs (random sampler)
    from vishash.seeds import derive_rng

    img_w, img_h = 64, 64
    a = sample_random_boxes(img_w, img_h, 5, rng=derive_rng(0, "bag", 0, 7))
    b = sample_random_boxes(img_w, img_h, 5, rng=derive_rng(0, "bag", 1, 7))
    assert a != b


def test_proposal_sampler_fixed_bags():
    rng = np.random.default_rng(8)
    images, targets = color_dataset(rng, n=4)
    labels = [mlp.BACKGROUND_LABEL, "red", "blue"]
    proposals = [[Box(0, 0, 20, 10), Box(10, 10, 8, 16)] for _ in images]
    cfg = VisionTrainConfig(epochs=2, lr=1e-3, batch=2, bag_size=3, seed=4,
                            side_fraction_range=(0.3, 0.6))
    model, curve = train_vision(images, targets, labels, mlp.SOFTMAX, cfg,
                                proposals=proposals,
                                encoder_cfg=EncoderConfig(patch_side=16, hidden=8))
    assert len(curve) == 4  # 2 epochs x 2 steps


# ---------------------------------------------------------------------------
# checkpoint round trip
# ---------------------------------------------------------------------------


def test_vision_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    images, targets = color_dataset(rng, n=8)
    labels = [mlp.BACKGROUND_LABEL, "red", "blue"]
    cfg = VisionTrainConfig(epochs=1, lr=1e-2, batch=4, bag_size=2, seed=5,
                            side_fraction_range=(0.3, 0.6))
    model, _ = train_vision(images, targets, labels, mlp.SOFTMAX, cfg,
                            agg=vision.MAX,
                            encoder_cfg=EncoderConfig(patch_side=16, hidden=8))
    p = tmp_path / "v.json"
    vision.save_vision(model, p)
    loaded = vision.load_vision(p)
    assert loaded.head == model.head
    assert loaded.agg == vision.MAX
    assert loaded.labels == labels
    assert loaded.encoder.cfg == model.encoder.cfg
    bag = rng.random((3, 16, 16, 3))
    assert np.array_equal(predict_bag(model, bag), predict_bag(loaded, bag))
    # double round trip is byte-identical
    p2 = tmp_path / "v2.json"
    vision.save_vision(loaded, p2)
    assert p.read_bytes() == p2.read_bytes()


def test_vision_checkpoint_head_mismatch(tmp_path):
    model = toy_model(mlp.SIGMOID, vision.MEAN)
    p = tmp_path / "v.json"
    vision.save_vision(model, p)
    from vishash.errors import HeadMismatch

    with pytest.raises(HeadMismatch):
        vision.load_vision(p, expect_head=mlp.SOFTMAX)


# ---------------------------------------------------------------------------
# resize
# ---------------------------------------------------------------------------


def test_resize_constant_image():
    img = np.full((13, 7, 3), 0.25)
    out = resize_bilinear(img, 5)
    assert out.shape == (5, 5, 3)
    assert np.allclose(out, 0.25)


def test_resize_identity():
    rng = np.random.default_rng(10)
    img = rng.random((6, 6, 3))
    assert np.allclose(resize_bilinear(img, 6), img, atol=1e-12)
