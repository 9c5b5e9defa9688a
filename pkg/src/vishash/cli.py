"""Command-line entry points for every pipeline stage.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
All randomness flows from --seed through stage-named sub-seeds, so each
stage is independently reproducible.
"""

from __future__ import annotations

import argparse
import json
import os
import sys


from . import corpus, evaluate, hashtag, mlp, pipeline, synthgen, vision
from .boxes import Box
from .embed_text import EmbeddingTable
from .errors import NonFiniteLoss, VishashError
from .seeds import derive_seed
from .service import AnnotationService, AnnotationStore, make_server


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_pair(text: str, sep: str) -> tuple[int, int]:
    parts = text.split(sep)
    if len(parts) != 2:
        raise UsageError(f"expected two {sep!r}-separated integers, got {text!r}")
    return int(parts[0]), int(parts[1])


def _parse_ks(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p]


def build_parser() -> _Parser:
    p = _Parser(prog="vishash", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--images", type=int, default=100)
    sp.add_argument("--canvas", default="1024x1536")
    sp.add_argument("--categories", type=int, default=6)
    sp.add_argument("--tags", type=int, default=20)
    sp.add_argument("--icons", default="2-4")
    sp.add_argument("--icon-side", default="110-190")
    sp.add_argument("--words", type=int, default=95)
    sp.add_argument("--noise", type=float, default=0.2)
    sp.add_argument("--embed-dim", type=int, default=64)
    sp.add_argument("--seed", type=int, default=0)

    cp = sub.add_parser("curate", help="filter records and tags to a stable vocabulary")
    cp.add_argument("--manifest", required=True)
    cp.add_argument("--out", required=True)
    cp.add_argument("--vocab-out")
    cp.add_argument("--merge-map")
    cp.add_argument("--min-tag-count", type=int, default=50)
    cp.add_argument("--aspect-lo", type=float, default=1 / 5)
    cp.add_argument("--aspect-hi", type=float, default=5.0)
    cp.add_argument("--max-tags", type=int, default=None)
    cp.add_argument("--seed", type=int, default=0)

    tp = sub.add_parser("train-text", help="train a text head on mean embeddings")
    tp.add_argument("--manifest", required=True)
    tp.add_argument("--embeddings", required=True)
    tp.add_argument("--head", choices=["category", "tag"], required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--hidden", type=int, default=300)
    tp.add_argument("--iterations", type=int, default=20000)
    tp.add_argument("--lr", type=float, default=1e-3)
    tp.add_argument("--momentum", type=float, default=0.0)
    tp.add_argument("--weight-decay", type=float, default=0.0)
    tp.add_argument("--test-ratio", type=float, default=0.1)
    tp.add_argument("--seed", type=int, default=0)

    vp = sub.add_parser("train-vision", help="train the patch-bag classifier")
    vp.add_argument("--manifest", required=True)
    vp.add_argument("--head", choices=["category", "tag"], required=True)
    vp.add_argument("--out", required=True)
    vp.add_argument("--agg", choices=[vision.MEAN, vision.MAX], default=vision.MEAN)
    vp.add_argument("--sampler", choices=["random", "proposals"], default="random")
    vp.add_argument("--proposals", help="JSONL proposal boxes per image")
    vp.add_argument("--epochs", type=int, default=5)
    vp.add_argument("--lr", type=float, default=1e-2)
    vp.add_argument("--momentum", type=float, default=0.9)
    vp.add_argument("--weight-decay", type=float, default=1e-4)
    vp.add_argument("--batch", type=int, default=16)
    vp.add_argument("--bag-size", type=int, default=5)
    vp.add_argument("--patch-side", type=int, default=64)
    vp.add_argument("--hidden", type=int, default=64)
    vp.add_argument("--side-lo", type=float, default=0.1)
    vp.add_argument("--side-hi", type=float, default=0.4)
    vp.add_argument("--lr-step-epochs", type=int, default=1)
    vp.add_argument("--lr-step-factor", type=float, default=0.5)
    vp.add_argument("--test-ratio", type=float, default=0.1)
    vp.add_argument("--seed", type=int, default=0)

    pp = sub.add_parser("predict", help="rank labels for one transcript")
    pp.add_argument("--model", required=True)
    pp.add_argument("--embeddings", required=True)
    pp.add_argument("--transcript", required=True)
    pp.add_argument("--topk", type=int, default=3)
    pp.add_argument("--snap", action="store_true")
    pp.add_argument("--baseline", choices=["model", "vote"], default="model",
                    help="'vote': rank tags by nearest-tag votes instead of the model")
    pp.add_argument("--seed", type=int, default=0)

    hp = sub.add_parser("hashtag", help="localize visual hashtags per (image, tag)")
    hp.add_argument("--manifest", required=True)
    hp.add_argument("--vision-model", required=True)
    hp.add_argument("--out", required=True)
    hp.add_argument("--tags-from", choices=["text", "gt"], default="text")
    hp.add_argument("--text-model")
    hp.add_argument("--embeddings")
    hp.add_argument("--topk-tags", type=int, default=2)
    hp.add_argument("--snap", action="store_true")
    hp.add_argument("--subset", choices=["test", "train", "all"], default="test")
    hp.add_argument("--test-ratio", type=float, default=0.1)
    hp.add_argument("--fallback", action="store_true")
    hp.add_argument("--n-crops", type=int, default=3500)
    hp.add_argument("--side-lo", type=float, default=0.1)
    hp.add_argument("--side-hi", type=float, default=0.4)
    hp.add_argument("--threshold-k", type=float, default=1.0)
    hp.add_argument("--min-area-fraction", type=float, default=0.005)
    hp.add_argument("--fill-ratio-min", type=float, default=0.25)
    hp.add_argument("--heatmaps", help="directory for PGM + raw heatmap exports")
    hp.add_argument("--seed", type=int, default=0)

    ep = sub.add_parser("evaluate", help="compute metrics and write a report")
    ep.add_argument("--manifest", required=True)
    ep.add_argument("--report", required=True)
    ep.add_argument("--embeddings")
    ep.add_argument("--text-category-model")
    ep.add_argument("--text-tag-model")
    ep.add_argument("--snap", action="store_true")
    ep.add_argument("--vision-category-model")
    ep.add_argument("--bag-size", type=int, default=5)
    ep.add_argument("--proposals")
    ep.add_argument("--gt-boxes")
    ep.add_argument("--gt-from-icons", action="store_true")
    ep.add_argument("--iou-threshold", type=float, default=0.5)
    ep.add_argument("--ks", default="1,3,5")
    ep.add_argument("--subset", choices=["test", "train", "all"], default="test")
    ep.add_argument("--test-ratio", type=float, default=0.1)
    ep.add_argument("--seed", type=int, default=0)

    bp = sub.add_parser("baseline", help="random-crop chance baseline for localization")
    bp.add_argument("--manifest", required=True)
    bp.add_argument("--report", required=True)
    bp.add_argument("--gt-boxes")
    bp.add_argument("--gt-from-icons", action="store_true")
    bp.add_argument("--subset", choices=["test", "train", "all"], default="test")
    bp.add_argument("--test-ratio", type=float, default=0.1)
    bp.add_argument("--iou-threshold", type=float, default=0.5)
    bp.add_argument("--seed", type=int, default=0)

    vs = sub.add_parser("serve", help="annotation task backend")
    vs.add_argument("--manifest", required=True)
    vs.add_argument("--gt-store", required=True)
    vs.add_argument("--port", type=int, default=8000)
    vs.add_argument("--annotators-per-pair", type=int, default=3)
    vs.add_argument("--ui", help="directory with the annotator UI build")
    vs.add_argument("--seed", type=int, default=0)

    return p


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _subset_records(records, subset: str, ratio: float, seed: int):
    if subset == "all":
        return records
    sp = corpus.split(records, ratio=ratio, seed=derive_seed(seed, "split"))
    keep = set(sp.test_ids if subset == "test" else sp.train_ids)
    return [r for r in records if r.id in keep]


def _load_gts(args, records):
    if args.gt_boxes:
        return evaluate.load_gt_jsonl(args.gt_boxes)
    if args.gt_from_icons:
        return evaluate.gt_sets_from_records(records)
    raise UsageError("need --gt-boxes or --gt-from-icons")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _cmd_synth(args) -> int:
    cfg = synthgen.SynthConfig(
        n_images=args.images,
        canvas=_parse_pair(args.canvas, "x"),
        n_categories=args.categories,
        n_tags=args.tags,
        icons_per_image=_parse_pair(args.icons, "-"),
        icon_side=_parse_pair(args.icon_side, "-"),
        words_per_image=args.words,
        noise_word_fraction=args.noise,
        seed=args.seed,
        embed_dim=args.embed_dim,
    )
    synthgen.generate(cfg, out_dir=args.out)
    print(f"wrote {args.images} images to {args.out}")
    return 0


def _cmd_curate(args) -> int:
    records = corpus.load_manifest(args.manifest)
    merge_map = corpus.load_merge_map(args.merge_map) if args.merge_map else {}
    curated, vocab = corpus.curate(
        records,
        min_tag_count=args.min_tag_count,
        aspect_bounds=(args.aspect_lo, args.aspect_hi),
        max_tags_per_image=args.max_tags,
        merge_map=merge_map,
    )
    corpus.write_manifest(curated, args.out)
    if args.vocab_out:
        corpus.save_vocab(vocab, args.vocab_out)
    print(f"kept {len(curated)}/{len(records)} records, {len(vocab)} tags")
    return 0


def _cmd_train_text(args) -> int:
    records = corpus.load_manifest(args.manifest)
    table = EmbeddingTable.load(args.embeddings)
    train_records = _subset_records(records, "train", args.test_ratio, args.seed)
    X = pipeline.text_features(train_records, table)
    if args.head == "category":
        labels = pipeline.category_label_list(records)
        targets = pipeline.category_targets(train_records, labels)
        head = mlp.SOFTMAX
    else:
        labels = sorted({t for r in records for t in r.tags})
        targets = pipeline.tag_targets(train_records, labels)
        head = mlp.SIGMOID
    model = mlp.init_model(table.dim, args.hidden, labels, head,
                           seed=derive_seed(args.seed, "init", args.head))
    cfg = mlp.TrainConfig(
        iterations=args.iterations, lr=args.lr, momentum=args.momentum,
        weight_decay=args.weight_decay, batch=None,
        seed=derive_seed(args.seed, "train", args.head),
    )
    model, curve = mlp.train(X, targets, model, cfg)
    mlp.save(model, args.out)
    print(f"trained {args.head} head on {len(train_records)} records, "
          f"final loss {curve[-1]:.6f}")
    return 0


def _load_proposal_boxes(path) -> dict[str, list[Box]]:
    out: dict[str, list[Box]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            out[d["id"]] = [Box(int(b["x"]), int(b["y"]), int(b["w"]), int(b["h"]))
                            for b in d["boxes"]]
    return out


def _cmd_train_vision(args) -> int:
    records = corpus.load_manifest(args.manifest)
    train_records = _subset_records(records, "train", args.test_ratio, args.seed)
    cache = pipeline.ImageCache(os.path.dirname(os.path.abspath(args.manifest)))
    images = [(lambda r: (lambda: cache(r)))(r) for r in train_records]
    if args.head == "category":
        labels = pipeline.category_label_list(records)
        targets = pipeline.category_targets(train_records, labels)
        head = mlp.SOFTMAX
    else:
        labels = sorted({t for r in records for t in r.tags})
        targets = pipeline.tag_targets(train_records, labels)
        head = mlp.SIGMOID
    proposals = None
    if args.sampler == "proposals":
        if not args.proposals:
            raise UsageError("--sampler proposals requires --proposals FILE")
        by_id = _load_proposal_boxes(args.proposals)
        proposals = [by_id.get(r.id, []) for r in train_records]
        if any(not p for p in proposals):
            raise VishashError("every training image needs proposal boxes")
    cfg = vision.VisionTrainConfig(
        epochs=args.epochs, lr=args.lr, momentum=args.momentum,
        weight_decay=args.weight_decay, batch=args.batch, bag_size=args.bag_size,
        side_fraction_range=(args.side_lo, args.side_hi),
        seed=derive_seed(args.seed, "vision", args.head),
        lr_schedule=(args.lr_step_factor, args.lr_step_epochs),
    )
    enc_cfg = vision.EncoderConfig(hidden=args.hidden, patch_side=args.patch_side)
    model, curve = vision.train_vision(
        images, targets, labels, head, cfg, agg=args.agg,
        proposals=proposals, encoder_cfg=enc_cfg,
    )
    vision.save_vision(model, args.out)
    print(f"trained vision {args.head} head ({args.agg}) on {len(train_records)} "
          f"images, final loss {curve[-1]:.6f}")
    return 0


def _cmd_predict(args) -> int:
    from .embed_text import (
        embed_mean,
        rank_tags_with_snap,
        snap_tags,
        tokenize_clean,
        vote_tags,
    )

    model = mlp.load(args.model)
    table = EmbeddingTable.load(args.embeddings)
    with open(args.transcript, encoding="utf-8") as fh:
        words = fh.read().split()
    tokens = tokenize_clean(words)

    if args.baseline == "vote":
        if model.head != mlp.SIGMOID:
            raise UsageError("--baseline vote needs a tag-head model vocabulary")
        from .embed_text import vote_counts

        votes = vote_counts(tokens, table, model.labels)
        ranked_tags = vote_tags(tokens, table, model.labels, args.topk)
        for label in ranked_tags:
            print(f"{label}\t{votes[model.labels.index(label)]}")
        return 0

    feature = embed_mean(tokens, table)
    ranked = mlp.predict_topk(model, feature.vector, model.d_out
                              if model.head == mlp.SIGMOID else model.d_out - 1)
    scores = dict(ranked)
    names = [label for label, _ in ranked]
    if args.snap:
        snapped = snap_tags(tokens, model.labels)
        names = rank_tags_with_snap(names, snapped, len(names))
    for label in names[: args.topk]:
        print(f"{label}\t{scores[label]:.6g}")
    return 0


def _cmd_hashtag(args) -> int:
    records = corpus.load_manifest(args.manifest)
    selected = _subset_records(records, args.subset, args.test_ratio, args.seed)
    model = vision.load_vision(args.vision_model, expect_head=mlp.SIGMOID)
    cache = pipeline.ImageCache(os.path.dirname(os.path.abspath(args.manifest)))

    if args.tags_from == "text":
        if not (args.text_model and args.embeddings):
            raise UsageError("--tags-from text requires --text-model and --embeddings")
        text_model = mlp.load(args.text_model, expect_head=mlp.SIGMOID)
        table = EmbeddingTable.load(args.embeddings)
        tag_lists = pipeline.predict_tags(text_model, selected, table,
                                          args.topk_tags, snap=args.snap)
    else:
        tag_lists = {
            r.id: sorted({t for t, _ in r.gt_icons} if r.gt_icons else r.tags)
            for r in selected
        }

    cfg = hashtag.HashtagConfig(
        n_crops=args.n_crops,
        side_fraction_range=(args.side_lo, args.side_hi),
        threshold_k=args.threshold_k,
        min_area_fraction=args.min_area_fraction,
        fill_ratio_min=args.fill_ratio_min,
    )
    if args.heatmaps:
        os.makedirs(args.heatmaps, exist_ok=True)
    n_pairs = 0
    with open(args.out, "w", encoding="utf-8") as fh:
        for r in selected:
            tags = [t for t in tag_lists[r.id] if t in model.labels]
            if not tags:
                continue
            img = cache(r)
            results, maps = hashtag.extract_hashtags(
                img, tags, model, cfg, fallback=args.fallback,
                seed=derive_seed(args.seed, "crops", r.id),
                image_id=r.id, return_maps=True,
            )
            for tag in tags:
                fh.write(json.dumps(
                    hashtag.extraction_to_dict(r.id, tag, results[tag]),
                    sort_keys=True) + "\n")
                n_pairs += 1
                if args.heatmaps:
                    stem = os.path.join(args.heatmaps, f"{r.id}_{tag}")
                    hashtag.export_heatmap_pgm(maps[tag], stem + ".pgm")
                    hashtag.export_heatmap_raw(maps[tag], stem + ".heat")
    print(f"wrote proposals for {n_pairs} image-tag pairs to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    records = corpus.load_manifest(args.manifest)
    selected = _subset_records(records, args.subset, args.test_ratio, args.seed)
    ks = _parse_ks(args.ks)
    report: dict = {
        "seed": args.seed,
        "config": {
            "subset": args.subset,
            "test_ratio": args.test_ratio,
            "ks": ks,
            "iou_threshold": args.iou_threshold,
            "snap": args.snap,
            "n_records": len(selected),
        },
    }
    table = EmbeddingTable.load(args.embeddings) if args.embeddings else None

    gt_cats = {r.id: r.category for r in selected if r.category}
    report["category_chance"] = {
        str(k): v
        for k, v in evaluate.category_chance([r.category for r in selected], ks).items()
    }

    if args.text_category_model:
        if table is None:
            raise UsageError("--text-category-model requires --embeddings")
        model = mlp.load(args.text_category_model, expect_head=mlp.SOFTMAX)
        preds = pipeline.predict_categories(model, selected, table, max(ks))
        acc = evaluate.topk_accuracy(preds, gt_cats, ks)
        report["text_category"] = {"topk": {str(k): v for k, v in acc.items()}}

    if args.text_tag_model:
        if table is None:
            raise UsageError("--text-tag-model requires --embeddings")
        model = mlp.load(args.text_tag_model, expect_head=mlp.SIGMOID)
        gt_tags = {r.id: set(r.tags) for r in selected}
        section = {}
        for k in ks:
            preds = pipeline.predict_tags(model, selected, table, k, snap=args.snap)
            prec, rec = evaluate.tag_pr_at_k(preds, gt_tags, k)
            section[str(k)] = {"precision": prec, "recall": rec}
        report["text_tags"] = section

    if args.vision_category_model:
        model = vision.load_vision(args.vision_category_model, expect_head=mlp.SOFTMAX)
        cache = pipeline.ImageCache(os.path.dirname(os.path.abspath(args.manifest)))
        preds = pipeline.predict_bag_categories(
            model, selected, cache, max(ks), bag_size=args.bag_size,
            seed=derive_seed(args.seed, "evalbags"),
        )
        acc = evaluate.topk_accuracy(preds, gt_cats, ks)
        report["vision_category"] = {"topk": {str(k): v for k, v in acc.items()}}

    if args.proposals:
        gts = _load_gts(args, selected)
        proposals = evaluate.load_proposals_jsonl(args.proposals)
        metrics = evaluate.hashtag_metrics(proposals, gts, args.iou_threshold)
        report["hashtags"] = metrics.to_dict()

    evaluate.write_report(report, args.report)
    print(evaluate.format_summary(report))
    return 0


def _cmd_baseline(args) -> int:
    records = corpus.load_manifest(args.manifest)
    selected = _subset_records(records, args.subset, args.test_ratio, args.seed)
    gts = _load_gts(args, selected)
    dims = {r.id: (r.width, r.height) for r in selected}
    metrics = evaluate.random_crop_baseline(
        dims, gts, seed=derive_seed(args.seed, "baseline"),
        iou_threshold=args.iou_threshold,
    )
    report = {"seed": args.seed, "random_crop": metrics.to_dict()}
    evaluate.write_report(report, args.report)
    print(evaluate.format_summary(report))
    return 0


def _cmd_serve(args) -> int:
    records = corpus.load_manifest(args.manifest)
    store = AnnotationStore(args.gt_store)
    service = AnnotationService(
        records, store,
        annotators_per_pair=args.annotators_per_pair,
        images_root=os.path.dirname(os.path.abspath(args.manifest)),
    )
    server = make_server(service, port=args.port, ui_dir=args.ui)
    print(f"serving {len(service.pairs)} image-tag pairs on "
          f"http://127.0.0.1:{server.server_address[1]}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "curate": _cmd_curate,
    "train-text": _cmd_train_text,
    "train-vision": _cmd_train_vision,
    "predict": _cmd_predict,
    "hashtag": _cmd_hashtag,
    "evaluate": _cmd_evaluate,
    "baseline": _cmd_baseline,
    "serve": _cmd_serve,
}


def cli(argv=None) -> int:
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except NonFiniteLoss as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (VishashError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
