"""Command-line entry point.

Subcommands: dataset gen / dataset ingest, train, generate, eval layout,
eval study export / aggregate, and serve (the rating service).  Every
randomized choice derives from --seed, so runs are reproducible.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np


def _setup_logging():
    level = os.environ.get("SGCTX_LOG", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="sgctx",
        description="scene-graph-conditioned image generation lab",
    )
    sub = p.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="build datasets")
    ds_sub = ds.add_subparsers(dest="dataset_command", required=True)

    gen = ds_sub.add_parser("gen", help="generate a shapes-world split")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--scenes", type=int, default=100)
    gen.add_argument("--size", type=int, default=32)
    gen.add_argument("--out", required=True)

    ingest = ds_sub.add_parser("ingest", help="ingest annotation JSON")
    ingest.add_argument("--annotations", required=True)
    ingest.add_argument("--images", default=None, help="directory with image files")
    ingest.add_argument("--seed", type=int, default=0)
    ingest.add_argument("--out", required=True)

    tr = sub.add_parser("train", help="train the model")
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--steps", type=int, default=200)
    tr.add_argument("--batch", type=int, default=32)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--lr", type=float, default=1e-4)
    tr.add_argument("--config", default=None, help="TrainConfig JSON file")
    tr.add_argument("--resume", default=None, help="checkpoint to resume from")
    tr.add_argument("--probe-scenes", type=int, default=32,
                    help="held-out scenes for the per-step relation probe")
    tr.add_argument("--layout", choices=["gt", "pred"], default="gt",
                    help="teacher-forced (gt) or self-predicted layouts")

    ge = sub.add_parser("generate", help="generate images from scene graphs")
    ge.add_argument("--ckpt", required=True)
    ge.add_argument("--graph", default=None, help="scene-graph JSON file")
    ge.add_argument("--vocab", default=None, help="vocab JSON (with --graph)")
    ge.add_argument("--dataset", default=None, help="generate for a whole split")
    ge.add_argument("--out", required=True)
    ge.add_argument("--boxes", choices=["gt", "pred"], default="pred",
                    help="use ground-truth or predicted boxes/masks for the layout")

    ev = sub.add_parser("eval", help="evaluation commands")
    ev_sub = ev.add_subparsers(dest="eval_command", required=True)

    lay = ev_sub.add_parser("layout", help="relation score + IoU of layouts")
    lay.add_argument("--dataset", required=True)
    lay.add_argument("--ckpt", default=None)
    lay.add_argument("--boxes", choices=["gt", "pred"], default="pred")
    lay.add_argument("--out", default=None, help="write metrics JSON here")

    st = ev_sub.add_parser("study", help="human-rating studies")
    st_sub = st.add_subparsers(dest="study_command", required=True)

    ex = st_sub.add_parser("export", help="build a rating-study manifest")
    ex.add_argument("--design", choices=["mors", "avb", "abx"], required=True)
    ex.add_argument("--dataset", required=True)
    ex.add_argument("--images-a", required=True, help="model A image directory")
    ex.add_argument("--images-b", default=None, help="model B image directory")
    ex.add_argument("--gt-images", default=None,
                    help="ground-truth image directory (controls)")
    ex.add_argument("--out", required=True)
    ex.add_argument("--count", type=int, default=50)
    ex.add_argument("--seed", type=int, default=0)
    ex.add_argument("--control-rate", type=float, default=0.10)
    ex.add_argument("--model-a", default="ours")
    ex.add_argument("--model-b", default="baseline")

    ag = st_sub.add_parser("aggregate", help="aggregate a ratings CSV")
    ag.add_argument("--ratings", required=True)
    ag.add_argument("--design", choices=["mors", "avb", "abx"], required=True)
    ag.add_argument("--min-control-acc", type=float, default=0.8)
    ag.add_argument("--category-map", default=None, help="category map JSON")
    ag.add_argument("--out", default=None)

    sv = sub.add_parser("serve", help="run the rating service")
    sv.add_argument("--root", required=True, help="data root for studies/media")
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--port", type=int, default=8765)
    sv.add_argument("--ui", default=None, help="static UI directory")
    sv.add_argument("--min-control-acc", type=float, default=0.8)

    return p


def _load_models(ckpt_path: str):
    from .checkpoint import load_checkpoint
    from .model import ModelConfig, build_models
    from .scenegraph import Vocab

    tensors, meta = load_checkpoint(ckpt_path)
    cfg = ModelConfig.from_json(json.dumps(meta["train_config"]["model"]))
    vocab = Vocab(tuple(meta["vocab"]["objects"]), tuple(meta["vocab"]["predicates"]))
    models = build_models(cfg, vocab, seed=0)
    models.load_state(
        {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    )
    return models, vocab, cfg


def _generate_one(models, vocab, cfg, graph, use_gt_layout: bool):
    from . import autodiff as ad
    from .model import (
        GraphBatch, boxes_to_list, compose_layout_batch, generate_image,
        graph_conv, pool_context, predict_boxes, predict_masks,
    )
    from .scenegraph import ensure_image_node

    graph = ensure_image_node(graph, vocab)
    batch = GraphBatch.from_graphs([graph])
    node_vecs, _ = graph_conv(batch, models.gcn)
    s = pool_context(node_vecs, batch, models.context, "generator")
    real = batch.real_nodes[0]
    real_vecs = ad.take_rows(node_vecs, real)

    if use_gt_layout:
        boxes = [graph.nodes[i].gt_box for i in graph.real_node_indices()]
        if any(b is None for b in boxes):
            raise ValueError("graph lacks ground-truth boxes for --boxes gt")
        masks = []
        for i in graph.real_node_indices():
            m = graph.nodes[i].gt_mask
            masks.append(
                ad.constant(m.to_array()[None].astype(float))
                if m is not None
                else ad.constant(np.ones((1, 16, 16)))
            )
    else:
        pred = predict_boxes(real_vecs, models.box_head)
        boxes = boxes_to_list(pred.data)
        mask_probs = predict_masks(real_vecs, models.mask_head)
        masks = [
            ad.constant(mask_probs.data[k]) for k in range(mask_probs.shape[0])
        ]
    layout = compose_layout_batch(
        batch, node_vecs, [boxes], [masks], cfg.image_size, cfg.image_size
    )
    img = generate_image(layout, s, models.generator)
    return img.data[0].transpose(1, 2, 0), boxes


def cmd_dataset_gen(args) -> int:
    from .dataset import ShapesWorldConfig, generate_shapes_world, save_split

    cfg = ShapesWorldConfig(seed=args.seed, scenes=args.scenes, image_size=args.size)
    split = generate_shapes_world(cfg)
    path = save_split(split, args.out)
    print(f"wrote {len(split.examples)} scenes to {path}")
    return 0


def cmd_dataset_ingest(args) -> int:
    from .dataset import ingest_coco_style, save_split

    doc = json.loads(Path(args.annotations).read_text())
    split = ingest_coco_style(
        doc, seed=args.seed,
        image_dir=Path(args.images) if args.images else None,
    )
    path = save_split(split, args.out)
    print(f"ingested {len(split.examples)} images to {path}")
    return 0


def cmd_train(args) -> int:
    from .dataset import DatasetSplit, load_split
    from .train import TrainConfig, run_training

    split = load_split(args.dataset)
    if args.config:
        cfg = TrainConfig.from_json(Path(args.config).read_text())
    else:
        cfg = TrainConfig(
            steps=args.steps,
            batch_size=args.batch,
            seed=args.seed,
            lr=args.lr,
            teacher_forcing=args.layout == "gt",
            resume_from=args.resume,
        )
    probe = None
    train_on = split
    if args.probe_scenes and args.probe_scenes < len(split.examples):
        probe = split.examples[-args.probe_scenes:]
        train_on = DatasetSplit(
            examples=split.examples[: -args.probe_scenes],
            vocab=split.vocab,
            name=split.name,
        )
    out = run_training(cfg, train_on, args.out, probe=probe)
    print(f"final checkpoint: {out['checkpoint']}")
    print(f"metrics log: {out['metrics']}")
    if out["last_row"]:
        print(f"held-out relation score: {out['last_row']['relation_score']:.4f}")
    return 0


def cmd_generate(args) -> int:
    from .dataset import load_split, write_ppm
    from .scenegraph import Vocab, parse_scene_graph

    models, vocab, cfg = _load_models(args.ckpt)
    use_gt = args.boxes == "gt"
    out = Path(args.out)

    if args.graph:
        graph_vocab = vocab
        if args.vocab:
            graph_vocab = Vocab.from_json(Path(args.vocab).read_text())
        graph = parse_scene_graph(Path(args.graph).read_text(), graph_vocab)
        img, _ = _generate_one(models, graph_vocab, cfg, graph, use_gt)
        write_ppm(out, img)
        print(f"wrote {out}")
        return 0

    if not args.dataset:
        print("generate needs --graph or --dataset", file=sys.stderr)
        return 2
    split = load_split(args.dataset)
    out.mkdir(parents=True, exist_ok=True)
    for i, (_, graph) in enumerate(split.examples):
        img, _ = _generate_one(models, split.vocab, cfg, graph, use_gt)
        write_ppm(out / f"scene_{i:05d}.ppm", img)
    print(f"wrote {len(split.examples)} images to {out}")
    return 0


def cmd_eval_layout(args) -> int:
    from .dataset import load_split
    from .metrics import canonical_json, relation_score_counts

    split = load_split(args.dataset)
    if args.boxes == "gt":
        satisfied = counted = 0
        for _, graph in split.examples:
            boxes = [n.gt_box for n in graph.nodes]
            s, c = relation_score_counts(graph, boxes, split.vocab)
            satisfied += s
            counted += c
        rel = satisfied / counted if counted else 0.0
        iou = 1.0
    else:
        if not args.ckpt:
            print("eval layout --boxes pred needs --ckpt", file=sys.stderr)
            return 2
        from .train import probe_metrics

        models, vocab, _ = _load_models(args.ckpt)
        rel, iou = probe_metrics(models, split.examples, split.vocab)
    doc = {
        "dataset": split.name,
        "examples": len(split.examples),
        "boxes": args.boxes,
        "relation_score": rel,
        "avg_iou": iou,
    }
    text = canonical_json(doc)
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_study_export(args) -> int:
    from .dataset import load_split
    from .study import export_forced_choice_study, export_mors_study

    split = load_split(args.dataset)
    if args.design == "mors":
        manifest = export_mors_study(
            split,
            images_dir=Path(args.images_a),
            gt_dir=Path(args.gt_images or args.dataset),
            out_dir=args.out,
            count=args.count,
            seed=args.seed,
            control_rate=args.control_rate,
            model_name=args.model_a,
        )
    else:
        if not args.images_b:
            print("forced-choice export needs --images-b", file=sys.stderr)
            return 2
        manifest = export_forced_choice_study(
            args.design,
            split,
            images_a_dir=Path(args.images_a),
            images_b_dir=Path(args.images_b),
            out_dir=args.out,
            count=args.count,
            seed=args.seed,
            control_rate=args.control_rate,
            model_a=args.model_a,
            model_b=args.model_b,
            gt_dir=Path(args.gt_images) if args.gt_images else None,
        )
    controls = sum(t.is_control for t in manifest.trials)
    print(f"exported {len(manifest.trials)} trials ({controls} controls) to {args.out}")
    return 0


def cmd_study_aggregate(args) -> int:
    from .metrics import (
        aggregate_study, canonical_json, load_category_map, records_from_csv,
    )

    records = records_from_csv(Path(args.ratings).read_text())
    cmap = None
    if args.category_map:
        cmap = load_category_map(Path(args.category_map).read_text())
    result = aggregate_study(
        records, args.design,
        min_control_accuracy=args.min_control_acc,
        category_map=cmap,
    )
    text = canonical_json(result.to_json_dict())
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_serve(args) -> int:
    from .service import RatingService

    service = RatingService(
        args.root, host=args.host, port=args.port,
        ui_dir=args.ui, min_control_accuracy=args.min_control_acc,
    )
    print(f"rating service on http://{args.host}:{service.port}", flush=True)
    try:
        service.serve_forever()
    except KeyboardInterrupt:
        service.stop()
    return 0


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "dataset":
            if args.dataset_command == "gen":
                return cmd_dataset_gen(args)
            return cmd_dataset_ingest(args)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "generate":
            return cmd_generate(args)
        if args.command == "eval":
            if args.eval_command == "layout":
                return cmd_eval_layout(args)
            if args.study_command == "export":
                return cmd_study_export(args)
            return cmd_study_aggregate(args)
        if args.command == "serve":
            return cmd_serve(args)
        parser.print_usage(sys.stderr)
        return 2
    except Exception as exc:  # surfaced with exit 1 per the CLI contract
        logging.getLogger("sgctx").error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
