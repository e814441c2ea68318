"""Loss assembly (six weighted terms), matching-aware triplet construction,
the alternating adversarial training loop, metrics logging, and resumable
checkpoints."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamNanError, AdamState, Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .dataset import AnnotatedImage, DatasetSplit
from .metrics import avg_iou, relation_score_counts
from .model import (
    GraphBatch,
    ModelConfig,
    Models,
    boxes_to_list,
    build_models,
    compose_layout_batch,
    discriminate_image,
    discriminate_objects,
    generate_image,
    graph_conv,
    pool_context,
    predict_boxes,
    predict_masks,
)
from .scenegraph import (
    BinaryMask,
    BoundingBox,
    ObjectNode,
    RelationTriple,
    SceneGraph,
    SpatialPredicate,
    Vocab,
)

log = logging.getLogger("sgctx.train")

METRICS_HEADER = [
    "step", "l_box", "l_mask", "l_pix", "l_gan_img", "l_gan_obj", "l_ac",
    "relation_score", "iou",
]

GENERATOR_LOSS_NAMES = ("l_box", "l_mask", "l_pix", "l_gan_img", "l_gan_obj", "l_ac")


class TrainError(RuntimeError):
    pass


class NanLossError(TrainError):
    def __init__(self, component: str):
        super().__init__(f"loss component {component!r} is NaN")
        self.component = component


class TrainAborted(TrainError):
    """Training stopped on a NaN; carries the last good checkpoint path."""

    def __init__(self, cause: str, checkpoint: Optional[Path]):
        super().__init__(f"{cause}; last good checkpoint: {checkpoint}")
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class LossWeights:
    w_box: float = 10.0
    w_mask: float = 0.1
    w_pix: float = 1.0
    w_gan_img: float = 0.01
    w_gan_obj: float = 0.01
    w_ac: float = 0.1

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not np.isfinite(value) or value < 0:
                raise TrainError(f"{name} must be finite and nonnegative, got {value}")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 200
    batch_size: int = 32
    seed: int = 0
    lr: float = 1e-4
    d_lr: Optional[float] = None  # discriminator learning rate; defaults to lr
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    teacher_forcing: bool = True  # compose layouts from gt boxes/masks
    flip_prob: float = 0.5  # horizontal flip augmentation
    checkpoint_every: int = 500
    probe_scenes: int = 32
    resume_from: Optional[str] = None

    def __post_init__(self):
        if self.batch_size < 2:
            raise TrainError("batch size must be >= 2 (batch statistics)")
        if self.steps < 1:
            raise TrainError("steps must be >= 1")

    def to_json(self) -> str:
        doc = asdict(self)
        doc["model"] = json.loads(self.model.to_json())
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        doc = json.loads(text)
        doc["weights"] = LossWeights(**doc["weights"])
        doc["model"] = ModelConfig.from_json(json.dumps(doc["model"]))
        return cls(**doc)


# ---------------------------------------------------------------------------
# batch assembly


@dataclass
class Batch:
    """One training batch, already flipped/augmented and flattened."""

    graphs: GraphBatch
    images: np.ndarray  # (B, 3, H, W)
    gt_boxes: list[list[BoundingBox]]  # per graph, real nodes
    gt_masks: list[list[Optional[np.ndarray]]]  # per graph, (1,16,16) or None
    labels: np.ndarray  # (n_real_total,) category ids
    boxes_flat: np.ndarray  # (n_real_total, 4)
    has_masks: bool


def mismatch_donors(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform donor j != i per example (derangement not required)."""
    if n < 2:
        raise TrainError("mismatched contexts need a batch of at least 2")
    j = rng.integers(0, n - 1, size=n)
    j = j + (j >= np.arange(n))
    return j


def sample_mismatched_context(s: Tensor, rng: np.random.Generator) -> Tensor:
    """Context rows of a uniformly chosen *different* example per row: the
    additional-fake-triplet construction of matching-aware training."""
    return ad.take_rows(s, mismatch_donors(s.shape[0], rng))


def _flip_predicate_map(vocab: Vocab) -> np.ndarray:
    table = np.arange(vocab.num_predicates)
    names = vocab.predicate_names
    left = SpatialPredicate.LEFT_OF.value
    right = SpatialPredicate.RIGHT_OF.value
    if left in names and right in names:
        li, ri = names.index(left), names.index(right)
        table[li], table[ri] = ri, li
    return table


def flip_example(
    image: np.ndarray, graph: SceneGraph, pred_map: np.ndarray
) -> tuple[np.ndarray, SceneGraph]:
    """Mirror an (image, graph) pair left-to-right: pixels, boxes, masks,
    and the left-of/right-of predicates."""
    if image.ndim != 3:
        raise TrainError(f"flip expects a (3, H, W) image, got {image.shape}")
    flipped_img = image[:, :, ::-1].copy()
    nodes = []
    for n in graph.nodes:
        box = n.gt_box
        if box is not None:
            box = BoundingBox(1.0 - box.x1, box.y0, 1.0 - box.x0, box.y1)
        mask = n.gt_mask
        if mask is not None:
            mask = BinaryMask.from_array(mask.to_array()[:, ::-1])
        nodes.append(ObjectNode(category_id=n.category_id, gt_box=box, gt_mask=mask))
    triples = tuple(
        RelationTriple(t.subject, int(pred_map[t.predicate_id]), t.object)
        for t in graph.triples
    )
    return flipped_img, SceneGraph(nodes=tuple(nodes), triples=triples)


def make_batch(
    split: DatasetSplit,
    indices: Sequence[int],
    flips: Sequence[bool],
    vocab: Vocab,
) -> Batch:
    pred_map = _flip_predicate_map(vocab)
    graphs, images = [], []
    for idx, flip in zip(indices, flips):
        img, graph = split.examples[idx]
        chw = img.image.transpose(2, 0, 1)
        if flip:
            chw, graph = flip_example(chw, graph, pred_map)
        graphs.append(graph)
        images.append(chw)

    gb = GraphBatch.from_graphs(graphs)
    gt_boxes, gt_masks, labels, flat = [], [], [], []
    has_masks = True
    for g in graphs:
        boxes, masks = [], []
        for i in g.real_node_indices():
            node = g.nodes[i]
            if node.gt_box is None:
                raise TrainError("training requires ground-truth boxes")
            boxes.append(node.gt_box)
            flat.append(node.gt_box.as_tuple())
            labels.append(node.category_id)
            if node.gt_mask is None:
                masks.append(None)
                has_masks = False
            else:
                masks.append(node.gt_mask.to_array()[None].astype(np.float64))
        gt_boxes.append(boxes)
        gt_masks.append(masks)
    return Batch(
        graphs=gb,
        images=np.stack(images),
        gt_boxes=gt_boxes,
        gt_masks=gt_masks,
        labels=np.array(labels, dtype=np.int64),
        boxes_flat=np.array(flat),
        has_masks=has_masks,
    )


def crop_objects(image: Tensor, boxes: Sequence[BoundingBox], size: int = 16) -> Tensor:
    """Bilinear crops of each box region of a (3, H, W) image, resampled to
    (n, 3, size, size)."""
    parts = [
        ad.reshape(ad.crop_box_bilinear(image, b.as_tuple(), size, size), (1, 3, size, size))
        for b in boxes
    ]
    return ad.concat(parts, axis=0) if len(parts) > 1 else parts[0]


def _crop_batch(images: Tensor, per_graph_boxes: Sequence[Sequence[BoundingBox]]) -> Tensor:
    crops = []
    for gi, boxes in enumerate(per_graph_boxes):
        img = ad.reshape(
            ad.take_rows(ad.reshape(images, (images.shape[0], -1)), np.array([gi])),
            images.shape[1:],
        )
        crops.append(crop_objects(img, boxes))
    return ad.concat(crops, axis=0) if len(crops) > 1 else crops[0]


# ---------------------------------------------------------------------------
# losses


@dataclass
class ForwardResults:
    boxes_pred: Tensor  # (n_real, 4)
    masks_pred: Optional[Tensor]  # (n_real, 1, 16, 16) probabilities
    fake_images: Tensor  # (B, 3, H, W)
    d_fake_scores: Tensor  # patch scores of fakes under matched context
    d_obj_fake_scores: Tensor  # (n_real, 1)
    obj_logits_fake: Tensor  # (n_real, |vocab|)


@dataclass
class BatchTargets:
    boxes_gt: np.ndarray
    masks_gt: Optional[np.ndarray]  # (n_real, 1, 16, 16) binary
    images: np.ndarray  # (B, 3, H, W)
    labels: np.ndarray


@dataclass
class LossReport:
    components: dict[str, float]
    total: float
    d_img: float = 0.0
    d_obj: float = 0.0


def _lsgan_toward(scores: Tensor, target: float) -> Tensor:
    d = ad.add_scalar(scores, -target)
    return ad.mean_all(ad.mul(d, d))


def compute_losses(
    forward: ForwardResults, targets: BatchTargets, weights: LossWeights
) -> tuple[Tensor, dict[str, Tensor]]:
    """Generator-side objective: the weighted sum of the six losses.

    The mask term drops out (zero) when the dataset carries no masks.
    """
    comps: dict[str, Tensor] = {}
    comps["l_box"] = ad.l1_loss(forward.boxes_pred, ad.constant(targets.boxes_gt))
    if forward.masks_pred is not None and targets.masks_gt is not None:
        comps["l_mask"] = ad.binary_cross_entropy(
            forward.masks_pred, ad.constant(targets.masks_gt)
        )
    else:
        comps["l_mask"] = ad.constant(0.0)
    comps["l_pix"] = ad.l1_loss(forward.fake_images, ad.constant(targets.images))
    comps["l_gan_img"] = _lsgan_toward(forward.d_fake_scores, 1.0)
    comps["l_gan_obj"] = _lsgan_toward(forward.d_obj_fake_scores, 1.0)
    comps["l_ac"] = ad.softmax_cross_entropy(forward.obj_logits_fake, targets.labels)

    for name, t in comps.items():
        if np.isnan(t.data).any():
            raise NanLossError(name)

    w = weights
    total = ad.scale(comps["l_box"], w.w_box)
    for name, factor in (
        ("l_mask", w.w_mask), ("l_pix", w.w_pix), ("l_gan_img", w.w_gan_img),
        ("l_gan_obj", w.w_gan_obj), ("l_ac", w.w_ac),
    ):
        total = ad.add(total, ad.scale(comps[name], factor))
    return total, comps


# ---------------------------------------------------------------------------
# forward plumbing


def _layout_masks(batch: Batch) -> list[list[Tensor]]:
    """Teacher-forced layout masks: ground truth where available, otherwise
    a full-box fill (the no-mask datasets use box layouts)."""
    out = []
    for masks in batch.gt_masks:
        out.append(
            [
                ad.constant(m) if m is not None else ad.constant(np.ones((1, 16, 16)))
                for m in masks
            ]
        )
    return out


def _predicted_layout_inputs(
    batch: Batch, boxes_pred: Tensor, masks_pred: Optional[Tensor]
) -> tuple[list[list[BoundingBox]], list[list[Tensor]]]:
    """Self-predicted layouts: predicted boxes enter as plain coordinates
    (no gradient through warping), predicted mask values keep gradients."""
    boxes_out, masks_out = [], []
    flat = 0
    for boxes in batch.gt_boxes:
        n = len(boxes)
        rows_b, rows_m = [], []
        for k in range(n):
            rows_b.append(boxes_to_list(boxes_pred.data[flat : flat + 1])[0])
            if masks_pred is not None:
                m = ad.take_rows(
                    ad.reshape(masks_pred, (masks_pred.shape[0], 256)), np.array([flat])
                )
                rows_m.append(ad.reshape(m, (1, 16, 16)))
            else:
                rows_m.append(ad.constant(np.ones((1, 16, 16))))
            flat += 1
        boxes_out.append(rows_b)
        masks_out.append(rows_m)
    return boxes_out, masks_out


def generator_forward(
    models: Models, batch: Batch, teacher_forcing: bool = True
) -> tuple[ForwardResults, Tensor, Tensor]:
    """Full generator-side graph; returns forward results plus the matched
    generator/discriminator context embeddings."""
    cfg = models.cfg
    node_vecs, _ = graph_conv(batch.graphs, models.gcn)
    s_gen = pool_context(node_vecs, batch.graphs, models.context, "generator")
    s_disc = pool_context(node_vecs, batch.graphs, models.context, "discriminator")

    real_idx = np.concatenate(batch.graphs.real_nodes)
    real_vecs = ad.take_rows(node_vecs, real_idx)
    boxes_pred = predict_boxes(real_vecs, models.box_head)
    masks_pred = predict_masks(real_vecs, models.mask_head) if batch.has_masks else None

    if teacher_forcing:
        layout_boxes = batch.gt_boxes
        layout_masks = _layout_masks(batch)
    else:
        layout_boxes, layout_masks = _predicted_layout_inputs(batch, boxes_pred, masks_pred)

    layout = compose_layout_batch(
        batch.graphs, node_vecs, layout_boxes, layout_masks,
        cfg.image_size, cfg.image_size,
    )
    fake = generate_image(layout, s_gen, models.generator)
    d_fake = discriminate_image(fake, s_disc, models.d_img)
    fake_crops = _crop_batch(fake, layout_boxes)
    d_obj_scores, obj_logits = discriminate_objects(fake_crops, models.d_obj)

    return (
        ForwardResults(
            boxes_pred=boxes_pred,
            masks_pred=masks_pred,
            fake_images=fake,
            d_fake_scores=d_fake,
            d_obj_fake_scores=d_obj_scores,
            obj_logits_fake=obj_logits,
        ),
        s_gen,
        s_disc,
    )


@dataclass
class Trainer:
    models: Models
    cfg: TrainConfig
    adam_gen: AdamState
    adam_d_img: AdamState
    adam_d_obj: AdamState

    @classmethod
    def build(cls, cfg: TrainConfig, vocab: Vocab) -> "Trainer":
        models = build_models(cfg.model, vocab, seed=cfg.seed)
        d_lr = cfg.d_lr if cfg.d_lr is not None else cfg.lr
        return cls(
            models=models,
            cfg=cfg,
            adam_gen=AdamState(lr=cfg.lr),
            adam_d_img=AdamState(lr=d_lr),
            adam_d_obj=AdamState(lr=d_lr),
        )

    def _all_params(self):
        return (
            self.models.generator_group()
            + self.models.d_img_group()
            + self.models.d_obj_group()
        )

    def train_step(self, batch: Batch, rng: np.random.Generator) -> LossReport:
        """One alternating update: D_img on real/fake/mismatched triplets,
        D_obj on real/fake crops plus classification, then the generator
        through all six weighted losses with both discriminators frozen.

        The generator runs a single forward pass; the discriminator phases
        score its detached output, and the generator phase re-scores the live
        tensors through the freshly updated discriminators.
        """
        models = self.models
        cfg = self.cfg
        real_images = ad.constant(batch.images)
        donors = mismatch_donors(batch.graphs.num_graphs, rng)

        ad.zero_grads(self._all_params())
        node_vecs, _ = graph_conv(batch.graphs, models.gcn)
        s_gen = pool_context(node_vecs, batch.graphs, models.context, "generator")
        real_idx = np.concatenate(batch.graphs.real_nodes)
        real_vecs = ad.take_rows(node_vecs, real_idx)
        boxes_pred = predict_boxes(real_vecs, models.box_head)
        masks_pred = (
            predict_masks(real_vecs, models.mask_head) if batch.has_masks else None
        )

        if cfg.teacher_forcing:
            layout_boxes = batch.gt_boxes
            layout_masks = _layout_masks(batch)
        else:
            layout_boxes, layout_masks = _predicted_layout_inputs(
                batch, boxes_pred, masks_pred
            )

        layout = compose_layout_batch(
            batch.graphs, node_vecs, layout_boxes, layout_masks,
            cfg.model.image_size, cfg.model.image_size,
        )
        fake = generate_image(layout, s_gen, models.generator)
        fake_frozen = fake.detach()

        # ---- phase 1: image discriminator on matched/fake/mismatched triplets
        nv_frozen = node_vecs.detach()
        s_disc_d = pool_context(nv_frozen, batch.graphs, models.context, "discriminator")
        s_mis = ad.take_rows(s_disc_d, donors)
        d_real = discriminate_image(real_images, s_disc_d, models.d_img)
        d_fake = discriminate_image(fake_frozen, s_disc_d, models.d_img)
        d_mis = discriminate_image(real_images, s_mis, models.d_img)
        # mismatched triplets join the fake pool with equal weight
        fake_pool = ad.concat([d_fake, d_mis], axis=0)
        d_img_loss = ad.add(_lsgan_toward(d_real, 1.0), _lsgan_toward(fake_pool, 0.0))
        ad.backward(d_img_loss)
        ad.adam_step(models.d_img_group(), self.adam_d_img)

        # ---- phase 2: object discriminator on real/fake crops + class loss
        real_crops = _crop_batch(real_images, batch.gt_boxes)
        fake_crops_frozen = _crop_batch(fake_frozen, layout_boxes)
        s_real, logits_real = discriminate_objects(real_crops, models.d_obj)
        s_fake, _ = discriminate_objects(fake_crops_frozen, models.d_obj)
        d_obj_loss = ad.add(
            ad.add(_lsgan_toward(s_real, 1.0), _lsgan_toward(s_fake, 0.0)),
            ad.softmax_cross_entropy(logits_real, batch.labels),
        )
        ad.backward(d_obj_loss)
        ad.adam_step(models.d_obj_group(), self.adam_d_obj)

        # ---- phase 3: generator through the six weighted losses
        ad.zero_grads(self._all_params())
        s_disc_live = pool_context(node_vecs, batch.graphs, models.context, "discriminator")
        d_fake_live = discriminate_image(fake, s_disc_live, models.d_img)
        crops_live = _crop_batch(fake, layout_boxes)
        d_obj_live, obj_logits_live = discriminate_objects(crops_live, models.d_obj)
        forward = ForwardResults(
            boxes_pred=boxes_pred,
            masks_pred=masks_pred,
            fake_images=fake,
            d_fake_scores=d_fake_live,
            d_obj_fake_scores=d_obj_live,
            obj_logits_fake=obj_logits_live,
        )
        targets = BatchTargets(
            boxes_gt=batch.boxes_flat,
            masks_gt=(
                np.stack([m for row in batch.gt_masks for m in row])
                if batch.has_masks
                else None
            ),
            images=batch.images,
            labels=batch.labels,
        )
        total, comps = compute_losses(forward, targets, cfg.weights)
        ad.backward(total)
        ad.adam_step(models.generator_group(), self.adam_gen)

        report = {name: comps[name].item() for name in GENERATOR_LOSS_NAMES}
        if not batch.has_masks:
            report.pop("l_mask")
        return LossReport(
            components=report,
            total=total.item(),
            d_img=d_img_loss.item(),
            d_obj=d_obj_loss.item(),
        )


# ---------------------------------------------------------------------------
# evaluation helpers


def predict_probe_boxes(models: Models, graphs: Sequence[SceneGraph]) -> list[list[BoundingBox]]:
    """Predicted boxes for each graph's real nodes (inference path)."""
    out = []
    for g in graphs:
        batch = GraphBatch.from_graphs([g])
        node_vecs, _ = graph_conv(batch, models.gcn)
        real_vecs = ad.take_rows(node_vecs, batch.real_nodes[0])
        boxes = predict_boxes(real_vecs, models.box_head)
        out.append(boxes_to_list(boxes.data))
    return out


def probe_metrics(models: Models, probe: Sequence[tuple[AnnotatedImage, SceneGraph]],
                  vocab: Vocab) -> tuple[float, float]:
    """Pooled relation score and mean IoU of predicted layouts on a probe set."""
    satisfied = 0
    counted = 0
    ious = []
    for img, graph in probe:
        pred = predict_probe_boxes(models, [graph])[0]
        full = [BoundingBox(0, 0, 1, 1)] * len(graph.nodes)
        for local_i, global_i in enumerate(graph.real_node_indices()):
            full[global_i] = pred[local_i]
        s, c = relation_score_counts(graph, full, vocab)
        satisfied += s
        counted += c
        gt = [graph.nodes[i].gt_box for i in graph.real_node_indices()]
        ious.append(avg_iou(pred, gt))
    rel = satisfied / counted if counted else 0.0
    return rel, float(np.mean(ious)) if ious else 0.0


def matched_mismatched_gap(
    models: Models,
    examples: Sequence[tuple[AnnotatedImage, SceneGraph]],
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Mean D_img score on (real image, matched context) vs (real image,
    context of a different scene)."""
    graphs = [g for _, g in examples]
    batch = GraphBatch.from_graphs(graphs)
    images = np.stack([img.image.transpose(2, 0, 1) for img, _ in examples])
    node_vecs, _ = graph_conv(batch, models.gcn)
    s_disc = pool_context(node_vecs, batch, models.context, "discriminator")
    donors = mismatch_donors(len(graphs), rng)
    s_mis = ad.take_rows(s_disc, donors)
    real = ad.constant(images)
    matched = discriminate_image(real, s_disc, models.d_img).data.mean()
    mismatched = discriminate_image(real, s_mis, models.d_img).data.mean()
    return float(matched), float(mismatched)


# ---------------------------------------------------------------------------
# the training loop


def _adam_tensors(prefix: str, state: AdamState) -> dict[str, np.ndarray]:
    out = {}
    for name, arr in state.m.items():
        out[f"adam/{prefix}/m/{name}"] = arr
    for name, arr in state.v.items():
        out[f"adam/{prefix}/v/{name}"] = arr
    return out


def save_trainer_checkpoint(
    trainer: Trainer, path: Path, step: int, rng: np.random.Generator
) -> None:
    tensors = {f"model/{k}": t.data for k, t in trainer.models.all_named().items()}
    for prefix, state in (
        ("gen", trainer.adam_gen), ("d_img", trainer.adam_d_img),
        ("d_obj", trainer.adam_d_obj),
    ):
        tensors.update(_adam_tensors(prefix, state))
    meta = {
        "step": step,
        "train_config": json.loads(trainer.cfg.to_json()),
        "adam_steps": {
            "gen": trainer.adam_gen.step,
            "d_img": trainer.adam_d_img.step,
            "d_obj": trainer.adam_d_obj.step,
        },
        "rng_state": rng.bit_generator.state,
        "vocab": {
            "objects": list(trainer.models.vocab.object_names),
            "predicates": list(trainer.models.vocab.predicate_names),
        },
    }
    save_checkpoint(path, tensors, meta)


def load_trainer_checkpoint(path: Path) -> tuple[Trainer, int, dict]:
    tensors, meta = load_checkpoint(path)
    cfg = TrainConfig.from_json(json.dumps(meta["train_config"]))
    vocab = Vocab(
        tuple(meta["vocab"]["objects"]), tuple(meta["vocab"]["predicates"])
    )
    trainer = Trainer.build(cfg, vocab)
    trainer.models.load_state(
        {k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")}
    )
    for prefix, state in (
        ("gen", trainer.adam_gen), ("d_img", trainer.adam_d_img),
        ("d_obj", trainer.adam_d_obj),
    ):
        state.step = meta["adam_steps"][prefix]
        head = f"adam/{prefix}/"
        for key, arr in tensors.items():
            if key.startswith(head + "m/"):
                state.m[key[len(head) + 2:]] = np.array(arr)
            elif key.startswith(head + "v/"):
                state.v[key[len(head) + 2:]] = np.array(arr)
    return trainer, meta["step"], meta["rng_state"]


def run_training(
    cfg: TrainConfig,
    split: DatasetSplit,
    out_dir,
    probe: Optional[Sequence[tuple[AnnotatedImage, SceneGraph]]] = None,
) -> dict:
    """Train on ``split``, logging one CSV row per step and checkpointing on
    the configured cadence.  Returns paths and the final metrics row.

    The rng stream order per step is fixed (batch indices, flip draws, donor
    draws), which together with checkpointed Adam/rng state makes resumed
    runs bit-identical to uninterrupted ones.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = split.vocab
    if not split.has_masks() and cfg.weights.w_mask != 0.0:
        cfg = replace(cfg, weights=replace(cfg.weights, w_mask=0.0))

    start_step = 0
    if cfg.resume_from:
        trainer, start_step, rng_state = load_trainer_checkpoint(Path(cfg.resume_from))
        rng = np.random.default_rng()
        rng.bit_generator.state = rng_state
        log.info("resumed from %s at step %d", cfg.resume_from, start_step)
    else:
        trainer = Trainer.build(cfg, vocab)
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 7)))

    (out / "model_config.json").write_text(cfg.model.to_json())
    (out / "train_config.json").write_text(cfg.to_json())

    metrics_path = out / "metrics.csv"
    mode = "a" if (cfg.resume_from and metrics_path.exists()) else "w"
    n = len(split.examples)
    last_good: Optional[Path] = Path(cfg.resume_from) if cfg.resume_from else None
    last_row: dict = {}

    with open(metrics_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(METRICS_HEADER)
        for step in range(start_step + 1, cfg.steps + 1):
            indices = rng.integers(0, n, size=cfg.batch_size)
            flips = rng.random(cfg.batch_size) < cfg.flip_prob
            batch = make_batch(split, indices, flips, vocab)
            try:
                report = trainer.train_step(batch, rng)
            except (AdamNanError, NanLossError) as exc:
                raise TrainAborted(str(exc), last_good) from exc

            if probe:
                rel, iou = probe_metrics(trainer.models, probe, vocab)
            else:
                rel, iou = float("nan"), float("nan")
            row = {
                "step": step,
                **{k: report.components.get(k, 0.0) for k in GENERATOR_LOSS_NAMES},
                "relation_score": rel,
                "iou": iou,
            }
            writer.writerow([row[k] for k in METRICS_HEADER])
            fh.flush()
            last_row = row
            if step % cfg.checkpoint_every == 0 or step == cfg.steps:
                ck = out / f"ckpt_{step:06d}.ckpt"
                save_trainer_checkpoint(trainer, ck, step, rng)
                last_good = ck
            if step % 50 == 0 or step == cfg.steps:
                log.info("step %d: %s", step, report.components)

    final = out / "ckpt_final.ckpt"
    save_trainer_checkpoint(trainer, final, cfg.steps, rng)
    return {
        "checkpoint": str(final),
        "metrics": str(metrics_path),
        "last_row": last_row,
        "trainer": trainer,
    }
