"""The network stack: graph convolution over scene graphs, the pooled
scene-context embeddings conditioning generator and image discriminator,
box/mask heads, layout composition, the cascaded-refinement image generator,
and the image/object discriminators.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .scenegraph import BoundingBox, SceneGraph, Vocab

GEN_CONTEXT_WIDTH = 8
DISC_CONTEXT_WIDTH = 4


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    gcn_layers: int = 3
    image_size: int = 32
    mask_size: int = 16
    crn_channels: tuple[int, ...] = (48, 32, 24, 16)
    mask_head_channels: tuple[int, ...] = (32, 24, 16, 8)
    d_img_channels: tuple[int, ...] = (16, 24, 32)
    d_img_post_convs: int = 1  # conv blocks applied after the context concat
    # multiplicative context-projection term in the patch scores; the additive
    # concat pathway alone proved too weak to learn image/context matching at
    # desk scale (measured: per-scene matched-vs-mismatched gaps were a coin
    # flip after thousands of steps)
    d_img_projection: bool = True
    d_obj_channels: tuple[int, int] = (16, 32)
    d_obj_fc: int = 64
    d_img_uses_layout: bool = False  # layout input to D_img tends to collapse modes
    noise_dim: int = 0  # optional noise concat for the generator

    def __post_init__(self):
        n_scales = len(self.crn_channels)
        if self.image_size != 4 * 2 ** (n_scales - 1):
            raise ModelError(
                f"image size {self.image_size} incompatible with "
                f"{n_scales} refinement scales (need 4 * 2^(n-1))"
            )
        if self.mask_size != 16:
            raise ModelError("mask head emits fixed 16x16 masks")
        if 2 ** len(self.mask_head_channels) != self.mask_size:
            raise ModelError(
                f"mask head needs {int(np.log2(self.mask_size))} upsample "
                f"stages, got {len(self.mask_head_channels)} channel entries"
            )

    def scales(self) -> list[int]:
        return [4 * 2**i for i in range(len(self.crn_channels))]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        doc = json.loads(text)
        for key in ("crn_channels", "mask_head_channels", "d_img_channels", "d_obj_channels"):
            doc[key] = tuple(doc[key])
        return cls(**doc)


# ---------------------------------------------------------------------------
# parameter containers


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class ParamBlock:
    """Flat named-tensor container with prefix-scoped registration."""

    def __init__(self, prefix: str):
        self.prefix = prefix
        self._tensors: dict[str, Tensor] = {}

    def add(self, name: str, data: np.ndarray) -> Tensor:
        full = f"{self.prefix}/{name}"
        t = ad.parameter(data, name=full)
        self._tensors[full] = t
        return t

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def named(self) -> dict[str, Tensor]:
        return dict(self._tensors)


class GraphConvParams(ParamBlock):
    """Embedding tables plus per-layer edge and node MLPs.

    Each layer's edge MLP maps concatenated [subject, predicate, object]
    vectors through a hidden layer to three D-wide heads (subject candidate,
    updated predicate, object candidate); candidates are averaged per node
    and passed through the node MLP.
    """

    def __init__(self, vocab: Vocab, dim: int, layers: int, rng):
        super().__init__("gcn")
        self.dim = dim
        self.layers = layers
        self.obj_table = self.add("obj_table", rng.normal(size=(vocab.num_objects, dim)))
        self.pred_table = self.add("pred_table", rng.normal(size=(vocab.num_predicates, dim)))
        self.edge = []
        self.node = []
        for i in range(layers):
            d3 = 3 * dim
            self.edge.append(
                {
                    "w1": self.add(f"l{i}/edge_w1", _he(rng, (d3, d3), d3)),
                    "b1": self.add(f"l{i}/edge_b1", np.zeros(d3)),
                    "w_subj": self.add(f"l{i}/edge_w_subj", _he(rng, (d3, dim), d3)),
                    "w_pred": self.add(f"l{i}/edge_w_pred", _he(rng, (d3, dim), d3)),
                    "w_obj": self.add(f"l{i}/edge_w_obj", _he(rng, (d3, dim), d3)),
                    "b_subj": self.add(f"l{i}/edge_b_subj", np.zeros(dim)),
                    "b_pred": self.add(f"l{i}/edge_b_pred", np.zeros(dim)),
                    "b_obj": self.add(f"l{i}/edge_b_obj", np.zeros(dim)),
                }
            )
            self.node.append(
                {
                    "w1": self.add(f"l{i}/node_w1", _he(rng, (dim, dim), dim)),
                    "b1": self.add(f"l{i}/node_b1", np.zeros(dim)),
                    "w2": self.add(f"l{i}/node_w2", _he(rng, (dim, dim), dim)),
                    "b2": self.add(f"l{i}/node_b2", np.zeros(dim)),
                }
            )


class ContextNetParams(ParamBlock):
    """Context FCs applied to sum-pooled object features.

    Output widths are the fixed conditioning widths: 8 on the generator side
    and 4 on the discriminator side.
    """

    def __init__(self, dim: int, rng):
        super().__init__("context")
        self.gen_w = self.add("gen_w", _he(rng, (dim, GEN_CONTEXT_WIDTH), dim))
        self.gen_b = self.add("gen_b", np.zeros(GEN_CONTEXT_WIDTH))
        self.disc_w = self.add("disc_w", _he(rng, (dim, DISC_CONTEXT_WIDTH), dim))
        self.disc_b = self.add("disc_b", np.zeros(DISC_CONTEXT_WIDTH))
        assert self.gen_w.shape[1] == 8 and self.disc_w.shape[1] == 4

    def side(self, which: str) -> tuple[Tensor, Tensor]:
        if which == "generator":
            return self.gen_w, self.gen_b
        if which == "discriminator":
            return self.disc_w, self.disc_b
        raise ModelError(f"unknown context side {which!r}")


class BoxHeadParams(ParamBlock):
    def __init__(self, dim: int, rng):
        super().__init__("box_head")
        self.w1 = self.add("w1", _he(rng, (dim, dim), dim))
        self.b1 = self.add("b1", np.zeros(dim))
        # four scalar heads: x0, y0, width-fraction, height-fraction
        self.heads = [
            (self.add(f"w_{n}", _he(rng, (dim, 1), dim)), self.add(f"b_{n}", np.zeros(1)))
            for n in ("x0", "y0", "wf", "hf")
        ]


class MaskHeadParams(ParamBlock):
    """1x1 feature column upsampled through conv stages to a 16x16 mask."""

    def __init__(self, dim: int, channels: tuple[int, ...], rng):
        super().__init__("mask_head")
        chain = [dim, *channels]
        self.convs = []
        for i in range(len(chain) - 1):
            cin, cout = chain[i], chain[i + 1]
            self.convs.append(
                (
                    self.add(f"conv{i}_w", _he(rng, (cout, cin, 3, 3), cin * 9)),
                    self.add(f"conv{i}_b", np.zeros(cout)),
                )
            )
        self.out_w = self.add("out_w", _he(rng, (1, chain[-1], 3, 3), chain[-1] * 9))
        self.out_b = self.add("out_b", np.zeros(1))
        self.stages = len(self.convs)


class GeneratorParams(ParamBlock):
    """Cascaded refinement blocks, one per scale, plus the RGB head."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__("generator")
        self.cfg = cfg
        d = cfg.embed_dim
        self.blocks = []
        prev = 0
        for i, cout in enumerate(cfg.crn_channels):
            cin = d + GEN_CONTEXT_WIDTH + prev + (cfg.noise_dim if i == 0 else 0)
            self.blocks.append(
                {
                    "w": self.add(f"b{i}/conv_w", _he(rng, (cout, cin, 3, 3), cin * 9)),
                    "b": self.add(f"b{i}/conv_b", np.zeros(cout)),
                    "gamma": self.add(f"b{i}/bn_gamma", np.ones(cout)),
                    "beta": self.add(f"b{i}/bn_beta", np.zeros(cout)),
                }
            )
            prev = cout
        self.out_w = self.add("out_w", _he(rng, (3, prev, 1, 1), prev))
        self.out_b = self.add("out_b", np.zeros(3))


class DImgParams(ParamBlock):
    """Patch discriminator; the context vector joins after the second block."""

    def __init__(self, cfg: ModelConfig, rng):
        super().__init__("d_img")
        c1, c2, c3 = cfg.d_img_channels
        cin0 = 3 + (cfg.embed_dim if cfg.d_img_uses_layout else 0)
        self.conv1 = (self.add("conv1_w", _he(rng, (c1, cin0, 3, 3), cin0 * 9)),
                      self.add("conv1_b", np.zeros(c1)))
        self.conv2 = (self.add("conv2_w", _he(rng, (c2, c1, 3, 3), c1 * 9)),
                      self.add("conv2_b", np.zeros(c2)))
        self.post = []
        cin3 = c2 + DISC_CONTEXT_WIDTH
        for i in range(max(1, cfg.d_img_post_convs)):
            self.post.append(
                (self.add(f"conv3_{i}_w", _he(rng, (c3, cin3, 3, 3), cin3 * 9)),
                 self.add(f"conv3_{i}_b", np.zeros(c3)))
            )
            cin3 = c3
        self.out = (self.add("out_w", _he(rng, (1, c3, 1, 1), c3)),
                    self.add("out_b", np.zeros(1)))
        self.proj = None
        if cfg.d_img_projection:
            self.proj = self.add(
                "proj_w", _he(rng, (DISC_CONTEXT_WIDTH, c3), DISC_CONTEXT_WIDTH) * 0.1
            )
            self.proj_scale = 1.0 / np.sqrt(c3)


class DObjParams(ParamBlock):
    """Object discriminator over 16x16 crops: realism score + class head."""

    def __init__(self, cfg: ModelConfig, vocab: Vocab, rng):
        super().__init__("d_obj")
        c1, c2 = cfg.d_obj_channels
        self.conv1 = (self.add("conv1_w", _he(rng, (c1, 3, 3, 3), 27)),
                      self.add("conv1_b", np.zeros(c1)))
        self.conv2 = (self.add("conv2_w", _he(rng, (c2, c1, 3, 3), c1 * 9)),
                      self.add("conv2_b", np.zeros(c2)))
        flat = c2 * 4 * 4
        self.fc = (self.add("fc_w", _he(rng, (flat, cfg.d_obj_fc), flat)),
                   self.add("fc_b", np.zeros(cfg.d_obj_fc)))
        self.score = (self.add("score_w", _he(rng, (cfg.d_obj_fc, 1), cfg.d_obj_fc)),
                      self.add("score_b", np.zeros(1)))
        self.classify = (
            self.add("class_w", _he(rng, (cfg.d_obj_fc, vocab.num_objects), cfg.d_obj_fc)),
            self.add("class_b", np.zeros(vocab.num_objects)),
        )


@dataclass
class Models:
    cfg: ModelConfig
    vocab: Vocab
    gcn: GraphConvParams
    context: ContextNetParams
    box_head: BoxHeadParams
    mask_head: MaskHeadParams
    generator: GeneratorParams
    d_img: DImgParams
    d_obj: DObjParams

    def generator_group(self) -> list[Tensor]:
        """Everything updated by the generator-side losses, including the
        generator-side context FC."""
        return (
            self.gcn.tensors()
            + [self.context.gen_w, self.context.gen_b]
            + self.box_head.tensors()
            + self.mask_head.tensors()
            + self.generator.tensors()
        )

    def d_img_group(self) -> list[Tensor]:
        """D_img plus the discriminator-side context FC it conditions on."""
        return self.d_img.tensors() + [self.context.disc_w, self.context.disc_b]

    def d_obj_group(self) -> list[Tensor]:
        return self.d_obj.tensors()

    def all_named(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for block in (self.gcn, self.context, self.box_head, self.mask_head,
                      self.generator, self.d_img, self.d_obj):
            out.update(block.named())
        return out

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        named = self.all_named()
        missing = set(named) - set(tensors)
        if missing:
            raise ModelError(f"checkpoint missing tensors: {sorted(missing)[:4]}...")
        for name, t in named.items():
            if tuple(tensors[name].shape) != t.shape:
                raise ModelError(
                    f"{name}: checkpoint shape {tensors[name].shape} != {t.shape}"
                )
            t.data = np.array(tensors[name], dtype=np.float64)


def build_models(cfg: ModelConfig, vocab: Vocab, seed: int = 0) -> Models:
    streams = [
        np.random.default_rng(np.random.SeedSequence((seed, i))) for i in range(7)
    ]
    return Models(
        cfg=cfg,
        vocab=vocab,
        gcn=GraphConvParams(vocab, cfg.embed_dim, cfg.gcn_layers, streams[0]),
        context=ContextNetParams(cfg.embed_dim, streams[1]),
        box_head=BoxHeadParams(cfg.embed_dim, streams[2]),
        mask_head=MaskHeadParams(cfg.embed_dim, cfg.mask_head_channels, streams[3]),
        generator=GeneratorParams(cfg, streams[4]),
        d_img=DImgParams(cfg, streams[5]),
        d_obj=DObjParams(cfg, vocab, streams[6]),
    )


# ---------------------------------------------------------------------------
# graph batching


@dataclass
class GraphBatch:
    """Several graphs flattened into one node/edge table."""

    graphs: list[SceneGraph]
    node_category: np.ndarray  # (N,)
    subj: np.ndarray  # (E,) global node ids
    pred: np.ndarray  # (E,)
    obj: np.ndarray  # (E,)
    node_offsets: list[int]
    real_nodes: list[np.ndarray]  # per graph, global indices of non-anchor nodes

    @classmethod
    def from_graphs(cls, graphs: Sequence[SceneGraph]) -> "GraphBatch":
        cats, subj, pred, obj, offsets, real = [], [], [], [], [], []
        offset = 0
        for g in graphs:
            offsets.append(offset)
            cats.extend(n.category_id for n in g.nodes)
            for t in g.triples:
                subj.append(offset + t.subject)
                pred.append(t.predicate_id)
                obj.append(offset + t.object)
            real.append(
                np.array([offset + i for i in g.real_node_indices()], dtype=np.int64)
            )
            offset += len(g.nodes)
        return cls(
            graphs=list(graphs),
            node_category=np.array(cats, dtype=np.int64),
            subj=np.array(subj, dtype=np.int64),
            pred=np.array(pred, dtype=np.int64),
            obj=np.array(obj, dtype=np.int64),
            node_offsets=offsets,
            real_nodes=real,
        )

    @property
    def num_nodes(self) -> int:
        return len(self.node_category)

    @property
    def num_graphs(self) -> int:
        return len(self.graphs)


def _mlp2(x: Tensor, w1, b1, w2, b2) -> Tensor:
    return ad.linear(ad.relu(ad.linear(x, w1, b1)), w2, b2)


def graph_conv(batch: GraphBatch, params: GraphConvParams) -> tuple[Tensor, Tensor]:
    """Run the message-passing stack; returns per-node and per-edge vectors.

    Every node must be touched by at least one edge (guaranteed when graphs
    carry the image anchor); an isolated node raises.
    """
    if len(batch.subj) == 0:
        raise ModelError("graph batch has no edges")
    node_vecs = ad.take_rows(params.obj_table, batch.node_category)
    pred_vecs = ad.take_rows(params.pred_table, batch.pred)
    n = batch.num_nodes
    dst = np.concatenate([batch.subj, batch.obj])

    for layer in range(params.layers):
        e = params.edge[layer]
        s_in = ad.take_rows(node_vecs, batch.subj)
        o_in = ad.take_rows(node_vecs, batch.obj)
        h = ad.concat([s_in, pred_vecs, o_in], axis=1)
        h = ad.relu(ad.linear(h, e["w1"], e["b1"]))
        cand_s = ad.linear(h, e["w_subj"], e["b_subj"])
        new_pred = ad.linear(h, e["w_pred"], e["b_pred"])
        cand_o = ad.linear(h, e["w_obj"], e["b_obj"])

        pooled = ad.scatter_mean(ad.concat([cand_s, cand_o], axis=0), dst, n)
        nd = params.node[layer]
        node_vecs = _mlp2(pooled, nd["w1"], nd["b1"], nd["w2"], nd["b2"])
        pred_vecs = new_pred
    return node_vecs, pred_vecs


def pool_context(
    node_vecs: Tensor, batch: GraphBatch, params: ContextNetParams, side: str
) -> Tensor:
    """Sum-pool each graph's object vectors and project with the side FC.

    Sum pooling uses an order-invariant exact sum, so any permutation of the
    object set yields a bit-identical context embedding.  The anchor node is
    excluded: the context describes the object set.
    """
    rows = []
    for idx in batch.real_nodes:
        if len(idx) == 0:
            raise ModelError("graph has no real objects to pool")
        seg = ad.take_rows(node_vecs, idx)
        rows.append(ad.reshape(ad.sum_rows_exact(seg), (1, node_vecs.shape[1])))
    pooled = ad.concat(rows, axis=0) if len(rows) > 1 else rows[0]
    w, b = params.side(side)
    return ad.linear(pooled, w, b)


def predict_boxes(node_vecs: Tensor, params: BoxHeadParams) -> Tensor:
    """Per-node (x0, y0, x1, y1) with validity guaranteed by construction:
    four sigmoids read as (x0, y0, w, h) with x1 = x0 + w*(1-x0) and y1
    likewise.  Small clamps keep strict inequalities even when a sigmoid
    saturates to exactly 0 or 1 in float64.
    """
    h = ad.relu(ad.linear(node_vecs, params.w1, params.b1))
    (wx0, bx0), (wy0, by0), (wwf, bwf), (whf, bhf) = params.heads
    eps = 1e-4
    x0 = ad.clamp(ad.sigmoid(ad.linear(h, wx0, bx0)), 0.0, 1.0 - eps)
    y0 = ad.clamp(ad.sigmoid(ad.linear(h, wy0, by0)), 0.0, 1.0 - eps)
    wf = ad.clamp(ad.sigmoid(ad.linear(h, wwf, bwf)), eps, 1.0)
    hf = ad.clamp(ad.sigmoid(ad.linear(h, whf, bhf)), eps, 1.0)

    def extend(lo: Tensor, frac: Tensor) -> Tensor:
        span = ad.add_scalar(ad.scale(lo, -1.0), 1.0)  # 1 - lo
        return ad.add(lo, ad.mul(frac, span))

    return ad.concat([x0, y0, extend(x0, wf), extend(y0, hf)], axis=1)


def boxes_to_list(box_rows: np.ndarray) -> list[BoundingBox]:
    return [BoundingBox(*row) for row in np.asarray(box_rows)]


def predict_masks(node_vecs: Tensor, params: MaskHeadParams) -> Tensor:
    """(N, 1, 16, 16) soft masks via an upsampling conv stack + sigmoid."""
    n, d = node_vecs.shape
    x = ad.reshape(node_vecs, (n, d, 1, 1))
    for w, b in params.convs:
        x = ad.relu(ad.conv2d(ad.upsample2(x), w, b))
    logits = ad.conv2d(x, params.out_w, params.out_b)
    return ad.sigmoid(logits)


def compose_layout(
    boxes: Sequence[BoundingBox],
    masks: Sequence[Tensor],
    vecs: Sequence[Tensor],
    height: int,
    width: int,
) -> Tensor:
    """Sum of per-object contributions: each (1,16,16) mask warped into its
    box and broadcast against the object's embedding vector.  Pixels outside
    every box stay exactly zero."""
    if not (len(boxes) == len(masks) == len(vecs)):
        raise ModelError(
            f"layout needs aligned inputs, got {len(boxes)}/{len(masks)}/{len(vecs)}"
        )
    layout: Optional[Tensor] = None
    for box, mask, vec in zip(boxes, masks, vecs):
        warped = ad.grid_sample_into_box(mask, box.as_tuple(), height, width)
        contrib = ad.vec_times_map(vec, warped)
        layout = contrib if layout is None else ad.add(layout, contrib)
    if layout is None:
        raise ModelError("layout with zero objects")
    return layout


def compose_layout_batch(
    batch: GraphBatch,
    node_vecs: Tensor,
    boxes_per_graph: Sequence[Sequence[BoundingBox]],
    masks_per_graph: Sequence[Sequence[Tensor]],
    height: int,
    width: int,
) -> Tensor:
    """(B, D, H, W) stack of per-graph layouts over the real (non-anchor)
    nodes."""
    d = node_vecs.shape[1]
    parts = []
    for gi, idx in enumerate(batch.real_nodes):
        vecs = [
            ad.reshape(ad.take_rows(node_vecs, np.array([k])), (d,)) for k in idx
        ]
        layout = compose_layout(
            boxes_per_graph[gi], masks_per_graph[gi], vecs, height, width
        )
        parts.append(ad.reshape(layout, (1, d, height, width)))
    return ad.concat(parts, axis=0) if len(parts) > 1 else parts[0]


def generate_image(
    layout: Tensor, s: Tensor, params: GeneratorParams, noise: Optional[Tensor] = None
) -> Tensor:
    """Cascade of refine blocks conditioned on the layout pyramid and the
    tiled context embedding at every scale; sigmoid RGB output."""
    cfg = params.cfg
    if s.shape[1] != GEN_CONTEXT_WIDTH:
        raise ModelError(f"generator context must be width 8, got {s.shape[1]}")
    scales = cfg.scales()
    if layout.shape[2] != scales[-1]:
        raise ModelError(
            f"layout spatial size {layout.shape[2]} != image size {scales[-1]}"
        )

    pyramid = {scales[-1]: layout}
    cur = layout
    for res in reversed(scales[:-1]):
        cur = ad.avgpool2(cur)
        pyramid[res] = cur

    feats: Optional[Tensor] = None
    for i, res in enumerate(scales):
        parts = [pyramid[res], ad.tile_spatial(s, res, res)]
        if i == 0 and noise is not None:
            parts.append(noise)
        if feats is not None:
            parts.append(ad.upsample2(feats))
        x = ad.concat(parts, axis=1)
        blk = params.blocks[i]
        x = ad.conv2d(x, blk["w"], blk["b"])
        x = ad.batch_norm(x, blk["gamma"], blk["beta"])
        feats = ad.leaky_relu(x)
    rgb = ad.conv2d(feats, params.out_w, params.out_b)
    return ad.sigmoid(rgb)


def discriminate_image(
    image: Tensor, s: Tensor, params: DImgParams, layout: Optional[Tensor] = None
) -> Tensor:
    """Patch realism scores (B, 1, H/8, W/8), context-conditioned after the
    second conv block.

    When enabled, a projection term <proj(s), features> joins each patch
    score; the inner product gives the discriminator a direct handle on
    image/context agreement that the concatenation alone struggles to learn.
    """
    if s.shape[1] != DISC_CONTEXT_WIDTH:
        raise ModelError(f"discriminator context must be width 4, got {s.shape[1]}")
    x = image
    if layout is not None:
        x = ad.concat([image, layout], axis=1)
    x = ad.avgpool2(ad.leaky_relu(ad.conv2d(x, *params.conv1)))
    x = ad.avgpool2(ad.leaky_relu(ad.conv2d(x, *params.conv2)))
    tiled = ad.tile_spatial(s, x.shape[2], x.shape[3])
    x = ad.concat([x, tiled], axis=1)
    for w, b in params.post:
        x = ad.leaky_relu(ad.conv2d(x, w, b))
    x = ad.avgpool2(x)
    score = ad.conv2d(x, *params.out)
    if params.proj is not None:
        proj = ad.matmul(s, params.proj)  # (B, c3)
        proj_map = ad.tile_spatial(proj, x.shape[2], x.shape[3])
        match = ad.sum_axis(ad.mul(x, proj_map), axis=1, keepdims=True)
        score = ad.add(score, ad.scale(match, params.proj_scale))
    return score


def discriminate_objects(
    crops: Tensor, params: DObjParams
) -> tuple[Tensor, Tensor]:
    """(realism score (n,1), class logits (n,|vocab|)) for 16x16 crops."""
    if crops.shape[0] == 0:
        raise ModelError("empty crop batch")
    x = ad.avgpool2(ad.leaky_relu(ad.conv2d(crops, *params.conv1)))
    x = ad.avgpool2(ad.leaky_relu(ad.conv2d(x, *params.conv2)))
    n = x.shape[0]
    flat = ad.reshape(x, (n, x.shape[1] * x.shape[2] * x.shape[3]))
    h = ad.leaky_relu(ad.linear(flat, *params.fc))
    return ad.linear(h, *params.score), ad.linear(h, *params.classify)
