"""Training corpora: the shapes-world generator, synthetic graph
construction from 2-D annotations, VG-style frequency preprocessing,
COCO-style ingestion, and the on-disk split format (split.json + P6 rasters).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .scenegraph import (
    IN_IMAGE_PREDICATE,
    BinaryMask,
    BoundingBox,
    ObjectNode,
    RelationTriple,
    SceneGraph,
    SPATIAL_PREDICATE_NAMES,
    Vocab,
    parse_scene_graph,
    serialize_scene_graph,
    spatial_predicate,
)

MASK_SIZE = 16


class DatasetError(ValueError):
    pass


class EmptySplitError(DatasetError):
    """Every image was filtered away; distinct from malformed input."""


@dataclass(eq=False)
class AnnotatedObject:
    category_id: int
    box: BoundingBox
    mask: Optional[BinaryMask] = None


@dataclass(eq=False)
class AnnotatedImage:
    """H x W x 3 float raster in [0,1] plus its object annotations."""

    image: np.ndarray
    objects: list[AnnotatedObject]

    def __post_init__(self):
        img = np.asarray(self.image, dtype=np.float64)
        if img.ndim != 3 or img.shape[2] != 3:
            raise DatasetError(f"image must be HxWx3, got {img.shape}")
        if img.min() < 0.0 or img.max() > 1.0:
            raise DatasetError("image values must lie in [0,1]")
        self.image = img


@dataclass(eq=False)
class DatasetSplit:
    examples: list[tuple[AnnotatedImage, SceneGraph]]
    vocab: Vocab
    name: str

    def __post_init__(self):
        for i, (_, graph) in enumerate(self.examples):
            graph.validate(self.vocab)
            if not graph.triples:
                raise DatasetError(f"example {i}: graph has no triples")

    def has_masks(self) -> bool:
        return any(
            obj.mask is not None for img, _ in self.examples for obj in img.objects
        )


@dataclass(frozen=True)
class ShapesWorldConfig:
    seed: int = 0
    scenes: int = 100
    image_size: int = 32
    min_objects: int = 3
    max_objects: int = 8
    shapes: tuple[str, ...] = ("circle", "square", "triangle")
    colors: tuple[tuple[str, tuple[float, float, float]], ...] = (
        ("red", (0.85, 0.1, 0.1)),
        ("green", (0.1, 0.75, 0.15)),
        ("blue", (0.15, 0.25, 0.9)),
        ("yellow", (0.9, 0.85, 0.1)),
        ("magenta", (0.85, 0.15, 0.8)),
        ("cyan", (0.1, 0.8, 0.85)),
    )

    def __post_init__(self):
        if self.image_size < 8:
            raise DatasetError("image size must be >= 8")
        if not (1 <= self.min_objects <= self.max_objects <= 16):
            raise DatasetError("object count range must lie within 1..16")

    def vocab(self) -> Vocab:
        names = [f"{cname} {shape}" for cname, _ in self.colors for shape in self.shapes]
        return Vocab.build(names, list(SPATIAL_PREDICATE_NAMES))


@dataclass(frozen=True)
class SceneRejected:
    """Typed rejection outcome of synthetic graph construction."""

    reason: str
    surviving_objects: int


# ---------------------------------------------------------------------------
# rasterization

_SUBSAMPLES = 4  # 4x4 subsamples per pixel; painted at >= 3/16 inside


def _shape_indicator(kind: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if kind == "square":
        return np.ones_like(u, dtype=bool)
    if kind == "circle":
        return ((u - 0.5) / 0.5) ** 2 + ((v - 0.5) / 0.5) ** 2 <= 1.0
    if kind == "triangle":  # apex top-center, base along the bottom edge
        return np.abs(u - 0.5) <= v / 2
    raise DatasetError(f"unknown shape kind {kind!r}")


def _box_pixel_range(lo: float, hi: float, size: int) -> np.ndarray:
    centers = (np.arange(size) + 0.5) / size
    return np.nonzero((centers >= lo) & (centers < hi))[0]


def rasterize_shape(
    kind: str,
    color: tuple[float, float, float],
    box: BoundingBox,
    image_size: int,
) -> tuple[BinaryMask, np.ndarray, tuple[np.ndarray, np.ndarray]]:
    """Binary-coverage rasterization of a shape into its box.

    Returns (16x16 storage mask, RGB patch over the box's pixel grid, and the
    (rows, cols) pixel indices the patch covers).  A pixel is painted when at
    least 3 of its 4x4 subsamples fall inside the shape; no anti-aliasing.
    Boxes spanning fewer than 2x2 pixels are degenerate.
    """
    rows = _box_pixel_range(box.y0, box.y1, image_size)
    cols = _box_pixel_range(box.x0, box.x1, image_size)
    if len(rows) < 2 or len(cols) < 2:
        raise DatasetError(
            f"degenerate shape: box {box.as_tuple()} spans "
            f"{len(rows)}x{len(cols)} pixels at size {image_size}"
        )

    counts = np.zeros((len(rows), len(cols)), dtype=np.int64)
    sub = (np.arange(_SUBSAMPLES) + 0.5) / _SUBSAMPLES / image_size
    for dy in sub:
        for dx in sub:
            py = rows / image_size + dy
            px = cols / image_size + dx
            u = (px[None, :] - box.x0) / (box.x1 - box.x0)
            v = (py[:, None] - box.y0) / (box.y1 - box.y0)
            counts += _shape_indicator(
                kind,
                np.broadcast_to(u, counts.shape),
                np.broadcast_to(v, counts.shape),
            )
    local = counts >= 3

    # storage mask evaluated directly on the 16x16 local grid
    g = (np.arange(MASK_SIZE) + 0.5) / MASK_SIZE
    scounts = np.zeros((MASK_SIZE, MASK_SIZE), dtype=np.int64)
    ssub = (np.arange(_SUBSAMPLES) + 0.5) / _SUBSAMPLES / MASK_SIZE - 0.5 / MASK_SIZE
    for dy in ssub:
        for dx in ssub:
            u = g[None, :] + dx
            v = g[:, None] + dy
            scounts += _shape_indicator(
                kind,
                np.broadcast_to(u, scounts.shape),
                np.broadcast_to(v, scounts.shape),
            )
    mask16 = BinaryMask.from_array(scounts >= 3)

    patch = local[:, :, None] * np.asarray(color, dtype=np.float64)[None, None, :]
    return mask16, patch, (rows, cols)


# ---------------------------------------------------------------------------
# synthetic graph construction


def build_synthetic_graph(
    objects: Sequence[tuple],
    rng: np.random.Generator,
    image_area_filter: float = 0.02,
    count_range: tuple[int, int] = (3, 8),
    triples_per_object: int = 2,
    vocab: Optional[Vocab] = None,
) -> Union[SceneGraph, SceneRejected]:
    """Turn 2-D annotations into a scene graph of geometric relations.

    ``objects`` holds (category_id, box) or (category_id, box, mask) tuples.
    Objects covering less than ``image_area_filter`` of the image are
    dropped; scenes whose surviving count falls outside ``count_range`` are
    rejected.  Each kept object samples up to ``triples_per_object`` partners
    without replacement and labels the pair with the shared spatial
    predicate, then the image anchor node and its in-image edges are
    appended.  Predicate ids resolve against ``vocab`` (default: the standard
    in-image + six-spatial layout).
    """
    if vocab is None:
        vocab = Vocab.build([], list(SPATIAL_PREDICATE_NAMES))
    spatial_ids = {name: vocab.predicate_id(name) for name in SPATIAL_PREDICATE_NAMES}
    in_image_id = vocab.predicate_id(IN_IMAGE_PREDICATE)

    kept = []
    for entry in objects:
        cid, box = entry[0], entry[1]
        mask = entry[2] if len(entry) > 2 else None
        if box.area < image_area_filter:
            continue
        kept.append((int(cid), box, mask))

    lo, hi = count_range
    if not (lo <= len(kept) <= hi):
        return SceneRejected(
            reason=f"{len(kept)} objects after area filter, need {lo}..{hi}",
            surviving_objects=len(kept),
        )

    nodes = [ObjectNode(category_id=c, gt_box=b, gt_mask=m) for c, b, m in kept]
    triples = []
    n = len(nodes)
    for i in range(n):
        others = np.array([j for j in range(n) if j != i])
        k = min(triples_per_object, len(others))
        partners = rng.choice(others, size=k, replace=False) if k else []
        for j in partners:
            pred = spatial_predicate(nodes[i].gt_box, nodes[int(j)].gt_box)
            triples.append(
                RelationTriple(
                    subject=i,
                    predicate_id=spatial_ids[pred.value],
                    object=int(j),
                )
            )

    anchor_idx = n
    nodes.append(ObjectNode(category_id=0, gt_box=BoundingBox(0.0, 0.0, 1.0, 1.0)))
    for i in range(n):
        triples.append(
            RelationTriple(subject=i, predicate_id=in_image_id, object=anchor_idx)
        )
    return SceneGraph(nodes=tuple(nodes), triples=tuple(triples))


def _scene_rng(seed: int, index: int) -> np.random.Generator:
    # per-scene sub-streams: parallel and serial generation agree
    return np.random.default_rng(np.random.SeedSequence((seed, index)))


def generate_shapes_world(cfg: ShapesWorldConfig) -> DatasetSplit:
    """Deterministic toy dataset: colored shapes on a mid-gray background
    with exact boxes/masks and relation graphs built from them."""
    vocab = cfg.vocab()
    size = cfg.image_size
    examples = []
    for scene_idx in range(cfg.scenes):
        rng = _scene_rng(cfg.seed, scene_idx)
        n_objects = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        canvas = np.full((size, size, 3), 0.5)
        annotated = []
        graph_objects = []
        lo = max(0.18, 2.5 / size)  # at least ~2 pixel centers per axis
        for _ in range(n_objects):
            shape = cfg.shapes[int(rng.integers(len(cfg.shapes)))]
            color_name, color = cfg.colors[int(rng.integers(len(cfg.colors)))]
            w = float(rng.uniform(lo, 0.5))
            h = float(rng.uniform(lo, 0.5))
            x0 = float(rng.uniform(0.0, 1.0 - w))
            y0 = float(rng.uniform(0.0, 1.0 - h))
            box = BoundingBox(x0, y0, x0 + w, y0 + h)
            mask16, patch, (rows, cols) = rasterize_shape(shape, color, box, size)
            local = patch.sum(axis=2) > 0
            region = canvas[np.ix_(rows, cols)]
            region[local] = patch[local]
            canvas[np.ix_(rows, cols)] = region
            cid = vocab.object_id(f"{color_name} {shape}")
            annotated.append(AnnotatedObject(category_id=cid, box=box, mask=mask16))
            graph_objects.append((cid, box, mask16))

        graph = build_synthetic_graph(
            graph_objects,
            rng=rng,
            count_range=(cfg.min_objects, cfg.max_objects),
            vocab=vocab,
        )
        assert isinstance(graph, SceneGraph)  # sampled areas always pass the filter
        # quantize to 8 bits so in-memory pixels equal the PPM on disk
        canvas = np.round(canvas * 255.0) / 255.0
        examples.append((AnnotatedImage(image=canvas, objects=annotated), graph))
    return DatasetSplit(examples=examples, vocab=vocab, name=f"shapes-{cfg.seed}")


# ---------------------------------------------------------------------------
# VG-style preprocessing


def preprocess_vg_style(
    raw: Sequence[tuple],
    object_min_count: int = 2000,
    predicate_min_count: int = 500,
    object_count_range: tuple[int, int] = (3, 30),
) -> DatasetSplit:
    """Frequency-threshold preprocessing of (image, objects, triples) records.

    ``raw`` entries are (image HxWx3, [(name, BoundingBox)...],
    [(subj_idx, predicate_name, obj_idx)...]).  The vocabulary keeps object
    and predicate categories occurring at least ``object_min_count`` /
    ``predicate_min_count`` times; images survive with an object count inside
    ``object_count_range`` and at least one surviving relationship.
    """
    if not raw:
        raise DatasetError("empty input corpus")

    obj_counts: dict[str, int] = {}
    pred_counts: dict[str, int] = {}
    for _, objects, triples in raw:
        for name, _ in objects:
            obj_counts[name] = obj_counts.get(name, 0) + 1
        for _, pname, _ in triples:
            pred_counts[pname] = pred_counts.get(pname, 0) + 1

    kept_objects = sorted(n for n, c in obj_counts.items() if c >= object_min_count)
    kept_preds = sorted(n for n, c in pred_counts.items() if c >= predicate_min_count)
    vocab = Vocab.build(kept_objects, kept_preds)

    lo, hi = object_count_range
    examples = []
    for image, objects, triples in raw:
        remap = {}
        nodes = []
        for idx, (name, box) in enumerate(objects):
            if name in obj_counts and obj_counts[name] >= object_min_count:
                remap[idx] = len(nodes)
                nodes.append(ObjectNode(category_id=vocab.object_id(name), gt_box=box))
        new_triples = []
        for s, pname, o in triples:
            if s in remap and o in remap and pred_counts.get(pname, 0) >= predicate_min_count:
                new_triples.append(
                    RelationTriple(remap[s], vocab.predicate_id(pname), remap[o])
                )
        if not (lo <= len(nodes) <= hi) or not new_triples:
            continue

        anchor = len(nodes)
        nodes.append(ObjectNode(category_id=0, gt_box=BoundingBox(0.0, 0.0, 1.0, 1.0)))
        in_image = vocab.predicate_id(IN_IMAGE_PREDICATE)
        for i in range(anchor):
            new_triples.append(RelationTriple(i, in_image, anchor))

        annotated = [
            AnnotatedObject(category_id=n.category_id, box=n.gt_box)
            for n in nodes[:-1]
        ]
        examples.append(
            (
                AnnotatedImage(image=image, objects=annotated),
                SceneGraph(nodes=tuple(nodes), triples=tuple(new_triples)),
            )
        )

    if not examples:
        raise EmptySplitError(
            f"no images survived filtering (vocab kept {len(kept_objects)} objects, "
            f"{len(kept_preds)} predicates)"
        )
    return DatasetSplit(examples=examples, vocab=vocab, name="vg-style")


# ---------------------------------------------------------------------------
# COCO-style ingestion


def _nearest_resample_mask(mask: np.ndarray, out: int = MASK_SIZE) -> BinaryMask:
    h, w = mask.shape
    ys = np.minimum((np.arange(out) + 0.5) * h / out, h - 1).astype(int)
    xs = np.minimum((np.arange(out) + 0.5) * w / out, w - 1).astype(int)
    return BinaryMask.from_array(mask[np.ix_(ys, xs)])


def ingest_coco_style(
    doc: dict,
    seed: int = 0,
    image_dir: Optional[Path] = None,
    canvas_size: int = 32,
    image_area_filter: float = 0.02,
    count_range: tuple[int, int] = (3, 8),
    triples_per_object: int = 2,
) -> DatasetSplit:
    """Ingest the simplified annotation mirror
    {"images":[{"id","width","height","objects":[{"category","bbox":[x,y,w,h]
    pixels, "mask": optional}], "image_file": optional}]} and build synthetic
    graphs with the standard filters.  Rasters are loaded from image_file
    when present, else a mid-gray canvas stands in."""
    if "images" not in doc:
        raise DatasetError("annotation document needs an 'images' list")

    categories = sorted(
        {
            obj["category"]
            for entry in doc["images"]
            for obj in entry.get("objects", [])
        }
    )
    vocab = Vocab.build(categories, list(SPATIAL_PREDICATE_NAMES))

    examples = []
    for idx, entry in enumerate(doc["images"]):
        img_id = entry.get("id", idx)
        width, height = entry.get("width"), entry.get("height")
        if not width or not height:
            raise DatasetError(f"image {img_id}: missing width/height")
        objects = []
        for j, obj in enumerate(entry.get("objects", [])):
            x, y, w, h = obj["bbox"]
            if w <= 0 or h <= 0:
                raise DatasetError(f"image {img_id} object {j}: empty bbox {obj['bbox']}")
            box = BoundingBox(
                max(0.0, x / width),
                max(0.0, y / height),
                min(1.0, (x + w) / width),
                min(1.0, (y + h) / height),
            )
            mask = None
            if obj.get("mask") is not None:
                m = obj["mask"]
                arr = np.array(m["data"], dtype=np.uint8).reshape(m["h"], m["w"])
                mask = _nearest_resample_mask(arr)
            objects.append((vocab.object_id(obj["category"]), box, mask))

        rng = _scene_rng(seed, idx)
        graph = build_synthetic_graph(
            objects,
            rng=rng,
            image_area_filter=image_area_filter,
            count_range=count_range,
            triples_per_object=triples_per_object,
            vocab=vocab,
        )
        if isinstance(graph, SceneRejected):
            continue

        if entry.get("image_file") and image_dir is not None:
            raster = read_ppm(Path(image_dir) / entry["image_file"])
        else:
            raster = np.full((canvas_size, canvas_size, 3), 0.5)
        annotated = [
            AnnotatedObject(category_id=n.category_id, box=n.gt_box, mask=n.gt_mask)
            for n in graph.nodes
            if n.category_id != 0
        ]
        examples.append((AnnotatedImage(image=raster, objects=annotated), graph))

    if not examples:
        raise EmptySplitError("no images survived graph construction")
    return DatasetSplit(examples=examples, vocab=vocab, name="coco-style")


# ---------------------------------------------------------------------------
# portable pixmap + split persistence


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6, 8 bits per channel."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DatasetError(f"P6 needs HxWx3, got {img.shape}")
    h, w, _ = img.shape
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P6" or parts[3] != b"255":
        raise DatasetError(f"{path}: not an 8-bit binary P6 file")
    w, h = int(parts[1]), int(parts[2])
    pixels = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8)
    if pixels.size != w * h * 3:
        raise DatasetError(f"{path}: truncated pixel data")
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


def save_split(split: DatasetSplit, out_dir) -> Path:
    """Write split.json (index + vocab + graphs with boxes/masks inline)
    plus one P6 raster per example."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for i, (img, graph) in enumerate(split.examples):
        fname = f"scene_{i:05d}.ppm"
        write_ppm(out / fname, img.image)
        index.append(
            {"image": fname, "graph": json.loads(serialize_scene_graph(graph, split.vocab))}
        )
    doc = {
        "name": split.name,
        "vocab": {
            "objects": list(split.vocab.object_names),
            "predicates": list(split.vocab.predicate_names),
        },
        "examples": index,
    }
    path = out / "split.json"
    path.write_text(json.dumps(doc, sort_keys=True, indent=1))
    return path


def load_split(in_dir) -> DatasetSplit:
    root = Path(in_dir)
    doc = json.loads((root / "split.json").read_text())
    vocab = Vocab(
        tuple(doc["vocab"]["objects"]), tuple(doc["vocab"]["predicates"])
    )
    examples = []
    for entry in doc["examples"]:
        graph = parse_scene_graph(json.dumps(entry["graph"]), vocab)
        image = read_ppm(root / entry["image"])
        objects = [
            AnnotatedObject(category_id=n.category_id, box=n.gt_box, mask=n.gt_mask)
            for n in graph.nodes
            if n.category_id != 0
        ]
        examples.append((AnnotatedImage(image=image, objects=objects), graph))
    return DatasetSplit(examples=examples, vocab=vocab, name=doc["name"])
