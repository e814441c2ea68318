"""Scene graph data model: vocabulary, graph/box/mask types, JSON round-trip,
and the spatial predicate shared by dataset construction and layout metrics."""

from __future__ import annotations

import base64
import enum
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

IMAGE_NODE_NAME = "__image__"
IN_IMAGE_PREDICATE = "in image"


class SceneGraphError(ValueError):
    """Malformed graph document or graph violating an invariant."""


class SpatialPredicate(enum.Enum):
    """The six mutually exclusive geometric relations between two boxes.

    Declaration order is the fixed total order used for serialization.
    """

    LEFT_OF = "left of"
    RIGHT_OF = "right of"
    ABOVE = "above"
    BELOW = "below"
    INSIDE = "inside"
    SURROUNDING = "surrounding"

    @property
    def label(self) -> str:
        return self.value


SPATIAL_PREDICATE_NAMES = tuple(p.value for p in SpatialPredicate)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in normalized [0,1] image coordinates, y down."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        if not (0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0):
            raise SceneGraphError(
                f"invalid box ({self.x0}, {self.y0}, {self.x1}, {self.y1}): "
                "need 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1"
            )

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))

    @property
    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def contains(self, other: "BoundingBox") -> bool:
        """Containment with ties on shared borders counting as inside."""
        return (
            self.x0 <= other.x0
            and self.y0 <= other.y0
            and self.x1 >= other.x1
            and self.y1 >= other.y1
        )

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass(frozen=True)
class BinaryMask:
    """Row-major binary bitmap; stored as one byte per pixel (0 or 1)."""

    width: int
    height: int
    data: bytes

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise SceneGraphError(f"invalid mask dims {self.width}x{self.height}")
        if len(self.data) != self.width * self.height:
            raise SceneGraphError(
                f"mask data length {len(self.data)} != {self.width * self.height}"
            )
        if any(b not in (0, 1) for b in self.data):
            raise SceneGraphError("mask bytes must be 0 or 1")

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "BinaryMask":
        a = (np.asarray(arr) > 0).astype(np.uint8)
        if a.ndim != 2:
            raise SceneGraphError(f"mask array must be 2-D, got shape {a.shape}")
        return cls(width=a.shape[1], height=a.shape[0], data=a.tobytes())

    def to_array(self) -> np.ndarray:
        return np.frombuffer(self.data, dtype=np.uint8).reshape(self.height, self.width)


@dataclass(frozen=True)
class ObjectNode:
    category_id: int
    gt_box: Optional[BoundingBox] = None
    gt_mask: Optional[BinaryMask] = None


@dataclass(frozen=True)
class RelationTriple:
    subject: int
    predicate_id: int
    object: int

    def __post_init__(self):
        if self.subject == self.object:
            raise SceneGraphError(
                f"triple relates node {self.subject} to itself"
            )


@dataclass(frozen=True)
class Vocab:
    """Dense id<->name tables for object categories and relation predicates.

    Index 0 of ``object_names`` is reserved for the synthetic ``__image__``
    node that anchors otherwise isolated objects.
    """

    object_names: tuple[str, ...]
    predicate_names: tuple[str, ...]

    def __post_init__(self):
        if not self.object_names or self.object_names[0] != IMAGE_NODE_NAME:
            raise SceneGraphError(
                f"object_names[0] must be {IMAGE_NODE_NAME!r}, got "
                f"{self.object_names[:1]!r}"
            )
        if len(set(self.object_names)) != len(self.object_names):
            raise SceneGraphError("duplicate object names in vocab")
        if len(set(self.predicate_names)) != len(self.predicate_names):
            raise SceneGraphError("duplicate predicate names in vocab")

    @classmethod
    def build(cls, objects, predicates) -> "Vocab":
        """Build a vocab, inserting the reserved entries when absent."""
        objs = [IMAGE_NODE_NAME] + [o for o in objects if o != IMAGE_NODE_NAME]
        preds = [IN_IMAGE_PREDICATE] + [p for p in predicates if p != IN_IMAGE_PREDICATE]
        return cls(tuple(objs), tuple(preds))

    @property
    def num_objects(self) -> int:
        return len(self.object_names)

    @property
    def num_predicates(self) -> int:
        return len(self.predicate_names)

    def object_id(self, name: str) -> int:
        try:
            return self._object_index[name]
        except KeyError:
            raise SceneGraphError(f"unknown object category {name!r}") from None

    def predicate_id(self, name: str) -> int:
        try:
            return self._predicate_index[name]
        except KeyError:
            raise SceneGraphError(f"unknown predicate {name!r}") from None

    @property
    def _object_index(self) -> dict[str, int]:
        idx = getattr(self, "_obj_idx_cache", None)
        if idx is None:
            idx = {n: i for i, n in enumerate(self.object_names)}
            object.__setattr__(self, "_obj_idx_cache", idx)
        return idx

    @property
    def _predicate_index(self) -> dict[str, int]:
        idx = getattr(self, "_pred_idx_cache", None)
        if idx is None:
            idx = {n: i for i, n in enumerate(self.predicate_names)}
            object.__setattr__(self, "_pred_idx_cache", idx)
        return idx

    def to_json(self) -> str:
        return json.dumps(
            {"objects": list(self.object_names), "predicates": list(self.predicate_names)},
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        doc = json.loads(text)
        return cls(tuple(doc["objects"]), tuple(doc["predicates"]))


@dataclass(frozen=True)
class SceneGraph:
    nodes: tuple[ObjectNode, ...]
    triples: tuple[RelationTriple, ...]

    def __post_init__(self):
        if not self.nodes:
            raise SceneGraphError("scene graph needs at least one node")
        n = len(self.nodes)
        for i, t in enumerate(self.triples):
            if not (0 <= t.subject < n and 0 <= t.object < n):
                raise SceneGraphError(
                    f"triple {i} references nodes ({t.subject}, {t.object}) "
                    f"outside 0..{n - 1}"
                )

    def validate(self, vocab: Vocab) -> None:
        for i, node in enumerate(self.nodes):
            if not (0 <= node.category_id < vocab.num_objects):
                raise SceneGraphError(f"node {i} category {node.category_id} out of range")
        for i, t in enumerate(self.triples):
            if not (0 <= t.predicate_id < vocab.num_predicates):
                raise SceneGraphError(f"triple {i} predicate {t.predicate_id} out of range")

    def real_node_indices(self) -> list[int]:
        """Indices of nodes that are not the synthetic image anchor."""
        return [i for i, n in enumerate(self.nodes) if n.category_id != 0]


def spatial_predicate(subject: BoundingBox, obj: BoundingBox) -> SpatialPredicate:
    """Classify the geometric relation of ``subject`` relative to ``obj``.

    Containment (ties included) wins over direction; otherwise the angle of
    the center offset d = obj.center - subject.center selects a quadrant:
    |theta| <= pi/4 -> left-of, theta in (pi/4, 3pi/4] -> above,
    theta in (-3pi/4, -pi/4) -> below, else right-of.  The sector tests are
    written as exact coordinate comparisons so boundary ties are deterministic
    (equivalent to the atan2 formulation away from ties).
    """
    if subject.contains(obj):
        return SpatialPredicate.SURROUNDING
    if obj.contains(subject):
        return SpatialPredicate.INSIDE
    scx, scy = subject.center
    ocx, ocy = obj.center
    dx = ocx - scx
    dy = ocy - scy
    if dx >= abs(dy):
        return SpatialPredicate.LEFT_OF
    if dy >= abs(dx):
        return SpatialPredicate.ABOVE
    if -dy > abs(dx):
        return SpatialPredicate.BELOW
    return SpatialPredicate.RIGHT_OF


def to_pseudo_caption(triple: RelationTriple, graph: SceneGraph, vocab: Vocab) -> str:
    """Render a triple as a short sentence, e.g. "person on top of grass"."""
    if triple not in graph.triples:
        raise SceneGraphError("triple does not belong to the graph")
    subj = vocab.object_names[graph.nodes[triple.subject].category_id]
    pred = vocab.predicate_names[triple.predicate_id]
    obj = vocab.object_names[graph.nodes[triple.object].category_id]
    return f"{subj} {pred} {obj}"


def _mask_to_doc(mask: Optional[BinaryMask]):
    if mask is None:
        return None
    return {
        "w": mask.width,
        "h": mask.height,
        "data": base64.b64encode(mask.data).decode("ascii"),
    }


def _mask_from_doc(doc, where: str) -> Optional[BinaryMask]:
    if doc is None:
        return None
    try:
        raw = base64.b64decode(doc["data"], validate=True)
        return BinaryMask(width=int(doc["w"]), height=int(doc["h"]), data=raw)
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneGraphError(f"bad mask at {where}: {exc}") from exc


def parse_scene_graph(text: str, vocab: Vocab) -> SceneGraph:
    """Parse the JSON interchange form of a scene graph.

    Schema: {"objects": [name...], "triples": [[subject, predicate, object]...],
    "boxes": optional [[x0,y0,x1,y1] or null ...], "masks": optional [...]}.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneGraphError(f"malformed JSON at position {exc.pos}: {exc.msg}") from exc
    if not isinstance(doc, dict) or "objects" not in doc or "triples" not in doc:
        raise SceneGraphError("document must be an object with 'objects' and 'triples'")

    names = doc["objects"]
    boxes = doc.get("boxes")
    masks = doc.get("masks")
    if boxes is not None and len(boxes) != len(names):
        raise SceneGraphError(f"boxes length {len(boxes)} != objects length {len(names)}")
    if masks is not None and len(masks) != len(names):
        raise SceneGraphError(f"masks length {len(masks)} != objects length {len(names)}")

    nodes = []
    for i, name in enumerate(names):
        if not isinstance(name, str):
            raise SceneGraphError(f"objects[{i}] is not a string")
        cid = vocab.object_id(name)
        box = None
        if boxes is not None and boxes[i] is not None:
            vals = boxes[i]
            if len(vals) != 4:
                raise SceneGraphError(f"boxes[{i}] must have 4 coordinates")
            box = BoundingBox(*(float(v) for v in vals))
        mask = _mask_from_doc(masks[i], f"masks[{i}]") if masks is not None else None
        nodes.append(ObjectNode(category_id=cid, gt_box=box, gt_mask=mask))

    triples = []
    for i, entry in enumerate(doc["triples"]):
        if len(entry) != 3:
            raise SceneGraphError(f"triples[{i}] must be [subject, predicate, object]")
        s, pname, o = entry
        if not isinstance(pname, str):
            raise SceneGraphError(f"triples[{i}] predicate is not a string")
        pid = vocab.predicate_id(pname)
        s, o = int(s), int(o)
        if not (0 <= s < len(nodes)) or not (0 <= o < len(nodes)):
            raise SceneGraphError(
                f"triples[{i}] references object index outside 0..{len(nodes) - 1}"
            )
        triples.append(RelationTriple(subject=s, predicate_id=pid, object=o))

    return SceneGraph(nodes=tuple(nodes), triples=tuple(triples))


def serialize_scene_graph(graph: SceneGraph, vocab: Vocab) -> str:
    """Canonical JSON form: sorted keys, triples in input order.

    ``parse_scene_graph(serialize_scene_graph(g)) == g`` for valid graphs,
    and serialization is byte-stable across calls.
    """
    graph.validate(vocab)
    doc: dict = {
        "objects": [vocab.object_names[n.category_id] for n in graph.nodes],
        "triples": [
            [t.subject, vocab.predicate_names[t.predicate_id], t.object]
            for t in graph.triples
        ],
    }
    if any(n.gt_box is not None for n in graph.nodes):
        doc["boxes"] = [
            list(n.gt_box.as_tuple()) if n.gt_box is not None else None
            for n in graph.nodes
        ]
    if any(n.gt_mask is not None for n in graph.nodes):
        doc["masks"] = [_mask_to_doc(n.gt_mask) for n in graph.nodes]
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def ensure_image_node(graph: SceneGraph, vocab: Vocab) -> SceneGraph:
    """Return a graph guaranteed to contain the image anchor node with an
    in-image edge from every real object, so no node is isolated.

    Graphs that already have an anchor are returned unchanged.
    """
    if any(n.category_id == 0 for n in graph.nodes):
        return graph
    pid = vocab.predicate_id(IN_IMAGE_PREDICATE)
    anchor = ObjectNode(category_id=0, gt_box=BoundingBox(0.0, 0.0, 1.0, 1.0))
    anchor_idx = len(graph.nodes)
    extra = tuple(
        RelationTriple(subject=i, predicate_id=pid, object=anchor_idx)
        for i in range(len(graph.nodes))
    )
    return SceneGraph(nodes=graph.nodes + (anchor,), triples=graph.triples + extra)
