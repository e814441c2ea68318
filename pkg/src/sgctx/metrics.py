"""Layout and study metrics: relation score, average IoU, relation
categorization, worker filtering, MORS and forced-choice aggregation."""

from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

from .scenegraph import (
    BoundingBox,
    SceneGraph,
    SpatialPredicate,
    Vocab,
    spatial_predicate,
)


class MetricsError(ValueError):
    pass


class NonSpatialPredicateError(MetricsError):
    """Relation score saw a predicate outside the six geometric relations.

    Graphs with semantic/possessive relations need opinion scoring instead;
    silently skipping them would inflate the score.
    """


class RelationCategory(enum.Enum):
    SEMANTIC = "Semantic"
    GEOMETRIC = "Geometric"
    POSSESSIVE = "Possessive"
    MISCELLANEOUS = "Miscellaneous"


# Default category membership for the Visual Genome relationship vocabulary
# (45 predicates).  Editable via a JSON mapping file; unknown predicates fall
# into Miscellaneous, the catch-all category.
DEFAULT_CATEGORY_MAP: dict[str, RelationCategory] = {}
for _name in (
    "covering", "eating", "standing on", "carrying", "looking at",
    "walking on", "sitting on", "sitting in", "standing in", "holding",
    "riding",
):
    DEFAULT_CATEGORY_MAP[_name] = RelationCategory.SEMANTIC
for _name in (
    "next to", "above", "beside", "behind", "by", "laying on", "hanging on",
    "under", "on", "below", "against", "attached to", "near", "on top of",
    "at", "in front of", "around", "along", "on side of", "parked on",
):
    DEFAULT_CATEGORY_MAP[_name] = RelationCategory.GEOMETRIC
for _name in (
    "has", "belonging to", "inside", "with", "over", "covered in", "have",
    "in", "wears", "wearing",
):
    DEFAULT_CATEGORY_MAP[_name] = RelationCategory.POSSESSIVE
for _name in ("and", "for", "of", "made of"):
    DEFAULT_CATEGORY_MAP[_name] = RelationCategory.MISCELLANEOUS
del _name


# Reference numbers from the original full-scale runs (COCO-stuff / Visual
# Genome at 64x64 with crowd raters).  Kept as constants for context in CLI
# output; they are NOT desk-scale targets.
REFERENCE_FULL_SCALE = {
    "coco_relation_score": {"context_model": 0.536, "baseline": 0.512},
    "coco_avg_iou": {"context_model": 0.483, "baseline": 0.459},
    "vg_avg_iou": {"context_model": 0.234, "baseline": 0.223},
    "vg_mors_overall": {"context_model": 0.74, "baseline": 0.64},
    "vg_mors_semantic": {"context_model": 0.78, "baseline": 0.60},
    "vg_mors_geometric": {"context_model": 0.68, "baseline": 0.64},
    "vg_mors_possessive": {"context_model": 0.80, "baseline": 0.62},
    "vg_mors_miscellaneous": {"context_model": 0.86, "baseline": 0.78},
    "coco_abx_gt_layout": {"context_model": 0.605, "baseline": 0.395},
    "coco_abx_pred_layout": {"context_model": 0.362, "baseline": 0.638},
    "coco_avb_gt_layout": {"context_model": 0.631, "baseline": 0.369},
    "coco_avb_pred_layout": {"context_model": 0.322, "baseline": 0.678},
    "vg_abx": {"context_model": 0.574, "baseline": 0.426},
    "vg_avb": {"context_model": 0.583, "baseline": 0.427},
}


def categorize_relation(
    name: str, category_map: Optional[dict[str, RelationCategory]] = None
) -> RelationCategory:
    table = DEFAULT_CATEGORY_MAP if category_map is None else category_map
    return table.get(name, RelationCategory.MISCELLANEOUS)


def load_category_map(text: str) -> dict[str, RelationCategory]:
    """Parse a JSON mapping {predicate: category name}."""
    doc = json.loads(text)
    return {name: RelationCategory(cat) for name, cat in doc.items()}


_SPATIAL_BY_NAME = {p.value: p for p in SpatialPredicate}


def relation_score(
    graph: SceneGraph, boxes: Sequence[BoundingBox], vocab: Vocab
) -> float:
    """Fraction of the graph's spatial relationships satisfied by ``boxes``.

    ``boxes`` is aligned with ``graph.nodes`` (entries for anchor nodes are
    ignored).  A triple (s, p, o) counts as satisfied iff
    ``spatial_predicate(boxes[s], boxes[o]) == p``.  Edges touching the
    ``__image__`` anchor are excluded; any other non-spatial predicate is an
    error.
    """
    counted = 0
    satisfied = 0
    for i, t in enumerate(graph.triples):
        if (
            graph.nodes[t.subject].category_id == 0
            or graph.nodes[t.object].category_id == 0
        ):
            continue
        name = vocab.predicate_names[t.predicate_id]
        pred = _SPATIAL_BY_NAME.get(name)
        if pred is None:
            raise NonSpatialPredicateError(
                f"triple {i} uses non-spatial predicate {name!r}; "
                "relation score is defined only for the six geometric relations"
            )
        counted += 1
        if spatial_predicate(boxes[t.subject], boxes[t.object]) == pred:
            satisfied += 1
    if counted == 0:
        raise MetricsError("graph has no spatial relationships to score")
    return satisfied / counted


def relation_score_counts(
    graph: SceneGraph, boxes: Sequence[BoundingBox], vocab: Vocab
) -> tuple[int, int]:
    """(satisfied, counted) pair for pooling scores across a split."""
    counted = 0
    satisfied = 0
    for i, t in enumerate(graph.triples):
        if (
            graph.nodes[t.subject].category_id == 0
            or graph.nodes[t.object].category_id == 0
        ):
            continue
        name = vocab.predicate_names[t.predicate_id]
        pred = _SPATIAL_BY_NAME.get(name)
        if pred is None:
            raise NonSpatialPredicateError(
                f"triple {i} uses non-spatial predicate {name!r}"
            )
        counted += 1
        if spatial_predicate(boxes[t.subject], boxes[t.object]) == pred:
            satisfied += 1
    return satisfied, counted


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    ix0 = max(a.x0, b.x0)
    iy0 = max(a.y0, b.y0)
    ix1 = min(a.x1, b.x1)
    iy1 = min(a.y1, b.y1)
    iw = max(0.0, ix1 - ix0)
    ih = max(0.0, iy1 - iy0)
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


def avg_iou(predicted: Sequence[BoundingBox], gt: Sequence[BoundingBox]) -> float:
    if len(predicted) != len(gt):
        raise MetricsError(
            f"box list length mismatch: {len(predicted)} predicted vs {len(gt)} gt"
        )
    if not predicted:
        raise MetricsError("empty box lists")
    return sum(box_iou(p, g) for p, g in zip(predicted, gt)) / len(predicted)


# ---------------------------------------------------------------------------
# Human-rating records and aggregation


RATINGS_CSV_HEADER = [
    "worker_id", "trial_id", "design", "item_ref", "side_a_model",
    "answer", "is_control", "control_truth",
]


@dataclass(frozen=True)
class RatingRecord:
    """One human judgment of one trial."""

    worker_id: str
    trial_id: str
    design: str  # "mors" | "avb" | "abx"
    item_ref: str
    side_a_model: str
    answer: str  # yes/no for mors, A/B for forced choice
    is_control: bool
    control_truth: str = ""

    def __post_init__(self):
        if self.is_control != bool(self.control_truth):
            raise MetricsError(
                f"trial {self.trial_id}: control truth must be present "
                "iff the trial is a control"
            )


@dataclass
class StudyResult:
    design: str
    scores: dict[str, float]
    per_category: dict[str, float]
    worker_count: int
    excluded_workers: list[str]
    n_scored_items: int = 0

    def to_json_dict(self) -> dict:
        return {
            "design": self.design,
            "scores": self.scores,
            "per_category": self.per_category,
            "worker_count": self.worker_count,
            "excluded_workers": self.excluded_workers,
            "n_scored_items": self.n_scored_items,
        }


def canonical_json(obj) -> str:
    """The one JSON writer used for study results, so offline and service
    aggregation produce byte-identical output."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def records_to_csv(records: Iterable[RatingRecord]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(RATINGS_CSV_HEADER)
    for r in records:
        w.writerow(
            [
                r.worker_id, r.trial_id, r.design, r.item_ref, r.side_a_model,
                r.answer, "true" if r.is_control else "false", r.control_truth,
            ]
        )
    return out.getvalue()


def records_from_csv(text: str) -> list[RatingRecord]:
    reader = csv.reader(io.StringIO(text))
    rows = list(reader)
    if not rows or rows[0] != RATINGS_CSV_HEADER:
        raise MetricsError(
            f"ratings CSV must start with header {','.join(RATINGS_CSV_HEADER)}"
        )
    records = []
    for i, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(RATINGS_CSV_HEADER):
            raise MetricsError(f"ratings CSV line {i}: expected 8 fields, got {len(row)}")
        records.append(
            RatingRecord(
                worker_id=row[0],
                trial_id=row[1],
                design=row[2],
                item_ref=row[3],
                side_a_model=row[4],
                answer=row[5],
                is_control=row[6] == "true",
                control_truth=row[7],
            )
        )
    return records


def filter_workers(
    records: Sequence[RatingRecord], min_control_accuracy: float = 0.8
) -> tuple[list[RatingRecord], list[str]]:
    """Drop every record of workers whose control-trial accuracy falls below
    the threshold.  Workers without control trials are kept."""
    seen: dict[str, list[RatingRecord]] = {}
    for r in records:
        seen.setdefault(r.worker_id, []).append(r)
    excluded = []
    for worker in sorted(seen):
        controls = [r for r in seen[worker] if r.is_control]
        if not controls:
            continue
        correct = sum(1 for r in controls if r.answer == r.control_truth)
        if correct / len(controls) < min_control_accuracy:
            excluded.append(worker)
    bad = set(excluded)
    kept = [r for r in records if r.worker_id not in bad]
    return kept, excluded


def aggregate_mors(
    records: Sequence[RatingRecord],
    category_map: Optional[dict[str, RelationCategory]] = None,
) -> StudyResult:
    """MORS: fraction of (image, relationship) items judged present.

    Per-item verdict is the majority of its yes/no ratings, ties counting as
    not-present.  ``item_ref`` carries "<media>|<predicate>" so items can be
    broken down by relation category.  Control trials are excluded from the
    score (they exist for worker filtering).
    """
    scored = [r for r in records if not r.is_control]
    if not scored:
        raise MetricsError("no scorable MORS records")
    by_item: dict[str, list[str]] = {}
    item_pred: dict[str, str] = {}
    for r in scored:
        if r.answer not in ("yes", "no"):
            raise MetricsError(f"MORS answer must be yes/no, got {r.answer!r}")
        by_item.setdefault(r.item_ref, []).append(r.answer)
        item_pred[r.item_ref] = r.item_ref.rsplit("|", 1)[-1]

    verdicts: dict[str, bool] = {}
    for item, answers in by_item.items():
        yes = sum(1 for a in answers if a == "yes")
        verdicts[item] = yes * 2 > len(answers)

    overall = sum(verdicts.values()) / len(verdicts)
    per_cat_counts: dict[str, list[int]] = {}
    for item, present in verdicts.items():
        cat = categorize_relation(item_pred[item], category_map).value
        tot = per_cat_counts.setdefault(cat, [0, 0])
        tot[0] += int(present)
        tot[1] += 1
    per_category = {
        cat: hits / total for cat, (hits, total) in sorted(per_cat_counts.items())
    }
    workers = {r.worker_id for r in records}
    return StudyResult(
        design="mors",
        scores={"mors": overall},
        per_category=per_category,
        worker_count=len(workers),
        excluded_workers=[],
        n_scored_items=len(verdicts),
    )


def aggregate_forced_choice(
    records: Sequence[RatingRecord], design: str
) -> StudyResult:
    """Unblind A/B answers into per-model vote fractions.

    Each trial stores which model sat on side A; the other model of the
    (two-model) study sat on side B.  Control trials never contribute votes.
    """
    if design not in ("avb", "abx"):
        raise MetricsError(f"unknown forced-choice design {design!r}")
    scored = [r for r in records if not r.is_control]
    if not scored:
        raise MetricsError("no scorable forced-choice records")
    models = sorted({r.side_a_model for r in scored})
    if len(models) != 2:
        raise MetricsError(
            "cannot unblind side assignment: expected exactly 2 models on "
            f"side A across trials, saw {models}"
        )
    votes = {m: 0 for m in models}
    for r in scored:
        if r.answer not in ("A", "B"):
            raise MetricsError(f"forced-choice answer must be A/B, got {r.answer!r}")
        other = models[0] if r.side_a_model == models[1] else models[1]
        votes[r.side_a_model if r.answer == "A" else other] += 1
    total = sum(votes.values())
    workers = {r.worker_id for r in records}
    return StudyResult(
        design=design,
        scores={m: votes[m] / total for m in models},
        per_category={},
        worker_count=len(workers),
        excluded_workers=[],
        n_scored_items=len({r.trial_id for r in scored}),
    )


def aggregate_study(
    records: Sequence[RatingRecord],
    design: str,
    min_control_accuracy: float = 0.8,
    category_map: Optional[dict[str, RelationCategory]] = None,
) -> StudyResult:
    """Full pipeline: worker filtering, then the design-appropriate aggregator."""
    if not records:
        raise MetricsError("no ratings yet")
    kept, excluded = filter_workers(records, min_control_accuracy)
    if design == "mors":
        result = aggregate_mors(kept, category_map)
    else:
        result = aggregate_forced_choice(kept, design)
    result.excluded_workers = excluded
    result.worker_count = len({r.worker_id for r in records})
    return result
