"""Rating-study construction: build MORS / AvB / AB-X trial manifests from a
dataset plus generated-image directories, with seeded side randomization and
ground-truth control injection."""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .dataset import DatasetSplit
from .scenegraph import RelationTriple, to_pseudo_caption

DESIGNS = ("mors", "avb", "abx")
GT_MODEL_NAME = "gt"


class StudyError(ValueError):
    pass


@dataclass
class Trial:
    id: str
    design: str
    media: list[str]  # refs relative to the study root
    prompt: str
    predicate: str = ""
    side_a_model: str = ""
    side_b_model: str = ""
    is_control: bool = False
    control_truth: str = ""

    def item_ref(self) -> str:
        if self.design == "mors":
            return f"{self.media[0]}|{self.predicate}"
        return "|".join(self.media)


@dataclass
class StudyManifest:
    design: str
    seed: int
    trials: list[Trial]
    target_ratings: int = 5

    def to_json(self) -> str:
        return json.dumps(
            {
                "design": self.design,
                "seed": self.seed,
                "target_ratings": self.target_ratings,
                "trials": [asdict(t) for t in self.trials],
            },
            sort_keys=True,
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "StudyManifest":
        doc = json.loads(text)
        if doc.get("design") not in DESIGNS:
            raise StudyError(f"unknown design {doc.get('design')!r}")
        trials = [Trial(**t) for t in doc["trials"]]
        ids = [t.id for t in trials]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise StudyError(f"duplicate trial ids: {dupes}")
        return cls(
            design=doc["design"],
            seed=int(doc.get("seed", 0)),
            trials=trials,
            target_ratings=int(doc.get("target_ratings", 5)),
        )


def _sample_relation(graph, vocab, rng) -> RelationTriple:
    candidates = [
        t
        for t in graph.triples
        if graph.nodes[t.subject].category_id != 0
        and graph.nodes[t.object].category_id != 0
    ]
    if not candidates:
        raise StudyError("graph has no relations between real objects")
    return candidates[int(rng.integers(len(candidates)))]


def _control_positions(n_trials: int, rate: float, rng) -> set[int]:
    n_controls = int(round(n_trials * rate))
    if n_controls == 0:
        return set()
    return set(rng.choice(n_trials, size=min(n_controls, n_trials), replace=False).tolist())


def _copy_media(src: Path, study_dir: Path, name: str) -> str:
    media_dir = study_dir / "media"
    media_dir.mkdir(parents=True, exist_ok=True)
    dst = media_dir / name
    shutil.copyfile(src, dst)
    return f"media/{name}"


def _image_path(images_dir: Path, index: int) -> Path:
    p = Path(images_dir) / f"scene_{index:05d}.ppm"
    if not p.exists():
        raise StudyError(f"missing image {p}")
    return p


def export_mors_study(
    split: DatasetSplit,
    images_dir,
    gt_dir,
    out_dir,
    count: int,
    seed: int = 0,
    control_rate: float = 0.10,
    model_name: str = "ours",
    target_ratings: int = 5,
) -> StudyManifest:
    """One image + one relation sentence per trial, answered yes/no.

    Controls show the ground-truth raster, where the sampled relation holds
    by construction (truth "yes").  Media files are copied under anonymous
    names so trial payloads cannot leak which model made an image.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 11)))
    n = len(split.examples)
    picks = rng.choice(n, size=count, replace=count > n)
    controls = _control_positions(count, control_rate, rng)

    trials = []
    for t_idx, ex_idx in enumerate(picks):
        _, graph = split.examples[int(ex_idx)]
        triple = _sample_relation(graph, split.vocab, rng)
        prompt = to_pseudo_caption(triple, graph, split.vocab)
        predicate = split.vocab.predicate_names[triple.predicate_id]
        is_control = t_idx in controls
        source_dir = gt_dir if is_control else images_dir
        ref = _copy_media(
            _image_path(source_dir, int(ex_idx)), out, f"t{t_idx:04d}_a.ppm"
        )
        trials.append(
            Trial(
                id=f"t{t_idx:04d}",
                design="mors",
                media=[ref],
                prompt=prompt,
                predicate=predicate,
                side_a_model=GT_MODEL_NAME if is_control else model_name,
                is_control=is_control,
                control_truth="yes" if is_control else "",
            )
        )
    manifest = StudyManifest(
        design="mors", seed=seed, trials=trials, target_ratings=target_ratings
    )
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest


def export_forced_choice_study(
    design: str,
    split: DatasetSplit,
    images_a_dir,
    images_b_dir,
    out_dir,
    count: int,
    seed: int = 0,
    control_rate: float = 0.10,
    model_a: str = "ours",
    model_b: str = "baseline",
    gt_dir=None,
    target_ratings: int = 5,
) -> StudyManifest:
    """Two images side by side; raters pick A or B.

    avb asks for the more realistic image; abx asks which image matches the
    relation sentence.  Side assignment is a seeded coin flip per trial.
    Controls pair a ground-truth raster against a model image (the GT side
    is the expected answer).
    """
    if design not in ("avb", "abx"):
        raise StudyError(f"forced-choice design must be avb or abx, got {design!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 13)))
    n = len(split.examples)
    picks = rng.choice(n, size=count, replace=count > n)
    controls = _control_positions(count, control_rate, rng)
    if controls and gt_dir is None:
        raise StudyError("control trials need a ground-truth image directory")

    trials = []
    for t_idx, ex_idx in enumerate(picks):
        ex_idx = int(ex_idx)
        _, graph = split.examples[ex_idx]
        if design == "abx":
            triple = _sample_relation(graph, split.vocab, rng)
            prompt = to_pseudo_caption(triple, graph, split.vocab)
            predicate = split.vocab.predicate_names[triple.predicate_id]
        else:
            prompt = "which image looks more realistic"
            predicate = ""
        is_control = t_idx in controls
        flip = bool(rng.integers(2))

        if is_control:
            pair = [(GT_MODEL_NAME, _image_path(gt_dir, ex_idx)),
                    (model_a, _image_path(images_a_dir, ex_idx))]
        else:
            pair = [(model_a, _image_path(images_a_dir, ex_idx)),
                    (model_b, _image_path(images_b_dir, ex_idx))]
        if flip:
            pair.reverse()
        ref_a = _copy_media(pair[0][1], out, f"t{t_idx:04d}_a.ppm")
        ref_b = _copy_media(pair[1][1], out, f"t{t_idx:04d}_b.ppm")
        truth = ""
        if is_control:
            truth = "A" if pair[0][0] == GT_MODEL_NAME else "B"
        trials.append(
            Trial(
                id=f"t{t_idx:04d}",
                design=design,
                media=[ref_a, ref_b],
                prompt=prompt,
                predicate=predicate,
                side_a_model=pair[0][0],
                side_b_model=pair[1][0],
                is_control=is_control,
                control_truth=truth,
            )
        )
    manifest = StudyManifest(
        design=design, seed=seed, trials=trials, target_ratings=target_ratings
    )
    (out / "manifest.json").write_text(manifest.to_json())
    return manifest
