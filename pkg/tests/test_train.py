import hashlib

import numpy as np
import pytest

from sgctx import autodiff as ad
from sgctx.dataset import ShapesWorldConfig, generate_shapes_world
from sgctx.model import ModelConfig
from sgctx.scenegraph import BoundingBox
from sgctx.train import (
    BatchTargets,
    ForwardResults,
    LossWeights,
    NanLossError,
    TrainConfig,
    TrainError,
    Trainer,
    compute_losses,
    crop_objects,
    flip_example,
    generator_forward,
    load_trainer_checkpoint,
    make_batch,
    mismatch_donors,
    probe_metrics,
    run_training,
    _flip_predicate_map,
)

TINY_MODEL = ModelConfig(
    embed_dim=8,
    gcn_layers=2,
    image_size=16,
    crn_channels=(8, 6, 6),
    mask_head_channels=(8, 8, 6, 4),
    d_img_channels=(4, 6, 8),
    d_obj_channels=(4, 8),
    d_obj_fc=16,
)


def tiny_split(scenes=8, seed=0):
    return generate_shapes_world(
        ShapesWorldConfig(seed=seed, scenes=scenes, image_size=16)
    )


def tiny_cfg(**kw):
    defaults = dict(steps=2, batch_size=3, seed=1, model=TINY_MODEL, checkpoint_every=100)
    defaults.update(kw)
    return TrainConfig(**defaults)


class TestMismatchDonors:
    def test_batch_of_two_swaps(self):
        donors = mismatch_donors(2, np.random.default_rng(0))
        assert donors.tolist() == [1, 0]

    def test_donor_never_self(self):
        donors = mismatch_donors(32, np.random.default_rng(1))
        assert (donors != np.arange(32)).all()

    def test_deterministic_under_seed(self):
        a = mismatch_donors(32, np.random.default_rng(5))
        b = mismatch_donors(32, np.random.default_rng(5))
        assert (a == b).all()

    def test_batch_of_one_rejected(self):
        with pytest.raises(TrainError):
            mismatch_donors(1, np.random.default_rng(0))

    def test_context_row_reassignment(self):
        from sgctx.train import sample_mismatched_context

        s = ad.constant(np.arange(12.0).reshape(4, 3))
        mis = sample_mismatched_context(s, np.random.default_rng(2))
        for i in range(4):
            assert not (mis.data[i] == s.data[i]).all()
            assert any((mis.data[i] == s.data[j]).all() for j in range(4) if j != i)


def _forward_fixture(boxes_pred, masks_p, fake, d_fake, d_obj, logits):
    return ForwardResults(
        boxes_pred=ad.constant(boxes_pred),
        masks_pred=None if masks_p is None else ad.constant(masks_p),
        fake_images=ad.constant(fake),
        d_fake_scores=ad.constant(d_fake),
        d_obj_fake_scores=ad.constant(d_obj),
        obj_logits_fake=ad.constant(logits),
    )


class TestComputeLosses:
    def test_perfect_predictions(self):
        boxes = np.array([[0.1, 0.1, 0.5, 0.5], [0.2, 0.3, 0.8, 0.9]])
        masks = np.ones((2, 1, 16, 16))
        fake = np.full((1, 3, 4, 4), 0.25)
        fwd = _forward_fixture(
            boxes, masks, fake,
            d_fake=np.ones((1, 1, 2, 2)),
            d_obj=np.ones((2, 1)),
            logits=np.array([[50.0, 0, 0], [0, 0, 50.0]]),
        )
        targets = BatchTargets(
            boxes_gt=boxes.copy(), masks_gt=masks.copy(), images=fake.copy(),
            labels=np.array([0, 2]),
        )
        total, comps = compute_losses(fwd, targets, LossWeights())
        assert comps["l_box"].item() == 0.0
        assert comps["l_pix"].item() == 0.0
        # clamped-probability cross entropy floors at -log(1 - eps)
        assert comps["l_mask"].item() == pytest.approx(-np.log(1 - 1e-7), rel=1e-6)
        assert comps["l_gan_img"].item() == 0.0

    def test_all_weights_zero(self):
        rng = np.random.default_rng(0)
        fwd = _forward_fixture(
            rng.uniform(0.1, 0.4, (2, 4)), None, rng.uniform(0, 1, (1, 3, 4, 4)),
            rng.normal(size=(1, 1, 2, 2)), rng.normal(size=(2, 1)),
            rng.normal(size=(2, 3)),
        )
        targets = BatchTargets(
            boxes_gt=rng.uniform(0.5, 0.9, (2, 4)), masks_gt=None,
            images=rng.uniform(0, 1, (1, 3, 4, 4)), labels=np.array([1, 0]),
        )
        zero = LossWeights(0, 0, 0, 0, 0, 0)
        total, _ = compute_losses(fwd, targets, zero)
        assert total.item() == 0.0

    def test_hand_computed_two_example_batch(self):
        boxes_pred = np.array([[0.1, 0.2, 0.5, 0.6], [0.3, 0.3, 0.7, 0.8]])
        boxes_gt = np.array([[0.2, 0.2, 0.4, 0.6], [0.3, 0.5, 0.7, 0.7]])
        masks_pred = np.full((2, 1, 16, 16), 0.7)
        masks_gt = np.ones((2, 1, 16, 16))
        fake = np.full((2, 3, 2, 2), 0.6)
        real = np.full((2, 3, 2, 2), 0.35)
        d_fake = np.array([0.3, 0.5]).reshape(2, 1, 1, 1)
        d_obj = np.array([[0.2], [0.6]])
        logits = np.array([[1.0, 2.0, 0.5], [0.2, 0.1, 1.3]])
        labels = np.array([0, 2])

        fwd = _forward_fixture(boxes_pred, masks_pred, fake, d_fake, d_obj, logits)
        targets = BatchTargets(boxes_gt=boxes_gt, masks_gt=masks_gt, images=real,
                               labels=labels)
        total, comps = compute_losses(fwd, targets, LossWeights())

        # spreadsheet-style recomputation
        l_box = np.abs(boxes_pred - boxes_gt).mean()
        l_mask = -np.log(0.7)
        l_pix = 0.25
        l_gan_img = ((d_fake - 1) ** 2).mean()
        l_gan_obj = ((d_obj - 1) ** 2).mean()
        z = logits - logits.max(axis=1, keepdims=True)
        ce = np.mean(np.log(np.exp(z).sum(axis=1)) - z[np.arange(2), labels])
        expected = (
            10.0 * l_box + 0.1 * l_mask + 1.0 * l_pix
            + 0.01 * l_gan_img + 0.01 * l_gan_obj + 0.1 * ce
        )
        assert comps["l_box"].item() == pytest.approx(l_box, abs=1e-12)
        assert comps["l_mask"].item() == pytest.approx(l_mask, rel=1e-6)
        assert comps["l_pix"].item() == pytest.approx(l_pix, abs=1e-12)
        assert comps["l_ac"].item() == pytest.approx(ce, abs=1e-12)
        assert total.item() == pytest.approx(expected, rel=1e-9)

    def test_nan_component_named(self):
        fwd = _forward_fixture(
            np.full((1, 4), np.nan), None, np.zeros((1, 3, 2, 2)),
            np.zeros((1, 1, 1, 1)), np.zeros((1, 1)), np.zeros((1, 3)),
        )
        targets = BatchTargets(
            boxes_gt=np.zeros((1, 4)), masks_gt=None,
            images=np.zeros((1, 3, 2, 2)), labels=np.array([0]),
        )
        with pytest.raises(NanLossError, match="l_box"):
            compute_losses(fwd, targets, LossWeights())


class TestCropObjects:
    def test_full_image_box_is_downsample(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 1, (3, 32, 32))
        crops = crop_objects(ad.constant(img), [BoundingBox(0, 0, 1, 1)])
        assert crops.shape == (1, 3, 16, 16)
        expected = ad.crop_box_bilinear(ad.constant(img), (0, 0, 1, 1), 16, 16)
        np.testing.assert_allclose(crops.data[0], expected.data, atol=1e-12)

    def test_uniform_region_uniform_crop(self):
        img = np.full((3, 32, 32), 0.5)
        img[:, :16] = 0.9
        crops = crop_objects(ad.constant(img), [BoundingBox(0.1, 0.6, 0.9, 0.95)])
        np.testing.assert_allclose(crops.data, 0.5)


class TestFlip:
    def test_flip_boxes_and_predicates(self):
        split = tiny_split(scenes=2)
        img, graph = split.examples[0]
        chw = img.image.transpose(2, 0, 1)
        pred_map = _flip_predicate_map(split.vocab)
        fimg, fgraph = flip_example(chw, graph, pred_map)
        np.testing.assert_array_equal(fimg, chw[:, :, ::-1])
        names = split.vocab.predicate_names
        for t, ft in zip(graph.triples, fgraph.triples):
            a, b = names[t.predicate_id], names[ft.predicate_id]
            if a == "left of":
                assert b == "right of"
            elif a == "right of":
                assert b == "left of"
            else:
                assert a == b
        for n, fn in zip(graph.nodes, fgraph.nodes):
            if n.gt_box is not None:
                assert fn.gt_box.x0 == pytest.approx(1 - n.gt_box.x1)
                assert fn.gt_box.y0 == n.gt_box.y0

    def test_double_flip_is_identity(self):
        split = tiny_split(scenes=1)
        img, graph = split.examples[0]
        chw = img.image.transpose(2, 0, 1)
        pred_map = _flip_predicate_map(split.vocab)
        i2, g2 = flip_example(*flip_example(chw, graph, pred_map), pred_map)
        np.testing.assert_array_equal(i2, chw)
        assert g2.triples == graph.triples
        for n, n2 in zip(graph.nodes, g2.nodes):
            assert n2.category_id == n.category_id
            assert n2.gt_mask == n.gt_mask
            # 1-(1-x) can round in the last ulp, so boxes match approximately
            np.testing.assert_allclose(
                n2.gt_box.as_tuple(), n.gt_box.as_tuple(), atol=1e-15
            )


def _group_digest(params):
    h = hashlib.sha256()
    for p in sorted(params, key=lambda t: t.name):
        h.update(p.data.tobytes())
    return h.hexdigest()


class TestTrainStep:
    def _batch(self, split, cfg, seed=3):
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, len(split.examples), cfg.batch_size)
        flips = rng.random(cfg.batch_size) < 0.5
        return make_batch(split, idx, flips, split.vocab)

    def test_phase_isolation(self):
        split = tiny_split()
        cfg = tiny_cfg()
        trainer = Trainer.build(cfg, split.vocab)
        batch = self._batch(split, cfg)

        d_img_before = _group_digest(trainer.models.d_img_group())
        d_obj_before = _group_digest(trainer.models.d_obj_group())
        # generator phase alone must leave both discriminators untouched
        fwd, _, _ = generator_forward(trainer.models, batch, cfg.teacher_forcing)
        targets = BatchTargets(
            boxes_gt=batch.boxes_flat,
            masks_gt=np.stack([m for row in batch.gt_masks for m in row]),
            images=batch.images,
            labels=batch.labels,
        )
        total, _ = compute_losses(fwd, targets, cfg.weights)
        ad.zero_grads(trainer._all_params())
        ad.backward(total)
        ad.adam_step(trainer.models.generator_group(), trainer.adam_gen)
        assert _group_digest(trainer.models.d_img_group()) == d_img_before
        assert _group_digest(trainer.models.d_obj_group()) == d_obj_before

    def test_full_step_updates_all_groups_and_reports_six(self):
        split = tiny_split()
        cfg = tiny_cfg()
        trainer = Trainer.build(cfg, split.vocab)
        batch = self._batch(split, cfg)
        before = {
            "gen": _group_digest(trainer.models.generator_group()),
            "d_img": _group_digest(trainer.models.d_img_group()),
            "d_obj": _group_digest(trainer.models.d_obj_group()),
        }
        report = trainer.train_step(batch, np.random.default_rng(0))
        assert set(report.components) == {
            "l_box", "l_mask", "l_pix", "l_gan_img", "l_gan_obj", "l_ac"
        }
        assert _group_digest(trainer.models.generator_group()) != before["gen"]
        assert _group_digest(trainer.models.d_img_group()) != before["d_img"]
        assert _group_digest(trainer.models.d_obj_group()) != before["d_obj"]

    def test_maskless_batch_reports_five(self):
        from sgctx.scenegraph import ObjectNode, SceneGraph

        split = tiny_split()
        for i, (img, graph) in enumerate(split.examples):
            bare = SceneGraph(
                nodes=tuple(
                    ObjectNode(category_id=n.category_id, gt_box=n.gt_box)
                    for n in graph.nodes
                ),
                triples=graph.triples,
            )
            for obj in img.objects:
                obj.mask = None
            split.examples[i] = (img, bare)
        cfg = tiny_cfg()
        trainer = Trainer.build(cfg, split.vocab)
        batch = self._batch(split, cfg)
        assert not batch.has_masks
        report = trainer.train_step(batch, np.random.default_rng(0))
        assert set(report.components) == {"l_box", "l_pix", "l_gan_img", "l_gan_obj", "l_ac"}

    def test_predicted_layout_mode_runs(self):
        split = tiny_split()
        cfg = tiny_cfg(teacher_forcing=False)
        trainer = Trainer.build(cfg, split.vocab)
        batch = self._batch(split, cfg)
        report = trainer.train_step(batch, np.random.default_rng(0))
        assert np.isfinite(report.total)


class TestOverfitSmoke:
    def test_pixel_and_box_losses_fall_on_one_batch(self):
        split = tiny_split(scenes=3, seed=5)
        cfg = tiny_cfg(batch_size=3, lr=2e-3, flip_prob=0.0)
        trainer = Trainer.build(cfg, split.vocab)
        batch = make_batch(split, [0, 1, 2], [False] * 3, split.vocab)
        rng = np.random.default_rng(0)
        first, last = None, None
        for step in range(40):
            report = trainer.train_step(batch, rng)
            if first is None:
                first = report.components
            last = report.components
        assert last["l_pix"] < first["l_pix"]
        assert last["l_box"] < 0.6 * first["l_box"]


class TestRunTraining:
    def test_single_step_writes_one_row_and_checkpoint(self, tmp_path):
        split = tiny_split()
        cfg = tiny_cfg(steps=1)
        out = run_training(cfg, split, tmp_path, probe=split.examples[:2])
        rows = (tmp_path / "metrics.csv").read_text().strip().splitlines()
        assert len(rows) == 2  # header + one step
        assert rows[0] == "step,l_box,l_mask,l_pix,l_gan_img,l_gan_obj,l_ac,relation_score,iou"
        assert (tmp_path / "ckpt_final.ckpt").exists()
        assert (tmp_path / "model_config.json").exists()
        assert np.isfinite(out["last_row"]["relation_score"])

    def test_deterministic_replay(self, tmp_path):
        split = tiny_split()
        cfg = tiny_cfg(steps=3)
        run_training(cfg, split, tmp_path / "a")
        run_training(cfg, split, tmp_path / "b")
        a = (tmp_path / "a" / "metrics.csv").read_text()
        b = (tmp_path / "b" / "metrics.csv").read_text()
        assert a == b

    def test_resume_is_bit_identical(self, tmp_path):
        split = tiny_split()
        full_cfg = tiny_cfg(steps=4, checkpoint_every=2)
        full = run_training(full_cfg, split, tmp_path / "full")

        # same config, interrupted at step 2, then resumed
        run_training(tiny_cfg(steps=2, checkpoint_every=2), split, tmp_path / "part")
        resumed_cfg = tiny_cfg(
            steps=4, checkpoint_every=2,
            resume_from=str(tmp_path / "part" / "ckpt_000002.ckpt"),
        )
        resumed = run_training(resumed_cfg, split, tmp_path / "part")

        t_full, _, _ = load_trainer_checkpoint(tmp_path / "full" / "ckpt_final.ckpt")
        t_res, _, _ = load_trainer_checkpoint(tmp_path / "part" / "ckpt_final.ckpt")
        a = t_full.models.all_named()
        b = t_res.models.all_named()
        assert set(a) == set(b)
        for k in a:
            np.testing.assert_array_equal(a[k].data, b[k].data)

        full_rows = (tmp_path / "full" / "metrics.csv").read_text().splitlines()
        part_rows = (tmp_path / "part" / "metrics.csv").read_text().splitlines()
        assert full_rows[3:] == part_rows[3:]


class TestProbeMetrics:
    def test_probe_on_untrained_model_is_finite(self):
        split = tiny_split(scenes=4)
        trainer = Trainer.build(tiny_cfg(), split.vocab)
        rel, iou = probe_metrics(trainer.models, split.examples, split.vocab)
        assert 0.0 <= rel <= 1.0
        assert 0.0 <= iou <= 1.0
