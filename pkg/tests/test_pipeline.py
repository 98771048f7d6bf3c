"""Head, loss, metric, optimizer, synthetic data, and the training loop."""

import math

import numpy as np
import pytest

from ivgf import pipeline
from ivgf.backbone import MultiScaleFeatures
from ivgf.errors import NonFiniteError
from ivgf.io_formats import Config
from ivgf.params import ParamStore
from ivgf.rng import RngState
from ivgf.tensor import Tensor, backward, finite_diff_grad, max_rel_error

SMALL = Config(backbone_base_width=8, head_width=8, data_image_size=32)


class TestSegForward:
    def _feats(self, cfg, seed, fill=None):
        rng = np.random.default_rng(seed)
        base = cfg.data_image_size // 4
        fused = []
        for i, c in enumerate(cfg.widths()):
            shape = (c, base // 2**i, base // 2**i)
            data = np.zeros(shape) if fill == "zero" else rng.uniform(-1, 1, shape)
            fused.append(Tensor(data))
        return MultiScaleFeatures(pairs=[], fused=fused)

    def test_logit_shape_at_64(self):
        cfg = Config(backbone_base_width=8, head_width=8, head_classes=4)
        store = ParamStore()
        head = pipeline.build_head(store, RngState(0), cfg)
        logits = pipeline.seg_forward(self._feats(cfg, 1), head)
        assert logits.shape == (4, 64, 64)

    def test_zero_features_zero_biases_give_zero_logits(self):
        store = ParamStore()
        head = pipeline.build_head(store, RngState(1), SMALL)
        logits = pipeline.seg_forward(self._feats(SMALL, 2, fill="zero"), head)
        assert np.allclose(logits.data, 0.0, atol=0)

    def test_argmax_tie_breaks_to_lowest_class(self):
        logits = np.zeros((3, 2, 2))
        assert np.array_equal(logits.argmax(axis=0), np.zeros((2, 2), dtype=np.int64))


class TestCrossEntropy:
    def test_uniform_logits_give_exact_log_k(self):
        logits = Tensor(np.zeros((4, 8, 8)))
        mask = np.zeros((8, 8), dtype=np.int64)
        assert pipeline.cross_entropy(logits, mask).item() == math.log(4.0)

    def test_saturated_true_class(self):
        rng = np.random.default_rng(3)
        mask = rng.integers(0, 3, (4, 4))
        logits = np.zeros((3, 4, 4))
        for i in range(4):
            for j in range(4):
                logits[mask[i, j], i, j] = 1e4
        assert pipeline.cross_entropy(Tensor(logits), mask).item() < 1e-4

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            logits = rng.uniform(-2, 2, (2, 2, 2))
            mask = rng.integers(0, 2, (2, 2))
            loss = pipeline.cross_entropy(Tensor(logits), mask).item()
            total = 0.0
            for i in range(2):
                for j in range(2):
                    exps = [math.exp(logits[k, i, j]) for k in range(2)]
                    total += -math.log(exps[mask[i, j]] / sum(exps))
            assert abs(loss - total / 4) < 1e-12

    def test_ignore_label_excluded(self):
        logits = Tensor(np.zeros((4, 2, 2)))
        mask = np.full((2, 2), 255)
        mask[0, 0] = 2
        assert pipeline.cross_entropy(logits, mask).item() == math.log(4.0)

    def test_all_ignored_rejected(self):
        with pytest.raises(ValueError, match="ignore"):
            pipeline.cross_entropy(Tensor(np.zeros((4, 2, 2))), np.full((2, 2), 255))

    def test_out_of_range_class_rejected(self):
        with pytest.raises(ValueError):
            pipeline.cross_entropy(Tensor(np.zeros((3, 2, 2))), np.full((2, 2), 7))

    def test_nonnegative_on_random_inputs(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            logits = Tensor(rng.uniform(-5, 5, (3, 3, 3)))
            mask = rng.integers(0, 3, (3, 3))
            assert pipeline.cross_entropy(logits, mask).item() >= 0.0

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(6)
        logits = Tensor(rng.uniform(-1, 1, (3, 2, 2)), requires_grad=True)
        mask = rng.integers(0, 3, (2, 2))
        mask[0, 0] = 255
        backward(pipeline.cross_entropy(logits, mask))
        numeric = finite_diff_grad(
            lambda t: pipeline.cross_entropy(t, mask).item(), logits
        )
        assert max_rel_error(logits.grad, numeric) <= 1e-4


class TestMiou:
    def test_perfect_prediction(self):
        cm = pipeline.ConfusionMatrix(3)
        cm.counts = np.diag([5, 9, 2]).astype(np.int64)
        overall, per_class = pipeline.miou(cm)
        assert overall == 1.0 and per_class == [1.0, 1.0, 1.0]

    def test_fully_flipped_two_class(self):
        cm = pipeline.ConfusionMatrix(2)
        cm.counts = np.array([[0, 4], [6, 0]], dtype=np.int64)
        overall, per_class = pipeline.miou(cm)
        assert overall == 0.0 and per_class == [0.0, 0.0]

    def test_fixed_example(self):
        cm = pipeline.ConfusionMatrix(2)
        cm.counts = np.array([[3, 1], [2, 4]], dtype=np.int64)
        overall, per_class = pipeline.miou(cm)
        assert per_class == [3 / 6, 4 / 7]
        assert abs(overall - (0.5 + 4 / 7) / 2) < 1e-15

    def test_empty_union_class_excluded(self):
        cm = pipeline.ConfusionMatrix(3)
        cm.counts = np.array([[4, 0, 0], [0, 2, 0], [0, 0, 0]], dtype=np.int64)
        overall, per_class = pipeline.miou(cm)
        assert per_class == [1.0, 1.0, None]
        assert overall == 1.0

    def test_all_empty_rejected(self):
        with pytest.raises(ValueError):
            pipeline.miou(pipeline.ConfusionMatrix(2))

    def test_relabeling_invariance(self):
        rng = np.random.default_rng(7)
        counts = rng.integers(0, 20, (4, 4)).astype(np.int64)
        cm = pipeline.ConfusionMatrix(4)
        cm.counts = counts
        overall, _ = pipeline.miou(cm)
        perm = rng.permutation(4)
        cm2 = pipeline.ConfusionMatrix(4)
        cm2.counts = counts[np.ix_(perm, perm)]
        overall2, _ = pipeline.miou(cm2)
        assert abs(overall - overall2) < 1e-12

    def test_update_counts_pixels_and_never_decreases(self):
        cm = pipeline.ConfusionMatrix(3)
        truth = np.array([[0, 1], [255, 2]])
        pred = np.array([[0, 2], [1, 2]])
        cm.update(truth, pred)
        assert cm.counts.sum() == 3  # ignore pixel dropped
        before = cm.counts.copy()
        cm.update(truth, pred)
        assert np.all(cm.counts >= before)
        other = pipeline.ConfusionMatrix(3)
        other.update(truth, pred)
        merged = pipeline.ConfusionMatrix(3)
        merged.update(truth, pred)
        merged.merge(other)
        assert np.array_equal(merged.counts, cm.counts)


class TestSyntheticScenes:
    def test_class_ids_and_coverage(self):
        scenes = pipeline.make_dataset(3, "train", 8, 64)
        for scene in scenes:
            assert scene.mask.min() >= 0 and scene.mask.max() < 4
            assert len(np.unique(scene.mask)) >= 2
            assert scene.ir.shape == scene.vis.shape == (3, 64, 64)
            assert scene.ir.data.min() >= 0.0 and scene.ir.data.max() <= 1.0

    def test_determinism_per_index(self):
        a = pipeline.make_dataset(5, "eval", 4, 32)
        b = pipeline.make_dataset(5, "eval", 4, 32)
        for sa, sb in zip(a, b):
            assert sa.ir.data.tobytes() == sb.ir.data.tobytes()
            assert np.array_equal(sa.mask, sb.mask)

    def test_modality_exclusive_classes(self):
        # class 1 must stand out in ir but not vis; class 2 the reverse
        scene = pipeline.make_dataset(11, "train", 1, 64)[0]
        mask, ir, vis = scene.mask, scene.ir.data, scene.vis.data
        bg_ir = ir[0][mask == 0].mean()
        bg_vis = vis[0][mask == 0].mean()
        if (mask == 1).any():
            assert ir[0][mask == 1].mean() > bg_ir + 0.3
            assert abs(vis[0][mask == 1].mean() - bg_vis) < 0.25
        if (mask == 2).any():
            assert vis[0][mask == 2].mean() > bg_vis + 0.3
            assert abs(ir[0][mask == 2].mean() - bg_ir) < 0.25


class TestAdamW:
    def test_zero_gradient_is_pure_decay(self):
        store = ParamStore()
        p = store.add("w", Tensor(np.array([2.0, -4.0])))
        opt = pipeline.AdamW(store, lr=0.1, weight_decay=0.5)
        opt.step({"w": np.zeros(2)})
        assert np.allclose(p.data, np.array([2.0, -4.0]) * (1 - 0.1 * 0.5), atol=1e-15)

    def test_five_steps_match_hand_stepped_reference(self):
        store = ParamStore()
        p = store.add("w", Tensor(np.array([0.7])))
        lr, wd, b1, b2, eps = 0.05, 0.1, 0.9, 0.999, 1e-8
        opt = pipeline.AdamW(store, lr=lr, weight_decay=wd)

        ref, m, v = 0.7, 0.0, 0.0
        for t in range(1, 6):
            grad = 2.0 * (ref - 3.0)  # d/dw (w-3)^2 at the reference iterate
            opt.step({"w": np.array([2.0 * (p.data[0] - 3.0)])})
            m = b1 * m + (1 - b1) * grad
            v = b2 * v + (1 - b2) * grad * grad
            mhat, vhat = m / (1 - b1**t), v / (1 - b2**t)
            ref = ref - lr * mhat / (math.sqrt(vhat) + eps) - lr * wd * ref
            assert abs(p.data[0] - ref) < 1e-12


class TestTraining:
    def test_short_run_descends_and_is_deterministic(self):
        cfg = Config(backbone_base_width=8, head_width=8, data_image_size=32,
                     data_train_scenes=8, train_lr=3e-3)
        _, losses_a = pipeline.train_toy(cfg, steps=12, seed=3)
        _, losses_b = pipeline.train_toy(cfg, steps=12, seed=3)
        assert losses_a == losses_b
        assert losses_a[-1] < losses_a[0]
        assert all(np.isfinite(losses_a))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_aborts_with_tensor_name(self):
        cfg = Config(backbone_base_width=8, head_width=8, data_image_size=32, data_train_scenes=2)
        model = pipeline.build_model(cfg, seed=0)
        model.store["head.classifier.w"].data[:] = np.inf
        scenes = pipeline.make_dataset(0, "train", 1, 32)
        opt = pipeline.AdamW(model.store, lr=1e-3)
        with pytest.raises(NonFiniteError, match="conv2d|non-finite"):
            pipeline.train_step(model, scenes, opt, None, None)


class TestEvaluate:
    def test_perfect_predictions_give_miou_one(self, monkeypatch):
        cfg = Config(backbone_base_width=8, head_width=8, data_image_size=32)
        model = pipeline.build_model(cfg, seed=1)
        scenes = pipeline.make_dataset(2, "eval", 3, 32)
        monkeypatch.setattr(pipeline, "predict", lambda model, ir, vis, missing="none": scenes_by_ir[ir.data.tobytes()])
        scenes_by_ir = {s.ir.data.tobytes(): s.mask for s in scenes}
        report = pipeline.evaluate(scenes, model, "none")
        assert report["miou"] == 1.0

    def test_empty_dataset_rejected(self):
        cfg = SMALL
        model = pipeline.build_model(cfg, seed=1)
        with pytest.raises(ValueError, match="empty"):
            pipeline.evaluate([], model)

    def test_report_formats(self):
        report = {"miou": 0.5, "per_class": [1.0, None, 0.0]}
        csv = pipeline.report_csv(report)
        assert csv.splitlines()[0] == "class_id,iou"
        assert csv.splitlines()[2] == "1,nan"
        assert csv.splitlines()[-1] == "miou,0.5"
        text = pipeline.report_text(report)
        assert "undefined" in text and "mIoU" in text

    def test_evaluate_deterministic(self):
        cfg = Config(backbone_base_width=8, head_width=8, data_image_size=32)
        model = pipeline.build_model(cfg, seed=4)
        scenes = pipeline.make_dataset(5, "eval", 2, 32)
        a = pipeline.report_csv(pipeline.evaluate(scenes, model, "none"))
        b = pipeline.report_csv(pipeline.evaluate(scenes, model, "none"))
        assert a == b
