import numpy as np
import pandas as pd
import pytest

import scripts.training.trainer as trainer_module
from scripts.data.synthetic import Dataset
from scripts.errors import NumericError, TrainingDiverged
from scripts.segmentation.model import load_checkpoint
from scripts.training.ablation import VARIANTS, ablation_direction, ablation_run, variant_overrides
from scripts.training.config import build_train_config, load_config
from scripts.training.evaluate import (
    confusion,
    dense_pseudo_label,
    evaluate,
    metrics_from_confusion,
    metrics_from_predictions,
    refinement_study,
)
from scripts.training.gradcheck_suite import run_gradcheck
from scripts.training.trainer import LOSS_COLUMNS, TSCDTrainer

TINY = [
    "model.channels=8",
    "model.stem_channels=4",
    "aug.crop_size=32",
    "train.batch_size=1",
    "scd.n=8",
    "varm.iterations=2",
    "varm.dilations=1,2",
]


def tiny_values(*overrides):
    return load_config(overrides=[*TINY, *overrides])


def tiny_config(*overrides):
    return build_train_config(tiny_values(*overrides), num_classes=3)


def snapshot(net):
    return {name: p.data.copy() for name, p in net.parameters().items()}


class TestTrainer:
    def test_zero_learning_rate_leaves_parameters_unchanged(self, tiny_dataset):
        trainer = TSCDTrainer(tiny_config("train.lr=0", "train.iterations=2", "train.warmup_iterations=0"),
                              tiny_dataset)
        before = snapshot(trainer.net)
        trainer.train_step()
        for name, values in snapshot(trainer.net).items():
            np.testing.assert_array_equal(values, before[name])

    def test_warmup_trains_classification_only(self, tiny_dataset):
        trainer = TSCDTrainer(tiny_config("train.iterations=4", "train.warmup_iterations=4"), tiny_dataset)
        components = trainer.train_step()
        assert components["warmup"] == 1
        assert components["cls"] > 0
        assert all(components[name] == 0.0 for name in ("seg", "reg", "scd", "equ", "aux"))
        assert trainer.net.parameters()["seg.w"].grad is None
        assert trainer.net.parameters()["cls.w"].grad is not None

    def test_post_warmup_step_is_finite(self, tiny_dataset):
        trainer = TSCDTrainer(tiny_config("train.iterations=2", "train.warmup_iterations=0"), tiny_dataset)
        components = trainer.train_step()
        assert components["warmup"] == 0
        assert all(np.isfinite(components[name]) for name in LOSS_COLUMNS)
        assert components["seg"] > 0 and components["reg"] >= 0
        assert trainer.net.parameters()["seg.w"].grad is not None

    def test_disabled_components_stay_zero(self, tiny_dataset):
        cfg = tiny_config("train.iterations=1", "train.warmup_iterations=0", "loss.scd=false",
                          "loss.aux=false", "loss.equ=false", "varm.enabled=false")
        components = TSCDTrainer(cfg, tiny_dataset).train_step()
        assert components["scd"] == components["aux"] == components["equ"] == 0.0

    def test_step_with_crop_not_a_multiple_of_sixteen(self, tiny_dataset):
        cfg = tiny_config("aug.crop_size=48", "train.iterations=1", "train.warmup_iterations=0")
        components = TSCDTrainer(cfg, tiny_dataset).train_step()
        assert all(np.isfinite(components[name]) for name in LOSS_COLUMNS)

    def test_same_seed_gives_identical_loss_logs(self, tiny_dataset):
        cfg = tiny_config("train.iterations=3", "train.warmup_iterations=1")
        a = TSCDTrainer(cfg, tiny_dataset).fit()
        b = TSCDTrainer(cfg, tiny_dataset).fit()
        pd.testing.assert_frame_equal(a, b)
        assert list(a.columns) == ["step", "warmup", *LOSS_COLUMNS]
        assert a["warmup"].tolist() == [1, 0, 0]

    def test_divergence_is_reported(self, tiny_dataset, monkeypatch):
        def diverge(*args, **kwargs):
            raise NumericError("loss is nan")

        monkeypatch.setattr(trainer_module, "sample_losses", diverge)
        trainer = TSCDTrainer(tiny_config("train.iterations=1"), tiny_dataset)
        with pytest.raises(TrainingDiverged) as info:
            trainer.train_step()
        assert info.value.step == 0

    def test_save_writes_log_and_checkpoint(self, tiny_dataset, tmp_path):
        trainer = TSCDTrainer(tiny_config("train.iterations=1"), tiny_dataset)
        trainer.fit()
        trainer.save(tmp_path)
        log = pd.read_csv(tmp_path / "loss_log.csv")
        assert len(log) == 1
        params = load_checkpoint(tmp_path / "checkpoint.bin")
        np.testing.assert_array_equal(params["seg.w"].data, trainer.net.parameters()["seg.w"].data)

    @pytest.mark.slow
    def test_overfits_a_single_image(self, tiny_dataset):
        single = Dataset(class_names=tiny_dataset.class_names, samples=[tiny_dataset[0]])
        cfg = tiny_config("train.iterations=500", "train.warmup_iterations=500", "train.lr=2e-3",
                          "aug.scale_min=1", "aug.scale_max=1", "aug.flip_prob=0")
        log = TSCDTrainer(cfg, single).fit(log_every=0)
        assert log["cls"].iloc[-1] < 0.05


class TestMetrics:
    def test_perfect_prediction(self, rng):
        gt = rng.integers(0, 3, size=(8, 8))
        metrics = metrics_from_predictions([gt], [gt], ("background", "a", "b"))
        assert metrics.miou == 1.0 and metrics.pixel_accuracy == 1.0

    def test_disjoint_prediction(self):
        gt = np.ones((4, 4), dtype=np.uint8)
        metrics = metrics_from_predictions([gt * 2], [gt], ("background", "a", "b"))
        assert metrics.miou == 0.0
        assert np.isnan(metrics.iou[0])

    def test_hand_computed_confusion(self):
        gt = np.array([[0, 1], [1, 255]])
        pred = np.array([[0, 1], [0, 1]])
        cm = confusion(pred, gt, 1)
        np.testing.assert_array_equal(cm, [[1, 0], [1, 1]])
        metrics = metrics_from_confusion(cm, ("background", "a"))
        np.testing.assert_allclose(metrics.iou, [0.5, 0.5])
        assert metrics.pixel_accuracy == pytest.approx(2 / 3)

    def test_matches_set_based_iou(self, rng):
        gt = rng.integers(0, 4, size=(16, 16))
        pred = rng.integers(0, 4, size=(16, 16))
        ious = []
        for c in range(4):
            a, b = set(zip(*np.nonzero(pred == c))), set(zip(*np.nonzero(gt == c)))
            if a | b:
                ious.append(len(a & b) / len(a | b))
        metrics = metrics_from_predictions([pred], [gt], ("background", "a", "b", "c"))
        assert metrics.miou == pytest.approx(np.mean(ious), abs=1e-12)

    def test_table_has_miou_footer(self, tmp_path):
        metrics = metrics_from_predictions([np.zeros((2, 2))], [np.zeros((2, 2))], ("background", "a"))
        metrics.to_csv(tmp_path / "metrics.csv")
        table = pd.read_csv(tmp_path / "metrics.csv")
        assert table["class"].tolist() == ["background", "a", "miou"]
        assert np.isnan(table["iou"].iloc[1])

    def test_dense_pseudo_label(self):
        scores = np.array([[[0.9, 0.2], [0.1, 0.3]]])
        np.testing.assert_array_equal(dense_pseudo_label(scores, 0.45), [[1, 0]])


class TestStudies:
    def test_evaluate_untrained_network(self, tiny_dataset):
        net = TSCDTrainer(tiny_config("train.iterations=0"), tiny_dataset).net
        metrics = evaluate(tiny_dataset, net, workers=2)
        assert len(metrics.iou) == 4
        assert 0.0 <= metrics.miou <= 1.0

    def test_refinement_study_reports_each_method(self, tiny_dataset):
        cfg = tiny_config("train.iterations=0")
        net = TSCDTrainer(cfg, tiny_dataset).net
        table = refinement_study(tiny_dataset, net, cfg.cam, cfg.varm)
        assert table["method"].tolist() == ["cam", "rgb", "varm"]
        assert table["miou"].between(0, 1).all()

    def test_ablation_run_table(self, tiny_dataset):
        values = tiny_values("train.iterations=2", "train.warmup_iterations=1")
        variants = (VARIANTS[0], VARIANTS[-1])
        table = ablation_run(values, tiny_dataset, tiny_dataset, seeds=(0,), variants=variants)
        assert table["variant"].tolist() == ["baseline", "+equ"]
        assert list(table.columns) == ["variant", "seed_0", "median_miou"]
        assert (table["seed_0"] == table["median_miou"]).all()

    def test_variant_overrides(self):
        assert variant_overrides(("varm", "scd")) == {
            "varm.enabled": True, "loss.scd": True, "loss.aux": False, "loss.equ": False,
        }

    @pytest.mark.parametrize("medians,holds", [
        ((0.40, 0.45, 0.50, 0.50, 0.51), [True, True, True, True]),
        ((0.40, 0.405, 0.50, 0.49, 0.52), [False, True, False, True]),
    ])
    def test_ablation_direction(self, medians, holds):
        table = pd.DataFrame({"variant": [name for name, _ in VARIANTS], "median_miou": medians})
        checks = ablation_direction(table)
        assert checks["holds"].tolist() == holds
        assert checks["gain"].iloc[0] == pytest.approx(medians[1] - medians[0])


def test_gradcheck_suite_passes():
    table = run_gradcheck(seed=0)
    assert table["passed"].all(), table.to_string()
    assert {"scd", "classification", "segmentation"} <= set(table["loss"])
