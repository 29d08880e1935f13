from dataclasses import dataclass, replace

import numpy as np
import pytest
from PIL import Image

from objectness import data
from objectness.bbox import encode
from objectness.detector import predict_distribution
from objectness.errors import ConfigError, DataError
from objectness.model import NetworkConfig, build, classification_head, model_from_checkpoint
from objectness.nn import softmax_xent_soft
from objectness.trainer import (
    HELDOUT_CELLS,
    ExperimentConfig,
    TrainConfig,
    detection_targets,
    epoch_order,
    run_heldout_experiment,
    run_recognition_transfer,
    sgd_step,
    train_classification,
    train_detection,
)


def two_colour_records(root, n=40, size=16, seed=0):
    """Class 0 is reddish, class 1 bluish: separable from mean pixel colour."""
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        label = i % 2
        img = rng.integers(0, 120, size=(size, size, 3), dtype=np.uint8)
        img[..., 0 if label == 0 else 2] += 120
        path = root / f"{i}.png"
        Image.fromarray(img).save(path)
        records.append(data.SampleRecord(path, label, (), False, "train" if i < 3 * n // 4 else "val"))
    return records


@dataclass(frozen=True)
class TripwireRecord(data.SampleRecord):
    """Fails the test if anything reads the boxes of an unlabelled record."""

    def __getattribute__(self, name):
        if name == "boxes" and not object.__getattribute__(self, "has_bbox_labels"):
            raise AssertionError(f"boxes of unlabelled record {object.__getattribute__(self, 'image_path')} read")
        return object.__getattribute__(self, name)


class TestSGD:
    def test_plain_step(self):
        p, g, v = {"w": np.zeros(1)}, {"w": np.ones(1)}, {"w": np.zeros(1)}
        sgd_step(p, g, v, TrainConfig(lr=0.1, momentum=0.0, weight_decay=0.0))
        assert p["w"][0] == pytest.approx(-0.1)

    def test_momentum_accumulates(self):
        cfg = TrainConfig(lr=0.1, momentum=0.9, weight_decay=0.0)
        p, g, v = {"w": np.zeros(1)}, {"w": np.ones(1)}, {"w": np.zeros(1)}
        sgd_step(p, g, v, cfg)
        sgd_step(p, g, v, cfg)
        # v1 = -0.1, v2 = 0.9 * -0.1 - 0.1 = -0.19
        assert p["w"][0] == pytest.approx(-0.29)
        assert v["w"][0] == pytest.approx(-0.19)

    def test_weight_decay(self):
        p, g, v = {"w": np.full(2, 2.0)}, {"w": np.zeros(2)}, {"w": np.zeros(2)}
        sgd_step(p, g, v, TrainConfig(lr=0.5, momentum=0.0, weight_decay=0.1))
        np.testing.assert_allclose(p["w"], 2.0 - 0.5 * 0.1 * 2.0)

    def test_zero_gradient_zero_velocity(self, rng):
        w = rng.normal(size=(3, 4))
        p, g, v = {"w": w.copy()}, {"w": np.zeros_like(w)}, {"w": np.zeros_like(w)}
        sgd_step(p, g, v, TrainConfig(weight_decay=0.0))
        assert p["w"].tobytes() == w.tobytes()

    def test_lr_override(self):
        p, g, v = {"w": np.zeros(1)}, {"w": np.ones(1)}, {"w": np.zeros(1)}
        sgd_step(p, g, v, TrainConfig(lr=1.0, momentum=0.0, weight_decay=0.0), lr=0.01)
        assert p["w"][0] == pytest.approx(-0.01)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="'w'"):
            sgd_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, {"w": np.zeros(2)}, TrainConfig())


class TestTrainConfig:
    @pytest.mark.parametrize("kw", [dict(lr=-1.0), dict(momentum=1.0), dict(batch_size=0), dict(epochs=-1),
                                    dict(weight_decay=-0.1)])
    def test_rejected(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw)

    def test_step_decay(self):
        cfg = TrainConfig(lr=0.1, lr_decay=0.5, lr_decay_every=2)
        assert [cfg.lr_at(e) for e in range(5)] == [0.1, 0.1, 0.05, 0.05, 0.025]
        assert TrainConfig(lr=0.1).lr_at(100) == 0.1

    def test_held_out_normalised(self):
        assert TrainConfig(held_out_classes=[9, 8, 9]).held_out_classes == (8, 9)

    def test_epoch_order_pure(self):
        a = epoch_order(50, 3, 2)
        assert sorted(a) == list(range(50))
        assert a.tobytes() == epoch_order(50, 3, 2).tobytes()
        assert a.tobytes() != epoch_order(50, 3, 3).tobytes()


class TestClassification:
    def test_separable_toy(self, tmp_path, tiny_config):
        records = two_colour_records(tmp_path)
        net = replace(tiny_config, head=classification_head(2))
        _, log = train_classification(records, TrainConfig(lr=0.01, epochs=20, batch_size=5), net)
        assert len(log.epochs) == 20
        assert log.epochs[log.best_epoch].val_metric < 0.05

    def test_zero_lr_leaves_parameters(self, tmp_path, tiny_config):
        records = two_colour_records(tmp_path, n=12)
        net = replace(tiny_config, head=classification_head(2))
        ckpt, _ = train_classification(records, TrainConfig(lr=0.0, epochs=3, batch_size=4), net)
        for name, value in build(net).named_params().items():
            assert ckpt.tensors[name].tobytes() == value.tobytes()

    def test_deterministic(self, small_dataset, tiny_config):
        _, records, cfg = small_dataset
        net = replace(tiny_config, head=classification_head(cfg.num_classes))
        tc = TrainConfig(epochs=2, batch_size=8, seed=5)
        a_ckpt, a_log = train_classification(records, tc, net)
        b_ckpt, b_log = train_classification(records, tc, net)
        assert a_log == b_log
        for name, value in a_ckpt.tensors.items():
            assert value.tobytes() == b_ckpt.tensors[name].tobytes()

    def test_no_train_records(self, small_dataset, tiny_config):
        val = [r for r in small_dataset[1] if r.split == "val"]
        with pytest.raises(DataError):
            train_classification(val, TrainConfig(epochs=1), replace(tiny_config, head=classification_head(10)))

    def test_log_csv(self, tmp_path, small_dataset, tiny_config):
        _, log = train_classification(small_dataset[1], TrainConfig(epochs=2, batch_size=16),
                                      replace(tiny_config, head=classification_head(10)))
        log.write_csv(tmp_path / "log.csv")
        lines = (tmp_path / "log.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_top1_error,wall_time"
        assert len(lines) == 3


class TestDetection:
    def test_unlabelled_records_never_read(self, small_dataset, tiny_config):
        _, records, _ = small_dataset
        wired = [TripwireRecord(r.image_path, r.class_id, () if i % 3 == 0 else r.boxes, i % 3 != 0, r.split)
                 for i, r in enumerate(records)]
        train_detection(wired, TrainConfig(epochs=1, batch_size=16, held_out_classes=(8, 9)), tiny_config)

    def test_tripwire_fires(self, small_dataset):
        r = small_dataset[1][0]
        with pytest.raises(AssertionError):
            TripwireRecord(r.image_path, r.class_id, (), False, r.split).boxes

    def test_all_classes_held_out(self, small_dataset, tiny_config):
        _, records, cfg = small_dataset
        with pytest.raises(DataError, match="no bbox-labeled"):
            train_detection(records, TrainConfig(epochs=1, held_out_classes=range(cfg.num_classes)), tiny_config)

    def test_deterministic(self, small_dataset, tiny_config):
        _, records, _ = small_dataset
        tc = TrainConfig(epochs=2, batch_size=16, seed=1)
        a = train_detection(records, tc, tiny_config)
        b = train_detection(records, tc, tiny_config)
        assert a[1] == b[1]
        for name, value in a[0].tensors.items():
            assert value.tobytes() == b[0].tensors[name].tobytes()

    def test_zero_lr_with_init(self, small_dataset, tiny_config):
        _, records, _ = small_dataset
        cls = build(replace(tiny_config, head=classification_head(10), init_seed=4)).to_checkpoint()
        ckpt, _ = train_detection(records, TrainConfig(lr=0.0, epochs=1, init=cls), tiny_config)
        for name, value in ckpt.tensors.items():
            if name.startswith("trunk."):
                assert value.tobytes() == cls.tensors[name].tobytes()

    def test_loss_monotone_on_repeated_batch(self, tmp_path):
        cfg = data.SynthConfig(train_images=8, val_images=0, seed=2)
        records = data.load_manifest(data.generate(cfg, tmp_path))
        model = build(NetworkConfig())
        x = data.load_images(records)
        t = detection_targets(records, model.config.head.grid)
        tc = TrainConfig(lr=1e-3)
        params = model.named_params()
        velocity = {k: np.zeros_like(v) for k, v in params.items()}
        losses = []
        for _ in range(50):
            loss, d = softmax_xent_soft(model.forward(x), t)
            model.backward(d)
            sgd_step(params, model.named_grads(), velocity, tc)
            losses.append(loss)
        assert all(b <= a + 1e-6 for a, b in zip(losses, losses[1:]))
        assert losses[-1] < losses[0]

    def test_overfit_single_image(self, tmp_path):
        cfg = data.SynthConfig(train_images=1, val_images=0, max_objects=1, seed=7)
        records = data.load_manifest(data.generate(cfg, tmp_path))
        net = NetworkConfig()
        ckpt, _ = train_detection(records, TrainConfig(epochs=300, batch_size=1), net)
        model = model_from_checkpoint(ckpt)
        dist = predict_distribution(model, data.load_images(records)[0])
        assert int(np.argmax(dist)) == encode(records[0].boxes[0], net.head.grid)


@pytest.fixture(scope="module")
def tiny_experiment(tmp_path_factory):
    from conftest import tiny_trunk
    from objectness.bbox import BBoxGrid
    from objectness.model import bbox_head

    cfg = data.SynthConfig(num_classes=4, train_images=40, val_images=24, image_size=16, scale_range=(0.3, 0.6), seed=5)
    records = data.load_manifest(data.generate(cfg, tmp_path_factory.mktemp("exp")))
    net = NetworkConfig(input_dims=(3, 16, 16), trunk=tiny_trunk(), feature_dim=16,
                        head=bbox_head(BBoxGrid(nx=4, ny=4, ns=2, na=2)))
    tc = TrainConfig(epochs=2, batch_size=8)
    return records, ExperimentConfig(network=net, classify=tc, detect=tc, held_out_classes=(3,), seeds=(0, 1))


class TestExperiments:
    def test_heldout_grid(self, tiny_experiment):
        records, exp = tiny_experiment
        rep = run_heldout_experiment(records, exp)
        assert set(rep.cells) == set(HELDOUT_CELLS)
        for cell in rep.cells.values():
            assert len(cell.heldout_auc) == len(cell.logs) == 2
            assert all(0 <= v <= 1 for v in cell.heldout_auc + cell.all_val_auc)
            assert cell.checkpoint is not None and cell.report.auc == cell.heldout_auc[0]
        assert len(rep.pretrain_logs) == 2
        assert 0 <= rep.uniform_baseline_auc <= 1
        assert len(rep.summary_rows()) == 4 * 3 + 2
        assert "pretrained" in rep.table()
        # bitwise reproducible
        again = run_heldout_experiment(records, exp)
        for key in HELDOUT_CELLS:
            assert again.cells[key].heldout_auc == rep.cells[key].heldout_auc

    def test_heldout_needs_validation_images(self, tiny_experiment):
        records, exp = tiny_experiment
        train_only = [r for r in records if r.split == "train"]
        with pytest.raises(DataError):
            run_heldout_experiment(train_only, exp)

    def test_withheld_cell_differs_from_all_boxes(self, tiny_experiment):
        # same pretraining and seed; only the held-out boxes differ
        records, exp = tiny_experiment
        rep = run_heldout_experiment(records, replace(exp, seeds=(0,)))
        a = rep.cells[("pretrained", "withheld")].checkpoint.tensors["trunk.0.weight"]
        b = rep.cells[("pretrained", "all")].checkpoint.tensors["trunk.0.weight"]
        assert a.tobytes() != b.tobytes()

    def test_transfer(self, tiny_experiment):
        records, exp = tiny_experiment
        rep = run_recognition_transfer(records, exp)
        assert len(rep.rows) == 4
        assert {r["arm"] for r in rep.rows} == {"detection_pretrained", "random"}
        assert sorted(k for k in rep.logs if k[0] != "detection") == [
            ("detection_pretrained", 0), ("detection_pretrained", 1), ("random", 0), ("random", 1)]
        for arm in ("detection_pretrained", "random"):
            assert 0 <= rep.mean(arm) <= 1
            assert rep.mean(arm, "top5_error") <= rep.mean(arm)
