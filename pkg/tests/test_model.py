import numpy as np
import pytest

from scripts.autograd import Tape, Tensor, no_grad
from scripts.errors import CheckpointError, ShapeError
from scripts.segmentation.cam import PseudoLabel
from scripts.segmentation.correspondence import (
    AffineTransform,
    apply_transform,
    equivariant_loss,
    self_correspondence_loss,
)
from scripts.segmentation.losses import (
    AffinityLabels,
    LossWeights,
    aux_affinity_loss,
    classification_loss,
    segmentation_loss,
    total_loss,
)
from scripts.segmentation.model import (
    CHECKPOINT_MAGIC,
    ModelConfig,
    TSCDNet,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

MICRO = ModelConfig(num_classes=2, channels=4, stem_channels=4)


@pytest.fixture
def image(rng):
    return rng.uniform(size=(16, 16, 3))


class TestForward:
    def test_output_shapes(self, image):
        out = TSCDNet.create(0, MICRO)(image)
        assert out.features.shape == (4, 4, 4)
        assert out.class_logits.shape == (2,)
        assert out.seg_logits.shape == (16, 16, 3)
        assert out.cam.maps.shape == (4, 4, 2)
        assert [a.shape for a in out.attention] == [(1, 16, 16), (1, 16, 16)]

    @pytest.mark.parametrize("size", [(8, 12), (24, 16)])
    def test_shapes_follow_input_size(self, rng, size):
        out = TSCDNet.create(0, MICRO)(rng.uniform(size=(*size, 3)))
        assert out.seg_logits.shape == (*size, 3)
        assert out.cam.maps.shape == (size[0] // 4, size[1] // 4, 2)

    def test_deterministic(self, image):
        net = TSCDNet.create(0, MICRO)
        a, b = net(image), net(image)
        np.testing.assert_array_equal(a.seg_logits.data, b.seg_logits.data)
        np.testing.assert_array_equal(a.class_logits.data, b.class_logits.data)

    def test_attention_rows_sum_to_one(self, image):
        out = TSCDNet.create(0, MICRO)(image)
        for weights in out.attention:
            np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_zero_heads_give_zero_outputs(self, image):
        out = TSCDNet.create(0, MICRO, zero_heads=True)(image)
        assert np.all(out.class_logits.data == 0)
        assert np.all(out.seg_logits.data == 0)

    def test_indivisible_size_rejected(self, rng):
        with pytest.raises(ShapeError):
            TSCDNet.create(0, MICRO)(rng.uniform(size=(10, 16, 3)))

    def test_random_init_outputs_are_finite(self, rng):
        out = TSCDNet.create(3)(rng.uniform(size=(64, 64, 3)))
        assert np.all(np.isfinite(out.seg_logits.data))
        assert np.all(np.isfinite(out.class_logits.data))

    def test_predict_returns_class_indices(self, image):
        pred = TSCDNet.create(0, MICRO).predict(image)
        assert pred.shape == (16, 16) and pred.max() <= 2


class TestInit:
    def test_same_seed_is_bitwise_identical(self):
        a, b = init_params(11, MICRO), init_params(11, MICRO)
        for name in a:
            np.testing.assert_array_equal(a[name].data, b[name].data)

    def test_different_seeds_differ(self):
        a, b = init_params(1, MICRO), init_params(2, MICRO)
        assert not np.array_equal(a["conv3.w"].data, b["conv3.w"].data)

    def test_scaled_uniform_bounds(self):
        params = init_params(0)
        assert np.abs(params["conv3.w"].data).max() <= 1 / np.sqrt(9 * 32)


class TestWeightSharing:
    def test_both_views_read_the_same_parameter_tensors(self, image):
        net = TSCDNet.create(0, MICRO)
        view = apply_transform(AffineTransform.hflip_rescale(0.5), image).data
        with Tape() as tape:
            net(image)
            net(view)
        for name, param in net.parameters().items():
            uses = tape.consumers(param)
            assert len(uses) == 2 or name == "cls.w" and len(uses) == 4, name

    def test_total_loss_gradients_on_micro_model(self, rng, image):
        net = TSCDNet.create(4, MICRO)
        present = np.array([True, False])
        target = PseudoLabel(rng.integers(0, 3, size=(16, 16)), 2)
        affinity = AffinityLabels(positive=np.array([[0, 5], [3, 9]]), negative=np.array([[1, 14], [2, 7]]))
        flip = AffineTransform.hflip()
        view = apply_transform(flip, image).data

        def loss():
            out1, out2 = net(image), net(view)
            seg, _ = segmentation_loss(out1.seg_logits, target)
            aux, _ = aux_affinity_loss(*out1.attention_logits, affinity)
            scd, _, _ = self_correspondence_loss(out1.cam, out2.cam, out1.seg_logits, out2.seg_logits,
                                                 flip, 8, np.random.default_rng(0))
            components = {
                "cls": classification_loss(out1.class_logits, present),
                "seg": seg,
                "aux": aux,
                "equ": equivariant_loss(out1.cam, out2.cam, flip),
                "scd": scd,
            }
            return total_loss(components, LossWeights())

        loss().backward()
        grads = {name: param.grad.copy() for name, param in net.parameters().items()}
        check_rng = np.random.default_rng(0)
        h = 1e-5
        analytic, numeric = [], []
        for name, param in net.parameters().items():
            base = param.data.copy()
            for flat in check_rng.choice(param.size, size=min(3, param.size), replace=False):
                idx = np.unravel_index(flat, param.shape)
                values = []
                for sign in (1.0, -1.0):
                    shifted = base.copy()
                    shifted[idx] += sign * h
                    param.assign_(shifted)
                    with no_grad():
                        values.append(loss().item())
                param.assign_(base)
                numeric.append((values[0] - values[1]) / (2 * h))
                analytic.append(grads[name][idx])
        analytic, numeric = np.array(analytic), np.array(numeric)
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
        assert rel <= 1e-3


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = init_params(0, MICRO)
        path = tmp_path / "ckpt.bin"
        save_checkpoint(params, path)
        loaded = load_checkpoint(path)
        assert set(loaded) == set(params)
        for name in params:
            np.testing.assert_array_equal(loaded[name].data, params[name].data)
        assert TSCDNet.from_params(loaded).config == MICRO

    def test_header_layout(self, tmp_path):
        path = tmp_path / "ckpt.bin"
        save_checkpoint({"a": Tensor(np.arange(6.0).reshape(2, 3))}, path)
        blob = path.read_bytes()
        assert blob[:8] == CHECKPOINT_MAGIC
        assert blob[8:16] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
        assert blob[16:18] == (1).to_bytes(2, "little") and blob[18:19] == b"a"
        assert blob[19] == 2
        assert np.array_equal(np.frombuffer(blob[-48:], dtype="<f8"), np.arange(6.0))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"NOTACKPT" + bytes(16))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "ckpt.bin"
        save_checkpoint(init_params(0, MICRO), path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_missing_parameters(self):
        params = init_params(0, MICRO)
        del params["seg.b"]
        with pytest.raises(CheckpointError):
            TSCDNet.from_params(params)
