import numpy as np
import pytest

from selftrain_tta.data import ShapeWorldConfig, generate
from selftrain_tta.diffgrad import Tensor, precision
from selftrain_tta.diffgrad import functional as F
from selftrain_tta.diffgrad.gradcheck import grad_check_params
from selftrain_tta.nets import (ArchDescriptor, ArchError, ModelBundle, add_predictor, add_rotation_head, encode,
                                forward, head_forward, init_model, predictor_forward, rotate_batch, rotation_batch,
                                rotation_head_forward, weight_scale)
from selftrain_tta.training import SourceTrainConfig, rotation_accuracy, train_source

SMALL = (4, 8, 8)


def _zero(model: ModelBundle, prefix: str = "") -> ModelBundle:
    for k, v in model.group(prefix).items():
        v.data = np.zeros_like(v.data)
    return model


class TestArchDescriptor:
    def test_defaults(self):
        a = ArchDescriptor()
        assert a.embed_dim == 64
        assert a.feature_size == 4

    @pytest.mark.parametrize("kw", [dict(task="pose"), dict(num_classes=1), dict(grid=0), dict(widths=()),
                                    dict(resolution=36), dict(task="detection", grid=3)])
    def test_invalid(self, kw):
        with pytest.raises(ArchError):
            ArchDescriptor(**kw).validate()

    def test_round_trip(self):
        a = ArchDescriptor(task="detection", widths=(8, 8, 16), num_classes=3, grid=2)
        assert ArchDescriptor.from_dict(a.to_dict()) == a


class TestInit:
    def test_deterministic(self):
        a = ArchDescriptor()
        assert init_model(a, 7).equals(init_model(a, 7))

    def test_seed_changes_params(self):
        a = ArchDescriptor()
        assert not init_model(a, 1).equals(init_model(a, 2))

    def test_head_shape(self):
        m = init_model(ArchDescriptor(widths=(16, 32, 32), num_classes=5), 0)
        assert m.params["head.w"].shape == (32, 5)

    def test_biases_zero(self):
        m = init_model(ArchDescriptor(task="detection"), 0)
        for k, v in m.params.items():
            if k.endswith(".b") or k.endswith("_b"):
                assert not v.data.any()

    def test_effective_scale_is_fan_in(self):
        # effective weight std ~ gain / sqrt(fan_in)
        m = init_model(ArchDescriptor(), 0)
        w = m.params["enc.conv1.w"]
        eff = w.data * weight_scale("enc.conv1.w", w.shape)
        np.testing.assert_allclose(eff.std(), np.sqrt(2 / (16 * 9)), rtol=0.1)

    def test_invalid_arch_rejected(self):
        with pytest.raises(ArchError):
            init_model(ArchDescriptor(num_classes=1), 0)


class TestCopy:
    def test_copies_are_independent(self, cls_model):
        teacher, student = cls_model.copy(), cls_model.copy()
        assert teacher.equals(student)
        teacher.params["head.w"].data = teacher.params["head.w"].data + 1
        assert not teacher.equals(student)
        assert student.equals(cls_model)


class TestEncode:
    def test_zero_image_zero_bias_gives_zero_embedding(self, cls_model):
        _, emb = encode(cls_model, np.zeros((2, 3, 32, 32), np.float32))
        assert emb.shape == (2, 8)
        assert not emb.data.any()

    def test_permutation_equivariant(self, cls_model, cls_shard):
        x = cls_shard.images[:6]
        perm = np.array([3, 0, 5, 1, 4, 2])
        a = encode(cls_model, x)[1].data
        b = encode(cls_model, x[perm])[1].data
        np.testing.assert_allclose(b, a[perm], rtol=1e-5, atol=1e-6)

    def test_pure(self, cls_model, cls_shard):
        a = forward(cls_model, cls_shard.images[:4]).logits.data
        b = forward(cls_model, cls_shard.images[:4]).logits.data
        np.testing.assert_array_equal(a, b)

    def test_resolution_mismatch(self, cls_model):
        with pytest.raises(ArchError):
            encode(cls_model, np.zeros((1, 3, 64, 64), np.float32))


class TestHeads:
    def test_zero_head_gives_uniform(self, cls_model, cls_shard):
        _zero(cls_model, "head.")
        probs = F.softmax(forward(cls_model, cls_shard.images[:3]).logits).data
        np.testing.assert_allclose(probs, 0.2, atol=1e-7)

    def test_detection_shapes(self):
        m = init_model(ArchDescriptor(task="detection", widths=SMALL, num_classes=3, grid=4), 0)
        out = forward(m, np.random.default_rng(0).random((2, 3, 32, 32)).astype(np.float32))
        assert out.logits.shape == (2, 16, 4)
        assert out.boxes.shape == (2, 16, 4)
        assert ((out.boxes.data >= 0) & (out.boxes.data <= 1)).all()

    def test_segmentation_upsampled(self, seg_shard):
        m = init_model(ArchDescriptor(task="segmentation", widths=SMALL), 0)
        out = forward(m, seg_shard.images[:2])
        assert out.logits.shape == (2, 32, 32, 6)

    @pytest.mark.parametrize("task", ["classification", "detection", "segmentation"])
    def test_softmax_sums_to_one(self, task):
        m = init_model(ArchDescriptor(task=task, widths=SMALL), 3)
        x = generate(ShapeWorldConfig(task=task, seed=1), 3).images
        probs = F.softmax(forward(m, x).logits).data
        np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-6)

    def test_feature_width_mismatch(self, cls_model):
        with pytest.raises(ArchError):
            head_forward(cls_model, Tensor(np.zeros((1, 5, 4, 4))))


class TestPredictor:
    def test_absent(self, cls_model):
        with pytest.raises(ArchError):
            predictor_forward(cls_model, Tensor(np.ones((2, 8))))

    def test_zero_weights_zero_output(self, cls_model):
        add_predictor(cls_model, 0, init="zero")
        out = predictor_forward(cls_model, Tensor(np.random.default_rng(0).normal(size=(3, 8))))
        assert not out.data.any()

    def test_identity_layers_rectify(self, cls_model):
        add_predictor(cls_model, 0, init="identity")
        x = np.random.default_rng(0).normal(size=(3, 8))
        with precision(np.float64):
            out = predictor_forward(cls_model.astype(np.float64), Tensor(x))
        np.testing.assert_allclose(out.data, np.maximum(x, 0), atol=1e-12)

    def test_two_affine_layers(self, cls_model):
        add_predictor(cls_model, 0)
        assert sorted(cls_model.group("pred.")) == ["pred.b1", "pred.b2", "pred.w1", "pred.w2"]
        assert cls_model.params["pred.w1"].shape == (8, 8)

    def test_unknown_init(self, cls_model):
        with pytest.raises(ArchError):
            add_predictor(cls_model, 0, init="orthogonal")

    def test_gradient_matches_finite_differences(self, cls_model):
        add_predictor(cls_model, 0, init="uniform")
        m = cls_model.astype(np.float64)
        e = Tensor(np.abs(np.random.default_rng(2).normal(size=(3, 8))), dtype=np.float64)
        with precision(np.float64):
            err = grad_check_params(lambda: F.sum(F.l2_norm_sq(predictor_forward(m, e), axis=-1)),
                                    m.group("pred."))
        assert err < 1e-6


class TestRotation:
    def test_head_shape(self, cls_model):
        add_rotation_head(cls_model, 0)
        assert rotation_head_forward(cls_model, Tensor(np.ones((5, 8)))).shape == (5, 4)

    def test_zero_head_uniform(self, cls_model):
        add_rotation_head(cls_model, 0)
        _zero(cls_model, "rot.")
        probs = F.softmax(rotation_head_forward(cls_model, Tensor(np.ones((2, 8))))).data
        np.testing.assert_allclose(probs, 0.25, atol=1e-7)

    def test_absent(self, cls_model):
        with pytest.raises(ArchError):
            rotation_head_forward(cls_model, Tensor(np.ones((1, 8))))

    def test_rotation_batch_labels(self, cls_shard):
        rot, labels = rotation_batch(cls_shard.images[:2])
        np.testing.assert_array_equal(labels, [0, 1, 2, 3, 0, 1, 2, 3])
        np.testing.assert_array_equal(rot[0], cls_shard.images[0])
        np.testing.assert_array_equal(rot[2], cls_shard.images[0][:, ::-1, ::-1])

    def test_four_quarter_turns_is_identity(self, cls_shard):
        x = cls_shard.images[:3]
        once = rotate_batch(x, np.ones(3, int))
        np.testing.assert_array_equal(rotate_batch(rotate_batch(once, [3, 3, 3]), [0, 0, 0]), x)

    @pytest.mark.slow
    def test_rotation_head_learns(self):
        src = generate(ShapeWorldConfig(seed=0), 1024)
        held = generate(ShapeWorldConfig(seed=8), 128)
        cfg = SourceTrainConfig(epochs=8, rotation_head=True)
        model, _ = train_source(src, ArchDescriptor(widths=(8, 16, 32)), cfg)
        assert rotation_accuracy(model, held.images) > 0.9
