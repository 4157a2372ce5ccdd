"""
特徴抽出器と分類器のテスト
"""

import numpy as np
import pytest

from backbone import Backbone, BackboneConfig, Classifier, IncrementalModel, extend_classifier
from error_handler import ConfigurationError, ShapeError, StateError
from tensor_core import Tensor


class TestBackboneConfig:
    def test_stage_count_mismatch(self):
        with pytest.raises(ConfigurationError):
            BackboneConfig(channels=(4, 8), strides=(1,))

    def test_feature_dim(self):
        assert BackboneConfig(channels=(4, 8, 12), strides=(1, 2, 2)).feature_dim == 12


class TestBackbone:
    def test_feature_shape(self, tiny_backbone_config, rng):
        backbone = Backbone.create(tiny_backbone_config, rng)
        r = backbone.features(Tensor(rng.uniform(size=(5, 3, 8, 8))))
        assert r.shape == (5, 6)
        # relu 後の平均なので非負
        assert np.all(r.data >= 0)

    def test_wrong_input_shape(self, tiny_backbone_config, rng):
        backbone = Backbone.create(tiny_backbone_config, rng)
        with pytest.raises(ShapeError):
            backbone.features(Tensor(np.zeros((1, 3, 9, 9))))

    def test_expand_fuse_keeps_fingerprint(self, tiny_backbone_config, rng):
        backbone = Backbone.create(tiny_backbone_config, rng)
        expanded = backbone.expand_all()
        assert expanded.is_expanded and not backbone.is_expanded
        assert expanded.param_count() > backbone.param_count()
        fused = expanded.fuse_all()
        assert fused.fingerprint() == backbone.fingerprint()
        assert fused.param_count() == backbone.param_count()

    def test_fuse_unexpanded_rejected(self, tiny_backbone_config, rng):
        with pytest.raises(StateError):
            Backbone.create(tiny_backbone_config, rng).fuse_all()

    def test_expanded_trainables_are_adapters(self, tiny_backbone_config, rng):
        expanded = Backbone.create(tiny_backbone_config, rng).expand_all()
        names = [name for name, t in expanded.parameters() if t.requires_grad]
        assert names and all(".adapter." in name for name in names)

    def test_freeze(self, tiny_backbone_config, rng):
        backbone = Backbone.create(tiny_backbone_config, rng).expand_all()
        backbone.freeze()
        assert backbone.trainable_parameters() == []


class TestClassifier:
    def test_extend_preserves_old_rows(self, rng):
        classifier = Classifier.create(6, 3, rng)
        extended = extend_classifier(classifier, 2, rng)
        assert extended.num_classes == 5
        assert extended.frozen_rows == 3
        np.testing.assert_array_equal(extended.weight.data[:3], classifier.weight.data)
        np.testing.assert_array_equal(extended.bias.data[3:], [0.0, 0.0])
        assert np.all(np.abs(extended.weight.data[3:]) <= 1e-2)

    def test_extend_requires_positive_count(self, rng):
        with pytest.raises(ConfigurationError):
            extend_classifier(Classifier.create(6, 3, rng), 0, rng)

    def test_logits_dimension_check(self, rng):
        with pytest.raises(ShapeError):
            Classifier.create(6, 3, rng).logits(Tensor(np.zeros((2, 5))))


class TestIncrementalModel:
    def test_predict_matches_forward(self, tiny_backbone_config, rng):
        model = IncrementalModel.create(tiny_backbone_config, 4, rng)
        images = rng.uniform(size=(7, 3, 8, 8)).astype(np.float32)
        _, logits = model.forward(Tensor(images))
        np.testing.assert_array_equal(model.predict(images, batch_size=3), np.argmax(logits.data, axis=1))

    def test_copy_is_independent(self, tiny_backbone_config, rng):
        model = IncrementalModel.create(tiny_backbone_config, 4, rng)
        clone = model.copy()
        clone.classifier.weight.data[...] = 0
        assert np.any(model.classifier.weight.data != 0)
