# -*- coding: utf-8 -*-
"""网络结构、初始化与检查点测试"""

import numpy as np
import pytest

from core.errors import ConfigError, ShapeError
from models.losses import total_loss
from models.multitask_net import (ALL_HEADS, NetworkSpec, build_network, load_network,
                                  network_meta)
from models.targets import TargetBatch
from tests.factories import tiny_spec


class TestSpec:
    def test_shape_propagation(self, spec):
        shapes = spec.layer_shapes()
        assert shapes['pool1'] == (4, 8, 8)
        assert shapes['pool3'] == (8, 2, 2)
        assert shapes['adapt1'] == (4, 2, 2)
        assert shapes['concat'] == (4 + 4 + 8, 2, 2)
        assert shapes['flatten'] == (16,)
        assert shapes['head_landmarks'] == (42,)

    def test_default_spec_is_valid(self):
        shapes = NetworkSpec().validate().layer_shapes()
        assert shapes['concat'][1:] == (4, 4)

    def test_single_task_needs_task(self):
        with pytest.raises(ConfigError, match='network.task'):
            tiny_spec('single-task').validate()

    def test_fused_needs_two_taps(self):
        spec = tiny_spec()
        spec.taps = (3,)
        with pytest.raises(ConfigError, match='network.taps'):
            spec.validate()

    def test_inconsistent_layer_is_named(self):
        spec = tiny_spec()
        spec.input_size = 4
        with pytest.raises(ShapeError, match='pool'):
            spec.validate()

    def test_unknown_field_in_dict(self):
        doc = tiny_spec().to_dict()
        doc['dropout'] = 0.5
        with pytest.raises(ConfigError, match='dropout'):
            NetworkSpec.from_dict(doc)

    @pytest.mark.parametrize("arch, task, heads", [
        ('fused', None, ALL_HEADS), ('shared-trunk', None, ALL_HEADS),
        ('single-task', 'fiducial', ('landmarks', 'visibility')), ('single-task', 'gender', ('gender',))])
    def test_heads(self, arch, task, heads):
        assert tiny_spec(arch, task).heads == heads


class TestNetwork:
    def test_forward_shapes(self, spec):
        network = build_network(spec, seed=0)
        batch = np.random.default_rng(0).random((3, 3, 32, 32))
        out = network.forward(batch)
        assert out.detection.shape == (3, 2) and out.gender.shape == (3, 2)
        assert out.landmarks.shape == (3, 42) and out.visibility.shape == (3, 21)
        assert out.pose.shape == (3, 3)
        np.testing.assert_allclose(out.detection.data.sum(axis=1), 1.0)

    def test_wrong_input_size(self, spec):
        with pytest.raises(ShapeError):
            build_network(spec).forward(np.zeros((1, 3, 16, 16)))

    def test_predict_records(self, spec):
        records = build_network(spec, seed=1).predict(np.random.default_rng(1).random((2, 3, 32, 32)))
        assert len(records) == 2
        for r in records:
            assert 0.0 <= r.detection <= 1.0
            assert r.landmarks.n == 21
            assert np.all((r.landmarks.visibility >= 0) & (r.landmarks.visibility <= 1))
            assert r.gender in (0, 1)
            np.testing.assert_allclose(r.pose_deg, r.pose * 90.0)

    def test_single_task_record_lacks_other_heads(self):
        records = build_network(tiny_spec('single-task', 'pose')).predict(np.zeros((1, 3, 32, 32)))
        assert records[0].landmarks is None and records[0].gender_prob is None
        assert records[0].pose is not None

    def test_init_is_keyed_by_layer_name(self):
        fused = build_network(tiny_spec('fused'), seed=5)
        shared = build_network(tiny_spec('shared-trunk'), seed=5)
        single = build_network(tiny_spec('single-task', 'detection'), seed=5)
        for name in ('conv1.weight', 'conv3.weight', 'fc_detection.weight', 'head_detection.weight'):
            np.testing.assert_array_equal(shared.params[name].data, single.params[name].data)
        np.testing.assert_array_equal(fused.params['conv2.weight'].data, shared.params['conv2.weight'].data)
        assert not np.array_equal(build_network(tiny_spec(), seed=6).params['conv1.weight'].data,
                                  fused.params['conv1.weight'].data)

    def test_copy_trunk(self):
        source = build_network(tiny_spec('single-task', 'detection'), seed=1)
        target = build_network(tiny_spec('fused'), seed=2)
        head_before = target.params['fc_shared.weight'].data.copy()
        target.copy_trunk_from(source)
        for name in target.trunk_names():
            np.testing.assert_array_equal(target.params[name].data, source.params[name].data)
        np.testing.assert_array_equal(target.params['fc_shared.weight'].data, head_before)

    def test_float32_forward(self, spec):
        network = build_network(spec, dtype=np.float32)
        assert network.forward(np.zeros((1, 3, 32, 32))).pose.dtype == np.float32

    def test_checkpoint_restores_identical_predictions(self, spec, tmp_path):
        network = build_network(spec, seed=3)
        path = network.save(str(tmp_path / 'net.mfk'), meta={'epoch': 1})
        again = load_network(path)
        batch = np.random.default_rng(2).random((2, 3, 32, 32))
        np.testing.assert_array_equal(network.forward(batch).landmarks.data, again.forward(batch).landmarks.data)
        assert again.spec == network.spec
        assert network_meta(path) == {'epoch': 1}

    def test_state_dict_shape_mismatch(self, spec):
        network = build_network(spec)
        state = network.state_dict()
        state['conv1.bias'] = np.zeros(99)
        with pytest.raises(ShapeError, match='conv1.bias'):
            network.load_state_dict(state)


class TestFusion:
    @staticmethod
    def _landmark_targets(batch, n_landmarks):
        rng = np.random.default_rng(9)
        return TargetBatch(labels=np.ones(batch), detection_mask=np.ones(batch),
                           landmarks=rng.uniform(-0.5, 0.5, (batch, 2 * n_landmarks)),
                           visibility=np.ones((batch, n_landmarks)), landmark_mask=np.ones(batch),
                           pose=np.zeros((batch, 3)), pose_mask=np.ones(batch),
                           gender=np.ones(batch), gender_mask=np.ones(batch))

    def test_landmark_loss_reaches_earliest_adapter(self, spec):
        network = build_network(spec, seed=4)
        batch = np.random.default_rng(4).random((6, 3, 32, 32))
        total, _ = total_loss(network.forward(batch), self._landmark_targets(6, spec.n_landmarks),
                              (0.0, 1.0, 0.0, 0.0, 0.0))
        total.backward()
        grad = network.params['adapt1.weight'].grad
        assert grad is not None and np.any(grad != 0)
        assert not np.any(network.params['head_detection.weight'].grad)

    def test_shared_trunk_has_no_adapters(self):
        names = build_network(tiny_spec('shared-trunk'), seed=4).params
        assert not [name for name in names if name.startswith(('adapt', 'reduce'))]
        assert 'adapt1.weight' in build_network(tiny_spec(), seed=4).params
