# -*- coding: utf-8 -*-
"""运行配置测试"""

import pytest

from core.errors import ConfigError
from utils.config import DESCRIPTIONS, RunConfig, parse_value


@pytest.mark.parametrize("text,expected", [
    ('true', True), (' FALSE ', False), ('None', None), ('null', None),
    ('3', 3), ('2.5e-3', 0.0025), ('(1, 2)', (1, 2)), ('[32, 48]', [32, 48]),
    ("'fused'", 'fused'), ('shared-trunk', 'shared-trunk'),
])
def test_parse_value(text, expected):
    assert parse_value(text) == expected


class TestSet:
    def test_section_and_top_level_keys(self):
        config = RunConfig()
        config.set('train.lr', 0.05)
        config.set('seed', 11)
        config.set('network.task', 'pose')
        assert (config.train.lr, config.seed, config.network.task) == (0.05, 11, 'pose')

    def test_int_promotes_to_float(self):
        config = RunConfig()
        config.set('train.momentum', 0)
        assert isinstance(config.train.momentum, float)

    def test_scalar_becomes_single_element_tuple(self):
        config = RunConfig()
        config.set('pipeline.scales', 24)
        assert config.pipeline.scales == (24.0,)
        config.set('network.trunk_channels', [4, 8.0])
        assert config.network.trunk_channels == (4, 8)

    @pytest.mark.parametrize("key,value", [
        ('train.lr', 'fast'), ('train.epochs', 2.5), ('train.epochs', True),
        ('network.trunk_channels', (4, 8.5)), ('pipeline.square_face_boxes', 1),
        ('network.task', 3), ('eval.normalizer', 2),
    ])
    def test_type_mismatch_names_the_key(self, key, value):
        with pytest.raises(ConfigError) as info:
            RunConfig().set(key, value)
        assert info.value.key == key

    @pytest.mark.parametrize("key", ['bogus.x', 'train.nope', 'train', 'lr'])
    def test_unknown_keys(self, key):
        with pytest.raises(ConfigError, match="未知配置项"):
            RunConfig().set(key, 1)


class TestLoad:
    def test_file_then_overrides(self, tmp_path):
        path = tmp_path / 'run.cfg'
        path.write_text("# 小规模\nseed = 9\n\ntrain.epochs = 3\npipeline.scales = (24, 32)\n",
                        encoding='utf-8')
        config = RunConfig.load(str(path), ['train.epochs=5', 'network.arch = shared-trunk'])
        assert config.seed == 9
        assert config.train.epochs == 5
        assert config.pipeline.scales == (24.0, 32.0)
        assert config.network.arch == 'shared-trunk'

    def test_bad_line_reports_position(self, tmp_path):
        path = tmp_path / 'run.cfg'
        path.write_text("seed = 1\njust words\n", encoding='utf-8')
        with pytest.raises(ConfigError) as info:
            RunConfig.load(str(path))
        assert info.value.key == 'run.cfg:2'

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError, match="不存在"):
            RunConfig.load(str(tmp_path / 'absent.cfg'))

    def test_override_needs_equals(self):
        with pytest.raises(ConfigError, match="key=value"):
            RunConfig.load(None, ['train.lr'])

    def test_validation_runs_after_overrides(self):
        with pytest.raises(ConfigError, match="train.lr"):
            RunConfig.load(None, ['train.lr=-1'])
        with pytest.raises(ConfigError, match="threads"):
            RunConfig.load(None, ['threads=0'])

    def test_landmark_counts_must_agree(self):
        with pytest.raises(ConfigError) as info:
            RunConfig.load(None, ['network.n_landmarks=5'])
        assert info.value.key == 'network.n_landmarks'
        config = RunConfig.load(None, ['network.n_landmarks=5', 'synth.n_landmarks=5'])
        assert config.network_spec().n_landmarks == 5

    @pytest.mark.parametrize("key", ['candidate_threshold', 'nms_overlap'])
    def test_pipeline_probabilities_bounded(self, key):
        with pytest.raises(ConfigError, match=f"pipeline.{key}"):
            RunConfig.load(None, [f'pipeline.{key}=1.5'])

    def test_dumps_reloads_to_same_values(self, tmp_path):
        config = RunConfig.load(None, ['seed=4', 'network.arch=single-task', "network.task='gender'",
                                       'eval.normalizer=interocular', 'gradcheck.operators=false'])
        path = tmp_path / 'dump.cfg'
        path.write_text(config.dumps(), encoding='utf-8')
        assert RunConfig.load(str(path)).to_dict() == config.to_dict()


class TestDescribe:
    def test_every_key_is_documented(self):
        keys = [key for key, _ in RunConfig().items()]
        assert set(keys) == set(DESCRIPTIONS)
        text = RunConfig.describe()
        for key in keys:
            assert f"  {key} = " in text

    def test_network_variants(self):
        config = RunConfig()
        spec = config.network_spec('single-task', 'pose')
        assert (spec.arch, spec.task) == ('single-task', 'pose')
        assert config.network.arch == 'fused'
        assert config.lambdas() == config.train.lambdas
