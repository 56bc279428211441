# -*- coding: utf-8 -*-
"""共享测试夹具: 小尺寸网络与小型合成数据集"""

import pytest

from core.synth_data import generate_dataset, load_manifest
from tests.factories import DATA_SEED, tiny_spec, tiny_synth


@pytest.fixture
def spec():
    return tiny_spec()


@pytest.fixture(scope='session')
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp('synth')
    generate_dataset(DATA_SEED, 6, 3, tiny_synth(), str(out), progress=False)
    return str(out)


@pytest.fixture(scope='session')
def manifest(dataset_dir):
    return load_manifest(dataset_dir)
