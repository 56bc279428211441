# -*- coding: utf-8 -*-
"""优化器、梯度检验与检查点测试"""

import numpy as np
import pytest

from core.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from core.errors import DataError, NonFiniteError, PreconditionError
from core.gradcheck import grad_check
from core.optim import sgd_step
from core.tensor import Parameter, Tensor, reduce_sum, relu


class TestSgd:
    def test_momentum_and_decay_update(self):
        p = Parameter(np.array([1.0, -2.0]), name='w')
        p.grad = np.array([0.5, 0.5])
        sgd_step([p], lr=0.1, momentum=0.9, weight_decay=0.1)
        # v = grad + wd·value
        np.testing.assert_allclose(p.momentum, [0.6, 0.3])
        np.testing.assert_allclose(p.data, [0.94, -2.03])
        np.testing.assert_array_equal(p.grad, [0.0, 0.0])

        p.grad = np.array([0.0, 0.0])
        before = p.data.copy()
        sgd_step([p], lr=0.1, momentum=0.9, weight_decay=0.0)
        np.testing.assert_allclose(p.momentum, [0.54, 0.27])
        np.testing.assert_allclose(p.data, before - 0.1 * np.array([0.54, 0.27]))

    def test_non_finite_gradient_aborts_before_any_update(self):
        good, bad = Parameter(np.ones(2), name='good'), Parameter(np.ones(2), name='bad')
        good.grad = np.ones(2)
        bad.grad = np.array([np.nan, 0.0])
        with pytest.raises(NonFiniteError, match='bad'):
            sgd_step([good, bad], lr=0.1)
        np.testing.assert_array_equal(good.data, [1.0, 1.0])

    @pytest.mark.parametrize("lr, momentum", [(0.0, 0.5), (0.1, 1.0), (0.1, -0.1)])
    def test_hyperparameter_ranges(self, lr, momentum):
        with pytest.raises(PreconditionError):
            sgd_step([Parameter(np.ones(1))], lr=lr, momentum=momentum)


class TestGradCheck:
    def test_requires_float64(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        with pytest.raises(PreconditionError):
            grad_check(lambda: reduce_sum(x * x), {'x': x})

    def test_skips_kinks(self):
        # relu 恰在 0 附近的元素被跳过
        x = Tensor(np.array([1e-9, 1.0, -1.0]), requires_grad=True)
        report = grad_check(lambda: reduce_sum(relu(x)), {'x': x}, step=1e-6)
        assert report.blocks[0].skipped == 1
        assert report.blocks[0].checked == 2
        assert report.passed

    def test_report_dict(self):
        x = Tensor(np.array([0.3, 0.7]), requires_grad=True)
        doc = grad_check(lambda: reduce_sum(x * x * x), {'x': x}).as_dict()
        assert doc['passed'] is True
        assert doc['blocks'][0]['name'] == 'x'
        assert doc['blocks'][0]['shape'] == [2]


class TestCheckpoint:
    def test_save_load_preserves_order_and_values(self, tmp_path):
        params = {'conv1.w': np.arange(6.0).reshape(2, 3), 'fc.b': np.array([0.5, -1.5])}
        path = save_checkpoint(str(tmp_path / 'm.mfk'), params, spec={'arch': 'fused'}, meta={'epoch': 3})
        manifest, arrays = load_checkpoint(path)
        assert list(arrays) == ['conv1.w', 'fc.b']
        np.testing.assert_array_equal(arrays['conv1.w'], params['conv1.w'])
        assert manifest['spec'] == {'arch': 'fused'}
        assert manifest['meta'] == {'epoch': 3}

    def test_float32_precision_flag(self, tmp_path):
        path = save_checkpoint(str(tmp_path / 'm.mfk'), {'w': np.ones(3, dtype=np.float32)})
        with open(path, 'rb') as f:
            head = f.read(5)
        assert head[:4] == MAGIC and head[4] == 4
        assert load_checkpoint(path)[1]['w'].dtype == np.float32

    def test_bad_magic(self, tmp_path):
        path = tmp_path / 'bad.mfk'
        path.write_bytes(b'NOPE' + b'\x00' * 16)
        with pytest.raises(DataError, match='魔数'):
            load_checkpoint(str(path))

    def test_truncated_payload(self, tmp_path):
        path = save_checkpoint(str(tmp_path / 'm.mfk'), {'w': np.ones(10)})
        data = open(path, 'rb').read()
        (tmp_path / 'cut.mfk').write_bytes(data[:-8])
        with pytest.raises(DataError, match='截断'):
            load_checkpoint(str(tmp_path / 'cut.mfk'))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_checkpoint(str(tmp_path / 'none.mfk'))

    def test_failed_save_keeps_previous_file(self, tmp_path, monkeypatch):
        path = str(tmp_path / 'm.mfk')
        save_checkpoint(path, {'w': np.ones(2)})

        def boom(*args, **kwargs):
            raise OSError("disk full")

        monkeypatch.setattr('core.checkpoint.os.replace', boom)
        with pytest.raises(DataError):
            save_checkpoint(path, {'w': np.zeros(2)})
        monkeypatch.undo()
        np.testing.assert_array_equal(load_checkpoint(path)[1]['w'], [1.0, 1.0])
