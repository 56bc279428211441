# -*- coding: utf-8 -*-
"""评估结果输出与消融对比测试"""

import json
import math
import os

import numpy as np
import pandas as pd
import pytest

import utils.report_generator as report_module
from core.errors import DataError
from core.postprocess import DetectionResult
from core.synth_data import DatasetRecord
from models.face_analyzer import PipelineConfig
from models.multitask_net import build_network
from tests.factories import make_face, tiny_spec
from utils.metrics import evaluate
from utils.report_generator import (ABLATION_COLUMNS, ABLATION_ROWS, EvaluationReportGenerator,
                                    ablation_orderings, ablation_report, write_json, write_metrics)

PIPELINE = PipelineConfig(scales=(24.0, 32.0), candidate_threshold=0.0, final_threshold=0.0, batch_size=16)
VARIANTS = [('fused', None), ('shared-trunk', None), ('single-task', 'detection'),
            ('single-task', 'fiducial'), ('single-task', 'pose'), ('single-task', 'gender')]


@pytest.fixture()
def metrics():
    face = make_face(20, 20, 16)
    result = DetectionResult(face.box, 0.9, face.landmarks, np.array(face.pose_deg), face.gender, 0.8)
    return evaluate({'a.ppm': [result]}, [DatasetRecord('a.ppm', [face, make_face(44, 44, 16)])])


class TestWriteMetrics:
    def test_files(self, metrics, tmp_path):
        written = write_metrics(metrics, str(tmp_path))
        names = {'metrics', 'pr', 'ced_nme', 'ced_pose_roll', 'ced_pose_pitch', 'ced_pose_yaw'}
        assert set(written) == names
        with open(written['metrics'], encoding='utf-8') as f:
            assert json.load(f) == json.loads(json.dumps(metrics))
        frame = pd.read_csv(written['ced_nme'])
        assert list(frame.columns) == ['threshold', 'value']
        assert len(frame) == len(metrics['landmarks']['ced'])
        assert frame['value'].iloc[-1] == 1.0

    def test_svg_is_reproducible(self, metrics, tmp_path):
        first = write_metrics(metrics, str(tmp_path / 'a'), svg=True)
        second = write_metrics(metrics, str(tmp_path / 'b'), svg=True)
        assert 'pr_svg' in first
        with open(first['pr_svg'], 'rb') as f1, open(second['pr_svg'], 'rb') as f2:
            assert f1.read() == f2.read()

    def test_empty_curves_write_header_only(self, tmp_path):
        empty = evaluate({}, [DatasetRecord('a.ppm', [])])
        written = write_metrics(empty, str(tmp_path), svg=True)
        assert 'pr_svg' not in written
        with open(written['pr'], encoding='utf-8') as f:
            assert f.read() == 'threshold,value\n'

    def test_non_finite_values_become_null(self, tmp_path):
        path = write_json({'a': float('nan'), 'b': [np.float64(np.inf), np.int64(3)]}, str(tmp_path / 'x.json'))
        with open(path, encoding='utf-8') as f:
            assert json.load(f) == {'a': None, 'b': [None, 3]}


class TestReport:
    def test_pdf_or_text(self, metrics, tmp_path):
        path = EvaluationReportGenerator().generate_report(metrics, str(tmp_path / 'report.pdf'))
        assert os.path.exists(path)
        assert path.endswith(('.pdf', '.txt'))

    def test_text_fallback(self, metrics, tmp_path, monkeypatch):
        monkeypatch.setattr(report_module, 'SimpleDocTemplate', None)
        ablation = pd.DataFrame({c: [0.5] for c in ABLATION_COLUMNS}, index=['fused'])
        path = EvaluationReportGenerator().generate_report(metrics, str(tmp_path / 'report.pdf'), ablation)
        assert path.endswith('report.txt')
        with open(path, encoding='utf-8') as f:
            text = f.read()
        assert "AP @ IOU 0.5" in text
        assert "结构消融" in text


class TestAblation:
    def test_orderings(self):
        frame = pd.DataFrame({'ap': [0.8, 0.7, 0.6, math.nan, math.nan, math.nan],
                              'nme': [5.0, 4.0, math.nan, 6.0, math.nan, math.nan],
                              'pose_mae': math.nan, 'gender_accuracy': math.nan}, index=list(ABLATION_ROWS))
        assert ablation_orderings(frame) == {'multitask_ap_ge_single_task': True,
                                             'fused_nme_le_shared_trunk': False}
        frame.loc['fused', 'nme'] = math.nan
        assert ablation_orderings(frame)['fused_nme_le_shared_trunk'] is None

    def test_missing_rows(self, tmp_path):
        with pytest.raises(DataError, match="缺少检查点"):
            ablation_report({'fused': 'x.mfk'}, [], str(tmp_path))

    def test_table_from_untrained_networks(self, manifest, tmp_path):
        records = manifest.records('train') + manifest.records('test')
        assert sum(len(r.faces) for r in records) > 0
        checkpoints = {name: build_network(tiny_spec(arch, task), seed=1)
                       for (arch, task), name in zip(VARIANTS, ABLATION_ROWS)}
        checkpoints['single-task-pose'] = checkpoints['single-task-pose'].save(str(tmp_path / 'pose.mfk'))

        frame = ablation_report(checkpoints, records, str(tmp_path / 'out'), PIPELINE)
        assert list(frame.index) == list(ABLATION_ROWS)
        assert list(frame.columns) == list(ABLATION_COLUMNS)
        assert frame.loc['single-task-fiducial'].isna().tolist() == [True, False, True, True]
        assert frame.loc['single-task-pose'].isna().tolist() == [True, True, False, True]
        assert frame.loc['single-task-gender'].isna().tolist() == [True, True, True, False]
        assert frame.loc['fused'].notna().all()
        assert 0.0 <= frame.loc['single-task-detection', 'ap'] <= 1.0

        with open(tmp_path / 'out' / 'ablation.json', encoding='utf-8') as f:
            doc = json.load(f)
        assert [row['architecture'] for row in doc['rows']] == list(ABLATION_ROWS)
        assert doc['rows'][3]['ap'] is None
        assert set(doc['orderings']) == {'multitask_ap_ge_single_task', 'fused_nme_le_shared_trunk'}
        assert (tmp_path / 'out' / 'ablation.csv').read_text(encoding='utf-8').startswith('architecture,ap,')
