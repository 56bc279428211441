# -*- coding: utf-8 -*-
"""命令行端到端测试: synth -> train -> detect -> eval, 以及退出码"""

import json
import os

import pytest

from core.synth_data import load_manifest
from main import build_parser, load_detections, main
from utils.metrics import validate_metrics

TINY = [
    'synth.image_size=64', 'synth.max_faces=2', 'synth.face_min=24', 'synth.face_max=40',
    'synth.n_train=6', 'synth.n_test=3',
    'network.input_size=32', 'network.trunk_channels=(4, 8, 8)', 'network.adapter_channels=4',
    'network.reduce_channels=4', 'network.fc_width=16', 'network.head_width=8',
    'train.epochs=1', 'train.stage_a_epochs=1', 'train.batch_size=8', 'train.rois_per_image=4',
    'train.gt_jitter=2', 'train.scales=(24, 32)', 'train.precision=float64',
    'pipeline.scales=(24, 32)', 'pipeline.candidate_threshold=0', 'pipeline.final_threshold=0',
    'gradcheck.seeds=1', 'gradcheck.entries_per_block=1', 'gradcheck.batch=1',
]


def run(*argv, overrides=TINY):
    args = list(argv) + ['--quiet', '--log-dir', '']
    for item in overrides:
        args += ['--set', item]
    return main(args)


@pytest.fixture(scope='module')
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp('cli')
    data, ckpt = str(root / 'data'), str(root / 'fused.mfk')
    assert run('synth', '--out', data) == 0
    assert run('train', '--data', data, '--out', ckpt) == 0
    return root, data, ckpt


class TestPipeline:
    def test_synth_writes_manifest(self, workspace):
        _, data, _ = workspace
        manifest = load_manifest(data)
        assert len(manifest.records('train')) == 6
        assert len(manifest.records('test')) == 3

    def test_train_writes_checkpoint_and_log(self, workspace):
        root, _, ckpt = workspace
        assert os.path.exists(ckpt)
        assert os.path.exists(root / 'fused.stageA.mfk')
        assert os.path.exists(root / 'fused.loss.csv')

    def test_detect_then_eval(self, workspace):
        root, data, ckpt = workspace
        out = root / 'det'
        assert run('detect', '--checkpoint', ckpt, '--input', data, '--out', str(out), '--annotate') == 0
        detections = load_detections(str(out / 'detections.jsonl'))
        test_images = {r.image_path for r in load_manifest(data).records('test')}
        assert set(detections) <= test_images
        for image_path in test_images:
            stem = os.path.splitext(os.path.basename(image_path))[0]
            assert (out / 'annotated' / f'{stem}.ppm').exists()
            assert (out / 'annotated' / f'{stem}.svg').exists()

        report = root / 'eval'
        assert run('eval', '--results', str(out / 'detections.jsonl'), '--data', data,
                   '--out', str(report), '--svg') == 0
        with open(report / 'metrics.json', encoding='utf-8') as f:
            validate_metrics(json.load(f))
        assert (report / 'pr.csv').exists()

        again = root / 'eval2'
        assert run('eval', '--results', str(out / 'detections.jsonl'), '--data', data,
                   '--out', str(again), '--svg') == 0
        for name in ('metrics.json', 'pr.csv', 'ced_nme.csv'):
            assert (report / name).read_bytes() == (again / name).read_bytes()

    def test_detect_is_reproducible(self, workspace):
        root, data, ckpt = workspace
        outputs = []
        for name, threads in (('r1', '1'), ('r2', '3')):
            assert run('detect', '--checkpoint', ckpt, '--input', data, '--out', str(root / name),
                       '--threads', threads) == 0
            outputs.append((root / name / 'detections.jsonl').read_bytes())
        assert outputs[0] == outputs[1]

    def test_single_image_with_proposals(self, workspace):
        root, data, ckpt = workspace
        image = load_manifest(data).records('test')[0].image_path
        proposals = root / 'proposals.txt'
        proposals.write_text(f"{image} 32 32 30 30\n", encoding='utf-8')
        out = root / 'single'
        assert run('detect', '--checkpoint', ckpt, '--input', image, '--proposals', str(proposals),
                   '--out', str(out)) == 0
        for line in (out / 'detections.jsonl').read_text(encoding='utf-8').splitlines():
            assert json.loads(line)['image'] == image


class TestExitCodes:
    def test_unknown_config_key(self, tmp_path):
        assert run('synth', '--out', str(tmp_path / 'x'), overrides=['synth.colour=1']) == 1
        assert not (tmp_path / 'x').exists()

    def test_missing_checkpoint_creates_nothing(self, workspace, tmp_path):
        _, data, _ = workspace
        out = tmp_path / 'det'
        assert run('detect', '--checkpoint', str(tmp_path / 'none.mfk'), '--input', data, '--out', str(out)) == 1
        assert not out.exists()

    def test_malformed_results(self, workspace, tmp_path):
        _, data, _ = workspace
        results = tmp_path / 'bad.jsonl'
        results.write_text('{"image": "a.ppm"}\n', encoding='utf-8')
        assert run('eval', '--results', str(results), '--data', data, '--out', str(tmp_path / 'e')) == 1

    def test_usage_error(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(['detect', '--input', 'x'])
        assert info.value.code == 1
        with pytest.raises(SystemExit) as info:
            main([])
        assert info.value.code == 1

    def test_help_lists_config_keys(self, capsys):
        with pytest.raises(SystemExit) as info:
            build_parser().parse_args(['--help'])
        assert info.value.code == 0
        assert 'train.lr' in capsys.readouterr().out


class TestGradcheck:
    def test_passes_and_writes_report(self, tmp_path, capsys):
        out = tmp_path / 'gradcheck.json'
        assert run('gradcheck', '--out', str(out)) == 0
        assert 'max relative error' in capsys.readouterr().out
        with open(out, encoding='utf-8') as f:
            assert json.load(f)['passed'] is True

    def test_corrupted_operator_exits_2(self, tmp_path):
        out = tmp_path / 'gradcheck.json'
        assert run('gradcheck', '--corrupt-op', 'linear', '--out', str(out)) == 2
        with open(out, encoding='utf-8') as f:
            assert json.load(f)['passed'] is False

    def test_unknown_operator(self):
        assert run('gradcheck', '--corrupt-op', 'dropout') == 1


def test_ablate(workspace, tmp_path):
    _, data, _ = workspace
    out = tmp_path / 'ablate'
    assert run('ablate', '--data', data, '--out', str(out)) == 0
    assert (out / 'ablation.csv').exists()
    assert len(list((out / 'checkpoints').glob('*.mfk'))) >= 6

