# -*- coding: utf-8 -*-
"""
默认规模的验收门槛
Default-scale gates: 2000/200 synthetic samples, fused network, staged
training. Deselected by default; run with ``pytest -m slow``.
"""

import numpy as np
import pytest

from core.geometry import iou
from core.postprocess import CachedScorer, iterative_region_proposals
from core.proposals import grid_proposals, proposal_recall
from core.synth_data import SynthConfig, generate_dataset, load_manifest, render_sample
from models.face_analyzer import PipelineConfig, detect, infer_regions
from models.multitask_net import NetworkSpec
from models.network_check import GradCheckConfig, run_gradcheck_suite
from models.trainer import TrainConfig, train
from utils.metrics import evaluate

pytestmark = pytest.mark.slow

N_SCENES = 200


@pytest.fixture(scope='module')
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp('acceptance')
    config = SynthConfig()
    manifest = load_manifest(generate_dataset(0, config.n_train, config.n_test, config, str(root / 'data'),
                                              progress=False))
    result = train(manifest, NetworkSpec().validate(), TrainConfig(), seed=0,
                   checkpoint_path=str(root / 'fused.mfk'), progress=False)
    return result.network, manifest.records('test')


def test_gradient_integrity():
    report = run_gradcheck_suite(NetworkSpec().validate(), GradCheckConfig(), seed=0)
    assert report.passed, f"max relative error {report.max_relative_error:.3e}"


def test_held_out_quality(trained):
    network, records = trained
    pipeline = PipelineConfig()
    detections = {r.image_path: detect(network, r.load_image(), pipeline) for r in records}
    metrics = evaluate(detections, records)
    assert metrics['detection']['ap'] >= 0.85
    assert metrics['landmarks']['nme_mean'] <= 10.0
    assert all(mae <= 10.0 for mae in metrics['pose']['mae'].values())
    assert metrics['gender']['accuracy'] >= 0.90


def test_ground_truth_boxes_score_as_faces(trained):
    network, records = trained
    threshold = PipelineConfig().final_threshold
    scores = []
    for record in records:
        if record.faces:
            preds = infer_regions(network, record.load_image(), [f.box for f in record.faces])
            scores.extend(p.detection for p in preds)
        if len(scores) >= N_SCENES:
            break
    scores = np.array(scores[:N_SCENES])
    assert np.mean(scores > threshold) >= 0.90


def test_single_face_scenes(trained):
    network, _ = trained
    config = SynthConfig(max_faces=1)
    hits = scenes = 0
    index = 0
    while scenes < N_SCENES:
        sample = render_sample(101, index, config)
        index += 1
        if len(sample.faces) != 1:
            continue
        scenes += 1
        results = detect(network, sample.image, PipelineConfig())
        if len(results) == 1 and iou(results[0].box, sample.faces[0].box) >= 0.5:
            hits += 1
    assert hits / scenes >= 0.85


def test_irp_recovers_coarse_misses(trained):
    network, records = trained
    pipeline = PipelineConfig()
    before, after = [], []
    for record in records[:N_SCENES]:
        image = record.load_image()
        _, height, width = image.shape
        coarse = grid_proposals(width, height, scales=(64.0,), stride=1.0, image_ref=record.image_path)
        scorer = CachedScorer(lambda regions, image=image: infer_regions(network, image, regions))
        gt = [face.box for face in record.faces]
        for steps, sink in ((0, before), (1, after)):
            accumulated, _, _ = iterative_region_proposals(
                scorer, coarse, steps, pipeline.candidate_threshold, pipeline.face_pad,
                pipeline.square_face_boxes, pipeline.visibility_threshold, (width, height))
            sink.append((accumulated.regions, gt))
    recall_before, n_gt = proposal_recall(before)
    recall_after, _ = proposal_recall(after)
    assert n_gt > 0
    assert recall_after >= recall_before
