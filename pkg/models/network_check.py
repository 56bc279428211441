#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
梯度检验套件
Gradient Check Suite

逐算子检验 + 多个随机种子下的整网检验 (五个损失全部激活), 汇总为一份报告。
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from core.gradcheck import BlockReport, GradCheckReport, grad_check
from core.tensor import (Tensor, concat_channels, conv2d, linear, log, maxpool2d, reduce_sum,
                         relu, softmax2)
from models.losses import DEFAULT_LAMBDAS, total_loss
from models.multitask_net import NetworkSpec, build_network
from models.targets import TargetBatch
from utils.seeding import named_rng

logger = logging.getLogger(__name__)


@dataclass
class GradCheckConfig:
    """梯度检验参数"""
    seeds: int = 20
    step: float = 1e-6
    tolerance: float = 1e-4
    entries_per_block: int = 3
    batch: int = 2
    operators: bool = True


def _leaf(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def _projected(out: Tensor, rng: np.random.Generator) -> Tensor:
    """以固定随机方向投影为标量"""
    return reduce_sum(out * rng.standard_normal(out.shape))


def operator_cases(seed: int) -> Dict[str, Tuple[Callable[[], Tensor], Dict[str, Tensor]]]:
    """算子名 -> (损失函数, 参数块)"""
    rng = named_rng(seed, 'gradcheck', 0)
    cases = {}

    x, w, b = _leaf(rng, 2, 5, 5), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)
    proj = rng.standard_normal((3, 3, 3))
    cases['conv2d'] = (lambda: reduce_sum(conv2d(x, w, b, stride=2, pad=1) * proj),
                       {'input': x, 'weight': w, 'bias': b})

    p = _leaf(rng, 4, 8, 8)
    proj_p = rng.standard_normal((4, 4, 4))
    cases['maxpool2d'] = (lambda: reduce_sum(maxpool2d(p, 2, 2) * proj_p), {'input': p})

    r = _leaf(rng, 16)
    proj_r = rng.standard_normal(16)
    cases['relu'] = (lambda: reduce_sum(relu(r) * proj_r), {'input': r})

    v, m, c = _leaf(rng, 8), _leaf(rng, 5, 8), _leaf(rng, 5)
    proj_l = rng.standard_normal(5)
    cases['linear'] = (lambda: reduce_sum(linear(v, m, c) * proj_l), {'input': v, 'weight': m, 'bias': c})

    a, d = _leaf(rng, 2, 3, 3), _leaf(rng, 3, 3, 3)
    proj_c = rng.standard_normal((5, 3, 3))
    cases['concat_channels'] = (lambda: reduce_sum(concat_channels([a, d]) * proj_c), {'first': a, 'second': d})

    z = _leaf(rng, 4, 2)
    proj_s = rng.standard_normal((4, 2))
    cases['softmax2'] = (lambda: reduce_sum(log(softmax2(z)) * proj_s), {'logits': z})
    return cases


def random_targets(rng: np.random.Generator, batch: int, n_landmarks: int) -> TargetBatch:
    """所有任务均激活的随机目标"""
    ones = np.ones(batch)
    visibility = (rng.random((batch, n_landmarks)) < 0.8).astype(np.float64)
    visibility[:, 0] = 1.0
    return TargetBatch(
        labels=rng.integers(0, 2, batch).astype(np.float64), detection_mask=ones,
        landmarks=rng.uniform(-0.5, 0.5, (batch, 2 * n_landmarks)), visibility=visibility,
        landmark_mask=ones.copy(),
        pose=rng.uniform(-0.6, 0.6, (batch, 3)), pose_mask=ones.copy(),
        gender=rng.integers(0, 2, batch).astype(np.float64), gender_mask=ones.copy(),
    )


def _merge(name: str, reports: List[BlockReport]) -> BlockReport:
    return BlockReport(
        name=name, shape=reports[0].shape,
        checked=sum(r.checked for r in reports), skipped=sum(r.skipped for r in reports),
        max_abs_error=max(r.max_abs_error for r in reports),
        max_relative_error=max(r.max_relative_error for r in reports))


def run_gradcheck_suite(spec: NetworkSpec, config: Optional[GradCheckConfig] = None, seed: int = 0,
                        lambdas=DEFAULT_LAMBDAS) -> GradCheckReport:
    """
    运行完整梯度检验
    Every operator and every network parameter block, checked over
    ``config.seeds`` seeds at 64-bit; per-block results keep the worst seed.
    """
    config = config or GradCheckConfig()
    collected: Dict[str, List[BlockReport]] = {}

    for k in range(config.seeds):
        run_seed = seed * 1000 + k
        if config.operators:
            for op_name, (loss_fn, blocks) in operator_cases(run_seed).items():
                report = grad_check(loss_fn, blocks, config.step, config.tolerance, seed=run_seed)
                for block in report.blocks:
                    collected.setdefault(f"op.{op_name}.{block.name}", []).append(block)

        network = build_network(spec, seed=run_seed, dtype=np.float64)
        rng = named_rng(run_seed, 'gradcheck', 1)
        inputs = rng.random((config.batch, 3, spec.input_size, spec.input_size))
        targets = random_targets(rng, config.batch, spec.n_landmarks)

        def network_loss() -> Tensor:
            return total_loss(network.forward(inputs), targets, lambdas)[0]

        report = grad_check(network_loss, network.params, config.step, config.tolerance,
                            config.entries_per_block, seed=run_seed)
        for block in report.blocks:
            collected.setdefault(block.name, []).append(block)
        logger.info(f"梯度检验种子 {k + 1}/{config.seeds}: 最大相对误差 {report.max_relative_error:.3e}")

    merged = GradCheckReport(step=config.step, tolerance=config.tolerance,
                             blocks=[_merge(name, blocks) for name, blocks in collected.items()])
    return merged
