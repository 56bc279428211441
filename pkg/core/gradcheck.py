#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
有限差分梯度检验
Finite-Difference Gradient Checking

对每个参数块比较反向传播梯度与中心差分梯度, 报告块内最大相对误差。
相对误差按块归一化: max|a - n| / max(max|a|, max|n|)。
若扰动使分段算子 (ReLU、池化、截断) 改变分支, 该位置不可微, 跳过并计数。
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional

import numpy as np

from core.errors import PreconditionError
from core.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass
class BlockReport:
    """单个参数块的检验结果"""
    name: str
    shape: tuple
    checked: int
    skipped: int
    max_abs_error: float
    max_relative_error: float

    def as_dict(self) -> Dict:
        return {
            'name': self.name,
            'shape': list(self.shape),
            'checked': self.checked,
            'skipped': self.skipped,
            'max_abs_error': self.max_abs_error,
            'max_relative_error': self.max_relative_error,
        }


@dataclass
class GradCheckReport:
    """梯度检验报告"""
    step: float
    tolerance: float
    blocks: List[BlockReport] = field(default_factory=list)

    @property
    def max_relative_error(self) -> float:
        return max((b.max_relative_error for b in self.blocks), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance

    def as_dict(self) -> Dict:
        return {
            'step': self.step,
            'tolerance': self.tolerance,
            'max_relative_error': self.max_relative_error,
            'passed': self.passed,
            'blocks': [b.as_dict() for b in self.blocks],
        }


def grad_check(loss_fn: Callable[[], Tensor], blocks: Mapping[str, Tensor],
               step: float = 1e-6, tolerance: float = 1e-4,
               entries_per_block: Optional[int] = None, seed: int = 0) -> GradCheckReport:
    """
    梯度检验
    Compare analytic and central-difference gradients.

    Args:
        loss_fn: 无参函数, 根据 blocks 的当前取值重新构建计算图并返回标量损失
        blocks: 名称 -> 待检验张量 (requires_grad 为 True, 原地扰动)
        step: 差分步长
        tolerance: 通过阈值 (报告中使用)
        entries_per_block: 每块最多抽查的元素数 (None 表示全部)
        seed: 抽样随机种子

    Returns:
        GradCheckReport
    """
    for name, tensor in blocks.items():
        if tensor.dtype != np.float64:
            raise PreconditionError(f"梯度检验需要 64 位精度, 参数块 {name} 为 {tensor.dtype}")

    for tensor in blocks.values():
        tensor.data = np.ascontiguousarray(tensor.data)
        tensor.grad = np.zeros_like(tensor.data)
    loss = loss_fn()
    loss.backward()
    analytic = {name: tensor.grad.copy() for name, tensor in blocks.items()}
    base_signature = loss.branch_signature()

    rng = np.random.default_rng(seed)
    report = GradCheckReport(step=step, tolerance=tolerance)
    for name, tensor in blocks.items():
        flat = tensor.data.reshape(-1)
        if entries_per_block is None or entries_per_block >= flat.size:
            entries = np.arange(flat.size)
        else:
            entries = np.sort(rng.choice(flat.size, size=entries_per_block, replace=False))

        numeric_values, analytic_values = [], []
        skipped = 0
        grad_flat = analytic[name].reshape(-1)
        for index in entries:
            original = flat[index]
            flat[index] = original + step
            plus = loss_fn()
            flat[index] = original - step
            minus = loss_fn()
            flat[index] = original
            if plus.branch_signature() != base_signature or minus.branch_signature() != base_signature:
                skipped += 1
                continue
            numeric_values.append((float(plus) - float(minus)) / (2.0 * step))
            analytic_values.append(grad_flat[index])

        numeric_arr = np.asarray(numeric_values, dtype=np.float64)
        analytic_arr = np.asarray(analytic_values, dtype=np.float64)
        if numeric_arr.size:
            abs_error = float(np.max(np.abs(numeric_arr - analytic_arr)))
            scale = max(float(np.max(np.abs(numeric_arr))), float(np.max(np.abs(analytic_arr))))
            relative = abs_error / scale if scale > 0 else 0.0
        else:
            abs_error, relative = 0.0, 0.0
        report.blocks.append(BlockReport(
            name=name, shape=tuple(tensor.shape), checked=int(numeric_arr.size),
            skipped=skipped, max_abs_error=abs_error, max_relative_error=relative))
        if skipped:
            logger.debug(f"参数块 {name}: {skipped} 个位置跨越不可微点, 已跳过")

    level = logging.INFO if report.passed else logging.WARNING
    logger.log(level, f"梯度检验完成: 最大相对误差 {report.max_relative_error:.3e} (阈值 {tolerance:.1e})")
    return report
