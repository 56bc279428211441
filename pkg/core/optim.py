#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
带动量与权重衰减的随机梯度下降
SGD with Momentum and Weight Decay
"""

import logging
from typing import Iterable

import numpy as np

from core.errors import NonFiniteError, PreconditionError
from core.tensor import Parameter

logger = logging.getLogger(__name__)


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> None:
    """
    执行一步参数更新 (原地修改)
    v <- momentum·v + grad + weight_decay·value; value <- value - lr·v; grad <- 0

    Args:
        params: 参数列表
        lr: 学习率 (> 0)
        momentum: 动量系数, 0 <= momentum < 1
        weight_decay: 权重衰减系数
    """
    if not lr > 0:
        raise PreconditionError(f"学习率必须为正数: lr={lr}")
    if not 0 <= momentum < 1:
        raise PreconditionError(f"动量系数必须在 [0, 1) 内: momentum={momentum}")

    params = list(params)
    for param in params:
        if not np.all(np.isfinite(param.grad)):
            logger.error(f"参数 {param.name} 的梯度包含非有限值, 终止训练")
            raise NonFiniteError(f"参数 {param.name} 的梯度包含非有限值")

    for param in params:
        param.momentum *= momentum
        param.momentum += param.grad
        if weight_decay:
            param.momentum += weight_decay * param.data
        param.data -= lr * param.momentum
        param.zero_grad()
