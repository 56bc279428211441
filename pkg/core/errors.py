#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
异常类型定义
Exception Hierarchy

命令行入口根据异常类型决定退出码: UserError -> 1, InvariantError -> 2
"""


class FaceAnalysisError(Exception):
    """系统异常基类"""


class UserError(FaceAnalysisError):
    """用户输入错误 (退出码 1)"""


class ConfigError(UserError, ValueError):
    """配置错误: 未知键、类型不符或取值越界"""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"配置项 '{key}': {message}")


class DataError(UserError, ValueError):
    """数据文件错误 (清单、标注、候选框、检查点)"""

    def __init__(self, message: str, path=None):
        self.path = path
        if path is not None:
            message = f"{message} [{path}]"
        super().__init__(message)


class ShapeError(FaceAnalysisError, ValueError):
    """张量形状不匹配"""


class PreconditionError(FaceAnalysisError, ValueError):
    """操作前置条件不满足"""


class InvariantError(FaceAnalysisError, RuntimeError):
    """内部不变量失败 (退出码 2)"""


class NonFiniteError(InvariantError):
    """损失或梯度出现非有限值"""


class GradCheckError(InvariantError):
    """梯度检验超出容差"""
