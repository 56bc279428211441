#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
张量与反向自动微分核心
Dense Tensor Library with Reverse-Mode Automatic Differentiation

只提供多任务人脸网络需要的算子:
conv2d, maxpool2d, relu, linear, concat_channels, softmax2
以及损失函数组合所需的逐元素运算与 log_softmax2。

特征图采用通道优先布局 (C×H×W)，批量维度放在最前 (N×C×H×W)。
"""

import contextlib
import hashlib
import logging
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from core.errors import PreconditionError, ShapeError

logger = logging.getLogger(__name__)

ArrayLike = Union[np.ndarray, float, int, Sequence]

MAX_RANK = 4

# 测试钩子: 算子名 -> 反向梯度缩放系数
_BACKWARD_SCALE: Dict[str, float] = {}


@contextlib.contextmanager
def corrupt_operator(name: str, factor: float = 1.5) -> Iterator[None]:
    """
    故意破坏某个算子的反向传播 (梯度检验的阴性对照)
    Scale the backward signal of operator ``name`` by ``factor``.
    """
    previous = _BACKWARD_SCALE.get(name)
    _BACKWARD_SCALE[name] = factor
    logger.warning(f"算子 {name} 的反向传播已被缩放 {factor} 倍 (测试钩子)")
    try:
        yield
    finally:
        if previous is None:
            _BACKWARD_SCALE.pop(name, None)
        else:
            _BACKWARD_SCALE[name] = previous


class Tensor:
    """
    计算图节点 (张量值 + 梯度累加器 + 父节点引用)
    Tape node: value, gradient accumulator, parent references.
    """

    # 让 ndarray 与 Tensor 的混合运算交给 Tensor 的反射运算符处理
    __array_ufunc__ = None

    def __init__(self, data: ArrayLike, requires_grad: bool = False,
                 op: str = "leaf", parents: Sequence["Tensor"] = (),
                 name: Optional[str] = None):
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        if array.ndim > MAX_RANK:
            raise ShapeError(f"张量最多支持 {MAX_RANK} 维, 实际形状 {array.shape}")
        if array.size == 0:
            raise ShapeError(f"张量各维长度必须 >= 1, 实际形状 {array.shape}")
        self.data = array
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self.name = name
        self._parents: Tuple["Tensor", ...] = tuple(parents)
        self._backward: Optional[Callable[[np.ndarray], None]] = None
        # 分段函数所走的分支 (ReLU 掩码、池化 argmax、截断掩码)
        self._branch: Optional[np.ndarray] = None

    # ------------------------------------------------------------------
    # 基本属性
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self)

    def __float__(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"只有单元素张量可以转换为标量, 实际形状 {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f", name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self.op}{label})"

    # ------------------------------------------------------------------
    # 反向传播
    def topological_order(self) -> List["Tensor"]:
        """父节点在前的拓扑序"""
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        return order

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """
        反向传播
        Reverse-mode sweep; leaf gradients accumulate, interior ones are reset.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"非标量张量 {self.shape} 反向传播需要显式上游梯度")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"上游梯度形状 {grad.shape} 与张量形状 {self.shape} 不一致")

        order = self.topological_order()
        for node in order:
            if node._parents:
                node.grad = np.zeros_like(node.data)
        _accumulate(self, grad)

        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            upstream = node.grad
            scale = _BACKWARD_SCALE.get(node.op)
            if scale is not None:
                upstream = upstream * scale
            node._backward(upstream)

    def branch_signature(self) -> str:
        """计算图中所有分段算子所选分支的摘要"""
        digest = hashlib.blake2b(digest_size=16)
        for node in self.topological_order():
            if node._branch is not None:
                digest.update(node.op.encode())
                digest.update(np.ascontiguousarray(node._branch).tobytes())
        return digest.hexdigest()

    # ------------------------------------------------------------------
    # 运算符重载
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("只支持除以常数")
        return mul(self, 1.0 / np.asarray(other, dtype=self.dtype))

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None) -> "Tensor":
        return reduce_sum(self, axis)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter(Tensor):
    """
    可训练参数 (值、梯度、动量缓存形状一致)
    Trainable parameter with momentum buffer.
    """

    def __init__(self, data: ArrayLike, name: Optional[str] = None):
        super().__init__(np.array(data, copy=True), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)
        self.momentum = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter(name={self.name}, shape={self.shape})"


# ----------------------------------------------------------------------
# 内部工具

def _accumulate(node: Tensor, grad: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.zeros_like(node.data)
    node.grad += grad.astype(node.dtype, copy=False)


def _lift(value, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    requires_grad = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires_grad, op=op,
                 parents=parents if requires_grad else ())
    if requires_grad:
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ----------------------------------------------------------------------
# 逐元素运算 (损失函数组合使用)

def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, "sub", (a, b), backward)


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, "mul", (a, b), backward)


def square(x: Tensor) -> Tensor:
    x = _lift(x)

    def backward(g):
        _accumulate(x, 2.0 * x.data * g)

    return _make(x.data * x.data, "square", (x,), backward)


def log(x: Tensor) -> Tensor:
    x = _lift(x)

    def backward(g):
        _accumulate(x, g / x.data)

    return _make(np.log(x.data), "log", (x,), backward)


def clamp_min(x: Tensor, low: float) -> Tensor:
    """max(x, low); 截断处梯度为 0"""
    x = _lift(x)
    mask = x.data >= low

    def backward(g):
        _accumulate(x, g * mask)

    out = _make(np.where(mask, x.data, low).astype(x.dtype), "clamp_min", (x,), backward)
    out._branch = np.packbits(mask)
    return out


def reduce_sum(x: Tensor, axis=None) -> Tensor:
    x = _lift(x)

    def backward(g):
        if axis is None:
            grad = np.broadcast_to(g, x.shape)
        else:
            grad = np.broadcast_to(np.expand_dims(g, axis), x.shape)
        _accumulate(x, np.array(grad))

    return _make(np.asarray(x.data.sum(axis=axis)), "sum", (x,), backward)


def reshape(x: Tensor, shape: Tuple[int, ...]) -> Tensor:
    x = _lift(x)

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _make(x.data.reshape(shape), "reshape", (x,), backward)


def flatten(x: Tensor) -> Tensor:
    """保留批量维, 展平其余维 (N×C×H×W -> N×CHW)"""
    return reshape(x, (x.shape[0], -1))


def take(x: Tensor, index) -> Tensor:
    x = _lift(x)

    def backward(g):
        grad = np.zeros_like(x.data)
        np.add.at(grad, index, g)
        _accumulate(x, grad)

    return _make(np.array(x.data[index]), "take", (x,), backward)


# ----------------------------------------------------------------------
# 网络算子

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """
    二维互相关卷积 (不翻转卷积核)
    2D cross-correlation. Input C×H×W or N×C×H×W, weights C_out×C_in×k×k.
    Output extent floor((H + 2·pad − k)/stride) + 1.
    """
    x = _lift(x)
    weight = _lift(weight, x)
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: 输入 {x.shape} 或权重 {weight.shape} 维度不正确")
    if stride < 1 or pad < 0:
        raise PreconditionError(f"conv2d: stride={stride} 必须 >= 1, pad={pad} 必须 >= 0")
    n, channels, height, width = xd.shape
    c_out, c_in, kh, kw = weight.shape
    if c_in != channels:
        raise ShapeError(
            f"conv2d: 权重输入通道 C_in={c_in} 与输入通道 C={channels} 不一致 "
            f"(input {x.shape}, weight {weight.shape})")
    if height + 2 * pad < kh or width + 2 * pad < kw:
        raise ShapeError(f"conv2d: 卷积核 {kh}×{kw} 大于补零后的输入 {height + 2 * pad}×{width + 2 * pad}")
    if bias is not None:
        bias = _lift(bias, x)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv2d: 偏置形状 {bias.shape} 应为 ({c_out},)")

    padded = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    out_h = (height + 2 * pad - kh) // stride + 1
    out_w = (width + 2 * pad - kw) // stride + 1
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    # N×Ho×Wo×C_out -> N×C_out×Ho×Wo
    out = np.tensordot(windows, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g4 = g[None] if squeeze else g
        if weight.requires_grad:
            _accumulate(weight, np.tensordot(g4, windows, axes=([0, 2, 3], [0, 2, 3])))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g4.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            cols = np.tensordot(g4, weight.data, axes=([1], [0]))  # N×Ho×Wo×C×kh×kw
            grad_padded = np.zeros_like(padded)
            h_span = stride * (out_h - 1) + 1
            w_span = stride * (out_w - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    grad_padded[:, :, i:i + h_span:stride, j:j + w_span:stride] += \
                        cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            grad = grad_padded[:, :, pad:pad + height, pad:pad + width] if pad else grad_padded
            _accumulate(x, grad[0] if squeeze else grad)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out[0] if squeeze else out, "conv2d", parents, backward)


def maxpool2d(x: Tensor, k: int, stride: int,
              return_indices: bool = False) -> Union[Tensor, Tuple[Tensor, np.ndarray]]:
    """
    最大池化; 相同最大值时取窗口内最小线性下标
    Max pooling. The argmax map holds the flat input index (row·W + col)
    of the selected element per output cell.
    """
    x = _lift(x)
    if k < 1 or stride < 1:
        raise PreconditionError(f"maxpool2d: k={k} 与 stride={stride} 必须 >= 1")
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4:
        raise ShapeError(f"maxpool2d: 输入形状 {x.shape} 应为 C×H×W 或 N×C×H×W")
    n, channels, height, width = xd.shape
    if k > height or k > width:
        raise PreconditionError(f"maxpool2d: 窗口 {k} 大于输入 {height}×{width}")

    out_h = (height - k) // stride + 1
    out_w = (width - k) // stride + 1
    windows = sliding_window_view(xd, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    flat = windows.reshape(n, channels, out_h, out_w, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    rows = np.arange(out_h)[:, None] * stride + arg // k
    cols = np.arange(out_w)[None, :] * stride + arg % k
    linear = rows * width + cols  # N×C×Ho×Wo

    def backward(g):
        g4 = g[None] if squeeze else g
        plane = (np.arange(n * channels).reshape(n, channels, 1, 1)) * (height * width)
        grad = np.bincount((plane + linear).ravel(), weights=g4.ravel(),
                           minlength=n * channels * height * width)
        grad = grad.reshape(n, channels, height, width).astype(x.dtype, copy=False)
        _accumulate(x, grad[0] if squeeze else grad)

    result = _make(out[0] if squeeze else out, "maxpool2d", (x,), backward)
    result._branch = linear.astype(np.int64)
    if return_indices:
        return result, (linear[0] if squeeze else linear)
    return result


def relu(x: Tensor) -> Tensor:
    """max(0, x); x == 0 处次梯度取 0"""
    x = _lift(x)
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask)

    out = _make(np.where(mask, x.data, 0).astype(x.dtype), "relu", (x,), backward)
    out._branch = np.packbits(mask)
    return out


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """
    全连接层 W·x + b
    Fully connected layer; x is a vector (n,) or a batch (N, n).
    """
    x = _lift(x)
    weight = _lift(weight, x)
    if weight.ndim != 2 or x.ndim not in (1, 2):
        raise ShapeError(f"linear: 输入 {x.shape} 或权重 {weight.shape} 维度不正确")
    m, n = weight.shape
    if x.shape[-1] != n:
        raise ShapeError(f"linear: 输入维度 {x.shape[-1]} 与权重列数 {n} 不一致")
    if bias is not None:
        bias = _lift(bias, x)
        if bias.shape != (m,):
            raise ShapeError(f"linear: 偏置形状 {bias.shape} 应为 ({m},)")

    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g @ weight.data)
        if weight.requires_grad:
            if x.ndim == 1:
                _accumulate(weight, np.outer(g, x.data))
            else:
                _accumulate(weight, g.T @ x.data)
        if bias is not None and bias.requires_grad:
            _accumulate(bias, g if g.ndim == 1 else g.sum(axis=0))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, "linear", parents, backward)


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    """
    沿通道维拼接
    Concatenate C×H×W (or N×C×H×W) tensors along the channel axis.
    """
    tensors = [_lift(t) for t in inputs]
    if not tensors:
        raise ShapeError("concat_channels: 输入列表为空")
    first = tensors[0]
    for index, tensor in enumerate(tensors[1:], start=1):
        if tensor.ndim != first.ndim or tensor.ndim not in (3, 4):
            raise ShapeError(f"concat_channels: 输入 0 {first.shape} 与输入 {index} {tensor.shape} 维度不一致")
        if tensor.shape[-2:] != first.shape[-2:] or tensor.shape[:-3] != first.shape[:-3]:
            raise ShapeError(
                f"concat_channels: 空间尺寸不一致, 输入 0 {first.shape} 与输入 {index} {tensor.shape}")
    sizes = [t.shape[-3] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=-3)

    def backward(g):
        for tensor, start, stop in zip(tensors, bounds[:-1], bounds[1:]):
            _accumulate(tensor, g[..., start:stop, :, :])

    return _make(out, "concat_channels", tensors, backward)


def softmax2(logits: Tensor) -> Tensor:
    """
    二分类 softmax (减去最大值保证数值稳定)
    Two-way softmax over the last axis.
    """
    logits = _lift(logits)
    if logits.shape[-1] != 2:
        raise ShapeError(f"softmax2: 最后一维应为 2, 实际形状 {logits.shape}")
    if not np.all(np.isfinite(logits.data)):
        raise PreconditionError("softmax2: 输入包含非有限值")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * probs).sum(axis=-1, keepdims=True)
        _accumulate(logits, probs * (g - inner))

    return _make(probs, "softmax2", (logits,), backward)


def log_softmax2(logits: Tensor) -> Tensor:
    """二分类 log-softmax (log-sum-exp 形式, 饱和时梯度不消失)"""
    logits = _lift(logits)
    if logits.shape[-1] != 2:
        raise ShapeError(f"log_softmax2: 最后一维应为 2, 实际形状 {logits.shape}")
    shifted = logits.data - logits.data.max(axis=-1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(log_probs)

    def backward(g):
        _accumulate(logits, g - probs * g.sum(axis=-1, keepdims=True))

    return _make(log_probs, "log_softmax2", (logits,), backward)


OPERATORS: Dict[str, Callable] = {
    "conv2d": conv2d,
    "maxpool2d": maxpool2d,
    "relu": relu,
    "linear": linear,
    "concat_channels": concat_channels,
    "softmax2": softmax2,
}
