#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
参数检查点读写 (MFK1 二进制容器)
Parameter Checkpoint Container

布局:
    b"MFK1" | uint8 精度字节数 (4 或 8) | uint32 清单长度 | 清单 JSON (UTF-8)
    | 按清单顺序排列的小端标量块
清单包含各层名称与形状、网络结构描述及训练元数据。
"""

import json
import logging
import os
import struct
from collections import OrderedDict
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from core.errors import DataError

logger = logging.getLogger(__name__)

MAGIC = b"MFK1"
FORMAT_VERSION = 1
_DTYPES = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def save_checkpoint(path: str, params: Mapping[str, np.ndarray],
                    spec: Optional[Dict] = None, meta: Optional[Dict] = None) -> str:
    """
    保存检查点 (先写临时文件再原子替换, 保证旧检查点在失败时仍然完整)
    Save parameters in manifest order.
    """
    arrays = OrderedDict((name, np.asarray(getattr(value, 'data', value))) for name, value in params.items())
    if not arrays:
        raise DataError("检查点不能为空", path)
    itemsize = next(iter(arrays.values())).dtype.itemsize
    if itemsize not in _DTYPES:
        raise DataError(f"不支持的精度: {itemsize} 字节", path)
    dtype = _DTYPES[itemsize]

    manifest = {
        'format_version': FORMAT_VERSION,
        'params': [{'name': name, 'shape': list(array.shape)} for name, array in arrays.items()],
        'spec': spec or {},
        'meta': meta or {},
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True, separators=(',', ':')).encode('utf-8')

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    try:
        with open(tmp_path, 'wb') as f:
            f.write(MAGIC)
            f.write(struct.pack('<BI', itemsize, len(manifest_bytes)))
            f.write(manifest_bytes)
            for array in arrays.values():
                f.write(np.ascontiguousarray(array, dtype=dtype).tobytes())
        os.replace(tmp_path, path)
    except OSError as e:
        logger.error(f"写入检查点失败: {str(e)}")
        raise DataError(f"写入检查点失败: {e}", path) from e

    logger.info(f"检查点已保存: {path} ({len(arrays)} 个参数块, {itemsize * 8} 位)")
    return path


def load_checkpoint(path: str) -> Tuple[Dict, "OrderedDict[str, np.ndarray]"]:
    """
    读取检查点
    Load a checkpoint; returns (manifest, name -> array).
    """
    if not os.path.exists(path):
        raise DataError("检查点文件不存在", path)
    try:
        with open(path, 'rb') as f:
            payload = f.read()
    except OSError as e:
        raise DataError(f"读取检查点失败: {e}", path) from e

    if payload[:4] != MAGIC:
        raise DataError("不是 MFK1 检查点文件 (魔数不符)", path)
    try:
        itemsize, manifest_len = struct.unpack_from('<BI', payload, 4)
        offset = 4 + struct.calcsize('<BI')
        manifest = json.loads(payload[offset:offset + manifest_len].decode('utf-8'))
    except (struct.error, ValueError) as e:
        raise DataError(f"检查点头部损坏: {e}", path) from e
    if itemsize not in _DTYPES:
        raise DataError(f"不支持的精度标志: {itemsize}", path)
    dtype = _DTYPES[itemsize]
    offset += manifest_len

    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for entry in manifest.get('params', []):
        shape = tuple(entry['shape'])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * itemsize
        if offset + nbytes > len(payload):
            raise DataError(f"检查点数据截断于参数块 {entry['name']}", path)
        block = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
        arrays[entry['name']] = block.reshape(shape).astype(dtype.newbyteorder('='))
        offset += nbytes
    if offset != len(payload):
        raise DataError("检查点末尾存在多余数据", path)

    logger.info(f"检查点已加载: {path} ({len(arrays)} 个参数块)")
    return manifest, arrays
