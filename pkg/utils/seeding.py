#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
随机数子流
Named Random Sub-Streams

所有随机性都来自同一个全局种子, 按用途 (synth, init, shuffle, ...) 派生独立子流。
"""

import zlib

import numpy as np


def stream_id(stream: str) -> int:
    """子流名称 -> 稳定整数标识 (CRC32)"""
    return zlib.crc32(stream.encode('utf-8'))


def named_rng(seed: int, stream: str, *extra: int) -> np.random.Generator:
    """
    派生随机数生成器
    default_rng([seed, crc32(stream), *extra])
    """
    return np.random.default_rng([int(seed), stream_id(stream), *[int(e) for e in extra]])
