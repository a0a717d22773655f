# -*- coding: utf-8 -*-
"""命名随机流：所有随机性都从一个主种子按名字派生（如 "finetune/3"、"soup/block/2"）。"""
import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """splitmix64 混合函数，输入输出均为 64 位无符号整数。"""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def derive_seed(master_seed: int, stream: str) -> int:
    """
    由主种子和流名称派生一个 64 位子种子。

    流名称用 CRC-32 转成整数，不依赖 Python 的 hash()，跨进程可复现。
    """
    if master_seed < 0:
        raise ValueError(f"master_seed 必须为非负整数，收到 {master_seed}")
    tag = zlib.crc32(stream.encode("utf-8")) & 0xFFFFFFFF
    return splitmix64((master_seed & _MASK64) ^ splitmix64(tag))


def make_rng(master_seed: int, stream: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master_seed, stream))
