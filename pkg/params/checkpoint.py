# -*- coding: utf-8 -*-
"""
二进制检查点格式（小端）:

    magic "SOUP" | version u32 | layer_count u32
    每层: name_len u32 | name (UTF-8) | ndim u32 | dims u32 × ndim | payload real64 × prod(dims)
    trailer: 所有 payload 字节的 CRC-32

payload 按行主序存放，读写逐位一致。
"""
import os
import struct
import zlib
from pathlib import Path
from typing import Iterator, List, Tuple, Union

import numpy as np

from params.errors import (
    BadMagicError,
    ChecksumMismatchError,
    CheckpointFormatError,
    ShapeMismatchError,
    TruncatedCheckpointError,
    UnsupportedVersionError,
)
from params.vector import LayerMap, LayerSpec, ParamVector, check_finite, check_length

MAGIC = b"SOUP"
VERSION = 1

_U32 = struct.Struct("<I")
_HEADER = struct.Struct("<4sII")
_PAYLOAD_DTYPE = np.dtype("<f8")
_MAX_NAME_LEN = 1 << 16
_MAX_NDIM = 32

PathLike = Union[str, os.PathLike]


def write_checkpoint(layer_map: LayerMap, params: ParamVector, path: PathLike) -> None:
    """把 (LayerMap, ParamVector) 写成检查点文件，先写临时文件再原子替换。"""
    if layer_map.layer_count == 0:
        raise ShapeMismatchError("LayerMap 至少需要一层")
    params = check_finite(check_length(params, layer_map.total_len), "检查点参数")
    for layer in layer_map.layers:
        if len(layer.name.encode("utf-8")) > _MAX_NAME_LEN:
            raise CheckpointFormatError(f"层名称超过 {_MAX_NAME_LEN} 字节: {layer.name[:32]}...")
        if len(layer.shape) > _MAX_NDIM:
            raise CheckpointFormatError(f"层 {layer.name} 的维数 {len(layer.shape)} 超过 {_MAX_NDIM}")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")

    crc = 0
    with open(tmp_path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, layer_map.layer_count))
        for layer in layer_map.layers:
            name = layer.name.encode("utf-8")
            f.write(_U32.pack(len(name)))
            f.write(name)
            f.write(_U32.pack(len(layer.shape)))
            f.write(struct.pack(f"<{len(layer.shape)}I", *layer.shape))
            payload = params[layer.offset:layer.stop].astype(_PAYLOAD_DTYPE).tobytes()
            crc = zlib.crc32(payload, crc)
            f.write(payload)
        f.write(_U32.pack(crc & 0xFFFFFFFF))
    os.replace(tmp_path, path)


class _Reader:
    """带截断检测的顺序读取器"""

    def __init__(self, f, path: PathLike):
        self.f = f
        self.path = path

    def read_exact(self, n: int) -> bytes:
        data = self.f.read(n)
        if len(data) != n:
            raise TruncatedCheckpointError(f"检查点文件被截断: {self.path}")
        return data

    def u32(self) -> int:
        return _U32.unpack(self.read_exact(_U32.size))[0]


def _scan(f, path: PathLike) -> Tuple[LayerMap, List[int], int]:
    """
    只解析结构、跳过 payload。

    :return: (LayerMap, 每层 payload 在文件中的起始位置, 文件中记录的 CRC)
    """
    reader = _Reader(f, path)
    f.seek(0, os.SEEK_END)
    file_size = f.tell()
    f.seek(0)

    magic = reader.read_exact(len(MAGIC))
    if magic != MAGIC:
        raise BadMagicError(f"magic 不匹配 ({magic!r})，不是 soupforge 检查点: {path}")
    version = reader.u32()
    if version != VERSION:
        raise UnsupportedVersionError(f"不支持的检查点版本 {version}: {path}")
    layer_count = reader.u32()
    if layer_count == 0:
        raise CheckpointFormatError(f"检查点不含任何层: {path}")

    shapes = []
    positions: List[int] = []
    for _ in range(layer_count):
        name_len = reader.u32()
        if name_len > _MAX_NAME_LEN:
            raise CheckpointFormatError(f"层名称长度异常 ({name_len}): {path}")
        try:
            name = reader.read_exact(name_len).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointFormatError(f"层名称不是合法的 UTF-8: {path}") from e
        ndim = reader.u32()
        if ndim == 0 or ndim > _MAX_NDIM:
            raise CheckpointFormatError(f"层 {name} 的维数异常 ({ndim}): {path}")
        dims = struct.unpack(f"<{ndim}I", reader.read_exact(4 * ndim))
        shapes.append((name, dims))
        positions.append(f.tell())
        nbytes = int(np.prod(dims)) * _PAYLOAD_DTYPE.itemsize
        if f.tell() + nbytes > file_size:
            raise TruncatedCheckpointError(f"检查点文件被截断: {path}")
        f.seek(nbytes, os.SEEK_CUR)

    stored_crc = reader.u32()
    if f.tell() != file_size:
        raise CheckpointFormatError(f"检查点末尾存在多余字节: {path}")

    try:
        layer_map = LayerMap.from_shapes(shapes)
    except ShapeMismatchError as e:
        raise CheckpointFormatError(f"检查点层结构非法: {e}") from e
    return layer_map, positions, stored_crc


def read_layer_map(path: PathLike) -> LayerMap:
    """只读取层结构，不加载参数（不计入常驻向量）。"""
    with open(path, "rb") as f:
        layer_map, _, _ = _scan(f, path)
    return layer_map


def iter_checkpoint_layers(path: PathLike) -> Iterator[Tuple[LayerSpec, np.ndarray]]:
    """
    逐层流式读取检查点，每次只持有一层的数据。

    CRC 在最后一层产出之后校验，不匹配时抛出 ChecksumMismatchError。
    """
    with open(path, "rb") as f:
        layer_map, positions, stored_crc = _scan(f, path)
        reader = _Reader(f, path)
        crc = 0
        for layer, pos in zip(layer_map.layers, positions):
            f.seek(pos)
            raw = reader.read_exact(layer.size * _PAYLOAD_DTYPE.itemsize)
            crc = zlib.crc32(raw, crc)
            yield layer, np.frombuffer(raw, dtype=_PAYLOAD_DTYPE).astype(np.float64)
        if (crc & 0xFFFFFFFF) != stored_crc:
            raise ChecksumMismatchError(f"CRC 校验失败，检查点已损坏: {path}")


def read_checkpoint(path: PathLike) -> Tuple[LayerMap, ParamVector]:
    """读取整个检查点，返回 (LayerMap, ParamVector)，并校验 CRC。"""
    with open(path, "rb") as f:
        layer_map, positions, stored_crc = _scan(f, path)
        reader = _Reader(f, path)
        params = np.empty(layer_map.total_len, dtype=np.float64)
        crc = 0
        for layer, pos in zip(layer_map.layers, positions):
            f.seek(pos)
            raw = reader.read_exact(layer.size * _PAYLOAD_DTYPE.itemsize)
            crc = zlib.crc32(raw, crc)
            params[layer.offset:layer.stop] = np.frombuffer(raw, dtype=_PAYLOAD_DTYPE)
    if (crc & 0xFFFFFFFF) != stored_crc:
        raise ChecksumMismatchError(f"CRC 校验失败，检查点已损坏: {path}")
    return layer_map, params
