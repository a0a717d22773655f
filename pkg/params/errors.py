# -*- coding: utf-8 -*-
"""
soupforge 的统一异常层级。

每个异常类带一个稳定的 `code` 字符串，CLI 与日志用它区分错误类型；
同时混入对应的内置异常基类，调用方按 ValueError / RuntimeError 捕获也能生效。
"""


class SoupForgeError(Exception):
    """所有 soupforge 异常的基类"""
    code = "soupforge_error"


class ShapeMismatchError(SoupForgeError, ValueError):
    """向量长度或形状不一致（通常意味着调用方代码有误）"""
    code = "shape_mismatch"


class LayerMapMismatchError(SoupForgeError, ValueError):
    """同一个 store 中的检查点 LayerMap 不一致"""
    code = "layer_map_mismatch"


class CheckpointFormatError(SoupForgeError, ValueError):
    """检查点文件格式错误"""
    code = "checkpoint_format"


class BadMagicError(CheckpointFormatError):
    code = "bad_magic"


class UnsupportedVersionError(CheckpointFormatError):
    code = "bad_version"


class ChecksumMismatchError(CheckpointFormatError):
    code = "crc_mismatch"


class TruncatedCheckpointError(CheckpointFormatError):
    code = "truncated"


class CheckpointNotFoundError(SoupForgeError, LookupError):
    """manifest 中不存在的检查点 ID"""
    code = "not_found"


class BudgetViolationError(SoupForgeError, RuntimeError):
    """常驻向量数将超过配置的上限"""
    code = "budget_violation"


class TrainingDivergedError(SoupForgeError, RuntimeError):
    """训练过程中出现 NaN/Inf"""
    code = "training_diverged"


class ConfigError(SoupForgeError, ValueError):
    """配置文件或命令行参数错误（CLI 退出码 2）"""
    code = "config_error"
