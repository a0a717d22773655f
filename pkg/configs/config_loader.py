# -*- coding: utf-8 -*-
"""
运行配置加载器，从 INI 文件读取各段配置并用 pydantic 校验。

未知的段或键一律报错（ConfigError）；[paths] 中的相对路径按配置文件所在目录解析。
环境变量 SOUPFORGE_RESIDENCY_CEILING / SOUPFORGE_JOBS 覆盖 INI 中对应的值。
"""
import configparser
import os
import typing
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Type

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from bench.bench_runner import BenchSettings
from data.dataset import DataSpec
from finetune.ingredient_factory import FinetuneSettings
from finetune.trainer import SearchGrid
from models.mlp import ModelSpec
from params.errors import ConfigError
from soup.optimizer import SoupTrainConfig

DEFAULT_CONFIG = os.path.join(os.path.dirname(os.path.abspath(__file__)), "run.ini")

_NONE_VALUES = {"", "none", "null"}


class StoreSettings(BaseModel):
    """[store] 配置段"""
    model_config = ConfigDict(extra="forbid")

    residency_ceiling: Optional[int] = Field(default=None, ge=1)
    manifest: str = "manifest.txt"


class PathSettings(BaseModel):
    """[paths] 配置段"""
    model_config = ConfigDict(extra="forbid")

    data_dir: Path = Path("data")
    checkpoint_dir: Path = Path("checkpoints")
    output_dir: Path = Path("runs")


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    data: DataSpec = Field(default_factory=DataSpec)
    model: ModelSpec = Field(default_factory=ModelSpec)
    finetune: FinetuneSettings = Field(default_factory=FinetuneSettings)
    soup: SoupTrainConfig = Field(default_factory=SoupTrainConfig)
    store: StoreSettings = Field(default_factory=StoreSettings)
    paths: PathSettings = Field(default_factory=PathSettings)
    bench: BenchSettings = Field(default_factory=BenchSettings)


SECTIONS: Dict[str, Type[BaseModel]] = {
    "data": DataSpec,
    "model": ModelSpec,
    "finetune": FinetuneSettings,
    "soup": SoupTrainConfig,
    "store": StoreSettings,
    "paths": PathSettings,
    "bench": BenchSettings,
}


def _is_list_field(model: Type[BaseModel], key: str) -> bool:
    field = model.model_fields.get(key)
    return field is not None and typing.get_origin(field.annotation) in (list, List)


def _convert(model: Type[BaseModel], key: str, raw: str) -> Any:
    """INI 的值都是字符串：列表字段按逗号拆分，none/空值视为 None，其余交给 pydantic 转换。"""
    value = raw.strip()
    if _is_list_field(model, key):
        return [item.strip() for item in value.split(",") if item.strip()]
    if value.lower() in _NONE_VALUES:
        return None
    return value


class ConfigLoader:
    """运行配置加载器，按段提供校验后的配置对象"""

    def __init__(self, config_path: Optional[str] = None):
        if config_path is None:
            config_path = DEFAULT_CONFIG
        self.config_path = Path(config_path)
        self.base_dir = self.config_path.resolve().parent
        self._sections = self._load_sections()

    def _load_sections(self) -> Dict[str, Dict[str, str]]:
        if not self.config_path.is_file():
            raise ConfigError(f"配置文件不存在: {self.config_path}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(self.config_path, "r", encoding="utf-8") as f:
                parser.read_file(f)
        except configparser.Error as e:
            raise ConfigError(f"配置文件解析失败: {self.config_path}: {e}") from e

        unknown = [name for name in parser.sections() if name not in SECTIONS]
        if unknown:
            raise ConfigError(f"未知的配置段 {unknown}，可选: {list(SECTIONS)}")
        return {name: dict(parser.items(name)) for name in parser.sections()}

    def get_section(self, name: str) -> Dict[str, Any]:
        """返回某一段转换后的原始键值（不含默认值）。"""
        model = SECTIONS[name]
        return {key: _convert(model, key, value) for key, value in self._sections.get(name, {}).items()}

    def _build(self, name: str, values: Dict[str, Any]) -> BaseModel:
        try:
            return SECTIONS[name].model_validate(values)
        except ValidationError as e:
            raise ConfigError(f"配置段 [{name}] 校验失败: {e}") from e

    def get_data_spec(self) -> DataSpec:
        return self._build("data", self.get_section("data"))

    def get_model_spec(self) -> ModelSpec:
        return self._build("model", self.get_section("model"))

    def get_finetune_settings(self) -> FinetuneSettings:
        values = self.get_section("finetune")
        grid_keys = set(SearchGrid.model_fields)
        grid = {key: values.pop(key) for key in list(values) if key in grid_keys}
        for key in grid:
            grid[key] = [item.strip() for item in grid[key].split(",")] if isinstance(grid[key], str) else grid[key]
        if grid:
            values["grid"] = grid
        return self._build("finetune", values)

    def get_soup_config(self) -> SoupTrainConfig:
        return self._build("soup", self.get_section("soup"))

    def get_store_settings(self) -> StoreSettings:
        return self._build("store", self.get_section("store"))

    def get_path_settings(self) -> PathSettings:
        paths = self._build("paths", self.get_section("paths"))
        return PathSettings(**{
            key: value if value.is_absolute() else (self.base_dir / value)
            for key, value in paths.model_dump().items()
        })

    def get_bench_settings(self) -> BenchSettings:
        return self._build("bench", self.get_section("bench"))

    def get_run_config(self) -> RunConfig:
        return RunConfig(
            data=self.get_data_spec(),
            model=self.get_model_spec(),
            finetune=self.get_finetune_settings(),
            soup=self.get_soup_config(),
            store=self.get_store_settings(),
            paths=self.get_path_settings(),
            bench=self.get_bench_settings(),
        )


def apply_env_overrides(config: RunConfig, environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """环境变量优先于 INI：SOUPFORGE_RESIDENCY_CEILING、SOUPFORGE_JOBS。"""
    environ = os.environ if environ is None else environ
    updates: Dict[str, BaseModel] = {}
    ceiling = environ.get("SOUPFORGE_RESIDENCY_CEILING")
    if ceiling:
        try:
            updates["store"] = config.store.model_copy(update={"residency_ceiling": int(ceiling)})
        except ValueError as e:
            raise ConfigError(f"SOUPFORGE_RESIDENCY_CEILING 不是整数: {ceiling}") from e
    jobs = environ.get("SOUPFORGE_JOBS")
    if jobs:
        try:
            updates["finetune"] = config.finetune.model_copy(update={"jobs": max(1, int(jobs))})
        except ValueError as e:
            raise ConfigError(f"SOUPFORGE_JOBS 不是整数: {jobs}") from e
    return config.model_copy(update=updates) if updates else config


def load_run_config(path: Optional[str] = None, environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    """读取配置文件（path 为 None 时使用内置默认 run.ini）并应用环境变量覆盖。"""
    return apply_env_overrides(ConfigLoader(path).get_run_config(), environ)
