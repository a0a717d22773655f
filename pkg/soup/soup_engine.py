# -*- coding: utf-8 -*-
"""
Soup 方法注册表：命令行可见的八个方法名到具体实现的映射。
"""
import logging
from typing import Callable, Dict, List, Optional

from data.dataset import Dataset
from models.mlp import ModelSpec
from params.errors import ConfigError
from params.store import CheckpointStore
from soup.methods import (
    SoupResult,
    StepCallback,
    greedy_soup,
    hl_soup,
    learned_soup_softmax,
    mehl_soup,
    uniform_soup,
)
from soup.optimizer import SoupTrainConfig

logger = logging.getLogger("SoupForge.soup")

SoupMethod = Callable[[CheckpointStore, ModelSpec, Dataset, SoupTrainConfig], SoupResult]

METHODS: List[str] = [
    "uniform",
    "greedy",
    "learned-softmax",
    "learned-softmax-plus",
    "hl",
    "hl-plus",
    "mehl",
    "mehl-plus",
]


class SoupEngine:
    """按方法名分派 soup 构造。"""

    def __init__(self):
        self._registry: Dict[str, SoupMethod] = {
            "uniform": uniform_soup,
            "greedy": greedy_soup,
            "learned-softmax": lambda s, m, v, c: learned_soup_softmax(s, m, v, c, layerwise=False),
            "learned-softmax-plus": lambda s, m, v, c: learned_soup_softmax(s, m, v, c, layerwise=True),
            "hl": lambda s, m, v, c: hl_soup(s, m, v, c, layerwise=False),
            "hl-plus": lambda s, m, v, c: hl_soup(s, m, v, c, layerwise=True),
            "mehl": lambda s, m, v, c: mehl_soup(s, m, v, c, layerwise=False),
            "mehl-plus": lambda s, m, v, c: mehl_soup(s, m, v, c, layerwise=True),
        }

    @property
    def methods(self) -> List[str]:
        return list(self._registry)

    def check_method(self, method: str) -> None:
        if method not in self._registry:
            raise ConfigError(f"未知的 soup 方法 '{method}'，可选: {', '.join(self.methods)}")

    def run(
        self,
        method: str,
        store: CheckpointStore,
        spec: ModelSpec,
        val: Dataset,
        cfg: Optional[SoupTrainConfig] = None,
        step_callback: Optional[StepCallback] = None,
    ) -> SoupResult:
        self.check_method(method)
        cfg = cfg or SoupTrainConfig()
        logger.info(f"开始构造 soup: method={method}, K={len(store)}")
        if step_callback is not None and method in ("mehl", "mehl-plus"):
            return mehl_soup(store, spec, val, cfg, layerwise=method.endswith("plus"), step_callback=step_callback)
        return self._registry[method](store, spec, val, cfg)
