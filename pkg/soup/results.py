# -*- coding: utf-8 -*-
"""
SoupResult 的落盘格式:
    soup.ckpt     soup 参数（检查点格式）
    alpha.csv     model_id,layer_name,alpha,effective_coef
    trace.csv     step,val_loss,grad_norm_sq
    members.txt   greedy 的成员 ID，每行一个
"""
import os
from pathlib import Path
from typing import Dict, Union

import pandas as pd

from params.checkpoint import write_checkpoint
from params.vector import LayerMap
from soup.methods import SoupResult

GLOBAL_LAYER = "all"
FLOAT_FORMAT = "%.17g"


def alpha_frame(result: SoupResult, layer_map: LayerMap) -> pd.DataFrame:
    """全局系数的 layer_name 记为 "all"，逐层系数每层一行。"""
    layer_names = layer_map.names if result.alpha.layerwise else [GLOBAL_LAYER]
    rows = []
    for r, cid in enumerate(result.alpha.ids):
        for l, name in enumerate(layer_names):
            rows.append({
                "model_id": cid,
                "layer_name": name,
                "alpha": result.alpha.values[r, l],
                "effective_coef": result.effective[r, l],
            })
    return pd.DataFrame(rows, columns=["model_id", "layer_name", "alpha", "effective_coef"])


def trace_frame(result: SoupResult) -> pd.DataFrame:
    return pd.DataFrame(
        [(e.step, e.val_loss, e.grad_norm_sq) for e in result.trace],
        columns=["step", "val_loss", "grad_norm_sq"],
    )


def write_soup_result(result: SoupResult, layer_map: LayerMap, out_dir: Union[str, os.PathLike]) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "soup": out_dir / "soup.ckpt",
        "alpha": out_dir / "alpha.csv",
        "trace": out_dir / "trace.csv",
    }
    write_checkpoint(layer_map, result.soup, paths["soup"])
    alpha_frame(result, layer_map).to_csv(paths["alpha"], index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    trace_frame(result).to_csv(paths["trace"], index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    if result.members is not None:
        paths["members"] = out_dir / "members.txt"
        with open(paths["members"], "w", encoding="utf-8", newline="\n") as f:
            for cid in result.members:
                f.write(f"{cid}\n")
    return paths
