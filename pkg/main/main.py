# -*- coding: utf-8 -*-
"""
主控制脚本 (Main Controller Script)

soupforge 的命令行入口，串起整条流水线：

1.  **gen**: 按 [data] 生成 train/val/test 三个 CSV。
2.  **finetune**: 预训练 θ_0，随机搜索 K 组超参数并微调，写出检查点和 manifest。
3.  **soup**: 用指定方法（uniform / greedy / learned-softmax(-plus) / hl(-plus) / mehl(-plus)）构造 soup。
4.  **eval**: 在一个数据集上评估检查点，输出 `path,split,n,accuracy,mean_loss`。
5.  **verify**: 运行不变量校验集，逐项输出 PASS/FAIL。
6.  **bench**: 运行基准测量并写出 CSV 报告。

退出码: 0 成功；1 运行错误或校验失败；2 用法或配置错误。
"""

# --- 核心库导入 ---
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

# --- 1. 设置项目根目录，确保可以正确导入模块 ---
current_script_path = os.path.dirname(os.path.abspath(__file__))
project_root = os.path.dirname(current_script_path)
if project_root not in sys.path:
    sys.path.insert(0, project_root)

# --- 2. 导入自定义模块 ---
from bench.bench_runner import run_bench_suite  # noqa: E402
from configs.config_loader import RunConfig, load_run_config  # noqa: E402
from data.dataset import SPLIT_FILES, generate_dataset, read_dataset_csv, read_splits, write_splits  # noqa: E402
from finetune.ingredient_factory import build_ingredients  # noqa: E402
from main.logging_setup import bind_method, run_logger, setup_logging  # noqa: E402
from main.verify_suite import PROPERTIES, VerifySuite  # noqa: E402
from models.mlp import ModelSpec, evaluate  # noqa: E402
from params.checkpoint import read_checkpoint  # noqa: E402
from params.errors import ConfigError, SoupForgeError  # noqa: E402
from params.store import CheckpointStore  # noqa: E402
from soup.optimizer import SoupTrainConfig, disable_decentralization  # noqa: E402
from soup.results import write_soup_result  # noqa: E402
from soup.soup_engine import METHODS, SoupEngine  # noqa: E402

# --- 3. 加载环境变量 (位于 main 文件夹下的 .env) ---
load_dotenv(dotenv_path=os.path.join(current_script_path, '.env'))

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

TRAINED_METHODS = ("learned-softmax", "hl", "mehl")


def _csv_ints(text: str) -> List[int]:
    try:
        return [int(item) for item in text.split(",") if item.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"需要逗号分隔的整数列表，收到 '{text}'") from e


def _outer_iters(text: str):
    if text == "auto":
        return text
    try:
        return int(text)
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"--outer 需要正整数或 auto，收到 '{text}'") from e


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="soupforge", description="从微调检查点构造 model soup")
    parser.add_argument("--config", default=None, help="INI 配置文件（默认 configs/run.ini）")
    parser.add_argument("--log-dir", default=None, help="日志目录（覆盖 SOUPFORGE_LOG_DIR）")
    parser.add_argument("--log-level", default=None, help="日志级别（覆盖 SOUPFORGE_LOG_LEVEL）")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="生成合成数据集 CSV")
    gen.add_argument("--out", default=None, help="输出目录（默认 [paths] data_dir）")
    gen.add_argument("--seed", type=int, default=None, help="覆盖 [data] seed")

    ft = sub.add_parser("finetune", help="预训练并微调 K 个 ingredient")
    ft.add_argument("--data", default=None, help="数据目录（不存在时按 [data] 生成）")
    ft.add_argument("--out", default=None, help="检查点目录（默认 [paths] checkpoint_dir）")
    ft.add_argument("--k", type=int, default=None, help="ingredient 数量")
    ft.add_argument("--seed", type=int, default=None, help="主种子")
    ft.add_argument("--jobs", type=int, default=None, help="并行微调的线程数")

    soup = sub.add_parser("soup", help="构造 model soup")
    soup.add_argument("--method", required=True, help=f"方法: {', '.join(METHODS)}")
    soup.add_argument("--models", default=None, help="检查点目录或 manifest 文件")
    soup.add_argument("--val", default=None, help="验证集 CSV")
    soup.add_argument("--out", default=None, help="输出目录")
    soup.add_argument("--model-batch", type=int, default=None, help="MEHL-Soup 的模型块大小 b")
    soup.add_argument("--outer", type=_outer_iters, default=None, help="外层迭代数 T（或 auto）")
    soup.add_argument("--inner", type=int, default=None, help="内层迭代数 J")
    soup.add_argument("--data-batch", type=int, default=None, help="验证集小批量大小")
    soup.add_argument("--lr", type=float, default=None, help="系数学习率")
    soup.add_argument("--wd", type=float, default=None, help="系数权重衰减")
    soup.add_argument("--layerwise", action="store_true", help="使用逐层系数（等价于 -plus 方法）")
    soup.add_argument("--no-decentralize", action="store_true", help="不做权重去中心化（消融）")
    soup.add_argument("--reset-adam-per-block", action="store_true", help="每次进入块时重置 AdamW 状态")
    soup.add_argument("--seed", type=int, default=None, help="soup 训练种子")
    soup.add_argument("--residency-ceiling", type=int, default=None, help="常驻整向量数上限")

    ev = sub.add_parser("eval", help="评估一个检查点")
    ev.add_argument("--model", required=True, help="检查点文件")
    ev.add_argument("--data", required=True, help="数据集 CSV")
    ev.add_argument("--label-smoothing", type=float, default=0.0)

    verify = sub.add_parser("verify", help="运行不变量校验集")
    verify.add_argument("--list", action="store_true", help="只列出校验项名称")
    verify.add_argument("--only", type=lambda s: [x for x in s.split(",") if x], default=None,
                        help="只运行这些校验项（逗号分隔）")
    verify.add_argument("--corrupt-grad", action="store_true", help="故障注入：翻转一个梯度分量的符号")
    verify.add_argument("--seed", type=int, default=0)

    bench = sub.add_parser("bench", help="运行基准测量并写出 CSV")
    bench.add_argument("--models", default=None, help="复用已有的 ingredient 池")
    bench.add_argument("--data", default=None, help="数据目录（不存在时按 [data] 生成）")
    bench.add_argument("--out", default=None, help="输出目录（默认 [paths] output_dir）")
    bench.add_argument("--methods", type=lambda s: [x for x in s.split(",") if x], default=None)
    bench.add_argument("--sensitivity", type=_csv_ints, default=None, help="例如 0,2,6")
    bench.add_argument("--convergence", type=_csv_ints, default=None, help="例如 4,16,64,256")
    bench.add_argument("--ablation", action="store_true")
    bench.add_argument("--with-references", action="store_true", help="附加最佳单模型与集成的准确率")
    bench.add_argument("--k", type=int, default=None)
    bench.add_argument("--seed", type=int, default=None)
    return parser


# --- 4. 各子命令 ---
def _load_or_generate_splits(config: RunConfig, data_dir: Path, log: logging.LoggerAdapter):
    if all((data_dir / name).is_file() for name in SPLIT_FILES.values()):
        return read_splits(data_dir, config.model.num_classes)
    log.info(f"数据目录 {data_dir} 中没有数据集，按 [data] 生成")
    splits = generate_dataset(config.data)
    write_splits(splits, data_dir)
    return splits


def _require_file(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what}不存在: {path}")
    return path


def _check_model_batch(soup_cfg: SoupTrainConfig, k: int) -> None:
    if soup_cfg.model_batch > k:
        raise ConfigError(f"--model-batch={soup_cfg.model_batch} 超过检查点数 K={k}")


def cmd_gen(args, config: RunConfig, log: logging.LoggerAdapter) -> int:
    spec = config.data if args.seed is None else config.data.model_copy(update={"seed": args.seed})
    out_dir = Path(args.out) if args.out else config.paths.data_dir
    paths = write_splits(generate_dataset(spec), out_dir)
    for role, path in paths.items():
        print(f"{role},{path}")
    log.info(f"数据集已写出: {out_dir}")
    return EXIT_OK


def cmd_finetune(args, config: RunConfig, log: logging.LoggerAdapter) -> int:
    settings = config.finetune
    updates = {key: value for key, value in (("k", args.k), ("master_seed", args.seed), ("jobs", args.jobs))
               if value is not None}
    if updates.get("k", settings.k) < 1:
        raise ConfigError(f"--k 必须 ≥ 1，收到 {updates['k']}")
    if updates.get("jobs", settings.jobs) < 1:
        raise ConfigError(f"--jobs 必须 ≥ 1，收到 {updates['jobs']}")
    settings = settings.model_copy(update=updates)

    data_dir = Path(args.data) if args.data else config.paths.data_dir
    splits = _load_or_generate_splits(config, data_dir, log)
    out_dir = Path(args.out) if args.out else config.paths.checkpoint_dir
    pool = build_ingredients(splits["train"], config.model, settings, out_dir)
    print(f"manifest,{pool.manifest}")
    return EXIT_OK


def cmd_soup(args, config: RunConfig, log: logging.LoggerAdapter) -> int:
    engine = SoupEngine()
    method = args.method
    if args.layerwise and method in TRAINED_METHODS:
        method = f"{method}-plus"
    engine.check_method(method)
    bind_method(log, method)

    overrides = {
        "model_batch": args.model_batch,
        "outer_iters": args.outer,
        "inner_iters": args.inner,
        "data_batch": args.data_batch,
        "lr": args.lr,
        "weight_decay": args.wd,
        "seed": args.seed,
    }
    values = {**config.soup.model_dump(), **{k: v for k, v in overrides.items() if v is not None}}
    if args.reset_adam_per_block:
        values["reset_adam_per_block"] = True
    try:
        soup_cfg = type(config.soup).model_validate(values)
    except ValueError as e:
        raise ConfigError(f"soup 参数非法: {e}") from e
    if args.no_decentralize:
        soup_cfg = disable_decentralization(soup_cfg)

    models = Path(args.models) if args.models else config.paths.checkpoint_dir
    val_path = _require_file(Path(args.val) if args.val else config.paths.data_dir / SPLIT_FILES["validation"],
                             "验证集")
    store_settings = config.store
    if args.residency_ceiling is not None:
        try:
            store_settings = type(config.store).model_validate(
                {**config.store.model_dump(), "residency_ceiling": args.residency_ceiling})
        except ValueError as e:
            raise ConfigError(f"--residency-ceiling 非法: {e}") from e
    store = CheckpointStore.open(_require_file(models, "检查点目录"), store_settings.manifest,
                                 store_settings.residency_ceiling)
    if method.startswith("mehl"):
        _check_model_batch(soup_cfg, len(store))
    spec = ModelSpec.from_layer_map(store.layer_map, config.model.activation)
    val = read_dataset_csv(val_path, "validation", spec.num_classes)

    result = engine.run(method, store, spec, val, soup_cfg)
    out_dir = Path(args.out) if args.out else config.paths.output_dir / method
    paths = write_soup_result(result, store.layer_map, out_dir)
    log.info(f"soup 已写出: method={method}, out={out_dir}, peak_resident={store.peak_resident}")
    print(f"{method},{paths['soup']}")
    return EXIT_OK


def cmd_eval(args, config: RunConfig, log: logging.LoggerAdapter) -> int:
    model_path = _require_file(Path(args.model), "检查点")
    data_path = _require_file(Path(args.data), "数据集")
    layer_map, params = read_checkpoint(model_path)
    spec = ModelSpec.from_layer_map(layer_map, config.model.activation)
    data = read_dataset_csv(data_path, num_classes=spec.num_classes)
    result = evaluate(spec, params, data, args.label_smoothing)
    print(f"{model_path},{data.role},{len(data)},{result.accuracy:.17g},{result.value:.17g}")
    return EXIT_OK


def cmd_verify(args, config: RunConfig, log: logging.LoggerAdapter) -> int:
    if args.list:
        for name in PROPERTIES:
            print(name)
        return EXIT_OK
    if args.only:
        unknown = [name for name in args.only if name not in PROPERTIES]
        if unknown:
            raise ConfigError(f"未知的校验项 {unknown}，可选: {', '.join(PROPERTIES)}")
    with VerifySuite(seed=args.seed, corrupt_grad=args.corrupt_grad) as suite:
        results = suite.run(args.only)
    for r in results:
        print(f"{r.name},{'PASS' if r.passed else 'FAIL'},{r.seconds:.3f},{r.detail}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        log.error(f"校验失败: {failed}")
        return EXIT_FAILURE
    return EXIT_OK


def cmd_bench(args, config: RunConfig, log: logging.LoggerAdapter) -> int:
    settings = config.bench
    updates = {
        "methods": args.methods,
        "sensitivity": args.sensitivity,
        "convergence": args.convergence,
    }
    settings = settings.model_copy(update={k: v for k, v in updates.items() if v is not None})
    if args.ablation:
        settings = settings.model_copy(update={"ablation": True})
    if args.with_references:
        settings = settings.model_copy(update={"with_references": True})
    engine = SoupEngine()
    for method in settings.methods:
        engine.check_method(method)

    soup_cfg = config.soup if args.seed is None else config.soup.model_copy(update={"seed": args.seed})
    ft_updates = {key: value for key, value in (("k", args.k), ("master_seed", args.seed)) if value is not None}
    if ft_updates.get("k", config.finetune.k) < 1:
        raise ConfigError(f"--k 必须 ≥ 1，收到 {ft_updates['k']}")
    ft_settings = config.finetune.model_copy(update=ft_updates)

    out_dir = Path(args.out) if args.out else config.paths.output_dir
    data_dir = Path(args.data) if args.data else config.paths.data_dir
    splits = _load_or_generate_splits(config, data_dir, log)
    if args.models:
        models = _require_file(Path(args.models), "检查点目录")
    else:
        models = build_ingredients(splits["train"], config.model, ft_settings, out_dir / "pool").root
    store = CheckpointStore.open(models, config.store.manifest, config.store.residency_ceiling)
    spec = ModelSpec.from_layer_map(store.layer_map, config.model.activation)
    if any(m.startswith("mehl") for m in settings.methods):
        _check_model_batch(soup_cfg, len(store))
    if settings.sensitivity and max(settings.sensitivity) >= len(store):
        raise ConfigError(f"--sensitivity 的最大值 {max(settings.sensitivity)} 必须小于 K={len(store)}")

    convergence_store = convergence_spec = None
    if settings.convergence:
        convergence_spec = config.model.model_copy(update={"hidden_dims": []})
        linear_pool = build_ingredients(splits["train"], convergence_spec, ft_settings, out_dir / "pool_linear")
        convergence_store = CheckpointStore.open(linear_pool.root, config.store.manifest,
                                                 config.store.residency_ceiling)

    written = run_bench_suite(store, spec, splits["validation"], splits["test"], soup_cfg, settings, out_dir,
                              convergence_store, convergence_spec)
    for name, path in written.items():
        print(f"{name},{path}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "finetune": cmd_finetune,
    "soup": cmd_soup,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "bench": cmd_bench,
}


def main(argv: Optional[List[str]] = None) -> int:
    """解析参数并分派子命令，返回退出码。"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK

    logger = setup_logging(args.log_dir, args.log_level)
    log = run_logger(logger, args.command)

    try:
        config = load_run_config(args.config)
        return COMMANDS[args.command](args, config, log)
    except (ConfigError, FileNotFoundError) as e:
        log.error(f"{args.command} 参数或配置错误: {e}")
        return EXIT_USAGE
    except SoupForgeError as e:
        log.error(f"{args.command} 运行失败 [{e.code}]: {e}")
        return EXIT_FAILURE
    except Exception as e:
        log.exception(f"{args.command} 运行失败: {e}")
        return EXIT_FAILURE


# 当该脚本作为主程序直接运行时，调用 main() 函数
if __name__ == "__main__":
    sys.exit(main())
