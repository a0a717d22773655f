# -*- coding: utf-8 -*-
"""
日志配置：文件中每行一个 JSON 对象，控制台（stderr）使用普通格式。

库代码只使用 logging.getLogger("SoupForge.<模块>")，处理器只在这里配置。
"""
import json
import logging
import os
import sys
import uuid
from datetime import datetime
from typing import Dict, Optional

ROOT_LOGGER = "SoupForge"
LOG_FILE_NAME = "soupforge_runs.log"

current_script_path = os.path.dirname(os.path.abspath(__file__))
project_root = os.path.dirname(current_script_path)


class JsonFormatter(logging.Formatter):
    """自定义JSON格式化器，将日志记录格式化为JSON字符串"""

    def format(self, record):
        log_dict = {
            'timestamp': datetime.fromtimestamp(record.created).strftime('%Y-%m-%d %H:%M:%S'),
            'run_id': getattr(record, 'run_id', 'unknown'),
            'level': record.levelname,
            'logger': record.name,
            'message': record.getMessage(),
            'module': record.module,
            'function': record.funcName,
            'line': record.lineno
        }
        # 子命令与 soup 方法：库代码的记录由 RunContextFilter 补上
        for key in ('command', 'method'):
            value = getattr(record, key, None)
            if value:
                log_dict[key] = value

        if record.exc_info:
            log_dict['exception'] = self.formatException(record.exc_info)

        return json.dumps(log_dict, ensure_ascii=False)


def setup_logging(log_dir: Optional[str] = None, level: Optional[str] = None) -> logging.Logger:
    """
    设置日志系统

    :param log_dir: 日志目录，默认取环境变量 SOUPFORGE_LOG_DIR，再默认 <项目根>/logs
    :param level: 日志级别，默认取环境变量 SOUPFORGE_LOG_LEVEL，再默认 INFO
    """
    logs_dir = log_dir or os.getenv("SOUPFORGE_LOG_DIR") or os.path.join(project_root, "logs")
    os.makedirs(logs_dir, exist_ok=True)
    log_file = os.path.join(logs_dir, LOG_FILE_NAME)

    level_name = (level or os.getenv("SOUPFORGE_LOG_LEVEL") or "INFO").upper()
    logger = logging.getLogger(ROOT_LOGGER)
    logger.setLevel(getattr(logging, level_name, logging.INFO))

    # 清除已有的处理器（避免重复添加）
    for handler in list(logger.handlers):
        handler.close()
        logger.removeHandler(handler)

    file_handler = logging.FileHandler(log_file, encoding='utf-8')
    file_handler.setFormatter(JsonFormatter())

    # 控制台走 stderr，stdout 留给命令输出
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s'))

    logger.addHandler(file_handler)
    logger.addHandler(console_handler)
    logger.propagate = False
    return logger


class RunContextFilter(logging.Filter):
    """
    给所有记录（包括库代码的子 logger）附上本次运行的上下文：run_id、子命令，
    以及确定之后的 soup 方法。context 与 LoggerAdapter.extra 是同一个 dict。
    """

    def __init__(self, context: Dict[str, str]):
        super().__init__()
        self.context = context

    def filter(self, record: logging.LogRecord) -> bool:
        for key, value in self.context.items():
            if not hasattr(record, key):
                setattr(record, key, value)
        return True


def run_logger(logger: logging.Logger, command: Optional[str] = None,
               run_id: Optional[str] = None) -> logging.LoggerAdapter:
    """创建带运行上下文的 LoggerAdapter；之后用 bind_method 补上 soup 方法名。"""
    context = {'run_id': run_id or uuid.uuid4().hex[:12]}
    if command:
        context['command'] = command
    for handler in logger.handlers:
        handler.addFilter(RunContextFilter(context))
    return logging.LoggerAdapter(logger, context)


def bind_method(log: logging.LoggerAdapter, method: str) -> None:
    log.extra['method'] = method
