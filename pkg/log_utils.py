#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
日志配置
"""

import logging
from pathlib import Path
from typing import Optional, Union

ROOT_LOGGER_NAME = 'landmark_toolkit'
LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


def get_logger(module: str) -> logging.Logger:
    """获取模块日志器，挂在工具包根日志器之下"""
    return logging.getLogger(f'{ROOT_LOGGER_NAME}.{module}')


def setup_logging(log_file: Optional[Union[str, Path]] = None,
                  level: int = logging.INFO) -> logging.Logger:
    """设置日志配置（控制台 + 可选文件）"""
    logger = logging.getLogger(ROOT_LOGGER_NAME)
    logger.setLevel(level)

    formatter = logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT)

    if not logger.handlers:
        # 控制台handler
        console_handler = logging.StreamHandler()
        console_handler.setFormatter(formatter)
        logger.addHandler(console_handler)

    if log_file is not None:
        log_file = Path(log_file)
        known = {getattr(h, 'baseFilename', None) for h in logger.handlers}
        if str(log_file.resolve()) not in known:
            log_file.parent.mkdir(parents=True, exist_ok=True)
            # 文件handler
            file_handler = logging.FileHandler(log_file, encoding='utf-8')
            file_handler.setFormatter(formatter)
            logger.addHandler(file_handler)

    return logger
