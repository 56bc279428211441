#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
日志系统
Logging System
"""

import logging
import os
from datetime import datetime
from typing import Optional

LOGGER_NAME = 'face_analysis'


def setup_logger(log_level=logging.INFO, log_dir: Optional[str] = "logs"):
    """
    设置日志系统
    Setup logging system; ``log_dir=None`` logs to the console only.
    """
    handlers = [logging.StreamHandler()]
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        # 日志文件名包含时间戳
        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S")
        log_file = os.path.join(log_dir, f"{LOGGER_NAME}_{timestamp}.log")
        handlers.append(logging.FileHandler(log_file, encoding='utf-8'))

    logging.basicConfig(
        level=log_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        datefmt='%Y-%m-%d %H:%M:%S',
        handlers=handlers,
        force=True,
    )

    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(log_level)
    return logger
