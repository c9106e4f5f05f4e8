"""
日志工具模块
"""
import logging
import colorlog
from config import config


def setup_logger(name: str = "CLASH", level: str = config.LOG_LEVEL) -> logging.Logger:
    """设置彩色日志：控制台彩色输出 + 文件完整记录"""

    logger = logging.getLogger(name)
    logger.setLevel(getattr(logging, level.upper(), logging.INFO))

    # 避免重复添加 handler
    if logger.handlers:
        return logger

    # 控制台 handler（彩色，输出到 stderr，stdout 留给 key=value 结果）
    console_handler = colorlog.StreamHandler()
    console_handler.setLevel(getattr(logging, level.upper(), logging.INFO))
    console_handler.setFormatter(colorlog.ColoredFormatter(
        "%(log_color)s%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        datefmt="%Y-%m-%d %H:%M:%S",
        log_colors={
            "DEBUG": "cyan",
            "INFO": "green",
            "WARNING": "yellow",
            "ERROR": "red",
            "CRITICAL": "red,bg_white",
        }
    ))
    logger.addHandler(console_handler)

    # 文件 handler（首次写入时才创建文件）
    if config.LOG_FILE:
        file_handler = logging.FileHandler(config.LOG_FILE, encoding="utf-8", delay=True)
        file_handler.setLevel(logging.DEBUG)
        file_handler.setFormatter(logging.Formatter(
            "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S"
        ))
        logger.addHandler(file_handler)

    return logger


def get_logger(component: str) -> logging.Logger:
    """获取子模块 logger，复用根 logger 的 handler"""
    return logger.getChild(component)


# 创建全局 logger
logger = setup_logger()
