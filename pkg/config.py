"""
配置管理模块
从环境变量加载运行配置，从 key=value 文档加载搜索/重训练配置
"""
import os
from typing import Any, Dict, Optional, Tuple
from dotenv import load_dotenv, dotenv_values

from utils.errors import ConfigError

# 加载环境变量
load_dotenv()

# 工具版本（写入运行清单）
VERSION = "1.0.0"


class Config:
    """全局配置类"""

    # 日志配置
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    LOG_FILE: str = os.getenv("LOG_FILE", "clash.log")

    # 并行配置（仅对 transform / metrics 生效）
    THREADS: int = int(os.getenv("THREADS", "1"))

    # 默认随机种子
    DEFAULT_SEED: int = int(os.getenv("DEFAULT_SEED", "7"))

    # DSTF 配置
    DSTF_NORM: str = os.getenv("DSTF_NORM", "per-frame")
    DSTF_DEGENERATE: str = os.getenv("DSTF_DEGENERATE", "zero")

    # 描述子度量
    ENTROPY_BINS: int = int(os.getenv("ENTROPY_BINS", "256"))

    # GeM 下限
    GEM_EPS: float = float(os.getenv("GEM_EPS", "1e-6"))

    @classmethod
    def validate(cls) -> bool:
        """验证配置项取值"""
        if cls.DSTF_NORM not in ("per-frame", "per-seq"):
            raise ConfigError("DSTF_NORM", f"未知的归一化方式: {cls.DSTF_NORM}")
        if cls.DSTF_DEGENERATE not in ("skip", "zero", "error"):
            raise ConfigError("DSTF_DEGENERATE", f"未知的退化帧策略: {cls.DSTF_DEGENERATE}")
        if cls.THREADS < 1:
            raise ConfigError("THREADS", "线程数必须 >= 1")
        if cls.ENTROPY_BINS < 2:
            raise ConfigError("ENTROPY_BINS", "直方图箱数必须 >= 2")
        return True


def _int_tuple(value: str) -> Tuple[int, ...]:
    parts = [p for p in value.replace(" ", "").split(",") if p]
    return tuple(int(p) for p in parts)


EXTRACTOR_PRESETS: Dict[str, Tuple[int, ...]] = {
    "toy": (8, 16, 32, 32),
    "standard": (32, 64, 128, 128),
    "large": (64, 64, 128, 128, 256, 256),
}

DESCRIPTOR_CHOICES: Tuple[str, ...] = ("sil+dstf", "sil+bidt", "sil", "dstf", "sil+gei", "dstf+gei")
FUSIONS: Tuple[str, ...] = ("cell", "add", "concat", "none")


class SearchConfig:
    """
    架构搜索 / 重训练 / 评估配置

    配置文档使用与 .env 相同的 key=value 语法，键名大写。
    """

    # key: (类型转换, 默认值, 说明)
    SCHEMA: Dict[str, Tuple[Any, Any, str]] = {
        "U": (int, 1, "每次 α 更新前的权重更新步数"),
        "LR_ALPHA": (float, 1e-3, "架构参数 α 的 Adam 学习率"),
        "LR_W": (float, 1e-3, "网络权重 w 的 Adam 学习率"),
        "BETA1_ALPHA": (float, 0.5, "α 的 Adam β1"),
        "BETA2_ALPHA": (float, 0.999, "α 的 Adam β2"),
        "BETA1_W": (float, 0.9, "w 的 Adam β1"),
        "BETA2_W": (float, 0.999, "w 的 Adam β2"),
        "ADAM_EPS": (float, 1e-8, "Adam 数值稳定项"),
        "MARGIN": (float, 0.2, "三元组损失间隔"),
        "P": (int, 8, "每批身份数"),
        "K": (int, 2, "每个身份的序列数"),
        "SEARCH_ITERATIONS": (int, 2000, "搜索阶段 α 更新次数"),
        "RETRAIN_ITERATIONS": (int, 3000, "重训练迭代次数"),
        "SEED": (int, Config.DEFAULT_SEED, "随机种子"),
        "VAL_FRACTION": (float, 0.5, "每个身份划入验证集的比例"),
        "CLIP_LENGTH": (int, 8, "采样片段帧数"),
        "CHANNELS": (_int_tuple, (8, 16, 32, 32), "特征提取器通道"),
        "EXTRACTOR_PRESET": (str, "", "通道预设 toy|standard|large，非空时覆盖 CHANNELS"),
        "PARTS": (int, 4, "水平条带数"),
        "EMBED_DIM": (int, 32, "每条带嵌入维度"),
        "LEAKY_SLOPE": (float, 0.01, "LeakyReLU 负半轴斜率"),
        "CHECKPOINT_EVERY": (int, 500, "每隔多少次迭代保存权重"),
        "LOG_EVERY": (int, 50, "每隔多少次迭代输出日志"),
        "NUM_IDS": (int, 8, "合成语料身份数"),
        "SEQS_PER_ID": (int, 4, "每个身份的训练序列数"),
        "EVAL_SEQS_PER_ID": (int, 4, "每个身份的留出评估序列数"),
        "FRAMES": (int, 16, "每条序列帧数"),
        "HEIGHT": (int, 16, "帧高度"),
        "WIDTH": (int, 12, "帧宽度"),
        "NOISE_PROB": (float, 0.0, "椒盐噪声概率"),
        "DESCRIPTORS": (str, "sil+dstf", "输入描述子 sil+dstf|sil+bidt|sil|dstf|sil+gei|dstf+gei"),
        "FUSION": (str, "cell", "融合方式 cell|add|concat|none（none 仅用于单一描述子）"),
    }

    def __init__(self, **overrides: Any):
        for key, (_, default, _) in self.SCHEMA.items():
            setattr(self, key.lower(), default)
        for key, value in overrides.items():
            if key.upper() not in self.SCHEMA:
                raise ConfigError(key, f"未知的配置项: {key}")
            setattr(self, key.lower(), value)
        self._apply_preset()

    @classmethod
    def from_file(cls, path: Optional[str]) -> "SearchConfig":
        """从 key=value 文档加载配置，未给出路径时返回默认配置"""
        if not path:
            return cls()
        if not os.path.isfile(path):
            raise ConfigError("--config", f"配置文件不存在: {path}")

        raw = dotenv_values(path)
        parsed: Dict[str, Any] = {}
        for key, value in raw.items():
            upper = key.upper()
            if upper not in cls.SCHEMA:
                raise ConfigError(key, f"未知的配置项: {key}")
            convert = cls.SCHEMA[upper][0]
            try:
                parsed[upper] = convert(value or "")
            except ValueError as e:
                raise ConfigError(key, f"配置项 {key} 取值无效: {value!r} ({e})")
        return cls(**parsed)

    def _apply_preset(self):
        if self.extractor_preset:
            if self.extractor_preset not in EXTRACTOR_PRESETS:
                raise ConfigError("EXTRACTOR_PRESET", f"未知的预设: {self.extractor_preset}")
            self.channels = EXTRACTOR_PRESETS[self.extractor_preset]

    @property
    def descriptor_names(self) -> Tuple[str, ...]:
        """按输入顺序排列的描述子名字"""
        return tuple(self.descriptors.split("+"))

    def validate(self) -> bool:
        """验证取值范围"""
        checks = [
            ("U", self.u >= 1, "U 必须 >= 1"),
            ("P", self.p >= 2, "P 必须 >= 2"),
            ("K", self.k >= 2, "K 必须 >= 2"),
            ("VAL_FRACTION", 0 < self.val_fraction < 1, "VAL_FRACTION 必须在 (0, 1) 内"),
            ("CHANNELS", len(self.channels) >= 1 and min(self.channels) > 0, "CHANNELS 必须为正"),
            ("PARTS", self.parts >= 1, "PARTS 必须 >= 1"),
            ("CLIP_LENGTH", self.clip_length >= 1, "CLIP_LENGTH 必须 >= 1"),
            ("DESCRIPTORS", self.descriptors in DESCRIPTOR_CHOICES, f"DESCRIPTORS 必须为 {'|'.join(DESCRIPTOR_CHOICES)}"),
            ("FUSION", self.fusion in FUSIONS, f"FUSION 必须为 {'|'.join(FUSIONS)}"),
            ("FUSION", (self.fusion == "none") == (len(self.descriptor_names) == 1),
             "单一描述子必须使用 FUSION=none，双描述子不能使用 FUSION=none"),
            ("SEARCH_ITERATIONS", self.search_iterations >= 0, "迭代次数不能为负"),
            ("RETRAIN_ITERATIONS", self.retrain_iterations >= 0, "迭代次数不能为负"),
            ("LR_ALPHA", self.lr_alpha >= 0, "学习率不能为负"),
            ("LR_W", self.lr_w >= 0, "学习率不能为负"),
        ]
        for key, ok, message in checks:
            if not ok:
                raise ConfigError(key, message)
        if self.num_ids < self.p:
            raise ConfigError("NUM_IDS", f"NUM_IDS ({self.num_ids}) 不能小于 P ({self.p})")
        return True

    def to_dict(self) -> Dict[str, Any]:
        """转换为字典（键名大写）"""
        return {key: getattr(self, key.lower()) for key in self.SCHEMA}

    def to_text(self) -> str:
        """序列化为 key=value 文档"""
        lines = []
        for key, value in self.to_dict().items():
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            lines.append(f"{key}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def schema_text(cls) -> str:
        """打印用的配置说明"""
        lines = []
        for key, (_, default, help_text) in cls.SCHEMA.items():
            if isinstance(default, tuple):
                default = ",".join(str(v) for v in default)
            lines.append(f"{key}={default}    # {help_text}")
        return "\n".join(lines)


# 创建全局配置实例
config = Config()
