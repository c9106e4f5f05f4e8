"""
共享测试夹具
"""
import numpy as np
import pytest

from config import SearchConfig
from services.silhouette import WalkerParams, build_corpus, synth_walker


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def walker_params():
    return WalkerParams(torso_axes=(3.0, 4.0), limb_amplitude=3.0, stride_period=8)


@pytest.fixture
def walker(walker_params):
    """16 帧、32×22 的无噪声步行者"""
    return synth_walker(walker_params, T=16, H=32, W=22, seed=7, subject_id="id00", view_id="seq00")


@pytest.fixture
def small_corpus():
    """3 个身份 × 2 条序列 × 8 帧，16×12"""
    return build_corpus(num_ids=3, seqs_per_id=2, T=8, H=16, W=12, seed=3)


@pytest.fixture
def tiny_config():
    """几秒内能跑完的搜索配置"""
    return SearchConfig(
        U=2,
        P=2,
        K=2,
        SEARCH_ITERATIONS=2,
        RETRAIN_ITERATIONS=2,
        SEED=11,
        CLIP_LENGTH=4,
        CHANNELS=(4, 4),
        PARTS=2,
        EMBED_DIM=4,
        NUM_IDS=2,
        SEQS_PER_ID=2,
        EVAL_SEQS_PER_ID=2,
        FRAMES=6,
        HEIGHT=16,
        WIDTH=12,
        LOG_EVERY=0,
        CHECKPOINT_EVERY=0,
    )


TINY_CONFIG_TEXT = """\
U=2
P=2
K=2
SEARCH_ITERATIONS=2
RETRAIN_ITERATIONS=2
SEED=11
CLIP_LENGTH=4
CHANNELS=4,4
PARTS=2
EMBED_DIM=4
NUM_IDS=2
SEQS_PER_ID=2
EVAL_SEQS_PER_ID=2
FRAMES=6
HEIGHT=16
WIDTH=12
LOG_EVERY=0
CHECKPOINT_EVERY=0
"""


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "search.env"
    path.write_text(TINY_CONFIG_TEXT)
    return str(path)
