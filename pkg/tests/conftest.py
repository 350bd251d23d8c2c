import numpy as np
import pytest
import torch

from speechbridge import config as cfgmod
from speechbridge.corpus import CorpusConfig, synth_corpus
from speechbridge.model import ModelConfig, init_model
from speechbridge.trainer import CorpusData


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small fast corpus for unit tests: 4 utterances, short segments."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    cfg = CorpusConfig(n_speakers=2, n_utterances=4, n_phonemes=4,
                       min_phones=2, max_phones=3, min_dur=3, max_dur=8, seed=11)
    manifest = synth_corpus(cfg, root)
    return manifest, root


@pytest.fixture(scope="session")
def tiny_data(tiny_corpus):
    manifest, root = tiny_corpus
    return CorpusData(manifest, root)


@pytest.fixture()
def flat_cfg(tiny_corpus):
    manifest, _root = tiny_corpus
    cfg = cfgmod.default_config()
    cfg["model.inventory_size"] = manifest.inventory.size
    cfg["model.dropout"] = 0.0
    cfg["train.max_steps"] = 4
    cfg["train.batch_size"] = 4
    cfg["train.log_interval"] = 2
    cfg["train.checkpoint_interval"] = 0
    cfg["finetune.tts_stage1_steps"] = 3
    cfg["finetune.tts_stage2_steps"] = 3
    cfg["finetune.vc_steps"] = 3
    cfg["finetune.asr_steps"] = 3
    cfg["finetune.batch_size"] = 2
    return cfg


@pytest.fixture()
def tiny_model(flat_cfg):
    return init_model(ModelConfig.from_flat(flat_cfg), seed=5)


@pytest.fixture(autouse=True)
def _stable_torch():
    torch.manual_seed(0)
    np.random.seed(0)
