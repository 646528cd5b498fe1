import numpy as np
import pytest
import torch

from snapdiff.config import make_config
from snapdiff.corpus import Corpus


def micro_config(**overrides):
    """Tiny configuration for fast end-to-end tests."""
    base = dict(n_concepts=6, n_train=4, images_per_concept=4,
                ti_images_per_concept=2, enc_epochs=4, base_epochs=4,
                mlp_epochs=8, ft_epochs=1, ti_steps=5, timesteps=50,
                ddim_steps=5, unet_width=16, d_tok=32, d_img_out=32,
                d_txt_out=32, mlp_hidden=32, bench_ti_steps=20)
    base.update(overrides)
    return make_config("desk", **base)


@pytest.fixture(scope="session")
def micro_cfg():
    return micro_config()


@pytest.fixture(scope="session")
def micro_corpus(micro_cfg):
    return Corpus.generate(micro_cfg)


@pytest.fixture(scope="session")
def desk_cfg():
    return make_config("desk")


@pytest.fixture(scope="session")
def desk_corpus(desk_cfg):
    return Corpus.generate(desk_cfg)


@pytest.fixture(scope="session")
def micro_stack(micro_cfg, micro_corpus):
    """Lightly trained encoder + base model shared by downstream tests."""
    from snapdiff.diffusion import train_base
    from snapdiff.encoders import contrastive_pretrain
    torch.manual_seed(0)
    encoder, _ = contrastive_pretrain(micro_corpus, micro_cfg, epochs=2)
    model, schedule, _ = train_base(micro_corpus, encoder, micro_cfg, epochs=2)
    return encoder, model, schedule


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)
    np.random.seed(0)
