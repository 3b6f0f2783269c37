import numpy as np
import pytest

from stemforge.denoiser import Denoiser, DenoiserConfig
from stemforge.diffusion import build_schedule


@pytest.fixture(scope="session")
def micro_config():
    return DenoiserConfig(tracks=2, latent_dim=2, frames=8, hidden=4, depth=1,
                          time_embed_dim=4, vocab_size=8, prompt_embed_dim=4,
                          cond_width=8)


@pytest.fixture(scope="session")
def micro_model(micro_config):
    return Denoiser(micro_config)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def short_schedule():
    return build_schedule("linear", 10, 1e-3, 0.05)
